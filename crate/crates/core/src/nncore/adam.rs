use serde::{Deserialize, Serialize};

use super::{Layer, Param, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias correction. Moment buffers are matched to the trainable
/// parameters of one network in visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Applies one update to every trainable parameter of `net`.
    ///
    /// All gradients are checked for finiteness before anything is written;
    /// a non-finite gradient aborts with the parameter name and step.
    pub fn step(&mut self, net: &mut dyn Layer<T>) -> Result<()> {
        let next = self.step + 1;
        let mut bad: Option<String> = None;
        let mut sizes = Vec::new();
        net.visit(&mut |p| {
            if !p.trainable {
                return;
            }
            sizes.push(p.numel());
            if bad.is_none() && p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite { name, step: next });
        }
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.second = self.first.clone();
        } else if self.first.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(Error::Config("Adam moment buffers do not match the network".into()));
        }

        self.step = next;
        let c = self.config;
        let t = self.step as i32;
        let corr1 = 1.0 - c.beta1.powi(t);
        let corr2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        net.visit_mut(&mut |p: &mut Param<T>| {
            if !p.trainable {
                return;
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            idx += 1;
            let Some(grad) = p.grad().map(<[T]>::to_vec) else {
                // no gradient yet: moments decay, parameter stays put
                m.iter_mut().for_each(|x| *x = *x * b1);
                v.iter_mut().for_each(|x| *x = *x * b2);
                return;
            };
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + ob1 * *g;
                *vi = b2 * *vi + ob2 * *g * *g;
                let mhat = mi.as_f64() / corr1;
                let vhat = vi.as_f64() / corr2;
                *w = T::of(w.as_f64() - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
        });
        Ok(())
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("inconsistent Adam moment buffers".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{Ctx, Tensor};

    /// A single learnable scalar `w` with loss supplied by the test.
    struct Scalar1 {
        w: Param<f64>,
    }

    impl Layer<f64> for Scalar1 {
        fn forward(&mut self, x: &Tensor<f64>, _: &mut Ctx) -> Result<Tensor<f64>> {
            Ok(x.clone())
        }
        fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(g.clone())
        }
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.w)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.w)
        }
    }

    fn scalar(w: f64) -> Scalar1 {
        Scalar1 {
            w: Param::new("w", Tensor::full([1, 1, 1, 1], w)),
        }
    }

    fn set_grad(s: &mut Scalar1, g: f64) {
        s.w.grad_mut()[0] = g;
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar(0.3);
        set_grad(&mut s, 0.0);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.w.value.data()[0], 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar(1.0);
        set_grad(&mut s, 1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        Adam::new(cfg).unwrap().step(&mut s).unwrap();
        assert!((s.w.value.data()[0] - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut s = scalar(1.0);
        set_grad(&mut s, f64::NAN);
        let err = Adam::new(AdamConfig::default()).unwrap().step(&mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name, step: 1 } if name == "w"), "{err}");
        assert_eq!(s.w.value.data()[0], 1.0);
    }

    #[test]
    fn quadratic_descends() {
        // f(w) = w^2 from w = 1, lr 0.1
        let mut s = scalar(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let mut trace = vec![1.0f64];
        for _ in 0..100 {
            let w = s.w.value.data()[0];
            set_grad(&mut s, 2.0 * w);
            adam.step(&mut s).unwrap();
            trace.push(s.w.value.data()[0].abs());
        }
        // steadily shrinking until it first reaches the noise floor near 0
        let warm = 5;
        let settle = trace.iter().position(|&w| w < 0.05).unwrap();
        assert!(settle > warm);
        assert!(trace[warm..settle].windows(2).all(|p| p[1] < p[0]), "{trace:?}");
        assert!(trace[100] < 0.1, "{}", trace[100]);
    }
}
