use serde::{Deserialize, Serialize};

use super::{Ctx, Layer, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActKind {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

/// Elementwise activation.
pub fn activation<T: Scalar>(input: &Tensor<T>, kind: ActKind) -> Tensor<T> {
    let mut out = input.clone();
    match kind {
        ActKind::Relu => exec::zip_map(out.data_mut(), input.data(), |&v| v.max(T::zero())),
        ActKind::LeakyRelu { slope } => {
            let s = T::of(slope);
            exec::zip_map(out.data_mut(), input.data(), |&v| if v > T::zero() { v } else { v * s })
        }
        ActKind::Tanh => exec::zip_map(out.data_mut(), input.data(), |&v| v.tanh()),
    }
    out
}

#[derive(Debug, Clone)]
pub struct Activation<T> {
    pub kind: ActKind,
    // input for the rectifiers, output for tanh
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActKind) -> Self {
        Activation { kind, cache: None }
    }
}

impl<T: Scalar> Layer<T> for Activation<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Result<Tensor<T>> {
        let y = activation(x, self.kind);
        self.cache = Some(match self.kind {
            ActKind::Tanh => y.clone(),
            _ => x.clone(),
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cached = self
            .cache
            .take()
            .ok_or_else(|| Error::Config("activation backward without forward".into()))?;
        if cached.shape() != grad_out.shape() {
            return Err(Error::shape("activation backward", &cached.shape(), &grad_out.shape()));
        }
        let mut g = grad_out.clone();
        let pairs: Vec<(T, T)> = cached.data().iter().copied().zip(grad_out.data().iter().copied()).collect();
        match self.kind {
            ActKind::Relu => exec::zip_map(g.data_mut(), &pairs, |&(x, d)| if x > T::zero() { d } else { T::zero() }),
            ActKind::LeakyRelu { slope } => {
                let s = T::of(slope);
                exec::zip_map(g.data_mut(), &pairs, |&(x, d)| if x > T::zero() { d } else { d * s })
            }
            ActKind::Tanh => exec::zip_map(g.data_mut(), &pairs, |&(y, d)| d * (T::one() - y * y)),
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, kind: ActKind) -> f64 {
        activation(&Tensor::<f64>::full([1, 1, 1, 1], v), kind).data()[0]
    }

    #[test]
    fn definitions() {
        assert!((scalar(-1.0, ActKind::LeakyRelu { slope: 0.2 }) + 0.2).abs() < 1e-15);
        assert_eq!(scalar(-5.0, ActKind::Relu), 0.0);
        assert_eq!(scalar(0.0, ActKind::Tanh), 0.0);
        assert!(scalar(50.0, ActKind::Tanh) <= 1.0);
    }
}
