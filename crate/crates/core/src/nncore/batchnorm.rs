use super::{Ctx, Layer, Param, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization over `(batch, height, width)`.
///
/// Train mode normalizes with the batch statistics and folds them into the
/// running estimates (`running = (1 - momentum) * running + momentum * batch`,
/// unbiased variance). Eval mode is the fixed affine map given by the running
/// estimates. Zero-variance channels are stabilized by `epsilon`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub epsilon: f64,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let vec = |v: f64| Tensor::full([1, channels, 1, 1], T::of(v));
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), vec(1.0)),
            beta: Param::new(format!("{name}.beta"), vec(0.0)),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec(0.0)),
            running_var: Param::buffer(format!("{name}.running_var"), vec(1.0)),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn batch_stats(&self, x: &Tensor<T>) -> Vec<(f64, f64)> {
        let [b, c, _, _] = x.shape();
        let plane = x.plane_len();
        let count = (b * plane) as f64;
        exec::map(c, |ch| {
            let planes = || (0..b).map(move |n| &x.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane]);
            let mean = planes().flat_map(|p| p.iter()).map(|v| v.as_f64()).sum::<f64>() / count;
            let var = planes()
                .flat_map(|p| p.iter())
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / count;
            (mean, var)
        })
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let [b, c, _, _] = x.shape();
        if c != self.channels() {
            return Err(Error::shape("batch_norm", &x.shape(), &[b, self.channels()]));
        }
        let plane = x.plane_len();
        let train = ctx.is_train();
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = if train {
            let count = b * plane;
            if count < 2 {
                return Err(Error::DegenerateStatistics {
                    layer: self.name.clone(),
                    count,
                });
            }
            let stats = self.batch_stats(x);
            let m = self.momentum;
            let unbias = count as f64 / (count as f64 - 1.0);
            let rm = self.running_mean.value.data_mut();
            for (r, &(mu, _)) in rm.iter_mut().zip(&stats) {
                *r = T::of((1.0 - m) * r.as_f64() + m * mu);
            }
            let rv = self.running_var.value.data_mut();
            for (r, &(_, var)) in rv.iter_mut().zip(&stats) {
                *r = T::of((1.0 - m) * r.as_f64() + m * var * unbias);
            }
            stats
                .iter()
                .map(|&(mu, var)| (mu, 1.0 / (var + self.epsilon).sqrt()))
                .unzip()
        } else {
            let rm = self.running_mean.value.data();
            let rv = self.running_var.value.data();
            (0..c)
                .map(|ch| (rm[ch].as_f64(), 1.0 / (rv[ch].as_f64().max(0.0) + self.epsilon).sqrt()))
                .unzip()
        };

        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = x.clone();
        let mut y = x.clone();
        exec::for_each_chunk_mut(xhat.data_mut(), plane, |i, p| {
            let ch = i % c;
            for v in p.iter_mut() {
                *v = T::of((v.as_f64() - mean[ch]) * inv_std[ch]);
            }
        });
        let xh = &xhat;
        exec::for_each_chunk_mut(y.data_mut(), plane, |i, p| {
            let ch = i % c;
            let src = &xh.data()[i * plane..(i + 1) * plane];
            for (v, &h) in p.iter_mut().zip(src) {
                *v = gamma[ch] * h + beta[ch];
            }
        });
        self.cache = Some(Cache {
            xhat,
            inv_std,
            train,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache {
            xhat,
            inv_std,
            train,
        } = self
            .cache
            .take()
            .ok_or_else(|| Error::Config(format!("{}: backward without forward", self.name)))?;
        if xhat.shape() != grad_out.shape() {
            return Err(Error::shape("batch_norm backward", &xhat.shape(), &grad_out.shape()));
        }
        let [b, c, _, _] = xhat.shape();
        let plane = xhat.plane_len();
        let count = (b * plane) as f64;
        let sums: Vec<(f64, f64)> = exec::map(c, |ch| {
            let mut sd = 0.0;
            let mut sdx = 0.0;
            for n in 0..b {
                let off = (n * c + ch) * plane;
                for (d, h) in grad_out.data()[off..off + plane].iter().zip(&xhat.data()[off..off + plane]) {
                    sd += d.as_f64();
                    sdx += d.as_f64() * h.as_f64();
                }
            }
            (sd, sdx)
        });
        {
            let gg = self.gamma.grad_mut();
            for (g, &(_, sdx)) in gg.iter_mut().zip(&sums) {
                *g = *g + T::of(sdx);
            }
        }
        {
            let gb = self.beta.grad_mut();
            for (g, &(sd, _)) in gb.iter_mut().zip(&sums) {
                *g = *g + T::of(sd);
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = grad_out.clone();
        exec::for_each_chunk_mut(dx.data_mut(), plane, |i, p| {
            let ch = i % c;
            let scale = gamma[ch].as_f64() * inv_std[ch];
            let h = &xhat.data()[i * plane..(i + 1) * plane];
            if train {
                let (sd, sdx) = sums[ch];
                for (v, hv) in p.iter_mut().zip(h) {
                    let d = v.as_f64();
                    *v = T::of(scale * (d - sd / count - hv.as_f64() * sdx / count));
                }
            } else {
                for v in p.iter_mut() {
                    *v = T::of(scale * v.as_f64());
                }
            }
        });
        Ok(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn([4, 3, 5, 5], |[_, c, _, _]| rng.random_range(-2.0..5.0) * (c + 1) as f64);
        let mut bn = BatchNorm2d::new("bn", 3);
        let y = bn.forward(&x, &mut Ctx::train(0)).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn eval_mode_is_affine() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 3], |[n, _, y, x]| (n * 9 + y * 3 + x) as f64 - 4.0);
        let mut bn = BatchNorm2d::new("bn", 1);
        bn.gamma.value.data_mut()[0] = 2.0;
        bn.beta.value.data_mut()[0] = 3.0;
        let y = bn.forward(&x, &mut Ctx::eval()).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b / (1.0 + BN_EPSILON).sqrt() + 3.0)).abs() < 1e-12);
        }
        assert_eq!(bn.running_mean.value.data()[0], 0.0);
    }

    #[test]
    fn constant_channel_is_stabilized() {
        let x = Tensor::<f64>::full([2, 1, 4, 4], 7.0);
        let mut bn = BatchNorm2d::new("bn", 1);
        let y = bn.forward(&x, &mut Ctx::train(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_fn([1, 1, 1, 4], |[_, _, _, i]| i as f64);
        let mut bn = BatchNorm2d::new("bn", 1);
        bn.forward(&x, &mut Ctx::train(0)).unwrap();
        // mean 1.5, unbiased var 5/3
        assert!((bn.running_mean.value.data()[0] - 0.15).abs() < 1e-12);
        assert!((bn.running_var.value.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(bn.running_var.value.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let x = Tensor::<f32>::zeros([1, 2, 1, 1]);
        let mut bn = BatchNorm2d::new("bn", 2);
        assert!(matches!(
            bn.forward(&x, &mut Ctx::train(0)),
            Err(Error::DegenerateStatistics { .. })
        ));
        assert!(bn.forward(&x, &mut Ctx::eval()).is_ok());
    }
}
