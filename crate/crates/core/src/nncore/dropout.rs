use rand::Rng;

use super::{Ctx, Layer, Scalar, Tensor};
use crate::error::{Error, Result};

/// Inverted dropout. Returns the output and the per-element scale that was
/// applied (`None` when the op is the identity).
pub fn dropout<T: Scalar, R: Rng>(
    input: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> (Tensor<T>, Option<Vec<T>>) {
    debug_assert!((0.0..1.0).contains(&rate));
    if !train || rate == 0.0 {
        return (input.clone(), None);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..input.numel())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut out = input.clone();
    for (o, s) in out.data_mut().iter_mut().zip(&scale) {
        *o = *o * *s;
    }
    (out, Some(scale))
}

#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    scale: Option<Vec<T>>,
    applied: bool,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout {
            rate,
            scale: None,
            applied: false,
        })
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let active = ctx.is_train() && ctx.dropout;
        let (y, scale) = dropout(x, self.rate, active, &mut ctx.rng);
        self.scale = scale;
        self.applied = true;
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if !std::mem::take(&mut self.applied) {
            return Err(Error::Config("dropout backward without forward".into()));
        }
        let mut g = grad_out.clone();
        if let Some(scale) = self.scale.take() {
            for (v, s) in g.data_mut().iter_mut().zip(&scale) {
                *v = *v * *s;
            }
        }
        Ok(g)
    }
}
