use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::Result;

/// A named tensor owned by a layer. Trainable parameters carry a lazily
/// allocated gradient; buffers (running statistics) never do.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
            grad: None,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, value)
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.value.numel();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward context: layer mode, dropout switch and the dropout RNG.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub mode: Mode,
    pub dropout: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    /// Training: batch statistics and active dropout.
    pub fn train(seed: u64) -> Self {
        Ctx {
            mode: Mode::Train,
            dropout: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Batch statistics with dropout disabled; deterministic.
    pub fn train_no_dropout() -> Self {
        Ctx {
            dropout: false,
            ..Ctx::train(0)
        }
    }

    pub fn eval() -> Self {
        Ctx {
            mode: Mode::Eval,
            dropout: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// A differentiable block with an explicit backward pass.
///
/// `forward` caches whatever `backward` needs; `backward` consumes the
/// gradient of the loss with respect to the last forward output, accumulates
/// parameter gradients and returns the gradient with respect to the input.
pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>>;

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit(&self, _f: &mut dyn FnMut(&Param<T>)) {}

    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

/// Number of learnable scalars.
pub fn param_count<T: Scalar>(layer: &dyn Layer<T>) -> usize {
    let mut n = 0;
    layer.visit(&mut |p| {
        if p.trainable {
            n += p.numel()
        }
    });
    n
}

pub fn zero_grads<T: Scalar>(layer: &mut dyn Layer<T>) {
    layer.visit_mut(&mut |p| p.zero_grad());
}

/// Names of every parameter and buffer, in visiting order.
pub fn tensor_names<T: Scalar>(layer: &dyn Layer<T>) -> Vec<String> {
    let mut names = Vec::new();
    layer.visit(&mut |p| names.push(p.name.clone()));
    names
}

/// Order-sensitive FNV-1a digest of all parameter and buffer bits.
pub fn param_digest<T: Scalar>(layer: &dyn Layer<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u64| {
        h ^= b;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    layer.visit(&mut |p| {
        for v in p.value.data() {
            eat(v.as_f64().to_bits());
        }
    });
    h
}
