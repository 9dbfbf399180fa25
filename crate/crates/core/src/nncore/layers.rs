use super::conv::{
    bias_backward, conv2d, conv2d_backward_input, conv2d_backward_weight, conv2d_transpose,
    ConvGeometry,
};
use super::{Activation, BatchNorm2d, Ctx, Dropout, Layer, Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Convolution or transposed convolution with bias.
///
/// Weight layout is `out x in x k x k` for a convolution and
/// `in x out x k x k` for a transposed one.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: ConvGeometry,
    pub transposed: bool,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        transposed: bool,
        bias: bool,
    ) -> Self {
        let k = geometry.kernel;
        let shape = if transposed {
            [in_channels, out_channels, k, k]
        } else {
            [out_channels, in_channels, k, k]
        };
        Conv2d {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(shape)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]))),
            geometry,
            transposed,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        let s = self.weight.value.shape();
        if self.transposed { s[0] } else { s[1] }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.weight.value.shape();
        if self.transposed { s[1] } else { s[0] }
    }

    /// Spatial output length for an input length, if valid.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        if self.transposed {
            self.geometry.transposed_output_len(n)
        } else {
            self.geometry.output_len(n)
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Result<Tensor<T>> {
        let bias = self.bias.as_ref().map(|b| b.value.data());
        let y = if self.transposed {
            if x.channels() != self.in_channels() {
                return Err(Error::shape("conv2d_transpose", &x.shape(), &self.weight.value.shape()));
            }
            conv2d_transpose(x, &self.weight.value, bias, &self.geometry)?
        } else {
            conv2d(x, &self.weight.value, bias, &self.geometry)?
        };
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Config(format!("{}: backward without forward", self.weight.name)))?;
        if let Some(b) = self.bias.as_mut() {
            bias_backward(grad_out, b.grad_mut());
        }
        let g = self.geometry;
        if self.transposed {
            let dx = conv2d(grad_out, &self.weight.value, None, &g)?;
            if dx.shape() != x.shape() {
                return Err(Error::shape("conv2d_transpose backward", &dx.shape(), &x.shape()));
            }
            conv2d_backward_weight(grad_out, &x, &g, self.weight.grad_mut())?;
            Ok(dx)
        } else {
            conv2d_backward_weight(&x, grad_out, &g, self.weight.grad_mut())?;
            conv2d_backward_input(grad_out, &self.weight.value, &g, (x.height(), x.width()))
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Conv(Conv2d<T>),
    Norm(BatchNorm2d<T>),
    Act(Activation<T>),
    Dropout(Dropout<T>),
}

impl<T: Scalar> Op<T> {
    fn layer(&self) -> &dyn Layer<T> {
        match self {
            Op::Conv(l) => l,
            Op::Norm(l) => l,
            Op::Act(l) => l,
            Op::Dropout(l) => l,
        }
    }

    fn layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            Op::Conv(l) => l,
            Op::Norm(l) => l,
            Op::Act(l) => l,
            Op::Dropout(l) => l,
        }
    }
}

/// A chain of ops applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    pub ops: Vec<Op<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(ops: Vec<Op<T>>) -> Self {
        Sequential { ops }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.ops.iter().filter_map(|o| match o {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d<T>> {
        self.ops.iter_mut().filter_map(|o| match o {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d<T>> {
        self.ops.iter_mut().filter_map(|o| match o {
            Op::Norm(n) => Some(n),
            _ => None,
        })
    }

    /// Output channel count (that of the last convolution).
    pub fn out_channels(&self) -> Option<usize> {
        self.convs().last().map(|c| c.out_channels())
    }

    /// Output spatial length for an input length, if every conv accepts it.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        self.convs().try_fold(n, |len, c| c.output_len(len))
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let mut ops = self.ops.iter_mut();
        let Some(first) = ops.next() else {
            return Ok(x.clone());
        };
        let mut h = first.layer_mut().forward(x, ctx)?;
        for op in ops {
            h = op.layer_mut().forward(&h, ctx)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for op in self.ops.iter_mut().rev() {
            g = op.layer_mut().backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for op in &self.ops {
            op.layer().visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for op in &mut self.ops {
            op.layer_mut().visit_mut(f);
        }
    }
}
