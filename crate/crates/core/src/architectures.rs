//! Generator and discriminator builders.
//!
//! The generator is encoder -> bottleneck -> decoder with channel
//! concatenations from encoder stages into same-resolution decoder inputs.
//! The default bottleneck is a stack of eight dilated residual inception
//! blocks (DRIBs); a pix2pix-style U-net bottleneck is available for
//! ablations. The discriminator is a PatchGAN emitting a map of raw logits.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    ActKind, Activation, BatchNorm2d, Conv2d, ConvGeometry, Ctx, Dropout, Layer, Op, Param, Scalar,
    Sequential, Tensor,
};

pub use crate::nncore::param_count;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const REFERENCE_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Deconv,
}

/// One conv/deconv stage: `[conv] [batch norm] [dropout] [activation]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout: bool,
    #[serde(default)]
    pub activation: Option<ActKind>,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            filters,
            kernel,
            stride,
            dilation: 1,
            batch_norm: false,
            dropout: false,
            activation: None,
        }
    }

    pub fn deconv(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            ..Self::conv(filters, kernel, stride)
        }
    }

    pub fn dilated(mut self, rate: usize) -> Self {
        self.dilation = rate;
        self
    }

    pub fn bn(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn dropout(mut self) -> Self {
        self.dropout = true;
        self
    }

    pub fn act(mut self, kind: ActKind) -> Self {
        self.activation = Some(kind);
        self
    }

    pub fn leaky(self, slope: f64) -> Self {
        self.act(ActKind::LeakyRelu { slope })
    }

    pub fn relu(self) -> Self {
        self.act(ActKind::Relu)
    }

    pub fn tanh(self) -> Self {
        self.act(ActKind::Tanh)
    }

    /// Stride 2 halves (conv) or doubles (deconv); stride 1 keeps size.
    pub fn geometry(&self) -> Result<ConvGeometry> {
        let g = match self.stride {
            1 => ConvGeometry::same(self.kernel, self.dilation),
            2 if self.dilation == 1 && self.kernel >= 2 && self.kernel.is_multiple_of(2) => {
                ConvGeometry::resample(self.kernel)
            }
            _ => {
                return Err(Error::Config(format!(
                    "unsupported layer geometry: kernel {} stride {} dilation {}",
                    self.kernel, self.stride, self.dilation
                )))
            }
        };
        g.validate()?;
        Ok(g)
    }

    /// Spatial scale change: `Some(2)` halves, etc., expressed as a factor on
    /// the downsampling ratio.
    fn ratio_after(&self, ratio: usize) -> Result<usize> {
        match (self.kind, self.stride) {
            (_, 1) => Ok(ratio),
            (LayerKind::Conv, s) => Ok(ratio * s),
            (LayerKind::Deconv, s) if ratio.is_multiple_of(s) => Ok(ratio / s),
            _ => Err(Error::Config(format!(
                "deconvolution upsamples past the input resolution ({self:?})"
            ))),
        }
    }

    /// Compact table notation, e.g. `CBL(64,4,2)`.
    pub fn label(&self) -> String {
        let mut s = String::from("C");
        if self.batch_norm {
            s.push('B');
        }
        if self.dropout {
            s.push('D');
        }
        s.push(match self.activation {
            Some(ActKind::Relu) => 'R',
            Some(ActKind::LeakyRelu { .. }) => 'L',
            Some(ActKind::Tanh) => 'T',
            None => ' ',
        });
        let s = s.trim_end().to_string();
        let kind = if self.kind == LayerKind::Deconv { "^" } else { "" };
        if self.dilation > 1 {
            format!("{kind}{s}({},{},{},{})", self.filters, self.kernel, self.stride, self.dilation)
        } else {
            format!("{kind}{s}({},{},{})", self.filters, self.kernel, self.stride)
        }
    }

    fn build<T: Scalar>(&self, name: &str, in_channels: usize, dropout_rate: f64) -> Result<Sequential<T>> {
        let mut ops = vec![Op::Conv(Conv2d::new(
            &format!("{name}.conv"),
            in_channels,
            self.filters,
            self.geometry()?,
            self.kind == LayerKind::Deconv,
            true,
        ))];
        if self.batch_norm {
            ops.push(Op::Norm(BatchNorm2d::new(&format!("{name}.bn"), self.filters)));
        }
        if self.dropout {
            ops.push(Op::Dropout(Dropout::new(dropout_rate)?));
        }
        if let Some(a) = self.activation {
            ops.push(Op::Act(Activation::new(a)));
        }
        Ok(Sequential::new(ops))
    }
}

/// Dilated residual inception block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DribSpec {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub fuse_channels: usize,
}

impl DribSpec {
    pub fn reference() -> Self {
        Self::with_width(REFERENCE_WIDTH)
    }

    pub fn with_width(base: usize) -> Self {
        DribSpec {
            in_channels: 8 * base,
            branch_channels: 4 * base,
            dilation_rates: vec![1, 2, 3],
            fuse_channels: 8 * base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fuse_channels != self.in_channels {
            return Err(Error::Config(format!(
                "DRIB residual needs fuse channels ({}) == input channels ({})",
                self.fuse_channels, self.in_channels
            )));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(Error::Config("DRIB needs at least one dilation rate >= 1".into()));
        }
        if self.in_channels == 0 || self.branch_channels == 0 {
            return Err(Error::Config("DRIB channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BottleneckSpec {
    Drib { blocks: usize, block: DribSpec },
    Unet { levels: usize, channels: usize },
}

/// Encoder stage `encoder` feeds decoder layer `decoder` (both 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipSpec {
    pub encoder: usize,
    pub decoder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub encoder: Vec<LayerSpec>,
    pub bottleneck: BottleneckSpec,
    pub decoder: Vec<LayerSpec>,
    pub skips: Vec<SkipSpec>,
    pub dropout_rate: f64,
}

impl GeneratorSpec {
    /// Full-width generator with eight DRIBs.
    pub fn reference(in_channels: usize) -> Self {
        Self::with_width(in_channels, REFERENCE_WIDTH, DEFAULT_LEAKY_SLOPE)
    }

    /// Same topology with every channel count scaled from `base` (64 in the
    /// reference configuration).
    pub fn with_width(in_channels: usize, base: usize, leaky_slope: f64) -> Self {
        let b = base;
        GeneratorSpec {
            in_channels,
            encoder: vec![
                LayerSpec::conv(b, 4, 2).leaky(leaky_slope),
                LayerSpec::conv(2 * b, 4, 2).bn().leaky(leaky_slope),
                LayerSpec::conv(4 * b, 4, 2).bn().leaky(leaky_slope),
                LayerSpec::conv(8 * b, 4, 1).bn().leaky(leaky_slope),
            ],
            bottleneck: BottleneckSpec::Drib {
                blocks: 8,
                block: DribSpec::with_width(b),
            },
            decoder: vec![
                LayerSpec::deconv(4 * b, 4, 1).bn().dropout().relu(),
                LayerSpec::deconv(2 * b, 4, 2).bn().dropout().relu(),
                LayerSpec::deconv(b, 4, 2).bn().relu(),
                LayerSpec::deconv(3, 4, 2).tanh(),
            ],
            skips: vec![
                SkipSpec { encoder: 3, decoder: 1 },
                SkipSpec { encoder: 2, decoder: 3 },
                SkipSpec { encoder: 1, decoder: 4 },
            ],
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    /// Same encoder/decoder with the DRIB stack replaced by a U-net
    /// bottleneck that halves resolution down to 1x1 for `input_size` inputs.
    pub fn unet_baseline(in_channels: usize, base: usize, leaky_slope: f64, input_size: usize) -> Self {
        let mut spec = Self::with_width(in_channels, base, leaky_slope);
        let mut size = input_size / spec.downsampling_ratio().unwrap_or(8);
        let mut levels = 0;
        let g = ConvGeometry::resample(4);
        while size > 1 {
            size = g.output_len(size).unwrap_or(1);
            levels += 1;
        }
        spec.bottleneck = BottleneckSpec::Unet {
            levels: levels.max(1),
            channels: 8 * base,
        };
        spec
    }

    pub fn out_channels(&self) -> usize {
        self.decoder.last().map_or(0, |l| l.filters)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.filters)
    }

    pub fn downsampling_ratio(&self) -> Result<usize> {
        self.encoder.iter().try_fold(1, |r, l| l.ratio_after(r))
    }

    /// Input channel count of each decoder layer, skip concatenations included.
    pub fn decoder_input_channels(&self) -> Vec<usize> {
        let mut prev = self.bottleneck_channels();
        self.decoder
            .iter()
            .enumerate()
            .map(|(j, layer)| {
                let extra: usize = self
                    .skips
                    .iter()
                    .filter(|s| s.decoder == j + 1)
                    .map(|s| self.encoder[s.encoder - 1].filters)
                    .sum();
                let c = prev + extra;
                prev = layer.filters;
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config("generator needs input channels, an encoder and a decoder".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        for l in self.encoder.iter().chain(&self.decoder) {
            l.geometry()?;
            if l.filters == 0 {
                return Err(Error::Config(format!("layer {} has no filters", l.label())));
            }
        }
        let c = self.bottleneck_channels();
        match &self.bottleneck {
            BottleneckSpec::Drib { blocks, block } => {
                block.validate()?;
                if *blocks == 0 || block.in_channels != c {
                    return Err(Error::Config(format!(
                        "DRIB stack must have >= 1 block with {c} input channels"
                    )));
                }
            }
            BottleneckSpec::Unet { levels, channels } => {
                if *levels == 0 || *channels != c {
                    return Err(Error::Config(format!(
                        "U-net bottleneck must have >= 1 level with {c} channels"
                    )));
                }
            }
        }
        // spatial ratio (input / feature size) after each encoder stage and
        // at the input of each decoder layer
        let mut enc_ratio = Vec::new();
        let mut r = 1;
        for l in &self.encoder {
            r = l.ratio_after(r)?;
            enc_ratio.push(r);
        }
        let mut dec_in_ratio = Vec::new();
        for l in &self.decoder {
            dec_in_ratio.push(r);
            r = l.ratio_after(r)?;
        }
        if r != 1 {
            return Err(Error::Config(format!(
                "decoder ends at 1/{r} of the input resolution"
            )));
        }
        for s in &self.skips {
            let (Some(&er), Some(&dr)) = (
                s.encoder.checked_sub(1).and_then(|i| enc_ratio.get(i)),
                s.decoder.checked_sub(1).and_then(|i| dec_in_ratio.get(i)),
            ) else {
                return Err(Error::Config(format!("skip {s:?} references a missing stage")));
            };
            if er != dr {
                return Err(Error::Config(format!(
                    "skip from encoder stage {} (1/{er} resolution) to decoder layer {} (1/{dr} resolution) connects mismatched spatial sizes",
                    s.encoder, s.decoder
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub condition_channels: usize,
    pub target_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl DiscriminatorSpec {
    pub fn reference(condition_channels: usize) -> Self {
        Self::with_width(condition_channels, REFERENCE_WIDTH, DEFAULT_LEAKY_SLOPE)
    }

    pub fn with_width(condition_channels: usize, base: usize, leaky_slope: f64) -> Self {
        let b = base;
        DiscriminatorSpec {
            condition_channels,
            target_channels: 3,
            layers: vec![
                LayerSpec::conv(b, 4, 2).bn().leaky(leaky_slope),
                LayerSpec::conv(2 * b, 4, 2).bn().leaky(leaky_slope),
                LayerSpec::conv(4 * b, 4, 2).bn().leaky(leaky_slope),
                LayerSpec::conv(8 * b, 4, 2).bn().leaky(leaky_slope),
                LayerSpec::conv(1, 3, 1),
            ],
        }
    }

    pub fn input_channels(&self) -> usize {
        self.condition_channels + self.target_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.condition_channels == 0 || self.target_channels == 0 {
            return Err(Error::Config("discriminator needs layers and input channels".into()));
        }
        for l in &self.layers {
            l.geometry()?;
        }
        Ok(())
    }
}

/// Normal initialization of conv weights; batch-norm scales around 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightInit {
    pub std: f64,
    pub gamma_std: f64,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit {
            std: 0.02,
            gamma_std: 0.02,
        }
    }
}

impl WeightInit {
    pub fn apply<T: Scalar, R: Rng>(&self, net: &mut dyn Layer<T>, rng: &mut R) {
        let w = Normal::new(0.0, self.std).expect("finite std");
        let g = Normal::new(1.0, self.gamma_std).expect("finite std");
        net.visit_mut(&mut |p: &mut Param<T>| {
            let dist = if p.name.ends_with(".weight") {
                Some(&w)
            } else if p.name.ends_with(".gamma") {
                Some(&g)
            } else {
                None
            };
            if let Some(d) = dist {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::of(d.sample(rng)));
            }
        });
    }
}

/// Three dilated branches, 1x1 fusion, identity shortcut.
#[derive(Debug, Clone)]
pub struct Drib<T> {
    pub branches: Vec<Sequential<T>>,
    pub fuse: Sequential<T>,
    branch_channels: Vec<usize>,
}

impl<T: Scalar> Drib<T> {
    fn new(name: &str, spec: &DribSpec) -> Result<Self> {
        spec.validate()?;
        let branches = spec
            .dilation_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                let bname = format!("{name}.branch{}", i + 1);
                let mut reduce = LayerSpec::conv(spec.branch_channels, 1, 1)
                    .bn()
                    .relu()
                    .build::<T>(&format!("{bname}.reduce"), spec.in_channels, 0.0)?;
                let spread = LayerSpec::conv(spec.branch_channels, 3, 1)
                    .dilated(rate)
                    .bn()
                    .relu()
                    .build::<T>(&format!("{bname}.dilated"), spec.branch_channels, 0.0)?;
                reduce.ops.extend(spread.ops);
                Ok(reduce)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = branches.len();
        let fuse = LayerSpec::conv(spec.fuse_channels, 1, 1)
            .bn()
            .build(&format!("{name}.fuse"), n * spec.branch_channels, 0.0)?;
        Ok(Drib {
            branches,
            fuse,
            branch_channels: vec![spec.branch_channels; n],
        })
    }
}

impl<T: Scalar> Layer<T> for Drib<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, ctx))
            .collect::<Result<Vec<_>>>()?;
        let cat = Tensor::concat_many(&outs.iter().collect::<Vec<_>>())?;
        let mut y = self.fuse.forward(&cat, ctx)?;
        y.add_assign(x)?;
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let gcat = self.fuse.backward(grad_out)?;
        let parts = gcat.split_channels(&self.branch_channels)?;
        let mut gx = grad_out.clone();
        for (b, p) in self.branches.iter_mut().zip(&parts) {
            gx.add_assign(&b.backward(p)?)?;
        }
        Ok(gx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.branches.iter().for_each(|b| b.visit(f));
        self.fuse.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.branches.iter_mut().for_each(|b| b.visit_mut(f));
        self.fuse.visit_mut(f);
    }
}

/// Nested stride-2 encoder/decoder with skip concatenations at each level.
#[derive(Debug, Clone)]
pub struct UnetCore<T> {
    pub downs: Vec<Sequential<T>>,
    pub ups: Vec<Sequential<T>>,
    channels: usize,
}

impl<T: Scalar> UnetCore<T> {
    fn new(name: &str, levels: usize, channels: usize, leaky_slope: f64) -> Result<Self> {
        let c = channels;
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        for i in 0..levels {
            let innermost = i + 1 == levels;
            let mut down = LayerSpec::conv(c, 4, 2).leaky(leaky_slope);
            down.batch_norm = !innermost;
            downs.push(down.build(&format!("{name}.down{}", i + 1), c, 0.0)?);
            let up_in = if innermost { c } else { 2 * c };
            ups.push(LayerSpec::deconv(c, 4, 2).bn().relu().build(&format!("{name}.up{}", i + 1), up_in, 0.0)?);
        }
        Ok(UnetCore { downs, ups, channels })
    }
}

impl<T: Scalar> Layer<T> for UnetCore<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let levels = self.downs.len();
        let mut skips = Vec::with_capacity(levels);
        let mut h = x.clone();
        for d in &mut self.downs {
            h = d.forward(&h, ctx)?;
            skips.push(h.clone());
        }
        let mut h = self.ups[levels - 1].forward(&skips[levels - 1], ctx)?;
        for i in (0..levels - 1).rev() {
            let cat = Tensor::concat_channels(&h, &skips[i])?;
            h = self.ups[i].forward(&cat, ctx)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let levels = self.downs.len();
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; levels];
        let mut g = grad_out.clone();
        for i in 0..levels {
            g = self.ups[i].backward(&g)?;
            if i + 1 < levels {
                let mut parts = self.split(&g)?;
                skip_grads[i] = parts.pop();
                g = parts.pop().expect("two parts");
            }
        }
        for i in (0..levels).rev() {
            if let Some(s) = &skip_grads[i] {
                g.add_assign(s)?;
            }
            g = self.downs[i].backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.downs.iter().for_each(|d| d.visit(f));
        self.ups.iter().for_each(|u| u.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.downs.iter_mut().for_each(|d| d.visit_mut(f));
        self.ups.iter_mut().for_each(|u| u.visit_mut(f));
    }
}

impl<T: Scalar> UnetCore<T> {
    fn split(&self, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        g.split_channels(&[self.channels, self.channels])
    }
}

#[derive(Debug, Clone)]
pub enum Bottleneck<T> {
    Drib(Vec<Drib<T>>),
    Unet(UnetCore<T>),
}

impl<T: Scalar> Layer<T> for Bottleneck<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        match self {
            Bottleneck::Drib(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(&h, ctx)?;
                }
                Ok(h)
            }
            Bottleneck::Unet(u) => u.forward(x, ctx),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Bottleneck::Drib(blocks) => {
                let mut g = grad_out.clone();
                for b in blocks.iter_mut().rev() {
                    g = b.backward(&g)?;
                }
                Ok(g)
            }
            Bottleneck::Unet(u) => u.backward(grad_out),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Bottleneck::Drib(blocks) => blocks.iter().for_each(|b| b.visit(f)),
            Bottleneck::Unet(u) => u.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Bottleneck::Drib(blocks) => blocks.iter_mut().for_each(|b| b.visit_mut(f)),
            Bottleneck::Unet(u) => u.visit_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub encoder: Vec<Sequential<T>>,
    pub bottleneck: Bottleneck<T>,
    pub decoder: Vec<Sequential<T>>,
    // channel split per decoder input: [main, skip...]
    splits: Vec<Vec<usize>>,
}

impl<T: Scalar> Generator<T> {
    /// Builds with every weight zero; see [`build_generator`] for initialization.
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let leaky = spec
            .encoder
            .iter()
            .find_map(|l| match l.activation {
                Some(ActKind::LeakyRelu { slope }) => Some(slope),
                _ => None,
            })
            .unwrap_or(DEFAULT_LEAKY_SLOPE);
        let mut encoder = Vec::new();
        let mut c = spec.in_channels;
        for (i, l) in spec.encoder.iter().enumerate() {
            encoder.push(l.build(&format!("enc{}", i + 1), c, spec.dropout_rate)?);
            c = l.filters;
        }
        let bottleneck = match &spec.bottleneck {
            BottleneckSpec::Drib { blocks, block } => Bottleneck::Drib(
                (0..*blocks)
                    .map(|i| Drib::new(&format!("drib{}", i + 1), block))
                    .collect::<Result<_>>()?,
            ),
            BottleneckSpec::Unet { levels, channels } => {
                Bottleneck::Unet(UnetCore::new("unet", *levels, *channels, leaky)?)
            }
        };
        let dec_in = spec.decoder_input_channels();
        let mut decoder = Vec::new();
        let mut splits = Vec::new();
        let mut prev = spec.bottleneck_channels();
        for (j, l) in spec.decoder.iter().enumerate() {
            decoder.push(l.build(&format!("dec{}", j + 1), dec_in[j], spec.dropout_rate)?);
            let mut split = vec![prev];
            split.extend(
                spec.skips
                    .iter()
                    .filter(|s| s.decoder == j + 1)
                    .map(|s| spec.encoder[s.encoder - 1].filters),
            );
            splits.push(split);
            prev = l.filters;
        }
        Ok(Generator {
            spec: spec.clone(),
            encoder,
            bottleneck,
            decoder,
            splits,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::Config(format!(
                "generator expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let r = self.spec.downsampling_ratio()?;
        if h % r != 0 || w % r != 0 {
            return Err(Error::Config(format!(
                "generator input {h}x{w} is not divisible by its downsampling ratio {r}"
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for Generator<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for e in &mut self.encoder {
            h = e.forward(&h, ctx)?;
            feats.push(h.clone());
        }
        let mut h = self.bottleneck.forward(&h, ctx)?;
        for (j, d) in self.decoder.iter_mut().enumerate() {
            let mut parts = vec![&h];
            parts.extend(
                self.spec
                    .skips
                    .iter()
                    .filter(|s| s.decoder == j + 1)
                    .map(|s| &feats[s.encoder - 1]),
            );
            h = if parts.len() > 1 {
                let cat = Tensor::concat_many(&parts)?;
                d.forward(&cat, ctx)?
            } else {
                d.forward(&h, ctx)?
            };
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; self.encoder.len()];
        let mut g = grad_out.clone();
        for j in (0..self.decoder.len()).rev() {
            g = self.decoder[j].backward(&g)?;
            if self.splits[j].len() > 1 {
                let mut parts = g.split_channels(&self.splits[j])?.into_iter();
                g = parts.next().expect("main part");
                let sources = self.spec.skips.iter().filter(|s| s.decoder == j + 1);
                for (s, part) in sources.zip(parts) {
                    let slot = &mut skip_grads[s.encoder - 1];
                    match slot {
                        Some(acc) => acc.add_assign(&part)?,
                        None => *slot = Some(part),
                    }
                }
            }
        }
        g = self.bottleneck.backward(&g)?;
        for i in (0..self.encoder.len()).rev() {
            if let Some(s) = &skip_grads[i] {
                g.add_assign(s)?;
            }
            g = self.encoder[i].backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.iter().for_each(|e| e.visit(f));
        self.bottleneck.visit(f);
        self.decoder.iter().for_each(|d| d.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.iter_mut().for_each(|e| e.visit_mut(f));
        self.bottleneck.visit_mut(f);
        self.decoder.iter_mut().for_each(|d| d.visit_mut(f));
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub net: Sequential<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: &DiscriminatorSpec) -> Result<Self> {
        spec.validate()?;
        let mut ops = Vec::new();
        let mut c = spec.input_channels();
        for (i, l) in spec.layers.iter().enumerate() {
            ops.extend(l.build::<T>(&format!("d{}", i + 1), c, 0.0)?.ops);
            c = l.filters;
        }
        Ok(Discriminator {
            spec: spec.clone(),
            net: Sequential::new(ops),
        })
    }
}

impl<T: Scalar> Layer<T> for Discriminator<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        if x.channels() != self.spec.input_channels() {
            return Err(Error::Config(format!(
                "discriminator expects {} input channels, got {}",
                self.spec.input_channels(),
                x.channels()
            )));
        }
        self.net.forward(x, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(grad_out)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.net.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_mut(f)
    }
}

pub fn build_generator<T: Scalar, R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> Result<Generator<T>> {
    let mut g = Generator::new(spec)?;
    WeightInit::default().apply(&mut g, rng);
    Ok(g)
}

pub fn build_drib<T: Scalar, R: Rng>(spec: &DribSpec, name: &str, rng: &mut R) -> Result<Drib<T>> {
    let mut b = Drib::new(name, spec)?;
    WeightInit::default().apply(&mut b, rng);
    Ok(b)
}

pub fn build_discriminator<T: Scalar, R: Rng>(
    spec: &DiscriminatorSpec,
    rng: &mut R,
) -> Result<Discriminator<T>> {
    let mut d = Discriminator::new(spec)?;
    WeightInit::default().apply(&mut d, rng);
    Ok(d)
}

/// Full-width U-net comparison generator sized for `input_size` inputs.
pub fn build_unet_baseline<T: Scalar, R: Rng>(
    in_channels: usize,
    input_size: usize,
    rng: &mut R,
) -> Result<Generator<T>> {
    let spec = GeneratorSpec::unet_baseline(in_channels, REFERENCE_WIDTH, DEFAULT_LEAKY_SLOPE, input_size);
    build_generator(&spec, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{conv2d, ConvGeometry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn reference_labels() {
        let g = GeneratorSpec::reference(1);
        let enc: Vec<_> = g.encoder.iter().map(LayerSpec::label).collect();
        assert_eq!(enc, ["CL(64,4,2)", "CBL(128,4,2)", "CBL(256,4,2)", "CBL(512,4,1)"]);
        let dec: Vec<_> = g.decoder.iter().map(LayerSpec::label).collect();
        assert_eq!(dec, ["^CBDR(256,4,1)", "^CBDR(128,4,2)", "^CBR(64,4,2)", "^CT(3,4,2)"]);
        let d: Vec<_> = DiscriminatorSpec::reference(1).layers.iter().map(LayerSpec::label).collect();
        assert_eq!(d, ["CBL(64,4,2)", "CBL(128,4,2)", "CBL(256,4,2)", "CBL(512,4,2)", "C(1,3,1)"]);
    }

    #[test]
    fn skip_channel_accounting() {
        let s = GeneratorSpec::reference(6);
        assert_eq!(s.decoder_input_channels(), vec![512 + 256, 256, 128 + 128, 64 + 64]);
    }

    #[test]
    fn mismatched_skip_is_rejected() {
        let mut s = GeneratorSpec::with_width(1, 4, 0.2);
        s.skips.push(SkipSpec { encoder: 1, decoder: 2 });
        let err = Generator::<f32>::new(&s).unwrap_err();
        assert!(err.to_string().contains("mismatched spatial sizes"), "{err}");
    }

    #[test]
    fn drib_fuse_mismatch_is_rejected() {
        let mut spec = DribSpec::with_width(4);
        spec.fuse_channels = 16;
        assert!(build_drib::<f32, _>(&spec, "b", &mut rng()).is_err());
    }

    #[test]
    fn drib_branch_footprints() {
        // the dilated 3x3 conv of branch i spans 2*rate+1 pixels
        let spec = DribSpec::reference();
        for (rate, want) in spec.dilation_rates.iter().zip([3, 5, 7]) {
            let g = LayerSpec::conv(1, 3, 1).dilated(*rate).geometry().unwrap();
            assert_eq!(g.span(), want);
            let mut x = Tensor::<f32>::zeros([1, 1, 15, 15]);
            x.set([0, 0, 7, 7], 1.0);
            let y = conv2d(&x, &Tensor::full([1, 1, 3, 3], 1.0), None, &g).unwrap();
            let rows = (0..15).filter(|&r| (0..15).any(|c| y.at([0, 0, r, c]) != 0.0)).count();
            assert_eq!(rows, 3);
            let extent = (0..15).rev().find(|&r| (0..15).any(|c| y.at([0, 0, r, c]) != 0.0)).unwrap()
                - (0..15).find(|&r| (0..15).any(|c| y.at([0, 0, r, c]) != 0.0)).unwrap()
                + 1;
            assert_eq!(extent, want);
        }
        assert_eq!(ConvGeometry::same(3, 3).pad_begin, 3);
    }

    #[test]
    fn param_count_single_conv() {
        let seq = LayerSpec::conv(1, 3, 1).build::<f32>("c", 1, 0.0).unwrap();
        assert_eq!(param_count(&seq), 10);
    }

    #[test]
    fn names_are_unique() {
        let g = Generator::<f32>::new(&GeneratorSpec::with_width(6, 2, 0.2)).unwrap();
        let names = crate::nncore::tensor_names(&g);
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let u = Generator::<f32>::new(&GeneratorSpec::unet_baseline(1, 2, 0.2, 64)).unwrap();
        let names = crate::nncore::tensor_names(&u);
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn unet_levels_reach_one_pixel() {
        for (size, levels) in [(256, 5), (64, 3), (32, 2), (16, 1)] {
            match GeneratorSpec::unet_baseline(1, 64, 0.2, size).bottleneck {
                BottleneckSpec::Unet { levels: l, .. } => assert_eq!(l, levels, "{size}"),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn init_statistics() {
        let g = build_generator::<f64, _>(&GeneratorSpec::with_width(1, 8, 0.2), &mut rng()).unwrap();
        let mut w = Vec::new();
        g.visit(&mut |p| {
            if p.name.ends_with(".weight") {
                w.extend_from_slice(p.value.data())
            }
        });
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.02 * 0.05, "{std}");
    }
}
