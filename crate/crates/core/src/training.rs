//! Two-stage adversarial training and the ablation runner.
//!
//! Stage 1 learns SAR to optical translation. Stage 2 removes clouds from a
//! cloudy patch conditioned on the frozen stage-1 translation of the
//! matching SAR patch (or on the raw SAR patch when stage 1 is ablated).
//!
//! Every batch gets one discriminator update followed by one generator
//! update. Batch composition and dropout noise are pure functions of the
//! seed and step, so a resumed run continues exactly where it stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{
    build_discriminator, build_generator, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
    DEFAULT_LEAKY_SLOPE,
};
use crate::cloudsim::{binarize, DEFAULT_TAU};
use crate::dataio::{latest_checkpoint, save_checkpoint, Checkpoint, SamplePair, TensorSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, fmt_metric, EvalModel, EvalReport, MetricConfig};
use crate::losses::{generator_objective, logit_loss_fake, logit_loss_real, LossPreset, LossWeights, SsimParams};
use crate::nncore::{zero_grads, Adam, AdamConfig, Ctx, Layer, Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sar2opt,
    CloudRemoval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sar2opt => "sar2opt",
            Stage::CloudRemoval => "cloud_removal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    Drib,
    Unet,
}

impl BottleneckKind {
    pub fn name(self) -> &'static str {
        match self {
            BottleneckKind::Drib => "drib",
            BottleneckKind::Unet => "unet",
        }
    }
}

/// Network widths and bottleneck choices for both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel count of the first encoder layer; 64 is the reference width.
    pub base: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub sar2opt_bottleneck: BottleneckKind,
    pub cloud_bottleneck: BottleneckKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base: 64,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            dropout: 0.5,
            sar2opt_bottleneck: BottleneckKind::Drib,
            cloud_bottleneck: BottleneckKind::Drib,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base == 0 || !(0.0..1.0).contains(&self.dropout) || !(self.leaky_slope >= 0.0) {
            return Err(Error::Config(format!("invalid model configuration {self:?}")));
        }
        Ok(())
    }

    pub fn bottleneck(&self, stage: Stage) -> BottleneckKind {
        match stage {
            Stage::Sar2opt => self.sar2opt_bottleneck,
            Stage::CloudRemoval => self.cloud_bottleneck,
        }
    }

    pub fn generator(&self, kind: BottleneckKind, in_channels: usize, input_size: usize) -> GeneratorSpec {
        let mut spec = match kind {
            BottleneckKind::Drib => GeneratorSpec::with_width(in_channels, self.base, self.leaky_slope),
            BottleneckKind::Unet => GeneratorSpec::unet_baseline(in_channels, self.base, self.leaky_slope, input_size),
        };
        spec.dropout_rate = self.dropout;
        spec
    }

    pub fn discriminator(&self, condition_channels: usize) -> DiscriminatorSpec {
        DiscriminatorSpec::with_width(condition_channels, self.base, self.leaky_slope)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// When set, overrides `steps` with whole passes over the training set.
    pub epochs: Option<u64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub cgan_enabled: bool,
    pub use_sar2opt_stage: bool,
    /// Stage-1 checkpoint used by stage 2.
    pub sar2opt_checkpoint: Option<PathBuf>,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub ssim: SsimParams,
    /// Threshold for the cloudy-region L1 recorded during stage 2.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            stage: Stage::Sar2opt,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 4,
            steps: 2000,
            epochs: None,
            seed: 0,
            weights: LossWeights::default(),
            cgan_enabled: true,
            use_sar2opt_stage: true,
            sar2opt_checkpoint: None,
            checkpoint_every: 0,
            ssim: SsimParams::default(),
            tau: DEFAULT_TAU,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.ssim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.weights.lambda1 < 0.0 || self.weights.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.stage == Stage::CloudRemoval && self.use_sar2opt_stage && self.sar2opt_checkpoint.is_none() {
            return Err(Error::Config(
                "cloud-removal training needs train.sar2opt_checkpoint or train.use_sar2opt_stage = false".into(),
            ));
        }
        Ok(())
    }

    /// Total number of steps for a training set of `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        match self.epochs {
            Some(e) => e * n.div_ceil(self.batch_size.max(1)) as u64,
            None => self.steps,
        }
    }
}

/// Deterministic sub-seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample indices of the batch used at 0-based `step`: each epoch is a
/// seeded permutation, split into consecutive batches (the last may be short).
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, epoch)));
    perm[pos * batch_size..((pos + 1) * batch_size).min(n)].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub cgan_g: f64,
    pub seconds: f64,
    /// Stage 2 only: L1 restricted to the cloudy region of the batch.
    pub l1_cloudy: Option<f64>,
}

/// `l1_cloudy` is `NA` outside stage 2.
pub const LOG_HEADER: &str = "step,loss_d,loss_g,l1,ssim_loss,cgan_g,l1_cloudy,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{:.3}",
                r.step,
                r.loss_d,
                r.loss_g,
                r.l1,
                r.ssim_loss,
                r.cgan_g,
                r.l1_cloudy.map_or_else(|| "NA".to_string(), |v| format!("{v:.9}")),
                r.seconds
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<TrainLog> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}: malformed log line {line:?}", path.display())))
            };
            records.push(StepRecord {
                step: num(0)? as u64,
                loss_d: num(1)?,
                loss_g: num(2)?,
                l1: num(3)?,
                ssim_loss: num(4)?,
                cgan_g: num(5)?,
                l1_cloudy: if f.get(6) == Some(&"NA") { None } else { Some(num(6)?) },
                seconds: num(7)?,
            });
        }
        Ok(TrainLog { records })
    }

    fn mean_of(&self, range: std::ops::Range<usize>, f: impl Fn(&StepRecord) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.records.get(range)?.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean logged L1 of the first `k` records.
    pub fn head_l1(&self, k: usize) -> Option<f64> {
        self.mean_of(0..k.min(self.records.len()), |r| Some(r.l1))
    }

    /// Mean logged L1 of the last `k` records.
    pub fn tail_l1(&self, k: usize) -> Option<f64> {
        let n = self.records.len();
        self.mean_of(n.saturating_sub(k)..n, |r| Some(r.l1))
    }

    pub fn head_l1_cloudy(&self, k: usize) -> Option<f64> {
        self.mean_of(0..k.min(self.records.len()), |r| r.l1_cloudy)
    }

    pub fn tail_l1_cloudy(&self, k: usize) -> Option<f64> {
        let n = self.records.len();
        self.mean_of(n.saturating_sub(k)..n, |r| r.l1_cloudy)
    }
}

/// Generator inputs and targets for one stage, one `1 x C x H x W` tensor
/// per sample.
#[derive(Debug, Clone)]
pub struct StageData {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    /// Cloudy-region maps, stage 2 only.
    pub regions: Option<Vec<Vec<bool>>>,
}

impl StageData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn size(&self) -> Result<usize> {
        let first = self.inputs.first().ok_or_else(|| Error::Data("no training samples".into()))?;
        if first.height() != first.width() {
            return Err(Error::Data("training patches must be square".into()));
        }
        Ok(first.height())
    }

    fn channels(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.channels())
    }
}

pub fn sar2opt_data(samples: &[SamplePair]) -> StageData {
    StageData {
        inputs: samples.iter().map(|s| s.sar.clone()).collect(),
        targets: samples.iter().map(|s| s.optical.clone()).collect(),
        regions: None,
    }
}

/// Stage-2 data: `cloudy ⊕ translator(sar)`, or `cloudy ⊕ sar` without a
/// translator. The translator runs once per sample in eval mode.
pub fn cloud_data(samples: &[SamplePair], translator: Option<&mut Generator<f32>>, tau: f64) -> Result<StageData> {
    let mut translator = translator;
    let mut inputs = Vec::with_capacity(samples.len());
    let mut regions = Vec::with_capacity(samples.len());
    for s in samples {
        let (Some(cloudy), Some(mask)) = (&s.cloudy, &s.mask) else {
            return Err(Error::Data(format!("sample {} has no cloudy patch; run synthesis first", s.id)));
        };
        let cond = match translator.as_deref_mut() {
            Some(t) => t.forward(&s.sar, &mut Ctx::eval())?,
            None => s.sar.clone(),
        };
        inputs.push(Tensor::concat_channels(cloudy, &cond)?);
        regions.push(binarize(mask, tau)?.cloudy().to_vec());
    }
    Ok(StageData {
        inputs,
        targets: samples.iter().map(|s| s.optical.clone()).collect(),
        regions: Some(regions),
    })
}

/// Metadata stored in every training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub input_size: usize,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub translator: Option<GeneratorSpec>,
    pub train: TrainConfig,
    pub adam_step_g: u64,
    pub adam_step_d: u64,
}

/// Generator, discriminator and their optimizers.
pub struct GanState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
}

impl GanState {
    pub fn new(g: &GeneratorSpec, d: &DiscriminatorSpec, cfg: &TrainConfig) -> Result<Self> {
        let mut rng_g = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2, 0));
        let mut rng_d = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2, 1));
        Ok(GanState {
            generator: build_generator(g, &mut rng_g)?,
            discriminator: build_discriminator(d, &mut rng_d)?,
            opt_g: Adam::new(cfg.adam())?,
            opt_d: Adam::new(cfg.adam())?,
            step: 0,
        })
    }
}

fn push_moments(set: &mut TensorSet, prefix: &str, net: &dyn Layer<f32>, opt: &Adam<f32>) {
    let (m, v) = opt.moments();
    if m.is_empty() {
        return;
    }
    let mut names = Vec::new();
    net.visit(&mut |p: &Param<f32>| {
        if p.trainable {
            names.push(p.name.clone());
        }
    });
    for (i, name) in names.iter().enumerate() {
        set.push(format!("{prefix}m.{name}"), vec![m[i].len()], m[i].clone());
        set.push(format!("{prefix}v.{name}"), vec![v[i].len()], v[i].clone());
    }
}

fn restore_moments(ck: &Checkpoint, prefix: &str, net: &dyn Layer<f32>, opt: &mut Adam<f32>, step: u64) -> Result<()> {
    let mut names = Vec::new();
    net.visit(&mut |p: &Param<f32>| {
        if p.trainable {
            names.push(p.name.clone());
        }
    });
    if names.first().is_none_or(|n| !ck.contains(&format!("{prefix}m.{n}"))) {
        return opt.restore(step, Vec::new(), Vec::new());
    }
    let mut first = Vec::with_capacity(names.len());
    let mut second = Vec::with_capacity(names.len());
    for n in &names {
        first.push(ck.read(&format!("{prefix}m.{n}"))?);
        second.push(ck.read(&format!("{prefix}v.{n}"))?);
    }
    opt.restore(step, first, second)
}

/// A finished or interrupted training run.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    pub state: GanState,
    pub meta: CheckpointMeta,
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    meta: CheckpointMeta,
    translator: Option<&'a Generator<f32>>,
    out_dir: &'a Path,
}

impl Run<'_> {
    fn save(&self, state: &GanState) -> Result<PathBuf> {
        let mut set = TensorSet::new();
        set.push_layer("g.", &state.generator);
        set.push_layer("d.", &state.discriminator);
        push_moments(&mut set, "adam_g.", &state.generator, &state.opt_g);
        push_moments(&mut set, "adam_d.", &state.discriminator, &state.opt_d);
        if let Some(t) = self.translator {
            set.push_layer("t.", t);
        }
        let mut meta = self.meta.clone();
        meta.adam_step_g = state.opt_g.step;
        meta.adam_step_d = state.opt_d.step;
        let json = serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        save_checkpoint(self.out_dir, self.cfg.stage.name(), state.step, self.cfg.seed, json, &set)
    }
}

/// One discriminator update then one generator update on a batch.
///
/// Real and fake pairs go through the discriminator separately. The
/// generator step reuses the fake batch, so both updates see the same
/// dropout noise. `regions` holds one cloudy-region map per batch item.
pub fn train_step(
    state: &mut GanState,
    x: &Tensor,
    y: &Tensor,
    regions: Option<&[&[bool]]>,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let step = state.step + 1;
    let mut g_ctx = Ctx::train(mix_seed(cfg.seed, 3, step));
    let fake = state.generator.forward(x, &mut g_ctx)?;

    let mut loss_d = 0.0;
    if cfg.cgan_enabled {
        let d = &mut state.discriminator;
        zero_grads(d);
        let mut d_ctx = Ctx::train_no_dropout();
        let real = logit_loss_real(&d.forward(&Tensor::concat_channels(x, y)?, &mut d_ctx)?);
        d.backward(&real.grad)?;
        let fake_term = logit_loss_fake(&d.forward(&Tensor::concat_channels(x, &fake)?, &mut d_ctx)?);
        d.backward(&fake_term.grad)?;
        loss_d = real.value + fake_term.value;
        if !loss_d.is_finite() {
            return Err(Error::NonFinite {
                name: "discriminator loss".into(),
                step,
            });
        }
        state.opt_d.step(d)?;
    }

    let logits = if cfg.cgan_enabled {
        let mut d_ctx = Ctx::train_no_dropout();
        Some(state.discriminator.forward(&Tensor::concat_channels(x, &fake)?, &mut d_ctx)?)
    } else {
        None
    };
    let obj = generator_objective(logits.as_ref(), &fake, y, &cfg.weights, &cfg.ssim)?;
    if !obj.total.is_finite() {
        return Err(Error::NonFinite {
            name: "generator loss".into(),
            step,
        });
    }
    let mut grad_fake = obj.grad_pred;
    if let Some(gl) = &obj.grad_logits {
        zero_grads(&mut state.discriminator);
        let grad_in = state.discriminator.backward(gl)?;
        let parts = grad_in.split_channels(&[x.channels(), fake.channels()])?;
        grad_fake.add_assign(&parts[1])?;
        // these discriminator gradients belong to the generator step only
        zero_grads(&mut state.discriminator);
    }
    zero_grads(&mut state.generator);
    state.generator.backward(&grad_fake)?;
    state.opt_g.step(&mut state.generator)?;
    state.step = step;

    Ok(StepRecord {
        step,
        loss_d,
        loss_g: obj.total,
        l1: obj.l1,
        ssim_loss: obj.ssim,
        cgan_g: obj.cgan,
        seconds: 0.0,
        l1_cloudy: regions.and_then(|r| region_l1(&fake, y, r)),
    })
}

/// Mean absolute error over the cloudy positions of each batch item.
pub fn region_l1(pred: &Tensor, target: &Tensor, regions: &[&[bool]]) -> Option<f64> {
    let plane = pred.plane_len();
    let (mut s, mut n) = (0.0, 0usize);
    for b in 0..pred.batch() {
        let (p, t) = (pred.item(b), target.item(b));
        for (i, (a, c)) in p.iter().zip(t).enumerate() {
            if regions[b][i % plane] {
                s += (a - c).abs() as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

fn stack_batch(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

fn run_stage(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &StageData,
    translator: Option<(&Generator<f32>, &GeneratorSpec)>,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let size = data.size()?;
    let in_channels = data.channels();
    let gspec = model.generator(model.bottleneck(cfg.stage), in_channels, size);
    let dspec = model.discriminator(in_channels);
    let meta = CheckpointMeta {
        stage: cfg.stage,
        input_size: size,
        generator: gspec.clone(),
        discriminator: dspec.clone(),
        translator: translator.map(|(_, s)| s.clone()),
        train: cfg.clone(),
        adam_step_g: 0,
        adam_step_d: 0,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut state = GanState::new(&gspec, &dspec, cfg)?;
    let mut log = TrainLog::default();
    if resume {
        if let Some(dir) = latest_checkpoint(out_dir)? {
            let ck = Checkpoint::open(&dir)?;
            let saved: CheckpointMeta = serde_json::from_value(ck.manifest.meta.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
            if saved.generator != gspec || saved.discriminator != dspec || saved.stage != cfg.stage {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different architecture or stage",
                    dir.display()
                )));
            }
            ck.restore_layer("g.", &mut state.generator)?;
            ck.restore_layer("d.", &mut state.discriminator)?;
            restore_moments(&ck, "adam_g.", &state.generator, &mut state.opt_g, saved.adam_step_g)?;
            restore_moments(&ck, "adam_d.", &state.discriminator, &mut state.opt_d, saved.adam_step_d)?;
            state.step = ck.manifest.step;
            if log_path.exists() {
                log = TrainLog::read(&log_path)?;
                log.records.retain(|r| r.step <= state.step);
            }
        }
    }
    let run = Run {
        cfg,
        meta,
        translator: translator.map(|(g, _)| g),
        out_dir,
    };
    let total = cfg.total_steps(data.len());
    let start = Instant::now();
    let offset = log.records.last().map_or(0.0, |r| r.seconds);
    while state.step < total {
        let idx = batch_indices(cfg.seed, state.step, data.len(), cfg.batch_size);
        let x = stack_batch(&data.inputs, &idx)?;
        let y = stack_batch(&data.targets, &idx)?;
        let regions: Option<Vec<&[bool]>> = data
            .regions
            .as_ref()
            .map(|r| idx.iter().map(|&i| r[i].as_slice()).collect());
        let mut rec = match train_step(&mut state, &x, &y, regions.as_deref(), cfg) {
            Ok(r) => r,
            Err(e) => {
                // earlier checkpoints in out_dir stay as the last good state
                log.write(&log_path)?;
                return Err(e);
            }
        };
        rec.seconds = offset + start.elapsed().as_secs_f64();
        log.records.push(rec);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
            run.save(&state)?;
            log.write(&log_path)?;
        }
    }
    let checkpoint = run.save(&state)?;
    log.write(&log_path)?;
    let mut meta = run.meta;
    meta.adam_step_g = state.opt_g.step;
    meta.adam_step_d = state.opt_d.step;
    Ok(TrainOutcome {
        checkpoint,
        log,
        state,
        meta,
    })
}

/// Trains the SAR-to-optical stage on `(sar, optical)` pairs.
pub fn train_sar2opt(cfg: &TrainConfig, model: &ModelConfig, samples: &[SamplePair], out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.stage = Stage::Sar2opt;
    run_stage(&cfg, model, &sar2opt_data(samples), None, out_dir, resume)
}

/// Trains the cloud-removal stage. With `use_sar2opt_stage` the stage-1
/// generator from `sar2opt_checkpoint` is loaded, frozen, and embedded in
/// the resulting checkpoints.
pub fn train_cloud_removal(cfg: &TrainConfig, model: &ModelConfig, samples: &[SamplePair], out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.stage = Stage::CloudRemoval;
    cfg.validate()?;
    let mut translator = match (&cfg.sar2opt_checkpoint, cfg.use_sar2opt_stage) {
        (Some(path), true) => Some(load_translator(path)?),
        _ => None,
    };
    let data = cloud_data(samples, translator.as_mut().map(|(g, _)| g), cfg.tau)?;
    run_stage(&cfg, model, &data, translator.as_ref().map(|(g, s)| (g, s)), out_dir, resume)
}

pub fn read_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    serde_json::from_value(ck.manifest.meta.clone()).map_err(|e| Error::Checkpoint(format!("{}: {e}", ck.dir.display())))
}

fn load_generator(ck: &Checkpoint, prefix: &str, spec: &GeneratorSpec) -> Result<Generator<f32>> {
    let mut g = Generator::new(spec)?;
    ck.restore_layer(prefix, &mut g)?;
    Ok(g)
}

/// The stage-1 generator of a SAR-to-optical checkpoint, or the embedded
/// translator of a cloud-removal checkpoint.
pub fn load_translator(dir: &Path) -> Result<(Generator<f32>, GeneratorSpec)> {
    let ck = Checkpoint::open(dir)?;
    let meta = read_meta(&ck)?;
    let (prefix, spec) = match (meta.stage, meta.translator) {
        (Stage::Sar2opt, _) => ("g.", meta.generator),
        (Stage::CloudRemoval, Some(t)) => ("t.", t),
        (Stage::CloudRemoval, None) => {
            return Err(Error::Checkpoint(format!("{} holds no SAR-to-optical generator", dir.display())))
        }
    };
    if spec.in_channels != 1 || spec.out_channels() != 3 {
        return Err(Error::Checkpoint(format!("{}: translator must map 1 to 3 channels", dir.display())));
    }
    Ok((load_generator(&ck, prefix, &spec)?, spec))
}

/// Checkpoint kinds that carry no tensors and stand in for a model.
pub const ORACLE_KIND: &str = "oracle";
pub const CLOUDY_KIND: &str = "cloudy_passthrough";

/// Writes a tensor-free checkpoint of kind [`ORACLE_KIND`] or [`CLOUDY_KIND`].
pub fn save_reference_checkpoint(parent: &Path, kind: &str) -> Result<PathBuf> {
    if kind != ORACLE_KIND && kind != CLOUDY_KIND {
        return Err(Error::Config(format!("unknown reference checkpoint kind {kind}")));
    }
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    save_checkpoint(parent, kind, 0, 0, serde_json::Value::Null, &TensorSet::new())
}

/// Restores an evaluable model from any checkpoint written by this crate.
pub fn load_model(dir: &Path) -> Result<EvalModel> {
    let ck = Checkpoint::open(dir)?;
    match ck.manifest.kind.as_str() {
        ORACLE_KIND => return Ok(EvalModel::Oracle),
        CLOUDY_KIND => return Ok(EvalModel::Cloudy),
        _ => {}
    }
    let meta = read_meta(&ck)?;
    let generator = load_generator(&ck, "g.", &meta.generator)?;
    Ok(match meta.stage {
        Stage::Sar2opt => EvalModel::Sar2opt(generator),
        Stage::CloudRemoval => EvalModel::CloudRemoval {
            generator,
            translator: meta.translator.as_ref().map(|s| load_generator(&ck, "t.", s)).transpose()?,
        },
    })
}

/// One configuration of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    /// `None` drops stage 1: the cloud-removal generator sees raw SAR.
    pub sar2opt: Option<BottleneckKind>,
    pub cloud_removal: BottleneckKind,
    pub sar2opt_loss: LossPreset,
    pub cloud_loss: LossPreset,
}

impl AblationCell {
    pub fn slug(&self) -> String {
        format!(
            "{}-{}_{}-{}",
            self.sar2opt.map_or("none", |b| b.name()),
            self.sar2opt_loss.name().replace('+', "-"),
            self.cloud_removal.name(),
            self.cloud_loss.name().replace('+', "-")
        )
    }
}

/// Either explicit `cells` or the product of the three lists, where each
/// loss preset is applied to both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub sar2opt: Vec<Option<BottleneckKind>>,
    pub cloud_removal: Vec<BottleneckKind>,
    pub losses: Vec<LossPreset>,
    pub cells: Vec<AblationCell>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            sar2opt: vec![Some(BottleneckKind::Drib)],
            cloud_removal: vec![BottleneckKind::Drib, BottleneckKind::Unet],
            losses: vec![LossPreset::SsimL1],
            cells: Vec::new(),
        }
    }
}

impl AblationConfig {
    pub fn expand(&self) -> Vec<AblationCell> {
        if !self.cells.is_empty() {
            return self.cells.clone();
        }
        let mut out = Vec::new();
        for &s in &self.sar2opt {
            for &c in &self.cloud_removal {
                for &l in &self.losses {
                    out.push(AblationCell {
                        sar2opt: s,
                        cloud_removal: c,
                        sar2opt_loss: l,
                        cloud_loss: l,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: AblationCell,
    pub dir: PathBuf,
    pub report: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone, Default)]
pub struct AblationTable {
    pub rows: Vec<CellResult>,
}

pub const ABLATION_HEADER: &str = "cell,sar2opt,cloud_removal,loss_sar2opt,loss_cloud,status,psnr,ssim,psnr_cloudy,psnr_noncloudy";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let c = &r.cell;
            let _ = write!(
                s,
                "{i},{},{},{},{},",
                c.sar2opt.map_or("none", |b| b.name()),
                c.cloud_removal.name(),
                c.sar2opt_loss.name(),
                c.cloud_loss.name()
            );
            match &r.report {
                Ok(rep) => {
                    let _ = writeln!(
                        s,
                        "ok,{},{},{},{}",
                        fmt_metric(rep.mean_psnr().mean),
                        fmt_metric(rep.mean_ssim().mean),
                        fmt_metric(rep.mean_psnr_cloudy().mean),
                        fmt_metric(rep.mean_psnr_noncloudy().mean)
                    );
                }
                Err(msg) => {
                    let msg: String = msg.chars().map(|ch| if ch == ',' || ch == '\n' { ';' } else { ch }).collect();
                    let _ = writeln!(s, "failed: {msg},NA,NA,NA,NA");
                }
            }
        }
        s
    }
}

/// Trains and evaluates every cell with the same seed and data. Stage-1
/// models are trained once per (bottleneck, loss) pair and shared. A failing
/// cell is recorded and the remaining cells still run.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &AblationConfig,
    train: &TrainConfig,
    model: &ModelConfig,
    metrics: &MetricConfig,
    train_samples: &[SamplePair],
    eval_samples: &[SamplePair],
    out_dir: &Path,
) -> Result<AblationTable> {
    let cells = cfg.expand();
    if cells.is_empty() {
        return Err(Error::Config("ablation matrix is empty".into()));
    }
    metrics.validate()?;
    let mut stage1: BTreeMap<(BottleneckKind, LossPreset), std::result::Result<PathBuf, String>> = BTreeMap::new();
    let mut table = AblationTable::default();
    for (i, cell) in cells.iter().enumerate() {
        let dir = out_dir.join("cells").join(format!("{i:02}-{}", cell.slug()));
        let result = (|| -> std::result::Result<EvalReport, String> {
            let mut m = model.clone();
            m.cloud_bottleneck = cell.cloud_removal;
            let translator = match cell.sar2opt {
                Some(kind) => {
                    let key = (kind, cell.sar2opt_loss);
                    let ckpt = stage1.entry(key).or_insert_with(|| {
                        let mut m1 = model.clone();
                        m1.sar2opt_bottleneck = kind;
                        let mut t1 = train.clone();
                        t1.weights = cell.sar2opt_loss.weights();
                        let d = out_dir.join("sar2opt").join(format!("{}-{}", kind.name(), cell.sar2opt_loss.name().replace('+', "-")));
                        train_sar2opt(&t1, &m1, train_samples, &d, false)
                            .map(|o| o.checkpoint)
                            .map_err(|e| format!("stage 1: {e}"))
                    });
                    Some(ckpt.clone()?)
                }
                None => None,
            };
            let mut t2 = train.clone();
            t2.stage = Stage::CloudRemoval;
            t2.weights = cell.cloud_loss.weights();
            t2.use_sar2opt_stage = translator.is_some();
            t2.sar2opt_checkpoint = translator;
            let out = train_cloud_removal(&t2, &m, train_samples, &dir, false).map_err(|e| e.to_string())?;
            let mut em = load_model(&out.checkpoint).map_err(|e| e.to_string())?;
            let report = evaluate(&mut em, eval_samples, metrics, &out.checkpoint.display().to_string())
                .map_err(|e| e.to_string())?;
            fs::write(dir.join("eval.csv"), report.to_csv()).map_err(|e| e.to_string())?;
            Ok(report)
        })();
        table.rows.push(CellResult {
            cell: *cell,
            dir,
            report: result,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("ablation.csv");
    fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
