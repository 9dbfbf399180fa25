//! PSNR, SSIM and region-split PSNR, plus per-image evaluation reports.
//!
//! Every metric works on images remapped from `[-1, 1]` to `[0, 1]`.
//! Identical images give an infinite PSNR, which is kept in per-image rows
//! and excluded from means. A PSNR over an empty region is undefined and is
//! reported as `NA`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::architectures::Generator;
use crate::cloudsim::{binarize, RegionMap, DEFAULT_TAU};
use crate::dataio::SamplePair;
use crate::error::{Error, Result};
use crate::losses::{ssim_mean, to_unit, SsimParams};
use crate::nncore::{Ctx, Layer, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub max_i: f64,
    pub tau: f64,
    pub ssim: SsimParams,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            max_i: 1.0,
            tau: DEFAULT_TAU,
            ssim: SsimParams::default(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_i > 0.0) || !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("invalid metric configuration {self:?}")));
        }
        self.ssim.validate()
    }
}

fn check(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("metric", &pred.shape(), &target.shape()));
    }
    Ok(())
}

fn sq_err(p: f32, t: f32) -> f64 {
    let d = to_unit(p as f64) - to_unit(t as f64);
    d * d
}

/// Mean squared error on the `[0, 1]` remap.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &t)| sq_err(p, t)).sum::<f64>() / pred.numel() as f64)
}

pub fn psnr_from_mse(mse: f64, max_i: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_i / mse.sqrt()).log10()
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, cfg.max_i))
}

/// Squared-error sum and element count over the positions where
/// `region` is true, across all channels and batch items.
pub fn region_sse(pred: &Tensor, target: &Tensor, region: &[bool]) -> Result<(f64, usize)> {
    check(pred, target)?;
    let plane = pred.plane_len();
    if region.len() != plane {
        return Err(Error::shape("region", &[pred.height(), pred.width()], &[region.len()]));
    }
    let mut sse = 0.0;
    let mut n = 0;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if region[i % plane] {
            sse += sq_err(p, t);
            n += 1;
        }
    }
    Ok((sse, n))
}

/// PSNR restricted to `region`; `None` when the region is empty.
pub fn masked_psnr(pred: &Tensor, target: &Tensor, region: &[bool], cfg: &MetricConfig) -> Result<Option<f64>> {
    let (sse, n) = region_sse(pred, target, region)?;
    Ok((n > 0).then(|| psnr_from_mse(sse / n as f64, cfg.max_i)))
}

/// Mean of the SSIM map.
pub fn ssim_metric(pred: &Tensor, target: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    ssim_mean(pred, target, &cfg.ssim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_cloudy: Option<f64>,
    pub psnr_noncloudy: Option<f64>,
    /// Element counts (pixels times channels) in each region.
    pub n_cloudy: usize,
    pub n_noncloudy: usize,
}

pub fn image_metrics(id: &str, pred: &Tensor, target: &Tensor, region: Option<&RegionMap>, cfg: &MetricConfig) -> Result<ImageMetrics> {
    let psnr = psnr(pred, target, cfg)?;
    let ssim = ssim_metric(pred, target, cfg)?;
    let (psnr_cloudy, psnr_noncloudy, n_cloudy, n_noncloudy) = match region {
        Some(r) => {
            let clear = r.complement();
            let (sc, nc) = region_sse(pred, target, r.cloudy())?;
            let (sn, nn) = region_sse(pred, target, clear.cloudy())?;
            let p = |s: f64, n: usize| (n > 0).then(|| psnr_from_mse(s / n as f64, cfg.max_i));
            (p(sc, nc), p(sn, nn), nc, nn)
        }
        None => (None, None, 0, pred.numel()),
    };
    Ok(ImageMetrics {
        id: id.to_string(),
        psnr,
        ssim,
        psnr_cloudy,
        psnr_noncloudy,
        n_cloudy,
        n_noncloudy,
    })
}

/// Mean over finite values, with the number of values left out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub infinite: usize,
    pub undefined: usize,
}

fn aggregate(values: impl Iterator<Item = Option<f64>>) -> Aggregate {
    let (mut sum, mut n, mut infinite, mut undefined) = (0.0, 0usize, 0, 0);
    for v in values {
        match v {
            None => undefined += 1,
            Some(x) if x.is_infinite() => infinite += 1,
            Some(x) => {
                sum += x;
                n += 1;
            }
        }
    }
    Aggregate {
        mean: (n > 0).then(|| sum / n as f64),
        infinite,
        undefined,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    pub config: MetricConfig,
    pub rows: Vec<ImageMetrics>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| Some(r.psnr)))
    }

    pub fn mean_ssim(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| Some(r.ssim)))
    }

    pub fn mean_psnr_cloudy(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| r.psnr_cloudy))
    }

    pub fn mean_psnr_noncloudy(&self) -> Aggregate {
        aggregate(self.rows.iter().map(|r| r.psnr_noncloudy))
    }

    pub fn to_csv(&self) -> String {
        let aggs = [self.mean_psnr(), self.mean_ssim(), self.mean_psnr_cloudy(), self.mean_psnr_noncloudy()];
        let mut s = String::new();
        let _ = writeln!(s, "# tau={}", self.config.tau);
        let _ = writeln!(s, "# max_i={}", self.config.max_i);
        let _ = writeln!(s, "# checkpoint={}", self.checkpoint);
        let _ = writeln!(s, "# aggregation=per-image mean over finite values");
        let _ = writeln!(
            s,
            "# excluded infinite: psnr={} psnr_cloudy={} psnr_noncloudy={}",
            aggs[0].infinite, aggs[2].infinite, aggs[3].infinite
        );
        let _ = writeln!(s, "# undefined: psnr_cloudy={} psnr_noncloudy={}", aggs[2].undefined, aggs[3].undefined);
        s.push_str("id,psnr,ssim,psnr_cloudy,psnr_noncloudy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.id,
                fmt_metric(Some(r.psnr)),
                fmt_metric(Some(r.ssim)),
                fmt_metric(r.psnr_cloudy),
                fmt_metric(r.psnr_noncloudy)
            );
        }
        let _ = writeln!(
            s,
            "mean,{},{},{},{}",
            fmt_metric(aggs[0].mean),
            fmt_metric(aggs[1].mean),
            fmt_metric(aggs[2].mean),
            fmt_metric(aggs[3].mean)
        );
        s
    }
}

pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
    }
}

/// Something that maps a sample to a predicted clean optical patch.
pub enum EvalModel {
    /// Returns the target itself.
    Oracle,
    /// Returns the cloudy input unchanged.
    Cloudy,
    /// Returns a constant image.
    Constant(f32),
    Sar2opt(Generator<f32>),
    CloudRemoval {
        generator: Generator<f32>,
        translator: Option<Generator<f32>>,
    },
}

impl EvalModel {
    pub fn needs_clouds(&self) -> bool {
        matches!(self, EvalModel::Cloudy | EvalModel::CloudRemoval { .. })
    }

    /// Prediction for one sample with every network in eval mode.
    pub fn predict(&mut self, s: &SamplePair) -> Result<Tensor> {
        let cloudy = || {
            s.cloudy
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {} has no cloudy patch", s.id)))
        };
        match self {
            EvalModel::Oracle => Ok(s.optical.clone()),
            EvalModel::Cloudy => Ok(cloudy()?.clone()),
            EvalModel::Constant(v) => Ok(Tensor::full(s.optical.shape(), *v)),
            EvalModel::Sar2opt(g) => g.forward(&s.sar, &mut Ctx::eval()),
            EvalModel::CloudRemoval { generator, translator } => {
                let cond = match translator {
                    Some(t) => t.forward(&s.sar, &mut Ctx::eval())?,
                    None => s.sar.clone(),
                };
                let input = Tensor::concat_channels(cloudy()?, &cond)?;
                generator.forward(&input, &mut Ctx::eval())
            }
        }
    }
}

/// Runs `model` over `samples` and collects per-image metrics. Region
/// metrics use each sample's mask binarized at `cfg.tau`.
pub fn evaluate(model: &mut EvalModel, samples: &[SamplePair], cfg: &MetricConfig, checkpoint: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if model.needs_clouds() && s.mask.is_none() {
            return Err(Error::Data(format!(
                "sample {}: cloud-removal evaluation needs cloudy patches and masks",
                s.id
            )));
        }
        let pred = model.predict(s)?;
        let region = s.mask.as_ref().map(|m| binarize(m, cfg.tau)).transpose()?;
        rows.push(image_metrics(&s.id, &pred, &s.optical, region.as_ref(), cfg)?);
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        config: *cfg,
        rows,
    })
}
