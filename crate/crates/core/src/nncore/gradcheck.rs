//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{zero_grads, Ctx, Layer, Param, Scalar, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub samples: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-3,
            samples: 24,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }
}

fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Compares the analytic backward pass of `layer` against central finite
/// differences of `L = <forward(x), r>` for a fixed random projection `r`.
///
/// `ctx` builds a fresh context for each forward pass; it must make the
/// layer deterministic (dropout off). Input coordinates and coordinates of
/// every trainable parameter are checked.
pub fn grad_check<T: Scalar>(
    layer: &mut dyn Layer<T>,
    input: &Tensor<T>,
    ctx: &dyn Fn() -> Ctx,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out = layer.forward(input, &mut ctx())?;
    let proj: Tensor<T> = Tensor::from_fn(out.shape(), |_| T::of(rng.random_range(-1.0..1.0)));
    zero_grads(layer);
    let out = layer.forward(input, &mut ctx())?;
    debug_assert_eq!(out.shape(), proj.shape());
    let dx = layer.backward(&proj)?;

    let mut param_grads: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit(&mut |p: &Param<T>| {
        if p.trainable {
            let g = p
                .grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            param_grads.push((p.name.clone(), g));
        }
    });

    let loss = |layer: &mut dyn Layer<T>, x: &Tensor<T>| -> Result<f64> {
        Ok(layer.forward(x, &mut ctx())?.dot(&proj))
    };
    let eps = opts.epsilon;
    let mut report = GradCheckReport::new();

    for i in sample_indices(input.numel(), opts.samples, &mut rng) {
        let mut xp = input.clone();
        xp.data_mut()[i] = T::of(input.data()[i].as_f64() + eps);
        let lp = loss(layer, &xp)?;
        xp.data_mut()[i] = T::of(input.data()[i].as_f64() - eps);
        let lm = loss(layer, &xp)?;
        let numeric = (lp - lm) / (2.0 * eps);
        report.record(|| format!("input[{i}]"), dx.data()[i].as_f64(), numeric, opts.floor);
    }

    for (pi, (name, grads)) in param_grads.iter().enumerate() {
        for i in sample_indices(grads.len(), opts.samples, &mut rng) {
            let mut orig = 0.0;
            nudge(layer, pi, i, |v| {
                orig = v;
                v + eps
            });
            let lp = loss(layer, input)?;
            nudge(layer, pi, i, |_| orig - eps);
            let lm = loss(layer, input)?;
            nudge(layer, pi, i, |_| orig);
            let numeric = (lp - lm) / (2.0 * eps);
            report.record(|| format!("{name}[{i}]"), grads[i], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Rewrites coordinate `i` of the `param_idx`-th trainable parameter.
fn nudge<T: Scalar>(layer: &mut dyn Layer<T>, param_idx: usize, i: usize, mut f: impl FnMut(f64) -> f64) {
    let mut k = 0;
    layer.visit_mut(&mut |p| {
        if !p.trainable {
            return;
        }
        if k == param_idx {
            let v = &mut p.value.data_mut()[i];
            *v = T::of(f(v.as_f64()));
        }
        k += 1;
    });
}

/// Finite-difference check of a scalar function against a supplied gradient.
pub fn grad_check_fn<T: Scalar>(
    f: &dyn Fn(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::new();
    for i in sample_indices(x.numel(), opts.samples, &mut rng) {
        let mut xp = x.clone();
        xp.data_mut()[i] = T::of(x.data()[i].as_f64() + opts.epsilon);
        let lp = f(&xp);
        xp.data_mut()[i] = T::of(x.data()[i].as_f64() - opts.epsilon);
        let lm = f(&xp);
        let numeric = (lp - lm) / (2.0 * opts.epsilon);
        report.record(|| format!("x[{i}]"), analytic.data()[i].as_f64(), numeric, opts.floor);
    }
    report
}
