//! Adversarial, L1 and SSIM objectives with analytic gradients.
//!
//! Images live in `[-1, 1]`; every SSIM computation first remaps them to
//! `[0, 1]` and uses `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` with `L = 1`.
//! Windowed statistics use an 11x11 Gaussian (sigma 1.5) with reflect
//! padding, so the SSIM map has the input's size. All losses are means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::nncore::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn window_2d(&self) -> Vec<f64> {
        let t = self.taps();
        t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) || self.sigma <= 0.0 || self.c1() <= 0.0 || self.c2() <= 0.0 {
            return Err(Error::Config(format!("invalid SSIM parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 100.0,
            lambda2: 100.0,
        }
    }
}

/// Named loss-weight presets used in the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossPreset {
    #[serde(rename = "L1")]
    L1,
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "SSIM+L1")]
    SsimL1,
}

impl LossPreset {
    pub fn weights(self) -> LossWeights {
        match self {
            LossPreset::L1 => LossWeights {
                lambda1: 100.0,
                lambda2: 0.0,
            },
            LossPreset::Ssim => LossWeights {
                lambda1: 0.0,
                lambda2: 100.0,
            },
            LossPreset::SsimL1 => LossWeights::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossPreset::L1 => "L1",
            LossPreset::Ssim => "SSIM",
            LossPreset::SsimL1 => "SSIM+L1",
        }
    }
}

/// A scalar loss and its gradient with respect to one input.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `mean(-log s(x))`: the loss of logits that should read "real".
pub fn logit_loss_real<T: Scalar>(logits: &Tensor<T>) -> LossGrad<T> {
    let n = logits.numel() as f64;
    let mut value = 0.0;
    let mut grad = logits.clone();
    for v in grad.data_mut() {
        let x = v.as_f64();
        value += softplus(-x) / n;
        *v = T::of((sigmoid(x) - 1.0) / n);
    }
    LossGrad { value, grad }
}

/// `mean(-log(1 - s(x)))`: the loss of logits that should read "fake".
pub fn logit_loss_fake<T: Scalar>(logits: &Tensor<T>) -> LossGrad<T> {
    let n = logits.numel() as f64;
    let mut value = 0.0;
    let mut grad = logits.clone();
    for v in grad.data_mut() {
        let x = v.as_f64();
        value += softplus(x) / n;
        *v = T::of(sigmoid(x) / n);
    }
    LossGrad { value, grad }
}

/// Discriminator loss `mean(-log s(real)) + mean(-log(1 - s(fake)))` from
/// raw logits. Returns the value and the gradients for both logit maps.
pub fn cgan_loss_d<T: Scalar>(
    logits_real: &Tensor<T>,
    logits_fake: &Tensor<T>,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    same_shape("cgan_loss_d", logits_real, logits_fake)?;
    let real = logit_loss_real(logits_real);
    let fake = logit_loss_fake(logits_fake);
    Ok((real.value + fake.value, real.grad, fake.grad))
}

/// Non-saturating generator loss `mean(-log s(fake))`.
pub fn cgan_loss_g<T: Scalar>(logits_fake: &Tensor<T>) -> LossGrad<T> {
    logit_loss_real(logits_fake)
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossGrad<T>> {
    same_shape("l1_loss", pred, target)?;
    let n = pred.numel() as f64;
    let mut value = 0.0;
    let mut grad = pred.clone();
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = g.as_f64() - t.as_f64();
        value += d.abs();
        *g = T::of(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

/// Maps model-space values in `[-1, 1]` to `[0, 1]`.
pub fn to_unit(v: f64) -> f64 {
    (v + 1.0) * 0.5
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian filter with reflect padding on an `h x w` plane.
struct Window {
    taps: Vec<f64>,
    h: usize,
    w: usize,
}

impl Window {
    fn radius(&self) -> isize {
        (self.taps.len() / 2) as isize
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.h, self.w, self.radius());
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = self
                    .taps
                    .iter()
                    .enumerate()
                    .map(|(t, g)| g * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = self
                    .taps
                    .iter()
                    .enumerate()
                    .map(|(t, g)| g * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
        out
    }

    /// Adjoint of [`Window::apply`].
    fn apply_adjoint(&self, src: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.h, self.w, self.radius());
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                for (t, g) in self.taps.iter().enumerate() {
                    tmp[reflect(y as isize + t as isize - r, h) * w + x] += g * v;
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for (t, g) in self.taps.iter().enumerate() {
                    out[y * w + reflect(x as isize + t as isize - r, w)] += g * v;
                }
            }
        }
        out
    }
}

/// Windowed statistics of one plane pair, kept for the backward pass.
struct PlaneStats {
    map: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    b1: Vec<f64>,
    a2: Vec<f64>,
    b2: Vec<f64>,
}

fn plane_stats(x: &[f64], y: &[f64], win: &Window, p: &SsimParams) -> PlaneStats {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = win.apply(x);
    let mu_y = win.apply(y);
    let sxx = win.apply(&sq(x, x));
    let syy = win.apply(&sq(y, y));
    let sxy = win.apply(&sq(x, y));
    let (c1, c2) = (p.c1(), p.c2());
    let n = x.len();
    let (mut map, mut a1, mut b1, mut a2, mut b2) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = sxx[i] - mx * mx;
        let vy = syy[i] - my * my;
        let cov = sxy[i] - mx * my;
        a1[i] = 2.0 * mx * my + c1;
        b1[i] = mx * mx + my * my + c1;
        a2[i] = 2.0 * cov + c2;
        b2[i] = vx + vy + c2;
        map[i] = a1[i] * a2[i] / (b1[i] * b2[i]);
    }
    PlaneStats {
        map,
        mu_x,
        mu_y,
        a1,
        b1,
        a2,
        b2,
    }
}

/// Gradient of `sum_p upstream[p] * ssim[p]` with respect to `x`.
fn plane_grad(x: &[f64], y: &[f64], st: &PlaneStats, upstream: f64, win: &Window) -> Vec<f64> {
    let n = x.len();
    let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let s = st.map[i];
        let (mx, my) = (st.mu_x[i], st.mu_y[i]);
        let da = -s / st.b2[i];
        let db = 2.0 * s / st.a2[i];
        let dc = s * (2.0 * my / st.a1[i] - 2.0 * mx / st.b1[i]) - 2.0 * mx * da - my * db;
        a[i] = upstream * da;
        b[i] = upstream * db;
        c[i] = upstream * dc;
    }
    let (ga, gb, gc) = (win.apply_adjoint(&a), win.apply_adjoint(&b), win.apply_adjoint(&c));
    (0..n).map(|i| gc[i] + 2.0 * x[i] * ga[i] + y[i] * gb[i]).collect()
}

fn unit_planes<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let plane = t.plane_len();
    t.data()
        .chunks(plane)
        .map(|c| c.iter().map(|v| to_unit(v.as_f64())).collect())
        .collect()
}

fn window_for<T: Scalar>(t: &Tensor<T>, p: &SsimParams) -> Result<Window> {
    p.validate()?;
    Ok(Window {
        taps: p.taps(),
        h: t.height(),
        w: t.width(),
    })
}

/// Per-pixel SSIM of two `[-1, 1]` tensors, computed per channel.
pub fn ssim_map<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<Tensor<T>> {
    same_shape("ssim_map", x, y)?;
    let win = window_for(x, p)?;
    let (xs, ys) = (unit_planes(x), unit_planes(y));
    let maps = exec::map(xs.len(), |i| plane_stats(&xs[i], &ys[i], &win, p).map);
    let data = maps.into_iter().flatten().map(T::of).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Mean SSIM over every pixel and channel.
pub fn ssim_mean<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    let m = ssim_map(x, y, p)?;
    Ok(m.data().iter().map(|v| v.as_f64()).sum::<f64>() / m.numel() as f64)
}

/// `mean(1 - ssim_map(pred, target))` and its gradient with respect to `pred`.
pub fn ssim_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, p: &SsimParams) -> Result<LossGrad<T>> {
    same_shape("ssim_loss", pred, target)?;
    let win = window_for(pred, p)?;
    let (xs, ys) = (unit_planes(pred), unit_planes(target));
    let n = pred.numel() as f64;
    let per_plane = exec::map(xs.len(), |i| {
        let st = plane_stats(&xs[i], &ys[i], &win, p);
        let sum: f64 = st.map.iter().sum();
        // d loss / d ssim = -1/n, and d unit / d model = 1/2
        let g = plane_grad(&xs[i], &ys[i], &st, -1.0 / n, &win);
        (sum, g)
    });
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.numel());
    for (s, g) in per_plane {
        total += s;
        grad.extend(g.into_iter().map(|v| T::of(0.5 * v)));
    }
    Ok(LossGrad {
        value: 1.0 - total / n,
        grad: Tensor::from_vec(pred.shape(), grad)?,
    })
}

/// Generator objective `L_cGAN + lambda1 * L1 + lambda2 * L_ssim` with its
/// components. Pass `logits_fake = None` to drop the adversarial term.
#[derive(Debug, Clone)]
pub struct GeneratorLoss<T> {
    pub total: f64,
    pub cgan: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad_logits: Option<Tensor<T>>,
    pub grad_pred: Tensor<T>,
}

pub fn generator_objective<T: Scalar>(
    logits_fake: Option<&Tensor<T>>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    p: &SsimParams,
) -> Result<GeneratorLoss<T>> {
    let adv = logits_fake.map(cgan_loss_g);
    let l1 = l1_loss(pred, target)?;
    let ssim = ssim_loss(pred, target, p)?;
    let cgan = adv.as_ref().map_or(0.0, |a| a.value);
    let total = cgan + weights.lambda1 * l1.value + weights.lambda2 * ssim.value;
    let (w1, w2) = (T::of(weights.lambda1), T::of(weights.lambda2));
    let mut grad_pred = l1.grad;
    for (g, s) in grad_pred.data_mut().iter_mut().zip(ssim.grad.data()) {
        *g = w1 * *g + w2 * *s;
    }
    Ok(GeneratorLoss {
        total,
        cgan,
        l1: l1.value,
        ssim: ssim.value,
        grad_logits: adv.map(|a| a.grad),
        grad_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{grad_check_fn, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = SsimParams::default().window_2d();
        assert_eq!(w.len(), 121);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for i in 0..11 {
            for j in 0..11 {
                assert!((w[i * 11 + j] - w[j * 11 + i]).abs() < 1e-15);
                assert!((w[i * 11 + j] - w[(10 - i) * 11 + (10 - j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn window_adjoint() {
        let win = Window {
            taps: SsimParams::default().taps(),
            h: 6,
            w: 9,
        };
        let a: Vec<f64> = random([1, 1, 6, 9], 1).into_vec();
        let b: Vec<f64> = random([1, 1, 6, 9], 2).into_vec();
        let lhs: f64 = win.apply(&a).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(win.apply_adjoint(&b)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn cgan_closed_forms() {
        let z = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let (d, _, _) = cgan_loss_d(&z, &z).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((cgan_loss_g(&z).value - 2f64.ln()).abs() < 1e-12);
        let big = Tensor::<f64>::full([1, 1, 2, 2], 40.0);
        let small = Tensor::<f64>::full([1, 1, 2, 2], -40.0);
        assert!(cgan_loss_d(&big, &small).unwrap().0 < 1e-15);
        let swapped = cgan_loss_d(&small, &big).unwrap().0;
        assert!((swapped - 80.0).abs() < 1e-9);
        assert!(cgan_loss_g(&big).value < 1e-15);
        // gradient descent on the generator loss raises the fake logits
        assert!(cgan_loss_g(&z).grad.data().iter().all(|&g| g < 0.0));
    }

    #[test]
    fn l1_cases() {
        let t = random([1, 3, 4, 4], 3);
        assert_eq!(l1_loss(&t, &t).unwrap().value, 0.0);
        let p = t.map(|v| v + 0.5);
        assert!((l1_loss(&p, &t).unwrap().value - 0.5).abs() < 1e-12);
        assert!(l1_loss(&t, &Tensor::zeros([1, 3, 4, 5])).is_err());
    }

    #[test]
    fn ssim_identical_and_constant() {
        let x = random([2, 3, 12, 12], 4);
        let m = ssim_map(&x, &x, &SsimParams::default()).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        let p = SsimParams::default();
        let (a, b) = (0.2f64, -0.6f64);
        let m = ssim_map(&Tensor::full([1, 1, 8, 8], a), &Tensor::full([1, 1, 8, 8], b), &p).unwrap();
        let (ua, ub) = (to_unit(a), to_unit(b));
        let want = (2.0 * ua * ub + p.c1()) / (ua * ua + ub * ub + p.c1());
        assert!(m.data().iter().all(|&v| (v - want).abs() < 1e-9));
    }

    #[test]
    fn ssim_loss_stationary_at_target() {
        let x = random([1, 2, 8, 8], 5);
        let l = ssim_loss(&x, &x, &SsimParams::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ssim_loss_gradient() {
        let p = SsimParams::default();
        let x = random([1, 2, 8, 8], 6);
        let y = random([1, 2, 8, 8], 7);
        let analytic = ssim_loss(&x, &y, &p).unwrap().grad;
        let f = |t: &Tensor<f64>| ssim_loss(t, &y, &p).unwrap().value;
        let r = grad_check_fn(&f, &x, &analytic, GradCheckOptions { epsilon: 1e-5, samples: 128, ..Default::default() });
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn objective_bookkeeping() {
        let p = SsimParams::default();
        let t = random([1, 3, 8, 8], 8);
        let z = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let o = generator_objective(Some(&z), &t, &t, &LossWeights::default(), &p).unwrap();
        assert!((o.total - 2f64.ln()).abs() < 1e-12);
        let pred = random([1, 3, 8, 8], 9);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let o = generator_objective(Some(&z), &pred, &t, &w, &p).unwrap();
        assert!((o.total - cgan_loss_g(&z).value).abs() < 1e-12);
        let w = LossWeights::default();
        let o = generator_objective(Some(&z), &pred, &t, &w, &p).unwrap();
        assert!((o.total - (o.cgan + 100.0 * o.l1 + 100.0 * o.ssim)).abs() < 1e-6);
    }

    #[test]
    fn presets() {
        assert_eq!(LossPreset::L1.weights(), LossWeights { lambda1: 100.0, lambda2: 0.0 });
        assert_eq!(LossPreset::Ssim.weights(), LossWeights { lambda1: 0.0, lambda2: 100.0 });
        assert_eq!(LossPreset::SsimL1.weights(), LossWeights { lambda1: 100.0, lambda2: 100.0 });
        let json = serde_json::to_string(&LossPreset::SsimL1).unwrap();
        assert_eq!(json, "\"SSIM+L1\"");
    }
}
