//! Oracles and fixtures shared by the integration suites and the acceptance
//! harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarcloud::architectures::{build_generator, Generator, GeneratorSpec, WeightInit};
use sarcloud::nncore::{grad_check, ConvGeometry, Conv2d, Ctx, GradCheckOptions, Layer, Scalar, Tensor};

pub fn random<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Normal weights of the given std plus non-zero biases, so bias gradients
/// are exercised.
pub fn init<T: Scalar>(net: &mut dyn Layer<T>, seed: u64, std: f64) {
    WeightInit { std, gamma_std: 0.1 }.apply(net, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    net.visit_mut(&mut |p| {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::of(rng.random_range(-0.2..0.2)));
        }
    });
}

pub fn opts(samples: usize) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: 1e-3,
        samples,
        ..Default::default()
    }
}

/// Max relative error of a biased conv (or transposed conv) layer in f64.
pub fn conv_grad_error(geometry: ConvGeometry, transposed: bool, input: [usize; 4], out_ch: usize) -> f64 {
    let mut conv = Conv2d::<f64>::new("c", input[1], out_ch, geometry, transposed, true);
    init(&mut conv, 1, 0.3);
    let x = random::<f64>(input, 2);
    grad_check(&mut conv, &x, &Ctx::eval, opts(64)).unwrap().max_rel_error
}

/// 16x16-input generator with base width 8.
pub fn tiny_generator<T: Scalar>(std: f64) -> Generator<T> {
    let spec = GeneratorSpec::with_width(1, 8, 0.2);
    let mut g = build_generator::<T, _>(&spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    init(&mut g, 10, std);
    g
}

/// Full tiny generator in f64, eval mode and train-mode batch statistics.
pub fn full_network_error_f64() -> (f64, f64) {
    let x = random::<f64>([2, 1, 16, 16], 11);
    let mut g = tiny_generator::<f64>(0.15);
    let eval = grad_check(&mut g, &x, &Ctx::eval, GradCheckOptions { epsilon: 1e-6, samples: 6, floor: 1e-5, seed: 1 })
        .unwrap()
        .max_rel_error;
    // conv biases ahead of batch norm have an exact zero gradient in train
    // mode; the floor keeps rounding noise in their differences from reading
    // as error
    let mut g = tiny_generator::<f64>(0.2);
    let train = grad_check(&mut g, &x, &Ctx::train_no_dropout, GradCheckOptions { epsilon: 1e-6, samples: 6, floor: 1e-3, seed: 1 })
        .unwrap()
        .max_rel_error;
    (eval, train)
}

/// 32-bit backward of the tiny generator against 64-bit central differences
/// of the same weights.
pub fn full_network_error_f32() -> f64 {
    let x64 = random::<f64>([2, 1, 16, 16], 11);
    let proj = random::<f64>([2, 3, 16, 16], 12);
    let mut g32 = tiny_generator::<f32>(0.15);
    let mut g64 = tiny_generator::<f64>(0.15);
    g32.forward(&x64.cast(), &mut Ctx::eval()).unwrap();
    let dx = g32.backward(&proj.cast()).unwrap();

    let mut grads: Vec<Vec<f64>> = Vec::new();
    g32.visit(&mut |p| {
        if p.trainable {
            grads.push(p.grad().unwrap().iter().map(|v| *v as f64).collect());
        }
    });
    let loss = |g: &mut dyn Layer<f64>, x: &Tensor<f64>| g.forward(x, &mut Ctx::eval()).unwrap().dot(&proj);
    let (eps, floor) = (1e-6, 1e-5);
    let mut worst = 0.0f64;
    let mut rel = |a: f64, n: f64| worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..16 {
        let i = rng.random_range(0..x64.numel());
        let (mut xp, mut xm) = (x64.clone(), x64.clone());
        xp.data_mut()[i] += eps;
        xm.data_mut()[i] -= eps;
        rel(dx.data()[i] as f64, (loss(&mut g64, &xp) - loss(&mut g64, &xm)) / (2.0 * eps));
    }
    for (pi, grad) in grads.iter().enumerate() {
        for _ in 0..4 {
            let i = rng.random_range(0..grad.len());
            let set = |g: &mut dyn Layer<f64>, delta: f64| {
                let mut k = 0;
                g.visit_mut(&mut |p| {
                    if p.trainable {
                        if k == pi {
                            p.value.data_mut()[i] += delta;
                        }
                        k += 1;
                    }
                });
            };
            set(&mut g64, eps);
            let lp = loss(&mut g64, &x64);
            set(&mut g64, -2.0 * eps);
            let lm = loss(&mut g64, &x64);
            set(&mut g64, eps);
            rel(grad[i], (lp - lm) / (2.0 * eps));
        }
    }
    worst
}

// hand count: weights + bias, plus gamma and beta when batch-normalized
pub fn conv_count(i: usize, o: usize, k: usize, bn: bool) -> usize {
    i * o * k * k + o + if bn { 2 * o } else { 0 }
}

pub fn drib_count(b: usize) -> usize {
    3 * (conv_count(8 * b, 4 * b, 1, true) + conv_count(4 * b, 4 * b, 3, true)) + conv_count(12 * b, 8 * b, 1, true)
}

/// Encoder and decoder of a generator with base width `b`.
pub fn shell_count(in_channels: usize, b: usize) -> usize {
    let encoder = conv_count(in_channels, b, 4, false)
        + conv_count(b, 2 * b, 4, true)
        + conv_count(2 * b, 4 * b, 4, true)
        + conv_count(4 * b, 8 * b, 4, true);
    // decoder inputs widened by the skip concatenations 3->1, 2->3, 1->4
    let decoder = conv_count(8 * b + 4 * b, 4 * b, 4, true)
        + conv_count(4 * b, 2 * b, 4, true)
        + conv_count(2 * b + 2 * b, b, 4, true)
        + conv_count(b + b, 3, 4, false);
    encoder + decoder
}

pub fn unet_count(c: usize, levels: usize) -> usize {
    (0..levels)
        .map(|i| {
            let innermost = i + 1 == levels;
            conv_count(c, c, 4, !innermost) + conv_count(if innermost { c } else { 2 * c }, c, 4, true)
        })
        .sum()
}

/// Mirror index without repeating the edge sample.
fn mirror(i: isize, n: isize) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Per-pixel SSIM with a full 2-D Gaussian window and two-pass moments.
pub fn naive_ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> Vec<f64> {
    let (sigma, radius) = (1.5f64, 5isize);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut weights = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            weights.push((dy, dx, (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = weights.iter().map(|w| w.2).sum();
    let [b, c, h, w] = x.shape();
    let unit = |t: &Tensor<f64>, n, ch, i, j| (t.at([n, ch, i, j]) + 1.0) / 2.0;
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let taps: Vec<(f64, f64, f64)> = weights
                        .iter()
                        .map(|&(dy, dx, wt)| {
                            let (r, s) = (mirror(i + dy, h as isize), mirror(j + dx, w as isize));
                            (wt / total, unit(x, n, ch, r, s), unit(y, n, ch, r, s))
                        })
                        .collect();
                    let mx: f64 = taps.iter().map(|t| t.0 * t.1).sum();
                    let my: f64 = taps.iter().map(|t| t.0 * t.2).sum();
                    let vx: f64 = taps.iter().map(|t| t.0 * (t.1 - mx).powi(2)).sum();
                    let vy: f64 = taps.iter().map(|t| t.0 * (t.2 - my).powi(2)).sum();
                    let cxy: f64 = taps.iter().map(|t| t.0 * (t.1 - mx) * (t.2 - my)).sum();
                    out.push(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
                }
            }
        }
    }
    out
}

/// A pair correlated enough that SSIM is far from zero.
pub fn correlated_pair(shape: [usize; 4], seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let x = random::<f64>(shape, seed);
    let noise = random::<f64>(shape, seed + 1);
    let y = Tensor::from_fn(shape, |i| (0.7 * x.at(i) + 0.3 * noise.at(i)).clamp(-1.0, 1.0));
    (x, y)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `-log(sigmoid(x))` or `-log(1 - sigmoid(x))` computed literally.
pub fn naive_logit_loss(x: f64, real: bool) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    if real {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}
