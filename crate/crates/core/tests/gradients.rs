//! Finite-difference checks of every differentiable op.

mod common;

use common::{conv_grad_error, full_network_error_f32, full_network_error_f64, init, opts, random};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcloud::architectures::{build_discriminator, DiscriminatorSpec};
use sarcloud::losses::{ssim_loss, SsimParams};
use sarcloud::nncore::{
    grad_check, grad_check_fn, ActKind, Activation, BatchNorm2d, Conv2d, ConvGeometry, Ctx, GradCheckOptions, Op,
    Sequential, Tensor,
};

#[test]
fn conv2d_gradients() {
    let e = conv_grad_error(ConvGeometry::same(3, 1), false, [2, 3, 8, 8], 4);
    assert!(e < 1e-3, "{e}");
    let e = conv_grad_error(ConvGeometry::resample(4), false, [2, 3, 8, 8], 4);
    assert!(e < 1e-3, "{e}");
    let e = conv_grad_error(ConvGeometry::same(4, 1), false, [1, 2, 8, 8], 3);
    assert!(e < 1e-3, "{e}");
}

#[test]
fn transposed_conv_gradients() {
    let e = conv_grad_error(ConvGeometry::resample(4), true, [2, 3, 4, 4], 2);
    assert!(e < 1e-3, "{e}");
    let e = conv_grad_error(ConvGeometry::same(4, 1), true, [1, 2, 8, 8], 3);
    assert!(e < 1e-3, "{e}");
}

#[test]
fn dilated_conv_gradients() {
    for rate in 1..=3 {
        let e = conv_grad_error(ConvGeometry::same(3, rate), false, [1, 2, 10, 10], 3);
        assert!(e < 1e-3, "rate {rate}: {e}");
    }
}

#[test]
fn batch_norm_train_gradients() {
    let mut bn = BatchNorm2d::<f64>::new("bn", 3);
    init(&mut bn, 3, 0.02);
    let x = random::<f64>([2, 3, 4, 4], 4);
    let r = grad_check(&mut bn, &x, &Ctx::train_no_dropout, opts(48)).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
    let r = grad_check(&mut bn, &x, &Ctx::eval, opts(48)).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn activation_gradients() {
    // keep inputs away from the rectifier kink
    let x = random::<f64>([1, 2, 5, 5], 5).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let mut tanh = Activation::<f64>::new(ActKind::Tanh);
    let r = grad_check(&mut tanh, &x, &Ctx::eval, opts(50)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    for kind in [ActKind::Relu, ActKind::LeakyRelu { slope: 0.2 }] {
        let mut a = Activation::<f64>::new(kind);
        let r = grad_check(&mut a, &x, &Ctx::eval, opts(50)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{kind:?}: {r:?}");
    }
}

#[test]
fn sequential_block_gradients() {
    let g = ConvGeometry::resample(4);
    let mut net = Sequential::<f64>::new(vec![
        Op::Conv(Conv2d::new("c", 2, 4, g, false, true)),
        Op::Norm(BatchNorm2d::new("bn", 4)),
        Op::Act(Activation::new(ActKind::LeakyRelu { slope: 0.2 })),
    ]);
    init(&mut net, 6, 0.3);
    let x = random::<f64>([2, 2, 8, 8], 7);
    let r = grad_check(&mut net, &x, &Ctx::train_no_dropout, opts(40)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn ssim_loss_gradient() {
    let p = SsimParams::default();
    let x = random::<f64>([1, 3, 8, 8], 8);
    let y = random::<f64>([1, 3, 8, 8], 9);
    let analytic = ssim_loss(&x, &y, &p).unwrap().grad;
    let f = |t: &Tensor<f64>| ssim_loss(t, &y, &p).unwrap().value;
    let r = grad_check_fn(&f, &x, &analytic, GradCheckOptions { epsilon: 1e-5, samples: 192, ..Default::default() });
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn full_generator_gradients_f64() {
    let (eval, train) = full_network_error_f64();
    assert!(eval < 1e-4, "eval: {eval}");
    assert!(train < 1e-4, "train: {train}");
}

/// 32-bit backward against 64-bit central differences of the same weights.
#[test]
fn full_generator_gradients_f32() {
    let worst = full_network_error_f32();
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn full_discriminator_gradients_f64() {
    let spec = DiscriminatorSpec::with_width(1, 4, 0.2);
    let mut d = build_discriminator::<f64, _>(&spec, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    init(&mut d, 12, 0.2);
    let x = random::<f64>([2, 4, 32, 32], 13);
    let r = grad_check(&mut d, &x, &Ctx::train_no_dropout, GradCheckOptions { epsilon: 1e-6, samples: 6, floor: 1e-3, seed: 2 }).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
