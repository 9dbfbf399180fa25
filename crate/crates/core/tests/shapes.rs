//! Shape contracts, parameter counts and convolution adjointness.

mod common;

use common::{conv_count, drib_count, shell_count, unet_count};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcloud::architectures::{
    build_discriminator, build_drib, build_generator, build_unet_baseline, Bottleneck, DiscriminatorSpec, DribSpec,
    GeneratorSpec, DEFAULT_LEAKY_SLOPE, REFERENCE_WIDTH,
};
use sarcloud::nncore::{conv2d, conv2d_transpose_to, param_count, ConvGeometry, Ctx, Layer, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    common::random(shape, seed)
}

#[test]
fn generator_shapes() {
    for in_channels in [1, 6] {
        let spec = GeneratorSpec::with_width(in_channels, 8, DEFAULT_LEAKY_SLOPE);
        let mut g = build_generator::<f32, _>(&spec, &mut rng(1)).unwrap();
        for size in [32, 64, 256] {
            let x = random([2, in_channels, size, size], 2).cast::<f32>();
            let y = g.forward(&x, &mut Ctx::eval()).unwrap();
            assert_eq!(y.shape(), [2, 3, size, size]);
            assert!(y.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn reference_width_generator_shapes() {
    let mut g = build_generator::<f32, _>(&GeneratorSpec::reference(1), &mut rng(3)).unwrap();
    let y = g.forward(&random([2, 1, 256, 256], 4).cast(), &mut Ctx::eval()).unwrap();
    assert_eq!(y.shape(), [2, 3, 256, 256]);
    let mut g = build_generator::<f32, _>(&GeneratorSpec::reference(6), &mut rng(5)).unwrap();
    let y = g.forward(&random([1, 6, 64, 64], 6).cast(), &mut Ctx::eval()).unwrap();
    assert_eq!(y.shape(), [1, 3, 64, 64]);
}

#[test]
fn generator_rejects_indivisible_input() {
    let mut g = build_generator::<f32, _>(&GeneratorSpec::with_width(1, 4, 0.2), &mut rng(7)).unwrap();
    assert!(g.forward(&Tensor::zeros([1, 1, 36, 36]), &mut Ctx::eval()).is_err());
    assert!(g.forward(&Tensor::zeros([1, 2, 32, 32]), &mut Ctx::eval()).is_err());
}

#[test]
fn discriminator_shapes() {
    for cond in [1, 6] {
        let spec = DiscriminatorSpec::with_width(cond, 8, DEFAULT_LEAKY_SLOPE);
        assert_eq!(spec.input_channels(), cond + 3);
        let mut d = build_discriminator::<f32, _>(&spec, &mut rng(8)).unwrap();
        for (size, patch) in [(256, 16), (64, 4)] {
            let y = d.forward(&Tensor::zeros([1, cond + 3, size, size]), &mut Ctx::eval()).unwrap();
            assert_eq!(y.shape(), [1, 1, patch, patch]);
        }
        assert!(d.forward(&Tensor::zeros([1, cond + 2, 64, 64]), &mut Ctx::eval()).is_err());
    }
}

#[test]
fn drib_preserves_shape_and_zero_fuse_is_identity() {
    let spec = DribSpec::with_width(8);
    let mut block = build_drib::<f64, _>(&spec, "drib", &mut rng(9)).unwrap();
    let x = random([1, 64, 32, 32], 10);
    let y = block.forward(&x, &mut Ctx::eval()).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_ne!(y.data(), x.data());
    block.fuse.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
    let y = block.forward(&x, &mut Ctx::train_no_dropout()).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn zeroed_fuse_makes_bottleneck_identity() {
    let mut g = build_generator::<f64, _>(&GeneratorSpec::with_width(1, 4, 0.2), &mut rng(11)).unwrap();
    let Bottleneck::Drib(blocks) = &mut g.bottleneck else { panic!("DRIB bottleneck expected") };
    assert_eq!(blocks.len(), 8);
    for b in blocks.iter_mut() {
        b.fuse.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
    }
    let x = random([2, 32, 4, 4], 12);
    let y = g.bottleneck.forward(&x, &mut Ctx::eval()).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn param_counts_match_hand_count() {
    let full = DribSpec::reference();
    let block = build_drib::<f32, _>(&full, "drib", &mut rng(13)).unwrap();
    let expected = 3 * (512 * 256 + 256) + 3 * (256 * 9 * 256 + 256) + (768 * 512 + 512) + 2 * (3 * 256 + 3 * 256 + 512);
    assert_eq!(param_count(&block), expected);
    assert_eq!(drib_count(REFERENCE_WIDTH), expected);

    for (in_channels, b) in [(1, 4), (6, 8), (1, REFERENCE_WIDTH)] {
        let g = build_generator::<f32, _>(&GeneratorSpec::with_width(in_channels, b, 0.2), &mut rng(14)).unwrap();
        assert_eq!(param_count(&g), shell_count(in_channels, b) + 8 * drib_count(b));
    }

    let d = build_discriminator::<f32, _>(&DiscriminatorSpec::reference(1), &mut rng(15)).unwrap();
    let expected = conv_count(4, 64, 4, true)
        + conv_count(64, 128, 4, true)
        + conv_count(128, 256, 4, true)
        + conv_count(256, 512, 4, true)
        + conv_count(512, 1, 3, false);
    assert_eq!(param_count(&d), expected);
}

#[test]
fn drib_generator_is_about_half_the_unet() {
    for in_channels in [1, 6] {
        let drib = build_generator::<f32, _>(&GeneratorSpec::reference(in_channels), &mut rng(16)).unwrap();
        let unet = build_unet_baseline::<f32, _>(in_channels, 256, &mut rng(17)).unwrap();
        let (nd, nu) = (param_count(&drib), param_count(&unet));
        // 256 input: the bottleneck sits at 32x32, five halvings reach 1x1
        assert_eq!(nu, shell_count(in_channels, REFERENCE_WIDTH) + unet_count(512, 5));
        let ratio = nd as f64 / nu as f64;
        assert!(nu > nd);
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn unet_baseline_forward() {
    let mut g = build_generator::<f32, _>(&GeneratorSpec::unet_baseline(1, 8, 0.2, 64), &mut rng(18)).unwrap();
    let y = g.forward(&random([1, 1, 64, 64], 19).cast(), &mut Ctx::eval()).unwrap();
    assert_eq!(y.shape(), [1, 3, 64, 64]);
}

fn adjoint_gap(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> (f64, f64) {
    let y = conv2d(x, w, None, g).unwrap();
    let r = random(y.shape(), 21);
    let back = conv2d_transpose_to(&r, w, None, g, (x.height(), x.width())).unwrap();
    (y.dot(&r), x.dot(&back))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_size_law(n in 1usize..40, k in 1usize..6, s in 1usize..4, d in 1usize..4, p in 0usize..4) {
        let g = ConvGeometry::new(k, s, d, p);
        let span = d * (k - 1) + 1;
        match g.output_len(n) {
            Some(o) => prop_assert_eq!(o, (n + 2 * p - span) / s + 1),
            None => prop_assert!(n + 2 * p < span),
        }
    }

    #[test]
    fn same_and_resample_sizes(n in 1usize..40, k in 1usize..6, d in 1usize..4) {
        prop_assert_eq!(ConvGeometry::same(k, d).output_len(n), Some(n));
        let r = ConvGeometry::resample(4);
        prop_assert_eq!(r.output_len(2 * n), Some(n));
        prop_assert_eq!(r.transposed_output_len(n), Some(2 * n));
    }

    #[test]
    fn transposed_conv_is_adjoint(
        seed in 0u64..1000,
        cin in 1usize..4,
        cout in 1usize..4,
        size in 5usize..11,
        k in 1usize..5,
        s in 1usize..3,
        d in 1usize..3,
        p in 0usize..3,
    ) {
        let g = ConvGeometry::new(k, s, d, p);
        if g.output_len(size).is_some() {
            let x = random([2, cin, size, size], seed);
            let w = random([cout, cin, k, k], seed + 1);
            let (a, b) = adjoint_gap(&x, &w, &g);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn generator_is_shape_preserving(k in 2usize..5, in_channels in 1usize..7) {
        let size = 8 << k;
        let mut g = build_generator::<f32, _>(&GeneratorSpec::with_width(in_channels, 2, 0.2), &mut rng(20)).unwrap();
        let y = g.forward(&Tensor::zeros([1, in_channels, size, size]), &mut Ctx::eval()).unwrap();
        prop_assert_eq!(y.shape(), [1, 3, size, size]);
    }
}

#[test]
fn adjoint_identity_f32() {
    let g = ConvGeometry::resample(4);
    let x = random([1, 2, 8, 8], 22);
    let w = random([3, 2, 4, 4], 23);
    let y = conv2d(&x.cast::<f32>(), &w.cast(), None, &g).unwrap();
    let r = random(y.shape(), 24);
    let back = conv2d_transpose_to(&r.cast::<f32>(), &w.cast(), None, &g, (8, 8)).unwrap();
    let (a, b) = (y.dot(&r.cast()), x.cast::<f32>().dot(&back));
    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
}
