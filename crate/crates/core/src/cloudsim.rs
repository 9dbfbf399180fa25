//! Procedural thick-cloud masks and alpha compositing.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{quantize, quantize_mask, read_png, SamplePair};
use crate::error::{Error, Result};
use crate::exec;
use crate::nncore::{Scalar, Tensor};

/// Default alpha threshold separating cloudy from clear pixels.
pub const DEFAULT_TAU: f64 = 0.1;

/// Per-pixel cloud opacity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudMask {
    alpha: Vec<f64>,
    height: usize,
    width: usize,
    seed: u64,
}

impl CloudMask {
    pub fn from_alpha(height: usize, width: usize, alpha: Vec<f64>, seed: u64) -> Result<Self> {
        if height == 0 || width == 0 || alpha.len() != height * width {
            return Err(Error::shape("cloud mask", &[height, width], &[alpha.len()]));
        }
        if let Some(v) = alpha.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("alpha value {v} outside [0, 1]")));
        }
        Ok(CloudMask {
            alpha,
            height,
            width,
            seed,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_alpha(height, width, vec![value; height * width], 0)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fraction of pixels with `alpha >= tau`.
    pub fn coverage(&self, tau: f64) -> f64 {
        self.alpha.iter().filter(|&&a| a >= tau).count() as f64 / self.alpha.len() as f64
    }

    /// The mask as a `1 x 1 x H x W` tensor in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec([1, 1, self.height, self.width], self.alpha.iter().map(|&a| T::of(a)).collect())
            .expect("mask dimensions are consistent")
    }

    /// Inverse of [`CloudMask::to_tensor`], clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, seed: u64) -> Result<Self> {
        if t.batch() != 1 || t.channels() != 1 {
            return Err(Error::shape("cloud mask", &t.shape(), &[1, 1, t.height(), t.width()]));
        }
        let alpha = t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
        Self::from_alpha(t.height(), t.width(), alpha, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    pub octaves: usize,
    pub persistence: f64,
    /// Lattice spacing of the coarsest octave, as a fraction of the patch size.
    pub base_scale: f64,
    /// Width of the smoothstep edge in normalized noise units.
    pub edge: f64,
    pub tau: f64,
    pub tolerance: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            octaves: 4,
            persistence: 0.5,
            base_scale: 0.5,
            edge: 0.1,
            tau: DEFAULT_TAU,
            tolerance: 0.05,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.octaves >= 1
            && self.persistence > 0.0
            && self.base_scale > 0.0
            && self.edge > 0.0
            && self.tau > 0.0
            && self.tau < 1.0
            && self.tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureParams {
    pub level: f64,
    pub amplitude: f64,
    pub octaves: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            level: 0.7,
            amplitude: 0.1,
            octaves: 4,
        }
    }
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn smoothstep(lo: f64, hi: f64, v: f64) -> f64 {
    fade(((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Inverse of `fade` on `[0, 1]`.
fn inverse_fade(y: f64) -> f64 {
    0.5 - ((1.0 - 2.0 * y).asin() / 3.0).sin()
}

/// Multi-octave value noise, min-max normalized to `[0, 1]`.
pub fn value_noise(seed: u64, height: usize, width: usize, octaves: usize, persistence: f64, base_scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0; height * width];
    let mut period = (base_scale * height.max(width) as f64).max(2.0);
    let mut amplitude = 1.0;
    for _ in 0..octaves {
        let gw = (width as f64 / period).ceil() as usize + 2;
        let gh = (height as f64 / period).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / period;
            let (iy, ty) = (fy.floor() as usize, fade(fy.fract()));
            for x in 0..width {
                let fx = x as f64 / period;
                let (ix, tx) = (fx.floor() as usize, fade(fx.fract()));
                let at = |i: usize, j: usize| lattice[j * gw + i];
                let top = at(ix, iy) + tx * (at(ix + 1, iy) - at(ix, iy));
                let bottom = at(ix, iy + 1) + tx * (at(ix + 1, iy + 1) - at(ix, iy + 1));
                field[y * width + x] += amplitude * (top + ty * (bottom - top));
            }
        }
        period = (period / 2.0).max(1.0);
        amplitude *= persistence;
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        field.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        field.iter_mut().for_each(|v| *v = 0.0);
    }
    field
}

/// Alpha from a noise field and threshold: smoothstep over `[t, t + edge]`,
/// saturating to 1 in cloud cores.
pub fn alpha_from_field(field: &[f64], threshold: f64, edge: f64) -> Vec<f64> {
    field.iter().map(|&v| smoothstep(threshold, threshold + edge, v)).collect()
}

/// Generates a square thick-cloud mask whose coverage at `params.tau` lies
/// within `params.tolerance` of `target`.
pub fn generate_mask(seed: u64, size: usize, target: f64, params: &MaskParams) -> Result<CloudMask> {
    params.validate()?;
    if !(0.0..=0.95).contains(&target) {
        return Err(Error::Config(format!("cloud coverage {target} outside [0, 0.95]")));
    }
    if size == 0 {
        return Err(Error::Config("mask size must be positive".into()));
    }
    if target == 0.0 {
        return CloudMask::from_alpha(size, size, vec![0.0; size * size], seed);
    }
    let field = value_noise(seed, size, size, params.octaves, params.persistence, params.base_scale);
    // alpha >= tau  <=>  field >= threshold + edge * inverse_fade(tau)
    let offset = params.edge * inverse_fade(params.tau);
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let keep = ((target * n as f64).round() as usize).clamp(1, n);
    let cut = sorted[n - keep];
    // bisect the threshold so that the cut value lands just inside the cloud
    let (mut lo, mut hi) = (cut - offset - params.edge, cut - offset);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if smoothstep(mid, mid + params.edge, cut) >= params.tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mask = CloudMask::from_alpha(size, size, alpha_from_field(&field, lo, params.edge), seed)?;
    let achieved = mask.coverage(params.tau);
    if (achieved - target).abs() > params.tolerance {
        return Err(Error::Coverage { target, achieved });
    }
    Ok(mask)
}

/// Near-white cloud texture `1 x 3 x H x W` in `[-1, 1]`, identical across channels.
pub fn cloud_texture<T: Scalar>(seed: u64, height: usize, width: usize, params: &TextureParams) -> Tensor<T> {
    let noise = value_noise(seed ^ 0x9e37_79b9_7f4a_7c15, height, width, params.octaves.max(1), 0.5, 0.25);
    let plane: Vec<T> = noise
        .iter()
        .map(|&n| T::of((params.level + params.amplitude * (2.0 * n - 1.0)).clamp(-1.0, 1.0)))
        .collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec([1, 3, height, width], data).expect("texture dimensions are consistent")
}

fn check_blend_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &CloudMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("alpha_blend", &a.shape(), &b.shape()));
    }
    if a.height() != mask.height || a.width() != mask.width {
        return Err(Error::shape("alpha_blend", &a.shape(), &[mask.height, mask.width]));
    }
    Ok(())
}

/// `alpha * texture + (1 - alpha) * clean`, with the mask broadcast over
/// batch and channels.
pub fn alpha_blend<T: Scalar>(clean: &Tensor<T>, texture: &Tensor<T>, mask: &CloudMask) -> Result<Tensor<T>> {
    check_blend_shapes(clean, texture, mask)?;
    let plane = clean.plane_len();
    let mut out = clean.clone();
    for (i, (o, t)) in out.data_mut().iter_mut().zip(texture.data()).enumerate() {
        let a = mask.alpha[i % plane];
        *o = if a >= 1.0 {
            *t
        } else {
            T::of(a * t.as_f64() + (1.0 - a) * o.as_f64())
        };
    }
    Ok(out)
}

/// Recovers the clean image where `alpha < 1`; fully opaque pixels keep the
/// cloudy value.
pub fn unblend<T: Scalar>(cloudy: &Tensor<T>, texture: &Tensor<T>, mask: &CloudMask) -> Result<Tensor<T>> {
    check_blend_shapes(cloudy, texture, mask)?;
    let plane = cloudy.plane_len();
    let mut out = cloudy.clone();
    for (i, (o, t)) in out.data_mut().iter_mut().zip(texture.data()).enumerate() {
        let a = mask.alpha[i % plane];
        if a < 1.0 {
            *o = T::of((o.as_f64() - a * t.as_f64()) / (1.0 - a));
        }
    }
    Ok(out)
}

/// A clean patch, its mask and texture, and the blended result.
#[derive(Debug, Clone)]
pub struct CloudComposite<T: Scalar = f32> {
    pub clean: Tensor<T>,
    pub mask: CloudMask,
    pub texture: Tensor<T>,
    pub cloudy: Tensor<T>,
}

impl<T: Scalar> CloudComposite<T> {
    pub fn new(clean: Tensor<T>, mask: CloudMask, texture_seed: u64, params: &TextureParams) -> Result<Self> {
        let texture = cloud_texture::<T>(texture_seed, clean.height(), clean.width(), params);
        let cloudy = alpha_blend(&clean, &texture, &mask)?;
        Ok(CloudComposite {
            clean,
            mask,
            texture,
            cloudy,
        })
    }
}

/// Partition of pixel positions into cloudy and clear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    cloudy: Vec<bool>,
    height: usize,
    width: usize,
}

impl RegionMap {
    pub fn new(height: usize, width: usize, cloudy: Vec<bool>) -> Result<Self> {
        if cloudy.len() != height * width {
            return Err(Error::shape("region map", &[height, width], &[cloudy.len()]));
        }
        Ok(RegionMap { cloudy, height, width })
    }

    pub fn cloudy(&self) -> &[bool] {
        &self.cloudy
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count_cloudy(&self) -> usize {
        self.cloudy.iter().filter(|&&c| c).count()
    }

    pub fn count_clear(&self) -> usize {
        self.cloudy.len() - self.count_cloudy()
    }

    pub fn coverage(&self) -> f64 {
        self.count_cloudy() as f64 / self.cloudy.len() as f64
    }

    pub fn complement(&self) -> RegionMap {
        RegionMap {
            cloudy: self.cloudy.iter().map(|c| !c).collect(),
            height: self.height,
            width: self.width,
        }
    }
}

/// Cloudy region `{alpha >= tau}`.
pub fn binarize(mask: &CloudMask, tau: f64) -> Result<RegionMap> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("region threshold {tau} outside (0, 1)")));
    }
    RegionMap::new(mask.height, mask.width, mask.alpha.iter().map(|&a| a >= tau).collect())
}

/// Loads a single-channel 8- or 16-bit PNG mask, rescales it to `[0, 1]`
/// and takes a seeded random crop of `size x size` with random flips.
pub fn load_mask_asset(path: &Path, size: usize, seed: u64) -> Result<CloudMask> {
    let img = read_png(path)?;
    if img.channels != 1 {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("mask assets must have one channel, found {}", img.channels),
        });
    }
    if img.width < size || img.height < size {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("asset {}x{} is smaller than the {size}x{size} patch", img.width, img.height),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=img.height - size);
    let ox = rng.random_range(0..=img.width - size);
    let (flip_x, flip_y) = (rng.random::<bool>(), rng.random::<bool>());
    let max = img.max_value();
    let mut alpha = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = oy + if flip_y { size - 1 - y } else { y };
        for x in 0..size {
            let sx = ox + if flip_x { size - 1 - x } else { x };
            alpha.push(img.samples[sy * img.width + sx] as f64 / max);
        }
    }
    CloudMask::from_alpha(size, size, alpha, seed)
}


/// Settings for turning clean pairs into cloudy quadruples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Target coverages, assigned to samples round-robin.
    pub coverages: Vec<f64>,
    pub seed: u64,
    pub mask: MaskParams,
    pub texture: TextureParams,
    /// Directory of grayscale PNG masks used instead of procedural noise.
    pub asset_dir: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            coverages: vec![0.1, 0.3, 0.5, 0.7],
            seed: 0,
            mask: MaskParams::default(),
            texture: TextureParams::default(),
            asset_dir: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coverages.is_empty() {
            return Err(Error::Config("synth.coverages must not be empty".into()));
        }
        if let Some(c) = self.coverages.iter().find(|c| !(0.0..=0.95).contains(*c)) {
            return Err(Error::Config(format!("synth.coverages: {c} outside [0, 0.95]")));
        }
        self.mask.validate()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn asset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG mask assets in {}", dir.display())));
    }
    Ok(files)
}

/// Adds a mask and cloudy patch to every sample, quantized to 8 bits.
/// Returns the achieved coverage per sample at `cfg.mask.tau`.
pub fn synthesize_clouds(samples: &mut [SamplePair], cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let assets = cfg.asset_dir.as_deref().map(asset_files).transpose()?;
    let made = exec::map(samples.len(), |i| -> Result<(CloudMask, Tensor)> {
        let s = &samples[i];
        if s.height() != s.width() {
            return Err(Error::Data(format!("sample {}: cloud synthesis needs square patches", s.id)));
        }
        let mask_seed = splitmix(cfg.seed ^ splitmix(i as u64));
        let mask = match &assets {
            Some(files) => load_mask_asset(&files[i % files.len()], s.height(), mask_seed)?,
            None => generate_mask(mask_seed, s.height(), cfg.coverages[i % cfg.coverages.len()], &cfg.mask)?,
        };
        let mask = quantize_mask(&mask);
        let texture = cloud_texture(splitmix(mask_seed), s.height(), s.width(), &cfg.texture);
        let cloudy = quantize(&alpha_blend(&s.optical, &texture, &mask)?);
        Ok((mask, cloudy))
    });
    let mut coverage = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter_mut().zip(made) {
        let (mask, cloudy) = r?;
        coverage.push(mask.coverage(cfg.mask.tau));
        s.mask = Some(mask);
        s.cloudy = Some(cloudy);
    }
    Ok(coverage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    #[test]
    fn zero_target_is_clear() {
        let m = generate_mask(3, 32, 0.0, &MaskParams::default()).unwrap();
        assert!(m.alpha().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn coverage_targets() {
        let p = MaskParams::default();
        for (i, &target) in [0.1, 0.3, 0.5, 0.7].iter().enumerate() {
            for size in [64, 256] {
                let m = generate_mask(7 + i as u64, size, target, &p).unwrap();
                assert!((m.coverage(p.tau) - target).abs() <= 0.05, "{target} {size}");
                assert!(m.alpha().contains(&1.0), "thick core at {target}");
            }
        }
    }

    #[test]
    fn seed_determinism() {
        let p = MaskParams::default();
        let a = generate_mask(11, 64, 0.4, &p).unwrap();
        let b = generate_mask(11, 64, 0.4, &p).unwrap();
        assert!(a.alpha().iter().zip(b.alpha()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_mask(12, 64, 0.4, &p).unwrap();
        assert_ne!(a.alpha(), c.alpha());
    }

    #[test]
    fn rejects_excess_coverage() {
        assert!(matches!(generate_mask(1, 32, 1.2, &MaskParams::default()), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_fade_roundtrip() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert!((inverse_fade(fade(t)) - t).abs() < 1e-9);
        }
    }

    #[test]
    fn blend_endpoints() {
        let clean = Tensor::<f64>::from_fn([1, 3, 4, 4], |[_, c, y, x]| (c + y + x) as f64 / 10.0 - 0.5);
        let tex = Tensor::<f64>::full([1, 3, 4, 4], 1.0);
        let zero = CloudMask::constant(4, 4, 0.0).unwrap();
        assert_eq!(alpha_blend(&clean, &tex, &zero).unwrap(), clean);
        let one = CloudMask::constant(4, 4, 1.0).unwrap();
        assert_eq!(alpha_blend(&clean, &tex, &one).unwrap(), tex);
        let half = CloudMask::constant(4, 4, 0.5).unwrap();
        let out = alpha_blend(&Tensor::full([1, 3, 4, 4], -1.0), &tex, &half).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(alpha_blend(&clean, &Tensor::zeros([1, 3, 4, 5]), &zero).is_err());
    }

    #[test]
    fn texture_range() {
        let t = cloud_texture::<f64>(5, 32, 32, &TextureParams::default());
        assert!(t.data().iter().all(|&v| (0.6 - 1e-12..=0.8 + 1e-12).contains(&v)));
        assert_eq!(t.item(0)[..1024], t.item(0)[1024..2048]);
    }

    #[test]
    fn binarize_cases() {
        let zero = CloudMask::constant(4, 4, 0.0).unwrap();
        assert_eq!(binarize(&zero, 0.3).unwrap().count_cloudy(), 0);
        let one = CloudMask::constant(4, 4, 1.0).unwrap();
        assert_eq!(binarize(&one, 0.3).unwrap().count_clear(), 0);
        let checker = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let m = CloudMask::from_alpha(4, 4, checker, 0).unwrap();
        let r = binarize(&m, 0.5).unwrap();
        assert_eq!(r.coverage(), 0.5);
        assert_eq!(r.count_cloudy() + r.count_clear(), 16);
        assert!(binarize(&m, 1.0).is_err());
    }


    #[test]
    fn synthesis_is_deterministic_and_on_target() {
        let cfg = SynthConfig::default();
        let mut a = crate::dataio::synthetic_pairs(4, 64, 1);
        let mut b = a.clone();
        let cov = synthesize_clouds(&mut a, &cfg).unwrap();
        synthesize_clouds(&mut b, &cfg).unwrap();
        for (i, c) in cov.iter().enumerate() {
            assert!((c - cfg.coverages[i]).abs() <= 0.05, "{i}: {c}");
            assert_eq!(a[i].cloudy, b[i].cloudy);
            assert_eq!(a[i].mask, b[i].mask);
        }
        let bad = SynthConfig { coverages: vec![1.2], ..SynthConfig::default() };
        assert!(synthesize_clouds(&mut a, &bad).is_err());
    }

    #[test]
    fn mask_assets() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        crate::dataio::write_png(&white, 40, 36, 1, &[255; 40 * 36], &[]).unwrap();
        let m = load_mask_asset(&white, 32, 3).unwrap();
        assert!(m.alpha().iter().all(|&a| a == 1.0));
        let black = dir.path().join("black.png");
        crate::dataio::write_png(&black, 32, 32, 1, &[0; 32 * 32], &[]).unwrap();
        assert!(load_mask_asset(&black, 32, 3).unwrap().alpha().iter().all(|&a| a == 0.0));
        assert!(load_mask_asset(&black, 33, 3).is_err());
        let rgb = dir.path().join("rgb.png");
        crate::dataio::write_png(&rgb, 32, 32, 3, &[0; 32 * 32 * 3], &[]).unwrap();
        assert!(load_mask_asset(&rgb, 16, 3).is_err());
        let ramp = dir.path().join("ramp.png");
        let data: Vec<u8> = (0..64 * 64).map(|i| (i % 64 * 4) as u8).collect();
        crate::dataio::write_png(&ramp, 64, 64, 1, &data, &[]).unwrap();
        assert_eq!(load_mask_asset(&ramp, 16, 9).unwrap(), load_mask_asset(&ramp, 16, 9).unwrap());
    }

    proptest! {
        #[test]
        fn blend_is_convex(seed in 0u64..1000, a in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = Tensor::<f64>::from_fn([1, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
            let tex = Tensor::<f64>::from_fn([1, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
            let mask = CloudMask::constant(5, 5, a).unwrap();
            let out = alpha_blend(&clean, &tex, &mask).unwrap();
            for ((o, c), t) in out.data().iter().zip(clean.data()).zip(tex.data()) {
                prop_assert!(*o >= c.min(*t) - 1e-12 && *o <= c.max(*t) + 1e-12);
            }
            if a < 1.0 {
                let back = unblend(&out, &tex, &mask).unwrap();
                let tol = 1e-9 / (1.0 - a);
                for (b, c) in back.data().iter().zip(clean.data()) {
                    prop_assert!((b - c).abs() <= tol.max(1e-9));
                }
            }
        }

        #[test]
        fn coverage_monotone_in_threshold(seed in 0u64..200, t1 in -0.2f64..1.0, dt in 0.0f64..0.5) {
            let field = value_noise(seed, 24, 24, 4, 0.5, 0.5);
            let hi = CloudMask::from_alpha(24, 24, alpha_from_field(&field, t1, 0.1), 0).unwrap();
            let lo = CloudMask::from_alpha(24, 24, alpha_from_field(&field, t1 + dt, 0.1), 0).unwrap();
            prop_assert!(hi.coverage(DEFAULT_TAU) >= lo.coverage(DEFAULT_TAU));
        }
    }
}
