//! Dataset layout, normalization, PNG I/O, checkpoints and comparison grids.
//!
//! A dataset root holds `sar/`, `opt/` and optionally `cloudy/` and `mask/`,
//! each containing `<id>.png`. SAR and mask files are single-channel, optical
//! and cloudy files are RGB.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloudsim::{value_noise, CloudMask};
use crate::error::{Error, Result};
use crate::exec;
use crate::nncore::{Layer, Tensor};

pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decoded PNG samples, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub sixteen_bit: bool,
    pub samples: Vec<u16>,
}

impl RawImage {
    pub fn max_value(&self) -> f64 {
        if self.sixteen_bit {
            65535.0
        } else {
            255.0
        }
    }
}

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.into(),
        msg: msg.to_string(),
    }
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let channels = info.color_type.samples();
    let sixteen_bit = info.bit_depth == png::BitDepth::Sixteen;
    let (width, height) = (info.width as usize, info.height as usize);
    let mut samples = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(info.line_size).take(height) {
        if sixteen_bit {
            samples.extend(row[..2 * width * channels].chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])));
        } else {
            samples.extend(row[..width * channels].iter().map(|&b| b as u16));
        }
    }
    Ok(RawImage {
        width,
        height,
        channels,
        sixteen_bit,
        samples,
    })
}

/// Writes an 8-bit grayscale or RGB PNG with optional text chunks.
pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, data: &[u8], text: &[(String, String)]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(image_err(path, format!("cannot write {c}-channel PNG"))),
    };
    if data.len() != width * height * channels {
        return Err(image_err(path, "pixel buffer does not match dimensions"));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.clone(), v.clone()).map_err(|e| image_err(path, e))?;
    }
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

/// Text chunks of a PNG file.
pub fn read_png_text(path: &Path) -> Result<Vec<(String, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| image_err(path, e))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect())
}

/// Loads an 8-bit PNG as a normalized `1 x C x H x W` tensor.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = read_png(path)?;
    if img.sixteen_bit {
        return Err(image_err(path, "expected 8-bit samples"));
    }
    if img.channels != channels {
        return Err(image_err(path, format!("expected {channels} channel(s), found {}", img.channels)));
    }
    let (h, w) = (img.height, img.width);
    Ok(Tensor::from_fn([1, channels, h, w], |[_, c, y, x]| {
        normalize(img.samples[(y * w + x) * channels + c] as u8)
    }))
}

fn interleave(t: &Tensor, n: usize) -> Vec<u8> {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let item = t.item(n);
    let mut out = vec![0; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[i * c + ch] = denormalize(item[ch * h * w + i]);
        }
    }
    out
}

/// Writes the first item of a 1- or 3-channel tensor as an 8-bit PNG.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    write_png(path, t.width(), t.height(), t.channels(), &interleave(t, 0), &[])
}

fn save_mask(path: &Path, mask: &CloudMask) -> Result<()> {
    let data: Vec<u8> = mask.alpha().iter().map(|a| (a * 255.0).round() as u8).collect();
    write_png(path, mask.width(), mask.height(), 1, &data, &[])
}

fn load_mask(path: &Path) -> Result<CloudMask> {
    let img = read_png(path)?;
    if img.channels != 1 {
        return Err(image_err(path, "mask must have one channel"));
    }
    let max = img.max_value();
    CloudMask::from_alpha(img.height, img.width, img.samples.iter().map(|&v| v as f64 / max).collect(), 0)
}

/// Rounds an alpha mask onto the 8-bit grid used on disk.
pub fn quantize_mask(mask: &CloudMask) -> CloudMask {
    let alpha = mask.alpha().iter().map(|a| (a * 255.0).round() / 255.0).collect();
    CloudMask::from_alpha(mask.height(), mask.width(), alpha, mask.seed()).expect("same dimensions")
}

/// Rounds a normalized tensor onto the 8-bit grid used on disk.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| normalize(denormalize(v)))
}

/// A co-registered sample: SAR, clean optical and, once synthesized, the
/// cloudy optical patch and its cloud mask.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub sar: Tensor,
    pub optical: Tensor,
    pub cloudy: Option<Tensor>,
    pub mask: Option<CloudMask>,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.optical.height()
    }

    pub fn width(&self) -> usize {
        self.optical.width()
    }

    fn check(&self) -> Result<()> {
        let hw = (self.height(), self.width());
        let mismatch = |what: &str, h: usize, w: usize| {
            Error::Data(format!(
                "sample {}: {what} is {h}x{w} but optical is {}x{}",
                self.id, hw.1, hw.0
            ))
        };
        if (self.sar.height(), self.sar.width()) != hw {
            return Err(mismatch("sar", self.sar.height(), self.sar.width()));
        }
        if let Some(c) = &self.cloudy {
            if (c.height(), c.width()) != hw {
                return Err(mismatch("cloudy", c.height(), c.width()));
            }
        }
        if let Some(m) = &self.mask {
            if (m.height(), m.width()) != hw {
                return Err(mismatch("mask", m.height(), m.width()));
            }
        }
        if self.sar.channels() != 1 || self.optical.channels() != 3 {
            return Err(Error::Data(format!("sample {}: expected 1-channel sar and 3-channel optical", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

const DIRS: [&str; 4] = ["sar", "opt", "cloudy", "mask"];

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.exists() {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

/// Sample ids of a dataset root after orphan checking, sorted.
pub fn dataset_ids(root: &Path) -> Result<Vec<String>> {
    let sets: Vec<BTreeSet<String>> = DIRS.iter().map(|d| stems(&root.join(d))).collect::<Result<_>>()?;
    let (sar, opt, cloudy, mask) = (&sets[0], &sets[1], &sets[2], &sets[3]);
    let mut orphans = Vec::new();
    for id in sar.symmetric_difference(opt) {
        let have = if sar.contains(id) { "sar" } else { "opt" };
        orphans.push(format!("{id} ({have} only)"));
    }
    let paired: BTreeSet<String> = sar.intersection(opt).cloned().collect();
    let synthesized = !cloudy.is_empty() || !mask.is_empty();
    if synthesized {
        for id in &paired {
            for (name, set) in [("cloudy", cloudy), ("mask", mask)] {
                if !set.contains(id) {
                    orphans.push(format!("{id} (missing {name})"));
                }
            }
        }
        for (name, set) in [("cloudy", cloudy), ("mask", mask)] {
            for id in set.difference(&paired) {
                orphans.push(format!("{id} ({name} without sar/opt pair)"));
            }
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unpaired files in {}: {}", root.display(), orphans.join(", "))));
    }
    Ok(paired.into_iter().collect())
}

fn load_sample(root: &Path, id: &str) -> Result<SamplePair> {
    let file = |d: &str| root.join(d).join(format!("{id}.png"));
    let cloudy_path = file("cloudy");
    let (cloudy, mask) = if cloudy_path.exists() {
        (Some(load_image(&cloudy_path, 3)?), Some(load_mask(&file("mask"))?))
    } else {
        (None, None)
    };
    let s = SamplePair {
        id: id.to_string(),
        sar: load_image(&file("sar"), 1)?,
        optical: load_image(&file("opt"), 3)?,
        cloudy,
        mask,
    };
    s.check()?;
    Ok(s)
}

/// Ids assigned to a split: a seeded shuffle of the sorted ids, the first
/// `round(0.8 n)` for training, each split re-sorted by id.
pub fn split_ids(ids: &[String], seed: u64, split: Split) -> Vec<String> {
    let mut ids = ids.to_vec();
    ids.sort();
    if split == Split::All {
        return ids;
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ids.len() as f64 * 0.8).round() as usize;
    let mut chosen = match split {
        Split::Train => ids[..n_train].to_vec(),
        _ => ids[n_train..].to_vec(),
    };
    chosen.sort();
    chosen
}

/// Loads one split of a dataset root. Images are read in parallel; the
/// returned order depends only on the directory contents and `seed`.
pub fn load_dataset(root: &Path, seed: u64, split: Split) -> Result<Vec<SamplePair>> {
    let ids = split_ids(&dataset_ids(root)?, seed, split);
    exec::map(ids.len(), |i| load_sample(root, &ids[i])).into_iter().collect()
}

/// Writes samples in the dataset layout, creating directories as needed.
pub fn write_dataset(root: &Path, samples: &[SamplePair]) -> Result<()> {
    for d in DIRS {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let results = exec::map(samples.len(), |i| {
        let s = &samples[i];
        let file = |d: &str| root.join(d).join(format!("{}.png", s.id));
        save_image(&file("sar"), &s.sar)?;
        save_image(&file("opt"), &s.optical)?;
        if let (Some(c), Some(m)) = (&s.cloudy, &s.mask) {
            save_image(&file("cloudy"), c)?;
            save_mask(&file("mask"), m)?;
        }
        Ok(())
    });
    results.into_iter().collect()
}

/// Smooth synthetic optical scenes with SAR derived from their structure.
///
/// Two noise fields stand in for brightness and vegetation; the optical RGB
/// is a fixed linear palette over both, the SAR channel a mix of both with
/// multiplicative speckle. Values are quantized to 8 bits so in-memory and
/// on-disk fixtures agree.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(i as u64);
            let bright = value_noise(s, size, size, 4, 0.5, 0.5);
            let veg = value_noise(s ^ 0x5555, size, size, 3, 0.5, 0.35);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xaaaa);
            let speckle = Normal::new(1.0, 0.08).expect("valid normal");
            let palette = [[0.15, 0.65, -0.25], [0.2, 0.45, 0.25], [0.15, 0.55, -0.1]];
            let optical = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let (b, v) = (bright[y * size + x], veg[y * size + x]);
                let p = palette[c];
                (2.0 * (p[0] + p[1] * b + p[2] * v) - 1.0) as f32
            });
            let sar = Tensor::from_fn([1, 1, size, size], |[_, _, y, x]| {
                let (b, v) = (bright[y * size + x], veg[y * size + x]);
                let k: f64 = speckle.sample(&mut rng);
                (2.0 * ((0.7 * b + 0.3 * v) * k).clamp(0.0, 1.0) - 1.0) as f32
            });
            SamplePair {
                id: format!("s{i:04}"),
                sar: quantize(&sar),
                optical: quantize(&optical),
                cloudy: None,
                mask: None,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    /// Free-form metadata: architecture specs, loss weights, config echo.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Tensors queued for a checkpoint, in insertion order.
#[derive(Debug, Default, Clone)]
pub struct TensorSet {
    entries: Vec<(TensorRecord, Vec<f32>)>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((TensorRecord { name: name.into(), shape }, data));
    }

    /// Adds every parameter and buffer of `net` under `prefix`.
    pub fn push_layer(&mut self, prefix: &str, net: &dyn Layer<f32>) {
        net.visit(&mut |p| {
            self.push(format!("{prefix}{}", p.name), p.value.shape().to_vec(), p.value.data().to_vec());
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn checkpoint_dir(parent: &Path, step: u64) -> PathBuf {
    parent.join(format!("ckpt-{step}"))
}

fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("tensors").join(format!("{name}.f32"))
}

/// Writes `ckpt-<step>/` under `parent` atomically: everything goes to a
/// temporary sibling directory that is renamed into place at the end.
pub fn save_checkpoint(parent: &Path, kind: &str, step: u64, seed: u64, meta: serde_json::Value, tensors: &TensorSet) -> Result<PathBuf> {
    let target = checkpoint_dir(parent, step);
    let tmp = parent.join(format!(".ckpt-{step}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let blobs = tmp.join("tensors");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let mut seen = BTreeSet::new();
    for (rec, data) in &tensors.entries {
        if !seen.insert(rec.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {}", rec.name)));
        }
        let path = blob_path(&tmp, &rec.name);
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        step,
        seed,
        meta,
        tensors: tensors.entries.iter().map(|(r, _)| r.clone()).collect(),
    };
    let path = tmp.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(json.as_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&path, e))?;
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(target)
}

/// A checkpoint directory with its validated manifest. Blobs are read on
/// demand, so shape checks can run before any tensor data is touched.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                manifest.version
            )));
        }
        let index = manifest.tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            manifest,
            index,
        })
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.index.get(name).map(|&i| self.manifest.tensors[i].shape.as_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn read(&self, name: &str) -> Result<Vec<f32>> {
        let shape = self
            .shape(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} not in manifest")))?;
        let expected = shape.iter().product::<usize>() * 4;
        let path = blob_path(&self.dir, name);
        let mut bytes = Vec::with_capacity(expected);
        fs::File::open(&path)
            .and_then(|f| f.take(expected as u64 + 1).read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: blob holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    /// Checks that every tensor of `net` exists under `prefix` with the same
    /// shape, without reading blobs.
    pub fn check_layer(&self, prefix: &str, net: &dyn Layer<f32>) -> Result<()> {
        let mut problems = Vec::new();
        net.visit(&mut |p| {
            let name = format!("{prefix}{}", p.name);
            match self.shape(&name) {
                None => problems.push(format!("{name} missing")),
                Some(s) if s != p.value.shape() => {
                    problems.push(format!("{name} has shape {s:?}, network expects {:?}", p.value.shape()))
                }
                _ => {}
            }
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{} incompatible: {}", self.dir.display(), problems.join("; "))))
        }
    }

    /// Loads every tensor of `net` from `prefix` after [`Checkpoint::check_layer`].
    pub fn restore_layer(&self, prefix: &str, net: &mut dyn Layer<f32>) -> Result<()> {
        self.check_layer(prefix, net)?;
        let mut failure = None;
        net.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match self.read(&format!("{prefix}{}", p.name)) {
                Ok(v) => p.value.data_mut().copy_from_slice(&v),
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Latest `ckpt-<step>` directory under `parent`, if any.
pub fn latest_checkpoint(parent: &Path) -> Result<Option<PathBuf>> {
    if !parent.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(parent).map_err(|e| Error::io(parent, e))? {
        let path = entry.map_err(|e| Error::io(parent, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if path.join("manifest.json").exists() && best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

// ---------------------------------------------------------------------------
// grids

pub const GRID_SEPARATOR: usize = 2;

/// Tiles rows of `1 x C x H x W` tensors (C = 1 or 3) into one RGB PNG with
/// white 2-px separators between tiles and no outer border. Row labels are
/// stored as `row<i>` text chunks.
pub fn export_grid(rows: &[Vec<Tensor>], labels: &[String], path: &Path) -> Result<(usize, usize)> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Data("export_grid needs at least one tile".into()))?;
    let (h, w) = (first.height(), first.width());
    let cols = rows[0].len();
    for (r, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Data(format!("grid row {r} has {} tiles, expected {cols}", row.len())));
        }
        for t in row {
            if t.height() != h || t.width() != w || !matches!(t.channels(), 1 | 3) {
                return Err(Error::shape("export_grid", &first.shape(), &t.shape()));
            }
        }
    }
    let gw = cols * w + (cols - 1) * GRID_SEPARATOR;
    let gh = rows.len() * h + (rows.len() - 1) * GRID_SEPARATOR;
    let mut img = vec![255u8; gw * gh * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let (oy, ox) = (r * (h + GRID_SEPARATOR), c * (w + GRID_SEPARATOR));
            let item = t.item(0);
            let ch = t.channels();
            for y in 0..h {
                for x in 0..w {
                    for k in 0..3 {
                        let v = item[(k % ch) * h * w + y * w + x];
                        img[((oy + y) * gw + ox + x) * 3 + k] = denormalize(v);
                    }
                }
            }
        }
    }
    let text: Vec<(String, String)> = labels.iter().enumerate().map(|(i, l)| (format!("row{i}"), l.clone())).collect();
    write_png(path, gw, gh, 3, &img, &text)?;
    Ok((gw, gh))
}
