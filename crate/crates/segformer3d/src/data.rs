//! Synthetic volumetric dataset: chained-ellipsoid label fields (each
//! foreground class attached to the previous one) rendered into
//! multi-modality images, deterministic augmentation, and the VSEG1 volume
//! file format.
//!
//! Every sample is a pure function of `(config.seed, index)`, so datasets
//! never need to exist on disk to be reproducible; the file format is for
//! the CLI workflow and interchange.

use crate::error::{Error, Result};
use crate::model::MIN_DIVISOR;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Settings for the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Cubic volume edge length; must be divisible by 32.
    pub extent: usize,
    /// Label count including background (class 0).
    pub num_classes: usize,
    /// Image channels; each is a distinct affine view of the label field.
    pub modalities: usize,
    /// Inclusive range of ellipsoids per foreground class.
    pub shapes_per_class: (usize, usize),
    /// Standard deviation of the per-voxel Gaussian noise (pre-normalization).
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            extent: 32,
            num_classes: 4,
            modalities: 4,
            shapes_per_class: (1, 1),
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || self.extent % MIN_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "extent {} must be a positive multiple of {MIN_DIVISOR}",
                self.extent
            )));
        }
        if self.num_classes < 2 || self.num_classes > u8::MAX as usize + 1 {
            return Err(Error::Config(format!(
                "num_classes {} must be in [2, 256]",
                self.num_classes
            )));
        }
        if self.modalities == 0 {
            return Err(Error::Config("modalities must be >= 1".into()));
        }
        if self.shapes_per_class.0 > self.shapes_per_class.1 {
            return Err(Error::Config(format!(
                "shapes_per_class range ({}, {}) is empty",
                self.shapes_per_class.0, self.shapes_per_class.1
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    /// Voxel spacing placeholder; the generator is unitless.
    pub spacing: [f32; 3],
}

/// One volume: a multi-modality image with its voxel-label mask.
#[derive(Clone)]
pub struct VolumeSample {
    /// `[modalities, D, H, W]`, z-score normalized per modality.
    pub image: Tensor,
    /// `D·H·W` labels in row-major order, values `< num_classes`.
    pub mask: Vec<u8>,
    pub shape: (usize, usize, usize),
    pub num_classes: usize,
    pub meta: SampleMeta,
}

impl std::fmt::Debug for VolumeSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolumeSample")
            .field("image_shape", &self.image.shape())
            .field("shape", &self.shape)
            .field("num_classes", &self.num_classes)
            .field("meta", &self.meta)
            .finish_non_exhaustive()
    }
}


/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub class: u8,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// splitmix64-style mixing so each (seed, index, stream) gets an independent
/// ChaCha seed.
fn stream_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Arithmetic mean of an ellipsoid's three radii.
fn mean_radius(radii: &[f64; 3]) -> f64 {
    (radii[0] + radii[1] + radii[2]) / 3.0
}

/// The ellipsoids that `generate` paints for sample `index`, in paint order
/// (ascending class). Class 1 shapes sit in the volume interior; each class
/// c > 1 shape attaches to a random class c−1 parent: its radii are the
/// parent's scaled by s ∈ [0.82, 0.94), and its center is the parent's
/// displaced along a random direction by u·(r̄_parent + r̄_child) with
/// u ∈ [0.45, 0.65), then clamped so the shape stays mostly inside the
/// volume. Consecutive classes therefore overlap, and because later classes
/// win in paint order, each child carves its overlap out of the parent.
/// Every class remains a solid blob with radii around a quarter of the
/// volume edge — large enough that the segmentation task stays resolvable
/// through a stride-4 prediction grid at the default 32³ extent.
pub fn sample_ellipsoids(cfg: &SynthConfig, index: u64) -> Result<Vec<Ellipsoid>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, index, 0));
    let ext = cfg.extent as f64;
    let (lo, hi) = cfg.shapes_per_class;
    let mut out = Vec::new();
    let mut parents: Vec<Ellipsoid> = Vec::new();
    for class in 1..cfg.num_classes as u8 {
        let count = rng.gen_range(lo..=hi);
        let mut cur = Vec::with_capacity(count);
        for _ in 0..count {
            let e = if parents.is_empty() {
                let mut center = [0.0; 3];
                let mut radii = [0.0; 3];
                for a in 0..3 {
                    center[a] = rng.gen_range(0.38..0.62) * ext;
                    radii[a] = rng.gen_range(0.26..0.36) * ext;
                }
                Ellipsoid { class, center, radii }
            } else {
                let parent = parents[rng.gen_range(0..parents.len())];
                let scale = rng.gen_range(0.82..0.94);
                let radii = parent.radii.map(|r| r * scale);
                let mut dir = [randn(&mut rng), randn(&mut rng), randn(&mut rng)];
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
                let dist = rng.gen_range(0.45..0.65)
                    * (mean_radius(&parent.radii) + mean_radius(&radii));
                let mut center = [0.0; 3];
                for a in 0..3 {
                    dir[a] /= norm;
                    center[a] = (parent.center[a] + dir[a] * dist)
                        .clamp(0.5 * radii[a], ext - 0.5 * radii[a]);
                }
                Ellipsoid { class, center, radii }
            };
            cur.push(e);
        }
        out.extend_from_slice(&cur);
        parents = cur;
    }
    Ok(out)
}

/// Rasterize ellipsoids onto a cubic label grid. Voxels take the class of
/// the last containing ellipsoid in list order, so with `sample_ellipsoids`
/// ordering, higher classes win where shapes overlap.
pub fn paint_mask(ellipsoids: &[Ellipsoid], extent: usize) -> Vec<u8> {
    let mut mask = vec![0u8; extent * extent * extent];
    for e in ellipsoids {
        let lo = |a: usize| ((e.center[a] - e.radii[a]).floor().max(0.0)) as usize;
        let hi = |a: usize| ((e.center[a] + e.radii[a]).ceil() as usize).min(extent - 1);
        for z in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for x in lo(2)..=hi(2) {
                    if e.contains([z as f64, y as f64, x as f64]) {
                        mask[(z * extent + y) * extent + x] = e.class;
                    }
                }
            }
        }
    }
    mask
}

/// Deterministically build sample `index`: paint the label field, render
/// each modality as `gain·label + offset + N(0, σ²)` with per-modality gain
/// and offset, then z-score normalize per modality.
pub fn generate(cfg: &SynthConfig, index: u64) -> Result<VolumeSample> {
    let ellipsoids = sample_ellipsoids(cfg, index)?;
    let e = cfg.extent;
    let n = e * e * e;
    let mask = paint_mask(&ellipsoids, e);
    assert!(mask.iter().any(|&m| m == 0), "generated mask has no background voxel");

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, index, 1));
    let mut image = vec![0.0f32; cfg.modalities * n];
    for m in 0..cfg.modalities {
        let gain = rng.gen_range(0.5..2.0);
        let offset = rng.gen_range(-1.0..1.0);
        let chan = &mut image[m * n..(m + 1) * n];
        let mut sum = 0.0f64;
        for (dst, &label) in chan.iter_mut().zip(&mask) {
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma as f64 * randn(&mut rng)
            } else {
                0.0
            };
            let v = gain * label as f64 + offset + noise;
            *dst = v as f32;
            sum += v;
        }
        let mean = sum / n as f64;
        let var = chan.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 1e-12 {
            for v in chan.iter_mut() {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        } else {
            // Constant channel (e.g. σ = 0 on an all-background mask).
            chan.fill(0.0);
        }
    }

    Ok(VolumeSample {
        image: Tensor::from_vec(image, &[cfg.modalities, e, e, e]),
        mask,
        shape: (e, e, e),
        num_classes: cfg.num_classes,
        meta: SampleMeta { seed: cfg.seed, index, spacing: [1.0, 1.0, 1.0] },
    })
}

/// Mirror the image and mask along the chosen axes (`[depth, height, width]`).
pub fn apply_flips(s: &VolumeSample, axes: [bool; 3]) -> VolumeSample {
    let (d, h, w) = s.shape;
    let chans = s.image.shape()[0];
    let n = d * h * w;
    let src = s.image.data();
    let mut image = vec![0.0f32; src.len()];
    let mut mask = vec![0u8; n];
    let map = |i: usize, ext: usize, flip: bool| if flip { ext - 1 - i } else { i };
    for z in 0..d {
        let sz = map(z, d, axes[0]);
        for y in 0..h {
            let sy = map(y, h, axes[1]);
            for x in 0..w {
                let sx = map(x, w, axes[2]);
                let dst = (z * h + y) * w + x;
                let srcv = (sz * h + sy) * w + sx;
                mask[dst] = s.mask[srcv];
                for c in 0..chans {
                    image[c * n + dst] = src[c * n + srcv];
                }
            }
        }
    }
    VolumeSample {
        image: Tensor::from_vec(image, s.image.shape()),
        mask,
        shape: s.shape,
        num_classes: s.num_classes,
        meta: s.meta.clone(),
    }
}

/// Random flips (p = 0.5 per axis) plus a global intensity scale drawn from
/// U(0.9, 1.1). The mask flips identically and is never intensity-jittered.
pub fn augment(s: &VolumeSample, rng: &mut ChaCha8Rng) -> VolumeSample {
    let axes = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let jitter: f32 = rng.gen_range(0.9..1.1);
    let flipped = apply_flips(s, axes);
    let image: Vec<f32> = flipped.image.data().iter().map(|&v| v * jitter).collect();
    VolumeSample {
        image: Tensor::from_vec(image, flipped.image.shape()),
        ..flipped
    }
}

// ---------------------------------------------------------------------------
// VSEG1 file format: magic "VSEG1", u32 LE header length, JSON header,
// raw little-endian f32 image payload, raw u8 mask payload.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"VSEG1";

#[derive(Serialize, Deserialize)]
struct VsegHeader {
    shape: [usize; 3],
    dtype: String,
    channels: usize,
    classes: usize,
    seed: u64,
    index: u64,
    spacing: [f32; 3],
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn save_volume(s: &VolumeSample, path: &Path) -> Result<()> {
    let header = VsegHeader {
        shape: [s.shape.0, s.shape.1, s.shape.2],
        dtype: "f32".into(),
        channels: s.image.shape()[0],
        classes: s.num_classes,
        seed: s.meta.seed,
        index: s.meta.index,
        spacing: s.meta.spacing,
    };
    let json = serde_json::to_vec(&header)?;
    let data = s.image.data();
    let mut payload = Vec::with_capacity(MAGIC.len() + 4 + json.len() + data.len() * 4 + s.mask.len());
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&json);
    for v in &data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    payload.extend_from_slice(&s.mask);
    let mut file = fs::File::create(path)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<VolumeSample> {
    parse_volume(&fs::read(path)?)
}

fn parse_volume(bytes: &[u8]) -> Result<VolumeSample> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(format_err("truncated file: missing magic/header length"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..MAGIC.len()],
            MAGIC
        )));
    }
    let mut len4 = [0u8; 4];
    len4.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 4]);
    let json_len = u32::from_le_bytes(len4) as usize;
    let body = MAGIC.len() + 4;
    if bytes.len() < body + json_len {
        return Err(format_err("truncated file: header shorter than declared"));
    }
    let header: VsegHeader = serde_json::from_slice(&bytes[body..body + json_len])
        .map_err(|e| format_err(format!("unparseable header: {e}")))?;
    if header.dtype != "f32" {
        return Err(format_err(format!("unsupported dtype {:?}", header.dtype)));
    }
    let [d, h, w] = header.shape;
    for ext in [d, h, w] {
        if ext == 0 || ext % MIN_DIVISOR != 0 {
            return Err(format_err(format!(
                "extent {ext} is not a positive multiple of {MIN_DIVISOR}"
            )));
        }
    }
    if header.channels == 0 || header.classes < 2 || header.classes > u8::MAX as usize + 1 {
        return Err(format_err(format!(
            "invalid channels/classes: {}/{}",
            header.channels, header.classes
        )));
    }
    let n = d * h * w;
    let image_bytes = header.channels * n * 4;
    let expected = body + json_len + image_bytes + n;
    if bytes.len() != expected {
        return Err(format_err(format!(
            "payload size mismatch: file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let image_start = body + json_len;
    let mut image = Vec::with_capacity(header.channels * n);
    for chunk in bytes[image_start..image_start + image_bytes].chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(format_err("non-finite value in image payload"));
        }
        image.push(v);
    }
    let mask = bytes[image_start + image_bytes..].to_vec();
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= header.classes) {
        return Err(format_err(format!(
            "mask label {bad} out of range for {} classes",
            header.classes
        )));
    }
    Ok(VolumeSample {
        image: Tensor::from_vec(image, &[header.channels, d, h, w]),
        mask,
        shape: (d, h, w),
        num_classes: header.classes,
        meta: SampleMeta { seed: header.seed, index: header.index, spacing: header.spacing },
    })
}

// ---------------------------------------------------------------------------
// Dataset directories: numbered VSEG1 files plus an index manifest.
// ---------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub count: usize,
    /// Sample index of the first file; disjoint splits use disjoint ranges.
    #[serde(default)]
    pub start_index: u64,
    pub files: Vec<String>,
}

/// Generate `count` samples and write them (plus the manifest) under `dir`.
pub fn write_dataset(cfg: &SynthConfig, count: usize, dir: &Path) -> Result<DatasetManifest> {
    write_dataset_range(cfg, 0, count, dir)
}

/// Generate samples for indices `start..start + count` and write them (plus
/// the manifest) under `dir`. Two directories built from the same config with
/// non-overlapping index ranges share no samples, which is how train and
/// eval splits stay disjoint.
pub fn write_dataset_range(
    cfg: &SynthConfig,
    start: u64,
    count: usize,
    dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let index = start + i as u64;
        let name = format!("sample_{index:05}.vseg");
        save_volume(&generate(cfg, index)?, &dir.join(&name))?;
        files.push(name);
    }
    let manifest = DatasetManifest { config: cfg.clone(), count, start_index: start, files };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

/// Load every sample listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<VolumeSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        samples.push(load_volume(&dir.join(name))?);
    }
    Ok((manifest, samples))
}
