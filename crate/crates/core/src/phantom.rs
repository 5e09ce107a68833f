//! Synthetic volumes with two sharp-edged objects and one low-contrast,
//! blurred object.
//!
//! Labels are always crisp; only the image evidence of class 3 is blurred.

use crate::error::{Error, Result};
use crate::mhd::{read_mhd, write_mhd, VolumeData};
use crate::volume::{FeatureVolume, LabelVolume, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Intensity of each class before blur, noise and normalization.
const CLASS_LEVELS: [f64; 3] = [2.0, -1.0, 0.0];
/// Candidate ellipsoids tried per object within one layout.
const PLACEMENT_ATTEMPTS: usize = 100;
/// Fresh layouts tried before giving up.
const LAYOUT_ATTEMPTS: usize = 50;
/// Minimum gap in voxels between objects.
const OBJECT_GAP: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub volume_shape: [usize; 3],
    pub num_objects: usize,
    /// Gaussian sigma (voxels) applied to the blurry object's intensity edge.
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Intensity step of the blurry object against background.
    pub intensity_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            volume_shape: [64, 64, 16],
            num_objects: 3,
            blur_sigma: 4.0,
            noise_sigma: 0.05,
            intensity_contrast: 0.15,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("volume_shape {:?} too small (min 8 per axis)", self.volume_shape)));
        }
        if self.num_objects != 3 {
            return Err(Error::Config(format!("num_objects must be 3, got {}", self.num_objects)));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("sigmas must be >= 0".into()));
        }
        if !(self.intensity_contrast > 0.0 && self.intensity_contrast <= 1.0) {
            return Err(Error::Config(format!(
                "intensity_contrast must be in (0, 1], got {}",
                self.intensity_contrast
            )));
        }
        Ok(())
    }

    /// Short content hash of the generation parameters, seed excluded.
    pub fn hash(&self) -> String {
        let canonical = PhantomConfig { seed: 0, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub config_hash: String,
    pub spacing: Spacing,
}

#[derive(Debug, Clone)]
pub struct SegSample {
    /// `(1, 1, H, W, T)`, zero mean and unit variance.
    pub image: FeatureVolume<f32>,
    pub label: LabelVolume,
    pub meta: SampleMeta,
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
    /// Rows of the world-to-body rotation.
    rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let plane = dims[0].min(dims[1]) as f64;
        let depth = dims[2] as f64;
        let semi_axes = [
            rng.random_range(0.12..0.20) * plane,
            rng.random_range(0.12..0.20) * plane,
            rng.random_range(0.20..0.32) * depth,
        ];
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let tilt = rng.random_range(-0.25..0.25);
        let (sy, cy) = yaw.sin_cos();
        let (st, ct) = f64::sin_cos(tilt);
        // Rotation about the depth axis, then a small tilt about the height axis.
        let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]];
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| rx[i][k] * rz[k][j]).sum();
            }
        }
        let reach = semi_axes.iter().copied().fold(0.0, f64::max);
        let center = [0, 1, 2].map(|a| {
            let lo = if a == 2 { semi_axes[2] + 1.0 } else { reach + 1.0 };
            let hi = dims[a] as f64 - 1.0 - lo;
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                dims[a] as f64 / 2.0
            }
        });
        Ellipsoid { center, semi_axes, rotation }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut r = 0.0;
        for (row, axis) in self.rotation.iter().zip(self.semi_axes) {
            let u = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            r += (u / axis).powi(2);
        }
        r <= 1.0
    }

    fn rasterize(&self, dims: [usize; 3]) -> Vec<bool> {
        let mut mask = Vec::with_capacity(dims.iter().product());
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for t in 0..dims[2] {
                    mask.push(self.contains([h as f64, w as f64, t as f64]));
                }
            }
        }
        mask
    }
}

/// Box dilation of `mask` by `r` voxels on every axis.
fn dilate(mask: &[bool], dims: [usize; 3], r: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let src = out.clone();
        for (i, o) in out.iter_mut().enumerate() {
            if *o {
                continue;
            }
            let pos = (i / strides[axis]) % dims[axis];
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(dims[axis] - 1);
            *o = (lo..=hi).any(|p| src[i - pos * strides[axis] + p * strides[axis]]);
        }
    }
    out
}

fn touches_border(mask: &[bool], dims: [usize; 3]) -> bool {
    let mut i = 0;
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for t in 0..dims[2] {
                let border = h == 0 || w == 0 || t == 0 || h + 1 == dims[0] || w + 1 == dims[1] || t + 1 == dims[2];
                if border && mask[i] {
                    return true;
                }
                i += 1;
            }
        }
    }
    false
}

/// Separable Gaussian blur with zero padding.
fn gaussian_blur(src: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut buf = src.to_vec();
    for axis in 0..3 {
        let prev = buf.clone();
        for (i, out) in buf.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let base = i - pos as usize * strides[axis];
            let mut acc = 0.0;
            for (j, &wt) in taps.iter().enumerate() {
                let p = pos + j as isize - r;
                if p >= 0 && p < dims[axis] as isize {
                    acc += wt * prev[base + p as usize * strides[axis]];
                }
            }
            *out = acc;
        }
    }
    buf
}

/// Three disjoint, border-free ellipsoid masks separated by [`OBJECT_GAP`].
/// A layout whose later objects do not fit is discarded and restarted.
fn place_objects(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Result<Vec<Vec<bool>>> {
    let n: usize = dims.iter().product();
    'layout: for _ in 0..LAYOUT_ATTEMPTS {
        let mut occupied = vec![false; n];
        let mut masks = Vec::with_capacity(3);
        for _ in 0..3 {
            let found = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let mask = Ellipsoid::random(rng, dims).rasterize(dims);
                let size = mask.iter().filter(|&&m| m).count();
                let clash = mask.iter().zip(&occupied).any(|(&m, &o)| m && o);
                (size >= 8 && !clash && !touches_border(&mask, dims)).then_some(mask)
            });
            let Some(mask) = found else { continue 'layout };
            let grown = dilate(&mask, dims, OBJECT_GAP);
            occupied.iter_mut().zip(&grown).for_each(|(o, &g)| *o |= g);
            masks.push(mask);
        }
        return Ok(masks);
    }
    Err(Error::Placement { attempts: LAYOUT_ATTEMPTS * 3 * PLACEMENT_ATTEMPTS, shape: dims })
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<SegSample> {
    cfg.validate()?;
    let dims = cfg.volume_shape;
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks = place_objects(&mut rng, dims)?;
    let mut label = LabelVolume::zeros(dims);
    for (class, mask) in (1..=3u8).zip(&masks) {
        for (l, &m) in label.data_mut().iter_mut().zip(mask) {
            if m {
                *l = class;
            }
        }
    }

    let mut image = vec![0.0f64; n];
    for (k, mask) in masks.iter().enumerate().take(2) {
        for (v, &m) in image.iter_mut().zip(mask) {
            if m {
                *v += CLASS_LEVELS[k];
            }
        }
    }
    let blurry: Vec<f64> = masks[2].iter().map(|&m| if m { cfg.intensity_contrast } else { 0.0 }).collect();
    for (v, b) in image.iter_mut().zip(gaussian_blur(&blurry, dims, cfg.blur_sigma)) {
        *v += b + CLASS_LEVELS[2];
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        image.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let mean = image.iter().sum::<f64>() / n as f64;
    let std = (image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    let data: Vec<f32> = image.iter().map(|v| ((v - mean) * scale) as f32).collect();

    Ok(SegSample {
        image: FeatureVolume::from_vec([1, 1, dims[0], dims[1], dims[2]], data)?,
        label,
        meta: SampleMeta { seed: cfg.seed, config_hash: cfg.hash(), spacing: Spacing::default() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument {
                arg: "split",
                reason: format!("expected train, val or test, got `{other}`"),
            }),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    /// Case counts per split; rounding leftovers go to the test split.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        Ok([train, val, n - train - val])
    }
}

/// Deterministic per-case seed; each split owns a disjoint range of 2^40.
pub fn case_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    master_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(split.offset()).wrapping_add(index as u64)
}

/// Dataset generation request, as read from a `gen-data` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_cases: usize,
    pub master_seed: u64,
    pub phantom: PhantomConfig,
    pub split: SplitFractions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_cases: 10,
            master_seed: 0,
            phantom: PhantomConfig::default(),
            split: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub image: PathBuf,
    pub label: PathBuf,
    pub image_sha256: String,
    pub label_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub phantom: PhantomConfig,
    pub config_hash: String,
    pub split: SplitFractions,
    pub spacing: Spacing,
    pub cases: Vec<ManifestCase>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }

    pub fn cases_in(&self, split: Split) -> impl Iterator<Item = &ManifestCase> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    /// Loads every case of `split`; `root` is the manifest's directory.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<SegSample>> {
        self.cases_in(split).map(|c| self.load_case(root, c)).collect()
    }

    pub fn load_case(&self, root: &Path, case: &ManifestCase) -> Result<SegSample> {
        let image = read_mhd(&root.join(&case.image))?;
        let label = read_mhd(&root.join(&case.label))?;
        let dims = image.dims;
        if label.dims != dims {
            return Err(Error::mismatch("manifest case", image.dims, label.dims));
        }
        let VolumeData::F32(pixels) = image.data else {
            return Err(Error::UnsupportedElementType(format!("{} image must be MET_FLOAT", case.id)));
        };
        let VolumeData::U8(classes) = label.data else {
            return Err(Error::UnsupportedElementType(format!("{} label must be MET_UCHAR", case.id)));
        };
        Ok(SegSample {
            image: FeatureVolume::from_vec([1, 1, dims[0], dims[1], dims[2]], pixels)?,
            label: LabelVolume::from_vec(dims, classes)?,
            meta: SampleMeta { seed: case.seed, config_hash: self.config_hash.clone(), spacing: image.spacing },
        })
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn case_jobs(spec: &DatasetSpec) -> Result<Vec<(Split, u64)>> {
    spec.phantom.validate()?;
    let counts = spec.split.counts(spec.num_cases)?;
    Ok(Split::ALL
        .into_iter()
        .zip(counts)
        .flat_map(|(split, count)| (0..count).map(move |i| (split, case_seed(spec.master_seed, split, i))))
        .collect())
}

/// Generates the phantoms of a dataset in memory, in parallel across cases.
pub fn generate_in_memory(spec: &DatasetSpec) -> Result<Vec<(Split, SegSample)>> {
    case_jobs(spec)?
        .into_par_iter()
        .map(|(split, seed)| Ok((split, generate_phantom(&PhantomConfig { seed, ..spec.phantom.clone() })?)))
        .collect()
}

/// Writes `spec.num_cases` phantoms plus `manifest.json` into `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    let samples = generate_in_memory(spec)?;
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let dims = spec.phantom.volume_shape;
    let mut cases = Vec::with_capacity(samples.len());
    for (id, (split, sample)) in samples.into_iter().enumerate() {
        let name = format!("case_{id:04}");
        let image = PathBuf::from(format!("{name}_image.mhd"));
        let label = PathBuf::from(format!("{name}_label.mhd"));
        let spacing = sample.meta.spacing;
        write_mhd(&out_dir.join(&image), &VolumeData::F32(sample.image.into_vec()), dims, spacing)?;
        write_mhd(&out_dir.join(&label), &VolumeData::U8(sample.label.data().to_vec()), dims, spacing)?;
        cases.push(ManifestCase {
            id: name.clone(),
            split,
            seed: sample.meta.seed,
            image_sha256: sha256_file(&out_dir.join(format!("{name}_image.raw")))?,
            label_sha256: sha256_file(&out_dir.join(format!("{name}_label.raw")))?,
            image,
            label,
        });
    }
    let manifest = Manifest {
        format_version: 1,
        master_seed: spec.master_seed,
        phantom: spec.phantom.clone(),
        config_hash: spec.phantom.hash(),
        split: spec.split,
        spacing: Spacing::default(),
        cases,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    std::fs::write(&path, json).map_err(Error::io(&path))?;
    Ok(manifest)
}
