//! Boundary supervision derived from ground-truth label maps.
//!
//! Clear organs get a hard binary contour; blurry organs get the contour
//! convolved with a truncated Gaussian and rescaled to peak at 1.

use crate::error::{Error, Result};
use crate::volume::{for_each_neighbor6, LabelVolume};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganTaxonomy {
    pub clear_classes: BTreeSet<u8>,
    pub blurry_classes: BTreeSet<u8>,
}

impl Default for OrganTaxonomy {
    /// Phantom layout: classes 1 and 2 are sharp, class 3 is blurry.
    fn default() -> Self {
        OrganTaxonomy { clear_classes: [1, 2].into_iter().collect(), blurry_classes: [3].into_iter().collect() }
    }
}

impl OrganTaxonomy {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(c) = self.clear_classes.intersection(&self.blurry_classes).next() {
            return Err(Error::Config(format!("class {c} is both clear and blurry")));
        }
        let all = self.clear_classes.iter().chain(&self.blurry_classes);
        for &c in all {
            if c == 0 || usize::from(c) >= num_classes {
                return Err(Error::Config(format!("taxonomy class {c} outside 1..{}", num_classes - 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftenConfig {
    /// Gaussian standard deviation in voxels.
    pub delta: f64,
    /// Kernel half-width; must be at least `ceil(3 * delta)`.
    pub truncation_radius: usize,
}

impl Default for SoftenConfig {
    fn default() -> Self {
        SoftenConfig::with_delta(3.0)
    }
}

impl SoftenConfig {
    pub fn with_delta(delta: f64) -> Self {
        SoftenConfig { delta, truncation_radius: (3.0 * delta).ceil() as usize }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("soften delta must be > 0, got {}", self.delta)));
        }
        let min = (3.0 * self.delta).ceil() as usize;
        if self.truncation_radius < min {
            return Err(Error::Config(format!(
                "truncation_radius {} below ceil(3*delta) = {min}",
                self.truncation_radius
            )));
        }
        Ok(())
    }
}

/// Binary `(H, W, T)` volume stored as `u8` 0/1.
pub type BinaryVolume = LabelVolume;

/// Hard and soft boundary maps for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTargets {
    pub hard: BinaryVolume,
    pub soft: Vec<f64>,
}

/// Voxels of `classes` that have at least one in-bounds 6-neighbour with a
/// different label.
pub fn extract_contours(label: &LabelVolume, classes: &BTreeSet<u8>) -> BinaryVolume {
    let dims = label.dims();
    let mut out = LabelVolume::zeros(dims);
    if classes.is_empty() {
        return out;
    }
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for t in 0..dims[2] {
                let l = label.get(h, w, t);
                if !classes.contains(&l) {
                    continue;
                }
                let mut edge = false;
                for_each_neighbor6(dims, (h, w, t), |a, b, c| edge |= label.get(a, b, c) != l);
                if edge {
                    out.set(h, w, t, 1);
                }
            }
        }
    }
    out
}

fn gaussian_taps(cfg: &SoftenConfig) -> Vec<f64> {
    let r = cfg.truncation_radius as isize;
    let denom = 2.0 * cfg.delta * cfg.delta;
    (-r..=r).map(|d| (-((d * d) as f64) / denom).exp()).collect()
}

/// Separable truncated-Gaussian filtering with zero padding, before rescaling.
pub fn soften_raw(hard: &BinaryVolume, cfg: &SoftenConfig) -> Vec<f64> {
    let dims = hard.dims();
    let taps = gaussian_taps(cfg);
    let mut buf: Vec<f64> = hard.data().iter().map(|&v| f64::from(v)).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        buf = filter_axis(&buf, dims, strides, axis, &taps);
    }
    buf
}

fn filter_axis(src: &[f64], dims: [usize; 3], strides: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = strides[axis];
    let mut out = vec![0.0; src.len()];
    for (i, dst) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % dims[axis]) as isize;
        let line_start = i - pos as usize * stride;
        let mut acc = 0.0;
        for (j, &wt) in taps.iter().enumerate() {
            let p = pos + j as isize - r;
            if p >= 0 && p < n {
                acc += wt * src[line_start + p as usize * stride];
            }
        }
        *dst = acc;
    }
    out
}

/// Gaussian-softened contour map rescaled so its maximum is exactly 1.
pub fn soften_contours(hard: &BinaryVolume, cfg: &SoftenConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut raw = soften_raw(hard, cfg);
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(raw)
}

pub fn make_targets(label: &LabelVolume, taxonomy: &OrganTaxonomy, cfg: &SoftenConfig) -> Result<BoundaryTargets> {
    let hard = extract_contours(label, &taxonomy.clear_classes);
    let blurry = extract_contours(label, &taxonomy.blurry_classes);
    let soft = soften_contours(&blurry, cfg)?;
    Ok(BoundaryTargets { hard, soft })
}

/// Same as [`make_targets`] but the blurry classes also get a hard contour;
/// used by the hard-contour ablation.
pub fn make_hard_only_targets(label: &LabelVolume, taxonomy: &OrganTaxonomy) -> BoundaryTargets {
    let hard = extract_contours(label, &taxonomy.clear_classes);
    let blurry = extract_contours(label, &taxonomy.blurry_classes);
    BoundaryTargets { hard, soft: blurry.data().iter().map(|&v| f64::from(v)).collect() }
}
