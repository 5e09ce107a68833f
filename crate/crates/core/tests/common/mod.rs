//! Independent oracles shared by the property tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgnet::sg::{ChannelGateParams, FusionMode, SgModuleParams, SpatialGateParams};
use sgnet::volume::{FeatureVolume, LabelVolume};

pub fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> FeatureVolume<f64> {
    let n = shape.iter().product();
    FeatureVolume::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn random_sg_params(rng: &mut ChaCha8Rng, k: usize, mode: FusionMode) -> SgModuleParams<f64> {
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let channel = ChannelGateParams::new(k, v(2 * k * k), v(k), v(k * k), v(k)).unwrap();
    let spatial = SpatialGateParams::new(v(2 * k), v(1)[0]).unwrap();
    SgModuleParams::new(channel, spatial, mode).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

/// Moves voxel `i` of every channel to position `perm[i]`.
pub fn permute(v: &FeatureVolume<f64>, perm: &[usize]) -> FeatureVolume<f64> {
    let [b, c, ..] = v.shape();
    let mut out = v.clone();
    for item in 0..b {
        for ch in 0..c {
            let src = v.channel(item, ch);
            let dst = out.channel_mut(item, ch);
            for (i, &p) in perm.iter().enumerate() {
                dst[p] = src[i];
            }
        }
    }
    out
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn random_mask_pair(rng: &mut ChaCha8Rng, max_side: usize) -> ([usize; 3], LabelVolume, LabelVolume) {
    let dims = [0; 3].map(|_| rng.random_range(1..=max_side));
    let n = dims.iter().product();
    let density = rng.random_range(0.05..0.95);
    let mut draw =
        || LabelVolume::from_vec(dims, (0..n).map(|_| u8::from(rng.random_bool(density))).collect()).unwrap();
    let (a, b) = (draw(), draw());
    (dims, a, b)
}

pub fn brute_dsc(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|&&x| x).count();
    let nb = b.iter().filter(|&&x| x).count();
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Mask voxels with a 6-neighbour outside the mask or outside the volume.
pub fn brute_surface(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let inside = |h: isize, w: isize, t: isize| {
        h >= 0
            && w >= 0
            && t >= 0
            && (h as usize) < dims[0]
            && (w as usize) < dims[1]
            && (t as usize) < dims[2]
            && mask[(h as usize * dims[1] + w as usize) * dims[2] + t as usize]
    };
    let offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
    let mut out = Vec::new();
    for h in 0..dims[0] as isize {
        for w in 0..dims[1] as isize {
            for t in 0..dims[2] as isize {
                if inside(h, w, t) && offsets.iter().any(|&(a, b, c)| !inside(h + a, w + b, t + c)) {
                    out.push([h as usize, w as usize, t as usize]);
                }
            }
        }
    }
    out
}

fn distance(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    let d: Vec<f64> = (0..3).map(|i| (a[i] as f64 - b[i] as f64) * s[i]).collect();
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> f64 {
    let mut sum = 0.0;
    for &a in from {
        sum += to.iter().map(|&b| distance(a, b, s)).fold(f64::INFINITY, f64::min);
    }
    sum / from.len() as f64
}

/// All-pairs symmetric average surface distance.
pub fn brute_asd(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let (sa, sb) = (brute_surface(a, dims), brute_surface(b, dims));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    Some((brute_directed(&sa, &sb, spacing) + brute_directed(&sb, &sa, spacing)) / 2.0)
}

/// Textbook binary cross-entropy of `sigmoid(logit)` against `target`.
pub fn bce(logits: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    sum / logits.len() as f64
}
