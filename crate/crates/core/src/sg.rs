//! Semantic-guided skip connection.
//!
//! Shallow encoder features `S` and upsampled decoder features `D` (both with
//! `K` channels) are concatenated into `F = [S; D]`. Two gates computed from
//! `F` recalibrate `S`:
//!
//! * channel gate: `g = sigmoid(W1 relu(W2 gap(F) + b2) + b1)`, one weight per
//!   shallow channel;
//! * spatial gate: `m = sigmoid(kernel . F(v) + bias)`, one weight per voxel.
//!
//! The gated features `g*S + m*S` are then fused with `D` by concatenation or
//! addition.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::FeatureVolume;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Concatenate,
    Add,
}

/// Weights of the two fully connected maps of the channel gate.
///
/// `w2` is `K x 2K` and `w1` is `K x K`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGateParams<T> {
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    k: usize,
}

impl<T: Scalar> ChannelGateParams<T> {
    pub fn new(k: usize, w2: Vec<T>, b2: Vec<T>, w1: Vec<T>, b1: Vec<T>) -> Result<Self> {
        let p = ChannelGateParams { w2, b2, w1, b1, k };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(k: usize) -> Self {
        ChannelGateParams {
            w2: vec![T::zero(); 2 * k * k],
            b2: vec![T::zero(); k],
            w1: vec![T::zero(); k * k],
            b1: vec![T::zero(); k],
            k,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn validate(&self) -> Result<()> {
        let k = self.k;
        let want = [
            ("w2", self.w2.len(), 2 * k * k),
            ("b2", self.b2.len(), k),
            ("w1", self.w1.len(), k * k),
            ("b1", self.b1.len(), k),
        ];
        for (name, got, expected) in want {
            if got != expected {
                return Err(Error::InvalidArgument {
                    arg: "channel gate",
                    reason: format!("{name} has {got} entries, expected {expected} for K={k}"),
                });
            }
        }
        let all = self.w2.iter().chain(&self.b2).chain(&self.w1).chain(&self.b1);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("channel gate params"));
        }
        Ok(())
    }
}

/// The 2K -> 1 per-voxel squeeze (a 1x1x1 convolution) of the spatial gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGateParams<T> {
    pub kernel: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> SpatialGateParams<T> {
    pub fn new(kernel: Vec<T>, bias: T) -> Result<Self> {
        if kernel.is_empty() || kernel.len() % 2 != 0 {
            return Err(Error::InvalidArgument {
                arg: "spatial kernel",
                reason: format!("length must be 2K, got {}", kernel.len()),
            });
        }
        if kernel.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::NonFinite("spatial gate params"));
        }
        Ok(SpatialGateParams { kernel, bias })
    }

    pub fn zeros(k: usize) -> Self {
        SpatialGateParams { kernel: vec![T::zero(); 2 * k], bias: T::zero() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgModuleParams<T> {
    pub channel: ChannelGateParams<T>,
    pub spatial: SpatialGateParams<T>,
    pub fusion_mode: FusionMode,
}

impl<T: Scalar> SgModuleParams<T> {
    pub fn new(channel: ChannelGateParams<T>, spatial: SpatialGateParams<T>, fusion_mode: FusionMode) -> Result<Self> {
        if spatial.kernel.len() != 2 * channel.k() {
            return Err(Error::InvalidArgument {
                arg: "sg params",
                reason: format!(
                    "channel gate has K={} but spatial kernel has {} entries",
                    channel.k(),
                    spatial.kernel.len()
                ),
            });
        }
        Ok(SgModuleParams { channel, spatial, fusion_mode })
    }

    pub fn zeros(k: usize, fusion_mode: FusionMode) -> Self {
        SgModuleParams { channel: ChannelGateParams::zeros(k), spatial: SpatialGateParams::zeros(k), fusion_mode }
    }

    pub fn k(&self) -> usize {
        self.channel.k()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sum whose result does not depend on the order of `values`.
fn order_independent_sum<T: Scalar>(values: &[T]) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    sorted.into_iter().fold(T::zero(), |acc, v| acc + v)
}

/// `F = [S; D]` along the channel axis.
pub fn concat_features<T: Scalar>(shallow: &FeatureVolume<T>, deep: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    if shallow.shape() != deep.shape() {
        return Err(Error::mismatch("concat_features", shallow.shape(), deep.shape()));
    }
    concat_channels(shallow, deep)
}

/// Channel concatenation of two volumes sharing batch and spatial dims.
pub(crate) fn concat_channels<T: Scalar>(a: &FeatureVolume<T>, b: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    let [ba, ca, h, w, t] = a.shape();
    let [bb, cb, ..] = b.shape();
    if ba != bb || a.spatial() != b.spatial() {
        return Err(Error::mismatch("concat_channels", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for item in 0..ba {
        data.extend_from_slice(a.item(item));
        data.extend_from_slice(b.item(item));
    }
    Ok(FeatureVolume::from_raw([ba, ca + cb, h, w, t], data))
}

/// Per-item, per-channel mean over all voxels. Returns `batch` vectors.
pub fn global_average_pool<T: Scalar>(f: &FeatureVolume<T>) -> Vec<Vec<T>> {
    let n = T::of(f.voxels() as f64);
    (0..f.batch()).map(|b| (0..f.channels()).map(|c| order_independent_sum(f.channel(b, c)) / n).collect()).collect()
}

struct ChannelGateTrace<T> {
    hidden: Vec<T>,
    gate: Vec<T>,
}

fn channel_gate_traced<T: Scalar>(q: &[T], p: &ChannelGateParams<T>) -> Result<ChannelGateTrace<T>> {
    let k = p.k();
    if q.len() != 2 * k {
        return Err(Error::mismatch("channel_gate", q.len(), format!("2K={}", 2 * k)));
    }
    let hidden: Vec<T> = (0..k)
        .map(|r| {
            let row = &p.w2[r * 2 * k..(r + 1) * 2 * k];
            row.iter().zip(q).fold(p.b2[r], |acc, (&w, &x)| acc + w * x)
        })
        .collect();
    let gate = (0..k)
        .map(|r| {
            let row = &p.w1[r * k..(r + 1) * k];
            let z = row.iter().zip(&hidden).fold(p.b1[r], |acc, (&w, &h)| acc + w * h.max(T::zero()));
            sigmoid(z)
        })
        .collect();
    Ok(ChannelGateTrace { hidden, gate })
}

/// `sigmoid(W1 relu(W2 q + b2) + b1)` for one pooled vector `q` of length 2K.
pub fn channel_gate<T: Scalar>(q: &[T], p: &ChannelGateParams<T>) -> Result<Vec<T>> {
    channel_gate_traced(q, p).map(|t| t.gate)
}

/// Scales each shallow channel by its gate weight. `gates` holds one vector
/// per batch item.
pub fn apply_channel_gate<T: Scalar>(shallow: &FeatureVolume<T>, gates: &[Vec<T>]) -> Result<FeatureVolume<T>> {
    if gates.len() != shallow.batch() || gates.iter().any(|g| g.len() != shallow.channels()) {
        let lens: Vec<usize> = gates.iter().map(Vec::len).collect();
        return Err(Error::mismatch("apply_channel_gate", shallow.shape(), lens));
    }
    let mut out = shallow.clone();
    for (b, g) in gates.iter().enumerate() {
        for (c, &gc) in g.iter().enumerate() {
            out.channel_mut(b, c).iter_mut().for_each(|v| *v *= gc);
        }
    }
    Ok(out)
}

/// Per-voxel `sigmoid(kernel . F(v) + bias)`, returned as a one-channel volume.
pub fn spatial_gate<T: Scalar>(f: &FeatureVolume<T>, p: &SpatialGateParams<T>) -> Result<FeatureVolume<T>> {
    if p.kernel.len() != f.channels() {
        return Err(Error::mismatch("spatial_gate", f.shape(), p.kernel.len()));
    }
    let [b, _, h, w, t] = f.shape();
    let mut out = FeatureVolume::filled([b, 1, h, w, t], p.bias);
    for item in 0..b {
        let acc = out.channel_mut(item, 0);
        for (c, &kc) in p.kernel.iter().enumerate() {
            for (a, &x) in acc.iter_mut().zip(f.channel(item, c)) {
                *a += kc * x;
            }
        }
        acc.iter_mut().for_each(|u| *u = sigmoid(*u));
    }
    Ok(out)
}

/// Multiplies every shallow channel voxel-wise by the one-channel `map`.
pub fn apply_spatial_gate<T: Scalar>(shallow: &FeatureVolume<T>, map: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    if map.channels() != 1 || map.batch() != shallow.batch() || map.spatial() != shallow.spatial() {
        return Err(Error::mismatch("apply_spatial_gate", shallow.shape(), map.shape()));
    }
    let mut out = shallow.clone();
    for b in 0..shallow.batch() {
        let m = map.channel(b, 0);
        for c in 0..shallow.channels() {
            for (v, &mv) in out.channel_mut(b, c).iter_mut().zip(m) {
                *v *= mv;
            }
        }
    }
    Ok(out)
}

/// Element-wise sum of the two gated feature sets.
pub fn combine_gates<T: Scalar>(sgcf: &FeatureVolume<T>, sgsf: &FeatureVolume<T>) -> Result<FeatureVolume<T>> {
    sgcf.zip_with(sgsf, "combine_gates", |a, b| a + b)
}

pub fn fuse_with_decoder<T: Scalar>(
    sgf: &FeatureVolume<T>,
    deep: &FeatureVolume<T>,
    mode: FusionMode,
) -> Result<FeatureVolume<T>> {
    match mode {
        FusionMode::Concatenate => {
            if sgf.shape() != deep.shape() {
                return Err(Error::mismatch("fuse_with_decoder", sgf.shape(), deep.shape()));
            }
            concat_channels(sgf, deep)
        }
        FusionMode::Add => sgf.zip_with(deep, "fuse_with_decoder", |a, b| a + b),
    }
}

/// Intermediate values of one forward pass, kept for [`sg_backward`].
#[derive(Debug, Clone)]
pub struct SgTrace<T> {
    features: FeatureVolume<T>,
    pooled: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    gates: Vec<Vec<T>>,
    map: FeatureVolume<T>,
}

impl<T: Scalar> SgTrace<T> {
    pub fn gates(&self) -> &[Vec<T>] {
        &self.gates
    }

    pub fn spatial_map(&self) -> &FeatureVolume<T> {
        &self.map
    }
}

pub fn sg_forward<T: Scalar>(
    shallow: &FeatureVolume<T>,
    deep: &FeatureVolume<T>,
    params: &SgModuleParams<T>,
) -> Result<FeatureVolume<T>> {
    sg_forward_traced(shallow, deep, params).map(|(out, _)| out)
}

pub fn sg_forward_traced<T: Scalar>(
    shallow: &FeatureVolume<T>,
    deep: &FeatureVolume<T>,
    params: &SgModuleParams<T>,
) -> Result<(FeatureVolume<T>, SgTrace<T>)> {
    if shallow.channels() != params.k() {
        return Err(Error::mismatch("sg_forward", shallow.shape(), format!("K={}", params.k())));
    }
    let features = concat_features(shallow, deep)?;
    let pooled = global_average_pool(&features);
    let mut hidden = Vec::with_capacity(pooled.len());
    let mut gates = Vec::with_capacity(pooled.len());
    for q in &pooled {
        let t = channel_gate_traced(q, &params.channel)?;
        hidden.push(t.hidden);
        gates.push(t.gate);
    }
    let sgcf = apply_channel_gate(shallow, &gates)?;
    let map = spatial_gate(&features, &params.spatial)?;
    let sgsf = apply_spatial_gate(shallow, &map)?;
    let sgf = combine_gates(&sgcf, &sgsf)?;
    let out = fuse_with_decoder(&sgf, deep, params.fusion_mode)?;
    Ok((out, SgTrace { features, pooled, hidden, gates, map }))
}

/// Gradients of a scalar objective with respect to every input of
/// [`sg_forward`].
#[derive(Debug, Clone)]
pub struct SgGrads<T> {
    pub shallow: FeatureVolume<T>,
    pub deep: FeatureVolume<T>,
    pub channel: ChannelGateParams<T>,
    pub spatial: SpatialGateParams<T>,
}

pub fn sg_backward<T: Scalar>(
    trace: &SgTrace<T>,
    params: &SgModuleParams<T>,
    grad_out: &FeatureVolume<T>,
) -> Result<SgGrads<T>> {
    let k = params.k();
    let f = &trace.features;
    let [b, _, h, w, t] = f.shape();
    let voxels = f.voxels();
    let expected_channels = match params.fusion_mode {
        FusionMode::Concatenate => 2 * k,
        FusionMode::Add => k,
    };
    if grad_out.shape() != [b, expected_channels, h, w, t] {
        return Err(Error::mismatch("sg_backward", grad_out.shape(), [b, expected_channels, h, w, t]));
    }

    let mut d_shallow = FeatureVolume::zeros([b, k, h, w, t]);
    let mut d_deep = FeatureVolume::zeros([b, k, h, w, t]);
    let mut d_channel = ChannelGateParams::zeros(k);
    let mut d_spatial = SpatialGateParams::zeros(k);
    let inv_n = T::one() / T::of(voxels as f64);

    for item in 0..b {
        // Split the upstream gradient into the SGF part and the direct deep part.
        let (d_sgf_base, deep_offset) = match params.fusion_mode {
            FusionMode::Concatenate => (0, Some(k)),
            FusionMode::Add => (0, None),
        };
        for c in 0..k {
            let src = match deep_offset {
                Some(off) => grad_out.channel(item, off + c),
                None => grad_out.channel(item, c),
            };
            d_deep.channel_mut(item, c).copy_from_slice(src);
        }

        let gates = &trace.gates[item];
        let map = trace.map.channel(item, 0);
        let mut d_gate = vec![T::zero(); k];
        let mut d_map = vec![T::zero(); voxels];
        for c in 0..k {
            let s = f.channel(item, c);
            let d_sgf = grad_out.channel(item, d_sgf_base + c);
            let gc = gates[c];
            let ds = d_shallow.channel_mut(item, c);
            let mut acc = T::zero();
            for v in 0..voxels {
                ds[v] = (gc + map[v]) * d_sgf[v];
                acc += d_sgf[v] * s[v];
                d_map[v] += d_sgf[v] * s[v];
            }
            d_gate[c] = acc;
        }

        // Spatial gate: u = kernel . F + bias, m = sigmoid(u).
        let d_u: Vec<T> = d_map.iter().zip(map).map(|(&dm, &m)| dm * m * (T::one() - m)).collect();
        d_spatial.bias += d_u.iter().copied().sum::<T>();
        for c in 0..2 * k {
            let fc = f.channel(item, c);
            d_spatial.kernel[c] += d_u.iter().zip(fc).map(|(&du, &x)| du * x).sum::<T>();
            let kc = params.spatial.kernel[c];
            let target = if c < k { d_shallow.channel_mut(item, c) } else { d_deep.channel_mut(item, c - k) };
            for (dst, &du) in target.iter_mut().zip(&d_u) {
                *dst += kc * du;
            }
        }

        // Channel gate: z = W1 relu(hidden) + b1, hidden = W2 q + b2.
        let hidden = &trace.hidden[item];
        let q = &trace.pooled[item];
        let d_z: Vec<T> = d_gate.iter().zip(gates).map(|(&dg, &g)| dg * g * (T::one() - g)).collect();
        let mut d_hidden = vec![T::zero(); k];
        for r in 0..k {
            d_channel.b1[r] += d_z[r];
            for j in 0..k {
                let relu = hidden[j].max(T::zero());
                d_channel.w1[r * k + j] += d_z[r] * relu;
                d_hidden[j] += params.channel.w1[r * k + j] * d_z[r];
            }
        }
        for j in 0..k {
            if hidden[j] <= T::zero() {
                d_hidden[j] = T::zero();
            }
        }
        let mut d_q = vec![T::zero(); 2 * k];
        for r in 0..k {
            d_channel.b2[r] += d_hidden[r];
            for c in 0..2 * k {
                d_channel.w2[r * 2 * k + c] += d_hidden[r] * q[c];
                d_q[c] += params.channel.w2[r * 2 * k + c] * d_hidden[r];
            }
        }
        for (c, &dq) in d_q.iter().enumerate() {
            let spread = dq * inv_n;
            let target = if c < k { d_shallow.channel_mut(item, c) } else { d_deep.channel_mut(item, c - k) };
            target.iter_mut().for_each(|v| *v += spread);
        }
    }

    Ok(SgGrads { shallow: d_shallow, deep: d_deep, channel: d_channel, spatial: d_spatial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> FeatureVolume<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVolume::from_vec(shape, data).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize, mode: FusionMode) -> SgModuleParams<f64> {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let channel = ChannelGateParams::new(k, v(2 * k * k), v(k), v(k * k), v(k)).unwrap();
        let spatial = SpatialGateParams::new(v(2 * k), 0.3).unwrap();
        SgModuleParams::new(channel, spatial, mode).unwrap()
    }

    #[test]
    fn concat_constant_fields() {
        let s = FeatureVolume::<f64>::filled([1, 2, 2, 2, 1], 1.0);
        let d = FeatureVolume::<f64>::filled([1, 2, 2, 2, 1], 2.0);
        let f = concat_features(&s, &d).unwrap();
        assert_eq!(f.shape(), [1, 4, 2, 2, 1]);
        for (c, want) in [1.0, 1.0, 2.0, 2.0].into_iter().enumerate() {
            assert!(f.channel(0, c).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn concat_single_channel_per_voxel() {
        let s = FeatureVolume::from_vec([1, 1, 1, 1, 2], vec![0.5f64, -1.0]).unwrap();
        let d = FeatureVolume::from_vec([1, 1, 1, 1, 2], vec![3.0f64, 4.0]).unwrap();
        let f = concat_features(&s, &d).unwrap();
        assert_eq!(f.get(0, 0, 0, 0, 1), -1.0);
        assert_eq!(f.get(0, 1, 0, 0, 1), 4.0);
    }

    #[test]
    fn concat_round_trips_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_volume(&mut rng, [2, 3, 4, 4, 2]);
        let d = random_volume(&mut rng, [2, 3, 4, 4, 2]);
        let f = concat_features(&s, &d).unwrap();
        assert_eq!(f.slice_channels(0..3).unwrap(), s);
        assert_eq!(f.slice_channels(3..6).unwrap(), d);
    }

    #[test]
    fn concat_rejects_mismatch_naming_both_shapes() {
        let s = FeatureVolume::<f64>::zeros([1, 2, 2, 2, 1]);
        let d = FeatureVolume::<f64>::zeros([1, 2, 2, 2, 2]);
        let msg = concat_features(&s, &d).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 2, 2, 1]") && msg.contains("[1, 2, 2, 2, 2]"), "{msg}");
    }

    #[test]
    fn gap_of_constant_and_balanced_channels() {
        let f = FeatureVolume::<f64>::filled([1, 1, 2, 2, 2], 0.75);
        assert_eq!(global_average_pool(&f)[0][0], 0.75);
        let data = (0..8).map(|i| f64::from(i % 2)).collect();
        let f = FeatureVolume::from_vec([1, 1, 2, 2, 2], data).unwrap();
        assert_eq!(global_average_pool(&f)[0][0], 0.5);
    }

    #[test]
    fn gap_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_volume(&mut rng, [1, 2, 3, 3, 2]);
        let q = global_average_pool(&f);
        for c in 0..2 {
            let mut sum = 0.0;
            for h in 0..3 {
                for w in 0..3 {
                    for t in 0..2 {
                        sum += f.get(0, c, h, w, t);
                    }
                }
            }
            assert!((q[0][c] - sum / 18.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_gate_zero_and_saturated() {
        let p = ChannelGateParams::<f64>::zeros(3);
        let g = channel_gate(&[1.0, -2.0, 3.0, 0.5, 0.1, 9.0], &p).unwrap();
        assert!(g.iter().all(|&v| v == 0.5));

        let mut p = ChannelGateParams::<f64>::zeros(2);
        p.w1 = vec![1.0, 0.0, 0.0, 1.0];
        p.b1 = vec![10.0, 10.0];
        let g = channel_gate(&[5.0, -5.0, 1.0, 2.0], &p).unwrap();
        assert!(g.iter().all(|&v| v > 0.9999 && v < 1.0));
    }

    #[test]
    fn channel_gate_matches_hand_rolled() {
        let w2 = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, -0.6];
        let b2 = [0.05, -0.1];
        let w1 = [0.9, -0.3, 0.4, 0.8];
        let b1 = [0.0, 0.2];
        let q = [0.6, -0.8, 0.25, 1.5];
        let p = ChannelGateParams::new(2, w2.to_vec(), b2.to_vec(), w1.to_vec(), b1.to_vec()).unwrap();
        let g = channel_gate(&q, &p).unwrap();

        let h0 = (0.3 * 0.6 + -0.2 * -0.8 + 0.5 * 0.25 + 0.1 * 1.5 + 0.05f64).max(0.0);
        let h1 = (-0.4 * 0.6 + 0.7 * -0.8 + 0.2 * 0.25 + -0.6 * 1.5 - 0.1f64).max(0.0);
        let z0 = 0.9 * h0 - 0.3 * h1;
        let z1 = 0.4 * h0 + 0.8 * h1 + 0.2;
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((g[0] - s(z0)).abs() < 1e-15);
        assert!((g[1] - s(z1)).abs() < 1e-15);
    }

    #[test]
    fn channel_gate_rejects_wrong_length() {
        let p = ChannelGateParams::<f64>::zeros(2);
        assert!(channel_gate(&[1.0, 2.0, 3.0], &p).is_err());
    }

    #[test]
    fn apply_channel_gate_cases() {
        let s = FeatureVolume::<f64>::filled([1, 2, 2, 1, 1], 4.0);
        assert_eq!(apply_channel_gate(&s, &[vec![1.0, 1.0]]).unwrap(), s);
        let zero = apply_channel_gate(&s, &[vec![0.0, 0.0]]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let out = apply_channel_gate(&s, &[vec![0.25, 0.75]]).unwrap();
        assert_eq!(out.channel(0, 0), &[1.0, 1.0]);
        assert_eq!(out.channel(0, 1), &[3.0, 3.0]);
        assert!(apply_channel_gate(&s, &[vec![1.0]]).is_err());
    }

    #[test]
    fn spatial_gate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_volume(&mut rng, [1, 4, 2, 3, 2]);
        let zero = SpatialGateParams::<f64>::zeros(2);
        assert!(spatial_gate(&f, &zero).unwrap().data().iter().all(|&v| v == 0.5));

        let one_hot = SpatialGateParams::new(vec![0.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        let m = spatial_gate(&f, &one_hot).unwrap();
        for (mv, &x) in m.data().iter().zip(f.channel(0, 2)) {
            assert_eq!(*mv, sigmoid(x));
        }

        let kernel = vec![0.4, -1.2, 0.8, 0.3];
        let p = SpatialGateParams::new(kernel.clone(), -0.2).unwrap();
        let m = spatial_gate(&f, &p).unwrap();
        for v in 0..f.voxels() {
            let mut u = -0.2;
            for c in 0..4 {
                u += kernel[c] * f.channel(0, c)[v];
            }
            assert!((m.data()[v] - 1.0 / (1.0 + (-u).exp())).abs() < 1e-15);
        }

        let bad = SpatialGateParams::new(vec![1.0, 1.0], 0.0).unwrap();
        assert!(spatial_gate(&f, &bad).is_err());
    }

    #[test]
    fn apply_spatial_gate_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_volume(&mut rng, [1, 2, 2, 2, 2]);
        let ones = FeatureVolume::filled([1, 1, 2, 2, 2], 1.0);
        assert_eq!(apply_spatial_gate(&s, &ones).unwrap(), s);
        let zeros = FeatureVolume::zeros([1, 1, 2, 2, 2]);
        assert!(apply_spatial_gate(&s, &zeros).unwrap().data().iter().all(|&v| v == 0.0));

        let mut indicator = FeatureVolume::zeros([1, 1, 2, 2, 2]);
        let at = indicator.index(0, 0, 1, 0, 1);
        indicator.data_mut()[at] = 1.0;
        let out = apply_spatial_gate(&s, &indicator).unwrap();
        for c in 0..2 {
            for v in 0..8 {
                let want = if v == at { s.channel(0, c)[v] } else { 0.0 };
                assert_eq!(out.channel(0, c)[v], want);
            }
        }
        assert!(apply_spatial_gate(&s, &FeatureVolume::zeros([1, 1, 2, 2, 1])).is_err());
    }

    #[test]
    fn combine_and_fuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_volume(&mut rng, [1, 2, 2, 2, 1]);
        let zero = FeatureVolume::zeros(a.shape());
        assert_eq!(combine_gates(&a, &zero).unwrap(), a);
        let neg = a.map(|v| -v);
        assert!(combine_gates(&a, &neg).unwrap().data().iter().all(|&v| v == 0.0));

        assert_eq!(fuse_with_decoder(&a, &zero, FusionMode::Add).unwrap(), a);
        let d = random_volume(&mut rng, [1, 2, 2, 2, 1]);
        let cat = fuse_with_decoder(&a, &d, FusionMode::Concatenate).unwrap();
        assert_eq!(cat.channels(), 4);
        assert_eq!(cat.slice_channels(0..2).unwrap(), a);
        assert_eq!(cat.slice_channels(2..4).unwrap(), d);
        let sum = fuse_with_decoder(&a, &d, FusionMode::Add).unwrap();
        for i in 0..a.len() {
            assert_eq!(sum.data()[i], a.data()[i] + d.data()[i]);
        }
    }

    #[test]
    fn half_gates_reconstruct_shallow() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_volume(&mut rng, [1, 3, 2, 2, 2]);
        let sgcf = apply_channel_gate(&s, &[vec![0.5; 3]]).unwrap();
        let sgsf = apply_spatial_gate(&s, &FeatureVolume::filled([1, 1, 2, 2, 2], 0.5)).unwrap();
        assert_eq!(combine_gates(&sgcf, &sgsf).unwrap(), s);
    }

    #[test]
    fn zero_params_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_volume(&mut rng, [2, 2, 3, 3, 2]);
        let d = random_volume(&mut rng, [2, 2, 3, 3, 2]);
        let add = sg_forward(&s, &d, &SgModuleParams::zeros(2, FusionMode::Add)).unwrap();
        for i in 0..s.len() {
            assert_eq!(add.data()[i], s.data()[i] + d.data()[i]);
        }
        let cat = sg_forward(&s, &d, &SgModuleParams::zeros(2, FusionMode::Concatenate)).unwrap();
        assert_eq!(cat, concat_features(&s, &d).unwrap());
    }

    #[test]
    fn forward_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_volume(&mut rng, [1, 2, 3, 3, 2]);
        let d = random_volume(&mut rng, [1, 2, 3, 3, 2]);
        for mode in [FusionMode::Concatenate, FusionMode::Add] {
            let p = random_params(&mut rng, 2, mode);
            let f = concat_features(&s, &d).unwrap();
            let q = global_average_pool(&f);
            let g = channel_gate(&q[0], &p.channel).unwrap();
            let sgcf = apply_channel_gate(&s, &[g]).unwrap();
            let m = spatial_gate(&f, &p.spatial).unwrap();
            let sgsf = apply_spatial_gate(&s, &m).unwrap();
            let sgf = combine_gates(&sgcf, &sgsf).unwrap();
            let manual = fuse_with_decoder(&sgf, &d, mode).unwrap();
            assert_eq!(sg_forward(&s, &d, &p).unwrap(), manual);
        }
    }

    #[test]
    fn sgf_is_linear_in_shallow_with_frozen_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_volume(&mut rng, [1, 2, 2, 3, 2]);
        let g = vec![vec![0.3, 0.9]];
        let m = random_volume(&mut rng, [1, 1, 2, 3, 2]).map(sigmoid);
        let sgf = |x: &FeatureVolume<f64>| {
            let a = apply_channel_gate(x, &g).unwrap();
            let b = apply_spatial_gate(x, &m).unwrap();
            combine_gates(&a, &b).unwrap()
        };
        let scale = 2.5;
        let lhs = sgf(&s.map(|v| v * scale));
        let rhs = sgf(&s).map(|v| v * scale);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn params_validation() {
        assert!(ChannelGateParams::<f64>::new(2, vec![0.0; 7], vec![0.0; 2], vec![0.0; 4], vec![0.0; 2]).is_err());
        assert!(SpatialGateParams::<f64>::new(vec![0.0; 3], 0.0).is_err());
        assert!(SpatialGateParams::<f64>::new(vec![f64::NAN, 0.0], 0.0).is_err());
        let c = ChannelGateParams::<f64>::zeros(2);
        let s = SpatialGateParams::<f64>::zeros(3);
        assert!(SgModuleParams::new(c, s, FusionMode::Add).is_err());
    }
}
