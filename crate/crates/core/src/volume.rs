//! Dense 5-D activation volumes and 3-D label maps.
//!
//! Layout is row-major `(batch, channel, height, width, depth)` with depth
//! varying fastest.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Shape of a [`FeatureVolume`]: `[batch, channels, height, width, depth]`.
pub type Shape5 = [usize; 5];

/// Voxel spacing in millimetres along `(height, width, depth)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0, 1.0, 1.0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape5, value: T) -> Self {
        let len = shape.iter().product();
        FeatureVolume { shape, data: vec![value; len] }
    }

    /// Wraps `data`, checking extent, positivity of every dim, and finiteness.
    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument {
                arg: "shape",
                reason: format!("all dims must be >= 1, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidArgument {
                arg: "data",
                reason: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FeatureVolume::from_vec"));
        }
        Ok(FeatureVolume { shape, data })
    }

    pub(crate) fn from_raw(shape: Shape5, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        FeatureVolume { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Number of voxels in one channel.
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// All channels of batch item `b`, contiguous.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape[1] * self.voxels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.shape[1] * self.voxels();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn index(&self, b: usize, c: usize, h: usize, w: usize, t: usize) -> usize {
        let [_, cs, hs, ws, ts] = self.shape;
        debug_assert!(c < cs && h < hs && w < ws && t < ts);
        (((b * cs + c) * hs + h) * ws + w) * ts + t
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize, t: usize) -> T {
        self.data[self.index(b, c, h, w, t)]
    }

    /// Copies channels `range` of every batch item into a new volume.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.channels() {
            return Err(Error::InvalidArgument {
                arg: "range",
                reason: format!("{range:?} outside 0..{}", self.channels()),
            });
        }
        let v = self.voxels();
        let mut data = Vec::with_capacity(self.batch() * range.len() * v);
        for b in 0..self.batch() {
            let item = self.item(b);
            data.extend_from_slice(&item[range.start * v..range.end * v]);
        }
        let [bs, _, h, w, t] = self.shape;
        Ok(Self::from_raw([bs, range.len(), h, w, t], data))
    }

    /// Extracts batch item `b` as a batch-of-one volume.
    pub fn select_item(&self, b: usize) -> Self {
        let [_, c, h, w, t] = self.shape;
        Self::from_raw([1, c, h, w, t], self.item(b).to_vec())
    }

    /// Stacks batch-of-any volumes with identical per-item shapes.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or(Error::InvalidArgument { arg: "items", reason: "cannot stack an empty list".into() })?;
        let [_, c, h, w, t] = first.shape;
        let mut batch = 0;
        let mut data = Vec::new();
        for item in items {
            if item.shape[1..] != first.shape[1..] {
                return Err(Error::mismatch("stack", first.shape, item.shape));
            }
            batch += item.batch();
            data.extend_from_slice(&item.data);
        }
        Ok(Self::from_raw([batch, c, h, w, t], data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::mismatch(op, self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.shape, data))
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch("add_assign", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureVolume<U> {
        FeatureVolume::from_raw(self.shape, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }
}

/// Integer class map over an `(H, W, T)` grid; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelVolume { dims, data: vec![0; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.contains(&0) || data.len() != expected {
            return Err(Error::InvalidArgument {
                arg: "data",
                reason: format!("dims {dims:?} need {expected} labels, got {}", data.len()),
            });
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, t: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + t
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, t: usize) -> u8 {
        self.data[self.index(h, w, t)]
    }

    pub fn set(&mut self, h: usize, w: usize, t: usize, value: u8) {
        let i = self.index(h, w, t);
        self.data[i] = value;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of voxels equal to `class_id`.
    pub fn mask(&self, class_id: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == class_id).collect()
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&l| l == class_id).count()
    }

    /// Nearest-neighbour downsampling to `dims`; each axis must divide evenly.
    pub fn downsample_to(&self, dims: [usize; 3]) -> Result<Self> {
        let mut factors = [0usize; 3];
        for axis in 0..3 {
            if dims[axis] == 0 || self.dims[axis] % dims[axis] != 0 {
                return Err(Error::mismatch("downsample_labels", self.dims, dims));
            }
            factors[axis] = self.dims[axis] / dims[axis];
        }
        if factors == [1, 1, 1] {
            return Ok(self.clone());
        }
        let mut out = LabelVolume::zeros(dims);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for t in 0..dims[2] {
                    let v = self.get(h * factors[0], w * factors[1], t * factors[2]);
                    out.set(h, w, t, v);
                }
            }
        }
        Ok(out)
    }
}

/// Calls `f` for each in-bounds 6-connected neighbour of `(h, w, t)`.
#[inline]
pub(crate) fn for_each_neighbor6(
    dims: [usize; 3],
    (h, w, t): (usize, usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    if h > 0 {
        f(h - 1, w, t);
    }
    if h + 1 < dims[0] {
        f(h + 1, w, t);
    }
    if w > 0 {
        f(h, w - 1, t);
    }
    if w + 1 < dims[1] {
        f(h, w + 1, t);
    }
    if t > 0 {
        f(h, w, t - 1);
    }
    if t + 1 < dims[2] {
        f(h, w, t + 1);
    }
}
