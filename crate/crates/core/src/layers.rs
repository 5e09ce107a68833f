//! Dense 3-D kernels with hand-written backward passes.
//!
//! Convolutions are stride-1 with "same" zero padding and lower to GEMM
//! through an im2col buffer built for a slab of `h` rows at a time. Slabs are
//! processed in parallel, but every reduction is summed in slab order so the
//! result does not depend on the thread count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::FeatureVolume;
use rayon::prelude::*;

/// Target number of im2col columns per slab.
const SLAB_COLUMNS: usize = 4096;

fn slabs(dims: [usize; 3]) -> Vec<(usize, usize)> {
    let plane = dims[1] * dims[2];
    let rows = (SLAB_COLUMNS / plane.max(1)).max(1);
    (0..dims[0]).step_by(rows).map(|h0| (h0, (h0 + rows).min(dims[0]))).collect()
}

/// Fills `col` (`cin*k^3` rows by `(h1-h0)*W*D` columns) for rows `h0..h1`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], dims: [usize; 3], cin: usize, k: usize, h0: usize, h1: usize, col: &mut [T]) {
    let [hs, ws, ds] = dims;
    let pad = (k / 2) as isize;
    let n = (h1 - h0) * ws * ds;
    let vox = hs * ws * ds;
    let mut r = 0;
    for c in 0..cin {
        let xc = &x[c * vox..(c + 1) * vox];
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = &mut col[r * n..(r + 1) * n];
                    r += 1;
                    let off_t = e as isize - pad;
                    // Valid output range along depth for this tap.
                    let t_lo = (-off_t).max(0) as usize;
                    let t_hi = ((ds as isize - off_t).min(ds as isize)).max(0) as usize;
                    for hh in h0..h1 {
                        let sh = hh as isize + a as isize - pad;
                        for w in 0..ws {
                            let sw = w as isize + b as isize - pad;
                            let dst = &mut row[((hh - h0) * ws + w) * ds..((hh - h0) * ws + w + 1) * ds];
                            if sh < 0 || sh >= hs as isize || sw < 0 || sw >= ws as isize || t_lo >= t_hi {
                                dst.fill(T::zero());
                                continue;
                            }
                            let base = (sh as usize * ws + sw as usize) * ds;
                            dst[..t_lo].fill(T::zero());
                            let s_lo = (t_lo as isize + off_t) as usize;
                            let s_hi = (t_hi as isize + off_t) as usize;
                            dst[t_lo..t_hi].copy_from_slice(&xc[base + s_lo..base + s_hi]);
                            dst[t_hi..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Shape check shared by the convolution entry points.
fn check_conv<T: Scalar>(x: &FeatureVolume<T>, weight: &[T], cout: usize, k: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument {
            arg: "kernel_size",
            reason: format!("must be odd for same padding, got {k}"),
        });
    }
    let taps = x.channels() * k * k * k;
    if weight.len() != cout * taps {
        return Err(Error::mismatch("conv3d weight", weight.len(), [cout, x.channels(), k, k, k]));
    }
    Ok(taps)
}

/// `y[o] = bias[o] + sum_{c, tap} w[o, c, tap] * x[c](v + tap - k/2)`.
///
/// `weight` is `[cout, cin, k, k, k]` row-major.
pub fn conv3d_forward<T: Scalar>(
    x: &FeatureVolume<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
) -> Result<FeatureVolume<T>> {
    let taps = check_conv(x, weight, cout, k)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::mismatch("conv3d bias", b.len(), cout));
        }
    }
    let [batch, cin, h, w, d] = x.shape();
    let dims = [h, w, d];
    let vox = h * w * d;
    let mut out = FeatureVolume::zeros([batch, cout, h, w, d]);
    for item in 0..batch {
        let xi = x.item(item);
        let yi = out.item_mut(item);
        if k == 1 {
            T::gemm(
                cout,
                cin,
                vox,
                T::one(),
                weight,
                (cin as isize, 1),
                xi,
                (vox as isize, 1),
                T::zero(),
                yi,
                (vox as isize, 1),
            );
        } else {
            let parts: Vec<(usize, Vec<T>)> = slabs(dims)
                .into_par_iter()
                .map(|(h0, h1)| {
                    let n = (h1 - h0) * w * d;
                    let mut col = vec![T::zero(); taps * n];
                    im2col(xi, dims, cin, k, h0, h1, &mut col);
                    let mut y = vec![T::zero(); cout * n];
                    T::gemm(
                        cout,
                        taps,
                        n,
                        T::one(),
                        weight,
                        (taps as isize, 1),
                        &col,
                        (n as isize, 1),
                        T::zero(),
                        &mut y,
                        (n as isize, 1),
                    );
                    (h0 * w * d, y)
                })
                .collect();
            for (offset, y) in parts {
                let n = y.len() / cout;
                for o in 0..cout {
                    yi[o * vox + offset..o * vox + offset + n].copy_from_slice(&y[o * n..(o + 1) * n]);
                }
            }
        }
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                yi[o * vox..(o + 1) * vox].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub struct ConvGrads<T> {
    pub input: FeatureVolume<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// `[cout, cin, k^3]` -> `[cin, cout, k^3]` with every tap mirrored.
fn flip_transpose<T: Scalar>(weight: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let k3 = k * k * k;
    let mut out = vec![T::zero(); weight.len()];
    for o in 0..cout {
        for c in 0..cin {
            for tap in 0..k3 {
                out[(c * cout + o) * k3 + (k3 - 1 - tap)] = weight[(o * cin + c) * k3 + tap];
            }
        }
    }
    out
}

pub fn conv3d_backward<T: Scalar>(
    x: &FeatureVolume<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    grad_out: &FeatureVolume<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let taps = check_conv(x, weight, cout, k)?;
    let [batch, cin, h, w, d] = x.shape();
    if grad_out.shape() != [batch, cout, h, w, d] {
        return Err(Error::mismatch("conv3d_backward", grad_out.shape(), [batch, cout, h, w, d]));
    }
    let dims = [h, w, d];
    let vox = h * w * d;

    let mut d_bias = vec![T::zero(); cout];
    for item in 0..batch {
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += grad_out.channel(item, o).iter().copied().sum::<T>();
        }
    }

    let mut d_weight = vec![T::zero(); cout * taps];
    for item in 0..batch {
        let xi = x.item(item);
        let gi = grad_out.item(item);
        if k == 1 {
            // dW = dY (cout x vox) * X^T (vox x cin)
            T::gemm(
                cout,
                vox,
                cin,
                T::one(),
                gi,
                (vox as isize, 1),
                xi,
                (1, vox as isize),
                T::one(),
                &mut d_weight,
                (cin as isize, 1),
            );
            continue;
        }
        let partials: Vec<Vec<T>> = slabs(dims)
            .into_par_iter()
            .map(|(h0, h1)| {
                let n = (h1 - h0) * w * d;
                let mut col = vec![T::zero(); taps * n];
                im2col(xi, dims, cin, k, h0, h1, &mut col);
                let mut dw = vec![T::zero(); cout * taps];
                let g = &gi[h0 * w * d..];
                T::gemm(
                    cout,
                    n,
                    taps,
                    T::one(),
                    g,
                    (vox as isize, 1),
                    &col,
                    (1, n as isize),
                    T::zero(),
                    &mut dw,
                    (taps as isize, 1),
                );
                dw
            })
            .collect();
        for dw in partials {
            for (acc, v) in d_weight.iter_mut().zip(dw) {
                *acc += v;
            }
        }
    }

    let d_input = if need_input_grad {
        let flipped = flip_transpose(weight, cout, cin, k);
        conv3d_forward(grad_out, &flipped, None, cin, k)?
    } else {
        FeatureVolume::zeros(x.shape())
    };

    Ok(ConvGrads { input: d_input, weight: d_weight, bias: d_bias })
}

pub fn relu_inplace<T: Scalar>(x: &mut FeatureVolume<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Scalar>(output: &FeatureVolume<T>, grad: &mut FeatureVolume<T>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

fn check_factor(dims: [usize; 3], factor: usize) -> Result<()> {
    if factor == 0 || dims.iter().any(|&d| d % factor != 0) {
        return Err(Error::Indivisible { dims, required: factor, factor, exponent: 1 });
    }
    Ok(())
}

/// Max pooling with a cubic window of side `factor` and matching stride.
/// Also returns, per output voxel, the flat input offset of the winner.
pub fn max_pool3d<T: Scalar>(x: &FeatureVolume<T>, factor: usize) -> Result<(FeatureVolume<T>, Vec<u32>)> {
    let [b, c, h, w, d] = x.shape();
    check_factor([h, w, d], factor)?;
    let (oh, ow, od) = (h / factor, w / factor, d / factor);
    let mut out = FeatureVolume::zeros([b, c, oh, ow, od]);
    let mut argmax = vec![0u32; out.len()];
    let mut i = 0;
    for item in 0..b {
        for ch in 0..c {
            let src = x.channel(item, ch);
            let base = (item * c + ch) * h * w * d;
            for ph in 0..oh {
                for pw in 0..ow {
                    for pd in 0..od {
                        let mut best = T::neg_infinity();
                        let mut best_at = 0;
                        for a in 0..factor {
                            for bb in 0..factor {
                                let row = ((ph * factor + a) * w + pw * factor + bb) * d + pd * factor;
                                for e in 0..factor {
                                    let v = src[row + e];
                                    if v > best {
                                        best = v;
                                        best_at = row + e;
                                    }
                                }
                            }
                        }
                        out.data_mut()[i] = best;
                        argmax[i] = (base + best_at) as u32;
                        i += 1;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool3d_backward<T: Scalar>(
    input_shape: [usize; 5],
    argmax: &[u32],
    grad_out: &FeatureVolume<T>,
) -> FeatureVolume<T> {
    let mut dx = FeatureVolume::zeros(input_shape);
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[at as usize] += g;
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor on every spatial axis.
pub fn upsample_nearest<T: Scalar>(x: &FeatureVolume<T>, factor: usize) -> FeatureVolume<T> {
    let [b, c, h, w, d] = x.shape();
    let (uh, uw, ud) = (h * factor, w * factor, d * factor);
    let mut out = FeatureVolume::zeros([b, c, uh, uw, ud]);
    for item in 0..b {
        for ch in 0..c {
            let src = x.channel(item, ch);
            let dst = out.channel_mut(item, ch);
            for hh in 0..uh {
                for ww in 0..uw {
                    let srow = &src[((hh / factor) * w + ww / factor) * d..][..d];
                    let drow = &mut dst[(hh * uw + ww) * ud..][..ud];
                    for (t, v) in drow.iter_mut().enumerate() {
                        *v = srow[t / factor];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(grad_out: &FeatureVolume<T>, factor: usize) -> FeatureVolume<T> {
    let [b, c, uh, uw, ud] = grad_out.shape();
    let (h, w, d) = (uh / factor, uw / factor, ud / factor);
    let mut dx = FeatureVolume::zeros([b, c, h, w, d]);
    for item in 0..b {
        for ch in 0..c {
            let src = grad_out.channel(item, ch);
            let dst = dx.channel_mut(item, ch);
            for hh in 0..uh {
                for ww in 0..uw {
                    let srow = &src[(hh * uw + ww) * ud..][..ud];
                    let drow = &mut dst[((hh / factor) * w + ww / factor) * d..][..d];
                    for (t, &g) in srow.iter().enumerate() {
                        drow[t / factor] += g;
                    }
                }
            }
        }
    }
    dx
}
