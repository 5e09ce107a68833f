//! Training objectives and their analytic gradients.
//!
//! Every loss is a mean over voxels (and batch items). Probabilities coming
//! out of a sigmoid are clamped to `[epsilon, 1 - epsilon]`; the clamp has zero
//! derivative where it is active.

use crate::boundary::BoundaryTargets;
use crate::error::{Error, Result};
use crate::network::NetworkOutputs;
use crate::scalar::Scalar;
use crate::sg::sigmoid;
use crate::volume::{FeatureVolume, LabelVolume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub seg: f64,
    pub clear: f64,
    pub blurry: f64,
    /// One weight per deep-supervision scale, finest first.
    pub aux: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, clear: 0.5, blurry: 0.5, aux: vec![0.5; 4] }
    }
}

/// Objective applied to the blurry-boundary head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurryLoss {
    /// Soft cross-entropy against Gaussian-softened contours.
    #[default]
    SoftCrossEntropy,
    /// Focal loss against the binary contour (hard-contour ablation).
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    /// Use the printed formulas without logarithms instead of the standard
    /// focal and soft cross-entropy losses.
    pub literal_paper_form: bool,
    pub weights: LossWeights,
    pub epsilon: f64,
    pub blurry_loss: BlurryLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            literal_paper_form: false,
            weights: LossWeights::default(),
            epsilon: 1e-7,
            blurry_loss: BlurryLoss::SoftCrossEntropy,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon must be in (0, 1e-3], got {}", self.epsilon)));
        }
        let w = &self.weights;
        let all = [w.seg, w.clear, w.blurry].into_iter().chain(w.aux.iter().copied());
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weights must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar loss together with its gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

fn check_binary_shapes<T: Scalar>(logits: &FeatureVolume<T>, target_len: usize, op: &'static str) -> Result<()> {
    if logits.channels() != 1 || logits.len() != target_len {
        return Err(Error::mismatch(op, logits.shape(), target_len));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// Clamped probability and the derivative of the clamp-sigmoid chain.
#[inline]
fn clamped_prob(logit: f64, eps: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if p < eps {
        (eps, 0.0)
    } else if p > 1.0 - eps {
        (1.0 - eps, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

/// Focal loss of one voxel and its derivative with respect to the clamped
/// probability.
#[inline]
fn focal_term(p_hat: f64, positive: bool, gamma: f64, literal: bool) -> (f64, f64) {
    let (p_t, sign) = if positive { (p_hat, 1.0) } else { (1.0 - p_hat, -1.0) };
    let miss = 1.0 - p_t;
    let (loss, d_pt) = if literal {
        (miss.powf(gamma + 1.0), -(gamma + 1.0) * miss.powf(gamma))
    } else {
        let log_pt = p_t.ln();
        let weight = miss.powf(gamma);
        let d_weight = if gamma == 0.0 { 0.0 } else { -gamma * miss.powf(gamma - 1.0) };
        (-weight * log_pt, -(d_weight * log_pt + weight / p_t))
    };
    (loss, sign * d_pt)
}

#[inline]
fn soft_term(p_hat: f64, p: f64, literal: bool) -> (f64, f64) {
    if literal {
        (p * (1.0 - p_hat), -p)
    } else {
        let loss = -(p * p_hat.ln() + (1.0 - p) * (1.0 - p_hat).ln());
        (loss, -p / p_hat + (1.0 - p) / (1.0 - p_hat))
    }
}

/// Focal loss evaluated on probabilities; the gradient is with respect to
/// `probs`. Probabilities are clamped like the logit version.
pub fn focal_boundary_loss_probs(probs: &[f64], hard: &LabelVolume, cfg: &LossConfig) -> Result<LossValue<Vec<f64>>> {
    if probs.len() != hard.len() {
        return Err(Error::mismatch("focal_boundary_loss", probs.len(), hard.dims()));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let grad = probs
        .iter()
        .zip(hard.data())
        .map(|(&p, &y)| {
            let (pc, active) = clamp_prob(p, cfg.epsilon);
            let (l, d) = focal_term(pc, y != 0, cfg.gamma, cfg.literal_paper_form);
            total += l;
            if active {
                d / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValue { value: total / n, grad })
}

/// Soft-label loss evaluated on probabilities; gradient with respect to `probs`.
pub fn soft_boundary_loss_probs(probs: &[f64], soft: &[f64], cfg: &LossConfig) -> Result<LossValue<Vec<f64>>> {
    if probs.len() != soft.len() {
        return Err(Error::mismatch("soft_boundary_loss", probs.len(), soft.len()));
    }
    check_soft_range(soft)?;
    let n = probs.len() as f64;
    let mut total = 0.0;
    let grad = probs
        .iter()
        .zip(soft)
        .map(|(&p_hat, &p)| {
            let (pc, active) = clamp_prob(p_hat, cfg.epsilon);
            let (l, d) = soft_term(pc, p, cfg.literal_paper_form);
            total += l;
            if active {
                d / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValue { value: total / n, grad })
}

fn clamp_prob(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, false)
    } else if p > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

fn check_soft_range(soft: &[f64]) -> Result<()> {
    if let Some(bad) = soft.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument {
            arg: "soft_target",
            reason: format!("values must lie in [0, 1], found {bad}"),
        });
    }
    Ok(())
}

/// Focal loss on sigmoid(logits) against binary contour targets.
///
/// `logits` is `(B, 1, H, W, T)` and `hard` holds one binary map per item.
pub fn focal_boundary_loss<T: Scalar>(
    logits: &FeatureVolume<T>,
    hard: &[&LabelVolume],
    cfg: &LossConfig,
) -> Result<LossValue<FeatureVolume<T>>> {
    let total: usize = hard.iter().map(|h| h.len()).sum();
    check_binary_shapes(logits, total, "focal_boundary_loss")?;
    let n = total as f64;
    let targets = hard.iter().flat_map(|h| h.data().iter().map(|&v| v != 0));
    let mut sum = 0.0;
    let mut grad = FeatureVolume::zeros(logits.shape());
    for ((g, &x), y) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets) {
        let (p, dp_dx) = clamped_prob(x.as_f64(), cfg.epsilon);
        let (l, dl_dp) = focal_term(p, y, cfg.gamma, cfg.literal_paper_form);
        sum += l;
        *g = T::of(dl_dp * dp_dx / n);
    }
    Ok(LossValue { value: sum / n, grad })
}

/// Soft-label binary cross-entropy on sigmoid(logits).
pub fn soft_boundary_loss<T: Scalar>(
    logits: &FeatureVolume<T>,
    soft: &[&[f64]],
    cfg: &LossConfig,
) -> Result<LossValue<FeatureVolume<T>>> {
    let total: usize = soft.iter().map(|s| s.len()).sum();
    check_binary_shapes(logits, total, "soft_boundary_loss")?;
    for s in soft {
        check_soft_range(s)?;
    }
    let n = total as f64;
    let targets = soft.iter().flat_map(|s| s.iter().copied());
    let mut sum = 0.0;
    let mut grad = FeatureVolume::zeros(logits.shape());
    for ((g, &x), p) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets) {
        let (p_hat, dp_dx) = clamped_prob(x.as_f64(), cfg.epsilon);
        let (l, dl_dp) = soft_term(p_hat, p, cfg.literal_paper_form);
        sum += l;
        *g = T::of(dl_dp * dp_dx / n);
    }
    Ok(LossValue { value: sum / n, grad })
}

/// Mean voxel-wise multi-class cross-entropy with a stable log-softmax.
pub fn segmentation_loss<T: Scalar>(
    logits: &FeatureVolume<T>,
    labels: &[&LabelVolume],
) -> Result<LossValue<FeatureVolume<T>>> {
    let [b, classes, h, w, t] = logits.shape();
    if labels.len() != b || labels.iter().any(|l| l.dims() != [h, w, t]) {
        let dims: Vec<[usize; 3]> = labels.iter().map(|l| l.dims()).collect();
        return Err(Error::mismatch("segmentation_loss", logits.shape(), dims));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("segmentation_loss"));
    }
    let vox = h * w * t;
    let n = (b * vox) as f64;
    let mut grad = FeatureVolume::zeros(logits.shape());
    let mut sum = 0.0;
    let mut z = vec![0.0f64; classes];
    for (item, label) in labels.iter().enumerate() {
        for v in 0..vox {
            let y = label.data()[v];
            if usize::from(y) >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = logits.channel(item, c)[v].as_f64();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&zc| (zc - max).exp()).sum::<f64>().ln();
            sum += lse - z[usize::from(y)];
            for (c, &zc) in z.iter().enumerate() {
                let soft = (zc - lse).exp();
                let target = if c == usize::from(y) { 1.0 } else { 0.0 };
                grad.channel_mut(item, c)[v] = T::of((soft - target) / n);
            }
        }
    }
    Ok(LossValue { value: sum / n, grad })
}

/// `sum_s weights[s] * segmentation_loss(aux[s], downsample(labels, scale_s))`.
pub fn deep_supervision_loss<T: Scalar>(
    aux: &[FeatureVolume<T>],
    labels: &[&LabelVolume],
    weights: &[f64],
) -> Result<LossValue<Vec<FeatureVolume<T>>>> {
    if weights.len() < aux.len() {
        return Err(Error::Config(format!("{} aux outputs but only {} aux weights", aux.len(), weights.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(aux.len());
    for (logits, &weight) in aux.iter().zip(weights) {
        if weight == 0.0 {
            grads.push(FeatureVolume::zeros(logits.shape()));
            continue;
        }
        let down: Vec<LabelVolume> = labels.iter().map(|l| l.downsample_to(logits.spatial())).collect::<Result<_>>()?;
        let refs: Vec<&LabelVolume> = down.iter().collect();
        let term = segmentation_loss(logits, &refs)?;
        total += weight * term.value;
        let w = T::of(weight);
        grads.push(term.grad.map(|g| g * w));
    }
    Ok(LossValue { value: total, grad: grads })
}

/// Per-term values reported alongside the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub clear: f64,
    pub blurry: f64,
    /// Already weighted by the per-scale aux weights.
    pub aux: f64,
    pub total: f64,
}

/// Gradients of the total loss with respect to every network output.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub seg: FeatureVolume<T>,
    pub aux: Vec<FeatureVolume<T>>,
    pub clear: FeatureVolume<T>,
    pub blurry: FeatureVolume<T>,
}

pub fn total_loss<T: Scalar>(
    outputs: &NetworkOutputs<T>,
    labels: &[&LabelVolume],
    targets: &[&BoundaryTargets],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    if targets.len() != labels.len() {
        return Err(Error::mismatch("total_loss", labels.len(), targets.len()));
    }
    let w = &cfg.weights;
    let mut out = LossBreakdown::default();

    let seg = segmentation_loss(&outputs.seg_logits, labels)?;
    out.seg = seg.value;
    let seg_grad = seg.grad.map(|g| g * T::of(w.seg));

    let clear_grad = if w.clear > 0.0 {
        let hard: Vec<&LabelVolume> = targets.iter().map(|t| &t.hard).collect();
        let term = focal_boundary_loss(&outputs.clear_boundary_logits, &hard, cfg)?;
        out.clear = term.value;
        term.grad.map(|g| g * T::of(w.clear))
    } else {
        FeatureVolume::zeros(outputs.clear_boundary_logits.shape())
    };

    let blurry_grad = if w.blurry > 0.0 {
        let term = match cfg.blurry_loss {
            BlurryLoss::SoftCrossEntropy => {
                let soft: Vec<&[f64]> = targets.iter().map(|t| t.soft.as_slice()).collect();
                soft_boundary_loss(&outputs.blurry_boundary_logits, &soft, cfg)?
            }
            BlurryLoss::Focal => {
                let hard: Vec<LabelVolume> = targets
                    .iter()
                    .zip(labels)
                    .map(|(t, l)| LabelVolume::from_vec(l.dims(), t.soft.iter().map(|&v| u8::from(v >= 0.5)).collect()))
                    .collect::<Result<_>>()?;
                let refs: Vec<&LabelVolume> = hard.iter().collect();
                focal_boundary_loss(&outputs.blurry_boundary_logits, &refs, cfg)?
            }
        };
        out.blurry = term.value;
        term.grad.map(|g| g * T::of(w.blurry))
    } else {
        FeatureVolume::zeros(outputs.blurry_boundary_logits.shape())
    };

    let aux = deep_supervision_loss(&outputs.aux_seg_logits, labels, &w.aux)?;
    out.aux = aux.value;

    out.total = w.seg * out.seg + w.clear * out.clear + w.blurry * out.blurry + out.aux;
    Ok((out, OutputGrads { seg: seg_grad, aux: aux.grad, clear: clear_grad, blurry: blurry_grad }))
}
