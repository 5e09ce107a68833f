//! Central finite-difference verification of the analytic gradients of the
//! SG module and every loss, in double precision on tiny inputs.
//!
//! Relative error of a group is `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`,
//! which stays meaningful when individual entries are near zero.

use crate::boundary::{make_targets, OrganTaxonomy, SoftenConfig};
use crate::error::Result;
use crate::losses::{deep_supervision_loss, focal_boundary_loss, segmentation_loss, soft_boundary_loss, LossConfig};
use crate::sg::{
    concat_features, global_average_pool, sg_backward, sg_forward, sg_forward_traced, ChannelGateParams, FusionMode,
    SgModuleParams, SpatialGateParams,
};
use crate::volume::{FeatureVolume, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Perturbs the analytic gradient of the named `component/group`; only
    /// useful to confirm that the check can fail.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 0, step: 1e-4, tolerance: 1e-4, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub component: String,
    pub group: String,
    pub size: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Largest relative error per component.
    pub fn by_component(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(c, _)| *c == e.component) {
                Some((_, m)) => *m = m.max(e.max_rel_error),
                None => out.push((e.component.clone(), e.max_rel_error)),
            }
        }
        out
    }
}

/// `(max abs error, relative error)` between two gradient arrays.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    let rel = if scale > 0.0 { abs / scale } else { abs };
    (abs, rel)
}

/// A named group of inputs and the analytic gradient of the objective with
/// respect to them.
struct Group {
    name: String,
    values: Vec<f64>,
    analytic: Vec<f64>,
}

struct Checker<'a> {
    opts: &'a GradcheckOptions,
    entries: Vec<GradcheckEntry>,
}

impl Checker<'_> {
    /// Perturbs every entry of every group in turn; `f` rebuilds the
    /// objective from the (possibly perturbed) group values.
    fn run(&mut self, component: &str, mut groups: Vec<Group>, f: impl Fn(&[Group]) -> Result<f64>) -> Result<()> {
        let h = self.opts.step;
        for g in 0..groups.len() {
            let mut numeric = Vec::with_capacity(groups[g].values.len());
            for i in 0..groups[g].values.len() {
                let orig = groups[g].values[i];
                groups[g].values[i] = orig + h;
                let plus = f(&groups)?;
                groups[g].values[i] = orig - h;
                let minus = f(&groups)?;
                groups[g].values[i] = orig;
                numeric.push((plus - minus) / (2.0 * h));
            }
            let mut analytic = groups[g].analytic.clone();
            let key = format!("{component}/{}", groups[g].name);
            if self.opts.corrupt.as_deref() == Some(key.as_str()) {
                if let Some(first) = analytic.first_mut() {
                    *first = *first * 1.5 + 1e-3;
                }
            }
            let (max_abs_error, max_rel_error) = compare(&analytic, &numeric);
            self.entries.push(GradcheckEntry {
                component: component.to_string(),
                group: groups[g].name.clone(),
                size: numeric.len(),
                max_abs_error,
                max_rel_error,
                passed: max_rel_error <= self.opts.tolerance,
            });
        }
        Ok(())
    }
}

const K: usize = 2;
const SIDE: usize = 4;
const SHAPE: [usize; 5] = [1, K, SIDE, SIDE, SIDE];

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn volume(shape: [usize; 5], data: &[f64]) -> Result<FeatureVolume<f64>> {
    FeatureVolume::from_vec(shape, data.to_vec())
}

fn sg_params(groups: &[Group], mode: FusionMode) -> Result<SgModuleParams<f64>> {
    let v = |i: usize| groups[i].values.clone();
    SgModuleParams::new(
        ChannelGateParams::new(K, v(2), v(3), v(4), v(5))?,
        SpatialGateParams::new(v(6), groups[7].values[0])?,
        mode,
    )
}

/// Random SG inputs whose channel-gate ReLU inputs stay clear of the kink.
fn sg_inputs(rng: &mut ChaCha8Rng, h: f64) -> Result<Vec<(&'static str, Vec<f64>)>> {
    let n = SHAPE.iter().product();
    loop {
        let inputs = vec![
            ("shallow", uniform(rng, n, 1.0)),
            ("deep", uniform(rng, n, 1.0)),
            ("channel.w2", uniform(rng, 2 * K * K, 1.5)),
            ("channel.b2", uniform(rng, K, 0.5)),
            ("channel.w1", uniform(rng, K * K, 1.5)),
            ("channel.b1", uniform(rng, K, 0.5)),
            ("spatial.kernel", uniform(rng, 2 * K, 1.0)),
            ("spatial.bias", uniform(rng, 1, 0.5)),
        ];
        let features = concat_features(&volume(SHAPE, &inputs[0].1)?, &volume(SHAPE, &inputs[1].1)?)?;
        let q = &global_average_pool(&features)[0];
        let (w2, b2) = (&inputs[2].1, &inputs[3].1);
        // Pre-activations move by at most |w2| * h under a perturbation.
        let clear = (0..K).all(|r| {
            let z: f64 = b2[r] + (0..2 * K).map(|c| w2[r * 2 * K + c] * q[c]).sum::<f64>();
            z.abs() > 100.0 * h
        });
        if clear {
            return Ok(inputs);
        }
    }
}

fn check_sg(checker: &mut Checker, rng: &mut ChaCha8Rng, mode: FusionMode) -> Result<()> {
    let inputs = sg_inputs(rng, checker.opts.step)?;
    let out_channels = match mode {
        FusionMode::Concatenate => 2 * K,
        FusionMode::Add => K,
    };
    let probe_shape = [1, out_channels, SIDE, SIDE, SIDE];
    let probe = volume(probe_shape, &uniform(rng, probe_shape.iter().product(), 1.0))?;
    let mut groups: Vec<Group> = inputs
        .into_iter()
        .map(|(name, values)| Group { name: name.to_string(), values, analytic: Vec::new() })
        .collect();

    let params = sg_params(&groups, mode)?;
    let (_, trace) =
        sg_forward_traced(&volume(SHAPE, &groups[0].values)?, &volume(SHAPE, &groups[1].values)?, &params)?;
    let g = sg_backward(&trace, &params, &probe)?;
    let analytic = [
        g.shallow.into_vec(),
        g.deep.into_vec(),
        g.channel.w2,
        g.channel.b2,
        g.channel.w1,
        g.channel.b1,
        g.spatial.kernel,
        vec![g.spatial.bias],
    ];
    for (group, a) in groups.iter_mut().zip(analytic) {
        group.analytic = a;
    }

    let component = match mode {
        FusionMode::Concatenate => "sg_forward[concatenate]",
        FusionMode::Add => "sg_forward[add]",
    };
    checker.run(component, groups, |gs| {
        let out = sg_forward(&volume(SHAPE, &gs[0].values)?, &volume(SHAPE, &gs[1].values)?, &sg_params(gs, mode)?)?;
        Ok(out.data().iter().zip(probe.data()).map(|(o, p)| o * p).sum())
    })
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: u8) -> Result<LabelVolume> {
    let n = dims.iter().product();
    LabelVolume::from_vec(dims, (0..n).map(|_| rng.random_range(0..classes)).collect())
}

fn logits_group(rng: &mut ChaCha8Rng, n: usize) -> Group {
    Group { name: "logits".into(), values: uniform(rng, n, 3.0), analytic: Vec::new() }
}

fn check_losses(checker: &mut Checker, rng: &mut ChaCha8Rng) -> Result<()> {
    let dims = [SIDE; 3];
    let batch = 2;
    let binary_shape = [batch, 1, SIDE, SIDE, SIDE];
    let n = binary_shape.iter().product();

    let labels = [random_labels(rng, dims, 4)?, random_labels(rng, dims, 4)?];
    let label_refs: Vec<&LabelVolume> = labels.iter().collect();
    let targets: Vec<_> = labels
        .iter()
        .map(|l| make_targets(l, &OrganTaxonomy::default(), &SoftenConfig::with_delta(1.0)))
        .collect::<Result<_>>()?;
    let hard: Vec<&LabelVolume> = targets.iter().map(|t| &t.hard).collect();
    // Random soft targets exercise the loss away from 0/1 targets.
    let soft_random: Vec<Vec<f64>> =
        (0..batch).map(|_| (0..n / batch).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let soft: Vec<&[f64]> = soft_random.iter().map(Vec::as_slice).collect();

    for literal in [false, true] {
        let cfg = LossConfig { literal_paper_form: literal, ..LossConfig::default() };
        let suffix = if literal { "[literal]" } else { "" };

        let mut g = logits_group(rng, n);
        g.analytic = focal_boundary_loss(&volume(binary_shape, &g.values)?, &hard, &cfg)?.grad.into_vec();
        checker.run(&format!("focal_boundary_loss{suffix}"), vec![g], |gs| {
            Ok(focal_boundary_loss(&volume(binary_shape, &gs[0].values)?, &hard, &cfg)?.value)
        })?;

        let mut g = logits_group(rng, n);
        g.analytic = soft_boundary_loss(&volume(binary_shape, &g.values)?, &soft, &cfg)?.grad.into_vec();
        checker.run(&format!("soft_boundary_loss{suffix}"), vec![g], |gs| {
            Ok(soft_boundary_loss(&volume(binary_shape, &gs[0].values)?, &soft, &cfg)?.value)
        })?;
    }

    let seg_shape = [batch, 4, SIDE, SIDE, SIDE];
    let mut g = logits_group(rng, seg_shape.iter().product());
    g.analytic = segmentation_loss(&volume(seg_shape, &g.values)?, &label_refs)?.grad.into_vec();
    checker.run("segmentation_loss", vec![g], |gs| {
        Ok(segmentation_loss(&volume(seg_shape, &gs[0].values)?, &label_refs)?.value)
    })?;

    let aux_shapes = [[batch, 4, SIDE, SIDE, SIDE], [batch, 4, SIDE / 2, SIDE / 2, SIDE / 2]];
    let weights = [0.5, 0.3];
    let mut groups: Vec<Group> = aux_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Group { name: format!("aux.{i}"), ..logits_group(rng, s.iter().product()) })
        .collect();
    let build = |gs: &[Group]| -> Result<Vec<FeatureVolume<f64>>> {
        gs.iter().zip(&aux_shapes).map(|(g, &s)| volume(s, &g.values)).collect()
    };
    let grads = deep_supervision_loss(&build(&groups)?, &label_refs, &weights)?.grad;
    for (group, grad) in groups.iter_mut().zip(grads) {
        group.analytic = grad.into_vec();
    }
    checker
        .run("deep_supervision_loss", groups, |gs| Ok(deep_supervision_loss(&build(gs)?, &label_refs, &weights)?.value))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checker = Checker { opts, entries: Vec::new() };
    check_sg(&mut checker, &mut rng, FusionMode::Concatenate)?;
    check_sg(&mut checker, &mut rng, FusionMode::Add)?;
    check_losses(&mut checker, &mut rng)?;
    let passed = checker.entries.iter().all(|e| e.passed);
    Ok(GradcheckReport {
        seed: opts.seed,
        step: opts.step,
        tolerance: opts.tolerance,
        entries: checker.entries,
        passed,
    })
}
