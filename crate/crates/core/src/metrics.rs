//! Overlap and surface-distance metrics.

use crate::error::{Error, Result};
use crate::volume::{for_each_neighbor6, LabelVolume, Spacing};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Dice similarity of the `class_id` masks; 1.0 when both are empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<f64> {
    check_dims(pred, gt, "dsc")?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p == class_id, g == class_id);
        a += usize::from(ip);
        b += usize::from(ig);
        both += usize::from(ip && ig);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

fn check_dims(pred: &LabelVolume, gt: &LabelVolume, op: &'static str) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::mismatch(op, pred.dims(), gt.dims()));
    }
    Ok(())
}

/// Mask voxels with at least one 6-neighbour outside the mask; the volume
/// border counts as outside.
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let idx = |h: usize, w: usize, t: usize| (h * dims[1] + w) * dims[2] + t;
    let mut out = Vec::new();
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for t in 0..dims[2] {
                if !mask[idx(h, w, t)] {
                    continue;
                }
                let on_border = h == 0 || w == 0 || t == 0 || h + 1 == dims[0] || w + 1 == dims[1] || t + 1 == dims[2];
                let mut exposed = on_border;
                if !exposed {
                    for_each_neighbor6(dims, (h, w, t), |a, b, c| exposed |= !mask[idx(a, b, c)]);
                }
                if exposed {
                    out.push([h, w, t]);
                }
            }
        }
    }
    out
}

/// Euclidean distance in millimetres between two voxel centres.
#[inline]
pub fn voxel_distance(a: [usize; 3], b: [usize; 3], spacing: &Spacing) -> f64 {
    let s = spacing.0;
    let dh = (a[0] as f64 - b[0] as f64) * s[0];
    let dw = (a[1] as f64 - b[1] as f64) * s[1];
    let dt = (a[2] as f64 - b[2] as f64) * s[2];
    (dh * dh + dw * dw + dt * dt).sqrt()
}

/// Nearest-neighbour queries against a point set sorted along the first axis.
struct SweepIndex<'a> {
    points: Vec<([usize; 3], f64)>,
    spacing: &'a Spacing,
}

impl<'a> SweepIndex<'a> {
    fn new(points: &[[usize; 3]], spacing: &'a Spacing) -> Self {
        let mut points: Vec<([usize; 3], f64)> = points.iter().map(|&p| (p, p[0] as f64 * spacing.0[0])).collect();
        points.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        SweepIndex { points, spacing }
    }

    /// Exact minimum of [`voxel_distance`] over the set. A candidate is only
    /// skipped when its first-axis gap alone already exceeds the best distance.
    fn nearest(&self, q: [usize; 3]) -> f64 {
        let key = q[0] as f64 * self.spacing.0[0];
        let start = self.points.partition_point(|p| p.1 < key);
        let mut best = f64::INFINITY;
        let slack = |best: f64| best * (1.0 + 1e-12) + 1e-12;
        for p in &self.points[start..] {
            if p.1 - key > slack(best) {
                break;
            }
            best = best.min(voxel_distance(q, p.0, self.spacing));
        }
        for p in self.points[..start].iter().rev() {
            if key - p.1 > slack(best) {
                break;
            }
            best = best.min(voxel_distance(q, p.0, self.spacing));
        }
        best
    }
}

fn mean_nearest(from: &[[usize; 3]], to: &[[usize; 3]], spacing: &Spacing) -> f64 {
    let index = SweepIndex::new(to, spacing);
    from.iter().map(|&p| index.nearest(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric average surface distance in millimetres: the mean of the two
/// directed mean nearest-surface distances. `None` when either surface is
/// empty.
pub fn asd(pred: &LabelVolume, gt: &LabelVolume, class_id: u8, spacing: &Spacing) -> Result<Option<f64>> {
    check_dims(pred, gt, "asd")?;
    if spacing.0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument {
            arg: "spacing",
            reason: format!("must be positive, got {:?}", spacing.0),
        });
    }
    let dims = pred.dims();
    let sp = surface_voxels(&pred.mask(class_id), dims);
    let sg = surface_voxels(&gt.mask(class_id), dims);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    Ok(Some((mean_nearest(&sp, &sg, spacing) + mean_nearest(&sg, &sp, spacing)) / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    /// `None` when either surface is empty.
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub per_class: BTreeMap<u8, ClassMetrics>,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: &Spacing,
    classes: &[u8],
) -> Result<CaseMetrics> {
    let mut per_class = BTreeMap::new();
    for &c in classes {
        per_class.insert(c, ClassMetrics { dsc: dsc(pred, gt, c)?, asd: asd(pred, gt, c, spacing)? });
    }
    Ok(CaseMetrics { case_id: case_id.to_string(), per_class })
}

/// Mean and population standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Number of cases contributing a defined value.
    pub count: usize,
    /// Number of cases where the metric was undefined.
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        if defined.is_empty() {
            return Summary { mean: None, std: None, count: 0, undefined };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary { mean: Some(mean), std: Some(var.sqrt()), count: defined.len(), undefined }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub dsc: Summary,
    pub asd: Summary,
}

/// Per-class aggregate over cases plus the per-case rows it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub per_class: BTreeMap<u8, ClassSummary>,
    /// Mean of the per-class mean DSC values.
    pub mean_dsc: f64,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let mut classes: Vec<u8> = cases.iter().flat_map(|c| c.per_class.keys().copied()).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut per_class = BTreeMap::new();
        for c in classes {
            let rows = cases.iter().filter_map(|case| case.per_class.get(&c));
            let dsc = Summary::of(rows.clone().map(|m| Some(m.dsc)));
            let asd = Summary::of(rows.map(|m| m.asd));
            per_class.insert(c, ClassSummary { dsc, asd });
        }
        let means: Vec<f64> = per_class.values().filter_map(|s| s.dsc.mean).collect();
        let mean_dsc = if means.is_empty() { 0.0 } else { means.iter().sum::<f64>() / means.len() as f64 };
        MetricsReport { cases, per_class, mean_dsc }
    }

    /// One row per case per class: `case_id,class,dsc,asd` (ASD empty when
    /// undefined).
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
        w.write_record(["case_id", "class", "dsc", "asd"]).map_err(Error::csv(path))?;
        for case in &self.cases {
            for (class, m) in &case.per_class {
                let asd = m.asd.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([case.case_id.clone(), class.to_string(), m.dsc.to_string(), asd])
                    .map_err(Error::csv(path))?;
            }
        }
        w.flush().map_err(Error::io(path))?;
        Ok(())
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(Error::io(path))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self).map_err(Error::json(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(dims: [usize; 3], on: &[[usize; 3]], class: u8) -> LabelVolume {
        let mut l = LabelVolume::zeros(dims);
        for p in on {
            l.set(p[0], p[1], p[2], class);
        }
        l
    }

    #[test]
    fn dsc_closed_forms() {
        let a = labels([4, 4, 1], &[[0, 0, 0], [0, 1, 0]], 1);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        let b = labels([4, 4, 1], &[[3, 3, 0], [3, 2, 0]], 1);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
        let c = labels([4, 4, 1], &[[0, 0, 0], [2, 2, 0]], 1);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dsc(&a, &b, 2).unwrap(), 1.0);
        assert!(dsc(&a, &LabelVolume::zeros([4, 4, 2]), 1).is_err());
    }

    #[test]
    fn surface_of_cube_and_point() {
        let mut mask = vec![false; 125];
        for h in 1..4 {
            for w in 1..4 {
                for t in 1..4 {
                    mask[(h * 5 + w) * 5 + t] = true;
                }
            }
        }
        let s = surface_voxels(&mask, [5, 5, 5]);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));

        let mut point = vec![false; 27];
        point[13] = true;
        assert_eq!(surface_voxels(&point, [3, 3, 3]), vec![[1, 1, 1]]);
        assert!(surface_voxels(&[false; 8], [2, 2, 2]).is_empty());
    }

    #[test]
    fn full_volume_is_all_surface_via_border() {
        let s = surface_voxels(&[true; 27], [3, 3, 3]);
        assert_eq!(s.len(), 26);
    }

    #[test]
    fn asd_closed_forms() {
        let sp = Spacing::default();
        let a = labels([8, 3, 3], &[[1, 1, 1]], 1);
        let b = labels([8, 3, 3], &[[4, 1, 1]], 1);
        assert_eq!(asd(&a, &b, 1, &sp).unwrap(), Some(3.0));
        assert_eq!(asd(&a, &a, 1, &sp).unwrap(), Some(0.0));
        assert_eq!(asd(&a, &b, 2, &sp).unwrap(), None);
        let scaled = Spacing([0.5, 1.0, 2.0]);
        assert_eq!(asd(&a, &b, 1, &scaled).unwrap(), Some(1.5));
        assert!(asd(&a, &b, 1, &Spacing([0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn evaluate_identical_and_absent() {
        let a = labels([5, 5, 5], &[[1, 1, 1], [1, 2, 1], [3, 3, 3]], 2);
        let m = evaluate_case("c0", &a, &a, &Spacing::default(), &[1, 2]).unwrap();
        assert_eq!(m.per_class[&2], ClassMetrics { dsc: 1.0, asd: Some(0.0) });
        assert_eq!(m.per_class[&1], ClassMetrics { dsc: 1.0, asd: None });
    }

    #[test]
    fn summary_skips_undefined() {
        let s = Summary::of([Some(1.0), None, Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.std, Some(1.0));
        assert_eq!((s.count, s.undefined), (2, 1));
        assert_eq!(Summary::of([None]).mean, None);
    }
}
