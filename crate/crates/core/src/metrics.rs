//! Chamfer distance, F-Score and their reports.
//!
//! Both Chamfer variants use the halved sum of directional means:
//! `CD(P, Q) = (mean_p min_q d(p, q) + mean_q min_p d(q, p)) / 2`, with
//! `d` the Euclidean distance for [`ChamferVariant::L1`] and the squared
//! distance for [`ChamferVariant::L2`].

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::geometry::{Point, PointCloud, SpatialIndex};

/// F-Score threshold in normalized units.
pub const DEFAULT_FSCORE_TAU: f64 = 0.01;

/// Chamfer values are multiplied by this factor in reports.
pub const CD_REPORT_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChamferVariant {
    L1,
    L2,
}

/// Squared distance from every point of `from` to its nearest neighbor in `to`.
pub fn nearest_dist2(from: &[Point], to: &SpatialIndex) -> Vec<f64> {
    from.iter().map(|p| to.nearest(p).1).collect()
}

/// Summed in ascending order, so the result does not depend on point order.
fn directional_mean(d2: &[f64], variant: ChamferVariant) -> f64 {
    let mut d: Vec<f64> = match variant {
        ChamferVariant::L1 => d2.iter().map(|d| d.sqrt()).collect(),
        ChamferVariant::L2 => d2.to_vec(),
    };
    d.sort_unstable_by(f64::total_cmp);
    d.iter().sum::<f64>() / d.len() as f64
}

pub fn chamfer(p: &PointCloud, q: &PointCloud, variant: ChamferVariant) -> Result<f64> {
    chamfer_points(p.points(), q.points(), variant)
}

pub fn chamfer_points(p: &[Point], q: &[Point], variant: ChamferVariant) -> Result<f64> {
    ensure!(!p.is_empty() && !q.is_empty(), "chamfer of an empty cloud");
    let (ip, iq) = (SpatialIndex::from_points(p), SpatialIndex::from_points(q));
    let a = directional_mean(&nearest_dist2(p, &iq), variant);
    let b = directional_mean(&nearest_dist2(q, &ip), variant);
    Ok(0.5 * (a + b))
}

/// Differentiable Chamfer distance between the `n x 3` node `p` and the fixed cloud `q`.
///
/// Nearest neighbors are matched on the current values of `p` and then held
/// fixed, so the gradient is that of the matched-pair expression.
pub fn chamfer_grad(g: &mut Graph, p: Var, q: &PointCloud, variant: ChamferVariant) -> Result<Var> {
    let pv = g.value(p);
    ensure!(pv.rank() == 2 && pv.cols() == 3, "chamfer_grad expects an n x 3 node, got {:?}", pv.shape());
    let p_pts = pv.to_points();
    let iq = SpatialIndex::build(q);
    let ip = SpatialIndex::from_points(&p_pts);
    let nn_pq: Vec<usize> = p_pts.iter().map(|x| iq.nearest(x).0).collect();
    let nn_qp: Vec<usize> = q.points().iter().map(|x| ip.nearest(x).0).collect();

    let qc = g.constant(q.to_array());
    let matched_q = g.gather_rows(qc, &nn_pq)?;
    let d1 = g.sub(p, matched_q)?;
    let matched_p = g.gather_rows(p, &nn_qp)?;
    let d2 = g.sub(matched_p, qc)?;
    let term = |g: &mut Graph, d: Var| -> Result<Var> {
        let per_point = match variant {
            ChamferVariant::L1 => g.row_norm(d)?,
            ChamferVariant::L2 => {
                let s = g.square(d)?;
                g.sum_axis(s, 1)?
            }
        };
        g.mean(per_point)
    };
    let a = term(g, d1)?;
    let b = term(g, d2)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

/// Harmonic mean of precision and recall of neighbors within `tau` (strict).
pub fn fscore(p: &PointCloud, q: &PointCloud, tau: f64) -> Result<f64> {
    ensure!(tau > 0.0, "fscore threshold must be positive");
    ensure!(!p.is_empty() && !q.is_empty(), "fscore of an empty cloud");
    let (ip, iq) = (SpatialIndex::build(p), SpatialIndex::build(q));
    Ok(fscore_from(&nearest_dist2(p.points(), &iq), &nearest_dist2(q.points(), &ip), tau))
}

fn fscore_from(p_to_q: &[f64], q_to_p: &[f64], tau: f64) -> f64 {
    let t2 = tau * tau;
    let precision = p_to_q.iter().filter(|&&d| d < t2).count() as f64 / p_to_q.len() as f64;
    let recall = q_to_p.iter().filter(|&&d| d < t2).count() as f64 / q_to_p.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Raw (unscaled) metrics for one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore_1pct: f64,
}

impl MetricReport {
    /// All three metrics from one pair of nearest-neighbor sweeps.
    pub fn compute(pred: &PointCloud, gt: &PointCloud) -> Result<Self> {
        Self::compute_with_tau(pred, gt, DEFAULT_FSCORE_TAU)
    }

    pub fn compute_with_tau(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<Self> {
        ensure!(!pred.is_empty() && !gt.is_empty(), "metrics of an empty cloud");
        let (ip, ig) = (SpatialIndex::build(pred), SpatialIndex::build(gt));
        let pg = nearest_dist2(pred.points(), &ig);
        let gp = nearest_dist2(gt.points(), &ip);
        Ok(Self {
            cd_l1: 0.5 * (directional_mean(&pg, ChamferVariant::L1) + directional_mean(&gp, ChamferVariant::L1)),
            cd_l2: 0.5 * (directional_mean(&pg, ChamferVariant::L2) + directional_mean(&gp, ChamferVariant::L2)),
            fscore_1pct: fscore_from(&pg, &gp, tau),
        })
    }

    /// Mean of several reports.
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Option<MetricReport> {
        let mut acc = MetricReport::default();
        let mut n = 0usize;
        for r in reports {
            acc.cd_l1 += r.cd_l1;
            acc.cd_l2 += r.cd_l2;
            acc.fscore_1pct += r.fscore_1pct;
            n += 1;
        }
        (n > 0).then(|| MetricReport {
            cd_l1: acc.cd_l1 / n as f64,
            cd_l2: acc.cd_l2 / n as f64,
            fscore_1pct: acc.fscore_1pct / n as f64,
        })
    }

    pub const CSV_HEADER: &'static str = "cd_l1_x1000,cd_l2_x1000,fscore_1pct";

    /// CSV fields with Chamfer values scaled by 1000.
    pub fn csv_fields(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6}",
            self.cd_l1 * CD_REPORT_SCALE,
            self.cd_l2 * CD_REPORT_SCALE,
            self.fscore_1pct
        )
    }
}
