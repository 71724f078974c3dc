//! Post-processing of recovered volumes and recall/precision scoring.

use crate::error::{Error, Result};
use crate::forward::VolumeEstimate;
use crate::scene::Scene;
use serde::{Deserialize, Serialize};

/// Default lateral clustering / matching radius, pixels.
pub const DEFAULT_LATERAL_TOL: f64 = 2.0;
/// Default axial clustering / matching radius: one dictionary ζ interval.
pub const DEFAULT_AXIAL_TOL: f64 = 2.1;
/// Default fraction of the median cluster flux below which clusters drop.
pub const DEFAULT_FLUX_KEEP_RATIO: f64 = 0.1;

/// A recovered point source, continuous coordinates after centroiding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub x: f64,
    pub y: f64,
    pub zeta: f64,
    pub flux: f64,
}

/// One matched truth/estimate pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub truth_index: usize,
    pub estimate_index: usize,
    pub lateral_distance: f64,
    pub axial_distance: f64,
}

/// Assignment of estimates to ground truth with the derived rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchPair>,
    pub true_positives: usize,
    pub truth_count: usize,
    pub estimate_count: usize,
    pub recall: f64,
    pub precision: f64,
    pub lateral_tol: f64,
    pub axial_tol: f64,
}

/// All voxels above `flux_floor`, reported at voxel centers.
pub fn extract_points(x: &VolumeEstimate, flux_floor: f64) -> Vec<PointEstimate> {
    let mut points = Vec::new();
    for ((w, i, j), &v) in x.values.indexed_iter() {
        if v > flux_floor {
            points.push(PointEstimate {
                x: j as f64,
                y: i as f64,
                zeta: x.zetas[w],
                flux: v,
            });
        }
    }
    points
}

fn linked(a: &PointEstimate, b: &PointEstimate, lateral_radius: f64, axial_radius: f64) -> bool {
    (a.x - b.x).hypot(a.y - b.y) <= lateral_radius && (a.zeta - b.zeta).abs() <= axial_radius
}

fn cluster_pass(points: &[PointEstimate], lateral_radius: f64, axial_radius: f64) -> Vec<PointEstimate> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if linked(&points[i], &points[j], lateral_radius, axial_radius) {
                let ri = find(&mut parent, i);
                let rj = find(&mut parent, j);
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut clusters: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        clusters.entry(r).or_default().push(i);
    }
    clusters
        .values()
        .map(|members| {
            let flux: f64 = members.iter().map(|&i| points[i].flux).sum();
            PointEstimate {
                x: members.iter().map(|&i| points[i].x * points[i].flux).sum::<f64>() / flux,
                y: members.iter().map(|&i| points[i].y * points[i].flux).sum::<f64>() / flux,
                zeta: members.iter().map(|&i| points[i].zeta * points[i].flux).sum::<f64>() / flux,
                flux,
            }
        })
        .collect()
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Merge tightly clustered points into flux-weighted centroids, then drop
/// clusters much fainter than the median cluster.
///
/// Both stages iterate to a fixed point, which makes the whole map idempotent
/// (a second application returns its input unchanged).
pub fn postprocess(
    points: &[PointEstimate],
    lateral_radius: f64,
    axial_radius: f64,
    flux_keep_ratio: f64,
) -> Vec<PointEstimate> {
    let mut current = points.to_vec();
    loop {
        let merged = cluster_pass(&current, lateral_radius, axial_radius);
        let done = merged.len() == current.len();
        current = merged;
        if done {
            break;
        }
    }
    loop {
        if current.is_empty() {
            break;
        }
        let cutoff = flux_keep_ratio * median(current.iter().map(|p| p.flux).collect());
        let kept: Vec<PointEstimate> = current.iter().filter(|p| p.flux >= cutoff).copied().collect();
        let done = kept.len() == current.len();
        current = kept;
        if done {
            break;
        }
    }
    current
}

/// Exact minimum-cost perfect assignment on a square cost matrix
/// (Jonker-Volgenant style shortest augmenting paths). Returns for each row
/// the assigned column.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based potentials; p[j] = row matched to column j
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Cost placed on pairs outside the matching tolerances; dominates any sum of
/// admissible lateral distances so the assignment first maximizes matches.
const FORBIDDEN: f64 = 1e9;

/// Optimally pair estimates with ground truth and compute recall/precision.
///
/// A pair is admissible when it is within both tolerances; among admissible
/// pairings the assignment minimizes total lateral distance. Empty-side rates
/// use the vacuous convention (nothing to find / nothing claimed scores 1).
pub fn match_sources(
    truth: &Scene,
    estimates: &[PointEstimate],
    lateral_tol: f64,
    axial_tol: f64,
) -> Result<MatchReport> {
    if !(lateral_tol > 0.0) || !(axial_tol > 0.0) {
        return Err(Error::domain("matching tolerances must be positive"));
    }
    let nt = truth.sources.len();
    let ne = estimates.len();
    let size = nt.max(ne);
    let mut pairs = Vec::new();
    if size > 0 && nt > 0 && ne > 0 {
        let mut cost = vec![vec![FORBIDDEN; size]; size];
        for (i, t) in truth.sources.iter().enumerate() {
            for (j, e) in estimates.iter().enumerate() {
                let lateral = (t.x - e.x).hypot(t.y - e.y);
                let axial = (t.zeta - e.zeta).abs();
                if lateral <= lateral_tol && axial <= axial_tol {
                    cost[i][j] = lateral;
                }
            }
        }
        let assignment = min_cost_assignment(&cost);
        for (i, &j) in assignment.iter().enumerate() {
            if i < nt && j < ne && cost[i][j] < FORBIDDEN {
                let t = &truth.sources[i];
                let e = &estimates[j];
                pairs.push(MatchPair {
                    truth_index: i,
                    estimate_index: j,
                    lateral_distance: (t.x - e.x).hypot(t.y - e.y),
                    axial_distance: (t.zeta - e.zeta).abs(),
                });
            }
        }
    }
    let tp = pairs.len();
    let recall = if nt == 0 { 1.0 } else { tp as f64 / nt as f64 };
    let precision = if ne == 0 { 1.0 } else { tp as f64 / ne as f64 };
    Ok(MatchReport {
        pairs,
        true_positives: tp,
        truth_count: nt,
        estimate_count: ne,
        recall,
        precision,
        lateral_tol,
        axial_tol,
    })
}

/// Arithmetic mean recall and precision over a batch of reports.
pub fn aggregate_metrics(reports: &[MatchReport]) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(Error::domain("cannot aggregate an empty report list"));
    }
    let n = reports.len() as f64;
    Ok((
        reports.iter().map(|r| r.recall).sum::<f64>() / n,
        reports.iter().map(|r| r.precision).sum::<f64>() / n,
    ))
}

/// F1 score of a report pair of rates; zero when both rates vanish.
pub fn f1_score(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}
