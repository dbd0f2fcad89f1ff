//! Tracking error, visibility detection scores and map-recovery error.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::likelihood::MapFeature;

/// Default radius (m) within which a learned feature may match a true anchor.
pub const MATCH_RADIUS: f64 = 2.0;

/// Visibility decisions are `p >= VISIBILITY_THRESHOLD`.
pub const VISIBILITY_THRESHOLD: f64 = 0.5;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-step Euclidean position errors.
pub fn position_errors(truth: &[[f64; 2]], estimate: &[[f64; 2]]) -> Result<Vec<f64>> {
    if truth.len() != estimate.len() {
        return invalid(format!("track lengths differ: {} vs {}", truth.len(), estimate.len()));
    }
    Ok(truth.iter().zip(estimate).map(|(a, b)| dist(*a, *b)).collect())
}

/// `(rmse, median)` of the per-step position errors.
pub fn position_rmse(truth: &[[f64; 2]], estimate: &[[f64; 2]]) -> Result<(f64, f64)> {
    let mut e = position_errors(truth, estimate)?;
    if e.is_empty() {
        return Ok((0.0, 0.0));
    }
    let rmse = (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt();
    Ok((rmse, median(&mut e)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisibilityScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion-matrix scores of `p >= threshold` against the true flags.
/// Precision and recall with an empty denominator are reported as 1.
pub fn visibility_scores(truth: &[bool], p: &[f64], threshold: f64) -> Result<VisibilityScores> {
    if truth.len() != p.len() {
        return invalid(format!("visibility lengths differ: {} vs {}", truth.len(), p.len()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &pk) in truth.iter().zip(p) {
        match (t, pk >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(VisibilityScores { accuracy: ratio(tp + tn, truth.len()), precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fneg) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapErrorReport {
    /// Mean distance (m) of matched pairs; 0 when nothing matched.
    pub mean_distance: f64,
    /// Per true anchor, the index of its matched learned feature.
    pub assignment: Vec<Option<usize>>,
    pub unmatched_true: usize,
    pub unmatched_learned: usize,
}

/// Matches learned features to true anchors within `radius`. With at most
/// four true anchors the assignment is the exhaustive optimum (most matches,
/// then smallest total distance); otherwise learned features are taken in
/// order of decreasing variance and each claims its nearest free anchor.
pub fn map_error(truth: &[[f64; 2]], learned: &[MapFeature], radius: f64) -> MapErrorReport {
    let assignment = if truth.len() <= 4 { optimal_assignment(truth, learned, radius) } else { greedy_assignment(truth, learned, radius) };
    let matched: Vec<f64> = assignment.iter().enumerate().filter_map(|(t, a)| a.map(|l| dist(truth[t], learned[l].position))).collect();
    let mean_distance = if matched.is_empty() { 0.0 } else { matched.iter().sum::<f64>() / matched.len() as f64 };
    MapErrorReport {
        mean_distance,
        unmatched_true: truth.len() - matched.len(),
        unmatched_learned: learned.len() - matched.len(),
        assignment,
    }
}

fn greedy_assignment(truth: &[[f64; 2]], learned: &[MapFeature], radius: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..learned.len()).collect();
    order.sort_by(|&a, &b| learned[b].variance.total_cmp(&learned[a].variance).then(a.cmp(&b)));
    let mut out = vec![None; truth.len()];
    for l in order {
        let best = (0..truth.len())
            .filter(|&t| out[t].is_none())
            .map(|t| (t, dist(truth[t], learned[l].position)))
            .filter(|&(_, d)| d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((t, _)) = best {
            out[t] = Some(l);
        }
    }
    out
}

fn optimal_assignment(truth: &[[f64; 2]], learned: &[MapFeature], radius: f64) -> Vec<Option<usize>> {
    fn search(
        t: usize,
        truth: &[[f64; 2]],
        learned: &[MapFeature],
        radius: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        cost: (usize, f64),
        best: &mut ((usize, f64), Vec<Option<usize>>),
    ) {
        if t == truth.len() {
            let better = cost.0 > best.0 .0 || (cost.0 == best.0 .0 && cost.1 < best.0 .1);
            if better {
                *best = (cost, cur.clone());
            }
            return;
        }
        cur.push(None);
        search(t + 1, truth, learned, radius, used, cur, cost, best);
        cur.pop();
        for l in 0..learned.len() {
            let d = dist(truth[t], learned[l].position);
            if used[l] || d > radius {
                continue;
            }
            used[l] = true;
            cur.push(Some(l));
            search(t + 1, truth, learned, radius, used, cur, (cost.0 + 1, cost.1 + d), best);
            cur.pop();
            used[l] = false;
        }
    }
    let mut best = ((0, 0.0), vec![None; truth.len()]);
    let mut used = vec![false; learned.len()];
    search(0, truth, learned, radius, &mut used, &mut Vec::new(), (0, 0.0), &mut best);
    best.1
}

/// Distance from the true anchor to the nearest learned feature.
pub fn nearest_feature_distance(anchor: [f64; 2], learned: &[MapFeature]) -> f64 {
    learned.iter().map(|f| dist(anchor, f.position)).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BsMetrics {
    pub visibility: VisibilityScores,
    pub map: Option<MapErrorReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub position_rmse: f64,
    pub position_median: f64,
    pub per_bs: Vec<BsMetrics>,
    /// Mean error on steps where some BS has no LOS over the mean error on
    /// the remaining steps; `None` when either set is empty.
    pub blocked_error_ratio: Option<f64>,
}

/// Full report. `flags` is `[k][j]`, `visibility` is `[k][j]`; both aligned
/// with the tracks. `maps` pairs the true anchors and learned features per BS.
pub fn evaluate(
    truth: &[[f64; 2]],
    estimate: &[[f64; 2]],
    flags: &[Vec<bool>],
    visibility: &[Vec<f64>],
    maps: Option<(&[Vec<[f64; 2]>], &[Vec<MapFeature>])>,
) -> Result<MetricsReport> {
    let errors = position_errors(truth, estimate)?;
    let (rmse, med) = position_rmse(truth, estimate)?;
    if flags.len() != truth.len() || visibility.len() != truth.len() {
        return invalid("visibility rows do not match the track length");
    }
    let j_count = flags.first().map_or(0, |r| r.len());
    if flags.iter().any(|r| r.len() != j_count) || visibility.iter().any(|r| r.len() != j_count) {
        return invalid("visibility rows have inconsistent BS counts");
    }
    let mut per_bs = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let t: Vec<bool> = flags.iter().map(|r| r[j]).collect();
        let p: Vec<f64> = visibility.iter().map(|r| r[j]).collect();
        let map = match maps {
            Some((anchors, learned)) => {
                let (a, l) = (anchors.get(j).map_or(&[][..], |v| v), learned.get(j).map_or(&[][..], |v| v));
                Some(map_error(a, l, MATCH_RADIUS))
            }
            None => None,
        };
        per_bs.push(BsMetrics { visibility: visibility_scores(&t, &p, VISIBILITY_THRESHOLD)?, map });
    }
    let (mut blocked, mut clear) = (Vec::new(), Vec::new());
    for (e, f) in errors.iter().zip(flags) {
        if f.iter().all(|&x| x) { clear.push(*e) } else { blocked.push(*e) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let blocked_error_ratio = (!blocked.is_empty() && !clear.is_empty() && mean(&clear) > 0.0).then(|| mean(&blocked) / mean(&clear));
    Ok(MetricsReport { position_rmse: rmse, position_median: med, per_bs, blocked_error_ratio })
}
