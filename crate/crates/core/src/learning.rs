//! EM over the neural map parameters `theta` and the calibration `chi`.
//!
//! The E-step runs the tracker under the current parameters and keeps, per
//! step, a small equal-weight subset of the beliefs. The M-step ascends the
//! surrogate
//!
//! ```text
//! Q(theta) = sum_k sum_j (1/P) sum_p [ p_kj log l(z_kj; r=1, x_p, gamma_p, eta_p)
//!                                   + (1 - p_kj) log l(z_kj; r=0, x_p, eta_p) ]
//! ```
//!
//! on those frozen snapshots with Adam. Each EM pass raises the evidence
//! lower bound whose auxiliary density is the tracker's belief; only `Q` is
//! computed. The M-step returns the best iterate it visits, so `Q` never
//! decreases on the snapshots it was computed from.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::{Filter, FilterConfig, FilterModels, InvariantReport, Snapshot, StateEstimates};
use crate::likelihood::{likelihood_sensitivities, log_likelihood_pair, CovarianceParams, MapFeature};
use crate::models::MtState;
use crate::neural::{AdamState, FeatureGrad, MapArchitecture, NeuralMap};
use crate::parallel;
use crate::scenario::MeasurementFrame;
use crate::signal::{ResponseModel, MIN_DELAY, SPEED_OF_LIGHT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    /// Segment length k0; `None` learns on the full track.
    pub segment: Option<usize>,
    pub em_iterations: usize,
    pub adam_steps: usize,
    pub learning_rate: f64,
    pub chi_learning_rate: f64,
    /// Use the retained particle subset (otherwise every snapshot particle).
    pub use_subset: bool,
    /// Replace particle sums by MMSE point estimates.
    pub use_mmse_points: bool,
    /// Condition on ground-truth MT states.
    pub supervised: bool,
    /// Alternate calibration updates with map updates.
    pub learn_chi: bool,
    /// Grid spacing (m) of the scan initialization run before the first
    /// M-step; `None` keeps the map as given.
    pub scan_spacing: Option<f64>,
    /// The scan uses every n-th Q term.
    pub scan_stride: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            segment: None,
            em_iterations: 20,
            adam_steps: 100,
            learning_rate: 1e-3,
            chi_learning_rate: 1e-3,
            use_subset: true,
            use_mmse_points: false,
            supervised: false,
            learn_chi: false,
            scan_spacing: None,
            scan_stride: 1,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment == Some(0) {
            return invalid("segment length k0 must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.chi_learning_rate > 0.0) {
            return invalid("learning rates must be positive");
        }
        if self.scan_stride == 0 {
            return invalid("scan stride must be at least 1");
        }
        if self.scan_spacing.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return invalid("scan spacing must be positive");
        }
        Ok(())
    }

    /// Phases per EM iteration (map, plus calibration when enabled).
    pub fn phases(&self) -> usize {
        1 + self.learn_chi as usize
    }
}

/// Contiguous 1-based inclusive windows covering `1..=k_total`.
pub fn segment_scheduler(k_total: usize, k0: Option<usize>) -> Vec<(usize, usize)> {
    if k_total == 0 {
        return Vec::new();
    }
    let step = k0.unwrap_or(k_total).max(1);
    (1..=k_total).step_by(step).map(|s| (s, (s + step - 1).min(k_total))).collect()
}

/// Snapshots with every MT entry replaced by the ground-truth state of the
/// same step. `truth` is indexed by step (`truth[0]` is the start).
pub fn supervised_condition(snapshots: &[Snapshot], truth: &[MtState]) -> Result<Vec<Snapshot>> {
    snapshots
        .iter()
        .map(|s| {
            let x = *truth.get(s.k).ok_or_else(|| Error::InvalidArgument(format!("no ground truth for step {}", s.k)))?;
            let mut out = s.clone();
            out.mt.iter_mut().for_each(|m| *m = x);
            out.estimate.mt = x;
            Ok(out)
        })
        .collect()
}

/// One stacked tuple entering Q with its weight `1/P`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QPoint {
    pub k: usize,
    pub j: usize,
    pub visibility: f64,
    pub mt: MtState,
    pub gamma: f64,
    pub eta: f64,
    pub weight: f64,
}

/// Flattens snapshots into Q terms: either every retained particle or the
/// MMSE point per step.
pub fn q_points(snapshots: &[Snapshot], use_mmse_points: bool) -> Vec<QPoint> {
    let mut out = Vec::new();
    for s in snapshots {
        for j in 0..s.visibility.len() {
            let vis = s.visibility[j].clamp(0.0, 1.0);
            if use_mmse_points {
                let e: &StateEstimates = &s.estimate;
                out.push(QPoint { k: s.k, j, visibility: vis, mt: e.mt, gamma: e.los_gamma[j].unwrap_or(0.0), eta: e.eta[j], weight: 1.0 });
            } else {
                let w = 1.0 / s.particle_count() as f64;
                for p in 0..s.particle_count() {
                    out.push(QPoint { k: s.k, j, visibility: vis, mt: s.mt[p], gamma: s.los_gamma[j][p], eta: s.eta[j][p], weight: w });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QEvaluation {
    pub value: f64,
    /// Per (k, j) contribution, ordered as first seen in the points.
    pub terms: Vec<((usize, usize), f64)>,
    pub grad_theta: Option<Vec<f64>>,
    pub grad_chi: Option<Vec<f64>>,
}

impl QEvaluation {
    pub fn grad_norm(&self) -> f64 {
        let t: f64 = self.grad_theta.iter().flatten().map(|g| g * g).sum();
        let c: f64 = self.grad_chi.iter().flatten().map(|g| g * g).sum();
        (t + c).sqrt()
    }
}

/// Data the surrogate is evaluated on.
pub struct QProblem<'a> {
    pub points: &'a [QPoint],
    /// Frames indexed by `k - 1`.
    pub frames: &'a [MeasurementFrame],
    pub anchors: &'a [[f64; 2]],
}

impl QProblem<'_> {
    fn z(&self, pt: &QPoint) -> Result<&[Complex64]> {
        let f = self
            .frames
            .get(pt.k.wrapping_sub(1))
            .filter(|f| f.k == pt.k)
            .ok_or_else(|| Error::InvalidArgument(format!("no frame for step {}", pt.k)))?;
        f.z.get(pt.j).map(|v| v.as_slice()).ok_or_else(|| Error::InvalidArgument(format!("frame {} has no BS {}", pt.k, pt.j)))
    }

    fn params<'f>(&self, pt: &QPoint, feats: &'f [MapFeature], los: bool) -> CovarianceParams<'f> {
        CovarianceParams {
            anchor: self.anchors[pt.j],
            position: pt.mt.position,
            orientation: pt.mt.orientation,
            los,
            los_variance: pt.gamma,
            noise_variance: pt.eta,
            features: feats,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(pt) = self.points.iter().find(|p| p.j >= self.anchors.len()) {
            return invalid(format!("point refers to BS {} of {}", pt.j, self.anchors.len()));
        }
        Ok(())
    }
}

fn collect_terms(points: &[QPoint], values: &[f64]) -> (f64, Vec<((usize, usize), f64)>) {
    let mut terms: Vec<((usize, usize), f64)> = Vec::new();
    let mut total = 0.0;
    for (pt, v) in points.iter().zip(values) {
        total += v;
        match terms.last_mut() {
            Some((key, acc)) if *key == (pt.k, pt.j) => *acc += v,
            _ => terms.push(((pt.k, pt.j), *v)),
        }
    }
    (total, terms)
}

fn mix(vis: f64, l0: f64, l1: f64) -> f64 {
    // avoid 0 * inf when one hypothesis has no weight
    let a = if vis > 0.0 { vis * l1 } else { 0.0 };
    let b = if vis < 1.0 { (1.0 - vis) * l0 } else { 0.0 };
    a + b
}

/// Value of the surrogate.
pub fn q_tilde(problem: &QProblem, map: &NeuralMap, model: &ResponseModel) -> Result<QEvaluation> {
    problem.validate()?;
    let features = map.predict_all(problem.anchors)?;
    let values: Vec<Result<f64>> = parallel::map_ordered(problem.points, |pt| {
        let z = problem.z(pt)?;
        let (l0, l1) = log_likelihood_pair(z, &problem.params(pt, &features[pt.j], true), model)?;
        Ok(pt.weight * mix(pt.visibility, l0, l1))
    });
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let (value, terms) = collect_terms(problem.points, &values);
    Ok(QEvaluation { value, terms, grad_theta: None, grad_chi: None })
}

struct PointGrad {
    value: f64,
    features: Vec<FeatureGrad>,
    chi: Option<Vec<f64>>,
}

/// Chain rule from path partials to feature position and bias.
fn feature_grads(
    pt: &QPoint,
    feats: &[MapFeature],
    sens: &crate::likelihood::LikelihoodSensitivities,
    scale: f64,
    out: &mut [FeatureGrad],
) {
    for (n, (f, s)) in feats.iter().zip(&sens.features).enumerate() {
        let g = [f.position[0] - pt.mt.position[0], f.position[1] - pt.mt.position[1]];
        let d2 = g[0] * g[0] + g[1] * g[1];
        let floored = sens.feature_paths[n].delay <= MIN_DELAY;
        out[n].variance += scale * s.variance;
        if d2 > 0.0 {
            let d = d2.sqrt();
            let d_tau = if floored { 0.0 } else { s.delay };
            out[n].position[0] += scale * (d_tau * g[0] / (SPEED_OF_LIGHT * d) - s.azimuth * g[1] / d2);
            out[n].position[1] += scale * (d_tau * g[1] / (SPEED_OF_LIGHT * d) + s.azimuth * g[0] / d2);
        }
        if !floored {
            out[n].bias += scale * s.delay;
        }
    }
}

/// Value and gradients of the surrogate. `want_theta` / `want_chi` select
/// which gradients are assembled.
pub fn q_tilde_grad(problem: &QProblem, map: &NeuralMap, model: &ResponseModel, want_theta: bool, want_chi: bool) -> Result<QEvaluation> {
    problem.validate()?;
    let features = map.predict_all(problem.anchors)?;
    let d = map.arch.features;
    let results: Vec<Result<PointGrad>> = parallel::map_ordered(problem.points, |pt| {
        let z = problem.z(pt)?;
        let feats = &features[pt.j];
        let mut fg = vec![FeatureGrad::default(); d];
        let mut chi: Option<Vec<f64>> = None;
        let mut value = 0.0;
        for (los, w) in [(true, pt.visibility), (false, 1.0 - pt.visibility)] {
            if w <= 0.0 {
                continue;
            }
            let s = likelihood_sensitivities(z, &problem.params(pt, feats, los), model, want_chi)?;
            let scale = pt.weight * w;
            value += scale * s.value;
            if want_theta {
                feature_grads(pt, feats, &s, scale, &mut fg);
            }
            if let Some(c) = s.calibration {
                let acc = chi.get_or_insert_with(|| vec![0.0; c.len()]);
                acc.iter_mut().zip(&c).for_each(|(a, b)| *a += scale * b);
            }
        }
        Ok(PointGrad { value, features: fg, chi })
    });
    let results: Vec<PointGrad> = results.into_iter().collect::<Result<_>>()?;
    let values: Vec<f64> = results.iter().map(|r| r.value).collect();
    let (value, terms) = collect_terms(problem.points, &values);

    let grad_theta = if want_theta {
        let mut per_bs = vec![vec![FeatureGrad::default(); d]; problem.anchors.len()];
        for (pt, r) in problem.points.iter().zip(&results) {
            for (acc, g) in per_bs[pt.j].iter_mut().zip(&r.features) {
                acc.position[0] += g.position[0];
                acc.position[1] += g.position[1];
                acc.bias += g.bias;
                acc.variance += g.variance;
            }
        }
        let mut grad = vec![0.0; map.params.len()];
        for (j, up) in per_bs.iter().enumerate() {
            map.backward_into(problem.anchors[j], up, &mut grad)?;
        }
        Some(grad)
    } else {
        None
    };
    let grad_chi = if want_chi {
        let mut grad = vec![0.0; model.calibration.param_len()];
        for r in &results {
            if let Some(c) = &r.chi {
                grad.iter_mut().zip(c).for_each(|(a, b)| *a += b);
            }
        }
        Some(grad)
    } else {
        None
    };
    Ok(QEvaluation { value, terms, grad_theta, grad_chi })
}

/// Result of one optimization phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseResult {
    pub q_before: f64,
    pub q_after: f64,
    pub grad_norm: f64,
}

/// Adam ascent on Q over the map parameters. Keeps the best iterate.
pub fn optimize_theta(problem: &QProblem, map: &mut NeuralMap, model: &ResponseModel, adam: &mut AdamState, steps: usize) -> Result<PhaseResult> {
    let mut best = (f64::NEG_INFINITY, map.params.clone());
    let mut first: Option<(f64, f64)> = None;
    for _ in 0..steps {
        let q = q_tilde_grad(problem, map, model, true, false)?;
        first.get_or_insert((q.value, q.grad_norm()));
        if q.value > best.0 {
            best = (q.value, map.params.clone());
        }
        let neg: Vec<f64> = q.grad_theta.unwrap().iter().map(|g| -g).collect();
        adam.step(&mut map.params, &neg)?;
    }
    let last = q_tilde(problem, map, model)?.value;
    let (q_before, grad_norm) = first.unwrap_or((last, 0.0));
    if last.is_finite() && last >= best.0 {
        best = (last, map.params.clone());
    }
    if !best.0.is_finite() {
        return Err(Error::NumericalDegeneracy("surrogate is not finite".into()));
    }
    map.params = best.1;
    Ok(PhaseResult { q_before, q_after: best.0, grad_norm })
}

/// Adam ascent on Q over the calibration vector. Keeps the best iterate.
pub fn optimize_chi(problem: &QProblem, map: &NeuralMap, model: &mut ResponseModel, adam: &mut AdamState, steps: usize) -> Result<PhaseResult> {
    let mut params = model.calibration.to_params();
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut first: Option<(f64, f64)> = None;
    for _ in 0..steps {
        let q = q_tilde_grad(problem, map, model, false, true)?;
        first.get_or_insert((q.value, q.grad_norm()));
        if q.value > best.0 {
            best = (q.value, params.clone());
        }
        let neg: Vec<f64> = q.grad_chi.unwrap().iter().map(|g| -g).collect();
        adam.step(&mut params, &neg)?;
        model.calibration.set_params(&params)?;
    }
    let last = q_tilde(problem, map, model)?.value;
    let (q_before, grad_norm) = first.unwrap_or((last, 0.0));
    if last.is_finite() && last >= best.0 {
        best = (last, params.clone());
    }
    if !best.0.is_finite() {
        return Err(Error::NumericalDegeneracy("surrogate is not finite".into()));
    }
    model.calibration.set_params(&best.1)?;
    Ok(PhaseResult { q_before, q_after: best.0, grad_norm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub iter: usize,
    pub segment: usize,
    /// "scan", "theta" or "chi".
    pub phase: String,
    pub q_before: f64,
    pub q_after: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    /// Map features per BS after the phase.
    pub features: Vec<Vec<MapFeature>>,
}

/// Everything the EM loop carries between iterations.
pub struct EmState {
    pub map: NeuralMap,
    pub model: ResponseModel,
    pub adam_theta: AdamState,
    pub adam_chi: AdamState,
}

impl EmState {
    pub fn new(map: NeuralMap, model: ResponseModel, cfg: &LearnConfig) -> Self {
        let adam_theta = AdamState::with_lr(map.params.len(), cfg.learning_rate);
        let adam_chi = AdamState::with_lr(model.calibration.param_len(), cfg.chi_learning_rate);
        Self { map, model, adam_theta, adam_chi }
    }
}

/// Builds the Q points of a segment according to the config.
pub fn segment_points(snapshots: &[Snapshot], truth: Option<&[MtState]>, cfg: &LearnConfig) -> Result<Vec<QPoint>> {
    let snaps = if cfg.supervised {
        let truth = truth.ok_or_else(|| Error::InvalidArgument("supervised learning needs ground truth".into()))?;
        supervised_condition(snapshots, truth)?
    } else {
        snapshots.to_vec()
    };
    Ok(q_points(&snaps, cfg.use_mmse_points))
}

/// Relative variances tried per grid cell by [`scan_features`].
const SCAN_VARIANCES: [f64; 4] = [0.03, 0.1, 0.3, 1.0];

/// Greedy grid search for initial features: per BS, each of the `D`
/// features in turn takes the grid cell and variance that maximize that
/// BS's share of Q given the features already placed. Biases are zero.
pub fn scan_features(
    problem: &QProblem,
    model: &ResponseModel,
    arch: &MapArchitecture,
    scene: ([f64; 2], [f64; 2]),
    spacing: f64,
    stride: usize,
) -> Result<Vec<Vec<MapFeature>>> {
    problem.validate()?;
    if !(spacing > 0.0) {
        return invalid("scan spacing must be positive");
    }
    let (lo, hi) = scene;
    let nx = ((hi[0] - lo[0]) / spacing).floor() as usize + 1;
    let ny = ((hi[1] - lo[1]) / spacing).floor() as usize + 1;
    let mut candidates = Vec::with_capacity(nx * ny * SCAN_VARIANCES.len());
    for ix in 0..nx {
        for iy in 0..ny {
            for v in SCAN_VARIANCES {
                candidates.push(MapFeature {
                    position: [lo[0] + ix as f64 * spacing, lo[1] + iy as f64 * spacing],
                    bias: 0.0,
                    variance: v * arch.gamma_scale,
                });
            }
        }
    }
    let mut out = Vec::with_capacity(problem.anchors.len());
    for j in 0..problem.anchors.len() {
        let pts: Vec<&QPoint> = problem.points.iter().filter(|p| p.j == j).step_by(stride.max(1)).collect();
        let mut placed: Vec<MapFeature> = Vec::with_capacity(arch.features);
        for _ in 0..arch.features {
            let scores: Vec<Result<f64>> = parallel::map_ordered(&candidates, |c| {
                let mut feats = placed.clone();
                feats.push(*c);
                let mut q = 0.0;
                for pt in &pts {
                    let (l0, l1) = log_likelihood_pair(problem.z(pt)?, &problem.params(pt, &feats, true), model)?;
                    q += pt.weight * mix(pt.visibility, l0, l1);
                }
                Ok(q)
            });
            let mut best = (f64::NEG_INFINITY, candidates[0]);
            for (c, s) in candidates.iter().zip(scores) {
                let s = s?;
                if s > best.0 {
                    best = (s, *c);
                }
            }
            placed.push(best.1);
        }
        out.push(placed);
    }
    Ok(out)
}

/// Measurements and side information the EM loop runs on.
#[derive(Clone, Copy)]
pub struct LearnData<'a> {
    /// Frames `1..=K` in order.
    pub frames: &'a [MeasurementFrame],
    pub anchors: &'a [[f64; 2]],
    /// IMU orientation per step including `k = 0`.
    pub imu: Option<&'a [f64]>,
    /// Ground-truth states per step including `k = 0`.
    pub truth: Option<&'a [MtState]>,
    /// Region searched by the scan initialization.
    pub scene: ([f64; 2], [f64; 2]),
}

/// One EM iteration on frames `segment.0..=segment.1`: the filter (already
/// positioned at the segment start) runs under the current parameters, then
/// the map and, optionally, the calibration are updated on the frozen
/// snapshots. Both phases start from the same parameters `(theta_t, chi_t)`.
/// With `scan` set the map is first re-initialized by [`scan_features`].
pub fn em_iteration(
    filter: &mut Filter,
    data: &LearnData,
    segment: (usize, usize),
    state: &mut EmState,
    cfg: &LearnConfig,
    iter: usize,
    scan: bool,
) -> Result<Vec<TrainingLogEntry>> {
    let anchors = data.anchors;
    filter.set_features(state.map.predict_all(anchors)?)?;
    filter.set_model(state.model.clone());
    let mut snapshots = Vec::with_capacity(segment.1 + 1 - segment.0);
    for frame in &data.frames[segment.0 - 1..segment.1] {
        let z_o = data.imu.and_then(|v| v.get(frame.k).copied());
        snapshots.push(filter.step(frame, z_o)?.1);
    }
    let points = segment_points(&snapshots, data.truth, cfg)?;
    let problem = QProblem { points: &points, frames: data.frames, anchors };

    let mut log = Vec::new();
    if let (true, Some(spacing)) = (scan, cfg.scan_spacing) {
        let start = Instant::now();
        let q_before = q_tilde(&problem, &state.map, &state.model)?.value;
        let targets = scan_features(&problem, &state.model, &state.map.arch, data.scene, spacing, cfg.scan_stride)?;
        state.map.fit(anchors, &targets, FIT_STEPS, FIT_LEARNING_RATE)?;
        log.push(TrainingLogEntry {
            iter,
            segment: segment.0,
            phase: "scan".into(),
            q_before,
            q_after: q_tilde(&problem, &state.map, &state.model)?.value,
            grad_norm: 0.0,
            seconds: start.elapsed().as_secs_f64(),
            features: state.map.predict_all(anchors)?,
        });
    }
    let theta_t = state.map.clone();
    let start = Instant::now();
    let r = optimize_theta(&problem, &mut state.map, &state.model, &mut state.adam_theta, cfg.adam_steps)?;
    log.push(TrainingLogEntry {
        iter,
        segment: segment.0,
        phase: "theta".into(),
        q_before: r.q_before,
        q_after: r.q_after,
        grad_norm: r.grad_norm,
        seconds: start.elapsed().as_secs_f64(),
        features: state.map.predict_all(anchors)?,
    });
    if cfg.learn_chi {
        let start = Instant::now();
        let r = optimize_chi(&problem, &theta_t, &mut state.model, &mut state.adam_chi, cfg.adam_steps)?;
        log.push(TrainingLogEntry {
            iter,
            segment: segment.0,
            phase: "chi".into(),
            q_before: r.q_before,
            q_after: r.q_after,
            grad_norm: r.grad_norm,
            seconds: start.elapsed().as_secs_f64(),
            features: state.map.predict_all(anchors)?,
        });
    }
    Ok(log)
}

const FIT_STEPS: usize = 1000;
const FIT_LEARNING_RATE: f64 = 1e-2;

#[derive(Debug)]
pub struct LearnOutput {
    pub map: NeuralMap,
    /// Optimizer state of the map parameters, for resuming.
    pub adam: AdamState,
    pub model: ResponseModel,
    pub log: Vec<TrainingLogEntry>,
    pub report: InvariantReport,
}

/// Full EM loop over `cfg.em_iterations` passes of the track. Iteration
/// `t` runs the tracker with seed `filter_cfg.seed + t`.
pub fn learn(
    data: &LearnData,
    model: ResponseModel,
    models: &FilterModels,
    filter_cfg: &FilterConfig,
    cfg: &LearnConfig,
    map: NeuralMap,
) -> Result<LearnOutput> {
    cfg.validate()?;
    if cfg.supervised && data.truth.is_none() {
        return invalid("supervised learning needs ground truth");
    }
    if data.frames.iter().enumerate().any(|(i, f)| f.k != i + 1) {
        return invalid("frames must be numbered 1..K in order");
    }
    let mut state = EmState::new(map, model, cfg);
    let mut log = Vec::new();
    let mut report = InvariantReport::default();
    let segments = segment_scheduler(data.frames.len(), cfg.segment);
    for t in 0..cfg.em_iterations {
        let subset = if cfg.use_subset { filter_cfg.subset } else { filter_cfg.particles };
        let fc = FilterConfig { seed: filter_cfg.seed.wrapping_add(t as u64), subset, ..*filter_cfg };
        let mut filter = Filter::new(fc, *models, state.model.clone(), data.anchors.to_vec())?;
        for (si, &seg) in segments.iter().enumerate() {
            log.extend(em_iteration(&mut filter, data, seg, &mut state, cfg, t, t == 0 && si == 0)?);
        }
        report.merge(&filter.report);
    }
    Ok(LearnOutput { map: state.map, adam: state.adam_theta, model: state.model, log, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_examples() {
        assert_eq!(segment_scheduler(10, Some(10)), vec![(1, 10)]);
        assert_eq!(segment_scheduler(10, Some(4)), vec![(1, 4), (5, 8), (9, 10)]);
        assert_eq!(segment_scheduler(10, None), vec![(1, 10)]);
        assert!(segment_scheduler(0, Some(3)).is_empty());
    }

    #[test]
    fn mixture_weights() {
        assert_eq!(mix(1.0, f64::NEG_INFINITY, -2.0), -2.0);
        assert_eq!(mix(0.0, -3.0, f64::NEG_INFINITY), -3.0);
        assert_eq!(mix(0.25, -4.0, -8.0), -5.0);
    }

    #[test]
    fn rejects_bad_scan_settings() {
        assert!(LearnConfig::default().validate().is_ok());
        assert!(LearnConfig { scan_stride: 0, ..Default::default() }.validate().is_err());
        assert!(LearnConfig { scan_spacing: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(LearnConfig { scan_spacing: Some(f64::NAN), ..Default::default() }.validate().is_err());
        assert!(LearnConfig { scan_spacing: Some(0.5), ..Default::default() }.validate().is_ok());
    }
}
