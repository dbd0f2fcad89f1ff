//! Stacked-particle sum-product tracker.
//!
//! Beliefs are kept as three particle sets: the MT state, per BS the LOS
//! variance (weights summing to the visibility probability, the absent
//! hypothesis being a scalar mass), and per BS the noise variance. The
//! update pairs the p-th particle of every set into one tuple so the
//! likelihood is evaluated `J * P` times per step, not `P^3`.
//!
//! Per BS `j`, with predicted weights `w_x`, `w_y`, `w_eta`, absent mass
//! `beta` and the pair `(l0, l1)` of log-likelihoods at tuple `p`:
//!
//! ```text
//! MT:    w_x   *= prod_j  P w_eta (beta e^l0 + p e^l1)
//! LOS:   w_y   *=         P w_x P w_eta e^l1      (absent: beta sum_p w_x P w_eta e^l0)
//! noise: w_eta *=         P w_x (beta e^l0 + p e^l1)
//! ```
//!
//! where `p = sum_p w_y` is the predicted visibility. The paired LOS particle
//! enters the MT and noise messages as a draw from the normalized LOS belief,
//! so an uninformative likelihood leaves those weights untouched even though
//! survivor and birth particles carry different LOS weights. The LOS and
//! noise updates use the predicted MT weights, not the updated ones.
//! Everything runs in the log domain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::likelihood::{batch_log_likelihood, CovarianceParams, LikelihoodInput, MapFeature};
use crate::models::{
    sample_eta_transition, sample_gamma_mean, sample_mt_transition, sample_priors, wrap_angle, LosTransitionParams, MotionParams,
    MtState, NoiseTransitionParams, Priors,
};
use crate::scenario::{seeded, MeasurementFrame};
use crate::signal::ResponseModel;

pub const STREAM_FILTER: u64 = 3;

/// Tolerance of the normalization invariants.
pub const NORMALIZATION_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub particles: usize,
    pub birth_particles: usize,
    /// Particles kept per step for learning.
    pub subset: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { particles: 1000, birth_particles: 50, subset: 128, seed: 0 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.birth_particles > 0 && self.birth_particles < self.particles) {
            return invalid(format!("need 0 < birth_particles < particles, got {} and {}", self.birth_particles, self.particles));
        }
        if !(self.subset > 0 && self.subset <= self.particles) {
            return invalid(format!("need 0 < subset <= particles, got {}", self.subset));
        }
        Ok(())
    }
}

/// All transition and prior parameters of the tracker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterModels {
    pub motion: MotionParams,
    pub los: LosTransitionParams,
    pub noise: NoiseTransitionParams,
    pub priors: Priors,
}

impl FilterModels {
    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.los.validate()?;
        self.noise.validate()?;
        self.priors.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBeliefs {
    pub mt: Vec<MtState>,
    pub mt_weights: Vec<f64>,
    /// `[j][p]`; the weights of BS `j` sum to its visibility probability.
    pub los_gamma: Vec<Vec<f64>>,
    pub los_weights: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub eta_weights: Vec<Vec<f64>>,
}

impl ParticleBeliefs {
    /// Equal-weight beliefs drawn from the priors.
    pub fn from_priors<R: Rng + ?Sized>(priors: &Priors, bs_count: usize, particles: usize, rng: &mut R) -> Self {
        let init = sample_priors(priors, bs_count, particles, rng);
        let u = 1.0 / particles as f64;
        Self {
            mt: init.mt,
            mt_weights: vec![u; particles],
            los_gamma: init.los_gamma,
            los_weights: vec![vec![priors.los_prob * u; particles]; bs_count],
            eta: init.eta,
            eta_weights: vec![vec![u; particles]; bs_count],
        }
    }

    pub fn particle_count(&self) -> usize {
        self.mt.len()
    }

    pub fn bs_count(&self) -> usize {
        self.eta.len()
    }

    pub fn visibility(&self, j: usize) -> f64 {
        self.los_weights[j].iter().sum::<f64>().clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predicted {
    pub beliefs: ParticleBeliefs,
    /// Per BS, the mass of the LOS-absent hypothesis.
    pub absent_mass: Vec<f64>,
}

impl Predicted {
    pub fn visibility(&self, j: usize) -> f64 {
        self.beliefs.los_weights[j].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEstimates {
    pub k: usize,
    pub mt: MtState,
    /// LOS variance conditional on existence; `None` when the visibility is 0.
    pub los_gamma: Vec<Option<f64>>,
    pub eta: Vec<f64>,
    pub visibility: Vec<f64>,
}

/// Subset of the equal-weight beliefs after resampling at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub k: usize,
    pub mt: Vec<MtState>,
    /// `[j][p]`
    pub los_gamma: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub visibility: Vec<f64>,
    pub estimate: StateEstimates,
}

impl Snapshot {
    pub fn particle_count(&self) -> usize {
        self.mt.len()
    }
}

/// Counts of invariant checks performed and failed during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub checks: usize,
    pub violations: usize,
    /// Likelihood evaluations that hit a numerical degeneracy.
    pub degenerate_evaluations: usize,
    pub details: Vec<String>,
}

impl InvariantReport {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.violations += 1;
            if self.details.len() < 20 {
                self.details.push(what());
            }
        }
    }

    pub fn merge(&mut self, other: &InvariantReport) {
        self.checks += other.checks;
        self.violations += other.violations;
        self.degenerate_evaluations += other.degenerate_evaluations;
        for d in &other.details {
            if self.details.len() < 20 {
                self.details.push(d.clone());
            }
        }
    }
}

/// Indices of systematic resampling: one uniform offset, `n` evenly spaced
/// pointers through the cumulative weights. Weights need not be normalized.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.is_empty() {
        return (0..n).map(|i| i * weights.len().max(1) / n.max(1)).collect();
    }
    let step = total / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Prediction and birth. `z_o` is the IMU reading of the new step.
pub fn predict_step<R: Rng + ?Sized>(prev: &ParticleBeliefs, models: &FilterModels, birth_particles: usize, z_o: Option<f64>, rng: &mut R) -> Predicted {
    let p_count = prev.particle_count();
    let survivors = p_count - birth_particles;
    let mt = prev.mt.iter().map(|x| sample_mt_transition(x, z_o, &models.motion, rng)).collect();
    let los = &models.los;
    let mut los_gamma = Vec::with_capacity(prev.bs_count());
    let mut los_weights = Vec::with_capacity(prev.bs_count());
    let mut absent_mass = Vec::with_capacity(prev.bs_count());
    for j in 0..prev.bs_count() {
        let p_prev = prev.visibility(j);
        let idx = systematic_resample(&prev.los_weights[j], survivors, rng);
        let mut g: Vec<f64> = idx.iter().map(|&i| sample_gamma_mean(los.c_gamma, prev.los_gamma[j][i].max(f64::MIN_POSITIVE), rng)).collect();
        let mut w = vec![los.p_survive * p_prev / survivors as f64; survivors];
        g.extend((0..birth_particles).map(|_| sample_gamma_mean(los.appear_shape, los.appear_mean, rng)));
        w.extend(std::iter::repeat_n(los.p_appear * (1.0 - p_prev) / birth_particles as f64, birth_particles));
        los_gamma.push(g);
        los_weights.push(w);
        absent_mass.push((1.0 - los.p_survive) * p_prev + (1.0 - los.p_appear) * (1.0 - p_prev));
    }
    let eta = prev.eta.iter().map(|e| e.iter().map(|&v| sample_eta_transition(v, &models.noise, rng)).collect()).collect();
    Predicted {
        beliefs: ParticleBeliefs { mt, mt_weights: prev.mt_weights.clone(), los_gamma, los_weights, eta, eta_weights: prev.eta_weights.clone() },
        absent_mass,
    }
}

/// Per-(j, p) log-likelihood pairs, `[j][p]`. Degenerate evaluations come
/// back as `-inf` and are counted.
pub fn evaluate_pairs(
    pred: &Predicted,
    frame: &MeasurementFrame,
    anchors: &[[f64; 2]],
    features: &[Vec<MapFeature>],
    model: &ResponseModel,
    report: &mut InvariantReport,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let b = &pred.beliefs;
    let (j_count, p_count) = (b.bs_count(), b.particle_count());
    if frame.z.len() != j_count || anchors.len() != j_count {
        return invalid(format!("frame has {} BSs, beliefs {}, anchors {}", frame.z.len(), j_count, anchors.len()));
    }
    if !features.is_empty() && features.len() != j_count {
        return invalid(format!("map has {} BS entries, expected {j_count}", features.len()));
    }
    let mut items = Vec::with_capacity(j_count * p_count);
    for j in 0..j_count {
        let feats: &[MapFeature] = if features.is_empty() { &[] } else { &features[j] };
        for p in 0..p_count {
            let x = &b.mt[p];
            items.push(LikelihoodInput {
                z: &frame.z[j],
                params: CovarianceParams {
                    anchor: anchors[j],
                    position: x.position,
                    orientation: x.orientation,
                    los: true,
                    los_variance: b.los_gamma[j][p],
                    noise_variance: b.eta[j][p],
                    features: feats,
                },
            });
        }
    }
    let results = batch_log_likelihood(&items, model);
    let mut out = vec![Vec::with_capacity(p_count); j_count];
    for (i, r) in results.into_iter().enumerate() {
        let v = match r {
            Ok(v) => v,
            Err(Error::NumericalDegeneracy(_)) => {
                report.degenerate_evaluations += 1;
                (f64::NEG_INFINITY, f64::NEG_INFINITY)
            }
            Err(e) => return Err(e),
        };
        out[i / p_count].push(v);
    }
    Ok(out)
}

/// Measurement update from precomputed likelihood pairs. Returns posterior
/// (not yet resampled) beliefs.
pub fn update_with_likelihoods(pred: &Predicted, ll: &[Vec<(f64, f64)>], k: usize, report: &mut InvariantReport) -> Result<ParticleBeliefs> {
    let b = &pred.beliefs;
    let (j_count, p_count) = (b.bs_count(), b.particle_count());
    let pf = p_count as f64;
    let ln = |w: f64| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };

    let mut log_wx: Vec<f64> = b.mt_weights.iter().map(|&w| ln(w)).collect();
    let mut los_weights = Vec::with_capacity(j_count);
    let mut eta_weights = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let ln_beta = ln(pred.absent_mass[j]);
        let ln_vis = ln(b.los_weights[j].iter().sum::<f64>());
        let mut log_wy = Vec::with_capacity(p_count);
        let mut log_absent_terms = Vec::with_capacity(p_count);
        let mut log_weta = Vec::with_capacity(p_count);
        for p in 0..p_count {
            let (l0, l1) = ll[j][p];
            let ln_pwx = ln(pf * b.mt_weights[p]);
            let ln_pweta = ln(pf * b.eta_weights[j][p]);
            let mix = lse2(ln_beta + l0, ln_vis + l1);
            log_wx[p] += ln_pweta + mix;
            log_wy.push(ln(b.los_weights[j][p]) + l1 + ln_pwx + ln_pweta);
            log_absent_terms.push(ln(b.mt_weights[p]) + ln_pweta + l0);
            log_weta.push(ln(b.eta_weights[j][p]) + ln_pwx + mix);
        }
        let log_absent = ln_beta + log_sum_exp(log_absent_terms);
        let total = lse2(log_sum_exp(log_wy.iter().copied()), log_absent);
        if !total.is_finite() {
            return Err(Error::FilterDegeneracy { step: k, detail: format!("LOS weights of BS {j} vanished (log total {total})") });
        }
        let wy: Vec<f64> = log_wy.iter().map(|&l| (l - total).exp()).collect();
        let absent = (log_absent - total).exp();
        let vis: f64 = wy.iter().sum();
        report.check((vis + absent - 1.0).abs() <= NORMALIZATION_TOL, || format!("k={k} j={j}: LOS mass {vis} + absent {absent} != 1"));
        report.check((0.0..=1.0 + NORMALIZATION_TOL).contains(&vis), || format!("k={k} j={j}: visibility {vis} out of [0,1]"));
        los_weights.push(wy);

        let tn = log_sum_exp(log_weta.iter().copied());
        if !tn.is_finite() {
            return Err(Error::FilterDegeneracy { step: k, detail: format!("noise weights of BS {j} vanished") });
        }
        let we: Vec<f64> = log_weta.iter().map(|&l| (l - tn).exp()).collect();
        report.check((we.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL, || format!("k={k} j={j}: noise weights do not sum to 1"));
        eta_weights.push(we);
    }
    let tx = log_sum_exp(log_wx.iter().copied());
    if !tx.is_finite() {
        let finite = ll.iter().flatten().filter(|v| v.0.is_finite()).count();
        return Err(Error::FilterDegeneracy { step: k, detail: format!("all MT weights vanished; {finite} finite likelihood pairs") });
    }
    let mt_weights: Vec<f64> = log_wx.iter().map(|&l| (l - tx).exp()).collect();
    report.check((mt_weights.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL, || format!("k={k}: MT weights do not sum to 1"));
    report.check(
        mt_weights.iter().chain(los_weights.iter().flatten()).chain(eta_weights.iter().flatten()).all(|w| w.is_finite() && *w >= 0.0),
        || format!("k={k}: non-finite or negative weight"),
    );
    Ok(ParticleBeliefs {
        mt: b.mt.clone(),
        mt_weights,
        los_gamma: b.los_gamma.clone(),
        los_weights,
        eta: b.eta.clone(),
        eta_weights,
    })
}

/// Likelihood evaluation plus weight update.
#[allow(clippy::too_many_arguments)]
pub fn update_step(
    pred: &Predicted,
    frame: &MeasurementFrame,
    anchors: &[[f64; 2]],
    features: &[Vec<MapFeature>],
    model: &ResponseModel,
    report: &mut InvariantReport,
) -> Result<ParticleBeliefs> {
    let ll = evaluate_pairs(pred, frame, anchors, features, model, report)?;
    update_with_likelihoods(pred, &ll, frame.k, report)
}

/// Weighted means. Orientation is averaged as wrapped offsets from the
/// heaviest particle so the mean does not jump across the branch cut.
pub fn estimate(beliefs: &ParticleBeliefs, k: usize) -> StateEstimates {
    let w = &beliefs.mt_weights;
    let mut mt = MtState::default();
    let ref_o = beliefs
        .mt
        .iter()
        .zip(w)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(x, _)| x.orientation)
        .unwrap_or(0.0);
    let mut o_off = 0.0;
    for (x, &wi) in beliefs.mt.iter().zip(w) {
        for i in 0..2 {
            mt.position[i] += wi * x.position[i];
            mt.velocity[i] += wi * x.velocity[i];
        }
        o_off += wi * wrap_angle(x.orientation - ref_o);
    }
    mt.orientation = wrap_angle(ref_o + o_off);
    let mut los_gamma = Vec::with_capacity(beliefs.bs_count());
    let mut eta = Vec::with_capacity(beliefs.bs_count());
    let mut visibility = Vec::with_capacity(beliefs.bs_count());
    for j in 0..beliefs.bs_count() {
        let vis: f64 = beliefs.los_weights[j].iter().sum();
        let g: f64 = beliefs.los_weights[j].iter().zip(&beliefs.los_gamma[j]).map(|(w, g)| w * g).sum();
        los_gamma.push(if vis > 0.0 { Some(g / vis) } else { None });
        eta.push(beliefs.eta_weights[j].iter().zip(&beliefs.eta[j]).map(|(w, e)| w * e).sum());
        visibility.push(vis.clamp(0.0, 1.0));
    }
    StateEstimates { k, mt, los_gamma, eta, visibility }
}

/// Systematic resampling of every set. Afterwards MT and noise weights are
/// `1/P` and LOS weights are `p/P`.
pub fn resample<R: Rng + ?Sized>(beliefs: &mut ParticleBeliefs, rng: &mut R) {
    let n = beliefs.particle_count();
    let u = 1.0 / n as f64;
    let idx = systematic_resample(&beliefs.mt_weights, n, rng);
    beliefs.mt = idx.iter().map(|&i| beliefs.mt[i]).collect();
    beliefs.mt_weights = vec![u; n];
    for j in 0..beliefs.bs_count() {
        let vis: f64 = beliefs.los_weights[j].iter().sum();
        if vis > 0.0 {
            let idx = systematic_resample(&beliefs.los_weights[j], n, rng);
            beliefs.los_gamma[j] = idx.iter().map(|&i| beliefs.los_gamma[j][i]).collect();
        }
        beliefs.los_weights[j] = vec![vis.clamp(0.0, 1.0) * u; n];
        let idx = systematic_resample(&beliefs.eta_weights[j], n, rng);
        beliefs.eta[j] = idx.iter().map(|&i| beliefs.eta[j][i]).collect();
        beliefs.eta_weights[j] = vec![u; n];
    }
}

/// Evenly strided subset of `n` out of `total` indices.
pub fn subset_indices(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total).max(1);
    (0..n).map(|i| i * total / n).collect()
}

fn snapshot(beliefs: &ParticleBeliefs, subset: usize, est: &StateEstimates) -> Snapshot {
    let idx = subset_indices(beliefs.particle_count(), subset);
    Snapshot {
        k: est.k,
        mt: idx.iter().map(|&i| beliefs.mt[i]).collect(),
        los_gamma: beliefs.los_gamma.iter().map(|g| idx.iter().map(|&i| g[i]).collect()).collect(),
        eta: beliefs.eta.iter().map(|e| idx.iter().map(|&i| e[i]).collect()).collect(),
        visibility: est.visibility.clone(),
        estimate: est.clone(),
    }
}

/// Stateful tracker over a sequence of frames.
pub struct Filter {
    cfg: FilterConfig,
    models: FilterModels,
    model: ResponseModel,
    anchors: Vec<[f64; 2]>,
    features: Vec<Vec<MapFeature>>,
    rng: ChaCha8Rng,
    beliefs: ParticleBeliefs,
    pub report: InvariantReport,
}

impl Filter {
    pub fn new(cfg: FilterConfig, models: FilterModels, model: ResponseModel, anchors: Vec<[f64; 2]>) -> Result<Self> {
        cfg.validate()?;
        models.validate()?;
        if anchors.is_empty() {
            return invalid("need at least one BS");
        }
        let mut rng = seeded(cfg.seed, STREAM_FILTER);
        let beliefs = ParticleBeliefs::from_priors(&models.priors, anchors.len(), cfg.particles, &mut rng);
        Ok(Self { cfg, models, model, anchors, features: Vec::new(), rng, beliefs, report: InvariantReport::default() })
    }

    /// Map features per BS; an empty list means the LOS-only model.
    pub fn set_features(&mut self, features: Vec<Vec<MapFeature>>) -> Result<()> {
        if !features.is_empty() && features.len() != self.anchors.len() {
            return invalid(format!("map has {} BS entries, expected {}", features.len(), self.anchors.len()));
        }
        self.features = features;
        Ok(())
    }

    pub fn set_model(&mut self, model: ResponseModel) {
        self.model = model;
    }

    pub fn anchors(&self) -> &[[f64; 2]] {
        &self.anchors
    }

    /// Replaces the RNG stream, e.g. to decorrelate EM iterations.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = seeded(seed, STREAM_FILTER);
    }

    pub fn beliefs(&self) -> &ParticleBeliefs {
        &self.beliefs
    }

    pub fn estimate(&self, k: usize) -> StateEstimates {
        estimate(&self.beliefs, k)
    }

    /// One predict / update / estimate / resample cycle. Returns the
    /// estimate and the learning snapshot taken after resampling.
    pub fn step(&mut self, frame: &MeasurementFrame, z_o: Option<f64>) -> Result<(StateEstimates, Snapshot)> {
        let pred = predict_step(&self.beliefs, &self.models, self.cfg.birth_particles, z_o, &mut self.rng);
        let mut post = update_step(&pred, frame, &self.anchors, &self.features, &self.model, &mut self.report)?;
        let est = estimate(&post, frame.k);
        resample(&mut post, &mut self.rng);
        let snap = snapshot(&post, self.cfg.subset, &est);
        self.beliefs = post;
        Ok((est, snap))
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutput {
    /// `K + 1` entries: the prior then one per frame.
    pub estimates: Vec<StateEstimates>,
    pub snapshots: Vec<Snapshot>,
    pub report: InvariantReport,
}

/// Runs the tracker over all frames. `imu` holds one reading per step
/// including `k = 0`; `features` is per BS (empty for LOS-only).
pub fn run_filter(
    frames: &[MeasurementFrame],
    anchors: &[[f64; 2]],
    model: &ResponseModel,
    models: &FilterModels,
    features: &[Vec<MapFeature>],
    imu: Option<&[f64]>,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    let mut filter = Filter::new(*cfg, *models, model.clone(), anchors.to_vec())?;
    filter.set_features(features.to_vec())?;
    let mut estimates = vec![filter.estimate(0)];
    let mut snapshots = Vec::with_capacity(frames.len());
    for frame in frames {
        let z_o = imu.and_then(|v| v.get(frame.k).copied());
        let (est, snap) = filter.step(frame, z_o)?;
        estimates.push(est);
        snapshots.push(snap);
    }
    Ok(FilterOutput { estimates, snapshots, report: filter.report })
}
