//! Markov transitions and priors of the latent states: MT kinematics with
//! an IMU-aided orientation, the per-BS (LOS variance, LOS existence) pair
//! and the per-BS noise variance.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shapes at or above this are treated as a point mass at the mean.
pub const DETERMINISTIC_SHAPE: f64 = 1e12;

/// MT state: position, velocity (m, m/s) and orientation (rad).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MtState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub orientation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    pub dt: f64,
    pub sigma_acc: f64,
    pub sigma_o_walk: f64,
    pub sigma_o_meas: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self { dt: 0.1, sigma_acc: 0.5, sigma_o_walk: 0.05, sigma_o_meas: 0.02 }
    }
}

impl MotionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return invalid("motion.dt must be positive");
        }
        for (name, v) in [("sigma_acc", self.sigma_acc), ("sigma_o_walk", self.sigma_o_walk), ("sigma_o_meas", self.sigma_o_meas)] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("motion.{name} must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LosTransitionParams {
    /// Probability that an absent LOS appears.
    pub p_appear: f64,
    /// Probability that a present LOS survives.
    pub p_survive: f64,
    /// Shape of the Gamma random walk on the LOS variance.
    pub c_gamma: f64,
    /// Mean and shape of the appearance density.
    pub appear_mean: f64,
    pub appear_shape: f64,
    /// Mean of the (irrelevant) dummy density used while the LOS is absent.
    pub dummy_mean: f64,
}

impl Default for LosTransitionParams {
    fn default() -> Self {
        Self { p_appear: 0.05, p_survive: 0.999, c_gamma: 100.0, appear_mean: 1.0, appear_shape: 2.0, dummy_mean: 1e-6 }
    }
}

impl LosTransitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_appear >= 0.0 && self.p_appear <= 1.0 && self.p_survive > 0.0 && self.p_survive <= 1.0) {
            return invalid("LOS transition probabilities out of range");
        }
        if !(self.c_gamma > 0.0 && self.appear_mean > 0.0 && self.appear_shape > 0.0 && self.dummy_mean > 0.0) {
            return invalid("LOS transition Gamma parameters must be positive");
        }
        Ok(())
    }

    /// One-step update of the visibility probability of the two-state chain.
    pub fn predict_visibility(&self, p_prev: f64) -> f64 {
        self.p_survive * p_prev + self.p_appear * (1.0 - p_prev)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseTransitionParams {
    pub c_eta: f64,
}

impl Default for NoiseTransitionParams {
    fn default() -> Self {
        Self { c_eta: 1000.0 }
    }
}

impl NoiseTransitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_eta > 0.0) {
            return invalid("noise.c_eta must be positive");
        }
        Ok(())
    }
}

/// Independent priors at `k = 0`. Standard deviations may be zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    pub position_mean: [f64; 2],
    pub position_std: f64,
    pub velocity_mean: [f64; 2],
    pub velocity_std: f64,
    pub orientation_mean: f64,
    pub orientation_std: f64,
    /// Prior probability that each LOS exists.
    pub los_prob: f64,
    pub los_gamma_mean: f64,
    pub los_gamma_shape: f64,
    pub eta_mean: f64,
    pub eta_shape: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            position_mean: [0.0, 0.0],
            position_std: 0.5,
            velocity_mean: [0.0, 0.0],
            velocity_std: 0.5,
            orientation_mean: 0.0,
            orientation_std: 0.05,
            los_prob: 0.9,
            los_gamma_mean: 1.0,
            los_gamma_shape: 2.0,
            eta_mean: 1.0,
            eta_shape: 100.0,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        if !(self.position_std >= 0.0 && self.velocity_std >= 0.0 && self.orientation_std >= 0.0) {
            return invalid("prior standard deviations must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.los_prob) {
            return invalid("priors.los_prob must lie in [0, 1]");
        }
        if !(self.los_gamma_mean > 0.0 && self.los_gamma_shape > 0.0 && self.eta_mean > 0.0 && self.eta_shape > 0.0) {
            return invalid("prior Gamma parameters must be positive");
        }
        Ok(())
    }
}

/// Draw from Gamma(shape, mean / shape), i.e. parameterized by its mean.
/// Very large shapes collapse to the mean.
pub fn sample_gamma_mean<R: Rng + ?Sized>(shape: f64, mean: f64, rng: &mut R) -> f64 {
    if shape >= DETERMINISTIC_SHAPE {
        return mean;
    }
    let g = Gamma::new(shape, mean / shape).expect("Gamma parameters validated by caller");
    // Gamma draws can underflow to exactly zero for tiny shapes
    g.sample(rng).max(f64::MIN_POSITIVE)
}

pub(crate) fn gauss<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean;
    }
    mean + std * rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let w = a - t * (a / t).round();
    if w <= -std::f64::consts::PI {
        w + t
    } else {
        w
    }
}

/// Mean and standard deviation of the fused orientation: random-walk
/// prediction around `o_prev` combined with the IMU reading `z_o`.
pub fn fuse_orientation(o_prev: f64, z_o: Option<f64>, params: &MotionParams) -> (f64, f64) {
    let Some(z) = z_o else {
        return (o_prev, params.sigma_o_walk);
    };
    let z = o_prev + wrap_angle(z - o_prev);
    let (sw, sm) = (params.sigma_o_walk, params.sigma_o_meas);
    if sm == 0.0 {
        return (z, 0.0);
    }
    if sw == 0.0 {
        return (o_prev, 0.0);
    }
    let (pw, pm) = (1.0 / (sw * sw), 1.0 / (sm * sm));
    let var = 1.0 / (pw + pm);
    ((pw * o_prev + pm * z) * var, var.sqrt())
}

/// Constant-velocity step driven by white acceleration, orientation from
/// [`fuse_orientation`].
pub fn sample_mt_transition<R: Rng + ?Sized>(prev: &MtState, z_o: Option<f64>, params: &MotionParams, rng: &mut R) -> MtState {
    let dt = params.dt;
    let mut next = *prev;
    for i in 0..2 {
        let w = gauss(0.0, params.sigma_acc, rng);
        next.position[i] = prev.position[i] + prev.velocity[i] * dt + 0.5 * w * dt * dt;
        next.velocity[i] = prev.velocity[i] + w * dt;
    }
    let (mu, sd) = fuse_orientation(prev.orientation, z_o, params);
    next.orientation = wrap_angle(gauss(mu, sd, rng));
    next
}

/// One step of the (LOS variance, LOS existence) chain.
pub fn sample_los_transition<R: Rng + ?Sized>(gamma_prev: f64, r_prev: bool, params: &LosTransitionParams, rng: &mut R) -> (f64, bool) {
    let u: f64 = rng.random();
    if r_prev {
        if u < params.p_survive {
            (sample_gamma_mean(params.c_gamma, gamma_prev.max(f64::MIN_POSITIVE), rng), true)
        } else {
            (sample_gamma_mean(params.appear_shape, params.dummy_mean, rng), false)
        }
    } else if u < params.p_appear {
        (sample_gamma_mean(params.appear_shape, params.appear_mean, rng), true)
    } else {
        (sample_gamma_mean(params.appear_shape, params.dummy_mean, rng), false)
    }
}

/// Gamma random walk on the noise variance: mean `eta_prev`, variance
/// `eta_prev^2 / c_eta`.
pub fn sample_eta_transition<R: Rng + ?Sized>(eta_prev: f64, params: &NoiseTransitionParams, rng: &mut R) -> f64 {
    sample_gamma_mean(params.c_eta, eta_prev, rng)
}

/// Independent draws from every prior.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialParticles {
    pub mt: Vec<MtState>,
    /// `[j][p]`
    pub los_gamma: Vec<Vec<f64>>,
    pub los_flag: Vec<Vec<bool>>,
    pub eta: Vec<Vec<f64>>,
}

pub fn sample_priors<R: Rng + ?Sized>(priors: &Priors, bs_count: usize, particles: usize, rng: &mut R) -> InitialParticles {
    let mt = (0..particles)
        .map(|_| MtState {
            position: [gauss(priors.position_mean[0], priors.position_std, rng), gauss(priors.position_mean[1], priors.position_std, rng)],
            velocity: [gauss(priors.velocity_mean[0], priors.velocity_std, rng), gauss(priors.velocity_mean[1], priors.velocity_std, rng)],
            orientation: wrap_angle(gauss(priors.orientation_mean, priors.orientation_std, rng)),
        })
        .collect();
    let mut los_gamma = Vec::with_capacity(bs_count);
    let mut los_flag = Vec::with_capacity(bs_count);
    let mut eta = Vec::with_capacity(bs_count);
    for _ in 0..bs_count {
        los_gamma.push((0..particles).map(|_| sample_gamma_mean(priors.los_gamma_shape, priors.los_gamma_mean, rng)).collect());
        los_flag.push((0..particles).map(|_| rng.random::<f64>() < priors.los_prob).collect());
        eta.push((0..particles).map(|_| sample_gamma_mean(priors.eta_shape, priors.eta_mean, rng)).collect());
    }
    InitialParticles { mt, los_gamma, los_flag, eta }
}
