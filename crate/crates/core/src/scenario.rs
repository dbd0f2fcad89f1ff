//! Synthetic scenes: BSs, reflecting walls, a waypoint trajectory and a
//! blockage script, rendered into measurement frames with Swerling-1
//! amplitudes. Single-bounce reflections are modelled by image sources
//! (virtual anchors).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::likelihood::MapFeature;
use crate::models::{gauss, MtState};
use crate::signal::{los_geometry, path_geometry_floored, ResponseModel};

/// RNG stream ids derived from the scenario seed.
pub const STREAM_IMU: u64 = 1;
pub const STREAM_MEASUREMENTS: u64 = 2;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wall {
    pub start: [f64; 2],
    pub end: [f64; 2],
}

fn default_sigma_o() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub waypoints: Vec<[f64; 2]>,
    /// m/s
    pub speed: f64,
    /// Step duration (s).
    pub dt: f64,
    /// Number of measurement steps K.
    pub steps: usize,
    /// IMU orientation noise std (rad).
    #[serde(default = "default_sigma_o")]
    pub sigma_o: f64,
}

fn default_mpc_scale() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub bs_positions: Vec<[f64; 2]>,
    #[serde(default)]
    pub walls: Vec<Wall>,
    pub trajectory: TrajectorySpec,
    /// Per BS, inclusive step intervals `[start, end]` (1-based) without LOS.
    #[serde(default)]
    pub blockages: Vec<Vec<[usize; 2]>>,
    pub los_gamma_true: Vec<f64>,
    #[serde(default = "default_mpc_scale")]
    pub mpc_gamma_scale: f64,
    pub noise_eta_true: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn bs_count(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn steps(&self) -> usize {
        self.trajectory.steps
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.bs_count();
        if j == 0 {
            return invalid("scenario needs at least one BS");
        }
        if self.trajectory.steps == 0 {
            return invalid("trajectory.steps must be at least 1");
        }
        if self.los_gamma_true.len() != j || self.noise_eta_true.len() != j {
            return invalid(format!("los_gamma_true and noise_eta_true need {j} entries"));
        }
        if !self.blockages.is_empty() && self.blockages.len() != j {
            return invalid(format!("blockages needs one list per BS ({j})"));
        }
        for (b, list) in self.blockages.iter().enumerate() {
            for iv in list {
                if iv[0] < 1 || iv[0] > iv[1] || iv[1] > self.trajectory.steps {
                    return invalid(format!("blockage {iv:?} of BS {b} outside [1, {}]", self.trajectory.steps));
                }
            }
        }
        if self.los_gamma_true.iter().chain(&self.noise_eta_true).any(|&v| !(v > 0.0 && v.is_finite())) {
            return invalid("true variances must be positive");
        }
        if !(self.mpc_gamma_scale >= 0.0) {
            return invalid("mpc_gamma_scale must be non-negative");
        }
        for w in &self.walls {
            wall_direction(w)?;
        }
        let t = &self.trajectory;
        if t.waypoints.len() < 2 {
            return invalid("trajectory needs at least two waypoints");
        }
        if !(t.speed > 0.0 && t.dt > 0.0 && t.sigma_o >= 0.0) {
            return invalid("trajectory speed and dt must be positive");
        }
        Ok(())
    }

    /// Whether BS `j` has LOS at step `k` (k = 0 is the initial state).
    pub fn los_at(&self, j: usize, k: usize) -> bool {
        self.blockages.get(j).is_none_or(|list| !list.iter().any(|iv| k >= iv[0] && k <= iv[1]))
    }

    /// Amplitude variance of every reflection seen from BS `j`.
    pub fn mpc_variance(&self, j: usize) -> f64 {
        self.los_gamma_true[j] * self.mpc_gamma_scale
    }

    /// Virtual anchors per BS, one per wall, as map features with zero bias.
    pub fn virtual_anchors(&self) -> Result<Vec<Vec<MapFeature>>> {
        (0..self.bs_count())
            .map(|j| {
                self.walls
                    .iter()
                    .map(|w| {
                        Ok(MapFeature { position: mirror_anchor(w, self.bs_positions[j])?, bias: 0.0, variance: self.mpc_variance(j) })
                    })
                    .collect()
            })
            .collect()
    }

    /// Axis-aligned box around BSs, waypoints and virtual anchors.
    pub fn bounding_box(&self) -> Result<([f64; 2], [f64; 2])> {
        let mut pts: Vec<[f64; 2]> = self.bs_positions.clone();
        pts.extend(&self.trajectory.waypoints);
        for list in self.virtual_anchors()? {
            pts.extend(list.iter().map(|f| f.position));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in pts {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Ok((lo, hi))
    }

    /// Diagonal of [`Scenario::bounding_box`], used to normalize map inputs.
    pub fn extent(&self) -> Result<f64> {
        let (lo, hi) = self.bounding_box()?;
        Ok(((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt().max(1.0))
    }
}

fn wall_direction(w: &Wall) -> Result<[f64; 2]> {
    let d = [w.end[0] - w.start[0], w.end[1] - w.start[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if !(len > 0.0 && len.is_finite()) {
        return invalid(format!("degenerate wall {w:?}"));
    }
    Ok([d[0] / len, d[1] / len])
}

/// Image of `p_bs` across the infinite line through `wall`.
pub fn mirror_anchor(wall: &Wall, p_bs: [f64; 2]) -> Result<[f64; 2]> {
    let t = wall_direction(wall)?;
    let rel = [p_bs[0] - wall.start[0], p_bs[1] - wall.start[1]];
    let along = rel[0] * t[0] + rel[1] * t[1];
    let foot = [wall.start[0] + along * t[0], wall.start[1] + along * t[1]];
    Ok([2.0 * foot[0] - p_bs[0], 2.0 * foot[1] - p_bs[1]])
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Specular point of the BS -> wall -> MT bounce, if it falls on the wall
/// segment and both ends are on the same side.
pub fn reflection_point(wall: &Wall, p_bs: [f64; 2], p_mt: [f64; 2]) -> Result<Option<[f64; 2]>> {
    let image = mirror_anchor(wall, p_bs)?;
    let d = [wall.end[0] - wall.start[0], wall.end[1] - wall.start[1]];
    let side = |p: [f64; 2]| cross(d, [p[0] - wall.start[0], p[1] - wall.start[1]]);
    let (s_bs, s_mt) = (side(p_bs), side(p_mt));
    if s_bs * s_mt <= 0.0 {
        return Ok(None);
    }
    // intersect image -> MT with the wall line
    let e = [p_mt[0] - image[0], p_mt[1] - image[1]];
    let denom = cross(d, e);
    if denom == 0.0 {
        return Ok(None);
    }
    let w0 = [image[0] - wall.start[0], image[1] - wall.start[1]];
    let s = cross(w0, e) / denom;
    if !(0.0..=1.0).contains(&s) {
        return Ok(None);
    }
    Ok(Some([wall.start[0] + s * d[0], wall.start[1] + s * d[1]]))
}

/// Ground truth of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    /// `K + 1` states, index 0 is the start.
    pub mt_states: Vec<MtState>,
    /// Per BS, one feature per wall.
    pub virtual_anchors: Vec<Vec<MapFeature>>,
    /// `[k][j]`, `K + 1` rows.
    pub los_flags: Vec<Vec<bool>>,
    /// `K + 1` noisy orientation readings.
    pub imu_orientation: Vec<f64>,
}

impl ScenarioTruth {
    pub fn steps(&self) -> usize {
        self.mt_states.len().saturating_sub(1)
    }
}

/// Constant-speed walk along the waypoints, clamped at the last one, with
/// noisy orientation readings.
pub fn synth_trajectory(spec: &TrajectorySpec, seed: u64) -> Result<(Vec<MtState>, Vec<f64>)> {
    if spec.waypoints.len() < 2 {
        return invalid("trajectory needs at least two waypoints");
    }
    if !(spec.speed > 0.0 && spec.dt > 0.0) {
        return invalid("trajectory speed and dt must be positive");
    }
    let seg_len: Vec<f64> = spec
        .waypoints
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = seg_len.iter().sum();
    if !(total > 0.0) {
        return invalid("trajectory has zero length");
    }
    let heading_of = |i: usize| {
        let w = &spec.waypoints;
        (w[i + 1][1] - w[i][1]).atan2(w[i + 1][0] - w[i][0])
    };
    let mut rng = seeded(seed, STREAM_IMU);
    let mut states = Vec::with_capacity(spec.steps + 1);
    let mut imu = Vec::with_capacity(spec.steps + 1);
    for k in 0..=spec.steps {
        let mut s = spec.speed * spec.dt * k as f64;
        let mut seg = 0;
        // skip zero-length and fully travelled segments
        while seg < seg_len.len() && (s > seg_len[seg] || seg_len[seg] == 0.0) {
            if seg + 1 == seg_len.len() {
                break;
            }
            s -= seg_len[seg];
            seg += 1;
        }
        let moving = s < seg_len[seg] || (seg + 1 < seg_len.len());
        let s = s.min(seg_len[seg]);
        let heading = if seg_len[seg] > 0.0 { heading_of(seg) } else { heading_of(seg_len.iter().rposition(|&l| l > 0.0).unwrap()) };
        let (c, sn) = (heading.cos(), heading.sin());
        let a = spec.waypoints[seg];
        let speed = if moving { spec.speed } else { 0.0 };
        states.push(MtState { position: [a[0] + s * c, a[1] + s * sn], velocity: [speed * c, speed * sn], orientation: heading });
        imu.push(gauss(heading, spec.sigma_o, &mut rng));
    }
    Ok((states, imu))
}

/// Trajectory, anchors and LOS script of a scenario.
pub fn synth_truth(scenario: &Scenario) -> Result<ScenarioTruth> {
    scenario.validate()?;
    let (mt_states, imu_orientation) = synth_trajectory(&scenario.trajectory, scenario.seed)?;
    let los_flags = (0..mt_states.len()).map(|k| (0..scenario.bs_count()).map(|j| scenario.los_at(j, k)).collect()).collect();
    Ok(ScenarioTruth { mt_states, virtual_anchors: scenario.virtual_anchors()?, los_flags, imu_orientation })
}

/// Measurements of all BSs at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFrame {
    pub k: usize,
    /// `[j]`, each of length M.
    pub z: Vec<Vec<Complex64>>,
}

fn cn<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (var / 2.0).sqrt();
    Complex64::new(gauss(0.0, s, rng), gauss(0.0, s, rng))
}

/// Deterministic part of every path seen from BS `j` at state `x`: the LOS
/// response and the responses of the reflections that currently hit their
/// wall segment.
pub fn path_responses(scenario: &Scenario, j: usize, x: &MtState, model: &ResponseModel) -> Result<(Vec<Complex64>, Vec<Vec<Complex64>>)> {
    let bs = scenario.bs_positions[j];
    let los = model.response(&los_geometry(x.position, x.orientation, bs)?);
    let mut mpcs = Vec::new();
    for w in &scenario.walls {
        if reflection_point(w, bs, x.position)?.is_some() {
            let image = mirror_anchor(w, bs)?;
            mpcs.push(model.response(&path_geometry_floored(x.position, x.orientation, image, 0.0).0));
        }
    }
    Ok((los, mpcs))
}

/// Frames `k = 1..K` drawn from the generative model.
pub fn synth_measurements(scenario: &Scenario, truth: &ScenarioTruth, model: &ResponseModel) -> Result<Vec<MeasurementFrame>> {
    scenario.validate()?;
    if truth.mt_states.len() != scenario.steps() + 1 || truth.los_flags.len() != truth.mt_states.len() {
        return invalid("truth does not match the scenario length");
    }
    let m = model.len();
    let mut rng = seeded(scenario.seed, STREAM_MEASUREMENTS);
    let mut frames = Vec::with_capacity(scenario.steps());
    for k in 1..=scenario.steps() {
        let x = &truth.mt_states[k];
        let mut z = Vec::with_capacity(scenario.bs_count());
        for j in 0..scenario.bs_count() {
            let (los, mpcs) = path_responses(scenario, j, x, model)?;
            let eta = scenario.noise_eta_true[j];
            let mut zj: Vec<Complex64> = (0..m).map(|_| cn(eta, &mut rng)).collect();
            let rho = cn(scenario.los_gamma_true[j], &mut rng);
            if truth.los_flags[k][j] {
                zj.iter_mut().zip(&los).for_each(|(a, h)| *a += rho * h);
            }
            for h in &mpcs {
                let rho = cn(scenario.mpc_variance(j), &mut rng);
                zj.iter_mut().zip(h).for_each(|(a, h)| *a += rho * h);
            }
            z.push(zj);
        }
        frames.push(MeasurementFrame { k, z });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn line_spec() -> TrajectorySpec {
        TrajectorySpec { waypoints: vec![[0.0, 0.0], [10.0, 0.0]], speed: 1.0, dt: 1.0, steps: 12, sigma_o: 0.0 }
    }

    #[test]
    fn mirror_examples() {
        let wall = Wall { start: [-5.0, 0.0], end: [5.0, 0.0] };
        assert_eq!(mirror_anchor(&wall, [2.0, 3.0]).unwrap(), [2.0, -3.0]);
        assert_eq!(mirror_anchor(&wall, [1.0, 0.0]).unwrap(), [1.0, 0.0]);
        assert!(mirror_anchor(&Wall { start: [1.0, 1.0], end: [1.0, 1.0] }, [0.0, 0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut p = || [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let wall = Wall { start: p(), end: p() };
            let bs = p();
            let img = mirror_anchor(&wall, bs).unwrap();
            let d = [wall.end[0] - wall.start[0], wall.end[1] - wall.start[1]];
            let mid = [(bs[0] + img[0]) / 2.0 - wall.start[0], (bs[1] + img[1]) / 2.0 - wall.start[1]];
            assert!(cross(d, mid).abs() < 1e-10 * (1.0 + d[0].hypot(d[1]) * mid[0].hypot(mid[1])));
            let seg = [img[0] - bs[0], img[1] - bs[1]];
            assert!((seg[0] * d[0] + seg[1] * d[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_line_trajectory() {
        let (states, imu) = synth_trajectory(&line_spec(), 1).unwrap();
        assert_eq!(states.len(), 13);
        for (k, s) in states.iter().enumerate().take(11) {
            assert!((s.position[0] - k as f64).abs() < 1e-12 && s.position[1] == 0.0);
            assert_eq!(s.orientation, 0.0);
        }
        assert_eq!(states[12].position, [10.0, 0.0]);
        assert_eq!(states[12].velocity, [0.0, 0.0]);
        assert_eq!(imu, vec![0.0; 13]);
        assert!(synth_trajectory(&TrajectorySpec { speed: 0.0, ..line_spec() }, 1).is_err());
        assert!(synth_trajectory(&TrajectorySpec { waypoints: vec![[1.0, 1.0], [1.0, 1.0]], ..line_spec() }, 1).is_err());
    }

    #[test]
    fn corner_trajectory_keeps_speed() {
        let spec = TrajectorySpec { waypoints: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 5.0]], speed: 0.7, dt: 1.0, steps: 8, sigma_o: 0.0 };
        let (states, _) = synth_trajectory(&spec, 0).unwrap();
        let along = |p: [f64; 2]| if p[1] == 0.0 { p[0] } else { 2.0 + p[1] };
        for (k, s) in states.iter().enumerate() {
            assert!((along(s.position) - 0.7 * k as f64).abs() < 1e-12);
        }
        assert!((states[5].orientation - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn reflected_delay_matches_ray_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wall = Wall { start: [-20.0, 8.0], end: [20.0, 8.0] };
        let mut hits = 0;
        for _ in 0..200 {
            let bs = [rng.random_range(-10.0..10.0), rng.random_range(-5.0..7.0)];
            let mt = [rng.random_range(-10.0..10.0), rng.random_range(-5.0..7.0)];
            let Some(r) = reflection_point(&wall, bs, mt).unwrap() else { continue };
            hits += 1;
            let traced = (r[0] - bs[0]).hypot(r[1] - bs[1]) + (mt[0] - r[0]).hypot(mt[1] - r[1]);
            let img = mirror_anchor(&wall, bs).unwrap();
            let g = crate::signal::feature_geometry(mt, 0.3, img, 0.0).unwrap();
            assert!((g.delay * crate::signal::SPEED_OF_LIGHT - traced).abs() < 1e-10 * traced.max(1.0));
        }
        assert!(hits > 150);
        // opposite sides of the wall never reflect
        assert!(reflection_point(&wall, [0.0, 0.0], [0.0, 10.0]).unwrap().is_none());
    }

    #[test]
    fn blockage_schedule() {
        let sc = Scenario {
            bs_positions: vec![[0.0, 5.0], [3.0, 5.0]],
            walls: vec![],
            trajectory: line_spec(),
            blockages: vec![vec![[3, 5]], vec![]],
            los_gamma_true: vec![1.0, 1.0],
            mpc_gamma_scale: 0.25,
            noise_eta_true: vec![1.0, 1.0],
            seed: 0,
        };
        let truth = synth_truth(&sc).unwrap();
        let col: Vec<bool> = truth.los_flags.iter().map(|r| r[0]).collect();
        assert_eq!(&col[..7], &[true, true, true, false, false, false, true]);
        assert!(truth.los_flags.iter().all(|r| r[1]));
        let bad = Scenario { blockages: vec![vec![[0, 2]], vec![]], ..sc };
        assert!(bad.validate().is_err());
    }
}
