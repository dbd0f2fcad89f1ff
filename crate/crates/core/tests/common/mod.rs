#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfslam::learning::{q_tilde, q_tilde_grad, QPoint, QProblem};
use rfslam::models::MtState;
use rfslam::neural::{MapArchitecture, NeuralMap};
use rfslam::scenario::MeasurementFrame;
use rfslam::signal::{feature_geometry, los_geometry, ResponseModel, SignalConfig, SPEED_OF_LIGHT};

pub const CARRIER: f64 = 6e9;

/// Average received power of a path of length `dist` at the given SNR for
/// unit noise.
pub fn power_for(snr: f64, dist: f64) -> f64 {
    let pl = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * CARRIER * (dist / SPEED_OF_LIGHT));
    snr / (pl * pl)
}

pub fn cn(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Complex64::new(a * s * 1.7, b * s * 1.7)
}

/// Small learning problem: one BS, two steps, two particles per step,
/// a perturbed calibration and measurements with a reflection.
pub struct GradToy {
    pub frames: Vec<MeasurementFrame>,
    pub anchors: Vec<[f64; 2]>,
    pub points: Vec<QPoint>,
    pub map: NeuralMap,
    pub model: ResponseModel,
}

pub fn grad_toy(seed: u64) -> GradToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = SignalConfig::new(CARRIER, 70e6, 10e6, 2).unwrap();
    let mut model = ResponseModel::with_ula(signal).unwrap();
    let mut chi = model.calibration.to_params();
    for v in chi.iter_mut() {
        *v += rng.random_range(-0.1..0.1) * if v.abs() > 0.5 { 1.0 } else { 0.01 };
    }
    model.calibration.set_params(&chi).unwrap();
    let anchors = vec![[rng.random_range(-10.0..10.0), 15.0]];
    let arch = MapArchitecture { features: 2, encodings: 2, hidden1: 16, hidden2: 16, extent: 20.0, gamma_scale: power_for(30.0, 20.0) };
    let mut map = NeuralMap::init(arch, ([-20.0, -20.0], [20.0, 20.0]), &mut rng).unwrap();
    // zero biases put ReLU units and |.| heads on their kinks; move off them
    for v in map.params.iter_mut().filter(|v| **v == 0.0) {
        *v = rng.random_range(-0.05..0.05);
    }
    let image = [anchors[0][0], -25.0];
    let mut frames = Vec::new();
    let mut points = Vec::new();
    for k in 1..=2 {
        let truth = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let o = rng.random_range(-0.5..0.5);
        let los = model.response(&los_geometry(truth, o, anchors[0]).unwrap());
        let refl = model.response(&feature_geometry(truth, o, image, 0.0).unwrap());
        let (a, b) = (cn(&mut rng, power_for(100.0, 15.0)), cn(&mut rng, power_for(30.0, 30.0)));
        let z: Vec<Complex64> = los.iter().zip(&refl).map(|(l, r)| a * l + b * r + cn(&mut rng, 1.0)).collect();
        frames.push(MeasurementFrame { k, z: vec![z] });
        for _ in 0..2 {
            let pos = [truth[0] + rng.random_range(-0.5..0.5), truth[1] + rng.random_range(-0.5..0.5)];
            points.push(QPoint {
                k,
                j: 0,
                visibility: rng.random_range(0.05..0.95),
                mt: MtState { position: pos, velocity: [0.0, 0.0], orientation: o + rng.random_range(-0.05..0.05) },
                gamma: power_for(100.0, 15.0) * rng.random_range(0.5..2.0),
                eta: rng.random_range(0.8..1.2),
                weight: 0.5,
            });
        }
    }
    GradToy { frames, anchors, points, map, model }
}

/// Relative error `|g - fd| / |g|` (vector 2-norms) over the given indices of
/// the map parameters, with central differences of step `h`.
pub fn theta_fd_error(toy: &GradToy, indices: &[usize], h: f64) -> (f64, f64) {
    let problem = QProblem { points: &toy.points, frames: &toy.frames, anchors: &toy.anchors };
    let g = q_tilde_grad(&problem, &toy.map, &toy.model, true, false).unwrap().grad_theta.unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in indices {
        let mut plus = toy.map.clone();
        let mut minus = toy.map.clone();
        let step = h * toy.map.params[i].abs().max(1.0);
        plus.params[i] += step;
        minus.params[i] -= step;
        let fd = (q_tilde(&problem, &plus, &toy.model).unwrap().value - q_tilde(&problem, &minus, &toy.model).unwrap().value) / (2.0 * step);
        num += (g[i] - fd).powi(2);
        den += g[i].powi(2);
    }
    (num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE), den.sqrt())
}

/// Same as [`theta_fd_error`] over every calibration entry.
pub fn chi_fd_error(toy: &GradToy, h: f64) -> (f64, f64) {
    let problem = QProblem { points: &toy.points, frames: &toy.frames, anchors: &toy.anchors };
    let g = q_tilde_grad(&problem, &toy.map, &toy.model, false, true).unwrap().grad_chi.unwrap();
    let base = toy.model.calibration.to_params();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut m = toy.model.clone();
            let mut p = base.clone();
            p[i] += delta;
            m.calibration.set_params(&p).unwrap();
            q_tilde(&problem, &toy.map, &m).unwrap().value
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        num += (g[i] - fd).powi(2);
        den += g[i].powi(2);
    }
    (num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE), den.sqrt())
}

use rfslam::filter::{run_filter, FilterConfig, FilterModels, FilterOutput};
use rfslam::models::Priors;
use rfslam::scenario::{synth_measurements, synth_truth, Scenario, ScenarioTruth, TrajectorySpec, Wall};

/// Simulated run with everything the tracker needs.
pub struct Experiment {
    pub scenario: Scenario,
    pub truth: ScenarioTruth,
    pub frames: Vec<MeasurementFrame>,
    pub model: ResponseModel,
    pub models: FilterModels,
}

impl Experiment {
    pub fn new(scenario: Scenario, model: ResponseModel) -> Self {
        let truth = synth_truth(&scenario).unwrap();
        let frames = synth_measurements(&scenario, &truth, &model).unwrap();
        let x0 = truth.mt_states[0];
        let priors = Priors {
            position_mean: x0.position,
            position_std: 0.3,
            velocity_mean: x0.velocity,
            velocity_std: 0.3,
            orientation_mean: x0.orientation,
            orientation_std: 0.05,
            los_prob: 0.9,
            los_gamma_mean: scenario.los_gamma_true[0],
            los_gamma_shape: 2.0,
            eta_mean: scenario.noise_eta_true[0],
            eta_shape: 100.0,
        };
        let mut models = FilterModels { priors, ..FilterModels::default() };
        models.los.appear_mean = scenario.los_gamma_true[0];
        models.los.dummy_mean = 1e-6 * scenario.los_gamma_true[0];
        Self { scenario, truth, frames, model, models }
    }

    pub fn anchors(&self) -> &[[f64; 2]] {
        &self.scenario.bs_positions
    }

    pub fn run(&self, features: &[Vec<rfslam::likelihood::MapFeature>], cfg: &FilterConfig) -> FilterOutput {
        run_filter(&self.frames, self.anchors(), &self.model, &self.models, features, Some(&self.truth.imu_orientation), cfg).unwrap()
    }

    /// Per-step position errors for `k = 1..K`.
    pub fn errors(&self, out: &FilterOutput) -> Vec<f64> {
        (1..self.truth.mt_states.len())
            .map(|k| {
                let (a, b) = (self.truth.mt_states[k].position, out.estimates[k].mt.position);
                (a[0] - b[0]).hypot(a[1] - b[1])
            })
            .collect()
    }
}

pub fn signal(bandwidth: f64, spacing: f64, antennas: usize) -> ResponseModel {
    ResponseModel::with_ula(SignalConfig::new(CARRIER, bandwidth, spacing, antennas).unwrap()).unwrap()
}

/// Three BSs around a square walk; LOS power set by the per-sample SNR at
/// 20 m.
pub fn three_bs_scenario(seed: u64, snr: f64, steps: usize) -> Scenario {
    Scenario {
        bs_positions: vec![[0.0, 20.0], [-18.0, -12.0], [18.0, -12.0]],
        walls: vec![],
        trajectory: TrajectorySpec {
            waypoints: vec![[-4.0, -4.0], [4.0, -4.0], [4.0, 4.0], [-4.0, 4.0], [-4.0, -4.0]],
            speed: 1.0,
            dt: 0.1,
            steps,
            sigma_o: 0.02,
        },
        blockages: vec![],
        los_gamma_true: vec![power_for(snr, 20.0); 3],
        mpc_gamma_scale: 0.25,
        noise_eta_true: vec![1.0; 3],
        seed,
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

pub fn wall(start: [f64; 2], end: [f64; 2]) -> Wall {
    Wall { start, end }
}
