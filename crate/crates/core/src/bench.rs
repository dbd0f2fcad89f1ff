//! Timing harness for the low-rank likelihood against the dense oracle.

use std::fmt::Write as _;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::likelihood::{self, dense, CovarianceParams, LikelihoodInput, MapFeature};
use crate::models::gauss;
use crate::signal::{feature_geometry, los_geometry, ResponseModel, SignalConfig, SPEED_OF_LIGHT};

/// Antennas used by the sweep; `M_f = M / ANTENNAS`.
pub const ANTENNAS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub r: usize,
    pub batch: usize,
    /// Mean wall time per evaluation (ns), single thread.
    pub woodbury_ns: f64,
    pub dense_ns: f64,
    /// Largest relative difference between the two paths.
    pub max_rel_err: f64,
}

/// One random likelihood evaluation.
pub struct BenchInstance {
    pub z: Vec<Complex64>,
    pub anchor: [f64; 2],
    pub position: [f64; 2],
    pub orientation: f64,
    pub los: bool,
    pub los_variance: f64,
    pub noise_variance: f64,
    pub features: Vec<MapFeature>,
}

impl BenchInstance {
    pub fn params(&self) -> CovarianceParams<'_> {
        CovarianceParams {
            anchor: self.anchor,
            position: self.position,
            orientation: self.orientation,
            los: self.los,
            los_variance: self.los_variance,
            noise_variance: self.noise_variance,
            features: &self.features,
        }
    }
}

/// Response model with `M` samples on `ANTENNAS` antennas (or one antenna
/// when `M` is not divisible).
pub fn model_for(m: usize) -> Result<ResponseModel> {
    let ma = if m % ANTENNAS == 0 && m / ANTENNAS >= 2 { ANTENNAS } else { 1 };
    let mf = m / ma;
    if mf < 2 || mf * ma != m {
        return invalid(format!("cannot lay out M = {m}"));
    }
    ResponseModel::with_ula(SignalConfig::new(6e9, (mf - 1) as f64 * 1e6, 1e6, ma)?)
}

/// Average power giving `snr` against unit noise at distance `dist`.
fn power_for(model: &ResponseModel, snr: f64, dist: f64) -> f64 {
    let pl = model.signal.path_loss(dist / SPEED_OF_LIGHT);
    snr / (pl * pl)
}

fn cn(var: f64, rng: &mut ChaCha8Rng) -> Complex64 {
    let s = (var / 2.0).sqrt();
    Complex64::new(gauss(0.0, s, rng), gauss(0.0, s, rng))
}

/// Random instance with `d` features; the measurement is drawn from the
/// model it is evaluated under.
pub fn random_instance(model: &ResponseModel, d: usize, los: bool, rng: &mut ChaCha8Rng) -> Result<BenchInstance> {
    let position: [f64; 2] = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    let anchor: [f64; 2] = [rng.random_range(-20.0..20.0), rng.random_range(15.0..25.0)];
    let orientation = rng.random_range(-3.0..3.0);
    let features: Vec<MapFeature> = (0..d)
        .map(|_| {
            let p: [f64; 2] = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
            let dist = ((p[0] - position[0]).hypot(p[1] - position[1])).max(1.0);
            MapFeature { position: p, bias: rng.random_range(0.0..5e-9), variance: power_for(model, rng.random_range(1.0..30.0), dist) }
        })
        .collect();
    let noise_variance = rng.random_range(0.5..2.0);
    let los_dist = (anchor[0] - position[0]).hypot(anchor[1] - position[1]);
    let los_variance = power_for(model, rng.random_range(10.0..100.0), los_dist);
    let mut z: Vec<Complex64> = (0..model.len()).map(|_| cn(noise_variance, rng)).collect();
    if los {
        let h = model.response(&los_geometry(position, orientation, anchor)?);
        let a = cn(los_variance, rng);
        z.iter_mut().zip(&h).for_each(|(zi, hi)| *zi += a * hi);
    }
    for f in &features {
        let h = model.response(&feature_geometry(position, orientation, f.position, f.bias)?);
        let a = cn(f.variance, rng);
        z.iter_mut().zip(&h).for_each(|(zi, hi)| *zi += a * hi);
    }
    Ok(BenchInstance { z, anchor, position, orientation, los, los_variance, noise_variance, features })
}

/// Times `batch` low-rank evaluations and `dense_samples` dense ones at
/// size `m` and rank `r` (LOS column plus `r - 1` features).
pub fn bench_case(m: usize, r: usize, batch: usize, dense_samples: usize, seed: u64) -> Result<BenchRow> {
    if r == 0 || batch == 0 || dense_samples == 0 {
        return invalid("rank, batch and dense sample count must be positive");
    }
    let model = model_for(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<BenchInstance> = (0..batch).map(|_| random_instance(&model, r - 1, true, &mut rng)).collect::<Result<_>>()?;
    let inputs: Vec<LikelihoodInput> = instances.iter().map(|i| LikelihoodInput { z: &i.z, params: i.params() }).collect();

    let fast: Vec<f64> = inputs.iter().map(|i| likelihood::log_likelihood(i.z, &i.params, &model)).collect::<Result<_>>()?;
    let woodbury_ns = best_of(REPEATS, || {
        inputs.iter().for_each(|i| {
            std::hint::black_box(likelihood::log_likelihood(i.z, &i.params, &model).ok());
        })
    }) / batch as f64;

    let n = dense_samples.min(batch);
    let slow: Vec<f64> = inputs[..n].iter().map(|i| dense::log_likelihood(i.z, &i.params, &model)).collect::<Result<_>>()?;
    let dense_ns = best_of(REPEATS, || {
        inputs[..n].iter().for_each(|i| {
            std::hint::black_box(dense::log_likelihood(i.z, &i.params, &model).ok());
        })
    }) / n as f64;

    let max_rel_err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max);
    Ok(BenchRow { m, r, batch, woodbury_ns, dense_ns, max_rel_err })
}

/// Timed passes per path; the fastest is kept so cold caches and scheduler
/// hiccups do not leak into the scaling fit.
const REPEATS: usize = 3;

fn best_of(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("M,R,batch,woodbury_ns,dense_ns,max_rel_err\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.m, r.r, r.batch, r.woodbury_ns, r.dense_ns, r.max_rel_err);
    }
    s
}
