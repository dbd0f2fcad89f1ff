//! Narrowband planar-wave response vectors.
//!
//! A path with delay `tau` and MT-local direction `u` produces the joint
//! frequency/array response `h = h_f(tau) ⊗ a(u)` of length `M = M_f * M_a`.
//! Frequency samples sit on the symmetric baseband grid
//! `f_m = (m - (M_f - 1) / 2) * spacing`, and both factors carry complex
//! calibration weights. Antenna positions may additionally be perturbed by
//! per-element offsets.
//!
//! The geometry helpers map MT/BS/feature positions to delays and local
//! directions. The MT-local direction is `R(o) * (target - p_mt) / distance`
//! with `R(o)` the counterclockwise rotation by `o`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{invalid, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Delays are floored to this value in synthesis and likelihood evaluation.
pub const MIN_DELAY: f64 = 1e-9;

const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SignalConfig {
    carrier: f64,
    bandwidth: f64,
    spacing: f64,
    freq_count: usize,
    antenna_count: usize,
    spectrum: Vec<Complex64>,
}

impl SignalConfig {
    /// Builds a configuration with a flat unit-magnitude baseband spectrum.
    pub fn new(carrier_hz: f64, bandwidth_hz: f64, spacing_hz: f64, antenna_count: usize) -> Result<Self> {
        for (name, v) in [("carrier", carrier_hz), ("bandwidth", bandwidth_hz), ("spacing", spacing_hz)] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{name} must be finite and positive, got {v}"));
            }
        }
        let freq_count = (bandwidth_hz / spacing_hz).round() as usize + 1;
        if freq_count < 2 {
            return invalid(format!("bandwidth/spacing yields {freq_count} frequency samples, need at least 2"));
        }
        if antenna_count == 0 {
            return invalid("antenna count must be at least 1");
        }
        Ok(Self {
            carrier: carrier_hz,
            bandwidth: bandwidth_hz,
            spacing: spacing_hz,
            freq_count,
            antenna_count,
            spectrum: vec![Complex64::new(1.0, 0.0); freq_count],
        })
    }

    /// Replaces the baseband spectrum samples `S(f_m)`; each must have unit magnitude.
    pub fn with_spectrum(mut self, spectrum: Vec<Complex64>) -> Result<Self> {
        if spectrum.len() != self.freq_count {
            return invalid(format!("spectrum has {} samples, expected {}", spectrum.len(), self.freq_count));
        }
        if let Some((m, s)) = spectrum.iter().enumerate().find(|(_, s)| (s.norm() - 1.0).abs() > 1e-12) {
            return invalid(format!("spectrum sample {m} has magnitude {}", s.norm()));
        }
        self.spectrum = spectrum;
        Ok(self)
    }

    pub fn carrier(&self) -> f64 {
        self.carrier
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn freq_count(&self) -> usize {
        self.freq_count
    }

    pub fn antenna_count(&self) -> usize {
        self.antenna_count
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    /// Total sample count `M = M_f * M_a`.
    pub fn len(&self) -> usize {
        self.freq_count * self.antenna_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Baseband frequency offset of sample `m` (zero-based).
    pub fn frequency(&self, m: usize) -> f64 {
        (m as f64 - (self.freq_count - 1) as f64 / 2.0) * self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength()
    }

    /// Unambiguous observation distance `c / spacing`.
    pub fn max_distance(&self) -> f64 {
        SPEED_OF_LIGHT / self.spacing
    }

    /// Free-space path-loss amplitude `c / (4 pi f_c tau)`.
    pub fn path_loss(&self, delay: f64) -> f64 {
        SPEED_OF_LIGHT / (4.0 * PI * self.carrier * delay)
    }
}

/// Antenna element positions in the MT frame, centered on the array origin.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    elements: Vec<[f64; 2]>,
}

impl ArrayGeometry {
    pub fn new(elements: Vec<[f64; 2]>) -> Result<Self> {
        if elements.is_empty() {
            return invalid("array needs at least one element");
        }
        let n = elements.len() as f64;
        let mean = elements.iter().fold([0.0, 0.0], |acc, e| [acc[0] + e[0] / n, acc[1] + e[1] / n]);
        if mean[0].abs() > 1e-12 || mean[1].abs() > 1e-12 {
            return invalid(format!("array elements are not centered (mean {mean:?})"));
        }
        Ok(Self { elements })
    }

    /// Shifts the given positions so their mean is the origin.
    pub fn centered(elements: Vec<[f64; 2]>) -> Result<Self> {
        if elements.is_empty() {
            return invalid("array needs at least one element");
        }
        let n = elements.len() as f64;
        let mean = elements.iter().fold([0.0, 0.0], |acc, e| [acc[0] + e[0] / n, acc[1] + e[1] / n]);
        Ok(Self { elements: elements.into_iter().map(|e| [e[0] - mean[0], e[1] - mean[1]]).collect() })
    }

    /// `count` elements along the local x-axis with the given spacing.
    pub fn uniform_linear(count: usize, spacing: f64) -> Result<Self> {
        let c = (count as f64 - 1.0) / 2.0;
        Self::new((0..count).map(|i| [(i as f64 - c) * spacing, 0.0]).collect())
    }

    pub fn elements(&self) -> &[[f64; 2]] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Calibration parameters of the response vector: frequency weights,
/// antenna weights and antenna position offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub freq_weights: Vec<Complex64>,
    pub antenna_weights: Vec<Complex64>,
    pub position_offsets: Vec<[f64; 2]>,
}

impl Calibration {
    /// The uncalibrated state: unit weights, zero offsets.
    pub fn identity(cfg: &SignalConfig) -> Self {
        Self {
            freq_weights: vec![Complex64::new(1.0, 0.0); cfg.freq_count()],
            antenna_weights: vec![Complex64::new(1.0, 0.0); cfg.antenna_count()],
            position_offsets: vec![[0.0, 0.0]; cfg.antenna_count()],
        }
    }

    pub fn validate(&self, cfg: &SignalConfig) -> Result<()> {
        if self.freq_weights.len() != cfg.freq_count() {
            return invalid(format!("{} frequency weights for {} samples", self.freq_weights.len(), cfg.freq_count()));
        }
        if self.antenna_weights.len() != cfg.antenna_count() || self.position_offsets.len() != cfg.antenna_count() {
            return invalid(format!(
                "antenna calibration lengths ({}, {}) do not match {} antennas",
                self.antenna_weights.len(),
                self.position_offsets.len(),
                cfg.antenna_count()
            ));
        }
        Ok(())
    }

    /// Length of the flat real parameter vector, `2 M_f + 4 M_a`.
    pub fn param_len(&self) -> usize {
        2 * self.freq_weights.len() + 4 * self.antenna_weights.len()
    }

    /// Flat layout: `[Re w_f, Im w_f, Re w_u, Im w_u, (dx, dy) per element]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend(self.freq_weights.iter().map(|w| w.re));
        out.extend(self.freq_weights.iter().map(|w| w.im));
        out.extend(self.antenna_weights.iter().map(|w| w.re));
        out.extend(self.antenna_weights.iter().map(|w| w.im));
        out.extend(self.position_offsets.iter().flat_map(|d| [d[0], d[1]]));
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return invalid(format!("calibration vector has {} entries, expected {}", params.len(), self.param_len()));
        }
        let mf = self.freq_weights.len();
        let ma = self.antenna_weights.len();
        for m in 0..mf {
            self.freq_weights[m] = Complex64::new(params[m], params[mf + m]);
        }
        let base = 2 * mf;
        for k in 0..ma {
            self.antenna_weights[k] = Complex64::new(params[base + k], params[base + ma + k]);
            self.position_offsets[k] = [params[base + 2 * ma + 2 * k], params[base + 2 * ma + 2 * k + 1]];
        }
        Ok(())
    }
}

/// Delay and MT-local unit direction of one propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathGeometry {
    pub delay: f64,
    pub direction: [f64; 2],
}

impl PathGeometry {
    pub fn azimuth(&self) -> f64 {
        self.direction[1].atan2(self.direction[0])
    }
}

/// Counterclockwise rotation of `v` by `angle`.
pub fn rotate(angle: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Direct path from the BS at `p_bs` to the MT at `p_mt` with orientation `o`.
pub fn los_geometry(p_mt: [f64; 2], orientation: f64, p_bs: [f64; 2]) -> Result<PathGeometry> {
    feature_geometry(p_mt, orientation, p_bs, 0.0)
}

/// Path from a point feature with an additive delay bias (seconds).
pub fn feature_geometry(p_mt: [f64; 2], orientation: f64, position: [f64; 2], bias: f64) -> Result<PathGeometry> {
    if !(bias >= 0.0) {
        return invalid(format!("delay bias must be non-negative, got {bias}"));
    }
    let g = [position[0] - p_mt[0], position[1] - p_mt[1]];
    let d = g[0].hypot(g[1]);
    if !(d > 0.0) {
        return invalid(format!("path endpoints coincide at {p_mt:?}"));
    }
    Ok(PathGeometry { delay: d / SPEED_OF_LIGHT + bias, direction: rotate(orientation, [g[0] / d, g[1] / d]) })
}

/// Non-failing geometry used inside likelihood evaluation. Coincident points
/// get the MT boresight direction and the delay is floored at [`MIN_DELAY`].
/// Returns the geometry and the (unfloored) distance.
pub(crate) fn path_geometry_floored(p_mt: [f64; 2], orientation: f64, target: [f64; 2], bias: f64) -> (PathGeometry, f64) {
    let g = [target[0] - p_mt[0], target[1] - p_mt[1]];
    let d = g[0].hypot(g[1]);
    let dir = if d > 1e-12 { [g[0] / d, g[1] / d] } else { [1.0, 0.0] };
    let delay = (d / SPEED_OF_LIGHT + bias).max(MIN_DELAY);
    (PathGeometry { delay, direction: rotate(orientation, dir) }, d)
}

/// Frequency response `h_f(tau)` including path loss and calibration weights.
pub fn frequency_response(delay: f64, cfg: &SignalConfig, cal: &Calibration) -> Result<Vec<Complex64>> {
    if !(delay > 0.0) {
        return invalid(format!("delay must be positive, got {delay}"));
    }
    cal.validate(cfg)?;
    let mut out = unweighted_frequency(delay, cfg);
    for (h, w) in out.iter_mut().zip(&cal.freq_weights) {
        *h *= w;
    }
    Ok(out)
}

/// Array response `a(u)` for an MT-local unit direction.
pub fn array_response(direction: [f64; 2], geo: &ArrayGeometry, cal: &Calibration, cfg: &SignalConfig) -> Result<Vec<Complex64>> {
    let norm = direction[0].hypot(direction[1]);
    if !((norm - 1.0).abs() <= UNIT_TOL) {
        return invalid(format!("direction must be a unit vector, norm is {norm}"));
    }
    check_array(geo, cal, cfg)?;
    let mut out = unweighted_array(direction, geo, cal, cfg);
    for (a, w) in out.iter_mut().zip(&cal.antenna_weights) {
        *a *= w;
    }
    Ok(out)
}

/// Joint response `h_f(tau) ⊗ a(u)`; entry `i * M_a + k` is `h_f[i] * a[k]`.
pub fn joint_response(
    delay: f64,
    direction: [f64; 2],
    cfg: &SignalConfig,
    geo: &ArrayGeometry,
    cal: &Calibration,
) -> Result<Vec<Complex64>> {
    let hf = frequency_response(delay, cfg, cal)?;
    let a = array_response(direction, geo, cal, cfg)?;
    Ok(kron(&hf, &a))
}

pub fn kron(x: &[Complex64], y: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(x.len() * y.len());
    for xi in x {
        out.extend(y.iter().map(|yk| xi * yk));
    }
    out
}

fn check_array(geo: &ArrayGeometry, cal: &Calibration, cfg: &SignalConfig) -> Result<()> {
    if geo.len() != cfg.antenna_count() {
        return invalid(format!("array has {} elements, config expects {}", geo.len(), cfg.antenna_count()));
    }
    cal.validate(cfg)
}

fn unweighted_frequency(delay: f64, cfg: &SignalConfig) -> Vec<Complex64> {
    let amp = cfg.path_loss(delay);
    cfg.spectrum
        .iter()
        .enumerate()
        .map(|(m, s)| s * Complex64::from_polar(amp, -2.0 * PI * cfg.frequency(m) * delay))
        .collect()
}

fn unweighted_array(direction: [f64; 2], geo: &ArrayGeometry, cal: &Calibration, cfg: &SignalConfig) -> Vec<Complex64> {
    let kw = cfg.wavenumber();
    geo.elements
        .iter()
        .zip(&cal.position_offsets)
        .map(|(e, d)| {
            let proj = direction[0] * (e[0] + d[0]) + direction[1] * (e[1] + d[1]);
            Complex64::from_polar(1.0, -kw * proj)
        })
        .collect()
}

/// A validated bundle of signal configuration, array geometry and
/// calibration, with the fast (non-validating) response evaluations used by
/// the likelihood engine.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseModel {
    pub signal: SignalConfig,
    pub array: ArrayGeometry,
    pub calibration: Calibration,
}

/// Response vector with its partial derivatives with respect to delay and
/// MT-local azimuth.
#[derive(Clone, Debug)]
pub struct ResponsePartials {
    pub response: Vec<Complex64>,
    pub d_delay: Vec<Complex64>,
    pub d_azimuth: Vec<Complex64>,
}

impl ResponseModel {
    pub fn new(signal: SignalConfig, array: ArrayGeometry, calibration: Calibration) -> Result<Self> {
        check_array(&array, &calibration, &signal)?;
        Ok(Self { signal, array, calibration })
    }

    /// Uncalibrated model with a half-wavelength uniform linear array.
    pub fn with_ula(signal: SignalConfig) -> Result<Self> {
        let array = ArrayGeometry::uniform_linear(signal.antenna_count(), signal.wavelength() / 2.0)?;
        let calibration = Calibration::identity(&signal);
        Self::new(signal, array, calibration)
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    fn parts(&self, delay: f64, direction: [f64; 2]) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        let hf0 = unweighted_frequency(delay, &self.signal);
        let a0 = unweighted_array(direction, &self.array, &self.calibration, &self.signal);
        let hf = hf0.iter().zip(&self.calibration.freq_weights).map(|(h, w)| h * w).collect();
        let a = a0.iter().zip(&self.calibration.antenna_weights).map(|(x, w)| x * w).collect();
        (hf0, hf, a0, a)
    }

    /// Joint response for a path; the delay is floored at [`MIN_DELAY`].
    pub fn response(&self, path: &PathGeometry) -> Vec<Complex64> {
        let (_, hf, _, a) = self.parts(path.delay.max(MIN_DELAY), path.direction);
        kron(&hf, &a)
    }

    /// Response and its derivatives with respect to delay and azimuth,
    /// where the direction is `(cos azimuth, sin azimuth)`.
    pub fn response_with_partials(&self, delay: f64, azimuth: f64) -> ResponsePartials {
        let delay = delay.max(MIN_DELAY);
        let (s, c) = azimuth.sin_cos();
        let (_, hf, _, a) = self.parts(delay, [c, s]);
        let kw = self.signal.wavenumber();
        let dhf: Vec<Complex64> = hf
            .iter()
            .enumerate()
            .map(|(m, h)| h * Complex64::new(-1.0 / delay, -2.0 * PI * self.signal.frequency(m)))
            .collect();
        let da: Vec<Complex64> = a
            .iter()
            .zip(self.array.elements.iter().zip(&self.calibration.position_offsets))
            .map(|(ak, (e, d))| {
                let proj = -s * (e[0] + d[0]) + c * (e[1] + d[1]);
                ak * Complex64::new(0.0, -kw * proj)
            })
            .collect();
        ResponsePartials { response: kron(&hf, &a), d_delay: kron(&dhf, &a), d_azimuth: kron(&hf, &da) }
    }

    /// Adds `2 Re(grad^T dh/dchi)` for every calibration parameter to `out`,
    /// using the flat layout of [`Calibration::to_params`].
    pub fn accumulate_calibration_gradient(&self, path: &PathGeometry, grad: &[Complex64], out: &mut [f64]) {
        let mf = self.signal.freq_count();
        let ma = self.signal.antenna_count();
        debug_assert_eq!(grad.len(), mf * ma);
        debug_assert_eq!(out.len(), 2 * mf + 4 * ma);
        let (hf0, hf, a0, a) = self.parts(path.delay.max(MIN_DELAY), path.direction);
        let kw = self.signal.wavenumber();
        for m in 0..mf {
            let row = &grad[m * ma..(m + 1) * ma];
            let s: Complex64 = row.iter().zip(&a).map(|(g, ak)| g * ak).sum::<Complex64>() * hf0[m];
            out[m] += 2.0 * s.re;
            out[mf + m] -= 2.0 * s.im;
        }
        let base = 2 * mf;
        for k in 0..ma {
            let col: Complex64 = (0..mf).map(|m| grad[m * ma + k] * hf[m]).sum();
            let t = col * a0[k];
            out[base + k] += 2.0 * t.re;
            out[base + ma + k] -= 2.0 * t.im;
            let v = col * a[k];
            out[base + 2 * ma + 2 * k] += 2.0 * kw * path.direction[0] * v.im;
            out[base + 2 * ma + 2 * k + 1] += 2.0 * kw * path.direction[1] * v.im;
        }
    }
}
