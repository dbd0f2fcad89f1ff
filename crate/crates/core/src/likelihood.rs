//! Identity-plus-low-rank Gaussian likelihood of one measurement vector.
//!
//! The covariance of `z` given the MT state, the LOS state and the noise
//! variance is
//!
//! ```text
//! C = eta I + r gamma h_lo h_lo^H + P (sum_n gamma_n h_n h_n^H) P^H
//! ```
//!
//! where `P = I - h_lo h_lo^H / |h_lo|^2` removes the LOS direction from the
//! map-feature contributions. Stacking the scaled columns into `U` gives
//! `C = eta I + U U^H`, and with the capacitance matrix
//! `G = I + U^H U / eta` the log-density
//!
//! ```text
//! log CN(z; 0, C) = -|q|^2 + |L^-1 B^H q|^2 - log det G - M log(pi eta)
//! ```
//!
//! (with `q = z / sqrt(eta)`, `B = U / sqrt(eta)`, `G = L L^H`) costs
//! `O(M R^2 + R^3)` instead of `O(M^3)`.
//!
//! The projector is applied to the feature columns before stacking, so that
//! `U U^H` reproduces the covariance above exactly. The [`dense`] module
//! evaluates the same density by assembling `C` explicitly and is kept as
//! the reference for every fast path here.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, dot_h, norm_sqr};
use crate::parallel;
use crate::signal::{path_geometry_floored, PathGeometry, ResponseModel};

/// Floor applied to the noise variance before evaluation.
pub const MIN_NOISE_VARIANCE: f64 = 1e-12;

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// One environment-induced point feature: position (m), delay bias (s) and
/// amplitude variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFeature {
    pub position: [f64; 2],
    pub bias: f64,
    pub variance: f64,
}

/// Everything the covariance of one BS measurement depends on.
#[derive(Clone, Copy, Debug)]
pub struct CovarianceParams<'a> {
    /// BS position.
    pub anchor: [f64; 2],
    /// MT position.
    pub position: [f64; 2],
    /// MT orientation (rad).
    pub orientation: f64,
    /// LOS existence bit `r`.
    pub los: bool,
    pub los_variance: f64,
    pub noise_variance: f64,
    pub features: &'a [MapFeature],
}

impl CovarianceParams<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return invalid(format!("noise variance must be positive, got {}", self.noise_variance));
        }
        if !(self.los_variance >= 0.0 && self.los_variance.is_finite()) {
            return invalid(format!("LOS variance must be non-negative, got {}", self.los_variance));
        }
        for (n, f) in self.features.iter().enumerate() {
            if !(f.variance >= 0.0 && f.variance.is_finite()) {
                return invalid(format!("feature {n} variance must be non-negative, got {}", f.variance));
            }
            if !(f.bias >= 0.0 && f.bias.is_finite()) {
                return invalid(format!("feature {n} bias must be non-negative, got {}", f.bias));
            }
            if !(f.position[0].is_finite() && f.position[1].is_finite()) {
                return invalid(format!("feature {n} position is not finite"));
            }
        }
        if !(self.position[0].is_finite() && self.position[1].is_finite() && self.orientation.is_finite()) {
            return invalid("MT state is not finite");
        }
        Ok(())
    }

    fn eta(&self) -> f64 {
        self.noise_variance.max(MIN_NOISE_VARIANCE)
    }

    fn los_path(&self) -> PathGeometry {
        path_geometry_floored(self.position, self.orientation, self.anchor, 0.0).0
    }

    fn feature_path(&self, f: &MapFeature) -> PathGeometry {
        path_geometry_floored(self.position, self.orientation, f.position, f.bias).0
    }
}

/// Factors of one Woodbury evaluation. `u`, `b` are column-major `M x R`;
/// `g` and `chol_g` are row-major `R x R`.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    pub u: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub q: Vec<Complex64>,
    pub g: Vec<Complex64>,
    pub chol_g: Vec<Complex64>,
    /// Number of active (non-zero variance) columns.
    pub rank: usize,
    pub noise_variance: f64,
    /// Diagonal jitter the Cholesky needed (normally 0).
    pub jitter: f64,
}

impl LowRankFactors {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn column(&self, i: usize) -> &[Complex64] {
        let m = self.len();
        &self.u[i * m..(i + 1) * m]
    }

    pub fn log_det_g(&self) -> f64 {
        linalg::log_det_from_cholesky(&self.chol_g, self.rank)
    }

    /// `|G^{-1/2} B^H q|^2`, the part of the quadratic form explained by `U`.
    pub fn explained_energy(&self) -> f64 {
        let m = self.len();
        let mut y: Vec<Complex64> = (0..self.rank).map(|i| dot_h(&self.b[i * m..(i + 1) * m], &self.q)).collect();
        linalg::solve_lower(&self.chol_g, self.rank, &mut y);
        norm_sqr(&y)
    }

    pub fn log_likelihood(&self) -> f64 {
        let m = self.len() as f64;
        -norm_sqr(&self.q) + self.explained_energy() - self.log_det_g() - m * (LN_PI + self.noise_variance.ln())
    }
}

/// `v - h (h^H v) / |h|^2`.
pub fn projector_apply(h: &[Complex64], v: &[Complex64]) -> Result<Vec<Complex64>> {
    if h.len() != v.len() {
        return invalid(format!("projector dimension mismatch: {} vs {}", h.len(), v.len()));
    }
    let s = norm_sqr(h);
    if !(s > 0.0) {
        return invalid("projector direction has zero norm");
    }
    let mut out = v.to_vec();
    project_in_place(h, s, &mut out);
    Ok(out)
}

#[inline]
fn project_in_place(h: &[Complex64], h_norm2: f64, v: &mut [Complex64]) {
    let coef = dot_h(h, v) / h_norm2;
    for (vi, hi) in v.iter_mut().zip(h) {
        *vi -= hi * coef;
    }
}

fn check_len(z: &[Complex64], model: &ResponseModel) -> Result<()> {
    if z.len() != model.len() {
        return invalid(format!("measurement has {} samples, model expects {}", z.len(), model.len()));
    }
    Ok(())
}

/// Unit-variance feature columns `P h_n` for features with positive variance,
/// already scaled by `sqrt(gamma_n)`.
fn feature_columns(params: &CovarianceParams, model: &ResponseModel, h_lo: &[Complex64], h_norm2: f64) -> Vec<Vec<Complex64>> {
    params
        .features
        .iter()
        .filter(|f| f.variance > 0.0)
        .map(|f| {
            let mut v = model.response(&params.feature_path(f));
            if h_norm2 > 0.0 {
                project_in_place(h_lo, h_norm2, &mut v);
            }
            let s = f.variance.sqrt();
            v.iter_mut().for_each(|x| *x *= s);
            v
        })
        .collect()
}

/// Builds `U`, `B`, `q`, `G` and the Cholesky factor of `G`. The LOS column
/// comes first when `r = 1`; zero-variance columns are dropped.
pub fn stack_factors(z: &[Complex64], params: &CovarianceParams, model: &ResponseModel) -> Result<LowRankFactors> {
    params.validate()?;
    check_len(z, model)?;
    let m = z.len();
    let eta = params.eta();
    let h_lo = model.response(&params.los_path());
    let h_norm2 = norm_sqr(&h_lo);

    let mut cols: Vec<Vec<Complex64>> = Vec::with_capacity(params.features.len() + 1);
    if params.los && params.los_variance > 0.0 {
        let s = params.los_variance.sqrt();
        cols.push(h_lo.iter().map(|x| x * s).collect());
    }
    cols.extend(feature_columns(params, model, &h_lo, h_norm2));
    let rank = cols.len();

    let u: Vec<Complex64> = cols.into_iter().flatten().collect();
    let scale = 1.0 / eta.sqrt();
    let b: Vec<Complex64> = u.iter().map(|x| x * scale).collect();
    let q: Vec<Complex64> = z.iter().map(|x| x * scale).collect();
    let mut g = vec![Complex64::new(0.0, 0.0); rank * rank];
    for i in 0..rank {
        for j in i..rank {
            let v = dot_h(&b[i * m..(i + 1) * m], &b[j * m..(j + 1) * m]);
            g[i * rank + j] = v;
            g[j * rank + i] = v.conj();
        }
        g[i * rank + i] += 1.0;
    }
    let (chol_g, jitter) = linalg::cholesky_jittered(&g, rank).map_err(|e| degeneracy(e, params))?;
    Ok(LowRankFactors { u, b, q, g, chol_g, rank, noise_variance: eta, jitter })
}

fn degeneracy(e: Error, params: &CovarianceParams) -> Error {
    match e {
        Error::NumericalDegeneracy(msg) => Error::NumericalDegeneracy(format!(
            "{msg}; position {:?}, orientation {}, r {}, gamma {:e}, eta {:e}, features {:?}",
            params.position, params.orientation, params.los as u8, params.los_variance, params.noise_variance, params.features
        )),
        other => other,
    }
}

/// `log CN(z; 0, C)` through the low-rank route.
pub fn log_likelihood(z: &[Complex64], params: &CovarianceParams, model: &ResponseModel) -> Result<f64> {
    Ok(stack_factors(z, params, model)?.log_likelihood())
}

/// Log-likelihoods for `r = 0` and `r = 1` at once (the `los` field of
/// `params` is ignored). The map-feature factorization is shared and the
/// LOS hypothesis borders it with one extra row and column.
pub fn log_likelihood_pair(z: &[Complex64], params: &CovarianceParams, model: &ResponseModel) -> Result<(f64, f64)> {
    params.validate()?;
    check_len(z, model)?;
    let m = z.len();
    let eta = params.eta();
    let scale = 1.0 / eta.sqrt();
    let h_lo = model.response(&params.los_path());
    let h_norm2 = norm_sqr(&h_lo);

    let b: Vec<Vec<Complex64>> = feature_columns(params, model, &h_lo, h_norm2)
        .into_iter()
        .map(|mut c| {
            c.iter_mut().for_each(|x| *x *= scale);
            c
        })
        .collect();
    let rank = b.len();
    let q: Vec<Complex64> = z.iter().map(|x| x * scale).collect();

    let mut g = vec![Complex64::new(0.0, 0.0); rank * rank];
    for i in 0..rank {
        for j in i..rank {
            let v = dot_h(&b[i], &b[j]);
            g[i * rank + j] = v;
            g[j * rank + i] = v.conj();
        }
        g[i * rank + i] += 1.0;
    }
    let (l, _) = linalg::cholesky_jittered(&g, rank).map_err(|e| degeneracy(e, params))?;
    let mut y: Vec<Complex64> = b.iter().map(|bi| dot_h(bi, &q)).collect();
    linalg::solve_lower(&l, rank, &mut y);

    let base = -norm_sqr(&q) - m as f64 * (LN_PI + eta.ln());
    let without = base + norm_sqr(&y) - linalg::log_det_from_cholesky(&l, rank);
    if params.los_variance == 0.0 {
        return Ok((without, without));
    }

    // Border G with the LOS column b0 = sqrt(gamma / eta) h_lo.
    let s0 = (params.los_variance / eta).sqrt();
    let mut border: Vec<Complex64> = b.iter().map(|bi| dot_h(bi, &h_lo) * s0).collect();
    linalg::solve_lower(&l, rank, &mut border);
    let delta2 = 1.0 + s0 * s0 * h_norm2 - norm_sqr(&border);
    if !(delta2 > 0.0 && delta2.is_finite()) {
        return Err(degeneracy(Error::NumericalDegeneracy(format!("LOS border pivot {delta2:e}")), params));
    }
    let c = dot_h(&h_lo, &q) * s0;
    let y_last = (c - dot_h(&border, &y)) / delta2.sqrt();
    Ok((without, without + y_last.norm_sqr() - delta2.ln()))
}

/// Partial derivatives of the log-likelihood of one feature column.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FeatureSensitivity {
    pub variance: f64,
    pub delay: f64,
    /// With respect to the MT-local azimuth of the feature direction.
    pub azimuth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodSensitivities {
    pub value: f64,
    pub los_variance: f64,
    pub noise_variance: f64,
    pub features: Vec<FeatureSensitivity>,
    /// Gradient over the flat calibration vector, when requested.
    pub calibration: Option<Vec<f64>>,
    /// Geometry of each feature path at which the partials were taken.
    pub feature_paths: Vec<PathGeometry>,
}

/// Analytic partials of `log CN(z; 0, C)`.
///
/// For a real parameter `x`, `d l / d x = z^H C^-1 C_x C^-1 z - tr(C^-1 C_x)`.
/// Every parameter here moves at most one column `u_i` of `U` (or `eta`), so
/// with `w = C^-1 z` and `y_i = C^-1 u_i` the derivative collapses to
/// `2 Re(c_i^T du_i)` where `c_i = (u_i^H w) conj(w) - conj(y_i)`. Both `w`
/// and `y_i` come from the Woodbury form; `C` is never formed.
pub fn likelihood_sensitivities(
    z: &[Complex64],
    params: &CovarianceParams,
    model: &ResponseModel,
    with_calibration: bool,
) -> Result<LikelihoodSensitivities> {
    params.validate()?;
    check_len(z, model)?;
    let m = z.len();
    let eta = params.eta();
    let los_path = params.los_path();
    let h_lo = model.response(&los_path);
    let h_norm2 = norm_sqr(&h_lo);
    let d = params.features.len();

    // Unprojected responses with partials; projected unit-variance columns.
    let mut paths = Vec::with_capacity(d);
    let mut partials = Vec::with_capacity(d);
    let mut projected = Vec::with_capacity(d);
    for f in params.features {
        let path = params.feature_path(f);
        let p = model.response_with_partials(path.delay, path.azimuth());
        let mut v = p.response.clone();
        project_in_place(&h_lo, h_norm2, &mut v);
        paths.push(path);
        partials.push(p);
        projected.push(v);
    }

    let los_col = params.los as usize;
    let rank = los_col + d;
    let mut u: Vec<Complex64> = Vec::with_capacity(rank * m);
    if params.los {
        let s = params.los_variance.sqrt();
        u.extend(h_lo.iter().map(|x| x * s));
    }
    for (f, v) in params.features.iter().zip(&projected) {
        let s = f.variance.sqrt();
        u.extend(v.iter().map(|x| x * s));
    }
    let col = |i: usize| &u[i * m..(i + 1) * m];

    let mut g = vec![Complex64::new(0.0, 0.0); rank * rank];
    for i in 0..rank {
        for j in i..rank {
            let v = dot_h(col(i), col(j)) / eta;
            g[i * rank + j] = v;
            g[j * rank + i] = v.conj();
        }
        g[i * rank + i] += 1.0;
    }
    let (l, _) = linalg::cholesky_jittered(&g, rank).map_err(|e| degeneracy(e, params))?;
    let g_inv = linalg::inverse_from_cholesky(&l, rank);

    // w = C^-1 z
    let a: Vec<Complex64> = (0..rank).map(|i| dot_h(col(i), z)).collect();
    let mut x = a.clone();
    linalg::solve_lower(&l, rank, &mut x);
    linalg::solve_lower_adjoint(&l, rank, &mut x);
    let mut w: Vec<Complex64> = z.to_vec();
    for i in 0..rank {
        let xi = x[i] / eta;
        for (wm, um) in w.iter_mut().zip(col(i)) {
            *wm -= um * xi;
        }
    }
    w.iter_mut().for_each(|v| *v /= eta);

    let quad = dot_h(z, &w).re;
    let value = -quad - linalg::log_det_from_cholesky(&l, rank) - m as f64 * (LN_PI + eta.ln());

    let trace_g_inv: f64 = (0..rank).map(|i| g_inv[i * rank + i].re).sum();
    let d_eta = norm_sqr(&w) - (m as f64 - (rank as f64 - trace_g_inv)) / eta;

    // v^H C^-1 v for a direction v, via Woodbury.
    let inv_quad = |v: &[Complex64]| -> f64 {
        let mut t: Vec<Complex64> = (0..rank).map(|i| dot_h(col(i), v)).collect();
        linalg::solve_lower(&l, rank, &mut t);
        (norm_sqr(v) - norm_sqr(&t) / eta) / eta
    };
    let d_los = if params.los { dot_h(&h_lo, &w).norm_sqr() - inv_quad(&h_lo) } else { 0.0 };

    // c_i = (u_i^H w) conj(w) - conj(y_i), y_i = (1/eta) U G^-1 e_i
    let c_vec = |i: usize| -> Vec<Complex64> {
        let ai = dot_h(col(i), &w);
        let mut y = vec![Complex64::new(0.0, 0.0); m];
        for l_ in 0..rank {
            let coef = g_inv[l_ * rank + i] / eta;
            for (ym, um) in y.iter_mut().zip(col(l_)) {
                *ym += um * coef;
            }
        }
        w.iter().zip(&y).map(|(wm, ym)| ai * wm.conj() - ym.conj()).collect()
    };

    let mut grad_h = if with_calibration { Some(vec![Complex64::new(0.0, 0.0); m]) } else { None };
    if let (Some(gh), true) = (grad_h.as_mut(), params.los) {
        let s = params.los_variance.sqrt();
        for (g_, c) in gh.iter_mut().zip(c_vec(0)) {
            *g_ += c * s;
        }
    }

    let mut features = Vec::with_capacity(d);
    let mut grad_v: Vec<Vec<Complex64>> = Vec::with_capacity(if with_calibration { d } else { 0 });
    for n in 0..d {
        let gamma = params.features[n].variance;
        let vt = &projected[n];
        let d_var = dot_h(vt, &w).norm_sqr() - inv_quad(vt);
        let sg = gamma.sqrt();
        let cn = c_vec(los_col + n);
        // gradient with respect to the unprojected response: sqrt(gamma) P^T c_n
        let mut gv: Vec<Complex64> = cn.iter().map(|c| c.conj()).collect();
        project_in_place(&h_lo, h_norm2, &mut gv);
        gv.iter_mut().for_each(|x| *x = x.conj() * sg);
        let pn = &partials[n];
        let d_delay = 2.0 * gv.iter().zip(&pn.d_delay).map(|(a_, b_)| (a_ * b_).re).sum::<f64>();
        let d_az = 2.0 * gv.iter().zip(&pn.d_azimuth).map(|(a_, b_)| (a_ * b_).re).sum::<f64>();
        features.push(FeatureSensitivity { variance: d_var, delay: d_delay, azimuth: d_az });

        if let Some(gh) = grad_h.as_mut() {
            // projector dependence on h_lo
            let v = &pn.response;
            let alpha = dot_h(&h_lo, v);
            let kappa: Complex64 = cn.iter().zip(&h_lo).map(|(c, h)| c * h).sum();
            let ka = 2.0 * (kappa * alpha).re / (h_norm2 * h_norm2);
            for mm in 0..m {
                gh[mm] += sg * (-(alpha * cn[mm]) / h_norm2 - kappa.conj() * v[mm].conj() / h_norm2 + h_lo[mm].conj() * ka);
            }
            grad_v.push(gv);
        }
    }

    let calibration = grad_h.map(|gh| {
        let mut out = vec![0.0; model.calibration.param_len()];
        model.accumulate_calibration_gradient(&los_path, &gh, &mut out);
        for (path, gv) in paths.iter().zip(&grad_v) {
            model.accumulate_calibration_gradient(path, gv, &mut out);
        }
        out
    });

    Ok(LikelihoodSensitivities {
        value,
        los_variance: d_los,
        noise_variance: d_eta,
        features,
        calibration,
        feature_paths: paths,
    })
}

/// One element of a likelihood batch.
#[derive(Clone, Copy, Debug)]
pub struct LikelihoodInput<'a> {
    pub z: &'a [Complex64],
    pub params: CovarianceParams<'a>,
}

/// `(r = 0, r = 1)` log-likelihood pairs for every input, in input order.
/// Runs on the rayon pool when the `parallel` feature is enabled; errors are
/// reported per element.
pub fn batch_log_likelihood(items: &[LikelihoodInput], model: &ResponseModel) -> Vec<Result<(f64, f64)>> {
    parallel::map_ordered(items, |it| log_likelihood_pair(it.z, &it.params, model))
}

/// Same as [`batch_log_likelihood`] but always on the calling thread.
pub fn batch_log_likelihood_sequential(items: &[LikelihoodInput], model: &ResponseModel) -> Vec<Result<(f64, f64)>> {
    items.iter().map(|it| log_likelihood_pair(it.z, &it.params, model)).collect()
}

/// Reference evaluation that assembles the `M x M` covariance directly from
/// the LOS outer product and the projected map-feature sum, then factors it
/// densely. `O(M^3)`; used by tests and the benchmark harness.
pub mod dense {
    use nalgebra::{Cholesky, DMatrix, DVector};
    use num_complex::Complex64;

    use super::{check_len, CovarianceParams, LN_PI};
    use crate::error::{Error, Result};
    use crate::signal::ResponseModel;

    pub fn covariance(params: &CovarianceParams, model: &ResponseModel) -> Result<DMatrix<Complex64>> {
        params.validate()?;
        let m = model.len();
        let eta = params.eta();
        let h = DVector::from_vec(model.response(&params.los_path()));
        let hh = h.adjoint();
        let s = h.norm_squared();

        let mut feat = DMatrix::<Complex64>::zeros(m, m);
        for f in params.features {
            let v = DVector::from_vec(model.response(&params.feature_path(f)));
            feat.gerc(Complex64::new(f.variance, 0.0), &v, &v, Complex64::new(1.0, 0.0));
        }
        // P A P^H with P = I - h h^H / s, applied from both sides
        let row = &hh * &feat / Complex64::new(s, 0.0);
        let pa = &feat - &h * row;
        let col = &pa * &h / Complex64::new(s, 0.0);
        let pap = &pa - col * &hh;

        let mut c = pap;
        if params.los {
            c += &h * &hh * Complex64::new(params.los_variance, 0.0);
        }
        for i in 0..m {
            c[(i, i)] += eta;
        }
        Ok(c)
    }

    pub fn log_likelihood(z: &[Complex64], params: &CovarianceParams, model: &ResponseModel) -> Result<f64> {
        check_len(z, model)?;
        let c = covariance(params, model)?;
        let m = c.nrows();
        let chol = Cholesky::new(c).ok_or_else(|| Error::NumericalDegeneracy("dense covariance is not positive definite".into()))?;
        let zv = DVector::from_column_slice(z);
        let x = chol.solve(&zv);
        let quad = zv.dotc(&x).re;
        let l = chol.l_dirty();
        let log_det: f64 = 2.0 * (0..m).map(|i| l[(i, i)].re.ln()).sum::<f64>();
        Ok(-quad - log_det - m as f64 * LN_PI)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{SignalConfig, SPEED_OF_LIGHT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn crandn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale).collect()
    }

    /// Variance giving per-sample SNR `snr` (against unit noise) at `dist` metres.
    fn power_for(snr: f64, dist: f64) -> f64 {
        let pl = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * 6e9 * (dist / SPEED_OF_LIGHT));
        snr / (pl * pl)
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng, d: usize) -> (Vec<MapFeature>, [f64; 2], [f64; 2], f64, f64, f64) {
        let feats = (0..d)
            .map(|_| MapFeature {
                position: [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
                bias: rng.random_range(0.0..5e-9),
                variance: power_for(rng.random_range(0.05..2.0), 20.0),
            })
            .collect();
        let anchor = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let pos = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        (feats, anchor, pos, rng.random_range(-3.0..3.0), power_for(rng.random_range(0.1..3.0), 20.0), rng.random_range(0.5..2.0))
    }

    fn model(mf_bw: f64, ma: usize) -> ResponseModel {
        ResponseModel::with_ula(SignalConfig::new(6e9, mf_bw, 2e6, ma).unwrap()).unwrap()
    }

    #[test]
    fn projector_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = crandn(&mut rng, 12, 1.0);
        let p = projector_apply(&h, &h).unwrap();
        assert!(norm_sqr(&p) < 1e-24);
        let v = crandn(&mut rng, 12, 1.0);
        let pv = projector_apply(&h, &v).unwrap();
        assert!(dot_h(&h, &pv).norm() < 1e-12);
        let ppv = projector_apply(&h, &pv).unwrap();
        for (a, b) in ppv.iter().zip(&pv) {
            assert!((a - b).norm() < 1e-12);
        }
        // v orthogonal to h is fixed
        let unchanged = projector_apply(&h, &pv).unwrap();
        assert!(unchanged.iter().zip(&pv).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!(projector_apply(&vec![Complex64::new(0.0, 0.0); 12], &v).is_err());
    }

    #[test]
    fn pure_noise_and_scalar_capacitance() {
        let model = model(10e6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = crandn(&mut rng, model.len(), 2.0);
        let base = CovarianceParams {
            anchor: [10.0, 3.0],
            position: [0.0, 0.0],
            orientation: 0.2,
            los: false,
            los_variance: 4e-10,
            noise_variance: 0.7,
            features: &[],
        };
        let f = stack_factors(&z, &base, &model).unwrap();
        assert_eq!(f.rank, 0);
        let m = model.len() as f64;
        let expected = -norm_sqr(&z) / 0.7 - m * (std::f64::consts::PI * 0.7).ln();
        assert!((f.log_likelihood() - expected).abs() < 1e-10 * expected.abs());

        let los = CovarianceParams { los: true, ..base };
        let f = stack_factors(&z, &los, &model).unwrap();
        assert_eq!(f.rank, 1);
        let h = model.response(&los.los_path());
        let g = 1.0 + 4e-10 * norm_sqr(&h) / 0.7;
        assert!((f.g[0].re - g).abs() < 1e-12 * g);
    }

    #[test]
    fn low_rank_matches_dense_covariance_and_density() {
        let model = model(30e6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in [0, 1, 3] {
            for los in [false, true] {
                let (feats, anchor, pos, o, gamma, eta) = random_instance(&mut rng, d);
                let params = CovarianceParams { anchor, position: pos, orientation: o, los, los_variance: gamma, noise_variance: eta, features: &feats };
                let z = crandn(&mut rng, model.len(), 3.0);
                let f = stack_factors(&z, &params, &model).unwrap();
                let c = dense::covariance(&params, &model).unwrap();
                let m = model.len();
                let mut diff = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        let mut v: Complex64 = (0..f.rank).map(|r| f.u[r * m + i] * f.u[r * m + j].conj()).sum();
                        if i == j {
                            v += f.noise_variance;
                        }
                        diff += (v - c[(i, j)]).norm_sqr();
                    }
                }
                assert!(diff.sqrt() <= 1e-10 * c.norm(), "d={d} los={los} diff={}", diff.sqrt());
                let fast = f.log_likelihood();
                let slow = dense::log_likelihood(&z, &params, &model).unwrap();
                assert!((fast - slow).abs() <= 1e-8 * slow.abs(), "d={d} los={los} {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn feature_columns_are_orthogonal_to_los() {
        let model = model(30e6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (feats, anchor, pos, o, gamma, eta) = random_instance(&mut rng, 4);
        let params = CovarianceParams { anchor, position: pos, orientation: o, los: true, los_variance: gamma, noise_variance: eta, features: &feats };
        let z = crandn(&mut rng, model.len(), 1.0);
        let f = stack_factors(&z, &params, &model).unwrap();
        let h = f.column(0).to_vec();
        for i in 1..f.rank {
            let c = f.column(i);
            let cos = dot_h(&h, c).norm() / (norm_sqr(&h) * norm_sqr(c)).sqrt();
            assert!(cos < 1e-10);
        }
    }

    #[test]
    fn scaling_measurement_only_moves_quadratic_terms() {
        let model = model(30e6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (feats, anchor, pos, o, gamma, eta) = random_instance(&mut rng, 2);
        let params = CovarianceParams { anchor, position: pos, orientation: o, los: true, los_variance: gamma, noise_variance: eta, features: &feats };
        let z = crandn(&mut rng, model.len(), 1.0);
        let alpha = Complex64::new(1.3, -0.4);
        let za: Vec<Complex64> = z.iter().map(|x| x * alpha).collect();
        let f = stack_factors(&z, &params, &model).unwrap();
        let quad = norm_sqr(&f.q) - f.explained_energy();
        let l1 = f.log_likelihood();
        let l2 = log_likelihood(&za, &params, &model).unwrap();
        let expected = -(alpha.norm_sqr() - 1.0) * quad;
        assert!(((l2 - l1) - expected).abs() < 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn pair_matches_independent_evaluations() {
        let model = model(30e6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for d in [0, 2, 5] {
            let (feats, anchor, pos, o, gamma, eta) = random_instance(&mut rng, d);
            let p0 = CovarianceParams { anchor, position: pos, orientation: o, los: false, los_variance: gamma, noise_variance: eta, features: &feats };
            let p1 = CovarianceParams { los: true, ..p0 };
            let z = crandn(&mut rng, model.len(), 2.0);
            let (a, b) = log_likelihood_pair(&z, &p0, &model).unwrap();
            assert!((a - log_likelihood(&z, &p0, &model).unwrap()).abs() < 1e-10 * a.abs());
            assert!((b - log_likelihood(&z, &p1, &model).unwrap()).abs() < 1e-10 * b.abs());

            let silent = CovarianceParams { los_variance: 0.0, ..p0 };
            let (a, b) = log_likelihood_pair(&z, &silent, &model).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn eta_partial_of_pure_noise() {
        let model = model(10e6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = crandn(&mut rng, model.len(), 2.0);
        let params = CovarianceParams { anchor: [3.0, 3.0], position: [0.0, 0.0], orientation: 0.0, los: false, los_variance: 1.0, noise_variance: 0.4, features: &[] };
        let s = likelihood_sensitivities(&z, &params, &model, false).unwrap();
        let expected = norm_sqr(&z) / 0.16 - model.len() as f64 / 0.4;
        assert!((s.noise_variance - expected).abs() < 1e-10 * expected.abs());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let model = model(10e6, 2);
        let z = vec![Complex64::new(0.0, 0.0); model.len()];
        let p = CovarianceParams { anchor: [3.0, 3.0], position: [0.0, 0.0], orientation: 0.0, los: false, los_variance: 1.0, noise_variance: 0.0, features: &[] };
        assert!(matches!(log_likelihood(&z, &p, &model), Err(Error::InvalidArgument(_))));
        let p = CovarianceParams { noise_variance: 1.0, los_variance: -1.0, ..p };
        assert!(log_likelihood(&z, &p, &model).is_err());
        let p = CovarianceParams { los_variance: 1.0, ..p };
        assert!(log_likelihood(&z[1..], &p, &model).is_err());
    }

    fn rel_close(a: f64, b: f64, tol: f64, scale: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(scale)
    }

    #[test]
    fn sensitivities_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = model(14e6, 2);
        // non-trivial calibration so the chain through the weights is exercised
        let mut chi = model.calibration.to_params();
        for x in chi.iter_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
        model.calibration.set_params(&chi).unwrap();

        for trial in 0..6 {
            let (feats, anchor, pos, o, gamma, eta) = random_instance(&mut rng, 3);
            let los = trial % 2 == 0;
            let params = CovarianceParams { anchor, position: pos, orientation: o, los, los_variance: gamma, noise_variance: eta, features: &feats };
            let z = crandn(&mut rng, model.len(), 3.0);
            let s = likelihood_sensitivities(&z, &params, &model, true).unwrap();
            let l0 = log_likelihood(&z, &params, &model).unwrap();
            assert!((s.value - l0).abs() < 1e-9 * l0.abs());
            let scale = 1e-6 * l0.abs();

            let fd = |f: &dyn Fn(f64) -> f64, x: f64| {
                let h = 1e-5 * x.abs().max(1e-30);
                (f(x + h) - f(x - h)) / (2.0 * h)
            };
            let d_eta = fd(&|e| log_likelihood(&z, &CovarianceParams { noise_variance: e, ..params }, &model).unwrap(), eta);
            assert!(rel_close(s.noise_variance * eta, d_eta * eta, 1e-4, scale), "eta {} {}", s.noise_variance, d_eta);
            if los {
                let d_g = fd(&|g| log_likelihood(&z, &CovarianceParams { los_variance: g, ..params }, &model).unwrap(), gamma);
                assert!(rel_close(s.los_variance * gamma, d_g * gamma, 1e-4, scale), "gamma {} {}", s.los_variance, d_g);
            }
            for n in 0..feats.len() {
                let with = |f: MapFeature| {
                    let mut fs = feats.clone();
                    fs[n] = f;
                    log_likelihood(&z, &CovarianceParams { features: &fs, ..params }, &model).unwrap()
                };
                let fv = feats[n].variance;
                let d_v = fd(&|v| with(MapFeature { variance: v, ..feats[n] }), fv);
                assert!(rel_close(s.features[n].variance * fv, d_v * fv, 1e-4, scale), "var {n}");
                let hb = 1e-13;
                let b = feats[n].bias.max(2.0 * hb);
                let d_tau = (with(MapFeature { bias: b + hb, ..feats[n] }) - with(MapFeature { bias: b - hb, ..feats[n] })) / (2.0 * hb);
                let s_b = likelihood_sensitivities(&z, &CovarianceParams { features: &{
                    let mut fs = feats.clone();
                    fs[n].bias = b;
                    fs
                }, ..params }, &model, false).unwrap();
                assert!(rel_close(s_b.features[n].delay * 1e-9, d_tau * 1e-9, 1e-4, scale), "delay {n} {} {}", s_b.features[n].delay, d_tau);
                // rotate the feature about the MT: distance fixed, azimuth moves
                let rel = [feats[n].position[0] - pos[0], feats[n].position[1] - pos[1]];
                let rot = |a: f64| {
                    let r = crate::signal::rotate(a, rel);
                    with(MapFeature { position: [pos[0] + r[0], pos[1] + r[1]], ..feats[n] })
                };
                let ha = 1e-6;
                let d_az = (rot(ha) - rot(-ha)) / (2.0 * ha);
                assert!(rel_close(s.features[n].azimuth, d_az, 1e-4, scale), "azimuth {n} {} {}", s.features[n].azimuth, d_az);
            }
            let grad = s.calibration.as_ref().unwrap();
            for (i, g) in grad.iter().enumerate() {
                let eval = |dx: f64| {
                    let mut m2 = model.clone();
                    let mut c = chi.clone();
                    c[i] += dx;
                    m2.calibration.set_params(&c).unwrap();
                    log_likelihood(&z, &params, &m2).unwrap()
                };
                let h = if i >= 2 * model.signal.freq_count() + 2 * model.signal.antenna_count() { 1e-7 } else { 1e-6 };
                let d = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(rel_close(*g, d, 1e-4, scale), "chi {i}: {g} vs {d}");
            }
        }
    }
}
