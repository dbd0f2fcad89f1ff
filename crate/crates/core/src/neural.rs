//! Neural multipath map: BS position -> D point features.
//!
//! The BS position is normalized by the scene extent and expanded with
//! sinusoidal encodings; two ReLU MLPs map the encoding to feature
//! positions plus delay biases (`f_p`, 3 outputs per feature) and to
//! amplitude variances (`f_rho`, 1 output per feature). Biases and
//! variances pass through `|.|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::likelihood::MapFeature;
use crate::signal::SPEED_OF_LIGHT;

/// Geometry dimension.
pub const DIM: usize = 2;

/// Scale applied to He-initialized output-layer weights so the initial map
/// is governed by the output biases.
const OUTPUT_WEIGHT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapArchitecture {
    /// Features per BS (D).
    pub features: usize,
    /// Encoding frequencies per coordinate.
    pub encodings: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Scene extent (m): input normalization and position output scale.
    pub extent: f64,
    /// Variance output scale.
    pub gamma_scale: f64,
}

impl Default for MapArchitecture {
    fn default() -> Self {
        Self { features: 6, encodings: 4, hidden1: 64, hidden2: 64, extent: 1.0, gamma_scale: 1.0 }
    }
}

impl MapArchitecture {
    pub fn input_dim(&self) -> usize {
        DIM * (1 + self.encodings)
    }

    fn net_shapes(&self) -> [[(usize, usize); 3]; 2] {
        let (i, h1, h2) = (self.input_dim(), self.hidden1, self.hidden2);
        [[(h1, i), (h2, h1), ((DIM + 1) * self.features, h2)], [(h1, i), (h2, h1), (self.features, h2)]]
    }

    /// Total length of the flat parameter vector.
    pub fn param_count(&self) -> usize {
        self.net_shapes().iter().flatten().map(|(o, i)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return invalid("map architecture needs D, L1, L2 >= 1");
        }
        if !(self.extent > 0.0 && self.gamma_scale > 0.0) {
            return invalid("map extent and gamma_scale must be positive");
        }
        Ok(())
    }
}

/// `[p / extent, sin(2^i pi p / extent) ...]`, coordinates grouped per
/// frequency.
pub fn encode_position(p_bs: [f64; 2], encodings: usize, extent: f64) -> Vec<f64> {
    let pn = [p_bs[0] / extent, p_bs[1] / extent];
    let mut out = Vec::with_capacity(DIM * (1 + encodings));
    out.extend_from_slice(&pn);
    for i in 0..encodings {
        let f = (1u64 << i) as f64 * std::f64::consts::PI;
        out.extend(pn.iter().map(|x| (f * x).sin()));
    }
    out
}

/// Upstream gradient of a scalar objective with respect to one feature.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FeatureGrad {
    pub position: [f64; 2],
    pub bias: f64,
    pub variance: f64,
}

struct Layer {
    offset: usize,
    out: usize,
    inp: usize,
}

fn layers(arch: &MapArchitecture) -> [[Layer; 3]; 2] {
    let shapes = arch.net_shapes();
    let mut off = 0;
    let mut mk = |(o, i): (usize, usize)| {
        let l = Layer { offset: off, out: o, inp: i };
        off += o * i + o;
        l
    };
    let p = [mk(shapes[0][0]), mk(shapes[0][1]), mk(shapes[0][2])];
    let r = [mk(shapes[1][0]), mk(shapes[1][1]), mk(shapes[1][2])];
    [p, r]
}

fn affine(params: &[f64], l: &Layer, x: &[f64]) -> Vec<f64> {
    let w = &params[l.offset..l.offset + l.out * l.inp];
    let b = &params[l.offset + l.out * l.inp..l.offset + l.out * l.inp + l.out];
    (0..l.out).map(|o| b[o] + w[o * l.inp..(o + 1) * l.inp].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

struct Trace {
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    out: Vec<f64>,
}

fn forward(params: &[f64], net: &[Layer; 3], x: &[f64]) -> Trace {
    let pre1 = affine(params, &net[0], x);
    let act1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
    let pre2 = affine(params, &net[1], &act1);
    let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
    let out = affine(params, &net[2], &act2);
    Trace { pre1, act1, pre2, act2, out }
}

/// Accumulates `d out / d theta` given `d out` into `grad`.
fn backward_net(params: &[f64], net: &[Layer; 3], x: &[f64], t: &Trace, d_out: &[f64], grad: &mut [f64]) {
    let back = |l: &Layer, input: &[f64], d: &[f64], grad: &mut [f64]| -> Vec<f64> {
        let w = &params[l.offset..l.offset + l.out * l.inp];
        let mut d_in = vec![0.0; l.inp];
        for o in 0..l.out {
            if d[o] == 0.0 {
                continue;
            }
            let row = l.offset + o * l.inp;
            for i in 0..l.inp {
                grad[row + i] += d[o] * input[i];
                d_in[i] += d[o] * w[o * l.inp + i];
            }
            grad[l.offset + l.out * l.inp + o] += d[o];
        }
        d_in
    };
    let d_act2 = back(&net[2], &t.act2, d_out, grad);
    let d_pre2: Vec<f64> = d_act2.iter().zip(&t.pre2).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
    let d_act1 = back(&net[1], &t.act1, &d_pre2, grad);
    let d_pre1: Vec<f64> = d_act1.iter().zip(&t.pre1).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
    back(&net[0], x, &d_pre1, grad);
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralMap {
    pub arch: MapArchitecture,
    pub params: Vec<f64>,
}

impl NeuralMap {
    /// All-zero parameters.
    pub fn zeros(arch: MapArchitecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, params: vec![0.0; arch.param_count()] })
    }

    pub fn from_params(arch: MapArchitecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return invalid(format!("map expects {} parameters, got {}", arch.param_count(), params.len()));
        }
        Ok(Self { arch, params })
    }

    /// He-uniform hidden weights, zero biases, shrunken output weights, and
    /// output biases that place features uniformly in `bbox` with variance
    /// `0.1 * gamma_scale`.
    pub fn init<R: Rng + ?Sized>(arch: MapArchitecture, bbox: ([f64; 2], [f64; 2]), rng: &mut R) -> Result<Self> {
        let mut map = Self::zeros(arch)?;
        for net in layers(&arch) {
            for (li, l) in net.iter().enumerate() {
                let bound = (6.0 / l.inp as f64).sqrt();
                let scale = if li == 2 { OUTPUT_WEIGHT_SCALE } else { 1.0 };
                for w in &mut map.params[l.offset..l.offset + l.out * l.inp] {
                    *w = scale * rng.random_range(-bound..bound);
                }
            }
        }
        let [p_net, r_net] = layers(&arch);
        let pb = p_net[2].offset + p_net[2].out * p_net[2].inp;
        for n in 0..arch.features {
            for i in 0..DIM {
                let (lo, hi) = (bbox.0[i], bbox.1[i]);
                let v = if hi > lo { rng.random_range(lo..hi) } else { lo };
                map.params[pb + 3 * n + i] = v / arch.extent;
            }
        }
        let rb = r_net[2].offset + r_net[2].out * r_net[2].inp;
        for n in 0..arch.features {
            map.params[rb + n] = 0.1;
        }
        Ok(map)
    }

    pub fn encode(&self, p_bs: [f64; 2]) -> Vec<f64> {
        encode_position(p_bs, self.arch.encodings, self.arch.extent)
    }

    fn raw(&self, p_bs: [f64; 2]) -> (Vec<f64>, Trace, Trace) {
        let x = self.encode(p_bs);
        let [p_net, r_net] = layers(&self.arch);
        let tp = forward(&self.params, &p_net, &x);
        let tr = forward(&self.params, &r_net, &x);
        (x, tp, tr)
    }

    /// Features seen from a BS at `p_bs`.
    pub fn predict(&self, p_bs: [f64; 2]) -> Result<Vec<MapFeature>> {
        let (_, tp, tr) = self.raw(p_bs);
        let a = &self.arch;
        let feats: Vec<MapFeature> = (0..a.features)
            .map(|n| MapFeature {
                position: [a.extent * tp.out[3 * n], a.extent * tp.out[3 * n + 1]],
                bias: tp.out[3 * n + 2].abs() * a.extent / SPEED_OF_LIGHT,
                variance: tr.out[n].abs() * a.gamma_scale,
            })
            .collect();
        if feats.iter().any(|f| !(f.position[0].is_finite() && f.position[1].is_finite() && f.bias.is_finite() && f.variance.is_finite())) {
            return Err(Error::NumericalDegeneracy(format!("non-finite map output at BS {p_bs:?}")));
        }
        Ok(feats)
    }

    /// Features for every BS.
    pub fn predict_all(&self, anchors: &[[f64; 2]]) -> Result<Vec<Vec<MapFeature>>> {
        anchors.iter().map(|&a| self.predict(a)).collect()
    }

    /// Gradient over the flat parameter vector of an objective whose
    /// gradient with respect to the features at `p_bs` is `upstream`.
    pub fn backward(&self, p_bs: [f64; 2], upstream: &[FeatureGrad]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(p_bs, upstream, &mut grad)?;
        Ok(grad)
    }

    pub fn backward_into(&self, p_bs: [f64; 2], upstream: &[FeatureGrad], grad: &mut [f64]) -> Result<()> {
        let a = &self.arch;
        if upstream.len() != a.features || grad.len() != self.params.len() {
            return invalid(format!("backward expects {} feature gradients and {} slots", a.features, self.params.len()));
        }
        let (x, tp, tr) = self.raw(p_bs);
        let bias_scale = a.extent / SPEED_OF_LIGHT;
        let mut d_p = vec![0.0; 3 * a.features];
        let mut d_r = vec![0.0; a.features];
        for (n, g) in upstream.iter().enumerate() {
            d_p[3 * n] = g.position[0] * a.extent;
            d_p[3 * n + 1] = g.position[1] * a.extent;
            d_p[3 * n + 2] = g.bias * bias_scale * sign0(tp.out[3 * n + 2]);
            d_r[n] = g.variance * a.gamma_scale * sign0(tr.out[n]);
        }
        let [p_net, r_net] = layers(a);
        backward_net(&self.params, &p_net, &x, &tp, &d_p, grad);
        backward_net(&self.params, &r_net, &x, &tr, &d_r, grad);
        Ok(())
    }

    /// Regresses the outputs onto `targets` (per BS) with Adam on the
    /// squared error in normalized units. Returns the final loss.
    pub fn fit(&mut self, anchors: &[[f64; 2]], targets: &[Vec<MapFeature>], steps: usize, lr: f64) -> Result<f64> {
        let a = self.arch;
        if targets.len() != anchors.len() || targets.iter().any(|t| t.len() != a.features) {
            return invalid(format!("fit needs {} features for each of {} BSs", a.features, anchors.len()));
        }
        let bias_scale = a.extent / SPEED_OF_LIGHT;
        let loss_grad = |map: &NeuralMap, grad: Option<&mut Vec<f64>>| -> Result<f64> {
            let mut loss = 0.0;
            let mut ups = Vec::with_capacity(anchors.len());
            for (j, &p) in anchors.iter().enumerate() {
                let f = map.predict(p)?;
                let up: Vec<FeatureGrad> = f
                    .iter()
                    .zip(&targets[j])
                    .map(|(f, t)| {
                        let e = [(f.position[0] - t.position[0]) / a.extent, (f.position[1] - t.position[1]) / a.extent];
                        let eb = (f.bias - t.bias) / bias_scale;
                        let ev = (f.variance - t.variance) / a.gamma_scale;
                        loss += e[0] * e[0] + e[1] * e[1] + eb * eb + ev * ev;
                        FeatureGrad {
                            position: [2.0 * e[0] / a.extent, 2.0 * e[1] / a.extent],
                            bias: 2.0 * eb / bias_scale,
                            variance: 2.0 * ev / a.gamma_scale,
                        }
                    })
                    .collect();
                ups.push(up);
            }
            if let Some(g) = grad {
                g.iter_mut().for_each(|v| *v = 0.0);
                for (j, &p) in anchors.iter().enumerate() {
                    map.backward_into(p, &ups[j], g)?;
                }
            }
            Ok(loss)
        };
        let mut adam = AdamState::with_lr(self.params.len(), lr);
        let mut grad = vec![0.0; self.params.len()];
        for _ in 0..steps {
            loss_grad(self, Some(&mut grad))?;
            adam.step(&mut self.params, &grad)?;
        }
        loss_grad(self, None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_lr(len, 1e-3)
    }

    pub fn with_lr(len: usize, lr: f64) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len], lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return invalid(format!("Adam state has {} slots, got {} params and {} grads", self.m.len(), params.len(), grad.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}
