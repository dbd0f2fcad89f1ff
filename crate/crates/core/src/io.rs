//! Binary containers and CSV outputs.
//!
//! Every container starts with a four-byte magic and a `u32` version; all
//! integers are `u32` and all reals `f64`, little-endian. Reals are stored
//! bit-exact, so every container reads back to the values written.
//!
//! | magic  | content                                            |
//! |--------|----------------------------------------------------|
//! | `RFSL` | measurement frames                                 |
//! | `RFST` | ground truth: states, flags, IMU, BSs, anchors     |
//! | `RFNN` | neural map checkpoint, optional Adam and calibration |
//! | `RFSB` | belief snapshots for learning                      |

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::filter::{Snapshot, StateEstimates};
use crate::learning::TrainingLogEntry;
use crate::likelihood::MapFeature;
use crate::models::MtState;
use crate::neural::{AdamState, MapArchitecture, NeuralMap};
use crate::scenario::{MeasurementFrame, ScenarioTruth};
use crate::signal::Calibration;

pub const VERSION: u32 = 1;

pub const MAGIC_MEASUREMENTS: &[u8; 4] = b"RFSL";
pub const MAGIC_TRUTH: &[u8; 4] = b"RFST";
pub const MAGIC_CHECKPOINT: &[u8; 4] = b"RFNN";
pub const MAGIC_SNAPSHOTS: &[u8; 4] = b"RFSB";

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(VERSION as usize);
        w
    }

    fn u32(&mut self, v: usize) -> &mut Self {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
        self
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }

    fn complex(&mut self, v: &[Complex64]) {
        v.iter().for_each(|c| {
            self.f64(c.re);
            self.f64(c.im);
        });
    }

    fn state(&mut self, s: &MtState) {
        self.f64s(&[s.position[0], s.position[1], s.velocity[0], s.velocity[1], s.orientation]);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != magic {
            return fmt_err(format!("{what}: bad magic, expected {:?}", std::str::from_utf8(magic).unwrap_or("?")));
        }
        let mut r = Self { buf, pos: 4, what };
        let v = r.u32()?;
        if v != VERSION as usize {
            return fmt_err(format!("{what}: unsupported version {v}"));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return fmt_err(format!("{}: truncated at byte {}", self.what, self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Guards allocations against corrupt counts.
    fn check_len(&self, n: usize, bytes_each: usize) -> Result<()> {
        if n.saturating_mul(bytes_each) > self.buf.len() - self.pos {
            return fmt_err(format!("{}: count {n} exceeds remaining data", self.what));
        }
        Ok(())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_len(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn complex(&mut self, n: usize) -> Result<Vec<Complex64>> {
        self.check_len(n, 16)?;
        (0..n).map(|_| Ok(Complex64::new(self.f64()?, self.f64()?))).collect()
    }

    fn state(&mut self) -> Result<MtState> {
        let v = self.f64s(5)?;
        Ok(MtState { position: [v[0], v[1]], velocity: [v[2], v[3]], orientation: v[4] })
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return fmt_err(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Measurement container header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeasurementHeader {
    pub bs_count: usize,
    pub steps: usize,
    pub freq_count: usize,
    pub antenna_count: usize,
}

pub fn encode_measurements(header: &MeasurementHeader, frames: &[MeasurementFrame]) -> Result<Vec<u8>> {
    let m = header.freq_count * header.antenna_count;
    if frames.len() != header.steps {
        return fmt_err(format!("{} frames for K = {}", frames.len(), header.steps));
    }
    let mut w = Writer::header(MAGIC_MEASUREMENTS);
    w.u32(header.bs_count).u32(header.steps).u32(header.freq_count).u32(header.antenna_count);
    for (i, f) in frames.iter().enumerate() {
        if f.k != i + 1 || f.z.len() != header.bs_count || f.z.iter().any(|z| z.len() != m) {
            return fmt_err(format!("frame {} does not match the header", i + 1));
        }
        f.z.iter().for_each(|z| w.complex(z));
    }
    Ok(w.buf)
}

pub fn decode_measurements(buf: &[u8]) -> Result<(MeasurementHeader, Vec<MeasurementFrame>)> {
    let mut r = Reader::open(buf, MAGIC_MEASUREMENTS, "measurements")?;
    let h = MeasurementHeader { bs_count: r.u32()?, steps: r.u32()?, freq_count: r.u32()?, antenna_count: r.u32()? };
    let m = h.freq_count * h.antenna_count;
    r.check_len(h.steps.saturating_mul(h.bs_count).saturating_mul(m), 16)?;
    let mut frames = Vec::with_capacity(h.steps);
    for k in 1..=h.steps {
        let z = (0..h.bs_count).map(|_| r.complex(m)).collect::<Result<_>>()?;
        frames.push(MeasurementFrame { k, z });
    }
    r.finish()?;
    Ok((h, frames))
}

pub fn write_measurements(path: &Path, header: &MeasurementHeader, frames: &[MeasurementFrame]) -> Result<()> {
    write_file(path, &encode_measurements(header, frames)?)
}

pub fn read_measurements(path: &Path) -> Result<(MeasurementHeader, Vec<MeasurementFrame>)> {
    decode_measurements(&read_file(path)?)
}

fn write_features(w: &mut Writer, feats: &[Vec<MapFeature>]) {
    w.u32(feats.len());
    for fs in feats {
        w.u32(fs.len());
        for f in fs {
            w.f64s(&[f.position[0], f.position[1], f.bias, f.variance]);
        }
    }
}

fn read_features(r: &mut Reader) -> Result<Vec<Vec<MapFeature>>> {
    let n = r.u32()?;
    r.check_len(n, 4)?;
    (0..n)
        .map(|_| {
            let d = r.u32()?;
            r.check_len(d, 32)?;
            (0..d)
                .map(|_| {
                    let v = r.f64s(4)?;
                    Ok(MapFeature { position: [v[0], v[1]], bias: v[2], variance: v[3] })
                })
                .collect()
        })
        .collect()
}

/// Truth sidecar: `J, K`, then `K + 1` states, `K + 1` IMU readings,
/// `(K + 1) J` LOS flags as bytes, `J` BS positions and the virtual anchors.
pub fn encode_truth(truth: &ScenarioTruth, bs_positions: &[[f64; 2]]) -> Result<Vec<u8>> {
    let j = bs_positions.len();
    let n = truth.mt_states.len();
    if n == 0 || truth.imu_orientation.len() != n || truth.los_flags.len() != n || truth.los_flags.iter().any(|r| r.len() != j) {
        return fmt_err("truth arrays are inconsistent");
    }
    let mut w = Writer::header(MAGIC_TRUTH);
    w.u32(j).u32(n - 1);
    truth.mt_states.iter().for_each(|s| w.state(s));
    w.f64s(&truth.imu_orientation);
    truth.los_flags.iter().flatten().for_each(|&f| w.u8(f as u8));
    bs_positions.iter().for_each(|p| w.f64s(p));
    write_features(&mut w, &truth.virtual_anchors);
    Ok(w.buf)
}

pub fn decode_truth(buf: &[u8]) -> Result<(ScenarioTruth, Vec<[f64; 2]>)> {
    let mut r = Reader::open(buf, MAGIC_TRUTH, "truth")?;
    let j = r.u32()?;
    let n = r.u32()? + 1;
    r.check_len(n, 48)?;
    let mt_states = (0..n).map(|_| r.state()).collect::<Result<_>>()?;
    let imu_orientation = r.f64s(n)?;
    r.check_len(n * j, 1)?;
    let mut los_flags = Vec::with_capacity(n);
    for _ in 0..n {
        los_flags.push((0..j).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<bool>>>()?);
    }
    r.check_len(j, 16)?;
    let bs = (0..j).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<_>>()?;
    let virtual_anchors = read_features(&mut r)?;
    r.finish()?;
    Ok((ScenarioTruth { mt_states, virtual_anchors, los_flags, imu_orientation }, bs))
}

pub fn write_truth(path: &Path, truth: &ScenarioTruth, bs_positions: &[[f64; 2]]) -> Result<()> {
    write_file(path, &encode_truth(truth, bs_positions)?)
}

pub fn read_truth(path: &Path) -> Result<(ScenarioTruth, Vec<[f64; 2]>)> {
    decode_truth(&read_file(path)?)
}

/// Neural map checkpoint with optional optimizer and calibration sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub map: NeuralMap,
    pub adam: Option<AdamState>,
    pub calibration: Option<Calibration>,
}

/// Layout: architecture (`D, N_enc, L1, L2` as `u32`; extent, gamma scale),
/// parameter count and vector, then a flag byte and Adam state (step `u64`,
/// `lr, beta1, beta2, eps`, `m`, `v`), then a flag byte and calibration
/// (`M_f, M_a`, then the flat calibration vector).
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let a = &ck.map.arch;
    let mut w = Writer::header(MAGIC_CHECKPOINT);
    w.u32(a.features).u32(a.encodings).u32(a.hidden1).u32(a.hidden2);
    w.f64(a.extent);
    w.f64(a.gamma_scale);
    w.u32(ck.map.params.len());
    w.f64s(&ck.map.params);
    match &ck.adam {
        Some(s) => {
            w.u8(1);
            w.u64(s.step);
            w.f64s(&[s.lr, s.beta1, s.beta2, s.eps]);
            w.f64s(&s.m);
            w.f64s(&s.v);
        }
        None => w.u8(0),
    }
    match &ck.calibration {
        Some(c) => {
            w.u8(1);
            w.u32(c.freq_weights.len()).u32(c.antenna_weights.len());
            w.f64s(&c.to_params());
        }
        None => w.u8(0),
    }
    w.buf
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(buf, MAGIC_CHECKPOINT, "checkpoint")?;
    let arch = MapArchitecture {
        features: r.u32()?,
        encodings: r.u32()?,
        hidden1: r.u32()?,
        hidden2: r.u32()?,
        extent: r.f64()?,
        gamma_scale: r.f64()?,
    };
    arch.validate()?;
    let n = r.u32()?;
    if n != arch.param_count() {
        return fmt_err(format!("checkpoint: {n} parameters, architecture needs {}", arch.param_count()));
    }
    let map = NeuralMap::from_params(arch, r.f64s(n)?)?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let h = r.f64s(4)?;
            Some(AdamState { step, lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], m: r.f64s(n)?, v: r.f64s(n)? })
        }
        f => return fmt_err(format!("checkpoint: bad optimizer flag {f}")),
    };
    let calibration = match r.u8()? {
        0 => None,
        1 => {
            let (mf, ma) = (r.u32()?, r.u32()?);
            r.check_len(2 * mf + 4 * ma, 8)?;
            let mut c = Calibration {
                freq_weights: vec![Complex64::default(); mf],
                antenna_weights: vec![Complex64::default(); ma],
                position_offsets: vec![[0.0; 2]; ma],
            };
            c.set_params(&r.f64s(2 * mf + 4 * ma)?)?;
            Some(c)
        }
        f => return fmt_err(format!("checkpoint: bad calibration flag {f}")),
    };
    r.finish()?;
    Ok(Checkpoint { map, adam, calibration })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// Snapshot container: `J`, snapshot count, then per snapshot `k`, `P₀`,
/// the estimate (state, `J` visibilities, `J` flagged LOS variances, `J`
/// noise variances) and the particles (`P₀` states, `J x P₀` LOS variances,
/// `J x P₀` noise variances).
pub fn encode_snapshots(bs_count: usize, snaps: &[Snapshot]) -> Result<Vec<u8>> {
    let mut w = Writer::header(MAGIC_SNAPSHOTS);
    w.u32(bs_count).u32(snaps.len());
    for s in snaps {
        let p = s.particle_count();
        let e = &s.estimate;
        let ok = s.visibility.len() == bs_count
            && s.los_gamma.len() == bs_count
            && s.eta.len() == bs_count
            && s.los_gamma.iter().chain(&s.eta).all(|v| v.len() == p)
            && e.visibility.len() == bs_count
            && e.los_gamma.len() == bs_count
            && e.eta.len() == bs_count;
        if !ok {
            return fmt_err(format!("snapshot {} has inconsistent dimensions", s.k));
        }
        w.u32(s.k).u32(p).u32(e.k);
        w.state(&e.mt);
        w.f64s(&e.visibility);
        for g in &e.los_gamma {
            w.u8(g.is_some() as u8);
            w.f64(g.unwrap_or(0.0));
        }
        w.f64s(&e.eta);
        w.f64s(&s.visibility);
        s.mt.iter().for_each(|m| w.state(m));
        s.los_gamma.iter().for_each(|v| w.f64s(v));
        s.eta.iter().for_each(|v| w.f64s(v));
    }
    Ok(w.buf)
}

pub fn decode_snapshots(buf: &[u8]) -> Result<(usize, Vec<Snapshot>)> {
    let mut r = Reader::open(buf, MAGIC_SNAPSHOTS, "snapshots")?;
    let j = r.u32()?;
    let n = r.u32()?;
    r.check_len(n, 12)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.u32()?;
        let p = r.u32()?;
        let ek = r.u32()?;
        let mt = r.state()?;
        let visibility = r.f64s(j)?;
        let mut los_gamma = Vec::with_capacity(j);
        for _ in 0..j {
            let flag = r.u8()?;
            let v = r.f64()?;
            los_gamma.push((flag != 0).then_some(v));
        }
        let eta = r.f64s(j)?;
        let estimate = StateEstimates { k: ek, mt, los_gamma, eta, visibility };
        let vis = r.f64s(j)?;
        r.check_len(p, 40)?;
        let mts = (0..p).map(|_| r.state()).collect::<Result<_>>()?;
        let g = (0..j).map(|_| r.f64s(p)).collect::<Result<_>>()?;
        let e = (0..j).map(|_| r.f64s(p)).collect::<Result<_>>()?;
        out.push(Snapshot { k, mt: mts, los_gamma: g, eta: e, visibility: vis, estimate });
    }
    r.finish()?;
    Ok((j, out))
}

pub fn write_snapshots(path: &Path, bs_count: usize, snaps: &[Snapshot]) -> Result<()> {
    write_file(path, &encode_snapshots(bs_count, snaps)?)
}

pub fn read_snapshots(path: &Path) -> Result<(usize, Vec<Snapshot>)> {
    decode_snapshots(&read_file(path)?)
}

/// Track CSV: `k, x, y, vx, vy, o`, then `p_j`, `gamma_j`, `eta_j` per BS.
/// A missing LOS variance is written as an empty field.
pub fn track_csv(estimates: &[StateEstimates]) -> String {
    let j = estimates.first().map_or(0, |e| e.visibility.len());
    let mut s = String::from("k,x,y,vx,vy,o");
    for prefix in ["p", "gamma", "eta"] {
        for b in 0..j {
            let _ = write!(s, ",{prefix}{b}");
        }
    }
    s.push('\n');
    for e in estimates {
        let m = &e.mt;
        let _ = write!(s, "{},{},{},{},{},{}", e.k, m.position[0], m.position[1], m.velocity[0], m.velocity[1], m.orientation);
        e.visibility.iter().for_each(|v| {
            let _ = write!(s, ",{v}");
        });
        e.los_gamma.iter().for_each(|g| match g {
            Some(v) => {
                let _ = write!(s, ",{v}");
            }
            None => s.push(','),
        });
        e.eta.iter().for_each(|v| {
            let _ = write!(s, ",{v}");
        });
        s.push('\n');
    }
    s
}

/// Parses [`track_csv`] output.
pub fn parse_track_csv(text: &str) -> Result<Vec<StateEstimates>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("track: empty file".into()))?.split(',').collect();
    if header.len() < 6 || (header.len() - 6) % 3 != 0 || header[..6] != ["k", "x", "y", "vx", "vy", "o"] {
        return fmt_err("track: unexpected header");
    }
    let j = (header.len() - 6) / 3;
    let num = |line: usize, f: &str| -> Result<f64> { f.trim().parse::<f64>().map_err(|_| Error::Format(format!("track line {line}: bad number {f:?}"))) };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return fmt_err(format!("track line {ln}: {} fields, expected {}", f.len(), header.len()));
        }
        let k = f[0].trim().parse::<usize>().map_err(|_| Error::Format(format!("track line {ln}: bad step {:?}", f[0])))?;
        let v: Vec<f64> = f[1..6].iter().map(|x| num(ln, x)).collect::<Result<_>>()?;
        let visibility = f[6..6 + j].iter().map(|x| num(ln, x)).collect::<Result<_>>()?;
        let los_gamma = f[6 + j..6 + 2 * j].iter().map(|x| if x.trim().is_empty() { Ok(None) } else { num(ln, x).map(Some) }).collect::<Result<_>>()?;
        let eta = f[6 + 2 * j..].iter().map(|x| num(ln, x)).collect::<Result<_>>()?;
        out.push(StateEstimates {
            k,
            mt: MtState { position: [v[0], v[1]], velocity: [v[2], v[3]], orientation: v[4] },
            los_gamma,
            eta,
            visibility,
        });
    }
    Ok(out)
}

pub fn training_log_csv(log: &[TrainingLogEntry]) -> String {
    let mut s = String::from("iter,phase,Q_before,Q_after,grad_norm,seconds\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{},{},{}", e.iter, e.phase, e.q_before, e.q_after, e.grad_norm, e.seconds);
    }
    s
}
