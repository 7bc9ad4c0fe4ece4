//! Trajectory generation: the embedded chain by inversion of the cumulative
//! hazard, and continuous-time samples on a regular grid.

use std::io::Write;
use std::path::Path;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Flow, JumpRate, ModelSpec, Transition};
use crate::quadrature::{adaptive_simpson, QuadratureFailure, HAZARD_TOL};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("cumulative hazard from z = {z} stays below {target} (jump index {index:?})")]
    HazardExhausted {
        z: f64,
        target: f64,
        index: Option<usize>,
    },
    #[error("model has no jump rate attached")]
    RateUnset,
    #[error("initial state {z0} is outside the model support")]
    OutsideSupport { z0: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error(transparent)]
    Quadrature(#[from] QuadratureFailure),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Upper limit for the bracketing search of generic inter-jump times.
pub const MAX_BRACKET: f64 = 1e6;
/// Absolute width at which bisection stops.
pub const BISECTION_TOL: f64 = 1e-10;

/// The first `n` jumps of one trajectory.
///
/// Index `k` describes the `(k+1)`-th jump: `s[k]` is the sojourn before it,
/// `t[k]` its time, `z_minus[k]` the pre-jump state and `z[k]` the post-jump
/// state. The starting point `z0` is kept separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub model_label: String,
    pub seed: u64,
    pub z0: f64,
    pub z: Vec<f64>,
    pub z_minus: Vec<f64>,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Post-jump states `Z_0, …, Z_n`.
    pub fn states(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.z.len() + 1);
        v.push(self.z0);
        v.extend_from_slice(&self.z);
        v
    }

    pub fn end_time(&self) -> f64 {
        self.t.last().copied().unwrap_or(0.0)
    }

    /// Writes `k,z,z_minus,s,t` with one row per jump, `k` starting at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimulateError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "z", "z_minus", "s", "t"])?;
        for k in 0..self.len() {
            w.write_record([
                (k + 1).to_string(),
                fmt_f64(self.z[k]),
                fmt_f64(self.z_minus[k]),
                fmt_f64(self.s[k]),
                fmt_f64(self.t[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), SimulateError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Full-precision float formatting shared by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Continuous-time values on the grid `0, dt, 2dt, …`.
///
/// `divisions[m]` counts the jumps in `(m·dt, (m+1)·dt]`, so a flagged row is
/// the last observation before a jump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSamples {
    pub dt: f64,
    pub values: Vec<f64>,
    pub divisions: Vec<u32>,
    /// Whether `values` are logarithms of the observed size.
    pub log_scale: bool,
}

impl GridSamples {
    pub fn total_divisions(&self) -> u64 {
        self.divisions.iter().map(|&d| d as u64).sum()
    }

    /// Writes `time,size,division`; log-scale values are exponentiated.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimulateError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "size", "division"])?;
        for (m, (&v, &d)) in self.values.iter().zip(&self.divisions).enumerate() {
            let size = if self.log_scale { v.exp() } else { v };
            w.write_record([fmt_f64(m as f64 * self.dt), fmt_f64(size), d.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), SimulateError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Seed of replicate `index` derived from a base seed.
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws the time to the next jump from `z` given a uniform `u ∈ (0, 1)`:
/// the solution of `G(t|z) = u`.
pub fn sample_interjump(model: &ModelSpec, z: f64, u: f64) -> Result<f64, SimulateError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(SimulateError::InvalidArgument("u must lie in (0, 1)"));
    }
    let rate = model.rate.as_ref().ok_or(SimulateError::RateUnset)?;
    let target = -u.ln();
    let exhausted = || SimulateError::HazardExhausted {
        z,
        target,
        index: None,
    };
    match (&model.flow, rate) {
        // slope·(z t + v t²/2) = target
        (Flow::Linear { speed }, JumpRate::Linear { slope }) if z >= 0.0 && *speed > 0.0 => {
            if *slope <= 0.0 {
                return Err(exhausted());
            }
            let v = *speed;
            Ok(2.0 * target / slope / (z + (z * z + 2.0 * v * target / slope).sqrt()))
        }
        (Flow::Linear { .. }, JumpRate::Constant { value }) => {
            if *value <= 0.0 {
                return Err(exhausted());
            }
            Ok(target / value)
        }
        // base·e^{slope(z−p)}·(e^{slope·v·t} − 1)/(slope·v) = target
        (Flow::Linear { speed }, JumpRate::Exponential { base, slope, pivot })
            if *speed > 0.0 && *slope != 0.0 && *base > 0.0 =>
        {
            let sv = slope * speed;
            let arg = target * sv / (base * (slope * (z - pivot)).exp());
            if arg <= -1.0 {
                return Err(exhausted());
            }
            Ok(arg.ln_1p() / sv)
        }
        _ => generic_interjump(model, z, u),
    }
}

/// Inversion by bracketing and bisection on the quadrature hazard, used for
/// every model without a closed form.
pub fn generic_interjump(model: &ModelSpec, z: f64, u: f64) -> Result<f64, SimulateError> {
    let rate = model.rate.as_ref().ok_or(SimulateError::RateUnset)?;
    let target = -u.ln();
    let hazard_rate = |s: f64| rate.eval(model.flow.eval(s, z));
    let piece = |a: f64, b: f64| adaptive_simpson(hazard_rate, a, b, HAZARD_TOL);

    // bracket: H(lo) < target ≤ H(hi)
    let (mut lo, mut h_lo) = (0.0, 0.0);
    let mut hi = 1.0;
    let mut h_hi = piece(0.0, hi)?;
    while h_hi < target {
        if hi > MAX_BRACKET {
            return Err(SimulateError::HazardExhausted {
                z,
                target,
                index: None,
            });
        }
        lo = hi;
        h_lo = h_hi;
        hi *= 2.0;
        h_hi = h_lo + piece(lo, hi)?;
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let h_mid = h_lo + piece(lo, mid)?;
        if h_mid < target {
            lo = mid;
            h_lo = h_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Simulates the first `n` jumps from `z0` with a generator seeded by `seed`.
pub fn simulate_chain(
    model: &ModelSpec,
    z0: f64,
    n: usize,
    seed: u64,
) -> Result<Trajectory, SimulateError> {
    if n == 0 {
        return Err(SimulateError::InvalidArgument("n must be at least 1"));
    }
    if !model.support.contains(z0) {
        return Err(SimulateError::OutsideSupport { z0 });
    }
    let mut rng = rng_from_seed(seed);
    let mut traj = Trajectory {
        model_label: model.label.clone(),
        seed,
        z0,
        z: Vec::with_capacity(n),
        z_minus: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
    };
    let (mut z, mut time) = (z0, 0.0);
    for k in 0..n {
        let u: f64 = rng.sample(Open01);
        let s = sample_interjump(model, z, u).map_err(|e| match e {
            SimulateError::HazardExhausted { z, target, .. } => SimulateError::HazardExhausted {
                z,
                target,
                index: Some(k),
            },
            other => other,
        })?;
        let pre = model.flow.eval(s, z);
        let post = model.transition.sample(pre, &mut rng);
        time += s;
        traj.s.push(s);
        traj.t.push(time);
        traj.z_minus.push(pre);
        traj.z.push(post);
        z = post;
    }
    Ok(traj)
}

/// Samples the continuous-time path at multiples of `dt` up to the last jump.
pub fn sample_grid(
    model: &ModelSpec,
    traj: &Trajectory,
    dt: f64,
) -> Result<GridSamples, SimulateError> {
    if !(dt > 0.0) {
        return Err(SimulateError::InvalidArgument("dt must be positive"));
    }
    let end = traj.end_time();
    let rows = (end / dt).floor() as usize + 1;
    let mut values = Vec::with_capacity(rows);
    let mut divisions = vec![0u32; rows];
    // `next` = number of jumps with time ≤ current grid time
    let mut next = 0usize;
    for m in 0..rows {
        let time = m as f64 * dt;
        while next < traj.len() && traj.t[next] <= time {
            next += 1;
        }
        let (origin, start) = if next == 0 {
            (traj.z0, 0.0)
        } else {
            (traj.z[next - 1], traj.t[next - 1])
        };
        values.push(model.flow.eval(time - start, origin));
    }
    for &tk in &traj.t {
        // tk ∈ (m·dt, (m+1)·dt]
        let m = ((tk / dt).ceil() as usize).saturating_sub(1).min(rows - 1);
        divisions[m] += 1;
    }
    Ok(GridSamples {
        dt,
        values,
        divisions,
        log_scale: matches!(model.transition, Transition::LogRatio { .. }),
    })
}
