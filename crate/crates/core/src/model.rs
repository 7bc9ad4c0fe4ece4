//! Local characteristics of one-dimensional PDMPs.
//!
//! A model is the triplet (flow, jump rate, transition kernel) together with
//! the state-space support. Two families are shipped:
//!
//! - the TCP process: flow `x + t`, rate `λ(x) = x`, fragmentation `x ↦ κx`;
//! - a log-size cell growth model: flow `x + θt`, Gaussian division ratios
//!   applied on the log scale, and a rate supplied later with [`attach_rate`].
//!
//! All values here are immutable after construction and every evaluation map
//! is pure, so a [`ModelSpec`] can be shared freely across worker threads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter {name} = {value} is out of range ({constraint})")]
    ParameterOutOfRange {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("state {x} is not reachable along the flow from {xi}")]
    Unreachable { xi: f64, x: f64 },
    #[error("tabulated rate needs matching, nonempty, increasing grid and values")]
    InvalidTable,
}

fn check_range(
    name: &'static str,
    value: f64,
    ok: bool,
    constraint: &'static str,
) -> Result<(), ModelError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::ParameterOutOfRange {
            name,
            value,
            constraint,
        })
    }
}

/// Deterministic motion between jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Flow {
    /// `Φ(t|x) = x + speed·t`.
    Linear { speed: f64 },
    /// `Φ(t|x) = x·exp(rate·t)`, for positive states.
    Exponential { rate: f64 },
}

impl Flow {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match *self {
            Flow::Linear { speed } => x + speed * t,
            Flow::Exponential { rate } => x * (rate * t).exp(),
        }
    }

    /// Time needed to travel from `xi` to `x` along the flow. An overshoot
    /// of `xi` past `x` at rounding level (grid points `j·step`) counts as
    /// zero time.
    pub fn inverse_time(&self, xi: f64, x: f64) -> Result<f64, ModelError> {
        if x < xi - 1e-12 * (1.0 + x.abs()) {
            return Err(ModelError::Unreachable { xi, x });
        }
        match *self {
            Flow::Linear { speed } => Ok(((x - xi) / speed).max(0.0)),
            Flow::Exponential { rate } => {
                if xi <= 0.0 {
                    return Err(ModelError::Unreachable { xi, x });
                }
                Ok(((x / xi).ln() / rate).max(0.0))
            }
        }
    }

    /// `Δ(x)`, the time-derivative of the flow at zero.
    pub fn derivative_at_zero(&self, x: f64) -> f64 {
        match *self {
            Flow::Linear { speed } => speed,
            Flow::Exponential { rate } => rate * x,
        }
    }
}

/// Jump rate `λ`, always nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpRate {
    /// `λ(x) = slope·x` on `x ≥ 0`, zero below.
    Linear {
        slope: f64,
    },
    Constant {
        value: f64,
    },
    /// `λ(x) = base·exp(slope·(x − pivot))`.
    Exponential {
        base: f64,
        slope: f64,
        pivot: f64,
    },
    /// Piecewise-linear interpolation of tabulated values, held constant
    /// outside the grid.
    Tabulated {
        grid: Vec<f64>,
        values: Vec<f64>,
    },
}

impl JumpRate {
    /// Builds a tabulated rate; negative values are rejected.
    pub fn tabulated(grid: Vec<f64>, values: Vec<f64>) -> Result<Self, ModelError> {
        if grid.is_empty()
            || grid.len() != values.len()
            || grid.windows(2).any(|w| !(w[1] > w[0]))
            || values.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(ModelError::InvalidTable);
        }
        Ok(JumpRate::Tabulated { grid, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            JumpRate::Linear { slope } => {
                if x > 0.0 {
                    slope * x
                } else {
                    0.0
                }
            }
            JumpRate::Constant { value } => *value,
            JumpRate::Exponential { base, slope, pivot } => base * (slope * (x - pivot)).exp(),
            JumpRate::Tabulated { grid, values } => interpolate_clamped(grid, values, x),
        }
    }
}

fn interpolate_clamped(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let last = grid.len() - 1;
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[last] {
        return values[last];
    }
    // first index with grid[j] > x; 1 ≤ j ≤ last here
    let j = grid.partition_point(|g| *g <= x);
    let (x0, x1) = (grid[j - 1], grid[j]);
    let w = (x - x0) / (x1 - x0);
    values[j - 1] * (1.0 - w) + values[j] * w
}

/// Deterministic fragmentation maps `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fragmentation {
    /// `h(x) = κx`.
    Linear { kappa: f64 },
}

impl Fragmentation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Fragmentation::Linear { kappa } => kappa * x,
        }
    }

    pub fn derivative(&self, _x: f64) -> f64 {
        match *self {
            Fragmentation::Linear { kappa } => kappa,
        }
    }
}

/// Transition kernel `Q(·|x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Deterministic(Fragmentation),
    /// Post-jump log-size `Z = Z⁻ + ln K` with `K ~ N(mean, sd²)` truncated
    /// to `(0, 1)` by rejection.
    LogRatio {
        mean: f64,
        sd: f64,
    },
}

impl Transition {
    pub fn fragmentation(&self) -> Option<&Fragmentation> {
        match self {
            Transition::Deterministic(h) => Some(h),
            Transition::LogRatio { .. } => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, pre_jump: f64, rng: &mut R) -> f64 {
        match self {
            Transition::Deterministic(h) => h.apply(pre_jump),
            Transition::LogRatio { mean, sd } => pre_jump + sample_ratio(*mean, *sd, rng).ln(),
        }
    }
}

/// Draws a division ratio in `(0, 1)`.
pub fn sample_ratio<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sd).expect("finite positive sd");
    loop {
        let k = normal.sample(rng);
        if k > 0.0 && k < 1.0 {
            return k;
        }
    }
}

/// Closed interval of admissible states; `upper` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub lower: f64,
    pub upper: f64,
}

impl Support {
    pub fn nonnegative() -> Self {
        Support {
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// A PDMP's local characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub flow: Flow,
    /// `None` until a rate is attached (growth models are built without one).
    pub rate: Option<JumpRate>,
    pub transition: Transition,
    pub support: Support,
}

impl ModelSpec {
    pub fn rate_at(&self, x: f64) -> Option<f64> {
        self.rate.as_ref().map(|r| r.eval(x))
    }

    /// Returns `κ` when this is a TCP model with unit flow and rate `λ(x) = x`.
    pub fn tcp_kappa(&self) -> Option<f64> {
        match (&self.flow, &self.rate, &self.transition) {
            (
                Flow::Linear { speed },
                Some(JumpRate::Linear { slope }),
                Transition::Deterministic(Fragmentation::Linear { kappa }),
            ) if *speed == 1.0 && *slope == 1.0 => Some(*kappa),
            _ => None,
        }
    }
}

/// The TCP model with fragmentation ratio `kappa`.
pub fn tcp_model(kappa: f64) -> Result<ModelSpec, ModelError> {
    check_range("kappa", kappa, kappa > 0.0 && kappa < 1.0, "0 < kappa < 1")?;
    Ok(ModelSpec {
        label: format!("tcp(kappa={kappa})"),
        flow: Flow::Linear { speed: 1.0 },
        rate: Some(JumpRate::Linear { slope: 1.0 }),
        transition: Transition::Deterministic(Fragmentation::Linear { kappa }),
        support: Support::nonnegative(),
    })
}

/// Travel time of the TCP flow from `xi` to `x`.
pub fn tcp_inverse_time(xi: f64, x: f64) -> Result<f64, ModelError> {
    Flow::Linear { speed: 1.0 }.inverse_time(xi, x)
}

/// Log-size growth model with slope `theta` and Gaussian division ratios.
/// The jump rate is left unset.
pub fn growth_model(theta: f64, ratio_mean: f64, ratio_sd: f64) -> Result<ModelSpec, ModelError> {
    check_range("theta", theta, theta > 0.0, "theta > 0")?;
    check_range(
        "ratio_mean",
        ratio_mean,
        ratio_mean > 0.0 && ratio_mean < 1.0,
        "0 < ratio_mean < 1",
    )?;
    check_range("ratio_sd", ratio_sd, ratio_sd >= 0.0, "ratio_sd >= 0")?;
    Ok(ModelSpec {
        label: format!("growth(theta={theta},ratio={ratio_mean}±{ratio_sd})"),
        flow: Flow::Linear { speed: theta },
        rate: None,
        transition: Transition::LogRatio {
            mean: ratio_mean,
            sd: ratio_sd,
        },
        support: Support::nonnegative(),
    })
}

/// Division hazard used for synthetic lineages: `0.1·exp(15(x − 1.5))` per
/// minute in log-size. At `θ = 0.025` most cells divide between log-sizes
/// 1.45 and 1.7, and a newborn cell is practically never hit again within
/// the same minute.
pub fn default_growth_rate() -> JumpRate {
    JumpRate::Exponential {
        base: 0.1,
        slope: 15.0,
        pivot: 1.5,
    }
}

/// Replaces the jump rate of `model`.
pub fn attach_rate(model: &ModelSpec, rate: JumpRate) -> ModelSpec {
    ModelSpec {
        rate: Some(rate),
        ..model.clone()
    }
}

/// Model selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Tcp {
        kappa: f64,
    },
    Growth {
        theta: f64,
        ratio_mean: f64,
        ratio_sd: f64,
        /// Defaults to [`default_growth_rate`].
        #[serde(default)]
        rate: Option<JumpRate>,
    },
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec, ModelError> {
        match self {
            ModelConfig::Tcp { kappa } => tcp_model(*kappa),
            ModelConfig::Growth {
                theta,
                ratio_mean,
                ratio_sd,
                rate,
            } => Ok(attach_rate(
                &growth_model(*theta, *ratio_mean, *ratio_sd)?,
                rate.clone().unwrap_or_else(default_growth_rate),
            )),
        }
    }
}
