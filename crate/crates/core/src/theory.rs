//! Closed-form and quadrature quantities: TCP invariant laws, conditional
//! laws of inter-jump times and pre-jump locations, and asymptotic variances
//! of the estimator families.
//!
//! The TCP invariant densities are alternating series whose coefficients
//! overflow quickly in `f64`, so coefficients are kept as `(sign, ln|c|)`
//! pairs and each term is assembled in log space.

use serde::Serialize;
use thiserror::Error;

use crate::model::{Flow, JumpRate, ModelError, ModelSpec};
use crate::quadrature::{adaptive_simpson, QuadratureFailure, HAZARD_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("series at x = {x} did not reach tolerance within {terms} terms")]
    SeriesDiverged { x: f64, terms: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureFailure),
    #[error("degenerate denominator at x = {x}")]
    DegenerateDenominator { x: f64 },
    #[error("model has no jump rate attached")]
    RateUnset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Truncation control for the invariant-density series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesTolerance {
    pub abs_tol: f64,
    pub max_terms: usize,
}

impl Default for SeriesTolerance {
    fn default() -> Self {
        SeriesTolerance {
            abs_tol: 1e-12,
            max_terms: 200,
        }
    }
}

/// Spacing of the argument-selection grid `C_x = {ε, 2ε, …, x}`.
pub const ARGUMENT_STEP: f64 = 0.01;

/// The grid `{step, 2·step, …}` up to and including `x`.
pub fn argument_grid(x: f64, step: f64) -> Vec<f64> {
    let count = (x / step + 1e-9).floor() as usize;
    (1..=count).map(|j| j as f64 * step).collect()
}

#[derive(Debug, Clone, Copy)]
struct LogCoeff {
    negative: bool,
    ln_abs: f64,
}

/// Invariant densities of the TCP process for a fixed `κ`, with the series
/// coefficients and the normalizing products precomputed.
#[derive(Debug, Clone)]
pub struct TcpLaws {
    kappa: f64,
    tol: SeriesTolerance,
    ln_q: f64,
    // post-jump law μ: n = 1, 2, …
    mu_coeffs: Vec<LogCoeff>,
    mu_norm: f64,
    // continuous-time law μ^CT: n = 0, 1, …
    ct_coeffs: Vec<LogCoeff>,
    ct_norm: f64,
}

fn truncated_product(mut factor: impl FnMut(usize) -> f64, tol: &SeriesTolerance) -> f64 {
    let mut p = 1.0;
    for n in 0..tol.max_terms.max(1) * 4 {
        let d = factor(n);
        p *= 1.0 - d;
        if d < tol.abs_tol * 1e-4 {
            break;
        }
    }
    p
}

impl TcpLaws {
    pub fn new(kappa: f64, tol: SeriesTolerance) -> Result<Self, TheoryError> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(ModelError::ParameterOutOfRange {
                name: "kappa",
                value: kappa,
                constraint: "0 < kappa < 1",
            }
            .into());
        }
        let ln_q = -2.0 * kappa.ln();
        // ln(q^k − 1) = k ln q + ln(1 − κ^{2k})
        let ln_qk_minus_one = |k: usize| k as f64 * ln_q + (-kappa.powi(2 * k as i32)).ln_1p();

        let terms = tol.max_terms.max(1);
        let mut mu_coeffs = Vec::with_capacity(terms);
        let mut acc = 0.0; // Σ_{k<n} ln(q^k − 1)
        for n in 1..=terms {
            if n > 1 {
                acc += ln_qk_minus_one(n - 1);
            }
            mu_coeffs.push(LogCoeff {
                negative: (n - 1) % 2 == 1,
                ln_abs: n as f64 * ln_q - acc,
            });
        }

        let mut ct_coeffs = Vec::with_capacity(terms);
        let mut acc = 0.0; // Σ_{k≤n} ln(q^k − 1)
        for n in 0..terms {
            if n >= 1 {
                acc += ln_qk_minus_one(n);
            }
            ct_coeffs.push(LogCoeff {
                negative: n % 2 == 1,
                ln_abs: n as f64 * ln_q - acc,
            });
        }

        let mu_norm = truncated_product(|n| kappa.powi(2 * (n as i32 + 1)), &tol);
        let ct_norm = truncated_product(|n| kappa.powi(2 * n as i32 + 1), &tol);
        Ok(TcpLaws {
            kappa,
            tol,
            ln_q,
            mu_coeffs,
            mu_norm,
            ct_coeffs,
            ct_norm,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Sums `Σ_n sign_n exp(ln|c_n| + extra(q^n))` with the truncation rule:
    /// stop once a term is below `abs_tol` while the coefficients decrease.
    fn sum_series(
        &self,
        coeffs: &[LogCoeff],
        first_power: usize,
        x: f64,
        max_terms: usize,
        truncate: bool,
        extra: impl Fn(f64) -> f64,
    ) -> Result<f64, TheoryError> {
        let mut sum = 0.0;
        let mut prev_ln = f64::INFINITY;
        for (idx, c) in coeffs.iter().take(max_terms).enumerate() {
            let qn = ((first_power + idx) as f64 * self.ln_q).exp();
            let ln_term = c.ln_abs + extra(qn);
            let mag = ln_term.exp();
            sum += if c.negative { -mag } else { mag };
            if truncate && mag < self.tol.abs_tol && c.ln_abs < prev_ln {
                return Ok(sum);
            }
            prev_ln = c.ln_abs;
        }
        if truncate {
            Err(TheoryError::SeriesDiverged {
                x,
                terms: max_terms,
            })
        } else {
            Ok(sum)
        }
    }

    fn gaussian_exponent(qn: f64, x: f64) -> f64 {
        if x == 0.0 {
            0.0
        } else {
            -0.5 * qn * x * x
        }
    }

    /// Invariant density `μ` of the post-jump locations.
    pub fn mu(&self, x: f64) -> Result<f64, TheoryError> {
        self.mu_terms(x, self.tol.max_terms, true)
    }

    /// `μ` summed over exactly `terms` terms, without early truncation.
    pub fn mu_fixed_terms(&self, x: f64, terms: usize) -> f64 {
        self.mu_terms(x, terms, false).expect("no truncation")
    }

    fn mu_terms(&self, x: f64, terms: usize, truncate: bool) -> Result<f64, TheoryError> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        let ln_x = x.ln();
        let s = self.sum_series(&self.mu_coeffs, 1, x, terms, truncate, |qn| {
            ln_x + Self::gaussian_exponent(qn, x)
        })?;
        // below ~1e-15 the alternating sum is pure cancellation noise
        Ok((s / self.mu_norm).max(0.0))
    }

    /// Distribution function of `μ`, integrated term by term.
    pub fn mu_cdf(&self, x: f64) -> Result<f64, TheoryError> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        // ∫₀ˣ u exp(−q u²/2) du = (1 − exp(−q x²/2)) / q
        let s = self.sum_series(&self.mu_coeffs, 1, x, self.tol.max_terms, true, |qn| {
            (-(-0.5 * qn * x * x).exp()).ln_1p() - qn.ln()
        })?;
        Ok(s / self.mu_norm)
    }

    /// Continuous-time invariant density `μ^CT`.
    pub fn mu_ct(&self, x: f64) -> Result<f64, TheoryError> {
        if x < 0.0 {
            return Ok(0.0);
        }
        let s = self.sum_series(&self.ct_coeffs, 0, x, self.tol.max_terms, true, |qn| {
            Self::gaussian_exponent(qn, x)
        })?;
        Ok((2.0 / std::f64::consts::PI).sqrt() * s / self.ct_norm)
    }

    /// Invariant density of the pre-jump locations, `μ⁻(x) = κ μ(κx)`.
    pub fn mu_minus(&self, x: f64) -> Result<f64, TheoryError> {
        Ok(self.kappa * self.mu(self.kappa * x)?)
    }

    /// `μ(ξ) G(x − ξ | ξ)`, the oracle argument-selection criterion.
    pub fn selection_criterion(&self, xi: f64, x: f64) -> Result<f64, TheoryError> {
        let t = x - xi;
        Ok(self.mu(xi)? * tcp_survival(xi, t))
    }

    /// Maximizer of the selection criterion over the `C_x` grid (first
    /// maximizer on ties) and the maximal value.
    pub fn oracle_argmax(&self, x: f64, step: f64) -> Result<(f64, f64), TheoryError> {
        let mut best = (f64::NAN, f64::NEG_INFINITY);
        for xi in argument_grid(x, step) {
            let c = self.selection_criterion(xi, x)?;
            if c > best.1 {
                best = (xi, c);
            }
        }
        if !(best.1 > 0.0) {
            return Err(TheoryError::DegenerateDenominator { x });
        }
        Ok(best)
    }
}

/// Post-jump invariant density of the TCP process.
pub fn tcp_mu(x: f64, kappa: f64, tol: SeriesTolerance) -> Result<f64, TheoryError> {
    TcpLaws::new(kappa, tol)?.mu(x)
}

pub fn tcp_mu_ct(x: f64, kappa: f64, tol: SeriesTolerance) -> Result<f64, TheoryError> {
    TcpLaws::new(kappa, tol)?.mu_ct(x)
}

pub fn tcp_mu_minus(x: f64, kappa: f64) -> Result<f64, TheoryError> {
    TcpLaws::new(kappa, SeriesTolerance::default())?.mu_minus(x)
}

/// `G(t|ξ) = exp(−(ξt + t²/2))` for the TCP model.
pub fn tcp_survival(xi: f64, t: f64) -> f64 {
    (-(xi * t + 0.5 * t * t)).exp()
}

/// `∫₀ᵗ λ(Φ(s|ξ)) ds`.
pub fn cumulative_hazard(model: &ModelSpec, xi: f64, t: f64) -> Result<f64, TheoryError> {
    let rate = model.rate.as_ref().ok_or(TheoryError::RateUnset)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    match (&model.flow, rate) {
        (Flow::Linear { speed }, JumpRate::Linear { slope }) if xi >= 0.0 => {
            Ok(slope * (xi * t + 0.5 * speed * t * t))
        }
        (Flow::Linear { .. }, JumpRate::Constant { value }) => Ok(value * t),
        _ => Ok(adaptive_simpson(
            |s| rate.eval(model.flow.eval(s, xi)),
            0.0,
            t,
            HAZARD_TOL,
        )?),
    }
}

/// Conditional survival function `G(t|ξ)` of the inter-jump time.
pub fn survival_g(model: &ModelSpec, xi: f64, t: f64) -> Result<f64, TheoryError> {
    Ok((-cumulative_hazard(model, xi, t)?).exp())
}

/// Conditional density `f(t|ξ) = λ(Φ(t|ξ)) G(t|ξ)`.
pub fn conditional_density_f(model: &ModelSpec, xi: f64, t: f64) -> Result<f64, TheoryError> {
    let rate = model.rate.as_ref().ok_or(TheoryError::RateUnset)?;
    Ok(rate.eval(model.flow.eval(t, xi)) * survival_g(model, xi, t)?)
}

/// Density of the next pre-jump location `z` given the current post-jump
/// location `x`, always evaluated through quadrature of `λ/Δ`.
pub fn r_density(model: &ModelSpec, x: f64, z: f64) -> Result<f64, TheoryError> {
    let rate = model.rate.as_ref().ok_or(TheoryError::RateUnset)?;
    if z < x {
        return Ok(0.0);
    }
    let ratio = |u: f64| rate.eval(u) / model.flow.derivative_at_zero(u);
    let integral = adaptive_simpson(ratio, x, z, HAZARD_TOL)?;
    Ok(ratio(z) * (-integral).exp())
}

/// `σ♣²(x) = τ² λ(x)² h′(x) / μ⁻(x)` for the TCP model.
pub fn sigma_k2(laws: &TcpLaws, x: f64, tau2: f64) -> Result<f64, TheoryError> {
    Ok(sigma_ks2(laws, x, tau2)? * laws.kappa)
}

/// `σ♢²(x) = τ² λ(x)² / μ⁻(x)` for the TCP model.
pub fn sigma_ks2(laws: &TcpLaws, x: f64, tau2: f64) -> Result<f64, TheoryError> {
    let mm = laws.mu_minus(x)?;
    if !(mm > 0.0) {
        return Err(TheoryError::DegenerateDenominator { x });
    }
    Ok(tau2 * x * x / mm)
}

/// `σ♠²(x) = τ⁴ λ(x) / max_{C_x} μ(ξ) G(τ_x(ξ)|ξ)` with the max over the
/// argument grid.
pub fn sigma_amg2(laws: &TcpLaws, x: f64, tau2: f64, step: f64) -> Result<f64, TheoryError> {
    let (_, best) = laws.oracle_argmax(x, step)?;
    Ok(tau2 * tau2 * x / best)
}

/// The three asymptotic variances on a grid of states.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceCurves {
    pub kappa: f64,
    pub tau2: f64,
    pub grid: Vec<f64>,
    pub sigma_k2: Vec<f64>,
    pub sigma_ks2: Vec<f64>,
    pub sigma_amg2: Vec<f64>,
}

impl VarianceCurves {
    pub fn compute(laws: &TcpLaws, grid: &[f64], tau2: f64) -> Result<Self, TheoryError> {
        let mut k = Vec::with_capacity(grid.len());
        let mut ks = Vec::with_capacity(grid.len());
        let mut amg = Vec::with_capacity(grid.len());
        for &x in grid {
            k.push(sigma_k2(laws, x, tau2)?);
            ks.push(sigma_ks2(laws, x, tau2)?);
            amg.push(sigma_amg2(laws, x, tau2, ARGUMENT_STEP)?);
        }
        Ok(VarianceCurves {
            kappa: laws.kappa,
            tau2,
            grid: grid.to_vec(),
            sigma_k2: k,
            sigma_ks2: ks,
            sigma_amg2: amg,
        })
    }
}

/// Bandwidths of the three kernel families at one sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct BandwidthSet {
    pub h_k: f64,
    pub h_ks: f64,
    pub h_s: f64,
    pub h_t: f64,
}

/// Standard deviations normalized by the convergence rates.
#[derive(Debug, Clone, Serialize)]
pub struct NormalizedSd {
    pub n: usize,
    pub grid: Vec<f64>,
    pub k: Vec<f64>,
    pub ks: Vec<f64>,
    pub amg: Vec<f64>,
}

/// `√(σ²/(n·h))` for ♣ and ♢, `√(σ♠²/(n·h_s·h_t))` for ♠.
pub fn normalized_sd_curves(
    curves: &VarianceCurves,
    n: usize,
    bw: &BandwidthSet,
) -> Result<NormalizedSd, TheoryError> {
    if !(bw.h_k > 0.0 && bw.h_ks > 0.0 && bw.h_s > 0.0 && bw.h_t > 0.0) {
        return Err(TheoryError::Model(ModelError::ParameterOutOfRange {
            name: "bandwidth",
            value: bw.h_k.min(bw.h_ks).min(bw.h_s).min(bw.h_t),
            constraint: "bandwidths > 0",
        }));
    }
    let nf = n as f64;
    Ok(NormalizedSd {
        n,
        grid: curves.grid.clone(),
        k: curves
            .sigma_k2
            .iter()
            .map(|s| (s / (nf * bw.h_k)).sqrt())
            .collect(),
        ks: curves
            .sigma_ks2
            .iter()
            .map(|s| (s / (nf * bw.h_ks)).sqrt())
            .collect(),
        amg: curves
            .sigma_amg2
            .iter()
            .map(|s| (s / (nf * bw.h_s * bw.h_t)).sqrt())
            .collect(),
    })
}

/// Locations where `a − b` changes sign on `grid`, linearly interpolated.
pub fn sign_changes(grid: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut out = Vec::new();
    for i in 1..d.len() {
        if d[i - 1] == 0.0 {
            continue;
        }
        if d[i] == 0.0 || (d[i - 1] < 0.0) != (d[i] < 0.0) {
            let w = d[i - 1] / (d[i - 1] - d[i]);
            out.push(grid[i - 1] + w * (grid[i] - grid[i - 1]));
        }
    }
    out
}
