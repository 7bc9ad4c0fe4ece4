//! Adaptive projection density estimates on a trigonometric basis, with the
//! dimension chosen by penalized contrast, and the projection variants of
//! λ̂♣ and λ̂♢ built on them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::estimators::{
    denominator_k, denominator_ks, fragmentation_terms, Bandwidths, EstimateCurve, EstimateError,
    EstimatorKind, PreparedChain,
};
use crate::model::ModelSpec;

/// Interval, maximal dimension and penalty constant of the projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub a: f64,
    pub b: f64,
    pub m_bar: usize,
    pub c: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            a: 0.05,
            b: 3.0,
            m_bar: 25,
            c: 1.0,
        }
    }
}

/// `φ^m` on `[a, b]`: the constant, then cosines and sines interleaved.
pub fn trig_basis(m: usize, a: f64, b: f64, x: f64) -> f64 {
    if x < a || x > b {
        return 0.0;
    }
    let len = b - a;
    if m == 0 {
        return 1.0 / len.sqrt();
    }
    let j = m.div_ceil(2) as f64;
    let arg = 2.0 * PI * j * (x - a) / len;
    let amp = (2.0 / len).sqrt();
    if m % 2 == 1 {
        amp * arg.cos()
    } else {
        amp * arg.sin()
    }
}

/// Empirical coefficients `α̂^m = n⁻¹ Σ φ^m(Z_i)` for `m = 0..=dim`.
/// Samples outside `[a, b]` contribute zero but still count in `n`.
pub fn projection_coeffs(
    samples: &[f64],
    dim: usize,
    a: f64,
    b: f64,
) -> Result<Vec<f64>, EstimateError> {
    if samples.is_empty() {
        return Err(EstimateError::EmptySample);
    }
    let mut acc = vec![0.0; dim + 1];
    for &z in samples {
        if z < a || z > b {
            continue;
        }
        for (m, slot) in acc.iter_mut().enumerate() {
            *slot += trig_basis(m, a, b, z);
        }
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().map(|s| s / n).collect())
}

/// A fitted projection estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub m_bar: usize,
    pub n: usize,
    /// `α̂^0, …, α̂^{M*}`.
    pub coeffs: Vec<f64>,
    pub m_star: usize,
    /// Contrast for `M = 0..=M̄`.
    pub contrast_values: Vec<f64>,
}

impl ProjectionFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| c * trig_basis(m, self.a, self.b, x))
            .sum()
    }

    /// `‖μ̂‖²`, by orthonormality.
    pub fn squared_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }
}

/// Penalized-contrast choice of the dimension:
/// `‖μ̂^M‖² − (2/n)Σ μ̂^M(Z_i) + c(M+1)/n`, which reduces to
/// `−Σ_{m≤M} (α̂^m)² + c(M+1)/n`. Ties go to the smaller `M`.
pub fn select_dimension(
    samples: &[f64],
    params: &ProjectionParams,
) -> Result<ProjectionFit, EstimateError> {
    let all = projection_coeffs(samples, params.m_bar, params.a, params.b)?;
    let n = samples.len();
    let mut contrast = Vec::with_capacity(all.len());
    let mut energy = 0.0;
    for (m, a) in all.iter().enumerate() {
        energy += a * a;
        contrast.push(-energy + params.c * (m + 1) as f64 / n as f64);
    }
    let mut m_star = 0;
    for (m, &v) in contrast.iter().enumerate() {
        if v < contrast[m_star] {
            m_star = m;
        }
    }
    Ok(ProjectionFit {
        a: params.a,
        b: params.b,
        c: params.c,
        m_bar: params.m_bar,
        n,
        coeffs: all[..=m_star].to_vec(),
        m_star,
        contrast_values: contrast,
    })
}

/// Projection fits of the post-jump and pre-jump laws of one chain.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveFits {
    pub post: ProjectionFit,
    pub pre: ProjectionFit,
}

impl AdaptiveFits {
    /// Fits `μ` on `Z_0, …, Z_{n−1}` and `μ⁻` on `Z⁻_1, …, Z⁻_n`, the index
    /// ranges of the kernel numerators.
    pub fn fit(pc: &PreparedChain, params: &ProjectionParams) -> Result<Self, EstimateError> {
        Ok(AdaptiveFits {
            post: select_dimension(&pc.chain().prev, params)?,
            pre: select_dimension(&pc.chain().pre, params)?,
        })
    }
}

fn projected_numerator(fit: &ProjectionFit, at: f64, x: f64) -> Result<f64, EstimateError> {
    if at < fit.a || at > fit.b {
        return Err(EstimateError::OutsideProjectionInterval {
            x,
            a: fit.a,
            b: fit.b,
        });
    }
    let v = fit.eval(at);
    if v < 0.0 {
        return Err(EstimateError::NegativeNumerator { x, value: v });
    }
    Ok(v)
}

/// Projection version of λ̂♣: `h′Δ · μ̂(h(x))` over the crossing frequency.
pub fn adaptive_lambda_k(
    fits: &AdaptiveFits,
    pc: &PreparedChain,
    model: &ModelSpec,
    x: f64,
) -> Result<f64, EstimateError> {
    let (prefactor, hx) = fragmentation_terms(model, x)?;
    let num = projected_numerator(&fits.post, hx, x)?;
    let den = denominator_k(pc, model, x)?;
    Ok(prefactor * num / den)
}

/// Projection version of λ̂♢: `Δ · μ̂⁻(x)` over the crossing frequency.
pub fn adaptive_lambda_ks(
    fits: &AdaptiveFits,
    pc: &PreparedChain,
    model: &ModelSpec,
    x: f64,
) -> Result<f64, EstimateError> {
    let num = projected_numerator(&fits.pre, x, x)?;
    let den = denominator_ks(pc, x)?;
    Ok(model.flow.derivative_at_zero(x) * num / den)
}

/// Adaptive curve for `kind` ∈ {AdaptiveK, AdaptiveKS}.
pub fn adaptive_curve(
    fits: &AdaptiveFits,
    pc: &PreparedChain,
    model: &ModelSpec,
    kind: EstimatorKind,
    grid: &[f64],
) -> Result<EstimateCurve, EstimateError> {
    let n = pc.len();
    match kind {
        EstimatorKind::AdaptiveK => EstimateCurve::collect(kind, Bandwidths::None, n, grid, |x| {
            adaptive_lambda_k(fits, pc, model, x)
        }),
        EstimatorKind::AdaptiveKS => EstimateCurve::collect(kind, Bandwidths::None, n, grid, |x| {
            adaptive_lambda_ks(fits, pc, model, x)
        }),
        _ => Err(EstimateError::InvalidBandwidth(f64::NAN)),
    }
}
