//! Kernel estimators of the jump rate.
//!
//! All estimators read the chain through its transitions
//! `(Z_i, S_{i+1}, Z⁻_{i+1}, Z_{i+1})`, `i = 0, …, n−1`, so a single simulated
//! trajectory and transitions pooled from several observed lineages are
//! handled the same way. Sample arrays are sorted once in [`PreparedChain`],
//! which makes every estimate a symmetric function of the transitions and
//! lets kernel sums visit only the samples inside the kernel window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Flow, ModelError, ModelSpec};
use crate::simulate::Trajectory;
use crate::theory::{argument_grid, TcpLaws, TheoryError, ARGUMENT_STEP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("empirical denominator vanishes at x = {x}")]
    DenominatorZero { x: f64 },
    #[error("argument-selection criterion is zero on the whole grid at x = {x}")]
    DegenerateCriterion { x: f64 },
    #[error("oracle argument selection needs the TCP model")]
    OracleUnavailable,
    #[error("estimator requires a deterministic fragmentation")]
    NotDeterministic,
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("x = {x} lies outside the projection interval [{a}, {b}]")]
    OutsideProjectionInterval { x: f64, a: f64, b: f64 },
    #[error("projection numerator is negative ({value}) at x = {x}")]
    NegativeNumerator { x: f64, value: f64 },
    #[error("empty sample")]
    EmptySample,
    #[error("transition arrays have inconsistent lengths")]
    InconsistentChain,
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl EstimateError {
    /// Failures confined to one evaluation point; a curve records them and
    /// moves on.
    pub fn is_pointwise(&self) -> bool {
        matches!(
            self,
            EstimateError::DenominatorZero { .. }
                | EstimateError::DegenerateCriterion { .. }
                | EstimateError::OutsideProjectionInterval { .. }
                | EstimateError::NegativeNumerator { .. }
        )
    }
}

/// Normalized denominators below this are treated as zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Smoothing kernel. Only Epanechnikov is provided; the batched evaluators
/// rely on its polynomial form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Epanechnikov,
}

impl Kernel {
    pub fn epanechnikov() -> Self {
        Kernel::Epanechnikov
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// `K_h(u) = K(u/h)/h`.
    #[inline]
    pub fn scaled(&self, u: f64, h: f64) -> f64 {
        self.eval(u / h) / h
    }

    pub fn support_radius(&self) -> f64 {
        1.0
    }

    /// `τ² = ∫K²`.
    pub fn tau2(&self) -> f64 {
        match self {
            Kernel::Epanechnikov => 0.6,
        }
    }
}

/// Transitions of the embedded chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// `Z_i`
    pub prev: Vec<f64>,
    /// `S_{i+1}`
    pub s: Vec<f64>,
    /// `Z⁻_{i+1}`
    pub pre: Vec<f64>,
    /// `Z_{i+1}`
    pub next: Vec<f64>,
}

impl Chain {
    pub fn new(
        prev: Vec<f64>,
        s: Vec<f64>,
        pre: Vec<f64>,
        next: Vec<f64>,
    ) -> Result<Self, EstimateError> {
        let n = prev.len();
        if s.len() != n || pre.len() != n || next.len() != n {
            return Err(EstimateError::InconsistentChain);
        }
        Ok(Chain { prev, s, pre, next })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let mut prev = Vec::with_capacity(traj.len());
        prev.push(traj.z0);
        prev.extend_from_slice(&traj.z[..traj.len().saturating_sub(1)]);
        Chain {
            prev,
            s: traj.s.clone(),
            pre: traj.z_minus.clone(),
            next: traj.z.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.prev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_empty()
    }

    /// Appends the transitions of `other`.
    pub fn extend(&mut self, other: &Chain) {
        self.prev.extend_from_slice(&other.prev);
        self.s.extend_from_slice(&other.s);
        self.pre.extend_from_slice(&other.pre);
        self.next.extend_from_slice(&other.next);
    }
}

/// A chain with the sorted views the estimators need.
#[derive(Debug, Clone)]
pub struct PreparedChain {
    chain: Chain,
    prev_sorted: Vec<f64>,
    pre_sorted: Vec<f64>,
    /// `(Z_i, S_{i+1})` ordered by `Z_i`.
    by_z: Vec<(f64, f64)>,
    /// `(S_{i+1}, Z_i)` ordered by `S_{i+1}`.
    by_s: Vec<(f64, f64)>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.sort_by(f64::total_cmp);
    out
}

fn sorted_pairs(a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    out.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    out
}

impl PreparedChain {
    pub fn new(chain: Chain) -> Result<Self, EstimateError> {
        if chain.is_empty() {
            return Err(EstimateError::EmptySample);
        }
        Ok(PreparedChain {
            prev_sorted: sorted(&chain.prev),
            pre_sorted: sorted(&chain.pre),
            by_z: sorted_pairs(&chain.prev, &chain.s),
            by_s: sorted_pairs(&chain.s, &chain.prev),
            chain,
        })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, EstimateError> {
        Self::new(Chain::from_trajectory(traj))
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn len(&self) -> usize {
        self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain.is_empty()
    }

    /// `#{i : Z_i ≤ x < Z⁻_{i+1}}`.
    pub fn count_ks(&self, x: f64) -> usize {
        self.chain
            .prev
            .iter()
            .zip(&self.chain.pre)
            .filter(|(&z, &zm)| z <= x && x < zm)
            .count()
    }

    /// `#{i : Z_i ≤ x, Z_{i+1} ≥ hx}`.
    pub fn count_k(&self, x: f64, hx: f64) -> usize {
        self.chain
            .prev
            .iter()
            .zip(&self.chain.next)
            .filter(|(&z, &zn)| z <= x && zn >= hx)
            .count()
    }
}

/// `Σ K((v − c)/h)` over a sorted sample, visiting only the window.
fn window_sum(sorted: &[f64], c: f64, h: f64) -> f64 {
    let lo = sorted.partition_point(|&v| v <= c - h);
    let mut acc = 0.0;
    for &v in &sorted[lo..] {
        let u = (v - c) / h;
        if u >= 1.0 {
            break;
        }
        if u > -1.0 {
            acc += 0.75 * (1.0 - u * u);
        }
    }
    acc
}

fn check_bandwidth(h: f64) -> Result<(), EstimateError> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(EstimateError::InvalidBandwidth(h))
    }
}

/// `h′(x)Δ(x)` and `h(x)` for deterministic fragmentations.
pub(crate) fn fragmentation_terms(model: &ModelSpec, x: f64) -> Result<(f64, f64), EstimateError> {
    let frag = model
        .transition
        .fragmentation()
        .ok_or(EstimateError::NotDeterministic)?;
    Ok((
        frag.derivative(x) * model.flow.derivative_at_zero(x),
        frag.apply(x),
    ))
}

/// Normalized denominator of ♣, or `DenominatorZero`.
pub fn denominator_k(pc: &PreparedChain, model: &ModelSpec, x: f64) -> Result<f64, EstimateError> {
    let (_, hx) = fragmentation_terms(model, x)?;
    let d = pc.count_k(x, hx) as f64 / pc.len() as f64;
    if d < DENOMINATOR_FLOOR {
        return Err(EstimateError::DenominatorZero { x });
    }
    Ok(d)
}

/// Normalized denominator of ♢, or `DenominatorZero`.
pub fn denominator_ks(pc: &PreparedChain, x: f64) -> Result<f64, EstimateError> {
    let d = pc.count_ks(x) as f64 / pc.len() as f64;
    if d < DENOMINATOR_FLOOR {
        return Err(EstimateError::DenominatorZero { x });
    }
    Ok(d)
}

#[inline]
fn kernel_quotient(prefactor: f64, window: f64, h: f64, n: usize, den: f64) -> f64 {
    prefactor * (window / (h * n as f64)) / den
}

/// λ̂♣(x): post-jump density at `h(x)` over the crossing frequency.
pub fn lambda_k(
    pc: &PreparedChain,
    model: &ModelSpec,
    x: f64,
    h: f64,
) -> Result<f64, EstimateError> {
    check_bandwidth(h)?;
    let (prefactor, hx) = fragmentation_terms(model, x)?;
    let den = denominator_k(pc, model, x)?;
    let ws = window_sum(&pc.prev_sorted, hx, h);
    Ok(kernel_quotient(prefactor, ws, h, pc.len(), den))
}

/// λ̂♢(x): pre-jump density at `x` over the crossing frequency.
pub fn lambda_ks(
    pc: &PreparedChain,
    model: &ModelSpec,
    x: f64,
    h: f64,
) -> Result<f64, EstimateError> {
    check_bandwidth(h)?;
    let den = denominator_ks(pc, x)?;
    let ws = window_sum(&pc.pre_sorted, x, h);
    Ok(kernel_quotient(
        model.flow.derivative_at_zero(x),
        ws,
        h,
        pc.len(),
        den,
    ))
}

/// Estimate of `λ(Φ(t|ξ))` from the conditional law of the sojourn times.
pub fn lambda_circ_phi(
    pc: &PreparedChain,
    xi: f64,
    t: f64,
    h_s: f64,
    h_t: f64,
) -> Result<f64, EstimateError> {
    check_bandwidth(h_s)?;
    check_bandwidth(h_t)?;
    let lo = pc.by_z.partition_point(|p| p.0 <= xi - h_s);
    let (mut num, mut den) = (0.0, 0.0);
    for &(z, s) in &pc.by_z[lo..] {
        let u = (z - xi) / h_s;
        if u >= 1.0 {
            break;
        }
        if u <= -1.0 {
            continue;
        }
        let w = 0.75 * (1.0 - u * u);
        let v = (s - t) / h_t;
        if v.abs() < 1.0 {
            num += w * 0.75 * (1.0 - v * v) / h_t;
        }
        if s > t {
            den += w;
        }
    }
    let norm = h_s * pc.len() as f64;
    if den / norm < DENOMINATOR_FLOOR {
        return Err(EstimateError::DenominatorZero { x: xi });
    }
    Ok(num / den)
}

/// Scale of the fixed-point kernel weights in the empirical selection
/// criterion. Integer sums make the argmax independent of summation order,
/// so batched and pointwise evaluations always agree.
const CRITERION_SCALE: f64 = (1u64 << 40) as f64;

#[inline]
fn criterion_weight(u: f64) -> i64 {
    if u.abs() < 1.0 {
        (0.75 * (1.0 - u * u) * CRITERION_SCALE).round() as i64
    } else {
        0
    }
}

/// Number of points of the argument grid for `x`.
fn argument_count(x: f64) -> usize {
    argument_grid(x, ARGUMENT_STEP).len()
}

/// Empirical argument selection: the first maximizer over `C_x` of
/// `Σ K((Z_i − ξ)/h_s)·1{Φ(S_{i+1}|ξ) > x}`.
pub fn empirical_argmax(
    pc: &PreparedChain,
    flow: &Flow,
    x: f64,
    h_s: f64,
) -> Result<f64, EstimateError> {
    check_bandwidth(h_s)?;
    let mut best = (0usize, 0i64);
    for j in 1..=argument_count(x) {
        let xi = j as f64 * ARGUMENT_STEP;
        let lo = pc.by_z.partition_point(|p| p.0 <= xi - h_s);
        let mut c = 0i64;
        for &(z, s) in &pc.by_z[lo..] {
            let u = (z - xi) / h_s;
            if u >= 1.0 {
                break;
            }
            if flow.eval(s, xi) > x {
                c += criterion_weight(u);
            }
        }
        if c > best.1 {
            best = (j, c);
        }
    }
    if best.1 == 0 {
        return Err(EstimateError::DegenerateCriterion { x });
    }
    Ok(best.0 as f64 * ARGUMENT_STEP)
}

/// λ̂♠ᵒ(x): conditional estimator at the oracle argument.
pub fn lambda_amgo(
    pc: &PreparedChain,
    model: &ModelSpec,
    laws: &TcpLaws,
    x: f64,
    h_s: f64,
    h_t: f64,
) -> Result<f64, EstimateError> {
    let xi = oracle_argument(laws, x)?;
    let t = model.flow.inverse_time(xi, x)?;
    lambda_circ_phi(pc, xi, t, h_s, h_t)
}

pub(crate) fn oracle_argument(laws: &TcpLaws, x: f64) -> Result<f64, EstimateError> {
    match laws.oracle_argmax(x, ARGUMENT_STEP) {
        Ok((xi, _)) => Ok(xi),
        Err(TheoryError::DegenerateDenominator { .. }) => {
            Err(EstimateError::DegenerateCriterion { x })
        }
        Err(e) => Err(e.into()),
    }
}

/// λ̂♠(x): conditional estimator at the empirically selected argument, with
/// the same spatial bandwidth for selection and estimation.
pub fn lambda_amg(
    pc: &PreparedChain,
    model: &ModelSpec,
    x: f64,
    h_s: f64,
    h_t: f64,
) -> Result<f64, EstimateError> {
    let xi = empirical_argmax(pc, &model.flow, x, h_s)?;
    let t = model.flow.inverse_time(xi, x)?;
    lambda_circ_phi(pc, xi, t, h_s, h_t)
}

/// Which estimator produced a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "k")]
    K,
    #[serde(rename = "ks")]
    KS,
    #[serde(rename = "amgo")]
    AMGO,
    #[serde(rename = "amg")]
    AMG,
    #[serde(rename = "adaptive_k")]
    AdaptiveK,
    #[serde(rename = "adaptive_ks")]
    AdaptiveKS,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::K => "k",
            EstimatorKind::KS => "ks",
            EstimatorKind::AMGO => "amgo",
            EstimatorKind::AMG => "amg",
            EstimatorKind::AdaptiveK => "adaptive_k",
            EstimatorKind::AdaptiveKS => "adaptive_ks",
        }
    }
}

/// Smoothing parameters attached to a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidths {
    Scalar(f64),
    Pair { h_s: f64, h_t: f64 },
    None,
}

/// Estimates on a state grid; failed points hold `NaN` and are listed in
/// `failures`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateCurve {
    pub kind: EstimatorKind,
    pub bandwidths: Bandwidths,
    pub n: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub failures: Vec<usize>,
}

impl EstimateCurve {
    /// Collects pointwise results; non-pointwise errors abort.
    pub fn collect(
        kind: EstimatorKind,
        bandwidths: Bandwidths,
        n: usize,
        grid: &[f64],
        mut eval: impl FnMut(f64) -> Result<f64, EstimateError>,
    ) -> Result<Self, EstimateError> {
        let mut values = Vec::with_capacity(grid.len());
        let mut failures = Vec::new();
        for (i, &x) in grid.iter().enumerate() {
            match eval(x) {
                Ok(v) => values.push(v),
                Err(e) if e.is_pointwise() => {
                    values.push(f64::NAN);
                    failures.push(i);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(EstimateCurve {
            kind,
            bandwidths,
            n,
            grid: grid.to_vec(),
            values,
            failures,
        })
    }

    pub fn value_at(&self, i: usize) -> Option<f64> {
        let v = self.values[i];
        (!v.is_nan()).then_some(v)
    }

    /// Writes `x,estimate,failed`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "estimate", "failed"])?;
        for (i, &x) in self.grid.iter().enumerate() {
            let failed = self.values[i].is_nan();
            let est = if failed {
                String::new()
            } else {
                crate::simulate::fmt_f64(self.values[i])
            };
            w.write_record([
                crate::simulate::fmt_f64(x),
                est,
                u8::from(failed).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Kernel curve for one of the four kernel estimators.
pub fn kernel_curve(
    pc: &PreparedChain,
    model: &ModelSpec,
    kind: EstimatorKind,
    bandwidths: Bandwidths,
    grid: &[f64],
) -> Result<EstimateCurve, EstimateError> {
    let n = pc.len();
    match (kind, bandwidths) {
        (EstimatorKind::K, Bandwidths::Scalar(h)) => {
            EstimateCurve::collect(kind, bandwidths, n, grid, |x| lambda_k(pc, model, x, h))
        }
        (EstimatorKind::KS, Bandwidths::Scalar(h)) => {
            EstimateCurve::collect(kind, bandwidths, n, grid, |x| lambda_ks(pc, model, x, h))
        }
        (EstimatorKind::AMGO, Bandwidths::Pair { h_s, h_t }) => {
            let kappa = model.tcp_kappa().ok_or(EstimateError::OracleUnavailable)?;
            let laws = TcpLaws::new(kappa, Default::default())?;
            EstimateCurve::collect(kind, bandwidths, n, grid, |x| {
                lambda_amgo(pc, model, &laws, x, h_s, h_t)
            })
        }
        (EstimatorKind::AMG, Bandwidths::Pair { h_s, h_t }) => {
            EstimateCurve::collect(kind, bandwidths, n, grid, |x| {
                lambda_amg(pc, model, x, h_s, h_t)
            })
        }
        _ => Err(EstimateError::InvalidBandwidth(f64::NAN)),
    }
}

/// Curves of λ̂♣ (or λ̂♢ when `ks` is set) for several bandwidths at once,
/// indexed `[bandwidth][grid point]`. Denominators are shared across
/// bandwidths.
pub fn scalar_curves_batch(
    pc: &PreparedChain,
    model: &ModelSpec,
    ks: bool,
    grid: &[f64],
    bandwidths: &[f64],
) -> Result<Vec<Vec<Option<f64>>>, EstimateError> {
    let mut setup = Vec::with_capacity(grid.len());
    for &x in grid {
        let den = if ks {
            denominator_ks(pc, x).ok()
        } else {
            denominator_k(pc, model, x).ok()
        };
        let (prefactor, centre) = if ks {
            (model.flow.derivative_at_zero(x), x)
        } else {
            fragmentation_terms(model, x)?
        };
        setup.push((den, prefactor, centre));
    }
    let sample = if ks { &pc.pre_sorted } else { &pc.prev_sorted };
    let mut out = Vec::with_capacity(bandwidths.len());
    for &h in bandwidths {
        check_bandwidth(h)?;
        out.push(
            setup
                .iter()
                .map(|&(den, pre, c)| {
                    den.map(|d| kernel_quotient(pre, window_sum(sample, c, h), h, pc.len(), d))
                })
                .collect(),
        );
    }
    Ok(out)
}

/// How the argument `ξ` is chosen for the conditional estimator.
#[derive(Debug, Clone)]
pub enum ArgumentSelection {
    /// Precomputed oracle arguments, one per grid point (`None` where the
    /// criterion is degenerate).
    Oracle(Vec<Option<f64>>),
    Empirical,
}

/// Oracle arguments of the TCP model on a grid.
pub fn oracle_arguments(laws: &TcpLaws, grid: &[f64]) -> Result<Vec<Option<f64>>, EstimateError> {
    grid.iter()
        .map(|&x| match oracle_argument(laws, x) {
            Ok(xi) => Ok(Some(xi)),
            Err(EstimateError::DegenerateCriterion { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Empirical arguments for every grid point at once (`grid` ascending).
///
/// For each `ξ_j` the criterion at `x` sums the kernel weights of samples
/// with `Φ(S|ξ_j) > x`, so each sample adds its weight to a contiguous range
/// of grid indices; ranges are accumulated with difference arrays.
pub fn empirical_arguments_batch(
    pc: &PreparedChain,
    flow: &Flow,
    grid: &[f64],
    h_s: f64,
) -> Result<Vec<Option<f64>>, EstimateError> {
    check_bandwidth(h_s)?;
    debug_assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    let m = grid.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let counts: Vec<usize> = grid.iter().map(|&x| argument_count(x)).collect();
    let j_max = counts[m - 1];
    let mut best = vec![(0usize, 0i64); m];
    let mut diff = vec![0i64; m + 1];
    for j in 1..=j_max {
        let xi = j as f64 * ARGUMENT_STEP;
        // first grid index whose argument grid contains ξ_j
        let k_lo = counts.partition_point(|&c| c < j);
        diff.iter_mut().for_each(|d| *d = 0);
        let lo = pc.by_z.partition_point(|p| p.0 <= xi - h_s);
        for &(z, s) in &pc.by_z[lo..] {
            let u = (z - xi) / h_s;
            if u >= 1.0 {
                break;
            }
            let y = flow.eval(s, xi);
            // grid points with x < y
            let k_hi = grid.partition_point(|&x| x < y);
            if k_hi > k_lo {
                let w = criterion_weight(u);
                diff[k_lo] += w;
                diff[k_hi] -= w;
            }
        }
        let mut c = 0i64;
        for k in 0..m {
            c += diff[k];
            if k >= k_lo && c > best[k].1 {
                best[k] = (j, c);
            }
        }
    }
    Ok(best
        .into_iter()
        .map(|(j, c)| (c > 0).then_some(j as f64 * ARGUMENT_STEP))
        .collect())
}

/// Conditional-estimator curves over a bandwidth grid, indexed
/// `[h_s][h_t][grid point]`.
///
/// For fixed `(h_s, x)` the argument, the time `t = τ_x(ξ)` and the
/// denominator do not depend on `h_t`. The samples inside the spatial window
/// are visited in order of `S`, and prefix sums of `w` and `w·(S − t)²` give
/// each Epanechnikov time-kernel sum in two binary searches.
pub fn conditional_curves_batch(
    pc: &PreparedChain,
    model: &ModelSpec,
    selection: &ArgumentSelection,
    grid: &[f64],
    h_s_grid: &[f64],
    h_t_grid: &[f64],
) -> Result<Vec<Vec<Vec<Option<f64>>>>, EstimateError> {
    let n = pc.len() as f64;
    for &h in h_t_grid {
        check_bandwidth(h)?;
    }
    let mut out = Vec::with_capacity(h_s_grid.len());
    let mut d: Vec<f64> = Vec::with_capacity(pc.len());
    let mut p0: Vec<f64> = Vec::with_capacity(pc.len() + 1);
    let mut p2: Vec<f64> = Vec::with_capacity(pc.len() + 1);
    for &h_s in h_s_grid {
        check_bandwidth(h_s)?;
        let args = match selection {
            ArgumentSelection::Oracle(a) => a.clone(),
            ArgumentSelection::Empirical => empirical_arguments_batch(pc, &model.flow, grid, h_s)?,
        };
        let mut per_ht = vec![vec![None; grid.len()]; h_t_grid.len()];
        for (k, &x) in grid.iter().enumerate() {
            let Some(xi) = args[k] else { continue };
            let t = model.flow.inverse_time(xi, x)?;
            d.clear();
            p0.clear();
            p2.clear();
            p0.push(0.0);
            p2.push(0.0);
            let mut den = 0.0;
            for &(s, z) in &pc.by_s {
                let u = (z - xi) / h_s;
                if u.abs() >= 1.0 {
                    continue;
                }
                let w = 0.75 * (1.0 - u * u);
                let dv = s - t;
                if s > t {
                    den += w;
                }
                d.push(dv);
                p0.push(p0[p0.len() - 1] + w);
                p2.push(p2[p2.len() - 1] + w * dv * dv);
            }
            if den / (h_s * n) < DENOMINATOR_FLOOR {
                continue;
            }
            for (a, &h_t) in h_t_grid.iter().enumerate() {
                let lo = d.partition_point(|&v| v <= -h_t);
                let hi = d.partition_point(|&v| v < h_t);
                let w0 = p0[hi] - p0[lo];
                let w2 = p2[hi] - p2[lo];
                let num = (0.75 / h_t) * (w0 - w2 / (h_t * h_t));
                per_ht[a][k] = Some(num.max(0.0) / den);
            }
        }
        out.push(per_ht);
    }
    Ok(out)
}
