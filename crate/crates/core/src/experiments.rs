//! Monte-Carlo harness for the TCP study: ISE bandwidth selection, CLT
//! checks at a point, pointwise error distributions, adaptive variants and
//! the variance-crossing report.
//!
//! Every replicate is an independent work unit with its own seed, results are
//! collected in replicate order, and the report carries no timing data, so a
//! run is a pure function of its configuration.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{adaptive_lambda_k, adaptive_lambda_ks, AdaptiveFits, ProjectionParams};
use crate::estimators::{
    conditional_curves_batch, empirical_argmax, lambda_amg, lambda_amgo, lambda_k, lambda_ks,
    oracle_arguments, scalar_curves_batch, ArgumentSelection, Bandwidths, Chain, EstimateCurve,
    EstimateError, EstimatorKind, Kernel, PreparedChain,
};
use crate::model::{ModelConfig, ModelError, ModelSpec};
use crate::simulate::{fmt_f64, replicate_seed, simulate_chain, SimulateError};
use crate::stats;
use crate::theory::{
    normalized_sd_curves, sign_changes, BandwidthSet, TcpLaws, TheoryError, VarianceCurves,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{failed} of {total} grid points failed")]
    CoverageGap { failed: usize, total: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("the experiment needs the TCP model")]
    NotTcp,
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `start, start + step, …, stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub const fn new(start: f64, stop: f64, step: f64) -> Self {
        GridSpec { start, stop, step }
    }

    pub fn points(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.stop < self.start {
            return Vec::new();
        }
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| self.start + i as f64 * self.step)
            .collect()
    }

    /// Parses `start:stop:step`.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad =
            || ExperimentError::InvalidConfig(format!("grid `{text}` is not start:stop:step"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let g = GridSpec::new(num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if g.points().is_empty() {
            return Err(bad());
        }
        Ok(g)
    }
}

/// Candidate bandwidths of the ISE search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid {
    pub scalar: GridSpec,
    pub space: GridSpec,
    pub time: GridSpec,
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        BandwidthGrid {
            scalar: GridSpec::new(0.025, 1.0, 0.025),
            space: GridSpec::new(0.01, 0.5, 0.01),
            time: GridSpec::new(0.05, 1.5, 0.05),
        }
    }
}

/// Bandwidths fixed in advance for one sample size, skipping the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedBandwidths {
    pub n: usize,
    pub bandwidths: BandwidthSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub z0: f64,
    /// Jumps simulated and discarded before the observed `n`.
    pub burn_in: usize,
    pub estimators: Vec<EstimatorKind>,
    pub ise_grid: GridSpec,
    pub bandwidth_grid: BandwidthGrid,
    /// Largest tolerated fraction of failed ISE grid points.
    pub max_failed_fraction: f64,
    pub fixed_bandwidths: Vec<FixedBandwidths>,
    pub clt_x: f64,
    pub error_grid: GridSpec,
    pub adaptive: Option<ProjectionParams>,
    pub adaptive_grid: GridSpec,
    pub variance_kappas: Vec<f64>,
    pub variance_grid: GridSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::Tcp { kappa: 0.4 },
            sample_sizes: vec![1000, 10_000],
            replicates: 100,
            seed: 20_240_601,
            z0: 1.0,
            burn_in: 0,
            estimators: vec![
                EstimatorKind::K,
                EstimatorKind::KS,
                EstimatorKind::AMGO,
                EstimatorKind::AMG,
            ],
            ise_grid: GridSpec::new(0.5, 2.5, 0.05),
            bandwidth_grid: BandwidthGrid::default(),
            max_failed_fraction: 0.2,
            fixed_bandwidths: Vec::new(),
            clt_x: 2.0,
            error_grid: GridSpec::new(0.5, 2.5, 0.2),
            adaptive: Some(ProjectionParams::default()),
            adaptive_grid: GridSpec::new(0.5, 1.9, 0.2),
            variance_kappas: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            variance_grid: GridSpec::new(0.1, 4.0, 0.01),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return bad("sample sizes must be nonempty and positive");
        }
        for (name, g) in [
            ("ise_grid", &self.ise_grid),
            ("error_grid", &self.error_grid),
            ("bandwidth_grid.scalar", &self.bandwidth_grid.scalar),
            ("bandwidth_grid.space", &self.bandwidth_grid.space),
            ("bandwidth_grid.time", &self.bandwidth_grid.time),
        ] {
            if g.points().is_empty() {
                return Err(ExperimentError::InvalidConfig(format!("{name} is empty")));
            }
        }
        if self
            .estimators
            .iter()
            .any(|k| matches!(k, EstimatorKind::AdaptiveK | EstimatorKind::AdaptiveKS))
        {
            return bad("adaptive estimators are configured through `adaptive`");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Integrated squared error on the curve's grid, as a rectangle sum with
/// the given step. Failed points are excluded; more than `max_failed`
/// (a fraction) of failures is a coverage gap.
pub fn ise(
    curve: &EstimateCurve,
    truth: impl Fn(f64) -> f64,
    step: f64,
    max_failed: f64,
) -> Result<f64, ExperimentError> {
    let values: Vec<Option<f64>> = (0..curve.grid.len()).map(|i| curve.value_at(i)).collect();
    ise_values(&curve.grid, &values, truth, step, max_failed)
}

pub fn ise_values(
    grid: &[f64],
    values: &[Option<f64>],
    truth: impl Fn(f64) -> f64,
    step: f64,
    max_failed: f64,
) -> Result<f64, ExperimentError> {
    let failed = values.iter().filter(|v| v.is_none()).count();
    if failed as f64 > max_failed * grid.len() as f64 {
        return Err(ExperimentError::CoverageGap {
            failed,
            total: grid.len(),
        });
    }
    Ok(step
        * grid
            .iter()
            .zip(values)
            .filter_map(|(&x, v)| v.map(|v| (v - truth(x)).powi(2)))
            .sum::<f64>())
}

const STAGE_SEARCH: u64 = 1;
const STAGE_EVALUATION: u64 = 2;

/// Seed of replicate `index` for one stage and sample size: the base seed
/// with stage and size tags in disjoint high bits, then `⊕ index`.
pub fn stage_seed(seed: u64, stage: u64, n: usize, index: usize) -> u64 {
    replicate_seed(seed ^ (stage << 56) ^ ((n as u64) << 24), index as u64)
}

fn tcp_laws(model: &ModelSpec) -> Result<TcpLaws, ExperimentError> {
    let kappa = model.tcp_kappa().ok_or(ExperimentError::NotTcp)?;
    Ok(TcpLaws::new(kappa, Default::default())?)
}

fn truth_fn(model: &ModelSpec) -> Result<impl Fn(f64) -> f64 + '_, ExperimentError> {
    let rate = model
        .rate
        .as_ref()
        .ok_or_else(|| ExperimentError::InvalidConfig("model has no jump rate".into()))?;
    Ok(move |x| rate.eval(x))
}

/// Simulates replicate `index` and drops the burn-in transitions.
pub fn replicate_chain(
    model: &ModelSpec,
    config: &ExperimentConfig,
    stage: u64,
    n: usize,
    index: usize,
) -> Result<PreparedChain, ExperimentError> {
    let seed = stage_seed(config.seed, stage, n, index);
    let traj = simulate_chain(model, config.z0, n + config.burn_in, seed)?;
    let full = Chain::from_trajectory(&traj);
    let b = config.burn_in;
    let chain = Chain::new(
        full.prev[b..].to_vec(),
        full.s[b..].to_vec(),
        full.pre[b..].to_vec(),
        full.next[b..].to_vec(),
    )?;
    Ok(PreparedChain::new(chain)?)
}

/// Optimal bandwidth of one replicate for one estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchChoice {
    pub bandwidths: Bandwidths,
    pub ise: f64,
}

/// Minimizer over a list of candidate ISE results; first minimum wins.
fn argmin_ise<T: Copy>(cands: impl Iterator<Item = (T, Option<f64>)>) -> Option<(T, f64)> {
    let mut best: Option<(T, f64)> = None;
    for (c, v) in cands {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((c, v));
            }
        }
    }
    best
}

/// ISE search for every configured estimator on one prepared chain.
pub fn search_replicate(
    model: &ModelSpec,
    pc: &PreparedChain,
    config: &ExperimentConfig,
    oracle: Option<&[Option<f64>]>,
) -> Result<Vec<Option<SearchChoice>>, ExperimentError> {
    let grid = config.ise_grid.points();
    let step = config.ise_grid.step;
    let truth = truth_fn(model)?;
    let score = |vals: &[Option<f64>]| match ise_values(
        &grid,
        vals,
        &truth,
        step,
        config.max_failed_fraction,
    ) {
        Ok(v) => Ok(Some(v)),
        Err(ExperimentError::CoverageGap { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let scalar = config.bandwidth_grid.scalar.points();
    let space = config.bandwidth_grid.space.points();
    let time = config.bandwidth_grid.time.points();
    let mut out = Vec::with_capacity(config.estimators.len());
    for &kind in &config.estimators {
        let choice = match kind {
            EstimatorKind::K | EstimatorKind::KS => {
                let curves =
                    scalar_curves_batch(pc, model, kind == EstimatorKind::KS, &grid, &scalar)?;
                let scores = curves
                    .iter()
                    .map(|c| score(c))
                    .collect::<Result<Vec<_>, _>>()?;
                argmin_ise(scalar.iter().copied().zip(scores)).map(|(h, v)| SearchChoice {
                    bandwidths: Bandwidths::Scalar(h),
                    ise: v,
                })
            }
            EstimatorKind::AMGO | EstimatorKind::AMG => {
                let selection = if kind == EstimatorKind::AMGO {
                    ArgumentSelection::Oracle(oracle.ok_or(ExperimentError::NotTcp)?.to_vec())
                } else {
                    ArgumentSelection::Empirical
                };
                let curves = conditional_curves_batch(pc, model, &selection, &grid, &space, &time)?;
                let mut cands = Vec::with_capacity(space.len() * time.len());
                for (a, &h_s) in space.iter().enumerate() {
                    for (b, &h_t) in time.iter().enumerate() {
                        cands.push(((h_s, h_t), score(&curves[a][b])?));
                    }
                }
                argmin_ise(cands.into_iter()).map(|((h_s, h_t), v)| SearchChoice {
                    bandwidths: Bandwidths::Pair { h_s, h_t },
                    ise: v,
                })
            }
            _ => unreachable!("validated configuration"),
        };
        out.push(choice);
    }
    Ok(out)
}

/// Bandwidth choices of one estimator across replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindSearch {
    pub kind: EstimatorKind,
    /// `None` for replicates dropped after coverage gaps at every bandwidth.
    pub choices: Vec<Option<SearchChoice>>,
    pub succeeded: usize,
    pub dropped: usize,
    pub median: Option<Bandwidths>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub n: usize,
    pub kinds: Vec<KindSearch>,
}

impl SearchResult {
    pub fn kind(&self, kind: EstimatorKind) -> Option<&KindSearch> {
        self.kinds.iter().find(|k| k.kind == kind)
    }

    /// Medians as a bandwidth set (missing entries are NaN).
    pub fn median_set(&self) -> BandwidthSet {
        let scalar = |k| match self.kind(k).and_then(|k| k.median) {
            Some(Bandwidths::Scalar(h)) => h,
            _ => f64::NAN,
        };
        let pair = self
            .kind(EstimatorKind::AMG)
            .or_else(|| self.kind(EstimatorKind::AMGO))
            .and_then(|k| k.median);
        let (h_s, h_t) = match pair {
            Some(Bandwidths::Pair { h_s, h_t }) => (h_s, h_t),
            _ => (f64::NAN, f64::NAN),
        };
        BandwidthSet {
            h_k: scalar(EstimatorKind::K),
            h_ks: scalar(EstimatorKind::KS),
            h_s,
            h_t,
        }
    }
}

fn median_bandwidths(choices: &[Option<SearchChoice>]) -> Option<Bandwidths> {
    let ok: Vec<Bandwidths> = choices.iter().flatten().map(|c| c.bandwidths).collect();
    match ok.first()? {
        Bandwidths::Scalar(_) => {
            let hs: Vec<f64> = ok
                .iter()
                .filter_map(|b| match b {
                    Bandwidths::Scalar(h) => Some(*h),
                    _ => None,
                })
                .collect();
            Some(Bandwidths::Scalar(stats::median(&hs)?))
        }
        Bandwidths::Pair { .. } => {
            let (mut s, mut t) = (Vec::new(), Vec::new());
            for b in &ok {
                if let Bandwidths::Pair { h_s, h_t } = b {
                    s.push(*h_s);
                    t.push(*h_t);
                }
            }
            Some(Bandwidths::Pair {
                h_s: stats::median(&s)?,
                h_t: stats::median(&t)?,
            })
        }
        Bandwidths::None => None,
    }
}

/// Per-replicate ISE-optimal bandwidths and their medians at sample size `n`.
pub fn bandwidth_search(
    model: &ModelSpec,
    config: &ExperimentConfig,
    n: usize,
) -> Result<SearchResult, ExperimentError> {
    config.validate()?;
    let needs_oracle = config.estimators.contains(&EstimatorKind::AMGO);
    let oracle = if needs_oracle {
        Some(oracle_arguments(
            &tcp_laws(model)?,
            &config.ise_grid.points(),
        )?)
    } else {
        None
    };
    let per_rep: Vec<Vec<Option<SearchChoice>>> = (0..config.replicates)
        .into_par_iter()
        .map(|i| {
            let pc = replicate_chain(model, config, STAGE_SEARCH, n, i)?;
            search_replicate(model, &pc, config, oracle.as_deref())
        })
        .collect::<Result<_, ExperimentError>>()?;
    let kinds = config
        .estimators
        .iter()
        .enumerate()
        .map(|(j, &kind)| {
            let choices: Vec<Option<SearchChoice>> = per_rep.iter().map(|r| r[j]).collect();
            let succeeded = choices.iter().filter(|c| c.is_some()).count();
            KindSearch {
                kind,
                median: median_bandwidths(&choices),
                succeeded,
                dropped: choices.len() - succeeded,
                choices,
            }
        })
        .collect();
    Ok(SearchResult { n, kinds })
}

/// Estimates of one replicate in the evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateEvaluation {
    pub seed: u64,
    /// `λ̂(clt_x)` per configured estimator.
    pub clt: Vec<Option<f64>>,
    /// `|λ̂(x) − λ(x)|` per estimator and error-grid point.
    pub errors: Vec<Vec<Option<f64>>>,
    /// Empirically selected argument at `clt_x` (when ♠ is configured).
    pub amg_argument: Option<f64>,
    pub adaptive: Option<AdaptiveReplicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveReplicate {
    pub m_star_post: usize,
    pub m_star_pre: usize,
    /// errors of adaptive ♣ and ♢ on the adaptive grid
    pub errors_k: Vec<Option<f64>>,
    pub errors_ks: Vec<Option<f64>>,
}

fn point_estimate(
    kind: EstimatorKind,
    bw: Bandwidths,
    pc: &PreparedChain,
    model: &ModelSpec,
    laws: Option<&TcpLaws>,
    x: f64,
) -> Result<Option<f64>, ExperimentError> {
    let r = match (kind, bw) {
        (EstimatorKind::K, Bandwidths::Scalar(h)) => lambda_k(pc, model, x, h),
        (EstimatorKind::KS, Bandwidths::Scalar(h)) => lambda_ks(pc, model, x, h),
        (EstimatorKind::AMGO, Bandwidths::Pair { h_s, h_t }) => {
            lambda_amgo(pc, model, laws.ok_or(ExperimentError::NotTcp)?, x, h_s, h_t)
        }
        (EstimatorKind::AMG, Bandwidths::Pair { h_s, h_t }) => lambda_amg(pc, model, x, h_s, h_t),
        _ => return Ok(None),
    };
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_pointwise() => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn evaluate_replicate(
    model: &ModelSpec,
    config: &ExperimentConfig,
    n: usize,
    index: usize,
    bandwidths: &[Option<Bandwidths>],
    laws: Option<&TcpLaws>,
) -> Result<ReplicateEvaluation, ExperimentError> {
    let pc = replicate_chain(model, config, STAGE_EVALUATION, n, index)?;
    let truth = truth_fn(model)?;
    let err_grid = config.error_grid.points();
    let mut clt = Vec::with_capacity(config.estimators.len());
    let mut errors = Vec::with_capacity(config.estimators.len());
    for (&kind, bw) in config.estimators.iter().zip(bandwidths) {
        let Some(bw) = *bw else {
            clt.push(None);
            errors.push(vec![None; err_grid.len()]);
            continue;
        };
        clt.push(point_estimate(kind, bw, &pc, model, laws, config.clt_x)?);
        let mut row = Vec::with_capacity(err_grid.len());
        for &x in &err_grid {
            row.push(point_estimate(kind, bw, &pc, model, laws, x)?.map(|v| (v - truth(x)).abs()));
        }
        errors.push(row);
    }
    let amg_argument = config
        .estimators
        .iter()
        .zip(bandwidths)
        .find_map(|(k, b)| match (k, b) {
            (EstimatorKind::AMG, Some(Bandwidths::Pair { h_s, .. })) => Some(*h_s),
            _ => None,
        })
        .and_then(|h_s| empirical_argmax(&pc, &model.flow, config.clt_x, h_s).ok());
    let adaptive = match &config.adaptive {
        Some(params) if model.transition.fragmentation().is_some() => {
            let fits = AdaptiveFits::fit(&pc, params)?;
            let grid = config.adaptive_grid.points();
            let wrap = |r: Result<f64, EstimateError>, x: f64| match r {
                Ok(v) => Ok(Some((v - truth(x)).abs())),
                Err(e) if e.is_pointwise() => Ok(None),
                Err(e) => Err(ExperimentError::from(e)),
            };
            let errors_k = grid
                .iter()
                .map(|&x| wrap(adaptive_lambda_k(&fits, &pc, model, x), x))
                .collect::<Result<_, _>>()?;
            let errors_ks = grid
                .iter()
                .map(|&x| wrap(adaptive_lambda_ks(&fits, &pc, model, x), x))
                .collect::<Result<_, _>>()?;
            Some(AdaptiveReplicate {
                m_star_post: fits.post.m_star,
                m_star_pre: fits.pre.m_star,
                errors_k,
                errors_ks,
            })
        }
        _ => None,
    };
    Ok(ReplicateEvaluation {
        seed: stage_seed(config.seed, STAGE_EVALUATION, n, index),
        clt,
        errors,
        amg_argument,
        adaptive,
    })
}

/// Per-estimator aggregate of the CLT stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltSummary {
    pub kind: EstimatorKind,
    pub bandwidths: Option<Bandwidths>,
    pub x: f64,
    pub theory_mean: f64,
    /// Rate-normalized asymptotic sd (♠ᵒ variance for both ♠ estimators).
    pub theory_sd: Option<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median_abs_error: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
}

/// Error distribution of one (estimator, x) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorCell {
    pub kind: EstimatorKind,
    pub x: f64,
    pub summary: Option<stats::Summary>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationResult {
    pub n: usize,
    pub bandwidths: Vec<Option<Bandwidths>>,
    pub replicates: Vec<ReplicateEvaluation>,
    pub clt: Vec<CltSummary>,
    pub errors: Vec<ErrorCell>,
    pub adaptive_errors: Vec<ErrorCell>,
    pub amg_argument_sd: Option<f64>,
    pub max_m_star: Option<usize>,
}

impl EvaluationResult {
    pub fn clt_for(&self, kind: EstimatorKind) -> Option<&CltSummary> {
        self.clt.iter().find(|c| c.kind == kind)
    }

    /// Median error of a kernel (or adaptive) cell at `x`.
    pub fn median_error(&self, kind: EstimatorKind, x: f64) -> Option<f64> {
        self.errors
            .iter()
            .chain(&self.adaptive_errors)
            .find(|c| c.kind == kind && (c.x - x).abs() < 1e-9)
            .and_then(|c| c.summary.map(|s| s.median))
    }
}

fn theory_sd(
    kind: EstimatorKind,
    bw: Bandwidths,
    laws: Option<&TcpLaws>,
    x: f64,
    n: usize,
) -> Option<f64> {
    let laws = laws?;
    let curves = VarianceCurves::compute(laws, &[x], Kernel::Epanechnikov.tau2()).ok()?;
    let nf = n as f64;
    match (kind, bw) {
        (EstimatorKind::K, Bandwidths::Scalar(h)) => Some((curves.sigma_k2[0] / (nf * h)).sqrt()),
        (EstimatorKind::KS, Bandwidths::Scalar(h)) => Some((curves.sigma_ks2[0] / (nf * h)).sqrt()),
        (EstimatorKind::AMGO | EstimatorKind::AMG, Bandwidths::Pair { h_s, h_t }) => {
            Some((curves.sigma_amg2[0] / (nf * h_s * h_t)).sqrt())
        }
        _ => None,
    }
}

fn error_cells(
    kinds: &[EstimatorKind],
    grid: &[f64],
    column: impl Fn(usize, usize) -> Vec<Option<f64>>,
) -> Vec<ErrorCell> {
    let mut out = Vec::new();
    for (j, &kind) in kinds.iter().enumerate() {
        for (g, &x) in grid.iter().enumerate() {
            let col = column(j, g);
            let ok: Vec<f64> = col.iter().flatten().copied().collect();
            out.push(ErrorCell {
                kind,
                x,
                summary: stats::summarize(&ok),
                failed: col.len() - ok.len(),
            });
        }
    }
    out
}

/// Fresh replicates evaluated with fixed bandwidths (one entry per
/// configured estimator).
pub fn evaluation(
    model: &ModelSpec,
    config: &ExperimentConfig,
    n: usize,
    bandwidths: &[Option<Bandwidths>],
) -> Result<EvaluationResult, ExperimentError> {
    config.validate()?;
    if bandwidths.len() != config.estimators.len() {
        return Err(ExperimentError::InvalidConfig(
            "one bandwidth entry per estimator is required".into(),
        ));
    }
    let laws = tcp_laws(model).ok();
    let reps: Vec<ReplicateEvaluation> = (0..config.replicates)
        .into_par_iter()
        .map(|i| evaluate_replicate(model, config, n, i, bandwidths, laws.as_ref()))
        .collect::<Result<_, _>>()?;
    let truth = truth_fn(model)?;
    let x = config.clt_x;
    let clt = config
        .estimators
        .iter()
        .enumerate()
        .map(|(j, &kind)| {
            let vals: Vec<f64> = reps.iter().filter_map(|r| r.clt[j]).collect();
            let abs: Vec<f64> = vals.iter().map(|v| (v - truth(x)).abs()).collect();
            CltSummary {
                kind,
                bandwidths: bandwidths[j],
                x,
                theory_mean: truth(x),
                theory_sd: bandwidths[j].and_then(|bw| theory_sd(kind, bw, laws.as_ref(), x, n)),
                mean: stats::mean(&vals),
                sd: stats::sd(&vals),
                median_abs_error: stats::median(&abs),
                succeeded: vals.len(),
                failed: reps.len() - vals.len(),
            }
        })
        .collect();
    let err_grid = config.error_grid.points();
    let errors = error_cells(&config.estimators, &err_grid, |j, g| {
        reps.iter().map(|r| r.errors[j][g]).collect()
    });
    let ad_grid = config.adaptive_grid.points();
    let adaptive_errors = if reps.iter().all(|r| r.adaptive.is_some()) && !reps.is_empty() {
        error_cells(
            &[EstimatorKind::AdaptiveK, EstimatorKind::AdaptiveKS],
            &ad_grid,
            |j, g| {
                reps.iter()
                    .map(|r| {
                        let a = r.adaptive.as_ref().expect("checked");
                        if j == 0 {
                            a.errors_k[g]
                        } else {
                            a.errors_ks[g]
                        }
                    })
                    .collect()
            },
        )
    } else {
        Vec::new()
    };
    let args: Vec<f64> = reps.iter().filter_map(|r| r.amg_argument).collect();
    let max_m_star = reps
        .iter()
        .filter_map(|r| r.adaptive.as_ref().map(|a| a.m_star_post.max(a.m_star_pre)))
        .max();
    Ok(EvaluationResult {
        n,
        bandwidths: bandwidths.to_vec(),
        replicates: reps,
        clt,
        errors,
        adaptive_errors,
        amg_argument_sd: stats::sd(&args),
        max_m_star,
    })
}

/// Sign changes between the standard-deviation curves for one `κ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingRecord {
    pub kappa: f64,
    pub amg_vs_k: Vec<f64>,
    pub amg_vs_ks: Vec<f64>,
    pub k_vs_ks: Vec<f64>,
}

/// Crossing locations of `√σ♠` against `√σ♣` and `√σ♢`; an empty list means
/// no crossing on the grid.
pub fn variance_crossing_report(
    kappas: &[f64],
    grid: &[f64],
    tau2: f64,
) -> Result<(Vec<CrossingRecord>, Vec<VarianceCurves>), ExperimentError> {
    let mut records = Vec::with_capacity(kappas.len());
    let mut curves = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let laws = TcpLaws::new(kappa, Default::default())?;
        // points where μ⁻ underflows carry no information; skip them
        let usable: Vec<f64> = grid
            .iter()
            .copied()
            .filter(|&x| VarianceCurves::compute(&laws, &[x], tau2).is_ok())
            .collect();
        let c = VarianceCurves::compute(&laws, &usable, tau2)?;
        let sd = |v: &[f64]| v.iter().map(|s| s.sqrt()).collect::<Vec<_>>();
        let (k, ks, amg) = (sd(&c.sigma_k2), sd(&c.sigma_ks2), sd(&c.sigma_amg2));
        records.push(CrossingRecord {
            kappa,
            amg_vs_k: sign_changes(&usable, &amg, &k),
            amg_vs_ks: sign_changes(&usable, &amg, &ks),
            k_vs_ks: sign_changes(&usable, &k, &ks),
        });
        curves.push(c);
    }
    Ok((records, curves))
}

/// Everything a `bench` run produces, without timing information.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub searches: Vec<SearchResult>,
    pub evaluations: Vec<EvaluationResult>,
    pub crossings: Vec<CrossingRecord>,
    #[serde(skip)]
    pub variance_curves: Vec<VarianceCurves>,
}

impl ExperimentReport {
    pub fn search(&self, n: usize) -> Option<&SearchResult> {
        self.searches.iter().find(|s| s.n == n)
    }

    pub fn evaluation(&self, n: usize) -> Option<&EvaluationResult> {
        self.evaluations.iter().find(|e| e.n == n)
    }
}

fn fixed_for(config: &ExperimentConfig, n: usize) -> Option<Vec<Option<Bandwidths>>> {
    let f = config.fixed_bandwidths.iter().find(|f| f.n == n)?;
    let b = f.bandwidths;
    Some(
        config
            .estimators
            .iter()
            .map(|k| match k {
                EstimatorKind::K => Some(Bandwidths::Scalar(b.h_k)),
                EstimatorKind::KS => Some(Bandwidths::Scalar(b.h_ks)),
                _ => Some(Bandwidths::Pair {
                    h_s: b.h_s,
                    h_t: b.h_t,
                }),
            })
            .collect(),
    )
}

/// Runs the whole protocol: search (unless bandwidths are fixed), then
/// evaluation, for every sample size, plus the variance-crossing report.
pub fn run_bench(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let model = config.model.build()?;
    let mut searches = Vec::new();
    let mut evaluations = Vec::new();
    for &n in &config.sample_sizes {
        let bws = match fixed_for(config, n) {
            Some(b) => b,
            None => {
                let s = bandwidth_search(&model, config, n)?;
                let b = s.kinds.iter().map(|k| k.median).collect();
                searches.push(s);
                b
            }
        };
        evaluations.push(evaluation(&model, config, n, &bws)?);
    }
    let (crossings, variance_curves) = if model.tcp_kappa().is_some() {
        variance_crossing_report(
            &config.variance_kappas,
            &config.variance_grid.points(),
            Kernel::Epanechnikov.tau2(),
        )?
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ExperimentReport {
        config_hash: config.hash(),
        seed: config.seed,
        config: config.clone(),
        searches,
        evaluations,
        crossings,
        variance_curves,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

/// The report and per-figure tables as `(file name, contents)` pairs.
pub fn render_outputs(report: &ExperimentReport) -> Result<Vec<(String, String)>, ExperimentError> {
    let mut files = Vec::new();
    files.push((
        "report.json".to_string(),
        serde_json::to_string_pretty(report)? + "\n",
    ));

    let mut rows = Vec::new();
    for s in &report.searches {
        for k in &s.kinds {
            for (i, c) in k.choices.iter().enumerate() {
                let (h, hs, ht, ise) = match c {
                    Some(SearchChoice {
                        bandwidths: Bandwidths::Scalar(h),
                        ise,
                    }) => (Some(*h), None, None, Some(*ise)),
                    Some(SearchChoice {
                        bandwidths: Bandwidths::Pair { h_s, h_t },
                        ise,
                    }) => (None, Some(*h_s), Some(*h_t), Some(*ise)),
                    _ => (None, None, None, None),
                };
                rows.push(vec![
                    s.n.to_string(),
                    k.kind.label().into(),
                    i.to_string(),
                    opt(h),
                    opt(hs),
                    opt(ht),
                    opt(ise),
                ]);
            }
        }
    }
    files.push((
        "fig3_bandwidths.csv".into(),
        csv_string(
            &["n", "estimator", "replicate", "h", "h_s", "h_t", "ise"],
            rows,
        )?,
    ));

    let mut rows = Vec::new();
    for e in &report.evaluations {
        for (j, c) in e.clt.iter().enumerate() {
            for (i, r) in e.replicates.iter().enumerate() {
                rows.push(vec![
                    e.n.to_string(),
                    c.kind.label().into(),
                    i.to_string(),
                    opt(r.clt[j]),
                    fmt_f64(c.theory_mean),
                    opt(c.theory_sd),
                ]);
            }
        }
    }
    files.push((
        "fig5_clt.csv".into(),
        csv_string(
            &[
                "n",
                "estimator",
                "replicate",
                "estimate",
                "theory_mean",
                "theory_sd",
            ],
            rows,
        )?,
    ));

    let grid = report.config.error_grid.points();
    let ad_grid = report.config.adaptive_grid.points();
    let mut rows = Vec::new();
    for e in &report.evaluations {
        for (j, kind) in report.config.estimators.iter().enumerate() {
            for (g, &x) in grid.iter().enumerate() {
                for (i, r) in e.replicates.iter().enumerate() {
                    rows.push(vec![
                        e.n.to_string(),
                        kind.label().into(),
                        fmt_f64(x),
                        i.to_string(),
                        opt(r.errors[j][g]),
                    ]);
                }
            }
        }
        for (g, &x) in ad_grid.iter().enumerate() {
            for (i, r) in e.replicates.iter().enumerate() {
                if let Some(a) = &r.adaptive {
                    for (kind, v) in [
                        (EstimatorKind::AdaptiveK, a.errors_k[g]),
                        (EstimatorKind::AdaptiveKS, a.errors_ks[g]),
                    ] {
                        rows.push(vec![
                            e.n.to_string(),
                            kind.label().into(),
                            fmt_f64(x),
                            i.to_string(),
                            opt(v),
                        ]);
                    }
                }
            }
        }
    }
    files.push((
        "fig7_errors.csv".into(),
        csv_string(&["n", "estimator", "x", "replicate", "error"], rows)?,
    ));

    let mut rows = Vec::new();
    for c in &report.variance_curves {
        for (i, &x) in c.grid.iter().enumerate() {
            rows.push(vec![
                fmt_f64(c.kappa),
                fmt_f64(x),
                fmt_f64(c.sigma_k2[i].sqrt()),
                fmt_f64(c.sigma_ks2[i].sqrt()),
                fmt_f64(c.sigma_amg2[i].sqrt()),
            ]);
        }
    }
    files.push((
        "fig2_sigmas.csv".into(),
        csv_string(&["kappa", "x", "sigma_k", "sigma_ks", "sigma_amg"], rows)?,
    ));

    let mut rows = Vec::new();
    if let Some(base) = report
        .variance_curves
        .iter()
        .find(|c| report.config.model == ModelConfig::Tcp { kappa: c.kappa })
    {
        for e in &report.evaluations {
            let bw = bandwidth_set(&report.config.estimators, &e.bandwidths);
            if let Ok(norm) = normalized_sd_curves(base, e.n, &bw) {
                for (i, &x) in norm.grid.iter().enumerate() {
                    rows.push(vec![
                        e.n.to_string(),
                        fmt_f64(x),
                        fmt_f64(norm.k[i]),
                        fmt_f64(norm.ks[i]),
                        fmt_f64(norm.amg[i]),
                    ]);
                }
            }
        }
    }
    files.push((
        "fig6_normalized.csv".into(),
        csv_string(&["n", "x", "k", "ks", "amg"], rows)?,
    ));
    Ok(files)
}

/// Collects the scalar and pair bandwidths into a set; the ♠ pair is taken
/// from ♠ᵒ when present (the estimator with a CLT), otherwise from ♠.
pub fn bandwidth_set(kinds: &[EstimatorKind], bws: &[Option<Bandwidths>]) -> BandwidthSet {
    let mut set = BandwidthSet {
        h_k: f64::NAN,
        h_ks: f64::NAN,
        h_s: f64::NAN,
        h_t: f64::NAN,
    };
    for (k, b) in kinds.iter().zip(bws).rev() {
        match (k, b) {
            (EstimatorKind::K, Some(Bandwidths::Scalar(h))) => set.h_k = *h,
            (EstimatorKind::KS, Some(Bandwidths::Scalar(h))) => set.h_ks = *h,
            (EstimatorKind::AMGO, Some(Bandwidths::Pair { h_s, h_t })) => {
                set.h_s = *h_s;
                set.h_t = *h_t;
            }
            (EstimatorKind::AMG, Some(Bandwidths::Pair { h_s, h_t })) if set.h_s.is_nan() => {
                set.h_s = *h_s;
                set.h_t = *h_t;
            }
            _ => {}
        }
    }
    set
}

/// Writes every rendered output into `dir`, returning the paths.
pub fn write_outputs(
    report: &ExperimentReport,
    dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, body) in render_outputs(report)? {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}
