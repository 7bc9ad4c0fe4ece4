//! Cell-lineage pipeline: per-minute size records with division flags are
//! parsed, per-cell growth slopes fitted, the embedded chain of log-sizes
//! extracted, division rates estimated and the fit checked by simulation.
//!
//! Data contract: a flagged row is the last measurement before a division,
//! so the post-division size is read from the next row.

use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{adaptive_lambda_ks, AdaptiveFits, ProjectionParams};
use crate::estimators::{
    lambda_circ_phi, lambda_ks, Bandwidths, Chain, EstimateCurve, EstimateError, EstimatorKind,
    PreparedChain,
};
use crate::experiments::GridSpec;
use crate::model::{attach_rate, growth_model, JumpRate, ModelError, ModelSpec};
use crate::simulate::{
    fmt_f64, replicate_seed, sample_grid, simulate_chain, GridSamples, SimulateError, Trajectory,
};
use crate::stats;

#[derive(Debug, Error)]
pub enum RealDataError {
    #[error("{source_name}: line {line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },
    #[error("{source_name}: line {line}: time {time} does not increase")]
    NonMonotoneTime {
        source_name: String,
        line: u64,
        time: f64,
    },
    #[error("{source_name}: line {line}: size {size} is not positive")]
    NonPositiveSize {
        source_name: String,
        line: u64,
        size: f64,
    },
    #[error("{lineage}: cell born at t={birth} has {points} measurement(s)")]
    SegmentTooShort {
        lineage: String,
        birth: f64,
        points: usize,
    },
    #[error("no division flags in the data")]
    NoDivisions,
    #[error("no complete cell cycle in the data")]
    NoCompleteCycles,
    #[error("{lineage}: division at t={time} has ratio {ratio} outside (0, 1)")]
    RatioOutOfRange {
        lineage: String,
        time: f64,
        ratio: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineageRow {
    /// minutes
    pub time: f64,
    pub size: f64,
    pub division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub lineage_id: String,
    pub rows: Vec<LineageRow>,
}

impl LineageRecord {
    pub fn divisions(&self) -> usize {
        self.rows.iter().filter(|r| r.division).count()
    }

    pub fn log_sizes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.size.ln()).collect()
    }

    fn flags(&self) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|&i| self.rows[i].division)
            .collect()
    }
}

fn parse_flag(field: &str) -> Option<bool> {
    match field.trim() {
        "0" | "false" | "FALSE" | "False" => Some(false),
        "1" | "true" | "TRUE" | "True" => Some(true),
        _ => None,
    }
}

/// Parses a `time,size,division` table. `division` is `0`/`1` (or
/// `true`/`false`); a count above one means two divisions in one frame,
/// which the data contract cannot represent.
pub fn parse_lineage_reader<R: Read>(
    lineage_id: &str,
    reader: R,
) -> Result<LineageRecord, RealDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| RealDataError::Parse {
        source_name: lineage_id.to_string(),
        line,
        message,
    };
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["time", "size", "division"] {
        return Err(parse_err(1, "expected header `time,size,division`".into()));
    }
    let mut rows: Vec<LineageRow> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 fields, found {}", rec.len()),
            ));
        }
        let num = |i: usize, name: &str| {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad {name} `{}`", &rec[i])))
        };
        let time = num(0, "time")?;
        let size = num(1, "size")?;
        let division = parse_flag(&rec[2])
            .ok_or_else(|| parse_err(line, format!("bad division flag `{}`", &rec[2])))?;
        if size <= 0.0 {
            return Err(RealDataError::NonPositiveSize {
                source_name: lineage_id.to_string(),
                line,
                size,
            });
        }
        if rows.last().is_some_and(|r| time <= r.time) {
            return Err(RealDataError::NonMonotoneTime {
                source_name: lineage_id.to_string(),
                line,
                time,
            });
        }
        rows.push(LineageRow {
            time,
            size,
            division,
        });
    }
    Ok(LineageRecord {
        lineage_id: lineage_id.to_string(),
        rows,
    })
}

/// Parses one lineage file; the id is the file stem.
pub fn parse_lineage(path: &Path) -> Result<LineageRecord, RealDataError> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = std::fs::File::open(path)?;
    parse_lineage_reader(&id, std::io::BufReader::new(file))
}

/// Every `*.csv` in `dir`, in file-name order.
pub fn load_lineages(dir: &Path) -> Result<Vec<LineageRecord>, RealDataError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(RealDataError::InvalidArgument(format!(
            "no .csv files in {}",
            dir.display()
        )));
    }
    paths.par_iter().map(|p| parse_lineage(p)).collect()
}

/// Fitted growth slope of one complete cell cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSlope {
    pub lineage: String,
    pub birth: f64,
    pub division: f64,
    pub points: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub cells: Vec<CellSlope>,
    /// Mean of the per-cell slopes.
    pub theta: f64,
    /// Cycles too short to fit, as report lines.
    pub skipped: Vec<String>,
}

/// Least-squares slope of `y` on `x`.
fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

/// Complete cycles of a lineage: row ranges from the first post-division
/// frame to the next flagged frame.
fn cycles(rec: &LineageRecord) -> Vec<(usize, usize)> {
    rec.flags().windows(2).map(|w| (w[0] + 1, w[1])).collect()
}

/// Per-cell OLS of log-size on time over complete cycles; cycles with fewer
/// than two frames are skipped and reported.
pub fn fit_slopes(records: &[LineageRecord]) -> Result<SlopeFit, RealDataError> {
    let per: Vec<(Vec<CellSlope>, Vec<String>)> = records
        .par_iter()
        .map(|rec| {
            let mut cells = Vec::new();
            let mut skipped = Vec::new();
            for (lo, hi) in cycles(rec) {
                let points = hi + 1 - lo;
                if points < 2 {
                    skipped.push(
                        RealDataError::SegmentTooShort {
                            lineage: rec.lineage_id.clone(),
                            birth: rec.rows[lo].time,
                            points,
                        }
                        .to_string(),
                    );
                    continue;
                }
                let t: Vec<f64> = rec.rows[lo..=hi].iter().map(|r| r.time).collect();
                let y: Vec<f64> = rec.rows[lo..=hi].iter().map(|r| r.size.ln()).collect();
                cells.push(CellSlope {
                    lineage: rec.lineage_id.clone(),
                    birth: t[0],
                    division: t[points - 1],
                    points,
                    slope: ols_slope(&t, &y),
                });
            }
            (cells, skipped)
        })
        .collect();
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for (c, s) in per {
        cells.extend(c);
        skipped.extend(s);
    }
    if cells.is_empty() {
        return Err(RealDataError::NoCompleteCycles);
    }
    let theta = cells.iter().map(|c| c.slope).sum::<f64>() / cells.len() as f64;
    Ok(SlopeFit {
        cells,
        theta,
        skipped,
    })
}

/// Embedded chain of log-sizes pooled over lineages.
#[derive(Debug, Clone, Serialize)]
pub struct EmbeddedData {
    /// `prev` = log-size after a division, `s` = minutes to the next
    /// division, `pre`/`next` = log-sizes just before/after it.
    pub chain: Chain,
    /// Size ratios of every division with a post-division frame.
    pub division_ratios: Vec<f64>,
    pub slopes: SlopeFit,
    /// Flagged frames, including those without a usable transition.
    pub divisions: usize,
    pub lineages: usize,
    /// Median frame interval.
    pub dt: f64,
    pub dropped: Vec<String>,
}

impl EmbeddedData {
    pub fn z(&self) -> &[f64] {
        &self.chain.prev
    }

    pub fn z_minus(&self) -> &[f64] {
        &self.chain.pre
    }

    pub fn s(&self) -> &[f64] {
        &self.chain.s
    }

    /// Mean inter-division time.
    pub fn tau(&self) -> f64 {
        stats::mean(&self.chain.s).unwrap_or(f64::NAN)
    }

    /// Mean and sd of the division ratios, with the mean corrected for
    /// frame quantization: the flagged and the next frame are one `dt`
    /// apart, so measured ratios carry a growth factor `e^{θ·dt}`.
    pub fn ratio_law(&self) -> (f64, f64) {
        let mean = stats::mean(&self.division_ratios).unwrap_or(0.5);
        let sd = stats::sd(&self.division_ratios).unwrap_or(0.0);
        (mean * (-self.slopes.theta * self.dt).exp(), sd)
    }

    /// Growth model with slope `theta` and the corrected ratio law, without
    /// a jump rate.
    pub fn fitted_model(&self, theta: f64) -> Result<ModelSpec, RealDataError> {
        let (mean, sd) = self.ratio_law();
        Ok(growth_model(theta, mean, sd)?)
    }
}

fn median_step(records: &[LineageRecord]) -> f64 {
    let steps: Vec<f64> = records
        .iter()
        .flat_map(|r| r.rows.windows(2).map(|w| w[1].time - w[0].time))
        .collect();
    stats::median(&steps).unwrap_or(1.0)
}

/// Extracts the embedded chain. Cells cut by a file boundary are dropped
/// with a report line; any ratio outside `(0, 1)` aborts.
pub fn extract_embedded(records: &[LineageRecord]) -> Result<EmbeddedData, RealDataError> {
    let divisions: usize = records.iter().map(|r| r.divisions()).sum();
    if divisions == 0 {
        return Err(RealDataError::NoDivisions);
    }
    let mut chain = Chain::default();
    let mut ratios = Vec::new();
    let mut dropped = Vec::new();
    for rec in records {
        let flags = rec.flags();
        let rows = &rec.rows;
        let id = &rec.lineage_id;
        for &f in &flags {
            if let Some(next) = rows.get(f + 1) {
                let ratio = next.size / rows[f].size;
                if !(ratio > 0.0 && ratio < 1.0) {
                    return Err(RealDataError::RatioOutOfRange {
                        lineage: id.clone(),
                        time: rows[f].time,
                        ratio,
                    });
                }
                ratios.push(ratio);
            }
        }
        let Some(&first) = flags.first() else {
            dropped.push(format!("{id}: no division"));
            continue;
        };
        dropped.push(format!(
            "{id}: cell before the division at t={} starts before the file",
            rows[first].time
        ));
        for w in flags.windows(2) {
            let (a, b) = (w[0], w[1]);
            let Some(next) = rows.get(b + 1) else {
                dropped.push(format!(
                    "{id}: division at t={} has no post-division frame",
                    rows[b].time
                ));
                continue;
            };
            chain.prev.push(rows[a + 1].size.ln());
            chain.s.push(rows[b].time - rows[a].time);
            chain.pre.push(rows[b].size.ln());
            chain.next.push(next.size.ln());
        }
        let last = *flags.last().expect("nonempty");
        if last + 1 < rows.len() {
            dropped.push(format!(
                "{id}: cell born after t={} ends with the file",
                rows[last].time
            ));
        }
    }
    if chain.is_empty() {
        return Err(RealDataError::NoCompleteCycles);
    }
    Ok(EmbeddedData {
        chain,
        division_ratios: ratios,
        slopes: fit_slopes(records)?,
        divisions,
        lineages: records.len(),
        dt: median_step(records),
        dropped,
    })
}

/// Division-rate estimators available on lineage data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMethod {
    Ks,
    AdaptiveKs,
    Amg,
}

impl RateMethod {
    pub fn label(&self) -> &'static str {
        match self {
            RateMethod::Ks => "ks",
            RateMethod::AdaptiveKs => "adaptive-ks",
            RateMethod::Amg => "amg",
        }
    }
}

impl std::str::FromStr for RateMethod {
    type Err = RealDataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ks" => Ok(RateMethod::Ks),
            "adaptive-ks" => Ok(RateMethod::AdaptiveKs),
            "amg" => Ok(RateMethod::Amg),
            _ => Err(RealDataError::InvalidArgument(format!(
                "unknown method `{s}`"
            ))),
        }
    }
}

/// Bandwidths of ♢ (log-size) and of ♠ (log-size, minutes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBandwidths {
    pub h_ks: f64,
    pub h_s: f64,
    pub h_t: f64,
}

/// Hand-tuned bandwidths of one E. coli growth temperature, with the
/// summary statistics of that dataset for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReference {
    pub temperature: u32,
    pub bandwidths: RateBandwidths,
    pub theta: f64,
    pub tau: f64,
    pub lineages: usize,
    pub divisions: usize,
}

pub const CONDITIONS: [ConditionReference; 3] = [
    ConditionReference {
        temperature: 25,
        bandwidths: RateBandwidths {
            h_ks: 0.05,
            h_s: 0.06,
            h_t: 4.0,
        },
        theta: 0.012,
        tau: 66.6,
        lineages: 65,
        divisions: 4485,
    },
    ConditionReference {
        temperature: 27,
        bandwidths: RateBandwidths {
            h_ks: 0.07,
            h_s: 0.08,
            h_t: 8.0,
        },
        theta: 0.014,
        tau: 52.4,
        lineages: 54,
        divisions: 3726,
    },
    ConditionReference {
        temperature: 37,
        bandwidths: RateBandwidths {
            h_ks: 0.02,
            h_s: 0.03,
            h_t: 3.0,
        },
        theta: 0.025,
        tau: 31.6,
        lineages: 160,
        divisions: 11040,
    },
];

pub fn condition(temperature: u32) -> Option<&'static ConditionReference> {
    CONDITIONS.iter().find(|c| c.temperature == temperature)
}

/// Log-size grid from the 1% quantile of post-division sizes to the 99%
/// quantile of pre-division sizes.
pub fn default_rate_grid(data: &EmbeddedData, step: f64) -> Vec<f64> {
    let lo = stats::quantile(data.z(), 0.01).unwrap_or(0.0);
    let hi = stats::quantile(data.z_minus(), 0.99).unwrap_or(lo);
    let start = (lo / step).floor() * step;
    GridSpec::new(start, hi, step).points()
}

/// Projection interval covering every observed log-size, padded by 1%.
pub fn default_projection(data: &EmbeddedData) -> ProjectionParams {
    let all = data.z().iter().chain(data.z_minus());
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.01 * (hi - lo);
    ProjectionParams {
        a: lo - pad,
        b: hi + pad,
        ..ProjectionParams::default()
    }
}

/// Division-rate curve on `grid`. ♢ uses `Δ ≡ θ`; ♠ skips argument
/// selection and evaluates at `ξ = x − θτ`, `t = τ` with `τ` the mean
/// inter-division time, so that `Φ(τ|ξ) = x`.
pub fn estimate_division_rate(
    data: &EmbeddedData,
    theta: f64,
    method: RateMethod,
    bandwidths: &RateBandwidths,
    grid: &[f64],
    projection: Option<&ProjectionParams>,
) -> Result<EstimateCurve, RealDataError> {
    let model = data.fitted_model(theta)?;
    let pc = PreparedChain::new(data.chain.clone())?;
    let n = pc.len();
    let curve = match method {
        RateMethod::Ks => {
            let h = bandwidths.h_ks;
            EstimateCurve::collect(EstimatorKind::KS, Bandwidths::Scalar(h), n, grid, |x| {
                lambda_ks(&pc, &model, x, h)
            })?
        }
        RateMethod::AdaptiveKs => {
            let params = projection
                .copied()
                .unwrap_or_else(|| default_projection(data));
            let fits = AdaptiveFits::fit(&pc, &params)?;
            EstimateCurve::collect(EstimatorKind::AdaptiveKS, Bandwidths::None, n, grid, |x| {
                adaptive_lambda_ks(&fits, &pc, &model, x)
            })?
        }
        RateMethod::Amg => {
            let tau = data.tau();
            let (h_s, h_t) = (bandwidths.h_s, bandwidths.h_t);
            EstimateCurve::collect(
                EstimatorKind::AMG,
                Bandwidths::Pair { h_s, h_t },
                n,
                grid,
                |x| lambda_circ_phi(&pc, x - theta * tau, tau, h_s, h_t),
            )?
        }
    };
    Ok(curve)
}

/// Settings of the a-posteriori check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationParams {
    /// Initial log-size.
    pub x0: f64,
    pub jumps: usize,
    pub dt: f64,
    /// Number of final grid positions compared with the data.
    pub keep: usize,
    pub seed: u64,
    pub kde_points: usize,
}

impl Default for ValidationParams {
    fn default() -> Self {
        ValidationParams {
            x0: 1.5,
            jumps: 1000,
            dt: 1.0,
            keep: 10_000,
            seed: 1,
            kde_points: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    /// Two-sample KS distance between simulated and observed log-sizes.
    pub ks_distance: f64,
    pub simulated_positions: usize,
    pub observed_positions: usize,
    pub kde_grid: Vec<f64>,
    pub kde_simulated: Vec<f64>,
    pub kde_observed: Vec<f64>,
}

/// Rate table from the successful points of a curve, negative values
/// clipped to zero. Outside the grid the rate is held constant.
pub fn rate_from_curve(curve: &EstimateCurve) -> Result<JumpRate, RealDataError> {
    rate_from_points(&curve.grid, &curve.values)
}

fn rate_from_points(grid: &[f64], values: &[f64]) -> Result<JumpRate, RealDataError> {
    let (grid, values): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .zip(values)
        .filter(|(_, v)| v.is_finite())
        .map(|(&x, &v)| (x, v.max(0.0)))
        .unzip();
    if grid.len() < 2 {
        return Err(RealDataError::InvalidArgument(
            "rate curve has fewer than two valid points".into(),
        ));
    }
    Ok(JumpRate::tabulated(grid, values)?)
}

/// Rate table from a curve CSV (`x,estimate,failed`) as written by
/// [`EstimateCurve::write_csv`]. Rows flagged as failed are skipped.
pub fn read_rate_curve<R: Read>(source_name: &str, reader: R) -> Result<JumpRate, RealDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| RealDataError::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["x", "estimate", "failed"] {
        return Err(parse_err(1, "expected header `x,estimate,failed`".into()));
    }
    let (mut grid, mut values) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let x = rec[0]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(line, format!("bad x `{}`", &rec[0])))?;
        let failed = parse_flag(&rec[2])
            .ok_or_else(|| parse_err(line, format!("bad failed flag `{}`", &rec[2])))?;
        if failed {
            continue;
        }
        let v = rec[1]
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("bad estimate `{}`", &rec[1])))?;
        if grid.last().is_some_and(|&g| x <= g) {
            return Err(parse_err(line, "x does not increase".into()));
        }
        grid.push(x);
        values.push(v);
    }
    rate_from_points(&grid, &values)
}

/// Simulates the fitted model with the estimated rate on a frame grid and
/// compares the final positions with the observed log-sizes.
pub fn validate_posterior(
    model: &ModelSpec,
    curve: &EstimateCurve,
    observed_log_sizes: &[f64],
    params: &ValidationParams,
) -> Result<ValidationReport, RealDataError> {
    validate_with_rate(model, rate_from_curve(curve)?, observed_log_sizes, params)
}

/// [`validate_posterior`] with the rate already tabulated.
pub fn validate_with_rate(
    model: &ModelSpec,
    rate: JumpRate,
    observed_log_sizes: &[f64],
    params: &ValidationParams,
) -> Result<ValidationReport, RealDataError> {
    if observed_log_sizes.is_empty() {
        return Err(RealDataError::InvalidArgument("no observed sizes".into()));
    }
    let fitted = attach_rate(model, rate);
    let traj = simulate_chain(&fitted, params.x0, params.jumps, params.seed)?;
    let grid = sample_grid(&fitted, &traj, params.dt)?;
    let start = grid.values.len().saturating_sub(params.keep);
    let simulated = &grid.values[start..];
    let lo = simulated
        .iter()
        .chain(observed_log_sizes)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = simulated
        .iter()
        .chain(observed_log_sizes)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let k = params.kde_points.max(2);
    let kde_grid: Vec<f64> = (0..k)
        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
        .collect();
    Ok(ValidationReport {
        ks_distance: stats::ks_two_sample(simulated, observed_log_sizes),
        simulated_positions: simulated.len(),
        observed_positions: observed_log_sizes.len(),
        kde_simulated: stats::gaussian_kde(simulated, &kde_grid),
        kde_observed: stats::gaussian_kde(observed_log_sizes, &kde_grid),
        kde_grid,
    })
}

/// Everything the pipeline needs besides the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: RateMethod,
    pub bandwidths: RateBandwidths,
    /// Defaults to [`default_rate_grid`] with step 0.01.
    pub grid: Option<GridSpec>,
    /// Defaults to [`default_projection`].
    pub projection: Option<ProjectionParams>,
    pub validation: ValidationParams,
}

impl PipelineConfig {
    /// Settings for one of the reference temperatures.
    pub fn for_condition(temperature: u32, method: RateMethod) -> Result<Self, RealDataError> {
        let c = condition(temperature).ok_or_else(|| {
            RealDataError::InvalidArgument(format!("no reference condition at {temperature}°C"))
        })?;
        Ok(PipelineConfig {
            method,
            bandwidths: c.bandwidths,
            grid: None,
            projection: None,
            validation: ValidationParams::default(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub theta: f64,
    pub cells: usize,
    pub skipped_cells: Vec<String>,
    pub tau: f64,
    pub ratio_mean: f64,
    pub ratio_sd: f64,
    pub lineages: usize,
    pub divisions: usize,
    pub transitions: usize,
    pub dropped: Vec<String>,
    pub method: RateMethod,
    pub failed_points: usize,
    pub ks_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineResult {
    pub summary: PipelineSummary,
    pub data: EmbeddedData,
    pub curve: EstimateCurve,
    pub validation: ValidationReport,
}

/// Extraction, slope fit, rate estimation and validation in one pass.
pub fn run_pipeline(
    records: &[LineageRecord],
    config: &PipelineConfig,
) -> Result<PipelineResult, RealDataError> {
    let data = extract_embedded(records)?;
    let theta = data.slopes.theta;
    let grid = match &config.grid {
        Some(g) => g.points(),
        None => default_rate_grid(&data, 0.01),
    };
    let curve = estimate_division_rate(
        &data,
        theta,
        config.method,
        &config.bandwidths,
        &grid,
        config.projection.as_ref(),
    )?;
    let observed: Vec<f64> = records.iter().flat_map(|r| r.log_sizes()).collect();
    let model = data.fitted_model(theta)?;
    let validation = validate_posterior(&model, &curve, &observed, &config.validation)?;
    let (ratio_mean, ratio_sd) = data.ratio_law();
    let summary = PipelineSummary {
        theta,
        cells: data.slopes.cells.len(),
        skipped_cells: data.slopes.skipped.clone(),
        tau: data.tau(),
        ratio_mean,
        ratio_sd,
        lineages: data.lineages,
        divisions: data.divisions,
        transitions: data.chain.len(),
        dropped: data.dropped.clone(),
        method: config.method,
        failed_points: curve.failures.len(),
        ks_distance: validation.ks_distance,
    };
    Ok(PipelineResult {
        summary,
        data,
        curve,
        validation,
    })
}

/// Writes `theta.json`, `chain.csv`, `rate_curve.csv` and `validation.csv`.
pub fn write_pipeline_outputs(
    result: &PipelineResult,
    dir: &Path,
) -> Result<Vec<PathBuf>, RealDataError> {
    std::fs::create_dir_all(dir)?;
    let theta = dir.join("theta.json");
    std::fs::write(
        &theta,
        serde_json::to_string_pretty(&result.summary)? + "\n",
    )?;

    let chain = dir.join("chain.csv");
    let mut w = csv::Writer::from_path(&chain)?;
    w.write_record(["z", "s", "z_minus", "z_next"])?;
    let c = &result.data.chain;
    for i in 0..c.len() {
        w.write_record([
            fmt_f64(c.prev[i]),
            fmt_f64(c.s[i]),
            fmt_f64(c.pre[i]),
            fmt_f64(c.next[i]),
        ])?;
    }
    w.flush()?;

    let curve = dir.join("rate_curve.csv");
    result
        .curve
        .write_csv(std::io::BufWriter::new(std::fs::File::create(&curve)?))?;

    let validation = dir.join("validation.csv");
    write_validation_csv(&result.validation, &validation)?;
    Ok(vec![theta, chain, curve, validation])
}

/// Writes the two densities as `x,density_simulated,density_observed`.
pub fn write_validation_csv(report: &ValidationReport, path: &Path) -> Result<(), RealDataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "density_simulated", "density_observed"])?;
    for i in 0..report.kde_grid.len() {
        w.write_record([
            fmt_f64(report.kde_grid[i]),
            fmt_f64(report.kde_simulated[i]),
            fmt_f64(report.kde_observed[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One simulated lineage: its trajectory and frame samples.
#[derive(Debug, Clone)]
pub struct SyntheticLineage {
    pub id: String,
    pub trajectory: Trajectory,
    pub frames: GridSamples,
}

/// Independent synthetic lineages of a growth model, lineage `i` seeded
/// with `seed ⊕ i`.
pub fn simulate_lineages(
    model: &ModelSpec,
    count: usize,
    jumps: usize,
    x0: f64,
    dt: f64,
    seed: u64,
) -> Result<Vec<SyntheticLineage>, RealDataError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let trajectory = simulate_chain(model, x0, jumps, replicate_seed(seed, i as u64))?;
            let frames = sample_grid(model, &trajectory, dt)?;
            Ok(SyntheticLineage {
                id: format!("lineage_{i:04}"),
                trajectory,
                frames,
            })
        })
        .collect()
}

/// Writes each lineage's frames as `<id>.csv` in `dir`.
pub fn write_lineages(
    lineages: &[SyntheticLineage],
    dir: &Path,
) -> Result<Vec<PathBuf>, RealDataError> {
    std::fs::create_dir_all(dir)?;
    lineages
        .iter()
        .map(|l| {
            let p = dir.join(format!("{}.csv", l.id));
            l.frames.save_csv(&p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_growth_rate;
    use crate::simulate::rng_from_seed;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn record(rows: &[(f64, f64, bool)]) -> LineageRecord {
        LineageRecord {
            lineage_id: "t".into(),
            rows: rows
                .iter()
                .map(|&(time, size, division)| LineageRow {
                    time,
                    size,
                    division,
                })
                .collect(),
        }
    }

    fn growth() -> ModelSpec {
        attach_rate(
            &growth_model(0.025, 0.5, 0.04).unwrap(),
            default_growth_rate(),
        )
    }

    #[test]
    fn parse_small_fixture() {
        let text = "time,size,division\n0,2.0,0\n1,2.1,0\n2,2.2,1\n3,1.1,0\n4,1.15,0\n";
        let r = parse_lineage_reader("fx", text.as_bytes()).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert_eq!(r.divisions(), 1);
        assert_eq!(r.lineage_id, "fx");
    }

    #[test]
    fn parse_errors() {
        let neg = "time,size,division\n0,2.0,0\n1,-1.0,0\n";
        assert!(matches!(
            parse_lineage_reader("x", neg.as_bytes()),
            Err(RealDataError::NonPositiveSize { line: 3, .. })
        ));
        let back = "time,size,division\n0,2.0,0\n0,2.1,0\n";
        assert!(matches!(
            parse_lineage_reader("x", back.as_bytes()),
            Err(RealDataError::NonMonotoneTime { line: 3, .. })
        ));
        for bad in [
            "time,size,division\n0,abc,0\n",
            "time,size,division\n0,1.0,2\n",
            "time,size,division\n0,1.0\n",
            "t,s,d\n0,1.0,0\n",
        ] {
            assert!(
                matches!(
                    parse_lineage_reader("x", bad.as_bytes()),
                    Err(RealDataError::Parse { .. })
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn grid_export_round_trips() {
        let traj = simulate_chain(&growth(), 1.0, 40, 3).unwrap();
        let frames = sample_grid(&growth(), &traj, 1.0).unwrap();
        let mut buf = Vec::new();
        frames.write_csv(&mut buf).unwrap();
        let r = parse_lineage_reader("g", buf.as_slice()).unwrap();
        assert_eq!(r.rows.len(), frames.values.len());
        assert_eq!(r.divisions(), 40);
        for (row, v) in r.rows.iter().zip(&frames.values) {
            assert!((row.size.ln() - v).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_growth_slope() {
        let rows: Vec<(f64, f64, bool)> = (0..60)
            .map(|i| {
                let t = i as f64;
                let local = (i % 30) as f64;
                (t, (0.3 + 0.025 * local).exp(), i % 30 == 29)
            })
            .collect();
        let fit = fit_slopes(&[record(&rows)]).unwrap();
        assert_eq!(fit.cells.len(), 1);
        assert!((fit.theta - 0.025).abs() < 1e-12);
        assert_eq!(fit.cells[0].points, 30);
    }

    #[test]
    fn noisy_slopes_are_accurate() {
        let mut rng = rng_from_seed(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let t: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut hits = 0;
        for _ in 0..1000 {
            let y: Vec<f64> = t
                .iter()
                .map(|&ti| 0.7 + 0.025 * ti + noise.sample(&mut rng))
                .collect();
            if (ols_slope(&t, &y) - 0.025).abs() <= 0.002 {
                hits += 1;
            }
        }
        assert!(hits >= 950, "{hits}");
    }

    #[test]
    fn two_flags_give_one_transition() {
        let mut rows = Vec::new();
        for i in 0..70 {
            let t = i as f64;
            let size = if i <= 30 {
                2.0 * (0.025 * t).exp()
            } else if i <= 62 {
                1.1 * (0.025 * (t - 31.0)).exp()
            } else {
                1.2 * (0.025 * (t - 63.0)).exp()
            };
            rows.push((t, size, i == 30 || i == 62));
        }
        let d = extract_embedded(&[record(&rows)]).unwrap();
        assert_eq!(d.s(), &[32.0]);
        assert_eq!(d.divisions, 2);
        assert_eq!(d.division_ratios.len(), 2);
        assert!((d.z()[0] - 1.1f64.ln()).abs() < 1e-15);
        assert!((d.z_minus()[0] - (1.1 * (0.025f64 * 31.0).exp()).ln()).abs() < 1e-12);
        assert_eq!(d.dropped.len(), 2);
    }

    #[test]
    fn halving_ratio() {
        let r = record(&[(0.0, 2.0, false), (1.0, 3.0, true), (2.0, 1.5, false)]);
        let d = extract_embedded(&[r.clone(), r]);
        // one division per file: no complete cycle
        assert!(matches!(d, Err(RealDataError::NoCompleteCycles)));
        let r = record(&[
            (0.0, 2.0, false),
            (1.0, 3.0, true),
            (2.0, 1.5, false),
            (3.0, 2.0, true),
            (4.0, 1.0, false),
        ]);
        let d = extract_embedded(&[r]).unwrap();
        assert_eq!(d.division_ratios, vec![0.5, 0.5]);
    }

    #[test]
    fn no_divisions_and_bad_ratio() {
        let r = record(&[(0.0, 2.0, false), (1.0, 2.1, false)]);
        assert!(matches!(
            extract_embedded(&[r]),
            Err(RealDataError::NoDivisions)
        ));
        let r = record(&[
            (0.0, 2.0, true),
            (1.0, 2.1, false),
            (2.0, 2.2, true),
            (3.0, 1.0, false),
        ]);
        assert!(matches!(
            extract_embedded(&[r]),
            Err(RealDataError::RatioOutOfRange { .. })
        ));
    }

    #[test]
    fn extraction_matches_simulator_within_one_frame() {
        let m = growth();
        let traj = simulate_chain(&m, 1.0, 60, 21).unwrap();
        let frames = sample_grid(&m, &traj, 1.0).unwrap();
        let mut buf = Vec::new();
        frames.write_csv(&mut buf).unwrap();
        let rec = parse_lineage_reader("s", buf.as_slice()).unwrap();
        let d = extract_embedded(&[rec]).unwrap();
        assert_eq!(d.divisions, 60);
        // transition k uses divisions k and k+1 of the trajectory
        for i in 0..d.chain.len() {
            assert!((d.z()[i] - traj.z[i]).abs() <= 0.025 + 1e-12);
            assert!((d.z_minus()[i] - traj.z_minus[i + 1]).abs() <= 0.025 + 1e-12);
            assert!((d.s()[i] - traj.s[i + 1]).abs() < 1.0);
            assert_eq!(d.s()[i].fract(), 0.0);
        }
        assert!((d.slopes.theta - 0.025).abs() < 1e-12);
    }

    #[test]
    fn reextraction_is_identical() {
        let m = growth();
        let l = simulate_lineages(&m, 2, 30, 1.0, 1.0, 5).unwrap();
        let recs: Vec<LineageRecord> = l
            .iter()
            .map(|l| {
                let mut buf = Vec::new();
                l.frames.write_csv(&mut buf).unwrap();
                parse_lineage_reader(&l.id, buf.as_slice()).unwrap()
            })
            .collect();
        let a = serde_json::to_string(&extract_embedded(&recs).unwrap()).unwrap();
        let b = serde_json::to_string(&extract_embedded(&recs).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_conditions() {
        let c = condition(37).unwrap();
        assert_eq!(c.bandwidths.h_ks, 0.02);
        assert_eq!((c.bandwidths.h_s, c.bandwidths.h_t), (0.03, 3.0));
        assert_eq!((c.theta, c.tau, c.divisions), (0.025, 31.6, 11040));
        assert_eq!(condition(25).unwrap().tau, 66.6);
        assert_eq!(condition(27).unwrap().bandwidths.h_t, 8.0);
        assert!(condition(30).is_none());
        assert_eq!(
            "adaptive-ks".parse::<RateMethod>().unwrap(),
            RateMethod::AdaptiveKs
        );
    }

    #[test]
    fn rate_table_skips_failures() {
        let curve = EstimateCurve {
            kind: EstimatorKind::KS,
            bandwidths: Bandwidths::Scalar(0.1),
            n: 10,
            grid: vec![1.0, 2.0, 3.0],
            values: vec![f64::NAN, -0.5, 2.0],
            failures: vec![0],
        };
        let r = rate_from_curve(&curve).unwrap();
        assert_eq!(
            r,
            JumpRate::Tabulated {
                grid: vec![2.0, 3.0],
                values: vec![0.0, 2.0]
            }
        );
    }

    #[test]
    fn rate_curve_csv_round_trip() {
        let curve = EstimateCurve {
            kind: EstimatorKind::KS,
            bandwidths: Bandwidths::Scalar(0.1),
            n: 10,
            grid: vec![1.0, 2.0, 3.0, 4.0],
            values: vec![0.3, f64::NAN, 0.1 + 0.2, 7.0],
            failures: vec![1],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let read = read_rate_curve("c", buf.as_slice()).unwrap();
        assert_eq!(read, rate_from_curve(&curve).unwrap());
        let bad = read_rate_curve("c", "x,value\n1,2\n".as_bytes());
        assert!(matches!(bad, Err(RealDataError::Parse { line: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ratios_stay_in_unit_interval(seed in 0u64..1000) {
            let m = attach_rate(&growth_model(0.025, 0.5, 0.2).unwrap(), default_growth_rate());
            let traj = simulate_chain(&m, 1.0, 20, seed).unwrap();
            let frames = sample_grid(&m, &traj, 1.0).unwrap();
            // two divisions in one frame are outside the data contract
            prop_assume!(frames.divisions.iter().all(|&d| d <= 1));
            let mut buf = Vec::new();
            frames.write_csv(&mut buf).unwrap();
            let rec = parse_lineage_reader("p", buf.as_slice()).unwrap();
            match extract_embedded(&[rec]) {
                Ok(d) => prop_assert!(d.division_ratios.iter().all(|&r| r > 0.0 && r < 1.0)),
                Err(RealDataError::RatioOutOfRange { ratio, .. }) => prop_assert!(!(ratio > 0.0 && ratio < 1.0)),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
