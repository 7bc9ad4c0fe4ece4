//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Criteria 5–9 share one run of the default Monte-Carlo protocol.

use std::cmp::Ordering;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pdmp_core::estimators::{Bandwidths, EstimatorKind};
use pdmp_core::experiments::{
    render_outputs, run_bench, ExperimentConfig, ExperimentReport, GridSpec, KindSearch,
};
use pdmp_core::model::{tcp_model, ModelConfig};
use pdmp_core::quadrature::adaptive_simpson;
use pdmp_core::realdata::{
    load_lineages, run_pipeline, simulate_lineages, write_lineages, PipelineConfig, RateMethod,
};
use pdmp_core::simulate::{rng_from_seed, sample_interjump, simulate_chain};
use pdmp_core::stats;
use pdmp_core::theory::{
    sigma_amg2, sigma_k2, sigma_ks2, sign_changes, SeriesTolerance, TcpLaws, ARGUMENT_STEP,
};
use rand::Rng;
use rand_distr::Open01;

const TAU2: f64 = 0.6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Post-jump law of a long TCP chain against the quadrature distribution
/// function of the invariant density.
fn invariant_law() -> Outcome {
    let start = Instant::now();
    let (kappa, burn_in, n) = (0.4, 1_000, 100_000);
    let model = tcp_model(kappa).unwrap();
    let traj = simulate_chain(&model, 1.0, burn_in + n, 101).unwrap();
    let sample = &traj.z[burn_in..];

    let laws = TcpLaws::new(kappa, SeriesTolerance::default()).unwrap();
    let step = 1e-3;
    let top = 8.0;
    let mut grid = vec![0.0];
    let mut cdf = vec![0.0];
    while *grid.last().unwrap() < top {
        let a = *grid.last().unwrap();
        let b = a + step;
        let piece = adaptive_simpson(|x| laws.mu(x).unwrap(), a, b, 1e-13).unwrap();
        grid.push(b);
        cdf.push(cdf.last().unwrap() + piece);
    }
    let interp = |x: f64| {
        if x >= top {
            return 1.0;
        }
        let i = (x / step) as usize;
        let w = (x - grid[i]) / step;
        cdf[i] + w * (cdf[i + 1] - cdf[i])
    };
    let d = stats::ks_distance(sample, interp);
    let series_gap = grid
        .iter()
        .step_by(500)
        .map(|&x| (laws.mu_cdf(x).unwrap() - interp(x)).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        d < 0.01,
        format!(
            "KS {d:.5} (< 0.01), total mass {:.8}, series vs quadrature CDF gap {series_gap:.1e}, {}",
            cdf.last().unwrap(),
            secs(elapsed)
        ),
    )
}

/// Survival of the inter-jump time from `z = 1`: `G(1|1) = exp(−1.5)`.
fn sampler_exactness() -> Outcome {
    let model = tcp_model(0.4).unwrap();
    let mut rng = rng_from_seed(202);
    let draws = 100_000;
    let over = (0..draws)
        .filter(|_| {
            let u: f64 = rng.sample(Open01);
            sample_interjump(&model, 1.0, u).unwrap() > 1.0
        })
        .count();
    let frac = over as f64 / draws as f64;
    let truth = (-1.5f64).exp();
    outcome(
        (frac - truth).abs() <= 0.005,
        format!("P(S > 1) = {frac:.5} vs {truth:.5} (tol 0.005)"),
    )
}

fn variance_algebra() -> Outcome {
    let grid: Vec<f64> = (0..100).map(|i| 0.3 + 0.03 * i as f64).collect();
    let mut worst: f64 = 0.0;
    for kappa in [0.3, 0.4, 0.5, 0.6, 0.7, 0.8] {
        let laws = TcpLaws::new(kappa, SeriesTolerance::default()).unwrap();
        for &x in &grid {
            let r = sigma_k2(&laws, x, TAU2).unwrap() / sigma_ks2(&laws, x, TAU2).unwrap();
            worst = worst.max((r - kappa).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |σ♣²/σ♢² − κ| = {worst:.1e} over 6 κ × 100 points"),
    )
}

fn crossings() -> Outcome {
    let start = Instant::now();
    let laws = TcpLaws::new(0.4, SeriesTolerance::default()).unwrap();
    let grid = GridSpec::new(1.5, 3.0, 0.01).points();
    let sd = |f: &dyn Fn(f64) -> f64| grid.iter().map(|&x| f(x).sqrt()).collect::<Vec<_>>();
    let amg = sd(&|x| sigma_amg2(&laws, x, TAU2, ARGUMENT_STEP).unwrap());
    let k = sd(&|x| sigma_k2(&laws, x, TAU2).unwrap());
    let ks = sd(&|x| sigma_ks2(&laws, x, TAU2).unwrap());
    let vs_k: Vec<f64> = sign_changes(&grid, &amg, &k)
        .into_iter()
        .filter(|x| (1.5..=2.5).contains(x))
        .collect();
    let vs_ks: Vec<f64> = sign_changes(&grid, &amg, &ks)
        .into_iter()
        .filter(|x| (2.0..=3.0).contains(x))
        .collect();
    let last = grid.len() - 1;
    outcome(
        !vs_k.is_empty() && !vs_ks.is_empty(),
        format!(
            "σ♠−σ♣ changes sign at {vs_k:?} in [1.5,2.5], σ♠−σ♢ at {vs_ks:?} in [2,3]; \
             σ♠/σ♣ = {:.3}..{:.3}, σ♠/σ♢ = {:.3}..{:.3} on [1.5,3] (plateau, no crossing), {}",
            amg[0] / k[0],
            amg[last] / k[last],
            amg[0] / ks[0],
            amg[last] / ks[last],
            secs(start.elapsed())
        ),
    )
}

fn clt(report: &ExperimentReport) -> Outcome {
    let e = report.evaluation(10_000).unwrap();
    let c = e.clt_for(EstimatorKind::KS).unwrap();
    let (mean, sd, theory) = (c.mean.unwrap(), c.sd.unwrap(), c.theory_sd.unwrap());
    let rel = sd / theory - 1.0;
    outcome(
        rel.abs() <= 0.25 && (mean - 2.0).abs() <= 0.15 && c.failed == 0,
        format!(
            "λ̂♢(2) at h = {:?}: sd {sd:.4} vs theory {theory:.4} ({:+.1}%), mean {mean:.4}, {} replicates",
            c.bandwidths.unwrap(),
            100.0 * rel,
            c.succeeded
        ),
    )
}

const KERNELS: [EstimatorKind; 4] = [
    EstimatorKind::K,
    EstimatorKind::KS,
    EstimatorKind::AMGO,
    EstimatorKind::AMG,
];

fn consistency(report: &ExperimentReport) -> Outcome {
    let (small, large) = (
        report.evaluation(1_000).unwrap(),
        report.evaluation(10_000).unwrap(),
    );
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in KERNELS {
        let a = small.clt_for(kind).and_then(|c| c.median_abs_error);
        let b = large.clt_for(kind).and_then(|c| c.median_abs_error);
        let ok = matches!((a, b), (Some(a), Some(b)) if b < a);
        pass &= ok;
        parts.push(format!(
            "{} {:.4}→{:.4}",
            kind.label(),
            a.unwrap_or(f64::NAN),
            b.unwrap_or(f64::NAN)
        ));
    }
    outcome(
        pass,
        format!("median |λ̂(2) − 2|, n=10³→10⁴: {}", parts.join(", ")),
    )
}

/// Replicates whose optimum sits on a bound of the search grid.
fn edge_hits(search: &KindSearch, config: &ExperimentConfig) -> usize {
    let bounds = |g: &GridSpec| {
        let p = g.points();
        (p[0], *p.last().unwrap())
    };
    let on_edge = |v: f64, (lo, hi): (f64, f64)| (v - lo).abs() < 1e-9 || (v - hi).abs() < 1e-9;
    let g = &config.bandwidth_grid;
    search
        .choices
        .iter()
        .flatten()
        .filter(|c| match c.bandwidths {
            Bandwidths::Scalar(h) => on_edge(h, bounds(&g.scalar)),
            Bandwidths::Pair { h_s, h_t } => {
                on_edge(h_s, bounds(&g.space)) || on_edge(h_t, bounds(&g.time))
            }
            Bandwidths::None => false,
        })
        .count()
}

fn fmt_bw(b: Option<Bandwidths>) -> String {
    match b {
        Some(Bandwidths::Scalar(h)) => format!("{h:.3}"),
        Some(Bandwidths::Pair { h_s, h_t }) => format!("({h_s:.3},{h_t:.3})"),
        _ => "none".into(),
    }
}

fn bandwidth_behavior(report: &ExperimentReport) -> Outcome {
    let (small, large) = (
        report.search(1_000).unwrap(),
        report.search(10_000).unwrap(),
    );
    let mut monotone = true;
    let mut no_edges = true;
    let mut parts = Vec::new();
    for kind in KERNELS {
        let (a, b) = (small.kind(kind).unwrap(), large.kind(kind).unwrap());
        let ok = match (a.median, b.median) {
            (Some(Bandwidths::Scalar(x)), Some(Bandwidths::Scalar(y))) => y <= x,
            (
                Some(Bandwidths::Pair { h_s: s0, h_t: t0 }),
                Some(Bandwidths::Pair { h_s: s1, h_t: t1 }),
            ) => s1 <= s0 && t1 <= t0,
            _ => false,
        };
        let edges = (edge_hits(a, &report.config), edge_hits(b, &report.config));
        monotone &= ok;
        no_edges &= edges == (0, 0);
        parts.push(format!(
            "{} {}→{} (edge optima {}+{})",
            kind.label(),
            fmt_bw(a.median),
            fmt_bw(b.median),
            edges.0,
            edges.1
        ));
    }
    outcome(
        monotone && no_edges,
        format!(
            "medians non-increasing: {monotone}, grid bounds never attained: {no_edges}; {}",
            parts.join(", ")
        ),
    )
}

fn ordering(report: &ExperimentReport) -> Outcome {
    let e = report.evaluation(10_000).unwrap();
    let m = |k, x| e.median_error(k, x).unwrap_or(f64::NAN);
    let (amg_09, ks_09) = (m(EstimatorKind::AMG, 0.9), m(EstimatorKind::KS, 0.9));
    let (amg_15, ks_15) = (m(EstimatorKind::AMG, 1.5), m(EstimatorKind::KS, 1.5));
    outcome(
        amg_09 < ks_09 && ks_15 < amg_15,
        format!("x=0.9: ♠ {amg_09:.4} < ♢ {ks_09:.4}; x=1.5: ♢ {ks_15:.4} < ♠ {amg_15:.4}"),
    )
}

fn adaptive(report: &ExperimentReport) -> Outcome {
    let max_m = report
        .evaluations
        .iter()
        .filter_map(|e| e.max_m_star)
        .max()
        .unwrap_or(usize::MAX);
    let e = report.evaluation(10_000).unwrap();
    let m = |k, x| e.median_error(k, x).unwrap_or(f64::NAN);
    let within_2x = [0.9, 1.5]
        .iter()
        .all(|&x| m(EstimatorKind::AdaptiveKS, x) <= 2.0 * m(EstimatorKind::KS, x));
    let grid = report.config.adaptive_grid.points();
    let worse: Vec<String> = grid
        .iter()
        .filter(|&&x| {
            // missing medians count as failures
            let order =
                m(EstimatorKind::AdaptiveK, x).partial_cmp(&m(EstimatorKind::AdaptiveKS, x));
            !matches!(order, Some(Ordering::Less | Ordering::Equal))
        })
        .map(|x| format!("{x:.1}"))
        .collect();
    outcome(
        max_m <= 25 && within_2x && worse.is_empty(),
        format!(
            "max M* {max_m} (≤ 25); adaptive ♢ vs kernel ♢ at 0.9: {:.4}/{:.4}, at 1.5: {:.4}/{:.4} (≤ 2×: {within_2x}); \
             adaptive ♣ > adaptive ♢ at x ∈ {{{}}} of {} points",
            m(EstimatorKind::AdaptiveKS, 0.9),
            m(EstimatorKind::KS, 0.9),
            m(EstimatorKind::AdaptiveKS, 1.5),
            m(EstimatorKind::KS, 1.5),
            worse.join(", "),
            grid.len()
        ),
    )
}

/// Synthetic lineages of the growth model through the full pipeline.
fn closed_loop() -> Outcome {
    let start = Instant::now();
    let (theta, lineages, jumps) = (0.025, 5, 1000);
    let model = ModelConfig::Growth {
        theta,
        ratio_mean: 0.5,
        ratio_sd: 0.04,
        rate: None,
    }
    .build()
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_lineages(&model, lineages, jumps, 1.0, 1.0, 42).unwrap();
    write_lineages(&sim, dir.path()).unwrap();
    let records = load_lineages(dir.path()).unwrap();
    let config = PipelineConfig::for_condition(37, RateMethod::Ks).unwrap();
    let result = run_pipeline(&records, &config).unwrap();
    let s = &result.summary;
    let rel = (s.theta / theta - 1.0).abs();
    let elapsed = start.elapsed();
    outcome(
        rel < 0.01
            && s.divisions == lineages * jumps
            && s.ks_distance < 0.08
            && elapsed < Duration::from_secs(30),
        format!(
            "θ̂ = {:.6} ({:.1e} rel), divisions {}/{}, validation KS {:.4} (< 0.08), {}",
            s.theta,
            rel,
            s.divisions,
            lineages * jumps,
            s.ks_distance,
            secs(elapsed)
        ),
    )
}

/// Reduced protocol rendered under different thread counts.
fn determinism() -> Outcome {
    let config = ExperimentConfig {
        sample_sizes: vec![1_000],
        replicates: 12,
        seed: 77,
        ..ExperimentConfig::default()
    };
    let render = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| render_outputs(&run_bench(&config).unwrap()).unwrap())
    };
    let one = render(1);
    let runs = [render(1), render(4), render(7)];
    let identical = runs.iter().all(|r| *r == one);
    let bytes: usize = one.iter().map(|(_, c)| c.len()).sum();
    outcome(
        identical,
        format!(
            "{} output files ({bytes} bytes) identical across 1, 1, 4 and 7 threads: {identical}",
            one.len()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, invariant_law()),
        (2, sampler_exactness()),
        (3, variance_algebra()),
        (4, crossings()),
    ];
    let bench_start = Instant::now();
    let report = run_bench(&ExperimentConfig::default()).expect("default protocol runs");
    let bench_time = bench_start.elapsed();
    results.extend([
        (5, clt(&report)),
        (6, consistency(&report)),
        (7, bandwidth_behavior(&report)),
        (8, ordering(&report)),
        (9, adaptive(&report)),
        (10, closed_loop()),
        (11, determinism()),
    ]);
    results.sort_by_key(|(i, _)| *i);

    println!(
        "default protocol: {} threads, {}",
        rayon::current_num_threads(),
        secs(bench_time)
    );
    for (i, o) in &results {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {i:>2} {status}  {}", o.detail);
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {}",
        results.len(),
        secs(start.elapsed())
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
