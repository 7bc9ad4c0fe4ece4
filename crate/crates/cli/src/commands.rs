use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use pdmp_core::adaptive::{adaptive_curve, AdaptiveFits, ProjectionParams};
use pdmp_core::estimators::{
    kernel_curve, Bandwidths, EstimateCurve, EstimatorKind, PreparedChain,
};
use pdmp_core::experiments::{run_bench, write_outputs, ExperimentConfig, GridSpec};
use pdmp_core::model::ModelSpec;
use pdmp_core::realdata::{
    extract_embedded, load_lineages, read_rate_curve, run_pipeline, simulate_lineages,
    validate_with_rate, write_lineages, write_pipeline_outputs, write_validation_csv,
    PipelineConfig, ValidationParams,
};
use pdmp_core::simulate::{fmt_f64, sample_grid, simulate_chain, Trajectory};
use pdmp_core::theory::{sigma_amg2, sigma_k2, sigma_ks2, SeriesTolerance, TcpLaws, ARGUMENT_STEP};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::manifest::manifest_path;
use crate::{
    AdaptiveArgs, BenchArgs, ChainArgs, EstimateArgs, KernelEstimator, Outcome, PosteriorArgs,
    ProjectionEstimator, RealdataArgs, SimulateArgs, TheoryArgs, ValidateArgs,
};

fn grid_points(text: &str) -> Result<Vec<f64>, CliError> {
    GridSpec::parse(text)
        .map(|g| g.points())
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("arguments serialize")
}

/// Creates `path` (and its parent directories) for buffered writing.
fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn existing_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::FileNotFound {
            path: path.to_path_buf(),
        })
    }
}

fn write_curve(curve: &EstimateCurve, path: &Path) -> Result<(), CliError> {
    curve.write_csv(create(path)?)?;
    Ok(())
}

fn simulate_from(args: &ChainArgs) -> Result<(ModelSpec, Trajectory), CliError> {
    let model = args.model.config().build()?;
    let traj = simulate_chain(&model, args.z0, args.n, args.seed)?;
    Ok((model, traj))
}

fn opt(v: Result<f64, pdmp_core::theory::TheoryError>) -> String {
    v.ok()
        .filter(|v| v.is_finite())
        .map(fmt_f64)
        .unwrap_or_default()
}

pub fn theory(args: &TheoryArgs) -> Result<Outcome, CliError> {
    let grid = grid_points(&args.grid)?;
    let tol = SeriesTolerance {
        abs_tol: args.tol,
        ..SeriesTolerance::default()
    };
    let laws = TcpLaws::new(args.kappa, tol)?;
    // Epanechnikov kernel
    let tau2 = 0.6;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record([
        "x",
        "mu",
        "mu_ct",
        "mu_minus",
        "sigma_k",
        "sigma_ks",
        "sigma_amg",
    ])?;
    for &x in &grid {
        w.write_record([
            fmt_f64(x),
            opt(laws.mu(x)),
            opt(laws.mu_ct(x)),
            opt(laws.mu_minus(x)),
            opt(sigma_k2(&laws, x, tau2).map(f64::sqrt)),
            opt(sigma_ks2(&laws, x, tau2).map(f64::sqrt)),
            opt(sigma_amg2(&laws, x, tau2, ARGUMENT_STEP).map(f64::sqrt)),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&args.out, e))?;
    Ok(Outcome {
        config: to_value(args),
        config_hash: None,
        seed: None,
        outputs: vec![args.out.clone()],
        manifest: manifest_path(&args.out, false),
    })
}

pub fn simulate(args: &SimulateArgs) -> Result<Outcome, CliError> {
    if args.out.is_none() && args.grid_out.is_none() && args.lineage_dir.is_none() {
        return Err(CliError::Usage(
            "nothing to write: give --out, --grid-out or --lineage-dir".into(),
        ));
    }
    let mut outputs = Vec::new();
    let mut manifest = None;
    if args.out.is_some() || args.grid_out.is_some() {
        let (model, traj) = simulate_from(&args.chain)?;
        if let Some(out) = &args.out {
            traj.write_csv(create(out)?)?;
            outputs.push(out.clone());
            manifest = Some(manifest_path(out, false));
        }
        if let (Some(out), Some(dt)) = (&args.grid_out, args.grid_dt) {
            sample_grid(&model, &traj, dt)?.write_csv(create(out)?)?;
            outputs.push(out.clone());
            manifest.get_or_insert_with(|| manifest_path(out, false));
        }
    }
    if let (Some(count), Some(dir)) = (args.lineages, &args.lineage_dir) {
        let model = args.chain.model.config().build()?;
        let c = &args.chain;
        let lineages = simulate_lineages(
            &model,
            count,
            c.n,
            c.z0,
            args.grid_dt.unwrap_or(1.0),
            c.seed,
        )?;
        create_dir(dir)?;
        outputs.extend(write_lineages(&lineages, dir)?);
        manifest.get_or_insert_with(|| manifest_path(dir, true));
    }
    Ok(Outcome {
        config: to_value(args),
        config_hash: None,
        seed: Some(args.chain.seed),
        outputs,
        manifest: manifest.expect("at least one output"),
    })
}

fn kernel_bandwidths(args: &EstimateArgs) -> Result<Bandwidths, CliError> {
    match (
        args.estimator,
        args.bandwidth,
        args.bandwidth_s,
        args.bandwidth_t,
    ) {
        (KernelEstimator::K | KernelEstimator::Ks, Some(h), None, None) => {
            Ok(Bandwidths::Scalar(h))
        }
        (KernelEstimator::Amgo | KernelEstimator::Amg, None, Some(h_s), Some(h_t)) => {
            Ok(Bandwidths::Pair { h_s, h_t })
        }
        (KernelEstimator::K | KernelEstimator::Ks, ..) => {
            Err(CliError::Usage("`k` and `ks` take --bandwidth".into()))
        }
        _ => Err(CliError::Usage(
            "`amgo` and `amg` take --bandwidth-s and --bandwidth-t".into(),
        )),
    }
}

pub fn estimate(args: &EstimateArgs) -> Result<Outcome, CliError> {
    let bw = kernel_bandwidths(args)?;
    let grid = grid_points(&args.grid)?;
    let (model, traj) = simulate_from(&args.chain)?;
    let pc = PreparedChain::from_trajectory(&traj)?;
    let curve = kernel_curve(&pc, &model, args.estimator.kind(), bw, &grid)?;
    write_curve(&curve, &args.out)?;
    Ok(Outcome {
        config: to_value(args),
        config_hash: None,
        seed: Some(args.chain.seed),
        outputs: vec![args.out.clone()],
        manifest: manifest_path(&args.out, false),
    })
}

pub fn adaptive(args: &AdaptiveArgs) -> Result<Outcome, CliError> {
    let grid = grid_points(&args.grid)?;
    let params = ProjectionParams {
        a: args.a,
        b: args.b,
        m_bar: args.mbar,
        c: args.c,
    };
    let kind = match args.estimator {
        ProjectionEstimator::K => EstimatorKind::AdaptiveK,
        ProjectionEstimator::Ks => EstimatorKind::AdaptiveKS,
    };
    let (model, traj) = simulate_from(&args.chain)?;
    let pc = PreparedChain::from_trajectory(&traj)?;
    let fits = AdaptiveFits::fit(&pc, &params)?;
    let curve = adaptive_curve(&fits, &pc, &model, kind, &grid)?;
    write_curve(&curve, &args.out)?;
    let fit_out = args
        .fit_out
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("fit.json"));
    let fit = json!({
        "estimator": kind,
        "params": params,
        "m_star_post": fits.post.m_star,
        "m_star_pre": fits.pre.m_star,
        "post": fits.post,
        "pre": fits.pre,
    });
    serde_json::to_writer_pretty(create(&fit_out)?, &fit).map_err(|e| CliError::Json {
        path: fit_out.clone(),
        source: e,
    })?;
    Ok(Outcome {
        config: to_value(args),
        config_hash: None,
        seed: Some(args.chain.seed),
        outputs: vec![args.out.clone(), fit_out],
        manifest: manifest_path(&args.out, false),
    })
}

pub fn bench(args: &BenchArgs) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: args.config.clone(),
        source: e,
    })?;
    config.validate()?;
    let report = run_bench(&config)?;
    create_dir(&args.out)?;
    let outputs = write_outputs(&report, &args.out)?;
    Ok(Outcome {
        config: json!({ "config_file": args.config, "out": args.out, "experiment": config }),
        config_hash: Some(config.hash()),
        seed: Some(config.seed),
        outputs,
        manifest: manifest_path(&args.out, true),
    })
}

fn validation_params(p: &PosteriorArgs) -> ValidationParams {
    ValidationParams {
        x0: p.x0,
        jumps: p.jumps,
        keep: p.keep,
        seed: p.seed,
        ..ValidationParams::default()
    }
}

pub fn realdata(args: &RealdataArgs) -> Result<Outcome, CliError> {
    existing_dir(&args.input)?;
    let temp: u32 = args.temp.parse().expect("restricted by the parser");
    let mut pipeline = PipelineConfig::for_condition(temp, args.method.into())?;
    pipeline.grid = args
        .grid
        .as_deref()
        .map(|g| GridSpec::parse(g).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    pipeline.validation = validation_params(&args.posterior);
    let records = load_lineages(&args.input)?;
    let result = run_pipeline(&records, &pipeline)?;
    create_dir(&args.out)?;
    let outputs = write_pipeline_outputs(&result, &args.out)?;
    Ok(Outcome {
        config: json!({ "args": args, "pipeline": pipeline }),
        config_hash: None,
        seed: Some(args.posterior.seed),
        outputs,
        manifest: manifest_path(&args.out, true),
    })
}

pub fn validate(args: &ValidateArgs) -> Result<Outcome, CliError> {
    existing_dir(&args.input)?;
    let file = File::open(&args.rate_curve).map_err(|e| CliError::io(&args.rate_curve, e))?;
    let name = args.rate_curve.display().to_string();
    let rate = read_rate_curve(&name, file)?;
    let records = load_lineages(&args.input)?;
    let data = extract_embedded(&records)?;
    let model = data.fitted_model(data.slopes.theta)?;
    let observed: Vec<f64> = records.iter().flat_map(|r| r.log_sizes()).collect();
    let params = validation_params(&args.posterior);
    let report = validate_with_rate(&model, rate, &observed, &params)?;

    create_dir(&args.out)?;
    let csv_path = args.out.join("validation.csv");
    write_validation_csv(&report, &csv_path)?;
    let json_path: PathBuf = args.out.join("validation.json");
    let (ratio_mean, ratio_sd) = data.ratio_law();
    let summary = json!({
        "theta": data.slopes.theta,
        "ratio_mean": ratio_mean,
        "ratio_sd": ratio_sd,
        "ks_distance": report.ks_distance,
        "simulated_positions": report.simulated_positions,
        "observed_positions": report.observed_positions,
    });
    serde_json::to_writer_pretty(create(&json_path)?, &summary).map_err(|e| CliError::Json {
        path: json_path.clone(),
        source: e,
    })?;
    Ok(Outcome {
        config: json!({ "args": args, "validation": params }),
        config_hash: None,
        seed: Some(args.posterior.seed),
        outputs: vec![csv_path, json_path],
        manifest: manifest_path(&args.out, true),
    })
}
