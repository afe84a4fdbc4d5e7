//! Command implementations behind the `mmtta` binary: stream generation,
//! adaptation runs, report comparison, and checkpoint dumps.
//!
//! Every run writes its manifest before processing starts, streams metrics as
//! JSON-lines while running, and finishes with the report, the three bank
//! checkpoints, and (optionally) covariance-deviation dumps — all inside the
//! chosen output directory. Exit codes: 1 configuration, 2 io/parse,
//! 3 numerical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{AdaptationConfig, ResponsibilitySource, UnimodalPosteriorSource};
use crate::encoder::build_source_model;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::fusion::BalanceSign;
use crate::gaussian::Perspective;
use crate::io::{
    read_bank, read_stream, sha256_file, write_bank, write_cov_dump, write_cov_dump_text,
    write_stream, write_stream_csv, StreamHeader,
};
use crate::report::{RunManifest, RunReport};
use crate::synth::{CompiledScenario, ScenarioSpec};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV_VAR: &str = "MMTTA_SEED";

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_scenario(path: &Path) -> Result<CompiledScenario> {
    let text = read_to_string(path)?;
    let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        message: e.to_string(),
    })?;
    CompiledScenario::compile(spec)
}

/// Generate a feature-stream file (and optionally a CSV copy) from a
/// scenario spec.
pub fn cmd_gen(spec_path: &Path, out_path: &Path, csv_path: Option<&Path>) -> Result<()> {
    let scenario = load_scenario(spec_path)?;
    let spec = scenario.spec();
    let header = StreamHeader {
        num_classes: spec.num_classes as u32,
        dim_m1: spec.modality_1.dim as u32,
        dim_m2: spec.modality_2.dim as u32,
        count: spec.samples as u64,
    };
    let samples = scenario.generate();
    write_stream(out_path, header, samples.iter().cloned())?;
    if let Some(csv) = csv_path {
        write_stream_csv(csv, header, &samples)?;
    }
    Ok(())
}

/// Per-flag overrides applied on top of the config file (or defaults).
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub w_c: Option<f64>,
    pub w_g: Option<f64>,
    pub w_ra: Option<f64>,
    pub w_bal: Option<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub epsilon_shrink: Option<f64>,
    pub learning_rate: Option<f64>,
    pub feature_dim: Option<usize>,
    pub source_samples: Option<usize>,
    pub responsibility_source: Option<ResponsibilitySource>,
    pub unimodal_posterior_source: Option<UnimodalPosteriorSource>,
    pub balance_sign: Option<BalanceSign>,
    pub seed: Option<u64>,
}

/// Resolve the effective config: file (or defaults), then flags, then the
/// seed environment variable, then validation.
pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &ConfigOverrides,
    env_seed: Option<u64>,
) -> Result<AdaptationConfig> {
    let mut config = match config_path {
        Some(path) => AdaptationConfig::from_json(&read_to_string(path)?)?,
        None => AdaptationConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(value) = overrides.$field {
                config.$field = value;
            })*
        };
    }
    apply!(
        batch_size,
        lambda,
        w_c,
        w_g,
        w_ra,
        w_bal,
        alpha,
        tau,
        epsilon_shrink,
        learning_rate,
        feature_dim,
        source_samples,
        responsibility_source,
        unimodal_posterior_source,
        balance_sign,
        seed
    );
    if let Some(seed) = env_seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Read the seed override from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config {
                message: format!("{SEED_ENV_VAR} must be an unsigned integer, got {text:?}"),
            }),
        Err(_) => Ok(None),
    }
}

/// Everything `run` needs beyond the resolved config.
#[derive(Debug, Clone)]
pub struct RunArgs {
    pub scenario_path: PathBuf,
    /// Optional pre-generated stream; the scenario is used for the source
    /// model either way. Without a stream file the target stream is
    /// generated in memory from the scenario.
    pub stream_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub dump_covariances: bool,
    pub trace_partition: bool,
}

/// Run the adaptation engine over a stream and persist every artifact.
pub fn cmd_run(config: AdaptationConfig, args: &RunArgs) -> Result<RunReport> {
    let scenario = load_scenario(&args.scenario_path)?;
    let spec = scenario.spec();

    // When a stream file is given, verify it is structurally consistent with
    // the scenario before touching the engine.
    let file_samples = match &args.stream_path {
        Some(path) => {
            let (header, samples) = read_stream(path)?;
            if header.num_classes as usize != spec.num_classes
                || header.dim_m1 as usize != spec.modality_1.dim
                || header.dim_m2 as usize != spec.modality_2.dim
            {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    message: format!(
                        "stream header (C={}, d1={}, d2={}) does not match scenario (C={}, d1={}, d2={})",
                        header.num_classes,
                        header.dim_m1,
                        header.dim_m2,
                        spec.num_classes,
                        spec.modality_1.dim,
                        spec.modality_2.dim
                    ),
                });
            }
            Some(samples)
        }
        None => None,
    };

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;
    let out = |name: &str| args.out_dir.join(name);

    let mut output_paths = vec![
        out("manifest.json"),
        out("metrics.jsonl"),
        out("report.json"),
        out("bank_m1.gdabank"),
        out("bank_m2.gdabank"),
        out("bank_fused.gdabank"),
    ];
    if args.dump_covariances {
        for tag in ["m1", "m2", "fused"] {
            output_paths.push(out(&format!("cov_{tag}.gdacov")));
            output_paths.push(out(&format!("cov_{tag}.txt")));
        }
    }

    // Manifest goes to disk before any processing starts.
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seed: config.seed,
        input_hash: args
            .stream_path
            .as_deref()
            .map(sha256_file)
            .transpose()?,
        input_path: args.stream_path.as_ref().map(|p| p.display().to_string()),
        scenario_path: Some(args.scenario_path.display().to_string()),
        output_paths: output_paths.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&out("manifest.json"), &manifest)?;

    let encoder = build_source_model(&scenario, config.feature_dim, config.source_samples, config.seed)?;
    let mut engine = Engine::new(config, encoder)?;

    let metrics_path = out("metrics.jsonl");
    let metrics_file =
        File::create(&metrics_path).map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let mut metrics = BufWriter::new(metrics_file);

    let report = {
        let on_record = |record: &crate::report::BatchRecord| -> Result<()> {
            let line = serde_json::to_string(record).map_err(|e| Error::Format {
                path: metrics_path.display().to_string(),
                offset: 0,
                message: e.to_string(),
            })?;
            writeln!(metrics, "{line}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))
        };
        match file_samples {
            Some(samples) => {
                engine.run_stream(samples.into_iter().map(Ok), args.trace_partition, on_record)?
            }
            None => engine.run_stream(
                (0..spec.samples as u64).map(|i| Ok(scenario.sample_at(i))),
                args.trace_partition,
                on_record,
            )?,
        }
    };
    metrics
        .flush()
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    write_json(&out("report.json"), &report)?;
    for perspective in Perspective::ALL {
        let path = out(&format!("bank_{}.gdabank", perspective.tag()));
        write_bank(
            &path,
            engine.bank(perspective),
            engine.config().alpha,
            engine.config().epsilon_shrink,
        )?;
    }
    if args.dump_covariances {
        for perspective in Perspective::ALL {
            let (mean_cov, deviations) = engine.bank(perspective).cov_deviations();
            write_cov_dump(&out(&format!("cov_{}.gdacov", perspective.tag())), &mean_cov, &deviations)?;
            write_cov_dump_text(&out(&format!("cov_{}.txt", perspective.tag())), &mean_cov, &deviations)?;
        }
    }
    Ok(report)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// One row of the evaluation table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRow {
    pub report: String,
    pub batches: usize,
    pub samples: usize,
    pub acc_source: Option<f64>,
    pub acc_gda: Option<f64>,
    pub acc_fused: Option<f64>,
    /// Fused-accuracy difference against the first listed report.
    pub delta_fused: Option<f64>,
}

/// Compare run reports: returns the rows and a rendered text table.
pub fn cmd_eval(report_paths: &[PathBuf]) -> Result<(Vec<EvalRow>, String)> {
    let mut rows = Vec::with_capacity(report_paths.len());
    let mut baseline: Option<f64> = None;
    for path in report_paths {
        let text = read_to_string(path)?;
        let report: RunReport = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: e.to_string(),
        })?;
        let acc_fused = report.aggregates.acc_fused;
        if baseline.is_none() {
            baseline = acc_fused;
        }
        let delta_fused = match (acc_fused, baseline) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        rows.push(EvalRow {
            report: path.display().to_string(),
            batches: report.aggregates.batches,
            samples: report.aggregates.samples,
            acc_source: report.aggregates.acc_source,
            acc_gda: report.aggregates.acc_gda,
            acc_fused,
            delta_fused,
        });
    }
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    };
    let mut table = format!(
        "{:<40} {:>8} {:>8} {:>11} {:>11} {:>11} {:>12}\n",
        "report", "batches", "samples", "acc_source", "acc_gda", "acc_fused", "delta_fused"
    );
    for row in &rows {
        table.push_str(&format!(
            "{:<40} {:>8} {:>8} {:>11} {:>11} {:>11} {:>12}\n",
            row.report,
            row.batches,
            row.samples,
            fmt(row.acc_source),
            fmt(row.acc_gda),
            fmt(row.acc_fused),
            fmt(row.delta_fused),
        ));
    }
    Ok((rows, table))
}

/// Human-readable summary of a bank checkpoint.
pub fn cmd_dump_bank(path: &Path) -> Result<String> {
    let (bank, alpha, epsilon_shrink) = read_bank(path)?;
    let mut text = format!(
        "bank {}: perspective={} dim={} classes={} alpha={} epsilon_shrink={}\n",
        path.display(),
        bank.perspective().tag(),
        bank.dim(),
        bank.num_classes(),
        alpha,
        epsilon_shrink
    );
    for (c, (stats, params)) in bank.stats().iter().zip(bank.params()).enumerate() {
        let mean_preview: Vec<String> = params
            .mean()
            .iter()
            .take(4)
            .map(|x| format!("{x:.4}"))
            .collect();
        text.push_str(&format!(
            "class {c}: count={:.3} prior={:.6} log_det={:.4} mean=[{}{}]\n",
            stats.count(),
            params.prior(),
            params.log_det(),
            mean_preview.join(", "),
            if params.mean().len() > 4 { ", ..." } else { "" },
        ));
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_env_seed_precedence() {
        let overrides = ConfigOverrides {
            lambda: Some(0.25),
            seed: Some(7),
            ..ConfigOverrides::default()
        };
        let config = resolve_config(None, &overrides, Some(99)).unwrap();
        assert_eq!(config.lambda, 0.25);
        // Environment seed wins over the flag.
        assert_eq!(config.seed, 99);
    }

    #[test]
    fn invalid_override_is_a_config_error() {
        let overrides = ConfigOverrides {
            tau: Some(-1.0),
            ..ConfigOverrides::default()
        };
        match resolve_config(None, &overrides, None) {
            Err(e) => assert_eq!(e.exit_code(), 1),
            Ok(_) => panic!("expected config error"),
        }
    }

    #[test]
    fn eval_missing_file_is_io_exit_2() {
        let missing = PathBuf::from("/nonexistent/report.json");
        match cmd_eval(&[missing.clone()]) {
            Err(e) => {
                assert_eq!(e.exit_code(), 2);
                assert!(e.to_string().contains("/nonexistent/report.json"));
            }
            Ok(_) => panic!("expected io error"),
        }
    }
}
