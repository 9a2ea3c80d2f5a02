//! Command-line front end: runs a config over its seeds in parallel and
//! writes `run_<seed>.csv`, `summary.csv` and `meta.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{fd_bound_audit, FdAuditReport};
use crate::config::{load_config, InitKind, RunConfig};
use crate::error::{BilevelError, Result};
use crate::optimizers::{run, Init, IterationRecord, RunOptions, ScheduleParams};

pub const OUTPUT_ENV: &str = "BILEVEL_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "runs";

/// Column order of every per-run CSV.
pub const RUN_COLUMNS: [&str; 18] = [
    "t",
    "alpha",
    "beta",
    "lambda",
    "eta_f",
    "eta_g",
    "eta_r",
    "norm_hf",
    "norm_hg",
    "norm_hr",
    "grad_phi_norm_sq",
    "grad_phi_running_avg",
    "err_y",
    "err_v",
    "err_f",
    "err_g",
    "err_r",
    "outer_loss",
];

#[derive(Debug, Parser)]
#[command(name = "bilevel", version, about = "Hessian/Jacobian-free stochastic bilevel optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every seed of a config and write CSV traces.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config and $BILEVEL_OUTPUT_DIR).
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse a config, build its problem and print the resolved schedule.
    Validate { config: PathBuf },
    /// Measure finite-difference product errors against exact products.
    AuditFd {
        config: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6])]
        deltas: Vec<f64>,
        /// Radius for the `v` draws (default: the resolved `r_v`).
        #[arg(long)]
        r_v: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `--output`, then the config, then `$BILEVEL_OUTPUT_DIR`, then `runs`.
pub fn output_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub n_records: usize,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub version: &'static str,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: RunConfig,
    pub schedule: ScheduleParams<f64>,
    pub warnings: Vec<String>,
    pub runs: Vec<SeedOutcome>,
}

#[derive(Debug)]
pub struct ExecuteReport {
    pub output_dir: PathBuf,
    pub meta: Meta,
}

impl ExecuteReport {
    pub fn all_ok(&self) -> bool {
        self.meta.runs.iter().all(|r| r.status == RunStatus::Ok)
    }

    pub fn outcome(&self, seed: u64) -> Option<&SeedOutcome> {
        self.meta.runs.iter().find(|r| r.seed == seed)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn run_seed(cfg: &RunConfig, oracle: &dyn crate::oracle::BilevelOracle<f64>, params: &ScheduleParams<f64>, seed: u64) -> SeedOutcome {
    let opts = RunOptions {
        seed,
        init: match cfg.init {
            InitKind::Seeded => Init::Seeded(seed),
            InitKind::Zeros => Init::Zeros,
        },
        diag_every: cfg.diag_every,
        batch: cfg.batch,
    };
    let start = Instant::now();
    let result = run(cfg.algorithm, oracle, params, &opts);
    let wall_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(trace) => SeedOutcome {
            seed,
            status: RunStatus::Ok,
            message: None,
            n_records: trace.records.len(),
            wall_seconds,
            records: trace.records,
        },
        Err(failure) => {
            let status = match failure.error {
                BilevelError::Divergence { .. } => RunStatus::Diverged,
                _ => RunStatus::Failed,
            };
            warn!("seed {seed}: {failure}");
            SeedOutcome {
                seed,
                status,
                message: Some(failure.error.to_string()),
                n_records: failure.trace.records.len(),
                wall_seconds,
                records: failure.trace.records,
            }
        }
    }
}

/// Runs every seed of `cfg` and writes all outputs to `out`.
pub fn execute(cfg: &RunConfig, out: &Path, threads: Option<usize>) -> Result<ExecuteReport> {
    let started_unix = unix_now();
    let resolved = cfg.resolve()?;
    for w in &resolved.warnings {
        warn!("{w}");
    }
    std::fs::create_dir_all(out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(BilevelError::Config("--threads must be ≥ 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| BilevelError::Config(format!("thread pool: {e}")))?;
    let oracle = resolved.oracle.as_ref();
    let params = &resolved.params;
    info!(
        "running {} on {} seeds, {} iterations",
        cfg.algorithm,
        cfg.seeds.len(),
        params.iterations
    );
    let runs: Vec<SeedOutcome> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, oracle, params, seed))
            .collect()
    });
    for r in &runs {
        write_run_csv(&out.join(format!("run_{}.csv", r.seed)), &r.records)?;
    }
    let traces: Vec<&[IterationRecord]> = runs.iter().map(|r| r.records.as_slice()).collect();
    write_summary_csv(&out.join("summary.csv"), &traces)?;
    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        started_unix,
        finished_unix: unix_now(),
        config: cfg.clone(),
        schedule: *params,
        warnings: resolved.warnings,
        runs,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| BilevelError::Config(e.to_string()))?;
    std::fs::write(out.join("meta.json"), json)?;
    Ok(ExecuteReport {
        output_dir: out.to_path_buf(),
        meta,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Metric values of a record in [`RUN_COLUMNS`] order, without `t`.
pub fn record_values(r: &IterationRecord) -> [Option<f64>; 17] {
    [
        Some(r.alpha),
        Some(r.beta),
        Some(r.lambda),
        Some(r.eta_f),
        Some(r.eta_g),
        Some(r.eta_r),
        Some(r.norm_hf),
        Some(r.norm_hg),
        Some(r.norm_hr),
        r.grad_phi_norm_sq,
        r.grad_phi_running_avg,
        r.err_y,
        r.err_v,
        r.err_f,
        r.err_g,
        r.err_r,
        r.outer_loss,
    ]
}

fn csv_err(e: csv::Error) -> BilevelError {
    BilevelError::Io(std::io::Error::other(e))
}

pub fn write_run_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(RUN_COLUMNS).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(record_values(r).into_iter().map(fmt_opt));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Type-7 sample quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-`t` median, first and third quartile of every metric across runs.
/// Runs that stopped early simply drop out of later rows.
pub fn write_summary_csv(path: &Path, traces: &[&[IterationRecord]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string(), "n_runs".to_string()];
    for name in &RUN_COLUMNS[1..] {
        for stat in ["median", "q1", "q3"] {
            header.push(format!("{name}_{stat}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut ts: Vec<u64> = traces.iter().flat_map(|tr| tr.iter().map(|r| r.t)).collect();
    ts.sort_unstable();
    ts.dedup();
    let mut cursors = vec![0usize; traces.len()];
    for t in ts {
        let mut rows = Vec::new();
        for (tr, c) in traces.iter().zip(cursors.iter_mut()) {
            while *c < tr.len() && tr[*c].t < t {
                *c += 1;
            }
            if *c < tr.len() && tr[*c].t == t {
                rows.push(record_values(&tr[*c]));
            }
        }
        let mut out = vec![t.to_string(), rows.len().to_string()];
        for k in 0..RUN_COLUMNS.len() - 1 {
            let mut vals: Vec<f64> = rows.iter().filter_map(|r| r[k]).filter(|v| !v.is_nan()).collect();
            if vals.is_empty() {
                out.extend([String::new(), String::new(), String::new()]);
            } else {
                vals.sort_by(f64::total_cmp);
                out.extend([0.5, 0.25, 0.75].map(|p| fmt_f(quantile(&vals, p))));
            }
        }
        w.write_record(&out).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the finite-difference audit for `cfg`'s problem and writes `fd_audit.csv`.
pub fn audit(cfg: &RunConfig, out: &Path, trials: usize, deltas: &[f64], r_v: Option<f64>, seed: u64) -> Result<FdAuditReport> {
    let resolved = cfg.resolve()?;
    let r_v = r_v.unwrap_or(resolved.params.r_v);
    let report = fd_bound_audit(resolved.oracle.as_ref(), trials, deltas, r_v, seed)?;
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("fd_audit.csv")).map_err(csv_err)?;
    w.write_record([
        "delta",
        "max_err_h",
        "max_err_j",
        "mean_err_h",
        "mean_err_j",
        "bound_h",
        "bound_j",
        "violations_h",
        "violations_j",
        "tight_violations",
    ])
    .map_err(csv_err)?;
    for d in &report.per_delta {
        w.write_record([
            fmt_f(d.delta),
            fmt_f(d.max_err_h),
            fmt_f(d.max_err_j),
            fmt_f(d.mean_err_h),
            fmt_f(d.mean_err_j),
            fmt_f(report.l_gyy * r_v * r_v * d.delta),
            fmt_f(report.l_gxy * r_v * r_v * d.delta),
            d.violations_h.to_string(),
            d.violations_j.to_string(),
            d.tight_violations.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(report)
}

/// Exit codes: 0 success, 1 some run diverged or failed, 2 usage/config/IO error.
pub fn main_with(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            output,
            seeds,
            threads,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
                cfg.validate()?;
            }
            let out = output_dir(output.as_deref(), &cfg);
            let report = execute(&cfg, &out, threads)?;
            for r in &report.meta.runs {
                let tail = r.message.as_deref().map(|m| format!(" ({m})")).unwrap_or_default();
                println!(
                    "seed {}: {:?}, {} records, {:.2}s{tail}",
                    r.seed, r.status, r.n_records, r.wall_seconds
                );
            }
            println!("wrote {}", report.output_dir.display());
            Ok(report.all_ok())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let resolved = cfg.resolve()?;
            let dims = resolved.oracle.dims();
            println!("ok: {} on {} (p = {}, q = {})", cfg.algorithm, cfg.problem.kind(), dims.p, dims.q);
            println!("{}", serde_json::to_string_pretty(&resolved.params).unwrap_or_default());
            for w in &resolved.warnings {
                println!("warning: {w}");
            }
            Ok(true)
        }
        Command::AuditFd {
            config,
            output,
            trials,
            deltas,
            r_v,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let out = output_dir(output.as_deref(), &cfg);
            let report = audit(&cfg, &out, trials, &deltas, r_v, seed)?;
            for d in &report.per_delta {
                println!(
                    "delta {:.1e}: max |e_H| {:.3e}, max |e_J| {:.3e}, violations {}/{}",
                    d.delta, d.max_err_h, d.max_err_j, d.violations_h, d.violations_j
                );
            }
            println!("monotone violations: {}", report.monotone_violations);
            Ok(report.total_violations() == 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&d, 0.5), 2.5);
        assert_eq!(quantile(&d, 0.25), 1.75);
        assert_eq!(quantile(&d, 0.75), 3.25);
        assert_eq!(quantile(&[7.0], 0.25), 7.0);
    }

    #[test]
    fn args_parse() {
        let cli = Cli::try_parse_from(["bilevel", "run", "c.toml", "--seeds", "3,4", "--threads", "2"]).unwrap();
        match cli.command {
            Command::Run { seeds, threads, .. } => {
                assert_eq!(seeds, Some(vec![3, 4]));
                assert_eq!(threads, Some(2));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["bilevel", "run"]).is_err());
    }
}
