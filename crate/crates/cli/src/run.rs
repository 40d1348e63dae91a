//! Command implementations: resolve a config, do the work, write artifacts.
//!
//! Every artifact embeds the library version, the config digest, and the
//! effective seed, so any output file identifies the run that produced it.
//! Progress goes to stderr; stdout stays empty unless --print-summary.

use std::path::{Path, PathBuf};

use serde::Serialize;

use proxbridge_core::diagnostics::{coverage_report_from, mse_curve_from, rate_report_from};
use proxbridge_core::rng::derive_seed;
use proxbridge_core::{
    check_identification_identities, run_replication_study, CoverageReport, Error, EstimateReport,
    EstimatorSpec, IdentityReport, MseCurve, ObservationTable, RateReport, Result, VERSION,
};

use crate::config::{DataSource, Dgp, EstimateConfig, StudyConfig, SynthesizeConfig};
use crate::Family;

/// Seed path tags; distinct from the two-level (size, replication) paths
/// the study harness derives.
const ORACLE_SEED: u64 = 0x6f72_6163;
const IDENTITY_SEED: u64 = 0x6964_656e;

/// Run-wide context assembled in main.
pub struct RunCtx {
    pub config_digest: String,
    pub print_summary: bool,
}

/// Sizes the global worker pool. The PROXBRIDGE_JOBS variable overrides
/// the flag; leaving both unset keeps the default (all cores).
pub fn configure_pool(jobs_flag: Option<usize>) -> Result<()> {
    let jobs = match std::env::var("PROXBRIDGE_JOBS") {
        Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| {
            Error::validation(format!("PROXBRIDGE_JOBS must be a positive integer, got {s:?}"))
        })?),
        Err(std::env::VarError::NotPresent) => jobs_flag,
        Err(e) => return Err(Error::validation(format!("PROXBRIDGE_JOBS: {e}"))),
    };
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::validation("jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::computation(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn stem_file(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// First hex words of a digest, for log lines.
fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    task: &'static str,
    config_digest: String,
    dgp_digest: String,
    seed: u64,
    n: usize,
}

pub fn synthesize(
    mut cfg: SynthesizeConfig,
    ctx: &RunCtx,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    let stem = cfg
        .out
        .clone()
        .ok_or_else(|| Error::validation("no output stem: set out in the config or pass --out"))?;
    let dgp = cfg.dgp.resolve()?;
    let table = dgp.generate(cfg.n, cfg.seed)?;

    let data_path = stem_file(&stem, ".csv");
    let sidecar_path = stem_file(&stem, ".dims.json");
    let manifest_path = stem_file(&stem, ".manifest.json");
    table.write_csv(&data_path, &sidecar_path)?;
    let manifest = Manifest {
        version: VERSION,
        task: "synthesize",
        config_digest: ctx.config_digest.clone(),
        dgp_digest: dgp.digest(),
        seed: cfg.seed,
        n: cfg.n,
    };
    write_json(&manifest_path, &manifest)?;

    eprintln!("wrote {} rows to {}", table.n(), data_path.display());
    eprintln!("sidecar {}", sidecar_path.display());
    eprintln!("manifest {}", manifest_path.display());
    if ctx.print_summary {
        println!(
            "synthesize: {} rows, dgp {}, seed {}",
            table.n(),
            short(&manifest.dgp_digest),
            cfg.seed
        );
    }
    Ok(())
}

/// Flag overrides specific to `estimate`.
pub struct EstimateFlags {
    pub data: Option<PathBuf>,
    pub family: Option<Family>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub oracle: bool,
}

/// Swaps the estimator family while keeping the configured nuisances.
fn apply_family(
    spec: EstimatorSpec,
    family: Option<Family>,
    folds: Option<usize>,
) -> Result<EstimatorSpec> {
    let prior_folds = match &spec {
        EstimatorSpec::DrCrossfit { folds, .. } => Some(*folds),
        _ => None,
    };
    let nuisance = spec.nuisance().clone();
    let mut out = match family {
        None => spec,
        Some(Family::Ipw) => EstimatorSpec::Ipw { nuisance },
        Some(Family::Reg) => EstimatorSpec::Reg { nuisance },
        Some(Family::Dr) => EstimatorSpec::Dr { nuisance },
        Some(Family::DrCrossfit) => {
            let folds = folds.or(prior_folds).ok_or_else(|| {
                Error::validation("switching to dr-crossfit needs --folds or a configured fold count")
            })?;
            EstimatorSpec::DrCrossfit { nuisance, folds }
        }
    };
    if let Some(f) = folds {
        match &mut out {
            EstimatorSpec::DrCrossfit { folds, .. } => *folds = f,
            _ => return Err(Error::validation("the folds flag applies to dr-crossfit only")),
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Serialize)]
struct EstimateEnvelope {
    version: &'static str,
    task: &'static str,
    config_digest: String,
    seed: u64,
    /// Oracle value of J when --oracle was passed on a synthetic source;
    /// the MC field carries the Monte-Carlo error for the SEM oracle.
    oracle_j: Option<f64>,
    oracle_j_mc_se: Option<f64>,
    /// |j_hat - oracle_j| in units of the reported standard error.
    oracle_gap_in_se: Option<f64>,
    report: EstimateReport,
}

pub fn estimate(mut cfg: EstimateConfig, ctx: &RunCtx, flags: EstimateFlags) -> Result<()> {
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = flags.out {
        cfg.out = Some(o);
    }
    if let Some(d) = flags.data {
        match &mut cfg.data {
            DataSource::Csv { path, sidecar } => {
                *path = d;
                *sidecar = None;
            }
            DataSource::Synthetic { .. } => {
                return Err(Error::validation(
                    "the data flag overrides csv sources; this config is synthetic",
                ))
            }
        }
    }
    cfg.estimator = apply_family(cfg.estimator, flags.family, flags.folds)?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::validation("no output path: set out in the config or pass --out"))?;

    let (table, dgp): (ObservationTable, Option<Dgp>) = match &cfg.data {
        DataSource::Csv { path, sidecar } => {
            let sidecar = sidecar.clone().unwrap_or_else(|| path.with_extension("dims.json"));
            eprintln!("reading {} + {}", path.display(), sidecar.display());
            (ObservationTable::read_csv(path, &sidecar)?, None)
        }
        DataSource::Synthetic { dgp, n } => {
            let dgp = dgp.resolve()?;
            eprintln!("drawing {n} synthetic rows, dgp {}", short(&dgp.digest()));
            (dgp.generate(*n, cfg.seed)?, Some(dgp))
        }
    };
    let contrast = cfg.contrast.resolve(dgp.as_ref())?;
    let (report, _, _) = cfg.estimator.run(&table, &contrast, cfg.seed)?;

    let (oracle_j, oracle_j_mc_se, oracle_gap_in_se) = if flags.oracle {
        let dgp = dgp.as_ref().ok_or_else(|| {
            Error::validation("the oracle flag needs a synthetic data source")
        })?;
        let (j, mc_se) = dgp.oracle_j(&contrast, derive_seed(cfg.seed, &[ORACLE_SEED]))?;
        let gap = (report.se > 0.0).then(|| (report.j_hat - j).abs() / report.se);
        (Some(j), mc_se, gap)
    } else {
        (None, None, None)
    };

    let envelope = EstimateEnvelope {
        version: VERSION,
        task: "estimate",
        config_digest: ctx.config_digest.clone(),
        seed: cfg.seed,
        oracle_j,
        oracle_j_mc_se,
        oracle_gap_in_se,
        report,
    };
    write_json(&out, &envelope)?;
    eprintln!("report written to {}", out.display());
    if ctx.print_summary {
        let r = &envelope.report;
        println!(
            "{}: j_hat = {:.6}, se = {:.6}, 95% ci [{:.6}, {:.6}], n = {}",
            r.estimator, r.j_hat, r.se, r.ci_lo, r.ci_hi, r.n
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct StudySummary {
    version: &'static str,
    task: &'static str,
    config_digest: String,
    master_seed: u64,
    estimator: String,
    dgp_digest: String,
    oracle_j: f64,
    sizes: Vec<usize>,
    replications: usize,
    rate: RateReport,
    coverage: CoverageReport,
    mse: MseCurve,
    /// None when the config set identity_trials = 0.
    identity: Option<IdentityReport>,
}

pub fn study(
    mut cfg: StudyConfig,
    ctx: &RunCtx,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    let stem = cfg
        .out
        .clone()
        .ok_or_else(|| Error::validation("no output stem: set out in the config or pass --out"))?;
    let study = cfg.to_study()?;
    study.validate()?;
    eprintln!(
        "study: {} sizes x {} replications, estimator {}",
        study.sizes.len(),
        study.replications,
        study.estimator.name()
    );

    let result = run_replication_study(&study)?;
    let rate = rate_report_from(&result);
    let coverage = coverage_report_from(&result);
    let mse = mse_curve_from(&result);
    let identity = if cfg.identity_trials > 0 {
        let seed = derive_seed(cfg.master_seed, &[IDENTITY_SEED]);
        Some(check_identification_identities(&study.dgp, cfg.identity_trials, seed)?)
    } else {
        None
    };

    let cells_path = stem_file(&stem, ".cells.csv");
    write_cells_csv(&cells_path, &rate, &coverage, &mse)?;
    let summary = StudySummary {
        version: VERSION,
        task: "study",
        config_digest: ctx.config_digest.clone(),
        master_seed: cfg.master_seed,
        estimator: result.estimator.clone(),
        dgp_digest: study.dgp.digest(),
        oracle_j: result.oracle_j,
        sizes: study.sizes.clone(),
        replications: study.replications,
        rate,
        coverage,
        mse,
        identity,
    };
    let summary_path = stem_file(&stem, ".summary.json");
    write_json(&summary_path, &summary)?;

    eprintln!("cells written to {}", cells_path.display());
    eprintln!("summary written to {}", summary_path.display());
    if ctx.print_summary {
        let slope = match summary.rate.slope {
            Some(b) => format!("{b:.3}"),
            None => "n/a".to_string(),
        };
        let last = summary.coverage.cells.last().expect("validated grids are nonempty");
        let identities = match &summary.identity {
            Some(rep) if rep.pass => "pass",
            Some(_) => "FAIL",
            None => "skipped",
        };
        println!(
            "study: slope = {slope}, coverage[n={}] = {:.3}, identities {identities}",
            last.n, last.coverage
        );
    }
    Ok(())
}

/// One row per sample size; the rate, coverage, and MSE cells of a study
/// share the size grid by construction.
fn write_cells_csv(
    path: &Path,
    rate: &RateReport,
    coverage: &CoverageReport,
    mse: &MseCurve,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "n",
        "rmse",
        "bias",
        "mean_se",
        "coverage",
        "wilson_lo",
        "wilson_hi",
        "zero_width",
        "mean_abs_error",
        "mean_residual_h",
        "mean_residual_q",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
    for i in 0..rate.cells.len() {
        let r = &rate.cells[i];
        let c = &coverage.cells[i];
        let m = &mse.cells[i];
        wtr.write_record([
            format!("{}", r.n),
            format!("{}", r.rmse),
            format!("{}", r.bias),
            format!("{}", r.mean_se),
            format!("{}", c.coverage),
            format!("{}", c.wilson_lo),
            format!("{}", c.wilson_hi),
            format!("{}", c.zero_width),
            format!("{}", m.mean_abs_error),
            opt(m.mean_residual_h),
            opt(m.mean_residual_q),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
