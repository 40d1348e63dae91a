//! Job config schema: one JSON file per run, tagged by task.
//!
//! Configs are schema-validated before any computation; unknown keys are
//! rejected. Validation here is structural only (grids, fold counts, tag
//! agreement); referenced files are opened by the commands themselves, so
//! `validate-config` never touches anything but the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use proxbridge_core::synthetic::bundled;
use proxbridge_core::synthetic::{
    generate_discrete, generate_linear_sem, oracle_discrete_j, oracle_linear_sem_j,
    uniform_density_contrast, DiscreteDgp, LinearSemDgp,
};
use proxbridge_core::{
    ContrastSpec, Error, EstimatorSpec, ObservationTable, ReplicationStudy, Result,
};

/// Monte-Carlo budget for the linear-SEM oracle value of J; the discrete
/// oracle is exact and ignores it.
const ORACLE_MC: usize = 200_000;

/// Any config file the binary accepts. The `task` tag must match the
/// subcommand the file is passed to.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum JobConfig {
    Synthesize(SynthesizeConfig),
    Estimate(EstimateConfig),
    Study(StudyConfig),
}

impl JobConfig {
    pub fn load(path: &Path) -> Result<JobConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: JobConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task(&self) -> &'static str {
        match self {
            JobConfig::Synthesize(_) => "synthesize",
            JobConfig::Estimate(_) => "estimate",
            JobConfig::Study(_) => "study",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            JobConfig::Synthesize(_) => Ok(()),
            JobConfig::Estimate(c) => c.validate(),
            JobConfig::Study(c) => c.validate(),
        }
    }

    /// SHA-256 of the canonical JSON encoding of the parsed config, so the
    /// hash is independent of file whitespace and key layout quirks that
    /// parse to the same job.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("parsed configs re-serialize");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reference to a data-generating process.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpRef {
    /// Bundled discrete instance by registry name.
    Discrete { name: String },
    /// Discrete instance read from a JSON file of tables.
    DiscreteFile { path: PathBuf },
    /// The bundled linear SEM instance.
    LinearSem,
    /// Linear SEM coefficients read from a JSON file.
    LinearSemFile { path: PathBuf },
}

impl DgpRef {
    pub fn resolve(&self) -> Result<Dgp> {
        Ok(match self {
            DgpRef::Discrete { name } => Dgp::Discrete(bundled::discrete_by_name(name)?),
            DgpRef::DiscreteFile { path } => {
                Dgp::Discrete(DiscreteDgp::from_json(&read_ref(path)?)?)
            }
            DgpRef::LinearSem => Dgp::LinearSem(bundled::sem_default()),
            DgpRef::LinearSemFile { path } => {
                Dgp::LinearSem(LinearSemDgp::from_json(&read_ref(path)?)?)
            }
        })
    }
}

fn read_ref(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot read DGP file {}: {e}", path.display())))
}

/// A resolved generator, either family.
pub enum Dgp {
    Discrete(DiscreteDgp),
    LinearSem(LinearSemDgp),
}

impl Dgp {
    pub fn digest(&self) -> String {
        match self {
            Dgp::Discrete(d) => d.digest(),
            Dgp::LinearSem(d) => d.digest(),
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<ObservationTable> {
        match self {
            Dgp::Discrete(d) => Ok(generate_discrete(d, n, seed)),
            Dgp::LinearSem(d) => generate_linear_sem(d, n, seed),
        }
    }

    /// The contrast the instance was built with: the stored table for
    /// discrete DGPs, the uniform policy window for the SEM.
    pub fn default_contrast(&self) -> Result<ContrastSpec> {
        match self {
            Dgp::Discrete(d) => Ok(d.contrast()),
            Dgp::LinearSem(d) => {
                let (lo, hi) = d.policy_window();
                uniform_density_contrast(lo, hi)
            }
        }
    }

    /// Oracle J under `contrast`: exact for discrete instances, Monte
    /// Carlo (with its standard error) for the SEM.
    pub fn oracle_j(&self, contrast: &ContrastSpec, seed: u64) -> Result<(f64, Option<f64>)> {
        match self {
            Dgp::Discrete(d) => Ok((oracle_discrete_j(d, contrast)?, None)),
            Dgp::LinearSem(d) => {
                let (j, se) = oracle_linear_sem_j(d, contrast, ORACLE_MC, seed)?;
                Ok((j, Some(se)))
            }
        }
    }
}

/// Where estimation data comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV plus dims sidecar, as written by `synthesize`.
    Csv {
        path: PathBuf,
        /// Defaults to `path` with its extension replaced by `dims.json`.
        #[serde(default)]
        sidecar: Option<PathBuf>,
    },
    /// A fresh synthetic draw taken in process; nothing read from disk.
    Synthetic { dgp: DgpRef, n: usize },
}

/// Contrast weight pi(a|x) in serializable form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContrastConfig {
    /// The contrast the synthetic DGP was built with; synthetic sources only.
    FromDgp,
    /// Two-point treatment-effect weights 2a - 1 on a binary action.
    AteBinary,
    /// Tabulated policy weights per (x level, action).
    PolicyTable { table: Vec<Vec<f64>> },
}

impl ContrastConfig {
    pub fn resolve(&self, dgp: Option<&Dgp>) -> Result<ContrastSpec> {
        match self {
            ContrastConfig::FromDgp => dgp
                .ok_or_else(|| {
                    Error::validation("contrast kind from_dgp needs a synthetic data source")
                })?
                .default_contrast(),
            ContrastConfig::AteBinary => Ok(ContrastSpec::ate_binary()),
            ContrastConfig::PolicyTable { table } => ContrastSpec::policy_table(table.clone()),
        }
    }
}

/// `synthesize` job: draw a dataset and write CSV + sidecar + manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeConfig {
    pub dgp: DgpRef,
    pub n: usize,
    pub seed: u64,
    /// Output stem; files are {out}.csv, {out}.dims.json and
    /// {out}.manifest.json. The --out flag overrides.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// `estimate` job: one estimator, one sample, one report JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: DataSource,
    pub contrast: ContrastConfig,
    pub estimator: EstimatorSpec,
    /// Seeds the synthetic draw (if any) and the cross-fit fold shuffle.
    pub seed: u64,
    /// Report path; the --out flag overrides.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if matches!(self.contrast, ContrastConfig::FromDgp)
            && !matches!(self.data, DataSource::Synthetic { .. })
        {
            return Err(Error::validation(
                "contrast kind from_dgp needs a synthetic data source",
            ));
        }
        Ok(())
    }
}

/// `study` job: a replication grid over one discrete DGP plus the
/// enumerated identity checks.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Must resolve to a discrete instance; studies need enumerable oracles.
    pub dgp: DgpRef,
    pub estimator: EstimatorSpec,
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub master_seed: u64,
    /// Trials for the enumerated identity checks; 0 skips them.
    #[serde(default = "default_identity_trials")]
    pub identity_trials: usize,
    /// Output stem; files are {out}.cells.csv and {out}.summary.json.
    /// The --out flag overrides.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_identity_trials() -> usize {
    25
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        // Same grid rules as ReplicationStudy::validate, which cannot run
        // before the DGP file is read.
        self.estimator.validate()?;
        if self.replications == 0 {
            return Err(Error::validation("a study needs replications >= 1"));
        }
        if self.sizes.is_empty() {
            return Err(Error::validation("a study needs at least one sample size"));
        }
        if self.sizes[0] == 0 {
            return Err(Error::validation("sample sizes must be >= 1"));
        }
        if !self.sizes.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::validation("sample sizes must be strictly increasing"));
        }
        Ok(())
    }

    pub fn to_study(&self) -> Result<ReplicationStudy> {
        let dgp = match self.dgp.resolve()? {
            Dgp::Discrete(d) => d,
            Dgp::LinearSem(_) => {
                return Err(Error::validation(
                    "studies run on discrete DGPs only; the SEM has no enumerable study oracle",
                ))
            }
        };
        Ok(ReplicationStudy {
            dgp,
            estimator: self.estimator.clone(),
            sizes: self.sizes.clone(),
            replications: self.replications,
            master_seed: self.master_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sieve_estimator() -> serde_json::Value {
        let game = serde_json::json!({"lambda": 0.0, "gamma": 0.0, "rho": 0.0});
        serde_json::json!({
            "estimator": "dr",
            "nuisance": {
                "family": "sieve",
                "h_hypothesis": "constant",
                "h_critic": "constant",
                "q_hypothesis": "constant",
                "q_critic": "constant",
                "h_game": game,
                "q_game": game,
            }
        })
    }

    #[test]
    fn task_tag_selects_the_variant_and_unknown_keys_are_rejected() {
        let good = serde_json::json!({
            "task": "synthesize",
            "dgp": {"family": "discrete", "name": "unique"},
            "n": 10,
            "seed": 1,
        });
        let cfg: JobConfig = serde_json::from_value(good).unwrap();
        assert_eq!(cfg.task(), "synthesize");

        let bad = serde_json::json!({
            "task": "synthesize",
            "dgp": {"family": "discrete", "name": "unique"},
            "n": 10,
            "seed": 1,
            "extra": true,
        });
        let err = serde_json::from_value::<JobConfig>(bad).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");

        let bad_inner = serde_json::json!({
            "task": "synthesize",
            "dgp": {"family": "discrete", "name": "unique", "typo": 3},
            "n": 10,
            "seed": 1,
        });
        let err = serde_json::from_value::<JobConfig>(bad_inner).unwrap_err().to_string();
        assert!(err.contains("typo"), "{err}");
    }

    #[test]
    fn digest_ignores_whitespace_but_not_content() {
        let compact = r#"{"task":"synthesize","dgp":{"family":"linear_sem"},"n":5,"seed":9}"#;
        let spaced = r#"{
            "task": "synthesize",
            "dgp": { "family": "linear_sem" },
            "n": 5,
            "seed": 9
        }"#;
        let a: JobConfig = serde_json::from_str(compact).unwrap();
        let b: JobConfig = serde_json::from_str(spaced).unwrap();
        assert_eq!(a.digest(), b.digest());

        let other: JobConfig =
            serde_json::from_str(&compact.replace("\"seed\":9", "\"seed\":10")).unwrap();
        assert_ne!(a.digest(), other.digest());
    }

    #[test]
    fn structural_validation_catches_bad_grids_and_contrast_mismatches() {
        let study = serde_json::json!({
            "task": "study",
            "dgp": {"family": "discrete", "name": "unique"},
            "estimator": sieve_estimator(),
            "sizes": [400, 200],
            "replications": 3,
            "master_seed": 1,
        });
        let cfg: JobConfig = serde_json::from_value(study).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("strictly increasing"), "{err}");

        let est = serde_json::json!({
            "task": "estimate",
            "data": {"source": "csv", "path": "d.csv"},
            "contrast": {"kind": "from_dgp"},
            "estimator": sieve_estimator(),
            "seed": 3,
        });
        let cfg: JobConfig = serde_json::from_value(est).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("from_dgp"), "{err}");
    }

    #[test]
    fn study_configs_resolve_to_replication_studies() {
        let study = serde_json::json!({
            "task": "study",
            "dgp": {"family": "discrete", "name": "nonunique"},
            "estimator": sieve_estimator(),
            "sizes": [100, 200],
            "replications": 2,
            "master_seed": 7,
            "identity_trials": 5,
        });
        let cfg: JobConfig = serde_json::from_value(study).unwrap();
        let JobConfig::Study(sc) = &cfg else { panic!("study tag") };
        assert_eq!(sc.identity_trials, 5);
        let rs = sc.to_study().unwrap();
        rs.validate().unwrap();
        assert_eq!(rs.sizes, vec![100, 200]);

        let sem = serde_json::json!({
            "task": "study",
            "dgp": {"family": "linear_sem"},
            "estimator": sieve_estimator(),
            "sizes": [100],
            "replications": 1,
            "master_seed": 7,
        });
        let cfg: JobConfig = serde_json::from_value(sem).unwrap();
        let JobConfig::Study(sc) = &cfg else { panic!("study tag") };
        let err = sc.to_study().unwrap_err().to_string();
        assert!(err.contains("discrete"), "{err}");
    }
}
