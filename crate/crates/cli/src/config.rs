//! Run configuration: a TOML file with `[data]`, `[phase1]`, `[refine]`, `[eval]`,
//! `[output]` and `[bench]` sections plus a top-level `seed`.

use std::path::{Path, PathBuf};

use oatflow_core::bench::{BenchConfig, TaskSpec, DEFAULT_N_TEST, REFERENCE_N};
use oatflow_core::flows::Phase1Config;
use oatflow_core::oatfm::RefineConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "OATFLOW_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: TaskSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::table()[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_test: usize,
    pub reference_n: usize,
    pub integrator: Integrator,
    /// Tolerances of the adaptive integrator; ignored for RK4.
    pub atol: f64,
    pub rtol: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_test: DEFAULT_N_TEST,
            reference_n: REFERENCE_N,
            integrator: Integrator::Rk4,
            atol: 1e-6,
            rtol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run seed. When set it replaces every section's own seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub phase1: Phase1Config,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Parses TOML text. Relative output paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies `OATFLOW_SEED` if set.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml(&text, base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_from_env()? {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.phase1.seed = seed;
        self.refine.seed = seed;
        self.eval.seed = seed;
        self.bench.seed = seed;
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        self.output.dir = dir;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |section: &str, e: oatflow_core::Error| CliError::Config(format!("[{section}] {e}"));
        self.phase1.validate().map_err(|e| field("phase1", e))?;
        self.refine.validate().map_err(|e| field("refine", e))?;
        if self.eval.n_test == 0 {
            return Err(CliError::Config("[eval] n_test must be at least 1".into()));
        }
        if self.eval.reference_n == 0 {
            return Err(CliError::Config("[eval] reference_n must be at least 1".into()));
        }
        if !(self.eval.atol > 0.0 && self.eval.rtol > 0.0) {
            return Err(CliError::Config("[eval] atol and rtol must be positive".into()));
        }
        if self.bench.trials == 0 {
            return Err(CliError::Config("[bench] trials must be at least 1".into()));
        }
        if self.bench.control_batches < self.phase1.n_batches {
            return Err(CliError::Config(format!(
                "[bench] control_batches ({}) is below [phase1] n_batches ({})",
                self.bench.control_batches, self.phase1.n_batches
            )));
        }
        let parent = self.output.dir.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(p) = parent {
            if !p.is_dir() {
                return Err(CliError::Config(format!(
                    "[output] dir {}: parent directory does not exist",
                    self.output.dir.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use oatflow_core::model::TargetPolicy;
    use oatflow_core::oatfm::CouplingSolver;

    #[test]
    fn defaults_from_empty_file() {
        let cfg = RunConfig::from_toml("", Path::new("/tmp")).unwrap();
        assert_eq!(cfg.data.task.name(), "8gs→moons");
        assert_eq!(cfg.phase1, Phase1Config::default());
        assert_eq!(cfg.output.dir, Path::new("/tmp/runs"));
    }

    #[test]
    fn full_sections_parse() {
        let text = r#"
seed = 9

[data]
task = "N->scurve"

[phase1]
method = "otcfm"
n_batches = 10

[refine]
alpha = 0.5
target_policy = { kind = "ema", decay = 0.99 }
coupling_solver = { kind = "sinkhorn", epsilon = 0.1, max_iters = 50, tol = 1e-6 }

[eval]
integrator = "dopri5"

[bench]
tasks = ["8gs->moons"]
trials = 2
"#;
        let cfg = RunConfig::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(cfg.phase1.seed, 9);
        assert_eq!(cfg.refine.seed, 9);
        assert_eq!(cfg.bench.seed, 9);
        assert_eq!(cfg.refine.target_policy, TargetPolicy::Ema { decay: 0.99 });
        assert!(matches!(cfg.refine.coupling_solver, CouplingSolver::Sinkhorn { .. }));
        assert_eq!(cfg.eval.integrator, Integrator::Dopri5);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap(), Path::new(".")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("[phase1]\nlearning_rate = 0.1\n", "learning_rate"),
            ("[colour]\nx = 1\n", "colour"),
            ("[refine]\nalpah = 0.5\n", "alpah"),
        ] {
            let err = RunConfig::from_toml(text, Path::new(".")).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn validation_names_the_section() {
        let cfg = RunConfig::from_toml("[refine]\nalpha = 1.5\n", Path::new(".")).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("[refine]") && err.contains("alpha"), "{err}");
    }
}
