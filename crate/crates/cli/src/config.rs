use std::path::{Path, PathBuf};

use pads_core::data::EstimateInit;
use pads_core::{ModelConfig, NoiseKind, ScheduleParams, SolverConfig, SyntheticGenConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Complete run configuration, read from a TOML file. Every section is
/// optional and falls back to its defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub data: DataConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    pub runtime: RuntimeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            schedule: ScheduleParams::default(),
            // Desk-scale training length; optimizer constants keep their defaults.
            train: TrainConfig {
                epochs: 30,
                batch_size: 128,
                ..TrainConfig::default()
            },
            solver: SolverConfig::default(),
            data: DataConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
            runtime: RuntimeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training poses; generated from `synthetic` when absent.
    pub train_file: Option<PathBuf>,
    /// Held-out poses; generated from `synthetic` with `test_seed` when absent.
    pub test_file: Option<PathBuf>,
    pub synthetic: SyntheticGenConfig,
    pub n_test: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_file: None,
            test_file: None,
            synthetic: SyntheticGenConfig::default(),
            n_test: 100,
            test_seed: 1_000_003,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitChoice {
    InverseProj,
    Measurement,
    Random,
}

impl std::str::FromStr for InitChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inverse-proj" => Ok(Self::InverseProj),
            "measurement" => Ok(Self::Measurement),
            "random" => Ok(Self::Random),
            _ => Err(format!("unknown init {s:?} (expected inverse-proj, measurement or random)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub noise_kind: NoiseKind,
    pub intensity: f64,
    pub mask_group: String,
    /// Defaults to `inverse-proj` for estimation and `measurement` otherwise.
    pub init: Option<InitChoice>,
    /// Multiplies the trajectory given to the estimation solver.
    pub depth_scale: f64,
    /// Number of poses for `generate`.
    pub n_generate: usize,
    /// Per-task guidance scales; each replaces `solver.rho` for its task.
    pub rho: TaskRho,
}

/// Guidance scale per task. Estimation residuals are in pixels and 3D
/// residuals in model units, so one scale rarely suits every task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskRho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complete: Option<f64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            noise_kind: NoiseKind::Gaussian,
            intensity: 0.5,
            mask_group: "right_leg".into(),
            init: None,
            depth_scale: 1.0,
            n_generate: 256,
            rho: TaskRho::default(),
        }
    }
}

impl TaskConfig {
    pub fn estimate_init(&self) -> Result<EstimateInit, CliError> {
        match self.init.unwrap_or(InitChoice::InverseProj) {
            InitChoice::InverseProj => Ok(EstimateInit::InverseProjection),
            InitChoice::Random => Ok(EstimateInit::Random),
            InitChoice::Measurement => Err(CliError::Config(
                "task.init: estimation accepts inverse-proj or random".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EvalConfig {
    /// Summary metrics shown by `eval`; empty means all.
    pub metrics: Vec<String>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    /// Worker threads for solving; 0 uses the available parallelism.
    pub workers: usize,
    /// Problems per solver batch.
    pub batch_size: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            batch_size: 25,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &'static str| move |e: pads_core::Error| CliError::Config(format!("{name}: {e}"));
        self.model.validate().map_err(field("model"))?;
        self.schedule.build().map_err(field("schedule"))?;
        self.train.validate().map_err(field("train"))?;
        self.data.synthetic.validate().map_err(field("data.synthetic"))?;
        if !(self.task.intensity >= 0.0) {
            return Err(CliError::Config("task.intensity must be >= 0".into()));
        }
        if !(self.task.depth_scale > 0.0) {
            return Err(CliError::Config("task.depth_scale must be positive".into()));
        }
        if self.runtime.batch_size == 0 {
            return Err(CliError::Config("runtime.batch_size must be >= 1".into()));
        }
        if !(self.solver.rho >= 0.0) {
            return Err(CliError::Config("solver.rho must be >= 0".into()));
        }
        let r = &self.task.rho;
        for (name, v) in [("estimate", r.estimate), ("denoise", r.denoise), ("complete", r.complete)] {
            if v.is_some_and(|v| !(v >= 0.0)) {
                return Err(CliError::Config(format!("task.rho.{name} must be >= 0")));
            }
        }
        if self.solver.n_steps == 0 || self.solver.n_steps > self.solver.truncation
            || self.solver.truncation > self.schedule.steps
        {
            return Err(CliError::Config(format!(
                "solver: need 1 <= n_steps ({}) <= truncation ({}) <= schedule.steps ({})",
                self.solver.n_steps, self.solver.truncation, self.schedule.steps
            )));
        }
        for (name, p) in [("data.train_file", &self.data.train_file), ("data.test_file", &self.data.test_file)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Copy with `solver.rho` replaced by the task's entry in `task.rho`.
    pub fn for_task(&self, task: &str) -> Self {
        let r = &self.task.rho;
        let rho = match task {
            "estimate" => r.estimate,
            "denoise" => r.denoise,
            "complete" => r.complete,
            _ => None,
        };
        let mut cfg = self.clone();
        if let Some(v) = rho {
            cfg.solver.rho = v;
        }
        cfg
    }

    /// Config echo for report headers, one `key = value` per line.
    pub fn echo(&self) -> Vec<String> {
        let text = toml::to_string(self).unwrap_or_default();
        let mut section = String::new();
        let mut out = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = line.trim_matches(|c| c == '[' || c == ']').to_string();
                continue;
            }
            if section.is_empty() {
                out.push(line.to_string());
            } else {
                out.push(format!("{section}.{line}"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.schedule.steps, 1000);
        assert_eq!(cfg.solver.truncation, 450);
        assert_eq!(cfg.solver.rho, 0.003);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.ema_ratio, 0.9999);
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (30, 128));
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("[train]\nbatch_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
        let err = RunConfig::parse("[model]\ndim = 10\nheads = 3\ndepth = 1\n").unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
        let err = RunConfig::parse("[solver]\nwobble = 1\n").unwrap_err();
        assert!(err.to_string().contains("wobble"), "{err}");
        assert!(RunConfig::parse("[data]\ntest_file = \"/nonexistent/poses\"\n").is_err());
    }

    #[test]
    fn task_rho_overrides_solver_rho() {
        let cfg = RunConfig::parse("[solver]\nrho = 0.1\n[task.rho]\ndenoise = 0.5\n").unwrap();
        assert_eq!(cfg.for_task("denoise").solver.rho, 0.5);
        assert_eq!(cfg.for_task("estimate").solver.rho, 0.1);
        assert!(cfg.echo().iter().any(|l| l == "task.rho.denoise = 0.5"));
        assert!(RunConfig::parse("[task.rho]\ncomplete = -1\n").unwrap_err().to_string().contains("task.rho.complete"));
    }

    #[test]
    fn echo_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let lines = cfg.echo();
        assert!(lines.iter().any(|l| l == "solver.rho = 0.003"));
        assert!(lines.iter().any(|l| l.starts_with("output_dir")));
    }
}
