//! File-based batch pipeline: simulate, preprocess, window, train, ablate,
//! analyze, stats and report, all driven by one [`PipelineConfig`].

mod stages;
mod store;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{AlignMode, UMethod, WelchConfig};
use crate::model::{ModelConfig, TrainConfig, Variant};
use crate::preprocess::PreprocessConfig;
use crate::signal::{TaskKind, WindowConfig};
use crate::synth::SimulationConfig;

pub use stages::{run_stage, StageOutcome, BUNDLE_FIGURES};
pub use store::{file_digest, RunRecord, StageRecord};

pub const SEED_ENV: &str = "OCUTIME_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Preprocess,
    Window,
    Train,
    Ablate,
    Analyze,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Simulate,
        Stage::Preprocess,
        Stage::Window,
        Stage::Train,
        Stage::Ablate,
        Stage::Analyze,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Preprocess => "preprocess",
            Stage::Window => "window",
            Stage::Train => "train",
            Stage::Ablate => "ablate",
            Stage::Analyze => "analyze",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn prerequisites(self, external_input: bool) -> &'static [Stage] {
        match self {
            Stage::Simulate => &[],
            Stage::Preprocess if external_input => &[],
            Stage::Preprocess => &[Stage::Simulate],
            Stage::Window => &[Stage::Preprocess],
            Stage::Train | Stage::Ablate => &[Stage::Window],
            Stage::Analyze => &[Stage::Train],
            Stage::Stats => &[Stage::Analyze],
            Stage::Report => &[Stage::Preprocess, Stage::Window, Stage::Train, Stage::Ablate, Stage::Analyze, Stage::Stats],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Root for every stage's outputs.
    pub output_dir: PathBuf,
    /// Existing dataset (manifest tree). Defaults to the simulated `raw/` tree.
    pub input_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("ocutime-run"),
            input_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Validity threshold on Pearson r between prediction and target.
    pub tau: f64,
    /// Use `r > tau` instead of `r >= tau`.
    pub strict_gate: bool,
    pub dtw_radius: usize,
    /// z-normalize feature and target before DTW.
    pub znormalize: bool,
    pub align: AlignMode,
    /// Cross-correlation search range in samples.
    pub max_lag: usize,
    pub welch: WelchConfig,
    pub alpha: f64,
    pub u_method: UMethod,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            strict_gate: false,
            dtw_radius: 50,
            znormalize: true,
            align: AlignMode::Mean,
            max_lag: 128,
            welch: WelchConfig::default(),
            alpha: 0.05,
            u_method: UMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Tasks carried through windowing, training and analysis.
    pub tasks: Vec<TaskKind>,
    pub paths: PathsConfig,
    pub simulation: SimulationConfig,
    pub preprocess: PreprocessConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub metrics: MetricsConfig,
    /// Write RDWT coefficient dumps of the first preprocessed trial.
    pub dump_rdwt: bool,
    /// Write the band-pass second-order sections.
    pub dump_filter: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: TaskKind::ALL.to_vec(),
            paths: PathsConfig::default(),
            simulation: SimulationConfig::default(),
            preprocess: PreprocessConfig::default(),
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            metrics: MetricsConfig::default(),
            dump_rdwt: false,
            dump_filter: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.paths.output_dir.is_relative() {
            cfg.paths.output_dir = base.join(&cfg.paths.output_dir);
        }
        if let Some(p) = cfg.paths.input_dir.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `OCUTIME_SEED` (when set) and then an explicit seed.
    pub fn apply_seed_overrides(&mut self, cli_seed: Option<u64>) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        if let Some(s) = cli_seed {
            self.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks selected".into()));
        }
        self.simulation.validate()?;
        self.preprocess.bandpass.validate(self.preprocess.target_fs)?;
        if self.window.win == 0 || self.window.stride == 0 || self.window.span < self.window.win {
            return Err(Error::Config(format!("invalid window geometry {:?}", self.window)));
        }
        if self.model.window != self.window.win || self.model.output_len != self.window.win {
            return Err(Error::Config(format!(
                "model window {} / output {} must equal the {}-sample data window",
                self.model.window, self.model.output_len, self.window.win
            )));
        }
        if (self.model.fs - self.preprocess.target_fs).abs() > 1e-9 {
            return Err(Error::Config("model fs must equal the preprocessing target rate".into()));
        }
        self.model.validate()?;
        if !(self.metrics.tau.is_finite() && (-1.0..=1.0).contains(&self.metrics.tau)) {
            return Err(Error::Config(format!("tau {} outside [-1, 1]", self.metrics.tau)));
        }
        if !(self.metrics.alpha > 0.0 && self.metrics.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.metrics.alpha)));
        }
        if self.metrics.max_lag >= self.window.win {
            return Err(Error::Config("max_lag must be shorter than the window".into()));
        }
        if self.ablation.variants.is_empty() {
            return Err(Error::Config("ablation needs at least one variant".into()));
        }
        Ok(())
    }

    /// Digest of every setting that can change an output (paths excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn out(&self) -> &Path {
        &self.paths.output_dir
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.paths.input_dir.clone().unwrap_or_else(|| self.out().join("raw"))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::StageOrder { .. } => 3,
        Error::Numeric { .. } => 4,
        Error::StaleInput { .. } => 6,
        _ => 1,
    }
}

/// Exit code for a completed stage that produced no usable results.
pub const EXIT_EMPTY_RESULT: i32 = 5;
