use std::fs;
use std::path::{Path, PathBuf};

use cfgmoe::explain::{ExplainConfig, IgRule};
use cfgmoe::graph::SplitSpec;
use cfgmoe::model::{ModelConfig, StdMode};
use cfgmoe::train::{Scenario, TrainConfig};
use cfgmoe::xai::default_sparsity_grid;
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest written by `synth` or by hand.
    pub dataset: Option<PathBuf>,
    /// Autoencoder used to compress 439-wide node features before training.
    pub autoencoder: Option<PathBuf>,
    /// Model to read; defaults to `<out_dir>/model.json`.
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: None,
            autoencoder: None,
            model: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: usize,
    pub layers: usize,
    pub std_mode: StdMode,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelShape {
            hidden: d.hidden,
            layers: d.layers,
            std_mode: d.std_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Ignored for scenarios without load balancing.
    pub lb_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            dropout: d.dropout,
            lb_weight: d.lb_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the split, the model initialisation and the training order.
    pub seed: u64,
    pub paths: Paths,
    pub scenario: Scenario,
    pub model: ModelShape,
    pub train: TrainSection,
    pub train_fraction: f64,
    pub explain: ExplainConfig,
    pub sparsity_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            scenario: Scenario::Top2Lb,
            model: ModelShape::default(),
            train: TrainSection::default(),
            train_fraction: 0.8,
            explain: ExplainConfig::default(),
            sparsity_grid: default_sparsity_grid(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_input(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if let Some(s) = self.sparsity_grid.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return bad(format!("sparsity {s} outside [0, 1]"));
        }
        if self.explain.steps == 0 {
            return bad("explain.steps must be at least 1".into());
        }
        if self.model.hidden == 0 || self.model.layers == 0 {
            return bad("model.hidden and model.layers must be positive".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            dropout: t.dropout,
            lb_weight: if self.scenario.uses_lb() { t.lb_weight } else { 0.0 },
            seed: self.seed,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.model.hidden,
            layers: self.model.layers,
            variant: self.scenario.variant(),
            std_mode: self.model.std_mode,
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seed,
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths
            .model
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("model.json"))
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.paths
            .dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset manifest given (paths.dataset or --dataset)".into()))
    }

    pub fn sha256(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Flags shared by the config-driven stages. Flags win over the file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset manifest
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Autoencoder parameters applied to 439-wide node features
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    /// Model file (default: <out-dir>/model.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// uniform, temperature, top1, top2-nolb or top2-lb
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Integrated-gradients steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Plain midpoint quadrature instead of the squared-midpoint default
    #[arg(long)]
    pub midpoint: bool,
    /// Keep raw per-expert scores instead of max-abs normalising them
    #[arg(long)]
    pub no_normalize: bool,
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    Scenario::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
        format!("unknown scenario `{s}`; expected one of {}", names.join(", "))
    })
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.dataset {
            c.paths.dataset = Some(v.clone());
        }
        if let Some(v) = &self.autoencoder {
            c.paths.autoencoder = Some(v.clone());
        }
        if let Some(v) = &self.model {
            c.paths.model = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            c.paths.out_dir = v.clone();
        }
        if let Some(v) = self.scenario {
            c.scenario = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.hidden {
            c.model.hidden = v;
        }
        if let Some(v) = self.layers {
            c.model.layers = v;
        }
        if let Some(v) = self.steps {
            c.explain.steps = v;
        }
        if self.midpoint {
            c.explain.rule = IgRule::Midpoint;
        }
        if self.no_normalize {
            c.explain.normalize = false;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a required input, reporting a missing file by path.
pub fn read_input(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}
