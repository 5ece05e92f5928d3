//! JSON run configurations.
//!
//! Every command reads one JSON object. Unknown keys are rejected. Omitted
//! keys take the defaults shown by `ldr <command> --print-default-config`.

use std::path::{Path, PathBuf};

use ldr::annealing::AnnealConfig;
use ldr::flow::FlowConfig;
use ldr::metrics::EvalConfig;
use ldr::trainer::{LdReferenceMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides the top-level `seed` of any config.
pub const SEED_ENV: &str = "LDR_SEED";

pub const DEFAULT_LAYERS: usize = 8;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSpec {
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub init_scale: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            clamp: 4.0,
            init_scale: 0.01,
        }
    }
}

impl FlowSpec {
    pub fn to_config(&self, dim: usize) -> FlowConfig {
        let mut c = FlowConfig::new(dim)
            .with_layers(self.layers)
            .with_hidden(self.hidden)
            .with_init_scale(self.init_scale);
        c.clamp = self.clamp;
        c
    }
}

/// Either a CSV file with energy labels or `n` freshly generated samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: Option<PathBuf>,
    pub n: Option<usize>,
    /// Sampler to draw from; defaults to the run's target.
    pub target: Option<String>,
    /// Generation seed; defaults to `1000 + seed`.
    pub seed: Option<u64>,
    pub bias_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub name: Option<String>,
    pub target: String,
    pub seed: u64,
    pub flow: FlowSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Fresh exact samples used for the history's validation NLL.
    pub validation_n: usize,
    pub eval: EvalConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            name: None,
            target: "gmm2".into(),
            seed: 0,
            flow: FlowSpec::default(),
            dataset: DatasetSpec {
                n: Some(500),
                ..DatasetSpec::default()
            },
            train: TrainConfig::default(),
            validation_n: 10_000,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealRun {
    pub name: Option<String>,
    pub target: String,
    pub seed: u64,
    pub flow: FlowSpec,
    pub anneal: AnnealConfig,
    pub eval: EvalConfig,
}

impl Default for AnnealRun {
    fn default() -> Self {
        Self {
            name: None,
            target: "gmm2".into(),
            seed: 0,
            flow: FlowSpec::default(),
            anneal: AnnealConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineRun {
    pub name: Option<String>,
    /// The true target used for importance weights and evaluation.
    pub target: String,
    pub seed: u64,
    pub flow: FlowSpec,
    /// Biased data; generated from `<target>-biased` unless a path is given.
    pub biased: DatasetSpec,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub m_is: usize,
    pub ld_reference: LdReferenceMode,
    pub validation_n: usize,
    pub eval: EvalConfig,
}

impl Default for RefineRun {
    fn default() -> Self {
        Self {
            name: None,
            target: "gmm2".into(),
            seed: 0,
            flow: FlowSpec::default(),
            biased: DatasetSpec {
                n: Some(1000),
                ..DatasetSpec::default()
            },
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            m_is: 10_000,
            ld_reference: LdReferenceMode::Both,
            validation_n: 10_000,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoRun {
    pub name: Option<String>,
    pub target: String,
    pub seed: u64,
    pub flow: FlowSpec,
    pub dataset: DatasetSpec,
    /// GMM components kept in the reference.
    pub modes: Vec<usize>,
    pub train: TrainConfig,
    pub combined_lambda_data: f64,
    pub n_eval: usize,
}

impl Default for DemoRun {
    fn default() -> Self {
        Self {
            name: None,
            target: "gmm2".into(),
            seed: 0,
            flow: FlowSpec::default(),
            dataset: DatasetSpec {
                n: Some(2000),
                ..DatasetSpec::default()
            },
            modes: vec![0, 3],
            train: TrainConfig {
                loss: ldr::objectives::LossConfig::ldr(0.0, 1.0, 1),
                ..TrainConfig::default()
            },
            combined_lambda_data: 0.5,
            n_eval: 100_000,
        }
    }
}

/// Top-level seed shared by all run configs.
pub trait Seeded {
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl Seeded for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
        }
    )*};
}
seeded!(TrainRun, AnnealRun, RefineRun, DemoRun);

/// Checks applied before any work starts.
pub trait Validate {
    fn validate(&self) -> Result<(), CliError>;
}

fn check_flow(flow: &FlowSpec) -> Result<(), CliError> {
    flow.to_config(2).validate().map_err(CliError::from)
}

fn check_target(name: &str) -> Result<(), CliError> {
    ldr::targets::resolve_target::<f64>(name, None)
        .map(|_| ())
        .map_err(CliError::from)
}

impl Validate for TrainRun {
    fn validate(&self) -> Result<(), CliError> {
        check_target(&self.target)?;
        check_flow(&self.flow)?;
        self.train.validate()?;
        Ok(())
    }
}

impl Validate for AnnealRun {
    fn validate(&self) -> Result<(), CliError> {
        check_target(&self.target)?;
        check_flow(&self.flow)?;
        self.anneal.validate()?;
        Ok(())
    }
}

impl Validate for RefineRun {
    fn validate(&self) -> Result<(), CliError> {
        check_target(&self.target)?;
        check_flow(&self.flow)?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.m_is < 2 {
            return Err(CliError::config("m_is must be at least 2"));
        }
        Ok(())
    }
}

impl Validate for DemoRun {
    fn validate(&self) -> Result<(), CliError> {
        check_target(&self.target)?;
        check_flow(&self.flow)?;
        self.train.validate()?;
        if self.train.loss.lambda_data != 0.0 {
            return Err(CliError::config("the LD-only demo requires train.loss.lambda_data = 0"));
        }
        Ok(())
    }
}

/// Reads a config, applies the seed override and returns it with its raw text.
pub fn load<C>(path: &Path) -> Result<(C, String), CliError>
where
    C: for<'de> Deserialize<'de> + Seeded,
{
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: C = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
    if let Some(seed) = seed_override()? {
        *cfg.seed_mut() = seed;
    }
    Ok((cfg, text))
}

pub fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}
