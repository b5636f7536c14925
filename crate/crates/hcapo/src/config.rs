//! TOML run configuration and environment files.
//!
//! A run config mirrors [`TrainConfig`]. The `[env]` table picks a builtin
//! environment by `kind`, points at an environment file, or spells the
//! environment out inline:
//!
//! ```toml
//! seed = 7
//! iterations = 200
//! group_size = 8
//! groups_per_iter = 4
//! metrics_path = "metrics.csv"
//!
//! [env]
//! kind = "bottleneck"
//! pre_chain_len = 3
//! post_chain_len = 1
//! distractor_count = 4
//!
//! [advantage]
//! omega = 1.0
//! norm_scope = "global"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use hcapo_core::advantage::{AdvantageConfig, NormScope};
use hcapo_core::env::{self, EnvSpec, StateId, TokenAction};
use hcapo_core::hindsight::HindsightConfig;
use hcapo_core::optimizer::OptimizerConfig;
use hcapo_core::trainer::{HindsightSource, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::IoError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub env: EnvSection,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    #[serde(default = "defaults::groups_per_iter")]
    pub groups_per_iter: usize,
    #[serde(default = "defaults::invalid_mass")]
    pub invalid_mass: f64,
    #[serde(default)]
    pub hindsight_source: SourceName,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    #[serde(default)]
    pub hindsight: HindsightSection,
    #[serde(default)]
    pub advantage: AdvantageSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

mod defaults {
    pub fn seed() -> u64 {
        0
    }
    pub fn iterations() -> usize {
        200
    }
    pub fn group_size() -> usize {
        8
    }
    pub fn groups_per_iter() -> usize {
        4
    }
    pub fn invalid_mass() -> f64 {
        0.2
    }
    pub fn zero() -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SourceName {
    #[default]
    Oracle,
    Policy,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvSection {
    Chain { length: usize },
    Bottleneck { pre_chain_len: usize, post_chain_len: usize, distractor_count: usize },
    Multistage { stages: usize },
    /// Environment file, resolved relative to the run config.
    File { path: PathBuf },
    Inline(EnvFile),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct HindsightSection {
    pub sharpen_temp: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub discount: f64,
    pub smooth_alpha: f64,
    pub smoothing: bool,
}

impl Default for HindsightSection {
    fn default() -> Self {
        let d = HindsightConfig::default();
        Self {
            sharpen_temp: d.sharpen_temp,
            clip_min: d.clip_min,
            clip_max: d.clip_max,
            discount: d.discount,
            smooth_alpha: d.smooth_alpha,
            smoothing: d.smoothing_enabled,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeName {
    #[default]
    Global,
    PerStep,
}

impl From<ScopeName> for NormScope {
    fn from(s: ScopeName) -> Self {
        match s {
            ScopeName::Global => NormScope::GlobalCrossState,
            ScopeName::PerStep => NormScope::PerTimestep,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageSection {
    pub omega: f64,
    pub norm_scope: ScopeName,
    pub std_floor: f64,
    pub mask: bool,
}

impl Default for AdvantageSection {
    fn default() -> Self {
        let d = AdvantageConfig::default();
        Self { omega: d.omega, norm_scope: ScopeName::Global, std_floor: d.std_floor, mask: d.mask_enabled }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            clip_eps: d.clip_eps,
            kl_coeff: d.kl_coeff,
            learning_rate: d.learning_rate,
            epochs_per_batch: d.epochs_per_batch,
        }
    }
}

/// Tabular environment on disk.
///
/// ```toml
/// state_count = 3
/// vocabulary = 3
/// max_action_len = 2
/// max_steps = 6
/// bottleneck_state = 1
/// rewards = [{ state = 2, reward = 10.0 }]
/// transitions = [
///   { from = 0, action = [1, 0], to = 1 },
///   { from = 1, action = [2, 0], to = 2 },
/// ]
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub state_count: usize,
    pub vocabulary: usize,
    pub max_action_len: usize,
    pub max_steps: usize,
    #[serde(default = "defaults::zero")]
    pub initial_state: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_state: Option<usize>,
    #[serde(default)]
    pub invalid_penalty: f64,
    pub rewards: Vec<RewardEntry>,
    pub transitions: Vec<TransitionEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RewardEntry {
    pub state: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub from: usize,
    pub action: Vec<u32>,
    pub to: usize,
}

impl EnvFile {
    pub fn to_spec(&self) -> Result<EnvSpec, IoError> {
        let mut spec = EnvSpec::new(self.state_count, self.vocabulary, self.max_action_len, self.max_steps)
            .with_initial_state(StateId(self.initial_state))
            .with_invalid_penalty(self.invalid_penalty);
        if let Some(b) = self.bottleneck_state {
            spec = spec.with_bottleneck(StateId(b));
        }
        for r in &self.rewards {
            spec = spec.with_terminal(StateId(r.state), r.reward);
        }
        for t in &self.transitions {
            let action = TokenAction::new(t.action.clone())?;
            spec = spec.with_transition(StateId(t.from), action, StateId(t.to));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_spec(spec: &EnvSpec) -> Self {
        Self {
            state_count: spec.state_count(),
            vocabulary: spec.vocabulary_size(),
            max_action_len: spec.max_action_len(),
            max_steps: spec.max_steps(),
            initial_state: spec.initial_state().0,
            bottleneck_state: spec.bottleneck_state().map(|s| s.0),
            invalid_penalty: spec.invalid_penalty(),
            rewards: spec.rewards().iter().map(|(s, &r)| RewardEntry { state: s.0, reward: r }).collect(),
            transitions: spec
                .transitions()
                .iter()
                .map(|((from, a), to)| TransitionEntry { from: from.0, action: a.tokens().to_vec(), to: to.0 })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = read(path)?;
        toml::from_str(&text).map_err(|e| IoError::Parse { path: path.to_owned(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> Result<String, IoError> {
        toml::to_string(self).map_err(|e| IoError::Parse { path: PathBuf::new(), message: e.to_string() })
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read { path: path.to_owned(), source })
}

/// A parsed run config with its environment resolved.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub metrics_path: Option<PathBuf>,
}

impl RunFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Parse { path: origin.to_owned(), message: e.to_string() })
    }

    /// Builds the training config. `base_dir` anchors relative paths.
    pub fn resolve(&self, base_dir: &Path) -> Result<RunConfig, IoError> {
        let env = match &self.env {
            EnvSection::Chain { length } => env::make_chain_env(*length)?,
            EnvSection::Bottleneck { pre_chain_len, post_chain_len, distractor_count } => {
                env::make_bottleneck_env(*pre_chain_len, *post_chain_len, *distractor_count)?
            }
            EnvSection::Multistage { stages } => env::make_multistage_env(*stages)?,
            EnvSection::File { path } => EnvFile::load(&base_dir.join(path))?.to_spec()?,
            EnvSection::Inline(file) => file.to_spec()?,
        };
        let h = &self.hindsight;
        let a = &self.advantage;
        let o = &self.optimizer;
        let train = TrainConfig {
            env,
            group_size: self.group_size,
            groups_per_iter: self.groups_per_iter,
            iterations: self.iterations,
            hindsight: HindsightConfig {
                sharpen_temp: h.sharpen_temp,
                clip_min: h.clip_min,
                clip_max: h.clip_max,
                discount: h.discount,
                smooth_alpha: h.smooth_alpha,
                smoothing_enabled: h.smoothing,
            },
            advantage: AdvantageConfig {
                omega: a.omega,
                norm_scope: a.norm_scope.into(),
                std_floor: a.std_floor,
                mask_enabled: a.mask,
            },
            optimizer: OptimizerConfig {
                clip_eps: o.clip_eps,
                kl_coeff: o.kl_coeff,
                learning_rate: o.learning_rate,
                epochs_per_batch: o.epochs_per_batch,
            },
            seed: self.seed,
            hindsight_source: match self.hindsight_source {
                SourceName::Oracle => HindsightSource::OraclePosterior,
                SourceName::Policy => HindsightSource::PolicyRows,
            },
            invalid_mass: self.invalid_mass,
        };
        train.validate()?;
        let metrics_path = self.metrics_path.as_ref().map(|p| base_dir.join(p));
        Ok(RunConfig { train, metrics_path })
    }
}

/// Reads and resolves a run config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = read(path)?;
    let file = RunFile::parse(&text, path)?;
    file.resolve(path.parent().unwrap_or(Path::new(".")))
}
