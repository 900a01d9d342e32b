use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainCoarse,
    PretrainFine,
    FinetuneRec,
    FinetuneConv,
    MultiTask,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::PretrainCoarse,
        Stage::PretrainFine,
        Stage::FinetuneRec,
        Stage::FinetuneConv,
        Stage::MultiTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainCoarse => "pretrain_coarse",
            Stage::PretrainFine => "pretrain_fine",
            Stage::FinetuneRec => "finetune_rec",
            Stage::FinetuneConv => "finetune_conv",
            Stage::MultiTask => "multi_task",
        }
    }

    pub fn is_pretraining(self) -> bool {
        matches!(self, Stage::PretrainCoarse | Stage::PretrainFine)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    /// Accepts the short CLI names (`coarse`, `fine`, `rec`, `conv`,
    /// `multi-task`) and the full stage names.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "coarse" | "pretrain_coarse" => Stage::PretrainCoarse,
            "fine" | "pretrain_fine" => Stage::PretrainFine,
            "rec" | "finetune_rec" => Stage::FinetuneRec,
            "conv" | "finetune_conv" => Stage::FinetuneConv,
            "multi_task" | "multitask" | "multi" => Stage::MultiTask,
            _ => return Err(Error::Config(format!("unknown stage {s:?}"))),
        })
    }
}

/// Length of one stage: either a number of optimizer steps or whole passes
/// over the stage's instances. Exactly one must be set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

impl StageBudget {
    pub fn steps(n: usize) -> Self {
        Self { steps: Some(n), epochs: None }
    }

    pub fn epochs(n: usize) -> Self {
        Self { steps: None, epochs: Some(n) }
    }

    fn validate(&self, stage: Stage) -> Result<()> {
        match (self.steps, self.epochs) {
            (Some(0), _) | (_, Some(0)) => Err(Error::Config(format!("{stage}: budget must be positive"))),
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(format!("{stage}: set exactly one of steps or epochs"))),
        }
    }
}

impl Default for StageBudget {
    fn default() -> Self {
        Self::epochs(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBudgets {
    pub pretrain_coarse: StageBudget,
    pub pretrain_fine: StageBudget,
    pub finetune_rec: StageBudget,
    pub finetune_conv: StageBudget,
    pub multi_task: StageBudget,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            pretrain_coarse: StageBudget::default(),
            pretrain_fine: StageBudget::default(),
            finetune_rec: StageBudget::default(),
            finetune_conv: StageBudget::default(),
            multi_task: StageBudget::default(),
        }
    }
}

impl StageBudgets {
    pub fn get(&self, stage: Stage) -> StageBudget {
        match stage {
            Stage::PretrainCoarse => self.pretrain_coarse,
            Stage::PretrainFine => self.pretrain_fine,
            Stage::FinetuneRec => self.finetune_rec,
            Stage::FinetuneConv => self.finetune_conv,
            Stage::MultiTask => self.multi_task,
        }
    }

    pub fn set(&mut self, stage: Stage, budget: StageBudget) {
        match stage {
            Stage::PretrainCoarse => self.pretrain_coarse = budget,
            Stage::PretrainFine => self.pretrain_fine = budget,
            Stage::FinetuneRec => self.finetune_rec = budget,
            Stage::FinetuneConv => self.finetune_conv = budget,
            Stage::MultiTask => self.multi_task = budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global L2 norm the gradient is rescaled to when it exceeds it.
    pub grad_clip_max_norm: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Fine-tuning stages update only their head (`rec.*` or `decoder.*`).
    pub freeze_encoders: bool,
    pub schedule: Vec<Stage>,
    pub budgets: StageBudgets,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            grad_clip_max_norm: 0.1,
            seed: 0,
            shuffle: true,
            freeze_encoders: false,
            schedule: vec![
                Stage::PretrainCoarse,
                Stage::PretrainFine,
                Stage::FinetuneRec,
                Stage::FinetuneConv,
            ],
            budgets: StageBudgets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Oldest context tokens beyond this are dropped.
    pub max_context_len: usize,
    /// Target responses are truncated to this many tokens before `<eos>`.
    pub max_response_len: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            dir: None,
            max_context_len: 256,
            max_response_len: 64,
        }
    }
}

/// Full training configuration, read from YAML with sections `model`,
/// `train` and `data`. Omitted fields take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", t.learning_rate)));
        }
        if !(t.grad_clip_max_norm > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip_max_norm must be > 0, got {}",
                t.grad_clip_max_norm
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for stage in Stage::ALL {
            t.budgets.get(stage).validate(stage)?;
        }
        if self.data.max_context_len == 0 || self.data.max_context_len > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_context_len must be in 1..={}",
                self.model.max_positions
            )));
        }
        if self.data.max_response_len + 1 > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_response_len must be below max_positions {}",
                self.model.max_positions
            )));
        }
        Ok(())
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    /// Small model and short stages for tests and demos.
    pub fn desk() -> Self {
        let model = ModelConfig {
            d_conv: 16,
            d_rec: 16,
            d_contrast: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            ffn_width: 32,
            max_positions: 128,
            ..ModelConfig::default()
        };
        let mut train = TrainSettings {
            batch_size: 8,
            ..TrainSettings::default()
        };
        for stage in Stage::ALL {
            train.budgets.set(stage, StageBudget::steps(50));
        }
        Self {
            model,
            train,
            data: DataSettings {
                dir: None,
                max_context_len: 96,
                max_response_len: 24,
            },
        }
    }
}
