//! Run configuration (TOML).
//!
//! Every section is optional and falls back to the desk-scale defaults.
//! Unknown keys are rejected. Validation reports the offending field by its
//! dotted path.

use crate::data::{SynthConfig, VocabConfig};
use crate::encoders::EncoderDims;
use crate::error::{MateError, Result};
use crate::matryoshka::{PrefixSchedule, StatsGranularity, Strategy};
use crate::objectives::{AlignmentConfig, MainLossConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: EncoderDims,
    pub matryoshka: MatryoshkaConfig,
    pub main_loss: MainLossConfig,
    pub alignment: AlignmentConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub batch: BatchConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatryoshkaConfig {
    /// Number of nested prefixes, including the full dimension.
    pub k: usize,
    pub strategy: Strategy,
    pub stats: StatsGranularity,
}

impl Default for MatryoshkaConfig {
    fn default() -> Self {
        Self {
            k: 3,
            strategy: Strategy::Mate,
            stats: StatsGranularity::Keyword,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    /// Defaults to `floor(0.2 * total_epochs)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
    pub lambda_plateau: f64,
    /// Evaluate after every `eval_every` epochs and after the last one.
    pub eval_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_epochs: 30,
            warmup_epochs: None,
            lambda_plateau: 0.5,
            eval_every: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub keywords_per_batch: usize,
    /// Defaults to one pass over the training utterances.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            keywords_per_batch: 32,
            steps_per_epoch: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub keywords: usize,
    pub speakers: usize,
    pub utterances_per_keyword: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub confusable_fraction: f64,
    pub noise_sd: f64,
    pub speaker_sd: f64,
    pub min_dur: usize,
    pub max_dur: usize,
    pub test_keywords: usize,
    pub test_utterances_per_keyword: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            keywords: 200,
            speakers: 50,
            utterances_per_keyword: 20,
            min_len: 3,
            max_len: 10,
            confusable_fraction: 0.2,
            noise_sd: s.noise_sd,
            speaker_sd: s.speaker_sd,
            min_dur: s.min_dur,
            max_dur: s.max_dur,
            test_keywords: 100,
            test_utterances_per_keyword: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub negative_ratio: usize,
    pub hard_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negative_ratio: 50,
            hard_fraction: 0.3,
        }
    }
}

fn field(name: &str) -> impl Fn(MateError) -> MateError + '_ {
    move |e| match e {
        MateError::Param(m) | MateError::Usage(m) => MateError::config(name, m),
        other => other,
    }
}

fn require(ok: bool, name: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(MateError::config(name, msg))
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| MateError::config("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            MateError::config("<file>", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MateError::Format(e.to_string()))
    }

    pub fn warmup(&self) -> usize {
        self.schedule
            .warmup_epochs
            .unwrap_or(self.schedule.total_epochs / 5)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.batch.steps_per_epoch.unwrap_or_else(|| {
            let pool = self.data.keywords * self.data.utterances_per_keyword;
            pool.div_ceil(2 * self.batch.keywords_per_batch).max(1)
        })
    }

    pub fn prefix_schedule(&self) -> Result<PrefixSchedule> {
        PrefixSchedule::new(self.model.embed, self.matryoshka.k).map_err(field("matryoshka.k"))
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            num_keywords: self.data.keywords,
            num_phonemes: self.model.phonemes,
            feature_dim: self.model.features,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            confusable_fraction: self.data.confusable_fraction,
        }
    }

    pub fn test_vocab_config(&self) -> VocabConfig {
        VocabConfig {
            num_keywords: self.data.test_keywords,
            ..self.vocab_config()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            noise_sd: self.data.noise_sd,
            speaker_sd: self.data.speaker_sd,
            min_dur: self.data.min_dur,
            max_dur: self.data.max_dur,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(field("model"))?;
        self.prefix_schedule()?;
        self.main_loss.validate().map_err(field("main_loss"))?;
        self.alignment.validate().map_err(field("alignment"))?;

        let s = &self.schedule;
        require(s.total_epochs >= 1, "schedule.total_epochs", "must be at least 1")?;
        require(
            s.lambda_plateau >= 0.0 && s.lambda_plateau.is_finite(),
            "schedule.lambda_plateau",
            "must be finite and nonnegative",
        )?;
        require(s.eval_every >= 1, "schedule.eval_every", "must be at least 1")?;

        let o = &self.optimizer;
        require(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr", "must be positive")?;
        require(
            o.weight_decay >= 0.0 && o.weight_decay.is_finite(),
            "optimizer.weight_decay",
            "must be nonnegative",
        )?;
        require((0.0..1.0).contains(&o.beta1), "optimizer.beta1", "must lie in [0, 1)")?;
        require((0.0..1.0).contains(&o.beta2), "optimizer.beta2", "must lie in [0, 1)")?;
        require(o.eps > 0.0, "optimizer.eps", "must be positive")?;

        let b = &self.batch;
        require(b.keywords_per_batch >= 2, "batch.keywords_per_batch", "must be at least 2")?;
        require(
            b.keywords_per_batch <= self.data.keywords,
            "batch.keywords_per_batch",
            "exceeds data.keywords",
        )?;
        require(b.steps_per_epoch != Some(0), "batch.steps_per_epoch", "must be positive")?;

        let d = &self.data;
        self.vocab_config().validate().map_err(field("data"))?;
        self.synth_config().validate().map_err(field("data"))?;
        require(d.speakers >= 1, "data.speakers", "must be at least 1")?;
        require(
            d.utterances_per_keyword >= 2,
            "data.utterances_per_keyword",
            "must be at least 2",
        )?;
        require(d.test_keywords >= 2, "data.test_keywords", "must be at least 2")?;
        require(
            d.test_utterances_per_keyword >= 1,
            "data.test_utterances_per_keyword",
            "must be at least 1",
        )?;
        require(
            d.keywords.saturating_add(d.test_keywords) <= self.vocab_config().capacity(),
            "data.keywords",
            "training plus test keywords exceed the distinct phoneme strings available",
        )?;

        let e = &self.eval;
        require(e.negative_ratio >= 1, "eval.negative_ratio", "must be at least 1")?;
        require(
            (0.0..=1.0).contains(&e.hard_fraction),
            "eval.hard_fraction",
            "must lie in [0, 1]",
        )?;
        Ok(())
    }

    /// SHA-256 over a canonical JSON rendering of the configuration.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canon.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
