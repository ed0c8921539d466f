//! Run configuration: one TOML file, every table optional, unknown keys
//! rejected.

use std::path::Path;

use ecg_mllm::model::ModelConfig;
use ecg_mllm::synth::{Condition, GeneratorConfig};
use ecg_mllm::trainer::{ContrastiveConfig, LmPretrainConfig, StageConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Text the base LM sees before any ECG is involved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmCorpus {
    /// No text pretraining; the LM stays at its random initialization.
    None,
    /// Report sentences only.
    Reports,
    /// Training questions and answers without any ECG context.
    Qa,
    /// Training questions and answers with each ECG slot replaced by the
    /// record's report text.
    Described,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmPretrainSettings {
    pub corpus: LmCorpus,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for LmPretrainSettings {
    fn default() -> Self {
        let d = LmPretrainConfig::default();
        Self { corpus: LmCorpus::Described, lr: d.lr, epochs: d.epochs, batch: d.batch }
    }
}

impl LmPretrainSettings {
    pub fn trainer(&self) -> LmPretrainConfig {
        LmPretrainConfig { lr: self.lr, epochs: self.epochs, batch: self.batch }
    }
}

/// Stage settings where every field may be left out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
}

impl StageSettings {
    fn resolve(&self, base: StageConfig) -> StageConfig {
        StageConfig { lr: self.lr.unwrap_or(base.lr), epochs: self.epochs.unwrap_or(base.epochs), batch: self.batch.unwrap_or(base.batch) }
    }

    fn filled(base: StageConfig) -> Self {
        Self { lr: Some(base.lr), epochs: Some(base.epochs), batch: Some(base.batch) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub test_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasSettings {
    /// When false, stage 1 is skipped and stage 2 starts from the
    /// foundation checkpoint (the biased-only ablation).
    pub enabled: bool,
}

impl Default for DebiasSettings {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub zero_shot_labels: Vec<Condition>,
    pub encode_batch: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { zero_shot_labels: Condition::ABNORMAL.to_vec(), encode_batch: 32 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for every random stream; replaces `generator.seed`.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub lm_pretrain: LmPretrainSettings,
    pub split: SplitSettings,
    pub debias: DebiasSettings,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.normalize();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fills derived and defaulted values so the dump is self-contained.
    pub fn normalize(&mut self) {
        self.generator.seed = self.seed;
        self.stage1 = StageSettings::filled(self.stage1());
        self.stage2 = StageSettings::filled(self.stage2());
    }

    pub fn stage1(&self) -> StageConfig {
        self.stage1.resolve(StageConfig::stage1())
    }

    pub fn stage2(&self) -> StageConfig {
        self.stage2.resolve(StageConfig::stage2())
    }

    /// Every constraint is checked before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: ecg_mllm::error::Error| CliError::Config(e.to_string());
        self.generator.validate().map_err(cfg)?;
        let enc = &self.model.encoder;
        if enc.input_len != self.generator.samples() {
            return Err(CliError::Config(format!(
                "encoder input_len {} != generator samples {} (duration_s × rate_hz)",
                enc.input_len,
                self.generator.samples()
            )));
        }
        if enc.leads != self.generator.leads {
            return Err(CliError::Config(format!("encoder leads {} != generator leads {}", enc.leads, self.generator.leads)));
        }
        self.model.validate().map_err(cfg)?;
        self.contrastive.validate().map_err(cfg)?;
        if self.contrastive.text_width != enc.d_model {
            return Err(CliError::Config(format!(
                "contrastive text_width {} != encoder d_model {}",
                self.contrastive.text_width, enc.d_model
            )));
        }
        self.stage1().validate().map_err(cfg)?;
        self.stage2().validate().map_err(cfg)?;
        let lm = self.lm_pretrain.trainer();
        if lm.batch == 0 || !(lm.lr > 0.0) {
            return Err(CliError::Config("lm_pretrain batch and lr must be positive".into()));
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(CliError::Config(format!("split.test_fraction {} must lie in (0, 1)", self.split.test_fraction)));
        }
        if self.eval.encode_batch == 0 {
            return Err(CliError::Config("eval.encode_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Internal(format!("cannot serialize config: {e}")))
    }

    pub fn digest(&self) -> Result<[u8; 32], CliError> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_only_file_gets_defaults() {
        let c = RunConfig::parse("seed = 7").unwrap();
        let mut d = RunConfig { seed: 7, ..Default::default() };
        d.normalize();
        assert_eq!(c, d);
        assert_eq!(c.generator.seed, 7);
        assert_eq!(c.stage1(), StageConfig::stage1());
        assert_eq!(c.stage2(), StageConfig::stage2());
    }

    #[test]
    fn constraint_violations_name_the_inequality() {
        let e = RunConfig::parse("[model.encoder]\npatch = 30").unwrap_err();
        assert!(e.to_string().contains("T mod p != 0"), "{e}");
        let e = RunConfig::parse("[model.encoder]\npatch = 40").unwrap_err();
        assert!(e.to_string().contains("(T/p) mod 4 != 0"), "{e}");
        let e = RunConfig::parse("[model.lm]\nheads = 5").unwrap_err();
        assert!(e.to_string().contains("divisible"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sead = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[stage1]\nlearning_rate = 1.0"), Err(CliError::Config(_))));
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::parse("seed = 3\n[stage2]\nepochs = 5\n[lm_pretrain]\ncorpus = \"qa\"").unwrap();
        let again = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.stage2().epochs, 5);
        assert_eq!(again.stage2().lr, 2e-5);
    }
}
