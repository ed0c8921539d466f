//! The assembled ECG multimodal model and a cache of frozen encoder outputs.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{assemble_prompt, MixedSequence, Projection, GROUP};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::synth::EcgRecord;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::textlm::{Lm, LmConfig, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_answer_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), lm: LmConfig::default(), lora_rank: 8, lora_alpha: 16.0, max_answer_tokens: 16 }
    }
}

impl ModelConfig {
    /// Checks every dimension constraint; `lm.vocab` may still be zero.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let n = self.encoder.n_patches();
        if n % GROUP != 0 {
            return Err(Error::Config(format!("(T/p) mod 4 != 0 (T/p={n})")));
        }
        let mut lm = self.lm.clone();
        lm.vocab = lm.vocab.max(5);
        lm.validate()?;
        if self.lora_rank == 0 || self.lora_alpha <= 0.0 {
            return Err(Error::Config("LoRA rank and alpha must be positive".into()));
        }
        Ok(())
    }

    /// Embedded length of one ECG after grouping.
    pub fn ecg_len(&self) -> usize {
        self.encoder.n_patches() / GROUP
    }
}

#[derive(Clone, Debug)]
pub struct EcgLlm {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub proj: Projection,
    pub lm: Lm,
    pub tok: Tokenizer,
}

impl EcgLlm {
    /// Fresh encoder, projection and LM; no adapters yet.
    pub fn init(store: &mut ParamStore, config: &ModelConfig, tok: Tokenizer, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut config = config.clone();
        config.lm.vocab = tok.len();
        config.validate()?;
        let encoder = Encoder::init(store, &config.encoder, rng)?;
        let proj = Projection::init(store, config.encoder.d_model, config.lm.d_model, rng)?;
        let lm = Lm::init(store, &config.lm, rng)?;
        Ok(Self { config, encoder, proj, lm, tok })
    }

    pub fn lookup(store: &ParamStore, config: &ModelConfig, tok: Tokenizer) -> Result<Self> {
        let mut config = config.clone();
        config.lm.vocab = tok.len();
        config.validate()?;
        Ok(Self {
            encoder: Encoder::lookup(store, &config.encoder)?,
            proj: Projection::lookup(store)?,
            lm: Lm::lookup(store, &config.lm)?,
            config,
            tok,
        })
    }

    pub fn inject_lora(&mut self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.lm.inject_lora(store, self.config.lora_rank, self.config.lora_alpha, rng)
    }

    /// Freezes everything except the projection and the adapters.
    pub fn freeze_for_instruction(&self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id);
            let open = name.starts_with("bridge.") || name.ends_with(".lora_a") || name.ends_with(".lora_b");
            store.set_trainable(id, open);
        }
    }

    pub fn prompt(&self, ecg_ids: &[String], question: &str) -> Result<MixedSequence> {
        assemble_prompt(&self.tok, ecg_ids, question)
    }

    /// Prompt embeddings on a tape, with ECG slots filled from the cache.
    pub fn embed_prompt<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, cache: &EcgCache, ecg_ids: &[String], question: &str) -> Result<Var> {
        let seq = self.prompt(ecg_ids, question)?;
        let mut slots = Vec::with_capacity(ecg_ids.len());
        for id in ecg_ids {
            let t = tape.leaf(cache.get(id)?.clone(), false);
            slots.push(self.proj.project_ecg(tape, store, t)?);
        }
        seq.embed(tape, store, &self.lm, &slots)
    }

    /// Prompt embeddings as a plain tensor, for decoding and scoring.
    pub fn prompt_tensor(&self, store: &ParamStore, cache: &EcgCache, ecg_ids: &[String], question: &str) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let v = self.embed_prompt(&mut tape, store, cache, ecg_ids, question)?;
        Ok(tape.value(v).clone())
    }

    /// Greedy answer text.
    pub fn answer(&self, store: &ParamStore, cache: &EcgCache, ecg_ids: &[String], question: &str) -> Result<String> {
        let prefix = self.prompt_tensor(store, cache, ecg_ids, question)?;
        let room = self.config.lm.max_context.saturating_sub(prefix.rows());
        let ids = self.lm.generate(store, &prefix, self.config.max_answer_tokens.min(room), self.tok.eos())?;
        Ok(self.tok.decode(&ids))
    }
}

/// Frozen-encoder outputs `[(n+1)×D]` keyed by record id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EcgCache {
    tokens: BTreeMap<String, Tensor>,
}

impl EcgCache {
    pub fn build(encoder: &Encoder, store: &ParamStore, records: &[EcgRecord], batch: usize) -> Result<Self> {
        let refs: Vec<&EcgRecord> = records.iter().collect();
        let outs = encoder.encode_many(store, &refs, batch)?;
        Ok(Self { tokens: records.iter().zip(outs).map(|(r, o)| (r.id.clone(), o.tokens)).collect() })
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.tokens.get(id).ok_or_else(|| Error::Data(format!("unresolvable ECG id {id}")))
    }

    pub fn insert(&mut self, id: String, tokens: Tensor) {
        self.tokens.insert(id, tokens);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tokens.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
