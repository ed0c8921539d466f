//! Contrastive encoder pretraining, base-LM text pretraining and the two
//! instruction-tuning stages.

pub mod checkpoint;

use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::debias::check_balanced;
use crate::encoder::{ecg_batch, Encoder};
use crate::error::{Error, Result};
use crate::model::{EcgCache, EcgLlm};
use crate::nn::{param, Block, LayerNorm};
use crate::rng;
use crate::synth::{EcgRecord, QType, QaItem};
use crate::tensor::{Adam, AdamConfig, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::textlm::{Lm, Tokenizer};

pub use checkpoint::{load_checkpoint, save_checkpoint, store_digest, Checkpoint, NamedTensor};

const TAG_CONTRASTIVE: u64 = 20;
const TAG_LM: u64 = 21;
const TAG_STAGE: u64 = 22;

pub const TEXT_PREFIX: &str = "txt";
pub const LOGIT_SCALE: &str = "clip.logit_scale";
const MIN_TAU: f64 = 1e-3;
const MAX_TAU: f64 = 1.0;

// ------------------------------------------------------------- contrastive

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub batch: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub text_depth: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { batch: 32, temperature: 0.07, epochs: 3, lr: 1e-3, text_depth: 2, text_width: 64, text_heads: 4, text_max_len: 32 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("contrastive batch {} must be at least 2", self.batch)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::Config(format!("text width {} is not divisible by heads {}", self.text_width, self.text_heads)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("contrastive lr must be positive".into()));
        }
        Ok(())
    }
}

/// Report encoder: token + position embeddings, a [CLS] slot, bidirectional
/// blocks and a final LayerNorm on [CLS].
#[derive(Clone, Debug)]
pub struct TextTower {
    tok_emb: ParamId,
    pos_emb: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    heads: usize,
    max_len: usize,
}

impl TextTower {
    pub fn init(store: &mut ParamStore, config: &ContrastiveConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.text_width;
        let p = TEXT_PREFIX;
        Ok(Self {
            tok_emb: store.add(format!("{p}.tok_emb"), Tensor::randn(&[vocab, d], 0.02, rng), true)?,
            pos_emb: store.add(format!("{p}.pos_emb"), Tensor::randn(&[config.text_max_len + 1, d], 0.02, rng), true)?,
            cls: store.add(format!("{p}.cls"), Tensor::randn(&[1, d], 0.02, rng), true)?,
            blocks: (0..config.text_depth)
                .map(|l| Block::init(store, &format!("{p}.blocks.{l}"), d, 4, 1.0, rng))
                .collect::<Result<Vec<_>>>()?,
            ln_f: LayerNorm::init(store, &format!("{p}.ln_f"), d)?,
            heads: config.text_heads,
            max_len: config.text_max_len,
        })
    }

    pub fn lookup(store: &ParamStore, config: &ContrastiveConfig) -> Result<Self> {
        let p = TEXT_PREFIX;
        Ok(Self {
            tok_emb: param(store, &format!("{p}.tok_emb"))?,
            pos_emb: param(store, &format!("{p}.pos_emb"))?,
            cls: param(store, &format!("{p}.cls"))?,
            blocks: (0..config.text_depth)
                .map(|l| Block::lookup(store, &format!("{p}.blocks.{l}")))
                .collect::<Result<Vec<_>>>()?,
            ln_f: LayerNorm::lookup(store, &format!("{p}.ln_f"))?,
            heads: config.text_heads,
            max_len: config.text_max_len,
        })
    }

    /// [CLS] summaries `[N×d]` of token sequences, truncated to `max_len`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, texts: &[Vec<usize>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(texts.len());
        let emb = tape.param(store, self.tok_emb);
        let cls = tape.param(store, self.cls);
        let pos = tape.param(store, self.pos_emb);
        for ids in texts {
            let ids = &ids[..ids.len().min(self.max_len)];
            let mut parts = vec![cls];
            if !ids.is_empty() {
                parts.push(tape.gather_rows(emb, ids)?);
            }
            let x = tape.concat_rows(&parts)?;
            let s = ids.len() + 1;
            let p = tape.slice_rows(pos, 0, s)?;
            let mut h = tape.add(x, p)?;
            for b in &self.blocks {
                h = b.forward(tape, store, h, s, self.heads, false)?;
            }
            rows.push(tape.slice_rows(h, 0, 1)?);
        }
        let c = tape.concat_rows(&rows)?;
        self.ln_f.forward(tape, store, c)
    }
}

/// Symmetric InfoNCE over in-batch negatives: rows of `a` and `b` are
/// L2-normalized, similarities scaled by `exp(logit_scale)` (= 1/τ), and the
/// two cross-entropy directions averaged.
pub fn info_nce(tape: &mut Tape<'_>, a: Var, b: Var, logit_scale: Var) -> Result<Var> {
    let n = tape.value(a).rows();
    if n < 2 {
        return Err(Error::Config(format!("contrastive batch of {n} has no negatives")));
    }
    if tape.value(b).rows() != n {
        return Err(Error::Shape("contrastive sides differ in batch size".into()));
    }
    let a = tape.l2_normalize_rows(a);
    let b = tape.l2_normalize_rows(b);
    let s = tape.matmul_t(a, b)?;
    let scale = tape.exp(logit_scale);
    let s = tape.mul_scalar(s, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let l1 = tape.softmax_cross_entropy(s, &targets, usize::MAX)?;
    let st = tape.transpose(s)?;
    let l2 = tape.softmax_cross_entropy(st, &targets, usize::MAX)?;
    let l = tape.add(l1, l2)?;
    Ok(tape.scale(l, 0.5))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub temperature: f64,
}

pub fn add_logit_scale(store: &mut ParamStore, temperature: f64) -> Result<ParamId> {
    store.add(LOGIT_SCALE, Tensor::scalar((1.0 / temperature).ln()), true)
}

/// Trains the encoder, text tower and temperature jointly on ECG-report
/// pairs. Batches are drawn from a seeded shuffle per epoch; a trailing
/// batch with fewer than two pairs is skipped.
pub fn contrastive_pretrain(
    store: &mut ParamStore,
    encoder: &Encoder,
    tower: &TextTower,
    pairs: &[(&EcgRecord, Vec<usize>)],
    config: &ContrastiveConfig,
    seed: u64,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<ContrastiveReport> {
    config.validate()?;
    if pairs.len() < config.batch {
        return Err(Error::Data(format!("{} pairs is fewer than one batch of {}", pairs.len(), config.batch)));
    }
    let scale_id = param(store, LOGIT_SCALE)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut report = ContrastiveReport::default();
    let (lo, hi) = ((1.0 / MAX_TAU).ln(), (1.0 / MIN_TAU).ln());
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[TAG_CONTRASTIVE, epoch as u64]));
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch).filter(|c| c.len() >= 2) {
            let records: Vec<&EcgRecord> = chunk.iter().map(|&i| pairs[i].0).collect();
            let texts: Vec<Vec<usize>> = chunk.iter().map(|&i| pairs[i].1.clone()).collect();
            let x = ecg_batch(&records, &encoder.config)?;
            let (loss, grads, updates) = {
                let mut tape = Tape::new();
                let xv = tape.leaf(x, false);
                let ev = encoder.forward(&mut tape, store, xv, true)?;
                let tv = tower.forward(&mut tape, store, &texts)?;
                let ls = tape.param(store, scale_id);
                let loss = info_nce(&mut tape, ev.cls, tv, ls)?;
                tape.backward(loss)?;
                (tape.value(loss).item(), tape.param_grads(), ev.bn_updates)
            };
            adam.step(store, &grads)?;
            encoder.update_running_stats(store, &updates);
            let s = store.get_mut(scale_id).data_mut();
            s[0] = s[0].clamp(lo, hi);
            report.step_losses.push(loss);
            sum += loss;
            steps += 1;
            progress(epoch, steps, loss);
        }
        report.epoch_losses.push(sum / steps.max(1) as f64);
    }
    report.temperature = (-store.get(scale_id).item()).exp();
    Ok(report)
}

// ---------------------------------------------------------- LM pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmPretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 2, batch: 16 }
    }
}

/// Next-token training of the base LM on token sequences (each starting
/// with `<bos>`; `<eos>` is appended as the final target).
pub fn pretrain_lm(store: &mut ParamStore, lm: &Lm, tok: &Tokenizer, seqs: &[Vec<usize>], config: &LmPretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("LM pretraining needs a positive batch and lr".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut epoch_losses = Vec::new();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[TAG_LM, epoch as u64]));
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(config.batch) {
            let mut total = ParamGrads::new();
            let mut loss_sum = 0.0;
            for &i in chunk {
                let ids = &seqs[i];
                if ids.len() < 2 {
                    continue;
                }
                let mut targets: Vec<usize> = ids[1..].to_vec();
                targets.push(tok.eos());
                let mut tape = Tape::new();
                let x = lm.embed_tokens(&mut tape, store, ids)?;
                let logits = lm.forward(&mut tape, store, x)?;
                let loss = tape.softmax_cross_entropy(logits, &targets, usize::MAX)?;
                tape.backward(loss)?;
                loss_sum += tape.value(loss).item();
                total.accumulate(&tape.param_grads());
            }
            total.scale(1.0 / chunk.len() as f64);
            adam.step(store, &total)?;
            sum += loss_sum / chunk.len() as f64;
            steps += 1;
        }
        epoch_losses.push(sum / steps.max(1) as f64);
    }
    Ok(epoch_losses)
}

// ------------------------------------------------------ instruction stages

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self { lr: 1e-4, epochs: 6, batch: 16 }
    }

    pub fn stage2() -> Self {
        Self { lr: 2e-5, epochs: 2, batch: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("stage batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Answer tokens followed by `<eos>`; errors when the answer is empty.
pub fn answer_ids(tok: &Tokenizer, answer: &str) -> Result<Vec<usize>> {
    let mut ids = tok.encode(answer);
    if ids.is_empty() {
        return Err(Error::Data(format!("answer {answer:?} is empty after tokenization")));
    }
    ids.push(tok.eos());
    Ok(ids)
}

/// Next-token cross-entropy over the answer tokens and `<eos>` only; the
/// prompt positions carry no loss.
pub fn instruction_loss<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, model: &EcgLlm, item: &QaItem, cache: &EcgCache) -> Result<Var> {
    let ans = answer_ids(&model.tok, &item.answer)?;
    let prompt = model.embed_prompt(tape, store, cache, &item.ecg_ids, &item.question)?;
    let p = tape.value(prompt).rows();
    // The final <eos> is only a target, never an input.
    let a = model.lm.embed_tokens(tape, store, &ans[..ans.len() - 1])?;
    let x = tape.concat_rows(&[prompt, a])?;
    let h = model.lm.hidden(tape, store, x)?;
    let positions: Vec<usize> = (p - 1..p - 1 + ans.len()).collect();
    let logits = model.lm.logits_at(tape, store, h, &positions)?;
    tape.softmax_cross_entropy(logits, &ans, usize::MAX)
}

/// Resumable position within a stage. Shuffles are a pure function of
/// `(seed, stage, epoch)`, so this cursor plus the optimizer moments is the
/// complete random state of training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub adam: Adam,
    pub step_losses: Vec<f64>,
}

const STATE_MAGIC: &[u8; 4] = b"TRST";

impl TrainState {
    pub fn new(stage: Stage, seed: u64, config: &StageConfig) -> Self {
        Self { stage, seed, epoch: 0, step: 0, adam: Adam::new(AdamConfig::with_lr(config.lr)), step_losses: Vec::new() }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut b = STATE_MAGIC.to_vec();
        b.push(self.stage.number());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&(self.step as u64).to_le_bytes());
        b.extend_from_slice(&self.adam.steps().to_le_bytes());
        b.extend_from_slice(&(self.step_losses.len() as u64).to_le_bytes());
        for l in &self.step_losses {
            b.extend_from_slice(&l.to_le_bytes());
        }
        b
    }

    pub fn from_blob(blob: &[u8], store: &ParamStore, optimizer: &[(String, Tensor)], config: &StageConfig) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed training state".into());
        if blob.len() < 45 || &blob[..4] != STATE_MAGIC {
            return Err(bad());
        }
        let u = |o: usize| u64::from_le_bytes(blob[o..o + 8].try_into().expect("8 bytes"));
        let stage = Stage::from_number(blob[4])?;
        let n = u(37) as usize;
        if blob.len() != 45 + 8 * n {
            return Err(bad());
        }
        let step_losses = (0..n).map(|i| f64::from_le_bytes(blob[45 + 8 * i..53 + 8 * i].try_into().expect("8 bytes"))).collect();
        Ok(Self {
            stage,
            seed: u(5),
            epoch: u(13) as usize,
            step: u(21) as usize,
            adam: Adam::import(AdamConfig::with_lr(config.lr), u(29), store, optimizer)?,
            step_losses,
        })
    }

    pub fn is_finished(&self, config: &StageConfig) -> bool {
        self.epoch >= config.epochs
    }
}

/// Rejects anything but balanced verify items for stage 1.
pub fn validate_stage_input(stage: Stage, items: &[QaItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Data(format!("{stage} received no items")));
    }
    if stage == Stage::One {
        if let Some(bad) = items.iter().find(|i| i.qtype != QType::Verify) {
            return Err(Error::Data(format!("stage 1 accepts de-biased verify items only; {} is {}", bad.id, bad.qtype)));
        }
        check_balanced(items)?;
    }
    Ok(())
}

/// Names of trainable tensors outside the projection and the adapters.
pub fn unexpected_trainables(store: &ParamStore) -> Vec<String> {
    store
        .iter()
        .filter(|(_, n, _, t)| *t && !(n.starts_with("bridge.") || n.ends_with(".lora_a") || n.ends_with(".lora_b")))
        .map(|(_, n, _, _)| n.to_string())
        .collect()
}

pub fn frozen_digest(store: &ParamStore) -> [u8; 32] {
    store_digest(store, |_, trainable| !trainable)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Runs (or resumes) a stage. `max_steps` stops early, leaving `state`
/// positioned for a later resume. Frozen tensors are verified bitwise
/// unchanged at the end.
pub fn train_stage(
    store: &mut ParamStore,
    model: &EcgLlm,
    config: &StageConfig,
    items: &[QaItem],
    cache: &EcgCache,
    state: &mut TrainState,
    max_steps: Option<usize>,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<StageReport> {
    config.validate()?;
    validate_stage_input(state.stage, items)?;
    let extra = unexpected_trainables(store);
    if !extra.is_empty() {
        return Err(Error::Config(format!("only the projection and LoRA adapters may train; also trainable: {}", extra.join(", "))));
    }
    if !store.iter().any(|(_, _, _, t)| t) {
        return Err(Error::Config("no trainable parameters".into()));
    }
    let before = frozen_digest(store);
    let mut done = 0;
    while state.epoch < config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(state.seed, &[TAG_STAGE, state.stage.number() as u64, state.epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(config.batch).collect();
        while state.step < batches.len() {
            if max_steps.is_some_and(|m| done >= m) {
                return finish(store, before, state, done);
            }
            let chunk = batches[state.step];
            let mut total = ParamGrads::new();
            let mut loss_sum = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let loss = instruction_loss(&mut tape, store, model, &items[i], cache)?;
                tape.backward(loss)?;
                loss_sum += tape.value(loss).item();
                total.accumulate(&tape.param_grads());
            }
            total.scale(1.0 / chunk.len() as f64);
            state.adam.step(store, &total)?;
            let loss = loss_sum / chunk.len() as f64;
            state.step_losses.push(loss);
            state.step += 1;
            done += 1;
            progress(state.epoch, state.step, loss);
        }
        state.epoch += 1;
        state.step = 0;
    }
    finish(store, before, state, done)
}

fn finish(store: &ParamStore, before: [u8; 32], state: &TrainState, steps: usize) -> Result<StageReport> {
    if frozen_digest(store) != before {
        return Err(Error::Integrity("a frozen tensor changed during training".into()));
    }
    Ok(StageReport { epoch_losses: epoch_means(&state.step_losses, state), steps })
}

/// Means of the per-step losses grouped into completed and partial epochs.
fn epoch_means(losses: &[f64], state: &TrainState) -> Vec<f64> {
    let per_epoch = if state.epoch == 0 { losses.len() } else { (losses.len() - state.step) / state.epoch };
    if per_epoch == 0 {
        return Vec::new();
    }
    losses.chunks(per_epoch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Mean instruction loss over items without updating anything.
pub fn mean_loss(store: &ParamStore, model: &EcgLlm, items: &[QaItem], cache: &EcgCache) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Data("no items to score".into()));
    }
    let mut sum = 0.0;
    for item in items {
        let mut tape = Tape::no_grad();
        let l = instruction_loss(&mut tape, store, model, item, cache)?;
        sum += tape.value(l).item();
    }
    Ok(sum / items.len() as f64)
}
