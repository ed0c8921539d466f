//! Word-level tokenizer and a small decoder-only language model with
//! optional LoRA adapters on the query and key projections.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param, Block, LayerNorm, Lora};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "lm";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
const PUNCT: &[char] = &['.', ',', '?', ':', ';', '!'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for raw in lower.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

impl Tokenizer {
    /// Specials take ids 0..4, then words in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let vocab: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_vocab(vocab).expect("built vocabulary is valid")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < 4 || vocab[..4] != [PAD, BOS, EOS, UNK] {
            return Err(Error::Data("vocabulary must start with <pad>, <bos>, <eos>, <unk>".into()));
        }
        let mut index = HashMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary entry {w:?} at line {}", i + 1)));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn unk(&self) -> usize {
        3
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map_or(UNK, String::as_str)
    }

    /// Lowercases, splits on whitespace and punctuation; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w).unwrap_or(self.unk())).collect()
    }

    /// Joins tokens with single spaces, attaching punctuation to the
    /// preceding word. Special tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id <= self.unk() && id != self.unk() {
                continue;
            }
            let w = self.token(id);
            let punct = w.chars().count() == 1 && w.starts_with(PUNCT);
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.vocab.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_vocab(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    /// Filled from the tokenizer when zero.
    pub vocab: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_context: usize,
    pub ffn_mult: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { vocab: 0, d_model: 64, depth: 4, heads: 4, max_context: 256, ffn_mult: 4 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 5 {
            return Err(Error::Config(format!("vocabulary size {} is too small", self.vocab)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.depth == 0 || self.max_context == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm {
    pub config: LmConfig,
    tok_emb: crate::tensor::ParamId,
    pos_emb: crate::tensor::ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: crate::tensor::ParamId,
}

fn lora_name(layer: usize, which: &str, part: &str) -> String {
    format!("{PREFIX}.blocks.{layer}.attn.{which}.lora_{part}")
}

impl Lm {
    pub fn init(store: &mut ParamStore, config: &LmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = store.add(format!("{PREFIX}.tok_emb"), Tensor::randn(&[config.vocab, d], 0.02, rng), true)?;
        let pos_emb = store.add(format!("{PREFIX}.pos_emb"), Tensor::randn(&[config.max_context, d], 0.02, rng), true)?;
        let blocks = (0..config.depth)
            .map(|l| Block::init(store, &format!("{PREFIX}.blocks.{l}"), d, config.ffn_mult, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::init(store, &format!("{PREFIX}.ln_f"), d)?;
        let head = store.add(format!("{PREFIX}.head.w"), Tensor::randn(&[config.vocab, d], 0.02, rng), true)?;
        Ok(Self { config: config.clone(), tok_emb, pos_emb, blocks, ln_f, head })
    }

    /// Rebinds to parameters already in `store`, including any adapters.
    pub fn lookup(store: &ParamStore, config: &LmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            tok_emb: param(store, &format!("{PREFIX}.tok_emb"))?,
            pos_emb: param(store, &format!("{PREFIX}.pos_emb"))?,
            blocks: (0..config.depth)
                .map(|l| Block::lookup(store, &format!("{PREFIX}.blocks.{l}")))
                .collect::<Result<Vec<_>>>()?,
            ln_f: LayerNorm::lookup(store, &format!("{PREFIX}.ln_f"))?,
            head: param(store, &format!("{PREFIX}.head.w"))?,
        })
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.lora_q.is_some() || b.lora_k.is_some())
    }

    /// Adds rank-`r` adapters to every query and key projection, freezes
    /// the base model, and marks the adapters trainable. `B` starts at zero.
    pub fn inject_lora(&mut self, store: &mut ParamStore, r: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.has_lora() || store.id(&lora_name(0, "q", "a")).is_some() {
            return Err(Error::DoubleInjection);
        }
        if r == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        store.set_trainable_prefix(&format!("{PREFIX}."), false);
        let d = self.config.d_model;
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for which in ["q", "k"] {
                let a = store.add(lora_name(l, which, "a"), Tensor::randn(&[r, d], 1.0 / (d as f64).sqrt(), rng), true)?;
                let b = store.add(lora_name(l, which, "b"), Tensor::zeros(&[d, r]), true)?;
                store.add(lora_name(l, which, "alpha"), Tensor::scalar(alpha), false)?;
                let lora = Some(Lora { a, b, scale: alpha / r as f64 });
                if which == "q" {
                    block.lora_q = lora;
                } else {
                    block.lora_k = lora;
                }
            }
        }
        Ok(())
    }

    pub fn embed_tokens<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(bad) = ids.iter().find(|i| **i >= self.config.vocab) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        let e = tape.param(store, self.tok_emb);
        tape.gather_rows(e, ids)
    }

    /// Final hidden states `[S×d]` of an embedded sequence.
    pub fn hidden<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let s = tape.value(x).rows();
        if s == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if s > self.config.max_context {
            return Err(Error::ContextOverflow(format!("sequence of {s} exceeds context {}", self.config.max_context)));
        }
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.slice_rows(pos, 0, s)?;
        let mut h = tape.add(x, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, s, self.config.heads, true)?;
        }
        self.ln_f.forward(tape, store, h)
    }

    /// Logits `[P×V]` at the given positions of `hidden`.
    pub fn logits_at<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, hidden: Var, positions: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, positions)?;
        let w = tape.param(store, self.head);
        tape.matmul_t(h, w)
    }

    /// Logits at every position of an embedded sequence.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden(tape, store, x)?;
        let all: Vec<usize> = (0..tape.value(h).rows()).collect();
        self.logits_at(tape, store, h, &all)
    }

    /// Greedy decoding after an embedded prefix `[S×d]`; stops at `<eos>`.
    pub fn generate(&self, store: &ParamStore, prefix: &Tensor, max_new_tokens: usize, eos: usize) -> Result<Vec<usize>> {
        let s = prefix.rows();
        if s + max_new_tokens > self.config.max_context {
            return Err(Error::ContextOverflow(format!(
                "prompt of {s} plus {max_new_tokens} new tokens exceeds context {}",
                self.config.max_context
            )));
        }
        let mut out = Vec::new();
        let mut seq = prefix.clone();
        for _ in 0..max_new_tokens {
            let mut tape = Tape::no_grad();
            let x = tape.leaf(seq.clone(), false);
            let h = self.hidden(&mut tape, store, x)?;
            let last = tape.value(h).rows() - 1;
            let logits = self.logits_at(&mut tape, store, h, &[last])?;
            let next = argmax(tape.value(logits).data());
            if next == eos {
                break;
            }
            out.push(next);
            let e = store.get(self.tok_emb).row(next).to_vec();
            let mut data = seq.into_data();
            data.extend(e);
            seq = Tensor::new(vec![s + out.len(), self.config.d_model], data)?;
        }
        Ok(out)
    }

    /// Log-probabilities of single-token candidates at the position after
    /// the prefix.
    pub fn answer_token_logprobs(&self, store: &ParamStore, prefix: &Tensor, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(prefix.clone(), false);
        let h = self.hidden(&mut tape, store, x)?;
        let last = tape.value(h).rows() - 1;
        let logits = self.logits_at(&mut tape, store, h, &[last])?;
        let z = tape.value(logits).data();
        let lse = log_sum_exp(z);
        candidates
            .iter()
            .map(|&c| z.get(c).map(|v| v - lse).ok_or_else(|| Error::Shape(format!("candidate id {c} outside vocabulary"))))
            .collect()
    }

    /// Embedding rows for token ids, outside any tape.
    pub fn token_embeddings(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let e = store.get(self.tok_emb);
        let mut data = Vec::with_capacity(ids.len() * self.config.d_model);
        for &i in ids {
            if i >= self.config.vocab {
                return Err(Error::Shape(format!("token id {i} outside vocabulary")));
            }
            data.extend_from_slice(e.row(i));
        }
        Tensor::new(vec![ids.len(), self.config.d_model], data)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `logp(yes) − logp(no)` for a prefix; both candidates must be single tokens.
pub fn answer_token_scores(lm: &Lm, store: &ParamStore, tok: &Tokenizer, prefix: &Tensor, candidates: &[&str]) -> Result<Vec<f64>> {
    let ids = candidates
        .iter()
        .map(|c| match tok.encode(c).as_slice() {
            [id] if *id != tok.unk() => Ok(*id),
            _ => Err(Error::Data(format!("candidate {c:?} is not a single known token"))),
        })
        .collect::<Result<Vec<_>>>()?;
    lm.answer_token_logprobs(store, prefix, &ids)
}

/// Copy of `store` with every adapter folded into its base weight,
/// `W' = W + (α/r)·B·A`, and the adapter tensors removed.
pub fn merge_lora(store: &ParamStore, lm: &Lm) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    let mut merged: HashMap<crate::tensor::ParamId, Tensor> = HashMap::new();
    for block in &lm.blocks {
        for (lora, lin) in [(&block.lora_q, &block.wq), (&block.lora_k, &block.wk)] {
            if let Some(l) = lora {
                let ba = store.get(l.b).matmul(store.get(l.a))?;
                let mut w = store.get(lin.w).clone();
                for (x, d) in w.data_mut().iter_mut().zip(ba.data()) {
                    *x += l.scale * d;
                }
                merged.insert(lin.w, w);
            }
        }
    }
    for (id, name, value, trainable) in store.iter() {
        if name.contains(".lora_") {
            continue;
        }
        out.add(name, merged.remove(&id).unwrap_or_else(|| value.clone()), trainable)?;
    }
    Ok(out)
}
