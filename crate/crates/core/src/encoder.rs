//! ECG encoder: convolutional stem, temporal patches, pre-LN transformer
//! with a [CLS] summary token.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param, Block, LayerNorm, Linear};
use crate::synth::{minmax_normalize, EcgRecord};
use crate::tensor::{BatchNormMode, BatchStats, ParamId, ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "enc";
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub leads: usize,
    pub input_len: usize,
    pub stem_kernels: [usize; 2],
    pub stem_channels: [usize; 2],
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            leads: 12,
            input_len: 1000,
            stem_kernels: [15, 7],
            stem_channels: [32, 64],
            patch: 25,
            d_model: 64,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn n_patches(&self) -> usize {
        self.input_len / self.patch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.input_len % self.patch != 0 {
            return Err(Error::Config(format!("T mod p != 0 (T={}, p={})", self.input_len, self.patch)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        for k in self.stem_kernels {
            if k % 2 == 0 {
                return Err(Error::Config(format!("stem kernel {k} must be odd")));
            }
            if self.input_len < k {
                return Err(Error::Config(format!("input length {} is shorter than stem kernel {k}", self.input_len)));
            }
        }
        if self.leads == 0 || self.stem_channels.contains(&0) || self.depth == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} is outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Bn {
    fn init(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true)?,
            mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?,
            var: store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), false)?,
        })
    }

    fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: param(store, &format!("{name}.gamma"))?,
            beta: param(store, &format!("{name}.beta"))?,
            mean: param(store, &format!("{name}.running_mean"))?,
            var: param(store, &format!("{name}.running_var"))?,
        })
    }
}

/// Batch statistics of one forward pass in training mode, to be folded into
/// the running buffers after the optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// `[N·(n+1) × D]`; row 0 of each block is [CLS].
    pub tokens: Var,
    /// `[N × D]`, layer-normalized final [CLS] states.
    pub cls: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[(n+1) × D]`, position 0 is [CLS].
    pub tokens: Tensor,
    /// `[D]`
    pub cls: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    conv1: ParamId,
    bn1: Bn,
    conv2: ParamId,
    bn2: Bn,
    patch: Linear,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let [k1, k2] = config.stem_kernels;
        let [c1, c2] = config.stem_channels;
        let d = config.d_model;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let conv1 = store.add(format!("{PREFIX}.stem.conv1.w"), Tensor::randn(&[c1, config.leads, k1], he(config.leads * k1), rng), true)?;
        let bn1 = Bn::init(store, &format!("{PREFIX}.stem.bn1"), c1)?;
        let conv2 = store.add(format!("{PREFIX}.stem.conv2.w"), Tensor::randn(&[c2, c1, k2], he(c1 * k2), rng), true)?;
        let bn2 = Bn::init(store, &format!("{PREFIX}.stem.bn2"), c2)?;
        let fan = c2 * config.patch;
        let patch = Linear::init(store, &format!("{PREFIX}.patch"), fan, d, 1.0 / (fan as f64).sqrt(), false, rng)?;
        let pos = store.add(format!("{PREFIX}.pos"), Tensor::randn(&[config.n_patches(), d], 0.02, rng), true)?;
        let cls = store.add(format!("{PREFIX}.cls"), Tensor::randn(&[1, d], 0.02, rng), true)?;
        let blocks = (0..config.depth)
            .map(|l| Block::init(store, &format!("{PREFIX}.blocks.{l}"), d, config.ffn_mult, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::init(store, &format!("{PREFIX}.ln_f"), d)?;
        Ok(Self { config: config.clone(), conv1, bn1, conv2, bn2, patch, pos, cls, blocks, ln_f })
    }

    pub fn lookup(store: &ParamStore, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            conv1: param(store, &format!("{PREFIX}.stem.conv1.w"))?,
            bn1: Bn::lookup(store, &format!("{PREFIX}.stem.bn1"))?,
            conv2: param(store, &format!("{PREFIX}.stem.conv2.w"))?,
            bn2: Bn::lookup(store, &format!("{PREFIX}.stem.bn2"))?,
            patch: Linear::lookup(store, &format!("{PREFIX}.patch"))?,
            pos: param(store, &format!("{PREFIX}.pos"))?,
            cls: param(store, &format!("{PREFIX}.cls"))?,
            blocks: (0..config.depth)
                .map(|l| Block::lookup(store, &format!("{PREFIX}.blocks.{l}")))
                .collect::<Result<Vec<_>>>()?,
            ln_f: LayerNorm::lookup(store, &format!("{PREFIX}.ln_f"))?,
        })
    }

    fn bn<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, bn: &Bn, x: Var, train: bool, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let g = tape.param(store, bn.gamma);
        let b = tape.param(store, bn.beta);
        let mode = if train {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval { mean: store.get(bn.mean).data().to_vec(), var: store.get(bn.var).data().to_vec() }
        };
        let (y, stats) = tape.batch_norm(x, g, b, &mode, BN_EPS)?;
        if let Some(stats) = stats {
            updates.push(BnUpdate { mean: bn.mean, var: bn.var, stats });
        }
        Ok(y)
    }

    /// conv(k1) → BN → ReLU → conv(k2) → BN → ReLU on `[N×L×T]`; `T` is kept.
    pub fn conv_stem<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, train: bool, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let t = *tape.value(x).shape().last().unwrap_or(&0);
        if let Some(k) = self.config.stem_kernels.iter().find(|k| t < **k) {
            return Err(Error::Shape(format!("input length {t} is shorter than stem kernel {k}")));
        }
        let w1 = tape.param(store, self.conv1);
        let h = tape.conv1d(x, w1)?;
        let h = self.bn(tape, store, &self.bn1, h, train, updates)?;
        let h = tape.relu(h);
        let w2 = tape.param(store, self.conv2);
        let h = tape.conv1d(h, w2)?;
        let h = self.bn(tape, store, &self.bn2, h, train, updates)?;
        Ok(tape.relu(h))
    }

    /// Non-overlapping windows of `p` samples, linearly embedded, plus `Pos`.
    /// Returns `[N·n × D]`.
    pub fn patchify_temporal<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, feat: Var) -> Result<Var> {
        let t = *tape.value(feat).shape().last().unwrap_or(&0);
        if t % self.config.patch != 0 || t / self.config.patch != self.config.n_patches() {
            return Err(Error::Shape(format!("T mod p != 0 or wrong length (T={t}, p={})", self.config.patch)));
        }
        let p = tape.patchify(feat, self.config.patch)?;
        let e = self.patch.forward(tape, store, p)?;
        let pos = tape.param(store, self.pos);
        tape.add_bcast(e, pos)
    }

    /// Full encoder over a batch `[N×L×T]` of normalized signals.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, train: bool) -> Result<EncoderVars> {
        let shape = tape.value(x).shape().to_vec();
        let n_batch = match shape.as_slice() {
            [n, l, t] if *l == self.config.leads && *t == self.config.input_len => *n,
            s => {
                return Err(Error::Shape(format!(
                    "encoder expects [N×{}×{}], got {s:?}",
                    self.config.leads, self.config.input_len
                )))
            }
        };
        let mut bn_updates = Vec::new();
        let feat = self.conv_stem(tape, store, x, train, &mut bn_updates)?;
        let patches = self.patchify_temporal(tape, store, feat)?;
        let n = self.config.n_patches();
        let cls = tape.param(store, self.cls);
        let all = tape.concat_rows(&[cls, patches])?;
        let idx: Vec<usize> = (0..n_batch).flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i))).collect();
        let mut z = tape.gather_rows(all, &idx)?;
        for block in &self.blocks {
            z = block.forward(tape, store, z, n + 1, self.config.heads, false)?;
        }
        let cls_rows: Vec<usize> = (0..n_batch).map(|b| b * (n + 1)).collect();
        let c = tape.gather_rows(z, &cls_rows)?;
        let y = self.ln_f.forward(tape, store, c)?;
        Ok(EncoderVars { tokens: z, cls: y, bn_updates })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&self, store: &mut ParamStore, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (r, s) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * s;
            }
            for (r, s) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * s;
            }
        }
    }

    /// Inference-mode encoding of records, in chunks of `batch`.
    pub fn encode_many(&self, store: &ParamStore, records: &[&EcgRecord], batch: usize) -> Result<Vec<EncoderOutput>> {
        let mut out = Vec::with_capacity(records.len());
        let n = self.config.n_patches() + 1;
        let d = self.config.d_model;
        for chunk in records.chunks(batch.max(1)) {
            let mut tape = Tape::no_grad();
            let x = tape.leaf(ecg_batch(chunk, &self.config)?, false);
            let vars = self.forward(&mut tape, store, x, false)?;
            let tokens = tape.value(vars.tokens).data();
            let cls = tape.value(vars.cls).data();
            for b in 0..chunk.len() {
                out.push(EncoderOutput {
                    tokens: Tensor::new(vec![n, d], tokens[b * n * d..(b + 1) * n * d].to_vec())?,
                    cls: Tensor::new(vec![d], cls[b * d..(b + 1) * d].to_vec())?,
                });
            }
        }
        Ok(out)
    }
}

/// Min-max normalizes each record and stacks them into `[N×L×T]`.
pub fn ecg_batch(records: &[&EcgRecord], config: &EncoderConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(records.len() * config.leads * config.input_len);
    for r in records {
        if r.leads != config.leads || r.samples != config.input_len {
            return Err(Error::Shape(format!(
                "record {} is {}×{}, encoder expects {}×{}",
                r.id, r.leads, r.samples, config.leads, config.input_len
            )));
        }
        data.extend_from_slice(&minmax_normalize(r).values);
    }
    Tensor::new(vec![records.len(), config.leads, config.input_len], data)
}

/// Encodes one record in inference mode.
pub fn encode(record: &EcgRecord, config: &EncoderConfig, store: &ParamStore) -> Result<EncoderOutput> {
    let enc = Encoder::lookup(store, config)?;
    Ok(enc.encode_many(store, &[record], 1)?.remove(0))
}
