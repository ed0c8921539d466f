//! Shared layers: linear maps, pre-LN transformer blocks and LoRA adapters.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ (+ b)` with `W` stored `[out×in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_out, d_in], std, rng), true)?;
        let b = if bias { Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { w: param(store, &format!("{name}.w"))?, b: store.id(&format!("{name}.b")) })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul_t(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bcast(y, b)
            }
            None => Ok(y),
        }
    }
}

pub fn param(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| crate::error::Error::Checkpoint(format!("missing parameter {name}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { gamma: param(store, &format!("{name}.gamma"))?, beta: param(store, &format!("{name}.beta"))? })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Low-rank update `ΔW = (α/r)·B·A` on a `[out×in]` projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl Lora {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let h = tape.matmul_t(x, a)?;
        let h = tape.matmul_t(h, b)?;
        Ok(tape.scale(h, self.scale))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub lora_q: Option<Lora>,
    pub lora_k: Option<Lora>,
}

impl Block {
    /// Attention projections are bias-free; the feed-forward layers carry
    /// biases. Weights are drawn with std `gain / sqrt(fan_in)`.
    pub fn init(store: &mut ParamStore, name: &str, d: usize, ffn_mult: usize, gain: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = d * ffn_mult;
        let (sd, sh) = (gain / (d as f64).sqrt(), gain / (h as f64).sqrt());
        Ok(Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d)?,
            wq: Linear::init(store, &format!("{name}.attn.q"), d, d, sd, false, rng)?,
            wk: Linear::init(store, &format!("{name}.attn.k"), d, d, sd, false, rng)?,
            wv: Linear::init(store, &format!("{name}.attn.v"), d, d, sd, false, rng)?,
            wo: Linear::init(store, &format!("{name}.attn.o"), d, d, sd, false, rng)?,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::init(store, &format!("{name}.ffn.1"), d, h, sd, true, rng)?,
            ff2: Linear::init(store, &format!("{name}.ffn.2"), h, d, sh, true, rng)?,
            lora_q: None,
            lora_k: None,
        })
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        let lora = |which: &str| -> Option<Lora> {
            let a = store.id(&format!("{name}.attn.{which}.lora_a"))?;
            let b = store.id(&format!("{name}.attn.{which}.lora_b"))?;
            let r = store.get(a).shape()[0] as f64;
            let alpha = store.by_name(&format!("{name}.attn.{which}.lora_alpha")).map_or(r, |t| t.data()[0]);
            Some(Lora { a, b, scale: alpha / r })
        };
        Ok(Self {
            ln1: LayerNorm::lookup(store, &format!("{name}.ln1"))?,
            wq: Linear::lookup(store, &format!("{name}.attn.q"))?,
            wk: Linear::lookup(store, &format!("{name}.attn.k"))?,
            wv: Linear::lookup(store, &format!("{name}.attn.v"))?,
            wo: Linear::lookup(store, &format!("{name}.attn.o"))?,
            ln2: LayerNorm::lookup(store, &format!("{name}.ln2"))?,
            ff1: Linear::lookup(store, &format!("{name}.ffn.1"))?,
            ff2: Linear::lookup(store, &format!("{name}.ffn.2"))?,
            lora_q: lora("q"),
            lora_k: lora("k"),
        })
    }

    /// `x + MSA(LN(x))`, then `+ FFN(LN(·))`, over blocks of `seq` rows.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let mut q = self.wq.forward(tape, store, h)?;
        if let Some(l) = &self.lora_q {
            let dq = l.forward(tape, store, h)?;
            q = tape.add(q, dq)?;
        }
        let mut k = self.wk.forward(tape, store, h)?;
        if let Some(l) = &self.lora_k {
            let dk = l.forward(tape, store, h)?;
            k = tape.add(k, dk)?;
        }
        let v = self.wv.forward(tape, store, h)?;
        let a = tape.attention(q, k, v, seq, heads, causal)?;
        let a = self.wo.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.ff1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
