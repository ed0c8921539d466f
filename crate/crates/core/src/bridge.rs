//! ECG-to-LM alignment: group-of-four token concatenation, linear projection,
//! and prompt assembly around one or two ECGs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::textlm::{Lm, Tokenizer};

pub const PREFIX: &str = "bridge";
pub const GROUP: usize = 4;

pub const SINGLE_INTRO: &str = "This is an electrocardiogram.";
pub const PAIR_INTRO: &str = "Here are two electrocardiograms. The first is";
pub const PAIR_MIDDLE: &str = ", and the second is";
pub const SLOT_END: &str = ".";
pub const QUESTION_INTRO: &str = "Answer the following questions based on the above content:";

/// `[n×D] → [(n/4)×4D]`; row `i` is rows `4i..4i+4` side by side. This is a
/// row-major reshape.
pub fn downsample_concat(tape: &mut Tape<'_>, tokens: Var) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    let (n, d) = match shape.as_slice() {
        [n, d] => (*n, *d),
        s => return Err(Error::Shape(format!("downsample_concat expects [n×D], got {s:?}"))),
    };
    if n % GROUP != 0 {
        return Err(Error::Shape(format!("token count n={n} is not divisible by {GROUP}")));
    }
    tape.reshape(tokens, &[n / GROUP, GROUP * d])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub linear: Linear,
}

impl Projection {
    pub fn init(store: &mut ParamStore, enc_d: usize, lm_d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fan = GROUP * enc_d;
        Ok(Self { linear: Linear::init(store, &format!("{PREFIX}.proj"), fan, lm_d, 1.0 / (fan as f64).sqrt(), true, rng)? })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self { linear: Linear::lookup(store, &format!("{PREFIX}.proj"))? })
    }

    /// Drops [CLS] from `[(n+1)×D]` encoder tokens, concatenates groups of
    /// four, and projects to the LM width: `[(n/4)×d_model]`.
    pub fn project_ecg<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, encoder_tokens: Var) -> Result<Var> {
        let rows = tape.value(encoder_tokens).rows();
        if rows < 2 {
            return Err(Error::Shape(format!("encoder output has {rows} tokens; expected [CLS] plus patches")));
        }
        let patches = tape.slice_rows(encoder_tokens, 1, rows - 1)?;
        let z = downsample_concat(tape, patches)?;
        self.linear.forward(tape, store, z)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text { text: String, ids: Vec<usize> },
    /// Slot `index` of the item's ECG list.
    Ecg { index: usize, ecg_id: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSequence {
    pub segments: Vec<Segment>,
}

impl MixedSequence {
    /// Length once ECG slots are filled with `ecg_len` embeddings each.
    pub fn len(&self, ecg_len: usize) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text { ids, .. } => ids.len(),
                Segment::Ecg { .. } => ecg_len,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Readable rendering with ECG slots shown as `[ECG embeddings]`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let piece = match s {
                Segment::Text { text, .. } => text.clone(),
                Segment::Ecg { .. } => "[ECG embeddings]".to_string(),
            };
            let glue = !out.is_empty() && !piece.starts_with(['.', ',']) && !piece.is_empty();
            if glue {
                out.push(' ');
            }
            out.push_str(&piece);
        }
        out
    }

    /// Embeds the sequence, splicing `ecgs[i]` (each `[m×d]`) into slot `i`.
    pub fn embed<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, lm: &Lm, ecgs: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            match s {
                Segment::Text { ids, .. } if ids.is_empty() => {}
                Segment::Text { ids, .. } => parts.push(lm.embed_tokens(tape, store, ids)?),
                Segment::Ecg { index, ecg_id } => parts.push(
                    *ecgs
                        .get(*index)
                        .ok_or_else(|| Error::Shape(format!("no embedding supplied for ECG slot {index} ({ecg_id})")))?,
                ),
            }
        }
        tape.concat_rows(&parts)
    }
}

fn text(tok: &Tokenizer, s: &str) -> Segment {
    Segment::Text { text: s.to_string(), ids: tok.encode(s) }
}

/// `<bos>`, the one- or two-ECG preamble with ECG slots, then the question.
pub fn assemble_prompt(tok: &Tokenizer, ecg_ids: &[String], question: &str) -> Result<MixedSequence> {
    let mut segments = vec![Segment::Text { text: String::new(), ids: vec![tok.bos()] }];
    match ecg_ids {
        [a] => {
            segments.push(text(tok, SINGLE_INTRO));
            segments.push(Segment::Ecg { index: 0, ecg_id: a.clone() });
            segments.push(text(tok, SLOT_END));
        }
        [a, b] => {
            segments.push(text(tok, PAIR_INTRO));
            segments.push(Segment::Ecg { index: 0, ecg_id: a.clone() });
            segments.push(text(tok, PAIR_MIDDLE));
            segments.push(Segment::Ecg { index: 1, ecg_id: b.clone() });
            segments.push(text(tok, SLOT_END));
        }
        other => return Err(Error::Data(format!("a prompt takes one or two ECGs, got {}", other.len()))),
    }
    segments.push(text(tok, QUESTION_INTRO));
    segments.push(text(tok, question));
    Ok(MixedSequence { segments })
}

/// Words used by the prompt templates, for vocabulary construction.
pub fn template_text() -> [&'static str; 5] {
    [SINGLE_INTRO, PAIR_INTRO, PAIR_MIDDLE, SLOT_END, QUESTION_INTRO]
}

/// Projects a cached encoder output outside any tape.
pub fn project_cached(store: &ParamStore, proj: &Projection, encoder_tokens: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.leaf(encoder_tokens.clone(), false);
    let y = proj.project_ecg(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}
