//! Finite-difference audits of every differentiable op and of three scalar
//! probes through the encoder, the adapted LM and the full ECG-to-answer
//! chain. Shared by the test suites and the acceptance run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{assemble_prompt, template_text, Projection};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{finite_difference_gradient, max_relative_error, BatchNormMode, ParamStore, Tape, Tensor, Var};
use crate::textlm::{Lm, LmConfig, Tokenizer};

const H: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const PROBE_TOLERANCE: f64 = 1e-3;

/// Worst relative error of one check over all seeds and inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub seeds: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

// --------------------------------------------------------------------- ops

type OpBuild<'f> = &'f dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces `out` through a fixed random weighting so no gradient component
/// cancels by symmetry.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn op_error(inputs: &[Tensor], build: OpBuild, seed: u64) -> Result<f64> {
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = weighted_sum(&mut tape, out, seed)?;
        tape.backward(loss)?;
        vars.iter().map(|v| tape.grad_tensor(*v)).collect()
    };
    let mut worst = 0.0f64;
    for (i, an) in analytic.iter().enumerate() {
        let mut failure = None;
        let numeric = finite_difference_gradient(
            |x| {
                let mut tape = Tape::no_grad();
                let vars: Vec<Var> =
                    inputs.iter().enumerate().map(|(j, t)| tape.leaf(if j == i { x.clone() } else { t.clone() }, false)).collect();
                match build(&mut tape, &vars).and_then(|o| weighted_sum(&mut tape, o, seed)) {
                    Ok(l) => tape.value(l).item(),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &inputs[i],
            H,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(an, &numeric));
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", inputs: |r| vec![randn(&[3, 4], r), randn(&[4, 5], r)], build: |t, v| t.matmul(v[0], v[1]) },
        OpCase { name: "matmul_t", inputs: |r| vec![randn(&[3, 4], r), randn(&[5, 4], r)], build: |t, v| t.matmul_t(v[0], v[1]) },
        OpCase { name: "add", inputs: |r| vec![randn(&[2, 5], r), randn(&[2, 5], r)], build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "mul", inputs: |r| vec![randn(&[2, 5], r), randn(&[2, 5], r)], build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "scale", inputs: |r| vec![randn(&[2, 5], r)], build: |t, v| Ok(t.scale(v[0], -1.7)) },
        OpCase { name: "exp", inputs: |r| vec![randn(&[2, 5], r)], build: |t, v| Ok(t.exp(v[0])) },
        OpCase { name: "gelu", inputs: |r| vec![randn(&[2, 5], r)], build: |t, v| Ok(t.gelu(v[0])) },
        OpCase {
            name: "relu",
            // Inputs kept away from the kink.
            inputs: |r| vec![randn(&[2, 5], r).map(|x| if x.abs() < 0.05 { x + 0.2 } else { x })],
            build: |t, v| Ok(t.relu(v[0])),
        },
        OpCase { name: "mul_scalar", inputs: |r| vec![randn(&[2, 5], r), randn(&[1], r)], build: |t, v| t.mul_scalar(v[0], v[1]) },
        OpCase { name: "sum", inputs: |r| vec![randn(&[2, 5], r)], build: |t, v| Ok(t.sum(v[0])) },
        OpCase { name: "l2_normalize_rows", inputs: |r| vec![randn(&[2, 5], r)], build: |t, v| Ok(t.l2_normalize_rows(v[0])) },
        OpCase { name: "add_bcast row", inputs: |r| vec![randn(&[6, 3], r), randn(&[3], r)], build: |t, v| t.add_bcast(v[0], v[1]) },
        OpCase { name: "add_bcast block", inputs: |r| vec![randn(&[6, 3], r), randn(&[2, 3], r)], build: |t, v| t.add_bcast(v[0], v[1]) },
        OpCase {
            name: "layer_norm",
            inputs: |r| vec![randn(&[4, 6], r), randn(&[6], r), randn(&[6], r)],
            build: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase {
            name: "batch_norm train",
            inputs: |r| vec![randn(&[3, 2, 5], r), randn(&[2], r), randn(&[2], r)],
            build: |t, v| Ok(t.batch_norm(v[0], v[1], v[2], &BatchNormMode::Train, 1e-5)?.0),
        },
        OpCase {
            name: "batch_norm eval",
            inputs: |r| vec![randn(&[3, 2, 5], r), randn(&[2], r), randn(&[2], r)],
            build: |t, v| {
                let mode = BatchNormMode::Eval { mean: vec![0.3, -0.1], var: vec![1.5, 0.7] };
                Ok(t.batch_norm(v[0], v[1], v[2], &mode, 1e-5)?.0)
            },
        },
        OpCase { name: "conv1d", inputs: |r| vec![randn(&[1, 16], r), randn(&[1, 1, 7], r)], build: |t, v| t.conv1d(v[0], v[1]) },
        OpCase {
            name: "conv1d batched",
            inputs: |r| vec![randn(&[2, 3, 9], r), randn(&[4, 3, 5], r)],
            build: |t, v| t.conv1d(v[0], v[1]),
        },
        OpCase { name: "patchify", inputs: |r| vec![randn(&[2, 3, 8], r)], build: |t, v| t.patchify(v[0], 4) },
        OpCase { name: "reshape", inputs: |r| vec![randn(&[8, 2], r)], build: |t, v| t.reshape(v[0], &[2, 8]) },
        OpCase { name: "gather_rows", inputs: |r| vec![randn(&[5, 3], r)], build: |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]) },
        OpCase {
            name: "concat_rows",
            inputs: |r| vec![randn(&[2, 3], r), randn(&[1, 3], r)],
            build: |t, v| t.concat_rows(&[v[0], v[1], v[0]]),
        },
        OpCase { name: "slice_rows", inputs: |r| vec![randn(&[5, 3], r)], build: |t, v| t.slice_rows(v[0], 1, 3) },
        OpCase { name: "transpose", inputs: |r| vec![randn(&[3, 4], r)], build: |t, v| t.transpose(v[0]) },
        OpCase {
            name: "attention causal",
            inputs: |r| vec![randn(&[8, 6], r), randn(&[8, 6], r), randn(&[8, 6], r)],
            build: |t, v| t.attention(v[0], v[1], v[2], 4, 2, true),
        },
        OpCase {
            name: "attention full",
            inputs: |r| vec![randn(&[8, 6], r), randn(&[8, 6], r), randn(&[8, 6], r)],
            build: |t, v| t.attention(v[0], v[1], v[2], 8, 3, false),
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: |r| vec![randn(&[4, 6], r)],
            build: |t, v| t.softmax_cross_entropy(v[0], &[1, 99, 5, 0], 99),
        },
        OpCase {
            name: "composite gelu(xW)*xW",
            inputs: |r| vec![randn(&[3, 4], r), randn(&[4, 4], r)],
            build: |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let g = t.gelu(h);
                t.mul(g, h)
            },
        },
    ]
}

/// Every op case over `seeds` random draws.
pub fn op_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = (case.inputs)(&mut rng);
                worst = worst.max(op_error(&inputs, &case.build, seed)?);
            }
            Ok(CheckResult { name: case.name.into(), worst, tolerance: OP_TOLERANCE, seeds })
        })
        .collect()
}

// ------------------------------------------------------------------ probes

const T: usize = 40;

fn probe_encoder() -> EncoderConfig {
    EncoderConfig {
        leads: 2,
        input_len: T,
        stem_kernels: [15, 7],
        stem_channels: [3, 4],
        patch: 5,
        d_model: 8,
        depth: 2,
        heads: 2,
        ffn_mult: 2,
        bn_momentum: 0.1,
    }
}

const QUESTION: &str = "is there anything unusual in this ecg?";

struct Ctx {
    enc: Encoder,
    proj: Projection,
    lm: Lm,
    tok: Tokenizer,
    x: Tensor,
    weights: Tensor,
}

type Probe = for<'a> fn(&mut Tape<'a>, &'a ParamStore, &Ctx, Var) -> Result<Var>;

fn setup(seed: u64) -> Result<(ParamStore, Ctx)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = template_text().to_vec();
    let vocab_text = format!("{QUESTION} yes no");
    texts.push(&vocab_text);
    let tok = Tokenizer::build(texts);
    let ecfg = probe_encoder();
    let mut store = ParamStore::new();
    let enc = Encoder::init(&mut store, &ecfg, &mut rng)?;
    let proj = Projection::init(&mut store, ecfg.d_model, 8, &mut rng)?;
    let lm_cfg = LmConfig { vocab: tok.len(), d_model: 8, depth: 2, heads: 2, max_context: 64, ffn_mult: 2 };
    let mut lm = Lm::init(&mut store, &lm_cfg, &mut rng)?;
    lm.inject_lora(&mut store, 4, 8.0, &mut rng)?;
    // Nonzero adapters and non-trivial BN buffers so every path is active.
    let ids: Vec<_> = store.iter().map(|(id, n, _, _)| (id, n.to_string())).collect();
    for (id, name) in ids {
        let shape = store.get(id).shape().to_vec();
        if name.ends_with("lora_b") {
            *store.get_mut(id) = Tensor::randn(&shape, 0.2, &mut rng);
        } else if name.ends_with("running_mean") {
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        } else if name.ends_with("running_var") {
            *store.get_mut(id) = Tensor::uniform(&shape, 0.5, 2.0, &mut rng);
        }
    }
    // Two frozen base tensors re-opened so their gradients are probed too.
    for n in ["lm.blocks.0.attn.q.w", "lm.ln_f.gamma"] {
        let id = store.id(n).ok_or_else(|| Error::Config(format!("missing {n}")))?;
        store.set_trainable(id, true);
    }
    let x = Tensor::randn(&[2, 2, T], 1.0, &mut rng);
    let weights = Tensor::randn(&[2, 8], 1.0, &mut rng);
    Ok((store, Ctx { enc, proj, lm, tok, x, weights }))
}

/// Weighted sum of the [CLS] summaries of a two-record batch, train-mode BN.
fn encoder_probe<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, ctx: &Ctx, x: Var) -> Result<Var> {
    let out = ctx.enc.forward(tape, store, x, true)?;
    let w = tape.constant(ctx.weights.clone());
    let p = tape.mul(out.cls, w)?;
    Ok(tape.sum(p))
}

fn answer_loss<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, ctx: &Ctx, ecgs: &[Var]) -> Result<Var> {
    let ids: Vec<String> = (0..ecgs.len()).map(|i| format!("e{i}")).collect();
    let seq = assemble_prompt(&ctx.tok, &ids, QUESTION)?;
    let emb = seq.embed(tape, store, &ctx.lm, ecgs)?;
    let yes = ctx.tok.id("yes").ok_or_else(|| Error::Config("yes not in vocabulary".into()))?;
    let answer = ctx.lm.embed_tokens(tape, store, &[yes, ctx.tok.eos()])?;
    let full = tape.concat_rows(&[emb, answer])?;
    let logits = ctx.lm.forward(tape, store, full)?;
    let n = tape.value(logits).rows();
    let mut targets = vec![usize::MAX; n];
    targets[n - 3] = yes;
    targets[n - 2] = ctx.tok.eos();
    tape.softmax_cross_entropy(logits, &targets, usize::MAX)
}

/// Answer loss of the adapted LM given two precomputed ECG embeddings.
fn lm_probe<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, ctx: &Ctx, e: Var) -> Result<Var> {
    let a = tape.slice_rows(e, 0, 2)?;
    let b = tape.slice_rows(e, 2, 2)?;
    answer_loss(tape, store, ctx, &[a, b])
}

/// Raw ECG through eval-mode encoder, bridge and LM to the answer loss.
fn chain_probe<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, ctx: &Ctx, x: Var) -> Result<Var> {
    let x1 = tape.reshape(x, &[1, 2, T])?;
    let out = ctx.enc.forward(tape, store, x1, false)?;
    let e = ctx.proj.project_ecg(tape, store, out.tokens)?;
    answer_loss(tape, store, ctx, &[e])
}

fn scalar(store: &ParamStore, ctx: &Ctx, probe: Probe, x: &Tensor) -> f64 {
    let mut tape = Tape::no_grad();
    let v = tape.leaf(x.clone(), false);
    probe(&mut tape, store, ctx, v).map(|l| tape.value(l).item()).unwrap_or(f64::NAN)
}

/// Input and selected parameter gradients of one probe against central
/// differences, worst case over seeds.
fn probe_check(name: &str, probe: Probe, input: fn(&Ctx, &mut ChaCha8Rng) -> Tensor, params: &[&str], seeds: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (store, ctx) = setup(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = input(&ctx, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let loss = probe(&mut tape, &store, &ctx, xv)?;
        tape.backward(loss)?;
        let grads = tape.param_grads();
        let gx = tape.grad_tensor(xv);
        drop(tape);
        let num = finite_difference_gradient(|xp| scalar(&store, &ctx, probe, xp), &x, H);
        worst = worst.max(max_relative_error(&gx, &num));
        for n in params {
            let id = store.id(n).ok_or_else(|| Error::Config(format!("missing {n}")))?;
            let g = grads.get(id).ok_or_else(|| Error::Config(format!("{n} received no gradient")))?;
            let g = Tensor::new(store.get(id).shape().to_vec(), g.to_vec())?;
            let num = finite_difference_gradient(
                |pv| {
                    let mut s = store.clone();
                    *s.get_mut(id) = pv.clone();
                    scalar(&s, &ctx, probe, &x)
                },
                store.get(id),
                H,
            );
            worst = worst.max(max_relative_error(&g, &num));
        }
    }
    if worst.is_nan() {
        return Err(Error::Config(format!("{name} probe failed to evaluate")));
    }
    Ok(CheckResult { name: name.into(), worst, tolerance: PROBE_TOLERANCE, seeds })
}

/// The three end-to-end probes.
pub fn probe_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        probe_check(
            "encoder summary",
            encoder_probe,
            |ctx, _| ctx.x.clone(),
            &["enc.stem.conv1.w", "enc.stem.bn2.gamma", "enc.patch.w", "enc.cls", "enc.blocks.1.attn.q.w", "enc.ln_f.beta"],
            seeds,
        )?,
        probe_check(
            "adapted LM answer",
            lm_probe,
            |_, rng| Tensor::randn(&[4, 8], 1.0, rng),
            &["lm.blocks.0.attn.q.lora_a", "lm.blocks.1.attn.k.lora_b", "lm.blocks.0.attn.q.w", "lm.ln_f.gamma"],
            seeds,
        )?,
        probe_check(
            "ECG to answer chain",
            chain_probe,
            |ctx, _| Tensor::new(vec![2, T], ctx.x.data()[..2 * T].to_vec()).expect("2T values"),
            &["bridge.proj.w", "bridge.proj.b", "enc.stem.conv2.w", "lm.blocks.1.attn.q.lora_a"],
            seeds,
        )?,
    ])
}
