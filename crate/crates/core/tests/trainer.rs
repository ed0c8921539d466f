use ecg_mllm::bridge::template_text;
use ecg_mllm::encoder::{ecg_batch, Encoder, EncoderConfig};
use ecg_mllm::model::{EcgCache, EcgLlm, ModelConfig};
use ecg_mllm::synth::{make_corpus, GeneratorConfig, QType, QaItem, Scope, Severity};
use ecg_mllm::debias::TemplateBank;
use ecg_mllm::tensor::{ParamStore, Tape, Tensor};
use ecg_mllm::textlm::{LmConfig, Tokenizer};
use ecg_mllm::trainer::{
    add_logit_scale, contrastive_pretrain, frozen_digest, info_nce, instruction_loss, load_checkpoint, save_checkpoint, train_stage, Checkpoint,
    ContrastiveConfig, Stage, StageConfig, TextTower, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[k] - m - z.ln()
}

// -------------------------------------------------------------- contrastive

#[test]
fn info_nce_at_init_is_near_log_batch() {
    let gen = GeneratorConfig { n_records: 320, ..Default::default() };
    let corpus = make_corpus(&gen, &TemplateBank::default_bank()).unwrap();
    let tok = Tokenizer::build(corpus.meta.iter().map(|m| m.report.as_str()));
    let cc = ContrastiveConfig::default();
    let enc_cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let enc = Encoder::init(&mut store, &enc_cfg, &mut r).unwrap();
    let tower = TextTower::init(&mut store, &cc, tok.len(), &mut r).unwrap();
    let scale = add_logit_scale(&mut store, cc.temperature).unwrap();
    let mut total = 0.0;
    for b in 0..10 {
        let idx: Vec<usize> = (b * 32..(b + 1) * 32).collect();
        let recs: Vec<_> = idx.iter().map(|&i| &corpus.records[i]).collect();
        let texts: Vec<Vec<usize>> = idx.iter().map(|&i| tok.encode(&corpus.meta[i].report)).collect();
        let mut tape = Tape::no_grad();
        let x = tape.leaf(ecg_batch(&recs, &enc_cfg).unwrap(), false);
        let e = enc.forward(&mut tape, &store, x, false).unwrap();
        let t = tower.forward(&mut tape, &store, &texts).unwrap();
        let s = tape.param(&store, scale);
        let l = info_nce(&mut tape, e.cls, t, s).unwrap();
        total += tape.value(l).item();
    }
    let mean = total / 10.0;
    assert!((mean - 32f64.ln()).abs() <= 0.3, "mean loss {mean} vs ln 32 = {}", 32f64.ln());
}

#[test]
fn info_nce_saturates_on_identical_pairs() {
    let mut tape = Tape::no_grad();
    let a = tape.leaf(Tensor::eye(8), false);
    let b = tape.leaf(Tensor::eye(8), false);
    let s = tape.leaf(Tensor::scalar(1000f64.ln()), false);
    let l = info_nce(&mut tape, a, b, s).unwrap();
    assert!(tape.value(l).item() < 1e-12);
    let one = tape.leaf(Tensor::eye(1), false);
    assert!(info_nce(&mut tape, one, one, s).is_err());
}

#[test]
fn contrastive_loss_descends_over_200_steps() {
    let gen = GeneratorConfig { n_records: 256, leads: 2, duration_s: 2.0, rate_hz: 50.0, ..Default::default() };
    let corpus = make_corpus(&gen, &TemplateBank::default_bank()).unwrap();
    let tok = Tokenizer::build(corpus.meta.iter().map(|m| m.report.as_str()));
    let enc_cfg = EncoderConfig {
        leads: 2,
        input_len: 100,
        stem_kernels: [15, 7],
        stem_channels: [4, 8],
        patch: 5,
        d_model: 8,
        depth: 1,
        heads: 2,
        ffn_mult: 2,
        bn_momentum: 0.1,
    };
    let cc = ContrastiveConfig { epochs: 25, text_depth: 1, text_width: 8, text_heads: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let enc = Encoder::init(&mut store, &enc_cfg, &mut r).unwrap();
    let tower = TextTower::init(&mut store, &cc, tok.len(), &mut r).unwrap();
    add_logit_scale(&mut store, cc.temperature).unwrap();
    let pairs: Vec<_> = corpus.records.iter().zip(&corpus.meta).map(|(rec, m)| (rec, tok.encode(&m.report))).collect();
    let rep = contrastive_pretrain(&mut store, &enc, &tower, &pairs, &cc, 0, |_, _, _| {}).unwrap();
    assert_eq!(rep.step_losses.len(), 200);
    let first = rep.epoch_losses[0];
    let last = *rep.epoch_losses.last().unwrap();
    assert!(last < first, "epoch losses {:?}", rep.epoch_losses);
    assert!((1e-3..=1.0).contains(&rep.temperature));
}

// ---------------------------------------------------------- instruction

struct Fixture {
    store: ParamStore,
    model: EcgLlm,
    cache: EcgCache,
}

fn model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            leads: 2,
            input_len: 40,
            stem_kernels: [15, 7],
            stem_channels: [3, 4],
            patch: 10,
            d_model: 8,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
            bn_momentum: 0.1,
        },
        lm: LmConfig { vocab: 0, d_model: 8, depth: 2, heads: 2, max_context: 64, ffn_mult: 2 },
        lora_rank: 2,
        lora_alpha: 4.0,
        max_answer_tokens: 4,
    }
}

fn fixture(seed: u64) -> Fixture {
    let mut texts: Vec<&str> = template_text().to_vec();
    texts.extend(["does this ecg show sinus rhythm ?", "is the rate fast ?", "yes no maybe"]);
    let tok = Tokenizer::build(texts);
    let mut store = ParamStore::new();
    let mut model = EcgLlm::init(&mut store, &model_config(), tok, &mut rng(seed)).unwrap();
    model.inject_lora(&mut store, &mut rng(seed + 1)).unwrap();
    model.freeze_for_instruction(&mut store);
    let mut cache = EcgCache::default();
    let mut r = rng(seed + 2);
    for i in 0..6 {
        cache.insert(format!("r{i}"), Tensor::randn(&[5, 8], 1.0, &mut r));
    }
    Fixture { store, model, cache }
}

fn item(id: usize, template: &str, question: &str, answer: &str, ecgs: &[usize]) -> QaItem {
    QaItem {
        id: format!("q{id}"),
        ecg_ids: ecgs.iter().map(|e| format!("r{e}")).collect(),
        template_id: template.into(),
        qtype: if answer == "yes" || answer == "no" { QType::Verify } else { QType::Query },
        scope: if ecgs.len() == 1 { Scope::Single } else { Scope::ComparisonIrrelevant },
        question: question.into(),
        answer: answer.into(),
        stratum: Severity::Healthy,
        options: Vec::new(),
    }
}

fn balanced_items() -> Vec<QaItem> {
    (0..8)
        .map(|i| {
            let (t, q) = if i % 2 == 0 { ("t_sinus", "does this ecg show sinus rhythm ?") } else { ("t_fast", "is the rate fast ?") };
            item(i, t, q, if (i / 2) % 2 == 0 { "yes" } else { "no" }, &[i % 6])
        })
        .collect()
}

#[test]
fn yes_answer_loss_averages_two_positions() {
    let f = fixture(0);
    let it = item(0, "t", "is the rate fast ?", "yes", &[1]);
    let mut tape = Tape::no_grad();
    let loss = instruction_loss(&mut tape, &f.store, &f.model, &it, &f.cache).unwrap();
    let loss = tape.value(loss).item();

    let tok = &f.model.tok;
    let (yes, eos) = (tok.id("yes").unwrap(), tok.eos());
    let mut tape = Tape::no_grad();
    let prompt = f.model.embed_prompt(&mut tape, &f.store, &f.cache, &it.ecg_ids, &it.question).unwrap();
    let p = tape.value(prompt).rows();
    let a = f.model.lm.embed_tokens(&mut tape, &f.store, &[yes]).unwrap();
    let x = tape.concat_rows(&[prompt, a]).unwrap();
    let logits = f.model.lm.forward(&mut tape, &f.store, x).unwrap();
    let lg = tape.value(logits);
    assert_eq!(lg.rows(), p + 1);
    let expect = -(log_softmax_at(lg.row(p - 1), yes) + log_softmax_at(lg.row(p), eos)) / 2.0;
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn oracle_logits_drive_loss_to_zero() {
    let mut f = fixture(1);
    let it = item(0, "t", "is the rate fast ?", "yes", &[1]);
    let tok = f.model.tok.clone();
    let (last, yes, eos) = (*tok.encode(&it.question).last().unwrap(), tok.id("yes").unwrap(), tok.eos());
    // Residual branches off: each position's hidden state is its own embedding.
    let names: Vec<String> = f.store.iter().map(|(_, n, _, _)| n.to_string()).collect();
    for n in &names {
        let id = f.store.id(n).unwrap();
        let zero = n.starts_with("lm.pos_emb") || n.starts_with("lm.head") || n.contains(".attn.o.") || n.contains(".ffn.2.");
        if zero {
            f.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let d = 8;
    let u = [1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let v = [0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0];
    let emb = f.store.id("lm.tok_emb").unwrap();
    f.store.get_mut(emb).data_mut()[last * d..(last + 1) * d].copy_from_slice(&u);
    f.store.get_mut(emb).data_mut()[yes * d..(yes + 1) * d].copy_from_slice(&v);
    let head = f.store.id("lm.head.w").unwrap();
    for (row, dir) in [(yes, u), (eos, v)] {
        for j in 0..d {
            f.store.get_mut(head).data_mut()[row * d + j] = 1e4 * dir[j];
        }
    }
    let mut tape = Tape::no_grad();
    let loss = instruction_loss(&mut tape, &f.store, &f.model, &it, &f.cache).unwrap();
    assert!(tape.value(loss).item() < 1e-9, "{}", tape.value(loss).item());
}

#[test]
fn empty_answer_is_rejected() {
    let f = fixture(2);
    let it = item(0, "t", "is the rate fast ?", "", &[1]);
    let mut tape = Tape::no_grad();
    assert!(instruction_loss(&mut tape, &f.store, &f.model, &it, &f.cache).is_err());
}

#[test]
fn stage_one_rejects_impure_input() {
    let mut f = fixture(3);
    let cfg = StageConfig { lr: 1e-3, epochs: 1, batch: 4 };
    let mut items = balanced_items();
    items.push(item(9, "t_q", "is the rate fast ?", "maybe", &[0]));
    let mut st = TrainState::new(Stage::One, 0, &cfg);
    assert!(train_stage(&mut f.store, &f.model, &cfg, &items, &f.cache, &mut st, None, |_, _, _| {}).is_err());
    let mut items = balanced_items();
    items[3].answer = "yes".into();
    let mut st = TrainState::new(Stage::One, 0, &cfg);
    assert!(train_stage(&mut f.store, &f.model, &cfg, &items, &f.cache, &mut st, None, |_, _, _| {}).is_err());
    let mut st = TrainState::new(Stage::Two, 0, &cfg);
    assert!(train_stage(&mut f.store, &f.model, &cfg, &items, &f.cache, &mut st, None, |_, _, _| {}).is_ok());
}

#[test]
fn training_never_touches_frozen_tensors() {
    let mut f = fixture(4);
    let before = f.store.clone();
    let digest = frozen_digest(&f.store);
    let cfg = StageConfig { lr: 1e-2, epochs: 3, batch: 3 };
    let mut st = TrainState::new(Stage::One, 0, &cfg);
    train_stage(&mut f.store, &f.model, &cfg, &balanced_items(), &f.cache, &mut st, None, |_, _, _| {}).unwrap();
    let mut st = TrainState::new(Stage::Two, 0, &cfg);
    train_stage(&mut f.store, &f.model, &cfg, &balanced_items(), &f.cache, &mut st, None, |_, _, _| {}).unwrap();
    assert_eq!(frozen_digest(&f.store), digest);
    let mut moved = 0;
    for ((_, n, a, t), (_, _, b, _)) in f.store.iter().zip(before.iter()) {
        if t {
            moved += (a != b) as usize;
        } else {
            assert_eq!(a.data(), b.data(), "{n} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn stage_losses_are_deterministic_and_decrease() {
    let run = || {
        let mut f = fixture(5);
        let cfg = StageConfig { lr: 1e-2, epochs: 8, batch: 4 };
        let mut st = TrainState::new(Stage::One, 7, &cfg);
        let rep = train_stage(&mut f.store, &f.model, &cfg, &balanced_items(), &f.cache, &mut st, None, |_, _, _| {}).unwrap();
        (rep, st.step_losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a, b);
    assert_eq!(a.epoch_losses.len(), 8);
    assert!(a.epoch_losses[7] < a.epoch_losses[0], "{:?}", a.epoch_losses);
}

#[test]
fn resume_from_checkpoint_mid_epoch_is_bitwise() {
    let cfg = StageConfig { lr: 5e-3, epochs: 3, batch: 3 };
    let items = balanced_items();

    let mut full = fixture(6);
    let mut st = TrainState::new(Stage::Two, 11, &cfg);
    train_stage(&mut full.store, &full.model, &cfg, &items, &full.cache, &mut st, None, |_, _, _| {}).unwrap();
    let full_losses = st.step_losses.clone();

    let mut part = fixture(6);
    let mut st = TrainState::new(Stage::Two, 11, &cfg);
    train_stage(&mut part.store, &part.model, &cfg, &items, &part.cache, &mut st, Some(4), |_, _, _| {}).unwrap();
    assert_eq!((st.epoch, st.step), (1, 1));
    let (_, moments) = st.adam.export(&part.store);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ecgm");
    save_checkpoint(&path, &Checkpoint::from_store(&part.store, &moments, st.to_blob(), [7; 32])).unwrap();

    let ck = load_checkpoint(&path).unwrap();
    let mut store = ck.store().unwrap();
    let mut resumed = TrainState::from_blob(&ck.state, &store, &ck.optimizer_tensors(), &cfg).unwrap();
    train_stage(&mut store, &part.model, &cfg, &items, &part.cache, &mut resumed, None, |_, _, _| {}).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.step_losses), bits(&full_losses));
    for ((_, n, a, _), (_, _, b, _)) in store.iter().zip(full.store.iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let mut f = fixture(8);
    let cfg = StageConfig { lr: 1e-2, epochs: 1, batch: 4 };
    let mut st = TrainState::new(Stage::One, 0, &cfg);
    train_stage(&mut f.store, &f.model, &cfg, &balanced_items(), &f.cache, &mut st, None, |_, _, _| {}).unwrap();
    let (_, moments) = st.adam.export(&f.store);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ecgm"), dir.path().join("b.ecgm"));
    save_checkpoint(&p1, &Checkpoint::from_store(&f.store, &moments, st.to_blob(), [1; 32])).unwrap();
    let ck = load_checkpoint(&p1).unwrap();
    save_checkpoint(&p2, &ck).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let store = ck.store().unwrap();
    for ((_, n, a, ta), (_, _, b, tb)) in store.iter().zip(f.store.iter()) {
        assert_eq!((a.data(), ta), (b.data(), tb), "{n}");
    }
    let back = TrainState::from_blob(&ck.state, &store, &ck.optimizer_tensors(), &cfg).unwrap();
    assert_eq!(back, st);

    let mut bytes = std::fs::read(&p1).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&p2, &bytes).unwrap();
    let e = load_checkpoint(&p2).unwrap_err();
    assert!(e.to_string().contains("digest"), "{e}");
}
