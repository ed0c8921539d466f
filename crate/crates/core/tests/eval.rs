use std::collections::{BTreeSet, HashMap};

use ecg_mllm::bridge::template_text;
use ecg_mllm::encoder::EncoderConfig;
use ecg_mllm::error::Error;
use ecg_mllm::eval::{
    auc, evaluate, evaluate_replaced, random_ecg_test, random_replacements, zero_shot_eval, zero_shot_prompt, Answerer, ModelAnswerer, Subset,
};
use ecg_mllm::model::{EcgCache, EcgLlm, ModelConfig};
use ecg_mllm::synth::{Condition, EcgRecord, QType, QaItem, Scope, Severity};
use ecg_mllm::tensor::{ParamStore, Tensor};
use ecg_mllm::textlm::{LmConfig, Tokenizer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

#[test]
fn auc_matches_pairwise_oracle_on_200_cases() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for case in 0..200 {
        let len = r.random_range(2..12);
        let mut labels: Vec<bool> = (0..len).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..len).map(|_| r.random_range(0..4) as f64 * 0.5).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels), "case {case}: {scores:?} {labels:?}");
    }
}

#[test]
fn six_point_mixed_case() {
    let s = [0.1, 0.4, 0.4, 0.35, 0.8, 0.4];
    let l = [false, false, true, true, true, false];
    // Positives 0.4, 0.35, 0.8 against negatives 0.1, 0.4, 0.4: 5 wins and 2 ties of 9 pairs.
    assert_eq!(auc(&s, &l).unwrap(), 6.0 / 9.0);
    assert_eq!(brute_auc(&s, &l), 6.0 / 9.0);
}

#[test]
fn auc_rejects_single_class_and_nan() {
    assert!(matches!(auc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedAuc(_))));
    assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    assert!(auc(&[0.2], &[true, false]).is_err());
}

proptest! {
    #[test]
    fn negated_scores_complement_auc(pairs in prop::collection::vec((0u8..5, any::<bool>()), 2..40)) {
        let mut labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        labels[0] = true;
        labels[1] = false;
        let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert_eq!(auc(&s, &labels).unwrap() + auc(&neg, &labels).unwrap(), 1.0);
    }
}

// --------------------------------------------------------------- evaluate

fn item(id: usize, scope: Scope, qtype: QType, ecgs: Vec<String>, question: &str, answer: &str) -> QaItem {
    QaItem {
        id: format!("q{id}"),
        ecg_ids: ecgs,
        template_id: format!("t{}", id % 3),
        qtype,
        scope,
        question: question.into(),
        answer: answer.into(),
        stratum: Severity::Healthy,
        options: Vec::new(),
    }
}

/// Items over every subset with answers that depend on the ECG ids.
fn mixed_items(n: usize, pool: usize, seed: u64) -> Vec<QaItem> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s = Subset::all()[i % 7];
            let ecgs: Vec<String> = (0..s.scope.n_ecgs()).map(|_| format!("r{}", r.random_range(0..pool))).collect();
            let answer = match s.qtype {
                QType::Verify => ["yes", "no"][i / 7 % 2],
                QType::Choose => "sinus rhythm",
                QType::Query => "none",
            };
            item(i, s.scope, s.qtype, ecgs, "is the rate fast ?", answer)
        })
        .collect()
}

struct Oracle(HashMap<(Vec<String>, String), String>);

impl Oracle {
    fn of(items: &[QaItem]) -> Self {
        Self(items.iter().map(|i| ((i.ecg_ids.clone(), i.question.clone()), i.answer.clone())).collect())
    }
}

impl Answerer for Oracle {
    fn answer(&self, ecg_ids: &[String], question: &str) -> ecg_mllm::error::Result<String> {
        Ok(self.0.get(&(ecg_ids.to_vec(), question.to_string())).cloned().unwrap_or_else(|| "?".into()))
    }
}

struct Constant(&'static str);

impl Answerer for Constant {
    fn answer(&self, _: &[String], _: &str) -> ecg_mllm::error::Result<String> {
        Ok(self.0.into())
    }
}

#[test]
fn oracle_answerer_is_perfect_on_every_subset() {
    let mut items = mixed_items(70, 1000, 1);
    for (k, it) in items.iter_mut().enumerate() {
        it.question = format!("question {k} ?");
    }
    let (res, preds) = evaluate(&Oracle::of(&items), &items).unwrap();
    for s in Subset::all() {
        assert_eq!(res.tally(s).accuracy(), Some(1.0), "{s}");
    }
    assert_eq!(res.total().n, 70);
    assert!(preds.iter().all(|p| p.correct));
}

#[test]
fn constant_no_on_balanced_verify_is_half() {
    let items: Vec<QaItem> = (0..40)
        .map(|i| item(i, Scope::Single, QType::Verify, vec![format!("r{i}")], "is it normal ?", if i % 2 == 0 { "yes" } else { "no" }))
        .collect();
    let (res, _) = evaluate(&Constant("No."), &items).unwrap();
    assert_eq!(res.verify().accuracy(), Some(0.5));
}

#[test]
fn subset_accuracies_recombine_and_order_does_not_matter() {
    let items = mixed_items(140, 1000, 2);
    let half = Oracle::of(&items[..70]);
    let (a, _) = evaluate(&half, &items).unwrap();
    let mut rev = items.clone();
    rev.reverse();
    let (b, _) = evaluate(&half, &rev).unwrap();
    assert_eq!(a, b);
    let t = a.total();
    let weighted: f64 = a.subsets.values().map(|s| s.accuracy().unwrap() * s.n as f64).sum::<f64>() / t.n as f64;
    assert!((weighted - t.accuracy().unwrap()).abs() < 1e-15);
}

// -------------------------------------------------------- Random ECG Test

fn pool(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

proptest! {
    #[test]
    fn replacements_never_equal_the_original(seed in any::<u64>(), size in 2usize..6) {
        let items = mixed_items(30, size, seed);
        let reps = random_replacements(&items, &pool(size), seed).unwrap();
        for it in &items {
            let r = &reps[&it.id];
            prop_assert_eq!(r.len(), it.ecg_ids.len());
            for (a, b) in r.iter().zip(&it.ecg_ids) {
                prop_assert_ne!(a, b);
            }
        }
    }
}

#[test]
fn replacements_are_seeded_and_order_free() {
    let items = mixed_items(50, 20, 3);
    let a = random_replacements(&items, &pool(20), 9).unwrap();
    let mut rev = items.clone();
    rev.reverse();
    assert_eq!(a, random_replacements(&rev, &pool(20), 9).unwrap());
    assert_ne!(a, random_replacements(&items, &pool(20), 10).unwrap());
    assert!(random_replacements(&items, &pool(1), 9).is_err());
}

#[test]
fn identity_replacement_reproduces_evaluate() {
    let items = mixed_items(70, 10, 4);
    let oracle = Oracle::of(&items[..35]);
    let (plain, _) = evaluate(&oracle, &items).unwrap();
    let identity = items.iter().map(|i| (i.id.clone(), i.ecg_ids.clone())).collect();
    assert_eq!(evaluate_replaced(&oracle, &items, &identity).unwrap(), plain);
}

#[test]
fn ecg_reading_oracle_drops_and_same_seed_repeats() {
    let mut items = mixed_items(140, 50, 5);
    for (k, it) in items.iter_mut().enumerate() {
        it.question = format!("question {k} ?");
    }
    let oracle = Oracle::of(&items);
    let a = random_ecg_test(&oracle, &items, &pool(50), 1).unwrap();
    assert_eq!(a.original.total().accuracy(), Some(1.0));
    assert!(a.total_drop().unwrap() > 0.9);
    assert_eq!(a, random_ecg_test(&oracle, &items, &pool(50), 1).unwrap());
}

// ------------------------------------------------------------ model-based

fn tiny_model(seed: u64) -> (ParamStore, EcgLlm) {
    let mut texts: Vec<String> = template_text().iter().map(|s| s.to_string()).collect();
    texts.push("is the rate fast ? yes no sinus rhythm none".into());
    texts.extend(Condition::ABNORMAL.iter().map(|c| zero_shot_prompt(*c)));
    let tok = Tokenizer::build(texts.iter().map(String::as_str));
    let cfg = ModelConfig {
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
        lm: LmConfig { vocab: 0, d_model: 16, depth: 2, heads: 2, max_context: 48, ffn_mult: 2 },
        lora_rank: 2,
        lora_alpha: 4.0,
        max_answer_tokens: 3,
    };
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let model = EcgLlm::init(&mut store, &cfg, tok, &mut r).unwrap();
    // Larger weights so greedy answers vary with the prompt.
    for name in ["lm.tok_emb", "lm.head.w"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 1.0, &mut r);
    }
    (store, model)
}

fn random_cache(n: usize, seed: u64) -> EcgCache {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut c = EcgCache::default();
    for i in 0..n {
        c.insert(format!("r{i}"), Tensor::randn(&[5, 8], 3.0, &mut r));
    }
    c
}

#[test]
fn text_only_model_shows_no_drop() {
    let (mut store, model) = tiny_model(6);
    for name in ["bridge.proj.w", "bridge.proj.b"] {
        let id = store.id(name).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let cache = random_cache(60, 7);
    let mut items = mixed_items(1050, 60, 8);
    let words = ["is the rate fast ?", "is it none ?", "sinus rhythm or none ?", "yes or no ?"];
    for (k, it) in items.iter_mut().enumerate() {
        it.question = words[k % 4].into();
    }
    let ans = ModelAnswerer { model: &model, store: &store, cache: &cache };
    let r = random_ecg_test(&ans, &items, &pool(60), 2).unwrap();
    assert!(r.total_drop().unwrap().abs() <= 0.02);
    assert_eq!(r.original, r.randomized);
}

#[test]
fn ecg_dependent_model_answers_change_with_the_ecg() {
    let (store, model) = tiny_model(9);
    let cache = random_cache(60, 10);
    let ans = ModelAnswerer { model: &model, store: &store, cache: &cache };
    let answers: BTreeSet<String> = (0..60).map(|i| ans.answer(&[format!("r{i}")], "is the rate fast ?").unwrap()).collect();
    assert!(answers.len() > 1, "{answers:?}");
}

fn record(id: &str, conditions: &[Condition]) -> EcgRecord {
    EcgRecord {
        id: id.into(),
        subject_id: id.into(),
        leads: 2,
        samples: 40,
        sample_rate_hz: 100.0,
        values: vec![0.0; 80],
        conditions: conditions.iter().copied().collect(),
        stratum: if conditions == [Condition::Normal] { Severity::Healthy } else { Severity::Sick },
    }
}

#[test]
fn zero_shot_prompt_and_single_class_error() {
    assert_eq!(zero_shot_prompt(Condition::Afib), "Does this ECG reveal any signs of atrial fibrillation?");
    let (store, model) = tiny_model(11);
    let cache = random_cache(8, 12);
    let normal: Vec<EcgRecord> = (0..8).map(|i| record(&format!("r{i}"), &[Condition::Normal])).collect();
    let refs: Vec<&EcgRecord> = normal.iter().collect();
    let e = zero_shot_eval(&model, &store, &cache, &refs, &[Condition::Stach]).unwrap_err();
    assert!(matches!(e, Error::UndefinedAuc(_)), "{e}");

    let mixed: Vec<EcgRecord> =
        (0..8).map(|i| record(&format!("r{i}"), if i < 3 { &[Condition::Stach] } else { &[Condition::Normal] })).collect();
    let refs: Vec<&EcgRecord> = mixed.iter().collect();
    let res = zero_shot_eval(&model, &store, &cache, &refs, &[Condition::Stach]).unwrap();
    assert_eq!((res[0].positives, res[0].negatives), (3, 5));
    assert!((0.0..=1.0).contains(&res[0].auc));
}
