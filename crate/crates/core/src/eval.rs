//! Exact-match accuracy per question subset, zero-shot AUC from verify-prompt
//! log-odds, and the Random ECG Test.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EcgCache, EcgLlm};
use crate::rng;
use crate::synth::{Condition, EcgRecord, QType, QaItem, Scope};
use crate::tensor::ParamStore;

const TAG_RANDOM_ECG: u64 = 30;

/// Lowercase, trim, collapse whitespace, drop one trailing period.
pub fn canonicalize(s: &str) -> String {
    let lower = s.to_lowercase();
    let joined = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    match joined.strip_suffix('.') {
        Some(t) => t.trim_end().to_string(),
        None => joined,
    }
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    canonicalize(prediction) == canonicalize(gold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Subset {
    pub scope: Scope,
    pub qtype: QType,
}

impl Subset {
    pub fn of(item: &QaItem) -> Self {
        Self { scope: item.scope, qtype: item.qtype }
    }

    /// Table order: S-Verify, S-Choose, S-Query, CC-Verify, CC-Query,
    /// CI-Verify, CI-Query.
    pub fn all() -> [Subset; 7] {
        use QType::*;
        use Scope::*;
        [
            Subset { scope: Single, qtype: Verify },
            Subset { scope: Single, qtype: Choose },
            Subset { scope: Single, qtype: Query },
            Subset { scope: ComparisonConsecutive, qtype: Verify },
            Subset { scope: ComparisonConsecutive, qtype: Query },
            Subset { scope: ComparisonIrrelevant, qtype: Verify },
            Subset { scope: ComparisonIrrelevant, qtype: Query },
        ]
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.scope.abbrev(), self.qtype)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub subsets: BTreeMap<Subset, Tally>,
}

impl EvalResult {
    pub fn add(&mut self, subset: Subset, correct: bool) {
        let t = self.subsets.entry(subset).or_default();
        t.n += 1;
        t.correct += correct as usize;
    }

    pub fn tally(&self, subset: Subset) -> Tally {
        self.subsets.get(&subset).copied().unwrap_or_default()
    }

    pub fn total(&self) -> Tally {
        self.subsets.values().fold(Tally::default(), |a, t| Tally { n: a.n + t.n, correct: a.correct + t.correct })
    }

    /// Pooled accuracy over the verify subsets.
    pub fn verify(&self) -> Tally {
        self.subsets
            .iter()
            .filter(|(s, _)| s.qtype == QType::Verify)
            .fold(Tally::default(), |a, (_, t)| Tally { n: a.n + t.n, correct: a.correct + t.correct })
    }

    /// Unweighted mean of the non-empty verify subset accuracies.
    pub fn verify_average(&self) -> Option<f64> {
        let accs: Vec<f64> = self.subsets.iter().filter(|(s, _)| s.qtype == QType::Verify).filter_map(|(_, t)| t.accuracy()).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>9}\n", "Subset", "n", "Accuracy");
        for s in Subset::all() {
            let t = self.tally(s);
            out.push_str(&format!("{:<12} {:>6} {:>9}\n", s.to_string(), t.n, fmt_acc(t.accuracy())));
        }
        let t = self.total();
        out.push_str(&format!("{:<12} {:>6} {:>9}\n", "All", t.n, fmt_acc(t.accuracy())));
        out
    }

    /// One JSON object per subset: `{subset, n, accuracy}`.
    pub fn jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in Subset::all() {
            let t = self.tally(s);
            out.push_str(&serde_json::to_string(&serde_json::json!({"subset": s.to_string(), "n": t.n, "accuracy": t.accuracy()}))?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a))
}

/// Anything that answers a question about a list of ECG ids.
pub trait Answerer {
    fn answer(&self, ecg_ids: &[String], question: &str) -> Result<String>;
}

pub struct ModelAnswerer<'a> {
    pub model: &'a EcgLlm,
    pub store: &'a ParamStore,
    pub cache: &'a EcgCache,
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, ecg_ids: &[String], question: &str) -> Result<String> {
        self.model.answer(self.store, self.cache, ecg_ids, question)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub ecg_ids: Vec<String>,
    pub prediction: String,
    pub gold: String,
    pub correct: bool,
}

/// Greedy answers per item, scored by exact match and tallied per subset.
pub fn evaluate(answerer: &dyn Answerer, items: &[QaItem]) -> Result<(EvalResult, Vec<Prediction>)> {
    evaluate_with(answerer, items, |item| Ok(item.ecg_ids.clone()))
}

fn evaluate_with(answerer: &dyn Answerer, items: &[QaItem], mut ecgs: impl FnMut(&QaItem) -> Result<Vec<String>>) -> Result<(EvalResult, Vec<Prediction>)> {
    let mut result = EvalResult::default();
    let mut preds = Vec::with_capacity(items.len());
    for item in items {
        let ids = ecgs(item)?;
        let p = answerer.answer(&ids, &item.question)?;
        let correct = exact_match(&p, &item.answer);
        result.add(Subset::of(item), correct);
        preds.push(Prediction { item_id: item.id.clone(), ecg_ids: ids, prediction: p, gold: item.answer.clone(), correct });
    }
    Ok((result, preds))
}

// -------------------------------------------------------------------- AUC

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {bad} is not a number")));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positives and {neg} negatives; both classes are required")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        for k in &idx[i..=j] {
            if labels[*k] {
                rank2_pos += mid2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAuc {
    pub label: Condition,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn zero_shot_prompt(label: Condition) -> String {
    format!("Does this ECG reveal any signs of {}?", label.phrase())
}

/// Verify-prompt log-odds `logp(yes) − logp(no)` per record.
pub fn zero_shot_scores(model: &EcgLlm, store: &ParamStore, cache: &EcgCache, records: &[&EcgRecord], label: Condition) -> Result<Vec<f64>> {
    let q = zero_shot_prompt(label);
    records
        .iter()
        .map(|r| {
            let prefix = model.prompt_tensor(store, cache, std::slice::from_ref(&r.id), &q)?;
            let lp = crate::textlm::answer_token_scores(&model.lm, store, &model.tok, &prefix, &["yes", "no"])?;
            Ok(lp[0] - lp[1])
        })
        .collect()
}

pub fn zero_shot_eval(model: &EcgLlm, store: &ParamStore, cache: &EcgCache, records: &[&EcgRecord], labels: &[Condition]) -> Result<Vec<LabelAuc>> {
    labels
        .iter()
        .map(|&label| {
            let truth: Vec<bool> = records.iter().map(|r| r.has(label)).collect();
            let positives = truth.iter().filter(|t| **t).count();
            let scores = zero_shot_scores(model, store, cache, records, label)?;
            Ok(LabelAuc { label, auc: auc(&scores, &truth)?, positives, negatives: truth.len() - positives })
        })
        .collect()
}

// -------------------------------------------------------- Random ECG Test

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RandomEcgResult {
    pub original: EvalResult,
    pub randomized: EvalResult,
}

impl RandomEcgResult {
    pub fn drop(&self, subset: Subset) -> Option<f64> {
        Some(self.original.tally(subset).accuracy()? - self.randomized.tally(subset).accuracy()?)
    }

    pub fn verify_drop(&self) -> Option<f64> {
        Some(self.original.verify().accuracy()? - self.randomized.verify().accuracy()?)
    }

    pub fn total_drop(&self) -> Option<f64> {
        Some(self.original.total().accuracy()? - self.randomized.total().accuracy()?)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>9} {:>11} {:>7}\n", "Subset", "n", "Original", "Random ECG", "Drop");
        let mut row = |name: String, o: Tally, r: Tally| {
            let drop = o.accuracy().zip(r.accuracy()).map(|(a, b)| format!("{:.1}", 100.0 * (a - b)));
            out.push_str(&format!(
                "{:<12} {:>6} {:>9} {:>11} {:>7}\n",
                name,
                o.n,
                fmt_acc(o.accuracy()),
                fmt_acc(r.accuracy()),
                drop.unwrap_or_else(|| "-".into())
            ));
        };
        for s in Subset::all() {
            row(s.to_string(), self.original.tally(s), self.randomized.tally(s));
        }
        row("Verify".into(), self.original.verify(), self.randomized.verify());
        row("All".into(), self.original.total(), self.randomized.total());
        out
    }

    pub fn jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in Subset::all() {
            let (o, r) = (self.original.tally(s), self.randomized.tally(s));
            let v = serde_json::json!({
                "subset": s.to_string(), "n": o.n,
                "accuracy": o.accuracy(), "random_accuracy": r.accuracy(), "drop": self.drop(s),
            });
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// For every item and every ECG slot, a uniformly drawn pool record other
/// than the original. Streams are keyed by item id and slot, so the
/// assignment does not depend on item order.
pub fn random_replacements(items: &[QaItem], pool: &[String], seed: u64) -> Result<BTreeMap<String, Vec<String>>> {
    if pool.len() < 2 {
        return Err(Error::Data(format!("random ECG pool has {} record(s); at least 2 are needed", pool.len())));
    }
    let mut out = BTreeMap::new();
    for item in items {
        let mut ids = Vec::with_capacity(item.ecg_ids.len());
        for (slot, orig) in item.ecg_ids.iter().enumerate() {
            let mut r = rng::stream(seed, &[TAG_RANDOM_ECG, rng::hash_str(&item.id), slot as u64]);
            let candidates = pool.len() - pool.iter().filter(|p| *p == orig).count();
            if candidates == 0 {
                return Err(Error::Data(format!("no replacement available for {orig}")));
            }
            let k = r.random_range(0..candidates);
            ids.push(pool.iter().filter(|p| *p != orig).nth(k).expect("k < candidates").clone());
        }
        out.insert(item.id.clone(), ids);
    }
    Ok(out)
}

/// Evaluates items as given and again with every ECG replaced by a random
/// pool record.
pub fn random_ecg_test(answerer: &dyn Answerer, items: &[QaItem], pool: &[String], seed: u64) -> Result<RandomEcgResult> {
    let (original, _) = evaluate(answerer, items)?;
    let randomized = evaluate_replaced(answerer, items, &random_replacements(items, pool, seed)?)?;
    Ok(RandomEcgResult { original, randomized })
}

pub fn evaluate_replaced(answerer: &dyn Answerer, items: &[QaItem], replacements: &BTreeMap<String, Vec<String>>) -> Result<EvalResult> {
    let (r, _) = evaluate_with(answerer, items, |item| {
        replacements.get(&item.id).cloned().ok_or_else(|| Error::Data(format!("no replacement for item {}", item.id)))
    })?;
    Ok(r)
}
