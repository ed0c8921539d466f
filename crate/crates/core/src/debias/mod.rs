//! Question templates, bias auditing, and the balanced stage-1 verify set.

mod templates;

pub use templates::{Breadth, QuestionTemplate, TemplateBank};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::{QType, QaItem, RecordMeta, Severity};

const BALANCE: u64 = 10;
const SPLIT: u64 = 11;
const RENDER: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub template_id: String,
    pub question: String,
    pub breadth: Breadth,
    pub qtype: QType,
    pub count: usize,
    pub normal_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Normal-ECG ratio over all verify items of broad templates.
    pub broad_ratio: Option<f64>,
    /// Normal-ECG ratio over all verify items of specific templates.
    pub specific_ratio: Option<f64>,
    pub total: usize,
    pub warnings: Vec<String>,
}

impl BiasReport {
    /// Two-column text table: question and normal-ECG ratio.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.question.len()).max().unwrap_or(8).max(24);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  Normal ECG Ratio", "Question");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>5.1}%", r.question, 100.0 * r.normal_ratio);
        }
        for (label, v) in [("all broad verify templates", self.broad_ratio), ("all specific verify templates", self.specific_ratio)] {
            if let Some(v) = v {
                let _ = writeln!(s, "{:<width$}  {:>5.1}%", label, 100.0 * v);
            }
        }
        s
    }
}

/// Fraction of items per template whose first ECG is normal.
///
/// Templates without items are left out of the rows and noted in `warnings`.
pub fn compute_bias_report(items: &[QaItem], records: &[RecordMeta], bank: &TemplateBank) -> Result<BiasReport> {
    let normal: HashMap<&str, bool> = records.iter().map(|r| (r.id.as_str(), r.stratum == Severity::Healthy)).collect();
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut by_breadth: BTreeMap<Breadth, (usize, usize)> = BTreeMap::new();
    for item in items {
        let first = item
            .ecg_ids
            .first()
            .ok_or_else(|| Error::Data(format!("item {} references no ecg", item.id)))?;
        for id in &item.ecg_ids {
            if !normal.contains_key(id.as_str()) {
                return Err(Error::Data(format!("item {} references unknown ecg {id}", item.id)));
            }
        }
        let template = bank
            .get(&item.template_id)
            .ok_or_else(|| Error::Data(format!("item {} uses unknown template {}", item.id, item.template_id)))?;
        let is_normal = normal[first.as_str()] as usize;
        let e = counts.entry(item.template_id.as_str()).or_default();
        e.0 += 1;
        e.1 += is_normal;
        if template.qtype == QType::Verify {
            let b = by_breadth.entry(template.breadth).or_default();
            b.0 += 1;
            b.1 += is_normal;
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for t in bank.templates() {
        match counts.get(t.template_id.as_str()) {
            Some(&(n, k)) => rows.push(BiasRow {
                template_id: t.template_id.clone(),
                question: t.render(&t.train_forms[0], &["{a}".into(), "{b}".into()])?,
                breadth: t.breadth,
                qtype: t.qtype,
                count: n,
                normal_ratio: k as f64 / n as f64,
            }),
            None => {
                let w = format!("template {} has no items; omitted from the report", t.template_id);
                log::warn!("{w}");
                warnings.push(w);
            }
        }
    }
    let ratio = |b: Breadth| by_breadth.get(&b).map(|&(n, k)| k as f64 / n as f64);
    Ok(BiasReport { rows, broad_ratio: ratio(Breadth::Broad), specific_ratio: ratio(Breadth::Specific), total: items.len(), warnings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalancedSet {
    pub items: Vec<QaItem>,
    /// Templates dropped for lacking one answer class.
    pub excluded: Vec<String>,
}

fn yes_no(item: &QaItem) -> Result<bool> {
    match item.answer.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(Error::Data(format!("verify item {} has non yes/no answer {other:?}", item.id))),
    }
}

/// Per template, undersamples the majority answer to the minority count.
/// Items keep their input order.
pub fn build_debiased_verify_set(items: &[QaItem], seed: u64) -> Result<BalancedSet> {
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if item.qtype != QType::Verify {
            return Err(Error::Data(format!("item {} is {:?}; the balanced set takes verify items only", item.id, item.qtype)));
        }
        let g = groups.entry(item.template_id.as_str()).or_default();
        if yes_no(item)? {
            g.0.push(i);
        } else {
            g.1.push(i);
        }
    }
    let mut keep = BTreeSet::new();
    let mut excluded = Vec::new();
    for (tid, (mut yes, mut no)) in groups {
        let k = yes.len().min(no.len());
        if k == 0 {
            log::warn!("template {tid} lacks one answer class ({} yes, {} no); excluded", yes.len(), no.len());
            excluded.push(tid.to_string());
            continue;
        }
        let mut r = rng::stream(seed, &[BALANCE, rng::hash_str(tid)]);
        yes.shuffle(&mut r);
        no.shuffle(&mut r);
        keep.extend(yes[..k].iter().copied());
        keep.extend(no[..k].iter().copied());
    }
    if keep.is_empty() {
        return Err(Error::Data("no template has both yes and no answers; balanced set is empty".into()));
    }
    Ok(BalancedSet { items: keep.into_iter().map(|i| items[i].clone()).collect(), excluded })
}

/// Checks that every item is a verify item and every template is exactly
/// balanced between yes and no.
pub fn check_balanced(items: &[QaItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Data("balanced set is empty".into()));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for item in items {
        if item.qtype != QType::Verify {
            return Err(Error::Data(format!("item {} is {:?}, not verify", item.id, item.qtype)));
        }
        let e = counts.entry(item.template_id.as_str()).or_default();
        if yes_no(item)? {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    for (tid, (y, n)) in counts {
        if y != n {
            return Err(Error::Data(format!("template {tid} is unbalanced: {y} yes vs {n} no")));
        }
    }
    Ok(())
}

/// Empirical mutual information (nats) between template id and answer.
pub fn template_answer_mi(items: &[QaItem]) -> f64 {
    let n = items.len() as u128;
    let mut joint: BTreeMap<(&str, &str), u128> = BTreeMap::new();
    let mut t: BTreeMap<&str, u128> = BTreeMap::new();
    let mut a: BTreeMap<&str, u128> = BTreeMap::new();
    for item in items {
        *joint.entry((&item.template_id, &item.answer)).or_default() += 1;
        *t.entry(&item.template_id).or_default() += 1;
        *a.entry(&item.answer).or_default() += 1;
    }
    joint
        .iter()
        .map(|(&(ti, ai), &nta)| {
            // Integer ratio keeps exact independence at exactly zero.
            let num = nta * n;
            let den = t[ti] * a[ai];
            let ratio = if num == den { 1.0 } else { num as f64 / den as f64 };
            (nta as f64 / n as f64) * ratio.ln()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<QaItem>,
    pub test: Vec<QaItem>,
    /// Items whose ECGs straddle the subject split.
    pub dropped: usize,
    pub test_subjects: BTreeSet<String>,
}

/// Subject-disjoint split; train questions are re-rendered from train forms,
/// test questions from test forms.
pub fn adversarial_split(items: &[QaItem], bank: &TemplateBank, records: &[RecordMeta], seed: u64, test_fraction: f64) -> Result<Split> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction {test_fraction} is outside [0, 1]")));
    }
    for t in bank.templates() {
        t.check()?;
    }
    let subject_of: HashMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.subject_id.as_str())).collect();
    let mut subjects: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    subjects.shuffle(&mut rng::stream(seed, &[SPLIT]));
    let n_test = (subjects.len() as f64 * test_fraction).round() as usize;
    let test_subjects: BTreeSet<String> = subjects[..n_test].iter().map(|s| s.to_string()).collect();

    let mut split = Split { train: Vec::new(), test: Vec::new(), dropped: 0, test_subjects };
    for item in items {
        let template = bank
            .get(&item.template_id)
            .ok_or_else(|| Error::Data(format!("item {} uses unknown template {}", item.id, item.template_id)))?;
        let mut in_test = Vec::with_capacity(item.ecg_ids.len());
        for id in &item.ecg_ids {
            let s = subject_of
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("item {} references unknown ecg {id}", item.id)))?;
            in_test.push(split.test_subjects.contains(*s));
        }
        let all_test = in_test.iter().all(|b| *b);
        if !all_test && in_test.iter().any(|b| *b) {
            split.dropped += 1;
            continue;
        }
        let forms = if all_test { &template.test_forms } else { &template.train_forms };
        let form = &forms[rng::stream(seed, &[RENDER, rng::hash_str(&item.id)]).random_range(0..forms.len())];
        let mut out = item.clone();
        out.question = template.render(form, &item.options)?;
        if all_test {
            split.test.push(out);
        } else {
            split.train.push(out);
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRisk {
    /// Item count and yes-ratio per stratum.
    pub by_stratum: BTreeMap<Severity, (usize, f64)>,
    pub raw_yes: f64,
    /// Σ_c P̂(yes | template, c) P̂(c), with P̂(c) renormalized over the
    /// strata in which the template occurs.
    pub adjusted_yes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedRisk {
    pub p_stratum: BTreeMap<Severity, f64>,
    pub templates: BTreeMap<String, TemplateRisk>,
}

/// Stratified answer tables for the backdoor-adjusted yes-rate of each
/// verify template.
pub fn stratified_risk(items: &[QaItem]) -> StratifiedRisk {
    let verify: Vec<&QaItem> = items.iter().filter(|i| i.qtype == QType::Verify).collect();
    let mut strata: BTreeMap<Severity, usize> = BTreeMap::new();
    let mut cells: BTreeMap<&str, BTreeMap<Severity, (usize, usize)>> = BTreeMap::new();
    for item in &verify {
        *strata.entry(item.stratum).or_default() += 1;
        let c = cells.entry(&item.template_id).or_default().entry(item.stratum).or_default();
        c.0 += 1;
        c.1 += (item.answer == "yes") as usize;
    }
    let n = verify.len().max(1) as f64;
    let p_stratum: BTreeMap<Severity, f64> = strata.iter().map(|(c, k)| (*c, *k as f64 / n)).collect();
    let templates = cells
        .into_iter()
        .map(|(tid, by)| {
            let total: usize = by.values().map(|v| v.0).sum();
            let yes: usize = by.values().map(|v| v.1).sum();
            let mass: f64 = by.keys().map(|c| p_stratum[c]).sum();
            let adjusted = by.iter().map(|(c, (k, y))| (*y as f64 / *k as f64) * p_stratum[c]).sum::<f64>() / mass;
            let by_stratum = by.iter().map(|(c, (k, y))| (*c, (*k, *y as f64 / *k as f64))).collect();
            (tid.to_string(), TemplateRisk { by_stratum, raw_yes: yes as f64 / total as f64, adjusted_yes: adjusted })
        })
        .collect();
    StratifiedRisk { p_stratum, templates }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Scope;

    pub(crate) fn item(id: usize, tid: &str, answer: &str, stratum: Severity) -> QaItem {
        QaItem {
            id: format!("q{id}"),
            ecg_ids: vec![format!("e{id}")],
            template_id: tid.into(),
            qtype: QType::Verify,
            scope: Scope::Single,
            question: String::new(),
            answer: answer.into(),
            stratum,
            options: Vec::new(),
        }
    }

    #[test]
    fn five_yes_three_no_gives_three_each() {
        let answers = ["yes", "no", "yes", "yes", "no", "yes", "no", "yes"];
        let items: Vec<QaItem> = answers.iter().enumerate().map(|(i, a)| item(i, "t", a, Severity::Sick)).collect();
        let b = build_debiased_verify_set(&items, 0).unwrap();
        assert_eq!(b.items.len(), 6);
        assert_eq!(b.items.iter().filter(|i| i.answer == "yes").count(), 3);
        // every "no" survives
        assert_eq!(b.items.iter().filter(|i| i.answer == "no").count(), 3);
        check_balanced(&b.items).unwrap();
        assert_eq!(template_answer_mi(&b.items), 0.0);
    }

    #[test]
    fn single_class_template_is_excluded() {
        let mut items: Vec<QaItem> = (0..4).map(|i| item(i, "only_yes", "yes", Severity::Sick)).collect();
        items.push(item(10, "mixed", "yes", Severity::Sick));
        items.push(item(11, "mixed", "no", Severity::Healthy));
        let b = build_debiased_verify_set(&items, 0).unwrap();
        assert_eq!(b.excluded, vec!["only_yes".to_string()]);
        assert_eq!(b.items.len(), 2);
        let only: Vec<QaItem> = (0..4).map(|i| item(i, "t", "yes", Severity::Sick)).collect();
        assert!(build_debiased_verify_set(&only, 0).is_err());
    }

    #[test]
    fn non_verify_input_is_rejected() {
        let mut i = item(0, "t", "yes", Severity::Sick);
        i.qtype = QType::Query;
        assert!(build_debiased_verify_set(&[i.clone()], 0).is_err());
        assert!(check_balanced(&[i]).is_err());
    }

    #[test]
    fn mi_positive_when_template_predicts_answer() {
        let items = vec![
            item(0, "a", "yes", Severity::Sick),
            item(1, "a", "yes", Severity::Sick),
            item(2, "b", "no", Severity::Sick),
            item(3, "b", "no", Severity::Sick),
        ];
        assert!((template_answer_mi(&items) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ratio_counts_first_ecg() {
        let bank = TemplateBank::default_bank();
        let meta: Vec<RecordMeta> = (0..4)
            .map(|i| RecordMeta {
                id: format!("e{i}"),
                subject_id: format!("s{i}"),
                conditions: Default::default(),
                stratum: if i < 3 { Severity::Healthy } else { Severity::Sick },
                report: String::new(),
            })
            .collect();
        let items: Vec<QaItem> = (0..4).map(|i| item(i, "s_verify_unusual", "no", Severity::Healthy)).collect();
        let r = compute_bias_report(&items, &meta, &bank).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].normal_ratio, 0.75);
        assert_eq!(r.rows[0].count, 4);
        assert_eq!(r.broad_ratio, Some(0.75));
        assert_eq!(r.specific_ratio, None);
        assert_eq!(r.warnings.len(), bank.templates().len() - 1);
        let mut dangling = items.clone();
        dangling[0].ecg_ids = vec!["missing".into()];
        assert!(compute_bias_report(&dangling, &meta, &bank).is_err());
    }

    #[test]
    fn stratified_risk_arithmetic() {
        // One stratum: adjusted equals raw.
        let one = vec![item(0, "t", "yes", Severity::Sick), item(1, "t", "no", Severity::Sick), item(2, "t", "yes", Severity::Sick)];
        let r = stratified_risk(&one);
        assert_eq!(r.templates["t"].adjusted_yes, r.templates["t"].raw_yes);
        // Two strata with P(c) = 1/2 overall. Template t has one healthy
        // "yes" and three sick "no": adjusted (1 + 0)/2, raw 1/4.
        let two = vec![
            item(0, "t", "yes", Severity::Healthy),
            item(1, "t", "no", Severity::Sick),
            item(2, "t", "no", Severity::Sick),
            item(3, "t", "no", Severity::Sick),
            item(4, "u", "no", Severity::Healthy),
            item(5, "u", "yes", Severity::Healthy),
        ];
        let r = stratified_risk(&two);
        assert_eq!(r.p_stratum[&Severity::Healthy], 0.5);
        assert_eq!(r.templates["t"].adjusted_yes, 0.5);
        assert_eq!(r.templates["t"].raw_yes, 0.25);
    }
}
