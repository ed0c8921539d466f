use std::collections::{BTreeMap, HashMap};

use ecg_mllm::debias::{
    adversarial_split, build_debiased_verify_set, check_balanced, compute_bias_report, template_answer_mi, Breadth, TemplateBank,
};
use ecg_mllm::synth::{
    make_corpus, read_archive, read_jsonl, synth_ecg_with, write_archive, write_jsonl, Condition, ConditionSet, Corpus,
    GeneratorConfig, QType, QaItem, RecordMeta, Scope, Severity,
};
use proptest::prelude::*;

fn set(cs: &[Condition]) -> ConditionSet {
    cs.iter().copied().collect()
}

/// Counts R peaks in a lead: local maxima above half the lead's maximum,
/// at least 0.2 s apart.
fn count_beats(x: &[f64], rate: f64) -> usize {
    let thr = 0.5 * x.iter().cloned().fold(f64::MIN, f64::max);
    let refractory = (0.2 * rate) as usize;
    let mut last: Option<usize> = None;
    let mut n = 0;
    for i in 1..x.len() - 1 {
        if x[i] > thr && x[i] >= x[i - 1] && x[i] > x[i + 1] && last.is_none_or(|l| i - l >= refractory) {
            n += 1;
            last = Some(i);
        }
    }
    n
}

#[test]
fn tachycardia_exceeds_eighteen_beats() {
    let cfg = GeneratorConfig::default();
    for seed in 0..30 {
        let r = synth_ecg_with(&cfg, seed, &set(&[Condition::Stach])).unwrap();
        let beats = count_beats(r.lead(1), r.sample_rate_hz);
        assert!(beats > 18, "seed {seed}: {beats} beats");
        let slow = synth_ecg_with(&cfg, seed, &set(&[Condition::Sbrad])).unwrap();
        assert!(count_beats(slow.lead(1), slow.sample_rate_hz) < 10);
    }
}

#[test]
fn low_voltage_is_below_forty_percent_of_paired_normal() {
    let cfg = GeneratorConfig::default();
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for seed in 0..30 {
        let normal = synth_ecg_with(&cfg, seed, &set(&[Condition::Normal])).unwrap();
        let low = synth_ecg_with(&cfg, seed, &set(&[Condition::LowVolt])).unwrap();
        assert!(max_abs(&low.values) <= 0.4 * max_abs(&normal.values), "seed {seed}");
    }
}

#[test]
fn archive_and_jsonl_round_trip() {
    let cfg = GeneratorConfig { n_records: 20, ..Default::default() };
    let corpus = make_corpus(&cfg, &TemplateBank::default_bank()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("w.ecgb");
    write_archive(&wav, &corpus.records).unwrap();
    assert_eq!(read_archive(&wav, &corpus.meta).unwrap(), corpus.records);
    let items = dir.path().join("qa.jsonl");
    write_jsonl(&items, &corpus.items).unwrap();
    assert_eq!(read_jsonl::<QaItem>(&items).unwrap(), corpus.items);

    let bytes = std::fs::read(&wav).unwrap();
    std::fs::write(&wav, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_archive(&wav, &corpus.meta).is_err());
    std::fs::write(&wav, b"XXXX").unwrap();
    assert!(read_archive(&wav, &corpus.meta).is_err());
}

fn default_corpus() -> Corpus {
    make_corpus(&GeneratorConfig::default(), &TemplateBank::default_bank()).unwrap()
}

fn condition_of(template_id: &str) -> Option<Condition> {
    let code = template_id.rsplit_once('_').map(|(head, tail)| {
        // multi-word codes: twave_inv, wide_qrs
        if head.ends_with("twave") || head.ends_with("wide") {
            format!("{}_{}", head.rsplit('_').next().unwrap(), tail)
        } else {
            tail.to_string()
        }
    })?;
    Condition::from_code(&code.to_ascii_uppercase())
}

#[test]
fn answers_and_strata_agree_with_labels() {
    let c = default_corpus();
    let meta: HashMap<&str, &RecordMeta> = c.meta.iter().map(|m| (m.id.as_str(), m)).collect();
    for m in &c.meta {
        let normal = m.conditions.len() == 1 && m.conditions.contains(&Condition::Normal);
        assert_eq!(m.stratum == Severity::Healthy, normal);
    }
    let mut checked = 0;
    for item in &c.items {
        assert_eq!(item.stratum, meta[item.ecg_ids[0].as_str()].stratum);
        if item.scope == Scope::Single && item.qtype == QType::Verify {
            let conds = &meta[item.ecg_ids[0].as_str()].conditions;
            let expect = match condition_of(&item.template_id) {
                Some(cond) => conds.contains(&cond),
                None => !conds.contains(&Condition::Normal),
            };
            assert_eq!(item.answer == "yes", expect, "{item:?}");
            checked += 1;
        }
    }
    assert!(checked > 3000);
}

#[test]
fn default_corpus_bias_pattern() {
    let c = default_corpus();
    let bank = TemplateBank::default_bank();
    let report = compute_bias_report(&c.items, &c.meta, &bank).unwrap();
    // Independent count over verify items by template breadth.
    let normal: HashMap<&str, bool> = c.meta.iter().map(|m| (m.id.as_str(), m.stratum == Severity::Healthy)).collect();
    let mut tally: BTreeMap<Breadth, (usize, usize)> = BTreeMap::new();
    for item in c.items.iter().filter(|i| i.qtype == QType::Verify) {
        let b = bank.get(&item.template_id).unwrap().breadth;
        let e = tally.entry(b).or_default();
        e.0 += 1;
        e.1 += normal[item.ecg_ids[0].as_str()] as usize;
    }
    let broad = tally[&Breadth::Broad].1 as f64 / tally[&Breadth::Broad].0 as f64;
    let specific = tally[&Breadth::Specific].1 as f64 / tally[&Breadth::Specific].0 as f64;
    assert_eq!(report.broad_ratio, Some(broad));
    assert_eq!(report.specific_ratio, Some(specific));
    assert!(broad >= 0.70, "broad {broad}");
    assert!(specific <= 0.35, "specific {specific}");
    assert_eq!(report.rows.iter().map(|r| r.count).sum::<usize>(), c.items.len());
    let unusual = report.rows.iter().find(|r| r.template_id == "s_verify_unusual").unwrap();
    assert!(unusual.normal_ratio >= 0.7);
}

#[test]
fn spec_example_config_bias_pattern() {
    let cfg = GeneratorConfig { p_broad_given_healthy: 0.9, p_broad_given_sick: 0.1, prob_sick: 0.5, ..Default::default() };
    let c = make_corpus(&cfg, &TemplateBank::default_bank()).unwrap();
    let r = compute_bias_report(&c.items, &c.meta, &TemplateBank::default_bank()).unwrap();
    assert!(r.broad_ratio.unwrap() >= 0.7);
    assert!(r.specific_ratio.unwrap() <= 0.35);
}

#[test]
fn balanced_set_is_exact_and_deterministic() {
    let c = default_corpus();
    let verify: Vec<QaItem> = c.items.iter().filter(|i| i.qtype == QType::Verify).cloned().collect();
    let b = build_debiased_verify_set(&verify, 3).unwrap();
    check_balanced(&b.items).unwrap();
    assert_eq!(template_answer_mi(&b.items), 0.0);
    assert!(template_answer_mi(&verify) > 0.0);
    assert_eq!(b, build_debiased_verify_set(&verify, 3).unwrap());
    let yes = b.items.iter().filter(|i| i.answer == "yes").count();
    assert_eq!(2 * yes, b.items.len());
    // Audit on the balanced set: every condition template answers yes half the time.
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for i in &b.items {
        let e = per.entry(&i.template_id).or_default();
        e.0 += 1;
        e.1 += (i.answer == "yes") as usize;
    }
    for (tid, (n, y)) in per {
        assert_eq!(2 * y, n, "{tid}");
    }
}

#[test]
fn adversarial_split_contract() {
    let c = default_corpus();
    let bank = TemplateBank::default_bank();
    let s = adversarial_split(&c.items, &bank, &c.meta, 0, 0.2).unwrap();
    assert!(!s.test.is_empty() && s.train.len() > s.test.len());
    assert_eq!(s.train.len() + s.test.len() + s.dropped, c.items.len());
    let train_ids: std::collections::HashSet<&str> = s.train.iter().flat_map(|i| i.ecg_ids.iter().map(String::as_str)).collect();
    for item in &s.test {
        let t = bank.get(&item.template_id).unwrap();
        for f in &t.train_forms {
            assert_ne!(item.question, t.render(f, &item.options).unwrap());
        }
        for id in &item.ecg_ids {
            assert!(!train_ids.contains(id.as_str()));
        }
    }
    for item in &s.train {
        let t = bank.get(&item.template_id).unwrap();
        assert!(t.train_forms.iter().any(|f| t.render(f, &item.options).unwrap() == item.question));
    }
    // Semantic parity: test answers are recomputed from the records' labels.
    let meta: HashMap<&str, &RecordMeta> = c.meta.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut by_template: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for item in s.test.iter().filter(|i| i.scope == Scope::Single && i.qtype == QType::Verify) {
        let conds = &meta[item.ecg_ids[0].as_str()].conditions;
        let truth = match condition_of(&item.template_id) {
            Some(cond) => conds.contains(&cond),
            None => !conds.contains(&Condition::Normal),
        };
        let e = by_template.entry(&item.template_id).or_default();
        e.0 += truth as usize;
        e.1 += (item.answer == "yes") as usize;
    }
    for (tid, (truth, yes)) in by_template {
        assert_eq!(truth, yes, "{tid}");
    }
}

fn arb_items() -> impl Strategy<Value = Vec<QaItem>> {
    prop::collection::vec((0usize..5, any::<bool>(), any::<bool>()), 1..120).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (t, yes, sick))| QaItem {
                id: format!("q{i}"),
                ecg_ids: vec![format!("e{i}")],
                template_id: format!("t{t}"),
                qtype: QType::Verify,
                scope: Scope::Single,
                question: String::new(),
                answer: if yes { "yes" } else { "no" }.into(),
                stratum: if sick { Severity::Sick } else { Severity::Healthy },
                options: Vec::new(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn balancing_removes_template_answer_dependence(items in arb_items(), seed in any::<u64>()) {
        match build_debiased_verify_set(&items, seed) {
            Ok(b) => {
                prop_assert!(check_balanced(&b.items).is_ok());
                prop_assert_eq!(template_answer_mi(&b.items), 0.0);
                // Each kept template retains 2·min(yes, no) items.
                let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
                for i in &items {
                    let e = counts.entry(&i.template_id).or_default();
                    if i.answer == "yes" { e.0 += 1 } else { e.1 += 1 }
                }
                let expect: usize = counts.values().map(|(y, n)| 2 * y.min(n)).sum();
                prop_assert_eq!(b.items.len(), expect);
            }
            Err(_) => {
                let yes = items.iter().filter(|i| i.answer == "yes").map(|i| &i.template_id).collect::<std::collections::HashSet<_>>();
                prop_assert!(items.iter().filter(|i| i.answer == "no").all(|i| !yes.contains(&i.template_id)));
            }
        }
    }
}
