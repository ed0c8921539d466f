use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::waveform::{synth_ecg, synth_followup};
use super::{render_report, rhythm_phrase, Condition, ConditionSet, EcgRecord, GeneratorConfig, Severity};
use crate::debias::{Breadth, QuestionTemplate, TemplateBank};
use crate::error::{Error, Result};
use crate::rng;

const FOLLOWUP_DRAW: u64 = 4;
const CI_PAIRS: u64 = 5;
const ITEMS: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    Verify,
    Choose,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Single,
    ComparisonConsecutive,
    ComparisonIrrelevant,
}

impl Scope {
    pub fn abbrev(self) -> &'static str {
        match self {
            Scope::Single => "S",
            Scope::ComparisonConsecutive => "CC",
            Scope::ComparisonIrrelevant => "CI",
        }
    }

    pub fn n_ecgs(self) -> usize {
        match self {
            Scope::Single => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QType::Verify => "Verify",
            QType::Choose => "Choose",
            QType::Query => "Query",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub ecg_ids: Vec<String>,
    pub template_id: String,
    pub qtype: QType,
    pub scope: Scope,
    pub question: String,
    pub answer: String,
    pub stratum: Severity,
    /// Choice options, kept so the question can be re-rendered from another form.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

/// Per-record labels and report, stored next to the waveform archive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub subject_id: String,
    pub conditions: ConditionSet,
    pub stratum: Severity,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<EcgRecord>,
    pub meta: Vec<RecordMeta>,
    pub items: Vec<QaItem>,
}

impl Corpus {
    pub fn record_index(&self) -> HashMap<&str, usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
    }
}

fn abnormal(c: &ConditionSet) -> Vec<Condition> {
    c.iter().copied().filter(|x| *x != Condition::Normal).collect()
}

fn list_or_none(cs: impl IntoIterator<Item = Condition>) -> String {
    let phrases: Vec<&str> = cs.into_iter().map(|c| c.phrase()).collect();
    if phrases.is_empty() {
        "none".to_string()
    } else {
        phrases.join(", ")
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Ground-truth answer of `template` for the given record conditions.
pub fn answer_for(template: &QuestionTemplate, conds: &[&ConditionSet]) -> Result<String> {
    if conds.len() != template.scope.n_ecgs() {
        return Err(Error::Data(format!("template {} needs {} ecgs", template.template_id, template.scope.n_ecgs())));
    }
    let first = conds[0];
    let second = conds.get(1).copied();
    let target = || {
        template
            .condition
            .ok_or_else(|| Error::Data(format!("specific template {} has no condition", template.template_id)))
    };
    Ok(match (template.scope, template.qtype, template.breadth) {
        (Scope::Single, QType::Verify, Breadth::Broad) => yes_no(!super::is_normal(first)),
        (Scope::Single, QType::Verify, Breadth::Specific) => yes_no(first.contains(&target()?)),
        (Scope::Single, QType::Choose, _) => rhythm_phrase(first).to_string(),
        (Scope::Single, QType::Query, _) => list_or_none(abnormal(first)),
        (_, _, _) => {
            let second = second.expect("checked above");
            match (template.scope, template.qtype, template.breadth) {
                (Scope::ComparisonConsecutive, QType::Verify, Breadth::Broad) => yes_no(first != second),
                (Scope::ComparisonConsecutive, QType::Verify, Breadth::Specific) => {
                    let c = target()?;
                    yes_no(second.contains(&c) && !first.contains(&c))
                }
                (Scope::ComparisonConsecutive, QType::Query, _) => {
                    list_or_none(abnormal(second).into_iter().filter(|c| !first.contains(c)))
                }
                (Scope::ComparisonIrrelevant, QType::Verify, Breadth::Broad) => {
                    yes_no(super::is_normal(first) && super::is_normal(second))
                }
                (Scope::ComparisonIrrelevant, QType::Verify, Breadth::Specific) => {
                    let c = target()?;
                    yes_no(first.contains(&c) || second.contains(&c))
                }
                (Scope::ComparisonIrrelevant, QType::Query, _) => {
                    list_or_none(abnormal(first).into_iter().filter(|c| second.contains(c)))
                }
                _ => {
                    return Err(Error::Data(format!(
                        "no answer rule for template {} ({:?} {:?})",
                        template.template_id, template.scope, template.qtype
                    )))
                }
            }
        }
    })
}

struct ItemFactory<'a> {
    config: &'a GeneratorConfig,
    bank: &'a TemplateBank,
    items: Vec<QaItem>,
}

impl ItemFactory<'_> {
    fn push(&mut self, template: &QuestionTemplate, recs: &[&EcgRecord], options: Vec<String>, r: &mut ChaCha8Rng) -> Result<()> {
        let form = r.random_range(0..template.train_forms.len());
        let question = template.render(&template.train_forms[form], &options)?;
        let conds: Vec<&ConditionSet> = recs.iter().map(|x| &x.conditions).collect();
        let answer = answer_for(template, &conds)?;
        self.items.push(QaItem {
            id: format!("q{:06}", self.items.len()),
            ecg_ids: recs.iter().map(|x| x.id.clone()).collect(),
            template_id: template.template_id.clone(),
            qtype: template.qtype,
            scope: template.scope,
            question,
            answer,
            stratum: recs[0].stratum,
            options,
        });
        Ok(())
    }

    /// Draws a verify template: breadth depends on the asker's stratum, and
    /// sick askers of specific questions tend to ask about their own findings.
    fn verify(&mut self, scope: Scope, recs: &[&EcgRecord], r: &mut ChaCha8Rng) -> Result<()> {
        let stratum = recs[0].stratum;
        let p_broad = match stratum {
            Severity::Healthy => self.config.p_broad_given_healthy,
            Severity::Sick => self.config.p_broad_given_sick,
        };
        let template = if r.random::<f64>() < p_broad {
            let broad = self.bank.select(scope, QType::Verify, Some(Breadth::Broad));
            if broad.is_empty() {
                return Err(Error::Data(format!("template bank has no broad verify template for {scope:?}")));
            }
            broad[r.random_range(0..broad.len())]
        } else {
            let own: Vec<Condition> = match scope {
                Scope::Single | Scope::ComparisonConsecutive => abnormal(&recs[recs.len() - 1].conditions),
                Scope::ComparisonIrrelevant => {
                    let mut u = abnormal(&recs[0].conditions);
                    u.extend(abnormal(&recs[1].conditions).into_iter().filter(|c| !recs[0].has(*c)));
                    u
                }
            };
            let use_own = stratum == Severity::Sick && !own.is_empty() && r.random::<f64>() < self.config.p_own_condition;
            let target = if use_own {
                own[r.random_range(0..own.len())]
            } else {
                Condition::ABNORMAL[r.random_range(0..Condition::ABNORMAL.len())]
            };
            self.bank
                .specific(scope, target)
                .ok_or_else(|| Error::Data(format!("template bank has no specific verify template for {scope:?} {target}")))?
        };
        let template = template.clone();
        self.push(&template, recs, Vec::new(), r)
    }

    fn others(&mut self, scope: Scope, recs: &[&EcgRecord], r: &mut ChaCha8Rng) -> Result<()> {
        let templates: Vec<QuestionTemplate> = self
            .bank
            .templates()
            .iter()
            .filter(|t| t.scope == scope && t.qtype != QType::Verify)
            .cloned()
            .collect();
        for t in &templates {
            let options = if t.qtype == QType::Choose {
                let truth = rhythm_phrase(&recs[0].conditions).to_string();
                let pool: Vec<&str> = ["sinus rhythm"]
                    .into_iter()
                    .chain(Condition::RHYTHMS.iter().map(|c| c.phrase()))
                    .filter(|p| *p != truth)
                    .collect();
                let distractor = pool[r.random_range(0..pool.len())].to_string();
                if r.random::<bool>() {
                    vec![truth, distractor]
                } else {
                    vec![distractor, truth]
                }
            } else {
                Vec::new()
            };
            self.push(t, recs, options, r)?;
        }
        Ok(())
    }

    fn group(&mut self, scope: Scope, recs: &[&EcgRecord], key: u64) -> Result<()> {
        let mut r = rng::stream(self.config.seed, &[ITEMS, scope as u64, key]);
        for _ in 0..self.config.verify_per_record {
            self.verify(scope, recs, &mut r)?;
        }
        self.others(scope, recs, &mut r)
    }
}

/// Generates records, reports and QA items. A pure function of its inputs.
pub fn make_corpus(config: &GeneratorConfig, bank: &TemplateBank) -> Result<Corpus> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.n_records);
    let mut cc_pairs = Vec::new();
    let mut subject = 0u64;
    while records.len() < config.n_records {
        let first = synth_ecg(config, subject);
        let follow = records.len() + 1 < config.n_records
            && rng::stream(config.seed, &[FOLLOWUP_DRAW, subject]).random::<f64>() < config.p_followup;
        if follow {
            let second = synth_followup(config, subject, &first.conditions);
            cc_pairs.push((records.len(), records.len() + 1));
            records.push(first);
            records.push(second);
        } else {
            records.push(first);
        }
        subject += 1;
    }

    let mut ci_pairs = Vec::new();
    let mut r = rng::stream(config.seed, &[CI_PAIRS]);
    let n_ci = config.n_records / 5;
    let mut attempts = 0;
    while ci_pairs.len() < n_ci && attempts < 100 * n_ci.max(1) {
        attempts += 1;
        let (a, b) = (r.random_range(0..records.len()), r.random_range(0..records.len()));
        if records[a].subject_id != records[b].subject_id {
            ci_pairs.push((a, b));
        }
    }

    let mut factory = ItemFactory { config, bank, items: Vec::new() };
    for (i, rec) in records.iter().enumerate() {
        factory.group(Scope::Single, &[rec], i as u64)?;
    }
    for (k, &(a, b)) in cc_pairs.iter().enumerate() {
        factory.group(Scope::ComparisonConsecutive, &[&records[a], &records[b]], k as u64)?;
    }
    for (k, &(a, b)) in ci_pairs.iter().enumerate() {
        factory.group(Scope::ComparisonIrrelevant, &[&records[a], &records[b]], k as u64)?;
    }
    let items = factory.items;

    let meta = records
        .iter()
        .map(|rec| {
            Ok(RecordMeta {
                id: rec.id.clone(),
                subject_id: rec.subject_id.clone(),
                conditions: rec.conditions.clone(),
                stratum: rec.stratum,
                report: render_report(&rec.conditions)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { records, meta, items })
}
