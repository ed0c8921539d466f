//! Synthetic multi-lead ECGs, template reports and a confounded QA corpus.
//!
//! The generator implements a small structural causal model: a severity
//! stratum is drawn first, conditions are drawn given the stratum, and the
//! kind of question asked (broad or specific) also depends on the stratum.
//! Answers are always computed from the generated conditions.

mod archive;
mod corpus;
mod report;
mod waveform;

pub use archive::{read_archive, read_jsonl, write_archive, write_jsonl};
pub use corpus::{make_corpus, Corpus, QType, QaItem, RecordMeta, Scope};
pub use report::{passes_report_filter, render_report};
pub use waveform::{minmax_normalize, resample, synth_ecg, synth_ecg_with, synth_followup};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Normal,
    Afib,
    Sbrad,
    Stach,
    #[serde(rename = "LOWVOLT")]
    LowVolt,
    TwaveInv,
    WideQrs,
}

impl Condition {
    /// Every abnormality, in canonical order.
    pub const ABNORMAL: [Condition; 6] = [
        Condition::Afib,
        Condition::Sbrad,
        Condition::Stach,
        Condition::LowVolt,
        Condition::TwaveInv,
        Condition::WideQrs,
    ];

    pub const RHYTHMS: [Condition; 3] = [Condition::Afib, Condition::Sbrad, Condition::Stach];

    /// Surface phrase used in reports, questions and answers.
    pub fn phrase(self) -> &'static str {
        match self {
            Condition::Normal => "normal sinus rhythm",
            Condition::Afib => "atrial fibrillation",
            Condition::Sbrad => "sinus bradycardia",
            Condition::Stach => "sinus tachycardia",
            Condition::LowVolt => "low voltage",
            Condition::TwaveInv => "t wave inversion",
            Condition::WideQrs => "wide qrs complex",
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Condition::Normal => "NORMAL",
            Condition::Afib => "AFIB",
            Condition::Sbrad => "SBRAD",
            Condition::Stach => "STACH",
            Condition::LowVolt => "LOWVOLT",
            Condition::TwaveInv => "TWAVE_INV",
            Condition::WideQrs => "WIDE_QRS",
        }
    }

    pub fn from_code(code: &str) -> Option<Condition> {
        [Condition::Normal].into_iter().chain(Condition::ABNORMAL).find(|c| c.code() == code)
    }

    pub fn is_rhythm(self) -> bool {
        Condition::RHYTHMS.contains(&self)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// The confounder stratum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Healthy,
    Sick,
}

pub type ConditionSet = BTreeSet<Condition>;

pub fn is_normal(conditions: &ConditionSet) -> bool {
    conditions.len() == 1 && conditions.contains(&Condition::Normal)
}

pub fn severity_of(conditions: &ConditionSet) -> Severity {
    if is_normal(conditions) {
        Severity::Healthy
    } else {
        Severity::Sick
    }
}

/// Rhythm phrase for a condition set: the rhythm abnormality, or sinus rhythm.
pub fn rhythm_phrase(conditions: &ConditionSet) -> &'static str {
    Condition::RHYTHMS
        .iter()
        .find(|c| conditions.contains(c))
        .map_or("sinus rhythm", |c| c.phrase())
}

/// Conditions valid for a record: `{NORMAL}` xor a nonempty set of
/// abnormalities with at most one rhythm abnormality.
pub fn validate_conditions(conditions: &ConditionSet) -> Result<()> {
    if conditions.is_empty() {
        return Err(Error::Data("empty condition set".into()));
    }
    if conditions.contains(&Condition::Normal) && conditions.len() > 1 {
        return Err(Error::Data("NORMAL cannot be combined with abnormalities".into()));
    }
    if conditions.iter().filter(|c| c.is_rhythm()).count() > 1 {
        return Err(Error::Data("at most one rhythm abnormality per record".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub subject_id: String,
    pub leads: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    /// Row-major `[leads × samples]`.
    pub values: Vec<f64>,
    pub conditions: ConditionSet,
    pub stratum: Severity,
}

impl EcgRecord {
    pub fn lead(&self, l: usize) -> &[f64] {
        &self.values[l * self.samples..(l + 1) * self.samples]
    }

    pub fn has(&self, c: Condition) -> bool {
        self.conditions.contains(&c)
    }

    pub fn is_normal(&self) -> bool {
        is_normal(&self.conditions)
    }

    pub fn check(&self) -> Result<()> {
        if self.values.len() != self.leads * self.samples {
            return Err(Error::Data(format!("record {} has {} values for {}x{}", self.id, self.values.len(), self.leads, self.samples)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("record {} has non-finite samples", self.id)));
        }
        validate_conditions(&self.conditions)?;
        if self.stratum != severity_of(&self.conditions) {
            return Err(Error::Data(format!("record {} stratum disagrees with its conditions", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionPriors {
    pub afib: f64,
    pub sbrad: f64,
    pub stach: f64,
    pub lowvolt: f64,
    pub twave_inv: f64,
    pub wide_qrs: f64,
}

impl Default for ConditionPriors {
    fn default() -> Self {
        Self { afib: 0.25, sbrad: 0.2, stach: 0.2, lowvolt: 0.2, twave_inv: 0.25, wide_qrs: 0.2 }
    }
}

impl ConditionPriors {
    pub fn get(&self, c: Condition) -> f64 {
        match c {
            Condition::Normal => 0.0,
            Condition::Afib => self.afib,
            Condition::Sbrad => self.sbrad,
            Condition::Stach => self.stach,
            Condition::LowVolt => self.lowvolt,
            Condition::TwaveInv => self.twave_inv,
            Condition::WideQrs => self.wide_qrs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_records: usize,
    pub leads: usize,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub prob_sick: f64,
    /// Prior of each abnormality given a sick record. Rhythm priors are
    /// mutually exclusive and must sum to at most one.
    pub priors: ConditionPriors,
    pub p_broad_given_healthy: f64,
    pub p_broad_given_sick: f64,
    /// Probability that a sick asker's specific question targets one of
    /// their own conditions.
    pub p_own_condition: f64,
    /// Probability that a subject has a follow-up recording.
    pub p_followup: f64,
    pub verify_per_record: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_records: 2000,
            leads: 12,
            duration_s: 10.0,
            rate_hz: 100.0,
            prob_sick: 0.5,
            priors: ConditionPriors::default(),
            p_broad_given_healthy: 0.8,
            p_broad_given_sick: 0.2,
            p_own_condition: 0.7,
            p_followup: 0.25,
            verify_per_record: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn samples(&self) -> usize {
        (self.duration_s * self.rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("prob_sick", self.prob_sick),
            ("p_broad_given_healthy", self.p_broad_given_healthy),
            ("p_broad_given_sick", self.p_broad_given_sick),
            ("p_own_condition", self.p_own_condition),
            ("p_followup", self.p_followup),
            ("priors.afib", self.priors.afib),
            ("priors.sbrad", self.priors.sbrad),
            ("priors.stach", self.priors.stach),
            ("priors.lowvolt", self.priors.lowvolt),
            ("priors.twave_inv", self.priors.twave_inv),
            ("priors.wide_qrs", self.priors.wide_qrs),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        let rhythm = self.priors.afib + self.priors.sbrad + self.priors.stach;
        if rhythm > 1.0 + 1e-12 {
            return Err(Error::Config(format!("rhythm priors sum to {rhythm} > 1")));
        }
        if rhythm == 0.0 && self.priors.lowvolt == 0.0 && self.priors.twave_inv == 0.0 && self.priors.wide_qrs == 0.0 && self.prob_sick > 0.0 {
            return Err(Error::Config("all condition priors are zero but prob_sick > 0".into()));
        }
        if self.n_records < 2 {
            return Err(Error::Config(format!("n_records = {} < 2", self.n_records)));
        }
        if self.leads == 0 {
            return Err(Error::Config("leads must be positive".into()));
        }
        if !(self.rate_hz > 0.0) || !(self.duration_s > 0.0) || self.samples() < 2 {
            return Err(Error::Config("rate_hz and duration_s must give at least two samples".into()));
        }
        Ok(())
    }
}
