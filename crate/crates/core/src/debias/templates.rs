use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{read_jsonl, write_jsonl, Condition, QType, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Breadth {
    Broad,
    Specific,
}

/// A question with paraphrases partitioned into train and test surface forms.
///
/// Placeholders: `{condition}` (phrase of `condition`), `{a}` and `{b}`
/// (choice options).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTemplate {
    pub template_id: String,
    pub qtype: QType,
    pub scope: Scope,
    pub breadth: Breadth,
    pub train_forms: Vec<String>,
    pub test_forms: Vec<String>,
    #[serde(default)]
    pub condition: Option<Condition>,
}

impl QuestionTemplate {
    pub fn render(&self, form: &str, options: &[String]) -> Result<String> {
        let mut q = form.to_string();
        if q.contains("{condition}") {
            let c = self
                .condition
                .ok_or_else(|| Error::Data(format!("template {} uses {{condition}} without a condition", self.template_id)))?;
            q = q.replace("{condition}", c.phrase());
        }
        for (slot, key) in ["{a}", "{b}"].iter().enumerate() {
            if q.contains(key) {
                let opt = options
                    .get(slot)
                    .ok_or_else(|| Error::Data(format!("template {} needs option {key}", self.template_id)))?;
                q = q.replace(key, opt);
            }
        }
        Ok(q)
    }

    pub fn check(&self) -> Result<()> {
        let id = &self.template_id;
        if self.train_forms.is_empty() || self.test_forms.is_empty() {
            return Err(Error::Data(format!("template {id} needs at least one train form and one test form")));
        }
        if let Some(f) = self.train_forms.iter().find(|f| self.test_forms.contains(f)) {
            return Err(Error::Data(format!("template {id}: form {f:?} is in both train and test forms")));
        }
        if self.breadth == Breadth::Specific && self.qtype == QType::Verify && self.condition.is_none() {
            return Err(Error::Data(format!("specific verify template {id} has no condition")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateBank {
    templates: Vec<QuestionTemplate>,
}

fn forms(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn tpl(id: &str, qtype: QType, scope: Scope, breadth: Breadth, train: &[&str], test: &[&str], condition: Option<Condition>) -> QuestionTemplate {
    QuestionTemplate {
        template_id: id.to_string(),
        qtype,
        scope,
        breadth,
        train_forms: forms(train),
        test_forms: forms(test),
        condition,
    }
}

fn code_lower(c: Condition) -> String {
    c.code().to_ascii_lowercase()
}

impl TemplateBank {
    pub fn new(templates: Vec<QuestionTemplate>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &templates {
            t.check()?;
            if !seen.insert(t.template_id.clone()) {
                return Err(Error::Data(format!("duplicate template id {}", t.template_id)));
            }
        }
        Ok(Self { templates })
    }

    /// The built-in bank used by `gen-data`.
    pub fn default_bank() -> Self {
        use Breadth::{Broad, Specific};
        use QType::{Choose, Query, Verify};
        use Scope::{ComparisonConsecutive as CC, ComparisonIrrelevant as CI, Single as S};
        let mut t = vec![
            tpl(
                "s_verify_unusual",
                Verify,
                S,
                Broad,
                &["is there anything unusual in this ecg?", "does this ecg show any indications of abnormal cardiac activity?"],
                &["does anything in this ecg look out of the ordinary?"],
                None,
            ),
            tpl(
                "s_verify_abnormal",
                Verify,
                S,
                Broad,
                &["are there any abnormalities evident in this ecg?", "does this ecg contain any abnormal findings?"],
                &["can any abnormal finding be seen in this ecg?"],
                None,
            ),
        ];
        for c in Condition::ABNORMAL {
            t.push(tpl(
                &format!("s_verify_{}", code_lower(c)),
                Verify,
                S,
                Specific,
                &["does this ecg reveal any signs of {condition}?", "can the presence of {condition} be confirmed through this ecg?"],
                &["is {condition} indicated by this ecg?"],
                Some(c),
            ));
        }
        t.push(tpl(
            "s_choose_rhythm",
            Choose,
            S,
            Specific,
            &["which rhythm does this ecg show, {a} or {b}?", "is the rhythm of this ecg {a} or {b}?"],
            &["what rhythm is present in this ecg, {a} or {b}?"],
            None,
        ));
        t.push(tpl(
            "s_query_abnormalities",
            Query,
            S,
            Broad,
            &["what abnormalities does this ecg show?", "which abnormal findings are present in this ecg?"],
            &["list the abnormalities seen in this ecg."],
            None,
        ));
        t.push(tpl(
            "cc_verify_change",
            Verify,
            CC,
            Broad,
            &["are there any changes between the two ecgs?", "does the second ecg differ from the first ecg?"],
            &["has anything changed from the first ecg to the second ecg?"],
            None,
        ));
        for c in Condition::ABNORMAL {
            t.push(tpl(
                &format!("cc_verify_onset_{}", code_lower(c)),
                Verify,
                CC,
                Specific,
                &[
                    "has {condition} newly appeared in the second ecg?",
                    "does the second ecg show new {condition} that was absent in the first ecg?",
                ],
                &["is there new {condition} in the second ecg compared with the first?"],
                Some(c),
            ));
        }
        t.push(tpl(
            "cc_query_new",
            Query,
            CC,
            Broad,
            &["which abnormalities appeared in the second ecg that were absent in the first ecg?", "what new abnormalities does the second ecg show?"],
            &["list the abnormalities that are new in the second ecg."],
            None,
        ));
        t.push(tpl(
            "ci_verify_both_normal",
            Verify,
            CI,
            Broad,
            &["are both ecgs normal?", "do the two ecgs both show no abnormalities?"],
            &["is each of the two ecgs normal?"],
            None,
        ));
        for c in Condition::ABNORMAL {
            t.push(tpl(
                &format!("ci_verify_either_{}", code_lower(c)),
                Verify,
                CI,
                Specific,
                &["does either ecg show signs of {condition}?", "is {condition} present in at least one of the two ecgs?"],
                &["can {condition} be found in either ecg?"],
                Some(c),
            ));
        }
        t.push(tpl(
            "ci_query_shared",
            Query,
            CI,
            Broad,
            &["which abnormalities do both ecgs share?", "what abnormal findings are common to both ecgs?"],
            &["list the abnormalities found in both ecgs."],
            None,
        ));
        Self::new(t).expect("built-in template bank is valid")
    }

    pub fn templates(&self) -> &[QuestionTemplate] {
        &self.templates
    }

    pub fn get(&self, template_id: &str) -> Option<&QuestionTemplate> {
        self.templates.iter().find(|t| t.template_id == template_id)
    }

    pub fn select(&self, scope: Scope, qtype: QType, breadth: Option<Breadth>) -> Vec<&QuestionTemplate> {
        self.templates
            .iter()
            .filter(|t| t.scope == scope && t.qtype == qtype && breadth.is_none_or(|b| t.breadth == b))
            .collect()
    }

    pub fn specific(&self, scope: Scope, condition: Condition) -> Option<&QuestionTemplate> {
        self.templates.iter().find(|t| {
            t.scope == scope && t.qtype == QType::Verify && t.breadth == Breadth::Specific && t.condition == Some(condition)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.templates)
    }
}
