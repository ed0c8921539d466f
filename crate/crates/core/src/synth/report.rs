use super::{is_normal, rhythm_phrase, Condition, ConditionSet};
use crate::error::{Error, Result};

pub const NORMAL_REPORT: &str = "normal sinus rhythm, no abnormalities.";

/// Template report for a condition set: rhythm first, then morphology.
pub fn render_report(conditions: &ConditionSet) -> Result<String> {
    if conditions.is_empty() {
        return Err(Error::Data("cannot render a report for an empty condition set".into()));
    }
    if is_normal(conditions) {
        return Ok(NORMAL_REPORT.to_string());
    }
    let rhythm = rhythm_phrase(conditions);
    let morph: Vec<&str> = conditions
        .iter()
        .filter(|c| !c.is_rhythm() && **c != Condition::Normal)
        .map(|c| c.phrase())
        .collect();
    Ok(if morph.is_empty() {
        format!("{rhythm}, no other abnormalities.")
    } else {
        format!("{rhythm} with {}.", morph.join(", "))
    })
}

/// Reports with fewer than three words are dropped from training data.
pub fn passes_report_filter(report: &str) -> bool {
    report.split_whitespace().count() >= 3
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(cs: &[Condition]) -> ConditionSet {
        cs.iter().copied().collect()
    }

    #[test]
    fn normal_template() {
        assert_eq!(render_report(&set(&[Condition::Normal])).unwrap(), "normal sinus rhythm, no abnormalities.");
    }

    #[test]
    fn union_mentions_every_condition() {
        let r = render_report(&set(&[Condition::Afib, Condition::LowVolt])).unwrap();
        assert!(r.contains("atrial fibrillation") && r.contains("low voltage"), "{r}");
        let r = render_report(&set(&[Condition::TwaveInv, Condition::WideQrs])).unwrap();
        assert_eq!(r, "sinus rhythm with t wave inversion, wide qrs complex.");
    }

    #[test]
    fn every_report_passes_filter() {
        for mask in 0u32..64 {
            let mut s: ConditionSet = Condition::ABNORMAL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, c)| *c)
                .collect();
            if s.iter().filter(|c| c.is_rhythm()).count() > 1 {
                continue;
            }
            if s.is_empty() {
                s.insert(Condition::Normal);
            }
            assert!(passes_report_filter(&render_report(&s).unwrap()));
        }
        assert!(!passes_report_filter("sinus rhythm"));
        assert!(render_report(&ConditionSet::new()).is_err());
    }
}
