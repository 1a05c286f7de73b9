//! Deterministic encoding of the Data safety disclosure exemptions.
//!
//! Tags come from two noisy sources (the post-processing model's removal
//! keywords and [`ConstraintEngine::scan_evidence`]); the exempt/not-exempt
//! decision is computed here from the tag set alone.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::Finding;
use crate::taxonomy::PracticeKind;

const BUNDLED_RULES: &str = include_str!("../data/exemption_rules.toml");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("exemption tag `{tag}` does not apply to {practice}")]
    InvalidTagForPractice {
        tag: ExemptionTag,
        practice: PracticeKind,
    },
    #[error("practice {0} has no exemption rules")]
    UnsupportedPractice(PracticeKind),
    #[error("invalid rule table: {0}")]
    RuleTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemptionTag {
    OnDeviceProcessing,
    EndToEndEncryption,
    EphemeralProcessing,
    Anonymization,
    ServiceProvider,
    LegalObligation,
    UserInitiatedConsent,
    AnonymizedTransfer,
    Pseudonymization,
    GenericEncryption,
}

impl ExemptionTag {
    pub const ALL: [ExemptionTag; 10] = [
        ExemptionTag::OnDeviceProcessing,
        ExemptionTag::EndToEndEncryption,
        ExemptionTag::EphemeralProcessing,
        ExemptionTag::Anonymization,
        ExemptionTag::ServiceProvider,
        ExemptionTag::LegalObligation,
        ExemptionTag::UserInitiatedConsent,
        ExemptionTag::AnonymizedTransfer,
        ExemptionTag::Pseudonymization,
        ExemptionTag::GenericEncryption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExemptionTag::OnDeviceProcessing => "on_device_processing",
            ExemptionTag::EndToEndEncryption => "end_to_end_encryption",
            ExemptionTag::EphemeralProcessing => "ephemeral_processing",
            ExemptionTag::Anonymization => "anonymization",
            ExemptionTag::ServiceProvider => "service_provider",
            ExemptionTag::LegalObligation => "legal_obligation",
            ExemptionTag::UserInitiatedConsent => "user_initiated_consent",
            ExemptionTag::AnonymizedTransfer => "anonymized_transfer",
            ExemptionTag::Pseudonymization => "pseudonymization",
            ExemptionTag::GenericEncryption => "generic_encryption",
        }
    }

    /// Lenient keyword parsing for model-emitted `reason_of_removal` values.
    pub fn from_keyword(keyword: &str) -> Option<ExemptionTag> {
        let k: String = keyword
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let k = k.trim_matches('_');
        let tag = match k {
            "on_device_processing" | "on_device" | "on_device_only" | "local_processing" => {
                ExemptionTag::OnDeviceProcessing
            }
            "end_to_end_encryption" | "end_to_end_encrypted" | "e2ee" => {
                ExemptionTag::EndToEndEncryption
            }
            "ephemeral_processing" | "ephemeral" => ExemptionTag::EphemeralProcessing,
            "anonymization" | "anonymisation" | "anonymized" | "anonymised" => {
                ExemptionTag::Anonymization
            }
            "service_provider" | "service_providers" | "service_provider_transfer" => {
                ExemptionTag::ServiceProvider
            }
            "legal_obligation" | "legal_obligations" | "legal" | "legal_requirement"
            | "official_request" => ExemptionTag::LegalObligation,
            "user_initiated_consent" | "user_initiated" | "user_consent" | "consent" => {
                ExemptionTag::UserInitiatedConsent
            }
            "anonymized_transfer" | "anonymised_transfer" | "anonymized_data" => {
                ExemptionTag::AnonymizedTransfer
            }
            "pseudonymization" | "pseudonymisation" | "pseudonymized" => {
                ExemptionTag::Pseudonymization
            }
            "generic_encryption" | "encryption" | "encrypted_in_transit" => {
                ExemptionTag::GenericEncryption
            }
            _ => return None,
        };
        Some(tag)
    }
}

impl fmt::Display for ExemptionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExemptionTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExemptionTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown exemption tag `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDecision {
    pub exempt: bool,
    pub reason: Option<ExemptionTag>,
    pub canonical_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Omitted,
    Excluded(ExemptionTag),
}

#[derive(Debug, Clone, Deserialize)]
pub struct Rule {
    pub tag: ExemptionTag,
    pub practices: Vec<PracticeKind>,
    pub exempting: bool,
    #[serde(default)]
    pub vetoed_by: Vec<ExemptionTag>,
    pub canonical_text: String,
    #[serde(default)]
    pub evidence: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RuleFile {
    schema_version: u32,
    rule: Vec<Rule>,
}

/// The loaded rule table. Pure and freely shareable.
#[derive(Debug, Clone)]
pub struct ConstraintEngine {
    rules: Vec<Rule>,
}

impl ConstraintEngine {
    pub fn bundled() -> &'static ConstraintEngine {
        static ENGINE: OnceLock<ConstraintEngine> = OnceLock::new();
        ENGINE.get_or_init(|| {
            ConstraintEngine::from_toml(BUNDLED_RULES).expect("bundled rule table is valid")
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConstraintError> {
        let file: RuleFile =
            toml::from_str(text).map_err(|e| ConstraintError::RuleTable(e.to_string()))?;
        if file.schema_version != 1 {
            return Err(ConstraintError::RuleTable(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        for tag in ExemptionTag::ALL {
            let n = file.rule.iter().filter(|r| r.tag == tag).count();
            if n != 1 {
                return Err(ConstraintError::RuleTable(format!(
                    "tag `{tag}` defined {n} times"
                )));
            }
        }
        for r in &file.rule {
            if r.practices.iter().any(|p| !p.is_audited()) {
                return Err(ConstraintError::RuleTable(format!(
                    "rule `{}` names a non-audited practice",
                    r.tag
                )));
            }
        }
        Ok(ConstraintEngine { rules: file.rule })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    fn rule(&self, tag: ExemptionTag) -> &Rule {
        self.rules
            .iter()
            .find(|r| r.tag == tag)
            .expect("every tag has a rule")
    }

    pub fn applies_to(&self, tag: ExemptionTag, practice: PracticeKind) -> bool {
        self.rule(tag).practices.contains(&practice)
    }

    /// Tags that may be asserted for a practice, in rule-table order.
    pub fn applicable_tags(&self, practice: PracticeKind) -> Vec<ExemptionTag> {
        self.rules
            .iter()
            .filter(|r| r.practices.contains(&practice))
            .map(|r| r.tag)
            .collect()
    }

    pub fn evaluate(
        &self,
        practice: PracticeKind,
        tags: &BTreeSet<ExemptionTag>,
    ) -> Result<RuleDecision, ConstraintError> {
        if !practice.is_audited() {
            return Err(ConstraintError::UnsupportedPractice(practice));
        }
        for &tag in tags {
            if !self.applies_to(tag, practice) {
                return Err(ConstraintError::InvalidTagForPractice { tag, practice });
            }
        }
        let mut veto_text = None;
        for rule in self.rules.iter().filter(|r| r.exempting) {
            if !tags.contains(&rule.tag) {
                continue;
            }
            match rule.vetoed_by.iter().find(|v| tags.contains(v)) {
                None => {
                    return Ok(RuleDecision {
                        exempt: true,
                        reason: Some(rule.tag),
                        canonical_text: rule.canonical_text.clone(),
                    })
                }
                Some(v) if veto_text.is_none() => {
                    veto_text = Some(self.rule(*v).canonical_text.clone());
                }
                Some(_) => {}
            }
        }
        let canonical_text = veto_text.or_else(|| {
            tags.iter()
                .next()
                .map(|t| self.rule(*t).canonical_text.clone())
        });
        Ok(RuleDecision {
            exempt: false,
            reason: None,
            canonical_text: canonical_text.unwrap_or_default(),
        })
    }

    pub fn evaluate_collection_exemption(
        &self,
        tags: &BTreeSet<ExemptionTag>,
    ) -> Result<RuleDecision, ConstraintError> {
        self.evaluate(PracticeKind::Collection, tags)
    }

    pub fn evaluate_sharing_exemption(
        &self,
        tags: &BTreeSet<ExemptionTag>,
    ) -> Result<RuleDecision, ConstraintError> {
        self.evaluate(PracticeKind::Sharing, tags)
    }

    pub fn classify_finding(
        &self,
        finding: &Finding,
        tags: &BTreeSet<ExemptionTag>,
    ) -> Result<Classification, ConstraintError> {
        let decision = self.evaluate(finding.practice, tags)?;
        Ok(match decision.reason {
            Some(tag) if decision.exempt => Classification::Excluded(tag),
            _ => Classification::Omitted,
        })
    }

    /// The EXCLUSION CONSTRAINTS block shared by the analyzer and
    /// post-processing prompts. Fixed order: rule-table order.
    pub fn exclusion_constraints_text(&self, practice: PracticeKind) -> String {
        let mut out = String::new();
        for (i, rule) in self
            .rules
            .iter()
            .filter(|r| r.practices.contains(&practice))
            .enumerate()
        {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("{}. [{}] {}", i + 1, rule.tag, rule.canonical_text));
        }
        out
    }

    /// Keyword-evidence scan of a policy excerpt.
    ///
    /// Exact phrases only, matched case-insensitively on word boundaries.
    /// Generic-encryption evidence is suppressed when the same excerpt
    /// carries explicit end-to-end wording.
    pub fn scan_evidence(&self, text: &str, practice: PracticeKind) -> BTreeSet<ExemptionTag> {
        let haystack = text.to_lowercase();
        let mut found = BTreeSet::new();
        for rule in self.rules.iter().filter(|r| r.practices.contains(&practice)) {
            if rule
                .evidence
                .iter()
                .any(|p| contains_phrase(&haystack, &p.to_lowercase()))
            {
                found.insert(rule.tag);
            }
        }
        if found.contains(&ExemptionTag::EndToEndEncryption) {
            found.remove(&ExemptionTag::GenericEncryption);
        }
        found
    }
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    if phrase.is_empty() {
        return false;
    }
    let is_word = |c: char| c.is_alphanumeric();
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(phrase) {
        let at = start + pos;
        let end = at + phrase.len();
        let before_ok = haystack[..at].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            return true;
        }
        start = at + phrase.chars().next().map_or(1, char::len_utf8);
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use ExemptionTag::*;

    fn set(tags: &[ExemptionTag]) -> BTreeSet<ExemptionTag> {
        tags.iter().copied().collect()
    }

    #[test]
    fn anchored_collection_cases() {
        let e = ConstraintEngine::bundled();
        let d = e.evaluate_collection_exemption(&set(&[OnDeviceProcessing])).unwrap();
        assert!(d.exempt);
        assert_eq!(d.reason, Some(OnDeviceProcessing));
        assert!(!e.evaluate_collection_exemption(&set(&[Pseudonymization])).unwrap().exempt);
        assert!(!e.evaluate_collection_exemption(&set(&[GenericEncryption])).unwrap().exempt);
        assert!(!e
            .evaluate_collection_exemption(&set(&[Anonymization, Pseudonymization]))
            .unwrap()
            .exempt);
    }

    #[test]
    fn anchored_sharing_cases() {
        let e = ConstraintEngine::bundled();
        assert!(e.evaluate_sharing_exemption(&set(&[ServiceProvider])).unwrap().exempt);
        assert!(e.evaluate_sharing_exemption(&set(&[LegalObligation])).unwrap().exempt);
        let none = e.evaluate_sharing_exemption(&BTreeSet::new()).unwrap();
        assert!(!none.exempt);
        assert_eq!(none.reason, None);
    }

    #[test]
    fn wrong_practice_tag_is_rejected() {
        let e = ConstraintEngine::bundled();
        assert_eq!(
            e.evaluate_collection_exemption(&set(&[ServiceProvider])),
            Err(ConstraintError::InvalidTagForPractice {
                tag: ServiceProvider,
                practice: PracticeKind::Collection
            })
        );
        assert!(e.evaluate_sharing_exemption(&set(&[OnDeviceProcessing])).is_err());
    }

    #[test]
    fn constraints_text_lists_every_rule() {
        let e = ConstraintEngine::bundled();
        let c = e.exclusion_constraints_text(PracticeKind::Collection);
        for tag in [OnDeviceProcessing, EndToEndEncryption, EphemeralProcessing, Anonymization, Pseudonymization] {
            assert!(c.contains(tag.as_str()), "{tag}");
        }
        assert!(c.contains("must still be declared"));
        let s = e.exclusion_constraints_text(PracticeKind::Sharing);
        for tag in [ServiceProvider, LegalObligation, UserInitiatedConsent, AnonymizedTransfer] {
            assert!(s.contains(tag.as_str()), "{tag}");
        }
        assert!(!s.contains(OnDeviceProcessing.as_str()));
        assert_eq!(c, e.exclusion_constraints_text(PracticeKind::Collection));
    }

    #[test]
    fn evidence_scanner() {
        let e = ConstraintEngine::bundled();
        let c = PracticeKind::Collection;
        assert_eq!(
            e.scan_evidence("Your photos are processed locally on your device and never leave it.", c),
            set(&[OnDeviceProcessing])
        );
        assert_eq!(
            e.scan_evidence("All data is encrypted in transit.", c),
            set(&[GenericEncryption])
        );
        assert_eq!(
            e.scan_evidence("Messages are end-to-end encrypted and are encrypted at rest.", c),
            set(&[EndToEndEncryption])
        );
        assert!(e.scan_evidence("We use settlements to pay.", c).is_empty());
        assert_eq!(
            e.scan_evidence("We share it with service providers who act on our behalf.", PracticeKind::Sharing),
            set(&[ServiceProvider])
        );
    }

    #[test]
    fn keyword_aliases() {
        assert_eq!(ExemptionTag::from_keyword("On-device processing"), Some(OnDeviceProcessing));
        assert_eq!(ExemptionTag::from_keyword("E2EE"), Some(EndToEndEncryption));
        assert_eq!(ExemptionTag::from_keyword("vibes"), None);
    }
}
