//! Clinical taxonomy and the alert-derivation rule.
//!
//! Every label has one canonical display string. Those strings travel through
//! prompts, CSV files and API payloads, so they are bit-exact and parsing is
//! case-insensitive over the same vocabulary.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A label string that does not belong to a closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} label: {value:?}")]
pub struct UnknownLabel {
    pub kind: &'static str,
    pub value: String,
}

fn fold_label(s: &str) -> String {
    s.trim().replace('\u{2019}', "'").to_lowercase()
}

macro_rules! closed_vocabulary {
    (
        $(#[$meta:meta])*
        $name:ident, $kind:literal {
            $( $variant:ident => $label:literal $(| $alias:literal)* ),+ $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $( $variant ),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[ $( $name::$variant ),+ ];

            /// Canonical display string.
            pub fn label(self) -> &'static str {
                match self {
                    $( $name::$variant => $label ),+
                }
            }

            /// Position in [`Self::ALL`]; stable across releases.
            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap_or_default()
            }

            pub fn parse_label(s: &str) -> Result<Self, UnknownLabel> {
                let folded = fold_label(s);
                $(
                    if folded == fold_label($label) $(|| folded == fold_label($alias))* {
                        return Ok($name::$variant);
                    }
                )+
                Err(UnknownLabel { kind: $kind, value: s.to_string() })
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = UnknownLabel;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::parse_label(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.label())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                Self::parse_label(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

closed_vocabulary! {
    /// Clinical classification of a prescription against the patient's history.
    ClassificationCategory, "classification" {
        NoDocumentedReactions => "NO DOCUMENTED REACTIONS OR INTOLERANCES",
        DirectActiveIngredientReactivity => "DIRECT ACTIVE INGREDIENT REACTIVITY",
        DirectExcipientReactivity => "DIRECT EXCIPIENT REACTIVITY",
        NoReactivityToPrescribedDrug => "NO REACTIVITY TO PRESCRIBED DRUG'S INGREDIENTS OR EXCIPIENTS",
        ChemicalCrossReactivityToExcipients => "CHEMICAL-BASED CROSS-REACTIVITY TO EXCIPIENTS",
        DrugClassCrossReactivityWithoutTolerance => "DRUG CLASS CROSS-REACTIVITY WITHOUT DOCUMENTED TOLERANCE",
        DrugClassCrossReactivityWithTolerance => "DRUG CLASS CROSS-REACTIVITY WITH DOCUMENTED TOLERANCE",
    }
}

closed_vocabulary! {
    /// Severity and mechanism of a documented reaction.
    ReactionType, "reaction type" {
        None => "None",
        LifeThreatening => "Life-threatening",
        NonLifeThreateningImmuneMediated => "Non life-threatening immune-mediated",
        NonLifeThreateningNonImmuneMediated => "Non life-threatening non immune-mediated",
    }
}

closed_vocabulary! {
    /// How the prescriber is warned.
    AlertType, "alert type" {
        None => "None" | "No alert" | "No alert needed",
        Interruptive => "Interruptive" | "Interruptive alert",
        NonInterruptive => "Non-interruptive" | "Non-interruptive alert" | "Non interruptive",
    }
}

impl ClassificationCategory {
    /// Classifications that never warrant an alert: nothing documented, or
    /// nothing relevant, or tolerance already established.
    pub fn is_no_alert(self) -> bool {
        matches!(
            self,
            ClassificationCategory::NoDocumentedReactions
                | ClassificationCategory::NoReactivityToPrescribedDrug
                | ClassificationCategory::DrugClassCrossReactivityWithTolerance
        )
    }

    pub fn is_reactive(self) -> bool {
        !self.is_no_alert()
    }
}

impl ReactionType {
    /// NonImmune < Immune < LifeThreatening; `None` ranks lowest.
    pub fn severity_rank(self) -> u8 {
        match self {
            ReactionType::None => 0,
            ReactionType::NonLifeThreateningNonImmuneMediated => 1,
            ReactionType::NonLifeThreateningImmuneMediated => 2,
            ReactionType::LifeThreatening => 3,
        }
    }
}

impl AlertType {
    pub fn severity_rank(self) -> u8 {
        match self {
            AlertType::None => 0,
            AlertType::NonInterruptive => 1,
            AlertType::Interruptive => 2,
        }
    }
}

impl PartialOrd for AlertType {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AlertType {
    fn cmp(&self, other: &Self) -> Ordering {
        self.severity_rank().cmp(&other.severity_rank())
    }
}

/// Maps a (classification, reaction) pair onto the alert the prescriber sees.
///
/// Total over all 28 pairs. A reactive classification paired with
/// `ReactionType::None` is outside the observed strata and falls back to
/// `Interruptive`.
pub fn derive_alert(classification: ClassificationCategory, reaction: ReactionType) -> AlertType {
    if classification.is_no_alert() {
        return AlertType::None;
    }
    match reaction {
        ReactionType::LifeThreatening | ReactionType::NonLifeThreateningImmuneMediated => AlertType::Interruptive,
        ReactionType::NonLifeThreateningNonImmuneMediated => AlertType::NonInterruptive,
        ReactionType::None => AlertType::Interruptive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyViolation {
    /// A no-alert classification carried a documented reaction.
    ReactionWithoutReactivity {
        classification: ClassificationCategory,
        reaction: ReactionType,
    },
    /// A reactive classification carried no reaction.
    ReactivityWithoutReaction { classification: ClassificationCategory },
}

impl fmt::Display for ConsistencyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsistencyViolation::ReactionWithoutReactivity { classification, reaction } => write!(
                f,
                "classification {classification:?} implies no reaction but reaction type is {reaction:?}"
            ),
            ConsistencyViolation::ReactivityWithoutReaction { classification } => write!(
                f,
                "classification {classification:?} requires a reaction type but none was given; alert escalated to Interruptive"
            ),
        }
    }
}

/// Checks a pair against the observed strata: no-alert classifications pair
/// only with `ReactionType::None`, reactive ones only with a real reaction.
pub fn validate_consistency(
    classification: ClassificationCategory,
    reaction: ReactionType,
) -> Vec<ConsistencyViolation> {
    match (classification.is_no_alert(), reaction == ReactionType::None) {
        (true, false) => vec![ConsistencyViolation::ReactionWithoutReactivity {
            classification,
            reaction,
        }],
        (false, true) => vec![ConsistencyViolation::ReactivityWithoutReaction { classification }],
        _ => Vec::new(),
    }
}

/// The engine's verdict for one prescription.
///
/// The alert is always computed from the classification and reaction; there
/// is no way to construct an `Assessment` with an independently chosen alert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AssessmentWire")]
pub struct Assessment {
    analysis: String,
    classification: ClassificationCategory,
    reaction: ReactionType,
    alert: AlertType,
    consistency_flags: Vec<String>,
    raw_response: String,
}

#[derive(Deserialize)]
struct AssessmentWire {
    analysis: String,
    classification: ClassificationCategory,
    reaction: ReactionType,
    alert: AlertType,
    // Recomputed from the labels on the way in.
    #[serde(default, rename = "consistency_flags")]
    _consistency_flags: Vec<String>,
    #[serde(default)]
    raw_response: String,
}

impl TryFrom<AssessmentWire> for Assessment {
    type Error = String;

    fn try_from(w: AssessmentWire) -> Result<Self, Self::Error> {
        let assessment = Assessment::new(w.analysis, w.classification, w.reaction, w.raw_response);
        if assessment.alert != w.alert {
            return Err(format!(
                "alert {:?} does not follow from ({:?}, {:?}); expected {:?}",
                w.alert, w.classification, w.reaction, assessment.alert
            ));
        }
        Ok(assessment)
    }
}

impl Assessment {
    pub fn new(
        analysis: impl Into<String>,
        classification: ClassificationCategory,
        reaction: ReactionType,
        raw_response: impl Into<String>,
    ) -> Self {
        Assessment {
            analysis: analysis.into(),
            classification,
            reaction,
            alert: derive_alert(classification, reaction),
            consistency_flags: validate_consistency(classification, reaction)
                .iter()
                .map(ToString::to_string)
                .collect(),
            raw_response: raw_response.into(),
        }
    }

    pub fn analysis(&self) -> &str {
        &self.analysis
    }

    pub fn classification(&self) -> ClassificationCategory {
        self.classification
    }

    pub fn reaction(&self) -> ReactionType {
        self.reaction
    }

    pub fn alert(&self) -> AlertType {
        self.alert
    }

    pub fn consistency_flags(&self) -> &[String] {
        &self.consistency_flags
    }

    pub fn raw_response(&self) -> &str {
        &self.raw_response
    }
}
