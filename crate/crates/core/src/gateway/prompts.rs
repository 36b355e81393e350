//! Prompt builders for decision support, ingredient translation and leaflet
//! section extraction. All builders are pure: equal inputs give byte-equal
//! prompts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClassificationCategory, ReactionType};

pub const PERSONA_LINE: &str = "Act as an expert physician.";
pub const TASK_LINE: &str = "Your task is to check if the drug I want to prescribe is safe for the patient, focusing only on the potential drug reactions the patient has.";
pub const PATIENT_INFORMATION_HEADER: &str = "### PATIENT INFORMATION:";
pub const EMPTY_LIST: &str = "None listed";
pub const NONE_KNOWN: &str = "None known";

pub const TRANSLATION_SYSTEM: &str = "You are a professional medical translator.";
pub const TRANSLATION_PREFIX: &str = "Translate in English from";

pub const EXTRACTION_SYSTEM_HEADER: &str =
    "You are a clinical pharmacist extracting structured information from an official drug leaflet.";
pub const EXTRACTION_FORM_HEADER: &str = "### TARGET FORM:";
pub const EXTRACTION_LEAFLET_HEADER: &str = "### LEAFLET:";

const INSTRUCTIONS: &str = "\
1. Consider only adverse reactions and intolerances that are documented in the patient information. Do not assume reactions that are not written there.
2. Compare every documented reaction with the drug's active ingredients and excipients, taking synonyms and translated names into account.
3. Before reporting drug class cross-reactivity, check whether the patient information documents that the patient has already tolerated the drug to prescribe or its active ingredient. If it does, the answer is DRUG CLASS CROSS-REACTIVITY WITH DOCUMENTED TOLERANCE.
4. Use the known cross-reactivity sections to recognise drugs of the same class and chemically related excipients.
5. Choose the reaction type from the most severe documented reaction that is relevant to the drug to prescribe. Use None when no relevant reaction is documented.
6. Answer with a single line containing only the JSON object described in the output format, with exactly one value for \"r\" and one value for \"rt\".";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("prompt precondition failed: {0}")]
pub struct PromptError(pub String);

/// Every placeholder of the decision-support prompt pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub drug: String,
    pub active_ingredients: Vec<String>,
    pub excipients: Vec<String>,
    pub cross_reactivity: String,
    pub excipients_cross_reacts: String,
    pub contraindications: String,
    pub clinical_notes: String,
}

fn render_list(items: &[String]) -> String {
    if items.is_empty() {
        EMPTY_LIST.to_string()
    } else {
        items.join("; ")
    }
}

fn or_default<'a>(text: &'a str, default: &'a str) -> &'a str {
    if text.trim().is_empty() {
        default
    } else {
        text.trim()
    }
}

/// The `## OUTPUT FORMAT ##` line with the closed response vocabularies.
pub fn output_format_line() -> String {
    let classes: Vec<&str> = ClassificationCategory::ALL.iter().map(|c| c.label()).collect();
    let reactions: Vec<&str> = ReactionType::ALL.iter().map(|r| r.label()).collect();
    format!(
        "{{\"a\":\"brief description of your analysis\", \"r\":\"final response: {}\", \"rt\":\"reaction type: {}\"}}",
        classes.join("|"),
        reactions.join("|")
    )
}

/// Returns `(system_prompt, user_prompt)`.
pub fn build_decision_prompt(ctx: &PromptContext) -> Result<(String, String), PromptError> {
    if ctx.drug.trim().is_empty() {
        return Err(PromptError("drug must not be empty".into()));
    }
    let system = format!(
        "{PERSONA_LINE}\n\
         {TASK_LINE}\n\
         ### Drug To Prescribe: {drug}\n\
         ### Drug Active Ingredients: {active}\n\
         ### Drug Excipients: {excipients}\n\
         ### Known Cross-reactivity: {cross}\n\
         ### Known Excipients With Chemical Cross-reactivity:\n\
         {excipient_cross}\n\
         ### Contraindications: {contra}\n\
         \n\
         ## INSTRUCTIONS ##\n\
         {INSTRUCTIONS}\n\
         ## OUTPUT FORMAT ##\n\
         {format}",
        drug = ctx.drug.trim(),
        active = render_list(&ctx.active_ingredients),
        excipients = render_list(&ctx.excipients),
        cross = or_default(&ctx.cross_reactivity, NONE_KNOWN),
        excipient_cross = or_default(&ctx.excipients_cross_reacts, NONE_KNOWN),
        contra = or_default(&ctx.contraindications, EMPTY_LIST),
        format = output_format_line(),
    );
    let user = format!("{PATIENT_INFORMATION_HEADER} {}", ctx.clinical_notes);
    Ok((system, user))
}

/// Returns `(system_prompt, user_prompt)` for translating `text` to English.
pub fn build_translation_prompt(text: &str, source_language: &str) -> Result<(String, String), PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError("text to translate must not be empty".into()));
    }
    if source_language.trim().is_empty() {
        return Err(PromptError("source language must not be empty".into()));
    }
    let user = format!(
        "{TRANSLATION_PREFIX} {}: {}\nReport only the translation, nothing else. If you don't know the translation, report the original text.",
        source_language.trim(),
        text
    );
    Ok((TRANSLATION_SYSTEM.to_string(), user))
}

/// Keys of the JSON object the extraction prompt asks for, in order.
pub const EXTRACTION_KEYS: [&str; 6] = [
    "composition",
    "excipients",
    "contraindications",
    "drug_interactions",
    "side_effects",
    "incompatibilities",
];

/// Returns `(system_prompt, user_prompt)` for extracting the sections of one
/// pharmaceutical form from a leaflet that may describe several.
pub fn build_extraction_prompt(leaflet_text: &str, target_form: &str) -> Result<(String, String), PromptError> {
    if leaflet_text.trim().is_empty() {
        return Err(PromptError("leaflet text must not be empty".into()));
    }
    if target_form.trim().is_empty() {
        return Err(PromptError("target form must not be empty".into()));
    }
    let keys: Vec<String> = EXTRACTION_KEYS.iter().map(|k| format!("\"{k}\"")).collect();
    let system = format!(
        "{EXTRACTION_SYSTEM_HEADER}\n\
         The leaflet may describe several pharmaceutical forms of the same medicine. Report only information that applies to the target form and leave out details that concern other forms only.\n\
         Write ingredient and excipient names in English and separate list items with semicolons.\n\
         Answer with a single JSON object with the keys {}. Every value is a string; use an empty string when the leaflet gives no information.",
        keys.join(", ")
    );
    let user = format!(
        "{EXTRACTION_FORM_HEADER} {}\n{EXTRACTION_LEAFLET_HEADER}\n{}",
        target_form.trim(),
        leaflet_text
    );
    Ok((system, user))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> PromptContext {
        PromptContext {
            drug: "ORAMORPH".into(),
            active_ingredients: vec!["morphine sulfate (2 mg/ml)".into()],
            excipients: vec!["sucrose".into(), "methyl parahydroxybenzoate".into()],
            cross_reactivity: "codeine (N02AA59)".into(),
            excipients_cross_reacts: String::new(),
            contraindications: "respiratory depression".into(),
            clinical_notes: "Rash after codeine in 2019.".into(),
        }
    }

    #[test]
    fn substitutes_drug() {
        let (system, user) = build_decision_prompt(&ctx()).unwrap();
        assert!(system.contains("### Drug To Prescribe: ORAMORPH\n"));
        assert!(system.starts_with("Act as an expert physician.\n"));
        assert_eq!(user, "### PATIENT INFORMATION: Rash after codeine in 2019.");
    }

    #[test]
    fn sections_in_order() {
        let (system, _) = build_decision_prompt(&ctx()).unwrap();
        let order = [
            "### Drug To Prescribe:",
            "### Drug Active Ingredients:",
            "### Drug Excipients:",
            "### Known Cross-reactivity:",
            "### Known Excipients With Chemical Cross-reactivity:",
            "### Contraindications:",
            "## INSTRUCTIONS ##",
            "## OUTPUT FORMAT ##",
        ];
        let positions: Vec<usize> = order.iter().map(|h| system.find(h).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn output_format_lists_every_label() {
        let (system, _) = build_decision_prompt(&PromptContext {
            drug: "X".into(),
            ..Default::default()
        })
        .unwrap();
        for c in ClassificationCategory::ALL {
            assert!(system.contains(c.label()));
        }
        for r in ReactionType::ALL {
            assert!(system.contains(r.label()));
        }
        assert!(system.ends_with(
            "\"rt\":\"reaction type: None|Life-threatening|Non life-threatening immune-mediated|Non life-threatening non immune-mediated\"}"
        ));
    }

    #[test]
    fn empty_sections_have_placeholders() {
        let (system, _) = build_decision_prompt(&PromptContext {
            drug: "X".into(),
            ..Default::default()
        })
        .unwrap();
        assert!(system.contains("### Drug Excipients: None listed\n"));
        assert!(system.contains("### Known Cross-reactivity: None known\n"));
        assert!(system.contains("### Known Excipients With Chemical Cross-reactivity:\nNone known\n"));
    }

    #[test]
    fn empty_drug_rejected() {
        assert!(build_decision_prompt(&PromptContext::default()).is_err());
    }

    #[test]
    fn translation_template() {
        let (_, user) = build_translation_prompt("acido acetilsalicilico", "Italian").unwrap();
        assert_eq!(
            user,
            "Translate in English from Italian: acido acetilsalicilico\nReport only the translation, nothing else. If you don't know the translation, report the original text."
        );
        assert!(build_translation_prompt("", "Italian").is_err());
        assert!(build_translation_prompt("x", " ").is_err());
    }

    #[test]
    fn builders_are_pure() {
        assert_eq!(build_decision_prompt(&ctx()), build_decision_prompt(&ctx()));
        assert_eq!(
            build_extraction_prompt("leaflet", "syrup"),
            build_extraction_prompt("leaflet", "syrup")
        );
    }
}
