//! Deterministic offline backend.
//!
//! Synthetic notes carry a ground-truth trailer such as
//! `[GT id="P0001" r="DIRECT EXCIPIENT REACTIVITY" rt="Life-threatening"]`.
//! For decision prompts this backend echoes those labels in the structured
//! output format, optionally overridden per case by an [`ErrorPlan`]. Notes
//! without a tag get a refusal sentinel, which the decision engine cannot
//! parse, so an untagged case can never pass silently.
//!
//! Translation prompts are answered with the original text and extraction
//! prompts with a line-oriented reading of the leaflet.

use std::collections::HashMap;
use std::io::Read;

use async_trait::async_trait;
use futures::stream;
use serde::{Deserialize, Serialize};

use super::prompts::{
    EXTRACTION_FORM_HEADER, EXTRACTION_KEYS, EXTRACTION_LEAFLET_HEADER, EXTRACTION_SYSTEM_HEADER, PERSONA_LINE,
    TRANSLATION_PREFIX,
};
use super::{
    chunks_from_fragments, split_for_streaming, BackendKind, ChatBackend, ChatRequest, ChunkStream, GatewayError,
};
use crate::domain::{ClassificationCategory, ReactionType};

pub const REFUSAL_SENTINEL: &str = "RULE-BASED BACKEND REFUSAL: no ground-truth tag found in the patient information.";
pub const UNSUPPORTED_SENTINEL: &str = "RULE-BASED BACKEND REFUSAL: unrecognised prompt.";
pub const ERROR_PLAN_HEADER: [&str; 3] = ["Patient_ID", "Forced_classification", "Forced_reaction"];
const STREAM_WIDTH: usize = 24;

/// Machine-readable ground truth embedded in a synthetic note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthTag {
    pub case_id: String,
    pub classification: ClassificationCategory,
    pub reaction: ReactionType,
}

impl GroundTruthTag {
    pub fn render(&self) -> String {
        format!(
            "[GT id=\"{}\" r=\"{}\" rt=\"{}\"]",
            self.case_id,
            self.classification.label(),
            self.reaction.label()
        )
    }

    /// The last well-formed tag in `text`. With merged history the current
    /// note comes last, so its tag wins.
    pub fn find_last(text: &str) -> Option<GroundTruthTag> {
        text.match_indices("[GT ")
            .filter_map(|(start, _)| parse_tag(&text[start + 4..]))
            .last()
    }
}

fn parse_tag(rest: &str) -> Option<GroundTruthTag> {
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut s = rest;
    loop {
        s = s.trim_start();
        if let Some(after) = s.strip_prefix(']') {
            let _ = after;
            break;
        }
        let eq = s.find('=')?;
        let key = s[..eq].trim();
        let after = s[eq + 1..].strip_prefix('"')?;
        let close = after.find('"')?;
        fields.insert(key, &after[..close]);
        s = &after[close + 1..];
    }
    Some(GroundTruthTag {
        case_id: fields.get("id")?.to_string(),
        classification: fields.get("r")?.parse().ok()?,
        reaction: fields.get("rt")?.parse().ok()?,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedLabels {
    pub classification: Option<ClassificationCategory>,
    pub reaction: Option<ReactionType>,
}

/// Per-case label overrides used to reproduce a known confusion pattern.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ErrorPlan {
    forced: HashMap<String, ForcedLabels>,
}

impl ErrorPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn force(mut self, case_id: impl Into<String>, forced: ForcedLabels) -> Self {
        self.forced.insert(case_id.into(), forced);
        self
    }

    pub fn get(&self, case_id: &str) -> Option<&ForcedLabels> {
        self.forced.get(case_id)
    }

    pub fn len(&self) -> usize {
        self.forced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forced.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ForcedLabels)> {
        self.forced.iter()
    }

    /// Reads `Patient_ID,Forced_classification,Forced_reaction`; empty cells
    /// leave that label alone.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, GatewayError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| GatewayError::Fixture(e.to_string()))?;
        if header.iter().ne(ERROR_PLAN_HEADER) {
            return Err(GatewayError::Fixture(format!(
                "error plan header must be {}",
                ERROR_PLAN_HEADER.join(",")
            )));
        }
        let mut plan = ErrorPlan::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| GatewayError::Fixture(format!("line {line}: {e}")))?;
            let opt = |s: &str| (!s.trim().is_empty()).then(|| s.to_string());
            let classification = opt(&rec[1])
                .map(|s| s.parse())
                .transpose()
                .map_err(|e| GatewayError::Fixture(format!("line {line}: {e}")))?;
            let reaction = opt(&rec[2])
                .map(|s| s.parse())
                .transpose()
                .map_err(|e| GatewayError::Fixture(format!("line {line}: {e}")))?;
            plan = plan.force(
                rec[0].trim(),
                ForcedLabels {
                    classification,
                    reaction,
                },
            );
        }
        Ok(plan)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ERROR_PLAN_HEADER).expect("in-memory write");
        let mut ids: Vec<_> = self.forced.keys().collect();
        ids.sort();
        for id in ids {
            let f = self.forced[id];
            w.write_record([
                id.as_str(),
                f.classification.map_or("", |c| c.label()),
                f.reaction.map_or("", |r| r.label()),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }
}

/// Serializes an assessment in the structured output format.
pub fn render_structured_response(
    analysis: &str,
    classification: ClassificationCategory,
    reaction: ReactionType,
) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serialization");
    format!(
        "{{\"a\":{},\"r\":{},\"rt\":{}}}",
        q(analysis),
        q(classification.label()),
        q(reaction.label())
    )
}

/// Complete response text for a decision prompt.
pub fn rule_based_assess(user_prompt: &str, _system_prompt: &str, plan: &ErrorPlan) -> String {
    let Some(tag) = GroundTruthTag::find_last(user_prompt) else {
        return REFUSAL_SENTINEL.to_string();
    };
    let forced = plan.get(&tag.case_id).copied().unwrap_or_default();
    let classification = forced.classification.unwrap_or(tag.classification);
    let reaction = forced.reaction.unwrap_or(tag.reaction);
    let analysis = format!(
        "Case {}: the documented history supports {} with reaction type {}.",
        tag.case_id,
        classification.label().to_lowercase(),
        reaction.label().to_lowercase()
    );
    render_structured_response(&analysis, classification, reaction)
}

fn translation_source(user_prompt: &str) -> Option<&str> {
    let rest = user_prompt.strip_prefix(TRANSLATION_PREFIX)?;
    let (_, rest) = rest.split_once(": ")?;
    let end = rest.rfind("\nReport only the translation").unwrap_or(rest.len());
    Some(&rest[..end])
}

fn section_key(header: &str) -> Option<usize> {
    let h = header.trim().to_lowercase().replace('_', " ");
    let key = match h.as_str() {
        "composition" | "active ingredients" => "composition",
        "excipients" | "inactive ingredients" => "excipients",
        "contraindications" => "contraindications",
        "drug interactions" | "interactions" => "drug_interactions",
        "side effects" | "undesirable effects" => "side_effects",
        "incompatibilities" => "incompatibilities",
        _ => return None,
    };
    EXTRACTION_KEYS.iter().position(|k| *k == key)
}

/// Reads leaflets laid out as `Section: value` lines, optionally grouped
/// under `FORM: <name>` lines. Lines before the first form apply to every
/// form; form blocks other than `target_form` are skipped.
fn extract_sections(leaflet: &str, target_form: &str) -> [Vec<String>; 6] {
    let mut out: [Vec<String>; 6] = Default::default();
    let target = target_form.trim().to_lowercase();
    let mut in_scope = true;
    let mut current: Option<usize> = None;
    for line in leaflet.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some((head, value)) = trimmed.split_once(':') {
            if head.trim().eq_ignore_ascii_case("form") {
                in_scope = value.trim().to_lowercase() == target;
                current = None;
                continue;
            }
            if let Some(idx) = section_key(head) {
                current = Some(idx);
                if in_scope && !value.trim().is_empty() {
                    out[idx].push(value.trim().to_string());
                }
                continue;
            }
        }
        if let (true, Some(idx)) = (in_scope, current) {
            out[idx].push(trimmed.to_string());
        }
    }
    out
}

fn rule_based_extract(user_prompt: &str) -> String {
    let form = user_prompt
        .lines()
        .find_map(|l| l.strip_prefix(EXTRACTION_FORM_HEADER))
        .unwrap_or("")
        .trim();
    let leaflet = user_prompt
        .split_once(&format!("{EXTRACTION_LEAFLET_HEADER}\n"))
        .map_or("", |(_, l)| l);
    let sections = extract_sections(leaflet, form);
    let mut obj = String::from("{");
    for (i, (key, values)) in EXTRACTION_KEYS.iter().zip(sections.iter()).enumerate() {
        if i > 0 {
            obj.push(',');
        }
        let value = serde_json::to_string(&values.join("; ")).expect("string serialization");
        obj.push_str(&format!("\"{key}\":{value}"));
    }
    obj.push('}');
    obj
}

#[derive(Debug, Clone, Default)]
pub struct RuleBasedBackend {
    plan: ErrorPlan,
}

impl RuleBasedBackend {
    pub fn new(plan: ErrorPlan) -> Self {
        RuleBasedBackend { plan }
    }

    pub fn plan(&self) -> &ErrorPlan {
        &self.plan
    }

    pub fn respond(&self, request: &ChatRequest) -> String {
        if request.system_prompt.starts_with(PERSONA_LINE) {
            rule_based_assess(&request.user_prompt, &request.system_prompt, &self.plan)
        } else if let Some(text) = translation_source(&request.user_prompt) {
            text.to_string()
        } else if request.system_prompt.starts_with(EXTRACTION_SYSTEM_HEADER) {
            rule_based_extract(&request.user_prompt)
        } else {
            UNSUPPORTED_SENTINEL.to_string()
        }
    }
}

#[async_trait]
impl ChatBackend for RuleBasedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Rule
    }

    async fn open_stream(&self, request: &ChatRequest) -> Result<ChunkStream, GatewayError> {
        let text = self.respond(request);
        let chunks = chunks_from_fragments(split_for_streaming(&text, STREAM_WIDTH));
        Ok(Box::pin(stream::iter(chunks.into_iter().map(Ok))))
    }
}
