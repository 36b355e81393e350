//! Decision engine: retrieval, prompt assembly, backend call, verdict.

use std::io::Read;
use std::sync::Arc;

use futures::{stream, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AlertType, Assessment, ClassificationCategory, ReactionType, UnknownLabel};
use crate::gateway::prompts::{build_decision_prompt, build_translation_prompt, PromptError, NONE_KNOWN};
use crate::gateway::{
    complete, complete_streaming, ChatBackend, ChatRequest, ChunkStream, GatewayError, PromptContext, DEFAULT_MODEL,
};
use crate::knowledge::{DrugRecord, KnowledgeStore, StoreError};
use crate::patients::{merge_for_prompt, PatientError, PatientHistory, PatientStore};
use crate::synonyms::{normalize, SynonymIndex};

const BUILTIN_GROUPS: &str = include_str!("../data/excipient_groups.csv");
pub const SAME_CLASS_LISTING_CAP: usize = 20;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessmentRequest {
    pub drug_code: String,
    #[serde(default)]
    pub patient_id: Option<String>,
    #[serde(default)]
    pub current_note: String,
    #[serde(default)]
    pub language_hint: Option<String>,
}

impl AssessmentRequest {
    pub fn for_note(drug_code: impl Into<String>, note: impl Into<String>) -> Self {
        AssessmentRequest {
            drug_code: drug_code.into(),
            current_note: note.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.drug_code.trim().is_empty() {
            return Err(EngineError::InvalidRequest("drug_code must not be empty".into()));
        }
        let has_patient = self.patient_id.as_deref().is_some_and(|p| !p.trim().is_empty());
        if !has_patient && self.current_note.trim().is_empty() {
            return Err(EngineError::InvalidRequest(
                "either patient_id or a clinical note is required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcipientGroup {
    pub name: String,
    pub members: Vec<String>,
}

impl ExcipientGroup {
    /// Whether a normalized excipient name belongs to this group. A member
    /// also covers its numbered grades, so "macrogol" matches "macrogol 4000".
    pub fn covers(&self, excipient: &str) -> bool {
        self.members.iter().any(|m| {
            let m = normalize(m);
            member_covers(&m, excipient)
        })
    }
}

/// Whether the normalized `member` names the normalized `excipient`, either
/// exactly or as one of its numbered grades.
pub fn member_covers(member: &str, excipient: &str) -> bool {
    excipient == member || excipient.strip_prefix(member).is_some_and(|rest| rest.starts_with(' '))
}

/// Curated table of chemically related excipients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExcipientGroups {
    groups: Vec<ExcipientGroup>,
}

impl ExcipientGroups {
    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_csv(BUILTIN_GROUPS.as_bytes()).expect("bundled excipient table is valid")
    }

    /// Reads `Group,Members` rows with `#`-separated members.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| e.to_string())?;
        if header.iter().ne(["Group", "Members"]) {
            return Err("excipient group header must be Group,Members".into());
        }
        let mut groups = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| format!("line {}: {e}", i + 2))?;
            let members: Vec<String> = rec[1]
                .split('#')
                .map(|m| m.trim().to_string())
                .filter(|m| !m.is_empty())
                .collect();
            if rec[0].trim().is_empty() || members.is_empty() {
                return Err(format!("line {}: group needs a name and members", i + 2));
            }
            groups.push(ExcipientGroup {
                name: rec[0].trim().to_string(),
                members,
            });
        }
        Ok(ExcipientGroups { groups })
    }

    pub fn groups(&self) -> &[ExcipientGroup] {
        &self.groups
    }

    /// Groups with at least one member among `excipients` (canonical names).
    pub fn matching(&self, excipients: &[String]) -> Vec<&ExcipientGroup> {
        let names: Vec<String> = excipients.iter().map(|e| normalize(e)).collect();
        self.groups
            .iter()
            .filter(|g| names.iter().any(|n| g.covers(n)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossReactivityContext {
    pub same_class_drugs: Vec<(String, String)>,
    pub excipient_chemical_groups: Vec<ExcipientGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltContext {
    pub prompt: PromptContext,
    pub cross: CrossReactivityContext,
    /// Ingredient names the synonym index could not resolve; they reach the
    /// prompt verbatim.
    pub unresolved: Vec<String>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid assessment request: {0}")]
    InvalidRequest(String),
    #[error("drug {0:?} not found")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Patient(#[from] PatientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{error}")]
    Parse { error: ParseError, raw: String },
    #[error("retrieval task failed: {0}")]
    Task(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable assessment ({detail}): {fragment}")]
pub struct ParseError {
    pub detail: String,
    pub fragment: String,
}

#[derive(Debug)]
pub enum AssessmentEvent {
    Chunk(String),
    Final(Assessment),
    Error(EngineError),
}

pub type AssessmentStream = std::pin::Pin<Box<dyn Stream<Item = AssessmentEvent> + Send>>;

/// Splits a free-text ingredient field on semicolons and newlines.
pub fn split_ingredients(field: &str) -> Vec<String> {
    field
        .split([';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Separates a name from its parenthesised annotations:
/// `"morphine sulfate (2 mg/ml)"` gives `("morphine sulfate", " (2 mg/ml)")`.
fn strip_annotations(item: &str) -> (String, String) {
    let mut name = String::new();
    let mut notes = String::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for ch in item.chars() {
        match ch {
            '(' => {
                if depth == 0 {
                    current.clear();
                }
                depth += 1;
                current.push(ch);
            }
            ')' if depth > 0 => {
                depth -= 1;
                current.push(ch);
                if depth == 0 {
                    notes.push(' ');
                    notes.push_str(&current);
                }
            }
            _ if depth > 0 => current.push(ch),
            _ => name.push(ch),
        }
    }
    if depth > 0 {
        name.push_str(&current);
    }
    (name.split_whitespace().collect::<Vec<_>>().join(" "), notes)
}

/// Ingredient names of a free-text field with annotations removed.
pub fn ingredient_names(field: &str) -> Vec<String> {
    split_ingredients(field)
        .iter()
        .map(|item| strip_annotations(item).0)
        .filter(|n| !n.is_empty())
        .collect()
}

struct Canonical {
    rendered: Vec<String>,
    names: Vec<String>,
    unresolved: Vec<String>,
}

fn canonicalize_list(field: &str, index: &SynonymIndex) -> Canonical {
    let mut out = Canonical {
        rendered: Vec::new(),
        names: Vec::new(),
        unresolved: Vec::new(),
    };
    for item in split_ingredients(field) {
        let (name, notes) = strip_annotations(&item);
        match index.canonicalize(&name) {
            Some((english, _)) => {
                out.rendered.push(format!("{english}{notes}"));
                out.names.push(english.to_string());
            }
            None => {
                out.rendered.push(item.clone());
                out.names.push(name);
                out.unresolved.push(item);
            }
        }
    }
    out
}

fn same_class_drugs(
    store: &KnowledgeStore,
    drug: &DrugRecord,
    cap: usize,
) -> Result<Vec<(String, String)>, StoreError> {
    let Some(prefix) = drug.atc_level4() else {
        return Ok(Vec::new());
    };
    let mut out: Vec<(String, String)> = Vec::new();
    for other in store.summaries_by_atc_prefix(prefix)? {
        if other.drug_code == drug.drug_code {
            continue;
        }
        let pair = (other.drug_name, other.atc_code);
        if !out.contains(&pair) {
            out.push(pair);
            if out.len() == cap {
                break;
            }
        }
    }
    Ok(out)
}

fn render_same_class(drugs: &[(String, String)]) -> String {
    drugs
        .iter()
        .map(|(name, atc)| format!("{name} ({atc})"))
        .collect::<Vec<_>>()
        .join("; ")
}

fn render_groups(groups: &[ExcipientGroup]) -> String {
    groups
        .iter()
        .map(|g| format!("{}: {}", g.name, g.members.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn assemble(
    drug: &DrugRecord,
    same_class: Vec<(String, String)>,
    index: &SynonymIndex,
    groups: &ExcipientGroups,
    narrative: String,
) -> BuiltContext {
    let actives = canonicalize_list(&drug.composition, index);
    let excipients = canonicalize_list(&drug.excipients, index);
    let matched: Vec<ExcipientGroup> = groups.matching(&excipients.names).into_iter().cloned().collect();
    let cross_text = if same_class.is_empty() {
        NONE_KNOWN.to_string()
    } else {
        render_same_class(&same_class)
    };
    let groups_text = if matched.is_empty() {
        NONE_KNOWN.to_string()
    } else {
        render_groups(&matched)
    };
    let mut unresolved = actives.unresolved;
    unresolved.extend(excipients.unresolved);
    BuiltContext {
        prompt: PromptContext {
            drug: drug.drug_name.clone(),
            active_ingredients: actives.rendered,
            excipients: excipients.rendered,
            cross_reactivity: cross_text,
            excipients_cross_reacts: groups_text,
            contraindications: drug.contraindications.clone(),
            clinical_notes: narrative,
        },
        cross: CrossReactivityContext {
            same_class_drugs: same_class,
            excipient_chemical_groups: matched,
        },
        unresolved,
    }
}

fn is_english(hint: &str) -> bool {
    matches!(hint.trim().to_lowercase().as_str(), "" | "english" | "en" | "eng")
}

/// Finds the first balanced `{...}` in `raw` that parses as a JSON object.
fn first_object(raw: &str) -> Result<serde_json::Map<String, serde_json::Value>, ParseError> {
    let bytes = raw.as_bytes();
    let mut first_candidate: Option<&str> = None;
    for (start, _) in raw.match_indices('{') {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut end = None;
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + off + 1);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(end) = end else { continue };
        let candidate = &raw[start..end];
        first_candidate.get_or_insert(candidate);
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(candidate) {
            return Ok(map);
        }
    }
    Err(match first_candidate {
        Some(c) => ParseError {
            detail: "object is not valid JSON".into(),
            fragment: c.to_string(),
        },
        None => ParseError {
            detail: "no brace-delimited object".into(),
            fragment: raw.chars().take(200).collect(),
        },
    })
}

fn label_field<'a>(
    map: &'a serde_json::Map<String, serde_json::Value>,
    key: &str,
    prefix: &str,
) -> Result<&'a str, ParseError> {
    let value = map.get(key).ok_or_else(|| ParseError {
        detail: format!("missing key {key:?}"),
        fragment: serde_json::Value::Object(map.clone()).to_string(),
    })?;
    let text = value.as_str().ok_or_else(|| ParseError {
        detail: format!("key {key:?} is not a string"),
        fragment: value.to_string(),
    })?;
    let trimmed = text.trim();
    Ok(match trimmed.get(..prefix.len()) {
        Some(head) if head.eq_ignore_ascii_case(prefix) => trimmed[prefix.len()..].trim(),
        _ => trimmed,
    })
}

fn unknown(e: UnknownLabel) -> ParseError {
    ParseError {
        detail: format!("unknown {}", e.kind),
        fragment: e.value,
    }
}

/// Extracts `(analysis, classification, reaction)` from a backend response.
pub fn parse_assessment(raw: &str) -> Result<(String, ClassificationCategory, ReactionType), ParseError> {
    let map = first_object(raw)?;
    let analysis = label_field(&map, "a", "")?.to_string();
    let classification =
        ClassificationCategory::parse_label(label_field(&map, "r", "final response:")?).map_err(unknown)?;
    let reaction = ReactionType::parse_label(label_field(&map, "rt", "reaction type:")?).map_err(unknown)?;
    Ok((analysis, classification, reaction))
}

/// The traditional comparator: alerts on any documented reactivity and
/// ignores tolerance and severity.
pub fn baseline_assess(classification: ClassificationCategory) -> AlertType {
    match classification {
        ClassificationCategory::NoDocumentedReactions | ClassificationCategory::NoReactivityToPrescribedDrug => {
            AlertType::None
        }
        _ => AlertType::Interruptive,
    }
}

/// Builds the final event from a complete response.
fn verdict(raw: String) -> AssessmentEvent {
    match parse_assessment(&raw) {
        Ok((analysis, c, r)) => AssessmentEvent::Final(Assessment::new(analysis, c, r, raw)),
        Err(error) => AssessmentEvent::Error(EngineError::Parse { error, raw }),
    }
}

#[derive(Clone)]
pub struct Engine {
    drugs: Arc<KnowledgeStore>,
    patients: Option<Arc<PatientStore>>,
    synonyms: Arc<SynonymIndex>,
    groups: Arc<ExcipientGroups>,
    backend: Arc<dyn ChatBackend>,
    model: String,
}

impl Engine {
    pub fn new(drugs: Arc<KnowledgeStore>, backend: Arc<dyn ChatBackend>) -> Self {
        Engine {
            drugs,
            patients: None,
            synonyms: Arc::new(SynonymIndex::default()),
            groups: Arc::new(ExcipientGroups::builtin()),
            backend,
            model: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn with_patients(mut self, patients: Arc<PatientStore>) -> Self {
        self.patients = Some(patients);
        self
    }

    pub fn with_synonyms(mut self, synonyms: Arc<SynonymIndex>) -> Self {
        self.synonyms = synonyms;
        self
    }

    pub fn with_groups(mut self, groups: Arc<ExcipientGroups>) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn drugs(&self) -> &Arc<KnowledgeStore> {
        &self.drugs
    }

    pub fn patients(&self) -> Option<&Arc<PatientStore>> {
        self.patients.as_ref()
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    fn fetch_drug(&self, code: &str) -> Result<Arc<DrugRecord>, EngineError> {
        self.drugs
            .get_drug(code)?
            .ok_or_else(|| EngineError::NotFound(code.to_string()))
    }

    /// Synchronous prompt context for a drug and an already merged narrative.
    pub fn build_context(&self, drug_code: &str, narrative: &str) -> Result<BuiltContext, EngineError> {
        let drug = self.fetch_drug(drug_code)?;
        let same_class = same_class_drugs(&self.drugs, &drug, SAME_CLASS_LISTING_CAP)?;
        Ok(assemble(
            &drug,
            same_class,
            &self.synonyms,
            &self.groups,
            narrative.to_string(),
        ))
    }

    async fn drug_side(&self, code: String) -> Result<(Arc<DrugRecord>, Vec<(String, String)>), EngineError> {
        let store = Arc::clone(&self.drugs);
        tokio::task::spawn_blocking(move || {
            let drug = store
                .get_drug(&code)?
                .ok_or_else(|| EngineError::NotFound(code.clone()))?;
            let same_class = same_class_drugs(&store, &drug, SAME_CLASS_LISTING_CAP)?;
            Ok((drug, same_class))
        })
        .await
        .map_err(|e| EngineError::Task(e.to_string()))?
    }

    async fn narrative_side(&self, request: &AssessmentRequest) -> Result<String, EngineError> {
        let patient_id = request.patient_id.as_deref().map(str::trim).filter(|p| !p.is_empty());
        let history = match (patient_id, &self.patients) {
            (Some(pid), Some(store)) => {
                let store = Arc::clone(store);
                let pid = pid.to_string();
                tokio::task::spawn_blocking(move || store.get_history(&pid))
                    .await
                    .map_err(|e| EngineError::Task(e.to_string()))??
            }
            (Some(pid), None) => PatientHistory::empty(pid),
            (None, _) => PatientHistory::empty(""),
        };
        let narrative = merge_for_prompt(&request.current_note, &history)?;
        match request.language_hint.as_deref() {
            Some(lang) if !is_english(lang) => {
                let (system, user) = build_translation_prompt(&narrative, lang)?;
                let req = ChatRequest::new(system, user).with_model(self.model.clone());
                Ok(complete(&req, self.backend.as_ref()).await?)
            }
            _ => Ok(narrative),
        }
    }

    /// Retrieves context, opens the backend stream and returns the prompt
    /// context together with the raw chunk stream.
    pub async fn prepare(&self, request: &AssessmentRequest) -> Result<(BuiltContext, ChunkStream), EngineError> {
        request.validate()?;
        let (drug_side, narrative) = tokio::join!(
            self.drug_side(request.drug_code.trim().to_string()),
            self.narrative_side(request)
        );
        let (drug, same_class) = drug_side?;
        let narrative = narrative?;
        let built = assemble(&drug, same_class, &self.synonyms, &self.groups, narrative);
        if !built.unresolved.is_empty() {
            tracing::debug!(drug = %drug.drug_code, unresolved = ?built.unresolved, "ingredients passed through verbatim");
        }
        let (system, user) = build_decision_prompt(&built.prompt)?;
        let chat = ChatRequest::new(system, user).with_model(self.model.clone());
        let stream = complete_streaming(&chat, self.backend.as_ref()).await?;
        Ok((built, stream))
    }

    /// Streams the response chunks followed by exactly one `Final` or `Error`
    /// event. Failures before the backend produces output are returned as
    /// `Err` instead.
    pub async fn assess(&self, request: &AssessmentRequest) -> Result<AssessmentStream, EngineError> {
        let (_, chunks) = self.prepare(request).await?;
        Ok(Box::pin(assessment_events(chunks)))
    }

    /// Runs an assessment to completion.
    pub async fn assess_collect(&self, request: &AssessmentRequest) -> Result<Assessment, EngineError> {
        let mut events = self.assess(request).await?;
        while let Some(ev) = events.next().await {
            match ev {
                AssessmentEvent::Chunk(_) => {}
                AssessmentEvent::Final(a) => return Ok(a),
                AssessmentEvent::Error(e) => return Err(e),
            }
        }
        Err(EngineError::Gateway(GatewayError::Truncated))
    }
}

struct EventState {
    chunks: ChunkStream,
    raw: String,
    done: bool,
    pending_final: Option<AssessmentEvent>,
}

/// Maps backend chunks onto assessment events.
pub fn assessment_events(chunks: ChunkStream) -> impl Stream<Item = AssessmentEvent> + Send {
    let state = EventState {
        chunks,
        raw: String::new(),
        done: false,
        pending_final: None,
    };
    stream::unfold(state, |mut st| async move {
        if let Some(ev) = st.pending_final.take() {
            return Some((ev, st));
        }
        if st.done {
            return None;
        }
        loop {
            match st.chunks.next().await {
                Some(Ok(chunk)) => {
                    st.raw.push_str(&chunk.delta_text);
                    if chunk.is_final {
                        st.done = true;
                        let ev = verdict(std::mem::take(&mut st.raw));
                        if chunk.delta_text.is_empty() {
                            return Some((ev, st));
                        }
                        st.pending_final = Some(ev);
                        return Some((AssessmentEvent::Chunk(chunk.delta_text), st));
                    }
                    if !chunk.delta_text.is_empty() {
                        return Some((AssessmentEvent::Chunk(chunk.delta_text), st));
                    }
                }
                Some(Err(e)) => {
                    st.done = true;
                    return Some((AssessmentEvent::Error(EngineError::Gateway(e)), st));
                }
                None => {
                    st.done = true;
                    return Some((
                        AssessmentEvent::Error(EngineError::Gateway(GatewayError::Truncated)),
                        st,
                    ));
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::rule_based::render_structured_response;
    use crate::gateway::{GroundTruthTag, RuleBasedBackend, ScriptedBackend};
    use crate::knowledge::StoreOptions;
    use crate::synonyms::{IngredientEntry, IngredientKind};
    use ClassificationCategory as C;
    use ReactionType as R;

    fn record(code: &str, name: &str, atc: &str, composition: &str, excipients: &str) -> DrugRecord {
        DrugRecord {
            drug_code: code.into(),
            drug_name: name.into(),
            drug_form: "tablet".into(),
            atc_code: atc.into(),
            composition: composition.into(),
            excipients: excipients.into(),
            contraindications: String::new(),
            drug_interactions: String::new(),
            side_effects: String::new(),
            incompatibilities: String::new(),
        }
    }

    fn store(dir: &std::path::Path) -> Arc<KnowledgeStore> {
        let s = KnowledgeStore::open(dir, StoreOptions::default()).unwrap();
        s.put_drug(record(
            "1",
            "ORAMORPH",
            "N02AA01",
            "morfina solfato (2 mg/ml)",
            "sucrose; polysorbate 80",
        ))
        .unwrap();
        s.put_drug(record("2", "CODEINE AL", "N02AA59", "codeine phosphate", "lactose"))
            .unwrap();
        s.put_drug(record("3", "LASIX", "C03CA01", "furosemide", "lactose\nmaize starch"))
            .unwrap();
        Arc::new(s)
    }

    fn index() -> Arc<SynonymIndex> {
        Arc::new(
            SynonymIndex::load(vec![IngredientEntry::new(
                "morfina solfato",
                "morphine sulfate",
                vec!["morphine sulphate".to_string()],
                IngredientKind::Active,
            )
            .unwrap()])
            .unwrap(),
        )
    }

    fn tagged(c: C, r: R) -> String {
        format!(
            "Itchy rash after a previous course.\n{}",
            GroundTruthTag {
                case_id: "P0001".into(),
                classification: c,
                reaction: r
            }
            .render()
        )
    }

    #[test]
    fn parses_plain_and_fenced() {
        let raw = r#"{"a":"ok","r":"NO DOCUMENTED REACTIONS OR INTOLERANCES","rt":"None"}"#;
        assert_eq!(
            parse_assessment(raw).unwrap(),
            ("ok".to_string(), C::NoDocumentedReactions, R::None)
        );
        let fenced = format!("Here you go:\n```json\n{raw}\n```\nDone.");
        assert_eq!(parse_assessment(&fenced).unwrap().1, C::NoDocumentedReactions);
        let prefixed =
            r#"{"a":"x {y}","r":"final response: direct excipient reactivity","rt":"reaction type: Life-threatening"}"#;
        assert_eq!(
            parse_assessment(prefixed).unwrap(),
            ("x {y}".to_string(), C::DirectExcipientReactivity, R::LifeThreatening)
        );
    }

    #[test]
    fn parse_failures_name_fragment() {
        let err = parse_assessment(r#"{"a":"x","r":"MAYBE","rt":"None"}"#).unwrap_err();
        assert_eq!(err.fragment, "MAYBE");
        assert!(parse_assessment("I think it's fine.").is_err());
        let err = parse_assessment(r#"{"a":"x","rt":"None"}"#).unwrap_err();
        assert!(err.detail.contains("\"r\""));
    }

    #[test]
    fn round_trips_every_label_pair() {
        for &c in C::ALL {
            for &r in R::ALL {
                let raw = render_structured_response("analysis \"quoted\"", c, r);
                assert_eq!(
                    parse_assessment(&raw).unwrap(),
                    ("analysis \"quoted\"".to_string(), c, r)
                );
            }
        }
    }

    #[test]
    fn baseline_never_non_interruptive() {
        for &c in C::ALL {
            assert_ne!(baseline_assess(c), AlertType::NonInterruptive);
        }
        assert_eq!(baseline_assess(C::NoDocumentedReactions), AlertType::None);
        assert_eq!(
            baseline_assess(C::DrugClassCrossReactivityWithTolerance),
            AlertType::Interruptive
        );
    }

    #[test]
    fn annotations_are_kept_aside() {
        assert_eq!(
            strip_annotations("morphine sulfate (2 mg/ml)"),
            ("morphine sulfate".to_string(), " (2 mg/ml)".to_string())
        );
        assert_eq!(split_ingredients("a; b\n c ;; "), vec!["a", "b", "c"]);
    }

    #[test]
    fn context_uses_synonyms_classes_and_groups() {
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(store(dir.path()), Arc::new(RuleBasedBackend::default())).with_synonyms(index());
        let built = engine.build_context("1", "note").unwrap();
        assert_eq!(built.prompt.active_ingredients, vec!["morphine sulfate (2 mg/ml)"]);
        assert_eq!(built.prompt.cross_reactivity, "CODEINE AL (N02AA59)");
        assert!(built.prompt.excipients_cross_reacts.contains("polysorbates"));
        assert_eq!(built.unresolved, vec!["sucrose", "polysorbate 80"]);

        let lasix = engine.build_context("3", "note").unwrap();
        assert_eq!(lasix.prompt.cross_reactivity, NONE_KNOWN);
        assert_eq!(lasix.prompt.excipients_cross_reacts, NONE_KNOWN);
        assert_eq!(lasix.prompt.excipients, vec!["lactose", "maize starch"]);
        assert!(matches!(
            engine.build_context("404", "x"),
            Err(EngineError::NotFound(_))
        ));
    }

    #[test]
    fn graded_members_match() {
        let groups = ExcipientGroups::builtin();
        let hit = groups.matching(&["Macrogol 4000".to_string()]);
        assert_eq!(hit.len(), 1);
        assert!(groups.matching(&["macrogolx".to_string()]).is_empty());
    }

    #[tokio::test]
    async fn tolerance_case_gets_no_alert() {
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(store(dir.path()), Arc::new(RuleBasedBackend::default()));
        let a = engine
            .assess_collect(&AssessmentRequest::for_note(
                "1",
                tagged(C::DrugClassCrossReactivityWithTolerance, R::None),
            ))
            .await
            .unwrap();
        assert_eq!(a.classification(), C::DrugClassCrossReactivityWithTolerance);
        assert_eq!(a.alert(), AlertType::None);

        let a = engine
            .assess_collect(&AssessmentRequest::for_note(
                "1",
                tagged(C::DrugClassCrossReactivityWithoutTolerance, R::LifeThreatening),
            ))
            .await
            .unwrap();
        assert_eq!(a.alert(), AlertType::Interruptive);
    }

    #[tokio::test]
    async fn prose_response_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let backend = ScriptedBackend::default().with_fallback(&["The drug ", "looks safe."]);
        let engine = Engine::new(store(dir.path()), Arc::new(backend));
        let mut events = engine.assess(&AssessmentRequest::for_note("1", "note")).await.unwrap();
        let mut chunks = String::new();
        let mut last = None;
        while let Some(ev) = events.next().await {
            match ev {
                AssessmentEvent::Chunk(c) => chunks.push_str(&c),
                other => last = Some(other),
            }
        }
        assert_eq!(chunks, "The drug looks safe.");
        match last.unwrap() {
            AssessmentEvent::Error(EngineError::Parse { raw, .. }) => assert_eq!(raw, chunks),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn chunks_concatenate_to_raw_response() {
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(store(dir.path()), Arc::new(RuleBasedBackend::default()));
        let mut events = engine
            .assess(&AssessmentRequest::for_note(
                "1",
                tagged(C::DirectExcipientReactivity, R::LifeThreatening),
            ))
            .await
            .unwrap();
        let mut chunks = String::new();
        let mut n = 0;
        let mut final_raw = None;
        while let Some(ev) = events.next().await {
            match ev {
                AssessmentEvent::Chunk(c) => {
                    assert!(final_raw.is_none());
                    n += 1;
                    chunks.push_str(&c)
                }
                AssessmentEvent::Final(a) => final_raw = Some(a.raw_response().to_string()),
                AssessmentEvent::Error(e) => panic!("{e}"),
            }
        }
        assert!(n > 1);
        assert_eq!(final_raw.unwrap(), chunks);
    }

    #[tokio::test]
    async fn translates_non_english_notes() {
        let dir = tempfile::tempdir().unwrap();
        let translated = tagged(C::DirectActiveIngredientReactivity, R::LifeThreatening);
        let answer = render_structured_response("x", C::DirectActiveIngredientReactivity, R::LifeThreatening);
        let backend = ScriptedBackend::default()
            .with_contains("orticaria dopo morfina", &[translated.as_str()])
            .with_contains(&translated, &[answer.as_str()]);
        let engine = Engine::new(store(dir.path()), Arc::new(backend));
        let mut req = AssessmentRequest::for_note("1", "orticaria dopo morfina");
        req.language_hint = Some("Italian".into());
        let a = engine.assess_collect(&req).await.unwrap();
        assert_eq!(a.alert(), AlertType::Interruptive);
    }

    #[tokio::test]
    async fn request_errors_come_before_streaming() {
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::new(store(dir.path()), Arc::new(RuleBasedBackend::default()));
        assert!(matches!(
            engine
                .assess(&AssessmentRequest::for_note("404", "x"))
                .await
                .err()
                .unwrap(),
            EngineError::NotFound(_)
        ));
        assert!(matches!(
            engine
                .assess(&AssessmentRequest::for_note("1", " "))
                .await
                .err()
                .unwrap(),
            EngineError::InvalidRequest(_)
        ));
    }

    #[tokio::test]
    async fn history_is_merged() {
        let dir = tempfile::tempdir().unwrap();
        let pdir = tempfile::tempdir().unwrap();
        let patients = Arc::new(PatientStore::open(pdir.path()).unwrap());
        patients
            .append_note(crate::patients::ClinicalNote {
                patient_id: "p1".into(),
                timestamp: chrono::Utc::now() - chrono::Duration::days(30),
                text: tagged(C::DirectActiveIngredientReactivity, R::NonLifeThreateningImmuneMediated),
                source: crate::patients::NoteSource::Manual,
            })
            .unwrap();
        let engine = Engine::new(store(dir.path()), Arc::new(RuleBasedBackend::default())).with_patients(patients);
        let req = AssessmentRequest {
            drug_code: "1".into(),
            patient_id: Some("p1".into()),
            ..Default::default()
        };
        let a = engine.assess_collect(&req).await.unwrap();
        assert_eq!(a.reaction(), R::NonLifeThreateningImmuneMediated);
    }
}
