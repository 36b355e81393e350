//! CSV ingestion for leaflets and synonyms, plus the backend-driven leaflet
//! extraction and ingredient translation steps.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::prompts::{build_extraction_prompt, build_translation_prompt, PromptError, EXTRACTION_KEYS};
use crate::gateway::{complete, ChatBackend, ChatRequest, GatewayError};
use crate::knowledge::{DrugRecord, KnowledgeStore, StoreError};
use crate::synonyms::{IngredientEntry, IngredientKind, SynonymError, SynonymIndex};

pub const LEAFLET_HEADER: [&str; 10] = [
    "Drug_code",
    "Drug_name",
    "Drug_form",
    "ATC",
    "Composition",
    "Excipients",
    "Contraindications",
    "Drug_interactions",
    "Side_effects",
    "Incompatibilities",
];
pub const SYNONYM_HEADER: [&str; 4] = ["Ingredient", "English_name", "Synonyms", "Type"];
pub const DEFAULT_FAN_OUT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub stored: usize,
    pub diagnostics: Vec<RowDiagnostic>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("header mismatch: expected {expected}, found {found}")]
    Header { expected: String, found: String },
    #[error("CSV error: {0}")]
    Csv(String),
    #[error("{} bad row(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Rows(Vec<RowDiagnostic>),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Synonyms(#[from] SynonymError),
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Checks the header row exactly, column for column.
pub fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), IngestError> {
    let found = reader.headers().map_err(|e| IngestError::Csv(e.to_string()))?;
    if found.iter().ne(expected.iter().copied()) {
        return Err(IngestError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).from_reader(reader)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Parses leaflet rows. Rows with the wrong arity or an invalid record are
/// reported and skipped; a bad header fails the whole file.
pub fn parse_leaflet_rows<R: Read>(reader: R) -> Result<(Vec<DrugRecord>, Vec<RowDiagnostic>), IngestError> {
    let mut r = csv_reader(reader);
    check_header(&mut r, &LEAFLET_HEADER)?;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for rec in r.records() {
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                diagnostics.push(RowDiagnostic {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = line_of(&rec);
        if rec.len() != LEAFLET_HEADER.len() {
            diagnostics.push(RowDiagnostic {
                line,
                message: format!("expected {} fields, found {}", LEAFLET_HEADER.len(), rec.len()),
            });
            continue;
        }
        let f = |i: usize| rec[i].trim().to_string();
        let record = DrugRecord {
            drug_code: f(0),
            drug_name: f(1),
            drug_form: f(2),
            atc_code: f(3),
            composition: f(4),
            excipients: f(5),
            contraindications: f(6),
            drug_interactions: f(7),
            side_effects: f(8),
            incompatibilities: f(9),
        };
        match record.validate() {
            Ok(()) => records.push(record),
            Err(e) => diagnostics.push(RowDiagnostic {
                line,
                message: e.to_string(),
            }),
        }
    }
    Ok((records, diagnostics))
}

pub fn ingest_leaflet_reader<R: Read>(reader: R, store: &KnowledgeStore) -> Result<IngestReport, IngestError> {
    let (records, diagnostics) = parse_leaflet_rows(reader)?;
    for d in &diagnostics {
        tracing::warn!(line = d.line, "skipping leaflet row: {}", d.message);
    }
    let stored = records.len();
    for record in records {
        store.put_drug(record)?;
    }
    Ok(IngestReport { stored, diagnostics })
}

pub fn ingest_leaflet_csv(path: impl AsRef<Path>, store: &KnowledgeStore) -> Result<IngestReport, IngestError> {
    ingest_leaflet_reader(open(path.as_ref())?, store)
}

pub fn write_leaflet_csv<W: Write>(records: &[DrugRecord], writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| IngestError::Csv(e.to_string());
    w.write_record(LEAFLET_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            &r.drug_code,
            &r.drug_name,
            &r.drug_form,
            &r.atc_code,
            &r.composition,
            &r.excipients,
            &r.contraindications,
            &r.drug_interactions,
            &r.side_effects,
            &r.incompatibilities,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.to_string()))
}

/// Parses `Ingredient,English_name,Synonyms,Type` rows (`#`-separated
/// synonyms). Any bad row fails the file.
pub fn parse_synonym_rows<R: Read>(reader: R) -> Result<Vec<IngredientEntry>, IngestError> {
    let mut r = csv_reader(reader);
    check_header(&mut r, &SYNONYM_HEADER)?;
    let mut entries = Vec::new();
    let mut bad = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| IngestError::Csv(e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != SYNONYM_HEADER.len() {
            bad.push(RowDiagnostic {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
            continue;
        }
        let kind: IngredientKind = match rec[3].parse() {
            Ok(k) => k,
            Err(e) => {
                bad.push(RowDiagnostic {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let synonyms = rec[2].split('#').map(str::to_string);
        match IngredientEntry::new(&rec[0], &rec[1], synonyms, kind) {
            Ok(e) => entries.push(e),
            Err(e) => bad.push(RowDiagnostic {
                line,
                message: e.to_string(),
            }),
        }
    }
    if !bad.is_empty() {
        return Err(IngestError::Rows(bad));
    }
    Ok(entries)
}

pub fn ingest_synonyms_reader<R: Read>(reader: R) -> Result<SynonymIndex, IngestError> {
    Ok(SynonymIndex::load(parse_synonym_rows(reader)?)?)
}

pub fn ingest_synonyms_csv(path: impl AsRef<Path>) -> Result<SynonymIndex, IngestError> {
    ingest_synonyms_reader(open(path.as_ref())?)
}

pub fn write_synonyms_csv<W: Write>(entries: &[IngredientEntry], writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| IngestError::Csv(e.to_string());
    w.write_record(SYNONYM_HEADER).map_err(csv_err)?;
    for e in entries {
        w.write_record([
            e.ingredient.as_str(),
            e.english_name.as_str(),
            &e.synonyms.join("#"),
            e.kind.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.to_string()))
}

/// The form-specific leaflet fields of a [`DrugRecord`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafletSections {
    pub composition: String,
    pub excipients: String,
    pub contraindications: String,
    pub drug_interactions: String,
    pub side_effects: String,
    pub incompatibilities: String,
}

impl LeafletSections {
    pub fn apply_to(self, record: &mut DrugRecord) {
        record.composition = self.composition;
        record.excipients = self.excipients;
        record.contraindications = self.contraindications;
        record.drug_interactions = self.drug_interactions;
        record.side_effects = self.side_effects;
        record.incompatibilities = self.incompatibilities;
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("extraction response {detail}: {raw}")]
    Shape { detail: String, raw: String },
}

fn parse_sections(raw: &str) -> Result<LeafletSections, ExtractionError> {
    let shape = |detail: String| ExtractionError::Shape {
        detail,
        raw: raw.to_string(),
    };
    let start = raw.find('{').ok_or_else(|| shape("has no JSON object".into()))?;
    let end = raw.rfind('}').ok_or_else(|| shape("has no JSON object".into()))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw[start..=end]).map_err(|e| shape(format!("is not valid JSON ({e})")))?;
    let mut fields = Vec::with_capacity(EXTRACTION_KEYS.len());
    for key in EXTRACTION_KEYS {
        let v = value
            .get(key)
            .ok_or_else(|| shape(format!("is missing {key:?}")))?
            .as_str()
            .ok_or_else(|| shape(format!("has a non-string {key:?}")))?;
        fields.push(v.trim().to_string());
    }
    let mut it = fields.into_iter();
    let mut next = || it.next().unwrap_or_default();
    Ok(LeafletSections {
        composition: next(),
        excipients: next(),
        contraindications: next(),
        drug_interactions: next(),
        side_effects: next(),
        incompatibilities: next(),
    })
}

/// Asks the backend for the sections of `leaflet` that apply to `form`.
pub async fn extract_leaflet_sections(
    leaflet: &str,
    form: &str,
    backend: &dyn ChatBackend,
) -> Result<LeafletSections, ExtractionError> {
    let (system, user) = build_extraction_prompt(leaflet, form)?;
    let raw = complete(&ChatRequest::new(system, user), backend).await?;
    parse_sections(&raw)
}

/// Translates each name to English with at most `fan_out` requests in
/// flight. Output order follows input order; a blank answer keeps the
/// original name.
pub async fn translate_ingredients(
    names: &[String],
    source_language: &str,
    backend: &dyn ChatBackend,
    fan_out: usize,
) -> Result<Vec<String>, ExtractionError> {
    let results: Vec<Result<String, ExtractionError>> = stream::iter(names.iter())
        .map(|name| async move {
            let (system, user) = build_translation_prompt(name, source_language)?;
            let out = complete(&ChatRequest::new(system, user), backend).await?;
            let out = out.trim();
            Ok(if out.is_empty() { name.clone() } else { out.to_string() })
        })
        .buffered(fan_out.max(1))
        .collect()
        .await;
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{RuleBasedBackend, ScriptedBackend};
    use crate::knowledge::StoreOptions;

    const HEADER: &str = "Drug_code,Drug_name,Drug_form,ATC,Composition,Excipients,Contraindications,Drug_interactions,Side_effects,Incompatibilities\n";

    #[test]
    fn ingests_valid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let store = KnowledgeStore::open(dir.path(), StoreOptions::default()).unwrap();
        let csv = format!(
            "{HEADER}012745017,ORAMORPH,syrup,N02AA01,morphine sulfate,\"sucrose; water\",,,,\n\
             012745029,ORAMORPH,oral solution,N02AA01,morphine sulfate,ethanol,,,,\n\
             034329014,LASIX,tablet,C03CA01,furosemide,lactose,,,,\n"
        );
        let report = ingest_leaflet_reader(csv.as_bytes(), &store).unwrap();
        assert_eq!(report.stored, 3);
        assert!(report.diagnostics.is_empty());
        assert_eq!(
            store.get_drug("012745017").unwrap().unwrap().excipients,
            "sucrose; water"
        );
    }

    #[test]
    fn bad_rows_are_skipped_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let store = KnowledgeStore::open(dir.path(), StoreOptions::default()).unwrap();
        let csv = format!("{HEADER}1,A,tablet,N02AA01,x,y,,,,\n2,B,tablet,NOT-ATC,x,y,,,,\n3,C,tablet,C03,x,y,,,,\n");
        let report = ingest_leaflet_reader(csv.as_bytes(), &store).unwrap();
        assert_eq!(report.stored, 2);
        assert_eq!(report.diagnostics.len(), 1);
        assert_eq!(report.diagnostics[0].line, 3);
        assert!(report.diagnostics[0].message.contains("atc"));

        let short = format!("{HEADER}4,D,tablet\n");
        let report = ingest_leaflet_reader(short.as_bytes(), &store).unwrap();
        assert_eq!((report.stored, report.diagnostics[0].line), (0, 2));
    }

    #[test]
    fn wrong_header_touches_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store = KnowledgeStore::open(dir.path(), StoreOptions::default()).unwrap();
        let csv = "Drug_code,Drug_name\n1,A\n";
        assert!(matches!(
            ingest_leaflet_reader(csv.as_bytes(), &store),
            Err(IngestError::Header { .. })
        ));
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn leaflet_csv_round_trip() {
        let rec = DrugRecord {
            drug_code: "1".into(),
            drug_name: "X, \"quoted\"".into(),
            drug_form: "syrup".into(),
            atc_code: "N02AA01".into(),
            composition: "a\nb".into(),
            excipients: String::new(),
            contraindications: "c".into(),
            drug_interactions: String::new(),
            side_effects: String::new(),
            incompatibilities: String::new(),
        };
        let mut buf = Vec::new();
        write_leaflet_csv(std::slice::from_ref(&rec), &mut buf).unwrap();
        let (back, diags) = parse_leaflet_rows(buf.as_slice()).unwrap();
        assert!(diags.is_empty());
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn synonym_rows() {
        let csv = "Ingredient,English_name,Synonyms,Type\n\
                   acido acetilsalicilico,aspirin,acetylsalicylic acid#ASA,active\n\
                   saccarosio,sucrose,,inactive\n";
        let entries = parse_synonym_rows(csv.as_bytes()).unwrap();
        assert_eq!(entries[0].synonyms, vec!["acetylsalicylic acid", "ASA"]);
        assert!(entries[1].synonyms.is_empty());
        let index = ingest_synonyms_reader(csv.as_bytes()).unwrap();
        assert!(index.same_ingredient("aspirin", "acetylsalicylic acid"));

        let mut buf = Vec::new();
        write_synonyms_csv(&entries, &mut buf).unwrap();
        assert_eq!(parse_synonym_rows(buf.as_slice()).unwrap(), entries);
    }

    #[test]
    fn unknown_type_is_a_row_error() {
        let csv = "Ingredient,English_name,Synonyms,Type\nx,y,,unknown\n";
        match parse_synonym_rows(csv.as_bytes()) {
            Err(IngestError::Rows(rows)) => assert_eq!(rows[0].line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn extraction_scopes_to_the_target_form() {
        let leaflet = "Composition: morphine sulfate\n\
                       FORM: syrup\nExcipients: sucrose; methyl parahydroxybenzoate\n\
                       FORM: oral solution\nExcipients: ethanol; purified water\n";
        let backend = RuleBasedBackend::default();
        let syrup = extract_leaflet_sections(leaflet, "syrup", &backend).await.unwrap();
        assert_eq!(syrup.composition, "morphine sulfate");
        assert_eq!(syrup.excipients, "sucrose; methyl parahydroxybenzoate");
        assert!(!syrup.excipients.contains("ethanol"));
        let single = extract_leaflet_sections("Composition: furosemide\nExcipients: lactose", "tablet", &backend)
            .await
            .unwrap();
        assert_eq!(single.excipients, "lactose");
        assert!(extract_leaflet_sections(" ", "tablet", &backend).await.is_err());
    }

    #[tokio::test]
    async fn extraction_rejects_wrong_shape() {
        let backend = ScriptedBackend::default().with_fallback(&["{\"composition\":\"x\"}"]);
        assert!(matches!(
            extract_leaflet_sections("leaflet", "syrup", &backend).await,
            Err(ExtractionError::Shape { .. })
        ));
    }

    #[tokio::test]
    async fn translation_keeps_order_and_fallback() {
        let backend = ScriptedBackend::default()
            .with_contains("acido acetilsalicilico", &["acetylsalicylic acid"])
            .with_contains("xyzzy", &["xyzzy"])
            .with_contains("saccarosio", &["sucrose"]);
        let names: Vec<String> = ["acido acetilsalicilico", "xyzzy", "saccarosio"]
            .map(String::from)
            .to_vec();
        let out = translate_ingredients(&names, "Italian", &backend, 2).await.unwrap();
        assert_eq!(out, vec!["acetylsalicylic acid", "xyzzy", "sucrose"]);
        assert!(translate_ingredients(&[], "Italian", &backend, 4)
            .await
            .unwrap()
            .is_empty());
    }
}
