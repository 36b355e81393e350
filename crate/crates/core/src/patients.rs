//! Longitudinal clinical notes per patient.
//!
//! Notes are immutable and live in a [`Table`] keyed by
//! `patient \x1f timestamp \x1f sequence`, so a prefix scan yields one
//! patient's history already ordered by time and then by insertion.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Datelike, SecondsFormat, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{ColumnSpec, Schema, Table, TableError};

/// Upper bound, in characters, on the merged narrative sent to a backend.
pub const PROMPT_CONTEXT_CAP: usize = 16_000;
pub const TRUNCATION_MARKER: &str = "[OLDER NOTES OMITTED]";
pub const CURRENT_NOTE_HEADER: &str = "CURRENT NOTE:";
pub const CSV_HEADER: [&str; 4] = ["Patient_ID", "Timestamp", "Source", "Text"];

const KEY_SEP: char = '\u{1f}';

const NOTE_SCHEMA: Schema = Schema {
    name: "notes",
    columns: &[
        ColumnSpec {
            name: "key",
            compressed: false,
        },
        ColumnSpec {
            name: "patient_id",
            compressed: false,
        },
        ColumnSpec {
            name: "timestamp",
            compressed: false,
        },
        ColumnSpec {
            name: "source",
            compressed: false,
        },
        ColumnSpec {
            name: "text",
            compressed: true,
        },
    ],
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteSource {
    Manual,
    Batch,
    Api,
}

impl NoteSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NoteSource::Manual => "manual",
            NoteSource::Batch => "batch",
            NoteSource::Api => "api",
        }
    }
}

impl fmt::Display for NoteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoteSource {
    type Err = PatientError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "manual" => Ok(NoteSource::Manual),
            "batch" => Ok(NoteSource::Batch),
            "api" => Ok(NoteSource::Api),
            _ => Err(PatientError::Invalid {
                field: "source",
                reason: format!("unknown note source {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub patient_id: String,
    pub timestamp: DateTime<Utc>,
    pub text: String,
    pub source: NoteSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatientHistory {
    pub patient_id: String,
    pub notes: Vec<ClinicalNote>,
}

impl PatientHistory {
    pub fn empty(patient_id: impl Into<String>) -> Self {
        PatientHistory {
            patient_id: patient_id.into(),
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PatientError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("nothing to assess: current note and history are both empty")]
    NothingToAssess,
    #[error("patient CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> PatientError {
    PatientError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl ClinicalNote {
    pub fn validate(&self, now: DateTime<Utc>) -> Result<(), PatientError> {
        if self.patient_id.trim().is_empty() {
            return Err(invalid("patient_id", "must not be empty"));
        }
        if self.patient_id.contains(KEY_SEP) {
            return Err(invalid("patient_id", "must not contain the unit separator"));
        }
        if self.text.trim().is_empty() {
            return Err(invalid("text", "must not be empty"));
        }
        if self.timestamp > now {
            return Err(invalid("timestamp", format!("{} is in the future", self.timestamp)));
        }
        if !(0..=9999).contains(&self.timestamp.year()) {
            return Err(invalid("timestamp", "year outside 0000-9999"));
        }
        Ok(())
    }
}

fn sortable_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S%.9fZ").to_string()
}

#[derive(Debug)]
pub struct PatientStore {
    table: Table,
    append_lock: Mutex<()>,
    next_seq: AtomicU64,
}

impl PatientStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, PatientError> {
        let table = Table::open(dir.as_ref(), NOTE_SCHEMA)?;
        let next_seq = table
            .scan_where(|_| true)?
            .iter()
            .filter_map(|row| row[0].rsplit(KEY_SEP).next()?.parse::<u64>().ok())
            .max()
            .map_or(0, |m| m + 1);
        Ok(PatientStore {
            table,
            append_lock: Mutex::new(()),
            next_seq: AtomicU64::new(next_seq),
        })
    }

    pub fn append_note(&self, note: ClinicalNote) -> Result<(), PatientError> {
        note.validate(Utc::now())?;
        let _guard = self.append_lock.lock();
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let key = format!(
            "{}{KEY_SEP}{}{KEY_SEP}{seq:020}",
            note.patient_id,
            sortable_timestamp(&note.timestamp)
        );
        self.table.put(vec![
            key,
            note.patient_id,
            note.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            note.source.as_str().to_string(),
            note.text,
        ])?;
        Ok(())
    }

    pub fn get_history(&self, patient_id: &str) -> Result<PatientHistory, PatientError> {
        let rows = self.table.scan_prefix(&format!("{patient_id}{KEY_SEP}"))?;
        let notes = rows.into_iter().map(row_to_note).collect::<Result<Vec<_>, _>>()?;
        Ok(PatientHistory {
            patient_id: patient_id.to_string(),
            notes,
        })
    }

    /// Removes every note for the patient; returns how many were removed.
    pub fn delete_history(&self, patient_id: &str) -> Result<usize, PatientError> {
        let _guard = self.append_lock.lock();
        let rows = self.table.scan_prefix(&format!("{patient_id}{KEY_SEP}"))?;
        for row in &rows {
            self.table.delete(&row[0])?;
        }
        Ok(rows.len())
    }

    pub fn note_count(&self) -> usize {
        self.table.len()
    }

    pub fn export_csv<W: Write>(&self, writer: W) -> Result<usize, PatientError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)
            .map_err(|e| PatientError::Csv(e.to_string()))?;
        let rows = self.table.scan_where(|_| true)?;
        for row in &rows {
            w.write_record([&row[1], &row[2], &row[3], &row[4]])
                .map_err(|e| PatientError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| PatientError::Csv(e.to_string()))?;
        Ok(rows.len())
    }

    /// Appends every note in the CSV. Rows are validated before any write.
    pub fn import_csv<R: Read>(&self, reader: R) -> Result<usize, PatientError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| PatientError::Csv(e.to_string()))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(PatientError::Csv(format!(
                "expected header {}, found {}",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let now = Utc::now();
        let mut notes = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| PatientError::Csv(format!("line {line}: {e}")))?;
            let note = ClinicalNote {
                patient_id: rec[0].to_string(),
                timestamp: DateTime::parse_from_rfc3339(&rec[1])
                    .map_err(|e| PatientError::Csv(format!("line {line}: timestamp: {e}")))?
                    .with_timezone(&Utc),
                source: rec[2].parse()?,
                text: rec[3].to_string(),
            };
            note.validate(now)
                .map_err(|e| PatientError::Csv(format!("line {line}: {e}")))?;
            notes.push(note);
        }
        let n = notes.len();
        for note in notes {
            self.append_note(note)?;
        }
        Ok(n)
    }

    pub fn close(self) -> Result<(), PatientError> {
        self.table.sync()?;
        Ok(())
    }
}

fn row_to_note(row: Vec<String>) -> Result<ClinicalNote, PatientError> {
    let [_, patient_id, ts, source, text]: [String; 5] =
        row.try_into().map_err(|_| invalid("row", "unexpected column count"))?;
    Ok(ClinicalNote {
        patient_id,
        timestamp: DateTime::parse_from_rfc3339(&ts)
            .map_err(|e| invalid("timestamp", e.to_string()))?
            .with_timezone(&Utc),
        source: source.parse()?,
        text,
    })
}

/// Merges stored history with the current note into one narrative.
pub fn merge_for_prompt(current: &str, history: &PatientHistory) -> Result<String, PatientError> {
    merge_for_prompt_with_cap(current, history, PROMPT_CONTEXT_CAP)
}

/// Historical notes oldest first, each under its own ISO-8601 date line, then
/// the current note. When the result would exceed `cap` characters the oldest
/// notes are dropped and a marker is prepended. The current note is never cut.
pub fn merge_for_prompt_with_cap(current: &str, history: &PatientHistory, cap: usize) -> Result<String, PatientError> {
    if current.trim().is_empty() && history.notes.is_empty() {
        return Err(PatientError::NothingToAssess);
    }
    let sections: Vec<String> = history
        .notes
        .iter()
        .map(|n| {
            format!(
                "{}\n{}\n\n",
                n.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
                n.text.trim_end()
            )
        })
        .collect();
    let current_section = format!("{CURRENT_NOTE_HEADER}\n{current}");
    let marker = format!("{TRUNCATION_MARKER}\n\n");

    let char_len = |s: &str| s.chars().count();
    let mut kept_from = 0;
    let mut body: usize = sections.iter().map(|s| char_len(s)).sum();
    let fixed = char_len(&current_section);
    loop {
        let truncated = kept_from > 0;
        let total = fixed + body + if truncated { char_len(&marker) } else { 0 };
        if total <= cap || kept_from == sections.len() {
            break;
        }
        body -= char_len(&sections[kept_from]);
        kept_from += 1;
    }

    let mut out = String::new();
    if kept_from > 0 {
        out.push_str(&marker);
    }
    for s in &sections[kept_from..] {
        out.push_str(s);
    }
    out.push_str(&current_section);
    Ok(out)
}
