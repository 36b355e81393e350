//! Drug knowledge store: leaflet-derived records keyed by ministerial code,
//! with an ATC-prefix access path and an LRU read cache.

use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{ColumnSpec, Schema, Table, TableError};

pub const DEFAULT_CACHE_CAPACITY: usize = 256;

const DRUG_SCHEMA: Schema = Schema {
    name: "drugs",
    columns: &[
        ColumnSpec {
            name: "drug_code",
            compressed: false,
        },
        ColumnSpec {
            name: "drug_name",
            compressed: false,
        },
        ColumnSpec {
            name: "drug_form",
            compressed: false,
        },
        ColumnSpec {
            name: "atc_code",
            compressed: false,
        },
        ColumnSpec {
            name: "composition",
            compressed: true,
        },
        ColumnSpec {
            name: "excipients",
            compressed: true,
        },
        ColumnSpec {
            name: "contraindications",
            compressed: true,
        },
        ColumnSpec {
            name: "drug_interactions",
            compressed: true,
        },
        ColumnSpec {
            name: "side_effects",
            compressed: true,
        },
        ColumnSpec {
            name: "incompatibilities",
            compressed: true,
        },
    ],
};
const ATC_COLUMN: usize = 3;

/// One pharmaceutical product in one form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugRecord {
    pub drug_code: String,
    pub drug_name: String,
    pub drug_form: String,
    pub atc_code: String,
    pub composition: String,
    pub excipients: String,
    pub contraindications: String,
    pub drug_interactions: String,
    pub side_effects: String,
    pub incompatibilities: String,
}

/// The uncompressed identity columns of a [`DrugRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugSummary {
    pub drug_code: String,
    pub drug_name: String,
    pub drug_form: String,
    pub atc_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

/// True if `code` has the WHO ATC shape or is a prefix of it:
/// letter, two digits, letter, letter, two digits.
pub fn is_atc_shape(code: &str) -> bool {
    let b = code.as_bytes();
    if !matches!(b.len(), 1 | 3 | 4 | 5 | 7) {
        return false;
    }
    b.iter().enumerate().all(|(i, c)| match i {
        0 | 3 | 4 => c.is_ascii_uppercase(),
        _ => c.is_ascii_digit(),
    })
}

impl DrugRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.drug_code.trim().is_empty() {
            return Err(ValidationError {
                field: "drug_code",
                reason: "must not be empty".into(),
            });
        }
        if self.drug_code.chars().any(char::is_control) {
            return Err(ValidationError {
                field: "drug_code",
                reason: "must not contain control characters".into(),
            });
        }
        if !is_atc_shape(&self.atc_code) {
            return Err(ValidationError {
                field: "atc_code",
                reason: format!("{:?} is not a WHO ATC code", self.atc_code),
            });
        }
        Ok(())
    }

    /// ATC level-4 (chemical subgroup) prefix, when the code is that deep.
    pub fn atc_level4(&self) -> Option<&str> {
        self.atc_code.get(..5).filter(|_| self.atc_code.len() >= 5)
    }

    fn into_cells(self) -> Vec<String> {
        vec![
            self.drug_code,
            self.drug_name,
            self.drug_form,
            self.atc_code,
            self.composition,
            self.excipients,
            self.contraindications,
            self.drug_interactions,
            self.side_effects,
            self.incompatibilities,
        ]
    }

    fn from_cells(cells: Vec<String>) -> DrugRecord {
        let mut it = cells.into_iter();
        let mut next = || it.next().unwrap_or_default();
        DrugRecord {
            drug_code: next(),
            drug_name: next(),
            drug_form: next(),
            atc_code: next(),
            composition: next(),
            excipients: next(),
            contraindications: next(),
            drug_interactions: next(),
            side_effects: next(),
            incompatibilities: next(),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("query precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StoreStats {
    pub record_count: usize,
    pub bytes_on_disk: u64,
    pub cache_hit_rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// Zero disables the cache.
    pub cache_capacity: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }
}

#[derive(Debug)]
pub struct KnowledgeStore {
    table: Table,
    cache: Option<Mutex<LruCache<String, Arc<DrugRecord>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl KnowledgeStore {
    pub fn open(dir: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let table = Table::open(dir.as_ref(), DRUG_SCHEMA)?;
        Ok(KnowledgeStore {
            table,
            cache: NonZeroUsize::new(options.cache_capacity).map(|n| Mutex::new(LruCache::new(n))),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Stores `record`, replacing any record with the same code.
    pub fn put_drug(&self, record: DrugRecord) -> Result<(), StoreError> {
        record.validate()?;
        match &self.cache {
            Some(cache) => {
                // Holding the cache lock across the write keeps a concurrent
                // miss from re-inserting the old record.
                let mut cache = cache.lock();
                let code = record.drug_code.clone();
                self.table.put(record.clone().into_cells())?;
                if cache.contains(&code) {
                    cache.put(code, Arc::new(record));
                }
            }
            None => self.table.put(record.into_cells())?,
        }
        Ok(())
    }

    pub fn get_drug(&self, drug_code: &str) -> Result<Option<Arc<DrugRecord>>, StoreError> {
        let Some(cache) = &self.cache else {
            return Ok(self.load(drug_code)?.map(Arc::new));
        };
        let mut cache = cache.lock();
        if let Some(hit) = cache.get(drug_code) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(Arc::clone(hit)));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let loaded = self.load(drug_code)?.map(Arc::new);
        if let Some(record) = &loaded {
            cache.put(drug_code.to_string(), Arc::clone(record));
        }
        Ok(loaded)
    }

    fn load(&self, drug_code: &str) -> Result<Option<DrugRecord>, StoreError> {
        Ok(self.table.get(drug_code)?.map(DrugRecord::from_cells))
    }

    /// Records whose ATC code starts with `prefix`, ordered by drug code.
    pub fn query_by_atc_prefix(&self, prefix: &str) -> Result<Vec<DrugRecord>, StoreError> {
        let prefix = prefix.trim();
        if prefix.is_empty() {
            return Err(StoreError::Precondition("ATC prefix must not be empty".into()));
        }
        Ok(self
            .table
            .scan_where(|row| row.get(ATC_COLUMN).is_some_and(|atc| atc.starts_with(prefix)))?
            .into_iter()
            .map(DrugRecord::from_cells)
            .collect())
    }

    /// Identity columns of the records whose ATC code starts with `prefix`,
    /// ordered by drug code. Cheaper than [`Self::query_by_atc_prefix`]
    /// because the compressed leaflet sections stay untouched.
    pub fn summaries_by_atc_prefix(&self, prefix: &str) -> Result<Vec<DrugSummary>, StoreError> {
        let prefix = prefix.trim();
        if prefix.is_empty() {
            return Err(StoreError::Precondition("ATC prefix must not be empty".into()));
        }
        Ok(self.table.scan_plain(
            |row| row.get(ATC_COLUMN).is_some_and(|atc| atc.starts_with(prefix)),
            |row| {
                let col = |i| row.get(i).unwrap_or_default().to_string();
                DrugSummary {
                    drug_code: col(0),
                    drug_name: col(1),
                    drug_form: col(2),
                    atc_code: col(ATC_COLUMN),
                }
            },
        ))
    }

    /// Every record, ordered by drug code.
    pub fn all(&self) -> Result<Vec<DrugRecord>, StoreError> {
        Ok(self
            .table
            .scan_where(|_| true)?
            .into_iter()
            .map(DrugRecord::from_cells)
            .collect())
    }

    pub fn compact_and_stats(&self) -> Result<StoreStats, StoreError> {
        let footprint = self.table.compact()?;
        Ok(StoreStats {
            record_count: footprint.rows,
            bytes_on_disk: footprint.bytes_on_disk,
            cache_hit_rate: self.cache_hit_rate(),
        })
    }

    pub fn stats(&self) -> Result<StoreStats, StoreError> {
        let footprint = self.table.footprint()?;
        Ok(StoreStats {
            record_count: footprint.rows,
            bytes_on_disk: footprint.bytes_on_disk,
            cache_hit_rate: self.cache_hit_rate(),
        })
    }

    pub fn cache_hit_rate(&self) -> f64 {
        let hits = self.hits.load(Ordering::Relaxed);
        let total = hits + self.misses.load(Ordering::Relaxed);
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    /// Flushes pending writes to disk.
    pub fn close(self) -> Result<(), StoreError> {
        self.table.sync()?;
        Ok(())
    }
}
