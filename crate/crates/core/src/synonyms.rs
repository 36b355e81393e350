//! In-memory ingredient synonym index and the remote compound-synonym client
//! used while building it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::retry::{with_retry, Attempt, RetryPolicy};

/// Casefold, drop `,.;:()[]`, collapse whitespace, trim.
pub fn normalize(s: &str) -> String {
    let stripped: String = s
        .chars()
        .filter(|c| !matches!(c, ',' | '.' | ';' | ':' | '(' | ')' | '[' | ']'))
        .collect();
    stripped.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngredientKind {
    Active,
    Inactive,
}

impl IngredientKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IngredientKind::Active => "active",
            IngredientKind::Inactive => "inactive",
        }
    }
}

impl fmt::Display for IngredientKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IngredientKind {
    type Err = SynonymError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "active" => Ok(IngredientKind::Active),
            "inactive" => Ok(IngredientKind::Inactive),
            _ => Err(SynonymError::InvalidEntry(format!(
                "ingredient type must be active or inactive, got {s:?}"
            ))),
        }
    }
}

/// A canonical ingredient and the names it is known by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngredientEntry {
    pub ingredient: String,
    pub english_name: String,
    pub synonyms: Vec<String>,
    pub kind: IngredientKind,
}

impl IngredientEntry {
    /// Builds an entry, dropping synonyms that normalize to an empty string or
    /// to a key already present in the entry.
    pub fn new(
        ingredient: impl Into<String>,
        english_name: impl Into<String>,
        synonyms: impl IntoIterator<Item = String>,
        kind: IngredientKind,
    ) -> Result<Self, SynonymError> {
        let english_name = english_name.into().trim().to_string();
        if normalize(&english_name).is_empty() {
            return Err(SynonymError::InvalidEntry("English name must not be empty".into()));
        }
        let mut seen = vec![normalize(&english_name)];
        let mut kept = Vec::new();
        for s in synonyms {
            let key = normalize(&s);
            if key.is_empty() || seen.contains(&key) {
                continue;
            }
            seen.push(key);
            kept.push(s.trim().to_string());
        }
        Ok(IngredientEntry {
            ingredient: ingredient.into().trim().to_string(),
            english_name,
            synonyms: kept,
            kind,
        })
    }

    /// Normalized lookup keys owned by this entry.
    fn keys(&self) -> Vec<String> {
        let mut keys = vec![normalize(&self.english_name)];
        for k in std::iter::once(&self.ingredient)
            .chain(&self.synonyms)
            .map(|s| normalize(s))
        {
            if !k.is_empty() && !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }
}

/// Two entries claiming the same normalized name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Collision {
    pub key: String,
    pub first: String,
    pub second: String,
}

impl fmt::Display for Collision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} is claimed by both {:?} and {:?}",
            self.key, self.first, self.second
        )
    }
}

#[derive(Debug, Error)]
pub enum SynonymError {
    #[error("invalid ingredient entry: {0}")]
    InvalidEntry(String),
    #[error("synonym collisions: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Collisions(Vec<Collision>),
}

/// Opaque handle to an entry inside one [`SynonymIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntryId(usize);

/// Immutable normalized-name → ingredient lookup.
#[derive(Debug, Clone, Default)]
pub struct SynonymIndex {
    entries: Vec<IngredientEntry>,
    lookup: HashMap<String, usize>,
}

impl SynonymIndex {
    /// Indexes the English name, the source-language name and every synonym
    /// of each entry. Fails if any normalized key belongs to two entries.
    pub fn load(entries: Vec<IngredientEntry>) -> Result<Self, SynonymError> {
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut collisions = Vec::new();
        for (idx, entry) in entries.iter().enumerate() {
            for key in entry.keys() {
                match lookup.get(&key) {
                    Some(&owner) if owner != idx => collisions.push(Collision {
                        key,
                        first: entries[owner].english_name.clone(),
                        second: entry.english_name.clone(),
                    }),
                    Some(_) => {}
                    None => {
                        lookup.insert(key, idx);
                    }
                }
            }
        }
        if !collisions.is_empty() {
            return Err(SynonymError::Collisions(collisions));
        }
        Ok(SynonymIndex { entries, lookup })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IngredientEntry] {
        &self.entries
    }

    pub fn entry(&self, id: EntryId) -> &IngredientEntry {
        &self.entries[id.0]
    }

    pub fn resolve(&self, name: &str) -> Option<EntryId> {
        self.lookup.get(&normalize(name)).copied().map(EntryId)
    }

    /// English name and owning entry for `name`, if known.
    pub fn canonicalize(&self, name: &str) -> Option<(&str, &IngredientEntry)> {
        self.resolve(name).map(|id| {
            let e = self.entry(id);
            (e.english_name.as_str(), e)
        })
    }

    pub fn same_ingredient(&self, a: &str, b: &str) -> bool {
        match (self.resolve(a), self.resolve(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }
}

pub const PUBCHEM_BASE_URL: &str = "https://pubchem.ncbi.nlm.nih.gov";

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("ingredient name must not be empty")]
    EmptyName,
    #[error("invalid base URL: {0}")]
    BaseUrl(String),
    #[error("synonym service unavailable after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("synonym service returned {status} for {url}")]
    Status { status: u16, url: String },
    #[error("malformed synonym payload from {url}: {detail}")]
    Payload { url: String, detail: String },
}

#[derive(Deserialize)]
struct InformationList {
    #[serde(rename = "InformationList")]
    list: Information,
}

#[derive(Deserialize)]
struct Information {
    #[serde(rename = "Information", default)]
    items: Vec<InformationItem>,
}

#[derive(Deserialize)]
struct InformationItem {
    #[serde(rename = "Synonym", default)]
    synonyms: Vec<String>,
}

enum EndpointError {
    Transient(String),
    Permanent(RemoteError),
}

/// Client for the substance and compound synonym endpoints.
#[derive(Debug, Clone)]
pub struct PubChemClient {
    base: Url,
    http: reqwest::Client,
    retry: RetryPolicy,
}

impl PubChemClient {
    pub fn new(base_url: &str, retry: RetryPolicy) -> Result<Self, RemoteError> {
        let base = Url::parse(base_url).map_err(|e| RemoteError::BaseUrl(e.to_string()))?;
        if base.cannot_be_a_base() {
            return Err(RemoteError::BaseUrl(format!("{base_url} cannot be a base")));
        }
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| RemoteError::BaseUrl(e.to_string()))?;
        Ok(PubChemClient { base, http, retry })
    }

    fn endpoint(&self, collection: &str, name: &str) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut()
            .expect("checked in constructor")
            .pop_if_empty()
            .extend(["rest", "pug", collection, "name", name, "synonyms", "JSON"]);
        url
    }

    /// Normalized, deduplicated union of substance and compound synonyms.
    /// A name unknown to both endpoints yields an empty list.
    pub async fn fetch_remote_synonyms(&self, english_name: &str) -> Result<Vec<String>, RemoteError> {
        let name = english_name.trim();
        if name.is_empty() {
            return Err(RemoteError::EmptyName);
        }
        let (substance, compound) = tokio::join!(
            self.fetch_endpoint("substance", name),
            self.fetch_endpoint("compound", name)
        );
        let mut out: Vec<String> = Vec::new();
        for s in substance?.into_iter().chain(compound?) {
            let key = normalize(&s);
            if !key.is_empty() && !out.contains(&key) {
                out.push(key);
            }
        }
        Ok(out)
    }

    async fn fetch_endpoint(&self, collection: &str, name: &str) -> Result<Vec<String>, RemoteError> {
        let url = self.endpoint(collection, name);
        let result = with_retry(self.retry, |_| {
            let url = url.clone();
            async move {
                match self.try_fetch(&url).await {
                    Ok(v) => Attempt::Done(v),
                    Err(EndpointError::Transient(e)) => Attempt::Retry(EndpointError::Transient(e)),
                    Err(e) => Attempt::Fail(e),
                }
            }
        })
        .await;
        result.map_err(|(e, attempts)| match e {
            EndpointError::Transient(last) => RemoteError::Exhausted { attempts, last },
            EndpointError::Permanent(e) => e,
        })
    }

    async fn try_fetch(&self, url: &Url) -> Result<Vec<String>, EndpointError> {
        let resp = self
            .http
            .get(url.clone())
            .send()
            .await
            .map_err(|e| EndpointError::Transient(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::NOT_FOUND {
            return Ok(Vec::new());
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(EndpointError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(EndpointError::Permanent(RemoteError::Status {
                status: status.as_u16(),
                url: url.to_string(),
            }));
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| EndpointError::Transient(e.to_string()))?;
        let parsed: InformationList = serde_json::from_slice(&body).map_err(|e| {
            EndpointError::Permanent(RemoteError::Payload {
                url: url.to_string(),
                detail: e.to_string(),
            })
        })?;
        Ok(parsed.list.items.into_iter().flat_map(|i| i.synonyms).collect())
    }
}
