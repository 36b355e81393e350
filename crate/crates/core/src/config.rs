//! Runtime configuration from `HELIOT_*` environment variables.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::gateway::{
    BackendKind, ChatBackend, ErrorPlan, GatewayError, RemoteBackend, RuleBasedBackend, ScriptedBackend, DEFAULT_MODEL,
};
use crate::retry::RetryPolicy;

pub const DEFAULT_DRUG_DB_PATH: &str = "data/drugs";
pub const DEFAULT_PATIENT_DB_PATH: &str = "data/patients";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
#[error("{key}: {reason}")]
pub struct ConfigError {
    pub key: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub drug_db_path: PathBuf,
    pub patient_db_path: PathBuf,
    /// Synonym CSV loaded at startup; without it names match only verbatim.
    pub synonyms_path: Option<PathBuf>,
    pub backend: BackendKind,
    pub llm_base_url: Option<String>,
    pub llm_api_key: Option<String>,
    pub llm_model: String,
    /// Fixture file for the scripted backend.
    pub script_path: Option<PathBuf>,
    /// Error plan CSV for the rule-based backend.
    pub error_plan_path: Option<PathBuf>,
    pub bind_addr: SocketAddr,
    pub api_token: Option<String>,
}

impl Config {
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Builds the configuration from an arbitrary key lookup. Empty values
    /// count as unset.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let get = |k: &str| lookup(k).map(|v| v.trim().to_string()).filter(|v| !v.is_empty());
        let llm_base_url = get("HELIOT_LLM_BASE_URL");
        let backend = match get("HELIOT_BACKEND") {
            Some(v) => v.parse().map_err(|reason| ConfigError {
                key: "HELIOT_BACKEND",
                reason,
            })?,
            None if llm_base_url.is_some() => BackendKind::Remote,
            None => BackendKind::Rule,
        };
        if backend == BackendKind::Remote && llm_base_url.is_none() {
            return Err(ConfigError {
                key: "HELIOT_LLM_BASE_URL",
                reason: "required for the remote backend".into(),
            });
        }
        let script_path = get("HELIOT_SCRIPT_PATH").map(PathBuf::from);
        if backend == BackendKind::Scripted && script_path.is_none() {
            return Err(ConfigError {
                key: "HELIOT_SCRIPT_PATH",
                reason: "required for the scripted backend".into(),
            });
        }
        let bind = get("HELIOT_BIND_ADDR").unwrap_or_else(|| DEFAULT_BIND_ADDR.to_string());
        let bind_addr = bind.parse().map_err(|e| ConfigError {
            key: "HELIOT_BIND_ADDR",
            reason: format!("{bind:?}: {e}"),
        })?;
        Ok(Config {
            drug_db_path: get("HELIOT_DRUG_DB_PATH")
                .unwrap_or_else(|| DEFAULT_DRUG_DB_PATH.into())
                .into(),
            patient_db_path: get("HELIOT_PATIENT_DB_PATH")
                .unwrap_or_else(|| DEFAULT_PATIENT_DB_PATH.into())
                .into(),
            synonyms_path: get("HELIOT_SYNONYMS_PATH").map(PathBuf::from),
            backend,
            llm_base_url,
            llm_api_key: get("HELIOT_LLM_API_KEY"),
            llm_model: get("HELIOT_LLM_MODEL").unwrap_or_else(|| DEFAULT_MODEL.into()),
            script_path,
            error_plan_path: get("HELIOT_ERROR_PLAN_PATH").map(PathBuf::from),
            bind_addr,
            api_token: get("HELIOT_API_TOKEN"),
        })
    }
}

/// Builds the backend a configuration selects.
pub fn build_backend(
    kind: BackendKind,
    base_url: Option<&str>,
    api_key: Option<String>,
    script_path: Option<&Path>,
    error_plan_path: Option<&Path>,
) -> Result<Arc<dyn ChatBackend>, GatewayError> {
    Ok(match kind {
        BackendKind::Remote => {
            let url = base_url.ok_or_else(|| GatewayError::InvalidRequest("remote backend needs a base URL".into()))?;
            Arc::new(RemoteBackend::new(url, api_key, RetryPolicy::default())?)
        }
        BackendKind::Scripted => {
            let path = script_path
                .ok_or_else(|| GatewayError::InvalidRequest("scripted backend needs a fixture file".into()))?;
            Arc::new(ScriptedBackend::from_file(path)?)
        }
        BackendKind::Rule => {
            let plan = match error_plan_path {
                Some(path) => {
                    let file = std::fs::File::open(path)
                        .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
                    ErrorPlan::from_csv(file)?
                }
                None => ErrorPlan::new(),
            };
            Arc::new(RuleBasedBackend::new(plan))
        }
    })
}

impl Config {
    pub fn build_backend(&self) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        build_backend(
            self.backend,
            self.llm_base_url.as_deref(),
            self.llm_api_key.clone(),
            self.script_path.as_deref(),
            self.error_plan_path.as_deref(),
        )
    }
}
