//! Subcommands of the `heliot` binary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use heliot_core::config::{build_backend, Config};
use heliot_core::engine::Engine;
use heliot_core::eval::{
    evaluate, render_report, write_predictions_csv, write_report, ReportFormat, DEFAULT_CONCURRENCY, DEFAULT_RUNS,
};
use heliot_core::gateway::BackendKind;
use heliot_core::generator::{
    export_dataset_csv, generate_drug_catalog, generate_patient_dataset, import_dataset_csv, stub_records, CaseStrata,
    DrugClassDistribution,
};
use heliot_core::ingest::{
    ingest_leaflet_csv, parse_leaflet_rows, parse_synonym_rows, translate_ingredients, write_leaflet_csv,
    write_synonyms_csv, DEFAULT_FAN_OUT,
};
use heliot_core::knowledge::{DrugRecord, KnowledgeStore, StoreOptions};
use heliot_core::retry::RetryPolicy;
use heliot_core::synonyms::{IngredientEntry, IngredientKind, PubChemClient, SynonymIndex, PUBCHEM_BASE_URL};

const DEFAULT_SYNONYMS_PATH: &str = "data/synonyms.csv";

#[derive(Debug, Parser)]
#[command(name = "heliot", version, about = "Adverse drug reaction decision support")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a processed leaflet CSV into the drug store.
    IngestLeaflets {
        csv: PathBuf,
        /// Store directory; defaults to HELIOT_DRUG_DB_PATH.
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Validate a synonym CSV and install it as the runtime synonym file.
    IngestSynonyms {
        csv: PathBuf,
        /// Destination; defaults to HELIOT_SYNONYMS_PATH or data/synonyms.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query the compound-synonym service for each name in a file (one per line).
    FetchSynonyms {
        names: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = PUBCHEM_BASE_URL)]
        base_url: String,
        #[arg(long, default_value = "active")]
        kind: String,
        /// Translate the names from this language through the configured
        /// backend before the lookup.
        #[arg(long)]
        source_language: Option<String>,
    },
    /// Write a synthetic drug catalog in leaflet CSV form.
    GenerateCatalog {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic case dataset drawn from a catalog.
    GeneratePatients {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the engine over a dataset and write metrics.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "rule")]
        backend: String,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        /// Forced labels for the rule-based backend.
        #[arg(long)]
        error_plan: Option<PathBuf>,
        /// Fixture file for the scripted backend.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Leaflet CSV with the dataset's drugs. Without it (and without
        /// --drug-db) minimal records are derived from the dataset.
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Existing drug store directory.
        #[arg(long, conflicts_with = "catalog")]
        drug_db: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// json, csv or markdown; inferred from --out when omitted.
        #[arg(long)]
        format: Option<String>,
        /// Per-case predictions of the first run.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CONCURRENCY)]
        concurrency: usize,
    },
    /// Start the HTTP API.
    Serve {
        /// Overrides HELIOT_BIND_ADDR.
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_catalog(path: &Path) -> Result<Vec<DrugRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (records, diagnostics) = parse_leaflet_rows(file)?;
    if let Some(d) = diagnostics.first() {
        bail!("{}: {} bad row(s), first at {d}", path.display(), diagnostics.len());
    }
    Ok(records)
}

fn temp_store(records: Vec<DrugRecord>) -> Result<(tempfile::TempDir, KnowledgeStore)> {
    let dir = tempfile::tempdir()?;
    let store = KnowledgeStore::open(dir.path(), StoreOptions::default())?;
    for r in records {
        store.put_drug(r)?;
    }
    Ok((dir, store))
}

pub async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestLeaflets { csv, db } => {
            let db = match db {
                Some(db) => db,
                None => Config::from_env()?.drug_db_path,
            };
            let store = KnowledgeStore::open(&db, StoreOptions::default())?;
            let report = ingest_leaflet_csv(&csv, &store)?;
            for d in &report.diagnostics {
                eprintln!("skipped {d}");
            }
            let total = store.len();
            store.close()?;
            println!(
                "stored {} record(s), skipped {} row(s); {} record(s) in {}",
                report.stored,
                report.diagnostics.len(),
                total,
                db.display()
            );
        }
        Command::IngestSynonyms { csv, out } => {
            let file = File::open(&csv).with_context(|| format!("opening {}", csv.display()))?;
            let entries = parse_synonym_rows(file)?;
            let index = SynonymIndex::load(entries.clone())?;
            let out = match out {
                Some(out) => out,
                None => Config::from_env()?
                    .synonyms_path
                    .unwrap_or_else(|| DEFAULT_SYNONYMS_PATH.into()),
            };
            write_synonyms_csv(&entries, create(&out)?)?;
            println!("{} ingredient(s) installed at {}", index.len(), out.display());
        }
        Command::FetchSynonyms {
            names,
            out,
            base_url,
            kind,
            source_language,
        } => {
            let kind: IngredientKind = kind.parse()?;
            let file = File::open(&names).with_context(|| format!("opening {}", names.display()))?;
            let mut originals = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line?;
                let line = line.trim();
                if !line.is_empty() && !line.starts_with('#') {
                    originals.push(line.to_string());
                }
            }
            let english = match source_language {
                Some(lang) => {
                    let backend = Config::from_env()?.build_backend()?;
                    translate_ingredients(&originals, &lang, backend.as_ref(), DEFAULT_FAN_OUT).await?
                }
                None => originals.clone(),
            };
            let client = PubChemClient::new(&base_url, RetryPolicy::default())?;
            let mut entries = Vec::with_capacity(originals.len());
            for (original, name) in originals.iter().zip(&english) {
                let synonyms = client
                    .fetch_remote_synonyms(name)
                    .await
                    .with_context(|| format!("fetching synonyms for {name:?}"))?;
                tracing::info!(name = %name, count = synonyms.len(), "synonyms fetched");
                entries.push(IngredientEntry::new(original.as_str(), name.as_str(), synonyms, kind)?);
            }
            SynonymIndex::load(entries.clone()).context("fetched synonyms collide")?;
            write_synonyms_csv(&entries, create(&out)?)?;
            println!("wrote {} entr(ies) to {}", entries.len(), out.display());
        }
        Command::GenerateCatalog { seed, out } => {
            let catalog = generate_drug_catalog(&DrugClassDistribution::paper(), seed)?;
            write_leaflet_csv(&catalog, create(&out)?)?;
            println!("wrote {} drug(s) to {}", catalog.len(), out.display());
        }
        Command::GeneratePatients { seed, catalog, out } => {
            let records = read_catalog(&catalog)?;
            let cases = generate_patient_dataset(&CaseStrata::paper(), &records, seed)?;
            export_dataset_csv(&cases, &out)?;
            println!("wrote {} case(s) to {}", cases.len(), out.display());
        }
        Command::Evaluate {
            dataset,
            backend,
            runs,
            error_plan,
            script,
            catalog,
            drug_db,
            out,
            format,
            predictions,
            concurrency,
        } => {
            let cases = import_dataset_csv(&dataset)?;
            let kind: BackendKind = backend.parse().map_err(anyhow::Error::msg)?;
            if error_plan.is_some() && kind != BackendKind::Rule {
                bail!("--error-plan applies only to the rule backend");
            }
            let backend = match kind {
                BackendKind::Remote => {
                    let config = Config::from_env()?;
                    build_backend(kind, config.llm_base_url.as_deref(), config.llm_api_key, None, None)?
                }
                _ => build_backend(kind, None, None, script.as_deref(), error_plan.as_deref())?,
            };
            let (_guard, store) = match (catalog, drug_db) {
                (_, Some(db)) => (None, KnowledgeStore::open(db, StoreOptions::default())?),
                (Some(catalog), None) => {
                    let (dir, store) = temp_store(read_catalog(&catalog)?)?;
                    (Some(dir), store)
                }
                (None, None) => {
                    let (dir, store) = temp_store(stub_records(&cases))?;
                    (Some(dir), store)
                }
            };
            let mut engine = Engine::new(Arc::new(store), backend);
            if let Ok(config) = Config::from_env() {
                engine = engine.with_model(config.llm_model);
            }
            let (report, batch) = evaluate(&cases, &engine, runs, concurrency).await?;
            let format = match format {
                Some(f) => f.parse().map_err(anyhow::Error::msg)?,
                None => ReportFormat::from_path(&out),
            };
            write_report(&report, &out, format)?;
            if let Some(path) = predictions {
                write_predictions_csv(&cases, &batch.runs[0], create(&path)?)?;
            }
            print!("{}", render_report(&report, ReportFormat::Markdown)?);
            println!("\nreport written to {}", out.display());
        }
        Command::Serve { bind } => {
            let mut config = Config::from_env()?;
            if let Some(bind) = bind {
                config.bind_addr = bind;
            }
            let state = heliot_server::build_state(&config)?;
            heliot_server::serve(state, config.bind_addr).await?;
        }
    }
    Ok(())
}
