//! Catalog generation, leaflet ingestion, store reopen and evaluation chained
//! together through the public API.

use std::sync::Arc;

use chrono::{TimeZone, Utc};
use heliot_core::domain::{AlertType, ClassificationCategory};
use heliot_core::engine::{AssessmentRequest, Engine};
use heliot_core::eval::{evaluate, reference_error_plan};
use heliot_core::gateway::RuleBasedBackend;
use heliot_core::generator::{generate_drug_catalog, generate_patient_dataset, CaseStrata, DrugClassDistribution};
use heliot_core::ingest::{ingest_leaflet_csv, write_leaflet_csv};
use heliot_core::knowledge::{KnowledgeStore, StoreOptions};
use heliot_core::patients::{ClinicalNote, NoteSource, PatientStore};

#[tokio::test]
async fn generated_catalog_survives_ingest_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = generate_drug_catalog(&DrugClassDistribution::paper(), 7).unwrap();
    let csv_path = dir.path().join("leaflets.csv");
    write_leaflet_csv(&catalog, std::fs::File::create(&csv_path).unwrap()).unwrap();

    let store_dir = dir.path().join("drugs");
    let store = KnowledgeStore::open(&store_dir, StoreOptions::default()).unwrap();
    let report = ingest_leaflet_csv(&csv_path, &store).unwrap();
    assert_eq!(report.stored, catalog.len());
    assert!(report.diagnostics.is_empty());
    store.close().unwrap();

    let store = Arc::new(KnowledgeStore::open(&store_dir, StoreOptions::default()).unwrap());
    assert_eq!(store.len(), catalog.len());
    let cases = generate_patient_dataset(&CaseStrata::paper(), &catalog, 7).unwrap();
    let sample: Vec<_> = cases.iter().take(120).cloned().collect();
    let plan = reference_error_plan(&sample);
    let engine = Engine::new(store, Arc::new(RuleBasedBackend::new(plan.clone())));
    let (report, batch) = evaluate(&sample, &engine, 2, 4).await.unwrap();
    assert_eq!(report.failures, 0);
    assert!(report.runs_identical);
    assert_eq!(report.fleiss_kappa_classification, 1.0);
    let wrong = batch.runs[0]
        .iter()
        .zip(&sample)
        .filter(|(p, c)| p.classification != Some(c.classification))
        .count();
    assert_eq!(wrong, plan.len());
    assert_eq!(report.reaction.macro_f1, 1.0);
}

#[tokio::test]
async fn stored_history_reaches_the_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = generate_drug_catalog(&DrugClassDistribution::paper(), 3).unwrap();
    let store = KnowledgeStore::open(dir.path().join("drugs"), StoreOptions::default()).unwrap();
    for r in &catalog {
        store.put_drug(r.clone()).unwrap();
    }
    let patients = PatientStore::open(dir.path().join("patients")).unwrap();
    let cases = generate_patient_dataset(&CaseStrata::paper(), &catalog, 3).unwrap();
    let case = cases
        .iter()
        .find(|c| c.classification == ClassificationCategory::DirectActiveIngredientReactivity)
        .unwrap();
    patients
        .append_note(ClinicalNote {
            patient_id: "H-1".into(),
            timestamp: Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap(),
            text: case.clinical_note.clone(),
            source: NoteSource::Manual,
        })
        .unwrap();
    let engine = Engine::new(Arc::new(store), Arc::new(RuleBasedBackend::default())).with_patients(Arc::new(patients));
    let request = AssessmentRequest {
        drug_code: case.drug_code.clone(),
        patient_id: Some("H-1".into()),
        ..Default::default()
    };
    let a = engine.assess_collect(&request).await.unwrap();
    assert_eq!(a.classification(), case.classification);
    assert_eq!(a.alert(), case.alert_type);
    assert_ne!(a.alert(), AlertType::None);
}
