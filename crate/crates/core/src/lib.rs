pub mod config;
pub mod domain;
pub mod engine;
pub mod eval;
pub mod gateway;
pub mod generator;
pub mod ingest;
pub mod knowledge;
pub mod patients;
pub mod retry;
pub mod synonyms;
pub mod table;
