//! Batch evaluation: repeated runs, per-class metrics, agreement across runs,
//! alert distributions and timing.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{derive_alert, AlertType, ClassificationCategory, ReactionType};
use crate::engine::{baseline_assess, AssessmentRequest, Engine};
use crate::gateway::{ErrorPlan, ForcedLabels};
use crate::generator::SyntheticCase;

/// Written in place of a label when the engine produced no assessment.
pub const FAILURE_LABEL: &str = "ENGINE FAILURE";
pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {truth} truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("invalid rating matrix: {0}")]
    Ratings(String),
    #[error("inconsistent alert counts: {0}")]
    Alerts(String),
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization: {0}")]
    Serialize(String),
}

/// A closed label set that metrics can be computed over.
pub trait Label: Copy + Eq + 'static {
    fn all() -> &'static [Self];
    fn position(self) -> usize;
    fn name(self) -> &'static str;
}

macro_rules! impl_label {
    ($t:ty) => {
        impl Label for $t {
            fn all() -> &'static [Self] {
                <$t>::ALL
            }
            fn position(self) -> usize {
                self.index()
            }
            fn name(self) -> &'static str {
                self.label()
            }
        }
    };
}

impl_label!(ClassificationCategory);
impl_label!(ReactionType);
impl_label!(AlertType);

/// Rows are truth, columns are predictions. Engine failures are kept in a
/// separate per-truth-class column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub failures: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn build<L: Label>(predictions: &[Option<L>], truth: &[L]) -> Result<Self, EvalError> {
        if predictions.len() != truth.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                truth: truth.len(),
            });
        }
        let k = L::all().len();
        let mut counts = vec![vec![0u64; k]; k];
        let mut failures = vec![0u64; k];
        for (p, t) in predictions.iter().zip(truth) {
            match p {
                Some(p) => counts[t.position()][p.position()] += 1,
                None => failures[t.position()] += 1,
            }
        }
        Ok(ConfusionMatrix {
            labels: L::all().iter().map(|l| l.name().to_string()).collect(),
            counts,
            failures,
        })
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum::<u64>() + self.failures[class]
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub correct: u64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class precision, recall and F1 plus their unweighted means over the
/// classes that occur in `truth`.
///
/// A class never predicted has precision 1 when it is also absent from the
/// truth and 0 otherwise; recall of a class absent from the truth is 1 when
/// it is never predicted and 0 otherwise.
pub fn compute_metrics<L: Label>(predictions: &[Option<L>], truth: &[L]) -> Result<MetricsReport, EvalError> {
    let cm = ConfusionMatrix::build(predictions, truth)?;
    let mut per_class = Vec::with_capacity(cm.labels.len());
    let (mut sp, mut sr, mut sf, mut present) = (0.0, 0.0, 0.0, 0usize);
    for (i, label) in cm.labels.iter().enumerate() {
        let tp = cm.counts[i][i];
        let predicted = cm.predicted(i);
        let support = cm.support(i);
        let precision = ratio(tp, predicted, if support == 0 { 1.0 } else { 0.0 });
        let recall = ratio(tp, support, if predicted == 0 { 1.0 } else { 0.0 });
        let f1 = harmonic(precision, recall);
        if support > 0 {
            sp += precision;
            sr += recall;
            sf += f1;
            present += 1;
        }
        per_class.push(ClassMetrics {
            label: label.clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let mean = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
    Ok(MetricsReport {
        per_class,
        macro_precision: mean(sp),
        macro_recall: mean(sr),
        macro_f1: mean(sf),
        correct: cm.correct(),
        confusion: cm,
    })
}

/// Items by categories; each row counts how many runs chose each category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self, EvalError> {
        let first = counts.first().ok_or_else(|| EvalError::Ratings("no items".into()))?;
        let width = first.len();
        let raters: u32 = first.iter().sum();
        if raters < 2 {
            return Err(EvalError::Ratings("at least 2 ratings per item are required".into()));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != width {
                return Err(EvalError::Ratings(format!(
                    "item {i} has {} categories, expected {width}",
                    row.len()
                )));
            }
            let sum: u32 = row.iter().sum();
            if sum != raters {
                return Err(EvalError::Ratings(format!(
                    "item {i} has {sum} ratings, expected {raters}"
                )));
            }
        }
        Ok(RatingMatrix { counts, raters })
    }

    /// Builds the matrix from per-run category indices; `runs[r][i]` is the
    /// category run `r` gave item `i`.
    pub fn from_runs(runs: &[Vec<usize>], categories: usize) -> Result<Self, EvalError> {
        let items = runs.first().map_or(0, Vec::len);
        if runs.iter().any(|r| r.len() != items) {
            return Err(EvalError::Ratings("runs have different lengths".into()));
        }
        let mut counts = vec![vec![0u32; categories]; items];
        for run in runs {
            for (i, &c) in run.iter().enumerate() {
                if c >= categories {
                    return Err(EvalError::Ratings(format!("category {c} out of range")));
                }
                counts[i][c] += 1;
            }
        }
        Self::new(counts)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }
}

/// Fleiss' kappa. When chance agreement is 1 (every rating in one
/// category) the result is 1.
pub fn fleiss_kappa(ratings: &RatingMatrix) -> f64 {
    let n = ratings.raters as f64;
    let items = ratings.items() as f64;
    let k = ratings.counts[0].len();
    let mut totals = vec![0f64; k];
    let mut p_bar = 0.0;
    for row in &ratings.counts {
        let sq: f64 = row.iter().map(|&c| (c as f64) * (c as f64)).sum();
        p_bar += (sq - n) / (n * (n - 1.0));
        for (j, &c) in row.iter().enumerate() {
            totals[j] += c as f64;
        }
    }
    p_bar /= items;
    let p_e: f64 = totals.iter().map(|t| (t / (items * n)).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return 1.0;
    }
    (p_bar - p_e) / (1.0 - p_e)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertTriple {
    pub none: usize,
    pub interruptive: usize,
    pub non_interruptive: usize,
    /// Cases without an assessment; always zero for truth and baseline.
    pub failures: usize,
}

impl AlertTriple {
    pub fn count<I: IntoIterator<Item = Option<AlertType>>>(alerts: I) -> Self {
        let mut t = AlertTriple::default();
        for a in alerts {
            match a {
                Some(AlertType::None) => t.none += 1,
                Some(AlertType::Interruptive) => t.interruptive += 1,
                Some(AlertType::NonInterruptive) => t.non_interruptive += 1,
                None => t.failures += 1,
            }
        }
        t
    }

    pub fn total(&self) -> usize {
        self.none + self.interruptive + self.non_interruptive + self.failures
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.none, self.interruptive, self.non_interruptive)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertReport {
    pub truth: AlertTriple,
    pub system: AlertTriple,
    pub baseline: AlertTriple,
}

/// Alert counts for the ground truth, the system's predictions and the
/// traditional comparator applied to the true classifications.
pub fn alert_report(
    system: &[Option<(ClassificationCategory, ReactionType)>],
    truth: &[(ClassificationCategory, ReactionType)],
) -> Result<AlertReport, EvalError> {
    if system.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: system.len(),
            truth: truth.len(),
        });
    }
    Ok(AlertReport {
        truth: AlertTriple::count(truth.iter().map(|&(c, r)| Some(derive_alert(c, r)))),
        system: AlertTriple::count(system.iter().map(|p| p.map(|(c, r)| derive_alert(c, r)))),
        baseline: AlertTriple::count(truth.iter().map(|&(c, _)| Some(baseline_assess(c)))),
    })
}

/// Share of cases whose interruptive alert the system avoids relative to
/// the baseline.
pub fn interruptive_reduction(system: &AlertTriple, baseline: &AlertTriple, total: usize) -> Result<f64, EvalError> {
    if total == 0 {
        return Err(EvalError::Alerts("total must be positive".into()));
    }
    for (name, t) in [("system", system), ("baseline", baseline)] {
        if t.total() != total {
            return Err(EvalError::Alerts(format!(
                "{name} counts sum to {}, expected {total}",
                t.total()
            )));
        }
    }
    Ok((baseline.interruptive as f64 - system.interruptive as f64) / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub patient_id: String,
    pub classification: Option<ClassificationCategory>,
    pub reaction: Option<ReactionType>,
    pub alert: Option<AlertType>,
    pub latency: Duration,
    pub error: Option<String>,
}

impl CasePrediction {
    pub fn labels(&self) -> Option<(ClassificationCategory, ReactionType)> {
        Some((self.classification?, self.reaction?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub runs: Vec<Vec<CasePrediction>>,
}

async fn assess_case(engine: &Engine, case: &SyntheticCase) -> CasePrediction {
    let request = AssessmentRequest::for_note(case.drug_code.clone(), case.clinical_note.clone());
    let started = Instant::now();
    let outcome = engine.assess_collect(&request).await;
    let latency = started.elapsed();
    match outcome {
        Ok(a) => CasePrediction {
            patient_id: case.patient_id.clone(),
            classification: Some(a.classification()),
            reaction: Some(a.reaction()),
            alert: Some(a.alert()),
            latency,
            error: None,
        },
        Err(e) => CasePrediction {
            patient_id: case.patient_id.clone(),
            classification: None,
            reaction: None,
            alert: None,
            latency,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every case `runs` times with at most `concurrency` cases in flight.
/// `on_case` is called after each finished case. Engine errors become
/// failure predictions.
pub async fn run_batch_with_progress(
    cases: &[SyntheticCase],
    engine: &Engine,
    runs: usize,
    concurrency: usize,
    on_case: &(dyn Fn() + Send + Sync),
) -> Result<BatchResult, EvalError> {
    if runs == 0 {
        return Err(EvalError::NoRuns);
    }
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        // Indices rather than references keep the future's type free of a
        // higher-ranked lifetime, so callers can spawn it.
        let preds: Vec<CasePrediction> = stream::iter(0..cases.len())
            .map(|i| async move {
                let p = assess_case(engine, &cases[i]).await;
                on_case();
                p
            })
            .buffered(concurrency.max(1))
            .collect()
            .await;
        let failures = preds.iter().filter(|p| p.error.is_some()).count();
        tracing::info!(run = run + 1, cases = preds.len(), failures, "evaluation run finished");
        out.push(preds);
    }
    Ok(BatchResult { runs: out })
}

pub async fn run_batch(
    cases: &[SyntheticCase],
    engine: &Engine,
    runs: usize,
    concurrency: usize,
) -> Result<BatchResult, EvalError> {
    run_batch_with_progress(cases, engine, runs, concurrency, &|| {}).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub max_seconds: f64,
}

impl TimingStats {
    pub fn from_latencies(latencies: &[Duration]) -> Self {
        if latencies.is_empty() {
            return TimingStats {
                mean_seconds: 0.0,
                median_seconds: 0.0,
                max_seconds: 0.0,
            };
        }
        let mut secs: Vec<f64> = latencies.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        let mid = secs.len() / 2;
        let median = if secs.len().is_multiple_of(2) {
            (secs[mid - 1] + secs[mid]) / 2.0
        } else {
            secs[mid]
        };
        TimingStats {
            mean_seconds: secs.iter().sum::<f64>() / secs.len() as f64,
            median_seconds: median,
            max_seconds: secs[secs.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset_size: usize,
    pub run_count: usize,
    /// Per-class and macro values averaged over runs; the confusion matrix
    /// is that of the first run.
    pub classification: MetricsReport,
    pub reaction: MetricsReport,
    /// Alert counts of the first run.
    pub alerts: AlertReport,
    pub interruptive_reduction: f64,
    pub fleiss_kappa_classification: f64,
    pub fleiss_kappa_reaction: f64,
    pub runs_identical: bool,
    pub failures: usize,
    pub timing: TimingStats,
}

fn average(reports: Vec<MetricsReport>) -> MetricsReport {
    let n = reports.len() as f64;
    let mut iter = reports.into_iter();
    let mut acc = iter.next().expect("at least one run");
    let first_confusion = acc.confusion.clone();
    for r in iter {
        for (a, b) in acc.per_class.iter_mut().zip(&r.per_class) {
            a.precision += b.precision;
            a.recall += b.recall;
            a.f1 += b.f1;
        }
        acc.macro_precision += r.macro_precision;
        acc.macro_recall += r.macro_recall;
        acc.macro_f1 += r.macro_f1;
        acc.correct += r.correct;
    }
    for a in acc.per_class.iter_mut() {
        a.precision /= n;
        a.recall /= n;
        a.f1 /= n;
    }
    acc.macro_precision /= n;
    acc.macro_recall /= n;
    acc.macro_f1 /= n;
    acc.correct = (acc.correct as f64 / n).round() as u64;
    acc.confusion = first_confusion;
    acc
}

/// Category index per run with failures mapped to one extra category.
fn rating_runs<L: Label>(runs: &[Vec<Option<L>>]) -> Vec<Vec<usize>> {
    let failure = L::all().len();
    runs.iter()
        .map(|r| r.iter().map(|p| p.map_or(failure, Label::position)).collect())
        .collect()
}

fn kappa_over<L: Label>(runs: &[Vec<Option<L>>]) -> Result<f64, EvalError> {
    if runs.len() < 2 || runs[0].is_empty() {
        // One run (or no items) agrees with itself trivially.
        return Ok(1.0);
    }
    let m = RatingMatrix::from_runs(&rating_runs(runs), L::all().len() + 1)?;
    Ok(fleiss_kappa(&m))
}

/// Summarizes a batch against the dataset's labels.
pub fn summarize(cases: &[SyntheticCase], batch: &BatchResult) -> Result<EvaluationReport, EvalError> {
    if batch.runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let truth_c: Vec<ClassificationCategory> = cases.iter().map(|c| c.classification).collect();
    let truth_r: Vec<ReactionType> = cases.iter().map(|c| c.reaction_type).collect();
    let truth_pairs: Vec<_> = cases.iter().map(|c| (c.classification, c.reaction_type)).collect();
    let pred_c: Vec<Vec<Option<ClassificationCategory>>> = batch
        .runs
        .iter()
        .map(|r| r.iter().map(|p| p.classification).collect())
        .collect();
    let pred_r: Vec<Vec<Option<ReactionType>>> = batch
        .runs
        .iter()
        .map(|r| r.iter().map(|p| p.reaction).collect())
        .collect();
    let classification = average(
        pred_c
            .iter()
            .map(|p| compute_metrics(p, &truth_c))
            .collect::<Result<_, _>>()?,
    );
    let reaction = average(
        pred_r
            .iter()
            .map(|p| compute_metrics(p, &truth_r))
            .collect::<Result<_, _>>()?,
    );
    let first: Vec<_> = batch.runs[0].iter().map(CasePrediction::labels).collect();
    let alerts = alert_report(&first, &truth_pairs)?;
    let reduction = if cases.is_empty() {
        0.0
    } else {
        interruptive_reduction(&alerts.system, &alerts.baseline, cases.len())?
    };
    let runs_identical = batch.runs.windows(2).all(|w| {
        w[0].iter()
            .zip(&w[1])
            .all(|(a, b)| a.classification == b.classification && a.reaction == b.reaction)
    });
    let latencies: Vec<Duration> = batch.runs.iter().flatten().map(|p| p.latency).collect();
    Ok(EvaluationReport {
        dataset_size: cases.len(),
        run_count: batch.runs.len(),
        classification,
        reaction,
        alerts,
        interruptive_reduction: reduction,
        fleiss_kappa_classification: kappa_over(&pred_c)?,
        fleiss_kappa_reaction: kappa_over(&pred_r)?,
        runs_identical,
        failures: batch.runs.iter().flatten().filter(|p| p.error.is_some()).count(),
        timing: TimingStats::from_latencies(&latencies),
    })
}

pub async fn evaluate(
    cases: &[SyntheticCase],
    engine: &Engine,
    runs: usize,
    concurrency: usize,
) -> Result<(EvaluationReport, BatchResult), EvalError> {
    let batch = run_batch(cases, engine, runs, concurrency).await?;
    Ok((summarize(cases, &batch)?, batch))
}

/// The confusion pattern of the reference study: the first (by case id)
/// non-immune direct-excipient case is read as chemical cross-reactivity and
/// the first no-reactivity case as no documented reactions.
pub fn reference_error_plan(cases: &[SyntheticCase]) -> ErrorPlan {
    let first =
        |pred: &dyn Fn(&SyntheticCase) -> bool| cases.iter().filter(|c| pred(c)).map(|c| c.patient_id.clone()).min();
    let mut plan = ErrorPlan::new();
    if let Some(id) = first(&|c| {
        c.classification == ClassificationCategory::DirectExcipientReactivity
            && c.reaction_type == ReactionType::NonLifeThreateningNonImmuneMediated
    }) {
        plan = plan.force(
            id,
            ForcedLabels {
                classification: Some(ClassificationCategory::ChemicalCrossReactivityToExcipients),
                reaction: None,
            },
        );
    }
    if let Some(id) = first(&|c| c.classification == ClassificationCategory::NoReactivityToPrescribedDrug) {
        plan = plan.force(
            id,
            ForcedLabels {
                classification: Some(ClassificationCategory::NoDocumentedReactions),
                reaction: None,
            },
        );
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(format!("unknown report format {s:?}; expected json, csv or markdown")),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
            .unwrap_or(ReportFormat::Json)
    }
}

fn metrics_rows(section: &str, m: &MetricsReport, w: &mut csv::Writer<Vec<u8>>) -> csv::Result<()> {
    for c in &m.per_class {
        w.write_record([
            section,
            &c.label,
            &format!("{:.4}", c.precision),
            &format!("{:.4}", c.recall),
            &format!("{:.4}", c.f1),
            &c.support.to_string(),
        ])?;
    }
    w.write_record([
        section,
        "Macro Average",
        &format!("{:.4}", m.macro_precision),
        &format!("{:.4}", m.macro_recall),
        &format!("{:.4}", m.macro_f1),
        &m.per_class.iter().map(|c| c.support).sum::<u64>().to_string(),
    ])
}

fn render_csv(r: &EvaluationReport) -> Result<String, EvalError> {
    let ser = |e: csv::Error| EvalError::Serialize(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["section", "label", "precision", "recall", "f1", "support"])
        .map_err(ser)?;
    metrics_rows("classification", &r.classification, &mut w).map_err(ser)?;
    metrics_rows("reaction", &r.reaction, &mut w).map_err(ser)?;
    for (name, t) in [
        ("truth", r.alerts.truth),
        ("system", r.alerts.system),
        ("baseline", r.alerts.baseline),
    ] {
        for (label, n) in [
            ("None", t.none),
            ("Interruptive", t.interruptive),
            ("Non-interruptive", t.non_interruptive),
            (FAILURE_LABEL, t.failures),
        ] {
            w.write_record([&format!("alerts_{name}"), label, "", "", "", &n.to_string()])
                .map_err(ser)?;
        }
    }
    for (label, value) in [
        ("interruptive_reduction", format!("{:.4}", r.interruptive_reduction)),
        (
            "fleiss_kappa_classification",
            format!("{:.4}", r.fleiss_kappa_classification),
        ),
        ("fleiss_kappa_reaction", format!("{:.4}", r.fleiss_kappa_reaction)),
        ("mean_latency_seconds", format!("{:.4}", r.timing.mean_seconds)),
        ("run_count", r.run_count.to_string()),
        ("dataset_size", r.dataset_size.to_string()),
        ("failures", r.failures.to_string()),
    ] {
        w.write_record(["summary", label, "", "", "", &value]).map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Serialize(e.to_string()))
}

fn markdown_table(title: &str, m: &MetricsReport, out: &mut String) {
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "| Label | Precision | Recall | F1 | Cases |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|");
    for c in &m.per_class {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {} |",
            c.label, c.precision, c.recall, c.f1, c.support
        );
    }
    let _ = writeln!(
        out,
        "| **Macro Average** | **{:.4}** | **{:.4}** | **{:.4}** | **{}** |\n",
        m.macro_precision,
        m.macro_recall,
        m.macro_f1,
        m.per_class.iter().map(|c| c.support).sum::<u64>()
    );
}

fn render_markdown(r: &EvaluationReport) -> String {
    let mut out = String::from("# Evaluation report\n\n");
    let _ = writeln!(
        out,
        "Cases: {}. Runs: {}. Failures: {}.\n",
        r.dataset_size, r.run_count, r.failures
    );
    markdown_table("Classification", &r.classification, &mut out);
    markdown_table("Reaction type", &r.reaction, &mut out);
    out.push_str("## Alerts\n\n| Alert | Ground truth | System | Baseline |\n|---|---:|---:|---:|\n");
    let a = &r.alerts;
    for (label, f) in [
        ("None", (a.truth.none, a.system.none, a.baseline.none)),
        (
            "Interruptive",
            (a.truth.interruptive, a.system.interruptive, a.baseline.interruptive),
        ),
        (
            "Non-interruptive",
            (
                a.truth.non_interruptive,
                a.system.non_interruptive,
                a.baseline.non_interruptive,
            ),
        ),
        (
            FAILURE_LABEL,
            (a.truth.failures, a.system.failures, a.baseline.failures),
        ),
    ] {
        let _ = writeln!(out, "| {label} | {} | {} | {} |", f.0, f.1, f.2);
    }
    let _ = writeln!(
        out,
        "\nInterruptive reduction: {:.4}\n\nFleiss' kappa: classification {:.4}, reaction {:.4}\n\nLatency: mean {:.4} s, median {:.4} s, max {:.4} s",
        r.interruptive_reduction,
        r.fleiss_kappa_classification,
        r.fleiss_kappa_reaction,
        r.timing.mean_seconds,
        r.timing.median_seconds,
        r.timing.max_seconds
    );
    out
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat) -> Result<String, EvalError> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map(|s| s + "\n")
            .map_err(|e| EvalError::Serialize(e.to_string())),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

pub fn write_report(report: &EvaluationReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<(), EvalError> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub const PREDICTIONS_HEADER: [&str; 10] = [
    "Patient_ID",
    "Drug_code",
    "Classification",
    "Reaction_type",
    "Alert_type",
    "Truth_classification",
    "Truth_reaction_type",
    "Truth_alert_type",
    "Latency_ms",
    "Error",
];

/// One row per case of a single run.
pub fn write_predictions_csv<W: Write>(
    cases: &[SyntheticCase],
    predictions: &[CasePrediction],
    writer: W,
) -> Result<(), EvalError> {
    let ser = |e: csv::Error| EvalError::Serialize(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTIONS_HEADER).map_err(ser)?;
    for (c, p) in cases.iter().zip(predictions) {
        w.write_record([
            c.patient_id.as_str(),
            &c.drug_code,
            p.classification.map_or(FAILURE_LABEL, |l| l.label()),
            p.reaction.map_or(FAILURE_LABEL, |l| l.label()),
            p.alert.map_or(FAILURE_LABEL, |l| l.label()),
            c.classification.label(),
            c.reaction_type.label(),
            c.alert_type.label(),
            &p.latency.as_millis().to_string(),
            p.error.as_deref().unwrap_or(""),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| EvalError::Serialize(e.to_string()))
}
