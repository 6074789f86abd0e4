use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use lamole::encoder::{EpochMetrics, SplitMetrics};
use lamole::explain::ExplanationReport;
use serde::Serialize;

pub const METRICS_HEADER: [&str; 7] = ["epoch", "split", "accuracy", "exp_auc", "mean_ep", "mean_fidelity", "mean_spurious_ratio"];

/// One line of `metrics.csv`. Missing metrics are empty fields.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub accuracy: Option<f64>,
    pub exp_auc: Option<f64>,
    pub mean_ep: Option<f64>,
    pub mean_fidelity: Option<f64>,
    pub mean_spurious_ratio: Option<f64>,
}

impl MetricsRow {
    pub fn new(epoch: usize, split: &str, m: &SplitMetrics) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            accuracy: m.accuracy,
            exp_auc: m.exp_auc,
            mean_ep: m.mean_ep,
            mean_fidelity: m.mean_fidelity,
            mean_spurious_ratio: m.mean_spurious_ratio,
        }
    }
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(e: &EpochMetrics) -> Self {
        MetricsRow::new(e.epoch, &e.split, &e.metrics)
    }
}

/// One line of `eval_metrics.csv`: the metrics header with a leading method column.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub split: String,
    pub accuracy: Option<f64>,
    pub exp_auc: Option<f64>,
    pub mean_ep: Option<f64>,
    pub mean_fidelity: Option<f64>,
    pub mean_spurious_ratio: Option<f64>,
}

fn write_csv<W: Write, R: Serialize>(w: W, header: &[&str], rows: &[R]) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Header plus one row per entry; an empty slice gives a header-only file.
pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRow]) -> csv::Result<()> {
    write_csv(w, &METRICS_HEADER, rows)
}

pub fn write_eval<W: Write>(w: W, rows: &[EvalRow]) -> csv::Result<()> {
    let header: Vec<&str> = std::iter::once("method").chain(METRICS_HEADER.into_iter().skip(1)).collect();
    write_csv(w, &header, rows)
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> csv::Result<()> {
    write_metrics(BufWriter::new(File::create(path)?), rows)
}

pub fn write_explanations_file(path: &Path, reports: &[ExplanationReport]) -> std::io::Result<()> {
    lamole::explain::write_reports(BufWriter::new(File::create(path)?), reports)
}
