//! Run-level aggregation, with/without-knowledge improvement tables and
//! Pearson correlation across metrics.

use std::collections::BTreeMap;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{Metric, MetricsReport};
use crate::schema;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("cannot aggregate run `{0}` with no episodes")]
    EmptyRun(String),
    #[error("correlation needs at least 2 episodes, got {0}")]
    InsufficientData(usize),
    #[error("unsupported report format `{0}` (expected csv or json)")]
    UnsupportedFormat(String),
    #[error("invalid aggregate `{label}`: {message}")]
    InvalidAggregate { label: String, message: String },
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub schema: String,
    pub label: String,
    pub episodes: usize,
    pub cr: f64,
    pub cpa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub br: f64,
    pub oor_rate: f64,
    /// Fraction of episodes that exhausted the step budget.
    pub rms_fraction: f64,
}

impl RunAggregate {
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Cr => self.cr,
            Metric::Cpa => self.cpa,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Br => self.br,
            Metric::Oor => self.oor_rate,
            Metric::Rms => self.rms_fraction,
        }
    }

    fn set(&mut self, metric: Metric, v: f64) {
        let slot = match metric {
            Metric::Cr => &mut self.cr,
            Metric::Cpa => &mut self.cpa,
            Metric::Precision => &mut self.precision,
            Metric::Recall => &mut self.recall,
            Metric::F1 => &mut self.f1,
            Metric::Br => &mut self.br,
            Metric::Oor => &mut self.oor_rate,
            Metric::Rms => &mut self.rms_fraction,
        };
        *slot = v;
    }

    /// Builds an aggregate from metric values given in [`Metric::ALL`] order.
    pub fn from_values(label: impl Into<String>, episodes: usize, values: [f64; 8]) -> Self {
        let mut agg = RunAggregate {
            schema: schema::AGGREGATE.to_string(),
            label: label.into(),
            episodes,
            cr: 0.0,
            cpa: 0.0,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            br: 0.0,
            oor_rate: 0.0,
            rms_fraction: 0.0,
        };
        for (m, v) in Metric::ALL.into_iter().zip(values) {
            agg.set(m, v);
        }
        agg
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        schema::expect(schema::AGGREGATE, &self.schema)?;
        let invalid = |message: String| AnalysisError::InvalidAggregate {
            label: self.label.clone(),
            message,
        };
        if self.episodes == 0 {
            return Err(invalid("episode count must be at least 1".into()));
        }
        for m in Metric::ALL {
            let v = self.value(m);
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{m} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, AnalysisError> {
        let agg: RunAggregate = serde_json::from_reader(reader)?;
        agg.validate()?;
        Ok(agg)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("aggregate serialises");
        out.push('\n');
        out
    }
}

/// Sum that does not depend on input order (values are sorted first).
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn aggregate(reports: &[MetricsReport], label: &str) -> Result<RunAggregate, AnalysisError> {
    if reports.is_empty() {
        return Err(AnalysisError::EmptyRun(label.to_string()));
    }
    let mut agg = RunAggregate::from_values(label, reports.len(), [0.0; 8]);
    for m in Metric::ALL {
        agg.set(m, order_free_mean(reports.iter().map(|r| r.value(m)).collect()));
    }
    Ok(agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub metric: Metric,
    pub without: f64,
    pub with: f64,
    /// Relative change in percent; `None` when the baseline is zero.
    pub improve_pct: Option<f64>,
}

pub fn improve_pct(without: f64, with: f64) -> Option<f64> {
    (without != 0.0).then(|| (with - without) / without * 100.0)
}

pub fn improvement(without: &RunAggregate, with_kb: &RunAggregate) -> Vec<ImprovementRow> {
    Metric::ALL
        .into_iter()
        .map(|metric| {
            let (a, b) = (without.value(metric), with_kb.value(metric));
            ImprovementRow {
                metric,
                without: a,
                with: b,
                improve_pct: improve_pct(a, b),
            }
        })
        .collect()
}

/// Rounds to `places` decimals, halves away from zero. Display only.
pub fn round_half_up(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    x.signum() * ((x.abs() * scale) + 0.5).floor() / scale
}

fn display(x: f64) -> String {
    format!("{:.2}", round_half_up(x, 2))
}

fn percent_display(fraction: f64) -> String {
    display(fraction * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub metrics: Vec<Metric>,
    pub episodes: usize,
    /// Row-major; `None` where a column has zero variance.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: Metric, b: Metric) -> Option<f64> {
        let i = self.metrics.iter().position(|m| *m == a)?;
        let j = self.metrics.iter().position(|m| *m == b)?;
        self.values[i][j]
    }
}

/// Pearson's r; `None` when either column is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let constant = |v: &[f64]| v.windows(2).all(|w| w[0] == w[1]);
    if xs.len() < 2 || constant(xs) || constant(ys) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson_matrix(reports: &[MetricsReport], metrics: &[Metric]) -> Result<CorrelationMatrix, AnalysisError> {
    if reports.len() < 2 {
        return Err(AnalysisError::InsufficientData(reports.len()));
    }
    let columns: Vec<Vec<f64>> = metrics
        .iter()
        .map(|m| reports.iter().map(|r| r.value(*m)).collect())
        .collect();
    let k = metrics.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        values[i][i] = pearson(&columns[i], &columns[i]).map(|_| 1.0);
        for j in i + 1..k {
            let r = pearson(&columns[i], &columns[j]);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        metrics: metrics.to_vec(),
        episodes: reports.len(),
        values,
    })
}

/// One matrix per run label, plus the pooled matrix under `"pooled"`.
pub fn pearson_by_run(
    runs: &[(String, Vec<MetricsReport>)],
    metrics: &[Metric],
) -> BTreeMap<String, Result<CorrelationMatrix, AnalysisError>> {
    let mut out: BTreeMap<_, _> = runs
        .iter()
        .map(|(label, reports)| (label.clone(), pearson_matrix(reports, metrics)))
        .collect();
    let pooled: Vec<MetricsReport> = runs.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    out.insert("pooled".to_string(), pearson_matrix(&pooled, metrics));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(AnalysisError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub aggregates: Vec<RunAggregate>,
    pub improvements: Vec<ImprovementRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationMatrix>,
}

impl Report {
    pub fn from_json(bytes: &[u8]) -> Result<Self, AnalysisError> {
        let report: Report = serde_json::from_slice(bytes)?;
        schema::expect(schema::REPORT, &report.schema)?;
        Ok(report)
    }
}

/// Renders a report. Values are written at full precision; each gets a
/// `_display` companion rounded to 2 decimals (aggregates as percentages).
pub fn emit_report(
    aggregates: &[RunAggregate],
    improvements: &[ImprovementRow],
    matrix: Option<&CorrelationMatrix>,
    format: &str,
) -> Result<Vec<u8>, AnalysisError> {
    match format.parse::<ReportFormat>()? {
        ReportFormat::Json => {
            let report = Report {
                schema: schema::REPORT.to_string(),
                aggregates: aggregates.to_vec(),
                improvements: improvements.to_vec(),
                correlation: matrix.cloned(),
            };
            let mut out = serde_json::to_vec_pretty(&report)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => emit_csv(aggregates, improvements, matrix),
    }
}

fn emit_csv(
    aggregates: &[RunAggregate],
    improvements: &[ImprovementRow],
    matrix: Option<&CorrelationMatrix>,
) -> Result<Vec<u8>, AnalysisError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());

    w.write_record(["# aggregates"])?;
    let mut header = vec!["metric".to_string()];
    for a in aggregates {
        header.push(a.label.clone());
        header.push(format!("{}_display", a.label));
    }
    w.write_record(&header)?;
    let mut episodes = vec!["episodes".to_string()];
    for a in aggregates {
        episodes.push(a.episodes.to_string());
        episodes.push(a.episodes.to_string());
    }
    w.write_record(&episodes)?;
    for m in Metric::ALL {
        let mut row = vec![m.name().to_string()];
        for a in aggregates {
            row.push(a.value(m).to_string());
            row.push(percent_display(a.value(m)));
        }
        w.write_record(&row)?;
    }

    w.write_record(["# improvement"])?;
    w.write_record([
        "metric",
        "without",
        "with",
        "improve_pct",
        "without_display",
        "with_display",
        "improve_pct_display",
    ])?;
    for r in improvements {
        let (pct, pct_display) = match r.improve_pct {
            Some(p) => (p.to_string(), display(p)),
            None => (String::new(), "n/a".to_string()),
        };
        w.write_record([
            r.metric.name().to_string(),
            r.without.to_string(),
            r.with.to_string(),
            pct,
            percent_display(r.without),
            percent_display(r.with),
            pct_display,
        ])?;
    }

    if let Some(matrix) = matrix {
        write_matrix(&mut w, matrix)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, AnalysisError> {
    w.into_inner().map_err(|e| AnalysisError::Csv(e.into_error().into()))
}

fn write_matrix(w: &mut csv::Writer<Vec<u8>>, matrix: &CorrelationMatrix) -> Result<(), AnalysisError> {
    w.write_record([format!("# correlation (episodes: {})", matrix.episodes)])?;
    let mut header = vec!["metric".to_string()];
    header.extend(matrix.metrics.iter().map(|m| m.name().to_string()));
    w.write_record(&header)?;
    for (m, row) in matrix.metrics.iter().zip(&matrix.values) {
        let mut cells = vec![m.name().to_string()];
        cells.extend(row.iter().map(|v| v.map_or_else(|| "n/a".to_string(), |r| r.to_string())));
        w.write_record(&cells)?;
    }
    Ok(())
}

/// Renders only a correlation matrix (a labelled square table in CSV).
pub fn emit_correlation(matrix: &CorrelationMatrix, format: &str) -> Result<Vec<u8>, AnalysisError> {
    match format.parse::<ReportFormat>()? {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(matrix)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
            write_matrix(&mut w, matrix)?;
            finish(w)
        }
    }
}
