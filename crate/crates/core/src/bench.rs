//! Classification metrics, latency measurement, and benchmark report
//! rendering (per-dataset tables plus the consolidated five-set summary).

use std::time::Instant;

use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::diffmath::Real;
use crate::encoder::tokenize;
use crate::model::{predict, GuardModel};
use crate::{Error, Result};

/// Binary confusion counts. Malicious is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Confusion { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tally predictions against ground truth.
pub fn confusion(preds: &[bool], labels: &[bool]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions against {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::usage("no samples to score"));
    }
    let mut c = Confusion::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_malicious: f64,
    pub f1_benign: f64,
    pub macro_f1: f64,
    /// None when the set has no negatives.
    pub fpr: Option<f64>,
    /// None when the set has no positives.
    pub fnr: Option<f64>,
}

/// F1 from one class's own counts. A class with no true and no predicted
/// members scores 0, as does a class whose predictions never hit.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &Confusion) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::usage("empty confusion"));
    }
    let f1_malicious = f1(c.tp, c.fp, c.fn_);
    let f1_benign = f1(c.tn, c.fn_, c.fp);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        f1_malicious,
        f1_benign,
        macro_f1: 0.5 * (f1_malicious + f1_benign),
        fpr: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.fn_ + c.tp),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::usage("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::usage(format!("percentile {p} outside [0,100]")));
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

fn summarize_ms(mut timings: Vec<f64>) -> Result<LatencyStats> {
    let mean_ms = timings.iter().sum::<f64>() / timings.len() as f64;
    timings.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean_ms,
        p50_ms: percentile_nearest_rank(&timings, 50.0)?,
        p95_ms: percentile_nearest_rank(&timings, 95.0)?,
    })
}

/// Time the full classify path (tokenize, encode, pool, head, threshold)
/// per sample on one thread. Warmup iterations run the same path untimed.
pub fn latency_bench<E: Real>(
    model: &GuardModel<E>,
    ds: &Dataset,
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(Error::usage("latency reps must be at least 1"));
    }
    if ds.is_empty() {
        return Err(Error::usage(format!("dataset {} has no samples to time", ds.name)));
    }
    let max_len = model.max_len();
    let mut timings = Vec::with_capacity(ds.len() * reps);
    for s in &ds.samples {
        for _ in 0..warmup {
            let seq = tokenize(&s.text, max_len);
            let p = predict(model, &seq)?;
            std::hint::black_box(model.decide(&p.probs));
        }
        for _ in 0..reps {
            let t0 = Instant::now();
            let seq = tokenize(&s.text, max_len);
            let p = predict(model, &seq)?;
            std::hint::black_box(model.decide(&p.probs));
            timings.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    summarize_ms(timings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub latency: Option<LatencyStats>,
}

/// Score a model over a dataset with its configured thresholds and the
/// per-label OR rule deciding malicious.
pub fn evaluate<E: Real>(model: &GuardModel<E>, ds: &Dataset, model_name: &str) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::usage(format!("dataset {} has no samples to score", ds.name)));
    }
    let max_len = model.max_len();
    let pairs: Vec<(bool, bool)> = ds
        .samples
        .par_iter()
        .map(|s| {
            let seq = tokenize(&s.text, max_len);
            let p = predict(model, &seq)?;
            Ok((model.decide(&p.probs).malicious, s.malicious()))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<bool> = pairs.iter().map(|&(p, _)| p).collect();
    let labels: Vec<bool> = pairs.iter().map(|&(_, l)| l).collect();
    let c = confusion(&preds, &labels)?;
    let m = metrics(&c)?;
    Ok(EvalReport {
        model: model_name.to_string(),
        dataset: ds.name.clone(),
        confusion: c,
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        fpr: m.fpr,
        fnr: m.fnr,
        latency: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsolidatedReport {
    pub model: String,
    /// Accuracy averaged over the negative sets plus the positive set.
    pub accuracy_5set_avg: f64,
    /// Positive-class F1 on the all-positive set, reported alone because
    /// that set has no negative class to average in.
    pub f1_positive_only: f64,
    /// FPR macro-averaged over the negative-bearing sets only.
    pub fpr_4neg_macro: f64,
    /// Mean of the member reports' mean latencies; None unless every
    /// member carries timing.
    pub avg_inference_ms: Option<f64>,
}

pub fn consolidated(reports: &[EvalReport], neg_sets: &[&str], pos_set: &str) -> Result<ConsolidatedReport> {
    let find = |name: &str| {
        reports
            .iter()
            .find(|r| r.dataset == name)
            .ok_or_else(|| Error::usage(format!("no report for dataset {name}")))
    };
    let pos = find(pos_set)?;
    let negs: Vec<&EvalReport> = neg_sets.iter().map(|n| find(n)).collect::<Result<_>>()?;
    let members: Vec<&EvalReport> = negs.iter().copied().chain([pos]).collect();
    let accuracy_5set_avg = members.iter().map(|r| r.accuracy).sum::<f64>() / members.len() as f64;
    let fpr_sum = negs
        .iter()
        .map(|r| {
            r.fpr
                .ok_or_else(|| Error::usage(format!("dataset {} has no negatives for the FPR average", r.dataset)))
        })
        .sum::<Result<f64>>()?;
    let avg_inference_ms = members
        .iter()
        .map(|r| r.latency.as_ref().map(|l| l.mean_ms))
        .sum::<Option<f64>>()
        .map(|s| s / members.len() as f64);
    Ok(ConsolidatedReport {
        model: pos.model.clone(),
        accuracy_5set_avg,
        f1_positive_only: metrics(&pos.confusion)?.f1_malicious,
        fpr_4neg_macro: fpr_sum / negs.len() as f64,
        avg_inference_ms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn from_name(name: &str) -> Result<ReportFormat> {
        match name {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::usage(format!("unknown format {other}; expected markdown or csv"))),
        }
    }
}

pub const CSV_HEADER: &str = "model,dataset,accuracy,macro_f1,fpr,fnr,latency_mean_ms";
pub const CONSOLIDATED_CSV_HEADER: &str = "model,accuracy_5set_avg,f1_positive_only,fpr_4neg_macro,avg_inference_ms";
const UNDEFINED: &str = "—";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => UNDEFINED.to_string(),
    }
}

/// Render per-dataset rows. Metric columns keep full precision so the
/// text round-trips to the same values.
pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.model,
                    r.dataset,
                    r.accuracy,
                    r.macro_f1,
                    cell(r.fpr),
                    cell(r.fnr),
                    cell(r.latency.as_ref().map(|l| l.mean_ms)),
                ));
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Model | Dataset | Accuracy | Macro F1 | FPR | FNR | Avg Latency (ms) |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    r.model,
                    r.dataset,
                    r.accuracy,
                    r.macro_f1,
                    cell(r.fpr),
                    cell(r.fnr),
                    cell(r.latency.as_ref().map(|l| l.mean_ms)),
                ));
            }
        }
    }
    out
}

pub fn render_consolidated(r: &ConsolidatedReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => format!(
            "{CONSOLIDATED_CSV_HEADER}\n{},{},{},{},{}\n",
            r.model,
            r.accuracy_5set_avg,
            r.f1_positive_only,
            r.fpr_4neg_macro,
            cell(r.avg_inference_ms),
        ),
        ReportFormat::Markdown => format!(
            "| Model | Accuracy (5-set Avg) | F1 (positive set) | FPR (negative sets) | Avg Inference (ms) |\n\
             |---|---|---|---|---|\n\
             | {} | {} | {} | {} | {} |\n",
            r.model,
            r.accuracy_5set_avg,
            r.f1_positive_only,
            r.fpr_4neg_macro,
            cell(r.avg_inference_ms),
        ),
    }
}

/// One row parsed back out of a rendered report.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub model: String,
    pub dataset: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub latency_mean_ms: Option<f64>,
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s == UNDEFINED {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::data(format!("bad metric cell {s:?}")))
}

/// Parse a markdown table produced by `render_report`.
pub fn parse_markdown_report(text: &str) -> Result<Vec<ParsedRow>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(2) {
        let cells: Vec<&str> = line.trim().trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() != 7 {
            return Err(Error::data(format!("expected 7 cells, got {}: {line:?}", cells.len())));
        }
        rows.push(ParsedRow {
            model: cells[0].to_string(),
            dataset: cells[1].to_string(),
            accuracy: parse_cell(cells[2])?.ok_or_else(|| Error::data("accuracy cannot be undefined"))?,
            macro_f1: parse_cell(cells[3])?.ok_or_else(|| Error::data("macro F1 cannot be undefined"))?,
            fpr: parse_cell(cells[4])?,
            fnr: parse_cell(cells[5])?,
            latency_mean_ms: parse_cell(cells[6])?,
        });
    }
    Ok(rows)
}
