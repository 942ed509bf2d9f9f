use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use seamil::evaluation::{metric_report, summarize_folds, FoldSummary};
use seamil::{FoldSplit, MetricReport};

use crate::io::{ensure_parent, Manifest};

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Prediction CSV from `infer-wsi` (probability vs malignant) or
    /// `infer-roi` (p_tumor vs tumor; unlabeled tiles skipped).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Scores at or above this are positive calls.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Split JSON; with --manifest, adds one report per fold and their mean/std.
    #[arg(long, requires = "manifest")]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FoldReport {
    fold: String,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Debug, Serialize)]
struct Report {
    #[serde(flatten)]
    pooled: MetricReport,
    n: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    per_fold: Vec<FoldReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold_summary: Option<FoldSummary>,
}

struct Prediction {
    slide_id: String,
    score: f64,
    positive: bool,
}

fn read_predictions(path: &PathBuf) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let slide = col("slide_id").context("prediction CSV lacks a slide_id column")?;
    let label = col("label").context("prediction CSV lacks a label column")?;
    let (score, positive_label, skip_label) = if let Some(c) = col("probability") {
        (c, "malignant", None)
    } else if let Some(c) = col("p_tumor") {
        (c, "tumor", Some("unlabeled"))
    } else {
        bail!(seamil::Error::Config(format!(
            "{}: expected a 'probability' or 'p_tumor' column",
            path.display()
        )));
    };
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let l = &row[label];
        if Some(l) == skip_label {
            continue;
        }
        let s: f64 = row[score]
            .parse()
            .with_context(|| format!("{} row {}: bad score '{}'", path.display(), i + 2, &row[score]))?;
        out.push(Prediction {
            slide_id: row[slide].to_string(),
            score: s,
            positive: l == positive_label,
        });
    }
    Ok(out)
}

fn report(preds: &[&Prediction], threshold: f64) -> seamil::Result<MetricReport> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.positive).collect();
    metric_report(&scores, &labels, threshold)
}

pub fn run(a: EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let all: Vec<&Prediction> = preds.iter().collect();
    let pooled = report(&all, a.threshold)?;
    let mut per_fold = Vec::new();
    let mut fold_summary = None;
    if let (Some(split_path), Some(manifest_path)) = (&a.split, &a.manifest) {
        let text = std::fs::read_to_string(split_path).with_context(|| format!("reading {}", split_path.display()))?;
        let split: FoldSplit = serde_json::from_str(&text)?;
        let manifest = Manifest::load(manifest_path)?;
        let patient: HashMap<&str, &str> = manifest
            .records
            .iter()
            .map(|r| (r.slide_id.as_str(), r.patient_id.as_str()))
            .collect();
        let mut groups: Vec<(String, Vec<&String>)> = split
            .folds
            .iter()
            .enumerate()
            .map(|(i, f)| (i.to_string(), f.iter().collect()))
            .collect();
        groups.push(("test".into(), split.test_patients.iter().collect()));
        for (name, patients) in groups {
            let members: Vec<&Prediction> = preds
                .iter()
                .filter(|p| patient.get(p.slide_id.as_str()).is_some_and(|pt| patients.iter().any(|q| q == pt)))
                .collect();
            if !members.is_empty() {
                per_fold.push(FoldReport {
                    fold: name,
                    report: report(&members, a.threshold)?,
                });
            }
        }
        let cv: Vec<MetricReport> = per_fold
            .iter()
            .filter(|f| f.fold != "test")
            .map(|f| f.report.clone())
            .collect();
        if !cv.is_empty() {
            fold_summary = Some(summarize_folds(&cv));
        }
    }
    let out = Report {
        pooled,
        n: preds.len(),
        per_fold,
        fold_summary,
    };
    ensure_parent(&a.out)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&out)? + "\n")
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} predictions: ACC {} AUC {}",
        out.n, out.pooled.accuracy, out.pooled.auc
    );
    Ok(())
}
