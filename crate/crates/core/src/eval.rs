//! Accuracy reports, ablation tables and gate heatmaps.

use crate::data::{Example, InputFormat};
use crate::error::{Error, Result};
use crate::head::{predict, EmbeddingMode};
use crate::model::Model;
use crate::tensor::Graph;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Examples scored per graph during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemPrediction {
    pub id: String,
    pub gold: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub lang: String,
    pub mode: EmbeddingMode,
    /// `100 · correct / count`.
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
    pub predictions: Vec<ItemPrediction>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "{} [{}] {}: {:.1} ({}/{})",
            self.dataset, self.lang, self.mode, self.accuracy, self.correct, self.count
        )
    }
}

pub fn predict_examples(
    model: &Model,
    examples: &[Example],
    format: InputFormat,
    mode: EmbeddingMode,
) -> Result<Vec<ItemPrediction>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut seqs = Vec::new();
        for ex in chunk {
            seqs.extend(model.sequences(ex, format)?);
        }
        let mut g = Graph::new();
        let (_, heads) = model.forward(&mut g, &seqs)?;
        let logits = model.logits(&mut g, &heads, mode)?;
        let values = g.value(logits).data();
        let mut offset = 0;
        for ex in chunk {
            let l = values[offset..offset + ex.num_choices()].to_vec();
            offset += ex.num_choices();
            out.push(ItemPrediction {
                id: ex.id.clone(),
                gold: ex.gold,
                predicted: predict(&l),
                logits: l,
            });
        }
    }
    Ok(out)
}

/// Accuracy of `model` on `examples`. The language tag is taken from the
/// first example.
pub fn evaluate(
    model: &Model,
    dataset: &str,
    examples: &[Example],
    format: InputFormat,
    mode: EmbeddingMode,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Config(format!("dataset {dataset} is empty")));
    }
    let predictions = predict_examples(model, examples, format, mode)?;
    let correct = predictions.iter().filter(|p| p.predicted == p.gold).count();
    let count = predictions.len();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        lang: examples[0].lang.clone(),
        mode,
        accuracy: 100.0 * correct as f64 / count as f64,
        correct,
        count,
        predictions,
    })
}

/// Per-token gates of every choice of `example`, as `(tokens, gates)`.
pub fn gate_profile(model: &Model, example: &Example, format: InputFormat) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let seqs = model.sequences(example, format)?;
    let mut g = Graph::new();
    let (_, heads) = model.forward(&mut g, &seqs)?;
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(j, s)| (s.decode(&model.vocab), heads.gate_values(&g, j)))
        .collect())
}

/// Writes `<id>.choice<j>.csv` per choice into `dir`: a header of token
/// strings and one row of gate values.
pub fn export_heatmap(model: &Model, example: &Example, format: InputFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem: String = example
        .id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let mut paths = Vec::new();
    for (j, (tokens, gates)) in gate_profile(model, example, format)?.into_iter().enumerate() {
        let path = dir.join(format!("{stem}.choice{j}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(&tokens).map_err(|e| Error::csv(&path, e))?;
        w.write_record(gates.iter().map(|v| format!("{v:.6}")))
            .map_err(|e| Error::csv(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub accuracy: f64,
}

/// Rows of (label, accuracy) in input order, compared against `baseline`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub title: String,
    pub baseline: String,
    pub rows: Vec<AblationRow>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// `(+x.x)` / `(-x.x)`, rounded to one decimal.
pub fn format_delta(delta: f64) -> String {
    let r = round1(delta) + 0.0;
    if r < 0.0 {
        format!("(-{:.1})", -r)
    } else {
        format!("(+{:.1})", r)
    }
}

impl AblationTable {
    pub fn new(title: &str, baseline: &str, rows: Vec<AblationRow>) -> Result<Self> {
        if !rows.iter().any(|r| r.label == baseline) {
            return Err(Error::Config(format!("baseline {baseline:?} is not among the rows")));
        }
        Ok(Self {
            title: title.to_string(),
            baseline: baseline.to_string(),
            rows,
        })
    }

    /// One row per labelled report, using each report's accuracy.
    pub fn from_reports(title: &str, baseline: &str, reports: &[(String, EvalReport)]) -> Result<Self> {
        let rows = reports
            .iter()
            .map(|(label, r)| AblationRow {
                label: label.clone(),
                accuracy: r.accuracy,
            })
            .collect();
        Self::new(title, baseline, rows)
    }

    fn baseline_accuracy(&self) -> f64 {
        self.rows
            .iter()
            .find(|r| r.label == self.baseline)
            .map_or(0.0, |r| round1(r.accuracy))
    }

    /// Differences between displayed (one-decimal) accuracies, so the table
    /// is internally consistent.
    pub fn deltas(&self) -> Vec<f64> {
        let base = self.baseline_accuracy();
        self.rows.iter().map(|r| round1(round1(r.accuracy) - base)).collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | Accuracy |\n|---|---|\n", self.title);
        for (row, d) in self.rows.iter().zip(self.deltas()) {
            let acc = round1(row.accuracy);
            if row.label == self.baseline {
                s.push_str(&format!("| {} | {:.1} |\n", row.label, acc));
            } else {
                s.push_str(&format!("| {} | {:.1} {} |\n", row.label, acc, format_delta(d)));
            }
        }
        s
    }
}
