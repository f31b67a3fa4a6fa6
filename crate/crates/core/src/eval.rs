//! Utterance-level evaluation, system comparison and the results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::net::Model;
use crate::tensor::Scalar;

/// Class with the highest mean posterior over frames.
pub fn utterance_prediction(frame_posteriors: &[Vec<f64>]) -> usize {
    let Some(first) = frame_posteriors.first() else {
        return 0;
    };
    let mut mean = vec![0.0; first.len()];
    for row in frame_posteriors {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    let mut best = 0;
    for (j, v) in mean.iter().enumerate() {
        if *v > mean[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub system: String,
    pub snr_db: Option<f64>,
    pub accuracy: f64,
    pub params: usize,
    /// Accuracy restricted to each true class (NaN-free: 0 for absent classes).
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalResult {
    pub fn count(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Per-utterance predictions of `model` (argmax of mean frame posterior).
pub fn predict<T: Scalar>(model: &Model<T>, examples: &[Example<T>]) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|ex| Ok(utterance_prediction(&model.posteriors(&ex.input, ex.zone)?.classes)))
        .collect()
}

/// Builds an [`EvalResult`] from labels and predictions.
pub fn score(
    system: &str,
    snr_db: Option<f64>,
    params: usize,
    num_classes: usize,
    labels: &[usize],
    predictions: &[usize],
) -> Result<EvalResult> {
    if labels.len() != predictions.len() {
        return Err(Error::invalid("labels and predictions differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!("class index outside {num_classes} classes")));
        }
        confusion[l][p] += 1;
    }
    let hits: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalResult {
        system: system.to_string(),
        snr_db,
        accuracy: hits as f64 / labels.len() as f64,
        params,
        per_class_accuracy,
        confusion,
    })
}

/// Evaluates a model on prepared examples.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    examples: &[Example<T>],
    system: &str,
    snr_db: Option<f64>,
) -> Result<EvalResult> {
    let preds = predict(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.class).collect();
    score(
        system,
        snr_db,
        model.count_params(),
        model.config.num_classes,
        &labels,
        &preds,
    )
}

/// `(a - b) / b * 100`.
pub fn relative_gain(a: f64, b: f64) -> f64 {
    (a - b) / b * 100.0
}

/// `a - b` in percentage points.
pub fn absolute_gain(a: f64, b: f64) -> f64 {
    a - b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub system: String,
    pub baseline: String,
    pub snr_db: Option<f64>,
    /// Accuracies in percent.
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub relative_pct: f64,
    pub absolute_pts: f64,
}

/// Compares `system` against `baseline` (accuracies taken as percentages).
pub fn compare(system: &EvalResult, baseline: &EvalResult) -> Result<Comparison> {
    if system.snr_db != baseline.snr_db {
        return Err(Error::invalid(format!(
            "cannot compare results at different SNRs ({:?} vs {:?})",
            system.snr_db, baseline.snr_db
        )));
    }
    let (a, b) = (100.0 * system.accuracy, 100.0 * baseline.accuracy);
    Ok(Comparison {
        system: system.system.clone(),
        baseline: baseline.system.clone(),
        snr_db: system.snr_db,
        accuracy: a,
        baseline_accuracy: b,
        relative_pct: relative_gain(a, b),
        absolute_pts: absolute_gain(a, b),
    })
}

/// Every system against every other at matching SNRs.
pub fn compare_report(results: &[EvalResult]) -> Result<Vec<Comparison>> {
    if results.len() < 2 {
        return Err(Error::invalid("need at least two results to compare"));
    }
    let mut out = Vec::new();
    for a in results {
        for b in results {
            if a.system != b.system && a.snr_db == b.snr_db {
                out.push(compare(a, b)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no two systems share an SNR"));
    }
    Ok(out)
}

fn snr_label(s: Option<f64>) -> String {
    match s {
        Some(v) => format!("{v}dB"),
        None => "clean".into(),
    }
}

/// Results table: one row per system (in first-seen order), a parameter
/// column, then accuracy in percent per SNR (ascending, clean last) and
/// the row average.
pub fn table_csv(results: &[EvalResult]) -> Result<String> {
    let mut systems: Vec<&str> = Vec::new();
    for r in results {
        if !systems.contains(&r.system.as_str()) {
            systems.push(&r.system);
        }
    }
    let mut snrs: Vec<Option<f64>> = Vec::new();
    for r in results {
        if !snrs.contains(&r.snr_db) {
            snrs.push(r.snr_db);
        }
    }
    snrs.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (None, None) => std::cmp::Ordering::Equal,
        (None, _) => std::cmp::Ordering::Greater,
        (_, None) => std::cmp::Ordering::Less,
    });
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut params: BTreeMap<usize, usize> = BTreeMap::new();
    for r in results {
        let si = systems.iter().position(|s| *s == r.system).unwrap();
        let ci = snrs.iter().position(|s| *s == r.snr_db).unwrap();
        if cells.insert((si, ci), r.accuracy).is_some() {
            return Err(Error::invalid(format!(
                "duplicate result for {} at {}",
                r.system,
                snr_label(r.snr_db)
            )));
        }
        params.insert(si, r.params);
    }
    let mut s = String::from("system,params");
    for snr in &snrs {
        write!(s, ",{}", snr_label(*snr)).unwrap();
    }
    s.push_str(",avg\n");
    for (si, sys) in systems.iter().enumerate() {
        write!(s, "{sys},{}", params[&si]).unwrap();
        let mut vals = Vec::new();
        for ci in 0..snrs.len() {
            match cells.get(&(si, ci)) {
                Some(a) => {
                    write!(s, ",{:.2}", 100.0 * a).unwrap();
                    vals.push(100.0 * a);
                }
                None => s.push(','),
            }
        }
        writeln!(s, ",{:.2}", vals.iter().sum::<f64>() / vals.len() as f64).unwrap();
    }
    Ok(s)
}
