//! Evaluation metrics for watermarked models.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gbdt::Ensemble;
use crate::watermark::{Candidate, Scenario, Selection, Strategy, WatermarkEntry};

/// Fraction of watermark entries the model predicts as their watermark label.
pub fn effectiveness(model: &Ensemble, entries: &[WatermarkEntry]) -> Result<f64> {
    let flipped: Vec<&WatermarkEntry> = entries.iter().filter(|e| e.bit == 1).collect();
    if flipped.is_empty() {
        return Err(Error::InsufficientSamples("no embedded watermarks".into()));
    }
    let mut hits = 0;
    for e in &flipped {
        if model.predict_label(&e.candidate.x)? == e.y_wm {
            hits += 1;
        }
    }
    Ok(hits as f64 / flipped.len() as f64)
}

pub fn general_accuracy(model: &Ensemble, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples("evaluation set is empty".into()));
    }
    let preds = model.predict_labels(data.features())?;
    let hits = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Among entries `before` predicts as `y_wm`, the fraction `after` still does.
/// `None` when nothing was embedded in the first place.
pub fn robustness(
    before: &Ensemble,
    after: &Ensemble,
    entries: &[WatermarkEntry],
) -> Result<Option<f64>> {
    let mut embedded = 0;
    let mut kept = 0;
    for e in entries.iter().filter(|e| e.bit == 1) {
        if before.predict_label(&e.candidate.x)? == e.y_wm {
            embedded += 1;
            if after.predict_label(&e.candidate.x)? == e.y_wm {
                kept += 1;
            }
        }
    }
    Ok((embedded > 0).then(|| kept as f64 / embedded as f64))
}

/// What a non-selected candidate's new prediction is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResilienceTarget {
    /// The initial model's prediction.
    #[default]
    InitialPrediction,
    /// The ground-truth label.
    TrueLabel,
}

string_enum!(ResilienceTarget {
    InitialPrediction => "initial_prediction",
    TrueLabel => "true_label",
});

/// Fraction of unselected candidates whose prediction is unchanged by
/// watermarking. `None` when every candidate was selected.
pub fn candidate_resilience(
    initial: &Ensemble,
    watermarked: &Ensemble,
    non_selected: &[Candidate],
    target: ResilienceTarget,
) -> Result<Option<f64>> {
    if non_selected.is_empty() {
        return Ok(None);
    }
    let mut same = 0;
    for c in non_selected {
        let want = match target {
            ResilienceTarget::InitialPrediction => initial.predict_label(&c.x)?,
            ResilienceTarget::TrueLabel => c.y_true,
        };
        if watermarked.predict_label(&c.x)? == want {
            same += 1;
        }
    }
    Ok(Some(same as f64 / non_selected.len() as f64))
}

pub fn adjusted(value: f64, a_wm: f64) -> f64 {
    value * a_wm
}

/// One grid cell's outcome. Undefined metrics are `None` and serialize as
/// empty CSV fields / JSON nulls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub selection: Selection,
    pub ratio: f64,
    pub seed: u64,
    pub a_wm: Option<f64>,
    pub a_model: Option<f64>,
    pub a_model_adj: Option<f64>,
    pub robustness: Option<f64>,
    pub resilience: Option<f64>,
    pub resilience_adj: Option<f64>,
    /// Watermarks actually embedded.
    pub k: usize,
    /// Candidates actually nominated.
    pub n: usize,
    pub shortfall: bool,
}

impl MetricsReport {
    /// Fills the adjusted columns from the raw ones.
    pub fn with_adjusted(mut self) -> Self {
        self.a_model_adj = self.a_model.zip(self.a_wm).map(|(a, w)| adjusted(a, w));
        self.resilience_adj = self.resilience.zip(self.a_wm).map(|(r, w)| adjusted(r, w));
        self
    }
}

pub fn write_csv<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
