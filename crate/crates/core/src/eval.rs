//! Case-insensitive word accuracy.

use serde::Serialize;

use crate::data::dataset::Dataset;
use crate::data::transform::Transform;
use crate::error::Result;
use crate::model::Psan;
use crate::param::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub transform: String,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub predictions: Vec<String>,
}

/// Full-string comparison after lower-casing both sides.
pub fn word_match(prediction: &str, label: &str) -> bool {
    prediction.to_lowercase() == label.to_lowercase()
}

pub fn word_accuracy(predictions: &[impl AsRef<str>], labels: &[impl AsRef<str>]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| word_match(p.as_ref(), l.as_ref())).count();
    hits as f64 / labels.len() as f64
}

/// Greedy-decodes every sample (optionally transformed first) with running
/// statistics. Parameters and buffers are only read.
pub fn evaluate<T: Real>(
    model: &Psan,
    store: &ParamStore<T>,
    data: &Dataset,
    transform: Transform,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk, transform)?;
        predictions.extend(model.predict(store, &x.cast::<T>())?);
    }
    let correct = predictions.iter().zip(&data.records).filter(|(p, r)| word_match(p, &r.label)).count();
    let samples = data.len();
    Ok(EvalReport {
        transform: transform.name().to_string(),
        samples,
        correct,
        accuracy: if samples == 0 { 0.0 } else { correct as f64 / samples as f64 },
        predictions,
    })
}
