//! Test-set scoring, metrics and CSV reports.

use std::path::Path;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{Model, Routing};
use crate::objective::{auroc, ScoredSample};
use crate::patch::ImageSample;
use crate::train::csv_err;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub samples: Vec<ScoredSample>,
    pub auroc: f64,
    /// Classifier accuracy on normal test samples.
    pub accuracy: f64,
}

/// Scores one image with predicted routing. `predicted_class` is a model
/// class index.
pub fn score_image(model: &Model, id: usize, image: &ImageSample, anomaly: bool) -> Result<ScoredSample> {
    let out = model.forward_image(image, Routing::Predicted)?;
    Ok(ScoredSample {
        id,
        score: out.error.score,
        patch_errors: out.error.patch_errors,
        predicted_class: out.prototype,
        label: image.label,
        anomaly,
    })
}

pub fn evaluate(model: &Model, split: &SplitDataset) -> Result<Evaluation> {
    if split.normal_classes != model.config.data.normal_classes {
        return Err(Error::Config("split and model disagree on the normal classes".into()));
    }
    let samples = split
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| score_image(model, i, s, s.anomaly))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let flags: Vec<bool> = samples.iter().map(|s| s.anomaly).collect();
    let auroc = auroc(&scores, &flags)?;
    let normal: Vec<&ScoredSample> = samples.iter().filter(|s| !s.anomaly).collect();
    let correct = normal
        .iter()
        .filter(|s| split.class_index(s.label) == Some(s.predicted_class))
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / normal.len() as f64,
        auroc,
        samples,
    })
}

/// One row per sample (`id, label, score, predicted_class, anomaly_flag`,
/// predicted class as a dataset label) then `summary` rows with the AUROC
/// and accuracy.
pub fn write_metrics_csv(eval: &Evaluation, normal_classes: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
    w.write_record(["id", "label", "score", "predicted_class", "anomaly_flag"])
        .map_err(csv_err)?;
    for s in &eval.samples {
        w.write_record([
            s.id.to_string(),
            s.label.to_string(),
            s.score.to_string(),
            normal_classes[s.predicted_class].to_string(),
            (s.anomaly as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.write_record(["summary", "auroc", &eval.auroc.to_string()]).map_err(csv_err)?;
    w.write_record(["summary", "accuracy", &eval.accuracy.to_string()])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

/// Patch error map as a `rows × cols` CSV grid.
pub fn write_error_map(errors: &[f64], cols: usize, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    for row in errors.chunks(cols) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
