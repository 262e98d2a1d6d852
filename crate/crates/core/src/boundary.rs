//! Latent-density glue: embedding extraction, embeddings files and the
//! density and entropy CSV reports.

use std::path::Path;

use crate::config::BoundaryConfig;
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::SeedStream;
use crate::patch::ImageSample;
use crate::stats::{boundary_report, image_entropy, BoundaryOptions, DensityReport, GmmOptions};
use crate::tensor::Tensor;
use crate::train::csv_err;

impl From<&BoundaryConfig> for BoundaryOptions {
    fn from(c: &BoundaryConfig) -> Self {
        BoundaryOptions {
            pca_dims: (c.pca_dims > 0).then_some(c.pca_dims),
            gmm: GmmOptions {
                max_iter: c.max_iter,
                tol: c.tol,
            },
        }
    }
}

/// Stacks one latent embedding per image into an `n × e` matrix.
pub fn extract_embeddings<'a>(model: &Model, images: impl IntoIterator<Item = &'a ImageSample>) -> Result<Tensor> {
    let rows = images
        .into_iter()
        .map(|img| model.embedding(img))
        .collect::<Result<Vec<_>>>()?;
    let d = model.config.model.dim;
    let n = rows.len();
    Tensor::new(vec![n, d], rows.concat())
}

/// Embedding groups used by the boundary analysis.
pub struct BoundaryEmbeddings {
    /// Training samples of the single reference class.
    pub single: Tensor,
    /// All normal training samples.
    pub multi: Tensor,
    /// Anomalous test samples.
    pub anomalies: Tensor,
}

pub fn split_embeddings(model: &Model, split: &SplitDataset) -> Result<BoundaryEmbeddings> {
    let single_class = model.config.boundary.single_class;
    if !split.normal_classes.contains(&single_class) {
        return Err(Error::Config(format!("single_class {single_class} is not a normal class")));
    }
    Ok(BoundaryEmbeddings {
        single: extract_embeddings(model, split.train.iter().filter(|s| s.label == single_class))?,
        multi: extract_embeddings(model, &split.train)?,
        anomalies: extract_embeddings(model, split.test.iter().filter(|s| s.anomaly))?,
    })
}

/// Fits both density models on a trained model's latents; `K` is the number
/// of normal classes.
pub fn model_boundary_report(model: &Model, split: &SplitDataset) -> Result<DensityReport> {
    let e = split_embeddings(model, split)?;
    let mut rng = SeedStream::new(model.config.seed).rng("boundary.gmm");
    boundary_report(
        &e.single,
        &e.multi,
        &e.anomalies,
        split.normal_classes.len(),
        &(&model.config.boundary).into(),
        &mut rng,
    )
}

/// Embeddings file: `n` and `d` as little-endian `u64`, then `n × d`
/// little-endian `f64` values.
pub fn write_embeddings(x: &Tensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 8 * x.numel());
    out.extend((x.rows() as u64).to_le_bytes());
    out.extend((x.cols() as u64).to_le_bytes());
    for v in x.data() {
        out.extend(v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_embeddings(bytes: &[u8]) -> Result<Tensor> {
    let header = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or(Error::Format {
                offset: at,
                reason: "truncated header".into(),
            })
    };
    let (n, d) = (header(0)?, header(8)?);
    let need = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .ok_or(Error::Format {
            offset: 0,
            reason: "size overflows".into(),
        })?;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Format {
            offset: 16 + payload.len().min(need),
            reason: format!("payload is {} bytes, header implies {need}", payload.len()),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![n, d], data)
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    parse_embeddings(&std::fs::read(path)?)
}

/// Per-anomaly densities followed by `summary` rows.
pub fn write_density_csv(report: &DensityReport, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
    w.write_record(["id", "single_density", "single_log_density", "multi_density", "multi_log_density"])
        .map_err(csv_err)?;
    for (i, (s, m)) in report.single.iter().zip(&report.multi).enumerate() {
        w.write_record([
            i.to_string(),
            s.density.to_string(),
            s.log_density.to_string(),
            m.density.to_string(),
            m.log_density.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let summary = [
        ("mean_single_density", report.mean_single_density),
        ("mean_multi_density", report.mean_multi_density),
        ("mean_single_log_density", report.mean_single_log_density),
        ("mean_multi_log_density", report.mean_multi_log_density),
        ("multi_exceeds_single", report.multi_exceeds_single as u8 as f64),
        ("components", report.components as f64),
        ("dims", report.dims as f64),
    ];
    for (k, v) in summary {
        w.write_record(["summary", k, &v.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Entropy (bits) of every image and their mean.
pub fn entropies(images: &[ImageSample], bins: usize) -> Result<(Vec<f64>, f64)> {
    if images.is_empty() {
        return Err(Error::InsufficientData("no images".into()));
    }
    let h = images
        .iter()
        .map(|img| image_entropy(&img.grayscale(), bins))
        .collect::<Result<Vec<_>>>()?;
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    Ok((h, mean))
}

pub fn write_entropy_csv(images: &[ImageSample], bins: usize, path: &Path) -> Result<f64> {
    let (h, mean) = entropies(images, bins)?;
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
    w.write_record(["id", "label", "entropy"]).map_err(csv_err)?;
    for (i, (img, v)) in images.iter().zip(&h).enumerate() {
        w.write_record([i.to_string(), img.label.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.write_record(["summary", "mean_entropy", &mean.to_string()]).map_err(csv_err)?;
    w.flush()?;
    Ok(mean)
}
