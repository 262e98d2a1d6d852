//! Dataset ingestion: IDX parsing, the seeded synthetic generators and
//! many-vs-many split construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::SeedStream;
use crate::patch::ImageSample;

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

/// Decoded IDX payload.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// Row-major `height × width` images scaled to `[0, 1]`.
    Images {
        height: usize,
        width: usize,
        images: Vec<Vec<f64>>,
    },
    Labels(Vec<usize>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset,
            reason: "truncated header".into(),
        })
}

/// Parses an unsigned-byte IDX file (labels `0x801` or images `0x803`).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let n = read_u32(bytes, 4)? as usize;
    let (dims, header) = match magic {
        IDX_LABELS => (vec![n], 8),
        IDX_IMAGES => (vec![n, read_u32(bytes, 8)? as usize, read_u32(bytes, 12)? as usize], 16),
        other => {
            return Err(Error::Format {
                offset: 0,
                reason: format!("unknown magic {other:#010x}"),
            })
        }
    };
    let need: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: header + payload.len(),
            reason: format!("payload needs {need} bytes, {} remain", payload.len()),
        });
    }
    Ok(match magic {
        IDX_LABELS => IdxData::Labels(payload[..n].iter().map(|&b| b as usize).collect()),
        _ => {
            let (height, width) = (dims[1], dims[2]);
            let images = payload[..need]
                .chunks(height * width)
                .map(|img| img.iter().map(|&b| b as f64 / 255.0).collect())
                .collect();
            IdxData::Images { height, width, images }
        }
    })
}

/// Train and test images with class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub classes: usize,
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str) -> Result<Vec<ImageSample>> {
    let imgs = parse_idx(&fs::read(dir.join(images))?)?;
    let labs = parse_idx(&fs::read(dir.join(labels))?)?;
    let (IdxData::Images { height, width, images }, IdxData::Labels(labels)) = (imgs, labs) else {
        return Err(Error::Format {
            offset: 0,
            reason: format!("{images} / {labels} hold the wrong IDX kinds"),
        });
    };
    if images.len() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            reason: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    images
        .into_iter()
        .zip(labels)
        .map(|(px, label)| ImageSample::new(height, width, 1, px, label))
        .collect()
}

/// Loads the four standard MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let train = load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let classes = train.iter().chain(&test).map(|s| s.label + 1).max().unwrap_or(0);
    Ok(Dataset { train, test, classes })
}

/// Stroke templates in unit coordinates, loosely shaped like the digits 0–9.
fn digit_template(class: usize) -> Vec<Vec<(f64, f64)>> {
    let loop0: Vec<(f64, f64)> = (0..=12)
        .map(|i| {
            let t = i as f64 / 12.0 * std::f64::consts::TAU;
            (0.5 + 0.2 * t.sin(), 0.5 - 0.32 * t.cos())
        })
        .collect();
    match class {
        0 => vec![loop0],
        1 => vec![vec![(0.38, 0.27), (0.5, 0.15), (0.5, 0.85)]],
        2 => vec![vec![(0.3, 0.3), (0.45, 0.17), (0.65, 0.2), (0.68, 0.38), (0.3, 0.82), (0.72, 0.82)]],
        3 => vec![vec![(0.3, 0.2), (0.68, 0.22), (0.45, 0.48), (0.7, 0.62), (0.6, 0.82), (0.3, 0.8)]],
        4 => vec![vec![(0.6, 0.85), (0.6, 0.15), (0.28, 0.6), (0.75, 0.6)]],
        5 => vec![vec![(0.7, 0.18), (0.35, 0.18), (0.33, 0.47), (0.65, 0.5), (0.66, 0.75), (0.32, 0.82)]],
        6 => vec![vec![(0.65, 0.18), (0.38, 0.45), (0.33, 0.7), (0.5, 0.83), (0.67, 0.68), (0.52, 0.52), (0.36, 0.62)]],
        7 => vec![vec![(0.28, 0.2), (0.72, 0.2), (0.45, 0.85)]],
        8 => vec![vec![
            (0.5, 0.5),
            (0.32, 0.33),
            (0.5, 0.17),
            (0.68, 0.33),
            (0.5, 0.5),
            (0.3, 0.67),
            (0.5, 0.84),
            (0.7, 0.67),
            (0.5, 0.5),
        ]],
        9 => vec![vec![(0.66, 0.4), (0.5, 0.52), (0.34, 0.38), (0.5, 0.2), (0.66, 0.3), (0.66, 0.5), (0.6, 0.84)]],
        _ => {
            let mut rng = SeedStream::new(class as u64).rng("template");
            vec![(0..5).map(|_| (rng.random_range(0.2..0.8), rng.random_range(0.15..0.85))).collect()]
        }
    }
}

fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    cx * cx + cy * cy
}

/// Shape family of the synthetic generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Each class is a fixed constellation of Gaussian blobs.
    #[default]
    Blobs,
    /// Each class is a polyline glyph loosely shaped like a digit.
    Strokes,
}

/// Synthetic generator parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticOptions {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
}

/// Renders one jittered, randomly transformed stroke digit of `class`.
pub fn render_digit<R: Rng>(class: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let angle = rng.random_range(-0.2..0.2f64);
    let scale = rng.random_range(0.85..1.1);
    let shear = rng.random_range(-0.12..0.12);
    let (tx, ty) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let (sin, cos) = angle.sin_cos();
    let transform = |(x, y): (f64, f64)| {
        let (x, y) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
        (0.5 + scale * rx + tx, 0.5 + scale * ry + ty)
    };
    let strokes: Vec<Vec<(f64, f64)>> = digit_template(class)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|p| {
                    let (x, y) = transform(p);
                    (
                        (x + 0.025 * unit.sample(rng)) * size as f64,
                        (y + 0.025 * unit.sample(rng)) * size as f64,
                    )
                })
                .collect()
        })
        .collect();
    let width = rng.random_range(0.9..1.5) * size as f64 / 28.0;
    let ink = rng.random_range(0.8..1.0);
    let mut pixels = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d2 = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance_sq(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = ink * (-d2 / (2.0 * width * width)).exp();
            pixels[r * size + c] = if v < 0.1 { 0.0 } else { (v + 0.03 * unit.sample(rng)).clamp(0.0, 1.0) };
        }
    }
    pixels
}

const BLOBS_PER_CLASS: usize = 4;

/// Blob centres (unit coordinates) and widths (pixels at 28 × 28) of a
/// class constellation.
fn blob_template(class: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = SeedStream::new(class as u64).rng("blobs");
    (0..BLOBS_PER_CLASS)
        .map(|_| (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(1.3..2.3)))
        .collect()
}

/// Renders one jittered sample of blob class `class`.
pub fn render_blobs<R: Rng>(class: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let px = size as f64;
    let (sx, sy) = (rng.random_range(-0.04..0.04) * px, rng.random_range(-0.04..0.04) * px);
    let blobs: Vec<(f64, f64, f64, f64)> = blob_template(class)
        .into_iter()
        .map(|(x, y, w)| {
            (
                x * px + sx + 0.6 * unit.sample(rng) * px / 28.0,
                y * px + sy + 0.6 * unit.sample(rng) * px / 28.0,
                w * rng.random_range(0.85..1.15) * px / 28.0,
                rng.random_range(0.7..1.0),
            )
        })
        .collect();
    let mut pixels = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let v: f64 = blobs
                .iter()
                .map(|(bx, by, w, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * w * w)).exp())
                .sum();
            pixels[r * size + c] = if v < 0.1 { 0.0 } else { (v + 0.03 * unit.sample(rng)).clamp(0.0, 1.0) };
        }
    }
    pixels
}

/// Seeded synthetic stand-in for MNIST: `classes` sparse classes on a
/// `size × size` grid.
pub fn synthetic_digits(options: &SyntheticOptions, seeds: &SeedStream) -> Result<Dataset> {
    if options.classes == 0 || options.size < 4 {
        return Err(Error::Config("synthetic data needs ≥ 1 class and size ≥ 4".into()));
    }
    let make = |purpose: &str, per_class: usize| -> Result<Vec<ImageSample>> {
        let mut rng = seeds.rng(purpose);
        let mut out = Vec::with_capacity(per_class * options.classes);
        for i in 0..per_class * options.classes {
            let class = i % options.classes;
            let px = match options.kind {
                SyntheticKind::Blobs => render_blobs(class, options.size, &mut rng),
                SyntheticKind::Strokes => render_digit(class, options.size, &mut rng),
            };
            out.push(ImageSample::new(options.size, options.size, 1, px, class)?);
        }
        Ok(out)
    };
    Ok(Dataset {
        train: make("synthetic.train", options.train_per_class)?,
        test: make("synthetic.test", options.test_per_class)?,
        classes: options.classes,
    })
}

/// Uniform i.i.d. pixel noise images.
pub fn dense_noise<R: Rng>(count: usize, size: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..size * size).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Normal-class training data and the flagged test set.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Dataset labels of the normal classes; position = model class index.
    pub normal_classes: Vec<usize>,
}

impl SplitDataset {
    /// Model class index of a dataset label, `None` for anomalous labels.
    pub fn class_index(&self, label: usize) -> Option<usize> {
        self.normal_classes.iter().position(|&c| c == label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOptions {
    pub normal_classes: Vec<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

fn take_per_class(samples: Vec<ImageSample>, limit: Option<usize>, classes: usize) -> Vec<ImageSample> {
    let Some(limit) = limit else { return samples };
    let mut counts = vec![0usize; classes];
    samples
        .into_iter()
        .filter(|s| {
            counts[s.label] += 1;
            counts[s.label] <= limit
        })
        .collect()
}

/// Many-vs-many split: train keeps only the normal classes (order shuffled
/// by `seed`), test keeps every class with `anomaly = label ∉ normal`.
pub fn make_split(dataset: Dataset, options: &SplitOptions, seed: &SeedStream) -> Result<SplitDataset> {
    let normal: BTreeSet<usize> = options.normal_classes.iter().copied().collect();
    if normal.is_empty() || normal.len() != options.normal_classes.len() {
        return Err(Error::Config("normal classes must be non-empty and distinct".into()));
    }
    if let Some(&bad) = normal.iter().find(|&&c| c >= dataset.classes) {
        return Err(Error::Config(format!(
            "normal class {bad} not present in a {}-class dataset",
            dataset.classes
        )));
    }
    let mut train: Vec<ImageSample> = take_per_class(dataset.train, options.train_per_class, dataset.classes)
        .into_iter()
        .filter(|s| normal.contains(&s.label))
        .collect();
    train.shuffle(&mut seed.rng("split.train"));
    let test = take_per_class(dataset.test, options.test_per_class, dataset.classes)
        .into_iter()
        .map(|mut s| {
            s.anomaly = !normal.contains(&s.label);
            s
        })
        .collect();
    Ok(SplitDataset {
        train,
        test,
        normal_classes: options.normal_classes.clone(),
    })
}

/// Scalar pixel standardization fitted on training images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn fit(samples: &[ImageSample]) -> Result<Self> {
        let n: usize = samples.iter().map(|s| s.pixels.len()).sum();
        if n == 0 {
            return Err(Error::InsufficientData("no pixels to standardize".into()));
        }
        let mean = samples.iter().flat_map(|s| &s.pixels).sum::<f64>() / n as f64;
        let var = samples
            .iter()
            .flat_map(|s| &s.pixels)
            .map(|p| (p - mean) * (p - mean))
            .sum::<f64>()
            / n as f64;
        Ok(NormStats {
            mean,
            std: var.sqrt().max(1e-6),
        })
    }

    pub fn apply(&self, pixels: &[f64]) -> Vec<f64> {
        pixels.iter().map(|p| (p - self.mean) / self.std).collect()
    }
}
