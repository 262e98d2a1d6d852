//! Dataset preparation and the training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::checkpoint::TrainingMeta;
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_mnist, make_split, synthetic_digits, NormStats, SplitDataset, SplitOptions, SyntheticOptions};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::LossBreakdown;
use crate::optim::AdamW;
use crate::params::{SeedStream, Session};
use crate::tensor::Tensor;

/// Loads or generates the dataset named by `config` and splits it.
pub fn prepare_split(config: &ExperimentConfig) -> Result<SplitDataset> {
    let seeds = SeedStream::new(config.seed);
    let d = &config.data;
    let (dataset, train_limit, test_limit) = match d.source {
        DataSource::Synthetic => {
            let opts = SyntheticOptions {
                kind: d.synthetic,
                classes: d.classes,
                train_per_class: d.train_per_class.unwrap_or(100),
                test_per_class: d.test_per_class.unwrap_or(40),
                size: d.image_size,
            };
            (synthetic_digits(&opts, &seeds.split("data"))?, None, None)
        }
        DataSource::Mnist => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config("data.path missing".into()))?;
            (load_mnist(path)?, d.train_per_class, d.test_per_class)
        }
    };
    let options = SplitOptions {
        normal_classes: d.normal_classes.clone(),
        train_per_class: train_limit,
        test_per_class: test_limit,
    };
    make_split(dataset, &options, &seeds)
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub split: SplitDataset,
}

impl TrainOutcome {
    pub fn meta(&self) -> TrainingMeta {
        TrainingMeta {
            epochs: self.history.len(),
            final_loss: self.history.last().map(|e| e.loss),
        }
    }
}

/// Prepares data, builds the model and trains it.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let split = prepare_split(config)?;
    if split.train.iter().any(|s| s.anomaly) {
        return Err(Error::Contract("anomalous sample in the training set".into()));
    }
    let mut model = Model::new(config)?;
    model.norm = NormStats::fit(&split.train)?;
    let samples = split
        .train
        .iter()
        .map(|s| {
            let label = split
                .class_index(s.label)
                .ok_or_else(|| Error::Contract(format!("training label {} is not normal", s.label)))?;
            Ok((model.patches(s)?, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let history = train_model(&mut model, &samples)?;
    Ok(TrainOutcome { model, history, split })
}

fn check_finite(value: f64, epoch: usize, batch: usize, term: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            epoch,
            batch,
            term: term.into(),
        })
    }
}

/// Minimizes the combined loss over `(patches, class)` pairs with teacher
/// forcing, then freezes the prototype bank.
pub fn train_model(model: &mut Model, samples: &[(Tensor, usize)]) -> Result<Vec<EpochLog>> {
    let cfg = model.config.clone();
    let mut opt = AdamW::new(&cfg.optim, model.store.len());
    let mut shuffle = SeedStream::new(cfg.seed).rng("train.shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.schedule.epochs);
    model.bank.set_frozen(&mut model.store, false);

    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(cfg.optim.lr, epoch);
        order.shuffle(&mut shuffle);
        let (mut sum_rec, mut sum_cls) = (0.0, 0.0);
        for (batch, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
            for &i in chunk {
                let (patches, label) = &samples[i];
                let mut s = Session::new(&model.store);
                let (total, rec, cls) = model.loss_vars(&mut s, patches, *label)?;
                let (r, c) = (s.graph.value(rec).item(), s.graph.value(cls).item());
                check_finite(r, epoch, batch, "l_rec")?;
                check_finite(c, epoch, batch, "l_cls")?;
                sum_rec += r;
                sum_cls += c;
                let grads = s.graph.backward(total)?;
                for (slot, g) in acc.iter_mut().zip(s.param_grads(&grads)) {
                    let Some(g) = g else { continue };
                    match slot {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch,
                        term: "gradient".into(),
                    });
                }
            }
            opt.step(&mut model.store, &acc, lr)?;
        }
        let n = samples.len().max(1) as f64;
        let loss = LossBreakdown::new(sum_rec / n, sum_cls / n, cfg.objective.alpha)?;
        log::info!(
            "epoch {epoch}: l_rec {:.5} l_cls {:.5} total {:.5} (lr {lr:e})",
            loss.l_rec,
            loss.l_cls,
            loss.total
        );
        history.push(EpochLog { epoch, lr, loss });
    }
    model.bank.freeze(&mut model.store);
    Ok(history)
}

/// SVG line plot of the per-epoch loss terms.
pub fn loss_plot_svg(history: &[EpochLog]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let series: [(&str, &str, fn(&EpochLog) -> f64); 3] = [
        ("l_rec", "#1f77b4", |e| e.loss.l_rec),
        ("l_cls", "#d62728", |e| e.loss.l_cls),
        ("total", "#2ca02c", |e| e.loss.total),
    ];
    let max = history
        .iter()
        .flat_map(|e| series.iter().map(move |(_, _, f)| f(e)))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = history.len().max(2) - 1;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    for (k, (name, colour, f)) in series.iter().enumerate() {
        let points: Vec<String> = history
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
                let y = h - pad - (h - 2.0 * pad) * f(e) / max;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{colour}" font-size="12">{name}</text>"#,
            w - pad - 60.0,
            pad + 16.0 * (k + 1) as f64
        );
    }
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="12">max {max:.4}</text>"#, pad - 8.0);
    svg.push_str("</svg>\n");
    svg
}

pub fn write_loss_csv(history: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "lr", "l_rec", "l_cls", "total"]).map_err(csv_err)?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.loss.l_rec.to_string(),
            e.loss.l_cls.to_string(),
            e.loss.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
