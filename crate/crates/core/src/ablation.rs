//! Component and top-k ablation sweeps.

use std::path::Path;
use std::str::FromStr;

use crate::config::{ExperimentConfig, FpmMode};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::fpm::Selection;
use crate::train::{csv_err, train};

/// Retained-token fractions swept by the `k` axis.
pub const K_FRACTIONS: [f64; 3] = [0.16, 0.5, 0.77];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// FPM off, auto and top-k.
    Fpm,
    /// CFG decoder on and off.
    Cfg,
    /// Top-k fraction sweep.
    K,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpm" => Ok(AblationAxis::Fpm),
            "cfg" => Ok(AblationAxis::Cfg),
            "k" => Ok(AblationAxis::K),
            other => Err(Error::Config(format!("unknown ablation axis {other:?} (fpm, cfg, k)"))),
        }
    }
}

/// Named configurations along `axis`, all derived from `base`.
pub fn variants(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Fpm => [("off", FpmMode::Off), ("auto", FpmMode::Auto), ("topk", FpmMode::Topk)]
            .into_iter()
            .map(|(name, mode)| (format!("fpm={name}"), with(&|c| c.fpm.mode = mode)))
            .collect(),
        AblationAxis::Cfg => [("on", true), ("off", false)]
            .into_iter()
            .map(|(name, on)| (format!("cfg={name}"), with(&|c| c.decoder.cfg = on)))
            .collect(),
        AblationAxis::K => K_FRACTIONS
            .into_iter()
            .map(|f| {
                let c = with(&|c| {
                    c.fpm.mode = FpmMode::Topk;
                    c.fpm.k = None;
                    c.fpm.k_fraction = f;
                });
                (format!("k_fraction={f}"), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    /// Retained tokens for top-k runs.
    pub k: Option<usize>,
    pub auroc: f64,
    pub accuracy: f64,
}

/// Trains and evaluates every variant in turn.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    variants(base, axis)
        .into_iter()
        .map(|(setting, cfg)| {
            let out = train(&cfg)?;
            let eval = evaluate(&out.model, &out.split)?;
            log::info!("{setting}: auroc {:.4} accuracy {:.4}", eval.auroc, eval.accuracy);
            let k = match cfg.fpm.selection(cfg.tokens())? {
                Selection::TopK(k) => Some(k),
                _ => None,
            };
            Ok(AblationRow {
                setting,
                k,
                auroc: eval.auroc,
                accuracy: eval.accuracy,
            })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["setting", "k", "auroc", "accuracy"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.setting.clone(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.auroc.to_string(),
            r.accuracy.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
