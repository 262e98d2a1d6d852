//! Training losses, reconstruction-error scoring and AUROC.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nprm::PROB_FLOOR;
use crate::tensor::Tensor;

/// `-ln(max(y[label], 1e-12))` for a `1 × T` probability row.
pub fn cls_loss(g: &mut Graph, probs: Var, label: usize) -> Result<Var> {
    let p = g.select(probs, label)?;
    let lp = g.ln_floor(p, PROB_FLOOR);
    Ok(g.scale(lp, -1.0))
}

pub fn cls_loss_value(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Mean over rows of the squared Euclidean row distance.
pub fn rec_loss(g: &mut Graph, original: Var, reconstructed: Var) -> Result<Var> {
    let diff = g.sub(original, reconstructed)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq);
    let rows = g.shape(original)[0] as f64;
    Ok(g.scale(total, 1.0 / rows))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha = {alpha} outside [0, 1]")))
    }
}

/// `(1 - alpha) · l_rec + alpha · l_cls`.
pub fn total_loss(g: &mut Graph, l_rec: Var, l_cls: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let r = g.scale(l_rec, 1.0 - alpha);
    let c = g.scale(l_cls, alpha);
    g.add(r, c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_rec: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_rec: f64, l_cls: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(LossBreakdown {
            l_cls,
            l_rec,
            alpha,
            total: (1.0 - alpha) * l_rec + alpha * l_cls,
        })
    }
}

/// How per-patch errors are pooled into an image score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionError {
    pub score: f64,
    pub patch_errors: Vec<f64>,
}

/// Per-row squared error map and its pooled score.
pub fn anomaly_score(original: &Tensor, reconstructed: &Tensor, pooling: Pooling) -> Result<ReconstructionError> {
    if original.shape() != reconstructed.shape() {
        return Err(Error::Dimension(format!(
            "original {:?} vs reconstruction {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    let cols = original.cols();
    let patch_errors: Vec<f64> = original
        .data()
        .chunks(cols)
        .zip(reconstructed.data().chunks(cols))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();
    let score = match pooling {
        Pooling::Mean => patch_errors.iter().sum::<f64>() / patch_errors.len() as f64,
        Pooling::Max => patch_errors.iter().cloned().fold(0.0, f64::max),
    };
    Ok(ReconstructionError { score, patch_errors })
}

/// One evaluated test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: usize,
    pub score: f64,
    pub patch_errors: Vec<f64>,
    pub predicted_class: usize,
    pub label: usize,
    pub anomaly: bool,
}

/// Area under the ROC curve with anomalies (`true`) as the positive class:
/// the probability that a random anomaly outscores a random normal sample,
/// ties counting one half. Computed from midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}
