use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reconstruction penalty for the visual denoising heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Label-smoothed cross-entropy, averaged over non-pad positions.
///
/// The smoothed target puts `1 - epsilon` on the gold token and
/// `epsilon / (V - 1)` on every other token. Returns the scalar loss and
/// `dLoss/dlogits`.
pub fn label_smoothed_nll(
    logits: &Array2<f64>,
    targets: &[u32],
    epsilon: f64,
    pad_id: Option<u32>,
) -> Result<(f64, Array2<f64>)> {
    let (n, vocab) = logits.dim();
    if targets.len() != n {
        return Err(Error::shape(format!(
            "{n} logit rows vs {} targets",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config("epsilon must lie in [0, 1)"));
    }
    let included: Vec<usize> = (0..n)
        .filter(|i| pad_id != Some(targets[*i]))
        .collect();
    if included.is_empty() {
        return Ok((0.0, Array2::zeros((n, vocab))));
    }
    let count = included.len() as f64;
    let off_weight = if vocab > 1 {
        epsilon / (vocab as f64 - 1.0)
    } else {
        0.0
    };

    let mut dlogits = Array2::zeros((n, vocab));
    let mut loss = 0.0;
    for i in included {
        let target = targets[i] as usize;
        if target >= vocab {
            return Err(Error::config(format!(
                "target id {target} outside vocabulary of {vocab}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();

        // loss_i = -sum_j target_dist_j * logp_j
        let sum_logp: f64 = row.iter().map(|v| v - lse).sum();
        let logp_t = row[target] - lse;
        loss += -((1.0 - epsilon) * logp_t + off_weight * (sum_logp - logp_t));

        let mut drow = dlogits.row_mut(i);
        for (j, v) in row.iter().enumerate() {
            let softmax = (v - lse).exp();
            let target_mass = if j == target { 1.0 - epsilon } else { off_weight };
            drow[j] = (softmax - target_mass) / count;
        }
    }
    Ok((loss / count, dlogits))
}

/// Mean element-wise reconstruction loss (mean over coordinates, then mean
/// over rows) and its gradient with respect to the prediction.
pub fn reconstruction_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    kind: LossKind,
) -> (f64, Array2<f64>) {
    assert_eq!(pred.dim(), target.dim(), "prediction/target shape mismatch");
    let n = pred.len() as f64;
    if pred.is_empty() {
        return (0.0, pred.clone());
    }
    match kind {
        LossKind::L1 => {
            let diff = pred - target;
            let loss = diff.mapv(f64::abs).sum() / n;
            let grad = diff.mapv(|v| v.signum() / n);
            (loss, grad)
        }
        LossKind::L2 => {
            let diff = pred - target;
            let loss = diff.mapv(|v| v * v).sum() / n;
            let grad = diff.mapv(|v| 2.0 * v / n);
            (loss, grad)
        }
    }
}
