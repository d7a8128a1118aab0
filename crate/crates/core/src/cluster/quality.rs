use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::metrics::LabelAssignment;

/// Macro-averaged precision and recall of plan pseudo-labels, plain and
/// weighted by each sample's selected mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelQuality {
    pub precision: f64,
    pub recall: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub selected: usize,
}

/// Hard labels are row argmaxes of `q`; rows with zero mass are left out.
/// Clusters are mapped to classes by the Hungarian matching of the hard
/// labels. Returns `None` when no row carries mass.
pub fn pseudo_label_quality(q: &Array2<f64>, labels: &[usize]) -> Result<Option<PseudoLabelQuality>> {
    if q.nrows() != labels.len() {
        return Err(dim_err(format!("plan has {} rows, labels {}", q.nrows(), labels.len())));
    }
    let mass = q.sum_axis(Axis(1));
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut weight = Vec::new();
    for (i, row) in q.rows().into_iter().enumerate() {
        if mass[i] > 0.0 {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            pred.push(arg);
            truth.push(labels[i]);
            weight.push(mass[i]);
        }
    }
    if pred.is_empty() {
        return Ok(None);
    }
    let mapped = LabelAssignment::new(&pred, &truth)?.mapped();
    let ones = vec![1.0; pred.len()];
    let (precision, recall) = macro_scores(&mapped, &truth, &ones);
    let (weighted_precision, weighted_recall) = macro_scores(&mapped, &truth, &weight);
    Ok(Some(PseudoLabelQuality { precision, recall, weighted_precision, weighted_recall, selected: pred.len() }))
}

/// Precision averaged over predicted classes, recall over true classes.
fn macro_scores(pred: &[usize], truth: &[usize], w: &[f64]) -> (f64, f64) {
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut hit = vec![0.0; k];
    let mut by_pred = vec![0.0; k];
    let mut by_truth = vec![0.0; k];
    for ((&p, &t), &wi) in pred.iter().zip(truth).zip(w) {
        by_pred[p] += wi;
        by_truth[t] += wi;
        if p == t {
            hit[p] += wi;
        }
    }
    let mean = |den: &[f64]| {
        let v: Vec<f64> = (0..k).filter(|&c| den[c] > 0.0).map(|c| hit[c] / den[c]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    (mean(&by_pred), mean(&by_truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_plan() {
        let q = array![[0.5, 0.0], [0.0, 0.25], [0.25, 0.0]];
        let s = pseudo_label_quality(&q, &[1, 0, 1]).unwrap().unwrap();
        assert_eq!((s.precision, s.recall, s.weighted_precision, s.weighted_recall), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_plan() {
        assert_eq!(pseudo_label_quality(&Array2::zeros((3, 2)), &[0, 1, 0]).unwrap(), None);
    }

    #[test]
    fn crafted_six_samples() {
        // rows 0..4 selected, row 5 has no mass
        let q = array![
            [0.30, 0.02],
            [0.20, 0.01],
            [0.01, 0.05],
            [0.04, 0.01],
            [0.00, 0.10],
            [0.00, 0.00]
        ];
        let labels = [0, 0, 1, 1, 1, 0];
        let s = pseudo_label_quality(&q, &labels).unwrap().unwrap();
        // hard labels 0,0,1,0,1 vs truth 0,0,1,1,1: identity mapping
        // class 0: predicted {0,1,3}, 2 hits; class 1: predicted {2,4}, 2 hits
        assert_eq!(s.selected, 5);
        assert!((s.precision - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((s.recall - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // masses 0.32, 0.21, 0.06, 0.05, 0.10
        let wp0 = 0.53 / 0.58;
        let wr1 = 0.16 / 0.21;
        assert!((s.weighted_precision - (wp0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((s.weighted_recall - (1.0 + wr1) / 2.0).abs() < 1e-12);
        assert!(pseudo_label_quality(&q, &labels[..3]).is_err());
    }
}
