//! Detection and model-quality metrics plus the per-round trace record
//! shared by the detector and the simulation driver.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::model::Model;

/// Final experiment metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Fraction of clients correctly classified benign/malicious.
    pub dacc: f64,
    /// Fraction of benign clients falsely flagged.
    pub fpr: f64,
    /// Fraction of malicious clients missed.
    pub fnr: f64,
    /// Test accuracy of the final global model.
    pub tacc: f64,
    /// Fraction of trigger-embedded test inputs classified as the target.
    pub asr: f64,
}

/// One row of the per-round detection trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub iteration: usize,
    pub restart_segment: usize,
    pub mean_score_benign: f64,
    pub mean_score_malicious: f64,
    pub selected_k: usize,
    pub flagged_count: usize,
    pub fallback_used: bool,
    pub global_loss: f64,
    pub tacc_snapshot: Option<f64>,
}

/// (DACC, FPR, FNR) of a flagged set against the ground-truth malicious set.
/// FNR over an empty truth set is 0 (nothing to miss); FPR over an empty
/// benign set likewise.
pub fn detection_metrics(
    truth: &BTreeSet<usize>,
    flagged: &BTreeSet<usize>,
    n: usize,
) -> (f64, f64, f64) {
    let fp = flagged.difference(truth).count();
    let fn_ = truth.difference(flagged).count();
    let benign = n - truth.len();
    let dacc = 1.0 - (fp + fn_) as f64 / n as f64;
    let fpr = if benign == 0 { 0.0 } else { fp as f64 / benign as f64 };
    let fnr = if truth.is_empty() { 0.0 } else { fn_ as f64 / truth.len() as f64 };
    (dacc, fpr, fnr)
}

/// Argmax-prediction accuracy over a test set.
pub fn accuracy(model: &Model, w: &ParamVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set for accuracy"));
    }
    let correct = test
        .examples
        .iter()
        .filter(|ex| model.predict(w, &ex.features) == ex.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Example};
    use crate::model::ModelKind;

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn detection_metrics_hand_counts() {
        assert_eq!(detection_metrics(&set(&[1, 2]), &set(&[1, 2]), 4), (1.0, 0.0, 0.0));
        assert_eq!(detection_metrics(&set(&[1, 2]), &set(&[2, 3]), 4), (0.5, 0.5, 0.5));
        assert_eq!(detection_metrics(&set(&[]), &set(&[]), 5), (1.0, 0.0, 0.0));
    }

    #[test]
    fn detection_metrics_identity() {
        // dacc + (FP + FN)/n == 1 exactly
        let truth = set(&[0, 3, 7]);
        let flagged = set(&[3, 4]);
        let n = 10;
        let (dacc, fpr, fnr) = detection_metrics(&truth, &flagged, n);
        let fp = 1.0;
        let fn_ = 2.0;
        assert_eq!(dacc + (fp + fn_) / n as f64, 1.0);
        assert!((0.0..=1.0).contains(&fpr) && (0.0..=1.0).contains(&fnr));
    }

    #[test]
    fn accuracy_extremes_and_oracle() {
        let data = generate_synthetic(2, 3, 25, 77).unwrap();
        let model = Model::init(ModelKind::Logistic, 3, 2, 0, 1);

        // a strongly biased parameter vector predicts class 0 constantly
        let mut w = vec![0.0; model.params.dim()];
        w[model.params.dim() - 2] = 100.0; // bias of class 0
        let constant = ParamVector::new(w).unwrap();
        let acc = accuracy(&model, &constant, &data).unwrap();
        let class0 = data.examples.iter().filter(|e| e.label == 0).count() as f64;
        assert_eq!(acc, class0 / data.len() as f64);

        // naive loop oracle
        let naive = data
            .examples
            .iter()
            .filter(|ex| model.predict(&model.params, &ex.features) == ex.label)
            .count() as f64
            / data.len() as f64;
        assert_eq!(accuracy(&model, &model.params, &data).unwrap(), naive);

        let empty = Dataset::new(Vec::<Example>::new(), 2, 3).unwrap();
        assert!(accuracy(&model, &model.params, &empty).is_err());
    }
}
