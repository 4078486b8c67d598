//! Evaluation metrics for fitted stratified models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{pinball, sigmoid, LossSpec, StratumData};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the log-likelihood.
const PROB_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitMetrics {
    pub n: usize,
    /// Misclassification rate in percent at threshold 0.5.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_pct: Option<f64>,
    /// Mean negative log-likelihood in nats.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    /// Mean exact pinball loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pinball: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub train: SplitMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<SplitMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<SplitMetrics>,
}

/// Area under the ROC curve with average ranks for ties. `None` when only
/// one class is present.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Error, ANLL, AUC and F1 from predicted probabilities of the positive class.
pub fn classification_metrics(probs: &[f64], positive: &[bool]) -> Result<SplitMetrics> {
    if probs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if probs.len() != positive.len() {
        return Err(Error::Dimension("predictions and labels differ in length".into()));
    }
    let n = probs.len() as f64;
    let (mut wrong, mut tp, mut fp, mut fne, mut nll) = (0usize, 0usize, 0usize, 0usize, 0.0);
    for (&p, &y) in probs.iter().zip(positive) {
        let pred = p >= 0.5;
        if pred != y {
            wrong += 1;
        }
        match (pred, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        nll -= if y { pc.ln() } else { (1.0 - pc).ln() };
    }
    let denom = 2 * tp + fp + fne;
    Ok(SplitMetrics {
        n: probs.len(),
        error_pct: Some(100.0 * wrong as f64 / n),
        anll: Some(nll / n),
        auc: auc(probs, positive),
        f1: Some(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 }),
        ..Default::default()
    })
}

/// Mean exact pinball loss and mean squared error of predictions.
pub fn regression_metrics(preds: &[f64], targets: &[f64], tau: Option<f64>) -> Result<SplitMetrics> {
    if preds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let n = preds.len() as f64;
    let resid = preds.iter().zip(targets).map(|(p, y)| y - p);
    let mse = resid.clone().map(|r| r * r).sum::<f64>() / n;
    Ok(SplitMetrics {
        n: preds.len(),
        pinball: tau.map(|t| resid.map(|r| pinball(t, r)).sum::<f64>() / n),
        mse: Some(mse),
        ..Default::default()
    })
}

/// Linear scores `x^T theta_k` for every row, in stratum order.
fn scores(theta: &DMatrix<f64>, strata: &[StratumData]) -> (Vec<f64>, Vec<f64>) {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (k, d) in strata.iter().enumerate() {
        if d.count() == 0 {
            continue;
        }
        let pred = d.features() * theta.column(k);
        s.extend(pred.iter());
        y.extend(d.targets().iter());
    }
    (s, y)
}

/// Evaluates a parameter matrix on stratified data with the metrics that
/// match the loss family.
pub fn evaluate(spec: &LossSpec, theta: &DMatrix<f64>, strata: &[StratumData]) -> Result<SplitMetrics> {
    if theta.ncols() != strata.len() {
        return Err(Error::Dimension(format!(
            "theta has {} columns for {} strata",
            theta.ncols(),
            strata.len()
        )));
    }
    let (s, y) = scores(theta, strata);
    match spec {
        LossSpec::Logistic => {
            let probs: Vec<f64> = s.iter().map(|&z| sigmoid(z)).collect();
            let pos: Vec<bool> = y.iter().map(|&v| v > 0.0).collect();
            classification_metrics(&probs, &pos)
        }
        LossSpec::BernoulliLogit => {
            let probs: Vec<f64> = s.iter().map(|&z| sigmoid(z)).collect();
            let pos: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
            classification_metrics(&probs, &pos)
        }
        LossSpec::LeastSquares => regression_metrics(&s, &y, None),
        LossSpec::PinballHuber { tau, .. } => regression_metrics(&s, &y, Some(*tau)),
    }
}

/// The scalar used for model selection, lower is better: ANLL for
/// classifiers, pinball loss for quantile models, MSE otherwise.
pub fn selection_score(spec: &LossSpec, m: &SplitMetrics) -> f64 {
    let v = match spec {
        LossSpec::Logistic | LossSpec::BernoulliLogit => m.anll,
        LossSpec::PinballHuber { .. } => m.pinball,
        LossSpec::LeastSquares => m.mse,
    };
    v.unwrap_or(f64::INFINITY)
}
