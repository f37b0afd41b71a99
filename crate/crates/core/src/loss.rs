//! Vote-weighted binary cross entropy.
//!
//! Each sample's cross-entropy term is scaled by the min-max normalized
//! number of annotators who marked it:
//!
//! ```text
//! L = -(alpha / n) * sum_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)] * (v_i - min v) / (max v - min v)
//! ```
//!
//! `min v` and `max v` are taken over the whole training set. When they are
//! equal every weight is 1 and the loss is `alpha` times the mean BCE.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};

/// Normalized vote weight in `[0, 1]`; 1 for every sample when the bounds
/// coincide.
pub fn vote_weight(votes: u32, min_votes: u32, max_votes: u32) -> Result<f64> {
    if min_votes > max_votes || votes < min_votes || votes > max_votes {
        return Err(Error::Range(format!(
            "votes {votes} outside bounds [{min_votes}, {max_votes}]"
        )));
    }
    if max_votes == min_votes {
        return Ok(1.0);
    }
    Ok(f64::from(votes - min_votes) / f64::from(max_votes - min_votes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Votes,
    PlainBce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Votes => "votes",
            LossKind::PlainBce => "plain_bce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "votes" => Ok(LossKind::Votes),
            "plain_bce" | "plain-bce" | "bce" => Ok(LossKind::PlainBce),
            other => Err(Error::InvalidInput(format!(
                "unknown loss {other:?} (expected votes or plain_bce)"
            ))),
        }
    }
}

/// Training samples with binary labels and vote counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteWeightedBatch {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub votes: Vec<u32>,
    pub min_votes: u32,
    pub max_votes: u32,
    pub alpha: f64,
    /// Lower bound applied to every vote weight; 0 keeps the loss exact.
    pub weight_floor: f64,
}

impl VoteWeightedBatch {
    /// Builds a batch with vote bounds taken over the given samples.
    pub fn new(
        ids: Vec<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<u8>,
        votes: Vec<u32>,
    ) -> Result<Self> {
        let min_votes = votes.iter().copied().min().unwrap_or(1);
        let max_votes = votes.iter().copied().max().unwrap_or(1);
        Self::with_bounds(ids, features, labels, votes, min_votes, max_votes)
    }

    pub fn with_bounds(
        ids: Vec<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<u8>,
        votes: Vec<u32>,
        min_votes: u32,
        max_votes: u32,
    ) -> Result<Self> {
        let batch = Self {
            ids,
            features,
            labels,
            votes,
            min_votes,
            max_votes,
            alpha: 1.0,
            weight_floor: 0.0,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::EmptyInput("batch has no samples".into()));
        }
        if self.features.len() != n || self.votes.len() != n || self.ids.len() != n {
            return Err(Error::InvalidInput(format!(
                "batch columns differ in length: {} ids, {} feature rows, {} labels, {} votes",
                self.ids.len(),
                self.features.len(),
                n,
                self.votes.len()
            )));
        }
        let dim = self.features[0].len();
        if self.features.iter().any(|f| f.len() != dim || f.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput(
                "feature rows must share one dimension and be finite".into(),
            ));
        }
        if let Some(y) = self.labels.iter().find(|y| **y > 1) {
            return Err(Error::Domain(format!("label {y} is not binary")));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Range(format!("alpha {} must be positive", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.weight_floor) {
            return Err(Error::Range(format!(
                "weight floor {} must lie in [0, 1]",
                self.weight_floor
            )));
        }
        for v in &self.votes {
            vote_weight(*v, self.min_votes, self.max_votes)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Per-sample loss weights under `kind`.
    pub fn weights(&self, kind: LossKind) -> Vec<f64> {
        match kind {
            LossKind::PlainBce => vec![1.0; self.len()],
            LossKind::Votes => self
                .votes
                .iter()
                .map(|v| {
                    vote_weight(*v, self.min_votes, self.max_votes)
                        .expect("validated bounds")
                        .max(self.weight_floor)
                })
                .collect(),
        }
    }

    /// Scale factor applied by `kind`; plain BCE is unscaled.
    pub fn scale(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Votes => self.alpha,
            LossKind::PlainBce => 1.0,
        }
    }
}

fn check_probabilities(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {n} samples",
            p.len()
        )));
    }
    if let Some(bad) = p.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain(format!("prediction {bad} is not inside (0, 1)")));
    }
    Ok(())
}

fn cross_entropy(y: u8, p: f64) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Vote-weighted loss of predictions `p` on `batch`.
pub fn votes_loss(batch: &VoteWeightedBatch, p: &[f64]) -> Result<f64> {
    check_probabilities(p, batch.len())?;
    Ok(weighted_loss(batch, p, &batch.weights(LossKind::Votes), batch.alpha))
}

/// Mean binary cross entropy.
pub fn bce_loss(labels: &[u8], p: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no samples".into()));
    }
    check_probabilities(p, labels.len())?;
    let sum: f64 = labels.iter().zip(p).map(|(y, p)| cross_entropy(*y, *p)).sum();
    Ok(sum / labels.len() as f64)
}

/// Loss of `kind` on `batch`.
pub fn loss(batch: &VoteWeightedBatch, p: &[f64], kind: LossKind) -> Result<f64> {
    check_probabilities(p, batch.len())?;
    Ok(weighted_loss(batch, p, &batch.weights(kind), batch.scale(kind)))
}

fn weighted_loss(batch: &VoteWeightedBatch, p: &[f64], weights: &[f64], scale: f64) -> f64 {
    let sum: f64 = batch
        .labels
        .iter()
        .zip(p)
        .zip(weights)
        .map(|((y, p), w)| cross_entropy(*y, *p) * w)
        .sum();
    scale * sum / batch.len() as f64
}

/// Analytic gradient of the vote-weighted loss with respect to the model
/// parameters.
///
/// For a sample with logit `z` the loss derivative is
/// `alpha / n * w_i * (p_i - y_i)`, chained through `dz/dtheta`. The
/// gradient is that of the unclamped loss.
pub fn votes_loss_grad(batch: &VoteWeightedBatch, model: &ClassifierModel) -> Result<Vec<f64>> {
    loss_grad(batch, model, LossKind::Votes)
}

pub fn loss_grad(batch: &VoteWeightedBatch, model: &ClassifierModel, kind: LossKind) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let weights = batch.weights(kind);
    model.check_dim(batch.feature_dim())?;
    Ok(subset_grad(batch, model, &weights, batch.scale(kind), &idx))
}

/// Gradient over the samples in `idx`, normalized by `idx.len()`. Samples
/// are reduced in `idx` order.
pub(crate) fn subset_grad(
    batch: &VoteWeightedBatch,
    model: &ClassifierModel,
    weights: &[f64],
    scale: f64,
    idx: &[usize],
) -> Vec<f64> {
    let mut grad = vec![0.0; model.theta.len()];
    let factor = scale / idx.len() as f64;
    for &i in idx {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let p = model.predict(&batch.features[i]);
        let dz = factor * w * (p - f64::from(batch.labels[i]));
        model.accumulate_logit_grad(&batch.features[i], dz, &mut grad);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use proptest::prelude::*;

    fn batch(labels: Vec<u8>, votes: Vec<u32>, bounds: (u32, u32)) -> VoteWeightedBatch {
        let n = labels.len();
        VoteWeightedBatch::with_bounds(
            (0..n).map(|i| i.to_string()).collect(),
            vec![vec![0.0]; n],
            labels,
            votes,
            bounds.0,
            bounds.1,
        )
        .unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(vote_weight(10, 1, 10).unwrap(), 1.0);
        assert_eq!(vote_weight(1, 1, 10).unwrap(), 0.0);
        assert_eq!(vote_weight(5, 1, 9).unwrap(), 0.5);
        assert_eq!(vote_weight(3, 3, 3).unwrap(), 1.0);
        assert!(matches!(vote_weight(11, 1, 10), Err(Error::Range(_))));
        assert!(matches!(vote_weight(0, 1, 10), Err(Error::Range(_))));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn loss_examples() {
        let b = batch(vec![1], vec![4], (4, 4));
        assert!((votes_loss(&b, &[0.5]).unwrap() - 0.693147).abs() < 1e-6);

        let b = batch(vec![1], vec![1], (1, 10));
        assert_eq!(votes_loss(&b, &[0.5]).unwrap(), 0.0);

        let b = batch(vec![1, 0], vec![10, 1], (1, 10));
        let expected = -0.5 * (0.9f64.ln() * 1.0 + 0.8f64.ln() * 0.0);
        let got = votes_loss(&b, &[0.9, 0.2]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.052680).abs() < 1e-6);
    }

    #[test]
    fn predictions_must_be_open_interval() {
        let b = batch(vec![1], vec![1], (1, 1));
        assert!(matches!(votes_loss(&b, &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(votes_loss(&b, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(votes_loss(&b, &[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn floor_lifts_zero_weights() {
        let mut b = batch(vec![1, 0], vec![1, 10], (1, 10));
        b.weight_floor = 0.25;
        assert_eq!(b.weights(LossKind::Votes), vec![0.25, 1.0]);
        b.weight_floor = 1.5;
        assert!(b.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut b = batch(vec![1, 0, 1], vec![2, 2, 2], (2, 5));
        b.features = vec![vec![1.0, -2.0], vec![0.3, 0.1], vec![-1.0, 4.0]];
        let mut m = ClassifierModel::zeros(Architecture::Linear, 2);
        m.theta = vec![0.3, -0.2, 0.1];
        assert!(votes_loss_grad(&b, &m).unwrap().iter().all(|g| *g == 0.0));
    }

    proptest! {
        #[test]
        fn loss_is_monotone_in_votes(y in 0u8..2, p in 0.01..0.99f64, v1 in 1u32..10, v2 in 1u32..10) {
            let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
            let a = votes_loss(&batch(vec![y], vec![lo], (1, 10)), &[p]).unwrap();
            let b = votes_loss(&batch(vec![y], vec![hi], (1, 10)), &[p]).unwrap();
            prop_assert!(a <= b);
        }

        #[test]
        fn alpha_scales_exactly(y in 0u8..2, p in 0.01..0.99f64, v in 1u32..10) {
            let one = batch(vec![y], vec![v], (1, 10));
            let two = one.clone().with_alpha(2.0).unwrap();
            prop_assert_eq!(votes_loss(&two, &[p]).unwrap(), 2.0 * votes_loss(&one, &[p]).unwrap());
        }
    }
}
