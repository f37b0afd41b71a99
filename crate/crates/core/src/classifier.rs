//! Small differentiable scorer, training loop and training-set assembly.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConsensusCluster;
use crate::loss::{loss, subset_grad, LossKind, VoteWeightedBatch};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn parameter_count(self, feature_dim: usize) -> usize {
        match self {
            Architecture::Linear => feature_dim + 1,
            Architecture::Mlp { hidden } => hidden * feature_dim + 2 * hidden + 1,
        }
    }
}

/// Parameter layout: linear `[w_1..w_d, b]`; MLP `[W1 (h x d, row-major),
/// b1 (h), w2 (h), b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierModel {
    pub architecture: Architecture,
    pub theta: Vec<f64>,
    pub feature_dim: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

impl ClassifierModel {
    pub fn zeros(architecture: Architecture, feature_dim: usize) -> Self {
        Self {
            architecture,
            theta: vec![0.0; architecture.parameter_count(feature_dim)],
            feature_dim,
        }
    }

    /// Uniform initialization in `+-1/sqrt(fan_in)` per layer.
    pub fn random(architecture: Architecture, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(architecture, feature_dim);
        let d = feature_dim.max(1) as f64;
        match architecture {
            Architecture::Linear => {
                let r = 1.0 / d.sqrt();
                for t in &mut m.theta {
                    *t = rng.random_range(-r..r);
                }
            }
            Architecture::Mlp { hidden } => {
                let r1 = 1.0 / d.sqrt();
                let r2 = 1.0 / (hidden.max(1) as f64).sqrt();
                let first = hidden * feature_dim + hidden;
                for (i, t) in m.theta.iter_mut().enumerate() {
                    let r = if i < first { r1 } else { r2 };
                    *t = rng.random_range(-r..r);
                }
            }
        }
        m
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.feature_dim {
            return Err(Error::InvalidInput(format!(
                "model expects {} features, got {dim}",
                self.feature_dim
            )));
        }
        if self.theta.len() != self.architecture.parameter_count(self.feature_dim) {
            return Err(Error::InvalidInput(format!(
                "theta has {} entries, architecture needs {}",
                self.theta.len(),
                self.architecture.parameter_count(self.feature_dim)
            )));
        }
        Ok(())
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let d = self.feature_dim;
        match self.architecture {
            Architecture::Linear => {
                self.theta[..d].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.theta[d]
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut z = b2[0];
                for j in 0..hidden {
                    let a: f64 = w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b1[j];
                    z += w2[j] * a.tanh();
                }
                z
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Adds `scale * dz/dtheta` at input `x` into `grad`.
    pub fn accumulate_logit_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        let d = self.feature_dim;
        match self.architecture {
            Architecture::Linear => {
                for (g, x) in grad[..d].iter_mut().zip(x) {
                    *g += scale * x;
                }
                grad[d] += scale;
            }
            Architecture::Mlp { hidden } => {
                let w1 = &self.theta[..hidden * d];
                let b1 = &self.theta[hidden * d..hidden * d + hidden];
                let w2 = &self.theta[hidden * d + hidden..hidden * d + 2 * hidden];
                let b1_off = hidden * d;
                let w2_off = b1_off + hidden;
                for j in 0..hidden {
                    let a: f64 = w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b1[j];
                    let h = a.tanh();
                    grad[w2_off + j] += scale * h;
                    let da = scale * w2[j] * (1.0 - h * h);
                    for k in 0..d {
                        grad[j * d + k] += da * x[k];
                    }
                    grad[b1_off + j] += da;
                }
                grad[w2_off + hidden] += scale;
            }
        }
    }

    pub fn accuracy(&self, set: &LabeledSet) -> f64 {
        let correct = set
            .features
            .iter()
            .zip(&set.labels)
            .filter(|(x, y)| u8::from(self.logit(x) > 0.0) == **y)
            .count();
        correct as f64 / set.labels.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }
}

/// Held-out features with binary labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub alpha: f64,
    pub weight_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.05,
            epochs: 60,
            batch_size: 32,
            repetitions: 5,
            seed: 0,
            architecture: Architecture::Linear,
            alpha: 1.0,
            weight_floor: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Range(format!("peak learning rate {} must be positive", self.peak_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.repetitions == 0 {
            return Err(Error::Range(
                "epochs, batch size and repetitions must be at least 1".into(),
            ));
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return Err(Error::Range("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

/// One-cycle learning rate: cosine warm-up from `peak/25` to `peak` over
/// the first 30% of steps, then cosine annealing to `peak/(25 * 1e4)`.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64) -> f64 {
    let warmup = ((total_steps as f64) * 0.3) as usize;
    let start = peak / 25.0;
    let end = start / 1e4;
    let cos_ramp = |from: f64, to: f64, t: f64| to + (from - to) * (1.0 + (PI * t).cos()) / 2.0;
    if step < warmup {
        cos_ramp(start, peak, step as f64 / warmup as f64)
    } else {
        let span = (total_steps - warmup).max(1) as f64;
        cos_ramp(peak, end, ((step - warmup) as f64 / span).min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best-epoch parameters of the best repetition.
    pub model: ClassifierModel,
    pub repetitions: Vec<RepetitionResult>,
    pub mean_best: f64,
}

impl TrainOutcome {
    pub fn best_per_repetition(&self) -> Vec<f64> {
        self.repetitions.iter().map(|r| r.best_accuracy).collect()
    }
}

/// Minibatch gradient descent under the one-cycle schedule, repeated
/// `config.repetitions` times; reports the mean over repetitions of the
/// best validation accuracy seen after any epoch.
pub fn train(
    batch: &VoteWeightedBatch,
    validation: &LabeledSet,
    config: &TrainConfig,
    loss_kind: LossKind,
) -> Result<TrainOutcome> {
    config.validate()?;
    batch.validate()?;
    if validation.labels.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    if validation.features.iter().any(|f| f.len() != batch.feature_dim()) {
        return Err(Error::InvalidInput(
            "validation features differ in dimension from the training features".into(),
        ));
    }
    let mut batch = batch.clone();
    batch.alpha = config.alpha;
    batch.weight_floor = config.weight_floor;
    batch.validate()?;

    let runs: Vec<(RepetitionResult, ClassifierModel)> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| train_once(&batch, validation, config, loss_kind, rep))
        .collect::<Result<_>>()?;

    let (best_rep, _) = runs
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1 .0
                .best_accuracy
                .total_cmp(&b.1 .0.best_accuracy)
                .then(b.0.cmp(&a.0))
        })
        .expect("at least one repetition");
    let model = runs[best_rep].1.clone();
    let repetitions: Vec<RepetitionResult> = runs.into_iter().map(|(r, _)| r).collect();
    let mean_best = repetitions.iter().map(|r| r.best_accuracy).sum::<f64>() / repetitions.len() as f64;
    Ok(TrainOutcome {
        model,
        repetitions,
        mean_best,
    })
}

fn train_once(
    batch: &VoteWeightedBatch,
    validation: &LabeledSet,
    config: &TrainConfig,
    loss_kind: LossKind,
    rep: usize,
) -> Result<(RepetitionResult, ClassifierModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64);
    let mut model = ClassifierModel::random(config.architecture, batch.feature_dim(), &mut rng);
    let weights = batch.weights(loss_kind);
    let scale = batch.scale(loss_kind);

    let n = batch.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut last_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = one_cycle_lr(step, total, config.peak_lr);
            let g = subset_grad(batch, &model, &weights, scale, chunk);
            for (t, g) in model.theta.iter_mut().zip(g) {
                *t -= lr * g;
            }
            step += 1;
        }
        if model.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
        last_loss = loss(batch, &model.predict_all(&batch.features), loss_kind)
            .unwrap_or(f64::NAN);
        if !last_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: last_loss,
            });
        }
        let acc = model.accuracy(validation);
        if acc > best.0 {
            best = (acc, epoch, model.clone());
        }
    }
    Ok((
        RepetitionResult {
            repetition: rep + 1,
            best_epoch: best.1,
            best_accuracy: best.0,
            final_loss: last_loss,
        },
        best.2,
    ))
}

/// A sample not backed by a consensus cluster, such as a negative region.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraSample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: u8,
    pub votes: u32,
}

/// Maps consensus clusters to feature vectors and binary labels.
pub trait FeatureExtractor {
    /// Features and label of one cluster; `None` drops it.
    fn cluster_sample(&self, cluster: &ConsensusCluster) -> Option<(Vec<f64>, u8)>;

    /// Samples not backed by a cluster, e.g. unmarked negative regions.
    fn extra_samples(
        &self,
        _clusters: &[(String, Vec<ConsensusCluster>)],
        _expert_subset: &[String],
    ) -> Vec<ExtraSample> {
        Vec::new()
    }
}

/// One sample per cluster with the cluster's vote count, plus the
/// extractor's extra samples; vote bounds span the whole set.
pub fn build_training_set(
    clusters: &[(String, Vec<ConsensusCluster>)],
    expert_subset: &[String],
    extractor: &dyn FeatureExtractor,
) -> Result<VoteWeightedBatch> {
    if expert_subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let subset: BTreeSet<&str> = expert_subset.iter().map(String::as_str).collect();
    let mut ids = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut votes = Vec::new();
    for (image_id, image_clusters) in clusters {
        for (k, c) in image_clusters.iter().enumerate() {
            if let Some(a) = c.annotators.iter().find(|a| !subset.contains(a.as_str())) {
                return Err(Error::InvalidInput(format!(
                    "cluster on {image_id:?} includes annotator {a:?} outside the expert subset"
                )));
            }
            if let Some((f, y)) = extractor.cluster_sample(c) {
                ids.push(format!("{image_id}#{k}"));
                features.push(f);
                labels.push(y);
                votes.push(c.votes as u32);
            }
        }
    }
    for s in extractor.extra_samples(clusters, expert_subset) {
        ids.push(s.id);
        features.push(s.features);
        labels.push(s.label);
        votes.push(s.votes);
    }
    VoteWeightedBatch::new(ids, features, labels, votes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetSpec {
    pub name: String,
    pub experts: Vec<String>,
}

/// Each expert alone, then the first `k` experts combined for
/// `k = 2..=n`: `2n - 1` training sets.
pub fn training_subsets(experts: &[String]) -> Vec<TrainingSetSpec> {
    let singles = experts.iter().map(|e| TrainingSetSpec {
        name: format!("single:{e}"),
        experts: vec![e.clone()],
    });
    let combined = (2..=experts.len()).map(|k| TrainingSetSpec {
        name: format!("combined:{k}"),
        experts: experts[..k].to_vec(),
    });
    singles.chain(combined).collect()
}

/// Reads `sample_id,label,votes,f1..fd`.
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<VoteWeightedBatch> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let expected = ["sample_id", "label", "votes"];
    if headers.len() < 4 || headers.iter().take(3).ne(expected) {
        return Err(Error::Schema {
            pointer: "line 1".into(),
            message: "header must be sample_id,label,votes,f1..fd".into(),
        });
    }
    let mut ids = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut votes = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let bad = |what: &str| Error::Schema {
            pointer: format!("line {line}"),
            message: format!("invalid {what}"),
        };
        ids.push(field(0).to_string());
        labels.push(field(1).trim().parse::<u8>().map_err(|_| bad("label"))?);
        votes.push(field(2).trim().parse::<u32>().map_err(|_| bad("votes"))?);
        let f: Vec<f64> = (3..record.len())
            .map(|i| field(i).trim().parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        features.push(f);
    }
    VoteWeightedBatch::new(ids, features, labels, votes)
}

pub fn write_features_csv(path: impl AsRef<Path>, batch: &VoteWeightedBatch) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "label".into(), "votes".into()];
    header.extend((1..=batch.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for i in 0..batch.len() {
        let mut row = vec![
            batch.ids[i].clone(),
            batch.labels[i].to_string(),
            batch.votes[i].to_string(),
        ];
        row.extend(batch.features[i].iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let model: ClassifierModel = crate::model::from_json_str(&text)?;
    model.check_dim(model.feature_dim)?;
    Ok(model)
}

/// Per-repetition rows followed by a `mean_of_best` row.
pub fn write_metrics_csv(path: impl AsRef<Path>, outcome: &TrainOutcome) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["repetition", "best_epoch", "best_accuracy", "final_loss"])?;
    for r in &outcome.repetitions {
        w.write_record([
            r.repetition.to_string(),
            r.best_epoch.to_string(),
            r.best_accuracy.to_string(),
            r.final_loss.to_string(),
        ])?;
    }
    w.write_record(["mean_of_best", "", &outcome.mean_best.to_string(), ""])?;
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
