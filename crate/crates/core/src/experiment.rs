//! Desk-scale check that vote weighting helps on noisy multi-expert data.
//!
//! Two Gaussian classes sit at `x1 = +-separation`. Ten simulated experts
//! each see an object with probability `detection` and call it positive
//! when `x1` exceeds their personal threshold. On top of that, lone
//! experts mark spurious objects as positive; those clusters carry a
//! single vote. Every annotation goes through the regular consensus
//! clustering, so vote counts and majority labels come from
//! [`cluster_dataset`].

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::{build_training_set, train, FeatureExtractor, LabeledSet, TrainConfig};
use crate::error::Result;
use crate::geometry::{cluster_dataset, ConsensusCluster};
use crate::loss::LossKind;
use crate::model::{
    AnnotationRecord, BoundingBox, ImageRecord, ModeKind, Provenance, StudyDataset, TaskKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotesBenefitConfig {
    pub objects: usize,
    pub experts: usize,
    pub separation: f64,
    pub detection: f64,
    /// Expert thresholds are evenly spaced over `[-spread, spread]`.
    pub threshold_spread: f64,
    /// Share of spurious single-vote samples in the combined set.
    pub noise_fraction: f64,
    pub spurious_sd: f64,
    pub spurious_shift: [f64; 2],
    pub validation_size: usize,
    pub train: TrainConfig,
}

impl Default for VotesBenefitConfig {
    fn default() -> Self {
        Self {
            objects: 300,
            experts: 10,
            separation: 1.0,
            detection: 0.9,
            threshold_spread: 2.0,
            noise_fraction: 0.2,
            spurious_sd: 0.5,
            spurious_shift: [-1.0, 2.5],
            validation_size: 2000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotesBenefit {
    /// Mean best validation accuracy, all experts, plain cross-entropy.
    pub plain: f64,
    /// Same training set with vote weighting.
    pub votes: f64,
    /// Mean over experts of single-expert accuracy.
    pub single: f64,
    pub single_per_expert: Vec<f64>,
}

const LABELS: [&str; 2] = ["0", "1"];
const PER_IMAGE: usize = 25;
const CELL: f64 = 100.0;
const SIDE: f64 = 40.0;

struct Scenario {
    dataset: StudyDataset,
    features: Vec<Vec<f64>>,
    experts: Vec<String>,
    validation: LabeledSet,
}

fn slot_box(slot: usize) -> (String, BoundingBox) {
    let image = slot / PER_IMAGE;
    let cell = slot % PER_IMAGE;
    let x = (cell % 5) as f64 * CELL + 30.0;
    let y = (cell / 5) as f64 * CELL + 30.0;
    (
        format!("img{image:04}"),
        BoundingBox {
            x_min: x,
            y_min: y,
            x_max: x + SIDE,
            y_max: y + SIDE,
        },
    )
}

fn build(config: &VotesBenefitConfig, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = config.objects;
    let e = config.experts;
    let experts: Vec<String> = (0..e).map(|k| format!("expert{:02}", k + 1)).collect();

    let mut features = Vec::new();
    for _ in 0..n {
        let c = rng.random_bool(0.5);
        let shift = if c { config.separation } else { -config.separation };
        features.push(vec![unit.sample(&mut rng) + shift, unit.sample(&mut rng)]);
    }
    let mut thresholds: Vec<f64> = (0..e)
        .map(|k| {
            if e == 1 {
                0.0
            } else {
                -config.threshold_spread + 2.0 * config.threshold_spread * k as f64 / (e - 1) as f64
            }
        })
        .collect();
    thresholds.shuffle(&mut rng);

    let mut annotations = Vec::new();
    let annotate = |slot: usize, expert: usize, label: &str, annotations: &mut Vec<AnnotationRecord>| {
        let (image_id, bbox) = slot_box(slot);
        annotations.push(AnnotationRecord {
            id: format!("a{slot:05}-{expert:02}"),
            image_id,
            annotator_id: experts[expert].clone(),
            mode: ModeKind::Unaided,
            bbox,
            label: label.to_string(),
            provenance: Provenance::Human,
        });
    };
    for (slot, f) in features.iter().enumerate() {
        for (k, b) in thresholds.iter().enumerate() {
            if rng.random_bool(config.detection) {
                annotate(slot, k, LABELS[usize::from(f[0] > *b)], &mut annotations);
            }
        }
    }
    let spurious = (config.noise_fraction / (1.0 - config.noise_fraction) * n as f64).round() as usize;
    let noise = Normal::new(0.0, config.spurious_sd).expect("spurious_sd > 0");
    for s in 0..spurious {
        let slot = n + s;
        features.push(vec![
            noise.sample(&mut rng) + config.spurious_shift[0],
            noise.sample(&mut rng) + config.spurious_shift[1],
        ]);
        let owner = rng.random_range(0..e);
        annotate(slot, owner, "1", &mut annotations);
    }

    let images = (0..(n + spurious).div_ceil(PER_IMAGE))
        .map(|i| ImageRecord {
            image_id: format!("img{i:04}"),
            width: 5.0 * CELL,
            height: 5.0 * CELL,
            source_slide_id: "synthetic".into(),
            durations: BTreeMap::new(),
            mode: None,
        })
        .collect();

    let mut validation = LabeledSet::default();
    for _ in 0..config.validation_size {
        let c = rng.random_bool(0.5);
        let shift = if c { config.separation } else { -config.separation };
        validation.features.push(vec![unit.sample(&mut rng) + shift, unit.sample(&mut rng)]);
        validation.labels.push(u8::from(c));
    }

    Ok(Scenario {
        dataset: StudyDataset::new(TaskKind::Eiph, images, annotations)?,
        features,
        experts,
        validation,
    })
}

struct SlotFeatures<'a> {
    by_box: HashMap<(String, u64, u64), &'a [f64]>,
}

impl<'a> SlotFeatures<'a> {
    fn new(features: &'a [Vec<f64>]) -> Self {
        let by_box = features
            .iter()
            .enumerate()
            .map(|(slot, f)| {
                let (image, b) = slot_box(slot);
                ((image, b.x_min.to_bits(), b.y_min.to_bits()), f.as_slice())
            })
            .collect();
        Self { by_box }
    }
}

impl FeatureExtractor for SlotFeatures<'_> {
    fn cluster_sample(&self, cluster: &ConsensusCluster) -> Option<(Vec<f64>, u8)> {
        let b = cluster.representative_box;
        let f = self
            .by_box
            .get(&(cluster.image_id.clone(), b.x_min.to_bits(), b.y_min.to_bits()))?;
        Some((f.to_vec(), u8::from(cluster.consensus_label == "1")))
    }
}

/// Trains on all experts with and without vote weighting and on each
/// expert alone.
pub fn votes_benefit(config: &VotesBenefitConfig, seed: u64) -> Result<VotesBenefit> {
    let scenario = build(config, seed)?;
    let extractor = SlotFeatures::new(&scenario.features);
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let run = |experts: &[String], kind: LossKind| -> Result<f64> {
        let clusters = cluster_dataset(&scenario.dataset, experts, ModeKind::Unaided, 0.5)?;
        let batch = build_training_set(&clusters, experts, &extractor)?;
        Ok(train(&batch, &scenario.validation, &train_config, kind)?.mean_best)
    };
    let plain = run(&scenario.experts, LossKind::PlainBce)?;
    let votes = run(&scenario.experts, LossKind::Votes)?;
    let single_per_expert = scenario
        .experts
        .iter()
        .map(|e| run(std::slice::from_ref(e), LossKind::PlainBce))
        .collect::<Result<Vec<_>>>()?;
    let single = single_per_expert.iter().sum::<f64>() / single_per_expert.len() as f64;
    Ok(VotesBenefit {
        plain,
        votes,
        single,
        single_per_expert,
    })
}
