//! A synthetic mitotic-figure world with latent features.
//!
//! Real studies carry image pixels; here each object has a small feature
//! vector instead. True figures and lookalikes come from two Gaussian
//! classes and a detector score is a noisy logistic of the first feature.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::{ExtraSample, FeatureExtractor, LabeledSet};
use crate::error::{Error, Result};
use crate::flaws::CandidateNegative;
use crate::geometry::{iou, ConsensusCluster, DEFAULT_IOU_THRESHOLD};
use crate::model::{
    AnnotationRecord, BoundingBox, ImageRecord, ModeKind, Provenance, StudyDataset, TaskKind,
    GROUND_TRUTH,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub images: usize,
    pub slides: usize,
    /// Total true mitotic figures.
    pub figures: usize,
    /// Total lookalikes (candidate negatives).
    pub lookalikes: usize,
    /// Image side in pixels; images are square.
    pub image_size: f64,
    /// Object box side in pixels.
    pub box_size: f64,
    /// Class means sit at `(+separation, 0)` and `(-separation, 0)`.
    pub separation: f64,
    /// Slope of the detector score in the first feature.
    pub score_slope: f64,
    pub score_noise: f64,
    pub validation_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            images: 40,
            slides: 8,
            figures: 745,
            lookalikes: 600,
            image_size: 512.0,
            box_size: 50.0,
            separation: 1.0,
            score_slope: 1.5,
            score_noise: 0.3,
            validation_size: 2000,
        }
    }
}

const CELL: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dataset: StudyDataset,
    pub scores: BTreeMap<String, f64>,
    pub negatives: Vec<CandidateNegative>,
    /// Features per ground-truth id.
    pub figure_features: HashMap<String, Vec<f64>>,
    /// Features per index into `negatives`.
    pub negative_features: Vec<Vec<f64>>,
    pub validation: LabeledSet,
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<World> {
        if config.images == 0 || config.slides == 0 || config.slides > config.images {
            return Err(Error::InvalidInput("need 1 <= slides <= images".into()));
        }
        if !(config.box_size > 0.0 && config.box_size < CELL) {
            return Err(Error::Range(format!("box_size must be in (0, {CELL})")));
        }
        let per_row = (config.image_size / CELL).floor() as usize;
        let capacity = per_row * per_row;
        if config.figures + config.lookalikes > capacity * config.images {
            return Err(Error::InvalidInput(format!(
                "{} objects do not fit on {} images of {capacity} cells",
                config.figures + config.lookalikes,
                config.images
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |rng: &mut ChaCha8Rng, positive: bool| sample_features(config, positive, rng);

        let images: Vec<ImageRecord> = (0..config.images)
            .map(|i| ImageRecord {
                image_id: format!("img{:03}", i + 1),
                width: config.image_size,
                height: config.image_size,
                source_slide_id: format!("slide{:02}", i % config.slides + 1),
                durations: BTreeMap::new(),
                mode: None,
            })
            .collect();

        // one grid cell per object, spread round-robin then shuffled
        let mut cells: Vec<Vec<usize>> = (0..config.images)
            .map(|_| {
                let mut c: Vec<usize> = (0..capacity).collect();
                c.shuffle(&mut rng);
                c
            })
            .collect();
        let mut slots: Vec<usize> = (0..config.figures + config.lookalikes)
            .map(|k| k % config.images)
            .collect();
        slots.shuffle(&mut rng);

        let slack = CELL - config.box_size;
        let mut place = |rng: &mut ChaCha8Rng, image: usize| {
            let cell = cells[image].pop().expect("capacity checked");
            let (cx, cy) = ((cell % per_row) as f64 * CELL, (cell / per_row) as f64 * CELL);
            let x = cx + rng.random::<f64>() * slack;
            let y = cy + rng.random::<f64>() * slack;
            BoundingBox {
                x_min: x,
                y_min: y,
                x_max: x + config.box_size,
                y_max: y + config.box_size,
            }
        };

        let mut annotations = Vec::with_capacity(config.figures);
        let mut scores = BTreeMap::new();
        let mut figure_features = HashMap::new();
        for (k, &image) in slots[..config.figures].iter().enumerate() {
            let id = format!("gt{:05}", k + 1);
            let bbox = place(&mut rng, image);
            let f = sample(&mut rng, true);
            scores.insert(id.clone(), score(config, &f, &mut rng));
            figure_features.insert(id.clone(), f);
            annotations.push(AnnotationRecord {
                id,
                image_id: images[image].image_id.clone(),
                annotator_id: GROUND_TRUTH.into(),
                mode: ModeKind::Unaided,
                bbox,
                label: "mitotic_figure".into(),
                provenance: Provenance::GroundTruth,
            });
        }
        let mut negatives = Vec::with_capacity(config.lookalikes);
        let mut negative_features = Vec::with_capacity(config.lookalikes);
        for &image in &slots[config.figures..] {
            let bbox = place(&mut rng, image);
            let f = sample(&mut rng, false);
            negatives.push(CandidateNegative {
                image_id: images[image].image_id.clone(),
                bbox,
                score: score(config, &f, &mut rng),
            });
            negative_features.push(f);
        }

        let mut validation = LabeledSet::default();
        for _ in 0..config.validation_size {
            let positive = rng.random_bool(0.5);
            validation.features.push(sample(&mut rng, positive));
            validation.labels.push(u8::from(positive));
        }

        let dataset = StudyDataset::new(TaskKind::Mitosis, images, annotations)?;
        Ok(World {
            dataset,
            scores,
            negatives,
            figure_features,
            negative_features,
            validation,
        })
    }

    /// Features for consensus clusters of this world.
    pub fn extractor(&self) -> WorldExtractor<'_> {
        WorldExtractor::new(self)
    }
}

fn sample_features(config: &WorldConfig, positive: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let shift = if positive { config.separation } else { -config.separation };
    vec![n.sample(rng) + shift, n.sample(rng)]
}

fn score(config: &WorldConfig, f: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let noise = if config.score_noise > 0.0 {
        Normal::new(0.0, config.score_noise).expect("noise validated").sample(rng)
    } else {
        0.0
    };
    1.0 / (1.0 + (-(config.score_slope * f[0] + noise)).exp())
}

/// Maps a cluster to the world object under it.
///
/// A cluster over a true figure is a positive sample; one over a
/// lookalike is a positive sample too (the experts called it a figure)
/// carrying the lookalike's features. Lookalikes nobody in the subset
/// marked become negatives with full votes.
pub struct WorldExtractor<'a> {
    world: &'a World,
    objects: HashMap<&'a str, Vec<(BoundingBox, Source)>>,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Figure(usize),
    Lookalike(usize),
}

impl<'a> WorldExtractor<'a> {
    fn new(world: &'a World) -> Self {
        let mut objects: HashMap<&str, Vec<(BoundingBox, Source)>> = HashMap::new();
        for (k, a) in world.dataset.annotations.iter().enumerate() {
            if a.provenance == Provenance::GroundTruth {
                objects.entry(a.image_id.as_str()).or_default().push((a.bbox, Source::Figure(k)));
            }
        }
        for (k, n) in world.negatives.iter().enumerate() {
            objects.entry(n.image_id.as_str()).or_default().push((n.bbox, Source::Lookalike(k)));
        }
        Self { world, objects }
    }

    fn locate(&self, image_id: &str, bbox: &BoundingBox) -> Option<Source> {
        let mut best: Option<(f64, Source)> = None;
        for (b, s) in self.objects.get(image_id)? {
            let o = iou(b, bbox);
            if o >= DEFAULT_IOU_THRESHOLD && best.map_or(true, |(bo, _)| o > bo) {
                best = Some((o, *s));
            }
        }
        best.map(|(_, s)| s)
    }

    fn features(&self, s: Source) -> Vec<f64> {
        match s {
            Source::Figure(k) => self.world.figure_features[&self.world.dataset.annotations[k].id].clone(),
            Source::Lookalike(k) => self.world.negative_features[k].clone(),
        }
    }
}

impl FeatureExtractor for WorldExtractor<'_> {
    fn cluster_sample(&self, cluster: &ConsensusCluster) -> Option<(Vec<f64>, u8)> {
        let s = self.locate(&cluster.image_id, &cluster.representative_box)?;
        Some((self.features(s), 1))
    }

    fn extra_samples(&self, clusters: &[(String, Vec<ConsensusCluster>)], expert_subset: &[String]) -> Vec<ExtraSample> {
        let mut marked = vec![false; self.world.negatives.len()];
        for (_, cs) in clusters {
            for c in cs {
                if let Some(Source::Lookalike(k)) = self.locate(&c.image_id, &c.representative_box) {
                    marked[k] = true;
                }
            }
        }
        self.world
            .negatives
            .iter()
            .enumerate()
            .filter(|(k, _)| !marked[*k])
            .map(|(k, _)| ExtraSample {
                id: format!("negative:{k:05}"),
                features: self.world.negative_features[k].clone(),
                label: 0,
                votes: expert_subset.len() as u32,
            })
            .collect()
    }
}
