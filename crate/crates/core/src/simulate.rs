//! Synthetic annotator behaviour.
//!
//! An [`AnnotatorProfile`] describes how likely an annotator is to find an
//! object, how they confuse labels and how often they wave a proposal
//! through without looking at it. [`simulate_annotator`] turns a profile
//! into annotation records for one mode.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flaws::CandidateNegative;
use crate::geometry::{match_sets, DEFAULT_IOU_THRESHOLD};
use crate::model::{
    AnnotationRecord, BoundingBox, ModeKind, Provenance, StudyDataset, TaskKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorProfile {
    /// Probability of noticing an object, indexed by difficulty 0 (easy)
    /// to 2 (hard).
    pub detection_prob: [f64; 3],
    /// Expected number of spurious objects per image.
    pub false_positive_rate: f64,
    /// Row-stochastic matrix over the task's label space: row = true label,
    /// column = label given.
    pub class_confusion: Vec<Vec<f64>>,
    /// Probability of leaving a presented proposal unexamined.
    pub acceptance_bias: f64,
    /// Standard deviation of the box translation, in pixels.
    pub localization_jitter: f64,
    pub seconds_per_object: f64,
    pub seconds_per_image_base: f64,
}

impl AnnotatorProfile {
    /// Finds everything, never confuses labels, never adds anything and
    /// examines every proposal.
    pub fn perfect(task: TaskKind) -> Self {
        let k = task.label_space().len();
        Self {
            detection_prob: [1.0; 3],
            false_positive_rate: 0.0,
            class_confusion: identity(k),
            acceptance_bias: 0.0,
            localization_jitter: 0.0,
            seconds_per_object: 1.0,
            seconds_per_image_base: 10.0,
        }
    }

    pub fn validate(&self, task: TaskKind) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Range(format!("{name} = {p} is not in [0, 1]")))
            }
        };
        for (i, p) in self.detection_prob.iter().enumerate() {
            prob(&format!("detection_prob[{i}]"), *p)?;
        }
        prob("acceptance_bias", self.acceptance_bias)?;
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::Range("false_positive_rate must be finite and >= 0".into()));
        }
        if !(self.localization_jitter >= 0.0 && self.localization_jitter.is_finite()) {
            return Err(Error::Range("localization_jitter must be finite and >= 0".into()));
        }
        if !(self.seconds_per_object > 0.0 && self.seconds_per_image_base > 0.0) {
            return Err(Error::Range("timing parameters must be positive".into()));
        }
        let k = task.label_space().len();
        if self.class_confusion.len() != k {
            return Err(Error::InvalidInput(format!(
                "class_confusion has {} rows, the {task} label space has {k}",
                self.class_confusion.len()
            )));
        }
        for (r, row) in self.class_confusion.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidInput(format!(
                    "class_confusion row {r} has {} entries, expected {k}",
                    row.len()
                )));
            }
            for p in row {
                prob(&format!("class_confusion[{r}]"), *p)?;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "class_confusion row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// A deterministic panel of `count` plausible, differing profiles.
    pub fn panel(task: TaskKind, count: usize) -> Vec<(String, AnnotatorProfile)> {
        let k = task.label_space().len();
        (0..count)
            .map(|e| {
                let f = e as f64;
                let accuracy = 0.92 - 0.015 * (e % 5) as f64;
                let confusion = (0..k)
                    .map(|r| {
                        (0..k)
                            .map(|c| {
                                if k == 1 {
                                    1.0
                                } else if r == c {
                                    accuracy
                                } else {
                                    (1.0 - accuracy) / (k - 1) as f64
                                }
                            })
                            .collect()
                    })
                    .collect();
                let profile = AnnotatorProfile {
                    detection_prob: [
                        0.97 - 0.01 * (e % 3) as f64,
                        0.85 - 0.02 * (e % 4) as f64,
                        0.65 - 0.03 * (e % 5) as f64,
                    ],
                    false_positive_rate: 0.3 + 0.1 * (e % 4) as f64,
                    class_confusion: confusion,
                    acceptance_bias: 0.25 + 0.05 * (e % 6) as f64,
                    localization_jitter: 1.0 + 0.5 * (e % 3) as f64,
                    seconds_per_object: 2.0 + 0.25 * f,
                    seconds_per_image_base: 20.0 + 2.0 * f,
                };
                (format!("expert{:02}", e + 1), profile)
            })
            .collect()
    }
}

fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|r| (0..k).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Per-object hints for the simulator.
#[derive(Debug, Clone, Default)]
pub struct SimulationContext {
    /// Difficulty bucket per annotation id (ground truth or proposal).
    /// Missing ids are treated as easy.
    pub difficulty: HashMap<String, u8>,
    /// Lookalike regions where spurious annotations land. Images without
    /// any get spurious boxes at random positions.
    pub lookalikes: Vec<CandidateNegative>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAnnotations {
    pub annotations: Vec<AnnotationRecord>,
    /// Seconds per image id.
    pub durations: BTreeMap<String, f64>,
    /// Proposals left unexamined (Aided mode only).
    pub untouched: usize,
    /// Proposals re-examined (Aided mode only).
    pub examined: usize,
}

/// RNG stream for one annotator, independent of every other annotator.
pub fn annotator_rng(seed: u64, annotator_id: &str, mode: ModeKind) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(annotator_id.as_bytes());
    h.update([0]);
    h.update(mode.as_str().as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Simulates one annotator over every image of `mode`.
///
/// Unaided, ground-truth objects are annotated from scratch. Aided, the
/// annotator starts from the proposals: each is left alone with
/// probability `acceptance_bias`, otherwise checked against ground truth
/// and fixed or deleted if the annotator notices the problem. Ground-truth
/// objects missing from the proposals are added with probability
/// `(1 - acceptance_bias) * detection_prob`.
pub fn simulate_annotator(
    ds: &StudyDataset,
    annotator_id: &str,
    profile: &AnnotatorProfile,
    mode: ModeKind,
    context: &SimulationContext,
    seed: u64,
) -> Result<SimulatedAnnotations> {
    profile.validate(ds.task)?;
    if crate::model::is_reserved(annotator_id) {
        return Err(Error::InvalidInput(format!(
            "{annotator_id:?} is a reserved annotator id"
        )));
    }
    let mut rng = annotator_rng(seed, annotator_id, mode);
    let mut lookalikes: HashMap<&str, Vec<&CandidateNegative>> = HashMap::new();
    for n in &context.lookalikes {
        lookalikes.entry(n.image_id.as_str()).or_default().push(n);
    }
    let mut images: Vec<_> = ds.images_in_mode(mode).collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if mode == ModeKind::Aided && ds.proposals().next().is_none() {
        let first = images.first().map(|i| i.image_id.clone()).unwrap_or_default();
        return Err(Error::MissingProposals(first));
    }

    let mut sim = Simulator {
        task: ds.task,
        profile,
        context,
        annotator_id,
        mode,
        per_image: HashMap::new(),
        out: SimulatedAnnotations::default(),
    };
    for image in images {
        let mut gt: Vec<&AnnotationRecord> = ds.ground_truth().filter(|a| a.image_id == image.image_id).collect();
        gt.sort_by(|a, b| a.id.cmp(&b.id));
        let here = (image.image_id.as_str(), image.width, image.height);
        let worked = match mode {
            ModeKind::Unaided => sim.unaided(here, &gt, &mut rng),
            ModeKind::Aided => {
                let mut proposals: Vec<&AnnotationRecord> =
                    ds.proposals().filter(|a| a.image_id == image.image_id).collect();
                proposals.sort_by(|a, b| a.id.cmp(&b.id));
                sim.aided(here, &gt, &proposals, &mut rng)?
            }
        };
        let spurious = if profile.false_positive_rate > 0.0 {
            Poisson::new(profile.false_positive_rate)
                .map_err(|e| Error::Range(e.to_string()))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        let spots = lookalikes.get(image.image_id.as_str());
        for _ in 0..spurious {
            let (bbox, label) = match spots {
                Some(s) if !s.is_empty() => {
                    let pick = pick_weighted(s, &mut rng);
                    (pick.bbox, random_label(ds.task, &mut rng))
                }
                _ => (random_box(image.width, image.height, &gt, &mut rng), random_label(ds.task, &mut rng)),
            };
            let bbox = sim.jitter(bbox, image.width, image.height, &mut rng);
            sim.emit(&image.image_id, bbox, label);
        }
        let objects = worked + spurious;
        sim.out.durations.insert(
            image.image_id.clone(),
            profile.seconds_per_image_base + profile.seconds_per_object * objects as f64,
        );
    }
    Ok(sim.out)
}

struct Simulator<'a> {
    task: TaskKind,
    profile: &'a AnnotatorProfile,
    context: &'a SimulationContext,
    annotator_id: &'a str,
    mode: ModeKind,
    per_image: HashMap<String, usize>,
    out: SimulatedAnnotations,
}

impl Simulator<'_> {
    fn detect_p(&self, id: &str) -> f64 {
        let d = self.context.difficulty.get(id).copied().unwrap_or(0).min(2);
        self.profile.detection_prob[d as usize]
    }

    fn emit(&mut self, image_id: &str, bbox: BoundingBox, label: String) {
        let slot = self.per_image.entry(image_id.to_string()).or_insert(0);
        let k = *slot;
        *slot += 1;
        self.out.annotations.push(AnnotationRecord {
            id: format!("{}/{}/{}/{k}", self.annotator_id, self.mode, image_id),
            image_id: image_id.to_string(),
            annotator_id: self.annotator_id.to_string(),
            mode: self.mode,
            bbox,
            label,
            provenance: Provenance::Human,
        });
    }

    fn relabel(&self, label: &str, rng: &mut ChaCha8Rng) -> String {
        let space = self.task.label_space();
        let Some(row) = self.task.label_index(label) else {
            return label.to_string();
        };
        let weights = &self.profile.class_confusion[row];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return space[c].to_string();
            }
        }
        // rounding left u above the last partial sum
        let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(row);
        space[last].to_string()
    }

    fn jitter(&self, bbox: BoundingBox, width: f64, height: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
        let s = self.profile.localization_jitter;
        if s == 0.0 {
            return bbox;
        }
        let normal = Normal::new(0.0, s).expect("jitter validated");
        let dx: f64 = normal.sample(rng);
        let dy: f64 = normal.sample(rng);
        // keep the box inside the image
        let dx = dx.clamp(-bbox.x_min, width - bbox.x_max);
        let dy = dy.clamp(-bbox.y_min, height - bbox.y_max);
        bbox.translated(dx, dy)
    }

    fn unaided(&mut self, image: (&str, f64, f64), gt: &[&AnnotationRecord], rng: &mut ChaCha8Rng) -> usize {
        let (image_id, w, h) = image;
        let mut found = 0;
        for g in gt {
            // draw every variate so one object's outcome never shifts the next
            let hit = rng.random::<f64>() < self.detect_p(&g.id);
            let label = self.relabel(&g.label, rng);
            let bbox = self.jitter(g.bbox, w, h, rng);
            if hit {
                self.emit(image_id, bbox, label);
                found += 1;
            }
        }
        found
    }

    fn aided(
        &mut self,
        image: (&str, f64, f64),
        gt: &[&AnnotationRecord],
        proposals: &[&AnnotationRecord],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let (image_id, w, h) = image;
        let matching = match_sets(proposals, gt, DEFAULT_IOU_THRESHOLD)?;
        let by_id: HashMap<&str, &AnnotationRecord> = gt.iter().map(|g| (g.id.as_str(), *g)).collect();
        let bias = self.profile.acceptance_bias;
        let mut worked = 0;
        for p in proposals {
            let untouched = rng.random::<f64>() < bias;
            let notice = rng.random::<f64>();
            if untouched {
                self.out.untouched += 1;
                self.emit(image_id, p.bbox, p.label.clone());
                continue;
            }
            self.out.examined += 1;
            worked += 1;
            match matching.reference_for(&p.id) {
                Some(pair) => {
                    let g = by_id[pair.reference_id.as_str()];
                    let label = self.relabel(&g.label, rng);
                    if notice < self.detect_p(&g.id) {
                        self.emit(image_id, p.bbox, label);
                    } else {
                        self.emit(image_id, p.bbox, p.label.clone());
                    }
                }
                None => {
                    // no object under the proposal: delete it if noticed
                    if notice >= self.detect_p(&p.id) {
                        self.emit(image_id, p.bbox, p.label.clone());
                    }
                }
            }
        }
        for g_id in &matching.unmatched_references {
            let g = by_id[g_id.as_str()];
            let hit = rng.random::<f64>() < (1.0 - bias) * self.detect_p(&g.id);
            let label = self.relabel(&g.label, rng);
            let bbox = self.jitter(g.bbox, w, h, rng);
            if hit {
                self.emit(image_id, bbox, label);
                worked += 1;
            }
        }
        Ok(worked)
    }
}

/// Picks a lookalike with probability proportional to its score, so
/// convincing lookalikes attract more spurious annotations.
fn pick_weighted<'a>(spots: &[&'a CandidateNegative], rng: &mut ChaCha8Rng) -> &'a CandidateNegative {
    let total: f64 = spots.iter().map(|s| s.score.max(0.0)).sum();
    if total <= 0.0 {
        return spots[rng.random_range(0..spots.len())];
    }
    let mut u = rng.random::<f64>() * total;
    for s in spots {
        u -= s.score.max(0.0);
        if u < 0.0 {
            return s;
        }
    }
    spots[spots.len() - 1]
}

fn random_label(task: TaskKind, rng: &mut ChaCha8Rng) -> String {
    let space = task.label_space();
    space[rng.random_range(0..space.len())].to_string()
}

/// A box the size of a typical object on the image, anywhere inside it.
fn random_box(width: f64, height: f64, gt: &[&AnnotationRecord], rng: &mut ChaCha8Rng) -> BoundingBox {
    let side = if gt.is_empty() {
        (2.0 * crate::model::DEFAULT_POINT_RADIUS).min(width.min(height))
    } else {
        let mut sides: Vec<f64> = gt.iter().map(|g| g.bbox.width().max(g.bbox.height())).collect();
        sides.sort_by(f64::total_cmp);
        sides[sides.len() / 2].min(width.min(height))
    };
    let x = rng.random::<f64>() * (width - side);
    let y = rng.random::<f64>() * (height - side);
    BoundingBox {
        x_min: x,
        y_min: y,
        x_max: x + side,
        y_max: y + side,
    }
}

/// Appends simulated annotations and durations to a copy of `ds`.
pub fn merge_simulation(ds: &StudyDataset, annotator_id: &str, sim: &SimulatedAnnotations) -> Result<StudyDataset> {
    let mut out = ds.clone();
    for image in &mut out.images {
        if let Some(d) = sim.durations.get(&image.image_id) {
            // durations are keyed by annotator only, so one image cannot
            // record the same annotator twice
            if image.durations.insert(annotator_id.to_string(), *d).is_some() {
                return Err(Error::DatasetMismatch(format!(
                    "{annotator_id:?} already has a duration on {:?}; give each mode its own image records",
                    image.image_id
                )));
            }
        }
    }
    out.annotations.extend(sim.annotations.iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageRecord;

    fn dataset() -> StudyDataset {
        let image = |id: &str| ImageRecord {
            image_id: id.into(),
            width: 200.0,
            height: 200.0,
            source_slide_id: "slide".into(),
            durations: BTreeMap::new(),
            mode: None,
        };
        let gt = |id: &str, img: &str, x: f64, label: &str| AnnotationRecord {
            id: id.into(),
            image_id: img.into(),
            annotator_id: crate::model::GROUND_TRUTH.into(),
            mode: ModeKind::Unaided,
            bbox: BoundingBox::new(x, 10.0, x + 20.0, 30.0).unwrap(),
            label: label.into(),
            provenance: Provenance::GroundTruth,
        };
        StudyDataset {
            task: TaskKind::Asthma,
            images: vec![image("a"), image("b")],
            annotations: vec![
                gt("g1", "a", 10.0, "eosinophil"),
                gt("g2", "a", 50.0, "neutrophil"),
                gt("g3", "b", 90.0, "macrophage"),
            ],
        }
    }

    #[test]
    fn perfect_unaided_reproduces_ground_truth() {
        let ds = dataset();
        let p = AnnotatorProfile::perfect(ds.task);
        let sim = simulate_annotator(&ds, "e1", &p, ModeKind::Unaided, &SimulationContext::default(), 3).unwrap();
        let got: Vec<_> = sim.annotations.iter().map(|a| (&a.image_id, a.bbox, &a.label)).collect();
        let want: Vec<_> = ds.ground_truth().map(|a| (&a.image_id, a.bbox, &a.label)).collect();
        assert_eq!(got, want);
        assert_eq!(sim.durations["a"], 12.0);
    }

    #[test]
    fn aided_requires_proposals() {
        let ds = dataset();
        let p = AnnotatorProfile::perfect(ds.task);
        let err = simulate_annotator(&ds, "e1", &p, ModeKind::Aided, &SimulationContext::default(), 3);
        assert!(matches!(err, Err(Error::MissingProposals(_))));
    }

    #[test]
    fn confusion_rows_must_sum_to_one() {
        let mut p = AnnotatorProfile::perfect(TaskKind::Asthma);
        p.class_confusion[0][1] = 0.1;
        assert!(p.validate(TaskKind::Asthma).is_err());
        p.class_confusion[0][0] = 0.9;
        assert!(p.validate(TaskKind::Asthma).is_ok());
        p.detection_prob[2] = 1.2;
        assert!(p.validate(TaskKind::Asthma).is_err());
    }

    #[test]
    fn panel_profiles_are_valid() {
        for task in [TaskKind::Asthma, TaskKind::Eiph, TaskKind::Mitosis] {
            for (_, p) in AnnotatorProfile::panel(task, 10) {
                p.validate(task).unwrap();
            }
        }
    }

    #[test]
    fn streams_depend_on_annotator_and_mode() {
        let a = annotator_rng(1, "e1", ModeKind::Aided).random::<u64>();
        let b = annotator_rng(1, "e2", ModeKind::Aided).random::<u64>();
        let c = annotator_rng(1, "e1", ModeKind::Unaided).random::<u64>();
        let again = annotator_rng(1, "e1", ModeKind::Aided).random::<u64>();
        assert_eq!(a, again);
        assert!(a != b && a != c);
    }
}
