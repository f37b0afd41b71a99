//! Seeded injection of systematic label flaws into ground truth.
//!
//! Every injector first draws a [`FlawPlan`] and then derives the proposal
//! annotations from it with [`replay`], so a serialized plan applied to the
//! same ground truth always reproduces the proposals without any RNG.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, match_sets};
use crate::model::{
    AnnotationRecord, BoundingBox, ImageRecord, ModeKind, Provenance, StudyDataset, TaskKind,
    DEFAULT_POINT_RADIUS, GROUND_TRUTH, PROPOSAL,
};

/// Model-score cutoffs separating the three difficulty buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyThresholds {
    /// `(p0_max, p1_max)` for fake objects.
    pub fake_cuts: (f64, f64),
    /// `(p0_max, p1_max)` for removed objects.
    pub removed_cuts: (f64, f64),
}

impl Default for DifficultyThresholds {
    fn default() -> Self {
        Self {
            fake_cuts: (0.2, 0.4),
            removed_cuts: (0.33, 0.66),
        }
    }
}

impl DifficultyThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, (p0, p1)) in [("fake_cuts", self.fake_cuts), ("removed_cuts", self.removed_cuts)] {
            if !(0.0 < p0 && p0 < p1 && p1 < 1.0) {
                return Err(Error::Range(format!(
                    "{name} ({p0}, {p1}) must satisfy 0 < p0 < p1 < 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketScheme {
    Fake,
    Removed,
}

/// Difficulty bucket of a model score: 0 up to and including the first
/// cut, 1 up to and including the second, 2 above.
pub fn bucket(score: f64, cuts: &DifficultyThresholds, which: BucketScheme) -> u8 {
    let (p0, p1) = match which {
        BucketScheme::Fake => cuts.fake_cuts,
        BucketScheme::Removed => cuts.removed_cuts,
    };
    if score <= p0 {
        0
    } else if score <= p1 {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlawKind {
    ClassFlip,
    Deletion,
    GradeIncrement,
    FalseAnnotation,
    DuplicateAnnotation,
    FakeObject,
    RemovedObject,
}

impl FlawKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlawKind::ClassFlip => "class_flip",
            FlawKind::Deletion => "deletion",
            FlawKind::GradeIncrement => "grade_increment",
            FlawKind::FalseAnnotation => "false_annotation",
            FlawKind::DuplicateAnnotation => "duplicate_annotation",
            FlawKind::FakeObject => "fake_object",
            FlawKind::RemovedObject => "removed_object",
        }
    }

    /// Kinds that add an object absent from the ground truth.
    fn is_synthetic(self) -> bool {
        matches!(
            self,
            FlawKind::FalseAnnotation | FlawKind::DuplicateAnnotation | FlawKind::FakeObject
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedFlaw {
    pub kind: FlawKind,
    pub image_id: String,
    /// Ground-truth annotation the flaw acts on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_box: Option<BoundingBox>,
    /// Box of an object added to the proposals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_bucket: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_label: Option<String>,
    /// Grade increment on a cell already at the top grade.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub saturated: bool,
}

impl InjectedFlaw {
    fn on_target(kind: FlawKind, target: &AnnotationRecord) -> Self {
        Self {
            kind,
            image_id: target.image_id.clone(),
            target_id: Some(target.id.clone()),
            target_box: Some(target.bbox),
            synthetic_box: None,
            difficulty_bucket: None,
            score: None,
            original_label: Some(target.label.clone()),
            new_label: None,
            saturated: false,
        }
    }

    fn synthetic(kind: FlawKind, image_id: &str, bbox: BoundingBox, label: &str) -> Self {
        Self {
            kind,
            image_id: image_id.to_string(),
            target_id: None,
            target_box: None,
            synthetic_box: Some(bbox),
            difficulty_bucket: None,
            score: None,
            original_label: None,
            new_label: Some(label.to_string()),
            saturated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlawPlan {
    pub task: TaskKind,
    pub seed: u64,
    pub flaws: Vec<InjectedFlaw>,
}

impl FlawPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    pub fn count(&self, kind: FlawKind) -> usize {
        self.flaws.iter().filter(|f| f.kind == kind).count()
    }
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<FlawPlan> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    crate::model::from_json_str(&text)
}

pub fn proposal_id(target_id: &str) -> String {
    format!("{PROPOSAL}:{target_id}")
}

/// Id of the proposal created by synthetic flaw number `flaw_index`.
pub fn synthetic_id(flaw_index: usize, kind: FlawKind) -> String {
    format!("{PROPOSAL}:{}:{flaw_index:05}", kind.as_str())
}

/// Rebuilds the proposal annotations of `plan` on top of the ground truth.
///
/// Existing proposals in `ground_truth` are discarded. Every ground-truth
/// object gets a proposal unless a deletion removes it; flips and grade
/// increments change the proposal's label; synthetic flaws add objects.
pub fn replay(plan: &FlawPlan, ground_truth: &StudyDataset) -> Result<StudyDataset> {
    if plan.task != ground_truth.task {
        return Err(Error::DatasetMismatch(format!(
            "plan is for {} but dataset is {}",
            plan.task, ground_truth.task
        )));
    }
    let gt: HashMap<&str, &AnnotationRecord> = ground_truth
        .ground_truth()
        .map(|a| (a.id.as_str(), a))
        .collect();

    let mut dropped: HashMap<&str, ()> = HashMap::new();
    let mut relabel: HashMap<&str, &str> = HashMap::new();
    for flaw in &plan.flaws {
        if ground_truth.image(&flaw.image_id).is_none() {
            return Err(Error::DatasetMismatch(format!(
                "flaw references unknown image {:?}",
                flaw.image_id
            )));
        }
        let Some(target) = &flaw.target_id else {
            if flaw.synthetic_box.is_none() {
                return Err(Error::DatasetMismatch(format!(
                    "{} flaw on {:?} has neither target nor box",
                    flaw.kind.as_str(),
                    flaw.image_id
                )));
            }
            continue;
        };
        let record = gt.get(target.as_str()).ok_or_else(|| {
            Error::DatasetMismatch(format!("flaw target {target:?} is not a ground-truth object"))
        })?;
        if Some(record.bbox) != flaw.target_box || record.image_id != flaw.image_id {
            return Err(Error::DatasetMismatch(format!(
                "flaw target {target:?} does not match the ground truth"
            )));
        }
        match flaw.kind {
            FlawKind::Deletion | FlawKind::RemovedObject => {
                dropped.insert(record.id.as_str(), ());
            }
            FlawKind::ClassFlip | FlawKind::GradeIncrement => {
                let label = flaw.new_label.as_deref().ok_or_else(|| {
                    Error::DatasetMismatch(format!("relabel flaw on {target:?} lacks new_label"))
                })?;
                relabel.insert(record.id.as_str(), label);
            }
            FlawKind::DuplicateAnnotation => {}
            other => {
                return Err(Error::DatasetMismatch(format!(
                    "{} flaw cannot target an existing object",
                    other.as_str()
                )))
            }
        }
    }

    let mut annotations: Vec<AnnotationRecord> = ground_truth
        .annotations
        .iter()
        .filter(|a| a.annotator_id != PROPOSAL)
        .cloned()
        .collect();
    for a in ground_truth.ground_truth() {
        if dropped.contains_key(a.id.as_str()) {
            continue;
        }
        annotations.push(AnnotationRecord {
            id: proposal_id(&a.id),
            image_id: a.image_id.clone(),
            annotator_id: PROPOSAL.to_string(),
            mode: ModeKind::Aided,
            bbox: a.bbox,
            label: relabel
                .get(a.id.as_str())
                .map(|l| l.to_string())
                .unwrap_or_else(|| a.label.clone()),
            provenance: Provenance::Proposal,
        });
    }
    for (i, flaw) in plan.flaws.iter().enumerate() {
        if !flaw.kind.is_synthetic() {
            continue;
        }
        let (Some(bbox), Some(label)) = (flaw.synthetic_box, flaw.new_label.as_ref()) else {
            return Err(Error::DatasetMismatch(format!(
                "{} flaw #{i} lacks a box or label",
                flaw.kind.as_str()
            )));
        };
        annotations.push(AnnotationRecord {
            id: synthetic_id(i, flaw.kind),
            image_id: flaw.image_id.clone(),
            annotator_id: PROPOSAL.to_string(),
            mode: ModeKind::Aided,
            bbox,
            label: label.clone(),
            provenance: Provenance::Proposal,
        });
    }
    StudyDataset::new(ground_truth.task, ground_truth.images.clone(), annotations)
}

fn require_task(ds: &StudyDataset, task: TaskKind) -> Result<()> {
    if ds.task == task {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "expected a {task} dataset, got {}",
            ds.task
        )))
    }
}

/// Images in a seed-dependent but input-order-independent order, each with
/// its ground-truth objects sorted by id.
fn shuffled_images<'a>(
    ds: &'a StudyDataset,
    rng: &mut ChaCha8Rng,
) -> Vec<(&'a ImageRecord, Vec<&'a AnnotationRecord>)> {
    let mut by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in ds.ground_truth() {
        by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    let mut images: Vec<&ImageRecord> = ds.images.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    images.shuffle(rng);
    images
        .into_iter()
        .map(|img| {
            let mut cells = by_image.remove(img.image_id.as_str()).unwrap_or_default();
            cells.sort_by(|a, b| a.id.cmp(&b.id));
            (img, cells)
        })
        .collect()
}

/// Takes `n` images with at least one object out of `pool`, in order.
fn take_with_cells<'a>(
    pool: &mut Vec<(&'a ImageRecord, Vec<&'a AnnotationRecord>)>,
    n: usize,
    what: &str,
) -> Result<Vec<(&'a ImageRecord, Vec<&'a AnnotationRecord>)>> {
    let mut taken = Vec::with_capacity(n);
    let mut i = 0;
    while taken.len() < n && i < pool.len() {
        if pool[i].1.is_empty() {
            i += 1;
        } else {
            taken.push(pool.remove(i));
        }
    }
    if taken.len() < n {
        return Err(Error::InsufficientData(format!(
            "{what} needs {n} images with annotated objects, found {}",
            taken.len()
        )));
    }
    Ok(taken)
}

/// Asthma proposals: 15 cell-type flips spread over five images and one
/// deleted cell on each of five further images.
pub fn inject_asthma(ds: &StudyDataset, seed: u64) -> Result<(StudyDataset, FlawPlan)> {
    const FLIP_IMAGES: usize = 5;
    const FLIPS: usize = 15;
    const DELETION_IMAGES: usize = 5;

    require_task(ds, TaskKind::Asthma)?;
    if ds.images.len() < FLIP_IMAGES + DELETION_IMAGES {
        return Err(Error::InsufficientData(format!(
            "asthma injection needs at least 10 images, found {}",
            ds.images.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = shuffled_images(ds, &mut rng);

    // prefer the first five images with cells; fall back to the richest five
    let first_five: usize = pool
        .iter()
        .filter(|(_, c)| !c.is_empty())
        .take(FLIP_IMAGES)
        .map(|(_, c)| c.len())
        .sum();
    if first_five < FLIPS {
        pool.sort_by_key(|(_, c)| std::cmp::Reverse(c.len()));
    }
    let flip_group = take_with_cells(&mut pool, FLIP_IMAGES, "class flips")?;
    let pooled: usize = flip_group.iter().map(|(_, c)| c.len()).sum();
    if pooled < FLIPS {
        return Err(Error::InsufficientData(format!(
            "{FLIPS} class flips need {FLIPS} cells on {FLIP_IMAGES} images, found {pooled}"
        )));
    }
    let deletion_group = take_with_cells(&mut pool, DELETION_IMAGES, "deletions")?;

    // one flip per image, the rest drawn from the remaining pooled cells
    let mut chosen: Vec<&AnnotationRecord> = Vec::with_capacity(FLIPS);
    let mut rest: Vec<&AnnotationRecord> = Vec::new();
    for (_, cells) in &flip_group {
        let k = rng.random_range(0..cells.len());
        chosen.push(cells[k]);
        rest.extend(cells.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, c)| *c));
    }
    rest.shuffle(&mut rng);
    chosen.extend(rest.into_iter().take(FLIPS - FLIP_IMAGES));

    let space = TaskKind::Asthma.label_space();
    let mut flaws = Vec::new();
    for cell in chosen {
        let others: Vec<&&str> = space.iter().filter(|l| **l != cell.label).collect();
        let new_label = others.choose(&mut rng).expect("label space has five classes");
        let mut flaw = InjectedFlaw::on_target(FlawKind::ClassFlip, cell);
        flaw.new_label = Some(new_label.to_string());
        flaws.push(flaw);
    }
    for (_, cells) in &deletion_group {
        let cell = cells.choose(&mut rng).expect("image has cells");
        flaws.push(InjectedFlaw::on_target(FlawKind::Deletion, cell));
    }

    let plan = FlawPlan {
        task: TaskKind::Asthma,
        seed,
        flaws,
    };
    let proposals = replay(&plan, ds)?;
    Ok((proposals, plan))
}

/// Minimum IoU between a duplicate and the cell it copies.
pub const DUPLICATE_MIN_IOU: f64 = 0.7;
/// Maximum IoU between a false annotation and any real cell.
pub const FALSE_ANNOTATION_MAX_IOU: f64 = 0.1;

/// EIPH proposals: one deleted cell on each of five images, every cell's
/// grade raised by one on five further images, and ten detector artifacts
/// (false or duplicate annotations) over a third group of five images.
pub fn inject_eiph(ds: &StudyDataset, seed: u64) -> Result<(StudyDataset, FlawPlan)> {
    const GROUP: usize = 5;
    const ARTIFACTS: usize = 10;
    const TOP_GRADE: usize = 4;

    require_task(ds, TaskKind::Eiph)?;
    if ds.images.len() < 3 * GROUP {
        return Err(Error::InsufficientData(format!(
            "EIPH injection needs at least 15 images, found {}",
            ds.images.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = shuffled_images(ds, &mut rng);
    let deletions = take_with_cells(&mut pool, GROUP, "deletions")?;
    let increments = take_with_cells(&mut pool, GROUP, "grade increments")?;
    let artifact_images: Vec<_> = pool.drain(..GROUP.min(pool.len())).collect();
    if artifact_images.len() < GROUP {
        return Err(Error::InsufficientData(
            "artifacts need five images beyond the deletion and increment groups".into(),
        ));
    }

    let mut flaws = Vec::new();
    for (_, cells) in &deletions {
        let cell = cells.choose(&mut rng).expect("image has cells");
        flaws.push(InjectedFlaw::on_target(FlawKind::Deletion, cell));
    }
    let space = TaskKind::Eiph.label_space();
    for (_, cells) in &increments {
        for cell in cells {
            let grade = TaskKind::Eiph
                .label_index(&cell.label)
                .expect("validated EIPH label");
            let mut flaw = InjectedFlaw::on_target(FlawKind::GradeIncrement, cell);
            flaw.new_label = Some(space[(grade + 1).min(TOP_GRADE)].to_string());
            flaw.saturated = grade == TOP_GRADE;
            flaws.push(flaw);
        }
    }

    let mut per_image = vec![1usize; GROUP];
    for _ in GROUP..ARTIFACTS {
        per_image[rng.random_range(0..GROUP)] += 1;
    }
    let size = typical_size(ds);
    for ((image, cells), count) in artifact_images.iter().zip(per_image) {
        let mut placed: Vec<BoundingBox> = Vec::new();
        let mut duplicated: Vec<bool> = vec![false; cells.len()];
        for _ in 0..count {
            let free: Vec<usize> = (0..cells.len()).filter(|&i| !duplicated[i]).collect();
            let want_duplicate = !free.is_empty() && rng.random_bool(0.5);
            let background = if want_duplicate {
                None
            } else {
                place_background(image, cells, &placed, size, &mut rng)
            };
            match background {
                Some(bbox) => {
                    let label = space.choose(&mut rng).expect("grades");
                    placed.push(bbox);
                    flaws.push(InjectedFlaw::synthetic(
                        FlawKind::FalseAnnotation,
                        &image.image_id,
                        bbox,
                        label,
                    ));
                }
                None => {
                    let Some(&k) = free.choose(&mut rng) else {
                        return Err(Error::InsufficientData(format!(
                            "no room for a false annotation and no cell to duplicate on {:?}",
                            image.image_id
                        )));
                    };
                    duplicated[k] = true;
                    let cell = cells[k];
                    let bbox = place_duplicate(image, &cell.bbox, &mut rng);
                    placed.push(bbox);
                    let mut flaw = InjectedFlaw::on_target(FlawKind::DuplicateAnnotation, cell);
                    flaw.synthetic_box = Some(bbox);
                    flaw.new_label = Some(cell.label.clone());
                    flaws.push(flaw);
                }
            }
        }
    }

    let plan = FlawPlan {
        task: TaskKind::Eiph,
        seed,
        flaws,
    };
    let proposals = replay(&plan, ds)?;
    Ok((proposals, plan))
}

/// Median ground-truth box size, or the point-annotation default.
fn typical_size(ds: &StudyDataset) -> (f64, f64) {
    let mut w: Vec<f64> = ds.ground_truth().map(|a| a.bbox.width()).collect();
    let mut h: Vec<f64> = ds.ground_truth().map(|a| a.bbox.height()).collect();
    if w.is_empty() {
        return (2.0 * DEFAULT_POINT_RADIUS, 2.0 * DEFAULT_POINT_RADIUS);
    }
    w.sort_by(f64::total_cmp);
    h.sort_by(f64::total_cmp);
    (w[w.len() / 2], h[h.len() / 2])
}

fn place_background(
    image: &ImageRecord,
    cells: &[&AnnotationRecord],
    placed: &[BoundingBox],
    (w, h): (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Option<BoundingBox> {
    if w >= image.width || h >= image.height {
        return None;
    }
    for _ in 0..1000 {
        let x = rng.random_range(0.0..image.width - w);
        let y = rng.random_range(0.0..image.height - h);
        let b = BoundingBox::from([x, y, x + w, y + h]);
        let clear = cells
            .iter()
            .map(|c| &c.bbox)
            .chain(placed)
            .all(|o| iou(&b, o) <= FALSE_ANNOTATION_MAX_IOU);
        if clear {
            return Some(b);
        }
    }
    None
}

fn place_duplicate(image: &ImageRecord, cell: &BoundingBox, rng: &mut ChaCha8Rng) -> BoundingBox {
    for _ in 0..100 {
        let dx = rng.random_range(-0.15..0.15) * cell.width();
        let dy = rng.random_range(-0.15..0.15) * cell.height();
        let b = cell.translated(dx, dy);
        if b.within(image.width, image.height) && iou(&b, cell) >= DUPLICATE_MIN_IOU {
            return b;
        }
    }
    *cell
}

/// A scored non-object region that can serve as a fake object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateNegative {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitosisConfig {
    pub removal_fraction: f64,
    pub thresholds: DifficultyThresholds,
    pub fake_quota: [usize; 3],
    pub removed_quota: [usize; 3],
}

impl Default for MitosisConfig {
    fn default() -> Self {
        Self {
            removal_fraction: 0.20,
            thresholds: DifficultyThresholds::default(),
            fake_quota: [49, 50, 50],
            removed_quota: [49, 59, 50],
        }
    }
}

/// Scales `quota` to sum to `total` with largest-remainder rounding (ties
/// to the lower bucket).
pub fn reallocate_quota(quota: [usize; 3], total: usize) -> [usize; 3] {
    let sum: usize = quota.iter().sum();
    if sum == total {
        return quota;
    }
    if sum == 0 {
        let mut out = [total / 3; 3];
        for slot in out.iter_mut().take(total % 3) {
            *slot += 1;
        }
        return out;
    }
    let mut out = [0usize; 3];
    let mut rema = [(0usize, 0usize); 3];
    for i in 0..3 {
        let num = quota[i] * total;
        out[i] = num / sum;
        rema[i] = (num % sum, i);
    }
    let short = total - out.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in rema.iter().take(short) {
        out[*i] += 1;
    }
    out
}

/// Caps each bucket at its availability and moves the deficit to the
/// buckets with the most spare candidates.
fn fit_quota(quota: [usize; 3], available: [usize; 3], what: &str) -> Result<[usize; 3]> {
    let total: usize = quota.iter().sum();
    let have: usize = available.iter().sum();
    if have < total {
        return Err(Error::InsufficientData(format!(
            "{what}: {total} objects requested but only {have} candidates (per bucket {available:?})"
        )));
    }
    let mut out = [0usize; 3];
    let mut deficit = 0;
    for i in 0..3 {
        out[i] = quota[i].min(available[i]);
        deficit += quota[i] - out[i];
    }
    while deficit > 0 {
        let i = (0..3)
            .max_by(|&a, &b| (available[a] - out[a]).cmp(&(available[b] - out[b])).then(b.cmp(&a)))
            .expect("three buckets");
        out[i] += 1;
        deficit -= 1;
    }
    Ok(out)
}

/// Mitotic-figure proposals: a fraction of the ground truth removed and the
/// same number of fake figures added, both stratified by model score.
pub fn inject_mitosis(
    ds: &StudyDataset,
    scores: &HashMap<String, f64>,
    candidate_negatives: &[CandidateNegative],
    config: &MitosisConfig,
    seed: u64,
) -> Result<(StudyDataset, FlawPlan)> {
    require_task(ds, TaskKind::Mitosis)?;
    config.thresholds.validate()?;
    if !(0.0..=1.0).contains(&config.removal_fraction) {
        return Err(Error::Range(format!(
            "removal fraction {} must lie in [0, 1]",
            config.removal_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cuts = &config.thresholds;

    let mut truth: Vec<&AnnotationRecord> = ds.ground_truth().collect();
    truth.sort_by(|a, b| a.id.cmp(&b.id));
    let mut removed_buckets: [Vec<(&AnnotationRecord, f64)>; 3] = Default::default();
    for a in &truth {
        let score = *scores.get(&a.id).ok_or_else(|| {
            Error::DatasetMismatch(format!("no model score for ground-truth figure {:?}", a.id))
        })?;
        removed_buckets[bucket(score, cuts, BucketScheme::Removed) as usize].push((a, score));
    }

    let mut fake_buckets: [Vec<&CandidateNegative>; 3] = Default::default();
    let mut negatives: Vec<&CandidateNegative> = candidate_negatives.iter().collect();
    negatives.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| <[f64; 4]>::from(a.bbox).partial_cmp(&<[f64; 4]>::from(b.bbox)).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.score.total_cmp(&b.score))
    });
    for n in negatives {
        let image = ds.image(&n.image_id).ok_or_else(|| {
            Error::DatasetMismatch(format!("candidate negative on unknown image {:?}", n.image_id))
        })?;
        if !n.bbox.is_valid() || !n.bbox.within(image.width, image.height) {
            return Err(Error::DatasetMismatch(format!(
                "candidate negative box {:?} is invalid on {:?}",
                <[f64; 4]>::from(n.bbox),
                n.image_id
            )));
        }
        fake_buckets[bucket(n.score, cuts, BucketScheme::Fake) as usize].push(n);
    }

    let total = (config.removal_fraction * truth.len() as f64).round() as usize;
    let removed_quota = fit_quota(
        reallocate_quota(config.removed_quota, total),
        [0, 1, 2].map(|i| removed_buckets[i].len()),
        "removed figures",
    )?;
    let fake_quota = fit_quota(
        reallocate_quota(config.fake_quota, total),
        [0, 1, 2].map(|i| fake_buckets[i].len()),
        "fake figures",
    )?;

    let mut flaws = Vec::with_capacity(2 * total);
    for (b, pool) in removed_buckets.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        let mut picked: Vec<_> = pool.iter().take(removed_quota[b]).collect();
        picked.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        for (a, score) in picked {
            let mut flaw = InjectedFlaw::on_target(FlawKind::RemovedObject, a);
            flaw.difficulty_bucket = Some(b as u8);
            flaw.score = Some(*score);
            flaws.push(flaw);
        }
    }
    let label = TaskKind::Mitosis.label_space()[0];
    for (b, pool) in fake_buckets.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        for n in pool.iter().take(fake_quota[b]) {
            let mut flaw = InjectedFlaw::synthetic(FlawKind::FakeObject, &n.image_id, n.bbox, label);
            flaw.difficulty_bucket = Some(b as u8);
            flaw.score = Some(n.score);
            flaws.push(flaw);
        }
    }

    let plan = FlawPlan {
        task: TaskKind::Mitosis,
        seed,
        flaws,
    };
    let proposals = replay(&plan, ds)?;
    Ok((proposals, plan))
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    id: String,
    score: f64,
}

#[derive(Debug, Deserialize)]
struct NegativeRow {
    image_id: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Reader::from_reader(file))
}

/// Reads `id,score` rows.
pub fn load_scores(path: impl AsRef<Path>) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for row in open_csv(path.as_ref())?.deserialize() {
        let row: ScoreRow = row?;
        out.insert(row.id, row.score);
    }
    Ok(out)
}

/// Reads `image_id,x_min,y_min,x_max,y_max,score` rows.
pub fn load_negatives(path: impl AsRef<Path>) -> Result<Vec<CandidateNegative>> {
    let mut out = Vec::new();
    for row in open_csv(path.as_ref())?.deserialize() {
        let row: NegativeRow = row?;
        out.push(CandidateNegative {
            image_id: row.image_id,
            bbox: [row.x_min, row.y_min, row.x_max, row.y_max].into(),
            score: row.score,
        });
    }
    Ok(out)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &BTreeMap<String, f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score"])?;
    for (id, s) in scores {
        w.write_record([id.as_str(), &s.to_string()])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_negatives(path: impl AsRef<Path>, negatives: &[CandidateNegative]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "x_min", "y_min", "x_max", "y_max", "score"])?;
    for n in negatives {
        let b = n.bbox;
        w.write_record([
            n.image_id.clone(),
            b.x_min.to_string(),
            b.y_min.to_string(),
            b.x_max.to_string(),
            b.y_max.to_string(),
            n.score.to_string(),
        ])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Whether one flaw was undone by an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlawOutcome {
    pub index: usize,
    pub kind: FlawKind,
    pub bucket: Option<u8>,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub kind: FlawKind,
    pub bucket: Option<u8>,
    pub flaws: usize,
    pub recovered: usize,
}

impl RecoveryRow {
    pub fn rate(&self) -> f64 {
        if self.flaws == 0 {
            0.0
        } else {
            self.recovered as f64 / self.flaws as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// One row per (kind, bucket), sorted.
    pub rows: Vec<RecoveryRow>,
    pub outcomes: Vec<FlawOutcome>,
    /// Grade increments that could not change the label; not scored.
    pub saturated: usize,
}

impl RecoveryReport {
    fn from_outcomes(outcomes: Vec<FlawOutcome>, saturated: usize) -> Self {
        let mut rows: BTreeMap<(FlawKind, Option<u8>), (usize, usize)> = BTreeMap::new();
        for o in &outcomes {
            let e = rows.entry((o.kind, o.bucket)).or_default();
            e.0 += 1;
            e.1 += usize::from(o.recovered);
        }
        Self {
            rows: rows
                .into_iter()
                .map(|((kind, bucket), (flaws, recovered))| RecoveryRow {
                    kind,
                    bucket,
                    flaws,
                    recovered,
                })
                .collect(),
            outcomes,
            saturated,
        }
    }

    /// Pools several annotators' reports on the same plan.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a RecoveryReport>) -> RecoveryReport {
        let mut outcomes = Vec::new();
        let mut saturated = 0;
        for r in reports {
            outcomes.extend(r.outcomes.iter().cloned());
            saturated += r.saturated;
        }
        Self::from_outcomes(outcomes, saturated)
    }

    pub fn row(&self, kind: FlawKind, bucket: Option<u8>) -> Option<&RecoveryRow> {
        self.rows.iter().find(|r| r.kind == kind && r.bucket == bucket)
    }

    /// Rate over all buckets of one kind.
    pub fn kind_rate(&self, kind: FlawKind) -> Option<f64> {
        let (n, k) = self
            .rows
            .iter()
            .filter(|r| r.kind == kind)
            .fold((0, 0), |(n, k), r| (n + r.flaws, k + r.recovered));
        (n > 0).then(|| k as f64 / n as f64)
    }
}

/// Scores how many flaws of `plan` one annotator's output undid.
///
/// A relabel flaw is recovered when the annotator's object matched to the
/// target carries the original label; a removed object when the annotator
/// has an object matched to it; a false or fake object when no annotator
/// object overlaps it at `threshold`; a duplicate when exactly one annotator
/// object overlaps the duplicated cell.
pub fn recovery_report(
    plan: &FlawPlan,
    ds: &StudyDataset,
    expert_annotations: &[AnnotationRecord],
    threshold: f64,
) -> Result<RecoveryReport> {
    if plan.task != ds.task {
        return Err(Error::DatasetMismatch(format!(
            "plan is for {} but dataset is {}",
            plan.task, ds.task
        )));
    }
    let gt: HashMap<&str, &AnnotationRecord> = ds.ground_truth().map(|a| (a.id.as_str(), a)).collect();
    let mut expert_by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in expert_annotations {
        if ds.image(&a.image_id).is_none() {
            return Err(Error::DatasetMismatch(format!(
                "annotation {:?} is on unknown image {:?}",
                a.id, a.image_id
            )));
        }
        expert_by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    let mut matchings = HashMap::new();
    let empty = Vec::new();

    let mut outcomes = Vec::new();
    let mut saturated = 0;
    for (index, flaw) in plan.flaws.iter().enumerate() {
        if ds.image(&flaw.image_id).is_none() {
            return Err(Error::DatasetMismatch(format!(
                "flaw references unknown image {:?}",
                flaw.image_id
            )));
        }
        if let Some(t) = &flaw.target_id {
            let found = gt.get(t.as_str()).is_some_and(|a| Some(a.bbox) == flaw.target_box);
            if !found {
                return Err(Error::DatasetMismatch(format!(
                    "flaw target {t:?} does not match the ground truth"
                )));
            }
        }
        if flaw.saturated {
            saturated += 1;
            continue;
        }
        let mine = expert_by_image.get(flaw.image_id.as_str()).unwrap_or(&empty);
        if !matchings.contains_key(flaw.image_id.as_str()) {
            let truth: Vec<&AnnotationRecord> = ds
                .ground_truth()
                .filter(|a| a.image_id == flaw.image_id)
                .collect();
            matchings.insert(flaw.image_id.as_str(), match_sets(mine, &truth, threshold)?);
        }
        let matching = &matchings[flaw.image_id.as_str()];
        let overlapping = |b: &BoundingBox| mine.iter().filter(|a| iou(&a.bbox, b) >= threshold).count();

        let recovered = match flaw.kind {
            FlawKind::ClassFlip | FlawKind::GradeIncrement => {
                let target = flaw.target_id.as_deref().unwrap_or_default();
                matching.annotation_for(target).is_some_and(|p| {
                    mine.iter()
                        .find(|a| a.id == p.annotation_id)
                        .is_some_and(|a| Some(&a.label) == flaw.original_label.as_ref())
                })
            }
            FlawKind::Deletion | FlawKind::RemovedObject => {
                let target = flaw.target_id.as_deref().unwrap_or_default();
                matching.annotation_for(target).is_some()
            }
            FlawKind::FalseAnnotation | FlawKind::FakeObject => {
                let b = flaw.synthetic_box.ok_or_else(|| {
                    Error::DatasetMismatch(format!("flaw #{index} lacks its synthetic box"))
                })?;
                overlapping(&b) == 0
            }
            FlawKind::DuplicateAnnotation => {
                let b = flaw.target_box.ok_or_else(|| {
                    Error::DatasetMismatch(format!("flaw #{index} lacks its target box"))
                })?;
                overlapping(&b) == 1
            }
        };
        outcomes.push(FlawOutcome {
            index,
            kind: flaw.kind,
            bucket: flaw.difficulty_bucket,
            recovered,
        });
    }
    Ok(RecoveryReport::from_outcomes(outcomes, saturated))
}

/// Annotations of one annotator in one mode, owned.
pub fn annotations_of(ds: &StudyDataset, annotator: &str, mode: ModeKind) -> Vec<AnnotationRecord> {
    ds.by_annotator(annotator, mode).cloned().collect()
}

/// Ground-truth records of `ds`, owned.
pub fn ground_truth_of(ds: &StudyDataset) -> Vec<AnnotationRecord> {
    ds.annotations
        .iter()
        .filter(|a| a.annotator_id == GROUND_TRUTH)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bucket_edges() {
        let c = DifficultyThresholds::default();
        assert_eq!(bucket(0.2, &c, BucketScheme::Fake), 0);
        assert_eq!(bucket(0.2000001, &c, BucketScheme::Fake), 1);
        assert_eq!(bucket(0.4, &c, BucketScheme::Fake), 1);
        assert_eq!(bucket(1.0, &c, BucketScheme::Fake), 2);
        assert_eq!(bucket(0.5, &c, BucketScheme::Removed), 1);
        assert_eq!(bucket(0.33, &c, BucketScheme::Removed), 0);
        assert_eq!(bucket(0.66, &c, BucketScheme::Removed), 1);
        assert_eq!(bucket(0.661, &c, BucketScheme::Removed), 2);
    }

    #[test]
    fn thresholds_must_be_ordered() {
        let bad = DifficultyThresholds {
            fake_cuts: (0.4, 0.2),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DifficultyThresholds::default().validate().is_ok());
    }

    #[test]
    fn quota_reallocation() {
        assert_eq!(reallocate_quota([49, 50, 50], 149), [49, 50, 50]);
        // 149 * (49, 59, 50) / 158 = (46.21, 55.63, 47.15)
        assert_eq!(reallocate_quota([49, 59, 50], 149), [46, 56, 47]);
        assert_eq!(reallocate_quota([49, 59, 50], 0), [0, 0, 0]);
        assert_eq!(reallocate_quota([0, 0, 0], 4), [2, 1, 1]);
    }

    #[test]
    fn fit_moves_deficit_to_spare_buckets() {
        assert_eq!(fit_quota([5, 5, 5], [2, 10, 7], "x").unwrap(), [2, 8, 5]);
        assert!(matches!(
            fit_quota([5, 5, 5], [2, 3, 4], "x"),
            Err(Error::InsufficientData(_))
        ));
    }

    proptest! {
        #[test]
        fn bucket_is_monotone(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let c = DifficultyThresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for scheme in [BucketScheme::Fake, BucketScheme::Removed] {
                prop_assert!(bucket(lo, &c, scheme) <= bucket(hi, &c, scheme));
            }
        }

        #[test]
        fn reallocation_hits_total(q in proptest::array::uniform3(0usize..100), total in 0usize..400) {
            let out = reallocate_quota(q, total);
            prop_assert_eq!(out.iter().sum::<usize>(), total);
        }
    }
}
