//! Box overlap, one-to-one matching and consensus clustering.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotationRecord, BoundingBox, ModeKind, StudyDataset, TaskKind, GROUND_TRUTH};

/// Default IoU threshold for matching and for NMS clustering.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two boxes. Boxes that only touch along an
/// edge have an empty intersection.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub annotation_id: String,
    pub reference_id: String,
    pub iou: f64,
}

/// Outcome of [`match_sets`]. Pairs are listed in the order they were
/// accepted; unmatched ids are sorted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_annotations: Vec<String>,
    pub unmatched_references: Vec<String>,
}

impl MatchResult {
    pub fn reference_for(&self, annotation_id: &str) -> Option<&MatchedPair> {
        self.pairs.iter().find(|p| p.annotation_id == annotation_id)
    }

    pub fn annotation_for(&self, reference_id: &str) -> Option<&MatchedPair> {
        self.pairs.iter().find(|p| p.reference_id == reference_id)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("IoU threshold {threshold} must lie in (0, 1]")))
    }
}

fn single_image<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> Result<()> {
    let mut first: Option<&str> = None;
    for r in records {
        match first {
            None => first = Some(&r.image_id),
            Some(f) if f != r.image_id => {
                return Err(Error::MixedImage(f.to_string(), r.image_id.clone()))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Greedy one-to-one matching of candidates to references.
///
/// All candidate/reference pairs with IoU at or above `threshold` are
/// visited in descending IoU order, ties broken by the `(candidate id,
/// reference id)` pair, and a pair is accepted when neither side is taken.
pub fn match_sets<C, R>(candidates: &[C], references: &[R], threshold: f64) -> Result<MatchResult>
where
    C: Borrow<AnnotationRecord>,
    R: Borrow<AnnotationRecord>,
{
    check_threshold(threshold)?;
    single_image(
        candidates
            .iter()
            .map(Borrow::borrow)
            .chain(references.iter().map(Borrow::borrow)),
    )?;
    let cand: Vec<(&str, BoundingBox)> = candidates
        .iter()
        .map(|c| (c.borrow().id.as_str(), c.borrow().bbox))
        .collect();
    let refs: Vec<(&str, BoundingBox)> = references
        .iter()
        .map(|r| (r.borrow().id.as_str(), r.borrow().bbox))
        .collect();
    Ok(greedy_match(&cand, &refs, threshold))
}

/// Box-level core of [`match_sets`]; assumes a valid threshold.
pub fn greedy_match(
    candidates: &[(&str, BoundingBox)],
    references: &[(&str, BoundingBox)],
    threshold: f64,
) -> MatchResult {
    let mut edges = Vec::new();
    for (ci, (_, cb)) in candidates.iter().enumerate() {
        for (ri, (_, rb)) in references.iter().enumerate() {
            let v = iou(cb, rb);
            if v >= threshold {
                edges.push((v, ci, ri));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| candidates[a.1].0.cmp(candidates[b.1].0))
            .then_with(|| references[a.2].0.cmp(references[b.2].0))
    });

    let mut cand_used = vec![false; candidates.len()];
    let mut ref_used = vec![false; references.len()];
    let mut pairs = Vec::new();
    for (v, ci, ri) in edges {
        if cand_used[ci] || ref_used[ri] {
            continue;
        }
        cand_used[ci] = true;
        ref_used[ri] = true;
        pairs.push(MatchedPair {
            annotation_id: candidates[ci].0.to_string(),
            reference_id: references[ri].0.to_string(),
            iou: v,
        });
    }

    let unmatched = |items: &[(&str, BoundingBox)], used: &[bool]| {
        let mut ids: Vec<String> = items
            .iter()
            .zip(used)
            .filter(|(_, u)| !**u)
            .map(|((id, _), _)| id.to_string())
            .collect();
        ids.sort();
        ids
    };
    MatchResult {
        unmatched_annotations: unmatched(candidates, &cand_used),
        unmatched_references: unmatched(references, &ref_used),
        pairs,
    }
}

/// One physical object as seen by a group of annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusCluster {
    pub image_id: String,
    pub representative_box: BoundingBox,
    /// Number of distinct annotators in the cluster.
    pub votes: usize,
    /// One entry per distinct annotator.
    pub class_histogram: BTreeMap<String, usize>,
    pub member_ids: Vec<String>,
    /// Sorted distinct annotator ids.
    pub annotators: Vec<String>,
    pub consensus_label: String,
}

/// Groups overlapping annotations into clusters by seeded non-maximum
/// suppression and counts the annotators behind each one.
///
/// The seed is the remaining annotation with the most peers at IoU
/// `>= nms_iou` (ties by smallest id); the seed and those peers form a
/// cluster and leave the pool. Classes are ignored while clustering.
/// An annotator marking one object twice is counted once, with the label
/// of their member closest to the seed.
pub fn cluster_consensus<A: Borrow<AnnotationRecord>>(
    annotations: &[A],
    nms_iou: f64,
    task: TaskKind,
) -> Result<Vec<ConsensusCluster>> {
    check_threshold(nms_iou)?;
    single_image(annotations.iter().map(Borrow::borrow))?;

    let mut recs: Vec<&AnnotationRecord> = annotations.iter().map(Borrow::borrow).collect();
    recs.sort_by(|a, b| a.id.cmp(&b.id));
    let n = recs.len();

    let mut adjacent = vec![vec![false; n]; n];
    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if iou(&recs[i].bbox, &recs[j].bbox) >= nms_iou {
                adjacent[i][j] = true;
                adjacent[j][i] = true;
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }

    let mut alive = vec![true; n];
    let mut left = n;
    let mut clusters = Vec::new();
    while left > 0 {
        // first index wins ties, and indices follow id order
        let seed = (0..n)
            .filter(|&i| alive[i])
            .max_by(|&a, &b| degree[a].cmp(&degree[b]).then(b.cmp(&a)))
            .expect("pool is nonempty");
        let members: Vec<usize> = (0..n)
            .filter(|&j| alive[j] && (j == seed || adjacent[seed][j]))
            .collect();
        for &m in &members {
            alive[m] = false;
            left -= 1;
        }
        for &m in &members {
            for k in 0..n {
                if alive[k] && adjacent[m][k] {
                    degree[k] -= 1;
                }
            }
        }
        clusters.push(build_cluster(&recs, seed, &members, task));
    }
    Ok(clusters)
}

fn build_cluster(
    recs: &[&AnnotationRecord],
    seed: usize,
    members: &[usize],
    task: TaskKind,
) -> ConsensusCluster {
    let seed_box = recs[seed].bbox;
    // per annotator: (closeness to seed, member index)
    let mut voters: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for &m in members {
        let closeness = if m == seed {
            f64::INFINITY
        } else {
            iou(&seed_box, &recs[m].bbox)
        };
        let entry = voters.entry(recs[m].annotator_id.as_str()).or_insert((closeness, m));
        // members are in id order, so a strict comparison keeps the smallest id on ties
        if closeness > entry.0 {
            *entry = (closeness, m);
        }
    }
    let mut class_histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (_, m) in voters.values() {
        *class_histogram.entry(recs[*m].label.clone()).or_insert(0) += 1;
    }
    let consensus_label = class_histogram
        .iter()
        .max_by(|a, b| {
            a.1.cmp(b.1).then_with(|| {
                let ia = task.label_index(a.0).unwrap_or(usize::MAX);
                let ib = task.label_index(b.0).unwrap_or(usize::MAX);
                ib.cmp(&ia).then_with(|| b.0.cmp(a.0))
            })
        })
        .map(|(label, _)| label.clone())
        .expect("cluster has at least one member");

    let boxes: Vec<BoundingBox> = members.iter().map(|&m| recs[m].bbox).collect();
    ConsensusCluster {
        image_id: recs[seed].image_id.clone(),
        representative_box: median_box(&boxes),
        votes: voters.len(),
        class_histogram,
        member_ids: members.iter().map(|&m| recs[m].id.clone()).collect(),
        annotators: voters.keys().map(|a| a.to_string()).collect(),
        consensus_label,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median of a nonempty set of boxes.
pub fn median_box(boxes: &[BoundingBox]) -> BoundingBox {
    let coord = |f: fn(&BoundingBox) -> f64| {
        let mut v: Vec<f64> = boxes.iter().map(f).collect();
        median(&mut v)
    };
    BoundingBox {
        x_min: coord(|b| b.x_min),
        y_min: coord(|b| b.y_min),
        x_max: coord(|b| b.x_max),
        y_max: coord(|b| b.y_max),
    }
}

/// Clusters every image of `ds` using only the given annotators' records
/// in `mode`. Images are visited in dataset order.
pub fn cluster_dataset(
    ds: &StudyDataset,
    annotators: &[String],
    mode: ModeKind,
    nms_iou: f64,
) -> Result<Vec<(String, Vec<ConsensusCluster>)>> {
    let wanted: BTreeSet<&str> = annotators.iter().map(String::as_str).collect();
    ds.images_in_mode(mode)
        .map(|image| {
            let recs: Vec<&AnnotationRecord> = ds
                .annotations_on(&image.image_id)
                .filter(|a| wanted.contains(a.annotator_id.as_str()) && a.mode == mode)
                .collect();
            Ok((image.image_id.clone(), cluster_consensus(&recs, nms_iou, ds.task)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConcordance {
    pub image_id: String,
    pub score: f64,
    pub correct: usize,
    pub expert_objects: usize,
    pub reference_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub annotator_id: String,
    pub mode: ModeKind,
    pub per_image: Vec<ImageConcordance>,
    pub mean: f64,
}

/// Object-set agreement of one image: matched pairs with equal labels over
/// the size of the union of both object sets. Two empty sets agree fully.
pub fn image_concordance<E, G>(expert: &[E], reference: &[G], threshold: f64) -> Result<(f64, usize)>
where
    E: Borrow<AnnotationRecord>,
    G: Borrow<AnnotationRecord>,
{
    let m = match_sets(expert, reference, threshold)?;
    let labels: BTreeMap<&str, &str> = expert
        .iter()
        .map(|a| (a.borrow().id.as_str(), a.borrow().label.as_str()))
        .collect();
    let ref_labels: BTreeMap<&str, &str> = reference
        .iter()
        .map(|a| (a.borrow().id.as_str(), a.borrow().label.as_str()))
        .collect();
    let correct = m
        .pairs
        .iter()
        .filter(|p| labels[p.annotation_id.as_str()] == ref_labels[p.reference_id.as_str()])
        .count();
    let union = expert.len() + reference.len() - correct;
    let score = if union == 0 {
        1.0
    } else {
        correct as f64 / union as f64
    };
    Ok((score, correct))
}

/// Agreement between one annotator and the ground truth over the images
/// of one mode.
pub fn concordance(
    expert: &str,
    ds: &StudyDataset,
    mode: ModeKind,
    threshold: f64,
) -> Result<Concordance> {
    check_threshold(threshold)?;
    let images: Vec<_> = ds.images_in_mode(mode).collect();
    let present = ds.by_annotator(expert, mode).next().is_some()
        || images.iter().any(|i| i.durations.contains_key(expert));
    if !present {
        return Err(Error::MissingAnnotator(expert.to_string()));
    }
    if ds.ground_truth().next().is_none() {
        return Err(Error::MissingAnnotator(GROUND_TRUTH.to_string()));
    }

    let mut per_image = Vec::with_capacity(images.len());
    for image in images {
        let mine: Vec<&AnnotationRecord> = ds
            .by_annotator(expert, mode)
            .filter(|a| a.image_id == image.image_id)
            .collect();
        let truth: Vec<&AnnotationRecord> = ds
            .ground_truth()
            .filter(|a| a.image_id == image.image_id)
            .collect();
        let (score, correct) = image_concordance(&mine, &truth, threshold)?;
        per_image.push(ImageConcordance {
            image_id: image.image_id.clone(),
            score,
            correct,
            expert_objects: mine.len(),
            reference_objects: truth.len(),
        });
    }
    if per_image.is_empty() {
        return Err(Error::EmptyInput(format!("no images in {mode} mode")));
    }
    let mean = per_image.iter().map(|c| c.score).sum::<f64>() / per_image.len() as f64;
    Ok(Concordance {
        annotator_id: expert.to_string(),
        mode,
        per_image,
        mean,
    })
}
