//! Annotation data model and dataset ingestion.
//!
//! A [`StudyDataset`] holds the images of one task together with every
//! annotation made on them: the reference labels (annotator
//! [`GROUND_TRUTH`]), the computer-generated proposals (annotator
//! [`PROPOSAL`]) and the human experts' annotations. Cell markers are
//! stored as boxes; see [`BoundingBox::around_point`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved annotator id carrying the reference labels.
pub const GROUND_TRUTH: &str = "ground_truth";
/// Reserved annotator id carrying the computer-generated labels.
pub const PROPOSAL: &str = "proposal";
/// Half side length of the square box used for point annotations.
pub const DEFAULT_POINT_RADIUS: f64 = 25.0;

const ASTHMA_LABELS: &[&str] = &[
    "eosinophil",
    "mast_cell",
    "neutrophil",
    "macrophage",
    "lymphocyte",
];
const EIPH_LABELS: &[&str] = &["0", "1", "2", "3", "4"];
const MITOSIS_LABELS: &[&str] = &["mitotic_figure"];

/// Axis-aligned box in image pixel coordinates.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite or degenerate coordinates.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Domain(format!(
                "box [{x_min}, {y_min}, {x_max}, {y_max}] must be finite with min < max"
            )))
        }
    }

    /// Square box of half side `radius` centred on a clicked point.
    pub fn around_point(x: f64, y: f64, radius: f64) -> Result<Self> {
        Self::new(x - radius, y - radius, x + radius, y + radius)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(c: [f64; 4]) -> Self {
        Self {
            x_min: c[0],
            y_min: c[1],
            x_max: c[2],
            y_max: c[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Asthma,
    Eiph,
    Mitosis,
}

impl TaskKind {
    /// Valid label tokens, in the fixed order used for tie-breaks.
    pub fn label_space(self) -> &'static [&'static str] {
        match self {
            TaskKind::Asthma => ASTHMA_LABELS,
            TaskKind::Eiph => EIPH_LABELS,
            TaskKind::Mitosis => MITOSIS_LABELS,
        }
    }

    pub fn label_index(self, label: &str) -> Option<usize> {
        self.label_space().iter().position(|l| *l == label)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Asthma => "asthma",
            TaskKind::Eiph => "eiph",
            TaskKind::Mitosis => "mitosis",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asthma" => Ok(TaskKind::Asthma),
            "eiph" => Ok(TaskKind::Eiph),
            "mitosis" => Ok(TaskKind::Mitosis),
            other => Err(Error::InvalidInput(format!(
                "unknown task {other:?} (expected asthma, eiph or mitosis)"
            ))),
        }
    }
}

/// Annotation session mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    /// Annotating from scratch.
    Unaided,
    /// Correcting computer-generated proposals.
    Aided,
}

impl ModeKind {
    pub const ALL: [ModeKind; 2] = [ModeKind::Unaided, ModeKind::Aided];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Unaided => "unaided",
            ModeKind::Aided => "aided",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unaided" => Ok(ModeKind::Unaided),
            "aided" => Ok(ModeKind::Aided),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {other:?} (expected unaided or aided)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Human,
    Proposal,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_id: String,
    pub annotator_id: String,
    pub mode: ModeKind,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub source_slide_id: String,
    /// Seconds spent per annotator. Absent entries are excluded from timing
    /// statistics, never read as zero.
    #[serde(default)]
    pub durations: BTreeMap<String, f64>,
    /// Session mode the image was shown in. `None` means the image belongs
    /// to every mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeKind>,
}

impl ImageRecord {
    pub fn in_mode(&self, mode: ModeKind) -> bool {
        self.mode.map_or(true, |m| m == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDataset {
    pub task: TaskKind,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

/// A broken invariant, naming the offending record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub record_id: String,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    DuplicateImageId,
    NonPositiveImageSize,
    NegativeDuration,
    DuplicateAnnotationId,
    DanglingImageId,
    DegenerateBox,
    BoxOutOfBounds,
    LabelNotInTaskSpace,
    ReservedAnnotatorProvenance,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{:?}]: {}", self.record_id, self.rule, self.detail)
    }
}

impl StudyDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        task: TaskKind,
        images: Vec<ImageRecord>,
        annotations: Vec<AnnotationRecord>,
    ) -> Result<Self> {
        let ds = Self {
            task,
            images,
            annotations,
        };
        ds.check()?;
        Ok(ds)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let violations = validate_dataset(self);
        match violations.first() {
            None => Ok(()),
            Some(first) if violations.len() == 1 => Err(Error::Integrity(first.to_string())),
            Some(first) => Err(Error::Integrity(format!(
                "{first} (and {} more)",
                violations.len() - 1
            ))),
        }
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn images_in_mode(&self, mode: ModeKind) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |i| i.in_mode(mode))
    }

    pub fn annotations_on<'a>(
        &'a self,
        image_id: &'a str,
    ) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    pub fn ground_truth(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations
            .iter()
            .filter(|a| a.annotator_id == GROUND_TRUTH)
    }

    pub fn proposals(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations.iter().filter(|a| a.annotator_id == PROPOSAL)
    }

    /// Annotations by one annotator in one mode. Reserved annotators are
    /// mode-independent and returned regardless of `mode`.
    pub fn by_annotator<'a>(
        &'a self,
        annotator_id: &'a str,
        mode: ModeKind,
    ) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        let reserved = is_reserved(annotator_id);
        self.annotations
            .iter()
            .filter(move |a| a.annotator_id == annotator_id && (reserved || a.mode == mode))
    }

    /// Sorted ids of the human annotators.
    pub fn annotators(&self) -> Vec<String> {
        let mut ids: BTreeSet<&str> = self
            .annotations
            .iter()
            .filter(|a| !is_reserved(&a.annotator_id))
            .map(|a| a.annotator_id.as_str())
            .collect();
        for image in &self.images {
            ids.extend(
                image
                    .durations
                    .keys()
                    .map(String::as_str)
                    .filter(|k| !is_reserved(k)),
            );
        }
        ids.into_iter().map(str::to_string).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut per_mode = BTreeMap::new();
        for a in &self.annotations {
            if a.provenance == Provenance::Human {
                *per_mode.entry(a.mode).or_insert(0) += 1;
            }
        }
        DatasetSummary {
            task: self.task,
            images: self.images.len(),
            annotations: self.annotations.len(),
            annotators: self.annotators().len(),
            ground_truth: self.ground_truth().count(),
            proposals: self.proposals().count(),
            human_per_mode: per_mode,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serialization cannot fail")
    }
}

pub fn is_reserved(annotator_id: &str) -> bool {
    annotator_id == GROUND_TRUTH || annotator_id == PROPOSAL
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub task: TaskKind,
    pub images: usize,
    pub annotations: usize,
    pub annotators: usize,
    pub ground_truth: usize,
    pub proposals: usize,
    pub human_per_mode: BTreeMap<ModeKind, usize>,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "task={} images={} annotations={} annotators={} ground_truth={} proposals={}",
            self.task, self.images, self.annotations, self.annotators, self.ground_truth, self.proposals
        )?;
        for (mode, n) in &self.human_per_mode {
            write!(f, " {mode}={n}")?;
        }
        Ok(())
    }
}

/// Reads and validates a dataset file.
pub fn parse_dataset(path: impl AsRef<Path>) -> Result<StudyDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset_str(&text)
}

pub fn parse_dataset_str(text: &str) -> Result<StudyDataset> {
    let ds: StudyDataset = from_json_str(text)?;
    ds.check()?;
    Ok(ds)
}

/// Deserializes JSON, reporting failures with a JSON-pointer location.
pub fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let pointer = json_pointer(err.path());
        let inner = err.into_inner();
        Error::Schema {
            pointer,
            message: inner.to_string(),
        }
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Lists every broken invariant; empty iff the dataset is valid.
pub fn validate_dataset(ds: &StudyDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |record_id: &str, rule: Rule, detail: String| {
        out.push(Violation {
            record_id: record_id.to_string(),
            rule,
            detail,
        })
    };

    let mut images: HashMap<&str, &ImageRecord> = HashMap::new();
    for image in &ds.images {
        if images.insert(&image.image_id, image).is_some() {
            push(&image.image_id, Rule::DuplicateImageId, "image id appears twice".into());
        }
        if !(image.width > 0.0 && image.height > 0.0 && image.width.is_finite() && image.height.is_finite()) {
            push(
                &image.image_id,
                Rule::NonPositiveImageSize,
                format!("size {}x{} must be positive", image.width, image.height),
            );
        }
        for (annotator, secs) in &image.durations {
            if !(secs.is_finite() && *secs >= 0.0) {
                push(
                    &image.image_id,
                    Rule::NegativeDuration,
                    format!("duration {secs} for {annotator} must be a nonnegative number"),
                );
            }
        }
    }

    let mut ids = HashSet::new();
    for a in &ds.annotations {
        if !ids.insert(a.id.as_str()) {
            push(&a.id, Rule::DuplicateAnnotationId, "annotation id appears twice".into());
        }
        if !a.bbox.is_valid() {
            push(
                &a.id,
                Rule::DegenerateBox,
                format!("box {:?} must be finite with min < max", <[f64; 4]>::from(a.bbox)),
            );
        }
        match images.get(a.image_id.as_str()) {
            None => push(
                &a.id,
                Rule::DanglingImageId,
                format!("image {:?} does not exist", a.image_id),
            ),
            Some(image) => {
                if a.bbox.is_valid() && !a.bbox.within(image.width, image.height) {
                    push(
                        &a.id,
                        Rule::BoxOutOfBounds,
                        format!(
                            "box {:?} exceeds image {}x{}",
                            <[f64; 4]>::from(a.bbox),
                            image.width,
                            image.height
                        ),
                    );
                }
            }
        }
        if ds.task.label_index(&a.label).is_none() {
            push(
                &a.id,
                Rule::LabelNotInTaskSpace,
                format!(
                    "label {:?} not in {} label space {:?}",
                    a.label,
                    ds.task,
                    ds.task.label_space()
                ),
            );
        }
        let expected = match a.annotator_id.as_str() {
            GROUND_TRUTH => Some(Provenance::GroundTruth),
            PROPOSAL => Some(Provenance::Proposal),
            _ => None,
        };
        let consistent = match expected {
            Some(p) => a.provenance == p,
            None => a.provenance == Provenance::Human,
        };
        if !consistent {
            push(
                &a.id,
                Rule::ReservedAnnotatorProvenance,
                format!(
                    "annotator {:?} cannot carry provenance {:?}",
                    a.annotator_id, a.provenance
                ),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 100.0,
            height: 100.0,
            source_slide_id: "slide".into(),
            durations: BTreeMap::new(),
            mode: None,
        }
    }

    fn ann(id: &str, image_id: &str, label: &str, b: [f64; 4]) -> AnnotationRecord {
        AnnotationRecord {
            id: id.into(),
            image_id: image_id.into(),
            annotator_id: "expert_01".into(),
            mode: ModeKind::Unaided,
            bbox: b.into(),
            label: label.into(),
            provenance: Provenance::Human,
        }
    }

    #[test]
    fn point_becomes_square_box() {
        let b = BoundingBox::around_point(50.0, 40.0, DEFAULT_POINT_RADIUS).unwrap();
        assert_eq!(<[f64; 4]>::from(b), [25.0, 15.0, 75.0, 65.0]);
        assert!(BoundingBox::around_point(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn degenerate_box_is_one_violation() {
        let ds = StudyDataset {
            task: TaskKind::Asthma,
            images: vec![image("img_1")],
            annotations: vec![ann("a1", "img_1", "eosinophil", [10.0, 10.0, 10.0, 20.0])],
        };
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].record_id, "a1");
        assert_eq!(v[0].rule, Rule::DegenerateBox);
    }

    #[test]
    fn eiph_grade_five_is_outside_label_space() {
        let ds = StudyDataset {
            task: TaskKind::Eiph,
            images: vec![image("img_1")],
            annotations: vec![ann("a1", "img_1", "5", [10.0, 10.0, 20.0, 20.0])],
        };
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::LabelNotInTaskSpace);
        for grade in TaskKind::Eiph.label_space() {
            let mut ok = ds.clone();
            ok.annotations[0].label = grade.to_string();
            assert!(validate_dataset(&ok).is_empty());
        }
    }

    #[test]
    fn reserved_annotator_needs_matching_provenance() {
        let mut a = ann("a1", "img_1", "mitotic_figure", [1.0, 1.0, 5.0, 5.0]);
        a.annotator_id = GROUND_TRUTH.into();
        let ds = StudyDataset {
            task: TaskKind::Mitosis,
            images: vec![image("img_1")],
            annotations: vec![a],
        };
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::ReservedAnnotatorProvenance);
    }

    #[test]
    fn out_of_bounds_and_dangling() {
        let ds = StudyDataset {
            task: TaskKind::Mitosis,
            images: vec![image("img_1")],
            annotations: vec![
                ann("a1", "img_1", "mitotic_figure", [90.0, 90.0, 110.0, 100.0]),
                ann("a2", "img_99", "mitotic_figure", [1.0, 1.0, 5.0, 5.0]),
            ],
        };
        let rules: Vec<Rule> = validate_dataset(&ds).into_iter().map(|v| v.rule).collect();
        assert_eq!(rules, vec![Rule::BoxOutOfBounds, Rule::DanglingImageId]);
    }

    #[test]
    fn pointer_escapes_keys() {
        let err = from_json_str::<StudyDataset>(
            r#"{"task":"asthma","images":[{"image_id":"i","width":1,"height":1,"source_slide_id":"s","durations":{"a/b":"x"}}],"annotations":[]}"#,
        )
        .unwrap_err();
        match err {
            Error::Schema { pointer, .. } => assert_eq!(pointer, "/images/0/durations/a~1b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
