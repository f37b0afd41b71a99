//! End-to-end study: inject flaws, simulate annotators in both modes,
//! cluster, score and train, then write the report directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{
    build_training_set, train, training_subsets, write_features_csv, LabeledSet, TrainConfig,
};
use crate::error::{Error, Result};
use crate::flaws::{
    annotations_of, bucket, inject_asthma, inject_eiph, inject_mitosis, recovery_report,
    synthetic_id, write_negatives, write_scores, BucketScheme, CandidateNegative, FlawKind,
    FlawPlan, MitosisConfig, RecoveryReport,
};
use crate::geometry::{cluster_dataset, concordance, ConsensusCluster};
use crate::loss::{LossKind, VoteWeightedBatch};
use crate::model::{ModeKind, StudyDataset, TaskKind, PROPOSAL};
use crate::simulate::{simulate_annotator, AnnotatorProfile, SimulatedAnnotations, SimulationContext};
use crate::stats::{
    anova_oneway, grade_case, summarize, timing_summary, CountDirection, GradeDecision,
    GradingTally, SummaryStat, GRADING_THRESHOLD,
};
use crate::synthetic::{World, WorldConfig};

/// Names of the report files, in the order they are written.
pub const REPORT_FILES: [&str; 9] = [
    "concordance.csv",
    "timing.csv",
    "recovery.csv",
    "anova.csv",
    "grading.csv",
    "classifier.csv",
    "flaw_plan.json",
    "consensus.json",
    "summary.json",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedProfile {
    pub id: String,
    #[serde(flatten)]
    pub profile: AnnotatorProfile,
}

/// Where the study data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StudyInput {
    /// Generated mitotic-figure world with latent features.
    Synthetic(WorldConfig),
    /// A dataset file; mitosis studies also need scores and negatives.
    Files {
        dataset: PathBuf,
        #[serde(default)]
        scores: Option<PathBuf>,
        #[serde(default)]
        negatives: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub input: StudyInput,
    /// Explicit profiles; when absent a panel of `experts` is generated.
    pub profiles: Option<Vec<NamedProfile>>,
    pub experts: usize,
    pub iou_threshold: f64,
    pub nms_iou: f64,
    pub mitosis: MitosisConfig,
    pub train: TrainConfig,
    pub grading_threshold: u32,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            input: StudyInput::Synthetic(WorldConfig::default()),
            profiles: None,
            experts: 10,
            iou_threshold: 0.5,
            nms_iou: 0.5,
            mitosis: MitosisConfig::default(),
            train: TrainConfig::default(),
            grading_threshold: GRADING_THRESHOLD,
        }
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        crate::model::from_json_str(text)
    }

    /// Reads a config file; relative input paths resolve against its
    /// directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let StudyInput::Files {
            dataset,
            scores,
            negatives,
        } = &mut config.input
        {
            for p in std::iter::once(dataset).chain(scores.iter_mut()).chain(negatives.iter_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }
}

/// Derives an independent seed for one pipeline stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub mode: ModeKind,
    /// Annotator id, `proposal`, or `experts` for the spread of expert means.
    pub annotator: String,
    #[serde(flatten)]
    pub stat: SummaryStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryLine {
    pub mode: ModeKind,
    pub kind: FlawKind,
    pub bucket: Option<u8>,
    pub flaws: usize,
    pub recovered: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaLine {
    pub metric: String,
    /// `None` when the within-group variance is zero and the means differ.
    pub f_statistic: Option<f64>,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingLine {
    pub mode: ModeKind,
    pub image_id: String,
    pub reference_count: u32,
    /// Mean expert count on the image, rounded to the nearest integer.
    pub expert_count: u32,
    pub decision: GradeDecision,
    pub reference_decision: GradeDecision,
    pub direction: CountDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLine {
    pub mode: ModeKind,
    pub training_set: String,
    pub n_experts: usize,
    pub loss: LossKind,
    pub samples: usize,
    pub mean_best: f64,
    pub min: f64,
    pub max: f64,
    pub sd: f64,
    pub best_per_repetition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    /// Always true: every annotator here is simulated.
    pub synthetic: bool,
    pub task: TaskKind,
    pub seed: u64,
    pub experts: Vec<String>,
    pub iou_threshold: f64,
    pub flaw_counts: BTreeMap<String, usize>,
    pub concordance: Vec<StatRow>,
    pub timing: Vec<StatRow>,
    pub recovery: Vec<RecoveryLine>,
    /// Grade increments on already-maximal grades; excluded from recovery.
    pub saturated_flaws: usize,
    pub anova: Vec<AnovaLine>,
    pub grading: Vec<GradingLine>,
    pub grading_tallies: BTreeMap<String, GradingTally>,
    pub classifier: Vec<ClassifierLine>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeConsensus {
    pub mode: ModeKind,
    pub images: Vec<ImageClusters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageClusters {
    pub image_id: String,
    pub clusters: Vec<ConsensusCluster>,
}

/// Everything a study produces, including the intermediates the report
/// numbers can be recomputed from.
#[derive(Debug, Clone)]
pub struct StudyArtifacts {
    pub report: StudyReport,
    pub plan: FlawPlan,
    /// Per-mode dataset: ground truth, proposals and that mode's expert
    /// annotations and durations.
    pub datasets: Vec<(ModeKind, StudyDataset)>,
    pub consensus: Vec<ModeConsensus>,
    pub training_sets: Vec<(ModeKind, String, VoteWeightedBatch)>,
    pub validation: Option<LabeledSet>,
    pub scores: BTreeMap<String, f64>,
    pub negatives: Vec<CandidateNegative>,
}

struct Inputs {
    ground_truth: StudyDataset,
    scores: BTreeMap<String, f64>,
    negatives: Vec<CandidateNegative>,
    world: Option<World>,
}

fn load_inputs(config: &StudyConfig, seed: u64) -> Result<Inputs> {
    match &config.input {
        StudyInput::Synthetic(world) => {
            let world = World::generate(world, stage_seed(seed, "world"))?;
            Ok(Inputs {
                ground_truth: world.dataset.clone(),
                scores: world.scores.clone(),
                negatives: world.negatives.clone(),
                world: Some(world),
            })
        }
        StudyInput::Files {
            dataset,
            scores,
            negatives,
        } => {
            let ds = crate::model::parse_dataset(dataset)?;
            let annotations = ds.ground_truth().cloned().collect();
            let ground_truth = StudyDataset::new(ds.task, ds.images.clone(), annotations)?;
            let scores = match scores {
                Some(p) => crate::flaws::load_scores(p)?.into_iter().collect(),
                None => BTreeMap::new(),
            };
            let negatives = match negatives {
                Some(p) => crate::flaws::load_negatives(p)?,
                None => Vec::new(),
            };
            Ok(Inputs {
                ground_truth,
                scores,
                negatives,
                world: None,
            })
        }
    }
}

fn profiles(config: &StudyConfig, task: TaskKind) -> Result<Vec<(String, AnnotatorProfile)>> {
    let list: Vec<(String, AnnotatorProfile)> = match &config.profiles {
        Some(p) => p.iter().map(|n| (n.id.clone(), n.profile.clone())).collect(),
        None => AnnotatorProfile::panel(task, config.experts),
    };
    if list.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut seen = std::collections::BTreeSet::new();
    for (id, p) in &list {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate profile id {id:?}")));
        }
        p.validate(task)?;
    }
    Ok(list)
}

/// Difficulty bucket per annotation id. Ground-truth figures with a low
/// model score are hard to find; fakes with a high score are hard to
/// reject.
pub fn difficulty_map(
    plan: &FlawPlan,
    scores: &BTreeMap<String, f64>,
    config: &MitosisConfig,
) -> HashMap<String, u8> {
    let mut map = HashMap::new();
    for (id, s) in scores {
        map.insert(id.clone(), 2 - bucket(*s, &config.thresholds, BucketScheme::Removed));
    }
    for (i, flaw) in plan.flaws.iter().enumerate() {
        if flaw.kind == FlawKind::FakeObject {
            if let Some(b) = flaw.difficulty_bucket {
                map.insert(synthetic_id(i, flaw.kind), b);
            }
        }
    }
    map
}

/// One mode's dataset and the annotators to score in it.
#[derive(Debug, Clone, Copy)]
pub struct ModeMetricsInput<'a> {
    pub mode: ModeKind,
    pub dataset: &'a StudyDataset,
    pub annotators: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeMetrics {
    pub concordance: Vec<StatRow>,
    pub timing: Vec<StatRow>,
    /// Unaided against aided per-annotator means; empty unless both modes
    /// are given.
    pub anova: Vec<AnovaLine>,
    pub notes: Vec<String>,
}

/// Concordance and timing per annotator and mode, the spread of the
/// annotator means, the proposals' own concordance in aided mode, and the
/// between-mode ANOVA of the annotator means.
pub fn mode_metrics(inputs: &[ModeMetricsInput], threshold: f64) -> Result<ModeMetrics> {
    let thr = threshold;
    let mut out = ModeMetrics::default();
    let mut expert_conc: BTreeMap<ModeKind, Vec<f64>> = BTreeMap::new();
    let mut expert_time: BTreeMap<ModeKind, Vec<f64>> = BTreeMap::new();
    for input in inputs {
        let (mode, ds) = (&input.mode, input.dataset);
        let mut means = Vec::new();
        let mut times = Vec::new();
        for id in input.annotators {
            let c = concordance(id, ds, *mode, thr).map_err(|e| e.in_stage("concordance"))?;
            let scores: Vec<f64> = c.per_image.iter().map(|i| i.score).collect();
            let stat = summarize(&scores).map_err(|e| e.in_stage("concordance"))?;
            means.push(stat.mean);
            out.concordance.push(StatRow {
                mode: *mode,
                annotator: id.clone(),
                stat,
            });
            let t = timing_summary(ds, *mode, id).map_err(|e| e.in_stage("timing"))?;
            times.push(t.mean);
            out.timing.push(StatRow {
                mode: *mode,
                annotator: id.clone(),
                stat: t,
            });
        }
        if means.is_empty() {
            continue;
        }
        out.concordance.push(StatRow {
            mode: *mode,
            annotator: "experts".into(),
            stat: summarize(&means).map_err(|e| e.in_stage("concordance"))?,
        });
        out.timing.push(StatRow {
            mode: *mode,
            annotator: "experts".into(),
            stat: summarize(&times).map_err(|e| e.in_stage("timing"))?,
        });
        if *mode == ModeKind::Aided && ds.proposals().next().is_some() {
            let c = concordance(PROPOSAL, ds, *mode, thr).map_err(|e| e.in_stage("concordance"))?;
            let scores: Vec<f64> = c.per_image.iter().map(|i| i.score).collect();
            out.concordance.push(StatRow {
                mode: *mode,
                annotator: PROPOSAL.into(),
                stat: summarize(&scores).map_err(|e| e.in_stage("concordance"))?,
            });
        }
        expert_conc.insert(*mode, means);
        expert_time.insert(*mode, times);
    }
    if expert_conc.len() < 2 {
        return Ok(out);
    }
    for (metric, groups) in [("concordance", &expert_conc), ("seconds_per_image", &expert_time)] {
        let a = &groups[&ModeKind::Unaided];
        let b = &groups[&ModeKind::Aided];
        let line = match anova_oneway(a, b) {
            Ok(r) => AnovaLine {
                metric: metric.into(),
                f_statistic: Some(r.f_statistic),
                df_between: r.df_between,
                df_within: r.df_within,
                p_value: r.p_value,
            },
            Err(Error::ZeroVariance {
                df_between,
                df_within,
            }) => {
                out.notes.push(format!("{metric}: zero within-group variance, F is infinite"));
                AnovaLine {
                    metric: metric.into(),
                    f_statistic: None,
                    df_between,
                    df_within,
                    p_value: 0.0,
                }
            }
            Err(e) => return Err(e.in_stage("anova")),
        };
        out.anova.push(line);
    }

    Ok(out)
}

/// Runs the whole study. Stage failures are wrapped with the stage name.
pub fn run_study(config: &StudyConfig, seed: u64) -> Result<StudyArtifacts> {
    let inputs = load_inputs(config, seed).map_err(|e| e.in_stage("load"))?;
    let task = inputs.ground_truth.task;
    let experts = profiles(config, task).map_err(|e| e.in_stage("profiles"))?;
    let expert_ids: Vec<String> = experts.iter().map(|(id, _)| id.clone()).collect();
    let mut notes = vec!["all annotators are simulated; numbers are synthetic".to_string()];

    let inject_seed = stage_seed(seed, "inject");
    let (with_proposals, plan) = match task {
        TaskKind::Asthma => inject_asthma(&inputs.ground_truth, inject_seed),
        TaskKind::Eiph => inject_eiph(&inputs.ground_truth, inject_seed),
        TaskKind::Mitosis => {
            let scores: HashMap<String, f64> = inputs.scores.clone().into_iter().collect();
            inject_mitosis(&inputs.ground_truth, &scores, &inputs.negatives, &config.mitosis, inject_seed)
        }
    }
    .map_err(|e| e.in_stage("inject"))?;

    let context = SimulationContext {
        difficulty: if task == TaskKind::Mitosis {
            difficulty_map(&plan, &inputs.scores, &config.mitosis)
        } else {
            HashMap::new()
        },
        lookalikes: inputs.negatives.clone(),
    };
    let sim_seed = stage_seed(seed, "simulate");
    let jobs: Vec<(ModeKind, usize)> = ModeKind::ALL
        .iter()
        .flat_map(|m| (0..experts.len()).map(move |e| (*m, e)))
        .collect();
    let simulated: Vec<SimulatedAnnotations> = jobs
        .par_iter()
        .map(|(mode, e)| {
            let (id, profile) = &experts[*e];
            simulate_annotator(&with_proposals, id, profile, *mode, &context, sim_seed)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("simulate"))?;

    let mut datasets = Vec::new();
    for mode in ModeKind::ALL {
        let mut ds = with_proposals.clone();
        for image in &mut ds.images {
            image.mode = Some(mode);
        }
        for ((m, e), sim) in jobs.iter().zip(&simulated) {
            if *m != mode {
                continue;
            }
            ds = crate::simulate::merge_simulation(&ds, &experts[*e].0, sim).map_err(|e| e.in_stage("simulate"))?;
        }
        ds.check().map_err(|e| e.in_stage("simulate"))?;
        datasets.push((mode, ds));
    }

    let thr = config.iou_threshold;
    let inputs_by_mode: Vec<ModeMetricsInput> = datasets
        .iter()
        .map(|(mode, ds)| ModeMetricsInput {
            mode: *mode,
            dataset: ds,
            annotators: &expert_ids,
        })
        .collect();
    let metrics = mode_metrics(&inputs_by_mode, thr)?;
    notes.extend(metrics.notes);

    let mut recovery = Vec::new();
    let mut saturated = 0;
    for (mode, ds) in &datasets {
        let reports = expert_ids
            .iter()
            .map(|id| recovery_report(&plan, ds, &annotations_of(ds, id, *mode), thr))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("recovery"))?;
        let pooled = RecoveryReport::pooled(&reports);
        saturated = saturated.max(pooled.saturated / expert_ids.len());
        for r in &pooled.rows {
            recovery.push(RecoveryLine {
                mode: *mode,
                kind: r.kind,
                bucket: r.bucket,
                flaws: r.flaws,
                recovered: r.recovered,
                rate: r.rate(),
            });
        }
    }

    let mut grading = Vec::new();
    let mut grading_tallies = BTreeMap::new();
    if task == TaskKind::Mitosis {
        for (mode, ds) in &datasets {
            let mut decisions = Vec::new();
            for image in &ds.images {
                let reference = ds.ground_truth().filter(|a| a.image_id == image.image_id).count() as u32;
                let total: usize = ds
                    .annotations_on(&image.image_id)
                    .filter(|a| expert_ids.contains(&a.annotator_id))
                    .count();
                let expert_count = (total as f64 / expert_ids.len() as f64).round() as u32;
                let d = grade_case(expert_count, reference, config.grading_threshold);
                let reference_decision = grade_case(reference, reference, config.grading_threshold).decision;
                grading.push(GradingLine {
                    mode: *mode,
                    image_id: image.image_id.clone(),
                    reference_count: reference,
                    expert_count,
                    decision: d.decision,
                    reference_decision,
                    direction: d.direction_vs_reference,
                });
                decisions.push(d);
            }
            grading_tallies.insert(mode.as_str().to_string(), GradingTally::from_decisions(&decisions));
        }
    } else {
        notes.push("grading applies to mitotic counts only".into());
    }

    let mut consensus = Vec::new();
    for (mode, ds) in &datasets {
        let clusters = cluster_dataset(ds, &expert_ids, *mode, config.nms_iou)
            .map_err(|e| e.in_stage("consensus"))?;
        consensus.push(ModeConsensus {
            mode: *mode,
            images: clusters
                .into_iter()
                .map(|(image_id, clusters)| ImageClusters { image_id, clusters })
                .collect(),
        });
    }

    let mut classifier = Vec::new();
    let mut training_sets = Vec::new();
    let validation = inputs.world.as_ref().map(|w| w.validation.clone());
    if let Some(world) = &inputs.world {
        let extractor = world.extractor();
        let subsets = training_subsets(&expert_ids);
        let train_config = TrainConfig {
            seed: stage_seed(seed, "train"),
            ..config.train.clone()
        };
        let set_jobs: Vec<(ModeKind, usize)> = datasets
            .iter()
            .flat_map(|(m, _)| (0..subsets.len()).map(move |k| (*m, k)))
            .collect();
        let results: Vec<(VoteWeightedBatch, Vec<ClassifierLine>)> = set_jobs
            .par_iter()
            .map(|(mode, k)| {
                let spec = &subsets[*k];
                let ds = &datasets.iter().find(|(m, _)| m == mode).expect("mode present").1;
                let clusters = cluster_dataset(ds, &spec.experts, *mode, config.nms_iou)?;
                let batch = build_training_set(&clusters, &spec.experts, &extractor)?;
                let mut lines = Vec::new();
                for loss in [LossKind::PlainBce, LossKind::Votes] {
                    let outcome = train(&batch, &world.validation, &train_config, loss)?;
                    let best = outcome.best_per_repetition();
                    let stat = summarize(&best)?;
                    lines.push(ClassifierLine {
                        mode: *mode,
                        training_set: spec.name.clone(),
                        n_experts: spec.experts.len(),
                        loss,
                        samples: batch.len(),
                        mean_best: outcome.mean_best,
                        min: stat.min,
                        max: stat.max,
                        sd: stat.sd,
                        best_per_repetition: best,
                    });
                }
                Ok((batch, lines))
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("train"))?;
        for ((mode, k), (batch, lines)) in set_jobs.iter().zip(results) {
            training_sets.push((*mode, subsets[*k].name.clone(), batch));
            classifier.extend(lines);
        }
    } else {
        notes.push("classifier stage skipped: file input carries no object features".into());
    }

    let flaw_counts = plan.flaws.iter().fold(BTreeMap::new(), |mut m, f| {
        *m.entry(f.kind.as_str().to_string()).or_insert(0) += 1;
        m
    });
    let report = StudyReport {
        synthetic: true,
        task,
        seed,
        experts: expert_ids,
        iou_threshold: thr,
        flaw_counts,
        concordance: metrics.concordance,
        timing: metrics.timing,
        recovery,
        saturated_flaws: saturated,
        anova: metrics.anova,
        grading,
        grading_tallies,
        classifier,
        notes,
    };
    Ok(StudyArtifacts {
        report,
        plan,
        datasets,
        consensus,
        training_sets,
        validation,
        scores: inputs.scores,
        negatives: inputs.negatives,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Writes `mode,annotator,n,mean,min,max,sd` rows.
pub fn write_stat_csv(path: &Path, rows: &[StatRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["mode", "annotator", "n", "mean", "min", "max", "sd"])?;
    for r in rows {
        w.write_record([
            r.mode.as_str().to_string(),
            r.annotator.clone(),
            r.stat.n.to_string(),
            num(r.stat.mean),
            num(r.stat.min),
            num(r.stat.max),
            num(r.stat.sd),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `metric,f,df_between,df_within,p` rows; an infinite F is `inf`.
pub fn write_anova_csv(path: &Path, rows: &[AnovaLine]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["metric", "f", "df_between", "df_within", "p"])?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            r.f_statistic.map(num).unwrap_or_else(|| "inf".into()),
            r.df_between.to_string(),
            r.df_within.to_string(),
            num(r.p_value),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

fn snake<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Writes the report files plus `intermediates/` into `out`.
pub fn write_report(out: &Path, artifacts: &StudyArtifacts) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let report = &artifacts.report;
    write_stat_csv(&out.join("concordance.csv"), &report.concordance)?;
    write_stat_csv(&out.join("timing.csv"), &report.timing)?;

    let path = out.join("recovery.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["mode", "kind", "bucket", "flaws", "recovered", "rate"])?;
    for r in &report.recovery {
        w.write_record([
            r.mode.as_str().to_string(),
            r.kind.as_str().to_string(),
            r.bucket.map(|b| b.to_string()).unwrap_or_default(),
            r.flaws.to_string(),
            r.recovered.to_string(),
            num(r.rate),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    write_anova_csv(&out.join("anova.csv"), &report.anova)?;

    let path = out.join("grading.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "mode",
        "image_id",
        "reference_count",
        "expert_count",
        "decision",
        "reference_decision",
        "direction",
    ])?;
    for r in &report.grading {
        w.write_record([
            r.mode.as_str().to_string(),
            r.image_id.clone(),
            r.reference_count.to_string(),
            r.expert_count.to_string(),
            snake(&r.decision),
            snake(&r.reference_decision),
            snake(&r.direction),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out.join("classifier.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "mode",
        "training_set",
        "n_experts",
        "loss",
        "samples",
        "mean_best",
        "min",
        "max",
        "sd",
        "best_per_rep",
    ])?;
    for r in &report.classifier {
        let reps: Vec<String> = r.best_per_repetition.iter().map(|x| num(*x)).collect();
        w.write_record([
            r.mode.as_str().to_string(),
            r.training_set.clone(),
            r.n_experts.to_string(),
            r.loss.as_str().to_string(),
            r.samples.to_string(),
            num(r.mean_best),
            num(r.min),
            num(r.max),
            num(r.sd),
            reps.join(";"),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    write_text(&out.join("flaw_plan.json"), &artifacts.plan.to_json())?;
    let consensus = serde_json::to_string_pretty(&artifacts.consensus).expect("consensus serializes");
    write_text(&out.join("consensus.json"), &(consensus + "\n"))?;
    let summary = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&out.join("summary.json"), &(summary + "\n"))?;

    let inter = out.join("intermediates");
    fs::create_dir_all(&inter).map_err(io_err(&inter))?;
    for (mode, ds) in &artifacts.datasets {
        write_text(&inter.join(format!("{}.json", mode.as_str())), &ds.to_json())?;
    }
    if !artifacts.scores.is_empty() {
        write_scores(inter.join("scores.csv"), &artifacts.scores)?;
    }
    if !artifacts.negatives.is_empty() {
        write_negatives(inter.join("negatives.csv"), &artifacts.negatives)?;
    }
    if let Some(v) = &artifacts.validation {
        let batch = VoteWeightedBatch::new(
            (0..v.labels.len()).map(|i| format!("validation:{i:05}")).collect(),
            v.features.clone(),
            v.labels.clone(),
            vec![1; v.labels.len()],
        )?;
        write_features_csv(inter.join("validation.csv"), &batch)?;
    }
    for (mode, name, batch) in &artifacts.training_sets {
        let dir = inter.join("features").join(mode.as_str());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_features_csv(dir.join(format!("{}.csv", name.replace(':', "-"))), batch)?;
    }
    Ok(())
}
