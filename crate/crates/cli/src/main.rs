use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use annoconsensus::classifier::{read_features_csv, write_metrics_csv, LabeledSet};
use annoconsensus::flaws::{
    annotations_of, load_negatives, load_scores, read_plan, MitosisConfig, RecoveryReport,
};
use annoconsensus::model::{from_json_str, ModeKind, StudyDataset, TaskKind};
use annoconsensus::patches::{read_candidates_csv, select_patches, write_candidates_csv, PatchSelectionConfig};
use annoconsensus::simulate::{merge_simulation, simulate_annotator, AnnotatorProfile, SimulationContext};
use annoconsensus::study::{
    difficulty_map, mode_metrics, run_study, write_anova_csv, write_report, write_stat_csv,
    ImageClusters, ModeConsensus, ModeMetricsInput, StudyConfig,
};
use annoconsensus::{
    inject_asthma, inject_eiph, inject_mitosis, recovery_report, train, validate_dataset,
    Architecture, LossKind, TrainConfig,
};

#[derive(Parser)]
#[command(name = "annoconsensus", version, about = "Multi-expert annotation consensus and flaw-injection studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset file against the schema and its invariants.
    Validate {
        dataset: PathBuf,
    },
    /// Inject systematic flaws and write proposals plus the flaw plan.
    Inject(InjectArgs),
    /// Cluster the annotations of one mode into consensus objects.
    Consensus(ConsensusArgs),
    /// Concordance, timing and between-mode ANOVA for every annotator.
    Metrics(MetricsArgs),
    /// Score how many injected flaws each annotator corrected.
    Recovery(RecoveryArgs),
    /// Train a classifier on a features CSV.
    Train(TrainArgs),
    /// Simulate one annotator and append the result to a dataset.
    Simulate(SimulateArgs),
    /// Run the whole study and write the report directory.
    RunStudy(RunStudyArgs),
    /// Pick a balanced set of patches from a candidates CSV.
    SelectPatches(SelectArgs),
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Expected task; checked against the dataset.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    seed: u64,
    /// Output directory for `proposals.json` and `flaw_plan.json`.
    #[arg(long)]
    out: PathBuf,
    /// Model scores per ground-truth id (`id,score`); mitosis only.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Candidate negatives (`image_id,x_min,y_min,x_max,y_max,score`); mitosis only.
    #[arg(long)]
    negatives: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    removal_fraction: f64,
}

#[derive(Args)]
struct ConsensusArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    mode: ModeKind,
    /// Comma-separated annotator ids; defaults to every human annotator.
    #[arg(long, value_delimiter = ',')]
    annotators: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Output directory for `concordance.csv`, `timing.csv` and `anova.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoveryArgs {
    /// Dataset with ground truth and the annotators' records.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value = "aided")]
    mode: ModeKind,
    #[arg(long, value_delimiter = ',')]
    annotators: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training samples, `sample_id,label,votes,f1..fd`.
    #[arg(long)]
    features: PathBuf,
    /// Held-out samples in the same format; votes are ignored.
    #[arg(long)]
    validation: PathBuf,
    #[arg(long, default_value = "votes")]
    loss: LossKind,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    peak_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Hidden width; omit for a linear model.
    #[arg(long)]
    hidden: Option<usize>,
    /// Output directory for `model.json` and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Annotator profile JSON.
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    annotator: String,
    #[arg(long)]
    mode: ModeKind,
    #[arg(long)]
    seed: u64,
    /// Flaw plan; with `--scores` it sets per-object difficulty.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Lookalike regions where spurious marks land.
    #[arg(long)]
    negatives: Option<PathBuf>,
    /// Output dataset JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunStudyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// `patch_id,slide_id,stain,g0..gk`.
    #[arg(long)]
    candidates: PathBuf,
    /// Selection config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    target_objects: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// A well-formed command that cannot run as given.
#[derive(Debug)]
struct Usage {
    message: String,
    remedy: String,
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>, remedy: impl Into<String>) -> anyhow::Error {
    Usage {
        message: message.into(),
        remedy: remedy.into(),
    }
    .into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => return clap_failure(err),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(u) = err.downcast_ref::<Usage>() {
                eprintln!("error: {}", u.message);
                eprintln!("remedy: {}", u.remedy);
                ExitCode::from(2)
            } else {
                eprintln!("error: {err:#}");
                ExitCode::from(1)
            }
        }
    }
}

fn clap_failure(err: clap::Error) -> ExitCode {
    if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = err.print();
        return ExitCode::SUCCESS;
    }
    let rendered = err.render().to_string();
    // the error paragraph, without the usage block that follows it
    let first: Vec<&str> = rendered
        .lines()
        .skip_while(|l| l.trim().is_empty())
        .take_while(|l| !l.trim().is_empty())
        .map(|l| l.trim().trim_start_matches("error: "))
        .collect();
    let first = if first.is_empty() {
        "invalid arguments".to_string()
    } else {
        first.join(" ")
    };
    let sub = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let help = match &sub {
        Some(s) if err.kind() != ErrorKind::InvalidSubcommand => format!("annoconsensus {s} --help"),
        _ => "annoconsensus --help".to_string(),
    };
    let remedy = if first.contains("--seed") {
        format!("pass --seed <N>; randomized commands need an explicit seed (see '{help}')")
    } else {
        format!("see '{help}'")
    };
    eprintln!("error: {first}");
    eprintln!("remedy: {remedy}");
    ExitCode::from(2)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate { dataset } => validate(&dataset),
        Command::Inject(a) => inject(a),
        Command::Consensus(a) => consensus(a),
        Command::Metrics(a) => metrics(a),
        Command::Recovery(a) => recovery(a),
        Command::Train(a) => train_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::RunStudy(a) => {
            let config = StudyConfig::read(&a.config)?;
            let artifacts = run_study(&config, a.seed)?;
            write_report(&a.out, &artifacts)?;
            println!("wrote report to {}", a.out.display());
            Ok(())
        }
        Command::SelectPatches(a) => select(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    from_json_str(&text).with_context(|| format!("in {}", path.display()))
}

fn load(path: &Path) -> Result<StudyDataset> {
    annoconsensus::parse_dataset(path).with_context(|| format!("in {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

fn validate(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let ds: StudyDataset = from_json_str(&text).with_context(|| format!("in {}", path.display()))?;
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{v}");
        }
        anyhow::bail!("{} invariant violation(s) in {}", violations.len(), path.display());
    }
    println!("OK");
    println!("{}", ds.summary());
    Ok(())
}

fn inject(a: InjectArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    if let Some(task) = a.task {
        if task != ds.task {
            anyhow::bail!("dataset {} is a {} dataset, not {task}", a.dataset.display(), ds.task);
        }
    }
    let (proposals, plan) = match ds.task {
        TaskKind::Asthma => inject_asthma(&ds, a.seed)?,
        TaskKind::Eiph => inject_eiph(&ds, a.seed)?,
        TaskKind::Mitosis => {
            let (Some(scores), Some(negatives)) = (&a.scores, &a.negatives) else {
                return Err(usage(
                    "mitosis injection needs model scores and candidate negatives",
                    "pass --scores <id,score CSV> and --negatives <box,score CSV>",
                ));
            };
            let config = MitosisConfig {
                removal_fraction: a.removal_fraction,
                ..MitosisConfig::default()
            };
            inject_mitosis(&ds, &load_scores(scores)?, &load_negatives(negatives)?, &config, a.seed)?
        }
    };
    out_dir(&a.out)?;
    write(&a.out.join("proposals.json"), &proposals.to_json())?;
    write(&a.out.join("flaw_plan.json"), &plan.to_json())?;
    println!("{} flaws written to {}", plan.flaws.len(), a.out.display());
    Ok(())
}

fn annotators_or_all(given: Vec<String>, ds: &StudyDataset, mode: ModeKind) -> Vec<String> {
    if !given.is_empty() {
        return given;
    }
    ds.annotators()
        .into_iter()
        .filter(|id| ds.by_annotator(id, mode).next().is_some())
        .collect()
}

fn consensus(a: ConsensusArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let annotators = annotators_or_all(a.annotators, &ds, a.mode);
    if annotators.is_empty() {
        anyhow::bail!("no annotator has records in {} mode", a.mode);
    }
    let clusters = annoconsensus::geometry::cluster_dataset(&ds, &annotators, a.mode, a.nms_iou)?;
    let out = ModeConsensus {
        mode: a.mode,
        images: clusters
            .into_iter()
            .map(|(image_id, clusters)| ImageClusters { image_id, clusters })
            .collect(),
    };
    write(&a.out, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    let total: usize = out.images.iter().map(|i| i.clusters.len()).sum();
    println!("{total} clusters over {} images", out.images.len());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let per_mode: Vec<(ModeKind, Vec<String>)> = ModeKind::ALL
        .iter()
        .map(|m| (*m, annotators_or_all(Vec::new(), &ds, *m)))
        .filter(|(_, ids)| !ids.is_empty())
        .collect();
    if per_mode.is_empty() {
        anyhow::bail!("dataset has no human annotations");
    }
    let inputs: Vec<ModeMetricsInput> = per_mode
        .iter()
        .map(|(mode, ids)| ModeMetricsInput {
            mode: *mode,
            dataset: &ds,
            annotators: ids,
        })
        .collect();
    let m = mode_metrics(&inputs, a.threshold)?;
    out_dir(&a.out)?;
    write_stat_csv(&a.out.join("concordance.csv"), &m.concordance)?;
    write_stat_csv(&a.out.join("timing.csv"), &m.timing)?;
    write_anova_csv(&a.out.join("anova.csv"), &m.anova)?;
    for note in &m.notes {
        eprintln!("note: {note}");
    }
    println!("metrics written to {}", a.out.display());
    Ok(())
}

fn recovery(a: RecoveryArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let plan = read_plan(&a.plan)?;
    let annotators = annotators_or_all(a.annotators, &ds, a.mode);
    if annotators.is_empty() {
        anyhow::bail!("no annotator has records in {} mode", a.mode);
    }
    let mut reports = Vec::new();
    for id in &annotators {
        reports.push((id.clone(), recovery_report(&plan, &ds, &annotations_of(&ds, id, a.mode), a.threshold)?));
    }
    let pooled = RecoveryReport::pooled(reports.iter().map(|(_, r)| r));
    reports.push(("pooled".into(), pooled));

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    w.write_record(["annotator", "kind", "bucket", "flaws", "recovered", "rate"])?;
    for (id, report) in &reports {
        for r in &report.rows {
            w.write_record([
                id.clone(),
                r.kind.as_str().to_string(),
                r.bucket.map(|b| b.to_string()).unwrap_or_default(),
                r.flaws.to_string(),
                r.recovered.to_string(),
                r.rate().to_string(),
            ])?;
        }
    }
    w.flush()?;
    println!("recovery for {} annotators written to {}", annotators.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let batch = read_features_csv(&a.features)?;
    let held_out = read_features_csv(&a.validation)?;
    let validation = LabeledSet {
        features: held_out.features,
        labels: held_out.labels,
    };
    let config = TrainConfig {
        peak_lr: a.peak_lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        repetitions: a.repetitions,
        seed: a.seed,
        architecture: match a.hidden {
            Some(hidden) => Architecture::Mlp { hidden },
            None => Architecture::Linear,
        },
        alpha: a.alpha,
        ..TrainConfig::default()
    };
    if let Err(e) = config.validate() {
        return Err(usage(e.to_string(), "use positive --epochs, --repetitions, --batch-size and --peak-lr"));
    }
    let outcome = train(&batch, &validation, &config, a.loss)?;
    out_dir(&a.out)?;
    write(&a.out.join("model.json"), &(outcome.model.to_json() + "\n"))?;
    write_metrics_csv(a.out.join("metrics.csv"), &outcome)?;
    println!("mean of best validation accuracy: {:.4}", outcome.mean_best);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let profile: AnnotatorProfile = read_json(&a.profile)?;
    let mut context = SimulationContext::default();
    match (&a.plan, &a.scores) {
        (Some(plan), Some(scores)) => {
            let plan = read_plan(plan)?;
            let scores: BTreeMap<String, f64> = load_scores(scores)?.into_iter().collect();
            context.difficulty = difficulty_map(&plan, &scores, &MitosisConfig::default());
        }
        (None, None) => {}
        _ => {
            return Err(usage(
                "difficulty needs both the flaw plan and the model scores",
                "pass --plan and --scores together, or neither",
            ))
        }
    }
    if let Some(n) = &a.negatives {
        context.lookalikes = load_negatives(n)?;
    }
    let sim = simulate_annotator(&ds, &a.annotator, &profile, a.mode, &context, a.seed)?;
    let merged = merge_simulation(&ds, &a.annotator, &sim)?;
    write(&a.out, &merged.to_json())?;
    println!(
        "{} annotations on {} images (untouched {}, examined {})",
        sim.annotations.len(),
        sim.durations.len(),
        sim.untouched,
        sim.examined
    );
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let candidates = read_candidates_csv(&a.candidates)?;
    let mut config: PatchSelectionConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PatchSelectionConfig::default(),
    };
    if let Some(n) = a.count {
        config.target_patch_count = n;
    }
    if let Some(n) = a.target_objects {
        config.target_total_objects = n;
    }
    let chosen = select_patches(&candidates, &config)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    write_candidates_csv(&a.out, &chosen)?;
    let total: usize = chosen.iter().map(|c| c.total()).sum();
    println!("{} patches, {total} objects", chosen.len());
    Ok(())
}
