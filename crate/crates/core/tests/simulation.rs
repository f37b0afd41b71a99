use std::collections::{BTreeMap, HashMap};

use annoconsensus::flaws::{annotations_of, MitosisConfig};
use annoconsensus::simulate::{merge_simulation, simulate_annotator, AnnotatorProfile, SimulationContext};
use annoconsensus::study::difficulty_map;
use annoconsensus::synthetic::{World, WorldConfig};
use annoconsensus::{
    inject_asthma, inject_eiph, inject_mitosis, recovery_report, AnnotationRecord, BoundingBox,
    FlawKind, FlawPlan, ImageRecord, ModeKind, Provenance, StudyDataset, TaskKind,
};
use annoconsensus::model::GROUND_TRUTH;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

type View = BTreeMap<String, Vec<([u64; 4], String)>>;

fn view<'a>(records: impl Iterator<Item = &'a AnnotationRecord>) -> View {
    let mut out: View = BTreeMap::new();
    for a in records {
        let b = <[f64; 4]>::from(a.bbox).map(f64::to_bits);
        out.entry(a.image_id.clone()).or_default().push((b, a.label.clone()));
    }
    for v in out.values_mut() {
        v.sort();
    }
    out
}

fn grid_dataset(task: TaskKind, images: usize, seed: u64) -> StudyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = task.label_space();
    let mut records = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..images {
        let image_id = format!("im{i:02}");
        records.push(ImageRecord {
            image_id: image_id.clone(),
            width: 600.0,
            height: 600.0,
            source_slide_id: "s".into(),
            durations: BTreeMap::new(),
            mode: None,
        });
        for k in 0..rng.random_range(4..=12) {
            let (cx, cy) = ((k % 10) as f64 * 60.0, (k / 10 * 2) as f64 * 60.0);
            annotations.push(AnnotationRecord {
                id: format!("{image_id}-c{k:02}"),
                image_id: image_id.clone(),
                annotator_id: GROUND_TRUTH.into(),
                mode: ModeKind::Unaided,
                bbox: BoundingBox::new(cx + 5.0, cy + 5.0, cx + 45.0, cy + 45.0).unwrap(),
                label: space[rng.random_range(0..space.len())].into(),
                provenance: Provenance::GroundTruth,
            });
        }
    }
    StudyDataset::new(task, records, annotations).unwrap()
}

struct Injected {
    proposals: StudyDataset,
    plan: FlawPlan,
    context: SimulationContext,
}

fn mitosis(seed: u64) -> Injected {
    let world = World::generate(&WorldConfig::default(), seed).unwrap();
    let scores: HashMap<String, f64> = world.scores.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let config = MitosisConfig::default();
    let (proposals, plan) = inject_mitosis(&world.dataset, &scores, &world.negatives, &config, seed).unwrap();
    let context = SimulationContext {
        difficulty: difficulty_map(&plan, &world.scores, &config),
        lookalikes: world.negatives.clone(),
    };
    Injected {
        proposals,
        plan,
        context,
    }
}

fn recovery_for(inj: &Injected, profile: &AnnotatorProfile, seed: u64) -> annoconsensus::RecoveryReport {
    let sim = simulate_annotator(&inj.proposals, "e1", profile, ModeKind::Aided, &inj.context, seed).unwrap();
    recovery_report(&inj.plan, &inj.proposals, &sim.annotations, 0.5).unwrap()
}

#[test]
fn perfect_unaided_is_identity() {
    for (task, seed) in [(TaskKind::Asthma, 1), (TaskKind::Eiph, 2), (TaskKind::Mitosis, 3)] {
        let ds = if task == TaskKind::Mitosis {
            World::generate(&WorldConfig::default(), seed).unwrap().dataset
        } else {
            grid_dataset(task, 20, seed)
        };
        let profile = AnnotatorProfile::perfect(task);
        let sim = simulate_annotator(&ds, "e1", &profile, ModeKind::Unaided, &SimulationContext::default(), seed)
            .unwrap();
        assert_eq!(view(sim.annotations.iter()), view(ds.ground_truth()));
        for image in &ds.images {
            let n = ds.ground_truth().filter(|a| a.image_id == image.image_id).count();
            assert_eq!(sim.durations[&image.image_id], 10.0 + n as f64);
        }
    }
}

#[test]
fn full_bias_returns_proposals_unchanged() {
    let inj = mitosis(5);
    let profile = AnnotatorProfile {
        acceptance_bias: 1.0,
        ..AnnotatorProfile::perfect(TaskKind::Mitosis)
    };
    let sim = simulate_annotator(&inj.proposals, "e1", &profile, ModeKind::Aided, &inj.context, 1).unwrap();
    assert_eq!(view(sim.annotations.iter()), view(inj.proposals.proposals()));
    let report = recovery_report(&inj.plan, &inj.proposals, &sim.annotations, 0.5).unwrap();
    for row in &report.rows {
        assert_eq!(row.recovered, 0, "{row:?}");
    }
    let merged = merge_simulation(&inj.proposals, "e1", &sim).unwrap();
    assert!(merge_simulation(&merged, "e1", &sim).is_err());
    assert_eq!(annotations_of(&merged, "e1", ModeKind::Aided).len(), sim.annotations.len());
}

#[test]
fn perfect_aided_recovers_everything() {
    let check = |plan: &FlawPlan, ds: &StudyDataset, context: &SimulationContext| {
        let profile = AnnotatorProfile::perfect(ds.task);
        let sim = simulate_annotator(ds, "e1", &profile, ModeKind::Aided, context, 4).unwrap();
        let report = recovery_report(plan, ds, &sim.annotations, 0.5).unwrap();
        assert!(!report.rows.is_empty());
        for row in &report.rows {
            assert_eq!(row.recovered, row.flaws, "{row:?}");
        }
        // a perfect annotator ends at the ground truth
        assert_eq!(view(sim.annotations.iter()), view(ds.ground_truth()));
    };
    let inj = mitosis(6);
    check(&inj.plan, &inj.proposals, &inj.context);
    let ds = grid_dataset(TaskKind::Asthma, 20, 6);
    let (p, plan) = inject_asthma(&ds, 6).unwrap();
    check(&plan, &p, &SimulationContext::default());
    let ds = grid_dataset(TaskKind::Eiph, 20, 6);
    let (p, plan) = inject_eiph(&ds, 6).unwrap();
    check(&plan, &p, &SimulationContext::default());
}

/// Fakes surviving among the examined-or-not proposals; a perfect
/// detector deletes every examined fake, so survivors are the untouched.
fn fake_tally(bias: f64, detection: f64, min_fakes: usize) -> (usize, usize) {
    let profile = AnnotatorProfile {
        acceptance_bias: bias,
        detection_prob: [detection; 3],
        ..AnnotatorProfile::perfect(TaskKind::Mitosis)
    };
    let (mut fakes, mut recovered) = (0, 0);
    let mut seed = 0;
    while fakes < min_fakes {
        let inj = mitosis(seed);
        let report = recovery_for(&inj, &profile, 1000 + seed);
        let row = report
            .rows
            .iter()
            .filter(|r| r.kind == FlawKind::FakeObject)
            .fold((0, 0), |acc, r| (acc.0 + r.flaws, acc.1 + r.recovered));
        fakes += row.0;
        recovered += row.1;
        seed += 1;
    }
    (fakes, recovered)
}

#[test]
fn bias_leaves_expected_share_untouched() {
    let (fakes, recovered) = fake_tally(0.8, 1.0, 10_000);
    assert!(fakes >= 10_000);
    let untouched = (fakes - recovered) as f64 / fakes as f64;
    assert!((untouched - 0.8).abs() <= 0.01, "untouched share {untouched}");
}

#[test]
fn lower_bias_never_lowers_fake_recovery() {
    let z = Normal::new(0.0, 1.0).unwrap();
    let biases = [1.0, 0.8, 0.5, 0.2, 0.0];
    let tallies: Vec<(usize, usize)> = biases.iter().map(|b| fake_tally(*b, 0.7, 5_000)).collect();
    for w in tallies.windows(2) {
        let ((n_hi, k_hi), (n_lo, k_lo)) = (w[0], w[1]);
        let (p_hi, p_lo) = (k_hi as f64 / n_hi as f64, k_lo as f64 / n_lo as f64);
        let pooled = (k_hi + k_lo) as f64 / (n_hi + n_lo) as f64;
        let se = (pooled * (1.0 - pooled) * (1.0 / n_hi as f64 + 1.0 / n_lo as f64)).sqrt();
        if se == 0.0 {
            assert!(p_lo >= p_hi);
            continue;
        }
        // one-sided test of "lower bias recovers less" at the 0.01 level
        let p_value = z.cdf((p_lo - p_hi) / se);
        assert!(p_value > 0.01, "recovery fell from {p_hi} to {p_lo}");
    }
}

#[test]
fn simulation_is_deterministic_per_annotator() {
    let inj = mitosis(7);
    let panel = AnnotatorProfile::panel(TaskKind::Mitosis, 3);
    for (id, profile) in &panel {
        let a = simulate_annotator(&inj.proposals, id, profile, ModeKind::Aided, &inj.context, 9).unwrap();
        let b = simulate_annotator(&inj.proposals, id, profile, ModeKind::Aided, &inj.context, 9).unwrap();
        assert_eq!(a, b);
    }
    let a = simulate_annotator(&inj.proposals, &panel[0].0, &panel[0].1, ModeKind::Aided, &inj.context, 9).unwrap();
    let b = simulate_annotator(&inj.proposals, "other", &panel[0].1, ModeKind::Aided, &inj.context, 9).unwrap();
    assert_ne!(view(a.annotations.iter()), view(b.annotations.iter()));
}
