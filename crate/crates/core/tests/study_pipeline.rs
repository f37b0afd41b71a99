use annoconsensus::classifier::TrainConfig;
use annoconsensus::flaws::MitosisConfig;
use annoconsensus::simulate::AnnotatorProfile;
use annoconsensus::study::{run_study, write_report, NamedProfile, StudyConfig, StudyInput, REPORT_FILES};
use annoconsensus::synthetic::WorldConfig;
use annoconsensus::{concordance, summarize, ModeKind, TaskKind};

fn small_world() -> WorldConfig {
    WorldConfig {
        images: 10,
        slides: 2,
        figures: 150,
        lookalikes: 120,
        validation_size: 400,
        ..WorldConfig::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        repetitions: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn perfect_panel_without_flaws_agrees_fully() {
    let profiles = (1..=4)
        .map(|e| NamedProfile {
            id: format!("expert{e:02}"),
            profile: AnnotatorProfile::perfect(TaskKind::Mitosis),
        })
        .collect();
    let config = StudyConfig {
        input: StudyInput::Synthetic(small_world()),
        profiles: Some(profiles),
        mitosis: MitosisConfig {
            removal_fraction: 0.0,
            ..MitosisConfig::default()
        },
        train: quick_train(),
        ..StudyConfig::default()
    };
    let artifacts = run_study(&config, 1).unwrap();
    let report = &artifacts.report;
    assert!(artifacts.plan.flaws.is_empty());
    for row in &report.concordance {
        assert_eq!(row.stat.mean, 1.0, "{row:?}");
        assert_eq!(row.stat.sd, 0.0);
    }
    let conc = report.anova.iter().find(|a| a.metric == "concordance").unwrap();
    assert_eq!(conc.f_statistic, Some(0.0));
    assert_eq!(conc.p_value, 1.0);
    assert_eq!((conc.df_between, conc.df_within), (1, 6));
    assert!(report.recovery.is_empty());
}

#[test]
fn report_cells_rederive_from_intermediates() {
    let config = StudyConfig {
        input: StudyInput::Synthetic(small_world()),
        experts: 3,
        train: quick_train(),
        ..StudyConfig::default()
    };
    let artifacts = run_study(&config, 2).unwrap();
    for (mode, ds) in &artifacts.datasets {
        for id in &artifacts.report.experts {
            let c = concordance(id, ds, *mode, config.iou_threshold).unwrap();
            let scores: Vec<f64> = c.per_image.iter().map(|i| i.score).collect();
            let row = artifacts
                .report
                .concordance
                .iter()
                .find(|r| r.mode == *mode && &r.annotator == id)
                .unwrap();
            assert_eq!(row.stat, summarize(&scores).unwrap());
        }
    }
    // 3 experts: 3 singles + 2 combined sets, two losses, two modes
    assert_eq!(artifacts.report.classifier.len(), 5 * 2 * 2);
    let modes: Vec<ModeKind> = artifacts.datasets.iter().map(|(m, _)| *m).collect();
    assert_eq!(modes, ModeKind::ALL.to_vec());
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let config = StudyConfig {
        input: StudyInput::Synthetic(small_world()),
        experts: 3,
        train: quick_train(),
        ..StudyConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_report(d.path(), &run_study(&config, 3).unwrap()).unwrap();
    }
    for name in REPORT_FILES {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn stage_errors_name_the_stage() {
    let config = StudyConfig {
        input: StudyInput::Files {
            dataset: "/nonexistent/ds.json".into(),
            scores: None,
            negatives: None,
        },
        ..StudyConfig::default()
    };
    let err = run_study(&config, 0).unwrap_err().to_string();
    assert!(err.contains("load"), "{err}");
}
