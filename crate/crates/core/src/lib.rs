//! Annotation consensus, flaw injection and vote-weighted training for
//! cell-annotation studies.
//!
//! ```
//! use annoconsensus::{iou, BoundingBox};
//!
//! let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
//! let b = BoundingBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
//! assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
//! ```

pub mod classifier;
pub mod error;
pub mod experiment;
pub mod flaws;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod patches;
pub mod simulate;
pub mod synthetic;
pub mod stats;
pub mod study;

pub use classifier::{
    build_training_set, train, training_subsets, Architecture, ClassifierModel, FeatureExtractor,
    LabeledSet, TrainConfig, TrainOutcome,
};
pub use error::{Error, Result};
pub use flaws::{
    inject_asthma, inject_eiph, inject_mitosis, recovery_report, replay, DifficultyThresholds,
    FlawKind, FlawPlan, InjectedFlaw, RecoveryReport,
};
pub use geometry::{
    cluster_consensus, concordance, iou, match_sets, Concordance, ConsensusCluster, MatchResult,
    MatchedPair,
};
pub use loss::{votes_loss, votes_loss_grad, vote_weight, LossKind, VoteWeightedBatch};
pub use model::{
    parse_dataset, validate_dataset, AnnotationRecord, BoundingBox, ImageRecord, ModeKind,
    Provenance, StudyDataset, TaskKind,
};
pub use stats::{anova_oneway, grade_case, summarize, timing_summary, AnovaResult, SummaryStat};
