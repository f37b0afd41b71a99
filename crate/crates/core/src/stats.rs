//! Summaries, one-way ANOVA and mitotic-count grading.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModeKind, StudyDataset};

/// Mean, range and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub sd: f64,
    pub n: usize,
}

impl SummaryStat {
    /// Renders as `μ=0.84 (min=0.82, max=0.86, σ=0.01)`.
    pub fn display(&self, decimals: usize) -> String {
        format!(
            "μ={:.d$} (min={:.d$}, max={:.d$}, σ={:.d$})",
            self.mean,
            self.min,
            self.max,
            self.sd,
            d = decimals
        )
    }
}

impl fmt::Display for SummaryStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display(2))
    }
}

pub fn summarize(values: &[f64]) -> Result<SummaryStat> {
    if values.is_empty() {
        return Err(Error::EmptyInput("cannot summarize an empty list".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(SummaryStat {
            mean: min,
            min,
            max,
            sd: 0.0,
            n,
        });
    }
    Ok(SummaryStat {
        // keep min <= mean <= max under rounding
        mean: mean.clamp(min, max),
        min,
        max,
        sd: var.sqrt(),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

impl fmt::Display for AnovaResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = if self.p_value < 0.01 {
            "p<0.01".to_string()
        } else {
            format!("p={:.2}", self.p_value)
        };
        write!(
            f,
            "F({},{})={:.2}, {p}",
            self.df_between, self.df_within, self.f_statistic
        )
    }
}

/// One-way ANOVA comparing two groups.
pub fn anova_oneway(group_a: &[f64], group_b: &[f64]) -> Result<AnovaResult> {
    anova_groups(&[group_a, group_b])
}

/// One-way ANOVA over any number of groups.
///
/// When every observation equals its group mean and all group means agree
/// the test has no information; this is reported as `F = 0, p = 1`.
pub fn anova_groups(groups: &[&[f64]]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData("ANOVA needs at least two groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::EmptyInput("every ANOVA group needs observations".into()));
    }
    let total: usize = groups.iter().map(|g| g.len()).sum();
    if total <= groups.len() {
        return Err(Error::InsufficientData(format!(
            "{total} observations in {} groups leave no within-group degrees of freedom",
            groups.len()
        )));
    }
    let df_between = groups.len() - 1;
    let df_within = total - groups.len();

    let means: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / total as f64;
    let ss_between: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|x| (x - m).powi(2)).sum::<f64>())
        .sum();

    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;
    let means_differ = means.iter().any(|m| *m != means[0]);
    if ms_within == 0.0 {
        if means_differ {
            return Err(Error::ZeroVariance {
                df_between,
                df_within,
            });
        }
        return Ok(AnovaResult {
            f_statistic: 0.0,
            df_between,
            df_within,
            p_value: 1.0,
        });
    }
    let f = (ms_between / ms_within).max(0.0);
    Ok(AnovaResult {
        f_statistic: f,
        df_between,
        df_within,
        p_value: f_survival(f, df_between as f64, df_within as f64),
    })
}

/// Upper tail `P(F > f)` of the F distribution.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    let x = d2 / (d2 + d1 * f);
    regularized_incomplete_beta(x, d2 / 2.0, d1 / 2.0).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the fraction converges fast for x < (a + 1) / (a + b + 2)
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Mitotic-count threshold for tumour grading.
pub const GRADING_THRESHOLD: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeDecision {
    Below,
    AtOrAbove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountDirection {
    Over,
    Under,
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingDecision {
    pub mitotic_count: u32,
    pub reference_count: u32,
    pub threshold: u32,
    pub decision: GradeDecision,
    pub direction_vs_reference: CountDirection,
}

/// Grades one case. The boundary is closed: a count equal to the
/// threshold is `AtOrAbove`. Counts are per case region; normalizing to an
/// area is left to the caller.
pub fn grade_case(expert_count: u32, reference_count: u32, threshold: u32) -> GradingDecision {
    GradingDecision {
        mitotic_count: expert_count,
        reference_count,
        threshold,
        decision: if expert_count >= threshold {
            GradeDecision::AtOrAbove
        } else {
            GradeDecision::Below
        },
        direction_vs_reference: match expert_count.cmp(&reference_count) {
            std::cmp::Ordering::Greater => CountDirection::Over,
            std::cmp::Ordering::Less => CountDirection::Under,
            std::cmp::Ordering::Equal => CountDirection::Equal,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradingTally {
    pub over: usize,
    pub under: usize,
    pub equal: usize,
    /// Cases whose grade decision differs from the reference's.
    pub grade_changed: usize,
}

impl GradingTally {
    pub fn from_decisions<'a>(decisions: impl IntoIterator<Item = &'a GradingDecision>) -> Self {
        let mut t = Self::default();
        for d in decisions {
            match d.direction_vs_reference {
                CountDirection::Over => t.over += 1,
                CountDirection::Under => t.under += 1,
                CountDirection::Equal => t.equal += 1,
            }
            let reference_grade = d.reference_count >= d.threshold;
            if reference_grade != (d.decision == GradeDecision::AtOrAbove) {
                t.grade_changed += 1;
            }
        }
        t
    }
}

impl fmt::Display for GradingTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} cases over-estimated, {} under-estimated, {} equal",
            self.over, self.under, self.equal
        )
    }
}

/// Seconds per image for one annotator over the images of `mode` that
/// have a recorded duration.
pub fn timing_summary(ds: &StudyDataset, mode: ModeKind, annotator: &str) -> Result<SummaryStat> {
    let secs: Vec<f64> = ds
        .images_in_mode(mode)
        .filter_map(|i| i.durations.get(annotator).copied())
        .collect();
    if secs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no recorded durations for {annotator:?} in {mode} mode"
        )));
    }
    summarize(&secs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageRecord, TaskKind};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn summary_examples() {
        let s = summarize(&[5.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.sd, s.n), (5.0, 5.0, 5.0, 0.0, 1));
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((summarize(&[0.82, 0.86]).unwrap().mean - 0.84).abs() < 1e-15);
        assert!(matches!(summarize(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn summary_renders_like_report_lines() {
        let s = SummaryStat {
            mean: 0.84,
            min: 0.82,
            max: 0.86,
            sd: 0.01,
            n: 10,
        };
        assert_eq!(s.to_string(), "μ=0.84 (min=0.82, max=0.86, σ=0.01)");
    }

    #[test]
    fn anova_examples() {
        let r = anova_oneway(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.f_statistic, 1.5);
        assert_eq!((r.df_between, r.df_within), (1, 4));

        let r = anova_oneway(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.f_statistic, r.p_value), (0.0, 1.0));

        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let b: Vec<f64> = (0..11).map(|i| f64::from(i) + 0.5).collect();
        let r = anova_oneway(&a, &b).unwrap();
        assert_eq!((r.df_between, r.df_within), (1, 19));
    }

    #[test]
    fn zero_variance_paths() {
        assert!(matches!(
            anova_oneway(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::ZeroVariance { df_between: 1, df_within: 2 })
        ));
        let r = anova_oneway(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((r.f_statistic, r.p_value), (0.0, 1.0));
        assert!(anova_oneway(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a; I_x(1, b) = 1 - (1 - x)^b
        for x in [0.05, 0.3, 0.5, 0.77, 0.99] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-12);
            assert!((regularized_incomplete_beta(x, 2.5, 1.0) - x.powf(2.5)).abs() < 1e-12);
            assert!((regularized_incomplete_beta(x, 1.0, 3.0) - (1.0 - (1.0 - x).powi(3))).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_gamma_at_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10, "n = {n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn grading_examples() {
        let d = grade_case(7, 7, GRADING_THRESHOLD);
        assert_eq!(d.decision, GradeDecision::AtOrAbove);
        assert_eq!(d.direction_vs_reference, CountDirection::Equal);
        let d = grade_case(5, 9, GRADING_THRESHOLD);
        assert_eq!(d.decision, GradeDecision::Below);
        assert_eq!(d.direction_vs_reference, CountDirection::Under);

        let mut cases: Vec<GradingDecision> = (0..6).map(|_| grade_case(9, 8, 7)).collect();
        cases.extend((0..15).map(|_| grade_case(3, 8, 7)));
        let t = GradingTally::from_decisions(&cases);
        assert_eq!(t.to_string(), "6 cases over-estimated, 15 under-estimated, 0 equal");
        assert_eq!(t.grade_changed, 15);
    }

    #[test]
    fn timing_excludes_missing_durations() {
        let img = |id: &str, d: Option<f64>| ImageRecord {
            image_id: id.into(),
            width: 10.0,
            height: 10.0,
            source_slide_id: "s".into(),
            durations: d.map(|d| BTreeMap::from([("e".to_string(), d)])).unwrap_or_default(),
            mode: None,
        };
        let ds = StudyDataset {
            task: TaskKind::Mitosis,
            images: vec![img("img1", Some(10.0)), img("img2", Some(20.0)), img("img3", None)],
            annotations: vec![],
        };
        let s = timing_summary(&ds, ModeKind::Aided, "e").unwrap();
        assert_eq!((s.mean, s.n), (15.0, 2));
        assert!(timing_summary(&ds, ModeKind::Aided, "nobody").is_err());
    }

    proptest! {
        #[test]
        fn anova_invariances(
            a in proptest::collection::vec(-50.0..50.0f64, 2..12),
            b in proptest::collection::vec(-50.0..50.0f64, 2..12),
            shift in -100.0..100.0f64,
            scale in prop_oneof![-20.0..-0.05f64, 0.05..20.0f64],
        ) {
            let base = anova_oneway(&a, &b).unwrap();
            let swapped = anova_oneway(&b, &a).unwrap();
            prop_assert!((base.f_statistic - swapped.f_statistic).abs() <= 1e-9 * base.f_statistic.max(1.0));
            prop_assert!((base.p_value - swapped.p_value).abs() < 1e-12);
            let sh = |g: &[f64]| g.iter().map(|x| x + shift).collect::<Vec<_>>();
            let sc = |g: &[f64]| g.iter().map(|x| x * scale).collect::<Vec<_>>();
            let shifted = anova_oneway(&sh(&a), &sh(&b)).unwrap();
            let scaled = anova_oneway(&sc(&a), &sc(&b)).unwrap();
            let tol = 1e-9 * base.f_statistic.max(1.0);
            prop_assert!((base.f_statistic - shifted.f_statistic).abs() <= tol);
            prop_assert!((base.f_statistic - scaled.f_statistic).abs() <= tol);
            prop_assert!(base.f_statistic >= 0.0);
        }

        #[test]
        fn p_decreases_with_f(f1 in 0.0..50.0f64, f2 in 0.0..50.0f64, d1 in 1usize..5, d2 in 2usize..40) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(f_survival(lo, d1 as f64, d2 as f64) >= f_survival(hi, d1 as f64, d2 as f64));
        }

        #[test]
        fn constant_lists_have_zero_sd(x in -1e3..1e3f64, k in 1usize..50) {
            prop_assert_eq!(summarize(&vec![x; k]).unwrap().sd, 0.0);
        }
    }
}
