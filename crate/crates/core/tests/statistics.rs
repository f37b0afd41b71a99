use annoconsensus::stats::{anova_groups, f_survival, regularized_incomplete_beta};
use annoconsensus::{anova_oneway, summarize, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use statrs::function::beta::beta_reg;

/// Textbook sums of squares, written out independently.
fn reference_f(groups: &[Vec<f64>]) -> (f64, usize, usize) {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let grand = all.iter().sum::<f64>() / all.len() as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        between += g.len() as f64 * (m - grand).powi(2);
        within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let (d1, d2) = (groups.len() - 1, all.len() - groups.len());
    ((between / d1 as f64) / (within / d2 as f64), d1, d2)
}

#[test]
fn f_and_p_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let k = rng.random_range(2..5);
        let groups: Vec<Vec<f64>> = (0..k)
            .map(|g| {
                let n = rng.random_range(2..15);
                (0..n).map(|_| rng.random_range(0.0..1.0) + 0.1 * g as f64).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = groups.iter().map(Vec::as_slice).collect();
        let got = anova_groups(&refs).unwrap();
        let (f, d1, d2) = reference_f(&groups);
        assert!((got.f_statistic - f).abs() <= 1e-9 * f.max(1.0));
        assert_eq!((got.df_between, got.df_within), (d1, d2));
        let p = 1.0 - FisherSnedecor::new(d1 as f64, d2 as f64).unwrap().cdf(f);
        assert!((got.p_value - p).abs() < 1e-10, "F={f} p={} vs {p}", got.p_value);
    }
}

#[test]
fn survival_and_beta_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let a = rng.random_range(0.1..60.0);
        let b = rng.random_range(0.1..60.0);
        let x = rng.random_range(0.0..1.0);
        let want = beta_reg(a, b, x);
        assert!((regularized_incomplete_beta(x, a, b) - want).abs() < 1e-10, "a={a} b={b} x={x}");
    }
    for (f, d1, d2) in [(81.61, 1.0, 19.0), (1.5, 1.0, 4.0), (0.2, 3.0, 40.0), (5.0, 2.0, 7.0)] {
        let want = 1.0 - FisherSnedecor::new(d1, d2).unwrap().cdf(f);
        assert!((f_survival(f, d1, d2) - want).abs() < 1e-10);
    }
}

#[test]
fn hand_values() {
    let r = anova_oneway(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
    assert_eq!(r.f_statistic, 1.5);
    assert_eq!((r.df_between, r.df_within), (1, 4));
    let r = anova_oneway(&[0.0; 10], &[0.0; 11]);
    assert_eq!(r.unwrap().p_value, 1.0);
    let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..11).map(|i| i as f64 + 3.0).collect();
    let r = anova_oneway(&a, &b).unwrap();
    assert_eq!((r.df_between, r.df_within), (1, 19));
    assert!(matches!(anova_oneway(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVariance { .. })));

    let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
    assert!((s.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(summarize(&[0.82, 0.86]).unwrap().display(2), "μ=0.84 (min=0.82, max=0.86, σ=0.02)");
}
