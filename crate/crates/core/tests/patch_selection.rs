use annoconsensus::patches::{check_selection, select_patches, PatchCandidate, PatchSelectionConfig};
use annoconsensus::Error;
use proptest::prelude::*;

fn candidates() -> impl Strategy<Value = Vec<PatchCandidate>> {
    prop::collection::vec(
        (0usize..5, prop::bool::ANY, prop::collection::vec(0usize..15, 5)),
        4..40,
    )
    .prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(k, (slide, stain, counts))| PatchCandidate {
                patch_id: format!("p{k:03}"),
                slide_id: format!("slide{slide}"),
                stain: if stain { "prussian".into() } else { "turnbull".into() },
                grade_counts: counts,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selections_satisfy_constraints_or_fail_named(
        pool in candidates(),
        target in 1usize..25,
    ) {
        let config = PatchSelectionConfig {
            target_patch_count: target,
            ..PatchSelectionConfig::default()
        };
        match select_patches(&pool, &config) {
            Ok(chosen) => {
                prop_assert_eq!(chosen.len(), target);
                prop_assert!(check_selection(&chosen, &pool, &config).is_ok());
                // independent recount of the hard constraints
                let slides: std::collections::BTreeSet<_> = pool.iter().map(|c| &c.slide_id).collect();
                for s in slides {
                    prop_assert!(chosen.iter().any(|c| &c.slide_id == s));
                }
                let a = chosen.iter().filter(|c| c.stain == "prussian").count() as i64;
                let b = chosen.len() as i64 - a;
                let stains: std::collections::BTreeSet<_> = pool.iter().map(|c| &c.stain).collect();
                if stains.len() == 2 {
                    prop_assert!((a - b).abs() <= 1);
                }
                let ids: std::collections::BTreeSet<_> = chosen.iter().map(|c| &c.patch_id).collect();
                prop_assert_eq!(ids.len(), chosen.len());
            }
            Err(Error::Infeasible(msg)) => prop_assert!(!msg.is_empty()),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn selection_is_deterministic(pool in candidates()) {
        let config = PatchSelectionConfig { target_patch_count: 8, ..PatchSelectionConfig::default() };
        let a = select_patches(&pool, &config).ok();
        let mut reversed = pool.clone();
        reversed.reverse();
        let b = select_patches(&reversed, &config).ok();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn candidates_csv_round_trip() {
    use annoconsensus::patches::{read_candidates_csv, write_candidates_csv};
    let pool: Vec<PatchCandidate> = (0..6)
        .map(|k| PatchCandidate {
            patch_id: format!("p{k}"),
            slide_id: format!("s{}", k % 3),
            stain: if k % 2 == 0 { "a".into() } else { "b".into() },
            grade_counts: vec![k, 1, 0, 2, 7],
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    write_candidates_csv(&path, &pool).unwrap();
    assert_eq!(read_candidates_csv(&path).unwrap(), pool);
    std::fs::write(&path, "patch_id,slide_id,stain,g0\np1,s1,a,x\n").unwrap();
    match read_candidates_csv(&path) {
        Err(Error::Schema { pointer, .. }) => assert_eq!(pointer, "line 2"),
        other => panic!("{other:?}"),
    }
}
