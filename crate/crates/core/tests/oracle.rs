#[path = "common/oracle.rs"]
mod oracle;

use anchorref::association::{associate, pick_best, AssociationParams};

#[test]
fn fusion_matches_brute_force_on_random_frames() {
    let params = AssociationParams {
        eta: 0.2,
        ..AssociationParams::default()
    };
    let mut picks = 0;
    for seed in 0..200 {
        let case = oracle::random_case(seed);
        let dir = case.heads.text_direction(&case.query).unwrap();
        let got = associate(&case.frame, &case.map, &dir, &case.heads, &params).unwrap();
        let (want, want_pick) = oracle::brute_force(&case, &params);
        let got_idx: Vec<usize> = got.candidates.iter().map(|c| c.proposal_index).collect();
        let want_idx: Vec<usize> = want.iter().map(|w| w.0).collect();
        assert_eq!(got_idx, want_idx, "seed {seed}");
        for (c, w) in got.candidates.iter().zip(&want) {
            assert!(
                (c.fusion_score - w.1).abs() < 1e-5,
                "seed {seed}: {} vs {}",
                c.fusion_score,
                w.1
            );
        }
        let pick = pick_best(&got.candidates, params.theta).map(|c| c.proposal_index);
        assert_eq!(pick, want_pick, "seed {seed}");
        picks += usize::from(pick.is_some());
    }
    // the generator must exercise both outcomes
    assert!(picks > 20 && picks < 190, "{picks}");
}

#[test]
fn unclamped_and_permissive_variants_match_too() {
    let params = AssociationParams {
        eta: 0.0,
        clamp_cosine: false,
        top_n: 3,
        floor: -0.2,
        theta: 0.1,
        ..AssociationParams::default()
    };
    for seed in 1000..1100 {
        let case = oracle::random_case(seed);
        let dir = case.heads.text_direction(&case.query).unwrap();
        let got = associate(&case.frame, &case.map, &dir, &case.heads, &params).unwrap();
        let (want, want_pick) = oracle::brute_force(&case, &params);
        assert_eq!(got.candidates.len(), want.len());
        for (c, w) in got.candidates.iter().zip(&want) {
            assert_eq!(c.proposal_index, w.0);
            assert!((c.fusion_score - w.1).abs() < 1e-5);
        }
        assert_eq!(
            pick_best(&got.candidates, params.theta).map(|c| c.proposal_index),
            want_pick
        );
    }
}
