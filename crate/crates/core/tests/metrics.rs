#[path = "common/micro.rs"]
mod micro;

use anchorref::metrics::{stratify, AbsenceStratum, SequenceEval, SequenceMeta};

#[test]
fn micro_sequences_match_hand_values() {
    for m in micro::cases() {
        m.gt.validate().unwrap();
        let e = SequenceEval::new(&m.pred, &m.gt).unwrap();
        let close = |a: Option<f64>, b: f64, what: &str| {
            let a = a.unwrap_or_else(|| panic!("{}: {what} undefined", m.name));
            assert!((a - b).abs() < 1e-6, "{}: {what} {a} vs {b}", m.name);
        };
        close(e.miou(), m.miou, "mIoU");
        close(e.map(), m.map, "mAP");
        close(e.idf1(), m.idf1, "IDF1");
        match m.rcr {
            Some(v) => close(e.rcr(0.5), v, "RCR"),
            None => assert_eq!(e.rcr(0.5), None),
        }
        assert_eq!(e.rcl(0.5), m.rcl, "{}: RCL", m.name);
    }
}

#[test]
fn occluded_frames_and_distractor_matches_are_accounted() {
    let m = micro::cases().pop().unwrap();
    let e = SequenceEval::new(&m.pred, &m.gt).unwrap();
    let r = e.report(0.5, None);
    assert_eq!(r.visible_frames, 2);
    assert_eq!(r.predictions, 3);
    assert_eq!((r.absence_frames, r.identity_switches), (1, 1));
}

#[test]
fn length_mismatch_is_an_error() {
    let m = micro::cases().remove(0);
    assert!(SequenceEval::new(&m.pred[1..], &m.gt).is_err());
}

#[test]
fn pooled_rcl_lies_between_strata() {
    let cases = micro::cases();
    let items: Vec<_> = cases
        .iter()
        .map(|m| {
            (
                SequenceEval::new(&m.pred, &m.gt).unwrap(),
                SequenceMeta::from_gt(&m.gt),
            )
        })
        .collect();
    let strata = stratify(&items, 0.5);
    let all = SequenceEval::merged(items.iter().map(|i| &i.0));
    let pooled = all.rcl(0.5).unwrap();
    let vals: Vec<f64> = strata
        .iter()
        .filter(|s| s.axis == "absence")
        .filter_map(|s| s.report.rcl)
        .collect();
    assert!(vals.len() >= 2);
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo <= pooled && pooled <= hi);
    assert_eq!(
        SequenceMeta::from_gt(&cases[3].gt).absence_stratum(),
        AbsenceStratum::Medium
    );
}
