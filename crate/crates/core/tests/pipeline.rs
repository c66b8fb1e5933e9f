use anchorref::ablation::{run_suite, standard_variants, FULL};
use anchorref::anchor::build_bank;
use anchorref::container::{FrameSource, InMemoryTrace};
use anchorref::pipeline::{diagnostics_jsonl, trajectory_jsonl, Engine, Outcome, PriorUpdate};
use anchorref::sim::{make_suite, SimScene, Suite};
use anchorref::RunConfig;

fn scene(suite: Suite, seed: u64) -> SimScene {
    SimScene::new(make_suite(suite, &[seed]).remove(0)).unwrap()
}

#[test]
fn prior_stays_a_distribution_through_adversarial_run() {
    let s = scene(Suite::Ablation, 0);
    assert_eq!(s.num_frames(), 600);
    let cfg = RunConfig::default();
    let bank = build_bank(&s, &cfg.anchor.bank_params()).unwrap();
    let e = Engine::new(&bank, cfg.heads(32, 32).unwrap(), s.query(), &cfg).unwrap();
    let mut redirects = 0;
    let out = e
        .run_with(&s, |st, d| {
            let v = st.prior.values();
            let sum: f64 = v.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "frame {}: sum {sum}", d.frame);
            assert!(v.iter().all(|&p| p >= 0.0), "frame {}", d.frame);
            redirects += usize::from(d.prior_update == PriorUpdate::Redirect);
            Ok(())
        })
        .unwrap();
    assert!(redirects > 100 && redirects < 590, "{redirects}");
    assert_eq!(out.trajectory.len(), 600);
}

#[test]
fn acceptances_respect_theta_and_gamma() {
    let cfg = RunConfig::default();
    for seed in [1, 2] {
        let s = scene(Suite::Gating, seed);
        let bank = build_bank(&s, &cfg.anchor.bank_params()).unwrap();
        let e = Engine::new(&bank, cfg.heads(32, 32).unwrap(), s.query(), &cfg).unwrap();
        let out = e.run(&s).unwrap();
        let mut accepted = 0;
        for (o, d) in out.trajectory.iter().zip(&out.diagnostics) {
            assert_eq!(o.is_box(), d.outcome == Outcome::Accepted);
            if o.is_box() {
                accepted += 1;
                assert!(d.fusion_score.unwrap() >= cfg.association.theta);
                assert!(d.gate.as_ref().unwrap().gate_score >= cfg.reid.gamma);
            }
        }
        assert!(accepted > 0);
    }
}

#[test]
fn runs_are_byte_deterministic_and_source_independent() {
    let cfg = RunConfig::default();
    let s = scene(Suite::Latency, 4);
    let bank = build_bank(&s, &cfg.anchor.bank_params()).unwrap();
    let e = Engine::new(&bank, cfg.heads(32, 32).unwrap(), s.query(), &cfg).unwrap();
    let a = e.run(&s).unwrap();
    let b = e.run(&s).unwrap();
    let mem = InMemoryTrace::collect(&s).unwrap();
    let c = e.run(&mem).unwrap();
    assert_eq!(trajectory_jsonl(&a), trajectory_jsonl(&b));
    assert_eq!(diagnostics_jsonl(&a), diagnostics_jsonl(&b));
    assert_eq!(trajectory_jsonl(&a), trajectory_jsonl(&c));
}

#[test]
fn noise_free_suite_is_exact() {
    let seeds: Vec<u64> = (0..10).collect();
    let full: Vec<_> = standard_variants()
        .into_iter()
        .filter(|v| v.name == FULL)
        .collect();
    let t = run_suite(Suite::Clean, &seeds, &RunConfig::default(), &full).unwrap();
    let r = &t.rows[0].report;
    assert_eq!(r.miou, Some(1.0));
    assert_eq!(r.rcl, Some(0.0));
    assert!(r.reentries >= 20);
}
