use std::path::Path;
use std::process::{Command, Output};

use anchorref::container::{write_trace, InMemoryTrace};
use anchorref::types::FeatureGrid;
use anchorref::{Embedding, PerceptionFrame, QuerySpec};
use tempfile::TempDir;

fn anchorref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorref"))
        .args(args)
        .output()
        .expect("spawn anchorref")
}

fn ok(args: &[&str]) -> String {
    let out = anchorref(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    anchorref(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Simulates a clean-suite scene and builds its bank.
fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["simulate", "--suite", "clean", "--seed", "3", "--out", p(d)]);
    ok(&[
        "build-bank",
        "--trace",
        p(&d.join("trace.json")),
        "--out",
        p(&d.join("bank")),
    ]);
    dir
}

fn run(d: &Path, out: &str) -> std::path::PathBuf {
    let o = d.join(out);
    ok(&[
        "run",
        "--trace",
        p(&d.join("trace.json")),
        "--bank",
        p(&d.join("bank/bank.json")),
        "--out",
        p(&o),
    ]);
    o
}

#[test]
fn simulate_bank_run_writes_one_record_per_frame() {
    let dir = fixture();
    let d = dir.path();
    let o = run(d, "run");
    let frames = std::fs::read_to_string(o.join("trajectory.jsonl")).unwrap();
    assert_eq!(frames.lines().count(), 300);
    assert_eq!(
        std::fs::read_to_string(o.join("diagnostics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        300
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(o.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 300);
    assert_eq!(summary["anchor_weights"].as_array().unwrap().len(), 6);
}

#[test]
fn reruns_are_identical() {
    let dir = fixture();
    let a = run(dir.path(), "a");
    let b = run(dir.path(), "b");
    for f in ["trajectory.jsonl", "diagnostics.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_bank_exits_2() {
    let dir = fixture();
    let d = dir.path();
    let c = code(&[
        "run",
        "--trace",
        p(&d.join("trace.json")),
        "--bank",
        p(&d.join("nope.json")),
        "--out",
        p(&d.join("run")),
    ]);
    assert_eq!(c, 2);
}

#[test]
fn bank_respects_k_override() {
    let dir = fixture();
    let d = dir.path();
    let out = ok(&[
        "build-bank",
        "--trace",
        p(&d.join("trace.json")),
        "--out",
        p(&d.join("k4")),
        "--k",
        "4",
        "--format",
        "json",
    ]);
    let s: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(s["requested_k"], 4);
    assert_eq!(s["anchors"], 4);
    let bank: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("k4/bank.json")).unwrap()).unwrap();
    assert_eq!(bank.to_string().matches("\"requested_k\":4").count(), 1);
}

#[test]
fn scene_without_static_pixels_exits_3() {
    let dir = TempDir::new().unwrap();
    let (h, w, c) = (6, 6, 3);
    let frames = (0..8)
        .map(|t| {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            PerceptionFrame {
                frame_index: t,
                mean_brightness: 0.5,
                features: FeatureGrid::new(h, w, c, vec![sign; h * w * c]).unwrap(),
                proposals: Vec::new(),
            }
        })
        .collect();
    let q = QuerySpec {
        text: "anything".into(),
        embedding: Embedding::new(vec![1.0, 0.0, 0.0]),
    };
    let trace = InMemoryTrace::from_frames(frames, vec![q]).unwrap();
    let path = dir.path().join("flicker.json");
    write_trace(&path, &trace).unwrap();
    assert_eq!(code(&["validate", "--trace", p(&path)]), 0);
    let c = code(&[
        "build-bank",
        "--trace",
        p(&path),
        "--out",
        p(&dir.path().join("bank")),
    ]);
    assert_eq!(c, 3);
}

#[test]
fn evaluate_scores_ground_truth_as_perfect() {
    let dir = fixture();
    let d = dir.path();
    let gt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("trace.gt.json")).unwrap()).unwrap();
    let mut lines = String::new();
    for (t, f) in gt["frames"].as_array().unwrap().iter().enumerate() {
        let rec = match f["box"].as_array() {
            Some(b) => {
                serde_json::json!({"frame": t, "status": "box", "box": b, "score": 1.0, "mode": "tracking"})
            }
            None => serde_json::json!({"frame": t, "status": "absent", "mode": "searching"}),
        };
        lines.push_str(&rec.to_string());
        lines.push('\n');
    }
    let traj = d.join("perfect.jsonl");
    std::fs::write(&traj, &lines).unwrap();
    let out = ok(&[
        "evaluate",
        "--trajectory",
        p(&traj),
        "--gt",
        p(&d.join("trace.gt.json")),
        "--format",
        "json",
        "--tau-sweep",
        "0.5,0.75,0.9",
        "--out",
        p(&d.join("eval")),
    ]);
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    for k in ["miou", "map", "idf1", "rcr"] {
        assert_eq!(r[k], 1.0, "{k}");
    }
    assert_eq!(r["rcl"], 0.0);
    assert_eq!(r["rcr_sweep"].as_array().unwrap().len(), 3);
    assert!(d.join("eval/report.json").exists() && d.join("eval/report.txt").exists());

    let short = d.join("short.jsonl");
    std::fs::write(&short, lines.lines().take(10).collect::<Vec<_>>().join("\n")).unwrap();
    let c = code(&[
        "evaluate",
        "--trajectory",
        p(&short),
        "--gt",
        p(&d.join("trace.gt.json")),
    ]);
    assert_eq!(c, 2);
}

#[test]
fn ablate_csv_has_fixed_columns_and_full_beats_baseline() {
    let out = ok(&["ablate", "--suite", "ablation", "--seeds", "3", "--format", "csv"]);
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "variant");
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let order: Vec<usize> = ["miou", "map", "idf1", "rcr", "rcl"]
        .iter()
        .map(|c| col(c))
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{header:?}");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let rcr = |name: &str| -> f64 {
        let r = rows.iter().find(|r| r[0] == name).unwrap();
        r[col("rcr")].parse().unwrap()
    };
    assert!(rcr("full") >= rcr("baseline"), "{out}");
}

#[test]
fn unknown_config_key_exits_2() {
    let c = code(&["--set", "association.no_such_key=1", "ablate", "--seeds", "1"]);
    assert_eq!(c, 2);
}
