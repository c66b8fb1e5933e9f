//! Component ablation over simulated scenario suites.
//!
//! Every configuration sees the same generated frames: each frame is
//! synthesized once and stepped through all engines in lockstep. Seeds run
//! in parallel.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchor::build_bank;
use crate::config::RunConfig;
use crate::container::FrameSource;
use crate::error::Result;
use crate::exec;
use crate::metrics::{EvalReport, SequenceEval, TABLE_COLUMNS};
use crate::pipeline::Engine;
use crate::sim::{make_suite, ScenarioSpec, SimScene, Suite};
use crate::types::FrameOutput;

/// A named set of component switches applied on top of a base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub anchor_map: bool,
    pub gating: bool,
    pub prior: bool,
}

impl Variant {
    pub fn new(name: &str, anchor_map: bool, gating: bool, prior: bool) -> Self {
        Variant {
            name: name.to_string(),
            anchor_map,
            gating,
            prior,
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.pipeline.anchor_map = self.anchor_map;
        c.reid.enabled = self.gating;
        c.prior.enabled = self.prior;
        c
    }
}

pub const BASELINE: &str = "baseline";
pub const WITH_GATING: &str = "+gating";
pub const WITH_PRIOR: &str = "+prior";
pub const FULL: &str = "full";

/// Baseline, anchor map with gating, anchor map with the prior, and all
/// components.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant::new(BASELINE, false, false, false),
        Variant::new(WITH_GATING, true, true, false),
        Variant::new(WITH_PRIOR, true, false, true),
        Variant::new(FULL, true, true, true),
    ]
}

/// Result of one scenario: one evaluation per variant, in variant order.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub evals: Vec<SequenceEval>,
    pub trajectories: Vec<Vec<FrameOutput>>,
}

/// Runs all variants on one scenario.
pub fn run_scenario(spec: &ScenarioSpec, base: &RunConfig, variants: &[Variant]) -> Result<SeedResult> {
    let scene = SimScene::new(spec.clone())?;
    let gt = scene.ground_truth();
    let bank = build_bank(&scene, &base.anchor.bank_params())?;
    let ext = scene.extent();
    let configs: Vec<RunConfig> = variants.iter().map(|v| v.apply(base)).collect();
    let engines = configs
        .iter()
        .map(|c| Engine::new(&bank, c.heads(ext.text_dim, ext.feature_dim)?, scene.query(), c))
        .collect::<Result<Vec<_>>>()?;
    let mut states: Vec<_> = engines.iter().map(Engine::initial_state).collect();
    let n = scene.num_frames();
    let mut trajectories = vec![Vec::with_capacity(n); engines.len()];
    for t in 0..n {
        let frame = scene.frame(t)?;
        for ((e, s), tr) in engines.iter().zip(states.iter_mut()).zip(trajectories.iter_mut()) {
            tr.push(e.step(s, &frame)?.0);
        }
    }
    let evals = trajectories
        .iter()
        .map(|tr| SequenceEval::new(tr, &gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult {
        seed: spec.seed,
        evals,
        trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    /// Pooled over all seeds.
    pub report: EvalReport,
    /// IDF1 per seed, in seed order (`None` when undefined).
    pub per_seed_idf1: Vec<Option<f64>>,
    pub per_seed_rcl: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "suite={} seeds={} tau={}",
            self.suite,
            self.seeds.len(),
            self.tau
        );
        let _ = write!(s, "{:<10} {:>3} {:>3} {:>3}", "variant", "AM", "RG", "RP");
        for c in TABLE_COLUMNS {
            let _ = write!(s, " {c:>8}");
        }
        s.push('\n');
        let mark = |b: bool| if b { "x" } else { "-" };
        for r in &self.rows {
            let v = &r.variant;
            let _ = write!(
                s,
                "{:<10} {:>3} {:>3} {:>3}",
                v.name,
                mark(v.anchor_map),
                mark(v.gating),
                mark(v.prior)
            );
            for c in r.report.table_cells() {
                let _ = write!(s, " {c:>8}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("variant,anchor_map,gating,prior,{}\n", EvalReport::csv_header());
        for r in &self.rows {
            let v = &r.variant;
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                v.name,
                v.anchor_map,
                v.gating,
                v.prior,
                r.report.csv_row()
            );
        }
        s
    }
}

/// Runs `variants` over the given scenarios and pools the metrics.
pub fn run_specs(
    suite: &str,
    specs: &[ScenarioSpec],
    base: &RunConfig,
    variants: &[Variant],
) -> Result<AblationTable> {
    let results = exec::map_slice(specs, |s| run_scenario(s, base, variants))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let tau = base.metrics.tau;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let pooled = SequenceEval::merged(results.iter().map(|r| &r.evals[i]));
            VariantRow {
                variant: v.clone(),
                report: pooled.report(tau, None),
                per_seed_idf1: results.iter().map(|r| r.evals[i].idf1()).collect(),
                per_seed_rcl: results.iter().map(|r| r.evals[i].rcl(tau)).collect(),
            }
        })
        .collect();
    Ok(AblationTable {
        suite: suite.to_string(),
        seeds: specs.iter().map(|s| s.seed).collect(),
        tau,
        rows,
    })
}

pub fn run_suite(
    suite: Suite,
    seeds: &[u64],
    base: &RunConfig,
    variants: &[Variant],
) -> Result<AblationTable> {
    run_specs(suite.name(), &make_suite(suite, seeds), base, variants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_toggle_components() {
        let base = RunConfig::default();
        let v = standard_variants();
        assert_eq!(v.len(), 4);
        let b = v[0].apply(&base);
        assert!(!b.pipeline.anchor_map && !b.reid.enabled && !b.prior.enabled);
        let f = v[3].apply(&base);
        assert!(f.pipeline.anchor_map && f.reid.enabled && f.prior.enabled);
    }

    #[test]
    fn clean_suite_runs() {
        let base = RunConfig::default();
        let t = run_suite(Suite::Clean, &[0], &base, &standard_variants()).unwrap();
        assert_eq!(t.rows.len(), 4);
        let full = t.row(FULL).unwrap();
        assert!(full.report.miou.unwrap() > 0.5, "{}", t.to_text());
        assert!(t.to_csv().lines().count() == 5);
    }
}
