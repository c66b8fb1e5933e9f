//! Per-frame orchestration of gate → refine → score → pick → ReID gate,
//! with the re-entry prior updated exactly once per frame.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchor::{align_query, AnchorBank, AnchorMap};
use crate::association::{associate, pick_best, ScoredCandidate};
use crate::config::RunConfig;
use crate::container::FrameSource;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::heads::AlignmentHeads;
use crate::prior::ReentryPrior;
use crate::reid::{accept_update, displacement, gate, update_anchor_index, GateDecision, IdentityQueue};
use crate::types::{BBox, FrameOutput, PerceptionFrame, QuerySpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Tracking,
    Searching,
}

/// Why a frame ended the way it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    NoGatedProposals,
    NoCandidates,
    BelowTheta,
    GateRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorUpdate {
    Search,
    Redirect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub mode: Mode,
    pub prior: ReentryPrior,
    pub queue: IdentityQueue,
    pub k_star: Option<usize>,
    pub frame_cursor: usize,
}

/// Per-frame audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: u64,
    /// Mode the frame was processed in.
    pub mode: Mode,
    pub outcome: Outcome,
    pub gated: usize,
    pub candidates: usize,
    pub best_proposal: Option<usize>,
    pub fusion_score: Option<f64>,
    pub prior_weight: Option<f64>,
    pub ranking_score: Option<f64>,
    pub gate: Option<GateDecision>,
    pub k_star: Option<usize>,
    pub prior_update: PriorUpdate,
    pub prior_sum: f64,
    pub prior_min: f64,
    /// Wall-clock step time; kept in memory only so persisted diagnostics
    /// stay byte-stable.
    #[serde(skip)]
    pub elapsed_us: u64,
}

impl FrameDiagnostics {
    pub fn status(&self) -> &'static str {
        if self.outcome == Outcome::Accepted {
            "box"
        } else {
            "absent"
        }
    }
}

/// One query bound to one scene.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    bank: &'a AnchorBank,
    heads: AlignmentHeads,
    config: RunConfig,
    map: AnchorMap,
    text_direction: Embedding,
}

impl<'a> Engine<'a> {
    pub fn new(
        bank: &'a AnchorBank,
        heads: AlignmentHeads,
        query: &QuerySpec,
        config: &RunConfig,
    ) -> Result<Self> {
        config.validate()?;
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        let map = if config.pipeline.anchor_map {
            align_query(query, bank, &heads)?
        } else {
            if query.embedding.dim() != heads.text_dim() {
                return Err(Error::dim("query dim differs from text head"));
            }
            AnchorMap::uniform(bank.height, bank.width)
        };
        let text_direction = heads.text_direction(&query.embedding).map_err(|e| match e {
            Error::ZeroVector => Error::Invalid("query embedding projects to zero".into()),
            e => e,
        })?;
        Ok(Engine {
            bank,
            heads,
            config: config.clone(),
            map,
            text_direction,
        })
    }

    pub fn map(&self) -> &AnchorMap {
        &self.map
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn bank(&self) -> &AnchorBank {
        self.bank
    }

    pub fn initial_state(&self) -> EngineState {
        EngineState {
            mode: Mode::Searching,
            prior: ReentryPrior::init(&self.map),
            queue: IdentityQueue::new(self.config.reid.queue_capacity),
            k_star: None,
            frame_cursor: 0,
        }
    }

    fn check_frame(&self, frame: &PerceptionFrame) -> Result<()> {
        let f = &frame.features;
        if f.height() != self.bank.height || f.width() != self.bank.width {
            return Err(Error::dim(format!(
                "frame {} is {}x{}, bank is {}x{}",
                frame.frame_index,
                f.height(),
                f.width(),
                self.bank.height,
                self.bank.width
            )));
        }
        if f.channels() != self.heads.feature_dim() {
            return Err(Error::dim(format!(
                "frame {} has d_v={}, heads expect {}",
                frame.frame_index,
                f.channels(),
                self.heads.feature_dim()
            )));
        }
        Ok(())
    }

    /// Advances the state by one frame.
    pub fn step(
        &self,
        state: &mut EngineState,
        frame: &PerceptionFrame,
    ) -> Result<(FrameOutput, FrameDiagnostics)> {
        let start = Instant::now();
        self.check_frame(frame)?;
        let cfg = &self.config;
        let mode = state.mode;
        let assoc = associate(
            frame,
            &self.map,
            &self.text_direction,
            &self.heads,
            &cfg.association,
        )?;
        let mut diag = FrameDiagnostics {
            frame: frame.frame_index,
            mode,
            outcome: Outcome::NoGatedProposals,
            gated: assoc.gated.len(),
            candidates: assoc.candidates.len(),
            best_proposal: None,
            fusion_score: None,
            prior_weight: None,
            ranking_score: None,
            gate: None,
            k_star: state.k_star,
            prior_update: PriorUpdate::Search,
            prior_sum: 0.0,
            prior_min: 0.0,
            elapsed_us: 0,
        };

        let accepted = self.try_accept(state, frame, mode, assoc.candidates, &mut diag)?;
        let output = match accepted {
            Some((bbox, score, k)) => {
                state.k_star = Some(k);
                let c = self.bank.anchors[k].centroid_f64();
                state.prior.redirect(c, &cfg.prior);
                state.mode = Mode::Tracking;
                diag.prior_update = PriorUpdate::Redirect;
                diag.outcome = Outcome::Accepted;
                diag.k_star = Some(k);
                FrameOutput::Box {
                    bbox,
                    score: score as f32,
                }
            }
            None => {
                state.prior.search_update(&cfg.prior);
                state.mode = Mode::Searching;
                diag.prior_update = PriorUpdate::Search;
                FrameOutput::Absent
            }
        };
        state.frame_cursor += 1;
        diag.prior_sum = state.prior.sum();
        diag.prior_min = state.prior.min();
        diag.elapsed_us = start.elapsed().as_micros() as u64;
        Ok((output, diag))
    }

    /// Returns `(box, fusion score, new k*)` when a candidate is accepted.
    fn try_accept(
        &self,
        state: &mut EngineState,
        frame: &PerceptionFrame,
        mode: Mode,
        mut candidates: Vec<ScoredCandidate>,
        diag: &mut FrameDiagnostics,
    ) -> Result<Option<(BBox, f64, usize)>> {
        let cfg = &self.config;
        if diag.gated == 0 {
            diag.outcome = Outcome::NoGatedProposals;
            return Ok(None);
        }
        if candidates.is_empty() {
            diag.outcome = Outcome::NoCandidates;
            return Ok(None);
        }
        if mode == Mode::Searching && cfg.prior.enabled {
            state
                .prior
                .reweight(&mut candidates, |i| frame.proposals[i].mask.clone(), &self.map)?;
        }
        let best = pick_best(&candidates, cfg.association.theta).or_else(|| {
            // record the would-be winner for the audit trail
            let top = candidates
                .iter()
                .reduce(|a, c| if c.ranking_score > a.ranking_score { c } else { a });
            if let Some(t) = top {
                diag.best_proposal = Some(t.proposal_index);
                diag.fusion_score = Some(t.fusion_score);
                diag.prior_weight = Some(t.prior_weight);
                diag.ranking_score = Some(t.ranking_score);
            }
            None
        });
        let Some(best) = best else {
            diag.outcome = Outcome::BelowTheta;
            return Ok(None);
        };
        diag.best_proposal = Some(best.proposal_index);
        diag.fusion_score = Some(best.fusion_score);
        diag.prior_weight = Some(best.prior_weight);
        diag.ranking_score = Some(best.ranking_score);

        let proposal = &frame.proposals[best.proposal_index];
        let centroid = state.k_star.map(|k| self.bank.anchors[k].centroid_f64());
        let d = displacement(&proposal.mask, centroid, self.bank.height, self.bank.width)?;
        let mut decision = gate(
            &proposal.identity,
            best.anchor_response_mask,
            d,
            &state.queue,
            &cfg.reid,
        );
        if !decision.accepted {
            diag.gate = Some(decision);
            diag.outcome = Outcome::GateRejected;
            return Ok(None);
        }
        match accept_update(&mut state.queue, &proposal.identity, &cfg.reid) {
            Ok(()) => {}
            Err(Error::ZeroVector) => {
                diag.gate = Some(decision);
                diag.outcome = Outcome::GateRejected;
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
        let k = update_anchor_index(&proposal.mask, self.bank)?;
        decision.new_anchor_index = Some(k);
        diag.gate = Some(decision);
        Ok(Some((proposal.bbox, best.fusion_score, k)))
    }

    /// Runs every frame of `source`, calling `observe` after each step.
    pub fn run_with(
        &self,
        source: &dyn FrameSource,
        mut observe: impl FnMut(&EngineState, &FrameDiagnostics) -> Result<()>,
    ) -> Result<RunOutput> {
        let ext = source.extent();
        if ext.height != self.bank.height || ext.width != self.bank.width {
            return Err(Error::dim(format!(
                "trace is {}x{}, bank is {}x{}",
                ext.height, ext.width, self.bank.height, self.bank.width
            )));
        }
        let n = source.num_frames();
        let mut state = self.initial_state();
        let mut trajectory = Vec::with_capacity(n);
        let mut diagnostics = Vec::with_capacity(n);
        for i in 0..n {
            let frame = source.frame(i)?;
            let (out, diag) = self.step(&mut state, &frame)?;
            observe(&state, &diag)?;
            trajectory.push(out);
            diagnostics.push(diag);
        }
        Ok(RunOutput {
            trajectory,
            diagnostics,
            prior_degenerate: state.prior.degenerate,
            map_clamped: self.map.clamped,
        })
    }

    pub fn run(&self, source: &dyn FrameSource) -> Result<RunOutput> {
        self.run_with(source, |_, _| Ok(()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<FrameDiagnostics>,
    /// The prior fell back to uniform because the anchor map had no mass.
    pub prior_degenerate: bool,
    pub map_clamped: bool,
}

/// Builds the engine and runs it over `source`.
pub fn run(
    source: &dyn FrameSource,
    query: &QuerySpec,
    bank: &AnchorBank,
    heads: AlignmentHeads,
    config: &RunConfig,
) -> Result<RunOutput> {
    Engine::new(bank, heads, query, config)?.run(source)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub frame: u64,
    pub status: String,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub score: Option<f32>,
    pub gate_score: Option<f64>,
    pub mode: Mode,
}

pub fn trajectory_records(out: &RunOutput) -> Vec<TrajectoryRecord> {
    out.trajectory
        .iter()
        .zip(&out.diagnostics)
        .map(|(o, d)| TrajectoryRecord {
            frame: d.frame,
            status: d.status().to_string(),
            bbox: o.bbox(),
            score: o.score(),
            gate_score: d.gate.as_ref().map(|g| g.gate_score),
            mode: d.mode,
        })
        .collect()
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(&it).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn trajectory_jsonl(out: &RunOutput) -> String {
    jsonl(trajectory_records(out))
}

pub fn diagnostics_jsonl(out: &RunOutput) -> String {
    jsonl(&out.diagnostics)
}

/// Gate decisions only, one line per frame that reached the gate.
pub fn gate_jsonl(out: &RunOutput) -> String {
    #[derive(Serialize)]
    struct GateLine {
        frame: u64,
        #[serde(rename = "G")]
        g: f64,
        sim: f64,
        anchor_evidence: f64,
        displacement: f64,
        accepted: bool,
        k_star: Option<usize>,
        #[serde(skip_serializing_if = "std::ops::Not::not")]
        cold_start: bool,
    }
    jsonl(out.diagnostics.iter().filter_map(|d| {
        d.gate.as_ref().map(|g| GateLine {
            frame: d.frame,
            g: g.gate_score,
            sim: g.sim,
            anchor_evidence: g.anchor_evidence,
            displacement: g.displacement,
            accepted: d.outcome == Outcome::Accepted,
            k_star: d.k_star,
            cold_start: g.cold_start,
        })
    }))
}

/// Parses a trajectory JSONL file back into per-frame outputs.
pub fn parse_trajectory_jsonl(text: &str) -> Result<Vec<TrajectoryRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Invalid(format!("trajectory line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn records_to_trajectory(records: &[TrajectoryRecord]) -> Result<Trajectory> {
    records
        .iter()
        .map(|r| match (r.status.as_str(), r.bbox) {
            ("absent", _) => Ok(FrameOutput::Absent),
            ("box", Some(bbox)) => Ok(FrameOutput::Box {
                bbox,
                score: r.score.unwrap_or(1.0),
            }),
            (s, _) => Err(Error::Invalid(format!("frame {}: bad status `{s}`", r.frame))),
        })
        .collect()
}
