//! Anchor-conditioned proposal association: spatial gate, refinement,
//! mask-aware pooling and the fused text/anchor score.

use serde::{Deserialize, Serialize};

use crate::anchor::{pool_prototype, AnchorMap};
use crate::embedding::{cosine, Embedding};
use crate::error::{Error, Result};
use crate::exec;
use crate::heads::AlignmentHeads;
use crate::mask::BinaryMask;
use crate::types::{FeatureGrid, PerceptionFrame, Proposal};

/// Which refiner picks the candidate set after the anchor gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RefinerMode {
    /// Top-N by text-visual cosine above a floor.
    #[default]
    Default,
    /// Top-N by the per-proposal `refiner_score` carried in the trace.
    Trace,
    /// Pass every gated proposal through.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationParams {
    pub eta: f64,
    pub lambda: f64,
    pub theta: f64,
    pub refiner: RefinerMode,
    pub top_n: usize,
    pub floor: f64,
    /// Clamp the fusion cosine to [0, 1].
    pub clamp_cosine: bool,
}

impl Default for AssociationParams {
    fn default() -> Self {
        AssociationParams {
            eta: 0.05,
            lambda: 0.6,
            theta: 0.4,
            refiner: RefinerMode::Default,
            top_n: 5,
            floor: 0.0,
            clamp_cosine: true,
        }
    }
}

impl AssociationParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("lambda", self.lambda), ("theta", self.theta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "association.{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if self.top_n == 0 {
            return Err(Error::Config("association.top_n must be ≥ 1".into()));
        }
        if !self.floor.is_finite() {
            return Err(Error::Config("association.floor must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    /// Index into the frame's proposal list.
    pub proposal_index: usize,
    /// Mask-pooled visual feature `g_v(r)` in the d_v space.
    pub visual_embedding: Embedding,
    pub anchor_response_mask: f64,
    pub anchor_response_box: f64,
    /// `cos(φ_v(g_v), g_l)`, unclamped.
    pub text_similarity: f64,
    pub fusion_score: f64,
    /// Spatial prior weight; 1 outside search mode.
    pub prior_weight: f64,
    /// Score used for ranking: `fusion_score · prior_weight`.
    pub ranking_score: f64,
}

/// Indices of proposals whose mean box response on `A` is at least `eta`.
pub fn anchor_gate(proposals: &[Proposal], map: &AnchorMap, eta: f64) -> Vec<usize> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| map.box_mean(&p.bbox) >= eta)
        .map(|(i, _)| i)
        .collect()
}

/// `g_v(r)`: normalized mean feature over the proposal mask.
pub fn pool_visual(proposal: &Proposal, features: &FeatureGrid) -> Result<Embedding> {
    pool_prototype(&proposal.mask, features)
}

/// Mean of `A` over the mask pixels, in [0, 1].
pub fn anchor_response(mask: &BinaryMask, map: &AnchorMap) -> Result<f64> {
    map.mask_mean(mask)
}

/// Cosine between the projected visual feature and the text direction.
pub fn text_visual_similarity(
    visual: &Embedding,
    text_direction: &Embedding,
    heads: &AlignmentHeads,
) -> Result<f64> {
    let v = heads.project_visual(visual)?;
    cosine(&v, text_direction)
}

/// `λ·cos⁺ + (1−λ)·Ā_m`; `cos⁺` is the similarity clamped to [0, 1] when
/// `clamp` is set.
pub fn fuse(text_similarity: f64, anchor_response_mask: f64, lambda: f64, clamp: bool) -> f64 {
    let c = if clamp {
        text_similarity.clamp(0.0, 1.0)
    } else {
        text_similarity
    };
    lambda * c + (1.0 - lambda) * anchor_response_mask
}

/// Fusion score for a pooled candidate. Zero-norm embeddings score 0.
pub fn fusion_score(
    visual: &Embedding,
    anchor_response_mask: f64,
    text_direction: &Embedding,
    heads: &AlignmentHeads,
    lambda: f64,
    clamp: bool,
) -> Result<f64> {
    match text_visual_similarity(visual, text_direction, heads) {
        Ok(s) => Ok(fuse(s, anchor_response_mask, lambda, clamp)),
        Err(Error::ZeroVector) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Pools and scores one proposal. `None` when an embedding has zero norm;
/// such candidates are rejected.
fn score_proposal(
    index: usize,
    frame: &PerceptionFrame,
    map: &AnchorMap,
    text_direction: &Embedding,
    heads: &AlignmentHeads,
    params: &AssociationParams,
) -> Result<Option<ScoredCandidate>> {
    let p = &frame.proposals[index];
    let visual = match pool_visual(p, &frame.features) {
        Ok(v) => v,
        Err(Error::ZeroVector) => return Ok(None),
        Err(e) => return Err(e),
    };
    let sim = match text_visual_similarity(&visual, text_direction, heads) {
        Ok(s) => s,
        Err(Error::ZeroVector) => return Ok(None),
        Err(e) => return Err(e),
    };
    let am = anchor_response(&p.mask, map)?;
    let fusion = fuse(sim, am, params.lambda, params.clamp_cosine);
    Ok(Some(ScoredCandidate {
        proposal_index: index,
        visual_embedding: visual,
        anchor_response_mask: am,
        anchor_response_box: map.box_mean(&p.bbox),
        text_similarity: sim,
        fusion_score: fusion,
        prior_weight: 1.0,
        ranking_score: fusion,
    }))
}

/// Keeps the top `n` of `keys` (descending, ties to the lower index) and
/// returns the survivors in index order.
fn top_n_by<T>(items: Vec<T>, n: usize, key: impl Fn(&T) -> f64, index: impl Fn(&T) -> usize) -> Vec<T> {
    let mut items = items;
    items.sort_by(|a, b| key(b).total_cmp(&key(a)).then(index(a).cmp(&index(b))));
    items.truncate(n);
    items.sort_by_key(|c| index(c));
    items
}

/// Selects the refined candidate set from scored, gated candidates.
pub fn refine(
    frame: &PerceptionFrame,
    candidates: Vec<ScoredCandidate>,
    params: &AssociationParams,
) -> Vec<ScoredCandidate> {
    match params.refiner {
        RefinerMode::None => candidates,
        RefinerMode::Default => {
            let kept: Vec<ScoredCandidate> = candidates
                .into_iter()
                .filter(|c| c.text_similarity >= params.floor)
                .collect();
            top_n_by(kept, params.top_n, |c| c.text_similarity, |c| c.proposal_index)
        }
        RefinerMode::Trace => {
            let score = |c: &ScoredCandidate| frame.proposals[c.proposal_index].refiner_score.map(f64::from);
            let kept: Vec<ScoredCandidate> = candidates
                .into_iter()
                .filter(|c| score(c).is_some_and(|s| s >= params.floor))
                .collect();
            top_n_by(
                kept,
                params.top_n,
                |c| score(c).unwrap_or(f64::NEG_INFINITY),
                |c| c.proposal_index,
            )
        }
    }
}

/// Per-frame association result before the accept threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAssociation {
    /// Proposal indices passing the anchor gate.
    pub gated: Vec<usize>,
    /// Refined, scored candidates in proposal order.
    pub candidates: Vec<ScoredCandidate>,
}

/// Gate, pool, score and refine all proposals of a frame.
pub fn associate(
    frame: &PerceptionFrame,
    map: &AnchorMap,
    text_direction: &Embedding,
    heads: &AlignmentHeads,
    params: &AssociationParams,
) -> Result<FrameAssociation> {
    let gated = anchor_gate(&frame.proposals, map, params.eta);
    if gated.is_empty() {
        return Ok(FrameAssociation {
            gated,
            candidates: Vec::new(),
        });
    }
    let scored: Vec<ScoredCandidate> = exec::map_slice(&gated, |&i| {
        score_proposal(i, frame, map, text_direction, heads, params)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .flatten()
    .collect();
    let candidates = refine(frame, scored, params);
    Ok(FrameAssociation { gated, candidates })
}

/// Argmax of `ranking_score` (ties to the lower proposal index); `None` when
/// the list is empty or the winner's fusion score is below `theta`.
pub fn pick_best(candidates: &[ScoredCandidate], theta: f64) -> Option<&ScoredCandidate> {
    let best = candidates
        .iter()
        .reduce(|best, c| match c.ranking_score.total_cmp(&best.ranking_score) {
            std::cmp::Ordering::Greater => c,
            std::cmp::Ordering::Equal if c.proposal_index < best.proposal_index => c,
            _ => best,
        })?;
    (best.fusion_score >= theta).then_some(best)
}
