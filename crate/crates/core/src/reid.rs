//! Identity continuity gate: a momentum queue of identity embeddings and a
//! logistic accept test mixing appearance, anchor evidence and displacement.

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorBank;
use crate::embedding::{cosine, normalize_f64, Embedding};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub bias: f64,
    pub gamma: f64,
    pub mu: f64,
    pub queue_capacity: usize,
    /// Below this similarity a non-full queue gets a new entry.
    pub novelty_floor: f64,
    /// When off, every picked candidate is accepted; the gate score is still
    /// computed for diagnostics.
    pub enabled: bool,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            alpha1: 2.0,
            alpha2: 1.0,
            alpha3: 1.0,
            bias: -1.5,
            gamma: 0.5,
            mu: 0.9,
            queue_capacity: 8,
            novelty_floor: 0.5,
            enabled: true,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("reid.{name} must be ≥ 0, got {v}")));
            }
        }
        if !self.bias.is_finite() {
            return Err(Error::Config("reid.bias must be finite".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("mu", self.mu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("reid.{name} must be in [0, 1], got {v}")));
            }
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("reid.queue_capacity must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Bounded momentum queue of unit identity embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdentityQueue {
    entries: Vec<Embedding>,
    capacity: usize,
}

impl IdentityQueue {
    pub fn new(capacity: usize) -> Self {
        IdentityQueue {
            entries: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn from_entries(capacity: usize, entries: Vec<Embedding>) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Invalid("more queue entries than capacity".into()));
        }
        let entries = entries
            .into_iter()
            .map(|e| e.normalized())
            .collect::<Result<Vec<_>>>()?;
        Ok(IdentityQueue { entries, capacity })
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `(index, max cosine)` over the entries; `None` for an empty queue.
    fn best_match(&self, h: &Embedding) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, q) in self.entries.iter().enumerate() {
            let s = cosine(h, q).unwrap_or(0.0);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }
}

/// `max_j cos(h, q_j)`; `None` signals a new identity (empty queue).
pub fn sim_reid(h: &Embedding, queue: &IdentityQueue) -> Option<f64> {
    queue.best_match(h).map(|(_, s)| s)
}

/// Mask centroid distance to the anchor centroid over the image diagonal.
/// Zero when there is no current anchor.
pub fn displacement(
    mask: &BinaryMask,
    anchor_centroid: Option<(f64, f64)>,
    height: usize,
    width: usize,
) -> Result<f64> {
    let (r, c) = mask.centroid()?;
    let Some((ar, ac)) = anchor_centroid else {
        return Ok(0.0);
    };
    let diag = ((height * height + width * width) as f64).sqrt();
    Ok(((r - ar).hypot(c - ac) / diag).min(1.0))
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `σ(α₁·sim + α₂·Ā_m − α₃·Δ̂ + b)`.
pub fn gate_score(params: &GateParams, sim: f64, anchor_evidence: f64, displacement: f64) -> f64 {
    logistic(
        params.alpha1 * sim + params.alpha2 * anchor_evidence - params.alpha3 * displacement + params.bias,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub accepted: bool,
    pub gate_score: f64,
    pub sim: f64,
    /// The queue was empty and `sim` was taken as 1.
    pub cold_start: bool,
    pub displacement: f64,
    pub anchor_evidence: f64,
    pub new_anchor_index: Option<usize>,
}

/// Evaluates the gate. An empty queue scores `sim = 1` so a fresh track can
/// start.
pub fn gate(
    identity: &Embedding,
    anchor_evidence: f64,
    displacement: f64,
    queue: &IdentityQueue,
    params: &GateParams,
) -> GateDecision {
    let (sim, cold_start) = match sim_reid(identity, queue) {
        Some(s) => (s, false),
        None => (1.0, true),
    };
    let g = gate_score(params, sim, anchor_evidence, displacement);
    GateDecision {
        accepted: !params.enabled || g >= params.gamma,
        gate_score: g,
        sim,
        cold_start,
        displacement,
        anchor_evidence,
        new_anchor_index: None,
    }
}

/// Adds `h` to the queue, or momentum-updates the best-matching entry.
pub fn accept_update(queue: &mut IdentityQueue, h: &Embedding, params: &GateParams) -> Result<()> {
    let h = h.normalized()?;
    let Some((idx, sim)) = queue.best_match(&h) else {
        queue.entries.push(h);
        return Ok(());
    };
    if queue.entries.len() < queue.capacity && sim < params.novelty_floor {
        queue.entries.push(h);
        return Ok(());
    }
    let mu = params.mu;
    let q = &queue.entries[idx];
    let mixed: Vec<f64> = q
        .as_slice()
        .iter()
        .zip(h.as_slice())
        .map(|(&a, &b)| mu * f64::from(a) + (1.0 - mu) * f64::from(b))
        .collect();
    queue.entries[idx] = match normalize_f64(&mixed) {
        Ok(e) => e,
        // exact cancellation; keep the newer observation
        Err(Error::ZeroVector) => h,
        Err(e) => return Err(e),
    };
    Ok(())
}

/// `argmax_k IoU(M_r, M_k)`, ties to the lower index; nearest centroid
/// when no anchor overlaps.
pub fn update_anchor_index(mask: &BinaryMask, bank: &AnchorBank) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if mask.popcount() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, a) in bank.anchors.iter().enumerate() {
        let iou = mask.iou(&a.mask);
        if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
            best = Some((k, iou));
        }
    }
    if let Some((k, _)) = best {
        return Ok(k);
    }
    let (r, c) = mask.centroid()?;
    let mut nearest = (0usize, f64::INFINITY);
    for (k, a) in bank.anchors.iter().enumerate() {
        let (ar, ac) = a.centroid_f64();
        let d = (r - ar).hypot(c - ac);
        if d < nearest.1 {
            nearest = (k, d);
        }
    }
    Ok(nearest.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::{Anchor, BankInfo};
    use crate::types::BBox;
    use proptest::prelude::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn sim_reid_examples() {
        let mut q = IdentityQueue::new(4);
        assert_eq!(sim_reid(&e(&[1.0, 0.0]), &q), None);
        q.entries = vec![e(&[1.0, 0.0]), e(&[0.6, 0.8])];
        assert_eq!(sim_reid(&e(&[1.0, 0.0]), &q), Some(1.0));
        q.entries = vec![e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])];
        assert_eq!(sim_reid(&e(&[1.0, 0.0, 0.0]), &q), Some(0.0));
    }

    #[test]
    fn displacement_examples() {
        let one = |r: usize, c: usize| BinaryMask::from_fn(100, 100, move |y, x| y == r && x == c);
        assert_eq!(
            displacement(&one(10, 10), Some((10.0, 10.0)), 100, 100).unwrap(),
            0.0
        );
        let d = displacement(&one(50, 20), Some((50.0, 70.0)), 100, 100).unwrap();
        assert!((d - 0.3536).abs() < 1e-3);
        let m = BinaryMask::from_fn(101, 101, |y, x| y == 0 && x == 0);
        assert!((displacement(&m, Some((100.0, 100.0)), 100, 100).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(displacement(&one(3, 3), None, 100, 100).unwrap(), 0.0);
        assert!(displacement(&BinaryMask::empty(4, 4), None, 4, 4).is_err());
    }

    #[test]
    fn gate_examples() {
        let zero = GateParams {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            bias: 0.0,
            ..GateParams::default()
        };
        let q = IdentityQueue::from_entries(4, vec![e(&[1.0, 0.0])]).unwrap();
        let d = gate(&e(&[0.0, 1.0]), 0.3, 0.2, &q, &zero);
        assert_eq!(d.gate_score, 0.5);
        assert!(d.accepted);

        let p = GateParams {
            bias: 0.0,
            ..GateParams::default()
        };
        let g = gate_score(&p, 0.9, 0.5, 0.3536);
        assert!((g - 0.875).abs() < 1e-3);
        assert!((g - logistic(1.9464)).abs() < 1e-12);

        let steep = GateParams {
            alpha1: 50.0,
            ..GateParams::default()
        };
        let d = gate(&e(&[-1.0, 0.0]), 0.5, 0.0, &q, &steep);
        assert!(d.gate_score < 1e-12);
        assert!(!d.accepted);

        let cold = gate(
            &e(&[0.0, 1.0]),
            0.0,
            0.0,
            &IdentityQueue::new(4),
            &GateParams::default(),
        );
        assert!(cold.cold_start);
        assert_eq!(cold.sim, 1.0);
    }

    #[test]
    fn accept_update_examples() {
        let p = GateParams::default();
        let mut q = IdentityQueue::new(4);
        accept_update(&mut q, &e(&[0.0, 1.0]), &p).unwrap();
        assert_eq!(q.entries(), &[e(&[0.0, 1.0])]);

        let full = GateParams {
            mu: 0.5,
            queue_capacity: 1,
            ..GateParams::default()
        };
        let mut q = IdentityQueue::from_entries(1, vec![e(&[1.0, 0.0])]).unwrap();
        accept_update(&mut q, &e(&[0.0, 1.0]), &full).unwrap();
        let v = q.entries()[0].as_slice();
        assert!((v[0] - 0.70710677).abs() < 1e-4 && (v[1] - 0.70710677).abs() < 1e-4);

        let frozen = GateParams {
            mu: 1.0,
            ..GateParams::default()
        };
        let mut q = IdentityQueue::from_entries(4, vec![e(&[0.6, 0.8])]).unwrap();
        accept_update(&mut q, &e(&[1.0, 0.0]), &frozen).unwrap();
        assert_eq!(q.entries()[0], e(&[0.6, 0.8]));

        // novel, non-full queue appends
        let mut q = IdentityQueue::from_entries(4, vec![e(&[1.0, 0.0])]).unwrap();
        accept_update(&mut q, &e(&[0.0, 1.0]), &p).unwrap();
        assert_eq!(q.len(), 2);
    }

    fn bank(masks: Vec<BinaryMask>) -> AnchorBank {
        let anchors = masks
            .into_iter()
            .map(|m| {
                let (r, c) = m.centroid().unwrap();
                Anchor {
                    mask: m,
                    prototype: Embedding::basis(2, 0),
                    centroid: [r as f32, c as f32],
                }
            })
            .collect();
        AnchorBank {
            height: 20,
            width: 20,
            feature_dim: 2,
            anchors,
            info: BankInfo {
                requested_k: 4,
                discovered: 4,
                truncated: false,
                t0: 2,
                t_star: 0,
                static_threshold: 1e-3,
                min_area: 1,
                static_pixels: 0,
                source_digest: String::new(),
            },
        }
    }

    #[test]
    fn anchor_index_examples() {
        let b = |x0, y0, x1, y1| BinaryMask::from_box(20, 20, &BBox::new(x0, y0, x1, y1));
        let bk = bank(vec![
            b(0, 0, 4, 4),
            b(5, 0, 9, 4),
            b(0, 10, 4, 14),
            b(12, 12, 16, 16),
        ]);
        assert_eq!(update_anchor_index(&b(12, 12, 16, 16), &bk).unwrap(), 3);
        // overlaps anchor 1 by half, anchor 0 by a sliver
        let m = b(3, 0, 7, 4);
        assert_eq!(update_anchor_index(&m, &bk).unwrap(), 1);
        assert_eq!(update_anchor_index(&b(0, 16, 3, 19), &bk).unwrap(), 2);
        assert_eq!(update_anchor_index(&b(17, 17, 19, 19), &bk).unwrap(), 3);
    }

    fn unit(v: Vec<f32>) -> Embedding {
        Embedding::new(v).normalized().unwrap()
    }

    proptest! {
        #[test]
        fn gate_monotone(sim in -1.0f64..1.0, a in 0.0f64..1.0, d in 0.0f64..1.0,
                         a1 in 0.1f64..4.0, a2 in 0.1f64..4.0, a3 in 0.1f64..4.0, b in -3.0f64..3.0) {
            let p = GateParams { alpha1: a1, alpha2: a2, alpha3: a3, bias: b, ..GateParams::default() };
            let h = 1e-3;
            let g = gate_score(&p, sim, a, d);
            prop_assert!(gate_score(&p, sim + h, a, d) > g);
            prop_assert!(gate_score(&p, sim, a + h, d) > g);
            prop_assert!(gate_score(&p, sim, a, d + h) < g);
        }

        #[test]
        fn queue_stays_unit(obs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..40), mu in 0.0f64..1.0) {
            let p = GateParams { mu, queue_capacity: 3, ..GateParams::default() };
            let mut q = IdentityQueue::new(3);
            for v in obs {
                if let Ok(h) = Embedding::new(v).normalized() {
                    accept_update(&mut q, &h, &p).unwrap();
                }
                prop_assert!(q.len() <= 3);
                for e in q.entries() {
                    prop_assert!((e.norm() - 1.0).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn sim_reid_permutation_invariant(entries in prop::collection::vec(prop::collection::vec(0.1f32..1.0, 3), 1..6), h in prop::collection::vec(0.1f32..1.0, 3)) {
            let es: Vec<Embedding> = entries.into_iter().map(unit).collect();
            let q = IdentityQueue::from_entries(8, es.clone()).unwrap();
            let mut rev = es;
            rev.reverse();
            let r = IdentityQueue::from_entries(8, rev).unwrap();
            let h = unit(h);
            prop_assert_eq!(sim_reid(&h, &q), sim_reid(&h, &r));
        }

        #[test]
        fn frozen_momentum_is_idempotent(h in prop::collection::vec(0.1f32..1.0, 3)) {
            let p = GateParams { mu: 1.0, queue_capacity: 1, ..GateParams::default() };
            let mut q = IdentityQueue::from_entries(1, vec![unit(vec![1.0, 0.2, 0.1])]).unwrap();
            let h = unit(h);
            accept_update(&mut q, &h, &p).unwrap();
            let once = q.clone();
            accept_update(&mut q, &h, &p).unwrap();
            prop_assert_eq!(once, q);
        }
    }
}
