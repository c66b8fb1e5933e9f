//! Deterministic synthetic fixed-view scenes with known answers.
//!
//! Features are built from orthonormal signatures. Static anchor rectangles
//! carry a fixed signature (plus frozen spatial noise), the background is a
//! random texture sampled at a fresh offset every frame so it never looks
//! static, and objects paint an ellipse with their own signature inside
//! their box. The query embedding is a mix of an appearance direction and
//! the signatures of the target's anchors, and alignment heads are the
//! identity, so the anchor map peaks where the target operates.
//!
//! Randomness is ChaCha8 (`rand_chacha`) with normals from `rand_distr`'s
//! `StandardNormal`. Frame `t` draws from stream `t + 1` of the scenario
//! seed, so frames can be generated in any order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{FrameSource, TraceExtent, TraceManifest, TraceWriter};
use crate::embedding::{normalize_f64, Embedding};
use crate::error::{Error, Result};
use crate::heads::orthonormal_vectors;
use crate::mask::BinaryMask;
use crate::metrics::{derive_reentries, GroundTruth, GtFrame, ReentryEvent, Visibility};
use crate::types::{BBox, FeatureGrid, PerceptionFrame, Proposal, QuerySpec};

pub const PRNG_DESCRIPTION: &str =
    "ChaCha8Rng (rand_chacha 0.9) seeded with seed_from_u64; normals from rand_distr 0.5 StandardNormal; frame t uses stream t+1";

const SETUP_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    /// `(row, col)` box centre at the first frame.
    pub from: [f64; 2],
    /// `(row, col)` box centre at the last frame.
    pub to: [f64; 2],
}

impl PathSpec {
    pub fn still(at: [f64; 2]) -> Self {
        PathSpec { from: at, to: at }
    }

    fn at(&self, i: usize, n: usize) -> [f64; 2] {
        let u = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        [
            self.from[0] + (self.to[0] - self.from[0]) * u,
            self.from[1] + (self.to[1] - self.from[1]) * u,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Absent { frames: usize },
    Visible { frames: usize, path: PathSpec },
}

impl Segment {
    pub fn frames(&self) -> usize {
        match self {
            Segment::Absent { frames } | Segment::Visible { frames, .. } => *frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl AnchorSpec {
    /// Centroid of the rectangle's pixels.
    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.bbox.y0) + f64::from(self.bbox.y1) - 1.0) / 2.0,
            (f64::from(self.bbox.x0) + f64::from(self.bbox.x1) - 1.0) / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Box `(height, width)`.
    pub size: [u32; 2],
    /// Cosine between the target's visual signature and the query.
    pub text_affinity: f64,
    /// Index into `anchors` of the anchor the target operates on.
    pub home_anchor: usize,
    /// Must tile the whole sequence.
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub path: PathSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    /// Free-form label, e.g. `decoy` or `lookalike`.
    pub role: String,
    pub size: [u32; 2],
    /// Visual-signature cosine to the target; the signature is rotated from
    /// the target's towards the query.
    pub similarity: f64,
    /// Identity-embedding cosine to the target.
    #[serde(default)]
    pub identity_similarity: f64,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDesign {
    pub text: String,
    /// Weight of the appearance direction.
    pub appearance_weight: f64,
    /// `(anchor index, weight)` pairs.
    pub anchor_weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub num_frames: usize,
    pub anchors: Vec<AnchorSpec>,
    /// Std of the per-frame background texture.
    pub background_clutter: f64,
    /// Std of feature noise on objects (per frame) and anchors (frozen), and
    /// of identity-embedding noise.
    pub noise: f64,
    pub target: TargetSpec,
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
    pub query: QueryDesign,
    /// Random boxes on open background (off every anchor) added as
    /// proposals each frame.
    #[serde(default)]
    pub false_proposals: usize,
    /// Max per-side pixel jitter of proposal boxes.
    #[serde(default)]
    pub box_jitter: u32,
}

fn box_at(center: [f64; 2], size: [u32; 2], h: usize, w: usize) -> BBox {
    let (bh, bw) = (size[0] as f64, size[1] as f64);
    let y0 = (center[0] - bh / 2.0).round().clamp(0.0, h as f64 - bh) as u32;
    let x0 = (center[1] - bw / 2.0).round().clamp(0.0, w as f64 - bw) as u32;
    BBox::new(x0, y0, x0 + size[1], y0 + size[0])
}

impl ScenarioSpec {
    pub fn extent(&self) -> TraceExtent {
        TraceExtent {
            height: self.height,
            width: self.width,
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.height == 0 || self.width == 0 || self.num_frames == 0 {
            return bad("extent and num_frames must be nonzero".into());
        }
        if self.feature_dim != self.text_dim {
            return bad("the simulator uses identity heads and needs d_l == d_v".into());
        }
        if self.anchors.is_empty() {
            return bad("at least one anchor is required".into());
        }
        if self.anchors.len() + 3 > self.feature_dim {
            return bad(format!(
                "{} anchors need feature_dim ≥ {}",
                self.anchors.len(),
                self.anchors.len() + 3
            ));
        }
        if self.distractors.len() + 1 > self.feature_dim {
            return bad("too many distractors for the identity space".into());
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if !a.bbox.is_valid_in(self.height, self.width) {
                return bad(format!("anchor {i} box out of extent"));
            }
            for (j, b) in self.anchors.iter().enumerate().skip(i + 1) {
                let sep = a.bbox.x1 < b.bbox.x0
                    || b.bbox.x1 < a.bbox.x0
                    || a.bbox.y1 < b.bbox.y0
                    || b.bbox.y1 < a.bbox.y0;
                if !sep {
                    return bad(format!("anchors {i} and {j} touch or overlap"));
                }
            }
        }
        let t = &self.target;
        if t.home_anchor >= self.anchors.len() {
            return bad("target.home_anchor out of range".into());
        }
        if !(0.0..=1.0).contains(&t.text_affinity) {
            return bad("target.text_affinity must be in [0, 1]".into());
        }
        let total: usize = t.segments.iter().map(Segment::frames).sum();
        if total != self.num_frames {
            return bad(format!(
                "target segments cover {total} frames, scenario has {}",
                self.num_frames
            ));
        }
        self.check_size(t.size, "target")?;
        for s in &t.segments {
            if let Segment::Visible { path, .. } = s {
                self.check_path(path, t.size, "target")?;
            }
        }
        for (i, d) in self.distractors.iter().enumerate() {
            if !(0.0..=1.0).contains(&d.similarity) || !(0.0..=1.0).contains(&d.identity_similarity) {
                return bad(format!("distractor {i}: similarities must be in [0, 1]"));
            }
            self.check_size(d.size, "distractor")?;
            for v in &d.visits {
                if v.start >= v.end || v.end > self.num_frames {
                    return bad(format!(
                        "distractor {i}: visit {}..{} out of range",
                        v.start, v.end
                    ));
                }
                self.check_path(&v.path, d.size, "distractor")?;
            }
        }
        for (k, w) in &self.query.anchor_weights {
            if *k >= self.anchors.len() || !w.is_finite() {
                return bad("query anchor weight refers to a missing anchor".into());
            }
        }
        if !(self.noise >= 0.0 && self.background_clutter >= 0.0) {
            return bad("noise levels must be ≥ 0".into());
        }
        Ok(())
    }

    fn check_size(&self, size: [u32; 2], what: &str) -> Result<()> {
        if size[0] < 2 || size[1] < 2 || size[0] as usize > self.height || size[1] as usize > self.width {
            return Err(Error::Scenario(format!("{what} size {size:?} invalid")));
        }
        Ok(())
    }

    fn check_path(&self, p: &PathSpec, size: [u32; 2], what: &str) -> Result<()> {
        for c in [p.from, p.to] {
            let half = [size[0] as f64 / 2.0, size[1] as f64 / 2.0];
            let inside = c[0] - half[0] >= -0.5
                && c[0] + half[0] <= self.height as f64 + 0.5
                && c[1] - half[1] >= -0.5
                && c[1] + half[1] <= self.width as f64 + 0.5;
            if !inside {
                return Err(Error::Scenario(format!("{what} path leaves the extent at {c:?}")));
            }
        }
        Ok(())
    }

    /// Target box at frame `t`, or `None` while absent.
    pub fn target_box(&self, t: usize) -> Option<BBox> {
        let mut start = 0;
        for s in &self.target.segments {
            let n = s.frames();
            if t < start + n {
                return match s {
                    Segment::Absent { .. } => None,
                    Segment::Visible { path, .. } => Some(box_at(
                        path.at(t - start, n),
                        self.target.size,
                        self.height,
                        self.width,
                    )),
                };
            }
            start += n;
        }
        None
    }

    pub fn distractor_boxes(&self, t: usize) -> Vec<(usize, BBox)> {
        let mut out = Vec::new();
        for (i, d) in self.distractors.iter().enumerate() {
            for v in &d.visits {
                if (v.start..v.end).contains(&t) {
                    out.push((
                        i,
                        box_at(
                            v.path.at(t - v.start, v.end - v.start),
                            d.size,
                            self.height,
                            self.width,
                        ),
                    ));
                }
            }
        }
        out
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let frames: Vec<GtFrame> = (0..self.num_frames)
            .map(|t| {
                let b = self.target_box(t);
                GtFrame {
                    visibility: if b.is_some() {
                        Visibility::Visible
                    } else {
                        Visibility::Absent
                    },
                    bbox: b,
                    distractors: self.distractor_boxes(t).into_iter().map(|(_, b)| b).collect(),
                }
            })
            .collect();
        let reentries = derive_reentries(&frames)
            .into_iter()
            .map(|frame| ReentryEvent {
                frame,
                anchor: Some(self.target.home_anchor),
            })
            .collect();
        GroundTruth { frames, reentries }
    }

    /// Planted anchor centroids, in spec order.
    pub fn anchor_centers(&self) -> Vec<(f64, f64)> {
        self.anchors.iter().map(AnchorSpec::center).collect()
    }
}

/// A generated scene; frames are synthesized on demand.
#[derive(Debug, Clone)]
pub struct SimScene {
    spec: ScenarioSpec,
    /// `(2H)×(2W)×d` background texture.
    texture: Vec<f32>,
    /// Static anchor features, `H×W×d`, valid where `anchor_id` is set.
    static_layer: Vec<f32>,
    anchor_id: Vec<Option<u16>>,
    target_visual: Vec<f64>,
    target_identity: Vec<f64>,
    distractor_visual: Vec<Vec<f64>>,
    distractor_identity: Vec<Vec<f64>>,
    background_normal: Vec<f64>,
    query: QuerySpec,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn combine(a: f64, u: &[f64], b: f64, v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(x, y)| a * x + b * y).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SimScene {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let (h, w, d) = (spec.height, spec.width, spec.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(SETUP_STREAM);

        let ka = spec.anchors.len();
        // anchors, appearance, target-private, background
        let basis = orthonormal_vectors(d, ka + 3, &mut rng);
        let appearance = &basis[ka];
        let target_private = &basis[ka + 1];
        let background = basis[ka + 2].clone();

        let mut q = appearance
            .iter()
            .map(|x| x * spec.query.appearance_weight)
            .collect::<Vec<f64>>();
        for &(k, wk) in &spec.query.anchor_weights {
            q.iter_mut().zip(&basis[k]).for_each(|(a, b)| *a += wk * b);
        }
        let q_hat = unit(&q);
        let aff = spec.target.text_affinity;
        let target_visual = combine(aff, &q_hat, (1.0 - aff * aff).sqrt(), target_private);
        // query direction orthogonal to the target signature
        let qc = dotf(&q_hat, &target_visual);
        let q_perp = unit(&combine(1.0, &q_hat, -qc, &target_visual));
        let distractor_visual = spec
            .distractors
            .iter()
            .map(|ds| {
                combine(
                    ds.similarity,
                    &target_visual,
                    (1.0 - ds.similarity.powi(2)).sqrt(),
                    &q_perp,
                )
            })
            .collect();

        let ids = orthonormal_vectors(d, spec.distractors.len() + 1, &mut rng);
        let target_identity = ids[0].clone();
        let distractor_identity = spec
            .distractors
            .iter()
            .enumerate()
            .map(|(i, ds)| {
                let s = ds.identity_similarity;
                combine(s, &target_identity, (1.0 - s * s).sqrt(), &ids[i + 1])
            })
            .collect();

        let (th, tw) = (2 * h, 2 * w);
        let clutter = spec.background_clutter;
        let mut texture = Vec::with_capacity(th * tw * d);
        for _ in 0..th * tw {
            for b in &background {
                let n: f64 = StandardNormal.sample(&mut rng);
                texture.push((b + clutter * n) as f32);
            }
        }

        let mut static_layer = vec![0f32; h * w * d];
        let mut anchor_id = vec![None; h * w];
        let noise = spec.noise / (d as f64).sqrt();
        for (k, a) in spec.anchors.iter().enumerate() {
            let b = a.bbox;
            for r in b.y0 as usize..b.y1 as usize {
                for c in b.x0 as usize..b.x1 as usize {
                    anchor_id[r * w + c] = Some(k as u16);
                    let px = &mut static_layer[(r * w + c) * d..(r * w + c + 1) * d];
                    for (o, u) in px.iter_mut().zip(&basis[k]) {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *o = (u + noise * n) as f32;
                    }
                }
            }
        }

        let query = QuerySpec {
            text: spec.query.text.clone(),
            embedding: Embedding::new(to_f32(&q_hat)),
        };
        Ok(SimScene {
            spec,
            texture,
            static_layer,
            anchor_id,
            target_visual,
            target_identity,
            distractor_visual,
            distractor_identity,
            background_normal: background,
            query,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn query(&self) -> &QuerySpec {
        &self.query
    }

    pub fn ground_truth(&self) -> GroundTruth {
        self.spec.ground_truth()
    }

    /// Cosine of an object signature with the query: `(target, distractors)`.
    pub fn text_affinities(&self) -> (f64, Vec<f64>) {
        let q: Vec<f64> = self
            .query
            .embedding
            .as_slice()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        (
            dotf(&q, &self.target_visual),
            self.distractor_visual.iter().map(|v| dotf(&q, v)).collect(),
        )
    }

    pub fn background_direction(&self) -> &[f64] {
        &self.background_normal
    }

    fn frame_rng(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(t as u64 + 1);
        rng
    }

    fn paint(&self, features: &mut FeatureGrid, mask: &BinaryMask, signature: &[f64], rng: &mut ChaCha8Rng) {
        let noise = self.spec.noise / (self.spec.feature_dim as f64).sqrt();
        for (r, c) in mask.iter_ones() {
            for (o, s) in features.pixel_mut(r, c).iter_mut().zip(signature) {
                let n: f64 = if noise > 0.0 {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                *o = (s + noise * n) as f32;
            }
        }
    }

    fn observe_identity(&self, base: &[f64], rng: &mut ChaCha8Rng) -> Embedding {
        let noise = self.spec.noise / (self.spec.feature_dim as f64).sqrt();
        let v: Vec<f64> = base
            .iter()
            .map(|&b| {
                let n: f64 = if noise > 0.0 {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                b + noise * n
            })
            .collect();
        normalize_f64(&v).expect("identity has unit base")
    }

    fn jitter(&self, b: BBox, rng: &mut ChaCha8Rng) -> BBox {
        let j = self.spec.box_jitter as i64;
        if j == 0 {
            return b;
        }
        let (h, w) = (self.spec.height as i64, self.spec.width as i64);
        let mut d = || rng.random_range(-j..=j);
        let x0 = (b.x0 as i64 + d()).clamp(0, w - 2);
        let y0 = (b.y0 as i64 + d()).clamp(0, h - 2);
        let x1 = (b.x1 as i64 + d()).clamp(x0 + 2, w);
        let y1 = (b.y1 as i64 + d()).clamp(y0 + 2, h);
        BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)
    }

    /// Random box on open background, off every anchor; `None` if none was
    /// found in a few tries.
    fn background_box(&self, rng: &mut ChaCha8Rng) -> Option<BBox> {
        let (h, w) = (self.spec.height as u32, self.spec.width as u32);
        for _ in 0..20 {
            let bh = rng.random_range(6..=16u32).min(h);
            let bw = rng.random_range(6..=16u32).min(w);
            let y0 = rng.random_range(0..=(h - bh));
            let x0 = rng.random_range(0..=(w - bw));
            let b = BBox::new(x0, y0, x0 + bw, y0 + bh);
            let clear = self.spec.anchors.iter().all(|a| {
                let o = a.bbox;
                b.x1 <= o.x0 || o.x1 <= b.x0 || b.y1 <= o.y0 || o.y1 <= b.y0
            });
            if clear {
                return Some(b);
            }
        }
        None
    }

    pub fn generate_frame(&self, t: usize) -> Result<PerceptionFrame> {
        if t >= self.spec.num_frames {
            return Err(Error::Invalid(format!("frame {t} out of range")));
        }
        let (h, w, d) = (self.spec.height, self.spec.width, self.spec.feature_dim);
        let mut rng = self.frame_rng(t);
        let dr = rng.random_range(0..h);
        let dc = rng.random_range(0..w);
        let mut values = vec![0f32; h * w * d];
        for r in 0..h {
            let src = ((r + dr) * 2 * w + dc) * d;
            values[r * w * d..(r + 1) * w * d].copy_from_slice(&self.texture[src..src + w * d]);
            for c in 0..w {
                if self.anchor_id[r * w + c].is_some() {
                    let p = (r * w + c) * d;
                    values[p..p + d].copy_from_slice(&self.static_layer[p..p + d]);
                }
            }
        }
        let mut features = FeatureGrid::new(h, w, d, values)?;

        let mut proposals = Vec::new();
        for (i, b) in self.spec.distractor_boxes(t) {
            let mask = BinaryMask::ellipse_in_box(h, w, &b);
            self.paint(&mut features, &mask, &self.distractor_visual[i], &mut rng);
            let identity = self.observe_identity(&self.distractor_identity[i], &mut rng);
            proposals.push((b, identity));
        }
        if let Some(b) = self.spec.target_box(t) {
            let mask = BinaryMask::ellipse_in_box(h, w, &b);
            self.paint(&mut features, &mask, &self.target_visual, &mut rng);
            let identity = self.observe_identity(&self.target_identity, &mut rng);
            proposals.push((b, identity));
        }
        let mut out: Vec<Proposal> = proposals
            .into_iter()
            .map(|(b, identity)| {
                let b = self.jitter(b, &mut rng);
                Proposal {
                    bbox: b,
                    mask: BinaryMask::ellipse_in_box(h, w, &b),
                    identity,
                    detector_score: 0.9,
                    refiner_score: None,
                }
            })
            .collect();
        for _ in 0..self.spec.false_proposals {
            let Some(b) = self.background_box(&mut rng) else {
                continue;
            };
            let id: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            out.push(Proposal {
                bbox: b,
                mask: BinaryMask::ellipse_in_box(h, w, &b),
                identity: normalize_f64(&id)?,
                detector_score: 0.3,
                refiner_score: None,
            });
        }
        out.shuffle(&mut rng);

        let brightness = 0.5 + 0.1 * (t as f64 * 0.37).sin() + 0.01 * rng.random::<f64>();
        Ok(PerceptionFrame {
            frame_index: t as u64,
            mean_brightness: brightness as f32,
            features,
            proposals: out,
        })
    }

    pub fn generator_info(&self) -> serde_json::Value {
        serde_json::json!({
            "name": "anchorref-sim",
            "prng": PRNG_DESCRIPTION,
            "seed": self.spec.seed,
            "scenario": self.spec,
        })
    }
}

impl FrameSource for SimScene {
    fn extent(&self) -> TraceExtent {
        self.spec.extent()
    }

    fn num_frames(&self) -> usize {
        self.spec.num_frames
    }

    fn frame(&self, index: usize) -> Result<PerceptionFrame> {
        self.generate_frame(index)
    }

    fn queries(&self) -> Result<Vec<QuerySpec>> {
        Ok(vec![self.query.clone()])
    }
}

/// Writes the trace, its ground truth (`<stem>.gt.json`) and the scenario
/// spec (`<stem>.scenario.json`) next to `manifest_path`.
pub fn write_scene(manifest_path: impl AsRef<Path>, scene: &SimScene) -> Result<TraceManifest> {
    let path = manifest_path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad trace path {}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let gt_name = format!("{stem}.gt.json");
    scene.ground_truth().save(dir.join(&gt_name))?;
    std::fs::write(
        dir.join(format!("{stem}.scenario.json")),
        serde_json::to_string_pretty(scene.spec())?,
    )?;
    let mut w = TraceWriter::create(path, scene.extent())?;
    w.write_query(scene.query())?;
    for t in 0..scene.num_frames() {
        w.write_frame(&scene.generate_frame(t)?)?;
    }
    w.set_ground_truth(gt_name);
    w.set_generator(scene.generator_info());
    w.finish()
}

/// Builds the scene for a spec.
pub fn generate(spec: &ScenarioSpec) -> Result<(SimScene, GroundTruth)> {
    let scene = SimScene::new(spec.clone())?;
    let gt = scene.ground_truth();
    Ok((scene, gt))
}

// ---------------------------------------------------------------------------
// scenario families

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// Mixed re-entries with decoys and look-alikes.
    Ablation,
    /// Absence durations spanning the Short/Medium/Long strata.
    Latency,
    /// Look-alikes present through most of every absence.
    Gating,
    /// No noise, no distractors.
    Clean,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Suite::Ablation),
            "latency" => Ok(Suite::Latency),
            "gating" => Ok(Suite::Gating),
            "clean" => Ok(Suite::Clean),
            _ => Err(Error::Scenario(format!("unknown suite `{s}`"))),
        }
    }
}

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Ablation => "ablation",
            Suite::Latency => "latency",
            Suite::Gating => "gating",
            Suite::Clean => "clean",
        }
    }
}

/// Frames the target stays away at the start, matching the default `T₀`.
pub const WARMUP_FRAMES: usize = 60;
pub const HOME: usize = 0;
pub const SECONDARY: usize = 1;
pub const TARGET_SIZE: [u32; 2] = [14, 10];

/// Anchor rectangles for a 128×128 scene, shifted per seed by a few pixels.
fn layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<AnchorSpec> {
    let sy = h as f64 / 128.0;
    let sx = w as f64 / 128.0;
    // (x0, y0, x1, y1) on the 128 grid; home and secondary first
    let base: [[f64; 4]; 6] = [
        [14.0, 66.0, 66.0, 110.0],
        [78.0, 14.0, 118.0, 50.0],
        [10.0, 8.0, 40.0, 28.0],
        [86.0, 74.0, 120.0, 100.0],
        [48.0, 8.0, 66.0, 30.0],
        [80.0, 108.0, 122.0, 122.0],
    ];
    base.iter()
        .map(|b| {
            let dx = rng.random_range(-3i32..=3) as f64;
            let dy = rng.random_range(-3i32..=3) as f64;
            let x0 = ((b[0] + dx) * sx).round().max(0.0) as u32;
            let y0 = ((b[1] + dy) * sy).round().max(0.0) as u32;
            let x1 = (((b[2] + dx) * sx).round() as u32).min(w as u32);
            let y1 = (((b[3] + dy) * sy).round() as u32).min(h as u32);
            AnchorSpec {
                bbox: BBox::new(x0, y0, x1, y1),
            }
        })
        .collect()
}

/// Random box centre keeping a `size` box inside `region` with `margin`.
fn point_in(rng: &mut ChaCha8Rng, region: BBox, size: [u32; 2], margin: f64) -> [f64; 2] {
    let lo_r = f64::from(region.y0) + f64::from(size[0]) / 2.0 + margin;
    let hi_r = f64::from(region.y1) - f64::from(size[0]) / 2.0 - margin;
    let lo_c = f64::from(region.x0) + f64::from(size[1]) / 2.0 + margin;
    let hi_c = f64::from(region.x1) - f64::from(size[1]) / 2.0 - margin;
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi <= lo {
            (lo + hi) / 2.0
        } else {
            rng.random_range(lo..hi).round()
        }
    };
    [pick(rng, lo_r, hi_r), pick(rng, lo_c, hi_c)]
}

fn base_spec(name: &str, seed: u64, rng: &mut ChaCha8Rng, num_frames: usize) -> ScenarioSpec {
    let (h, w, d) = (128, 128, 32);
    ScenarioSpec {
        name: name.to_string(),
        seed,
        height: h,
        width: w,
        feature_dim: d,
        text_dim: d,
        num_frames,
        anchors: layout(rng, h, w),
        background_clutter: 0.1,
        noise: 0.05,
        target: TargetSpec {
            size: TARGET_SIZE,
            text_affinity: 0.45,
            home_anchor: HOME,
            segments: Vec::new(),
        },
        distractors: Vec::new(),
        query: QueryDesign {
            text: "the person near the main entrance".into(),
            appearance_weight: 0.85,
            anchor_weights: vec![(HOME, 0.40), (SECONDARY, 0.33)],
        },
        false_proposals: 1,
        box_jitter: 1,
    }
}

/// Alternating visible/absent segments after the warm-up, with absence
/// lengths drawn by `absence`. Returns `(segments, absence intervals)`.
fn script(
    rng: &mut ChaCha8Rng,
    spec: &ScenarioSpec,
    visible: (usize, usize),
    mut absence: impl FnMut(&mut ChaCha8Rng, usize) -> usize,
) -> (Vec<Segment>, Vec<(usize, usize)>) {
    let home = spec.anchors[HOME].bbox;
    let mut segs = vec![Segment::Absent {
        frames: WARMUP_FRAMES,
    }];
    let mut gaps = Vec::new();
    let mut t = WARMUP_FRAMES;
    let mut k = 0;
    while t < spec.num_frames {
        let left = spec.num_frames - t;
        let v = rng.random_range(visible.0..=visible.1).min(left);
        let path = PathSpec {
            from: point_in(rng, home, TARGET_SIZE, 1.0),
            to: point_in(rng, home, TARGET_SIZE, 1.0),
        };
        segs.push(Segment::Visible { frames: v, path });
        t += v;
        if t >= spec.num_frames {
            break;
        }
        let left = spec.num_frames - t;
        let a = absence(rng, k).min(left);
        k += 1;
        // a trailing absence too short to matter is folded into the last segment
        if left - a < 10 {
            segs.push(Segment::Absent { frames: left });
            gaps.push((t, spec.num_frames));
            break;
        }
        segs.push(Segment::Absent { frames: a });
        gaps.push((t, t + a));
        t += a;
    }
    (segs, gaps)
}

fn decoy(rng: &mut ChaCha8Rng, region: BBox, similarity: f64, start: usize, end: usize) -> DistractorSpec {
    DistractorSpec {
        role: "decoy".into(),
        size: TARGET_SIZE,
        similarity,
        identity_similarity: 0.0,
        visits: vec![Visit {
            start,
            end,
            path: PathSpec {
                from: point_in(rng, region, TARGET_SIZE, 1.0),
                to: point_in(rng, region, TARGET_SIZE, 1.0),
            },
        }],
    }
}

fn lookalike(
    rng: &mut ChaCha8Rng,
    region: BBox,
    similarity: f64,
    start: usize,
    end: usize,
) -> DistractorSpec {
    DistractorSpec {
        role: "lookalike".into(),
        ..decoy(rng, region, similarity, start, end)
    }
}

fn reentries_of(gaps: &[(usize, usize)], n: usize) -> Vec<usize> {
    gaps.iter().map(|g| g.1).filter(|&e| e < n).collect()
}

fn ablation_spec(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SETUP_STREAM + 1);
    let mut spec = base_spec("ablation", seed, &mut rng, 600);
    let (segs, gaps) = script(&mut rng, &spec, (40, 90), |r, _| r.random_range(30..=110));
    spec.target.segments = segs;
    let n = spec.num_frames;
    let home = spec.anchors[HOME].bbox;
    let sec = spec.anchors[SECONDARY].bbox;
    for &(s, e) in &gaps {
        if e - s >= 16 && rng.random_bool(0.6) {
            spec.distractors
                .push(lookalike(&mut rng, home, 0.95, s + 3, e - 3));
        }
    }
    for t_re in reentries_of(&gaps, n) {
        if rng.random_bool(0.75) {
            let len = rng.random_range(10..=40);
            spec.distractors.push(decoy(
                &mut rng,
                sec,
                0.9,
                t_re.saturating_sub(5),
                (t_re + len).min(n),
            ));
        }
    }
    spec
}

fn gating_spec(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SETUP_STREAM + 2);
    let mut spec = base_spec("gating", seed, &mut rng, 600);
    let (segs, gaps) = script(&mut rng, &spec, (40, 80), |r, _| r.random_range(60..=120));
    spec.target.segments = segs;
    let home = spec.anchors[HOME].bbox;
    for &(s, e) in &gaps {
        let sim = rng.random_range(0.9..=1.0);
        spec.distractors
            .push(lookalike(&mut rng, home, sim, s + 3, e - 3));
    }
    spec
}

fn latency_spec(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SETUP_STREAM + 3);
    let mut spec = base_spec("latency", seed, &mut rng, 600);
    let durations = [30usize, 120, 240];
    let first = durations[(seed % 3) as usize];
    let (segs, gaps) = script(&mut rng, &spec, (50, 70), |r, k| {
        if k == 0 {
            first
        } else {
            durations[r.random_range(0..2)]
        }
    });
    spec.target.segments = segs;
    let n = spec.num_frames;
    let home = spec.anchors[HOME].bbox;
    for &(s, e) in &gaps {
        if e >= n {
            continue;
        }
        // longer absences leave a longer-lived look-alike at the re-entry site
        let dur = e - s;
        if rng.random_bool((dur as f64 / 240.0).min(1.0)) {
            let len = (dur / 6).clamp(5, 40);
            spec.distractors
                .push(decoy(&mut rng, home, 0.9, e.saturating_sub(5), (e + len).min(n)));
        }
    }
    spec
}

fn clean_spec(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SETUP_STREAM + 4);
    let mut spec = base_spec("clean", seed, &mut rng, 300);
    spec.noise = 0.0;
    spec.false_proposals = 0;
    spec.box_jitter = 0;
    let (segs, _) = script(&mut rng, &spec, (30, 60), |r, _| r.random_range(15..=40));
    spec.target.segments = segs;
    spec
}

/// One target visible from frame 0; it stands still on its home anchor for
/// the first `WARMUP_FRAMES` frames and then walks around it.
pub fn always_visible_spec(seed: u64, noise: f64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SETUP_STREAM + 5);
    let mut spec = base_spec("always-visible", seed, &mut rng, 200);
    spec.noise = noise;
    spec.false_proposals = 0;
    spec.box_jitter = 0;
    let home = spec.anchors[HOME].bbox;
    let p0 = point_in(&mut rng, home, TARGET_SIZE, 1.0);
    let p1 = point_in(&mut rng, home, TARGET_SIZE, 1.0);
    spec.target.segments = vec![
        Segment::Visible {
            frames: WARMUP_FRAMES,
            path: PathSpec::still(p0),
        },
        Segment::Visible {
            frames: spec.num_frames - WARMUP_FRAMES,
            path: PathSpec { from: p0, to: p1 },
        },
    ];
    spec
}

/// Deterministic scenario family for each seed.
pub fn make_suite(suite: Suite, seeds: &[u64]) -> Vec<ScenarioSpec> {
    seeds
        .iter()
        .map(|&s| match suite {
            Suite::Ablation => ablation_spec(s),
            Suite::Latency => latency_spec(s),
            Suite::Gating => gating_spec(s),
            Suite::Clean => clean_spec(s),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_validate() {
        for suite in [Suite::Ablation, Suite::Latency, Suite::Gating, Suite::Clean] {
            for spec in make_suite(suite, &[0, 1, 2, 3, 4]) {
                spec.validate().unwrap();
                spec.ground_truth().validate().unwrap();
            }
        }
        always_visible_spec(3, 0.0).validate().unwrap();
    }

    #[test]
    fn ablation_has_two_reentries_after_first_appearance() {
        for spec in make_suite(Suite::Ablation, &(0..50).collect::<Vec<_>>()) {
            let gt = spec.ground_truth();
            assert!(gt.reentries.len() >= 3, "seed {}: {:?}", spec.seed, gt.reentries);
            assert_eq!(gt.reentries[0].frame, WARMUP_FRAMES);
        }
    }

    #[test]
    fn gating_suite_has_high_similarity_distractors() {
        for spec in make_suite(Suite::Gating, &[0, 1, 2, 3]) {
            assert!(spec.distractors.iter().any(|d| d.similarity >= 0.9));
        }
    }

    #[test]
    fn affinities_match_design() {
        let spec = make_suite(Suite::Ablation, &[7]).remove(0);
        let scene = SimScene::new(spec.clone()).unwrap();
        let (t, ds) = scene.text_affinities();
        assert!((t - 0.45).abs() < 1e-6);
        for (d, s) in spec.distractors.iter().zip(ds) {
            let want =
                d.similarity * 0.45 + (1.0 - d.similarity.powi(2)).sqrt() * (1.0 - 0.45f64.powi(2)).sqrt();
            assert!((s - want).abs() < 1e-6);
        }
    }

    #[test]
    fn frames_are_order_independent() {
        let spec = make_suite(Suite::Ablation, &[1]).remove(0);
        let a = SimScene::new(spec.clone()).unwrap();
        let b = SimScene::new(spec).unwrap();
        let f5 = a.generate_frame(65).unwrap();
        let _ = b.generate_frame(3).unwrap();
        assert_eq!(b.generate_frame(65).unwrap(), f5);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = make_suite(Suite::Clean, &[0]).remove(0);
        s.text_dim = 16;
        assert!(s.validate().is_err());
        let mut s = make_suite(Suite::Clean, &[0]).remove(0);
        s.num_frames += 1;
        assert!(s.validate().is_err());
        let mut s = make_suite(Suite::Clean, &[0]).remove(0);
        s.anchors[1] = s.anchors[0];
        assert!(s.validate().is_err());
    }
}
