//! Scene memory: the offline anchor bank and the query-conditioned anchor map.
//!
//! Anchors are distilled from the first `T₀` frames. Pixels whose feature
//! variance over time (averaged over channels) stays below a threshold form
//! the static set; its 4-connected components, ranked by area, become anchor
//! masks. Prototypes are pooled on the median-brightness frame.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, BlobWriter, FrameSource, FORMAT_VERSION};
use crate::embedding::{cosine, normalize_f64, Embedding};
use crate::error::{Error, Result};
use crate::exec;
use crate::heads::AlignmentHeads;
use crate::mask::BinaryMask;
use crate::types::{BBox, FeatureGrid, Grid2D, QuerySpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub mask: BinaryMask,
    /// Normalized pooled feature, in the visual feature space (dim `d_v`).
    pub prototype: Embedding,
    /// `(row, col)` mean of member pixels.
    pub centroid: [f32; 2],
}

impl Anchor {
    pub fn centroid_f64(&self) -> (f64, f64) {
        (f64::from(self.centroid[0]), f64::from(self.centroid[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankParams {
    pub k: usize,
    pub t0: usize,
    pub static_threshold: f64,
    pub min_area: usize,
}

impl Default for BankParams {
    fn default() -> Self {
        BankParams {
            k: 64,
            t0: 60,
            static_threshold: 1e-3,
            min_area: 16,
        }
    }
}

/// How the bank was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    pub requested_k: usize,
    /// Components that survived the area filter.
    pub discovered: usize,
    /// Set when fewer anchors than `requested_k` were found.
    pub truncated: bool,
    /// Frames actually used.
    pub t0: usize,
    pub t_star: usize,
    pub static_threshold: f64,
    pub min_area: usize,
    pub static_pixels: usize,
    /// SHA-256 over the bank's temporal statistics.
    pub source_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub anchors: Vec<Anchor>,
    pub info: BankInfo,
}

impl AnchorBank {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Index of the lower-median brightness; ties resolve to the first
/// occurrence in input order.
pub fn select_median_brightness_frame(brightness: &[f32]) -> usize {
    assert!(!brightness.is_empty(), "no frames to select from");
    let mut sorted: Vec<f32> = brightness.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let target = sorted[(sorted.len() - 1) / 2];
    brightness
        .iter()
        .position(|b| b.total_cmp(&target).is_eq())
        .expect("median value comes from the input")
}

/// `Norm(mean of F over the mask)`.
pub fn pool_prototype(mask: &BinaryMask, features: &FeatureGrid) -> Result<Embedding> {
    if mask.height() != features.height() || mask.width() != features.width() {
        return Err(Error::dim("mask and feature grid extents differ"));
    }
    let d = features.channels();
    let mut acc = vec![0f64; d];
    let mut n = 0usize;
    for (r, c) in mask.iter_ones() {
        for (a, &v) in acc.iter_mut().zip(features.pixel(r, c)) {
            *a += f64::from(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    normalize_f64(&acc)
}

pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    mask.centroid()
}

/// Per-pixel temporal statistics over a run of frames.
struct TemporalStats {
    height: usize,
    width: usize,
    channels: usize,
    /// Interleaved `[sum, sum_sq]` per pixel channel.
    acc: Vec<[f64; 2]>,
    frames: usize,
}

impl TemporalStats {
    fn new(height: usize, width: usize, channels: usize) -> Self {
        TemporalStats {
            height,
            width,
            channels,
            acc: vec![[0.0; 2]; height * width * channels],
            frames: 0,
        }
    }

    fn add(&mut self, f: &FeatureGrid) {
        let row = self.width * self.channels;
        let values = f.values();
        exec::for_each_chunk_mut(&mut self.acc, row, |r, chunk| {
            let src = &values[r * row..(r + 1) * row];
            for (a, &v) in chunk.iter_mut().zip(src) {
                let v = f64::from(v);
                a[0] += v;
                a[1] += v * v;
            }
        });
        self.frames += 1;
    }

    /// Mean over channels of the population variance, per pixel.
    fn variance(&self) -> Vec<f32> {
        let n = self.frames as f64;
        let d = self.channels;
        exec::map_range(self.height * self.width, |p| {
            let mut acc = 0f64;
            for [s, sq] in &self.acc[p * d..(p + 1) * d] {
                let mean = s / n;
                acc += (sq / n - mean * mean).max(0.0);
            }
            (acc / d as f64) as f32
        })
    }
}

/// 4-connected components of `on`, in raster order of their first pixel.
fn connected_components(on: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; on.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Distills an anchor bank from the first `params.t0` frames of `source`.
pub fn build_bank(source: &dyn FrameSource, params: &BankParams) -> Result<AnchorBank> {
    if params.k == 0 {
        return Err(Error::Config("anchor.k must be ≥ 1".into()));
    }
    let ext = source.extent();
    let t0 = params.t0.min(source.num_frames());
    if t0 < 2 {
        return Err(Error::Invalid(format!(
            "bank building needs at least 2 frames, have {t0}"
        )));
    }
    let (h, w, d) = (ext.height, ext.width, ext.feature_dim);
    let mut stats = TemporalStats::new(h, w, d);
    let mut brightness = Vec::with_capacity(t0);
    for i in 0..t0 {
        let frame = source.frame(i)?;
        let f = &frame.features;
        if f.height() != h || f.width() != w || f.channels() != d {
            return Err(Error::dim(format!("extent mismatch at frame {i}")));
        }
        stats.add(f);
        brightness.push(frame.mean_brightness);
    }
    let t_star = select_median_brightness_frame(&brightness);
    let variance = stats.variance();
    let is_static: Vec<bool> = variance
        .iter()
        .map(|&v| f64::from(v) < params.static_threshold)
        .collect();
    let static_pixels = is_static.iter().filter(|&&s| s).count();
    if static_pixels == 0 {
        return Err(Error::EmptyScene);
    }

    let mut comps: Vec<Vec<usize>> = connected_components(&is_static, h, w)
        .into_iter()
        .filter(|c| c.len() >= params.min_area)
        .collect();
    // stable: equal areas keep raster order
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    let discovered = comps.len();
    if discovered == 0 {
        return Err(Error::EmptyScene);
    }
    comps.truncate(params.k);

    let reference = source.frame(t_star)?;
    let mut anchors = Vec::with_capacity(comps.len());
    for comp in &comps {
        let mut mask = BinaryMask::empty(h, w);
        for &p in comp {
            mask.set(p / w, p % w, true);
        }
        let prototype = match pool_prototype(&mask, &reference.features) {
            Ok(p) => p,
            Err(Error::ZeroVector) => {
                log::warn!("dropping anchor with zero prototype ({} px)", comp.len());
                continue;
            }
            Err(e) => return Err(e),
        };
        let (cr, cc) = mask.centroid()?;
        anchors.push(Anchor {
            mask,
            prototype,
            centroid: [cr as f32, cc as f32],
        });
    }
    if anchors.is_empty() {
        return Err(Error::EmptyScene);
    }
    let truncated = params.k > anchors.len();
    if truncated {
        log::warn!("requested {} anchors, scene yields {}", params.k, anchors.len());
    }

    let mut hasher = Sha256::new();
    hasher.update((t0 as u64).to_le_bytes());
    hasher.update((t_star as u64).to_le_bytes());
    for b in &brightness {
        hasher.update(b.to_le_bytes());
    }
    for v in &variance {
        hasher.update(v.to_le_bytes());
    }
    for v in reference.features.values() {
        hasher.update(v.to_le_bytes());
    }

    Ok(AnchorBank {
        height: h,
        width: w,
        feature_dim: d,
        anchors,
        info: BankInfo {
            requested_k: params.k,
            discovered,
            truncated,
            t0,
            t_star,
            static_threshold: params.static_threshold,
            min_area: params.min_area,
            static_pixels,
            source_digest: hex::encode(hasher.finalize()),
        },
    })
}

// ---------------------------------------------------------------------------
// anchor map

/// Query-conditioned weighting of the anchor masks. Constant for a query.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMap {
    pub grid: Grid2D,
    /// Softmax weights ω, summing to one.
    pub weights: Vec<f64>,
    /// Raw alignment cosines s_k.
    pub similarities: Vec<f64>,
    pub query_fingerprint: String,
    /// Set when overlapping masks pushed A above 1 and it was clamped.
    pub clamped: bool,
}

impl AnchorMap {
    /// A ≡ 1: no spatial conditioning at all.
    pub fn uniform(height: usize, width: usize) -> Self {
        AnchorMap {
            grid: Grid2D::filled(height, width, 1.0),
            weights: Vec::new(),
            similarities: Vec::new(),
            query_fingerprint: String::new(),
            clamped: false,
        }
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    /// Mean of A over the box pixels.
    pub fn box_mean(&self, b: &BBox) -> f64 {
        let h = self.height();
        let w = self.width();
        let (r0, r1) = (b.y0 as usize, (b.y1 as usize).min(h));
        let (c0, c1) = (b.x0 as usize, (b.x1 as usize).min(w));
        if r0 >= r1 || c0 >= c1 {
            return 0.0;
        }
        let vals = self.grid.values();
        let mut sum = 0f64;
        for r in r0..r1 {
            sum += vals[r * w + c0..r * w + c1]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>();
        }
        sum / ((r1 - r0) * (c1 - c0)) as f64
    }

    /// Mean of A over the mask pixels.
    pub fn mask_mean(&self, mask: &BinaryMask) -> Result<f64> {
        if mask.height() != self.height() || mask.width() != self.width() {
            return Err(Error::dim("mask and anchor map extents differ"));
        }
        let mut sum = 0f64;
        let mut n = 0usize;
        for (r, c) in mask.iter_ones() {
            sum += f64::from(self.grid.get(r, c));
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sum / n as f64)
    }
}

/// Numerically stable softmax of `temperature · s`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores
        .iter()
        .map(|s| s * temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s * temperature - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn fingerprint(e: &Embedding) -> String {
    let mut hasher = Sha256::new();
    for v in e.as_slice() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Aligns the query with every anchor and builds `A = Σ ω_k M_k`.
pub fn align_query(query: &QuerySpec, bank: &AnchorBank, heads: &AlignmentHeads) -> Result<AnchorMap> {
    if query.embedding.dim() != heads.text_dim() {
        return Err(Error::dim(format!(
            "query dim {} vs text head {}",
            query.embedding.dim(),
            heads.text_dim()
        )));
    }
    if bank.feature_dim != heads.feature_dim() {
        return Err(Error::dim(format!(
            "bank feature dim {} vs visual head {}",
            bank.feature_dim,
            heads.feature_dim()
        )));
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let text = heads.project_text(&query.embedding)?;
    let similarities = bank
        .anchors
        .iter()
        .map(|a| {
            let v = heads.project_visual(&a.prototype)?;
            match cosine(&text, &v) {
                Ok(s) => Ok(s),
                Err(Error::ZeroVector) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights = softmax(&similarities, heads.temperature);

    let (h, w) = (bank.height, bank.width);
    let mut acc = vec![0f64; h * w];
    for (a, &wk) in bank.anchors.iter().zip(&weights) {
        for (r, c) in a.mask.iter_ones() {
            acc[r * w + c] += wk;
        }
    }
    let mut clamped = false;
    let values = acc
        .into_iter()
        .map(|v| {
            if v > 1.0 + 1e-6 {
                clamped = true;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    if clamped {
        log::warn!("anchor masks overlap; anchor map clamped to [0, 1]");
    }
    Ok(AnchorMap {
        grid: Grid2D::new(h, w, values)?,
        weights,
        similarities,
        query_fingerprint: fingerprint(&query.embedding),
        clamped,
    })
}

/// Aligns several queries against one bank.
pub fn align_queries(
    queries: &[QuerySpec],
    bank: &AnchorBank,
    heads: &AlignmentHeads,
) -> Result<Vec<AnchorMap>> {
    exec::map_slice(queries, |q| align_query(q, bank, heads))
        .into_iter()
        .collect()
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorRecord {
    mask_offset: u64,
    prototype_offset: u64,
    centroid_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankSection {
    #[serde(rename = "K")]
    k: usize,
    build: BankInfo,
    anchors: Vec<AnchorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankManifest {
    format_version: u32,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    d_v: usize,
    blob: String,
    anchor_bank: BankSection,
}

impl AnchorBank {
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let blob_path = container::blob_path_for(manifest_path);
        let mut blob = BlobWriter::new(BufWriter::new(File::create(&blob_path)?));
        let mut records = Vec::with_capacity(self.anchors.len());
        for a in &self.anchors {
            records.push(AnchorRecord {
                mask_offset: blob.write_mask(&a.mask)?,
                prototype_offset: blob.write_tensor(&[a.prototype.dim()], a.prototype.as_slice())?,
                centroid_offset: blob.write_tensor(&[2], &a.centroid)?,
            });
        }
        blob.into_inner()?;
        let manifest = BankManifest {
            format_version: FORMAT_VERSION,
            height: self.height,
            width: self.width,
            d_v: self.feature_dim,
            blob: container::file_name(&blob_path),
            anchor_bank: BankSection {
                k: self.anchors.len(),
                build: self.info.clone(),
                anchors: records,
            },
        };
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let m: BankManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)
            .map_err(|e| Error::format(format!("bank manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::format("unsupported bank format_version"));
        }
        if m.anchor_bank.k != m.anchor_bank.anchors.len() {
            return Err(Error::format("bank K disagrees with anchor records"));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut r = BufReader::new(File::open(dir.join(&m.blob))?);
        let mut anchors = Vec::with_capacity(m.anchor_bank.k);
        for rec in &m.anchor_bank.anchors {
            let mask = container::read_mask_at(&mut r, rec.mask_offset)?;
            if mask.height() != m.height || mask.width() != m.width {
                return Err(Error::dim("anchor mask extent differs from bank"));
            }
            let (pd, proto) = container::read_tensor_at(&mut r, rec.prototype_offset)?;
            container::expect_dims(&pd, &[m.d_v], "prototype")?;
            let (cd, cen) = container::read_tensor_at(&mut r, rec.centroid_offset)?;
            container::expect_dims(&cd, &[2], "centroid")?;
            anchors.push(Anchor {
                mask,
                prototype: Embedding::new(proto),
                centroid: [cen[0], cen[1]],
            });
        }
        if anchors.is_empty() {
            return Err(Error::EmptyBank);
        }
        Ok(AnchorBank {
            height: m.height,
            width: m.width,
            feature_dim: m.d_v,
            anchors,
            info: m.anchor_bank.build,
        })
    }
}
