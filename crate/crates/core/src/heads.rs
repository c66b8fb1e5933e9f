//! Alignment heads mapping text and visual embeddings into a shared space.
//!
//! Heads are affine maps `y = xᵀW + b`. Without trained weights the engine
//! uses the identity when the text and visual dimensions agree, and a seeded
//! random projection with orthonormal columns otherwise.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, BlobWriter, FORMAT_VERSION};
use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Affine map `ℝ^in → ℝ^out`; `weight` is row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
    identity: bool,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::dim(format!(
                "linear {in_dim}→{out_dim}: weight {} bias {}",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Config("head weights must be finite".into()));
        }
        let identity = in_dim == out_dim
            && bias.iter().all(|&b| b == 0.0)
            && weight.iter().enumerate().all(|(k, &w)| {
                let (i, j) = (k / out_dim, k % out_dim);
                w == if i == j { 1.0 } else { 0.0 }
            });
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias,
            identity,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Linear {
            in_dim: dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
            identity: true,
        }
    }

    /// Random `[in, out]` matrix with orthonormal columns (needs in ≥ out).
    pub fn orthonormal(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if out_dim > in_dim || out_dim == 0 {
            return Err(Error::Config(format!(
                "cannot build orthonormal projection {in_dim}→{out_dim}"
            )));
        }
        let cols = orthonormal_vectors(in_dim, out_dim, rng);
        let mut weight = vec![0.0f32; in_dim * out_dim];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                weight[i * out_dim + j] = v as f32;
            }
        }
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            identity: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn apply(&self, x: &[f32]) -> Result<Embedding> {
        if x.len() != self.in_dim {
            return Err(Error::dim(format!(
                "head expects dim {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        if self.is_identity() {
            return Ok(Embedding::new(x.to_vec()));
        }
        let mut acc: Vec<f64> = self.bias.iter().map(|&b| f64::from(b)).collect();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            let xi = f64::from(xi);
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += xi * f64::from(w);
            }
        }
        Ok(Embedding::new(acc.into_iter().map(|v| v as f32).collect()))
    }
}

/// Gram–Schmidt over Gaussian draws: `count` orthonormal vectors in ℝ^dim.
pub(crate) fn orthonormal_vectors(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHeads {
    pub text: Linear,
    pub visual: Linear,
    pub temperature: f64,
}

impl AlignmentHeads {
    pub fn new(text: Linear, visual: Linear, temperature: f64) -> Result<Self> {
        if text.out_dim() != visual.out_dim() {
            return Err(Error::dim(format!(
                "head output dims differ: text {} visual {}",
                text.out_dim(),
                visual.out_dim()
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        Ok(AlignmentHeads {
            text,
            visual,
            temperature,
        })
    }

    pub fn identity(dim: usize, temperature: f64) -> Result<Self> {
        AlignmentHeads::new(Linear::identity(dim), Linear::identity(dim), temperature)
    }

    /// Zero-shot default heads for the given encoder dimensions.
    ///
    /// Identity when `d_l == d_v` (and `dim` is unset or equal); otherwise
    /// orthonormal projections into `dim` (default `min(d_l, d_v)`) drawn from
    /// ChaCha8 seeded with `seed`.
    pub fn zero_shot(
        text_dim: usize,
        feature_dim: usize,
        dim: Option<usize>,
        seed: u64,
        temperature: f64,
    ) -> Result<Self> {
        let d = dim.unwrap_or(text_dim.min(feature_dim));
        if text_dim == feature_dim && d == text_dim {
            return AlignmentHeads::identity(d, temperature);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = Linear::orthonormal(text_dim, d, &mut rng)?;
        let visual = Linear::orthonormal(feature_dim, d, &mut rng)?;
        AlignmentHeads::new(text, visual, temperature)
    }

    pub fn text_dim(&self) -> usize {
        self.text.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.visual.in_dim()
    }

    pub fn dim(&self) -> usize {
        self.text.out_dim()
    }

    pub fn project_text(&self, e: &Embedding) -> Result<Embedding> {
        self.text.apply(e.as_slice())
    }

    pub fn project_visual(&self, e: &Embedding) -> Result<Embedding> {
        self.visual.apply(e.as_slice())
    }

    /// `g_l(q) = Norm(φ_l(e_q))`.
    pub fn text_direction(&self, e_q: &Embedding) -> Result<Embedding> {
        self.project_text(e_q)?.normalized()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadsSection {
    text_dim: usize,
    feature_dim: usize,
    dim: usize,
    temperature: f64,
    text_weight_offset: u64,
    text_bias_offset: u64,
    visual_weight_offset: u64,
    visual_bias_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadsManifest {
    format_version: u32,
    blob: String,
    heads: HeadsSection,
}

impl AlignmentHeads {
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let blob_path = container::blob_path_for(manifest_path);
        let mut blob = BlobWriter::new(BufWriter::new(File::create(&blob_path)?));
        let (dl, dv, d) = (self.text_dim(), self.feature_dim(), self.dim());
        let section = HeadsSection {
            text_dim: dl,
            feature_dim: dv,
            dim: d,
            temperature: self.temperature,
            text_weight_offset: blob.write_tensor(&[dl, d], self.text.weight())?,
            text_bias_offset: blob.write_tensor(&[d], self.text.bias())?,
            visual_weight_offset: blob.write_tensor(&[dv, d], self.visual.weight())?,
            visual_bias_offset: blob.write_tensor(&[d], self.visual.bias())?,
        };
        blob.into_inner()?;
        let manifest = HeadsManifest {
            format_version: FORMAT_VERSION,
            blob: container::file_name(&blob_path),
            heads: section,
        };
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let m: HeadsManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)
            .map_err(|e| Error::format(format!("heads manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::format("unsupported heads format_version"));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut r = BufReader::new(File::open(dir.join(&m.blob))?);
        let h = &m.heads;
        let read = |r: &mut BufReader<File>, off: u64, dims: &[usize], what: &str| {
            let (got, data) = container::read_tensor_at(r, off)?;
            container::expect_dims(&got, dims, what)?;
            Ok::<_, Error>(data)
        };
        let tw = read(&mut r, h.text_weight_offset, &[h.text_dim, h.dim], "text weight")?;
        let tb = read(&mut r, h.text_bias_offset, &[h.dim], "text bias")?;
        let vw = read(
            &mut r,
            h.visual_weight_offset,
            &[h.feature_dim, h.dim],
            "visual weight",
        )?;
        let vb = read(&mut r, h.visual_bias_offset, &[h.dim], "visual bias")?;
        AlignmentHeads::new(
            Linear::new(h.text_dim, h.dim, tw, tb)?,
            Linear::new(h.feature_dim, h.dim, vw, vb)?,
            h.temperature,
        )
    }
}
