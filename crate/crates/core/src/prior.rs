//! Search-mode spatial prior over where the referent will reappear.
//!
//! The state is kept ℓ1-normalized in `f64`. Smoothing is a separable
//! Gaussian with half-sample symmetric reflection at the borders, which
//! makes the blur operator symmetric and therefore mass preserving.

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorMap;
use crate::association::ScoredCandidate;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::types::Grid2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorParams {
    pub beta: f64,
    pub sigma: f64,
    pub rho: f64,
    /// Apply the prior reweighting in search mode.
    pub enabled: bool,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            beta: 0.8,
            sigma: 4.0,
            rho: 0.7,
            enabled: true,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("rho", self.rho)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("prior.{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "prior.sigma must be ≥ 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Convolves every column of a row-major `h×w` grid with `kernel`.
fn blur_columns(src: &[f64], h: usize, w: usize, kernel: &[f64], out: &mut [f64]) {
    let r = (kernel.len() / 2) as i64;
    for row in 0..h {
        let dst = &mut out[row * w..(row + 1) * w];
        dst.fill(0.0);
        for (j, &k) in kernel.iter().enumerate() {
            let sr = reflect(row as i64 + j as i64 - r, h);
            let s = &src[sr * w..(sr + 1) * w];
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += k * v;
            }
        }
    }
}

fn transpose(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = src[r * w + c];
        }
    }
}

/// Separable Gaussian smoothing with reflective borders.
pub fn gaussian_blur(values: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return values.to_vec();
    }
    let mut a = vec![0.0; values.len()];
    let mut b = vec![0.0; values.len()];
    blur_columns(values, height, width, &kernel, &mut a);
    transpose(&a, height, width, &mut b);
    blur_columns(&b, width, height, &kernel, &mut a);
    transpose(&a, width, height, &mut b);
    b
}

/// Discrete Gaussian bump centred at `(row, col)`, normalized to sum 1.
/// With `sigma = 0` it is a one-hot at the nearest pixel.
pub fn gaussian_bump(height: usize, width: usize, center: (f64, f64), sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    if sigma <= 0.0 {
        let r = (center.0.round().max(0.0) as usize).min(height - 1);
        let c = (center.1.round().max(0.0) as usize).min(width - 1);
        out[r * width + c] = 1.0;
        return out;
    }
    let axis = |n: usize, mu: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let d = i as f64 - mu;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    };
    let gr = axis(height, center.0);
    let gc = axis(width, center.1);
    let z = gr.iter().sum::<f64>() * gc.iter().sum::<f64>();
    if z <= 0.0 {
        // centre far outside the grid in every direction; fall back to one-hot
        return gaussian_bump(height, width, center, 0.0);
    }
    for (r, &a) in gr.iter().enumerate() {
        for (o, &b) in out[r * width..(r + 1) * width].iter_mut().zip(&gc) {
            *o = a * b / z;
        }
    }
    out
}

fn l1_normalize(values: &mut [f64]) -> bool {
    let s: f64 = values.iter().sum();
    if s > 0.0 && s.is_finite() {
        values.iter_mut().for_each(|v| *v /= s);
        true
    } else {
        let u = 1.0 / values.len() as f64;
        values.iter_mut().for_each(|v| *v = u);
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReentryPrior {
    height: usize,
    width: usize,
    values: Vec<f64>,
    /// `A / ΣA`, or uniform when `A ≡ 0`.
    anchor_target: Vec<f64>,
    /// Set when the map had no mass and a uniform prior was used.
    pub degenerate: bool,
}

impl ReentryPrior {
    /// `P₀ = A / ΣA`; falls back to uniform with a warning when `A ≡ 0`.
    pub fn init(map: &AnchorMap) -> Self {
        let mut target: Vec<f64> = map.grid.values().iter().map(|&v| f64::from(v)).collect();
        let ok = l1_normalize(&mut target);
        if !ok {
            log::warn!("anchor map has no mass; using a uniform re-entry prior");
        }
        ReentryPrior {
            height: map.height(),
            width: map.width(),
            values: target.clone(),
            anchor_target: target,
            degenerate: !ok,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_grid(&self) -> Grid2D {
        Grid2D::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("prior extent is valid")
    }

    /// `P_t = Norm(β·(G_σ * P_{t−1}) + (1−β)·A/ΣA)`.
    pub fn search_update(&mut self, params: &PriorParams) {
        let blurred = gaussian_blur(&self.values, self.height, self.width, params.sigma);
        let b = params.beta;
        for ((v, g), a) in self.values.iter_mut().zip(&blurred).zip(&self.anchor_target) {
            *v = b * g + (1.0 - b) * a;
        }
        l1_normalize(&mut self.values);
    }

    /// `P = Norm(ρ·bump(c) + (1−ρ)·A/ΣA)`.
    pub fn redirect(&mut self, centroid: (f64, f64), params: &PriorParams) {
        let bump = gaussian_bump(self.height, self.width, centroid, params.sigma);
        let r = params.rho;
        for ((v, g), a) in self.values.iter_mut().zip(&bump).zip(&self.anchor_target) {
            *v = r * g + (1.0 - r) * a;
        }
        l1_normalize(&mut self.values);
    }

    /// `W(r) = mean over the mask of A(x)·P(x)`.
    pub fn weight(&self, mask: &BinaryMask, map: &AnchorMap) -> Result<f64> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::dim("mask and prior extents differ"));
        }
        let mut sum = 0f64;
        let mut n = 0usize;
        for (r, c) in mask.iter_ones() {
            sum += f64::from(map.grid.get(r, c)) * self.values[r * self.width + c];
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sum / n as f64)
    }

    /// Multiplies each candidate's ranking score by its prior weight.
    pub fn reweight(
        &self,
        candidates: &mut [ScoredCandidate],
        masks: impl Fn(usize) -> BinaryMask,
        map: &AnchorMap,
    ) -> Result<()> {
        for c in candidates.iter_mut() {
            let w = self.weight(&masks(c.proposal_index), map)?;
            c.prior_weight = w;
            c.ranking_score = c.fusion_score * w;
        }
        Ok(())
    }
}
