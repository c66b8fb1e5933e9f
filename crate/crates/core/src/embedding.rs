//! Embedding vectors and the two primitives everything else leans on:
//! L2 normalization and clamped cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance for "normalized" checks.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// A dense embedding vector stored in f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    /// Standard basis vector `e_i` in `dim` dimensions.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Embedding(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// L2 norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalized(&self) -> Result<Embedding> {
        normalize(&self.0).map(Embedding)
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot(&self.0, &other.0))
    }
}

impl From<Vec<f32>> for Embedding {
    fn from(v: Vec<f32>) -> Self {
        Embedding(v)
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `values` to unit L2 norm.
pub fn normalize(values: &[f32]) -> Result<Vec<f32>> {
    let n = norm(values);
    if !n.is_finite() || n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(values.iter().map(|&v| (f64::from(v) / n) as f32).collect())
}

/// Normalizes an f64 accumulator into an f32 embedding.
pub(crate) fn normalize_f64(values: &[f64]) -> Result<Embedding> {
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !n.is_finite() || n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(values.iter().map(|&v| (v / n) as f32).collect()))
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("embedding dims {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Cosine similarity clamped to [-1, 1].
///
/// Computed as `dot / (|a| |b|)` with the product of norms formed
/// symmetrically so that `cosine(a, b) == cosine(b, a)` bit for bit.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    let na = a.norm();
    let nb = b.norm();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let c = dot(&a.0, &b.0) / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let v = Embedding::new(vec![3.0, 4.0]).normalized().unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let e = Embedding::basis(5, 2);
        assert_eq!(e.normalized().unwrap(), e);
    }

    #[test]
    fn normalize_zero_fails() {
        assert!(matches!(Embedding::zeros(4).normalized(), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_examples() {
        let a = Embedding::new(vec![0.3, -1.2, 4.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let e0 = Embedding::basis(3, 0);
        let e1 = Embedding::basis(3, 1);
        assert_eq!(cosine(&e0, &e1).unwrap(), 0.0);
        let x = Embedding::new(vec![1.0, 0.0]);
        let y = Embedding::new(vec![1.0, 1.0]);
        assert!((cosine(&x, &y).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        let a = Embedding::new(vec![1.0, 0.0]);
        assert!(matches!(cosine(&a, &Embedding::zeros(2)), Err(Error::ZeroVector)));
        assert!(matches!(
            cosine(&a, &Embedding::basis(3, 0)),
            Err(Error::Dimension(_))
        ));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, 1..24)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in vec_strategy(), b in vec_strategy()) {
            let n = a.len().min(b.len());
            let a = Embedding::new(a[..n].to_vec());
            let b = Embedding::new(b[..n].to_vec());
            match (cosine(&a, &b), cosine(&b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                    prop_assert!((-1.0..=1.0).contains(&x));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }

        #[test]
        fn normalize_is_idempotent(v in vec_strategy()) {
            if let Ok(once) = normalize(&v) {
                let twice = normalize(&once).unwrap();
                prop_assert!((norm(&once) - 1.0).abs() < 1e-6);
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
