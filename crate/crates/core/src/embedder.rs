//! Toy text embedder: hashes lowercase word tokens to seeded Gaussian
//! vectors and sums them. It has no semantics and exists so the CLI can take
//! raw query text; precomputed embeddings are the real input path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::embedding::{normalize_f64, Embedding};
use crate::error::{Error, Result};

pub fn embed_text(text: &str, dim: usize) -> Result<Embedding> {
    if dim == 0 {
        return Err(Error::Invalid("embedding dim must be ≥ 1".into()));
    }
    let mut acc = vec![0f64; dim];
    let mut tokens = 0;
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let digest = Sha256::digest(tok.to_lowercase().as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in acc.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *a += n;
        }
        tokens += 1;
    }
    if tokens == 0 {
        return Err(Error::Invalid("query text has no tokens".into()));
    }
    normalize_f64(&acc)
}
