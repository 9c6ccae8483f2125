//! Frozen stand-ins for pretrained image and text encoders.
//!
//! A [`StubEmbedder`] maps a latent vector (plus a keyed jitter) through a
//! fixed random projection into the shared `D`-dimensional space. Image and
//! text stubs built from the same seed share the projection, which gives an
//! aligned image-text space that no training stage can modify.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::model::Embedding;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct StubEmbedder {
    seed: u64,
    projection: Array2<f64>,
    jitter: f64,
}

/// Stable 64-bit hash of a key string.
pub fn key_hash(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl StubEmbedder {
    /// Projection from `latent_dim` to `dim`. When `latent_dim <= dim` the
    /// projection has orthonormal columns, so latent geometry is preserved.
    pub fn new(seed: u64, latent_dim: usize, dim: usize, jitter: f64) -> Result<Self> {
        if latent_dim == 0 || dim == 0 {
            return Err(Error::invalid("stub embedder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj = Array2::from_shape_fn((dim, latent_dim), |_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        if latent_dim <= dim {
            // Gram-Schmidt on the columns.
            for c in 0..latent_dim {
                for prev in 0..c {
                    let d = proj.column(c).dot(&proj.column(prev));
                    let p = proj.column(prev).to_owned();
                    proj.column_mut(c).scaled_add(-d, &p);
                }
                let n = proj.column(c).dot(&proj.column(c)).sqrt();
                proj.column_mut(c).mapv_inplace(|x| x / n);
            }
        } else {
            proj /= (dim as f64).sqrt();
        }
        Ok(Self {
            seed,
            projection: proj,
            jitter,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic unit-norm embedding of `latent` for the item `key`.
    pub fn embed<T: Real>(&self, key: &str, latent: &[f64]) -> Result<Embedding<T>> {
        if latent.len() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent of length {} for a {}-dim stub",
                latent.len(),
                self.latent_dim()
            )));
        }
        let mut v: Array1<f64> = self.projection.dot(&Array1::from(latent.to_vec()));
        if self.jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(key_hash(key) ^ self.seed.rotate_left(17));
            for x in v.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += self.jitter * n;
            }
        }
        Embedding::normalize(v.mapv(T::of))
    }

    /// Hash of the frozen projection, for auditing that it never changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.jitter.to_le_bytes());
        for x in self.projection.iter() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
