//! Seeded synthetic data for exercising the pipeline without model weights.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::align::Batch;
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::eval::ManifestEntry;
use crate::label::Label;

/// Two Gaussian clusters, one per label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSpec {
    pub dim: usize,
    pub corpus_size: usize,
    pub query_count: usize,
    /// Expected norm of the per-sample noise relative to the unit centres.
    pub noise: f64,
    /// Queries are spread round-robin over this many subsets.
    pub subsets: usize,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            corpus_size: 1000,
            query_count: 500,
            noise: 0.5,
            subsets: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub corpus: Vec<ManifestEntry>,
    pub queries: Vec<ManifestEntry>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Labels alternate real/fake, so both classes are balanced.
pub fn two_clusters(spec: &ClusterSpec) -> Result<SyntheticSplit> {
    if spec.dim < 2 || spec.subsets == 0 || !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Config(format!("bad cluster spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c_real = unit(gaussian(&mut rng, spec.dim));
    // Orthogonal second centre.
    let raw = gaussian(&mut rng, spec.dim);
    let proj: f64 = raw.iter().zip(&c_real).map(|(a, b)| a * b).sum();
    let c_fake = unit(raw.iter().zip(&c_real).map(|(a, b)| a - proj * b).collect());
    let sigma = spec.noise / (spec.dim as f64).sqrt();

    let mut sample = |i: usize, prefix: &str, subset: String| -> Result<ManifestEntry> {
        let label = if i.is_multiple_of(2) { Label::Real } else { Label::Fake };
        let centre = if label == Label::Real { &c_real } else { &c_fake };
        let v: Vec<f64> = centre
            .iter()
            .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(ManifestEntry {
            image_ref: format!("{prefix}/{i:06}.png"),
            label,
            subset: Some(subset),
            vector: Some(EmbeddingVector::from_f64(&v)?),
            embed_via: None,
        })
    };
    let corpus = (0..spec.corpus_size)
        .map(|i| sample(i, "corpus", "train".into()))
        .collect::<Result<Vec<_>>>()?;
    let queries = (0..spec.query_count)
        .map(|i| sample(i, "query", format!("subset_{}", i % spec.subsets)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSplit { corpus, queries })
}

pub const CONCEPT_IMAGE_DIM: usize = 16;
pub const CONCEPT_TEXT_DIM: usize = 8;

/// Paired image/text features for two concepts.
///
/// Image rows hold eight content features followed by a noisy concept
/// direction; text rows hold a scaled one-hot concept code followed by the
/// first six content features of the paired image.
pub fn concept_pairs(n: usize, seed: u64) -> Result<(Batch, Vec<Label>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = [unit(gaussian(&mut rng, 8)), unit(gaussian(&mut rng, 8))];
    let mut img = Array2::zeros((n, CONCEPT_IMAGE_DIM));
    let mut txt = Array2::zeros((n, CONCEPT_TEXT_DIM));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = if rng.random::<bool>() { Label::Fake } else { Label::Real };
        let k = label.as_u8() as usize;
        let content = gaussian(&mut rng, 8);
        for j in 0..8 {
            img[[i, j]] = content[j];
            img[[i, 8 + j]] = 1.5 * dirs[k][j] + 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        txt[[i, k]] = 2.0;
        for j in 0..6 {
            txt[[i, 2 + j]] = content[j];
        }
        labels.push(label);
    }
    Ok((Batch::new(img, txt)?, labels))
}
