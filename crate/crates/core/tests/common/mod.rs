#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ragdetect::align::{self, Batch, DualEncoder, LossOptions, SimilarityMode};
use ragdetect::{EmbeddingVector, Label, VectorIndex};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests")
}

pub fn stub_bridge() -> &'static str {
    env!("CARGO_BIN_EXE_ragdetect-stub-bridge")
}

pub fn cli() -> &'static str {
    env!("CARGO_BIN_EXE_ragdetect")
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Random corpus with some repeated directions so that ties occur.
pub fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> VectorIndex {
    let mut index = VectorIndex::new();
    let mut pool: Vec<Vec<f32>> = Vec::new();
    for i in 0..n {
        let v = if !pool.is_empty() && rng.random::<f64>() < 0.1 {
            let src = &pool[rng.random_range(0..pool.len())];
            // Power-of-two scale: same direction, same normalized bits.
            src.iter().map(|x| x * 4.0).collect()
        } else {
            gaussian_vec(rng, dim)
        };
        pool.push(v.clone());
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        index
            .insert(&EmbeddingVector::new(v).unwrap(), label, format!("img_{i}.png"), None)
            .unwrap();
    }
    index
}

/// Full scan over the stored entries followed by a complete sort on
/// (score descending, id ascending).
pub fn oracle_topk(index: &VectorIndex, query: &[f32], k: usize) -> Vec<(u64, f64)> {
    let qn: f64 = query.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let q: Vec<f64> = query.iter().map(|&x| f64::from(x) / qn).collect();
    let mut all: Vec<(u64, f64)> = Vec::with_capacity(index.len());
    for e in index.entries() {
        let mut s = 0.0f64;
        for (x, y) in e.embedding.values().iter().zip(&q) {
            s += f64::from(*x) * y;
        }
        all.push((e.id, s.clamp(-1.0, 1.0)));
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Random small encoder with a non-zero adapter so both factors get
/// gradient.
pub fn random_problem(rng: &mut ChaCha8Rng) -> (Batch, DualEncoder) {
    let image_in = rng.random_range(2..=16);
    let text_in = rng.random_range(2..=16);
    let out = rng.random_range(2..=16);
    let rank = rng.random_range(1..=4);
    let n = rng.random_range(1..=8);
    let alpha = rng.random_range(0.5..8.0);
    let mut enc = DualEncoder::init(image_in, text_in, out, rank, alpha, 0.0, rng.random()).unwrap();
    enc.image.lora_b = Array2::from_shape_fn((out, rank), |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let img = Array2::from_shape_fn((n, image_in), |_| rng.sample::<f64, _>(StandardNormal));
    let txt = Array2::from_shape_fn((n, text_in), |_| rng.sample::<f64, _>(StandardNormal));
    (Batch::new(img, txt).unwrap(), enc)
}

pub struct GradCheck {
    pub worst_excess: f64,
    pub worst_component: String,
    pub components: usize,
}

/// Compares analytic adapter gradients to central differences of the loss.
/// A component passes when `|a − n| ≤ max(abs_floor, rel · max(|a|, |n|))`;
/// `worst_excess` is the largest ratio of error to allowance.
pub fn gradient_check(batch: &Batch, enc: &DualEncoder, opts: LossOptions, step: f64, rel: f64, abs_floor: f64) -> GradCheck {
    let (_, grads) = align::loss_gradients(batch, enc, opts).unwrap();
    let mut worst = 0.0f64;
    let mut worst_component = String::new();
    let mut components = 0;
    let loss_at = |e: &DualEncoder| align::batch_loss(batch, e, opts).unwrap();
    for (which, analytic) in [("A", &grads.lora_a), ("B", &grads.lora_b)] {
        for ((i, j), &a) in analytic.indexed_iter() {
            let mut plus = enc.clone();
            let mut minus = enc.clone();
            let (p, m) = if which == "A" {
                (&mut plus.image.lora_a[[i, j]], &mut minus.image.lora_a[[i, j]])
            } else {
                (&mut plus.image.lora_b[[i, j]], &mut minus.image.lora_b[[i, j]])
            };
            *p += step;
            *m -= step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let allowance = abs_floor.max(rel * a.abs().max(numeric.abs()));
            let excess = (a - numeric).abs() / allowance;
            components += 1;
            if excess > worst {
                worst = excess;
                worst_component = format!("{which}[{i},{j}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    GradCheck {
        worst_excess: worst,
        worst_component,
        components,
    }
}

pub fn loss_opts(temperature: f64, similarity: SimilarityMode) -> LossOptions {
    LossOptions { temperature, similarity }
}
