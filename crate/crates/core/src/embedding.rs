//! Fixed-dimension embedding vectors and the similarity arithmetic shared by
//! retrieval and training.
//!
//! Components are stored as `f32`; every reduction (dot products, norms)
//! accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-20;

/// Tolerance on `|‖v‖₂ − 1|` for vectors flagged as normalized.
pub const NORMALIZED_TOLERANCE: f64 = 1e-6;

/// Embedding width of CLIP ViT-L/14 exports. Documentation only; nothing in
/// the crate assumes it.
pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw components. Rejects empty input and non-finite values.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension {
                expected: 1,
                got: 0,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub(crate) fn set_normalized(&mut self) {
        self.normalized = true;
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// Dot product with `f64` accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `(a·b) / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let na = a.norm();
    let nb = b.norm();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::DegenerateVector);
    }
    let cos = dot(&a.values, &b.values) / (na * nb);
    Ok(cos.clamp(-1.0, 1.0))
}

/// Scales `a` to unit length. The division happens in `f64` and is rounded
/// to `f32` once per component.
pub fn l2_normalize(a: &EmbeddingVector) -> Result<EmbeddingVector> {
    let values = normalized_f64(&a.values)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(EmbeddingVector {
        values,
        normalized: true,
    })
}

/// Unit-length copy of `a` kept in `f64`. Used for query vectors so that the
/// query side of a similarity is never rounded.
pub fn normalized_f64(a: &[f32]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n < MIN_NORM {
        return Err(Error::DegenerateVector);
    }
    Ok(a.iter().map(|&v| f64::from(v) / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let parallel = cosine_similarity(&ev(&[1.0, 2.0]), &ev(&[2.0, 4.0])).unwrap();
        assert!((parallel - 1.0).abs() < 1e-12);
        let diag = cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[1.0, 1.0])).unwrap();
        assert!((diag - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0, 0.0])),
            Err(Error::Dimension { expected: 2, got: 3 })
        ));
        assert!(matches!(
            cosine_similarity(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&ev(&[3.0, 4.0])).unwrap();
        assert!(n.is_normalized());
        assert!((n.values()[0] - 0.6).abs() < 1e-7);
        assert!((n.values()[1] - 0.8).abs() < 1e-7);
        assert!(matches!(l2_normalize(&ev(&[0.0, 0.0])), Err(Error::DegenerateVector)));
        // Norm 1e-30 is under the 1e-20 threshold.
        assert!(matches!(l2_normalize(&ev(&[1e-30, 0.0])), Err(Error::DegenerateVector)));
    }

    #[test]
    fn normalize_tiny_but_representable() {
        // Oracle: normalize in f64 from the exact f32 inputs, no f64 underflow at this scale.
        let raw = [1e-19f32, 3e-19f32];
        let (x, y) = (f64::from(raw[0]), f64::from(raw[1]));
        let r = (x * x + y * y).sqrt();
        let n = l2_normalize(&ev(&raw)).unwrap();
        assert!((f64::from(n.values()[0]) - x / r).abs() < 1e-6);
        assert!((f64::from(n.values()[1]) - y / r).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(EmbeddingVector::new(vec![1.0, f32::NAN]), Err(Error::NonFinite(1))));
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..64).prop_flat_map(|d| {
            (
                prop::collection::vec(-10.0f32..10.0, d),
                prop::collection::vec(-10.0f32..10.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric((a, b) in vec_pair()) {
            let (a, b) = (ev(&a), ev(&b));
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        // Power-of-two scales are exact in f32, so the scaled vector is not
        // itself perturbed by rounding.
        #[test]
        fn cosine_scale_invariant((a, b) in vec_pair(), exp in -20i32..20) {
            let s = 2f32.powi(exp);
            let (av, bv) = (ev(&a), ev(&b));
            prop_assume!(av.norm() > 1e-6 && bv.norm() > 1e-6);
            let scaled = ev(&a.iter().map(|x| x * s).collect::<Vec<_>>());
            let d = cosine_similarity(&scaled, &bv).unwrap() - cosine_similarity(&av, &bv).unwrap();
            prop_assert!(d.abs() <= 1e-9);
        }

        #[test]
        fn cosine_equals_dot_of_normalized((a, b) in vec_pair()) {
            let (a, b) = (ev(&a), ev(&b));
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let (na, nb) = (l2_normalize(&a).unwrap(), l2_normalize(&b).unwrap());
            prop_assert!((na.norm() - 1.0).abs() <= NORMALIZED_TOLERANCE);
            // Stored f32 unit vectors are off unit length by rounding, which
            // bounds agreement at the normalization tolerance.
            let cos = cosine_similarity(&na, &nb).unwrap();
            let d = na.dot(&nb).unwrap();
            prop_assert!((cos - d).abs() <= NORMALIZED_TOLERANCE, "cos {} dot {}", cos, d);
            // Unrounded unit vectors agree to 1e-9.
            let (qa, qb) = (normalized_f64(a.values()).unwrap(), normalized_f64(b.values()).unwrap());
            let d64: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
            prop_assert!((cosine_similarity(&a, &b).unwrap() - d64.clamp(-1.0, 1.0)).abs() <= 1e-9);
        }
    }
}
