//! Flat `f32` parameter vectors and the tensor layout that names their slices.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::ParamError;

/// A non-empty, finite sequence of `f32` values.
///
/// Models, client deltas, pseudo-gradients and momentum buffers all travel as
/// a `ParamVector`. The value is immutable once built; every operation that
/// changes numbers returns a new vector and re-checks finiteness.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f32>,
}

impl std::fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 8 {
            f.debug_tuple("ParamVector").field(&self.data).finish()
        } else {
            write!(f, "ParamVector(len={}, head={:?})", self.data.len(), &self.data[..4])
        }
    }
}

impl ParamVector {
    pub fn new(data: Vec<f32>) -> Result<Self, ParamError> {
        if data.is_empty() {
            return Err(ParamError::Empty);
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Result<Self, ParamError> {
        if len == 0 {
            return Err(ParamError::Empty);
        }
        Ok(Self { data: vec![0.0; len] })
    }

    /// Rounds every element of a 64-bit buffer to `f32`.
    pub fn from_f64(data: &[f64]) -> Result<Self, ParamError> {
        Self::new(data.iter().map(|&x| x as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    /// Euclidean norm accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        l2_norm_slice(&self.data)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64, ParamError> {
        self.check_len(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Returns `self + a * x`, evaluated per element in `f64` and rounded once.
    pub fn axpy(&self, a: f64, x: &ParamVector) -> Result<ParamVector, ParamError> {
        self.check_len(x)?;
        let data = self
            .data
            .iter()
            .zip(&x.data)
            .map(|(&y, &x)| (y as f64 + a * x as f64) as f32)
            .collect();
        ParamVector::new(data)
    }

    /// Returns `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, ParamError> {
        self.check_len(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        ParamVector::new(data)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector, ParamError> {
        ParamVector::new(self.data.iter().map(|&x| (a * x as f64) as f32).collect())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_len(&self, other: &ParamVector) -> Result<(), ParamError> {
        if self.data.len() != other.data.len() {
            return Err(ParamError::LengthMismatch {
                left: self.data.len(),
                right: other.data.len(),
            });
        }
        Ok(())
    }
}

/// `l2_norm` over a raw slice, for callers that have not built a vector yet.
pub fn l2_norm_slice(data: &[f32]) -> f64 {
    data.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Norm of a vector that may contain non-finite values; errors name the first offender.
pub fn checked_l2_norm(data: &[f32]) -> Result<f64, ParamError> {
    check_finite(data)?;
    Ok(l2_norm_slice(data))
}

pub(crate) fn check_finite(data: &[f32]) -> Result<(), ParamError> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(ParamError::NonFinite { index, value: data[index] }),
        None => Ok(()),
    }
}

/// One named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Ordered list of tensors packed back to back into a `ParamVector`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutManifest {
    pub entries: Vec<TensorEntry>,
}

impl LayoutManifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor directly after the previous one and returns its range.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let offset = self.total_len();
        let entry = TensorEntry { name: name.into(), shape: shape.to_vec(), offset };
        let range = entry.range();
        self.entries.push(entry);
        range
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.numel())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Checks contiguity, positive dimensions, unique names and the total length.
    pub fn validate(&self, len: usize) -> Result<(), ParamError> {
        let mut expected = 0usize;
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if entry.shape.is_empty() || entry.shape.contains(&0) {
                return Err(ParamError::Layout(format!("tensor {} has an empty dimension", entry.name)));
            }
            if !seen.insert(entry.name.as_str()) {
                return Err(ParamError::Layout(format!("tensor {} listed twice", entry.name)));
            }
            if entry.offset != expected {
                return Err(ParamError::Layout(format!(
                    "tensor {} starts at {} but previous tensor ends at {}",
                    entry.name, entry.offset, expected
                )));
            }
            expected += entry.numel();
        }
        if expected != len {
            return Err(ParamError::Layout(format!(
                "manifest covers {expected} elements, vector has {len}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f32]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn norm_of_zero_and_pythagorean() {
        assert_eq!(pv(&[0.0, 0.0, 0.0]).l2_norm(), 0.0);
        assert_eq!(pv(&[3.0, 4.0]).l2_norm(), 5.0);
    }

    #[test]
    fn norm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut acc = 0.0f64;
        for i in 0..data.len() {
            let x = data[i] as f64;
            acc += x * x;
        }
        let oracle = acc.sqrt();
        let got = pv(&data).l2_norm();
        assert!(((got - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_rejected_with_index() {
        match ParamVector::new(vec![1.0, f32::NAN, 2.0]) {
            Err(ParamError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            checked_l2_norm(&[0.0, 0.0, f32::INFINITY]),
            Err(ParamError::NonFinite { index: 2, .. })
        ));
        assert!(matches!(ParamVector::new(vec![]), Err(ParamError::Empty)));
    }

    #[test]
    fn axpy_examples() {
        let x = pv(&[5.0, -7.0]);
        let y = pv(&[1.5, 2.5]);
        assert!(y.axpy(0.0, &x).unwrap().bit_eq(&y));
        assert_eq!(pv(&[3.0, 4.0]).axpy(1.0, &pv(&[1.0, 2.0])).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(pv(&[1.0, 1.0]).axpy(-0.5, &pv(&[2.0, 2.0])).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn axpy_length_mismatch_carries_both_lengths() {
        let err = pv(&[1.0]).axpy(1.0, &pv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, ParamError::LengthMismatch { left: 1, right: 2 }));
    }

    #[test]
    fn manifest_validation() {
        let mut m = LayoutManifest::new();
        assert_eq!(m.push("a", &[2, 3]), 0..6);
        assert_eq!(m.push("b", &[4]), 6..10);
        m.validate(10).unwrap();
        assert!(m.validate(11).is_err());
        let mut gap = m.clone();
        gap.entries[1].offset = 7;
        assert!(gap.validate(11).is_err());
        let mut dup = m.clone();
        dup.entries[1].name = "a".into();
        assert!(dup.validate(10).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn norm_is_absolutely_homogeneous(
                v in prop::collection::vec(-1e3f32..1e3, 1..64),
                a in -100f64..100.0,
            ) {
                let x = pv(&v);
                // Scale in f64 so the check isolates the norm, not f32 rounding of a*v.
                let scaled: f64 = x.as_slice().iter().map(|&e| (a * e as f64).powi(2)).sum::<f64>().sqrt();
                let expect = a.abs() * x.l2_norm();
                prop_assert!((scaled - expect).abs() <= 1e-7 * expect.max(1e-30));
                let rounded = x.scale(a).unwrap().l2_norm();
                prop_assert!((rounded - expect).abs() <= 1e-7 * expect.max(1e-30) + 1e-30);
            }

            #[test]
            fn axpy_unit_coefficients_match_ieee_f32(
                pairs in prop::collection::vec((-1e6f32..1e6, -1e6f32..1e6), 1..64),
                sel in 0usize..3,
            ) {
                let a = [-1.0f64, 0.0, 1.0][sel];
                let x = pv(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
                let y = pv(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
                let got = y.axpy(a, &x).unwrap();
                for ((&g, &xi), &yi) in got.as_slice().iter().zip(x.as_slice()).zip(y.as_slice()) {
                    let expect = if a == 0.0 { yi } else if a > 0.0 { yi + xi } else { yi - xi };
                    prop_assert_eq!(g.to_bits(), expect.to_bits());
                }
            }
        }
    }
}
