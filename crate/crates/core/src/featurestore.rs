//! Feature matrices and the feature dictionary.
//!
//! The dictionary holds one unit-norm feature per training sample, keyed by
//! the sample's position in the corpus. It is refreshed by a running average
//! as samples are seen and fully re-initialised from fresh embeddings on a
//! fixed epoch schedule.

use crate::error::{Error, Result};
use crate::vector;

/// Rows whose norm does not exceed this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Row-major `n x d` matrix of 32-bit features. Row `i` carries label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    n: usize,
    d: usize,
}

impl FeatureMatrix {
    /// Wraps `data` as an `n x d` matrix. `n` may be zero (an empty split);
    /// `d` must be at least 2.
    pub fn new(data: Vec<f32>, n: usize, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::ShapeMismatch(format!(
                "feature dimension must be at least 2, got {d}"
            )));
        }
        if data.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {n}x{d} matrix",
                data.len()
            )));
        }
        Ok(Self { data, n, d })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(2);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has length {}, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Index labels `0..n`, one per row.
    pub fn labels(&self) -> std::ops::Range<usize> {
        0..self.n
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.n,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(data, indices.len(), self.d)
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        self.rows()
            .map(|r| (vector::norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.max_norm_deviation() <= tol
    }
}

/// Scales `row` to unit L2 norm in place, reporting `index` on failure.
pub(crate) fn normalize_row(row: &mut [f32], index: usize) -> Result<()> {
    let norm = vector::norm(row);
    if !(norm > ZERO_NORM) {
        return Err(Error::ZeroNormRow(index));
    }
    for x in row.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

/// Unit-normalises `v`, accumulating in 64-bit and rounding once.
pub fn normalize_f64_to_f32(v: &[f64], index: usize) -> Result<Vec<f32>> {
    let norm = vector::norm_f64(v);
    if !(norm > ZERO_NORM) {
        return Err(Error::ZeroNormRow(index));
    }
    Ok(v.iter().map(|&x| (x / norm) as f32).collect())
}

/// Returns a copy of `m` with every row scaled to unit L2 norm.
pub fn normalize_rows(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = m.clone();
    for i in 0..out.n {
        normalize_row(out.row_mut(i), i)?;
    }
    Ok(out)
}

/// Feature dictionary: one stored unit feature per training sample.
///
/// Row count is fixed at construction. Reads may be shared across threads;
/// [`update`](Dictionary::update) and [`reinit`](Dictionary::reinit) need
/// `&mut self`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    entries: FeatureMatrix,
    last_reinit: usize,
}

/// Tolerance used to validate that incoming features are unit vectors.
const UNIT_TOL: f64 = 1e-4;

impl Dictionary {
    /// Builds a dictionary from initial features (`z̄⁰ = z⁰`).
    pub fn new(features: FeatureMatrix, epoch: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::ShapeMismatch("dictionary needs at least one row".into()));
        }
        check_unit_rows(&features)?;
        Ok(Self {
            entries: features,
            last_reinit: epoch,
        })
    }

    pub fn n(&self) -> usize {
        self.entries.n()
    }

    pub fn d(&self) -> usize {
        self.entries.d()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.entries.row(i)
    }

    pub fn entries(&self) -> &FeatureMatrix {
        &self.entries
    }

    pub fn epoch_of_last_reinit(&self) -> usize {
        self.last_reinit
    }

    /// Running-average update of entry `index` with feature `z` at training
    /// step `step`.
    ///
    /// For `step >= 1` the entry becomes `normalize((old + z) / 2)`. At step 0
    /// the entry is initialised to `z` itself.
    pub fn update(&mut self, index: usize, z: &[f32], step: usize) -> Result<()> {
        let n = self.n();
        if index >= n {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        if z.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: z.len(),
            });
        }
        let row = self.entries.row_mut(index);
        if step == 0 {
            let mut fresh = z.to_vec();
            normalize_row(&mut fresh, index)?;
            row.copy_from_slice(&fresh);
            return Ok(());
        }
        let mean: Vec<f64> = row
            .iter()
            .zip(z)
            .map(|(&old, &new)| (old as f64 + new as f64) / 2.0)
            .collect();
        let updated = normalize_f64_to_f32(&mean, index)?;
        row.copy_from_slice(&updated);
        Ok(())
    }

    /// Replaces every entry by the matching row of `features`.
    pub fn reinit(&mut self, features: &FeatureMatrix, epoch: usize) -> Result<()> {
        if features.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: features.n(),
            });
        }
        if features.d() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: features.d(),
            });
        }
        check_unit_rows(features)?;
        self.entries.data.copy_from_slice(&features.data);
        self.last_reinit = epoch;
        Ok(())
    }
}

fn check_unit_rows(m: &FeatureMatrix) -> Result<()> {
    for (i, r) in m.rows().enumerate() {
        let norm = vector::norm(r);
        if (norm - 1.0).abs() > UNIT_TOL {
            if norm <= ZERO_NORM {
                return Err(Error::ZeroNormRow(i));
            }
            return Err(Error::ShapeMismatch(format!(
                "row {i} has norm {norm}, expected a unit vector"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f32]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    fn close(a: &[f32], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(&x, &y)| (x as f64 - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_rows(&m(&[&[3.0, 4.0], &[1.0, 0.0]])).unwrap();
        assert!(close(out.row(0), &[0.6, 0.8], 1e-7));
        assert_eq!(out.row(1), &[1.0, 0.0]);
        let out = normalize_rows(&m(&[&[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert_eq!(out.row(0), &[0.5, 0.5, 0.5, 0.5]);
        assert!(out.max_norm_deviation() <= 1e-7);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let err = normalize_rows(&m(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::ZeroNormRow(1)));
    }

    #[test]
    fn shape_checks() {
        assert!(FeatureMatrix::new(vec![1.0; 3], 1, 3).is_ok());
        assert!(FeatureMatrix::new(vec![1.0; 3], 3, 1).is_err());
        assert!(FeatureMatrix::new(vec![1.0; 5], 2, 3).is_err());
        assert!(FeatureMatrix::from_rows(&[vec![1.0f32, 0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn update_examples() {
        let mut dict = Dictionary::new(m(&[&[1.0, 0.0], &[0.6, 0.8]]), 0).unwrap();
        dict.update(0, &[1.0, 0.0], 1).unwrap();
        assert_eq!(dict.row(0), &[1.0, 0.0]);

        dict.update(1, &[1.0, 0.0], 1).unwrap();
        assert!(close(dict.row(1), &[0.8944, 0.4472], 1e-4));

        dict.update(0, &[0.0, 1.0], 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(dict.row(0), &[h, h], 1e-7));
    }

    #[test]
    fn update_at_step_zero_initialises() {
        let mut dict = Dictionary::new(m(&[&[1.0, 0.0]]), 0).unwrap();
        dict.update(0, &[0.0, 1.0], 0).unwrap();
        assert_eq!(dict.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn update_errors() {
        let mut dict = Dictionary::new(m(&[&[1.0, 0.0]]), 0).unwrap();
        assert!(matches!(
            dict.update(1, &[1.0, 0.0], 1),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
        assert!(matches!(
            dict.update(0, &[1.0, 0.0, 0.0], 1),
            Err(Error::DimensionMismatch { .. })
        ));
        let before = dict.clone();
        assert!(matches!(
            dict.update(0, &[-1.0, 0.0], 1),
            Err(Error::ZeroNormRow(0))
        ));
        assert_eq!(dict, before);
    }

    #[test]
    fn reinit_lifecycle() {
        let f = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let mut dict = Dictionary::new(m(&[&[0.0, 1.0], &[1.0, 0.0], &[0.8, 0.6]]), 0).unwrap();
        dict.reinit(&f, 5).unwrap();
        assert_eq!(dict.entries(), &f);
        assert_eq!(dict.epoch_of_last_reinit(), 5);

        dict.update(2, &[1.0, 0.0], 1).unwrap();
        for i in 0..3 {
            if i == 2 {
                assert_ne!(dict.row(i), f.row(i));
            } else {
                assert_eq!(dict.row(i), f.row(i));
            }
        }
        dict.reinit(&f, 10).unwrap();
        assert_eq!(dict.entries(), &f);

        let short = m(&[&[1.0, 0.0]]);
        assert!(matches!(
            dict.reinit(&short, 15),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = normalize_f64_to_f32(&v, 0) {
                return u;
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_rows_are_unit(seed in any::<u64>(), n in 1usize..8, d in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-10.0f32..10.0)).collect();
            let out = normalize_rows(&FeatureMatrix::new(data, n, d).unwrap()).unwrap();
            prop_assert!(out.max_norm_deviation() <= 1e-7);
        }

        #[test]
        fn update_touches_one_row(seed in any::<u64>(), n in 2usize..10, d in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let mut dict = Dictionary::new(FeatureMatrix::from_rows(&rows).unwrap(), 0).unwrap();
            for step in 1..50 {
                let before = dict.clone();
                let idx = rng.random_range(0..n);
                let z = random_unit(&mut rng, d);
                if dict.update(idx, &z, step).is_err() {
                    continue;
                }
                for j in (0..n).filter(|&j| j != idx) {
                    prop_assert_eq!(dict.row(j), before.row(j));
                }
                prop_assert!(dict.entries().max_norm_deviation() <= 1e-5);
            }
        }
    }
}
