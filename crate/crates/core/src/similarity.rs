//! Pairwise cosine similarity against the dictionary.
//!
//! [`SimilarityMatrix`] keeps the raw `D·Dᵀ` values together with the
//! threshold, and exposes the thresholded view (entries below `tau` read as
//! 0). It also caches, per row, the sorted column indices whose thresholded
//! value is nonzero so that neighbourhood distances cost `O(support)` rather
//! than `O(n)`.
//!
//! The matrix is materialised densely and built by a tiled kernel that runs
//! row blocks in parallel. Every entry is produced by [`vector::dot`], so a
//! row of the matrix is bitwise-equal to the corresponding [`ps_vector`].

use crate::error::{Error, Result};
use crate::featurestore::Dictionary;
use crate::par;
use crate::vector;

const TILE: usize = 64;

/// Applies the mask: values strictly below `tau` become 0.
#[inline]
pub fn threshold(x: f32, tau: f64) -> f32 {
    if (x as f64) < tau {
        0.0
    } else {
        x
    }
}

/// Similarities of one probe against every dictionary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub probe: Option<usize>,
    pub values: Vec<f32>,
}

impl SimilarityVector {
    pub fn thresholded(&self, tau: f64) -> Vec<f32> {
        self.values.iter().map(|&x| threshold(x, tau)).collect()
    }
}

/// Cosine similarity of `z` against every row of `dict`.
pub fn ps_vector(z: &[f32], dict: &Dictionary) -> Result<SimilarityVector> {
    if z.len() != dict.d() {
        return Err(Error::DimensionMismatch {
            expected: dict.d(),
            found: z.len(),
        });
    }
    let values = (0..dict.n())
        .map(|j| vector::dot(z, dict.row(j)) as f32)
        .collect();
    Ok(SimilarityVector {
        probe: None,
        values,
    })
}

/// Similarity vector of dictionary entry `probe` against the dictionary.
pub fn probe_vector(probe: usize, dict: &Dictionary) -> Result<SimilarityVector> {
    if probe >= dict.n() {
        return Err(Error::IndexOutOfRange {
            index: probe,
            len: dict.n(),
        });
    }
    let mut s = ps_vector(dict.row(probe), dict)?;
    s.probe = Some(probe);
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    raw: Vec<f32>,
    n: usize,
    tau: f64,
    supports: Vec<Vec<u32>>,
}

/// Builds `D·Dᵀ` thresholded at `tau`. `tau = -1` keeps every entry.
pub fn similarity_matrix(dict: &Dictionary, tau: f64) -> SimilarityMatrix {
    let n = dict.n();
    let mut raw = vec![0.0f32; n * n];
    par::for_each_chunk_mut(&mut raw, TILE * n, |block, out| {
        let row0 = block * TILE;
        let rows = out.len() / n;
        for col0 in (0..n).step_by(TILE) {
            let col1 = (col0 + TILE).min(n);
            for r in 0..rows {
                let a = dict.row(row0 + r);
                let dst = &mut out[r * n..(r + 1) * n];
                for (c, slot) in dst[col0..col1].iter_mut().enumerate() {
                    *slot = vector::dot(a, dict.row(col0 + c)) as f32;
                }
            }
        }
    });
    let mut m = SimilarityMatrix {
        raw,
        n,
        tau,
        supports: Vec::new(),
    };
    m.supports = par::map_range(n, |i| m.support_of(i));
    m
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Unthresholded similarity `s_{i,j}`.
    #[inline]
    pub fn raw(&self, i: usize, j: usize) -> f32 {
        self.raw[i * self.n + j]
    }

    #[inline]
    pub fn raw_row(&self, i: usize) -> &[f32] {
        &self.raw[i * self.n..(i + 1) * self.n]
    }

    /// Thresholded entry of `Ŝ`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        threshold(self.raw(i, j), self.tau)
    }

    pub fn thresholded_row(&self, i: usize) -> Vec<f32> {
        self.raw_row(i)
            .iter()
            .map(|&x| threshold(x, self.tau))
            .collect()
    }

    /// Dense thresholded matrix, row-major.
    pub fn thresholded_values(&self) -> Vec<f32> {
        self.raw.iter().map(|&x| threshold(x, self.tau)).collect()
    }

    /// Sorted columns of row `i` whose thresholded value is nonzero.
    pub fn support(&self, i: usize) -> &[u32] {
        &self.supports[i]
    }

    fn support_of(&self, i: usize) -> Vec<u32> {
        self.raw_row(i)
            .iter()
            .enumerate()
            .filter(|&(_, &x)| threshold(x, self.tau) != 0.0)
            .map(|(j, _)| j as u32)
            .collect()
    }

    /// Recomputes the rows and columns listed in `changed` from `dict`.
    ///
    /// The result is bitwise-equal to rebuilding the matrix from scratch.
    pub fn refresh_rows(&mut self, dict: &Dictionary, changed: &[usize]) -> Result<()> {
        let n = self.n;
        if dict.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: dict.n(),
            });
        }
        for &r in changed {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, len: n });
            }
        }
        let fresh: Vec<Vec<f32>> = par::map_slice(changed, |&r| {
            let a = dict.row(r);
            (0..n).map(|j| vector::dot(a, dict.row(j)) as f32).collect()
        });
        for (&r, row) in changed.iter().zip(&fresh) {
            self.raw[r * n..(r + 1) * n].copy_from_slice(row);
            for (j, &v) in row.iter().enumerate() {
                self.raw[j * n + r] = v;
            }
        }

        let mut is_changed = vec![false; n];
        for &r in changed {
            is_changed[r] = true;
        }
        let mut cols: Vec<u32> = changed.iter().map(|&r| r as u32).collect();
        cols.sort_unstable();
        cols.dedup();
        let this = &*self;
        let supports: Vec<Vec<u32>> = par::map_range(n, |i| {
            if is_changed[i] {
                return this.support_of(i);
            }
            let mut s = this.supports[i].clone();
            for &c in &cols {
                let keep = threshold(this.raw(i, c as usize), this.tau) != 0.0;
                match (s.binary_search(&c), keep) {
                    (Err(pos), true) => s.insert(pos, c),
                    (Ok(pos), false) => {
                        s.remove(pos);
                    }
                    _ => {}
                }
            }
            s
        });
        self.supports = supports;
        Ok(())
    }
}
