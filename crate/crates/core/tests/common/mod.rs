//! Brute-force reference for positive label mining, written as plain loops
//! over a dense similarity matrix.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mining outcome for one probe, field for field comparable with the
/// library's result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveMining {
    pub p_ps: Vec<usize>,
    pub p_rank: Vec<usize>,
    pub p_adj: Vec<usize>,
    pub p_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
    pub n_hard: Vec<usize>,
}

/// Hard-negative fraction as an exact ratio, so the ceiling is computed
/// without rounding.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn ceil_of(self, len: usize) -> usize {
        (len * self.num).div_ceil(self.den)
    }
}

pub fn dense_similarity(rows: &[Vec<f32>]) -> Vec<Vec<f32>> {
    rows.iter()
        .map(|a| {
            rows.iter()
                .map(|b| {
                    let mut s = 0.0f64;
                    for k in 0..a.len() {
                        s += a[k] as f64 * b[k] as f64;
                    }
                    s as f32
                })
                .collect()
        })
        .collect()
}

fn masked(s: &[Vec<f32>], tau: f64) -> Vec<Vec<f32>> {
    s.iter()
        .map(|r| r.iter().map(|&x| if (x as f64) >= tau { x } else { 0.0 }).collect())
        .collect()
}

/// Sorts `idx` by descending `row[j]`, ties by ascending `j`.
fn sort_desc(idx: &mut [usize], row: &[f32]) {
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
}

fn candidates(s: &[Vec<f32>], i: usize, tau: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for j in 0..s.len() {
        if j != i && s[i][j] as f64 >= tau {
            out.push(j);
        }
    }
    sort_desc(&mut out, &s[i]);
    out
}

pub fn naive_mine(rows: &[Vec<f32>], probe: usize, tau: f64, gamma: Ratio) -> NaiveMining {
    let n = rows.len();
    let s = dense_similarity(rows);
    let t = masked(&s, tau);

    let p_ps = candidates(&s, probe, tau);
    let k = p_ps.len();

    let mut p_rank = Vec::new();
    for &j in &p_ps {
        let theirs = candidates(&s, j, tau);
        if theirs.iter().take(k).any(|&x| x == probe) {
            p_rank.push(j);
        }
    }

    let mut dist: Vec<(f64, usize)> = Vec::new();
    for j in 0..n {
        if j == probe {
            continue;
        }
        let mut acc = 0.0f64;
        for c in 0..n {
            let diff = t[probe][c] as f64 - t[j][c] as f64;
            acc += diff * diff;
        }
        dist.push((acc.sqrt(), j));
    }
    dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let p_adj: Vec<usize> = dist.iter().take(k).map(|d| d.1).collect();

    let p_pos: Vec<usize> = p_rank.iter().copied().filter(|j| p_adj.contains(j)).collect();

    let n_neg: Vec<usize> = (0..n).filter(|&j| j != probe && !p_pos.contains(&j)).collect();
    let mut n_hard = n_neg.clone();
    sort_desc(&mut n_hard, &s[probe]);
    n_hard.truncate(gamma.ceil_of(n_neg.len()));

    NaiveMining {
        p_ps,
        p_rank,
        p_adj,
        p_pos,
        n_neg,
        n_hard,
    }
}

/// Unit rows scattered around a handful of random directions, with some
/// exact duplicates so ties occur.
pub fn clustered_rows(seed: u64, n: usize, d: usize, spread: f32) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f32>> = (0..rng.random_range(2..6))
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    while rows.len() < n {
        if !rows.is_empty() && rng.random_bool(0.1) {
            let pick = rows[rng.random_range(0..rows.len())].clone();
            rows.push(pick);
            continue;
        }
        let c = &centres[rng.random_range(0..centres.len())];
        let v: Vec<f64> = c
            .iter()
            .map(|&x| (x + rng.random_range(-spread..spread)) as f64)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-3 {
            continue;
        }
        rows.push(v.iter().map(|x| (x / norm) as f32).collect());
    }
    rows
}
