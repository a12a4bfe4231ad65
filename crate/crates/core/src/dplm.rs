//! Dictionary-based positive label mining.
//!
//! For a probe `i` the miner combines three views of the dictionary:
//!
//! 1. candidates `P^PS`: every other entry with similarity `>= tau`, sorted by
//!    descending similarity;
//! 2. relative-rank consistency `P^Rank`: candidates `j` that also rank `i`
//!    within their own top-`K` candidates, `K = |P^PS|`;
//! 3. adjacent feature distribution similarity `P^Adj`: the `K` entries whose
//!    thresholded similarity rows are closest to row `i` in Euclidean distance.
//!
//! Positives are `P⁺ = P^Rank ∩ P^Adj`; every other label is a negative, and
//! the `⌈γ·|N⁻|⌉` most similar negatives are the hard negatives.
//!
//! Ties are broken by ascending index everywhere, and the probe never appears
//! in its own candidate, adjacency or negative sets.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::featurestore::Dictionary;
use crate::par;
use crate::similarity::{threshold, SimilarityMatrix};

/// Which mined set serves as the positive labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MiningKind {
    Ps,
    Rank,
    Adj,
    Intersection,
}

impl MiningKind {
    pub const ALL: [MiningKind; 4] = [
        MiningKind::Ps,
        MiningKind::Rank,
        MiningKind::Adj,
        MiningKind::Intersection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MiningKind::Ps => "ps",
            MiningKind::Rank => "rank",
            MiningKind::Adj => "adj",
            MiningKind::Intersection => "intersection",
        }
    }
}

impl fmt::Display for MiningKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MiningKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ps" => Ok(MiningKind::Ps),
            "rank" => Ok(MiningKind::Rank),
            "adj" => Ok(MiningKind::Adj),
            "intersection" | "pos" => Ok(MiningKind::Intersection),
            other => Err(Error::config(
                "mining",
                format!("unknown strategy `{other}` (expected ps, rank, adj or intersection)"),
            )),
        }
    }
}

/// Everything mined for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub probe: usize,
    /// Candidates, descending similarity.
    pub p_ps: Vec<usize>,
    /// Rank-consistent candidates, in `p_ps` order.
    pub p_rank: Vec<usize>,
    /// Nearest neighbourhoods, ascending distance.
    pub p_adj: Vec<usize>,
    /// `p_rank ∩ p_adj`, in `p_rank` order.
    pub p_pos: Vec<usize>,
    /// Every label except the probe and `p_pos`, ascending.
    pub n_neg: Vec<usize>,
    /// Hard negatives, descending similarity.
    pub n_hard: Vec<usize>,
    /// Unthresholded similarity of the probe to every entry.
    pub similarity: Vec<f32>,
}

impl MiningResult {
    /// `K = |P^PS|`.
    pub fn k(&self) -> usize {
        self.p_ps.len()
    }

    pub fn positives(&self, kind: MiningKind) -> &[usize] {
        match kind {
            MiningKind::Ps => &self.p_ps,
            MiningKind::Rank => &self.p_rank,
            MiningKind::Adj => &self.p_adj,
            MiningKind::Intersection => &self.p_pos,
        }
    }
}

/// Positive and hard-negative labels handed to the loss for one probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAssignment {
    pub probe: usize,
    pub positives: Vec<usize>,
    pub hard_negatives: Vec<usize>,
}

impl LabelAssignment {
    /// Warm-up labels: the probe is its own only positive; hard negatives are
    /// drawn from all other entries.
    pub fn warmup(probe: usize, similarity: &[f32], gamma: f64) -> Result<Self> {
        let (_, hard) = hard_negatives(probe, similarity, &[], gamma)?;
        Ok(Self {
            probe,
            positives: vec![probe],
            hard_negatives: hard,
        })
    }

    /// Labels from a mining result under strategy `kind`. Negatives are the
    /// complement of the chosen positive set. An empty positive set falls
    /// back to the self-positive.
    pub fn from_mining(result: &MiningResult, kind: MiningKind, gamma: f64) -> Result<Self> {
        let positives = result.positives(kind).to_vec();
        let hard = if kind == MiningKind::Intersection {
            result.n_hard.clone()
        } else {
            hard_negatives(result.probe, &result.similarity, &positives, gamma)?.1
        };
        let positives = if positives.is_empty() {
            vec![result.probe]
        } else {
            positives
        };
        Ok(Self {
            probe: result.probe,
            positives,
            hard_negatives: hard,
        })
    }
}

#[inline]
fn by_similarity_desc(s: &[f32]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b))
}

/// Every `j != probe` with `s[j] >= tau`, descending by similarity.
pub fn candidate_set(s: &[f32], tau: f64, probe: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..s.len())
        .filter(|&j| j != probe && s[j] as f64 >= tau)
        .collect();
    out.sort_unstable_by(by_similarity_desc(s));
    out
}

/// Is `probe` among the first `k` candidates of row `owner`?
///
/// Counts the candidates that would sort ahead of `probe` instead of sorting
/// the row.
fn in_top_k(sim: &SimilarityMatrix, owner: usize, probe: usize, k: usize, tau: f64) -> bool {
    let row = sim.raw_row(owner);
    let sp = row[probe];
    if k == 0 || owner == probe || (sp as f64) < tau {
        return false;
    }
    let mut ahead = 0usize;
    let mut visit = |c: usize, sc: f32| -> bool {
        if c == owner || c == probe || (sc as f64) < tau {
            return true;
        }
        if sc > sp || (sc == sp && c < probe) {
            ahead += 1;
        }
        ahead < k
    };
    if tau > 0.0 {
        // Above a positive threshold the candidates are exactly the support,
        // and a support no longer than k holds its whole top-k.
        let support = sim.support(owner);
        let own = usize::from(support.binary_search(&(owner as u32)).is_ok());
        if support.len() - own <= k {
            return true;
        }
        support
            .iter()
            .all(|&c| visit(c as usize, row[c as usize]))
    } else {
        row.iter().enumerate().all(|(c, &sc)| visit(c, sc))
    }
}

/// Candidates of `probe` that rank `probe` within their own top-`|p_ps|`
/// candidates. Keeps `p_ps` order.
pub fn rank_consistent_set(
    probe: usize,
    p_ps: &[usize],
    sim: &SimilarityMatrix,
    tau: f64,
) -> Vec<usize> {
    let k = p_ps.len();
    p_ps.iter()
        .copied()
        .filter(|&j| in_top_k(sim, j, probe, k, tau))
        .collect()
}

/// Euclidean distance between thresholded rows `i` and `j` of `sim`.
///
/// Walks the union of the two row supports in column order; columns outside
/// both supports contribute exactly zero, so the value equals the dense sum.
pub fn adjacent_distance(sim: &SimilarityMatrix, i: usize, j: usize) -> f64 {
    let (si, sj) = (sim.support(i), sim.support(j));
    let (ri, rj) = (sim.raw_row(i), sim.raw_row(j));
    let (mut a, mut b) = (0usize, 0usize);
    let mut acc = 0.0f64;
    loop {
        let ca = si.get(a).copied();
        let cb = sj.get(b).copied();
        let (x, y) = match (ca, cb) {
            (None, None) => break,
            (Some(c), None) => {
                a += 1;
                (ri[c as usize], 0.0)
            }
            (None, Some(c)) => {
                b += 1;
                (0.0, rj[c as usize])
            }
            (Some(p), Some(q)) => match p.cmp(&q) {
                Ordering::Less => {
                    a += 1;
                    (ri[p as usize], 0.0)
                }
                Ordering::Greater => {
                    b += 1;
                    (0.0, rj[q as usize])
                }
                Ordering::Equal => {
                    a += 1;
                    b += 1;
                    (ri[p as usize], rj[p as usize])
                }
            },
        };
        let diff = x as f64 - y as f64;
        acc += diff * diff;
    }
    acc.sqrt()
}

/// Rows whose support exceeds `n / DENSE_SUPPORT_RATIO` take the dense path.
const DENSE_SUPPORT_RATIO: usize = 8;

/// Squared row distance summed in four interleaved lanes. Each term is
/// computed exactly as in [`adjacent_distance`]; only the summation order
/// differs.
fn lane_sq_distance(ti: &[f32], rj: &[f32], tau: f64) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (head, tail) = (ti.len() / 4 * 4, ti.len() % 4);
    for (a, b) in ti[..head].chunks_exact(4).zip(rj[..head].chunks_exact(4)) {
        for l in 0..4 {
            let d = a[l] as f64 - threshold(b[l], tau) as f64;
            lanes[l] += d * d;
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for c in head..head + tail {
        let d = ti[c] as f64 - threshold(rj[c], tau) as f64;
        acc += d * d;
    }
    acc
}

/// Exact squared row distance as a plain column-order loop. Columns outside
/// both supports add exactly zero, so this equals [`adjacent_distance`]
/// squared bit for bit.
fn dense_sq_distance(ti: &[f32], rj: &[f32], tau: f64) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in ti.iter().zip(rj) {
        let d = a as f64 - threshold(b, tau) as f64;
        acc += d * d;
    }
    acc
}

/// Distances from `probe` to a superset of its `k` nearest rows, found from
/// reordered sums.
///
/// A sum of `n` nonnegative terms in any order is within `(n-1)·u·S` of the
/// exact value, so two orders differ by at most `n·ε·S`. Every row whose
/// reordered sum lies within that band of the `k`-th smallest (plus a
/// relative slack for ties introduced by the square root) is kept. When most
/// rows are wanted anyway the screening pass is skipped.
fn dense_candidates(probe: usize, sim: &SimilarityMatrix, k: usize) -> Vec<(f64, usize)> {
    let n = sim.n();
    let tau = sim.tau();
    let ti = sim.thresholded_row(probe);
    let exact = |j: usize| (dense_sq_distance(&ti, sim.raw_row(j), tau).sqrt(), j);
    if 2 * k >= n {
        return (0..n).filter(|&j| j != probe).map(exact).collect();
    }
    let approx: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != probe)
        .map(|j| (lane_sq_distance(&ti, sim.raw_row(j), tau), j))
        .collect();
    let mut values: Vec<f64> = approx.iter().map(|a| a.0).collect();
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, f64::total_cmp);
    let kth = *kth;
    let max = approx.iter().map(|a| a.0).fold(0.0, f64::max);
    let band = kth + 4.0 * n as f64 * f64::EPSILON * max + 1e-12 * kth;
    approx
        .into_iter()
        .filter(|&(v, _)| v <= band)
        .map(|(_, j)| exact(j))
        .collect()
}

/// The `k` entries (excluding `probe`) with the most similar neighbourhood
/// distribution, ascending by distance.
pub fn adjacent_set(probe: usize, sim: &SimilarityMatrix, k: usize) -> Vec<usize> {
    let n = sim.n();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(f64, usize)> = if sim.support(probe).len() * DENSE_SUPPORT_RATIO > n {
        dense_candidates(probe, sim, k)
    } else {
        (0..n)
            .filter(|&j| j != probe)
            .map(|j| (adjacent_distance(sim, probe, j), j))
            .collect()
    };
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// `⌈γ·len⌉`, guarded against representation error in `γ·len`.
pub fn hard_negative_count(gamma: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    let c = (gamma * len as f64 - 1e-9).ceil().max(0.0) as usize;
    c.min(len)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// Negative labels (every label except `probe` and `positives`, ascending)
/// and the hard negatives among them (descending similarity).
pub fn hard_negatives(
    probe: usize,
    similarity: &[f32],
    positives: &[usize],
    gamma: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_gamma(gamma)?;
    let n = similarity.len();
    let mut excluded = vec![false; n];
    for &p in positives {
        if p >= n {
            return Err(Error::IndexOutOfRange { index: p, len: n });
        }
        excluded[p] = true;
    }
    if probe < n {
        excluded[probe] = true;
    }
    let neg: Vec<usize> = (0..n).filter(|&j| !excluded[j]).collect();
    let count = hard_negative_count(gamma, neg.len());
    let mut hard = neg.clone();
    let cmp = by_similarity_desc(similarity);
    if count > 0 && count < hard.len() {
        hard.select_nth_unstable_by(count - 1, &cmp);
    }
    hard.truncate(count);
    hard.sort_unstable_by(&cmp);
    Ok((neg, hard))
}

/// Mines positives and hard negatives for `probe`.
///
/// `sim` must be the similarity matrix of `dict` thresholded at `tau`.
pub fn mine(
    probe: usize,
    dict: &Dictionary,
    sim: &SimilarityMatrix,
    tau: f64,
    gamma: f64,
) -> Result<MiningResult> {
    check_gamma(gamma)?;
    check_snapshot(dict, sim, tau)?;
    if probe >= dict.n() {
        return Err(Error::IndexOutOfRange {
            index: probe,
            len: dict.n(),
        });
    }
    Ok(mine_unchecked(probe, sim, tau, gamma))
}

fn check_snapshot(dict: &Dictionary, sim: &SimilarityMatrix, tau: f64) -> Result<()> {
    if sim.n() != dict.n() {
        return Err(Error::DimensionMismatch {
            expected: dict.n(),
            found: sim.n(),
        });
    }
    if sim.tau() != tau {
        return Err(Error::config(
            "tau",
            format!("similarity matrix was thresholded at {}, not {tau}", sim.tau()),
        ));
    }
    Ok(())
}

fn mine_unchecked(probe: usize, sim: &SimilarityMatrix, tau: f64, gamma: f64) -> MiningResult {
    let s = sim.raw_row(probe);
    let p_ps = candidate_set(s, tau, probe);
    let k = p_ps.len();
    let p_rank = rank_consistent_set(probe, &p_ps, sim, tau);
    let p_adj = adjacent_set(probe, sim, k);
    let p_pos: Vec<usize> = p_rank
        .iter()
        .copied()
        .filter(|j| p_adj.contains(j))
        .collect();
    let (n_neg, n_hard) =
        hard_negatives(probe, s, &p_pos, gamma).expect("gamma and indices validated");
    MiningResult {
        probe,
        p_ps,
        p_rank,
        p_adj,
        p_pos,
        n_neg,
        n_hard,
        similarity: s.to_vec(),
    }
}

/// Mines the listed probes against one snapshot, in parallel.
pub fn mine_batch(
    probes: &[usize],
    dict: &Dictionary,
    sim: &SimilarityMatrix,
    tau: f64,
    gamma: f64,
) -> Result<Vec<MiningResult>> {
    check_gamma(gamma)?;
    check_snapshot(dict, sim, tau)?;
    if let Some(&bad) = probes.iter().find(|&&p| p >= dict.n()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: dict.n(),
        });
    }
    Ok(par::map_slice(probes, |&p| mine_unchecked(p, sim, tau, gamma)))
}

/// Mines every dictionary entry.
pub fn mine_all(
    dict: &Dictionary,
    sim: &SimilarityMatrix,
    tau: f64,
    gamma: f64,
) -> Result<Vec<MiningResult>> {
    let probes: Vec<usize> = (0..dict.n()).collect();
    mine_batch(&probes, dict, sim, tau, gamma)
}

/// Line-oriented dump: `probe<TAB>P+:a,b,c<TAB>Nhard:x,y`.
pub fn format_line(probe: usize, positives: &[usize], hard_negatives: &[usize]) -> String {
    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "{probe}\tP+:{}\tNhard:{}",
        join(positives),
        join(hard_negatives)
    )
}
