//! Retrieval and mining-quality metrics.
//!
//! Ranking uses `1 − cosine` (ties by ascending gallery index), CMC counts the
//! first correct match, and AP averages precision at every correct position.
//! There is no camera information, so no same-camera filtering is applied.

use std::io::Write;

use crate::dplm::{MiningKind, MiningResult};
use crate::error::{Error, Result};
use crate::featurestore::FeatureMatrix;
use crate::par;
use crate::vector;

/// Gallery indices sorted by ascending `1 − cos(query, g)`.
pub fn retrieve(query: &[f32], gallery: &FeatureMatrix) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if query.len() != gallery.d() {
        return Err(Error::DimensionMismatch {
            expected: gallery.d(),
            found: query.len(),
        });
    }
    let dist: Vec<f64> = gallery
        .rows()
        .map(|g| 1.0 - vector::dot(query, g))
        .collect();
    let mut order: Vec<usize> = (0..gallery.n()).collect();
    order.sort_unstable_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    /// `cmc[k-1]` is the rank-k accuracy, for k up to the gallery size.
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl RetrievalMetrics {
    /// Rank-k accuracy; ranks past the gallery size read the last entry.
    pub fn rank(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.cmc.len());
        self.cmc[k - 1]
    }
}

/// First correct rank (0-based) and average precision of one ranked list.
fn score_ranking(order: &[usize], gallery_ids: &[u32], id: u32) -> (Option<usize>, f64) {
    let mut first = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (pos, &g) in order.iter().enumerate() {
        if gallery_ids[g] == id {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos);
        }
    }
    let ap = if hits == 0 { 0.0 } else { precision_sum / hits as f64 };
    (first, ap)
}

pub fn cmc_map(
    queries: &FeatureMatrix,
    query_ids: &[u32],
    gallery: &FeatureMatrix,
    gallery_ids: &[u32],
) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if queries.is_empty() {
        return Err(Error::ShapeMismatch("no queries to evaluate".into()));
    }
    if query_ids.len() != queries.n() || gallery_ids.len() != gallery.n() {
        return Err(Error::ShapeMismatch(
            "identity list length does not match the feature rows".into(),
        ));
    }
    if let Some(&missing) = query_ids.iter().find(|id| !gallery_ids.contains(id)) {
        return Err(Error::QueryIdentityMissing(missing));
    }
    let scored = par::map_range(queries.n(), |q| -> Result<(Option<usize>, f64)> {
        let order = retrieve(queries.row(q), gallery)?;
        Ok(score_ranking(&order, gallery_ids, query_ids[q]))
    });
    let m = gallery.n();
    let mut first_hits = vec![0usize; m];
    let mut ap_sum = 0.0;
    for s in scored {
        let (first, ap) = s?;
        if let Some(f) = first {
            first_hits[f] += 1;
        }
        ap_sum += ap;
    }
    let nq = queries.n() as f64;
    let mut cmc = Vec::with_capacity(m);
    let mut acc = 0usize;
    for h in first_hits {
        acc += h;
        cmc.push(acc as f64 / nq);
    }
    Ok(RetrievalMetrics {
        cmc,
        map: ap_sum / nq,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningQuality {
    pub precision: f64,
    pub recall: f64,
    pub count: usize,
}

impl MiningQuality {
    /// Nothing mined: precision 1 by convention, recall 0.
    pub fn vacuous() -> Self {
        Self {
            precision: 1.0,
            recall: 0.0,
            count: 0,
        }
    }
}

/// Pooled precision and recall of mined positive sets against identities.
///
/// A probe's true set is every other row with its identity. Precision is 1
/// when nothing is mined.
pub fn mining_quality<'a, I>(mined: I, identities: &[u32]) -> MiningQuality
where
    I: IntoIterator<Item = (usize, &'a [usize])>,
{
    let mut id_counts: std::collections::HashMap<u32, usize> = Default::default();
    for &id in identities {
        *id_counts.entry(id).or_default() += 1;
    }
    let (mut hits, mut count, mut truth) = (0usize, 0usize, 0usize);
    for (probe, set) in mined {
        let id = identities[probe];
        truth += id_counts[&id] - 1;
        count += set.len();
        hits += set.iter().filter(|&&j| identities[j] == id).count();
    }
    MiningQuality {
        precision: if count == 0 { 1.0 } else { hits as f64 / count as f64 },
        recall: if truth == 0 {
            if count == 0 { 0.0 } else { 1.0 }
        } else {
            hits as f64 / truth as f64
        },
        count,
    }
}

/// [`mining_quality`] of one strategy's positive sets.
pub fn mining_quality_of(results: &[MiningResult], kind: MiningKind, identities: &[u32]) -> MiningQuality {
    mining_quality(results.iter().map(|r| (r.probe, r.positives(kind))), identities)
}

/// One row of the per-epoch training report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub retrieval: Option<RetrievalMetrics>,
    /// Quality of the positives used for training (vacuous during warm-up).
    pub mining: Option<MiningQuality>,
    /// Quality of every strategy's positive sets on the same snapshot.
    pub mining_by_kind: Vec<(MiningKind, MiningQuality)>,
    pub loss: f64,
}

impl EpochReport {
    pub fn rank1(&self) -> Option<f64> {
        self.retrieval.as_ref().map(|r| r.rank(1))
    }

    pub fn map(&self) -> Option<f64> {
        self.retrieval.as_ref().map(|r| r.map)
    }

    pub fn quality_of(&self, kind: MiningKind) -> Option<MiningQuality> {
        self.mining_by_kind
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, q)| *q)
    }
}

pub const REPORT_HEADER: &str = "epoch,rank1,rank5,rank10,map,mine_precision,mine_recall,mine_count";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn report_csv_row(r: &EpochReport) -> String {
    let ret = r.retrieval.as_ref();
    format!(
        "{},{},{},{},{},{},{},{}",
        r.epoch,
        opt(ret.map(|m| m.rank(1))),
        opt(ret.map(|m| m.rank(5))),
        opt(ret.map(|m| m.rank(10))),
        opt(ret.map(|m| m.map)),
        opt(r.mining.map(|q| q.precision)),
        opt(r.mining.map(|q| q.recall)),
        r.mining.map(|q| q.count.to_string()).unwrap_or_default(),
    )
}

pub fn write_report_csv<W: Write>(w: &mut W, reports: &[EpochReport]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", report_csv_row(r))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn m(rows: &[[f32; 2]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    fn angle(deg: f64) -> [f32; 2] {
        let a = deg.to_radians();
        [a.cos() as f32, a.sin() as f32]
    }

    #[test]
    fn retrieve_examples() {
        let g = m(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        assert_eq!(retrieve(&[1.0, 0.0], &g).unwrap(), vec![0, 1, 2]);
        let g = m(&[angle(40.0), angle(10.0), angle(0.0)]);
        assert_eq!(retrieve(&angle(0.0), &g).unwrap()[0], 2);
        let empty = FeatureMatrix::new(vec![], 0, 2).unwrap();
        assert!(matches!(retrieve(&[1.0, 0.0], &empty), Err(Error::EmptyGallery)));
    }

    #[test]
    fn retrieve_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f32; 2]> = (0..10).map(|_| angle(rng.random_range(0.0..360.0))).collect();
        let g = m(&rows);
        let q = angle(17.0);
        let mut oracle: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let dx = (q[0] - r[0]) as f64;
                let dy = (q[1] - r[1]) as f64;
                ((dx * dx + dy * dy).sqrt(), i)
            })
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
        assert_eq!(retrieve(&q, &g).unwrap(), want);
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let f = m(&[angle(0.0), angle(90.0), angle(200.0)]);
        let ids = [0, 1, 2];
        let r = cmc_map(&f, &ids, &f, &ids).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn single_correct_at_rank_three() {
        let q = m(&[angle(0.0)]);
        let g = m(&[angle(5.0), angle(10.0), angle(20.0), angle(30.0), angle(40.0)]);
        let r = cmc_map(&q, &[1], &g, &[0, 0, 1, 0, 0]).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 0.0);
        assert_eq!(r.rank(3), 1.0);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_correct_at_ranks_one_and_four() {
        let q = m(&[angle(0.0)]);
        let g = m(&[angle(5.0), angle(10.0), angle(20.0), angle(30.0), angle(40.0)]);
        let r = cmc_map(&q, &[1], &g, &[1, 0, 0, 1, 0]).unwrap();
        assert!((r.map - 0.75).abs() < 1e-12);
    }

    #[test]
    fn missing_identity() {
        let f = m(&[angle(0.0)]);
        assert!(matches!(
            cmc_map(&f, &[3], &f, &[4]),
            Err(Error::QueryIdentityMissing(3))
        ));
    }

    #[test]
    fn mining_quality_examples() {
        let ids = [0, 0, 0, 1, 1];
        let exact: Vec<(usize, Vec<usize>)> = vec![
            (0, vec![1, 2]),
            (1, vec![0, 2]),
            (2, vec![0, 1]),
            (3, vec![4]),
            (4, vec![3]),
        ];
        let q = mining_quality(exact.iter().map(|(p, s)| (*p, s.as_slice())), &ids);
        assert_eq!((q.precision, q.recall, q.count), (1.0, 1.0, 8));

        let none: Vec<(usize, Vec<usize>)> = (0..5).map(|p| (p, vec![])).collect();
        let q = mining_quality(none.iter().map(|(p, s)| (*p, s.as_slice())), &ids);
        assert_eq!((q.precision, q.recall, q.count), (1.0, 0.0, 0));

        let one_wrong = [(0usize, vec![1usize, 2, 3]), (3, vec![4])];
        let q = mining_quality(one_wrong.iter().map(|(p, s)| (*p, s.as_slice())), &ids);
        assert_eq!(q.precision, 0.75);
        assert_eq!(q.count, 4);
    }

    #[test]
    fn csv_row_format() {
        let r = EpochReport {
            epoch: 3,
            retrieval: Some(RetrievalMetrics {
                cmc: vec![0.5, 0.75, 1.0],
                map: 0.6,
            }),
            mining: Some(MiningQuality::vacuous()),
            mining_by_kind: vec![],
            loss: 1.0,
        };
        assert_eq!(
            report_csv_row(&r),
            "3,0.500000,1.000000,1.000000,0.600000,1.000000,0.000000,0"
        );
        let blank = EpochReport {
            retrieval: None,
            mining: None,
            ..r
        };
        assert_eq!(report_csv_row(&blank), "3,,,,,,,");
    }

    fn naive_quality(mined: &[(usize, Vec<usize>)], ids: &[u32]) -> (f64, f64, usize) {
        let (mut hit, mut cnt, mut tru) = (0, 0, 0);
        for (p, set) in mined {
            let truth: HashSet<usize> = (0..ids.len()).filter(|&j| j != *p && ids[j] == ids[*p]).collect();
            let got: HashSet<usize> = set.iter().copied().collect();
            hit += truth.intersection(&got).count();
            cnt += got.len();
            tru += truth.len();
        }
        let prec = if cnt == 0 { 1.0 } else { hit as f64 / cnt as f64 };
        let rec = if tru == 0 { if cnt == 0 { 0.0 } else { 1.0 } } else { hit as f64 / tru as f64 };
        (prec, rec, cnt)
    }

    proptest! {
        #[test]
        fn quality_matches_set_oracle(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let mined: Vec<(usize, Vec<usize>)> = (0..n)
                .map(|p| (p, (0..n).filter(|&j| j != p && rng.random_bool(0.3)).collect()))
                .collect();
            let q = mining_quality(mined.iter().map(|(p, s)| (*p, s.as_slice())), &ids);
            prop_assert_eq!((q.precision, q.recall, q.count), naive_quality(&mined, &ids));
        }

        #[test]
        fn cmc_monotone_and_permutation_invariant(seed in any::<u64>(), nq in 1usize..6, ng in 3usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids_pool = 3u32;
            let gids: Vec<u32> = (0..ng).map(|i| (i as u32) % ids_pool).collect();
            let qids: Vec<u32> = (0..nq).map(|_| rng.random_range(0..ids_pool)).collect();
            let g: Vec<[f32; 2]> = (0..ng).map(|_| angle(rng.random_range(0.0..360.0))).collect();
            let q: Vec<[f32; 2]> = (0..nq).map(|_| angle(rng.random_range(0.0..360.0))).collect();
            let r = cmc_map(&m(&q), &qids, &m(&g), &gids).unwrap();
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.map <= r.rank(ng) + 1e-12);
            let mut perm: Vec<usize> = (0..ng).collect();
            perm.reverse();
            let pg: Vec<[f32; 2]> = perm.iter().map(|&i| g[i]).collect();
            let pids: Vec<u32> = perm.iter().map(|&i| gids[i]).collect();
            let r2 = cmc_map(&m(&q), &qids, &m(&pg), &pids).unwrap();
            prop_assert!(r.cmc.iter().zip(&r2.cmc).all(|(a, b)| (a - b).abs() < 1e-12));
            prop_assert!((r.map - r2.map).abs() < 1e-12);
        }
    }
}
