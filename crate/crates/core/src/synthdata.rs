//! Synthetic identity-clustered corpora.
//!
//! Identity centroids are drawn uniformly on the unit sphere, with any
//! centroid whose cosine to an earlier one exceeds 0.5 redrawn. Each sample is
//! its centroid plus isotropic Gaussian jitter, renormalised. Identity `k`
//! draws its samples from its own ChaCha stream, so generation parallelises
//! per identity without changing the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::featurestore::{normalize_f64_to_f32, FeatureMatrix};
use crate::par;
use crate::vector;

/// Largest cosine allowed between two identity centroids.
pub const MAX_CENTROID_COSINE: f64 = 0.5;
/// Redraws allowed per centroid.
pub const MAX_CENTROID_ATTEMPTS: usize = 10_000;

const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub d_in: usize,
    /// Per-coordinate standard deviation of the jitter.
    pub intra_noise: f64,
    pub seed: u64,
    pub query_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_identities: 50,
            samples_per_identity: 20,
            d_in: 32,
            intra_noise: 0.05,
            seed: 7,
            query_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 1 {
            return Err(Error::config("identities", "must be at least 1"));
        }
        if self.samples_per_identity < 1 {
            return Err(Error::config("per-id", "must be at least 1"));
        }
        if self.num_identities * self.samples_per_identity < 2 {
            return Err(Error::config("per-id", "corpus needs at least 2 samples"));
        }
        if self.d_in < 2 {
            return Err(Error::config("din", "must be at least 2"));
        }
        if !(self.intra_noise >= 0.0 && self.intra_noise.is_finite()) {
            return Err(Error::config("noise", "must be a finite value >= 0"));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::config("query-fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Query and gallery row indices, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl Split {
    /// Per-identity split: each identity with at least two samples sends
    /// `round(fraction · count)` of them (at least one, at most `count − 1`)
    /// to the query side; singletons go to the gallery.
    pub fn stratified(identities: &[u32], query_fraction: f64, seed: u64) -> Self {
        let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, &id) in identities.iter().enumerate() {
            by_id.entry(id).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPLIT_STREAM);
        let (mut query, mut gallery) = (Vec::new(), Vec::new());
        for (_, mut rows) in by_id {
            let count = rows.len();
            let q = if count < 2 {
                0
            } else {
                ((query_fraction * count as f64).round() as usize).clamp(1, count - 1)
            };
            rows.shuffle(&mut rng);
            query.extend_from_slice(&rows[..q]);
            gallery.extend_from_slice(&rows[q..]);
        }
        query.sort_unstable();
        gallery.sort_unstable();
        Self { query, gallery }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// Unit-norm samples, identity-major.
    pub features: FeatureMatrix,
    /// Ground-truth identity of each row. Never read by training.
    pub identities: Vec<u32>,
    pub split: Split,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = vector::norm_f64(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn draw_centroids(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.num_identities);
    while centroids.len() < spec.num_identities {
        let mut placed = false;
        for _ in 0..MAX_CENTROID_ATTEMPTS {
            let c = random_unit(&mut rng, spec.d_in);
            if centroids
                .iter()
                .all(|o| vector::dot_f64(o, &c) <= MAX_CENTROID_COSINE)
            {
                centroids.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::CentroidRejectionExhausted {
                identities: spec.num_identities,
                dim: spec.d_in,
                attempts: MAX_CENTROID_ATTEMPTS,
            });
        }
    }
    Ok(centroids)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let centroids = draw_centroids(spec)?;
    let per = spec.samples_per_identity;
    let noise = Normal::new(0.0, spec.intra_noise)
        .map_err(|e| Error::config("noise", e.to_string()))?;
    let blocks = par::map_range(spec.num_identities, |k| -> Result<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k as u64 + 1);
        let mut out = Vec::with_capacity(per * spec.d_in);
        for s in 0..per {
            let v: Vec<f64> = centroids[k]
                .iter()
                .map(|c| c + noise.sample(&mut rng))
                .collect();
            out.extend(normalize_f64_to_f32(&v, k * per + s)?);
        }
        Ok(out)
    });
    let mut data = Vec::with_capacity(spec.num_identities * per * spec.d_in);
    for b in blocks {
        data.extend(b?);
    }
    let features = FeatureMatrix::new(data, spec.num_identities * per, spec.d_in)?;
    let identities: Vec<u32> = (0..spec.num_identities)
        .flat_map(|k| std::iter::repeat(k as u32).take(per))
        .collect();
    let split = Split::stratified(&identities, spec.query_fraction, spec.seed);
    Ok(SynthCorpus {
        features,
        identities,
        split,
    })
}

/// Mean same-identity cosine minus mean cross-identity cosine. `None` when
/// either kind of pair is absent.
pub fn cosine_margin(features: &FeatureMatrix, identities: &[u32]) -> Option<f64> {
    let n = features.n();
    let sums = par::map_range(n, |i| {
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for j in i + 1..n {
            let c = vector::dot(features.row(i), features.row(j));
            if identities[i] == identities[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
        (intra, ni, inter, nx)
    });
    let (intra, ni, inter, nx) = sums
        .into_iter()
        .fold((0.0, 0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3));
    (ni > 0 && nx > 0).then(|| intra / ni as f64 - inter / nx as f64)
}

/// Generates a corpus whose [`cosine_margin`] is at least `min_margin`,
/// retrying with successive seeds.
pub fn generate_with_margin(spec: &SynthSpec, min_margin: f64, max_attempts: usize) -> Result<SynthCorpus> {
    let mut last = f64::NAN;
    for attempt in 0..max_attempts.max(1) {
        let s = SynthSpec {
            seed: spec.seed.wrapping_add(attempt as u64),
            ..*spec
        };
        let corpus = generate(&s)?;
        match cosine_margin(&corpus.features, &corpus.identities) {
            Some(m) if m >= min_margin => return Ok(corpus),
            Some(m) => last = m,
            None => return Ok(corpus),
        }
    }
    Err(Error::MarginNotReached {
        margin: last,
        required: min_margin,
        attempts: max_attempts.max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_single_identity_gives_identical_rows() {
        let c = generate(&SynthSpec {
            num_identities: 1,
            samples_per_identity: 4,
            intra_noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        for i in 1..4 {
            assert_eq!(c.features.row(i), c.features.row(0));
        }
    }

    #[test]
    fn zero_noise_pairs() {
        let c = generate(&SynthSpec {
            num_identities: 2,
            samples_per_identity: 2,
            d_in: 8,
            intra_noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        let cos = |i, j| vector::dot(c.features.row(i), c.features.row(j));
        assert!((cos(0, 1) - 1.0).abs() < 1e-6);
        assert!((cos(2, 3) - 1.0).abs() < 1e-6);
        assert!(cos(0, 2) <= 0.5 + 1e-6);
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert!(a
            .features
            .as_slice()
            .iter()
            .zip(b.features.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.identities, b.identities);
        assert_eq!(a.split, b.split);
        assert!(a.features.is_normalized(1e-6));
    }

    #[test]
    fn default_corpus_has_margin() {
        let c = generate(&SynthSpec::default()).unwrap();
        let m = cosine_margin(&c.features, &c.identities).unwrap();
        assert!(m >= 0.3, "margin {m}");
        assert!(generate_with_margin(&SynthSpec::default(), 0.3, 3).is_ok());
    }

    #[test]
    fn split_covers_every_identity() {
        let c = generate(&SynthSpec {
            num_identities: 10,
            samples_per_identity: 3,
            d_in: 16,
            query_fraction: 0.1,
            ..Default::default()
        })
        .unwrap();
        for id in 0..10u32 {
            assert!(c.split.query.iter().any(|&i| c.identities[i] == id));
            assert!(c.split.gallery.iter().any(|&i| c.identities[i] == id));
        }
        let mut all: Vec<usize> = c.split.query.iter().chain(&c.split.gallery).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_identities_is_reported() {
        let err = generate(&SynthSpec {
            num_identities: 40,
            samples_per_identity: 1,
            d_in: 2,
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::CentroidRejectionExhausted { .. }));
    }

    #[test]
    fn validation() {
        let bad = [
            SynthSpec { num_identities: 1, samples_per_identity: 1, ..Default::default() },
            SynthSpec { d_in: 1, ..Default::default() },
            SynthSpec { intra_noise: -1.0, ..Default::default() },
            SynthSpec { query_fraction: 1.0, ..Default::default() },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::InvalidConfig { .. })));
        }
    }
}
