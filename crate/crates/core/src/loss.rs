//! Dictionary-based triplet loss and the classic triplet baseline.
//!
//! For a live probe feature `z` and stored entries `z̄ⱼ`:
//!
//! ```text
//! L⁺ = Σ_{j∈P⁺} (z·z̄ⱼ − 1)²
//! L⁻ = Σ_{j∈N̄⁻} (z·z̄ⱼ + 1)²
//! L  = L⁺ + σ·L⁻
//! ```
//!
//! Gradients flow into `z` only; dictionary entries are constants. `z` is the
//! already-normalised embedding, and the normalisation Jacobian is applied by
//! [`crate::embedding`].
//!
//! The batch functions take a [`Reduction`]. [`Reduction::Sum`] is the
//! formula above. [`Reduction::Mean`] divides each set's term by the set
//! size, so `σ` directly weighs the average negative against the average
//! positive whatever the number of hard negatives.

use crate::dplm::LabelAssignment;
use crate::error::{Error, Result};
use crate::featurestore::Dictionary;
use crate::par;
use crate::vector;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub grad_wrt_probe: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub sigma: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            sigma: 0.2,
        }
    }
}

impl TripletConfig {
    pub fn new(margin: f64, sigma: f64) -> Result<Self> {
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::config("margin", format!("must be >= 0, got {margin}")));
        }
        check_sigma(sigma)?;
        Ok(Self { margin, sigma })
    }
}

/// How per-label terms are combined within one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }

    fn weight(self, len: usize) -> f64 {
        match self {
            Reduction::Mean if len > 0 => 1.0 / len as f64,
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::config(
                "reduction",
                format!("unknown reduction `{other}` (expected sum or mean)"),
            )),
        }
    }
}

impl LossValue {
    /// Multiplies value, terms and gradient by `k`.
    fn scale(mut self, k: f64) -> Self {
        if k != 1.0 {
            self.total *= k;
            self.positive_term *= k;
            self.negative_term *= k;
            self.grad_wrt_probe.iter_mut().for_each(|g| *g *= k);
        }
        self
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma <= 1.0 {
        Ok(())
    } else {
        Err(Error::config("sigma", format!("must lie in (0, 1], got {sigma}")))
    }
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    match labels.iter().find(|&&j| j >= n) {
        Some(&index) => Err(Error::IndexOutOfRange { index, len: n }),
        None => Ok(()),
    }
}

/// Dictionary-based triplet loss for one probe.
pub fn dtl(
    z: &[f64],
    dict: &Dictionary,
    positives: &[usize],
    hard_negatives: &[usize],
    sigma: f64,
) -> Result<LossValue> {
    dtl_reduced(z, dict, positives, hard_negatives, sigma, Reduction::Sum)
}

/// [`dtl`] with each term reduced by `reduction`.
pub fn dtl_reduced(
    z: &[f64],
    dict: &Dictionary,
    positives: &[usize],
    hard_negatives: &[usize],
    sigma: f64,
    reduction: Reduction,
) -> Result<LossValue> {
    check_sigma(sigma)?;
    if z.len() != dict.d() {
        return Err(Error::DimensionMismatch {
            expected: dict.d(),
            found: z.len(),
        });
    }
    check_labels(positives, dict.n())?;
    check_labels(hard_negatives, dict.n())?;

    let mut grad = vec![0.0f64; z.len()];
    let mut accumulate = |j: usize, target: f64, weight: f64| -> f64 {
        let entry = dict.row(j);
        let residual = vector::dot_mixed(z, entry) - target;
        let scale = 2.0 * weight * residual;
        for (g, &e) in grad.iter_mut().zip(entry) {
            *g += scale * e as f64;
        }
        residual * residual
    };
    let (wp, wn) = (
        reduction.weight(positives.len()),
        reduction.weight(hard_negatives.len()),
    );
    let positive_term: f64 = wp * positives.iter().map(|&j| accumulate(j, 1.0, wp)).sum::<f64>();
    let negative_term: f64 = wn * hard_negatives
        .iter()
        .map(|&j| accumulate(j, -1.0, sigma * wn))
        .sum::<f64>();
    Ok(LossValue {
        total: positive_term + sigma * negative_term,
        positive_term,
        negative_term,
        grad_wrt_probe: grad,
    })
}

/// Hinge triplet loss `max(0, ‖a−p‖ − ‖a−n‖ + m)` with its gradient in the
/// anchor. The hinge value is reported as `positive_term`; `negative_term` is
/// always 0.
pub fn general_triplet(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> LossValue {
    let diff = |other: &[f64]| -> (Vec<f64>, f64) {
        let d: Vec<f64> = anchor.iter().zip(other).map(|(a, b)| a - b).collect();
        let len = vector::norm_f64(&d);
        (d, len)
    };
    let (dp, lp) = diff(positive);
    let (dn, ln) = diff(negative);
    let hinge = lp - ln + margin;
    let mut grad = vec![0.0; anchor.len()];
    if hinge > 0.0 {
        if lp > 0.0 {
            grad.iter_mut().zip(&dp).for_each(|(g, x)| *g += x / lp);
        }
        if ln > 0.0 {
            grad.iter_mut().zip(&dn).for_each(|(g, x)| *g -= x / ln);
        }
    }
    let total = hinge.max(0.0);
    LossValue {
        total,
        positive_term: total,
        negative_term: 0.0,
        grad_wrt_probe: grad,
    }
}

/// Triplet loss summed over every (positive, hard negative) pair of one
/// probe, with dictionary entries standing in for the positive and negative
/// embeddings.
pub fn assignment_triplet(
    z: &[f64],
    dict: &Dictionary,
    positives: &[usize],
    hard_negatives: &[usize],
    margin: f64,
) -> Result<LossValue> {
    if z.len() != dict.d() {
        return Err(Error::DimensionMismatch {
            expected: dict.d(),
            found: z.len(),
        });
    }
    check_labels(positives, dict.n())?;
    check_labels(hard_negatives, dict.n())?;
    let mut out = LossValue {
        total: 0.0,
        positive_term: 0.0,
        negative_term: 0.0,
        grad_wrt_probe: vec![0.0; z.len()],
    };
    for &p in positives {
        let pv = vector::to_f64(dict.row(p));
        for &q in hard_negatives {
            let nv = vector::to_f64(dict.row(q));
            let t = general_triplet(z, &pv, &nv, margin);
            out.total += t.total;
            out.positive_term += t.positive_term;
            out.grad_wrt_probe
                .iter_mut()
                .zip(&t.grad_wrt_probe)
                .for_each(|(g, x)| *g += x);
        }
    }
    Ok(out)
}

/// Loss summed over a batch, keeping each probe's own value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub per_probe: Vec<LossValue>,
}

fn reduce(per_probe: Vec<LossValue>) -> BatchLoss {
    let mut out = BatchLoss {
        total: 0.0,
        positive_term: 0.0,
        negative_term: 0.0,
        per_probe: Vec::new(),
    };
    for v in &per_probe {
        out.total += v.total;
        out.positive_term += v.positive_term;
        out.negative_term += v.negative_term;
    }
    out.per_probe = per_probe;
    out
}

/// Sum of [`dtl`] over `(probe feature, labels)` pairs. Elements are evaluated
/// in parallel and reduced in batch order.
pub fn batch_dtl(
    batch: &[(&[f64], &LabelAssignment)],
    dict: &Dictionary,
    sigma: f64,
    reduction: Reduction,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_probe = par::map_slice(batch, |(z, a)| {
        dtl_reduced(z, dict, &a.positives, &a.hard_negatives, sigma, reduction)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(reduce(per_probe))
}

/// Sum of [`assignment_triplet`] over a batch. With [`Reduction::Mean`] each
/// probe's value is averaged over its pairs.
pub fn batch_triplet(
    batch: &[(&[f64], &LabelAssignment)],
    dict: &Dictionary,
    margin: f64,
    reduction: Reduction,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_probe = par::map_slice(batch, |(z, a)| {
        let pairs = a.positives.len() * a.hard_negatives.len();
        assignment_triplet(z, dict, &a.positives, &a.hard_negatives, margin)
            .map(|v| v.scale(reduction.weight(pairs)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(reduce(per_probe))
}
