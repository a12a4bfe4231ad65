//! The training loop.
//!
//! Each epoch:
//!
//! 1. on the re-initialisation schedule, embed every sample and overwrite the
//!    dictionary;
//! 2. rebuild the thresholded similarity matrix from the dictionary;
//! 3. for each shuffled batch: embed the batch, assign labels against the
//!    current snapshot (self-positive during warm-up, mined afterwards),
//!    compute the loss, back-propagate, take one SGD step, then fold the
//!    batch's pre-step embeddings into the dictionary and patch the
//!    similarity matrix rows they touch;
//! 4. score retrieval when ground truth is supplied, along with the quality
//!    of the positive sets mined during the epoch (every sample is mined
//!    exactly once per epoch, against the snapshot its batch saw).
//!
//! Per-sample work inside a batch runs in parallel; every reduction runs in
//! batch order, so results do not depend on the thread count.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dplm::{mine_batch, LabelAssignment, MiningKind};
use crate::embedding::{EmbeddingModel, Gradients, LrSchedule, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{cmc_map, mining_quality, EpochReport, MiningQuality};
use crate::featurestore::{Dictionary, FeatureMatrix};
use crate::loss::{batch_dtl, batch_triplet, Reduction};
use crate::par;
use crate::similarity::{similarity_matrix, SimilarityMatrix};
use crate::synthdata::Split;
use crate::vector;

const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Dtl,
    GeneralTriplet,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dtl => "dtl",
            LossKind::GeneralTriplet => "triplet",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtl" => Ok(LossKind::Dtl),
            "triplet" | "general_triplet" => Ok(LossKind::GeneralTriplet),
            other => Err(Error::config(
                "loss",
                format!("unknown loss `{other}` (expected dtl or triplet)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub margin: f64,
    pub warmup_epochs: usize,
    pub reinit_interval: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub reduction: Reduction,
    pub mining_kind: MiningKind,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub embed_dim: usize,
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    /// Full-scale schedule: 60 epochs, batch 256, τ 0.6, γ 0.01, σ 0.2,
    /// 5 warm-up epochs, dictionary re-initialised every 5 epochs, SGD with
    /// momentum 0.9 from lr 0.01 decayed ×0.1 every 10 epochs.
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            tau: 0.6,
            gamma: 0.01,
            sigma: 0.2,
            margin: 0.3,
            warmup_epochs: 5,
            reinit_interval: 5,
            seed: 0,
            loss_kind: LossKind::Dtl,
            reduction: Reduction::Sum,
            mining_kind: MiningKind::Intersection,
            lr: LrSchedule::default(),
            momentum: 0.9,
            embed_dim: 16,
            hidden: None,
        }
    }
}

impl TrainConfig {
    /// Defaults scaled for synthetic corpora of about a thousand samples.
    ///
    /// Per-probe terms are averaged rather than summed and the initial rate
    /// is doubled; summed terms collapse a dictionary this small during
    /// warm-up.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            reduction: Reduction::Mean,
            lr: LrSchedule {
                base: 0.02,
                ..LrSchedule::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.tau > -1.0 && self.tau <= 1.0) {
            return Err(Error::config("tau", format!("must lie in (-1, 1], got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::config("sigma", format!("must lie in (0, 1], got {}", self.sigma)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin", format!("must be >= 0, got {}", self.margin)));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::config("warmup", "must be at least 1"));
        }
        if self.reinit_interval == 0 {
            return Err(Error::config("reinit", "must be at least 1"));
        }
        if !(self.lr.base > 0.0 && self.lr.base.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr.base)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.hidden == Some(0) {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        Ok(())
    }

    pub fn model_config(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_out: self.embed_dim,
            hidden: self.hidden,
            learning_rate: self.lr.base,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

/// Ground truth used only for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub identities: Vec<u32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub positive_term: f64,
    pub negative_term: f64,
}

impl fmt::Display for BatchStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} batch={} loss={:.6} pos_term={:.6} neg_term={:.6}",
            self.epoch, self.batch, self.loss, self.positive_term, self.negative_term
        )
    }
}

pub struct EpochState<'a> {
    pub epoch: usize,
    pub model: &'a EmbeddingModel,
    pub dictionary: &'a Dictionary,
    pub similarity: &'a SimilarityMatrix,
    pub report: &'a EpochReport,
}

/// Hooks into the loop. All methods default to no-ops.
pub trait TrainObserver {
    fn on_batch(&mut self, _stats: &BatchStats) {}
    fn on_assignments(&mut self, _epoch: usize, _assignments: &[LabelAssignment]) {}
    fn on_epoch_end(&mut self, _state: &EpochState<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct Silent;

impl TrainObserver for Silent {}

/// Emits one `log::info!` line per batch.
pub struct LogProgress;

impl TrainObserver for LogProgress {
    fn on_batch(&mut self, stats: &BatchStats) {
        log::info!("{stats}");
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    /// `None` when no epoch ran.
    pub dictionary: Option<Dictionary>,
    pub reports: Vec<EpochReport>,
}

/// Embeds every row of `inputs`.
pub fn embed_all(model: &EmbeddingModel, inputs: &FeatureMatrix) -> Result<FeatureMatrix> {
    let rows = par::map_range(inputs.n(), |i| model.embed(inputs.row(i)).map(|z| vector::to_f32(&z)));
    let mut data = Vec::with_capacity(inputs.n() * model.d_out());
    for r in rows {
        data.extend(r?);
    }
    FeatureMatrix::new(data, inputs.n(), model.d_out())
}

/// Retrieval metrics of `model` on the query/gallery split.
pub fn evaluate_retrieval(
    model: &EmbeddingModel,
    inputs: &FeatureMatrix,
    eval: &EvalSet,
) -> Result<crate::eval::RetrievalMetrics> {
    let emb = embed_all(model, inputs)?;
    let pick = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| eval.identities[i]).collect() };
    cmc_map(
        &emb.select_rows(&eval.split.query)?,
        &pick(&eval.split.query),
        &emb.select_rows(&eval.split.gallery)?,
        &pick(&eval.split.gallery),
    )
}

pub fn train(
    config: &TrainConfig,
    inputs: &FeatureMatrix,
    eval: Option<&EvalSet>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::ShapeMismatch("training corpus is empty".into()));
    }
    if let Some(e) = eval {
        if e.identities.len() != inputs.n() {
            return Err(Error::ShapeMismatch(format!(
                "{} identities for {} samples",
                e.identities.len(),
                inputs.n()
            )));
        }
    }
    let mut model = EmbeddingModel::new(&config.model_config(inputs.d()))?;
    let samples: Vec<Vec<f64>> = inputs.rows().map(vector::to_f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = inputs.labels().collect();
    let mut dict: Option<Dictionary> = None;
    let mut reports = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        model.learning_rate = config.lr.at(epoch);
        if epoch % config.reinit_interval == 0 {
            let z = embed_all(&model, inputs)?;
            match dict.as_mut() {
                Some(d) => d.reinit(&z, epoch)?,
                None => dict = Some(Dictionary::new(z, epoch)?),
            }
        }
        let dict = dict.as_mut().expect("dictionary initialised at epoch 0");
        let mut sim = similarity_matrix(dict, config.tau);
        let warmup = epoch < config.warmup_epochs;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut mined: Vec<(usize, [Vec<usize>; 4])> = Vec::new();

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let forwards = par::map_slice(batch, |&i| model.forward(&samples[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;

            let assignments: Vec<LabelAssignment> = if warmup {
                par::map_slice(batch, |&i| LabelAssignment::warmup(i, sim.raw_row(i), config.gamma))
                    .into_iter()
                    .collect::<Result<_>>()?
            } else {
                let results = mine_batch(batch, dict, &sim, config.tau, config.gamma)?;
                if eval.is_some() {
                    mined.extend(
                        results
                            .iter()
                            .map(|r| (r.probe, MiningKind::ALL.map(|k| r.positives(k).to_vec()))),
                    );
                }
                results
                    .iter()
                    .map(|r| LabelAssignment::from_mining(r, config.mining_kind, config.gamma))
                    .collect::<Result<_>>()?
            };
            observer.on_assignments(epoch, &assignments);

            let pairs: Vec<(&[f64], &LabelAssignment)> = forwards
                .iter()
                .map(|(z, _)| z.as_slice())
                .zip(&assignments)
                .collect();
            let loss = match config.loss_kind {
                LossKind::Dtl => batch_dtl(&pairs, dict, config.sigma, config.reduction)?,
                LossKind::GeneralTriplet => batch_triplet(&pairs, dict, config.margin, config.reduction)?,
            };

            let idx: Vec<usize> = (0..batch.len()).collect();
            let per_sample = par::map_slice(&idx, |&k| {
                model.backward(&forwards[k].1, &loss.per_probe[k].grad_wrt_probe)
            });
            let mut grads = Gradients::zeros_like(&model);
            for g in per_sample {
                grads.add_assign(&g?)?;
            }
            model.sgd_step(&grads)?;
            step += 1;

            for (&i, (z, _)) in batch.iter().zip(&forwards) {
                dict.update(i, &vector::to_f32(z), step)?;
            }
            sim.refresh_rows(dict, batch)?;

            epoch_loss += loss.total;
            observer.on_batch(&BatchStats {
                epoch,
                batch: b,
                loss: loss.total,
                positive_term: loss.positive_term,
                negative_term: loss.negative_term,
            });
        }

        let report = epoch_report(config, epoch, warmup, &model, inputs, eval, &mined, epoch_loss)?;
        observer.on_epoch_end(&EpochState {
            epoch,
            model: &model,
            dictionary: dict,
            similarity: &sim,
            report: &report,
        })?;
        reports.push(report);
    }

    Ok(TrainOutcome {
        model,
        dictionary: dict,
        reports,
    })
}

#[allow(clippy::too_many_arguments)]
fn epoch_report(
    config: &TrainConfig,
    epoch: usize,
    warmup: bool,
    model: &EmbeddingModel,
    inputs: &FeatureMatrix,
    eval: Option<&EvalSet>,
    mined: &[(usize, [Vec<usize>; 4])],
    epoch_loss: f64,
) -> Result<EpochReport> {
    let loss = epoch_loss / inputs.n() as f64;
    let Some(eval) = eval else {
        return Ok(EpochReport {
            epoch,
            retrieval: None,
            mining: None,
            mining_by_kind: Vec::new(),
            loss,
        });
    };
    let retrieval = evaluate_retrieval(model, inputs, eval)?;
    let mining_by_kind: Vec<(MiningKind, MiningQuality)> = if warmup {
        MiningKind::ALL
            .iter()
            .map(|&k| (k, MiningQuality::vacuous()))
            .collect()
    } else {
        MiningKind::ALL
            .iter()
            .enumerate()
            .map(|(slot, &k)| {
                let sets = mined.iter().map(|(p, sets)| (*p, sets[slot].as_slice()));
                (k, mining_quality(sets, &eval.identities))
            })
            .collect()
    };
    let mining = mining_by_kind
        .iter()
        .find(|(k, _)| *k == config.mining_kind)
        .map(|(_, q)| *q);
    Ok(EpochReport {
        epoch,
        retrieval: Some(retrieval),
        mining,
        mining_by_kind,
        loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub loss_kind: LossKind,
    pub mining_kind: MiningKind,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
}

/// One training run per `(loss, positives)` cell on shared data and seed,
/// scored on the final epoch.
pub fn ablation_run(
    grid: &[(LossKind, MiningKind)],
    base: &TrainConfig,
    inputs: &FeatureMatrix,
    eval: &EvalSet,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "needs at least one cell"));
    }
    grid.iter()
        .map(|&(loss_kind, mining_kind)| {
            let config = TrainConfig {
                loss_kind,
                mining_kind,
                ..base.clone()
            };
            let out = train(&config, inputs, Some(eval), &mut Silent)?;
            let metrics = evaluate_retrieval(&out.model, inputs, eval)?;
            Ok(AblationRow {
                loss_kind,
                mining_kind,
                rank1: metrics.rank(1),
                rank5: metrics.rank(5),
                map: metrics.map,
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "loss,positives,rank1,rank5,map";

pub fn write_ablation_csv<W: Write>(w: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6}",
            r.loss_kind, r.mining_kind, r.rank1, r.rank5, r.map
        )?;
    }
    Ok(())
}

/// Every `(loss, positives)` combination, DTL first.
pub fn full_grid() -> Vec<(LossKind, MiningKind)> {
    [LossKind::Dtl, LossKind::GeneralTriplet]
        .iter()
        .flat_map(|&l| MiningKind::ALL.iter().map(move |&m| (l, m)))
        .collect()
}
