//! Two-pass training loop over the encoder.
//!
//! Each step runs three phases:
//!
//! 1. encode every batch item in sub-batches, keeping only the embeddings;
//! 2. compute the analytic per-embedding loss gradients (with amplification
//!    under logsumexp, subgradient routing otherwise) and assemble one
//!    upstream matrix per item;
//! 3. re-encode each sub-batch and push the upstream matrices through
//!    [`backward_surrogate`], then apply a single optimizer update.
//!
//! Because the loss gradient with respect to the parameters is exactly the
//! sum over items of `d/dparams <upstream_i, encode(item_i)>`, the update is
//! independent of `sub_batch_size`. We keep it bit-identical, not just
//! mathematically equal: per-item parameter gradients are stored in a slot
//! per item and folded in ascending item order after all sub-batches finish,
//! so the floating-point summation tree never depends on the chunking.
//!
//! Negatives are in-batch: query `b` scores against the positives of every
//! other row. A negative whose raw features are bitwise identical to the
//! row's own positive is dropped (it would be a false negative).

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward_surrogate, encode_batch, EncoderDims, EncoderGrads, EncoderParams, ItemFeatures,
};
use crate::error::{Error, Result};
use crate::grad::{
    batch_loss, cached_gradients, cached_gradients_unamplified, subgradient_gradients,
    CachedGradientSet, ContrastiveBatch, GradDiagnostics,
};
use crate::multivec::{Aggregator, PatternMask};
use crate::parallel;
use crate::real::Real;

/// Numeric width the run executes in. Checkpoints are always double.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Double,
    Single,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Double => "double",
            Precision::Single => "single",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double" | "f64" => Ok(Precision::Double),
            "single" | "f32" => Ok(Precision::Single),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamLike,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::AdamLike => "adam_like",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam_like" | "adam-like" => Ok(OptimizerKind::AdamLike),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Full training configuration. Temperature and amplification defaults are
/// the reference operating point; the rest are plain loop knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub n_fine: usize,
    /// Hidden-width multiplier: the trunk width is `m_capacity * (n_fine+1)`,
    /// giving each head a fixed slice of capacity.
    pub m_capacity: usize,
    pub batch_size: usize,
    pub sub_batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub aggregator: Aggregator,
    pub mask: PatternMask,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            alpha: 20.0,
            n_fine: 10,
            m_capacity: 10,
            batch_size: 32,
            sub_batch_size: 8,
            steps: 100,
            lr: 0.01,
            optimizer: OptimizerKind::AdamLike,
            aggregator: Aggregator::Logsumexp,
            mask: PatternMask::FULL,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive and finite".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be nonnegative and finite".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.sub_batch_size < 1 || self.sub_batch_size > self.batch_size {
            return Err(Error::Config(
                "sub_batch_size must lie in 1..=batch_size".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be nonnegative and finite".into()));
        }
        if self.m_capacity < 1 {
            return Err(Error::Config("m_capacity must be at least 1".into()));
        }
        if !self.mask.any_active() {
            return Err(Error::Config("all four pattern families are masked".into()));
        }
        if self.aggregator == Aggregator::MeanMax && !self.mask.is_full() {
            return Err(Error::Config(
                "mean-max aggregation scores the full grid and cannot honor a pattern mask".into(),
            ));
        }
        Ok(())
    }

    /// Trunk width implied by the capacity knob.
    pub fn hidden_width(&self) -> usize {
        self.m_capacity * (self.n_fine + 1)
    }

    /// Encoder shape for a given input feature width and embedding dim.
    pub fn encoder_dims(&self, f_in: usize, dim: usize) -> EncoderDims {
        EncoderDims {
            f_in,
            hidden: self.hidden_width(),
            n_fine: self.n_fine,
            dim,
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub hardness_min: f64,
    pub hardness_mean: f64,
    pub hardness_max: f64,
    /// Wallclock is reported for operators and is the one field exempt from
    /// determinism comparisons.
    pub wallclock_ms: f64,
}

/// A batch of (query, positive) feature pairs. Negatives are derived
/// in-batch, so they are not stored.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Real = f64> {
    pub queries: Vec<ItemFeatures<T>>,
    pub positives: Vec<ItemFeatures<T>>,
}

impl<T: Real> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.queries.len() != self.positives.len() {
            return Err(Error::Dimension(
                "query and positive counts differ".into(),
            ));
        }
        if self.queries.is_empty() {
            return Err(Error::Precondition("empty training batch".into()));
        }
        Ok(())
    }
}

/// Summary of one gradient computation, before the optimizer touches it.
#[derive(Clone, Debug)]
pub struct BatchTrace<T: Real = f64> {
    pub loss: T,
    pub hardness_min: T,
    pub hardness_mean: T,
    pub hardness_max: T,
    /// In-batch negatives dropped by the bitwise false-negative guard.
    pub dropped_negatives: usize,
}

fn bits_equal<T: Real>(a: &ItemFeatures<T>, b: &ItemFeatures<T>) -> bool {
    a.x.len() == b.x.len()
        && a.x
            .iter()
            .zip(b.x.iter())
            .all(|(u, v)| Real::to_f64(*u).to_bits() == Real::to_f64(*v).to_bits())
}

/// Indices of the batch rows whose positives serve as negatives for row `b`:
/// every other row, minus bitwise duplicates of row `b`'s own positive.
pub(crate) fn negative_sources<T: Real>(positives: &[ItemFeatures<T>], b: usize) -> Vec<usize> {
    (0..positives.len())
        .filter(|&j| j != b && !bits_equal(&positives[j], &positives[b]))
        .collect()
}

struct PairOutput<T: Real> {
    loss: T,
    grads: CachedGradientSet<T>,
    sources: Vec<usize>,
    hardness: Vec<T>,
}

/// Optimizer state; `m` doubles as the momentum buffer for SGD.
struct OptimizerState<T: Real> {
    t: u32,
    m: EncoderGrads<T>,
    v: EncoderGrads<T>,
}

impl<T: Real> OptimizerState<T> {
    fn new(dims: EncoderDims) -> Self {
        Self {
            t: 0,
            m: EncoderGrads::zeros(dims),
            v: EncoderGrads::zeros(dims),
        }
    }

    fn apply(
        &mut self,
        kind: OptimizerKind,
        lr: T,
        params: &mut EncoderParams<T>,
        grads: &EncoderGrads<T>,
    ) {
        self.t += 1;
        let mut pt = params.tensors_mut();
        let gt = grads.tensors();
        let mut mt = self.m.tensors_mut();
        match kind {
            OptimizerKind::SgdMomentum => {
                let mu = T::from_f64(0.9);
                for ((p, g), m) in pt.iter_mut().zip(gt).zip(mt.iter_mut()) {
                    for i in 0..p.len() {
                        m[i] = mu * m[i] + g[i];
                        p[i] = p[i] - lr * m[i];
                    }
                }
            }
            OptimizerKind::AdamLike => {
                let b1 = T::from_f64(0.9);
                let b2 = T::from_f64(0.999);
                let eps = T::from_f64(1e-8);
                // bias corrections computed in f64 so both precisions agree
                // on the schedule
                let c1 = T::from_f64(1.0 - 0.9f64.powi(self.t as i32));
                let c2 = T::from_f64(1.0 - 0.999f64.powi(self.t as i32));
                let one = T::one();
                let mut vt = self.v.tensors_mut();
                for (((p, g), m), v) in pt.iter_mut().zip(gt).zip(mt.iter_mut()).zip(vt.iter_mut())
                {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

pub struct Trainer<T: Real = f64> {
    cfg: TrainConfig,
    params: EncoderParams<T>,
    opt: OptimizerState<T>,
    next_step: usize,
    amplification: bool,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig, params: EncoderParams<T>) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if params.dims().n_fine != cfg.n_fine {
            return Err(Error::Config(format!(
                "encoder has {} fine rows but config says {}",
                params.dims().n_fine,
                cfg.n_fine
            )));
        }
        let dims = params.dims();
        Ok(Self {
            cfg,
            params,
            opt: OptimizerState::new(dims),
            next_step: 0,
            amplification: true,
        })
    }

    pub fn params(&self) -> &EncoderParams<T> {
        &self.params
    }

    pub fn into_params(self) -> EncoderParams<T> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Audit switch: route logsumexp gradients through the build with the
    /// amplification stage absent, instead of relying on `alpha = 0`
    /// degeneracy. Training behavior is otherwise identical.
    pub fn set_amplification(&mut self, on: bool) {
        self.amplification = on;
    }

    /// Forward pass only: the mean contrastive loss of the batch under the
    /// current parameters, with the same in-batch negative selection the
    /// gradient uses.
    pub fn batch_objective(&self, batch: &TrainBatch<T>) -> Result<T> {
        batch_objective(&self.params, batch, &self.cfg)
    }

    /// Passes 1 and 2, plus the surrogate backward of pass 3, without the
    /// optimizer update: the exact parameter gradient of
    /// [`Self::batch_objective`] (when amplification is inert) and the
    /// amplified gradient field otherwise.
    pub fn compute_batch_gradient(
        &self,
        batch: &TrainBatch<T>,
    ) -> Result<(EncoderGrads<T>, BatchTrace<T>)> {
        batch.validate()?;
        let bsz = batch.len();
        let sub = self.cfg.sub_batch_size.min(bsz);
        let tau = T::from_f64(self.cfg.tau);
        let alpha = T::from_f64(self.cfg.alpha);
        let dims = self.params.dims();
        let rows = dims.n_heads();

        // pass 1: embeddings only, sub-batch by sub-batch
        let mut emb_q = Vec::with_capacity(bsz);
        let mut emb_p = Vec::with_capacity(bsz);
        for start in (0..bsz).step_by(sub) {
            let end = (start + sub).min(bsz);
            emb_q.extend(encode_batch(&batch.queries[start..end], &self.params)?);
            emb_p.extend(encode_batch(&batch.positives[start..end], &self.params)?);
        }

        // pass 2: per-pair cached gradients, order-stable
        let agg = self.cfg.aggregator;
        let amplify = self.amplification;
        let pair_outputs: Vec<Result<PairOutput<T>>> = parallel::map_indexed(bsz, |b| {
            let sources = negative_sources(&batch.positives, b);
            let cb = ContrastiveBatch {
                query: emb_q[b].clone(),
                positive: emb_p[b].clone(),
                negatives: sources.iter().map(|&j| emb_p[j].clone()).collect(),
                tau,
                alpha,
                mask: self.cfg.mask,
            };
            let loss = batch_loss(&cb, agg)?;
            let (grads, diag) = match agg {
                Aggregator::Logsumexp => {
                    if amplify {
                        cached_gradients(&cb)?
                    } else {
                        cached_gradients_unamplified(&cb)?
                    }
                }
                other => (
                    subgradient_gradients(&cb, other)?,
                    GradDiagnostics::inert(sources.len()),
                ),
            };
            Ok(PairOutput {
                loss,
                grads,
                sources,
                hardness: diag.hardness.h,
            })
        });

        // fold pass-2 outputs in ascending row order into one upstream
        // matrix per item
        let mut up_q: Vec<Array2<T>> = (0..bsz).map(|_| Array2::zeros((rows, dims.dim))).collect();
        let mut up_p: Vec<Array2<T>> = (0..bsz).map(|_| Array2::zeros((rows, dims.dim))).collect();
        let mut loss_sum = T::zero();
        let mut hardness = Vec::new();
        let mut dropped = 0usize;
        for (b, out) in pair_outputs.into_iter().enumerate() {
            let out = out?;
            loss_sum = loss_sum + out.loss;
            up_q[b] += &out.grads.d_query;
            up_p[b] += &out.grads.d_positive;
            for (k, &src) in out.sources.iter().enumerate() {
                up_p[src] += &out.grads.d_negatives[k];
            }
            dropped += bsz - 1 - out.sources.len();
            hardness.extend(out.hardness);
        }
        let inv_b = T::one() / T::from_f64(bsz as f64);
        let loss = loss_sum * inv_b;
        for u in up_q.iter_mut().chain(up_p.iter_mut()) {
            u.mapv_inplace(|v| v * inv_b);
        }

        // pass 3: surrogate backward per item; slots keep the fold order
        // (all queries, then all positives, ascending) independent of the
        // sub-batch chunking
        let mut per_item: Vec<Option<EncoderGrads<T>>> = (0..2 * bsz).map(|_| None).collect();
        for start in (0..bsz).step_by(sub) {
            let end = (start + sub).min(bsz);
            let qg = parallel::map_indexed(end - start, |j| {
                backward_surrogate(&batch.queries[start + j], &self.params, &up_q[start + j])
            });
            let pg = parallel::map_indexed(end - start, |j| {
                backward_surrogate(&batch.positives[start + j], &self.params, &up_p[start + j])
            });
            for (j, g) in qg.into_iter().enumerate() {
                per_item[start + j] = Some(g?);
            }
            for (j, g) in pg.into_iter().enumerate() {
                per_item[bsz + start + j] = Some(g?);
            }
        }
        let mut total = EncoderGrads::zeros(dims);
        for slot in per_item {
            total.add_scaled(&slot.expect("every item slot filled"), T::one());
        }

        let (hmin, hmean, hmax) = hardness_stats(&hardness);
        Ok((
            total,
            BatchTrace {
                loss,
                hardness_min: hmin,
                hardness_mean: hmean,
                hardness_max: hmax,
                dropped_negatives: dropped,
            },
        ))
    }

    /// One full training step: gradient, finiteness check, optimizer update.
    pub fn step(&mut self, batch: &TrainBatch<T>) -> Result<StepReport> {
        let t0 = Instant::now();
        let (grads, trace) = self.compute_batch_gradient(batch)?;
        if !trace.loss.is_finite() {
            return Err(Error::NonFinite {
                pair: self.next_step,
                what: "batch loss".into(),
            });
        }
        let grad_norm = grads.l2_norm();
        self.opt.apply(
            self.cfg.optimizer,
            T::from_f64(self.cfg.lr),
            &mut self.params,
            &grads,
        );
        let report = StepReport {
            step: self.next_step,
            loss: trace.loss.to_f64(),
            grad_norm: grad_norm.to_f64(),
            hardness_min: trace.hardness_min.to_f64(),
            hardness_mean: trace.hardness_mean.to_f64(),
            hardness_max: trace.hardness_max.to_f64(),
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        self.next_step += 1;
        Ok(report)
    }
}

fn hardness_stats<T: Real>(h: &[T]) -> (T, T, T) {
    if h.is_empty() {
        return (T::one(), T::one(), T::one());
    }
    let mut min = h[0];
    let mut max = h[0];
    let mut sum = T::zero();
    for &v in h {
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
        sum = sum + v;
    }
    (min, sum / T::from_f64(h.len() as f64), max)
}

/// Mean in-batch contrastive loss of `batch` under `params`, matching the
/// negative selection of the gradient path. This is the scalar that
/// finite-difference audits perturb.
pub fn batch_objective<T: Real>(
    params: &EncoderParams<T>,
    batch: &TrainBatch<T>,
    cfg: &TrainConfig,
) -> Result<T> {
    batch.validate()?;
    let bsz = batch.len();
    let emb_q = encode_batch(&batch.queries, params)?;
    let emb_p = encode_batch(&batch.positives, params)?;
    let tau = T::from_f64(cfg.tau);
    let alpha = T::from_f64(cfg.alpha);
    let mut loss_sum = T::zero();
    for b in 0..bsz {
        let sources = negative_sources(&batch.positives, b);
        let cb = ContrastiveBatch {
            query: emb_q[b].clone(),
            positive: emb_p[b].clone(),
            negatives: sources.iter().map(|&j| emb_p[j].clone()).collect(),
            tau,
            alpha,
            mask: cfg.mask,
        };
        loss_sum = loss_sum + batch_loss(&cb, cfg.aggregator)?;
    }
    Ok(loss_sum / T::from_f64(bsz as f64))
}

/// Result of a full run. Parameters are materialized in double precision
/// regardless of the run's compute width.
pub struct RunResult {
    pub params: EncoderParams<f64>,
    pub reports: Vec<StepReport>,
}

/// Runs `cfg.steps` steps over seeded-shuffled batches drawn from `pairs`.
/// `dim` is the embedding row width; the encoder shape follows the config.
/// `on_step` sees every report plus a double-precision snapshot of the
/// parameters (for streaming metrics and periodic checkpoints).
pub fn train_run(
    cfg: &TrainConfig,
    dim: usize,
    pairs: &[(ItemFeatures<f64>, ItemFeatures<f64>)],
    on_step: &mut dyn FnMut(&StepReport, &EncoderParams<f64>) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let f_in = pairs[0].0.dim();
    match cfg.precision {
        Precision::Double => run_typed::<f64>(cfg, f_in, dim, pairs, on_step),
        Precision::Single => run_typed::<f32>(cfg, f_in, dim, pairs, on_step),
    }
}

fn run_typed<T: Real>(
    cfg: &TrainConfig,
    f_in: usize,
    dim: usize,
    pairs: &[(ItemFeatures<f64>, ItemFeatures<f64>)],
    on_step: &mut dyn FnMut(&StepReport, &EncoderParams<f64>) -> Result<()>,
) -> Result<RunResult> {
    let dims = cfg.encoder_dims(f_in, dim);
    let params = EncoderParams::<T>::init(cfg.seed, dims, true);
    let mut trainer = Trainer::new(cfg.clone(), params)?;

    let converted: Vec<(ItemFeatures<T>, ItemFeatures<T>)> = pairs
        .iter()
        .map(|(q, p)| {
            (
                ItemFeatures { x: q.x.mapv(T::from_f64) },
                ItemFeatures { x: p.x.mapv(T::from_f64) },
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..converted.len()).collect();
    let mut cursor = order.len(); // forces a shuffle before the first batch
    let mut reports = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = cfg.batch_size.min(order.len() - cursor);
        let batch = TrainBatch {
            queries: order[cursor..cursor + take]
                .iter()
                .map(|&i| converted[i].0.clone())
                .collect(),
            positives: order[cursor..cursor + take]
                .iter()
                .map(|&i| converted[i].1.clone())
                .collect(),
        };
        cursor += take;
        let report = trainer.step(&batch)?;
        on_step(&report, &trainer.params().convert::<f64>())?;
        reports.push(report);
    }
    Ok(RunResult {
        params: trainer.into_params().convert::<f64>(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::relative_error;
    use rand::Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            tau: 0.05,
            alpha: 0.0,
            n_fine: 1,
            m_capacity: 3,
            batch_size: 3,
            sub_batch_size: 3,
            steps: 5,
            lr: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            aggregator: Aggregator::Logsumexp,
            mask: PatternMask::FULL,
            seed: 17,
            precision: Precision::Double,
        }
    }

    fn random_pairs(seed: u64, n: usize, f_in: usize) -> Vec<(ItemFeatures, ItemFeatures)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let q: Vec<f64> = (0..f_in).map(|_| rng.random_range(-1.0..1.0)).collect();
                // positive = same underlying content, lightly perturbed
                let p: Vec<f64> = q.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
                (ItemFeatures::from_vec(q), ItemFeatures::from_vec(p))
            })
            .collect()
    }

    fn batch_from(pairs: &[(ItemFeatures, ItemFeatures)]) -> TrainBatch {
        TrainBatch {
            queries: pairs.iter().map(|(q, _)| q.clone()).collect(),
            positives: pairs.iter().map(|(_, p)| p.clone()).collect(),
        }
    }

    #[test]
    fn config_validation_rejects_bad_knobs() {
        let mut cfg = small_cfg();
        cfg.sub_batch_size = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = small_cfg();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg = small_cfg();
        cfg.mask = PatternMask {
            use_g2g: false,
            use_f2g: false,
            use_g2f: false,
            use_f2f: false,
        };
        assert!(cfg.validate().is_err());
        cfg = small_cfg();
        cfg.aggregator = Aggregator::MeanMax;
        cfg.mask.use_f2f = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.mask = PatternMask::FULL;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        for optimizer in [OptimizerKind::SgdMomentum, OptimizerKind::AdamLike] {
            let mut cfg = small_cfg();
            cfg.lr = 0.0;
            cfg.optimizer = optimizer;
            let dims = cfg.encoder_dims(6, 4);
            let params = EncoderParams::<f64>::init(cfg.seed, dims, true);
            let before = params.clone();
            let mut trainer = Trainer::new(cfg, params).unwrap();
            let report = trainer
                .step(&batch_from(&random_pairs(1, 3, 6)))
                .unwrap();
            assert!(report.loss.is_finite() && report.loss >= 0.0);
            assert!(report.grad_norm > 0.0);
            assert_eq!(*trainer.params(), before);
        }
    }

    #[test]
    fn sub_batch_choice_is_bitwise_invariant() {
        let pairs = random_pairs(2, 6, 8);
        let mut finals: Vec<Vec<u8>> = Vec::new();
        let mut losses: Vec<Vec<f64>> = Vec::new();
        for sub in [1usize, 2, 3, 6] {
            let mut cfg = small_cfg();
            cfg.batch_size = 6;
            cfg.sub_batch_size = sub;
            cfg.alpha = 4.0;
            cfg.optimizer = OptimizerKind::AdamLike;
            let dims = cfg.encoder_dims(8, 4);
            let params = EncoderParams::<f64>::init(cfg.seed, dims, true);
            let mut trainer = Trainer::new(cfg, params).unwrap();
            let batch = batch_from(&pairs);
            let mut ls = Vec::new();
            for _ in 0..3 {
                ls.push(trainer.step(&batch).unwrap().loss);
            }
            finals.push(trainer.params().to_bytes().unwrap());
            losses.push(ls);
        }
        for i in 1..finals.len() {
            assert_eq!(finals[0], finals[i], "sub-batch size changed the checkpoint");
            assert_eq!(losses[0], losses[i]);
        }
    }

    #[test]
    fn accumulated_gradient_matches_finite_differences() {
        // the decisive chain check: analytic upstream x surrogate backward
        // against finite differences of the full objective over every
        // encoder parameter
        for aggregator in [Aggregator::Logsumexp, Aggregator::Max, Aggregator::MeanMax] {
            let mut cfg = small_cfg();
            cfg.aggregator = aggregator;
            cfg.m_capacity = 2; // hidden = 4
            let dims = cfg.encoder_dims(5, 3);
            let params = EncoderParams::<f64>::init(23, dims, true);
            let trainer = Trainer::new(cfg.clone(), params.clone()).unwrap();
            let batch = batch_from(&random_pairs(3, 3, 5));
            let (grads, trace) = trainer.compute_batch_gradient(&batch).unwrap();
            assert!(trace.loss >= 0.0);

            let step = 1e-6;
            let mut worst: f64 = 0.0;
            let flat_grads = grads.tensors();
            for (ti, tensor) in flat_grads.iter().enumerate() {
                for e in 0..tensor.len() {
                    let mut hi = params.clone();
                    hi.tensors_mut()[ti][e] += step;
                    let mut lo = params.clone();
                    lo.tensors_mut()[ti][e] -= step;
                    let f_hi = batch_objective(&hi, &batch, &cfg).unwrap();
                    let f_lo = batch_objective(&lo, &batch, &cfg).unwrap();
                    let fd = (f_hi - f_lo) / (2.0 * step);
                    worst = worst.max(relative_error(fd, tensor[e]));
                }
            }
            assert!(
                worst < 1e-4,
                "{aggregator}: accumulated gradient off by {worst:.3e}"
            );
        }
    }

    #[test]
    fn alpha_zero_equals_amplification_free_build() {
        let pairs = random_pairs(5, 6, 8);
        let run = |amplify: bool| {
            let mut cfg = small_cfg();
            cfg.alpha = 0.0;
            cfg.batch_size = 6;
            cfg.sub_batch_size = 2;
            let dims = cfg.encoder_dims(8, 4);
            let params = EncoderParams::<f64>::init(cfg.seed, dims, true);
            let mut trainer = Trainer::new(cfg, params).unwrap();
            trainer.set_amplification(amplify);
            let batch = batch_from(&pairs);
            let mut losses = Vec::new();
            for _ in 0..4 {
                losses.push(trainer.step(&batch).unwrap().loss);
            }
            (losses, trainer.params().to_bytes().unwrap())
        };
        let (losses_on, bytes_on) = run(true);
        let (losses_off, bytes_off) = run(false);
        assert_eq!(losses_on, losses_off);
        assert_eq!(bytes_on, bytes_off);
    }

    #[test]
    fn duplicate_positive_negatives_are_dropped() {
        let q = ItemFeatures::from_vec(vec![0.4, -0.2, 0.9, 0.1, -0.6]);
        let p = ItemFeatures::from_vec(vec![0.5, -0.1, 0.8, 0.2, -0.5]);
        assert_eq!(negative_sources(&[p.clone(), p.clone()], 0), Vec::<usize>::new());
        let other = ItemFeatures::from_vec(vec![0.0, 0.3, -0.8, 0.7, 0.2]);
        assert_eq!(negative_sources(&[p.clone(), p.clone(), other.clone()], 0), vec![2]);
        assert_eq!(negative_sources(&[p.clone(), p.clone(), other.clone()], 2), vec![0, 1]);

        // a batch whose rows share one positive has no usable negatives:
        // every pair degenerates to the zero-gradient single-pair case
        let mut cfg = small_cfg();
        cfg.batch_size = 2;
        cfg.sub_batch_size = 2;
        let dims = cfg.encoder_dims(5, 3);
        let params = EncoderParams::<f64>::init(31, dims, true);
        let trainer = Trainer::new(cfg, params).unwrap();
        let batch = TrainBatch {
            queries: vec![q.clone(), q.clone()],
            positives: vec![p.clone(), p.clone()],
        };
        let (grads, trace) = trainer.compute_batch_gradient(&batch).unwrap();
        assert_eq!(trace.dropped_negatives, 2);
        assert_eq!(trace.loss, 0.0);
        assert_eq!(grads.l2_norm(), 0.0);
    }

    #[test]
    fn train_run_zero_steps_returns_initial_params() {
        let mut cfg = small_cfg();
        cfg.steps = 0;
        let pairs = random_pairs(7, 5, 6);
        let result = train_run(&cfg, 4, &pairs, &mut |_, _| Ok(())).unwrap();
        assert!(result.reports.is_empty());
        let dims = cfg.encoder_dims(6, 4);
        let init = EncoderParams::<f64>::init(cfg.seed, dims, true);
        assert_eq!(result.params, init);
    }

    #[test]
    fn training_reduces_loss_on_learnable_pairs() {
        let mut cfg = small_cfg();
        cfg.steps = 30;
        cfg.batch_size = 6;
        cfg.sub_batch_size = 3;
        cfg.lr = 0.02;
        cfg.optimizer = OptimizerKind::AdamLike;
        cfg.alpha = 4.0;
        let pairs = random_pairs(11, 12, 6);
        let mut seen = 0usize;
        let result = train_run(&cfg, 4, &pairs, &mut |r, _| {
            assert!(r.loss.is_finite() && r.loss >= 0.0);
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 30);
        let first = result.reports.first().unwrap().loss;
        let last = result.reports.last().unwrap().loss;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let mut cfg = small_cfg();
        cfg.steps = 6;
        cfg.batch_size = 4;
        cfg.sub_batch_size = 2;
        cfg.alpha = 2.0;
        let pairs = random_pairs(13, 9, 6);
        let a = train_run(&cfg, 4, &pairs, &mut |_, _| Ok(())).unwrap();
        let b = train_run(&cfg, 4, &pairs, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
        for (ra, rb) in a.reports.iter().zip(b.reports.iter()) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
            assert_eq!(ra.hardness_max.to_bits(), rb.hardness_max.to_bits());
            // wallclock_ms intentionally not compared
        }
    }

    #[test]
    fn single_precision_run_completes() {
        let mut cfg = small_cfg();
        cfg.precision = Precision::Single;
        cfg.steps = 4;
        cfg.alpha = 2.0;
        let pairs = random_pairs(17, 6, 6);
        let result = train_run(&cfg, 4, &pairs, &mut |_, _| Ok(())).unwrap();
        assert_eq!(result.reports.len(), 4);
        assert!(result.reports.iter().all(|r| r.loss.is_finite()));
        // checkpoint still materializes as double
        assert!(result.params.to_bytes().unwrap().len() > 0);
    }

    #[test]
    fn step_report_serializes_with_stable_field_names() {
        let report = StepReport {
            step: 3,
            loss: 0.25,
            grad_norm: 1.5,
            hardness_min: 0.5,
            hardness_mean: 1.0,
            hardness_max: 2.0,
            wallclock_ms: 12.5,
        };
        let line = serde_json::to_string(&report).unwrap();
        for key in [
            "step",
            "loss",
            "grad_norm",
            "hardness_min",
            "hardness_mean",
            "hardness_max",
            "wallclock_ms",
        ] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
        let back: StepReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn optimizer_names_round_trip() {
        for (kind, name) in [
            (OptimizerKind::SgdMomentum, "sgd_momentum"),
            (OptimizerKind::AdamLike, "adam_like"),
        ] {
            assert_eq!(kind.to_string(), name);
            assert_eq!(name.parse::<OptimizerKind>().unwrap(), kind);
        }
        for (p, name) in [(Precision::Double, "double"), (Precision::Single, "single")] {
            assert_eq!(p.to_string(), name);
            assert_eq!(name.parse::<Precision>().unwrap(), p);
        }
        assert!("sgd".parse::<OptimizerKind>().is_err());
    }
}
