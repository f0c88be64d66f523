//! Closed-form gradients of the contrastive loss with respect to every
//! embedding in a batch.
//!
//! For the logsumexp aggregator the derivative of `s_final` with respect to
//! each raw term is that term's softmax pattern weight, so the chain rule
//! collapses into a handful of weighted row combinations: for a pair `(q, t)`
//!
//! ```text
//! d s_final / d q_0 = w_g2g x0_t + sum_j w_g2f[j] xj_t
//! d s_final / d q_j = w_f2g[j] x0_t + w_f2f[j] xj_t
//! d s_final / d t_0 = w_g2g x0_q + sum_j w_f2g[j] xj_q
//! d s_final / d t_j = w_g2f[j] x0_q + w_f2f[j] xj_q
//! ```
//!
//! and the loss gradients combine these pair partials with the softmax
//! responsibilities `p` of the batch:
//!
//! ```text
//! dL/dq    = (1/tau) sum_i p_i [ dS(q,t_i)/dq - dS(q,t+)/dq ]
//! dL/dt+   = -(1/tau) (sum_i p_i) dS(q,t+)/dt
//! dL/dt_i  = (1/tau) p_i dS(q,t_i)/dt
//! ```
//!
//! where the positive's factor is written as `-sum_i p_i`, which equals
//! `p+ - 1` exactly by conservation and keeps the equations mutually
//! consistent after hard-negative amplification replaces `p` with the
//! reassigned `p_bar` (the positive's responsibility itself is never
//! reassigned).
//!
//! Hard-negative amplification multiplies each negative's responsibility by
//! `h_i = exp(alpha (s_i - s+))` on the *unscaled* aggregates and then
//! renormalizes so the negatives' total mass is preserved. At `alpha = 0`
//! every `h_i` is exactly one and the whole stage degenerates to a no-op,
//! bit for bit.
//!
//! Max and mean-max aggregation get subgradient pair partials instead
//! (argmax routing); amplification does not apply to them.
//!
//! Everything here is audited against central finite differences of the
//! forward pipeline; see [`finite_difference_gradients`].

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::loss::{classification_probs, infonce_loss, phi, BatchSimilarities};
use crate::multivec::{
    argmax_unmasked_term, pattern_weights, similarity_breakdown, Aggregator, EmbeddingSet,
    PatternMask, PatternWeights, TermId,
};
use crate::parallel;
use crate::real::Real;

/// One query against its positive target and the batch negatives, plus the
/// scalar knobs the gradients depend on.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T: Real = f64> {
    pub query: EmbeddingSet<T>,
    pub positive: EmbeddingSet<T>,
    pub negatives: Vec<EmbeddingSet<T>>,
    /// Softmax temperature, `> 0`.
    pub tau: T,
    /// Amplification magnitude, `>= 0`; zero disables amplification.
    pub alpha: T,
    pub mask: PatternMask,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.query.n_fine(), self.query.dim());
        for (i, set) in std::iter::once(&self.positive)
            .chain(self.negatives.iter())
            .enumerate()
        {
            if set.n_fine() != n || set.dim() != d {
                return Err(Error::Dimension(format!(
                    "target {i} is {}x{}, query is {}x{}",
                    set.n_fine() + 1,
                    set.dim(),
                    n + 1,
                    d
                )));
            }
        }
        if !(self.tau > T::zero()) || !self.tau.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be a positive finite real, got {}",
                self.tau
            )));
        }
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!(
                "amplification magnitude must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.mask.active_term_count(n) == 0 {
            return Err(Error::Precondition(
                "mask leaves no similarity terms to aggregate".into(),
            ));
        }
        Ok(())
    }

    pub fn n_fine(&self) -> usize {
        self.query.n_fine()
    }

    pub fn dim(&self) -> usize {
        self.query.dim()
    }
}

/// Loss gradient for every embedding of the batch, shaped like the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedGradientSet<T: Real = f64> {
    pub d_query: Array2<T>,
    pub d_positive: Array2<T>,
    pub d_negatives: Vec<Array2<T>>,
}

/// Per-negative hardness factors `h_i = exp(alpha (s_i - s+))`.
#[derive(Clone, Debug, PartialEq)]
pub struct HardnessVector<T: Real = f64> {
    pub h: Vec<T>,
    /// Some exponent argument exceeded the clamp and was capped, keeping
    /// every factor finite and strictly positive.
    pub clamped: bool,
}

impl<T: Real> HardnessVector<T> {
    pub fn ones(n: usize) -> Self {
        Self {
            h: vec![T::one(); n],
            clamped: false,
        }
    }

    /// (min, mean, max); all ones convention for an empty vector.
    pub fn stats(&self) -> (T, T, T) {
        if self.h.is_empty() {
            return (T::one(), T::one(), T::one());
        }
        let min = self.h.iter().copied().fold(T::infinity(), T::min);
        let max = self.h.iter().copied().fold(T::neg_infinity(), T::max);
        let mean = self.h.iter().copied().sum::<T>() / T::from_f64(self.h.len() as f64);
        (min, mean, max)
    }
}

/// What the amplification stage actually did, for metrics streams.
#[derive(Clone, Debug)]
pub struct GradDiagnostics<T: Real = f64> {
    pub hardness: HardnessVector<T>,
    /// `sum(p_i h_i)` underflowed to zero; responsibilities were left as-is.
    pub reassign_underflow: bool,
}

impl<T: Real> GradDiagnostics<T> {
    pub fn inert(n_neg: usize) -> Self {
        Self {
            hardness: HardnessVector::ones(n_neg),
            reassign_underflow: false,
        }
    }
}

/// Hardness factors on unscaled aggregate similarities. The exponent
/// argument is clamped to `|arg| <= EXP_CLAMP` (700 in double precision), so
/// factors stay finite and strictly positive; clamping is flagged.
pub fn hardness<T: Real>(s_neg: &[T], s_pos: T, alpha: T) -> Result<HardnessVector<T>> {
    if !(alpha >= T::zero()) || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "amplification magnitude must be finite and >= 0, got {alpha}"
        )));
    }
    if !s_pos.is_finite() || s_neg.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("non-finite aggregate similarity".into()));
    }
    let mut clamped = false;
    let h = s_neg
        .iter()
        .map(|&s| {
            let mut arg = alpha * (s - s_pos);
            if arg > T::EXP_CLAMP {
                arg = T::EXP_CLAMP;
                clamped = true;
            } else if arg < -T::EXP_CLAMP {
                arg = -T::EXP_CLAMP;
                clamped = true;
            }
            arg.exp()
        })
        .collect();
    Ok(HardnessVector { h, clamped })
}

/// Scales each negative's responsibility by its hardness and renormalizes so
/// the total negative mass is unchanged: `p_bar_i = p_i h_i sum(p) / sum(p h)`.
///
/// A hardness vector of exact ones returns the input unchanged, bit for bit;
/// this is what makes the `alpha = 0` route indistinguishable from a build
/// without the amplification stage. If `sum(p h)` underflows to zero the
/// input is returned unchanged and the flag is set.
pub fn reassign_probs<T: Real>(p_neg: &[T], h: &[T]) -> Result<(Vec<T>, bool)> {
    if p_neg.len() != h.len() {
        return Err(Error::Dimension(format!(
            "{} responsibilities vs {} hardness factors",
            p_neg.len(),
            h.len()
        )));
    }
    if p_neg.is_empty() {
        return Ok((Vec::new(), false));
    }
    if p_neg.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
        return Err(Error::Domain("responsibilities must be finite and >= 0".into()));
    }
    let p_sum: T = p_neg.iter().copied().sum();
    if !(p_sum > T::zero()) {
        return Err(Error::Precondition(
            "sum of negative responsibilities must be positive".into(),
        ));
    }
    if h.iter().all(|&x| x == T::one()) {
        return Ok((p_neg.to_vec(), false));
    }
    let hat: Vec<T> = p_neg.iter().zip(h.iter()).map(|(&p, &x)| p * x).collect();
    let hat_sum: T = hat.iter().copied().sum();
    if !(hat_sum > T::zero()) {
        return Ok((p_neg.to_vec(), true));
    }
    let scale = p_sum / hat_sum;
    Ok((hat.into_iter().map(|x| x * scale).collect(), false))
}

// d s_final / d query and d s_final / d target for one pair, as (N+1) x D
// matrices. For logsumexp these use the (memoized) pattern weights; max gets
// a one-hot weight at the argmax term; mean-max routes each query row to its
// best target row.
fn pair_partials<T: Real>(
    query: &EmbeddingSet<T>,
    target: &EmbeddingSet<T>,
    mask: PatternMask,
    aggregator: Aggregator,
    pair_index: usize,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let b = similarity_breakdown(query, target, mask, aggregator)?;
    if !b.s_final.is_finite() {
        return Err(Error::NonFinite {
            pair: pair_index,
            what: format!("aggregate similarity = {}", b.s_final),
        });
    }
    let (dq, dt) = match aggregator {
        Aggregator::Logsumexp => {
            let w = pattern_weights(&b)?;
            weighted_partials(&w, query, target)
        }
        Aggregator::Max => {
            let w = one_hot_weights(b.n_fine(), argmax_unmasked_term(&b)?);
            weighted_partials(&w, query, target)
        }
        Aggregator::MeanMax => mean_max_partials(query, target),
    };
    Ok((b.s_final, dq, dt))
}

fn weighted_partials<T: Real>(
    w: &PatternWeights<T>,
    query: &EmbeddingSet<T>,
    target: &EmbeddingSet<T>,
) -> (Array2<T>, Array2<T>) {
    let n = query.n_fine();
    let d = query.dim();
    let mut dq = Array2::zeros((n + 1, d));
    let mut dt = Array2::zeros((n + 1, d));

    dq.row_mut(0).scaled_add(w.w_g2g, &target.global());
    dt.row_mut(0).scaled_add(w.w_g2g, &query.global());
    for j in 0..n {
        dq.row_mut(0).scaled_add(w.w_g2f[j], &target.fine(j));
        dt.row_mut(0).scaled_add(w.w_f2g[j], &query.fine(j));

        let mut dq_j = dq.row_mut(j + 1);
        dq_j.scaled_add(w.w_f2g[j], &target.global());
        dq_j.scaled_add(w.w_f2f[j], &target.fine(j));

        let mut dt_j = dt.row_mut(j + 1);
        dt_j.scaled_add(w.w_g2f[j], &query.global());
        dt_j.scaled_add(w.w_f2f[j], &query.fine(j));
    }
    (dq, dt)
}

fn one_hot_weights<T: Real>(n: usize, id: TermId) -> PatternWeights<T> {
    let mut w = PatternWeights {
        w_g2g: T::zero(),
        w_f2g: vec![T::zero(); n],
        w_g2f: vec![T::zero(); n],
        w_f2f: vec![T::zero(); n],
    };
    match id {
        TermId::G2g => w.w_g2g = T::one(),
        TermId::F2g(i) => w.w_f2g[i] = T::one(),
        TermId::G2f(i) => w.w_g2f[i] = T::one(),
        TermId::F2f(i) => w.w_f2f[i] = T::one(),
    }
    w
}

fn mean_max_partials<T: Real>(
    query: &EmbeddingSet<T>,
    target: &EmbeddingSet<T>,
) -> (Array2<T>, Array2<T>) {
    let rows = query.n_fine() + 1;
    let d = query.dim();
    let mut dq = Array2::zeros((rows, d));
    let mut dt = Array2::zeros((rows, d));
    for i in 0..rows {
        let qi = query.row(i);
        // strict > keeps the lowest index on ties
        let mut best_j = 0;
        let mut best = qi.dot(&target.row(0));
        for j in 1..rows {
            let v = qi.dot(&target.row(j));
            if v > best {
                best = v;
                best_j = j;
            }
        }
        dq.row_mut(i).assign(&target.row(best_j));
        dt.row_mut(best_j).scaled_add(T::one(), &qi);
    }
    (dq, dt)
}

/// Audit-only switches. `negate_positive_term` flips the sign of the
/// positive-pair term inside the query gradient, deliberately corrupting it
/// so the finite-difference audit can prove it detects a broken build.
#[derive(Clone, Copy, Debug, Default)]
pub struct AuditHooks {
    pub negate_positive_term: bool,
}

fn gradients_inner<T: Real>(
    batch: &ContrastiveBatch<T>,
    aggregator: Aggregator,
    apply_amplification: bool,
    hooks: AuditHooks,
) -> Result<(CachedGradientSet<T>, GradDiagnostics<T>)> {
    batch.validate()?;
    let n_neg = batch.negatives.len();

    // Pair partials, positive first. This is the data-parallel part; every
    // reduction below folds in ascending negative index.
    let (s_pos, dq_pos, dt_pos) =
        pair_partials(&batch.query, &batch.positive, batch.mask, aggregator, 0)?;
    let neg_parts = parallel::map_indexed(n_neg, |i| {
        pair_partials(&batch.query, &batch.negatives[i], batch.mask, aggregator, i + 1)
    });
    let mut s_neg = Vec::with_capacity(n_neg);
    let mut parts = Vec::with_capacity(n_neg);
    for part in neg_parts {
        let (s, dq, dt) = part?;
        s_neg.push(s);
        parts.push((dq, dt));
    }

    // Softmax responsibilities over the temperature-scaled logits.
    let phi_pos = phi(s_pos, batch.tau)?;
    let phi_neg = s_neg
        .iter()
        .map(|&s| phi(s, batch.tau))
        .collect::<Result<Vec<T>>>()?;
    let sims = BatchSimilarities::new(phi_pos, phi_neg, batch.tau)?;
    let probs = classification_probs(&sims);

    // Amplification: only the negatives' responsibilities are reassigned.
    let p_neg_sum: T = probs.p_neg.iter().copied().sum();
    let (p_bar, diagnostics) = if apply_amplification && n_neg > 0 {
        let hv = hardness(&s_neg, s_pos, batch.alpha)?;
        if p_neg_sum > T::zero() {
            let (p_bar, underflow) = reassign_probs(&probs.p_neg, &hv.h)?;
            let diag = GradDiagnostics {
                hardness: hv,
                reassign_underflow: underflow,
            };
            (p_bar, diag)
        } else {
            // negatives carry no mass; gradients vanish regardless
            (
                probs.p_neg.clone(),
                GradDiagnostics {
                    hardness: hv,
                    reassign_underflow: false,
                },
            )
        }
    } else {
        (probs.p_neg.clone(), GradDiagnostics::inert(n_neg))
    };

    let shape = (batch.n_fine() + 1, batch.dim());
    let inv_tau = T::one() / batch.tau;
    let mut d_query = Array2::zeros(shape);
    let mut d_negatives = Vec::with_capacity(n_neg);
    let mut p_bar_sum = T::zero();
    let pos_sign = if hooks.negate_positive_term {
        T::one()
    } else {
        -T::one()
    };
    for (i, (dq_i, dt_i)) in parts.into_iter().enumerate() {
        let p = p_bar[i];
        // dL/dq += (1/tau) p_i [ dS(q,t_i)/dq - dS(q,t+)/dq ]
        let mut bracket = dq_i;
        bracket.scaled_add(pos_sign, &dq_pos);
        d_query.scaled_add(inv_tau * p, &bracket);
        // dL/dt_i = (1/tau) p_i dS(q,t_i)/dt
        let mut dt = dt_i;
        dt.mapv_inplace(|v| v * inv_tau * p);
        d_negatives.push(dt);
        p_bar_sum = p_bar_sum + p;
    }
    // dL/dt+ = -(1/tau) (sum_i p_bar_i) dS(q,t+)/dt; the factor equals
    // (p+ - 1) by conservation.
    let mut d_positive = dt_pos;
    d_positive.mapv_inplace(|v| v * (-inv_tau * p_bar_sum));

    Ok((
        CachedGradientSet {
            d_query,
            d_positive,
            d_negatives,
        },
        diagnostics,
    ))
}

/// Analytic gradients under logsumexp aggregation with the hard-negative
/// amplification stage active. `batch.alpha = 0` yields factors of exactly
/// one and the identical output of [`cached_gradients_unamplified`].
pub fn cached_gradients<T: Real>(
    batch: &ContrastiveBatch<T>,
) -> Result<(CachedGradientSet<T>, GradDiagnostics<T>)> {
    gradients_inner(batch, Aggregator::Logsumexp, true, AuditHooks::default())
}

/// Analytic gradients under logsumexp aggregation with the amplification
/// stage bypassed entirely: the exact loss gradient.
pub fn cached_gradients_unamplified<T: Real>(
    batch: &ContrastiveBatch<T>,
) -> Result<(CachedGradientSet<T>, GradDiagnostics<T>)> {
    gradients_inner(batch, Aggregator::Logsumexp, false, AuditHooks::default())
}

/// [`cached_gradients`] with audit switches; see [`AuditHooks`].
pub fn cached_gradients_with_hooks<T: Real>(
    batch: &ContrastiveBatch<T>,
    hooks: AuditHooks,
) -> Result<(CachedGradientSet<T>, GradDiagnostics<T>)> {
    gradients_inner(batch, Aggregator::Logsumexp, true, hooks)
}

/// Subgradient-based loss gradients for the non-smooth aggregators (argmax
/// routing, ties by canonical term order). Amplification never applies here.
/// For `Logsumexp` this coincides with [`cached_gradients_unamplified`].
pub fn subgradient_gradients<T: Real>(
    batch: &ContrastiveBatch<T>,
    aggregator: Aggregator,
) -> Result<CachedGradientSet<T>> {
    gradients_inner(batch, aggregator, false, AuditHooks::default()).map(|(g, _)| g)
}

/// Forward pass only: the InfoNCE loss of the batch under `aggregator`.
pub fn batch_loss<T: Real>(batch: &ContrastiveBatch<T>, aggregator: Aggregator) -> Result<T> {
    batch.validate()?;
    let pos = similarity_breakdown(&batch.query, &batch.positive, batch.mask, aggregator)?;
    let phi_pos = phi(pos.s_final, batch.tau)?;
    let phi_neg = batch
        .negatives
        .iter()
        .map(|t| {
            let b = similarity_breakdown(&batch.query, t, batch.mask, aggregator)?;
            phi(b.s_final, batch.tau)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(infonce_loss(&BatchSimilarities::new(
        phi_pos, phi_neg, batch.tau,
    )?))
}

/// Central finite differences of the forward pipeline with respect to every
/// entry of every embedding in the batch, under `aggregator`. This is the
/// independent oracle for the analytic gradients; amplification has no loss
/// counterpart, so it corresponds to the unamplified (`alpha = 0`) route.
pub fn finite_difference_gradients_for<T: Real>(
    batch: &ContrastiveBatch<T>,
    step: T,
    aggregator: Aggregator,
) -> Result<CachedGradientSet<T>> {
    batch.validate()?;
    if !(step > T::zero()) {
        return Err(Error::Domain("step must be positive".into()));
    }

    // which = 0 query, 1 positive, 2+i negative i
    let probe = |which: usize, r: usize, c: usize, delta: T| -> Result<T> {
        let mut b = batch.clone();
        let m = match which {
            0 => b.query.rows_mut(),
            1 => b.positive.rows_mut(),
            i => b.negatives[i - 2].rows_mut(),
        };
        m[(r, c)] = m[(r, c)] + delta;
        batch_loss(&b, aggregator)
    };
    let shape = (batch.n_fine() + 1, batch.dim());
    let two_step = step + step;
    let fd_matrix = |which: usize| -> Result<Array2<T>> {
        let mut out = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let hi = probe(which, r, c, step)?;
                let lo = probe(which, r, c, -step)?;
                out[(r, c)] = (hi - lo) / two_step;
            }
        }
        Ok(out)
    };

    Ok(CachedGradientSet {
        d_query: fd_matrix(0)?,
        d_positive: fd_matrix(1)?,
        d_negatives: (0..batch.negatives.len())
            .map(|i| fd_matrix(2 + i))
            .collect::<Result<Vec<_>>>()?,
    })
}

/// [`finite_difference_gradients_for`] under logsumexp aggregation.
pub fn finite_difference_gradients<T: Real>(
    batch: &ContrastiveBatch<T>,
    step: T,
) -> Result<CachedGradientSet<T>> {
    finite_difference_gradients_for(batch, step, Aggregator::Logsumexp)
}

/// `|a - b| / max(|a| + |b|, 1e-3)`: the error convention used by every
/// gradient audit in this crate. Relative for entries of ordinary magnitude
/// (here O(0.1..10)); below the floor it degrades to an absolute check at
/// `1e-8` per `1e-5` of tolerance, which sits above the truncation and
/// roundoff noise of a central difference with step `1e-6` but orders of
/// magnitude below any structural defect.
pub fn relative_error<T: Real>(a: T, b: T) -> T {
    let denom = (a.abs() + b.abs()).max(T::from_f64(1e-3));
    (a - b).abs() / denom
}

/// Largest elementwise [`relative_error`] across the whole gradient set.
pub fn max_relative_error<T: Real>(a: &CachedGradientSet<T>, b: &CachedGradientSet<T>) -> T {
    let mut worst = T::zero();
    let mut scan = |x: &Array2<T>, y: &Array2<T>| {
        for (&u, &v) in x.iter().zip(y.iter()) {
            worst = worst.max(relative_error(u, v));
        }
    };
    scan(&a.d_query, &b.d_query);
    scan(&a.d_positive, &b.d_positive);
    for (x, y) in a.d_negatives.iter().zip(b.d_negatives.iter()) {
        scan(x, y);
    }
    worst
}
