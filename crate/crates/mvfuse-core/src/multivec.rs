//! Pattern-structured similarities between multi-vector embeddings.
//!
//! An embedding set is one global row `x_0` plus `N` fine-grained rows
//! `x_1..x_N`, all of dimension `D`. Between a query `q` and a target `t` the
//! layout induces four similarity families:
//!
//! ```text
//! s_g2g    = x_0^q . x_0^t          global to global
//! s_f2g[i] = x_i^q . x_0^t          fine to global      i = 1..N
//! s_g2f[i] = x_0^q . x_i^t          global to fine      i = 1..N
//! s_f2f[i] = x_i^q . x_i^t          fine to fine        i = 1..N
//! ```
//!
//! for `3N+1` scalar terms per pair. An [`Aggregator`] collapses them into a
//! single score `s_final`; the default is a max-shifted logsumexp, whose
//! partial derivative with respect to each term is exactly that term's
//! softmax weight (see [`pattern_weights`]).
//!
//! Families can be switched off with a [`PatternMask`]. Masking is boolean:
//! masked terms are skipped, which is equivalent to pinning them at negative
//! infinity but never materializes non-finite values. The mean-max aggregator
//! scores the full `(N+1) x (N+1)` row grid and ignores the mask entirely.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::logsumexp;
use crate::real::Real;

/// One global row plus `N` fine-grained rows, each of dimension `D`.
/// All entries are finite; constructors reject anything else.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T: Real = f64> {
    rows: Array2<T>,
}

impl<T: Real> EmbeddingSet<T> {
    /// Wraps an `(N+1) x D` matrix whose row 0 is the global vector.
    pub fn new(rows: Array2<T>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Dimension(
                "embedding set needs at least the global row".into(),
            ));
        }
        if rows.ncols() == 0 {
            return Err(Error::Dimension("embedding dimension must be >= 1".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding set contains a non-finite entry".into()));
        }
        Ok(Self { rows })
    }

    pub fn n_fine(&self) -> usize {
        self.rows.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn global(&self) -> ArrayView1<'_, T> {
        self.rows.row(0)
    }

    /// Fine-grained row `i`, zero-based: `fine(0)` is `x_1`.
    pub fn fine(&self, i: usize) -> ArrayView1<'_, T> {
        self.rows.row(i + 1)
    }

    /// Raw row access, `row(0)` = global.
    pub fn row(&self, k: usize) -> ArrayView1<'_, T> {
        self.rows.row(k)
    }

    pub fn rows(&self) -> &Array2<T> {
        &self.rows
    }

    /// Mutable access for in-crate perturbation (finite-difference probes).
    pub(crate) fn rows_mut(&mut self) -> &mut Array2<T> {
        &mut self.rows
    }

    pub fn into_rows(self) -> Array2<T> {
        self.rows
    }
}

/// Which similarity families participate in aggregation. Default: all four.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternMask {
    pub use_g2g: bool,
    pub use_f2g: bool,
    pub use_g2f: bool,
    pub use_f2f: bool,
}

impl Default for PatternMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl PatternMask {
    pub const FULL: Self = Self {
        use_g2g: true,
        use_f2g: true,
        use_g2f: true,
        use_f2f: true,
    };

    pub fn any_active(self) -> bool {
        self.use_g2g || self.use_f2g || self.use_g2f || self.use_f2f
    }

    pub fn is_full(self) -> bool {
        self == Self::FULL
    }

    /// Number of scalar terms that survive the mask for a given `N`.
    /// Note the fine families contribute nothing when `N = 0`.
    pub fn active_term_count(self, n_fine: usize) -> usize {
        let fine = [self.use_f2g, self.use_g2f, self.use_f2f]
            .iter()
            .filter(|&&on| on)
            .count();
        usize::from(self.use_g2g) + n_fine * fine
    }

    /// Short label for reports, e.g. `full` or `no-f2g`.
    pub fn label(self) -> String {
        if self.is_full() {
            return "full".to_string();
        }
        let mut out = Vec::new();
        for (on, name) in [
            (self.use_g2g, "g2g"),
            (self.use_f2g, "f2g"),
            (self.use_g2f, "g2f"),
            (self.use_f2f, "f2f"),
        ] {
            if !on {
                out.push(name);
            }
        }
        format!("no-{}", out.join("-"))
    }
}

/// How the per-pattern terms collapse into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    /// `ln sum exp` over unmasked terms. Smooth; the only aggregator with
    /// softmax pattern weights and hence closed-form cached gradients.
    Logsumexp,
    /// Largest unmasked term.
    Max,
    /// Sum over query rows of the best-matching target row, scanning the full
    /// row grid. Ignores the pattern mask.
    MeanMax,
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Aggregator::Logsumexp => "logsumexp",
            Aggregator::Max => "max",
            Aggregator::MeanMax => "mean-max",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logsumexp" => Ok(Aggregator::Logsumexp),
            "max" => Ok(Aggregator::Max),
            "mean-max" | "mean_max" => Ok(Aggregator::MeanMax),
            other => Err(Error::Config(format!(
                "unknown aggregator `{other}` (expected logsumexp, max, or mean-max)"
            ))),
        }
    }
}

/// Identifies one scalar term of the breakdown. Indices are zero-based into
/// the fine rows. The enum order (g2g, f2g, g2f, f2f) is the canonical term
/// order used for iteration and tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermId {
    G2g,
    F2g(usize),
    G2f(usize),
    F2f(usize),
}

/// All `3N+1` raw similarity terms of one query/target pair, the mask and
/// aggregator they were scored under, and the aggregate `s_final`.
///
/// Raw terms are always populated regardless of the mask; the mask only
/// governs aggregation and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBreakdown<T: Real = f64> {
    pub s_g2g: T,
    pub s_f2g: Vec<T>,
    pub s_g2f: Vec<T>,
    pub s_f2f: Vec<T>,
    pub s_final: T,
    pub mask: PatternMask,
    pub aggregator: Aggregator,
}

impl<T: Real> SimilarityBreakdown<T> {
    pub fn n_fine(&self) -> usize {
        self.s_f2g.len()
    }

    /// Visits unmasked terms in canonical order: g2g, then f2g ascending,
    /// g2f ascending, f2f ascending.
    pub fn for_each_unmasked(&self, mut f: impl FnMut(TermId, T)) {
        if self.mask.use_g2g {
            f(TermId::G2g, self.s_g2g);
        }
        if self.mask.use_f2g {
            for (i, &s) in self.s_f2g.iter().enumerate() {
                f(TermId::F2g(i), s);
            }
        }
        if self.mask.use_g2f {
            for (i, &s) in self.s_g2f.iter().enumerate() {
                f(TermId::G2f(i), s);
            }
        }
        if self.mask.use_f2f {
            for (i, &s) in self.s_f2f.iter().enumerate() {
                f(TermId::F2f(i), s);
            }
        }
    }

    /// Unmasked term values in canonical order.
    pub fn unmasked_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.mask.active_term_count(self.n_fine()));
        self.for_each_unmasked(|_, s| out.push(s));
        out
    }
}

/// Softmax weights of the unmasked terms under logsumexp aggregation:
/// `w = exp(s_term - s_final)`. Masked entries are exactly zero. Each weight
/// equals the partial derivative of `s_final` with respect to its raw term.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternWeights<T: Real = f64> {
    pub w_g2g: T,
    pub w_f2g: Vec<T>,
    pub w_g2f: Vec<T>,
    pub w_f2f: Vec<T>,
}

impl<T: Real> PatternWeights<T> {
    pub fn sum(&self) -> T {
        self.w_g2g
            + self.w_f2g.iter().copied().sum()
            + self.w_g2f.iter().copied().sum()
            + self.w_f2f.iter().copied().sum()
    }
}

/// Computes all raw terms for one pair and aggregates them.
///
/// Errors: `Dimension` if shapes disagree; `Precondition` if the mask leaves
/// no terms for logsumexp or max aggregation.
pub fn similarity_breakdown<T: Real>(
    query: &EmbeddingSet<T>,
    target: &EmbeddingSet<T>,
    mask: PatternMask,
    aggregator: Aggregator,
) -> Result<SimilarityBreakdown<T>> {
    if query.dim() != target.dim() || query.n_fine() != target.n_fine() {
        return Err(Error::Dimension(format!(
            "query is {}x{}, target is {}x{}",
            query.n_fine() + 1,
            query.dim(),
            target.n_fine() + 1,
            target.dim()
        )));
    }
    let n = query.n_fine();
    let qg = query.global();
    let tg = target.global();
    let mut b = SimilarityBreakdown {
        s_g2g: qg.dot(&tg),
        s_f2g: (0..n).map(|i| query.fine(i).dot(&tg)).collect(),
        s_g2f: (0..n).map(|i| qg.dot(&target.fine(i))).collect(),
        s_f2f: (0..n).map(|i| query.fine(i).dot(&target.fine(i))).collect(),
        s_final: T::zero(),
        mask,
        aggregator,
    };
    b.s_final = match aggregator {
        Aggregator::Logsumexp => aggregate_logsumexp(&b)?,
        Aggregator::Max => aggregate_max(&b)?,
        Aggregator::MeanMax => aggregate_mean_max(query, target)?,
    };
    Ok(b)
}

/// Max-shifted `ln sum exp` over the unmasked terms of `b`.
pub fn aggregate_logsumexp<T: Real>(b: &SimilarityBreakdown<T>) -> Result<T> {
    let vals = b.unmasked_values();
    if vals.is_empty() {
        return Err(Error::Precondition(
            "mask leaves no similarity terms to aggregate".into(),
        ));
    }
    Ok(logsumexp(&vals))
}

/// Largest unmasked term of `b`.
pub fn aggregate_max<T: Real>(b: &SimilarityBreakdown<T>) -> Result<T> {
    let vals = b.unmasked_values();
    if vals.is_empty() {
        return Err(Error::Precondition(
            "mask leaves no similarity terms to aggregate".into(),
        ));
    }
    Ok(vals.into_iter().fold(T::neg_infinity(), T::max))
}

/// Sum over query rows (global and fine alike) of the best-scoring target
/// row: a full `(N+1) x (N+1)` scan. The pattern mask does not apply.
pub fn aggregate_mean_max<T: Real>(
    query: &EmbeddingSet<T>,
    target: &EmbeddingSet<T>,
) -> Result<T> {
    if query.dim() != target.dim() || query.n_fine() != target.n_fine() {
        return Err(Error::Dimension(
            "mean-max needs matching embedding shapes".into(),
        ));
    }
    let rows = query.n_fine() + 1;
    let mut total = T::zero();
    for i in 0..rows {
        let qi = query.row(i);
        let mut best = T::neg_infinity();
        for j in 0..rows {
            best = best.max(qi.dot(&target.row(j)));
        }
        total = total + best;
    }
    Ok(total)
}

/// The unmasked term with the largest value. Ties resolve in canonical term
/// order (g2g, then f2g, g2f, f2f, each ascending), i.e. the first maximum
/// encountered wins. This is the routing rule for max-aggregation
/// subgradients.
pub fn argmax_unmasked_term<T: Real>(b: &SimilarityBreakdown<T>) -> Result<TermId> {
    let mut best: Option<(TermId, T)> = None;
    b.for_each_unmasked(|id, s| match best {
        Some((_, bs)) if s <= bs => {}
        _ => best = Some((id, s)),
    });
    best.map(|(id, _)| id).ok_or_else(|| {
        Error::Precondition("mask leaves no similarity terms to aggregate".into())
    })
}

/// Softmax weights of `b`'s unmasked terms. Requires logsumexp aggregation,
/// because only there does `exp(s - s_final)` equal `d s_final / d s_term`.
pub fn pattern_weights<T: Real>(b: &SimilarityBreakdown<T>) -> Result<PatternWeights<T>> {
    if b.aggregator != Aggregator::Logsumexp {
        return Err(Error::Precondition(format!(
            "pattern weights are defined for logsumexp aggregation, breakdown used {}",
            b.aggregator
        )));
    }
    let n = b.n_fine();
    let w = |on: bool, s: T| if on { (s - b.s_final).exp() } else { T::zero() };
    Ok(PatternWeights {
        w_g2g: w(b.mask.use_g2g, b.s_g2g),
        w_f2g: (0..n).map(|i| w(b.mask.use_f2g, b.s_f2g[i])).collect(),
        w_g2f: (0..n).map(|i| w(b.mask.use_g2f, b.s_g2f[i])).collect(),
        w_f2f: (0..n).map(|i| w(b.mask.use_f2f, b.s_f2f[i])).collect(),
    })
}
