//! A small deterministic encoder from raw feature vectors to multi-vector
//! embedding sets.
//!
//! ```text
//! hidden = tanh(trunk_w x + trunk_b)             H
//! row_k  = heads_w[k] hidden + heads_b[k]        D, k = 0..N
//! ```
//!
//! with optional L2 normalization of every output row (on by default in the
//! trainer; rows with norm below 1e-12 are rejected as degenerate).
//!
//! The backward pass here is the surrogate form used by two-pass training:
//! given a cached upstream matrix `U` (the loss gradient with respect to this
//! item's embedding rows), it returns the parameter gradient of the scalar
//! `F = sum_k U_k . row_k`, whose derivative with respect to the parameters
//! equals the item's contribution to the loss gradient by the chain rule.
//! The normalization Jacobian `(I - r r^T)/|y|` lives entirely in this
//! backward pass, so the embedding-level gradient formulas stay untouched.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multivec::EmbeddingSet;
use crate::parallel;
use crate::real::Real;

/// Raw input features of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemFeatures<T: Real = f64> {
    pub x: Array1<T>,
}

impl<T: Real> ItemFeatures<T> {
    pub fn from_vec(v: Vec<T>) -> Self {
        Self {
            x: Array1::from_vec(v),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Shape summary of an encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub f_in: usize,
    pub hidden: usize,
    pub n_fine: usize,
    pub dim: usize,
}

impl EncoderDims {
    pub fn n_heads(self) -> usize {
        self.n_fine + 1
    }

    /// Total scalar parameter count.
    pub fn n_params(self) -> usize {
        self.hidden * self.f_in
            + self.hidden
            + self.n_heads() * (self.dim * self.hidden + self.dim)
    }
}

/// Trunk plus one linear head per embedding row. Head 0 produces the global
/// row, heads `1..=N` the fine-grained rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T: Real = f64> {
    /// `H x F_in`
    pub trunk_w: Array2<T>,
    /// `H`
    pub trunk_b: Array1<T>,
    /// `N+1` matrices of `D x H`, in row order
    pub heads_w: Vec<Array2<T>>,
    /// `N+1` vectors of `D`
    pub heads_b: Vec<Array1<T>>,
    /// L2-normalize every output row.
    pub normalize: bool,
}

impl<T: Real> EncoderParams<T> {
    /// Seeded Gaussian init: weight scale `1/sqrt(fan_in)`, zero biases.
    pub fn init(seed: u64, dims: EncoderDims, normalize: bool) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let trunk_sd = 1.0 / (dims.f_in as f64).sqrt();
        let head_sd = 1.0 / (dims.hidden as f64).sqrt();
        // draws happen in f64 and convert, so both precisions start from the
        // same numbers
        let trunk_n = Normal::new(0.0, trunk_sd).expect("finite sd");
        let head_n = Normal::new(0.0, head_sd).expect("finite sd");
        let trunk_w = Array2::from_shape_fn((dims.hidden, dims.f_in), |_| {
            T::from_f64(trunk_n.sample(&mut rng))
        });
        let heads_w = (0..dims.n_heads())
            .map(|_| {
                Array2::from_shape_fn((dims.dim, dims.hidden), |_| {
                    T::from_f64(head_n.sample(&mut rng))
                })
            })
            .collect();
        Self {
            trunk_w,
            trunk_b: Array1::zeros(dims.hidden),
            heads_w,
            heads_b: (0..dims.n_heads()).map(|_| Array1::zeros(dims.dim)).collect(),
            normalize,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            f_in: self.trunk_w.ncols(),
            hidden: self.trunk_w.nrows(),
            n_fine: self.heads_w.len().saturating_sub(1),
            dim: self.heads_w.first().map_or(0, |h| h.nrows()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.heads_w.is_empty() {
            return Err(Error::Dimension("need at least the global head".into()));
        }
        if self.trunk_b.len() != d.hidden {
            return Err(Error::Dimension("trunk bias length != hidden width".into()));
        }
        if self.heads_b.len() != self.heads_w.len() {
            return Err(Error::Dimension("head weight/bias count mismatch".into()));
        }
        for (k, (w, b)) in self.heads_w.iter().zip(self.heads_b.iter()).enumerate() {
            if w.nrows() != d.dim || w.ncols() != d.hidden || b.len() != d.dim {
                return Err(Error::Dimension(format!("head {k} has inconsistent shape")));
            }
        }
        let finite = self.trunk_w.iter().all(|v| v.is_finite())
            && self.trunk_b.iter().all(|v| v.is_finite())
            && self.heads_w.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.heads_b.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Domain("encoder parameters contain a non-finite value".into()));
        }
        Ok(())
    }

    /// Lossy precision conversion through f64.
    pub fn convert<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            trunk_w: self.trunk_w.mapv(|v| U::from_f64(v.to_f64())),
            trunk_b: self.trunk_b.mapv(|v| U::from_f64(v.to_f64())),
            heads_w: self
                .heads_w
                .iter()
                .map(|w| w.mapv(|v| U::from_f64(v.to_f64())))
                .collect(),
            heads_b: self
                .heads_b
                .iter()
                .map(|b| b.mapv(|v| U::from_f64(v.to_f64())))
                .collect(),
            normalize: self.normalize,
        }
    }

    /// Flat mutable views over every parameter tensor, in a fixed order
    /// (trunk weights, trunk bias, then per head: weights, bias).
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 + 2 * self.heads_w.len());
        out.push(self.trunk_w.as_slice_mut().expect("standard layout"));
        out.push(self.trunk_b.as_slice_mut().expect("standard layout"));
        for (w, b) in self.heads_w.iter_mut().zip(self.heads_b.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Parameter-shaped gradient (or optimizer moment) container.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads<T: Real = f64> {
    pub trunk_w: Array2<T>,
    pub trunk_b: Array1<T>,
    pub heads_w: Vec<Array2<T>>,
    pub heads_b: Vec<Array1<T>>,
}

impl<T: Real> EncoderGrads<T> {
    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            trunk_w: Array2::zeros((dims.hidden, dims.f_in)),
            trunk_b: Array1::zeros(dims.hidden),
            heads_w: (0..dims.n_heads())
                .map(|_| Array2::zeros((dims.dim, dims.hidden)))
                .collect(),
            heads_b: (0..dims.n_heads()).map(|_| Array1::zeros(dims.dim)).collect(),
        }
    }

    /// `self += k * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, k: T) {
        self.trunk_w.scaled_add(k, &other.trunk_w);
        self.trunk_b.scaled_add(k, &other.trunk_b);
        for (a, b) in self.heads_w.iter_mut().zip(other.heads_w.iter()) {
            a.scaled_add(k, b);
        }
        for (a, b) in self.heads_b.iter_mut().zip(other.heads_b.iter()) {
            a.scaled_add(k, b);
        }
    }

    /// Global L2 norm over every entry.
    pub fn l2_norm(&self) -> T {
        let mut acc = T::zero();
        let mut eat = |it: &mut dyn Iterator<Item = T>| {
            for v in it {
                acc = acc + v * v;
            }
        };
        eat(&mut self.trunk_w.iter().copied());
        eat(&mut self.trunk_b.iter().copied());
        for w in &self.heads_w {
            eat(&mut w.iter().copied());
        }
        for b in &self.heads_b {
            eat(&mut b.iter().copied());
        }
        acc.sqrt()
    }

    /// Flat views in the same fixed order as [`EncoderParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 + 2 * self.heads_w.len());
        out.push(self.trunk_w.as_slice().expect("standard layout"));
        out.push(self.trunk_b.as_slice().expect("standard layout"));
        for (w, b) in self.heads_w.iter().zip(self.heads_b.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 + 2 * self.heads_w.len());
        out.push(self.trunk_w.as_slice_mut().expect("standard layout"));
        out.push(self.trunk_b.as_slice_mut().expect("standard layout"));
        for (w, b) in self.heads_w.iter_mut().zip(self.heads_b.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

fn outer<T: Real>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Forward pass for one item.
pub fn encode<T: Real>(item: &ItemFeatures<T>, params: &EncoderParams<T>) -> Result<EmbeddingSet<T>> {
    if item.dim() != params.dims().f_in {
        return Err(Error::Dimension(format!(
            "item has {} features, encoder expects {}",
            item.dim(),
            params.dims().f_in
        )));
    }
    let dims = params.dims();
    let hidden = (params.trunk_w.dot(&item.x) + &params.trunk_b).mapv(|v| v.tanh());
    let mut rows = Array2::zeros((dims.n_heads(), dims.dim));
    let floor = T::from_f64(1e-12);
    for k in 0..dims.n_heads() {
        let y = params.heads_w[k].dot(&hidden) + &params.heads_b[k];
        if params.normalize {
            let norm = y.dot(&y).sqrt();
            if norm < floor {
                return Err(Error::DegenerateEmbedding {
                    row: k,
                    norm: norm.to_f64(),
                });
            }
            rows.row_mut(k).assign(&(y / norm));
        } else {
            rows.row_mut(k).assign(&y);
        }
    }
    EmbeddingSet::new(rows)
}

/// Forward pass over many items; order preserved, data-parallel.
pub fn encode_batch<T: Real>(
    items: &[ItemFeatures<T>],
    params: &EncoderParams<T>,
) -> Result<Vec<EmbeddingSet<T>>> {
    parallel::map_slice(items, |item| encode(item, params))
        .into_iter()
        .collect()
}

/// Gradient of `F = sum_k upstream_k . row_k(item)` with respect to the
/// parameters. `upstream` must be `(N+1) x D`, shaped like the embedding.
pub fn backward_surrogate<T: Real>(
    item: &ItemFeatures<T>,
    params: &EncoderParams<T>,
    upstream: &Array2<T>,
) -> Result<EncoderGrads<T>> {
    let dims = params.dims();
    if upstream.nrows() != dims.n_heads() || upstream.ncols() != dims.dim {
        return Err(Error::Dimension(format!(
            "upstream is {}x{}, embedding is {}x{}",
            upstream.nrows(),
            upstream.ncols(),
            dims.n_heads(),
            dims.dim
        )));
    }
    if item.dim() != dims.f_in {
        return Err(Error::Dimension("feature width mismatch".into()));
    }

    let z = params.trunk_w.dot(&item.x) + &params.trunk_b;
    let hidden = z.mapv(|v| v.tanh());
    let floor = T::from_f64(1e-12);

    let mut grads = EncoderGrads::zeros(dims);
    let mut d_hidden = Array1::<T>::zeros(dims.hidden);
    for k in 0..dims.n_heads() {
        let u = upstream.row(k);
        let y = params.heads_w[k].dot(&hidden) + &params.heads_b[k];
        // g = dF/dy for this head
        let g = if params.normalize {
            let norm = y.dot(&y).sqrt();
            if norm < floor {
                return Err(Error::DegenerateEmbedding {
                    row: k,
                    norm: norm.to_f64(),
                });
            }
            let r = y / norm;
            let proj = u.dot(&r);
            // (u - (u.r) r) / |y|
            let mut g = u.to_owned();
            g.scaled_add(-proj, &r);
            g.mapv_inplace(|v| v / norm);
            g
        } else {
            u.to_owned()
        };
        grads.heads_w[k] = outer(&g, &hidden);
        grads.heads_b[k] = g.clone();
        d_hidden += &params.heads_w[k].t().dot(&g);
    }
    // through tanh
    let dz = &d_hidden * &hidden.mapv(|v| T::one() - v * v);
    grads.trunk_w = outer(&dz, &item.x);
    grads.trunk_b = dz;
    Ok(grads)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MVFENC\0\0";
const CHECKPOINT_VERSION: u32 = 1;

// Checkpoints are always written in double precision:
// magic, version, f_in, hidden, n_fine, dim (u32 LE), normalize (u8),
// then row-major LE f64 tensors: trunk weights, trunk bias, and per head in
// index order its weights then bias.
impl EncoderParams<f64> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        let d = self.dims();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [d.f_in, d.hidden, d.n_fine, d.dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.normalize)])?;
        let mut dump = |s: &[f64]| -> Result<()> {
            for v in s {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        dump(self.trunk_w.as_slice().expect("standard layout"))?;
        dump(self.trunk_b.as_slice().expect("standard layout"))?;
        for (hw, hb) in self.heads_w.iter().zip(self.heads_b.iter()) {
            dump(hw.as_slice().expect("standard layout"))?;
            dump(hb.as_slice().expect("standard layout"))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an encoder checkpoint (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let [f_in, hidden, n_fine, dim] = dims;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if flag[0] > 1 {
            return Err(Error::Format("normalize flag must be 0 or 1".into()));
        }

        let mut take = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        };
        let trunk_w = Array2::from_shape_vec((hidden, f_in), take(hidden * f_in)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let trunk_b = Array1::from_vec(take(hidden)?);
        let mut heads_w = Vec::with_capacity(n_fine + 1);
        let mut heads_b = Vec::with_capacity(n_fine + 1);
        for _ in 0..=n_fine {
            heads_w.push(
                Array2::from_shape_vec((dim, hidden), take(dim * hidden)?)
                    .map_err(|e| Error::Format(e.to_string()))?,
            );
            heads_b.push(Array1::from_vec(take(dim)?));
        }
        let params = Self {
            trunk_w,
            trunk_b,
            heads_w,
            heads_b,
            normalize: flag[0] == 1,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let params = Self::read_from(&mut f)?;
        // trailing garbage means the file is not what we think it is
        let mut probe = [0u8; 1];
        if f.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(params)
    }

    /// In-memory serialization, mostly for determinism checks.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}
