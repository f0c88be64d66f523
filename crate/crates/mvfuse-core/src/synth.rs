//! Synthetic retrieval benchmark with planted perceptual patterns.
//!
//! Every item's feature vector is a concatenation of `K+1` equal blocks:
//! block 0 is the item's "global topic", blocks `1..=K` are aspect slots.
//! A (query, positive) pair matches through exactly one planted pattern:
//!
//! - `g2g`: the two global blocks share a topic;
//! - `f2g`: one query aspect block shares the target's global topic;
//! - `g2f`: the query's global block shares one target aspect block;
//! - `f2f`: the same aspect slot on both sides shares a topic.
//!
//! All other blocks are independent noise, so no single similarity family
//! can solve a mixed dataset. Shared blocks are `topic + noise_sigma * eps`
//! per side; at `noise_sigma = 0` they are exactly equal.
//!
//! `near_dup_rate` draws that fraction of pair topics from a small codebook
//! of prototypes (lightly jittered), which floods batches with near-duplicate
//! negatives for hardness-sensitivity experiments.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, EncoderDims, EncoderParams, ItemFeatures};
use crate::error::{Error, Result};
use crate::multivec::{similarity_breakdown, Aggregator, PatternMask};
use crate::parallel;
use crate::trainer::{train_run, TrainConfig};

/// Which planted pattern links a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternLabel {
    G2g = 0,
    F2g = 1,
    G2f = 2,
    F2f = 3,
}

impl PatternLabel {
    pub const ALL: [PatternLabel; 4] = [
        PatternLabel::G2g,
        PatternLabel::F2g,
        PatternLabel::G2f,
        PatternLabel::F2f,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternLabel::G2g => "g2g",
            PatternLabel::F2g => "f2g",
            PatternLabel::G2f => "g2f",
            PatternLabel::F2f => "f2f",
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => PatternLabel::G2g,
            1 => PatternLabel::F2g,
            2 => PatternLabel::G2f,
            3 => PatternLabel::F2f,
            other => return Err(Error::Format(format!("unknown pattern label byte {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Training pairs.
    pub n_items: usize,
    /// Held-out evaluation pairs (the retrieval pool).
    pub n_eval: usize,
    /// Total feature width; must be divisible by `n_aspects + 1`.
    pub feature_dim: usize,
    /// Aspect slots per item.
    pub n_aspects: usize,
    /// Proportions of g2g/f2g/g2f/f2f pairs; must sum to 1.
    pub pattern_mix: [f64; 4],
    pub noise_sigma: f64,
    /// Fraction of pairs whose topic comes from a small prototype codebook.
    pub near_dup_rate: f64,
    pub seed: u64,
}

/// Prototype codebook size and jitter used by `near_dup_rate` draws. The
/// jitter keeps same-prototype topics hard but winnable: far closer to each
/// other than independent topics, yet separated by a margin an encoder can
/// learn to resolve (a zero-width cluster would plant false negatives whose
/// contrast term no amount of training removes).
const NEAR_DUP_PROTOTYPES: usize = 8;
const NEAR_DUP_JITTER: f64 = 0.25;

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 512,
            n_eval: 128,
            feature_dim: 40,
            n_aspects: 4,
            pattern_mix: [0.25, 0.25, 0.25, 0.25],
            noise_sigma: 0.1,
            near_dup_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 2 {
            return Err(Error::Config("need at least 2 items".into()));
        }
        if self.n_aspects < 1 {
            return Err(Error::Config("need at least 1 aspect slot".into()));
        }
        if self.feature_dim == 0 || self.feature_dim % (self.n_aspects + 1) != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} must be a positive multiple of n_aspects+1 = {}",
                self.feature_dim,
                self.n_aspects + 1
            )));
        }
        if self.pattern_mix.iter().any(|&m| !(0.0..=1.0).contains(&m) || !m.is_finite()) {
            return Err(Error::Config("pattern_mix entries must lie in [0, 1]".into()));
        }
        let sum: f64 = self.pattern_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "pattern_mix sums to {sum}, expected 1"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.near_dup_rate) {
            return Err(Error::Config("near_dup_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Width of one feature block; also the natural embedding row width.
    pub fn block_dim(&self) -> usize {
        self.feature_dim / (self.n_aspects + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub query: ItemFeatures<f64>,
    pub positive: ItemFeatures<f64>,
    pub label: PatternLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub train: Vec<SynthPair>,
    pub eval: Vec<SynthPair>,
}

fn draw_label(rng: &mut ChaCha8Rng, mix: &[f64; 4]) -> PatternLabel {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &m) in mix.iter().enumerate() {
        acc += m;
        if u < acc {
            return PatternLabel::ALL[i];
        }
    }
    // numerical tail: the last label with nonzero mass
    *PatternLabel::ALL
        .iter()
        .zip(mix.iter())
        .rev()
        .find(|(_, &m)| m > 0.0)
        .map(|(l, _)| l)
        .expect("mix sums to 1")
}

fn standard_block(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Deterministic dataset generation.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let d = cfg.block_dim();
    let blocks = cfg.n_aspects + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let codebook: Vec<Vec<f64>> = (0..NEAR_DUP_PROTOTYPES)
        .map(|_| standard_block(&mut rng, d))
        .collect();

    let make_pair = |rng: &mut ChaCha8Rng| -> SynthPair {
        let label = draw_label(rng, &cfg.pattern_mix);
        let topic: Vec<f64> = if rng.random_range(0.0..1.0) < cfg.near_dup_rate {
            let proto = &codebook[rng.random_range(0..NEAR_DUP_PROTOTYPES)];
            proto
                .iter()
                .map(|&v| v + NEAR_DUP_JITTER * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            standard_block(rng, d)
        };
        // every non-planted block is independent noise
        let mut q: Vec<f64> = (0..blocks).flat_map(|_| standard_block(rng, d)).collect();
        let mut t: Vec<f64> = (0..blocks).flat_map(|_| standard_block(rng, d)).collect();
        let aspect = 1 + rng.random_range(0..cfg.n_aspects);
        let (q_block, t_block) = match label {
            PatternLabel::G2g => (0, 0),
            PatternLabel::F2g => (aspect, 0),
            PatternLabel::G2f => (0, aspect),
            PatternLabel::F2f => (aspect, aspect),
        };
        for j in 0..d {
            let eps_q: f64 = rng.sample(StandardNormal);
            let eps_t: f64 = rng.sample(StandardNormal);
            q[q_block * d + j] = topic[j] + cfg.noise_sigma * eps_q;
            t[t_block * d + j] = topic[j] + cfg.noise_sigma * eps_t;
        }
        SynthPair {
            query: ItemFeatures::from_vec(q),
            positive: ItemFeatures::from_vec(t),
            label,
        }
    };

    let train: Vec<SynthPair> = (0..cfg.n_items).map(|_| make_pair(&mut rng)).collect();
    let eval: Vec<SynthPair> = (0..cfg.n_eval).map(|_| make_pair(&mut rng)).collect();
    Ok(SynthDataset {
        config: cfg.clone(),
        train,
        eval,
    })
}

impl SynthDataset {
    pub fn block_dim(&self) -> usize {
        self.config.block_dim()
    }

    /// Training pairs as plain feature tuples for the trainer.
    pub fn train_pairs(&self) -> Vec<(ItemFeatures<f64>, ItemFeatures<f64>)> {
        self.train
            .iter()
            .map(|p| (p.query.clone(), p.positive.clone()))
            .collect()
    }
}

/// A reference encoder that routes feature block `k` straight into embedding
/// row `k` (identity trunk through tanh, block-selector heads, normalized
/// rows). Matched blocks therefore produce identical rows, which makes the
/// planted positive score the maximum possible similarity; useful as a
/// soundness oracle on noiseless data and as a fixed non-learned baseline.
pub fn oracle_encoder(cfg: &SynthConfig) -> EncoderParams<f64> {
    let d = cfg.block_dim();
    let dims = EncoderDims {
        f_in: cfg.feature_dim,
        hidden: cfg.feature_dim,
        n_fine: cfg.n_aspects,
        dim: d,
    };
    let mut params = EncoderParams {
        trunk_w: ndarray::Array2::zeros((dims.hidden, dims.f_in)),
        trunk_b: Array1::zeros(dims.hidden),
        heads_w: (0..dims.n_heads())
            .map(|_| ndarray::Array2::zeros((d, dims.hidden)))
            .collect(),
        heads_b: (0..dims.n_heads()).map(|_| Array1::zeros(d)).collect(),
        normalize: true,
    };
    for i in 0..dims.hidden {
        params.trunk_w[(i, i)] = 1.0;
    }
    for k in 0..dims.n_heads() {
        for j in 0..d {
            params.heads_w[k][(j, k * d + j)] = 1.0;
        }
    }
    params
}

/// Per-pattern hit counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCount {
    pub hits: usize,
    pub total: usize,
}

impl PatternCount {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub pool: usize,
    /// Indexed by `PatternLabel as usize`.
    pub per_pattern: [PatternCount; 4],
}

/// Precision@1 over a pool of pairs: each query ranks every positive in the
/// pool, scoring a hit when its own positive comes first. Score ties break
/// toward the lower target index. Queries are scored in parallel; the final
/// reduction runs in ascending query order.
pub fn precision_at_1(
    params: &EncoderParams<f64>,
    pool: &[SynthPair],
    aggregator: Aggregator,
    mask: PatternMask,
) -> Result<EvalReport> {
    if pool.is_empty() {
        return Err(Error::Precondition("empty evaluation pool".into()));
    }
    let queries: Vec<ItemFeatures<f64>> = pool.iter().map(|p| p.query.clone()).collect();
    let targets: Vec<ItemFeatures<f64>> = pool.iter().map(|p| p.positive.clone()).collect();
    let emb_q = encode_batch(&queries, params)?;
    let emb_t = encode_batch(&targets, params)?;

    let hits: Vec<Result<bool>> = parallel::map_indexed(pool.len(), |i| {
        let own = similarity_breakdown(&emb_q[i], &emb_t[i], mask, aggregator)?.s_final;
        for (j, t) in emb_t.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = similarity_breakdown(&emb_q[i], t, mask, aggregator)?.s_final;
            if s > own || (s == own && j < i) {
                return Ok(false);
            }
        }
        Ok(true)
    });

    let mut per_pattern = [PatternCount::default(); 4];
    let mut total_hits = 0usize;
    for (pair, hit) in pool.iter().zip(hits.into_iter()) {
        let hit = hit?;
        let slot = &mut per_pattern[pair.label as usize];
        slot.total += 1;
        if hit {
            slot.hits += 1;
            total_hits += 1;
        }
    }
    Ok(EvalReport {
        overall: total_hits as f64 / pool.len() as f64,
        pool: pool.len(),
        per_pattern,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub aggregator: Aggregator,
    pub mask_label: String,
    pub alpha: f64,
    pub p_at_1: f64,
    pub per_pattern: [PatternCount; 4],
    pub final_loss: f64,
}

/// The mask variants the ablation sweeps, in order.
fn ablation_masks() -> [(PatternMask, &'static str); 4] {
    let full = PatternMask::FULL;
    let no = |f: fn(&mut PatternMask)| {
        let mut m = full;
        f(&mut m);
        m
    };
    [
        (full, "full"),
        (no(|m| m.use_f2g = false), "no-f2g"),
        (no(|m| m.use_g2f = false), "no-g2f"),
        (no(|m| m.use_f2f = false), "no-f2f"),
    ]
}

/// Trains and evaluates the aggregator/mask/alpha grid with matched seeds
/// and budgets. Cell order is fixed and documented: aggregators in
/// {logsumexp, max, mean-max}, within each the masks {full, no-f2g, no-g2f,
/// no-f2f}, within each alpha {base, 0}; mean-max only supports the full
/// mask, so its masked cells are skipped, leaving 8 + 8 + 2 = 18 rows.
pub fn ablation_suite(data: &SynthDataset, base: &TrainConfig) -> Result<Vec<AblationCell>> {
    base.validate()?;
    let mut grid: Vec<(Aggregator, PatternMask, String, f64)> = Vec::new();
    for agg in [Aggregator::Logsumexp, Aggregator::Max, Aggregator::MeanMax] {
        for (mask, label) in ablation_masks() {
            if agg == Aggregator::MeanMax && !mask.is_full() {
                continue;
            }
            for alpha in [base.alpha, 0.0] {
                grid.push((agg, mask, label.to_string(), alpha));
            }
        }
    }

    let pairs = data.train_pairs();
    let dim = data.block_dim();
    let cells = parallel::map_slice(&grid, |(agg, mask, label, alpha)| -> Result<AblationCell> {
        let mut cfg = base.clone();
        cfg.aggregator = *agg;
        cfg.mask = *mask;
        cfg.alpha = *alpha;
        let run = train_run(&cfg, dim, &pairs, &mut |_, _| Ok(()))?;
        let report = precision_at_1(&run.params, &data.eval, *agg, *mask)?;
        Ok(AblationCell {
            aggregator: *agg,
            mask_label: label.clone(),
            alpha: *alpha,
            p_at_1: report.overall,
            per_pattern: report.per_pattern,
            final_loss: run.reports.last().map_or(f64::NAN, |r| r.loss),
        })
    });
    cells.into_iter().collect()
}

const DATASET_MAGIC: &[u8; 8] = b"MVFDATA\0";
const DATASET_VERSION: u32 = 1;

// Layout: magic, version, n_train, n_eval, feature_dim, n_aspects (u32 LE),
// pattern_mix (4 x f64 LE), noise_sigma, near_dup_rate (f64 LE), seed
// (u64 LE), then every pair as query features, positive features (f64 LE
// each) and one label byte; train pairs first, then eval pairs.
impl SynthDataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let cfg = &self.config;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [self.train.len(), self.eval.len(), cfg.feature_dim, cfg.n_aspects] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for m in cfg.pattern_mix {
            w.write_all(&m.to_le_bytes())?;
        }
        w.write_all(&cfg.noise_sigma.to_le_bytes())?;
        w.write_all(&cfg.near_dup_rate.to_le_bytes())?;
        w.write_all(&cfg.seed.to_le_bytes())?;
        for pair in self.train.iter().chain(self.eval.iter()) {
            for v in pair.query.x.iter().chain(pair.positive.x.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[pair.label as u8])?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n_train = read_u32(r)? as usize;
        let n_eval = read_u32(r)? as usize;
        let feature_dim = read_u32(r)? as usize;
        let n_aspects = read_u32(r)? as usize;

        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let mut pattern_mix = [0.0; 4];
        for m in pattern_mix.iter_mut() {
            *m = read_f64(r)?;
        }
        let noise_sigma = read_f64(r)?;
        let near_dup_rate = read_f64(r)?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);

        let config = SynthConfig {
            n_items: n_train,
            n_eval,
            feature_dim,
            n_aspects,
            pattern_mix,
            noise_sigma,
            near_dup_rate,
            seed,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;

        let mut read_pairs = |count: usize| -> Result<Vec<SynthPair>> {
            (0..count)
                .map(|_| {
                    let mut buf = vec![0u8; feature_dim * 16];
                    r.read_exact(&mut buf)?;
                    let vals: Vec<f64> = buf
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect();
                    let mut label = [0u8; 1];
                    r.read_exact(&mut label)?;
                    Ok(SynthPair {
                        query: ItemFeatures::from_vec(vals[..feature_dim].to_vec()),
                        positive: ItemFeatures::from_vec(vals[feature_dim..].to_vec()),
                        label: PatternLabel::from_byte(label[0])?,
                    })
                })
                .collect()
        };
        let train = read_pairs(n_train)?;
        let eval = read_pairs(n_eval)?;
        Ok(Self { config, train, eval })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let data = Self::read_from(&mut f)?;
        let mut probe = [0u8; 1];
        if f.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after dataset payload".into()));
        }
        Ok(data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}
