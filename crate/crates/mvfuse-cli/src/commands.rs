//! Command implementations.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mvfuse_core::encoder::EncoderParams;
use mvfuse_core::grad::{
    cached_gradients, cached_gradients_with_hooks, finite_difference_gradients,
    max_relative_error, relative_error, AuditHooks, ContrastiveBatch,
};
use mvfuse_core::multivec::{Aggregator, EmbeddingSet, PatternMask};
use mvfuse_core::synth::{
    ablation_suite, generate, oracle_encoder, AblationCell, PatternLabel, SynthConfig,
    SynthDataset,
};
use mvfuse_core::trainer::{
    batch_objective, train_run, TrainBatch, TrainConfig, Trainer,
};
use mvfuse_core::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_mix, pick, KvConfig};
use crate::manifest::RunManifest;
use crate::{AblateArgs, Cli, Cmd, EvalArgs, GenArgs, GradcheckArgs, TrainArgs, TrainKnobs};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let kv = KvConfig::load(cli.config.as_deref())?;
    let out_dir = cli
        .out_dir
        .or_else(|| std::env::var_os("MVFUSE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(&args, &kv, &out_dir),
        Cmd::Train(args) => cmd_train(&args, &kv, &out_dir),
        Cmd::Eval(args) => cmd_eval(&args, &kv, &out_dir),
        Cmd::Gradcheck(args) => cmd_gradcheck(&args, &kv, &out_dir),
        Cmd::Ablate(args) => cmd_ablate(&args, &kv, &out_dir),
    }
}

fn jval<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn resolve_synth(args: &GenArgs, kv: &KvConfig) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let mix = match (&args.mix, kv.get("mix")) {
        (Some(raw), _) => parse_mix(raw)?,
        (None, Some(raw)) => parse_mix(raw)?,
        (None, None) => d.pattern_mix,
    };
    Ok(SynthConfig {
        n_items: pick(args.items, kv.parse("items")?, d.n_items),
        n_eval: pick(args.eval_items, kv.parse("eval-items")?, d.n_eval),
        feature_dim: pick(args.feature_dim, kv.parse("feature-dim")?, d.feature_dim),
        n_aspects: pick(args.aspects, kv.parse("aspects")?, d.n_aspects),
        pattern_mix: mix,
        noise_sigma: pick(args.noise, kv.parse("noise")?, d.noise_sigma),
        near_dup_rate: pick(args.near_dup_rate, kv.parse("near-dup-rate")?, d.near_dup_rate),
        seed: pick(args.seed, kv.parse("seed")?, d.seed),
    })
}

fn resolve_mask(
    exclude: [bool; 4], // g2g, f2g, g2f, f2f exclusion switches
    kv: &KvConfig,
) -> Result<PatternMask> {
    let from_file = |key: &str| -> Result<bool> {
        Ok(kv.parse::<bool>(key)?.unwrap_or(false))
    };
    Ok(PatternMask {
        use_g2g: !(exclude[0] || from_file("mask-g2g")?),
        use_f2g: !(exclude[1] || from_file("mask-f2g")?),
        use_g2f: !(exclude[2] || from_file("mask-g2f")?),
        use_f2f: !(exclude[3] || from_file("mask-f2f")?),
    })
}

fn resolve_train(knobs: &TrainKnobs, kv: &KvConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let parse_enum = |flag: &Option<String>, key: &str| -> Result<Option<String>> {
        Ok(flag.clone().or_else(|| kv.get(key).map(str::to_string)))
    };
    let optimizer = match parse_enum(&knobs.optimizer, "optimizer")? {
        Some(s) => s.parse()?,
        None => d.optimizer,
    };
    let aggregator = match parse_enum(&knobs.aggregator, "aggregator")? {
        Some(s) => s.parse()?,
        None => d.aggregator,
    };
    let precision = match parse_enum(&knobs.precision, "precision")? {
        Some(s) => s.parse()?,
        None => d.precision,
    };
    let mask = resolve_mask(
        [knobs.mask_g2g, knobs.mask_f2g, knobs.mask_g2f, knobs.mask_f2f],
        kv,
    )?;
    let cfg = TrainConfig {
        tau: pick(knobs.tau, kv.parse("tau")?, d.tau),
        alpha: pick(knobs.alpha, kv.parse("alpha")?, d.alpha),
        n_fine: pick(knobs.n_fine, kv.parse("n-fine")?, d.n_fine),
        m_capacity: pick(knobs.m_capacity, kv.parse("m")?, d.m_capacity),
        batch_size: pick(knobs.batch, kv.parse("batch")?, d.batch_size),
        sub_batch_size: pick(knobs.sub_batch, kv.parse("sub-batch")?, d.sub_batch_size),
        steps: pick(knobs.steps, kv.parse("steps")?, d.steps),
        lr: pick(knobs.lr, kv.parse("lr")?, d.lr),
        optimizer,
        aggregator,
        mask,
        seed: pick(knobs.seed, kv.parse("seed")?, d.seed),
        precision,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(args: &GenArgs, kv: &KvConfig, out_dir: &Path) -> Result<ExitCode> {
    let cfg = resolve_synth(args, kv)?;
    cfg.validate()?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir.join("synth.dat"));
    let mut manifest = RunManifest::begin(
        "gen",
        json!({ "synth": jval(&cfg)?, "out": path.display().to_string() }),
    );
    let data = generate(&cfg)?;
    data.save(&path)?;
    manifest.artifact("dataset", &path);
    manifest.finish(&out_dir.join("gen.manifest.json"))?;
    println!(
        "wrote {} train + {} eval pairs ({} features, {} aspects) to {}",
        data.train.len(),
        data.eval.len(),
        cfg.feature_dim,
        cfg.n_aspects,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: &TrainArgs, kv: &KvConfig, out_dir: &Path) -> Result<ExitCode> {
    let data = SynthDataset::load(&args.data)?;
    let cfg = resolve_train(&args.knobs, kv)?;
    let checkpoint_every = pick(args.checkpoint_every, kv.parse("checkpoint-every")?, 0);
    let metrics_path = out_dir.join("train_metrics.jsonl");
    let ckpt_path = out_dir.join("final.ckpt");
    let mut manifest = RunManifest::begin(
        "train",
        json!({
            "train": jval(&cfg)?,
            "dataset": args.data.display().to_string(),
            "checkpoint_every": checkpoint_every,
        }),
    );

    let pairs = data.train_pairs();
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let result = train_run(&cfg, data.block_dim(), &pairs, &mut |report, params| {
        let line = serde_json::to_string(report).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        if checkpoint_every > 0 && (report.step + 1) % checkpoint_every == 0 {
            let p = out_dir.join(format!("step{:05}.ckpt", report.step + 1));
            params.save(&p)?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    result.params.save(&ckpt_path)?;

    manifest.artifact("metrics", &metrics_path);
    manifest.artifact("checkpoint", &ckpt_path);
    manifest.finish(&out_dir.join("train.manifest.json"))?;
    match result.reports.last() {
        Some(last) => println!(
            "trained {} steps, final loss {:.6}, checkpoint {}",
            result.reports.len(),
            last.loss,
            ckpt_path.display()
        ),
        None => println!("0 steps requested, wrote initialization to {}", ckpt_path.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs, kv: &KvConfig, out_dir: &Path) -> Result<ExitCode> {
    let data = SynthDataset::load(&args.data)?;
    let aggregator: Aggregator = match args.aggregator.clone().or_else(|| kv.get("aggregator").map(str::to_string)) {
        Some(s) => s.parse()?,
        None => Aggregator::Logsumexp,
    };
    let mask = resolve_mask(
        [args.mask_g2g, args.mask_f2g, args.mask_g2f, args.mask_f2f],
        kv,
    )?;
    if !mask.any_active() {
        return Err(Error::Config("all four pattern families are masked".into()));
    }
    if aggregator == Aggregator::MeanMax && !mask.is_full() {
        return Err(Error::Config(
            "mean-max aggregation scores the full grid and cannot honor a pattern mask".into(),
        ));
    }
    let (params, source) = if args.oracle {
        (oracle_encoder(&data.config), "oracle".to_string())
    } else {
        let path = args.ckpt.as_ref().ok_or_else(|| {
            Error::Config("eval needs --ckpt <file> or --oracle".into())
        })?;
        (EncoderParams::load(path)?, path.display().to_string())
    };
    if data.eval.is_empty() {
        return Err(Error::Precondition("dataset has no eval pairs".into()));
    }

    let manifest = RunManifest::begin(
        "eval",
        json!({
            "dataset": args.data.display().to_string(),
            "encoder": source,
            "aggregator": aggregator.to_string(),
            "mask": jval(&mask)?,
        }),
    );
    let report = mvfuse_core::synth::precision_at_1(&params, &data.eval, aggregator, mask)?;
    let mut per = serde_json::Map::new();
    for (label, count) in PatternLabel::ALL.iter().zip(report.per_pattern.iter()) {
        per.insert(
            label.name().to_string(),
            json!({ "hits": count.hits, "total": count.total, "rate": count.rate() }),
        );
    }
    let payload = json!({
        "overall": report.overall,
        "pool": report.pool,
        "per_pattern": per,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&payload).map_err(|e| Error::Format(e.to_string()))?
    );
    manifest.finish(&out_dir.join("eval.manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

/// Random embedding-level batch for the oracle-equivalence audit:
/// up to 7 negatives, up to 4 fine rows, up to 16 dims, random mask, alpha 0.
fn random_audit_batch(rng: &mut ChaCha8Rng) -> ContrastiveBatch {
    let n_neg = rng.random_range(0..8);
    let n_fine = rng.random_range(0..=4);
    let dim = rng.random_range(2..=16);
    // keeps dot products within about [-1, 1]: together with the tau floor
    // below this caps the loss magnitude, and with it the roundoff that
    // central differences at step 1e-6 amplify by 5e5
    let scale = 1.0 / (dim as f64).sqrt();
    let set = |rng: &mut ChaCha8Rng| {
        EmbeddingSet::new(Array2::from_shape_fn((n_fine + 1, dim), |_| {
            rng.random_range(-scale..scale)
        }))
        .expect("finite random rows")
    };
    let bits = rng.random_range(1u8..16);
    let mut mask = PatternMask {
        use_g2g: bits & 1 != 0,
        use_f2g: bits & 2 != 0,
        use_g2f: bits & 4 != 0,
        use_f2f: bits & 8 != 0,
    };
    if n_fine == 0 {
        // the fine families are empty; keep at least one live term
        mask.use_g2g = true;
    }
    ContrastiveBatch {
        query: set(rng),
        positive: set(rng),
        negatives: (0..n_neg).map(|_| set(rng)).collect(),
        // tau below ~0.1 pushes softmax curvature and loss magnitude past
        // what central differences at step 1e-6 resolve cleanly
        tau: rng.random_range(0.1..0.3),
        alpha: 0.0,
        mask,
    }
}

fn cmd_gradcheck(args: &GradcheckArgs, kv: &KvConfig, out_dir: &Path) -> Result<ExitCode> {
    let trials = pick(args.trials, kv.parse("trials")?, 100);
    let seed0: u64 = pick(args.seed, kv.parse("seed")?, 0);
    let manifest = RunManifest::begin(
        "gradcheck",
        json!({ "trials": trials, "seed": seed0, "corrupt": args.corrupt }),
    );

    // check 1: cached embedding gradients vs central finite differences
    let tol_cached = 1e-5;
    let mut worst_cached = (0.0f64, seed0);
    for t in 0..trials {
        let seed = seed0 + t as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_audit_batch(&mut rng);
        let (analytic, _) = if args.corrupt {
            cached_gradients_with_hooks(&batch, AuditHooks { negate_positive_term: true })?
        } else {
            cached_gradients(&batch)?
        };
        let fd = finite_difference_gradients(&batch, 1e-6)?;
        let err = max_relative_error(&analytic, &fd);
        if err > worst_cached.0 {
            worst_cached = (err, seed);
        }
    }
    println!(
        "check cached-vs-fd: trials {trials}, max relative error {:.3e}",
        worst_cached.0
    );

    // check 2: full chain (cached upstream x surrogate backward) vs finite
    // differences over every encoder parameter
    let tol_chain = 1e-4;
    let mut worst_chain = (0.0f64, seed0);
    for t in 0..trials {
        let seed = seed0 ^ 0x5eed ^ ((t as u64) << 17);
        let err = chain_trial(seed)?;
        if err > worst_chain.0 {
            worst_chain = (err, seed);
        }
    }
    println!(
        "check chain-vs-fd: trials {trials}, max relative error {:.3e}",
        worst_chain.0
    );

    manifest.finish(&out_dir.join("gradcheck.manifest.json"))?;
    let mut failed = false;
    if worst_cached.0 > tol_cached {
        eprintln!(
            "cached-vs-fd exceeded tolerance {tol_cached:.1e}: {:.3e} at seed {} (rerun with --seed {})",
            worst_cached.0, worst_cached.1, worst_cached.1
        );
        failed = true;
    }
    if worst_chain.0 > tol_chain {
        eprintln!(
            "chain-vs-fd exceeded tolerance {tol_chain:.1e}: {:.3e} at seed {}",
            worst_chain.0, worst_chain.1
        );
        failed = true;
    }
    Ok(if failed { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

/// Draws one tiny-encoder chain instance. Instances whose raw
/// (pre-normalization) row norms pass near zero are redrawn: the
/// unit-normalization map is violently curved there, so central differences
/// measure curvature noise instead of the gradient. The guard keeps the
/// audit at points where a step of 1e-6 resolves the derivative.
fn chain_instance(seed: u64) -> Result<(TrainConfig, EncoderParams<f64>, TrainBatch)> {
    const NORM_FLOOR: f64 = 0.05;
    let mut last = None;
    for attempt in 0..16u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9e3779b97f4a7c15)));
        let n_fine = rng.random_range(0..=2);
        let cfg = TrainConfig {
            tau: rng.random_range(0.1..0.3),
            alpha: 0.0,
            n_fine,
            m_capacity: rng.random_range(1..=2),
            batch_size: 4,
            sub_batch_size: 2,
            steps: 1,
            lr: 0.0,
            aggregator: Aggregator::Logsumexp,
            mask: PatternMask {
                use_g2g: true, // keeps at least one term alive even with no fine rows
                use_f2g: rng.random_range(0..2) == 1,
                use_g2f: rng.random_range(0..2) == 1,
                use_f2f: rng.random_range(0..2) == 1,
            },
            seed,
            ..TrainConfig::default()
        };
        let f_in = rng.random_range(2..=6);
        let dim = rng.random_range(2..=8);
        let dims = cfg.encoder_dims(f_in, dim);
        let params = EncoderParams::<f64>::init(seed.wrapping_add(attempt), dims, true);
        let bsz = rng.random_range(2..=4);
        let mut item = || {
            mvfuse_core::encoder::ItemFeatures::from_vec(
                (0..f_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        };
        let batch = TrainBatch {
            queries: (0..bsz).map(|_| item()).collect(),
            positives: (0..bsz).map(|_| item()).collect(),
        };
        let mut raw = params.clone();
        raw.normalize = false;
        let min_norm = batch
            .queries
            .iter()
            .chain(batch.positives.iter())
            .map(|it| -> Result<f64> {
                let e = mvfuse_core::encoder::encode(it, &raw)?;
                Ok((0..=n_fine)
                    .map(|k| e.row(k).dot(&e.row(k)).sqrt())
                    .fold(f64::INFINITY, f64::min))
            })
            .try_fold(f64::INFINITY, |acc, n| n.map(|n| acc.min(n)))?;
        if min_norm >= NORM_FLOOR {
            return Ok((cfg, params, batch));
        }
        last = Some((cfg, params, batch));
    }
    Ok(last.expect("at least one attempt"))
}

/// One chain-audit trial: full finite-difference sweep over the parameters.
fn chain_trial(seed: u64) -> Result<f64> {
    let (cfg, params, batch) = chain_instance(seed)?;
    let trainer = Trainer::new(cfg.clone(), params.clone())?;
    let (grads, _) = trainer.compute_batch_gradient(&batch)?;

    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let flat = grads.tensors();
    for (ti, tensor) in flat.iter().enumerate() {
        for e in 0..tensor.len() {
            let mut hi = params.clone();
            hi.tensors_mut()[ti][e] += step;
            let mut lo = params.clone();
            lo.tensors_mut()[ti][e] -= step;
            let fd = (batch_objective(&hi, &batch, &cfg)? - batch_objective(&lo, &batch, &cfg)?)
                / (2.0 * step);
            worst = worst.max(relative_error(fd, tensor[e]));
        }
    }
    Ok(worst)
}

fn format_cell(cell: &AblationCell) -> String {
    let rate = |i: usize| {
        cell.per_pattern[i]
            .rate()
            .map_or_else(|| "-".to_string(), |r| format!("{r:.4}"))
    };
    format!(
        "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\t{}\t{:.6}",
        cell.aggregator,
        cell.mask_label,
        cell.alpha,
        cell.p_at_1,
        rate(0),
        rate(1),
        rate(2),
        rate(3),
        cell.final_loss
    )
}

fn cmd_ablate(args: &AblateArgs, kv: &KvConfig, out_dir: &Path) -> Result<ExitCode> {
    let data = SynthDataset::load(&args.data)?;
    let base = resolve_train(&args.knobs, kv)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| out_dir.join("ablation.tsv"));
    let mut manifest = RunManifest::begin(
        "ablate",
        json!({
            "train": jval(&base)?,
            "dataset": args.data.display().to_string(),
            "out": path.display().to_string(),
        }),
    );

    let cells = ablation_suite(&data, &base)?;
    let mut table = String::from(
        "aggregator\tmask\talpha\tp_at_1\tg2g\tf2g\tg2f\tf2f\tfinal_loss\n",
    );
    for cell in &cells {
        table.push_str(&format_cell(cell));
        table.push('\n');
    }
    std::fs::write(&path, &table)?;
    print!("{table}");
    manifest.artifact("table", &path);
    manifest.finish(&out_dir.join("ablate.manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}



