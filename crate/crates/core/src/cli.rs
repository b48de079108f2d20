//! The `gsae` command line: one subcommand per pipeline stage, each
//! writing its outputs next to a `.runconfig` sidecar that reproduces it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{sidecar_path, RunConfig};
use crate::corpus::{chunk_sequences, ingest_corpus, split_sequences, synthetic_corpus};
use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::metrics::{
    activation_density, decoder_similarity, evaluate, metric_csv, pareto_sweep,
    similarity_bucket_derivatives, sorted_lines, summarize, summary_json_line, Bucket, SweepGrid,
};
use crate::perturb::{
    correlation_study, correlations_csv, derivatives_csv, directional_derivative_comparison,
};
use crate::sae::{calibrate_beta, init_params, SaeCheckpoint, SaeConfig, SaeTrainer, Variant};
use crate::steering::{case_study, default_alpha_grid, results_jsonl, steering_sweep, Context};
use crate::store::{capture, ActivationCache};
use crate::transformer::{train_lm, HookPoint, LmTrainConfig, ModelCheckpoint, ModelConfig, Site};

#[derive(Parser, Debug)]
#[command(
    name = "gsae",
    version,
    about = "Gradient-aware sparse autoencoders on a tiny byte-level GPT"
)]
pub struct Cli {
    /// key=value file supplying defaults; flags on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic English-like text corpus.
    SynthCorpus(SynthCorpusArgs),
    /// Train the byte-level language model.
    TrainLm(TrainLmArgs),
    /// Record activations and loss gradients at one hook point.
    Capture(CaptureArgs),
    /// Train one SAE on a cache.
    TrainSae(TrainSaeArgs),
    /// NMSE, added loss and dead fraction of an SAE on a held-out cache.
    Eval(EvalArgs),
    /// Train and evaluate a grid of SAEs.
    Sweep(SweepArgs),
    /// Steer with decoder directions and measure added probability.
    Steer(SteerArgs),
    /// Directional derivatives or perturbation correlation studies.
    Perturb(PerturbArgs),
    /// Per-latent firing frequencies.
    Density(DensityArgs),
    /// Nearest-neighbour decoder cosine similarities.
    Similarity(SimilarityArgs),
}

#[derive(Args, Debug)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, help = "minimum size in bytes [default: 5242880]")]
    bytes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    clip: Option<f32>,
    #[arg(
        long,
        help = "fraction of sequences held out, never trained on [default: 0.1]"
    )]
    eval_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CaptureArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, help = "resid_post | mlp_out")]
    site: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_records: Option<usize>,
    #[arg(long, help = "train | eval | all [default: train]")]
    split: Option<String>,
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainSaeArgs {
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, help = "relu_l1 | topk | gsae | e2e_topk")]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(
        long,
        help = "set beta so that beta * |W_dec^T g| averages this value at initialization"
    )]
    beta_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, help = "model checkpoint; required for e2e_topk")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    l1_coefficient: Option<f32>,
    #[arg(long)]
    dead_window: Option<u32>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, help = "held-out resid_post cache")]
    cache: Option<PathBuf>,
    #[arg(long, help = "sequences used for the added loss [default: all]")]
    max_sequences: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    eval_cache: Option<PathBuf>,
    #[arg(long, help = "comma-separated variants [default: topk,gsae]")]
    variants: Option<String>,
    #[arg(long, help = "comma-separated k values [default: 8,32]")]
    ks: Option<String>,
    #[arg(long, help = "comma-separated expansion factors [default: 20]")]
    expansions: Option<String>,
    #[arg(long, help = "comma-separated seeds [default: 0,1,2]")]
    seeds: Option<String>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(
        long,
        help = "set beta so that beta * |W_dec^T g| averages this value at initialization"
    )]
    beta_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_sequences: Option<usize>,
    #[arg(long, help = "directory for the trained SAE checkpoints")]
    sae_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, help = "text whose held-out sequences serve as contexts")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(
        long,
        help = "comma-separated alphas [default: 0.5,1,2,4,8 x median |x| / 10]"
    )]
    alpha_grid: Option<String>,
    #[arg(
        long,
        help = "number of alive latents to sample, or all [default: 200]"
    )]
    latents: Option<String>,
    #[arg(long)]
    contexts: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, help = "second SAE for a paired case study")]
    compare_sae: Option<PathBuf>,
    #[arg(long, help = "probe text selecting the case-study latent")]
    probe: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, help = "resid_post cache; comma-separated list for derivatives")]
    cache: Option<String>,
    #[arg(long, help = "derivatives | correlations")]
    mode: Option<String>,
    #[arg(
        long,
        help = "comma-separated norm bucket means [default: 0.01,0.03,0.1,0.3,1 x median |x|]"
    )]
    buckets: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DensityArgs {
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(
        long,
        help = "cache with gradients for per-bucket directional derivatives"
    )]
    cache: Option<PathBuf>,
    #[arg(long)]
    n_latents: Option<usize>,
    #[arg(long)]
    n_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: exit 2.
    Usage(String),
    /// Runtime failure: exit 1.
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type Run<T> = std::result::Result<T, Failure>;

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let mut cli = RunConfig {
        command: Some(name.to_string()),
        ..RunConfig::default()
    };
    for id in sub.ids() {
        let id = id.as_str();
        if id == "config" || sub.value_source(id) != Some(ValueSource::CommandLine) {
            continue;
        }
        if let Some(raw) = sub.get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            cli.set(id, vals.join(","));
        }
    }
    let config_path = sub
        .get_one::<PathBuf>("config")
        .or_else(|| matches.get_one::<PathBuf>("config"));
    let result = (|| -> Run<()> {
        let mut cfg = match config_path {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io(io) => {
                    Failure::Usage(format!("cannot read config {}: {io}", p.display()))
                }
                e => e.into(),
            })?,
            None => RunConfig::default(),
        };
        if let Some(c) = &cfg.command {
            if c != name {
                return Err(Failure::Usage(format!("config is for `{c}`, not `{name}`")));
            }
        }
        cfg.overlay(&cli);
        run(name, &mut cfg)
    })();
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `gsae {name} --help` for usage.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn usage<T>(r: Result<T>) -> Run<T> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

/// Settings named on the command line or in the config file; missing
/// required ones and unparsable values are usage errors.
struct Settings<'a>(&'a mut RunConfig);

impl Settings<'_> {
    fn req<T: std::str::FromStr>(&self, key: &str) -> Run<T>
    where
        T::Err: std::fmt::Display,
    {
        usage(self.0.require(key))
    }

    fn or<T: std::str::FromStr + std::fmt::Display>(&mut self, key: &str, d: T) -> Run<T>
    where
        T::Err: std::fmt::Display,
    {
        usage(self.0.get_or(key, d))
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Run<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        usage(self.0.get(key))
    }

    fn list<T: std::str::FromStr + std::fmt::Display>(&mut self, key: &str, d: &[T]) -> Run<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        usage(self.0.list_or(key, d))
    }

    /// Required input file, hashed into the config.
    fn input(&mut self, key: &str) -> Run<PathBuf> {
        let p: PathBuf = self.req(key)?;
        self.0.hash_input(key)?;
        Ok(p)
    }

    fn optional_input(&mut self, key: &str) -> Run<Option<PathBuf>> {
        match self.opt::<PathBuf>(key)? {
            Some(p) => {
                self.0.hash_input(key)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }
}

fn write_output(cfg: &RunConfig, path: &Path, bytes: &[u8]) -> Result<()> {
    write_bytes(path, bytes)?;
    cfg.save(&sidecar_path(path))
}

fn run(name: &str, cfg: &mut RunConfig) -> Run<()> {
    match name {
        "synth-corpus" => synth_corpus(cfg),
        "train-lm" => train_lm_cmd(cfg),
        "capture" => capture_cmd(cfg),
        "train-sae" => train_sae_cmd(cfg),
        "eval" => eval_cmd(cfg),
        "sweep" => sweep_cmd(cfg),
        "steer" => steer_cmd(cfg),
        "perturb" => perturb_cmd(cfg),
        "density" => density_cmd(cfg),
        "similarity" => similarity_cmd(cfg),
        other => Err(Failure::Usage(format!("unknown subcommand {other}"))),
    }
}

fn synth_corpus(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let out: PathBuf = s.req("out")?;
    let bytes = s.or("bytes", 5usize << 20)?;
    let seed = s.or("seed", 0u64)?;
    let text = synthetic_corpus(bytes, seed);
    write_output(cfg, &out, text.as_bytes())?;
    log::info!("wrote {} bytes to {}", text.len(), out.display());
    Ok(())
}

/// Train and held-out sequences of a corpus; the held-out tail is never
/// used for training.
fn split_corpus(
    path: &Path,
    context: usize,
    eval_fraction: f64,
) -> Run<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Failure::Usage(format!(
            "eval-fraction must be in [0, 1), got {eval_fraction}"
        )));
    }
    let tokens = ingest_corpus(path)?;
    Ok(split_sequences(
        chunk_sequences(&tokens, context),
        eval_fraction,
    ))
}

fn train_lm_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let corpus = s.input("corpus")?;
    let out: PathBuf = s.req("out")?;
    let desk = ModelConfig::desk();
    let d_model = s.or("d-model", desk.d_model)?;
    let heads = s.or("heads", desk.n_heads)?;
    if heads == 0 || d_model % heads != 0 {
        return Err(Failure::Usage(format!(
            "d-model {d_model} is not divisible by heads {heads}"
        )));
    }
    let seed = s.or("seed", 0u64)?;
    let config = ModelConfig {
        n_layers: s.or("layers", desk.n_layers)?,
        d_model,
        n_heads: heads,
        d_head: d_model / heads,
        vocab_size: 256,
        context_length: s.or("context", desk.context_length)?,
        seed,
    };
    usage(config.validate())?;
    let d = LmTrainConfig::default();
    let tc = LmTrainConfig {
        steps: s.or("steps", d.steps)?,
        batch_size: s.or("batch-size", d.batch_size)?,
        lr: s.or("lr", d.lr)?,
        warmup: s.or("warmup", d.warmup)?,
        clip: s.or("clip", d.clip)?,
        seed,
    };
    let eval_fraction = s.or("eval-fraction", 0.1)?;
    let (train, _) = split_corpus(&corpus, config.context_length, eval_fraction)?;
    let tokens: Vec<u32> = train.concat();
    if tokens.len() < 2 {
        return Err(Failure::Usage("corpus has too little training text".into()));
    }
    let (model, report) = train_lm(&tokens, config, &tc)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.tail_mean(20)) {
        log::info!("loss {first:.4} -> {last:.4} over {} steps", tc.steps);
    }
    write_output(cfg, &out, &model.to_bytes())?;
    Ok(())
}

fn capture_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let ckpt = s.input("checkpoint")?;
    let corpus = s.input("corpus")?;
    let out: PathBuf = s.req("out")?;
    let layer: usize = s.req("layer")?;
    let site: Site = usage(s.or("site", "resid_post".to_string())?.parse())?;
    let max_records = s.or("max-records", usize::MAX)?;
    let split = s.or("split", "train".to_string())?;
    let eval_fraction = s.or("eval-fraction", 0.1)?;
    let model = ModelCheckpoint::load(&ckpt)?;
    if layer >= model.config.n_layers {
        return Err(Failure::Usage(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    let (train, eval) = split_corpus(&corpus, model.config.context_length, eval_fraction)?;
    let hook = HookPoint { layer, site };
    let cache = match split.as_str() {
        "train" => capture(&model, hook, &train, max_records)?,
        "eval" => {
            crate::store::capture_many(&model, &[hook], &eval, max_records, train.len() as u32)?
                .remove(0)
        }
        "all" => capture(&model, hook, &[train, eval].concat(), max_records)?,
        other => {
            return Err(Failure::Usage(format!(
                "split must be train, eval or all, got {other}"
            )))
        }
    };
    log::info!("captured {} records at layer {layer} {site}", cache.len());
    write_output(cfg, &out, &cache.to_bytes())?;
    Ok(())
}

/// `--beta`, or the calibrated value when `--beta-scale` is given.
fn beta_setting(s: &mut Settings, d: usize, h: usize, cache: &ActivationCache) -> Run<f32> {
    match s.opt::<f64>("beta-scale")? {
        Some(_) if s.opt::<f32>("beta")?.is_some() => Err(Failure::Usage(
            "give either --beta or --beta-scale, not both".into(),
        )),
        Some(t) => {
            let probe = SaeConfig {
                h,
                ..SaeConfig::new(Variant::Gsae, d, 1, 1)
            };
            usage(probe.validate())?;
            let beta = calibrate_beta(
                &init_params(&probe),
                cache.gs(),
                BETA_CALIBRATION_RECORDS,
                t,
            )?;
            log::info!("calibrated beta = {beta:e}");
            Ok(beta)
        }
        None => s.or("beta", SaeConfig::new(Variant::Gsae, d, 1, 1).beta),
    }
}

const BETA_CALIBRATION_RECORDS: usize = 4096;

fn sae_config(s: &mut Settings, cache: &ActivationCache) -> Run<SaeConfig> {
    let d = cache.d_model;
    let variant: Variant = s.or("variant", Variant::Gsae)?;
    let base = SaeConfig::new(variant, d, 1, 1);
    let h = d * s.or("expansion", 20usize)?;
    let c = SaeConfig {
        h,
        k: s.or("k", 32usize)?,
        beta: beta_setting(s, d, h, cache)?,
        l1_coefficient: s.or("l1-coefficient", base.l1_coefficient)?,
        lr: s.or("lr", base.lr)?,
        batch_size: s.or("batch-size", base.batch_size)?,
        train_steps: s.or("steps", base.train_steps)?,
        seed: s.or("seed", base.seed)?,
        dead_window: s.or("dead-window", base.dead_window)?,
        ..base
    };
    usage(c.validate())?;
    Ok(c)
}

fn load_cache(path: &Path, model: Option<&ModelCheckpoint>) -> Result<ActivationCache> {
    let hash = model.map(ModelCheckpoint::content_hash);
    ActivationCache::load(path, hash.as_ref())
}

fn train_sae_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let cache_path = s.input("cache")?;
    let out: PathBuf = s.req("out")?;
    let ckpt = s.optional_input("checkpoint")?;
    let model = ckpt.as_deref().map(ModelCheckpoint::load).transpose()?;
    let cache = load_cache(&cache_path, model.as_ref())?;
    let config = sae_config(&mut s, &cache)?;
    let trainer = match (&model, config.variant) {
        (Some(m), _) => SaeTrainer::with_model(config, m, cache.hook.layer)?,
        (None, Variant::E2eTopK) => {
            return Err(Failure::Usage("e2e_topk requires --checkpoint".into()))
        }
        (None, _) => SaeTrainer::new(config)?,
    };
    let trained = trainer.fit(&cache, None, 0)?;
    if let Some(l) = trained.losses.last() {
        log::info!("final batch loss {l:.5}");
    }
    write_output(cfg, &out, &SaeCheckpoint::from(trained).to_bytes())?;
    Ok(())
}

fn eval_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let sae = SaeCheckpoint::load(&s.input("sae")?)?;
    let model = ModelCheckpoint::load(&s.input("checkpoint")?)?;
    let cache = load_cache(&s.input("cache")?, Some(&model))?;
    let max_sequences = s.or("max-sequences", usize::MAX)?;
    let out: PathBuf = s.req("out")?;
    let row = evaluate(&model, &sae, &cache, max_sequences)?;
    write_output(cfg, &out, metric_csv(&[row]).as_bytes())?;
    Ok(())
}

fn sweep_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let model = ModelCheckpoint::load(&s.input("checkpoint")?)?;
    let train = load_cache(&s.input("cache")?, Some(&model))?;
    let eval = load_cache(&s.input("eval-cache")?, Some(&model))?;
    let out: PathBuf = s.req("out")?;
    let grid = SweepGrid {
        variants: s.list("variants", &[Variant::TopK, Variant::Gsae])?,
        ks: s.list("ks", &[8usize, 32])?,
        expansions: s.list("expansions", &[20usize])?,
        seeds: s.list("seeds", &[0u64, 1, 2])?,
    };
    let b = SaeConfig::new(Variant::TopK, train.d_model, 1, 1);
    let h = train.d_model * grid.expansions.first().copied().unwrap_or(20);
    let base = SaeConfig {
        beta: beta_setting(&mut s, train.d_model, h, &train)?,
        train_steps: s.or("steps", b.train_steps)?,
        lr: s.or("lr", b.lr)?,
        batch_size: s.or("batch-size", b.batch_size)?,
        ..b
    };
    let max_sequences = s.or("max-sequences", usize::MAX)?;
    let sae_dir: Option<PathBuf> = s.opt("sae-dir")?;
    let outcome = pareto_sweep(&model, &train, &eval, &base, &grid, max_sequences)?;
    if let Some(dir) = sae_dir {
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        for ck in &outcome.saes {
            let c = &ck.config;
            ck.save(&dir.join(format!(
                "{}_k{}_h{}_seed{}.gsae",
                c.variant, c.k, c.h, c.seed
            )))?;
        }
    }
    for (label, e) in &outcome.failures {
        eprintln!("sweep cell {label} failed: {e}");
    }
    write_output(cfg, &out, metric_csv(&outcome.rows).as_bytes())?;
    Ok(())
}

fn steer_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let sae = SaeCheckpoint::load(&s.input("sae")?)?;
    let model = ModelCheckpoint::load(&s.input("checkpoint")?)?;
    let corpus = s.input("corpus")?;
    let layer: usize = s.req("layer")?;
    let out: PathBuf = s.req("out")?;
    let eval_fraction = s.or("eval-fraction", 0.1)?;
    let n_contexts = s.or("contexts", 10usize)?;
    let top_n = s.or("top-n", 10usize)?;
    let seed = s.or("seed", 0u64)?;
    let latents_spec = s.or("latents", "200".to_string())?;
    let compare = s.optional_input("compare-sae")?;
    let probe: Option<String> = s.opt("probe")?;
    if layer >= model.config.n_layers {
        return Err(Failure::Usage(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    if sae.params.d() != model.config.d_model {
        return Err(Failure::Usage(
            "SAE dimension does not match the model".into(),
        ));
    }
    let (_, eval) = split_corpus(&corpus, model.config.context_length, eval_fraction)?;
    let eval: Vec<Vec<u32>> = eval.into_iter().filter(|q| q.len() >= 2).collect();
    if eval.is_empty() || n_contexts == 0 {
        return Err(Failure::Usage("no held-out contexts available".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, eval.len(), n_contexts.min(eval.len()));
    let contexts = picks
        .iter()
        .map(|i| Context::from_tokens(&model, layer, &eval[i]))
        .collect::<Result<Vec<Context<f32>>>>()?;
    let alphas: Vec<f64> = match s.opt::<String>("alpha-grid")? {
        Some(_) => s.list("alpha-grid", &[])?,
        None => {
            let norms: Vec<f64> = contexts
                .iter()
                .flat_map(|c| {
                    let (len, d) = c.x.dims2().expect("2-D");
                    (0..len).map(move |r| {
                        c.x.data()[r * d..(r + 1) * d]
                            .iter()
                            .map(|&v| (v as f64).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                })
                .collect();
            let grid = default_alpha_grid(summarize("x", &norms).median);
            s.list("alpha-grid", &grid)?
        }
    };
    let alive: Vec<usize> = match &sae.tracker {
        Some(t) => t.alive().collect(),
        None => (0..sae.params.h()).collect(),
    };
    let latents: Vec<usize> = if latents_spec == "all" {
        alive
    } else {
        let n: usize = usage(latents_spec.parse().map_err(|_| {
            Error::Invalid(format!(
                "latents must be a number or all, got {latents_spec}"
            ))
        }))?;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(1);
        let mut l: Vec<usize> = sample(&mut r, alive.len(), n.min(alive.len()))
            .into_iter()
            .map(|j| alive[j])
            .collect();
        l.sort_unstable();
        l
    };
    let rows = steering_sweep(
        &model,
        layer,
        &sae.params,
        &latents,
        &alphas,
        &contexts,
        top_n,
    )?;
    write_output(cfg, &out, results_jsonl(&rows).as_bytes())?;
    if let (Some(other), Some(text)) = (compare, probe) {
        let sae_b = SaeCheckpoint::load(&other)?;
        let probe_tokens = crate::corpus::tokenize(text.as_bytes());
        let alpha = alphas[alphas.len() / 2];
        let cs = case_study(
            &model,
            layer,
            &sae.params,
            &sae_b.params,
            &probe_tokens,
            alpha,
            top_n,
            &contexts,
        )?;
        let mut p = out.as_os_str().to_os_string();
        p.push(".case.csv");
        write_output(cfg, Path::new(&p), cs.csv().as_bytes())?;
    }
    Ok(())
}

fn median_norm(cache: &ActivationCache) -> f64 {
    let norms: Vec<f64> = cache
        .iter()
        .map(|r| r.x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    summarize("x", &norms).median
}

fn perturb_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let ckpt = s.input("checkpoint")?;
    let out: PathBuf = s.req("out")?;
    let mode = s.or("mode", "derivatives".to_string())?;
    let samples = s.or("samples", 1000usize)?;
    let seed = s.or("seed", 0u64)?;
    let cache_list: String = s.req("cache")?;
    let model = ModelCheckpoint::load(&ckpt)?;
    let hash = model.content_hash();
    let mut caches = Vec::new();
    for (i, p) in cache_list
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .enumerate()
    {
        s.0.inputs.insert(
            format!("cache.{i}"),
            crate::config::hash_file(Path::new(p))?,
        );
        caches.push(ActivationCache::load(Path::new(p), Some(&hash))?);
    }
    if caches.is_empty() {
        return Err(Failure::Usage("no cache given".into()));
    }
    let csv = match mode.as_str() {
        "derivatives" => {
            let pool = s.or("pool-size", 2000usize)?;
            derivatives_csv(&directional_derivative_comparison(
                &caches, samples, pool, seed,
            )?)
        }
        "correlations" => {
            let m64 = model.cast::<f64>();
            let mut reports = Vec::new();
            let explicit = s.opt::<String>("buckets")?.is_some();
            for cache in &caches {
                let buckets: Vec<f64> = if explicit {
                    s.list("buckets", &[])?
                } else {
                    let m = median_norm(cache);
                    [0.01, 0.03, 0.1, 0.3, 1.0].iter().map(|f| f * m).collect()
                };
                reports.extend(correlation_study(&m64, cache, &buckets, samples, seed)?);
            }
            if !explicit && caches.len() == 1 {
                let b: Vec<String> = reports.iter().map(|r| r.bucket_mean.to_string()).collect();
                s.0.set("buckets", b.join(","));
            }
            correlations_csv(&reports)
        }
        other => {
            return Err(Failure::Usage(format!(
                "mode must be derivatives or correlations, got {other}"
            )))
        }
    };
    write_output(cfg, &out, csv.as_bytes())?;
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_os_string();
    p.push(".summary.jsonl");
    PathBuf::from(p)
}

fn density_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let sae = SaeCheckpoint::load(&s.input("sae")?)?;
    let cache = ActivationCache::load(&s.input("cache")?, None)?;
    let out: PathBuf = s.req("out")?;
    let prof = activation_density(&sae.params, &sae.config, &cache)?;
    write_output(cfg, &out, sorted_lines(&prof.frequencies).as_bytes())?;
    let sum = summarize(
        &format!("density {}", sae.config.variant),
        &prof.frequencies,
    );
    write_output(cfg, &summary_path(&out), summary_json_line(&sum).as_bytes())?;
    Ok(())
}

fn similarity_cmd(cfg: &mut RunConfig) -> Run<()> {
    let mut s = Settings(cfg);
    let sae = SaeCheckpoint::load(&s.input("sae")?)?;
    let out: PathBuf = s.req("out")?;
    let cache = s.optional_input("cache")?;
    let (n_latents, n_tokens, seed) = match cache {
        Some(_) => (
            s.or("n-latents", 30usize)?,
            s.or("n-tokens", 3000usize)?,
            s.or("seed", 0u64)?,
        ),
        None => (0, 0, 0),
    };
    let prof = decoder_similarity(&sae.params)?;
    if !prof.excluded.is_empty() {
        log::warn!("{} zero-norm decoder columns excluded", prof.excluded.len());
    }
    let values = prof.defined();
    write_output(cfg, &out, sorted_lines(&values).as_bytes())?;
    let sum = summarize(&format!("similarity {}", sae.config.variant), &values);
    write_output(cfg, &summary_path(&out), summary_json_line(&sum).as_bytes())?;
    if let Some(cache) = cache {
        let cache = ActivationCache::load(&cache, None)?;
        let mut csv = String::from("bucket,mean_abs_directional_derivative,n_latents,n_tokens\n");
        for b in Bucket::ALL {
            let r = similarity_bucket_derivatives(
                &sae.params,
                &prof,
                &cache,
                b,
                n_latents,
                n_tokens,
                seed,
            )?;
            csv.push_str(&format!(
                "{},{},{},{}\n",
                b.name(),
                r.mean_abs,
                r.n_latents,
                r.n_tokens
            ));
        }
        let mut p = out.as_os_str().to_os_string();
        p.push(".buckets.csv");
        write_output(cfg, Path::new(&p), csv.as_bytes())?;
    }
    Ok(())
}
