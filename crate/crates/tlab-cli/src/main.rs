//! `tlab` — command-line front end for the transducer lab: synthetic data
//! generation, training, beam-search decoding, benchmarking, and oracle
//! verification.
//!
//! Every subcommand is deterministic for fixed seeds; the only
//! machine-dependent outputs are wall-time and RTF columns. Exit codes:
//! 0 success, 2 configuration/usage error, 3 numeric failure, 4 failed
//! verification suite.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use tlab::bench::{expansion_csv, expansion_stats, sweep, sweep_csv, SweepSpec};
use tlab::dataset::Dataset;
use tlab::losses::LossConfig;
use tlab::scorer::{load_parameters, save_parameters, ModelConfig, UtteranceScorer};
use tlab::search::{decode, BeamConfig, DecodeReport, Fusion, RecurrentLm, Strategy};
use tlab::trainer::{gen_synthetic, train, OptimizerKind, SyntheticTask, TrainConfig};
use tlab::verify;
use tlab::{Error, Result};

use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "tlab",
    version,
    about = "Sequence-transduction lab: train, decode, and benchmark transducer models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Decode a dataset with a trained model.
    Decode(DecodeArgs),
    /// Run accuracy-vs-speed sweeps and the expansion table.
    Bench(BenchArgs),
    /// Run a self-verification suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task family: copy | repeat2.
    #[arg(long)]
    task: String,
    /// Utterance count.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Label vocabulary size (blank excluded).
    #[arg(long, default_value_t = 4)]
    vocab: u32,
    /// Fewest source symbols per utterance.
    #[arg(long, default_value_t = 1)]
    min_symbols: usize,
    /// Most source symbols per utterance.
    #[arg(long, default_value_t = 6)]
    max_symbols: usize,
    /// Standard deviation of additive feature noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output parameter file.
    #[arg(long)]
    out: PathBuf,
    /// Output per-epoch log CSV (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Run-configuration file ([model] and [train] sections apply).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Auxiliary-loss spec: `none`, or comma-separated weights like
    /// `ctc=0.5,lm=0.4` (keys: trans, ctc, aux, kl, lm).
    #[arg(long)]
    aux: Option<String>,
    /// Label-smoothing mass for the LM loss.
    #[arg(long)]
    lm_smoothing: Option<f64>,
    /// Optimizer: adam | sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Momentum for sgd.
    #[arg(long)]
    momentum: Option<f64>,
    /// Gradient-norm ceiling, or `none` to disable clipping.
    #[arg(long)]
    clip_norm: Option<String>,
    /// Holdout fraction for accuracy tracking.
    #[arg(long)]
    holdout_frac: Option<f64>,
    /// Stop early at this holdout accuracy, or `none`.
    #[arg(long)]
    target_accuracy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-utterance passes.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Trained parameter file.
    #[arg(long)]
    model: PathBuf,
    /// Output hypotheses CSV.
    #[arg(long)]
    out: PathBuf,
    /// Run-configuration file ([decode] section applies).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy: greedy | default | alsd | tsd | nsc.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    nbest: Option<usize>,
    #[arg(long)]
    u_max: Option<usize>,
    #[arg(long)]
    max_sym_exp: Option<usize>,
    #[arg(long = "nstep")]
    n_step: Option<usize>,
    #[arg(long = "auto-nstep")]
    auto_n_step: Option<usize>,
    #[arg(long)]
    prefix_alpha: Option<usize>,
    /// Parameter file of a language model for shallow fusion.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    lm_weight: Option<f64>,
    /// Worker threads for per-utterance decoding.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Trained parameter file.
    #[arg(long)]
    model: PathBuf,
    /// Output sweep CSV.
    #[arg(long)]
    out: PathBuf,
    /// Output expansion-table CSV (default: <out> with extension
    /// `expansion.csv`).
    #[arg(long)]
    expansion_out: Option<PathBuf>,
    /// Run-configuration file ([bench] section applies).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategies to sweep.
    #[arg(long)]
    strategies: Option<String>,
    /// Timed repetitions per grid point.
    #[arg(long)]
    reps: Option<usize>,
    /// Beam width held fixed across grids.
    #[arg(long)]
    beam: Option<usize>,
    /// Seconds of audio represented by one frame.
    #[arg(long = "frame-duration")]
    frame_duration_s: Option<f64>,
    /// Accepted for symmetry with decode; timing runs always use one
    /// worker.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite: loss-oracle | grad | search-oracle | diagonal | all.
    #[arg(long)]
    suite: String,
    /// Instance count (default depends on the suite).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Decode(args) => cmd_decode(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Verify(args) => cmd_verify(args),
    }
}

/// Seed precedence: flag, then config file, then the TLAB_SEED environment
/// variable, then zero.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag.or(file) {
        return Ok(seed);
    }
    match std::env::var("TLAB_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("TLAB_SEED must be an integer, got {raw:?}"))),
        Err(_) => Ok(0),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

/// Builds a scoped rayon pool; `None` keeps the default-sized pool.
fn worker_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let threads = match jobs {
        Some(0) => return Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => n,
        None => 0, // rayon default
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("could not build worker pool: {e}")))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let task: SyntheticTask = args.task.parse()?;
    let seed = resolve_seed(args.seed, None)?;
    let data = gen_synthetic(
        task,
        args.count,
        args.vocab,
        args.min_symbols,
        args.max_symbols,
        args.noise,
        seed,
    )?;
    data.save(&args.out)?;
    println!(
        "wrote {} {} utterances (vocab {}, seed {}) to {}",
        data.len(),
        task.name(),
        args.vocab,
        seed,
        args.out.display()
    );
    Ok(0)
}

/// Parses `none` or `key=weight` pairs into a loss mixture. Listed terms
/// start from the bare transducer objective, so `ctc=0.5,lm=0.4` enables
/// exactly those two auxiliary tasks.
fn parse_aux_spec(spec: &str) -> Result<LossConfig> {
    let mut cfg = LossConfig::vanilla();
    if spec.trim() == "none" {
        return Ok(cfg);
    }
    for part in spec.split(',') {
        let part = part.trim();
        let Some((key, value)) = part.split_once('=') else {
            return Err(Error::Config(format!(
                "bad aux term {part:?}; expected key=weight"
            )));
        };
        let weight: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad aux weight {value:?} for {key:?}")))?;
        match key.trim() {
            "trans" => cfg.lambda_trans = weight,
            "ctc" => cfg.lambda_ctc = weight,
            "aux" => cfg.lambda_aux_trans = weight,
            "kl" => cfg.lambda_symm_kl = weight,
            "lm" => cfg.lambda_lm = weight,
            other => {
                return Err(Error::Config(format!(
                    "unknown aux term {other:?}; expected trans, ctc, aux, kl, or lm"
                )))
            }
        }
    }
    Ok(cfg)
}

fn parse_optional_f64(raw: &str, what: &str) -> Result<Option<f64>> {
    if raw == "none" {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad value {raw:?} for {what}; expected a number or `none`")))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let file = load_file_config(args.config.as_deref())?;
    let data = Dataset::load(&args.data)?;

    let model = if file.has_model() {
        ModelConfig::from_kv_lines(&file.model_text())?
    } else {
        ModelConfig::small(data.input_dim, data.vocab)
    };

    let mut section = file.section("train");
    let defaults = TrainConfig::default();
    let epochs = args.epochs.or(section.take("epochs")?).unwrap_or(defaults.epochs);
    let batch_size = args
        .batch_size
        .or(section.take("batch_size")?)
        .unwrap_or(defaults.batch_size);
    let lr = args.lr.or(section.take("lr")?).unwrap_or(defaults.lr);
    let holdout_frac = args
        .holdout_frac
        .or(section.take("holdout_frac")?)
        .unwrap_or(defaults.holdout_frac);
    let clip_norm = match args.clip_norm.as_deref() {
        Some(raw) => parse_optional_f64(raw, "--clip-norm")?,
        None => section.take_or_none("clip_norm")?.unwrap_or(defaults.clip_norm),
    };
    let target_accuracy = match args.target_accuracy.as_deref() {
        Some(raw) => parse_optional_f64(raw, "--target-accuracy")?,
        None => section
            .take_or_none("target_accuracy")?
            .unwrap_or(defaults.target_accuracy),
    };
    let momentum = args.momentum.or(section.take("momentum")?).unwrap_or(0.9);
    let optimizer = match args
        .optimizer
        .or_else(|| section.take_string("optimizer"))
        .as_deref()
    {
        None | Some("adam") => OptimizerKind::adam(),
        Some("sgd") => OptimizerKind::Sgd { momentum },
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown optimizer {other:?}; expected adam or sgd"
            )))
        }
    };
    let mut loss = match args.aux.or_else(|| section.take_string("aux")) {
        Some(spec) => parse_aux_spec(&spec)?,
        None => LossConfig::default(),
    };
    if let Some(eps) = args.lm_smoothing.or(section.take("lm_smoothing")?) {
        loss.lm_smoothing = eps;
    }
    let seed = resolve_seed(args.seed, section.take("seed")?)?;
    section.finish()?;

    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        clip_norm,
        optimizer,
        holdout_frac,
        target_accuracy,
        seed,
        loss,
    };

    let pool = worker_pool(args.jobs)?;
    let report = pool.install(|| train(&model, &data, &cfg))?;

    if let Some(bad) = report.logs.iter().find(|l| !l.mean_loss.is_finite()) {
        return Err(Error::Numeric(format!(
            "training diverged: non-finite loss at epoch {}",
            bad.epoch
        )));
    }

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.csv"));
    let mut log = String::from("epoch,mean_loss,holdout_accuracy,seconds\n");
    for l in &report.logs {
        log.push_str(&format!(
            "{},{:.6},{:.4},{:.3}\n",
            l.epoch, l.mean_loss, l.holdout_accuracy, l.seconds
        ));
    }
    std::fs::write(&log_path, log)?;
    save_parameters(&args.out, &model, &report.params)?;
    println!(
        "trained {} epochs, final holdout accuracy {:.4}; parameters in {}, log in {}",
        report.logs.len(),
        report.final_accuracy,
        args.out.display(),
        log_path.display()
    );
    Ok(0)
}

fn cmd_decode(args: DecodeArgs) -> Result<i32> {
    let file = load_file_config(args.config.as_deref())?;
    let data = Dataset::load(&args.data)?;
    let (model_cfg, params) = load_parameters(&args.model)?;
    if data.input_dim != model_cfg.input_dim || data.vocab != model_cfg.vocab {
        return Err(Error::Contract(format!(
            "dataset is {}-dimensional with vocab {}, model expects {} / {}",
            data.input_dim, data.vocab, model_cfg.input_dim, model_cfg.vocab
        )));
    }

    let mut section = file.section("decode");
    let strategy: Strategy = args
        .strategy
        .clone()
        .or_else(|| section.take_string("strategy"))
        .unwrap_or_else(|| "default".into())
        .parse()?;
    let base = BeamConfig::default();
    let cfg = BeamConfig {
        beam: args.beam.or(section.take("beam")?).unwrap_or(base.beam),
        nbest: args.nbest.or(section.take("nbest")?).unwrap_or(base.nbest),
        u_max: args.u_max.or(section.take("u_max")?).unwrap_or(base.u_max),
        max_sym_exp: args
            .max_sym_exp
            .or(section.take("max_sym_exp")?)
            .unwrap_or(base.max_sym_exp),
        n_step: args.n_step.or(section.take("n_step")?).unwrap_or(base.n_step),
        auto_n_step: args
            .auto_n_step
            .or(section.take("auto_n_step")?)
            .unwrap_or(base.auto_n_step),
        prefix_alpha: args
            .prefix_alpha
            .or(section.take("prefix_alpha")?)
            .unwrap_or(base.prefix_alpha),
    };
    cfg.validate()?;
    let lm_weight = args
        .lm_weight
        .or(section.take("lm_weight")?)
        .unwrap_or(0.0);
    section.finish()?;

    if strategy == Strategy::Greedy {
        let ignored: Vec<&str> = [
            ("--beam", args.beam.is_some()),
            ("--nbest", args.nbest.is_some()),
            ("--u-max", args.u_max.is_some()),
            ("--max-sym-exp", args.max_sym_exp.is_some()),
            ("--nstep", args.n_step.is_some()),
            ("--auto-nstep", args.auto_n_step.is_some()),
            ("--prefix-alpha", args.prefix_alpha.is_some()),
            ("--lm", args.lm.is_some()),
            ("--lm-weight", args.lm_weight.is_some()),
        ]
        .iter()
        .filter(|(_, given)| *given)
        .map(|(name, _)| *name)
        .collect();
        if !ignored.is_empty() {
            eprintln!(
                "warning: greedy decoding ignores beam and fusion parameters ({})",
                ignored.join(", ")
            );
        }
    }

    let lm = match &args.lm {
        Some(path) => {
            let (lm_cfg, lm_params) = load_parameters(path)?;
            Some(RecurrentLm::new(lm_cfg, lm_params)?)
        }
        None => None,
    };
    let fusion = lm.as_ref().map(|lm| Fusion {
        lm,
        weight: lm_weight,
    });

    let pool = worker_pool(args.jobs)?;
    let reports: Result<Vec<DecodeReport>> = pool.install(|| {
        data.utterances
            .par_iter()
            .map(|utt| {
                let scorer = UtteranceScorer::new(&model_cfg, &params, &utt.features.view())?;
                decode(strategy, &scorer, &cfg, fusion.as_ref())
            })
            .collect()
    });
    let reports = reports?;

    let mut out = String::from("utt,rank,score,labels,joint_calls,decoder_calls,incomplete\n");
    for (i, report) in reports.iter().enumerate() {
        for (rank, hyp) in report.nbest.iter().enumerate() {
            let labels: Vec<String> = hyp.labels.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "{},{},{:.6},{},{},{},{}\n",
                i,
                rank + 1,
                hyp.score,
                labels.join(" "),
                report.joint_calls,
                report.decoder_calls,
                report.incomplete
            ));
        }
    }
    std::fs::write(&args.out, out)?;

    let shares = expansion_stats(reports.iter().map(|r| &r.expansion_histogram));
    println!(
        "decoded {} utterances with {}; expansion shares 1: {:.2}%, 2: {:.2}%, 3+: {:.2}%",
        reports.len(),
        strategy.name(),
        shares[0].percent,
        shares[1].percent,
        shares[2].percent
    );
    Ok(0)
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let file = load_file_config(args.config.as_deref())?;
    let data = Dataset::load(&args.data)?;
    let (model_cfg, params) = load_parameters(&args.model)?;

    let mut section = file.section("bench");
    let strategies_raw = args
        .strategies
        .clone()
        .or_else(|| section.take_string("strategies"))
        .unwrap_or_else(|| "alsd,tsd,nsc".into());
    let strategies: Vec<Strategy> = strategies_raw
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    let reps = args.reps.or(section.take("reps")?).unwrap_or(5);
    let beam = args.beam.or(section.take("beam")?).unwrap_or(5);
    let frame_duration_s = args
        .frame_duration_s
        .or(section.take("frame_duration_s")?)
        .unwrap_or(0.01);
    section.finish()?;

    if args.jobs.is_some_and(|j| j != 1) {
        eprintln!("warning: timing runs use one worker; --jobs ignored");
    }

    let mut rows = Vec::new();
    for strategy in &strategies {
        let spec = SweepSpec {
            beam,
            frame_duration_s,
            ..SweepSpec::standard(*strategy, reps)
        };
        rows.extend(sweep(&model_cfg, &params, &data, &spec)?);
    }
    std::fs::write(&args.out, sweep_csv(&rows))?;

    // Expansion table from a plain pass with the default search at the
    // fixed beam width — the measurement the expansion estimator consumes.
    let cfg = BeamConfig {
        beam,
        ..BeamConfig::default()
    };
    let mut histograms = Vec::with_capacity(data.len());
    for utt in &data.utterances {
        let scorer = UtteranceScorer::new(&model_cfg, &params, &utt.features.view())?;
        let report = decode(Strategy::Default, &scorer, &cfg, None)?;
        histograms.push(report.expansion_histogram);
    }
    let table = expansion_stats(histograms.iter());
    let expansion_path = args
        .expansion_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("expansion.csv"));
    std::fs::write(&expansion_path, expansion_csv(&table))?;

    println!(
        "swept {} grid points over {} strategies; sweep in {}, expansion table in {}",
        rows.len(),
        strategies.len(),
        args.out.display(),
        expansion_path.display()
    );
    for row in &table {
        println!("expansions {}: {:.2}%", row.bucket, row.percent);
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let seed = resolve_seed(args.seed, None)?;
    let mut all_pass = true;
    let mut ran_any = false;

    let suite = args.suite.as_str();
    if suite == "loss-oracle" || suite == "all" {
        ran_any = true;
        let report = verify::loss_oracle_suite(args.n.unwrap_or(200), seed)?;
        let ok = report.passes();
        all_pass &= ok;
        println!(
            "loss-oracle: {} instances, max transducer deviation {:.3e}, max frame-alignment deviation {:.3e} (tolerance {:.0e}) ... {}",
            report.instances,
            report.max_transducer_dev,
            report.max_ctc_dev,
            verify::LOSS_ORACLE_TOL,
            verdict(ok)
        );
    }
    if suite == "diagonal" || suite == "all" {
        ran_any = true;
        let report = verify::diagonal_suite(args.n.unwrap_or(200), seed)?;
        let ok = report.passes();
        all_pass &= ok;
        println!(
            "diagonal: {} instances, max cut residual {:.3e} (tolerance {:.0e}) ... {}",
            report.instances,
            report.max_residual,
            verify::DIAGONAL_TOL,
            verdict(ok)
        );
    }
    if suite == "grad" || suite == "all" {
        ran_any = true;
        let report = verify::grad_suite(args.n.unwrap_or(20), seed)?;
        let ok = report.passes();
        all_pass &= ok;
        println!(
            "grad: {} instances, {} entries checked, max relative error {:.3e} (tolerance {:.0e}) ... {}",
            report.instances,
            report.checked,
            report.max_rel_error,
            verify::GRAD_TOL,
            verdict(ok)
        );
    }
    if suite == "search-oracle" || suite == "all" {
        ran_any = true;
        let report = verify::search_oracle_suite(args.n.unwrap_or(100), seed)?;
        let ok = report.passes();
        all_pass &= ok;
        for (name, hits) in &report.agreements {
            println!(
                "search-oracle {}: {}/{} exact argmax agreement",
                name, hits, report.instances
            );
        }
        println!(
            "search-oracle: {} scores checked against marginals, {} above bound, max overshoot {:.3e} ... {}",
            report.bound_checks,
            report.bound_violations,
            report.max_overshoot,
            verdict(ok)
        );
    }
    if !ran_any {
        return Err(Error::Config(format!(
            "unknown suite {suite:?}; expected loss-oracle, grad, search-oracle, diagonal, or all"
        )));
    }
    Ok(if all_pass { 0 } else { 4 })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
