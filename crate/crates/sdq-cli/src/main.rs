//! Command-line driver: trains per a TOML config, continues checkpoints at
//! lower bit widths, exports integer models, verifies float/integer
//! equivalence, and summarizes metrics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sdq::checkpoint;
use sdq::config::{Config, ModeCfg, QuantCfg, StageTomlCfg};
use sdq::infer;
use sdq::metrics::{self, MetricsRecord, Split};
use sdq::train::{self, StageCfg, TrainOutcome, TrainPlan};
use sdq::Rng;

/// Environment variable that overrides the configured dataset directory.
const DATA_DIR_ENV: &str = "SDQ_DATA_DIR";

/// Acceptable normalized logit deviation between float and integer paths.
const EQUIV_BOUND: f64 = 1e-3;

/// Stream labels so init, training, and verification draw independent
/// sequences from the config seed.
const INIT_FORK: u64 = 0x696e_6974; // "init"
const TRAIN_FORK: u64 = 0x7472_6169; // "trai"
const VERIFY_FORK: u64 = 0x7665_7269; // "veri"

#[derive(Parser)]
#[command(name = "sdq", version, about = "Quantization-aware training and integer inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model through the config's bit-width schedule.
    Train(TrainArgs),
    /// Continue a trained checkpoint at a lower bit width.
    Progressive(ProgressiveArgs),
    /// Export a trained checkpoint as a pure-integer model file.
    Export(ExportArgs),
    /// Check integer inference against the float model on test inputs.
    Verify(VerifyArgs),
    /// Summarize a metrics CSV: accuracy plus per-layer thresholds/pruning.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Uniform,
    Log2,
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the schedule with a single stage at this width (reusing the
    /// matching stage's settings, or the last stage's if none match).
    #[arg(long)]
    bits: Option<u8>,
    /// Override the threshold gradient scale `s` in every stage.
    #[arg(long)]
    gradient_scale: Option<f64>,
    /// Override the weight-quantizer family of every fully quantized layer.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Append the frozen-quantizer retraining phase.
    #[arg(long)]
    two_phase: bool,
    /// Write artifacts here instead of the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct ProgressiveArgs {
    #[arg(long)]
    config: PathBuf,
    /// Source checkpoint (trained at a higher bit width).
    #[arg(long)]
    from: PathBuf,
    /// Target bit width.
    #[arg(long)]
    bits: u8,
    /// Re-scale clipping thresholds for the new width instead of carrying
    /// them over unchanged.
    #[arg(long)]
    rescale: bool,
    /// Threshold gradient scale for the continued run (0 freezes them).
    #[arg(long)]
    gradient_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Append the frozen-quantizer retraining phase (config's own
    /// two_phase setting is ignored here).
    #[arg(long)]
    two_phase: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct ExportArgs {
    /// Trained checkpoint to convert.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output file for the integer model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct VerifyArgs {
    /// Config that describes the dataset to sample inputs from.
    #[arg(long)]
    config: PathBuf,
    /// Float-model checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Integer-model file.
    #[arg(long)]
    model: PathBuf,
    /// Number of random test inputs to compare on.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Parser)]
struct ReportArgs {
    /// Directory containing metrics.csv (or a direct path to the file).
    #[arg(long)]
    metrics: PathBuf,
    /// Where to write the per-layer CSV; defaults next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Progressive(args) => cmd_progressive(args),
        Cmd::Export(args) => cmd_export(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

fn load_config(path: &Path) -> Result<Config> {
    Config::from_path(path).with_context(|| format!("loading {}", path.display()))
}

fn data_dir_override() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn apply_shared_overrides(cfg: &mut Config, seed: Option<u64>, out: Option<PathBuf>) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
}

/// Rebuilds the schedule as a single stage at `bits`, preferring the
/// config's own settings for that width.
fn single_stage(cfg: &Config, bits: u8) -> StageTomlCfg {
    cfg.train
        .stages
        .iter()
        .find(|s| s.bits == bits)
        .or_else(|| cfg.train.stages.last())
        .cloned()
        .map(|s| StageTomlCfg { bits, ..s })
        .expect("validated config has at least one stage")
}

fn run_and_save(
    cfg: &Config,
    net: sdq::layers::Network,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    let splits = cfg
        .load_dataset(data_dir_override().as_deref())
        .context("loading dataset")?;
    let mut rng = Rng::new(cfg.seed).fork(TRAIN_FORK);
    let outcome = train::run_plan(net, plan, &splits.train, &splits.val, &mut rng)?;

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    metrics::write_csv(&metrics_path, &outcome.history)?;
    let ckpt_path = cfg.out_dir.join("model.ckpt");
    let mut best = outcome.net.clone();
    checkpoint::save(&ckpt_path, &best, outcome.best_epoch, &rng)?;

    for rec in &outcome.history {
        println!(
            "epoch {:>3} {:<5} loss {:.4} acc {:.2}%",
            rec.epoch,
            rec.split.as_str(),
            rec.loss,
            rec.accuracy * 100.0
        );
    }
    let (_, test_acc) = train::evaluate(&mut best, &splits.test, plan.batch_size);
    println!(
        "best val acc {:.2}% (epoch {})",
        outcome.best_val_acc * 100.0,
        outcome.best_epoch
    );
    println!("test acc {:.2}%", test_acc * 100.0);
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(outcome)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_shared_overrides(&mut cfg, args.seed, args.out);
    if let Some(bits) = args.bits {
        cfg.train.stages = vec![single_stage(&cfg, bits)];
    }
    if let Some(s) = args.gradient_scale {
        for stage in &mut cfg.train.stages {
            stage.grad_scale = s;
        }
    }
    if let Some(mode) = args.mode {
        let mode = match mode {
            ModeArg::Uniform => ModeCfg::Uniform,
            ModeArg::Log2 => ModeCfg::Log2,
        };
        for layer in &mut cfg.model.layers {
            if layer.quant == QuantCfg::Full {
                layer.mode = Some(mode);
            }
        }
    }
    if args.two_phase {
        cfg.train.two_phase = true;
    }
    cfg.validate()?;

    let mut init_rng = Rng::new(cfg.seed).fork(INIT_FORK);
    let net = cfg.network(&mut init_rng)?;
    let plan = cfg.plan();
    run_and_save(&cfg, net, &plan)?;
    Ok(())
}

fn cmd_progressive(args: ProgressiveArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_shared_overrides(&mut cfg, args.seed, args.out);
    cfg.validate()?;

    let stage = single_stage(&cfg, args.bits);
    let grad_scale = args.gradient_scale.unwrap_or(stage.grad_scale);
    let ckpt = checkpoint::load(&args.from)
        .with_context(|| format!("loading checkpoint {}", args.from.display()))?;
    let source_bits = ckpt
        .net
        .layers
        .iter()
        .find_map(|l| l.act_quant.as_ref().map(|st| st.bits))
        .unwrap_or(0);
    let net = train::progressive_init(ckpt, args.bits, grad_scale, args.rescale)?;
    println!(
        "transferred {source_bits} -> {} bits ({}, s = {grad_scale})",
        args.bits,
        if args.rescale { "thresholds rescaled" } else { "thresholds carried over" },
    );

    let base = cfg.plan();
    let plan = TrainPlan {
        stages: vec![StageCfg {
            bits: args.bits,
            grad_scale,
            epochs: stage.epochs,
            lr: stage.lr,
        }],
        two_phase: args.two_phase,
        ..base
    };
    plan.validate()?;
    run_and_save(&cfg, net, &plan)?;
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let mut ckpt = checkpoint::load(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let im = infer::export_integer_model(&mut ckpt.net)?;
    infer::save(&args.out, &im)?;
    let acc = if im.mids.iter().any(|l| l.acc64) { "64-bit" } else { "32-bit" };
    println!(
        "exported integer model: {} float head layer(s), {} quantized layer(s), {acc} accumulators",
        im.head.len(),
        im.mids.len()
    );
    println!("wrote {} ({} bytes)", args.out.display(), infer::to_bytes(&im).len());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_shared_overrides(&mut cfg, args.seed, None);
    let splits = cfg
        .load_dataset(data_dir_override().as_deref())
        .context("loading dataset")?;
    let mut ckpt = checkpoint::load(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let im = infer::load(&args.model)
        .with_context(|| format!("loading integer model {}", args.model.display()))?;

    if args.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let mut rng = Rng::new(cfg.seed).fork(VERIFY_FORK);
    let idxs: Vec<usize> =
        (0..args.samples).map(|_| rng.below(splits.test.len())).collect();
    let (inputs, _) = splits.test.batch(&idxs);

    let dev = infer::verify_equivalence(&mut ckpt.net, &im, &inputs)?;
    let agree = infer::argmax_agreement(&mut ckpt.net, &im, &inputs)?;
    println!(
        "max normalized deviation {dev:.3e} over {} inputs (bound {EQUIV_BOUND:.0e})",
        args.samples
    );
    println!("argmax agreement {:.2}%", agree * 100.0);
    if dev >= EQUIV_BOUND {
        bail!("equivalence check failed: deviation {dev:.3e} >= {EQUIV_BOUND:.0e}");
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let (csv_path, out_default) = if args.metrics.is_dir() {
        (args.metrics.join("metrics.csv"), args.metrics.join("report.csv"))
    } else {
        let dir = args.metrics.parent().unwrap_or(Path::new(".")).to_path_buf();
        (args.metrics.clone(), dir.join("report.csv"))
    };
    let text = std::fs::read_to_string(&csv_path)
        .with_context(|| format!("reading {}", csv_path.display()))?;
    let records = metrics::parse_csv(&text).map_err(|e| anyhow::anyhow!(e))?;
    if records.is_empty() {
        bail!("{} holds no records", csv_path.display());
    }

    let best = records
        .iter()
        .filter(|r| r.split == Split::Val)
        .fold(None::<&MetricsRecord>, |best, r| match best {
            Some(b) if r.accuracy < b.accuracy => Some(b),
            _ => Some(r),
        });
    if let Some(best) = best {
        println!("best val acc {:.2}% (epoch {})", best.accuracy * 100.0, best.epoch);
    }
    let last = records.last().unwrap();
    println!(
        "final {} acc {:.2}% (epoch {})",
        last.split.as_str(),
        last.accuracy * 100.0,
        last.epoch
    );

    let out_path = args.out.unwrap_or(out_default);
    let mut csv = String::from("layer,threshold,prune_ratio\n");
    if last.layers.is_empty() {
        println!("no quantized layers tracked");
    } else {
        println!("{:>5}  {:>10}  {:>7}", "layer", "threshold", "prune%");
        for lm in &last.layers {
            println!("{:>5}  {:>10.4}  {:>7.2}", lm.index, lm.threshold, lm.prune_ratio * 100.0);
            csv.push_str(&format!("{},{},{}\n", lm.index, lm.threshold, lm.prune_ratio));
        }
    }
    std::fs::write(&out_path, csv).with_context(|| format!("writing {}", out_path.display()))?;
    println!("wrote {}", out_path.display());
    Ok(())
}
