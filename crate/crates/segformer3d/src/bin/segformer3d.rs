//! Command-line artifact: synthetic data generation, training, evaluation,
//! profiling, and attention micro-benchmarks over one shared run config.
//!
//! Exit codes: 0 on success, 2 for usage errors (clap prints help), 1 for
//! validation or runtime failures (one-line diagnostic on stderr).

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segformer3d::blocks::{EfficientAttention, ParamInit};
use segformer3d::config::{RunConfig, OUT_DIR_ENV};
use segformer3d::data::{load_dataset, write_dataset_range};
use segformer3d::error::{Error, Result};
use segformer3d::profiler;
use segformer3d::tensor::Tensor;
use segformer3d::checkpoint;
use segformer3d::trainer::{evaluate_with_loss, train, MetricsRecord};

#[derive(Parser)]
#[command(
    name = "segformer3d",
    version,
    about = "Hierarchical 3D transformer for volumetric segmentation",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON run config; missing sections fall back to built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=20 or
    /// --set model.widths=[32,64,160,256]. May be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (VSEG1 volumes + manifest).
    GenData {
        /// Dataset directory (default: $SEGFORMER3D_OUT_DIR).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of samples to generate.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// First sample index; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        start_index: u64,
        /// Override data.seed for full reproducibility.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a fresh model, writing metrics.jsonl and checkpoints.
    Train {
        /// Training split directory (default: paths.train_dir).
        #[arg(long, value_name = "DIR")]
        train_dir: Option<PathBuf>,
        /// Held-out split directory (default: paths.eval_dir; may be omitted).
        #[arg(long, value_name = "DIR")]
        eval_dir: Option<PathBuf>,
        /// Output directory (default: paths.out_dir, then $SEGFORMER3D_OUT_DIR).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override train.seed for full reproducibility.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset; prints one metrics-log JSON line.
    Eval {
        /// Checkpoint directory (default: paths.checkpoint).
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (default: paths.eval_dir).
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Analytic parameter/FLOP profile of the configured model.
    Profile {
        /// Input shape BxCxDxHxW for FLOP counting, e.g. 1x4x128x128x128;
        /// omit for a parameters-only report.
        #[arg(long, value_name = "SHAPE")]
        input: Option<String>,
        /// Emit the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to a file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Sweep reduction ratios at a fixed sequence length; prints a CSV with
    /// columns n,r,heads,head_dim,score_flops,score_flop_ratio,wall_ms.
    BenchAttn {
        /// Sequence length (token count).
        #[arg(long, default_value_t = 4096)]
        n: usize,
        /// Comma-separated reduction ratios.
        #[arg(long, default_value = "1,2,4", value_name = "LIST")]
        r: String,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Channel width of the benchmarked attention layer.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Timed repetitions per ratio (after one warmup); minimum is kept.
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Also write the CSV to a file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut rc = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    rc.validate()?;
    match cli.command {
        Command::GenData { out, count, start_index, seed } => {
            if let Some(s) = seed {
                rc.data.seed = s;
            }
            let dir = resolve_dir(out, None, "gen-data needs --out, or $SEGFORMER3D_OUT_DIR")?;
            let manifest = write_dataset_range(&rc.data, start_index, count, &dir)?;
            println!(
                "wrote {} samples (indices {}..{}) to {}",
                manifest.count,
                start_index,
                start_index + count as u64,
                dir.display()
            );
            Ok(())
        }
        Command::Train { train_dir, eval_dir, out, epochs, batch_size, seed } => {
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(b) = batch_size {
                rc.train.batch_size = b;
            }
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            rc.train.validate()?;
            let train_dir = train_dir
                .or(rc.paths.train_dir.clone())
                .ok_or_else(|| Error::Config("train needs --train-dir or paths.train_dir".into()))?;
            let out = resolve_dir(
                out,
                rc.paths.out_dir.clone(),
                "train needs --out, paths.out_dir, or $SEGFORMER3D_OUT_DIR",
            )?;
            let (_, train_set) = load_dataset(&train_dir)?;
            let eval_set = match eval_dir.or(rc.paths.eval_dir.clone()) {
                Some(dir) => load_dataset(&dir)?.1,
                None => Vec::new(),
            };
            let steps = train_set.len().div_ceil(rc.train.batch_size) * rc.train.epochs;
            eprintln!(
                "training on {} samples ({} held out) for {} epochs = {} steps",
                train_set.len(),
                eval_set.len(),
                rc.train.epochs,
                steps
            );
            let started = Instant::now();
            let (_, report) = train(&rc.model, &train_set, &eval_set, &rc.train, Some(&out))?;
            let mins = started.elapsed().as_secs_f64() / 60.0;
            match &report.final_eval {
                Some((per_class, fg)) => println!(
                    "finished {} steps in {mins:.1} min; mean foreground dice {fg:.4} (per class {per_class:?}); outputs in {}",
                    report.steps,
                    out.display()
                ),
                None => println!(
                    "finished {} steps in {mins:.1} min; outputs in {}",
                    report.steps,
                    out.display()
                ),
            }
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, data_dir, batch_size } => {
            let ckpt = ckpt
                .or(rc.paths.checkpoint.clone())
                .ok_or_else(|| Error::Config("eval needs --checkpoint or paths.checkpoint".into()))?;
            let data_dir = data_dir
                .or(rc.paths.eval_dir.clone())
                .ok_or_else(|| Error::Config("eval needs --data-dir or paths.eval_dir".into()))?;
            let (model, step) = checkpoint::load_checkpoint(&ckpt)?;
            let (_, samples) = load_dataset(&data_dir)?;
            let batch = batch_size.unwrap_or(rc.train.batch_size);
            let started = Instant::now();
            let summary = evaluate_with_loss(&model, &samples, batch, &rc.train.dice)?;
            for (i, d) in summary.dice_per_class.iter().enumerate() {
                eprintln!("class {}: dice {d:.4}", i + 1);
            }
            eprintln!("mean foreground dice {:.4} over {} cases", summary.mean_dice, samples.len());
            let record = MetricsRecord {
                epoch: 0,
                step,
                lr: 0.0,
                loss: summary.loss,
                dice_per_class: Some(summary.dice_per_class),
                mean_dice: Some(summary.mean_dice),
                wall_ms: started.elapsed().as_millis() as u64,
            };
            println!("{}", serde_json::to_string(&record)?);
            Ok(())
        }
        Command::Profile { input, json, out } => {
            let shape = input.map(|s| parse_shape(&s)).transpose()?;
            let report = match &shape {
                Some(s) => profiler::count_flops(&rc.model, s)?,
                None => profiler::count_params(&rc.model)?,
            };
            if let Some(path) = &out {
                std::fs::write(path, report.to_json())?;
            }
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.render_table());
            }
            Ok(())
        }
        Command::BenchAttn { n, r, heads, dim, iters, out } => {
            let ratios = parse_ratios(&r)?;
            let csv = bench_attn(n, &ratios, heads, dim, iters.max(1))?;
            if let Some(path) = &out {
                std::fs::write(path, &csv)?;
            }
            print!("{csv}");
            Ok(())
        }
    }
}

/// First of: explicit flag, config path, `$SEGFORMER3D_OUT_DIR`.
fn resolve_dir(flag: Option<PathBuf>, cfg: Option<PathBuf>, msg: &str) -> Result<PathBuf> {
    flag.or(cfg)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(msg.into()))
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("input shape {s:?} is not BxCxDxHxW")))?;
    if dims.len() != 5 {
        return Err(Error::Config(format!(
            "input shape {s:?} has {} dims, expected 5 (BxCxDxHxW)",
            dims.len()
        )));
    }
    Ok(dims)
}

fn parse_ratios(s: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("ratio list {s:?} is not comma-separated integers")))?;
    if list.is_empty() || list.contains(&0) {
        return Err(Error::Config(format!("ratio list {s:?} must hold positive integers")));
    }
    Ok(list)
}

/// Time attention forward passes at fixed `n` across reduction ratios and
/// tabulate them against the analytic score FLOPs. The ratio column is
/// relative to the first listed reduction, so the default `1,2,4` sweep
/// prints exactly 1, 0.5, 0.25 — the O(n^2) -> O(n^2/r) scaling.
fn bench_attn(n: usize, ratios: &[usize], heads: usize, dim: usize, iters: usize) -> Result<String> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} must be a positive multiple of heads {heads}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(tokens, &[1, n, dim]);

    let mut csv = String::from("n,r,heads,head_dim,score_flops,score_flop_ratio,wall_ms\n");
    let mut base_flops = None;
    for &r in ratios {
        let flops = profiler::attention_score_flops(n, heads, dim / heads, r)?;
        let base = *base_flops.get_or_insert(flops);
        let attn = EfficientAttention::new(&mut ParamInit::new(1), dim, heads, r);
        attn.forward(&x)?; // warm up allocator and code paths
        let mut best = f64::INFINITY;
        for _ in 0..iters {
            let t0 = Instant::now();
            attn.forward(&x)?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        csv.push_str(&format!(
            "{n},{r},{heads},{},{flops},{},{best:.3}\n",
            dim / heads,
            flops as f64 / base as f64,
        ));
    }
    Ok(csv)
}
