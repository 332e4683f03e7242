use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rdp_vfi::commands::{self, Split, CHECKPOINT_FILE};
use rdp_vfi::config::RunConfig;
use rdp_vfi::Error;

/// Region-prior frame interpolation experiments on synthetic scenes.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; which seed depends on the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset root for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic triplet dataset (`--seed` sets data.seed).
    GenData(Common),
    /// Train one model (`--seed` sets train.seed).
    Train(Common),
    /// Score a checkpoint (`--seed` sets eval.seed).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write predicted frames and absolute-error images.
        #[arg(long)]
        dump: bool,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Train and score the seven fusion ablation settings (`--seed` sets
    /// train.seed).
    Ablate(Common),
    /// Verify every adjoint against central differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Scale analytic adjoints by 1.01 (negative control).
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
}

/// Defaults, then `--config`, then `--set`, then `--seed` and `--out`.
fn resolve(c: &Common, seed_key: &str, out_key: &str) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        cfg.set(seed_key, &s.to_string())?;
    }
    if let Some(o) = &c.out {
        cfg.set(out_key, &o.display().to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Numerical failures exit with 2, everything else with 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = resolve(&c, "data.seed", "data.root")?;
            let s = commands::cmd_gen_data(&cfg, c.force)?;
            println!("{}", s.line());
        }
        Command::Train(c) => {
            let cfg = resolve(&c, "train.seed", "out.dir")?;
            let t = commands::cmd_train(&cfg, &cfg.out, c.force, |r| {
                eprintln!(
                    "iter {:>5}  lr {:.2e}  loss {:.5}  val psnr {:.3} dB",
                    r.iteration, r.lr, r.loss, r.val_psnr
                );
            })?;
            let last = t.log.last().expect("final row");
            println!(
                "trained {} iterations: val psnr {:.3} dB, train psnr {:.3} dB -> {}",
                last.iteration,
                last.val_psnr,
                last.train_psnr.unwrap_or(f64::NAN),
                t.out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            dump,
            split,
        } => {
            let cfg = resolve(&common, "eval.seed", "out.dir")?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::All => Split::All,
            };
            let e = commands::cmd_eval(&cfg, &ckpt, split, &cfg.out, dump)?;
            let epe = e.aggregate.epe.map_or_else(|| "-".to_string(), |v| format!("{v:.4} px"));
            println!(
                "{} samples: psnr {:.4} dB, ssim {:.4}, epe {epe} -> {}",
                e.rows.len(),
                e.aggregate.psnr,
                e.aggregate.ssim,
                e.csv.display()
            );
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c, "train.seed", "out.dir")?;
            let rows = commands::cmd_ablate(&cfg, &cfg.out, c.force, |r| match &r.outcome {
                Ok(s) => eprintln!("{:<11} val psnr {:.4} dB", r.setting.label(), s.psnr),
                Err(e) => eprintln!("{:<11} failed: {e}", r.setting.label()),
            })?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} settings ({failed} failed) -> {}",
                rows.len(),
                cfg.out.join(commands::ABLATION_FILE).display()
            );
        }
        Command::GradCheck {
            common,
            corrupt_adjoint,
        } => {
            resolve(&common, "train.seed", "out.dir")?;
            let outcomes = commands::cmd_grad_check(corrupt_adjoint);
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
