use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use ucorr::commands::{self, EvalArgs};
use ucorr::Config;
use ucorr_core::Variant;

#[derive(Parser)]
#[command(name = "ucorr", version, about = "Wire segmentation and depth from consecutive frames")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file; keys it omits keep the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings the config file is layered over.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the data seed (gen-data) or the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Trains one model into a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        force: bool,
        /// Continue the run in --out from its last checkpoint.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Evaluates a trained run on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the run's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report directory; defaults to the run's reports/.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report at the F1-optimal threshold chosen on val.
        #[arg(long)]
        tune_threshold: bool,
    },
    /// Trains and compares the model variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restricts the comparison; repeatable.
        #[arg(long)]
        variant: Vec<Variant>,
        #[arg(long)]
        force: bool,
    },
    /// Predicts wires and depth for a handful of frames.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Oldest first, as many as the model takes.
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Times forward and training steps.
    Bench {
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Prints the effective configuration.
    Config,
}

fn load_config(g: &Global) -> Result<Config> {
    let base = Config::preset(&g.preset)?;
    match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::parse_over(&base, &text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(base),
    }
}

fn print_report(name: &str, r: &ucorr_core::metrics::EvalReport) {
    print!("{}", ucorr::report::metrics_table(&[(name.to_string(), r)]));
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.deterministic {
        commands::set_deterministic();
    }
    let mut cfg = load_config(g)?;
    match cli.command {
        Command::GenData { out, force } => {
            if let Some(s) = g.seed {
                cfg.data.seed = s;
            }
            let m = commands::gen_data(&cfg, &out, force)?;
            println!("{}", m.summary_line());
        }
        Command::Train { data, out, variant, force, resume } => {
            if let Some(s) = g.seed {
                cfg.train.seed = s;
            }
            if let Some(v) = variant {
                cfg.train.model.variant = v;
            }
            let o = commands::train(&cfg, &data, &out, force, resume)?;
            info!("{} steps, run in {}", o.steps, o.run.root.display());
            if let Some(r) = &o.val {
                print_report("val", r);
            }
        }
        Command::Eval { run, data, split, checkpoint, out, tune_threshold } => {
            let o = commands::eval(&EvalArgs {
                run: &run,
                data: &data,
                split: &split,
                checkpoint: checkpoint.as_deref(),
                out: out.as_deref(),
                tune_threshold,
            })?;
            print_report(&split, &o.report);
            if let Some((t, r)) = &o.tuned {
                println!("threshold tuned on val: {t}");
                print_report(&format!("{split}@{t:.3}"), r);
            }
        }
        Command::Ablate { data, out, variant, force } => {
            if let Some(s) = g.seed {
                cfg.train.seed = s;
            }
            if !variant.is_empty() {
                cfg.ablate.variants = variant;
            }
            let o = commands::ablate(&cfg, &data, &out, force)?;
            print!("{}", o.text);
        }
        Command::Infer { run, checkpoint, frames, out } => {
            let o = commands::infer(&run, checkpoint.as_deref(), &frames, &out)?;
            for p in [&o.wire, &o.depth, &o.panel] {
                println!("{}", p.display());
            }
        }
        Command::Bench { steps, variant } => {
            if let Some(v) = variant {
                cfg.train.model.variant = v;
            }
            let b = commands::bench(&cfg, steps)?;
            println!(
                "{}: {} parameters, forward+loss {:.1} ms, train step {:.1} ms (batch {})",
                cfg.train.model.variant, b.parameters, b.forward_ms, b.train_step_ms, cfg.train.batch_size
            );
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
