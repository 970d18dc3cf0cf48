//! `lafb`: generate synthetic data, train, evaluate, predict, check gradients
//! and summarize ensemble weight traces.
//!
//! Errors print one line, `error: <reason>`, and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lafb::config::{parse_override, Profile, RunConfig};
use lafb::fusion::Scheme;
use lafb::harness::{self, GradLine};
use lafb::synthdata::{self, GenConfig, Split};
use lafb::{Error, Result};

#[derive(Parser)]
#[command(name = "lafb", version, about = "Adaptive fusion bank saliency detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// paper or desk.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    no_afb: bool,
    #[arg(long, global = true)]
    no_aem: bool,
    #[arg(long, global = true)]
    no_iigm: bool,
    /// Subset of cb,sv,ic,li,td kept in the bank.
    #[arg(long, global = true)]
    schemes: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `--set optim.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset split to --out.
    Generate {
        #[arg(long, default_value = "train")]
        split: Split,
        /// Defaults to data.train_count or data.test_count.
        #[arg(long)]
        count: Option<usize>,
        /// `uniform`, one code such as `li`, or weights such as `cb=1,td=2`.
        #[arg(long)]
        mix: Option<String>,
        /// Square image extent; defaults to model.input_size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train and write logs and checkpoints to --out.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; writes metrics.csv and metrics.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Write the saliency map of one image pair as an 8-bit PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of every primitive and composite.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Summarize a weight_trace.csv (or the one inside a run directory).
    WeightTrace {
        trace: PathBuf,
        /// Scheme expected to dominate.
        #[arg(long)]
        matched: Option<Scheme>,
    },
}

fn resolve(g: &Global) -> Result<RunConfig> {
    let mut overrides = g
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let mut push = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(s) = g.seed {
        push("seed", s.to_string());
    }
    if g.no_afb {
        push("ablation.no_afb", "true".into());
    }
    if g.no_aem {
        push("ablation.no_aem", "true".into());
    }
    if g.no_iigm {
        push("ablation.no_iigm", "true".into());
    }
    if let Some(s) = &g.schemes {
        push("ablation.schemes", format!("{:?}", s));
    }
    if let Some(o) = &g.out {
        push("out", format!("{:?}", o.to_string_lossy()));
    }
    RunConfig::resolve(g.config.as_deref(), g.profile, &overrides)
}

fn print_grad_lines(lines: &[GradLine], tol: f64) -> bool {
    let mut ok = true;
    for l in lines {
        let pass = l.passes(tol);
        ok &= pass;
        println!(
            "{:<22} max_rel_err={:.3e} checked={} skipped={} {}",
            l.name,
            l.max_error,
            l.checked,
            l.skipped,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    ok
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Generate { split, count, mix, size } => {
            let n = size.unwrap_or(cfg.model.input_size);
            let gen = GenConfig {
                seed: cfg.seed,
                count: count.unwrap_or(match split {
                    Split::Train => cfg.data.train_count,
                    Split::Test => cfg.data.test_count,
                }),
                mix: mix.as_deref().unwrap_or(&cfg.data.mix).parse()?,
                height: n,
                width: n,
                split,
            };
            let out = cli.global.out.clone().unwrap_or_else(|| PathBuf::from("data").join(split.name()));
            let index = synthdata::generate_to(&out, &gen)?;
            println!("wrote {} samples to {}", index.len(), out.display());
        }
        Command::Train { train, val } => {
            let mut cfg = cfg;
            if train.is_some() {
                cfg.data.train = train;
            }
            if val.is_some() {
                cfg.data.val = val;
            }
            let t = harness::train(&cfg)?;
            let last = cfg.optim.epochs;
            println!(
                "trained {} epochs; loss {:.5} -> {:.5}; checkpoint {}",
                last,
                t.log.epoch_loss(1).unwrap_or(f64::NAN),
                t.log.epoch_loss(last).unwrap_or(f64::NAN),
                cfg.out.join(harness::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { checkpoint, dataset } => {
            let out = cli
                .global
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            harness::evaluate(&checkpoint, &dataset, &out)?;
            let table = out.join("metrics.txt");
            print!("{}", std::fs::read_to_string(&table).map_err(|e| Error::Io { path: table, source: e })?);
        }
        Command::Predict {
            checkpoint,
            rgb,
            aux,
            output,
        } => {
            harness::predict_files(&checkpoint, &rgb, &aux, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Gradcheck { tol } => {
            let lines = harness::gradient_suite(cfg.seed)?;
            return Ok(print_grad_lines(&lines, tol));
        }
        Command::WeightTrace { trace, matched } => {
            let path = if trace.is_dir() { trace.join(harness::TRACE_FILE) } else { trace };
            let summary = harness::weight_trace(&harness::read_trace(&path)?)?;
            print!("{}", summary.table(matched));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
