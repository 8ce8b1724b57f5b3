use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use viar_core::config::RunConfig;
use viar_core::harness::{self, EditBox};
use viar_core::schedule::ScheduleSpec;
use viar_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "viar", version, about = "Implicit next-scale autoregressive image generation")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// con:a,a | dec:a,b | adaptive:tau,cap | explicit:n0,n1,…
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg", global = true)]
    guidance: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset to `paths.data`.
    Dataset,
    /// Train and write checkpoints plus a metrics stream.
    Train {
        /// Continue from `paths.checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Generate `sample.count` images of `sample.class`.
    Sample {
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Regenerate a box of a reference image.
    Inpaint {
        /// VIARIM1 image; defaults to a dataset image of another class.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// y0,y1,x0,x1 in unit coordinates.
        #[arg(long = "box", default_value = "0.25,0.75,0.25,0.75")]
        region: EditBox,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Record per-step convergence traces for one generation.
    Probe {
        #[arg(long)]
        class: Option<usize>,
    },
    /// Tabulate compute budgets, attention costs and memory.
    Bench,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &cli.schedule {
        cfg.sample.schedule = s
            .parse::<ScheduleSpec>()
            .map_err(|e| Error::Config(format!("--schedule: {e}")))?;
    }
    if let Some(g) = cli.guidance {
        cfg.sample.guidance = g;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    match &cli.command {
        Command::Sample { class, count } => {
            if let Some(c) = class {
                cfg.sample.class = *c;
            }
            if let Some(n) = count {
                cfg.sample.count = *n;
            }
        }
        Command::Inpaint { class: Some(c), .. } | Command::Probe { class: Some(c) } => {
            cfg.sample.class = *c;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Dataset => print_json(&harness::cmd_dataset(&cfg)?),
        Command::Train { resume } => {
            let run = harness::cmd_train(&cfg, *resume)?;
            if let (Some(first), Some(last)) = (run.reports.first(), run.reports.last()) {
                eprintln!(
                    "steps {}..{}  loss {:.4} -> {:.4}",
                    first.step, last.step, first.loss, last.loss
                );
            }
            println!("{}", cfg.paths.checkpoint.display());
            Ok(())
        }
        Command::Sample { .. } => print_json(&harness::cmd_sample(&cfg)?.1),
        Command::Inpaint { reference, region, .. } => {
            print_json(&harness::cmd_inpaint(&cfg, reference.as_deref(), *region)?.1)
        }
        Command::Probe { .. } => print_json(&harness::cmd_probe(&cfg)?.1),
        Command::Bench => {
            print!("{}", harness::bench_table(&harness::cmd_bench(&cfg)?));
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) | Error::Budget(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training { report, .. } = &e {
                if let Ok(s) = serde_json::to_string(report) {
                    eprintln!("last report: {s}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
