use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use prognos_cli::{cmd_eval, cmd_plot, cmd_synth, cmd_train};
use prognos_core::config::tolerance_name;
use prognos_core::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "prognos", version, about = "Predict anomalies in the future window of a multivariate series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by synth, train and eval. Precedence: flag > file > default.
#[derive(Args, Clone)]
struct Common {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, env = "PROGNOS_OUT", default_value = "runs")]
    out: PathBuf,
    /// Comma-separated ablation flags, e.g. no_aaf,no_sap
    #[arg(long)]
    ablate: Option<String>,
    /// Tolerances, e.g. 0,10,50,inf
    #[arg(long = "t")]
    tolerances: Option<String>,
    /// Future window length
    #[arg(long)]
    lout: Option<usize>,
    /// Any other config key, as key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a labelled synthetic dataset
    Synth(Common),
    /// Train (and evaluate) one bundle per seed
    Train {
        #[command(flatten)]
        common: Common,
        /// Seed list, overriding the config's
        #[arg(long)]
        seeds: Option<String>,
        /// Run seeds on separate threads
        #[arg(long)]
        parallel: bool,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-step scores
        #[arg(long)]
        scores: bool,
    },
    /// Render a scores.csv or losses.csv file as SVG
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(c: &Common, seeds: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| prognos_core::Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
        cfg.seeds = vec![s];
    }
    if let Some(s) = seeds {
        cfg.set("seeds", s)?;
    }
    if let Some(a) = &c.ablate {
        cfg.set("ablate", a)?;
    }
    if let Some(t) = &c.tolerances {
        cfg.set("tolerance", t)?;
    }
    if let Some(l) = c.lout {
        cfg.set("l_out", &l.to_string())?;
    }
    cfg.out_dir = Some(c.out.clone());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(c) => {
            let cfg = build_config(&c, None)?;
            for f in cmd_synth(&cfg, &c.out)? {
                println!("{}", f.display());
            }
        }
        Cmd::Train { common, seeds, parallel } => {
            let cfg = build_config(&common, seeds.as_deref())?;
            for r in cmd_train(&cfg, &common.out, parallel)? {
                match &r.report {
                    Some(rep) => {
                        let f1: Vec<String> = rep
                            .rows
                            .iter()
                            .map(|row| format!("f1@{}={:.4}", tolerance_name(row.t), row.prf.f1))
                            .collect();
                        println!("seed {} {} -> {}", r.seed, f1.join(" "), r.dir.display());
                    }
                    None => println!("seed {} (no metrics) -> {}", r.seed, r.dir.display()),
                }
            }
        }
        Cmd::Eval { common, checkpoint, scores } => {
            let cfg = build_config(&common, None)?;
            let rep = cmd_eval(&cfg, &checkpoint, &common.out, scores)?;
            print!("{}", rep.to_text());
        }
        Cmd::Plot { input, out } => {
            cmd_plot(&input, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
