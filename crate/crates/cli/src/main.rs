use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use simcf::harness::{self, ExperimentConfig, Preset, SweepAxis};

#[derive(Parser)]
#[command(name = "simcf", version, about = "SIM-aided cell-free MIMO simulator and NVR-MAPPO trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; when absent the preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::preset(self.preset.parse::<Preset>()?),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train NVR-MAPPO and write config snapshot, metrics, checkpoint and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of training episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Codebook search with water-filling on the held-out channels.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Overrides the codebook size.
        #[arg(long)]
        codebook_size: Option<usize>,
    },
    /// Sum SE against the number of layers or atoms per layer.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `layers` or `atoms`.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values, e.g. `1,2,4`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Comma-separated methods: codebook_wf, nvr_mappo, mappo.
        #[arg(long, value_delimiter = ',', default_value = "codebook_wf")]
        methods: Vec<String>,
    },
    /// Mean-action rollouts of a trained actor on held-out channels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, episodes } => {
            let mut cfg = common.load()?;
            if let Some(e) = episodes {
                cfg.marl.episodes = e;
            }
            let out = cfg.output_dir.clone();
            let s = harness::run_train(&cfg, &out).context("training failed")?;
            println!(
                "{} seed {}: final sum SE {:.4} bit/s/Hz; reward {:.4} -> {:.4}; artifacts in {}",
                s.method,
                s.seed,
                s.final_sum_se,
                s.mean_reward_first_window,
                s.mean_reward_last_window,
                out.display()
            );
        }
        Command::Baseline { common, codebook_size } => {
            let mut cfg = common.load()?;
            if let Some(c) = codebook_size {
                cfg.baseline.codebook_size = c;
            }
            let out = cfg.output_dir.clone();
            let s = harness::run_baseline(&cfg, &out)?;
            println!(
                "{} C={} over {} channels: mean sum SE {:.4} bit/s/Hz; rows in {}",
                s.method,
                s.codebook_size,
                s.channels,
                s.mean_sum_se,
                out.join(harness::BASELINE_FILE).display()
            );
        }
        Command::Sweep { common, axis, values, methods } => {
            let cfg = common.load()?;
            let axis: SweepAxis = axis.parse()?;
            if methods.is_empty() {
                bail!("no methods given");
            }
            let out = cfg.output_dir.clone();
            let rows = harness::run_sweep(&cfg, axis, &values, &methods, &out)?;
            println!("{} rows written to {}", rows.len(), out.join(harness::SWEEP_FILE).display());
        }
        Command::Eval { common, checkpoint, episodes } => {
            let cfg = common.load()?;
            let out = cfg.output_dir.clone();
            let r = harness::run_eval(&cfg, &checkpoint, episodes, &out)?;
            match r.mean_sum_se {
                Some(m) => println!(
                    "mean sum SE {:.4} ± {:.4} bit/s/Hz over {} channels",
                    m,
                    r.std_sum_se.unwrap_or(0.0),
                    r.episodes
                ),
                None => println!("no episodes evaluated"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
