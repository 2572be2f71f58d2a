use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use duscloud_core::config::{Preset, RunConfig};
use duscloud_core::pipeline::{self, EvalOptions, Layout};
use duscloud_core::synth::Primitive;

#[derive(Parser)]
#[command(name = "duscloud", version, about = "Point-cloud anomaly detection by down/up-sampling reconstruction")]
struct Cli {
    /// Run directory holding corpus, models and evaluation output.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// TOML config file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set group.g=128`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth {
        /// Keep only 4 training clouds per category.
        #[arg(long)]
        scarce: bool,
    },
    TrainDown,
    TrainUp,
    /// Score a single cloud file.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        category: String,
    },
    Eval {
        /// Keep 1/N of every test cloud.
        #[arg(long)]
        subsample: Option<usize>,
        /// Gaussian jitter added to test clouds.
        #[arg(long)]
        noise_std: Option<f64>,
        /// Run the full robustness sweep and write robustness.csv.
        #[arg(long)]
        sweep: bool,
    },
    /// Inference throughput over the test split.
    Bench {
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Train and evaluate the loss/noise ablation variants.
    Ablate,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let preset: Preset = cli.preset.parse()?;
    let mut overrides = cli.overrides.clone();
    if let Command::Synth { scarce: true } = cli.command {
        overrides.insert(0, "synth.train=4".into());
    }
    let cfg = RunConfig::load(preset, cli.config.as_deref(), &overrides)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::Synth { .. } => {
            let m = pipeline::cmd_synth(&cfg, &layout)?;
            println!("wrote {} clouds to {}", m.samples.len(), layout.corpus().display());
        }
        Command::TrainDown => {
            for s in pipeline::cmd_train_down(&cfg, &layout)? {
                let last = s.log.last().map_or(f64::NAN, |e| e.total);
                println!("{}: final down loss {last:.6}", s.category.name());
            }
        }
        Command::TrainUp => {
            for s in pipeline::cmd_train_up(&cfg, &layout)? {
                let last = s.log.last().map_or(f64::NAN, |e| e.total);
                println!("{}: final up loss {last:.6}", s.category.name());
            }
        }
        Command::Infer { input, category } => {
            let cat: Primitive = category.parse()?;
            let r = pipeline::cmd_infer(&cfg, &layout, &input, cat)
                .with_context(|| format!("scoring {}", input.display()))?;
            println!("{}: object score {:.6} over {} points", r.id, r.object_score, r.raw.len());
        }
        Command::Eval { subsample, noise_std, sweep } => {
            if sweep {
                for r in pipeline::cmd_robustness(&cfg, &layout)? {
                    println!("{} {}: o_auroc {:?} p_auroc {:?}", r.perturbation, r.level, r.o_auroc, r.p_auroc);
                }
            } else {
                let mut opts = EvalOptions::from_config(&cfg);
                opts.subsample = subsample.unwrap_or(opts.subsample);
                opts.noise_std = noise_std.unwrap_or(opts.noise_std);
                anyhow::ensure!(opts.subsample >= 1, "--subsample must be >= 1");
                anyhow::ensure!(opts.noise_std >= 0.0, "--noise-std must be >= 0");
                let o = pipeline::cmd_eval(&cfg, &layout, &opts)?;
                println!("{}", serde_json::to_string_pretty(&o)?);
            }
        }
        Command::Bench { repeats } => {
            let b = pipeline::cmd_bench(&cfg, &layout, repeats)?;
            println!("{} clouds in {:.3}s: {:.3} clouds/s", b.clouds, b.seconds, b.clouds_per_second);
        }
        Command::Ablate => {
            let r = pipeline::cmd_ablate(&cfg, &layout)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml_string()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("DUSCLOUD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
