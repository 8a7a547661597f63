use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::Value;

use igpode_core::diffmath::seeded;
use igpode_core::dynamics::DriftKind;
use igpode_core::evaluation::{evaluate, kinematics_probe, write_plots, Checkpoint, MetricReport};
use igpode_core::inference::{train, GlobalMode, Model, ModelConfig, TrainConfig, TrainState};
use igpode_core::simdata::{read_dataset, simulate_balls, simulate_charges, write_dataset, BallsConfig, ChargesConfig, NoiseLevel};
use igpode_core::{Error, Result};

#[derive(Parser)]
#[command(name = "igpode", version, about = "Latent GP-ODE models of interacting objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Balls,
    Charges,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    None,
    Low,
    High,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Igpode,
    Gpode,
    Inode,
}

#[derive(Clone, Copy, ValueEnum)]
enum Globals {
    Off,
    Latent,
    Observed,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it in the IGPD format.
    Simulate {
        #[arg(long, value_enum)]
        system: System,
        #[arg(long, value_enum, default_value = "none")]
        noise: Noise,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of sequences (defaults to the system's desk-scale count).
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
        /// Store positions only; velocities become latent.
        #[arg(long)]
        positions_only: bool,
    },
    /// Train a model and write a checkpoint after every round.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "igpode")]
        model: Kind,
        /// Position/velocity latent state with ds/dt = v.
        #[arg(long)]
        structured: bool,
        /// Fit positions only and infer velocities (implies --structured).
        #[arg(long)]
        latent_velocity: bool,
        #[arg(long, value_enum, default_value = "off")]
        global_latents: Globals,
        /// JSON file with optional `model` and `train` overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from the rounds already recorded in `--ckpt`.
        #[arg(long)]
        resume: bool,
        /// Write the per-iteration ELBO history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Forecast every sequence of a dataset and write a metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-sequence CSV and SVG plots with 95% bands from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out the independent kinematics alone on (single-object) data.
    Fskill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<Value>,
    train: Option<TrainConfig>,
}

fn noise_level(n: Noise) -> NoiseLevel {
    match n {
        Noise::None => NoiseLevel::None,
        Noise::Low => NoiseLevel::Low,
        Noise::High => NoiseLevel::High,
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(ConfigFile::default()),
    }
}

fn simulate(
    system: System,
    noise: Noise,
    out: &Path,
    seed: u64,
    sequences: Option<usize>,
    steps: Option<usize>,
    objects: Option<usize>,
    positions_only: bool,
) -> Result<()> {
    let ds = match system {
        System::Balls => {
            let d = BallsConfig::default();
            let cfg = BallsConfig {
                num_sequences: sequences.unwrap_or(d.num_sequences),
                num_steps: steps.unwrap_or(d.num_steps),
                num_objects: objects.unwrap_or(d.num_objects),
                noise: noise_level(noise),
                positions_only,
                ..d
            };
            simulate_balls(&cfg, seed)?
        }
        System::Charges => {
            let d = ChargesConfig::default();
            let cfg = ChargesConfig {
                num_sequences: sequences.unwrap_or(d.num_sequences),
                num_steps: steps.unwrap_or(d.num_steps),
                num_objects: objects.unwrap_or(d.num_objects),
                noise: noise_level(noise),
                positions_only,
                ..d
            };
            simulate_charges(&cfg, seed)?
        }
    };
    write_dataset(&ds, out)?;
    println!(
        "wrote {} sequences × {} steps × {} objects to {}",
        ds.num_sequences,
        ds.num_steps,
        ds.num_objects,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    data: &Path,
    kind: Kind,
    structured: bool,
    latent_velocity: bool,
    globals: Globals,
    config: Option<&Path>,
    ckpt: &Path,
    seed: u64,
    resume: bool,
    history_path: Option<&Path>,
) -> Result<()> {
    let mut ds = read_dataset(data)?;
    if latent_velocity {
        ds = ds.positions();
    }
    let file = read_config(config)?;
    let mut tc = file.train.unwrap_or_default();
    tc.checkpoint = Some(ckpt.to_path_buf());
    let state = if resume {
        let c = Checkpoint::load(ckpt)?;
        log::info!("resuming after round {}", c.round);
        c.to_state(tc.learning_rate, seed)?
    } else {
        let kind = match kind {
            Kind::Igpode => DriftKind::Igpode,
            Kind::Gpode => DriftKind::Gpode,
            Kind::Inode => DriftKind::Inode,
        };
        let globals = match globals {
            Globals::Off => GlobalMode::Off,
            Globals::Latent => GlobalMode::Latent,
            Globals::Observed => GlobalMode::Observed,
        };
        let base = ModelConfig::for_dataset(&ds, kind, structured || latent_velocity, globals);
        let cfg = match file.model {
            Some(patch) => {
                let mut v = serde_json::to_value(&base)?;
                merge(&mut v, patch);
                serde_json::from_value(v)?
            }
            None => base,
        };
        let model = Model::init(cfg, &mut seeded(seed))?;
        TrainState::new(model, &tc, seeded(seed.wrapping_add(1)))
    };
    let (state, history) = train(&ds, state, &tc)?;
    Checkpoint::from_state(&state).save(ckpt)?;
    if let Some(p) = history_path {
        std::fs::write(p, serde_json::to_string_pretty(&history)?)?;
    }
    if let Some(last) = history.last() {
        println!("final ELBO {:.3} after {} iterations; checkpoint {}", last.elbo, history.len(), ckpt.display());
    } else {
        println!("no iterations run; checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, samples: usize, report: &Path, horizon: Option<usize>, seed: u64) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let mut ds = read_dataset(data)?;
    if model.config.obs_dim == 2 && ds.obs_dim > 2 {
        ds = ds.positions();
    }
    let r = evaluate(&model, &ds, samples, horizon, seed)?;
    r.save(report)?;
    println!(
        "MSE {:.4} ± {:.4}, ELL {:.4} ± {:.4} over {} sequences (post-prefix MSE {:.4}, ELL {:.4})",
        r.full.mse.mean,
        r.full.mse.std,
        r.full.ell.mean,
        r.full.ell.std,
        r.per_sequence.len(),
        r.post_prefix.mse.mean,
        r.post_prefix.ell.mean
    );
    Ok(())
}

fn run_plot(report: &Path, truth: &Path, out: &Path) -> Result<()> {
    let r = MetricReport::load(report)?;
    let mut ds = read_dataset(truth)?;
    if r.header.obs_dim < ds.obs_dim {
        ds = ds.positions();
    }
    let files = write_plots(&r, &ds, out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn run_fskill(ckpt: &Path, data: &Path, steps: usize, samples: usize, seed: u64) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.to_model()?;
    let mut ds = read_dataset(data)?;
    if model.config.obs_dim == 2 && ds.obs_dim > 2 {
        ds = ds.positions();
    }
    if ds.num_objects != 1 {
        log::warn!("probe data has {} objects; interactions are still switched off", ds.num_objects);
    }
    let probe = kinematics_probe(&model, &ds, steps, samples, seed)?;
    println!("{}", serde_json::to_string_pretty(&probe)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { system, noise, out, seed, sequences, steps, objects, positions_only } => {
            simulate(system, noise, &out, seed, sequences, steps, objects, positions_only)
        }
        Command::Train { data, model, structured, latent_velocity, global_latents, config, ckpt, seed, resume, history } => {
            run_train(
                &data,
                model,
                structured,
                latent_velocity,
                global_latents,
                config.as_deref(),
                &ckpt,
                seed,
                resume,
                history.as_deref(),
            )
        }
        Command::Eval { ckpt, data, samples, report, horizon, seed } => run_eval(&ckpt, &data, samples, &report, horizon, seed),
        Command::Plot { report, truth, out } => run_plot(&report, &truth, &out),
        Command::Fskill { ckpt, data, steps, samples, seed } => run_fskill(&ckpt, &data, steps, samples, seed),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("IGPODE_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("IGPODE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config("IGPODE_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
