//! Monte-Carlo ELBO, the incremental training loop and predictive rollouts.
//!
//! One ELBO sample draws `H_1` (and `C`) from the encoders, one function
//! per GP component, rolls the ODE out over the batch and scores the
//! observations under `N(B h, diag σ²_e)` with `B = [I, 0]`. Samples run on
//! separate tapes and their gradients are averaged in sample order.

use std::path::PathBuf;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{fork, AdamState, Gradients, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::dynamics::{DriftConfig, DriftKind, DriftModel, ObjectGraph, PairMode};
use crate::encoders::{frames_on_tape, EncoderConfig, GlobalEncoder, InitialEncoder};
use crate::error::{Error, Result};
use crate::odeint::{rk4_rollout, TimeGrid};
use crate::simdata::Dataset;

/// Source of the static per-object features `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GlobalMode {
    #[default]
    Off,
    /// Inferred by the global encoder.
    Latent,
    /// Read from the dataset.
    Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub drift: DriftConfig,
    pub encoder: EncoderConfig,
    pub num_objects: usize,
    pub obs_dim: usize,
    pub globals: GlobalMode,
    /// Initial observation noise standard deviation per observed dim.
    pub init_noise_std: f64,
    pub substeps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            drift: DriftConfig::default(),
            encoder: EncoderConfig::default(),
            num_objects: 3,
            obs_dim: 4,
            globals: GlobalMode::Off,
            init_noise_std: 1.0,
            substeps: 2,
        }
    }
}

impl ModelConfig {
    /// Defaults matched to a dataset's shape. The latent state is structured
    /// `[s, v]` with two spatial dims unless `structured` is false, in which
    /// case it mirrors the observations.
    pub fn for_dataset(ds: &Dataset, kind: DriftKind, structured: bool, globals: GlobalMode) -> Self {
        let global_dim = match globals {
            GlobalMode::Off => 0,
            GlobalMode::Latent => 1,
            GlobalMode::Observed => ds.global_dim,
        };
        let state_dim = if structured { 4 } else { ds.obs_dim };
        ModelConfig {
            drift: DriftConfig {
                kind,
                structured,
                state_dim,
                global_dim,
                pair_mode: if structured { PairMode::Difference } else { PairMode::Absolute },
                ..Default::default()
            },
            num_objects: ds.num_objects,
            obs_dim: ds.obs_dim,
            globals,
            substeps: if ds.dt >= 0.25 { 2 } else { 1 },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.drift.validate()?;
        if self.obs_dim == 0 || self.obs_dim > self.drift.state_dim {
            return Err(Error::Config(format!(
                "observed dim {} must be in 1..={} (latent state dim)",
                self.obs_dim, self.drift.state_dim
            )));
        }
        if (self.globals == GlobalMode::Off) != (self.drift.global_dim == 0) {
            return Err(Error::Config("global dimension must be zero exactly when globals are off".into()));
        }
        if self.num_objects == 0 || self.substeps == 0 || !(self.init_noise_std > 0.0) {
            return Err(Error::Config("objects, substeps and noise scale must be positive".into()));
        }
        Ok(())
    }

    /// Frames the encoders read before a rollout.
    pub fn prefix_len(&self) -> usize {
        match self.globals {
            GlobalMode::Latent => self.encoder.initial_frames.max(self.encoder.global_frames),
            _ => self.encoder.initial_frames,
        }
    }
}

/// All trainable parts of a model and their parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub drift: DriftModel,
    pub initial: InitialEncoder,
    pub global: Option<GlobalEncoder>,
    /// `log σ²_e`, one per observed dim.
    pub log_noise: ParamId,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let graph = ObjectGraph::fully_connected(config.num_objects);
        let drift = DriftModel::init(&mut store, config.drift.clone(), graph, rng)?;
        let d = &config.drift;
        let initial = InitialEncoder::init(&mut store, config.obs_dim, d.state_dim, d.structured, &config.encoder, rng)?;
        let global = match config.globals {
            GlobalMode::Latent => Some(GlobalEncoder::init(&mut store, config.obs_dim, d.global_dim, &config.encoder, rng)?),
            _ => None,
        };
        let log_noise = store.add("emission.log_noise", Tensor::full(&[config.obs_dim], (config.init_noise_std * config.init_noise_std).ln()));
        Ok(Model { config, store, drift, initial, global, log_noise })
    }

    pub fn noise_variances(&self) -> Vec<f64> {
        self.store.get(self.log_noise).data().iter().map(|v| v.exp()).collect()
    }
}

/// Observation windows of a minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sequences: usize,
    /// `len` frames of `(sequences·A) × O` observations to score.
    pub frames: Vec<Tensor>,
    /// Prefix for the global encoder (latent globals only).
    pub global_frames: Option<Vec<Tensor>>,
    /// Observed globals `(sequences·A) × C`.
    pub globals: Option<Tensor>,
    pub dt: f64,
}

impl Batch {
    /// Window `start..start+len` of `seqs`.
    pub fn from_dataset(ds: &Dataset, cfg: &ModelConfig, seqs: &[usize], start: usize, len: usize) -> Result<Self> {
        let frames = ds.batch_frames(seqs, start, len, false)?;
        let global_frames = match cfg.globals {
            GlobalMode::Latent => Some(ds.batch_frames(seqs, 0, cfg.encoder.global_frames, false)?),
            _ => None,
        };
        let globals = match cfg.globals {
            GlobalMode::Observed => Some(ds.batch_globals(seqs).ok_or_else(|| Error::Input("dataset has no globals".into()))?),
            _ => None,
        };
        Ok(Batch { sequences: seqs.len(), frames, global_frames, globals, dt: ds.dt })
    }
}

/// Terms of the evidence lower bound; `elbo() = ell − kl_h1 − kl_c − kl_u`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub ell: f64,
    pub kl_h1: f64,
    pub kl_c: f64,
    /// Inducing KL, already scaled by `batch / dataset` sequence counts.
    pub kl_u: f64,
}

impl ElboParts {
    pub fn elbo(&self) -> f64 {
        self.ell - self.kl_h1 - self.kl_c - self.kl_u
    }

    pub fn is_finite(&self) -> bool {
        self.elbo().is_finite()
    }
}

/// `Σ_{n,rows,o} log N(y | h[:, o], σ²_o)` over a trajectory.
pub fn expected_log_likelihood<'t>(traj: &[Var<'t>], frames: &[Var<'t>], log_noise: Var<'t>) -> Result<Var<'t>> {
    if traj.len() != frames.len() || frames.is_empty() {
        return Err(Error::dim("expected_log_likelihood", format!("{} states vs {} frames", traj.len(), frames.len())));
    }
    let obs = frames[0].shape()[1];
    let rows = frames[0].shape()[0];
    let inv_var = log_noise.neg().exp();
    let mut sq: Option<Var<'t>> = None;
    for (h, y) in traj.iter().zip(frames) {
        let r = y.sub(h.slice(1, 0, obs)?)?.square();
        sq = Some(match sq {
            Some(acc) => acc.add(r)?,
            None => r,
        });
    }
    let quad = sq.unwrap().mul(inv_var)?.sum().scale(-0.5);
    let count = (traj.len() * rows) as f64;
    let norm = log_noise.add_scalar((2.0 * std::f64::consts::PI).ln()).sum().scale(-0.5 * count);
    quad.add(norm)
}

/// Builds one ELBO sample on `tape`; returns the scalar and its parts.
pub fn elbo_sample<'t>(model: &Model, tape: &'t Tape, batch: &Batch, kl_scale: f64, rng: &mut Rng) -> Result<(Var<'t>, ElboParts)> {
    let store = &model.store;
    let frames = frames_on_tape(tape, &batch.frames);
    let q_h1 = model.initial.encode(tape, store, &frames)?;
    let h1 = q_h1.reparameterize(rng)?;
    let kl_h1 = q_h1.kl_standard()?;
    let (c, kl_c) = match (model.config.globals, &model.global) {
        (GlobalMode::Latent, Some(enc)) => {
            let gf = batch.global_frames.as_ref().ok_or_else(|| Error::Input("batch lacks the global-encoder prefix".into()))?;
            let q_c = enc.encode(tape, store, &frames_on_tape(tape, gf))?;
            (Some(q_c.reparameterize(rng)?), Some(q_c.kl_standard()?))
        }
        (GlobalMode::Observed, _) => {
            let g = batch.globals.as_ref().ok_or_else(|| Error::Input("batch lacks observed globals".into()))?;
            (Some(tape.constant(g.clone())), None)
        }
        _ => (None, None),
    };
    let drift = model.drift.sample(tape, store, batch.sequences, rng)?;
    let grid = TimeGrid::uniform(batch.frames.len(), batch.dt, model.config.substeps)?;
    let traj = rk4_rollout(h1, &grid, |h| drift.eval(h, c))?;
    let ell = expected_log_likelihood(&traj, &frames, tape.param(store, model.log_noise))?;
    let kl_u = drift.kl()?.map(|k| k.scale(kl_scale));
    let mut elbo = ell.sub(kl_h1)?;
    if let Some(k) = kl_c {
        elbo = elbo.sub(k)?;
    }
    if let Some(k) = kl_u {
        elbo = elbo.sub(k)?;
    }
    let parts = ElboParts {
        ell: ell.item(),
        kl_h1: kl_h1.item(),
        kl_c: kl_c.map_or(0.0, |k| k.item()),
        kl_u: kl_u.map_or(0.0, |k| k.item()),
    };
    Ok((elbo, parts))
}

/// `L`-sample ELBO estimate and the gradient of the estimate.
///
/// Sample `l` uses the `l`-th child stream forked from `rng`, so results do
/// not depend on how samples are scheduled across threads.
pub fn mc_elbo(model: &Model, batch: &Batch, samples: usize, kl_scale: f64, rng: &mut Rng) -> Result<(ElboParts, Gradients)> {
    if samples == 0 {
        return Err(Error::Contract("at least one Monte-Carlo sample is required".into()));
    }
    let rngs: Vec<Rng> = (0..samples).map(|_| fork(rng)).collect();
    let results: Vec<Result<(ElboParts, Gradients)>> = rngs
        .into_par_iter()
        .map(|mut r| {
            let tape = Tape::new();
            let (elbo, parts) = elbo_sample(model, &tape, batch, kl_scale, &mut r)?;
            Ok((parts, tape.grad(elbo)?))
        })
        .collect();
    let inv = 1.0 / samples as f64;
    let mut parts = ElboParts::default();
    let mut grads = Gradients::default();
    for res in results {
        let (p, g) = res?;
        parts.ell += p.ell * inv;
        parts.kl_h1 += p.kl_h1 * inv;
        parts.kl_c += p.kl_c * inv;
        parts.kl_u += p.kl_u * inv;
        grads.accumulate(&g);
    }
    grads.scale(inv);
    Ok((parts, grads))
}

/// `(subsequence length, iterations)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub subseq_len: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: Vec<Round>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub log_every: usize,
    /// Written after every round when set.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: vec![
                Round { subseq_len: 5, iterations: 2000 },
                Round { subseq_len: 16, iterations: 1000 },
                Round { subseq_len: 33, iterations: 1000 },
            ],
            learning_rate: 5e-4,
            batch_size: 10,
            train_samples: 1,
            log_every: 100,
            checkpoint: None,
        }
    }
}

/// Model plus optimizer state, resumable from a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub rng: Rng,
    /// Number of completed rounds.
    pub round: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig, rng: Rng) -> Self {
        let adam = AdamState::new(&model.store, cfg.learning_rate);
        TrainState { model, adam, rng, round: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: usize,
    pub iteration: usize,
    pub parts: ElboParts,
    pub elbo: f64,
}

/// Runs the remaining rounds of `cfg.rounds` on `dataset`.
pub fn train(dataset: &Dataset, mut state: TrainState, cfg: &TrainConfig) -> Result<(TrainState, Vec<HistoryEntry>)> {
    if dataset.num_sequences == 0 {
        return Err(Error::Input("training needs at least one sequence".into()));
    }
    let mcfg = state.model.config.clone();
    if dataset.obs_dim != mcfg.obs_dim || dataset.num_objects != mcfg.num_objects {
        return Err(Error::Input(format!(
            "dataset has {} objects × {} dims, model expects {} × {}",
            dataset.num_objects, dataset.obs_dim, mcfg.num_objects, mcfg.obs_dim
        )));
    }
    for r in &cfg.rounds {
        if r.subseq_len > dataset.num_steps || r.subseq_len < mcfg.encoder.initial_frames {
            return Err(Error::Config(format!("subsequence length {} incompatible with {} steps", r.subseq_len, dataset.num_steps)));
        }
    }
    if mcfg.globals == GlobalMode::Latent && dataset.num_steps < mcfg.encoder.global_frames {
        return Err(Error::Input("sequences are shorter than the global-encoder prefix".into()));
    }
    let p = dataset.num_sequences;
    let b = cfg.batch_size.clamp(1, p);
    let kl_scale = b as f64 / p as f64;
    let mut history = Vec::new();
    let mut failures = 0;
    for (round_idx, round) in cfg.rounds.iter().enumerate().skip(state.round) {
        for it in 0..round.iterations {
            let rng = &mut state.rng;
            let seqs: Vec<usize> = sample_indices(rng, p, b).into_vec();
            let start = rng.random_range(0..=dataset.num_steps - round.subseq_len);
            let batch = Batch::from_dataset(dataset, &mcfg, &seqs, start, round.subseq_len)?;
            let step = mc_elbo(&state.model, &batch, cfg.train_samples, kl_scale, rng).and_then(|(parts, mut grads)| {
                if !parts.is_finite() {
                    return Err(Error::Training(format!("non-finite ELBO {parts:?}")));
                }
                grads.scale(-1.0);
                grads.densify(&state.model.store);
                state.adam.step(&mut state.model.store, &grads)?;
                Ok(parts)
            });
            match step {
                Ok(parts) => {
                    failures = 0;
                    if cfg.log_every > 0 && it % cfg.log_every == 0 {
                        log::info!("round {round_idx} iter {it}: elbo {:.3} ell {:.3} kl_u {:.3}", parts.elbo(), parts.ell, parts.kl_u);
                    }
                    history.push(HistoryEntry { round: round_idx, iteration: it, parts, elbo: parts.elbo() });
                }
                Err(e) => {
                    failures += 1;
                    log::warn!("round {round_idx} iter {it}: step skipped ({e})");
                    if failures >= 3 {
                        return Err(Error::Training(format!(
                            "three consecutive failed steps ending at round {round_idx} iteration {it}: {e}"
                        )));
                    }
                }
            }
        }
        state.round = round_idx + 1;
        if let Some(path) = &cfg.checkpoint {
            crate::evaluation::Checkpoint::from_state(&state).save(path)?;
        }
    }
    Ok((state, history))
}

/// Predictive samples `[L][N][rows][O]` of the noise-free observation path.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub samples: Tensor,
    pub sequences: usize,
    pub num_objects: usize,
}

impl Prediction {
    pub fn num_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn num_steps(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn obs_dim(&self) -> usize {
        self.samples.shape()[3]
    }

    /// Value of sample `l` at step `n`, row `r`, dim `o`.
    pub fn at(&self, l: usize, n: usize, r: usize, o: usize) -> f64 {
        let s = self.samples.shape();
        self.samples.data()[((l * s[1] + n) * s[2] + r) * s[3] + o]
    }
}

/// Encodes the prefix of `seqs`, draws `samples` functions and rolls each
/// out over `num_steps` grid points.
pub fn predict(model: &Model, ds: &Dataset, seqs: &[usize], num_steps: usize, samples: usize, rng: &mut Rng) -> Result<Prediction> {
    let cfg = &model.config;
    let prefix = cfg.prefix_len();
    if ds.num_steps < prefix {
        return Err(Error::Input(format!("prediction needs a {prefix}-frame prefix, sequences have {}", ds.num_steps)));
    }
    let batch = Batch::from_dataset(ds, cfg, seqs, 0, prefix)?;
    predict_batch(model, &batch, num_steps, samples, rng)
}

pub fn predict_batch(model: &Model, batch: &Batch, num_steps: usize, samples: usize, rng: &mut Rng) -> Result<Prediction> {
    predict_batch_with(model, batch, num_steps, samples, false, rng)
}

/// As [`predict_batch`]; with `kinematics_only` the interaction sum is dropped.
pub fn predict_batch_with(
    model: &Model,
    batch: &Batch,
    num_steps: usize,
    samples: usize,
    kinematics_only: bool,
    rng: &mut Rng,
) -> Result<Prediction> {
    if samples == 0 || num_steps == 0 {
        return Err(Error::Contract("prediction needs at least one sample and one step".into()));
    }
    let cfg = &model.config;
    if batch.frames.len() < cfg.encoder.initial_frames {
        return Err(Error::Input(format!("prediction needs {} prefix frames, got {}", cfg.encoder.initial_frames, batch.frames.len())));
    }
    let rows = batch.sequences * cfg.num_objects;
    let obs = cfg.obs_dim;
    let rngs: Vec<Rng> = (0..samples).map(|_| fork(rng)).collect();
    let paths: Vec<Result<Vec<f64>>> = rngs
        .into_par_iter()
        .map(|mut r| {
            let tape = Tape::new();
            let store = &model.store;
            let frames = frames_on_tape(&tape, &batch.frames);
            let h1 = model.initial.encode(&tape, store, &frames)?.reparameterize(&mut r)?;
            let c = match (cfg.globals, &model.global) {
                (GlobalMode::Latent, Some(enc)) => {
                    let gf = batch.global_frames.as_ref().ok_or_else(|| Error::Input("missing global-encoder prefix".into()))?;
                    Some(enc.encode(&tape, store, &frames_on_tape(&tape, gf))?.reparameterize(&mut r)?)
                }
                (GlobalMode::Observed, _) => Some(tape.constant(batch.globals.clone().ok_or_else(|| Error::Input("missing globals".into()))?)),
                _ => None,
            };
            let mut drift = model.drift.sample(&tape, store, batch.sequences, &mut r)?;
            if kinematics_only {
                drift = drift.kinematics_only();
            }
            let grid = TimeGrid::uniform(num_steps, batch.dt, cfg.substeps)?;
            let traj = rk4_rollout(h1, &grid, |h| drift.eval(h, c))?;
            let mut out = Vec::with_capacity(num_steps * rows * obs);
            for h in traj {
                let v = h.value();
                for row in 0..rows {
                    out.extend_from_slice(&v.row(row)[..obs]);
                }
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(samples * num_steps * rows * obs);
    for p in paths {
        data.extend(p?);
    }
    Ok(Prediction { samples: Tensor::new(vec![samples, num_steps, rows, obs], data)?, sequences: batch.sequences, num_objects: cfg.num_objects })
}
