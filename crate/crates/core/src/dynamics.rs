//! Drift functions `dH/dt` for systems of interacting objects.
//!
//! The interacting drift of object `a` is `f_s(h_a, c_a) + Σ_{a'∈N_a} f_b(pair(a, a'))`.
//! With a structured state `h = [s, v]` the position block of the
//! differential is the velocity itself and the functions output
//! accelerations. The non-interacting baseline instead applies one function
//! to the flattened state of all objects.
//!
//! States are processed in batches of `rows = batch · A`, object `a` of
//! sequence `b` living in row `b·A + a`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamStore, Rng, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::gp::{draw_pathwise, kl_for_draw, BoundGp, PathwiseFunction, SparseGp, SparseGpConfig};
use crate::nn::{BoundMlp, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    /// GP kinematics plus summed GP interactions.
    Igpode,
    /// One GP on the concatenated state of all objects.
    Gpode,
    /// Deterministic MLP kinematics plus summed MLP interactions.
    Inode,
}

impl DriftKind {
    pub fn is_gp(self) -> bool {
        !matches!(self, DriftKind::Inode)
    }
}

/// How the interaction function sees the two object states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// `[s_a − s_a', v_a, v_a', c_a, c_a']`
    Difference,
    /// `[h_a, h_a', c_a, c_a']`
    Absolute,
}

/// Directed neighbourhoods; `neighbors(a)` lists the senders into `a`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectGraph {
    neighbors: Vec<Vec<usize>>,
}

impl ObjectGraph {
    pub fn fully_connected(num_objects: usize) -> Self {
        let neighbors = (0..num_objects).map(|a| (0..num_objects).filter(|&b| b != a).collect()).collect();
        ObjectGraph { neighbors }
    }

    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (a, list) in neighbors.iter().enumerate() {
            if let Some(&bad) = list.iter().find(|&&b| b == a || b >= n) {
                return Err(Error::Config(format!("invalid neighbour {bad} of object {a}")));
            }
        }
        Ok(ObjectGraph { neighbors })
    }

    pub fn num_objects(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, a: usize) -> &[usize] {
        &self.neighbors[a]
    }

    /// Receiver and sender row indices of every edge over a batch.
    pub fn batched_edges(&self, batch: usize) -> (Rc<[usize]>, Rc<[usize]>) {
        let a_count = self.num_objects();
        let mut recv = Vec::new();
        let mut send = Vec::new();
        for b in 0..batch {
            for (a, list) in self.neighbors.iter().enumerate() {
                for &s in list {
                    recv.push(b * a_count + a);
                    send.push(b * a_count + s);
                }
            }
        }
        (recv.into(), send.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub kind: DriftKind,
    pub structured: bool,
    /// Per-object latent state dimension `D`.
    pub state_dim: usize,
    /// Per-object static feature dimension (0 when globals are off).
    pub global_dim: usize,
    pub pair_mode: PairMode,
    /// Fourier features per pathwise draw.
    pub num_features: usize,
    pub gp: SparseGpConfig,
    /// Sparse GP of the non-interacting baseline.
    pub flat_gp: SparseGpConfig,
    pub mlp_kinematics_width: usize,
    pub mlp_interaction_width: usize,
    pub mlp_hidden_layers: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            kind: DriftKind::Igpode,
            structured: true,
            state_dim: 4,
            global_dim: 0,
            pair_mode: PairMode::Difference,
            num_features: 256,
            gp: SparseGpConfig::default(),
            flat_gp: SparseGpConfig::default(),
            mlp_kinematics_width: 256,
            mlp_interaction_width: 512,
            mlp_hidden_layers: 2,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.structured && self.state_dim % 2 != 0 {
            return Err(Error::Config(format!("structured state needs an even dimension, got {}", self.state_dim)));
        }
        if !self.structured && self.pair_mode == PairMode::Difference && self.kind != DriftKind::Gpode {
            return Err(Error::Config("position differences need a structured state".into()));
        }
        if self.num_features == 0 && self.kind.is_gp() {
            return Err(Error::Config("random Fourier basis needs at least one feature".into()));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        if self.structured {
            self.state_dim / 2
        } else {
            self.state_dim
        }
    }

    /// Output dimension of `f_s`/`f_b`: accelerations or full differentials.
    pub fn out_dim(&self) -> usize {
        if self.structured {
            self.state_dim / 2
        } else {
            self.state_dim
        }
    }

    pub fn kinematics_in(&self) -> usize {
        self.state_dim + self.global_dim
    }

    pub fn interaction_in(&self) -> usize {
        match self.pair_mode {
            PairMode::Difference => self.pos_dim() + 2 * (self.state_dim - self.pos_dim()) + 2 * self.global_dim,
            PairMode::Absolute => 2 * self.state_dim + 2 * self.global_dim,
        }
    }
}

/// Parameters of one drift component.
#[derive(Clone, Debug, PartialEq)]
pub enum Component {
    Gp(SparseGp),
    Mlp(Mlp),
}

impl Component {
    fn init_gp(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, cfg: &SparseGpConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Component::Gp(SparseGp::init(store, name, d_in, d_out, cfg, rng)?))
    }

    fn init_mlp(store: &mut ParamStore, name: &str, d_in: usize, width: usize, layers: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![d_in];
        widths.extend(std::iter::repeat_n(width, layers));
        widths.push(d_out);
        Ok(Component::Mlp(Mlp::init(store, name, &widths, Unary::Softplus, rng)?))
    }
}

/// Drift parameters together with the object graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftModel {
    pub config: DriftConfig,
    pub graph: ObjectGraph,
    /// `f_s`, or the single flat function of the non-interacting baseline.
    pub kinematics: Component,
    pub interaction: Option<Component>,
}

impl DriftModel {
    pub fn init(store: &mut ParamStore, config: DriftConfig, graph: ObjectGraph, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let a = graph.num_objects();
        let out = config.out_dim();
        let (kinematics, interaction) = match config.kind {
            DriftKind::Igpode => (
                Component::init_gp(store, "drift.f_s", config.kinematics_in(), out, &config.gp, rng)?,
                Some(Component::init_gp(store, "drift.f_b", config.interaction_in(), out, &config.gp, rng)?),
            ),
            DriftKind::Gpode => (Component::init_gp(store, "drift.f", a * config.kinematics_in(), a * out, &config.flat_gp, rng)?, None),
            DriftKind::Inode => {
                let layers = config.mlp_hidden_layers;
                (
                    Component::init_mlp(store, "drift.f_s", config.kinematics_in(), config.mlp_kinematics_width, layers, out, rng)?,
                    Some(Component::init_mlp(store, "drift.f_b", config.interaction_in(), config.mlp_interaction_width, layers, out, rng)?),
                )
            }
        };
        Ok(DriftModel { config, graph, kinematics, interaction })
    }

    pub fn num_objects(&self) -> usize {
        self.graph.num_objects()
    }

    /// Draws concrete functions for one Monte-Carlo sample and prepares
    /// edge indices for `batch` sequences.
    pub fn sample<'a, 't>(&'a self, tape: &'t Tape, store: &ParamStore, batch: usize, rng: &mut Rng) -> Result<SampledDrift<'a, 't>> {
        let f = self.config.num_features;
        let draw = |c: &Component, rng: &mut Rng| -> Result<Sampled<'t>> {
            Ok(match c {
                Component::Gp(gp) => {
                    let bound = gp.bind(tape, store);
                    let path = draw_pathwise(&bound, f, rng)?;
                    Sampled::Gp(Box::new((bound, path)))
                }
                Component::Mlp(mlp) => Sampled::Mlp(mlp.bind(tape, store)),
            })
        };
        let kinematics = draw(&self.kinematics, rng)?;
        let interaction = self.interaction.as_ref().map(|c| draw(c, rng)).transpose()?;
        let (recv, send) = self.graph.batched_edges(batch);
        Ok(SampledDrift { model: self, kinematics, interaction, recv, send, batch, interactions_enabled: true })
    }
}

enum Sampled<'t> {
    Gp(Box<(BoundGp<'t>, PathwiseFunction<'t>)>),
    Mlp(BoundMlp<'t>),
}

impl<'t> Sampled<'t> {
    fn eval(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Sampled::Gp(b) => b.1.eval(x),
            Sampled::Mlp(m) => m.forward(x),
        }
    }

    fn kl(&self) -> Result<Option<Var<'t>>> {
        match self {
            Sampled::Gp(b) => kl_for_draw(&b.0, &b.1).map(Some),
            Sampled::Mlp(_) => Ok(None),
        }
    }
}

/// Drift with concrete functions for one Monte-Carlo sample. Evaluating it
/// is deterministic, so a whole trajectory sees one consistent function.
pub struct SampledDrift<'a, 't> {
    model: &'a DriftModel,
    kinematics: Sampled<'t>,
    interaction: Option<Sampled<'t>>,
    recv: Rc<[usize]>,
    send: Rc<[usize]>,
    batch: usize,
    interactions_enabled: bool,
}

impl<'a, 't> SampledDrift<'a, 't> {
    /// Drops the interaction sum, leaving the independent kinematics only.
    pub fn kinematics_only(mut self) -> Self {
        self.interactions_enabled = false;
        self
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Sum of the inducing KL terms of all GP components of this draw.
    pub fn kl(&self) -> Result<Option<Var<'t>>> {
        let mut total: Option<Var<'t>> = None;
        for part in std::iter::once(&self.kinematics).chain(self.interaction.as_ref()) {
            if let Some(kl) = part.kl()? {
                total = Some(match total {
                    Some(t) => t.add(kl)?,
                    None => kl,
                });
            }
        }
        Ok(total)
    }

    /// `dH/dt` for states `h` (`rows × D`) and optional globals `c` (`rows × C`).
    pub fn eval(&self, h: Var<'t>, c: Option<Var<'t>>) -> Result<Var<'t>> {
        let cfg = &self.model.config;
        let a = self.model.num_objects();
        let rows = self.batch * a;
        if h.shape() != [rows, cfg.state_dim] {
            return Err(Error::dim("drift", format!("state {:?}, expected [{rows}, {}]", h.shape(), cfg.state_dim)));
        }
        if let Some(c) = c {
            if c.shape() != [rows, cfg.global_dim] {
                return Err(Error::dim("drift", format!("globals {:?}, expected [{rows}, {}]", c.shape(), cfg.global_dim)));
            }
        }
        let input = match c {
            Some(c) if cfg.global_dim > 0 => h.tape().concat(&[h, c], 1)?,
            _ => h,
        };
        let force = if cfg.kind == DriftKind::Gpode {
            let flat = input.reshape(&[self.batch, a * input.shape()[1]])?;
            self.kinematics.eval(flat)?.reshape(&[rows, cfg.out_dim()])?
        } else {
            let mut total = self.kinematics.eval(input)?;
            if let (Some(fb), true, false) = (&self.interaction, self.interactions_enabled, self.recv.is_empty()) {
                let hr = h.gather_rows(self.recv.clone())?;
                let hs = h.gather_rows(self.send.clone())?;
                let (cr, cs) = match c {
                    Some(c) if cfg.global_dim > 0 => {
                        (Some(c.gather_rows(self.recv.clone())?), Some(c.gather_rows(self.send.clone())?))
                    }
                    _ => (None, None),
                };
                let feats = pair_features(hr, hs, cr, cs, cfg.pair_mode, cfg.structured)?;
                let messages = fb.eval(feats)?;
                total = total.add(messages.scatter_add_rows(self.recv.clone(), rows)?)?;
            }
            total
        };
        check_rows(&force, a)?;
        if cfg.structured {
            let half = cfg.state_dim / 2;
            h.tape().concat(&[h.slice(1, half, half)?, force], 1)
        } else {
            Ok(force)
        }
    }
}

fn check_rows(v: &Var<'_>, objects: usize) -> Result<()> {
    let val = v.value();
    if val.is_finite() {
        return Ok(());
    }
    let cols = val.cols().max(1);
    let row = val.data().iter().position(|x| !x.is_finite()).unwrap_or(0) / cols;
    Err(Error::Drift { object: row % objects.max(1) })
}

/// Features of ordered object pairs, one row per pair.
///
/// Under [`PairMode::Difference`] positions enter only through `s_r − s_s`,
/// so translating all objects leaves the features unchanged.
pub fn pair_features<'t>(
    h_recv: Var<'t>,
    h_send: Var<'t>,
    c_recv: Option<Var<'t>>,
    c_send: Option<Var<'t>>,
    mode: PairMode,
    structured: bool,
) -> Result<Var<'t>> {
    let tape = h_recv.tape();
    let d = h_recv.shape()[1];
    let mut parts = match mode {
        PairMode::Difference => {
            if !structured {
                return Err(Error::Config("position differences need a structured state".into()));
            }
            let p = d / 2;
            let ds = h_recv.slice(1, 0, p)?.sub(h_send.slice(1, 0, p)?)?;
            vec![ds, h_recv.slice(1, p, d - p)?, h_send.slice(1, p, d - p)?]
        }
        PairMode::Absolute => vec![h_recv, h_send],
    };
    parts.extend(c_recv);
    parts.extend(c_send);
    tape.concat(&parts, 1)
}

/// Pair feature vector for objects `a ← b` of a single configuration.
pub fn pair_feature_vector(h: &Tensor, c: Option<&Tensor>, a: usize, b: usize, mode: PairMode) -> Vec<f64> {
    let d = h.cols();
    let (ha, hb) = (h.row(a), h.row(b));
    let mut out = match mode {
        PairMode::Difference => {
            let p = d / 2;
            let mut v: Vec<f64> = (0..p).map(|k| ha[k] - hb[k]).collect();
            v.extend_from_slice(&ha[p..]);
            v.extend_from_slice(&hb[p..]);
            v
        }
        PairMode::Absolute => [ha, hb].concat(),
    };
    if let Some(c) = c {
        out.extend_from_slice(c.row(a));
        out.extend_from_slice(c.row(b));
    }
    out
}

/// Covariance of the summed interaction term between object `p` of
/// configuration `h_p` and object `r` of configuration `h_r`:
/// `Σ_{p'∈N_p} Σ_{r'∈N_r} k_b(pair(p,p'), pair(r,r'))`.
#[allow(clippy::too_many_arguments)]
pub fn induced_kernel(
    h_p: &Tensor,
    p: usize,
    h_r: &Tensor,
    r: usize,
    graph: &ObjectGraph,
    lengthscales: &[f64],
    variance: f64,
    mode: PairMode,
) -> f64 {
    let mut total = 0.0;
    for &pn in graph.neighbors(p) {
        let xp = pair_feature_vector(h_p, None, p, pn, mode);
        for &rn in graph.neighbors(r) {
            let xr = pair_feature_vector(h_r, None, r, rn, mode);
            let sq: f64 = xp.iter().zip(&xr).zip(lengthscales).map(|((u, v), l)| ((u - v) / l).powi(2)).sum();
            total += variance * (-0.5 * sq).exp();
        }
    }
    total
}
