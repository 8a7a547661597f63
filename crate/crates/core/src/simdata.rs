//! Ground-truth simulators for bouncing balls and charged particles, noise
//! injection, and the `IGPD` binary dataset format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IGPD"
//! 4       4     version (u32, currently 1)
//! 8       8×5   P, N, A, O, C_dim (u64)
//! 48      8     dt (f64)
//! 56      4     flags (u32): bit 0 globals, bit 1 clean copy, bit 2 positions only
//! 60      8×2   sigma_s, sigma_v (f64)
//! 76      ...   observations [P][N][A][O] f64
//!               clean observations [P][N][A][O] f64   (if bit 1)
//!               globals [P][A][C_dim] f64             (if bit 0)
//! ```

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{fork, seeded, Rng, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IGPD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 76;
const FLAG_GLOBALS: u32 = 1;
const FLAG_CLEAN: u32 = 2;
const FLAG_POSITIONS_ONLY: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    #[default]
    None,
    Low,
    High,
}

impl NoiseLevel {
    /// Observation noise standard deviations `(σ_s, σ_v)`.
    pub fn sigmas(self) -> (f64, f64) {
        match self {
            NoiseLevel::None => (0.0, 0.0),
            NoiseLevel::Low => (0.15, 0.02),
            NoiseLevel::High => (0.30, 0.04),
        }
    }
}

/// Trajectory data `[P][N][A][O]` with optional ground truth and globals.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_sequences: usize,
    pub num_steps: usize,
    pub num_objects: usize,
    pub obs_dim: usize,
    pub global_dim: usize,
    pub dt: f64,
    pub positions_only: bool,
    pub sigma_s: f64,
    pub sigma_v: f64,
    pub observations: Vec<f64>,
    /// Noise-free copy of `observations`, used as evaluation targets.
    pub clean: Option<Vec<f64>>,
    /// `[P][A][C_dim]`
    pub globals: Option<Vec<f64>>,
}

impl Dataset {
    pub fn empty(num_steps: usize, num_objects: usize, obs_dim: usize, dt: f64) -> Self {
        Dataset {
            num_sequences: 0,
            num_steps,
            num_objects,
            obs_dim,
            global_dim: 0,
            dt,
            positions_only: false,
            sigma_s: 0.0,
            sigma_v: 0.0,
            observations: Vec::new(),
            clean: None,
            globals: None,
        }
    }

    fn frame_len(&self) -> usize {
        self.num_objects * self.obs_dim
    }

    fn seq_len(&self) -> usize {
        self.num_steps * self.frame_len()
    }

    fn check(&self) -> Result<()> {
        let n = self.num_sequences * self.seq_len();
        if self.observations.len() != n {
            return Err(Error::Input(format!("observations hold {} values, header implies {n}", self.observations.len())));
        }
        if let Some(c) = &self.clean {
            if c.len() != n {
                return Err(Error::Input("clean copy does not match observations".into()));
            }
        }
        if let Some(g) = &self.globals {
            if g.len() != self.num_sequences * self.num_objects * self.global_dim {
                return Err(Error::Input("globals do not match header".into()));
            }
        }
        Ok(())
    }

    /// Observation of object `a` of sequence `p` at step `n`.
    pub fn observation(&self, p: usize, n: usize, a: usize) -> &[f64] {
        let i = p * self.seq_len() + n * self.frame_len() + a * self.obs_dim;
        &self.observations[i..i + self.obs_dim]
    }

    /// Ground truth if stored, otherwise the observations.
    pub fn targets(&self) -> &[f64] {
        self.clean.as_deref().unwrap_or(&self.observations)
    }

    /// Frames `start..start+len` of the given sequences, each a
    /// `(|seqs|·A) × O` matrix.
    pub fn batch_frames(&self, seqs: &[usize], start: usize, len: usize, clean: bool) -> Result<Vec<Tensor>> {
        if start + len > self.num_steps {
            return Err(Error::Input(format!("window {start}+{len} exceeds {} steps", self.num_steps)));
        }
        let src = if clean { self.targets() } else { &self.observations };
        let fl = self.frame_len();
        (start..start + len)
            .map(|n| {
                let mut data = Vec::with_capacity(seqs.len() * fl);
                for &p in seqs {
                    let i = p * self.seq_len() + n * fl;
                    data.extend_from_slice(&src[i..i + fl]);
                }
                Tensor::matrix(seqs.len() * self.num_objects, self.obs_dim, data)
            })
            .collect()
    }

    /// Globals of the given sequences as a `(|seqs|·A) × C_dim` matrix.
    pub fn batch_globals(&self, seqs: &[usize]) -> Option<Tensor> {
        let g = self.globals.as_ref()?;
        let per = self.num_objects * self.global_dim;
        let data = seqs.iter().flat_map(|&p| g[p * per..(p + 1) * per].iter().copied()).collect();
        Tensor::matrix(seqs.len() * self.num_objects, self.global_dim, data).ok()
    }

    /// Keeps sequences `range` only.
    pub fn subset(&self, seqs: &[usize]) -> Dataset {
        let take = |v: &[f64], per: usize| seqs.iter().flat_map(|&p| v[p * per..(p + 1) * per].iter().copied()).collect::<Vec<_>>();
        Dataset {
            num_sequences: seqs.len(),
            observations: take(&self.observations, self.seq_len()),
            clean: self.clean.as_ref().map(|c| take(c, self.seq_len())),
            globals: self.globals.as_ref().map(|g| take(g, self.num_objects * self.global_dim)),
            ..self.clone()
        }
    }

    /// Keeps the first `n` time steps.
    pub fn truncate_steps(&self, n: usize) -> Dataset {
        let n = n.min(self.num_steps);
        let fl = self.frame_len();
        let cut = |v: &[f64]| (0..self.num_sequences).flat_map(|p| v[p * self.seq_len()..p * self.seq_len() + n * fl].iter().copied()).collect();
        Dataset {
            num_steps: n,
            observations: cut(&self.observations),
            clean: self.clean.as_ref().map(|c| cut(c)),
            ..self.clone()
        }
    }

    /// Drops the velocity columns, leaving the two position coordinates.
    pub fn positions(&self) -> Dataset {
        if self.positions_only || self.obs_dim <= 2 {
            return self.clone();
        }
        let keep = |v: &[f64]| v.chunks(self.obs_dim).flat_map(|c| c[..2].iter().copied()).collect::<Vec<_>>();
        Dataset {
            obs_dim: 2,
            positions_only: true,
            sigma_v: 0.0,
            observations: keep(&self.observations),
            clean: self.clean.as_ref().map(|c| keep(c)),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.observations.len() * 2);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.num_sequences, self.num_steps, self.num_objects, self.obs_dim, self.global_dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.dt.to_le_bytes());
        let mut flags = 0;
        if self.globals.is_some() {
            flags |= FLAG_GLOBALS;
        }
        if self.clean.is_some() {
            flags |= FLAG_CLEAN;
        }
        if self.positions_only {
            flags |= FLAG_POSITIONS_ONLY;
        }
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&self.sigma_s.to_le_bytes());
        out.extend_from_slice(&self.sigma_v.to_le_bytes());
        let blocks = std::iter::once(&self.observations).chain(self.clean.as_ref()).chain(self.globals.as_ref());
        for block in blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, detail: format!("bad magic {magic:?}") });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}") });
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let [p, n, a, o, c] = dims;
        let dt = r.f64()?;
        let flags = r.u32()?;
        let sigma_s = r.f64()?;
        let sigma_v = r.f64()?;
        let count = p
            .checked_mul(n)
            .and_then(|v| v.checked_mul(a))
            .and_then(|v| v.checked_mul(o))
            .ok_or(Error::Format { offset: 8, detail: "dimension overflow".into() })?;
        let globals_count = p * a * c;
        let mut expected = HEADER_LEN + 8 * count;
        if flags & FLAG_CLEAN != 0 {
            expected += 8 * count;
        }
        if flags & FLAG_GLOBALS != 0 {
            expected += 8 * globals_count;
        }
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected),
                detail: format!("file has {} bytes, header implies {expected}", bytes.len()),
            });
        }
        let observations = r.f64s(count)?;
        let clean = if flags & FLAG_CLEAN != 0 { Some(r.f64s(count)?) } else { None };
        let globals = if flags & FLAG_GLOBALS != 0 { Some(r.f64s(globals_count)?) } else { None };
        Ok(Dataset {
            num_sequences: p,
            num_steps: n,
            num_objects: a,
            obs_dim: o,
            global_dim: c,
            dt,
            positions_only: flags & FLAG_POSITIONS_ONLY != 0,
            sigma_s,
            sigma_v,
            observations,
            clean,
            globals,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format { offset: self.pos, detail: format!("truncated: need {n} more bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BallsConfig {
    pub num_objects: usize,
    pub half_width: f64,
    pub radius: f64,
    pub num_sequences: usize,
    pub num_steps: usize,
    pub dt: f64,
    pub inner_steps: usize,
    pub max_speed: f64,
    pub noise: NoiseLevel,
    pub positions_only: bool,
}

impl Default for BallsConfig {
    fn default() -> Self {
        BallsConfig {
            num_objects: 3,
            half_width: 4.0,
            radius: 0.3,
            num_sequences: 100,
            num_steps: 100,
            dt: 0.5,
            inner_steps: 50,
            max_speed: 0.49,
            noise: NoiseLevel::None,
            positions_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChargesConfig {
    pub num_objects: usize,
    pub half_width: f64,
    pub num_sequences: usize,
    pub num_steps: usize,
    pub dt: f64,
    pub inner_steps: usize,
    /// Initial positions uniform in `±init_extent`.
    pub init_extent: f64,
    /// Initial velocity components `N(0, init_speed²)`.
    pub init_speed: f64,
    pub force_cap: f64,
    pub noise: NoiseLevel,
    pub positions_only: bool,
}

impl Default for ChargesConfig {
    fn default() -> Self {
        ChargesConfig {
            num_objects: 5,
            half_width: 5.0,
            num_sequences: 500,
            num_steps: 100,
            dt: 0.05,
            inner_steps: 100,
            init_extent: 2.5,
            init_speed: 0.5,
            force_cap: 10.0,
            noise: NoiseLevel::None,
            positions_only: false,
        }
    }
}

/// Full state of one simulated system: positions and velocities per object.
#[derive(Clone, Debug, PartialEq)]
pub struct Particles {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
}

impl Particles {
    pub fn kinetic_energy(&self) -> f64 {
        self.vel.iter().map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1])).sum()
    }

    pub fn momentum(&self) -> [f64; 2] {
        self.vel.iter().fold([0.0, 0.0], |m, v| [m[0] + v[0], m[1] + v[1]])
    }
}

/// Reflects positions and velocities off the walls at `±limit`.
fn reflect_walls(p: &mut Particles, limit: f64) -> bool {
    let mut hit = false;
    for (s, v) in p.pos.iter_mut().zip(p.vel.iter_mut()) {
        for k in 0..2 {
            if s[k] > limit {
                s[k] = 2.0 * limit - s[k];
                v[k] = -v[k].abs();
                hit = true;
            } else if s[k] < -limit {
                s[k] = -2.0 * limit - s[k];
                v[k] = v[k].abs();
                hit = true;
            }
        }
    }
    hit
}

/// One inner step of free flight with elastic ball–ball and ball–wall collisions.
pub fn balls_step(p: &mut Particles, h: f64, radius: f64, half_width: f64) {
    for (s, v) in p.pos.iter_mut().zip(&p.vel) {
        s[0] += h * v[0];
        s[1] += h * v[1];
    }
    let n = p.pos.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = [p.pos[i][0] - p.pos[j][0], p.pos[i][1] - p.pos[j][1]];
            let dist2 = d[0] * d[0] + d[1] * d[1];
            if dist2 >= 4.0 * radius * radius || dist2 == 0.0 {
                continue;
            }
            let rel = [p.vel[i][0] - p.vel[j][0], p.vel[i][1] - p.vel[j][1]];
            let approach = rel[0] * d[0] + rel[1] * d[1];
            if approach >= 0.0 {
                continue;
            }
            // equal masses: exchange the normal velocity components
            let k = approach / dist2;
            for c in 0..2 {
                p.vel[i][c] -= k * d[c];
                p.vel[j][c] += k * d[c];
            }
        }
    }
    reflect_walls(p, half_width - radius);
}

/// Symplectic-Euler step under clamped inverse-square Coulomb forces.
/// Returns whether any particle touched a wall.
pub fn charges_step(p: &mut Particles, charges: &[f64], h: f64, cap: f64, half_width: f64) -> bool {
    let n = p.pos.len();
    let mut acc = vec![[0.0f64; 2]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = [p.pos[i][0] - p.pos[j][0], p.pos[i][1] - p.pos[j][1]];
            let r = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
            let qq = charges[i] * charges[j];
            let mag = (qq.abs() / (r * r)).min(cap) * qq.signum();
            for c in 0..2 {
                let f = mag * d[c] / r;
                acc[i][c] += f;
                acc[j][c] -= f;
            }
        }
    }
    for ((s, v), a) in p.pos.iter_mut().zip(p.vel.iter_mut()).zip(&acc) {
        for c in 0..2 {
            v[c] += h * a[c];
            s[c] += h * v[c];
        }
    }
    reflect_walls(p, half_width)
}

fn place_balls(cfg: &BallsConfig, rng: &mut Rng) -> Result<Particles> {
    let limit = cfg.half_width - cfg.radius;
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(cfg.num_objects);
    let mut retries = 0;
    while pos.len() < cfg.num_objects {
        let cand = [rng.random_range(-limit..limit), rng.random_range(-limit..limit)];
        if pos.iter().all(|q| (q[0] - cand[0]).hypot(q[1] - cand[1]) > 2.0 * cfg.radius) {
            pos.push(cand);
        } else {
            retries += 1;
            if retries >= 100 {
                return Err(Error::Simulation(format!("could not place {} non-overlapping balls", cfg.num_objects)));
            }
        }
    }
    let vel = (0..cfg.num_objects)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = cfg.max_speed * rng.random_range(0.2..1.0);
            [speed * angle.cos(), speed * angle.sin()]
        })
        .collect();
    Ok(Particles { pos, vel })
}

fn record(p: &Particles, positions_only: bool, out: &mut Vec<f64>) {
    for (s, v) in p.pos.iter().zip(&p.vel) {
        out.extend_from_slice(s);
        if !positions_only {
            out.extend_from_slice(v);
        }
    }
}

fn add_noise(clean: &[f64], obs_dim: usize, sigma_s: f64, sigma_v: f64, rng: &mut Rng) -> Vec<f64> {
    let ns = Normal::new(0.0, sigma_s).unwrap();
    let nv = Normal::new(0.0, sigma_v).unwrap();
    clean
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let noise = if i % obs_dim < 2 { ns.sample(rng) } else { nv.sample(rng) };
            x + noise
        })
        .collect()
}

fn assemble(
    seqs: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)>,
    num_steps: usize,
    num_objects: usize,
    obs_dim: usize,
    global_dim: usize,
    dt: f64,
    positions_only: bool,
    noise: NoiseLevel,
) -> Dataset {
    let (sigma_s, sigma_v) = noise.sigmas();
    let mut ds = Dataset::empty(num_steps, num_objects, obs_dim, dt);
    ds.num_sequences = seqs.len();
    ds.positions_only = positions_only;
    ds.sigma_s = sigma_s;
    ds.sigma_v = sigma_v;
    ds.global_dim = global_dim;
    let mut clean = Vec::new();
    let mut globals = Vec::new();
    for (obs, cl, g) in seqs {
        ds.observations.extend(obs);
        clean.extend(cl);
        globals.extend(g.unwrap_or_default());
    }
    ds.clean = Some(clean);
    if global_dim > 0 {
        ds.globals = Some(globals);
    }
    ds
}

fn sequence_rngs(count: usize, seed: u64) -> Vec<Rng> {
    let mut master = seeded(seed);
    (0..count).map(|_| fork(&mut master)).collect()
}

pub fn simulate_balls(cfg: &BallsConfig, seed: u64) -> Result<Dataset> {
    if cfg.num_objects == 0 || cfg.inner_steps == 0 || !(cfg.dt > 0.0) || !(cfg.radius < cfg.half_width) {
        return Err(Error::Config(format!("invalid balls configuration {cfg:?}")));
    }
    let obs_dim = if cfg.positions_only { 2 } else { 4 };
    let (sigma_s, sigma_v) = cfg.noise.sigmas();
    let seqs = sequence_rngs(cfg.num_sequences, seed)
        .into_par_iter()
        .map(|mut rng| -> Result<_> {
            let mut p = place_balls(cfg, &mut rng)?;
            let h = cfg.dt / cfg.inner_steps as f64;
            let mut clean = Vec::with_capacity(cfg.num_steps * cfg.num_objects * obs_dim);
            for n in 0..cfg.num_steps {
                if n > 0 {
                    for _ in 0..cfg.inner_steps {
                        balls_step(&mut p, h, cfg.radius, cfg.half_width);
                    }
                }
                record(&p, cfg.positions_only, &mut clean);
            }
            let obs = add_noise(&clean, obs_dim, sigma_s, sigma_v, &mut rng);
            Ok((obs, clean, None))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(seqs, cfg.num_steps, cfg.num_objects, obs_dim, 0, cfg.dt, cfg.positions_only, cfg.noise))
}

pub fn simulate_charges(cfg: &ChargesConfig, seed: u64) -> Result<Dataset> {
    if cfg.num_objects == 0 || cfg.inner_steps == 0 || !(cfg.dt > 0.0) || !(cfg.init_extent < cfg.half_width) {
        return Err(Error::Config(format!("invalid charges configuration {cfg:?}")));
    }
    let obs_dim = if cfg.positions_only { 2 } else { 4 };
    let (sigma_s, sigma_v) = cfg.noise.sigmas();
    let speed = Normal::new(0.0, cfg.init_speed).map_err(|e| Error::Config(e.to_string()))?;
    let seqs = sequence_rngs(cfg.num_sequences, seed)
        .into_par_iter()
        .map(|mut rng| -> Result<_> {
            let a = cfg.num_objects;
            let charges: Vec<f64> = (0..a).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let e = cfg.init_extent;
            let pos = (0..a).map(|_| [rng.random_range(-e..e), rng.random_range(-e..e)]).collect();
            let vel = (0..a).map(|_| [speed.sample(&mut rng), speed.sample(&mut rng)]).collect();
            let mut p = Particles { pos, vel };
            let h = cfg.dt / cfg.inner_steps as f64;
            let mut clean = Vec::with_capacity(cfg.num_steps * a * obs_dim);
            for n in 0..cfg.num_steps {
                if n > 0 {
                    for _ in 0..cfg.inner_steps {
                        charges_step(&mut p, &charges, h, cfg.force_cap, cfg.half_width);
                    }
                }
                record(&p, cfg.positions_only, &mut clean);
            }
            if clean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Simulation("charges simulation diverged".into()));
            }
            let obs = add_noise(&clean, obs_dim, sigma_s, sigma_v, &mut rng);
            Ok((obs, clean, Some(charges)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(seqs, cfg.num_steps, cfg.num_objects, obs_dim, 1, cfg.dt, cfg.positions_only, cfg.noise))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_flight_is_straight() {
        let mut p = Particles { pos: vec![[0.0, 0.0]], vel: vec![[0.1, -0.05]] };
        for _ in 0..500 {
            balls_step(&mut p, 0.01, 0.3, 4.0);
        }
        assert!((p.vel[0][0] - 0.1).abs() < 1e-9 && (p.vel[0][1] + 0.05).abs() < 1e-9);
        assert!((p.pos[0][0] - 0.5).abs() < 1e-9 && (p.pos[0][1] + 0.25).abs() < 1e-9);
    }

    #[test]
    fn balls_conserve_energy_and_stay_inside() {
        let cfg = BallsConfig { num_sequences: 4, ..Default::default() };
        let ds = simulate_balls(&cfg, 3).unwrap();
        for p in 0..4 {
            let energy = |n: usize| (0..3).map(|a| {
                let o = ds.observation(p, n, a);
                0.5 * (o[2] * o[2] + o[3] * o[3])
            }).sum::<f64>();
            let e0 = energy(0);
            for n in 0..cfg.num_steps {
                assert!((energy(n) - e0).abs() <= 1e-3 * e0);
                for a in 0..3 {
                    let o = ds.observation(p, n, a);
                    assert!(o[0].abs() <= 4.0 && o[1].abs() <= 4.0);
                }
            }
        }
    }

    #[test]
    fn head_on_balls_exchange_velocity() {
        let mut p = Particles { pos: vec![[-1.0, 0.0], [1.0, 0.0]], vel: vec![[0.4, 0.0], [-0.2, 0.0]] };
        for _ in 0..1000 {
            balls_step(&mut p, 0.01, 0.3, 4.0);
        }
        assert!((p.vel[0][0] + 0.2).abs() < 1e-12 && (p.vel[1][0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn like_charges_repel_and_reverse() {
        let mut p = Particles { pos: vec![[-1.0, 0.0], [1.0, 0.0]], vel: vec![[0.8, 0.0], [-0.8, 0.0]] };
        let q = [1.0, 1.0];
        let mut min_gap = f64::INFINITY;
        let v0 = p.vel[0][0];
        charges_step(&mut p, &q, 0.001, 10.0, 5.0);
        assert!(p.vel[0][0] < v0, "decelerates");
        for _ in 0..4000 {
            charges_step(&mut p, &q, 0.001, 10.0, 5.0);
            min_gap = min_gap.min(p.pos[1][0] - p.pos[0][0]);
        }
        assert!(min_gap > 0.0);
        assert!(p.vel[0][0] < 0.0 && p.vel[1][0] > 0.0, "reversed: {:?}", p.vel);
    }

    #[test]
    fn opposite_charges_attract() {
        let mut p = Particles { pos: vec![[-2.0, 0.5], [2.0, -0.5]], vel: vec![[0.0; 2], [0.0; 2]] };
        let before = (p.pos[1][0] - p.pos[0][0]).hypot(p.pos[1][1] - p.pos[0][1]);
        charges_step(&mut p, &[1.0, -1.0], 0.0005, 10.0, 5.0);
        let after = (p.pos[1][0] - p.pos[0][0]).hypot(p.pos[1][1] - p.pos[0][1]);
        assert!(after < before);
    }

    #[test]
    fn pair_momentum_conserved_away_from_walls() {
        let mut p = Particles { pos: vec![[-0.5, 0.2], [0.6, -0.1]], vel: vec![[0.3, 0.1], [-0.1, 0.2]] };
        let m0 = p.momentum();
        for _ in 0..2000 {
            assert!(!charges_step(&mut p, &[1.0, -1.0], 0.0005, 10.0, 5.0));
        }
        let m1 = p.momentum();
        let norm = m0[0].hypot(m0[1]);
        assert!((m1[0] - m0[0]).hypot(m1[1] - m0[1]) <= 5e-3 * norm);
    }

    #[test]
    fn fixed_seed_is_reproducible_and_noise_leaves_truth() {
        let cfg = BallsConfig { num_sequences: 3, num_steps: 20, noise: NoiseLevel::Low, ..Default::default() };
        let a = simulate_balls(&cfg, 5).unwrap();
        let b = simulate_balls(&cfg, 5).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let clean = simulate_balls(&BallsConfig { noise: NoiseLevel::None, ..cfg.clone() }, 5).unwrap();
        assert_eq!(a.clean, clean.clean);
        assert_ne!(a.observations, clean.observations);
    }

    #[test]
    fn positions_only_and_globals() {
        let ds = simulate_balls(&BallsConfig { num_sequences: 1, num_steps: 5, positions_only: true, ..Default::default() }, 1).unwrap();
        assert_eq!(ds.obs_dim, 2);
        let ch = simulate_charges(&ChargesConfig { num_sequences: 2, num_steps: 10, ..Default::default() }, 2).unwrap();
        let g = ch.globals.as_ref().unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.iter().all(|&c| c == 1.0 || c == -1.0));
    }

    #[test]
    fn overcrowded_box_fails() {
        let cfg = BallsConfig { num_objects: 200, half_width: 1.0, num_sequences: 1, ..Default::default() };
        assert!(matches!(simulate_balls(&cfg, 0), Err(Error::Simulation(_))));
    }

    #[test]
    fn round_trip_and_format_errors() {
        let ds = simulate_charges(&ChargesConfig { num_sequences: 2, num_steps: 8, noise: NoiseLevel::High, ..Default::default() }, 4).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);

        let empty = Dataset::empty(10, 2, 4, 0.5);
        assert_eq!(Dataset::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Dataset::from_bytes(&ver), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_helpers() {
        let ds = simulate_charges(&ChargesConfig { num_objects: 3, num_sequences: 3, num_steps: 6, ..Default::default() }, 9).unwrap();
        let frames = ds.batch_frames(&[2, 0], 1, 3, false).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].shape(), &[6, 4]);
        assert_eq!(frames[0].row(4), ds.observation(0, 1, 1));
        let g = ds.batch_globals(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[6, 1]);
        assert!(ds.batch_frames(&[0], 4, 3, false).is_err());
        let sub = ds.subset(&[1]).truncate_steps(2);
        assert_eq!(sub.observation(0, 1, 2), ds.observation(1, 1, 2));
        let pos = ds.positions();
        assert_eq!((pos.obs_dim, pos.positions_only), (2, true));
        assert_eq!(pos.observation(2, 5, 1), &ds.observation(2, 5, 1)[..2]);
        assert_eq!(pos.positions(), pos);
    }
}
