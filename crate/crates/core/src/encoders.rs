//! Amortized GRU encoders for initial states and static per-object latents.
//!
//! Both encoders run per object with shared weights; frames are batched
//! over rows (`rows = batch · A`), each frame a `rows × O` matrix.

use serde::{Deserialize, Serialize};

use crate::diffmath::{randn, ParamStore, Rng, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::gp::kl_diag_gaussian_vs_standard;
use crate::nn::{GruCell, Mlp};

/// Diagonal Gaussian over a latent block, one row per object.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> GaussianPosterior<'t> {
    /// `mean + exp(½·log_var) ⊙ ε`.
    pub fn reparameterize(&self, rng: &mut Rng) -> Result<Var<'t>> {
        let eps = self.mean.tape().constant(randn(&self.mean.shape(), rng));
        self.mean.add(self.log_var.scale(0.5).exp().mul(eps)?)
    }

    /// `KL(q ‖ N(0, I))` summed over all entries.
    pub fn kl_standard(&self) -> Result<Var<'t>> {
        kl_diag_gaussian_vs_standard(self.mean, self.log_var)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub initial_hidden: usize,
    pub initial_frames: usize,
    pub initial_head_width: usize,
    pub global_hidden: usize,
    pub global_frames: usize,
    pub global_head_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            initial_hidden: 10,
            initial_frames: 5,
            initial_head_width: 50,
            global_hidden: 25,
            global_frames: 49,
            global_head_width: 50,
        }
    }
}

/// Reads the first frames in reverse order and emits `q(h_1)`.
///
/// For a structured state the final hidden state is split into two halves:
/// the first feeds the position head, the second the velocity head.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialEncoder {
    pub gru: GruCell,
    pub heads: Vec<(Mlp, usize)>,
    pub frames: usize,
    pub state_dim: usize,
}

impl InitialEncoder {
    pub fn init(store: &mut ParamStore, obs_dim: usize, state_dim: usize, structured: bool, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = cfg.initial_hidden;
        let gru = GruCell::init(store, "enc_h1.gru", obs_dim, hidden, rng);
        let heads = if structured {
            if hidden < 2 || state_dim % 2 != 0 {
                return Err(Error::Config("structured initial encoder needs hidden ≥ 2 and an even state".into()));
            }
            let chunk = hidden / 2;
            let half = state_dim / 2;
            vec![
                (Mlp::init(store, "enc_h1.pos", &[chunk, cfg.initial_head_width, 2 * half], Unary::Relu, rng)?, chunk),
                (Mlp::init(store, "enc_h1.vel", &[chunk, cfg.initial_head_width, 2 * half], Unary::Relu, rng)?, chunk),
            ]
        } else {
            vec![(Mlp::init(store, "enc_h1.head", &[hidden, cfg.initial_head_width, 2 * state_dim], Unary::Relu, rng)?, hidden)]
        };
        Ok(InitialEncoder { gru, heads, frames: cfg.initial_frames, state_dim })
    }

    /// `frames[0]` is the first observation; only `frames[..self.frames]` are read.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: &[Var<'t>]) -> Result<GaussianPosterior<'t>> {
        if frames.len() < self.frames {
            return Err(Error::Input(format!("initial encoder needs {} frames, got {}", self.frames, frames.len())));
        }
        let reversed: Vec<Var<'t>> = frames[..self.frames].iter().rev().copied().collect();
        let h = self.gru.run(tape, store, &reversed)?;
        let mut means = Vec::new();
        let mut log_vars = Vec::new();
        let mut offset = 0;
        for (mlp, width) in &self.heads {
            let out = mlp.forward(tape, store, h.slice(1, offset, *width)?)?;
            let k = out.shape()[1] / 2;
            means.push(out.slice(1, 0, k)?);
            log_vars.push(out.slice(1, k, k)?);
            offset += width;
        }
        Ok(GaussianPosterior { mean: tape.concat(&means, 1)?, log_var: tape.concat(&log_vars, 1)? })
    }
}

/// Reads a long prefix forward and emits `q(c)` for a static per-object latent.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEncoder {
    pub gru: GruCell,
    pub head: Mlp,
    pub frames: usize,
    pub global_dim: usize,
}

impl GlobalEncoder {
    pub fn init(store: &mut ParamStore, obs_dim: usize, global_dim: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let gru = GruCell::init(store, "enc_c.gru", obs_dim, cfg.global_hidden, rng);
        let head = Mlp::init(store, "enc_c.head", &[cfg.global_hidden, cfg.global_head_width, 2 * global_dim], Unary::Elu, rng)?;
        Ok(GlobalEncoder { gru, head, frames: cfg.global_frames, global_dim })
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: &[Var<'t>]) -> Result<GaussianPosterior<'t>> {
        if frames.len() < self.frames {
            return Err(Error::Input(format!("global encoder needs {} frames, got {}", self.frames, frames.len())));
        }
        let h = self.gru.run(tape, store, &frames[..self.frames])?;
        let out = self.head.forward(tape, store, h)?;
        let k = self.global_dim;
        Ok(GaussianPosterior { mean: out.slice(1, 0, k)?, log_var: out.slice(1, k, k)? })
    }
}

/// Splits `[frames][rows][obs]` data into per-frame constants on a tape.
pub fn frames_on_tape<'t>(tape: &'t Tape, frames: &[Tensor]) -> Vec<Var<'t>> {
    frames.iter().map(|f| tape.constant(f.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::seeded;

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    fn frames(n: usize, rows: usize, obs: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = seeded(seed);
        (0..n).map(|_| randn(&[rows, obs], &mut rng)).collect()
    }

    #[test]
    fn zero_weights_give_standard_normal() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::default();
        let enc = InitialEncoder::init(&mut store, 4, 4, true, &cfg, &mut seeded(0)).unwrap();
        let genc = GlobalEncoder::init(&mut store, 4, 1, &cfg, &mut seeded(1)).unwrap();
        zero_all(&mut store);
        let tape = Tape::new();
        let ys = frames_on_tape(&tape, &frames(49, 3, 4, 2));
        for q in [enc.encode(&tape, &store, &ys).unwrap(), genc.encode(&tape, &store, &ys).unwrap()] {
            assert!(q.mean.to_tensor().data().iter().all(|&v| v == 0.0));
            assert!(q.log_var.to_tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_weights_and_prefix_only() {
        let mut store = ParamStore::new();
        let enc = InitialEncoder::init(&mut store, 4, 4, true, &EncoderConfig::default(), &mut seeded(3)).unwrap();
        let mut ys = frames(8, 2, 4, 4);
        // make both objects observe the same stream
        for f in ys.iter_mut() {
            let r0 = f.row(0).to_vec();
            for (k, v) in r0.into_iter().enumerate() {
                f.set(1, k, v);
            }
        }
        let tape = Tape::new();
        let q = enc.encode(&tape, &store, &frames_on_tape(&tape, &ys)).unwrap();
        let m = q.mean.to_tensor();
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m.shape(), &[2, 4]);

        let mut later = ys.clone();
        for f in later.iter_mut().skip(5) {
            *f = Tensor::full(f.shape(), 9.0);
        }
        let q2 = enc.encode(&tape, &store, &frames_on_tape(&tape, &later)).unwrap();
        assert_eq!(q2.mean.to_tensor(), m);
        assert_eq!(q2.log_var.to_tensor(), q.log_var.to_tensor());
    }

    #[test]
    fn short_prefix_rejected() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::default();
        let enc = InitialEncoder::init(&mut store, 2, 4, true, &cfg, &mut seeded(5)).unwrap();
        let genc = GlobalEncoder::init(&mut store, 2, 1, &cfg, &mut seeded(6)).unwrap();
        let tape = Tape::new();
        let ys = frames_on_tape(&tape, &frames(4, 1, 2, 7));
        assert!(matches!(enc.encode(&tape, &store, &ys), Err(Error::Input(_))));
        let ys = frames_on_tape(&tape, &frames(48, 1, 2, 7));
        assert!(matches!(genc.encode(&tape, &store, &ys), Err(Error::Input(_))));
    }

    #[test]
    fn global_encoder_is_deterministic() {
        let mut store = ParamStore::new();
        let genc = GlobalEncoder::init(&mut store, 4, 1, &EncoderConfig::default(), &mut seeded(8)).unwrap();
        let ys = frames(49, 5, 4, 9);
        let run = || {
            let tape = Tape::new();
            let q = genc.encode(&tape, &store, &frames_on_tape(&tape, &ys)).unwrap();
            (q.mean.to_tensor(), q.log_var.to_tensor())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reparameterize_limits_and_moments() {
        let tape = Tape::new();
        let mean = tape.constant(Tensor::vector(vec![1.5, -0.5]));
        let tight = GaussianPosterior { mean, log_var: tape.constant(Tensor::full(&[2], -800.0)) };
        assert_eq!(tight.reparameterize(&mut seeded(1)).unwrap().to_tensor(), mean.to_tensor());

        let n = 10_000;
        let q = GaussianPosterior {
            mean: tape.constant(Tensor::full(&[n], 0.3)),
            log_var: tape.constant(Tensor::full(&[n], 0.8f64.ln())),
        };
        let s = q.reparameterize(&mut seeded(2)).unwrap().to_tensor();
        let mu = s.sum() / n as f64;
        let var = s.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mu - 0.3).abs() < 4.0 * (0.8f64 / n as f64).sqrt());
        assert!((var - 0.8).abs() < 4.0 * 0.8 * (2.0 / n as f64).sqrt());

        let a = q.reparameterize(&mut seeded(3)).unwrap().to_tensor();
        let b = q.reparameterize(&mut seeded(3)).unwrap().to_tensor();
        assert_eq!(a, b);
    }

    #[test]
    fn global_sample_mean_matches_posterior_mean() {
        let mut store = ParamStore::new();
        let genc = GlobalEncoder::init(&mut store, 4, 1, &EncoderConfig::default(), &mut seeded(10)).unwrap();
        let ys = frames(49, 1, 4, 11);
        let tape = Tape::new();
        let q = genc.encode(&tape, &store, &frames_on_tape(&tape, &ys)).unwrap();
        let (mu, sd) = (q.mean.item(), (0.5 * q.log_var.item()).exp());
        let mut rng = seeded(12);
        let n = 10_000;
        let mean = (0..n).map(|_| q.reparameterize(&mut rng).unwrap().item()).sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 4.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let enc = InitialEncoder::init(&mut store, 2, 4, true, &EncoderConfig::default(), &mut seeded(13)).unwrap();
        let ys = frames(5, 2, 2, 14);
        let kl = |store: &ParamStore| {
            let tape = Tape::new();
            let q = enc.encode(&tape, store, &frames_on_tape(&tape, &ys)).unwrap();
            let v = q.kl_standard().unwrap();
            (v.item(), tape.grad(v).unwrap())
        };
        let (_, grads) = kl(&store);
        for id in enc.gru.param_ids() {
            let g = grads.get(id).unwrap().clone();
            for i in (0..g.len()).step_by(7) {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += 1e-5;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= 1e-5;
                let fd = (kl(&plus).0 - kl(&minus).0) / 2e-5;
                let err = (g.data()[i] - fd).abs();
                assert!(err <= 1e-4 * fd.abs() || err < 1e-6, "{} vs {fd}", g.data()[i]);
            }
        }
    }
}
