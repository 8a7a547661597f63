//! Small neural building blocks: dense layers, MLPs and a GRU cell.

use crate::diffmath::{uniform, ParamId, ParamStore, Rng, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

/// Dense layer `y = x W + b`, `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and biases uniform in `[−1/√fan_in, 1/√fan_in]`.
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[d_in, d_out], -bound, bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[d_out], -bound, bound, rng));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(tape.param(store, self.weight))?.add(tape.param(store, self.bias))
    }
}

/// Feed-forward network with one activation shared by all hidden layers and
/// a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Unary,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, name: &str, widths: &[usize], activation: Unary, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("MLP `{name}` needs input and output widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        self.bind(tape, store).forward(x)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundMlp<'t> {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.param(store, l.weight), tape.param(store, l.bias)))
            .collect();
        BoundMlp { layers, activation: self.activation }
    }

    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let out = &self.layers[self.layers.len() - 1];
        for id in [out.weight, out.bias] {
            let t = store.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// MLP parameters entered on a tape once and reused across many calls.
#[derive(Clone, Debug)]
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Unary,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i < last {
                h = h.activate(self.activation);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit in the usual reset/update/candidate form:
///
/// ```text
/// r = σ(x W_r + b_ir + h U_r + b_hr)
/// z = σ(x W_z + b_iz + h U_z + b_hz)
/// n = tanh(x W_n + b_in + r ⊙ (h U_n + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// Gate blocks are stacked column-wise in the order `r, z, n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, hidden_size: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut lin = |suffix: &str, rows: usize| {
            let weight = store.add(format!("{name}.{suffix}.weight"), uniform(&[rows, 3 * hidden_size], -bound, bound, rng));
            let bias = store.add(format!("{name}.{suffix}.bias"), uniform(&[3 * hidden_size], -bound, bound, rng));
            Linear { weight, bias, d_in: rows, d_out: 3 * hidden_size }
        };
        let input = lin("input", d_in);
        let hidden = lin("hidden", hidden_size);
        GruCell { input, hidden, hidden_size }
    }

    pub fn step<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let n = self.hidden_size;
        let gi = self.input.forward(tape, store, x)?;
        let gh = self.hidden.forward(tape, store, h)?;
        let r = gi.slice(1, 0, n)?.add(gh.slice(1, 0, n)?)?.sigmoid();
        let z = gi.slice(1, n, n)?.add(gh.slice(1, n, n)?)?.sigmoid();
        let cand = gi.slice(1, 2 * n, n)?.add(r.mul(gh.slice(1, 2 * n, n)?)?)?.tanh();
        // (1 − z) ⊙ n + z ⊙ h = n + z ⊙ (h − n)
        cand.add(z.mul(h.sub(cand)?)?)
    }

    /// Runs the cell over `frames` (each `rows × d_in`) from a zero state.
    pub fn run<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: &[Var<'t>]) -> Result<Var<'t>> {
        let rows = frames.first().map(|f| f.shape()[0]).unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(&[rows, self.hidden_size]));
        for &x in frames {
            h = self.step(tape, store, x, h)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.input.weight, self.input.bias, self.hidden.weight, self.hidden.bias]
    }
}
