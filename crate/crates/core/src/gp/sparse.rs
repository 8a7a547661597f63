use serde::{Deserialize, Serialize};

use super::kernel::SeKernel;
use crate::diffmath::{linalg, randn, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGpConfig {
    pub num_inducing: usize,
    /// Jitter added to the unit-amplitude inducing correlation matrix.
    pub jitter: f64,
    pub init_lengthscale: f64,
    pub init_variance: f64,
    pub init_s: f64,
}

impl Default for SparseGpConfig {
    fn default() -> Self {
        SparseGpConfig { num_inducing: 250, jitter: 1e-5, init_lengthscale: 1.0, init_variance: 0.1, init_s: 1e-2 }
    }
}

/// Sparse variational GP with a diagonal Gaussian `q(u_d) = N(m_d, diag S_d)`
/// per output dimension. Inducing inputs and lengthscales are shared across
/// output dimensions.
///
/// `mean` and `log_s` are stored as `M × D_out` matrices: column `d` holds
/// the variational parameters of output dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGp {
    pub kernel: SeKernel,
    pub inducing_inputs: ParamId,
    pub mean: ParamId,
    pub log_s: ParamId,
    pub num_inducing: usize,
    pub jitter: f64,
}

/// Parameters of a [`SparseGp`] entered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundGp<'t> {
    pub z: Var<'t>,
    pub mean: Var<'t>,
    pub log_s: Var<'t>,
    pub log_lengthscales: Var<'t>,
    pub log_variances: Var<'t>,
    pub jitter: f64,
}

impl SparseGp {
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, cfg: &SparseGpConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.num_inducing == 0 {
            return Err(Error::Config("sparse GP needs at least one inducing point".into()));
        }
        let m = cfg.num_inducing;
        let kernel = SeKernel::init(store, prefix, d_in, d_out, cfg.init_lengthscale, cfg.init_variance);
        let inducing_inputs = store.add(format!("{prefix}.inducing_inputs"), randn(&[m, d_in], rng));
        let mean = store.add(format!("{prefix}.q_mean"), Tensor::zeros(&[m, d_out]));
        let log_s = store.add(format!("{prefix}.q_log_s"), Tensor::full(&[m, d_out], cfg.init_s.ln()));
        Ok(SparseGp { kernel, inducing_inputs, mean, log_s, num_inducing: m, jitter: cfg.jitter })
    }

    pub fn d_in(&self) -> usize {
        self.kernel.d_in
    }

    pub fn d_out(&self) -> usize {
        self.kernel.d_out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundGp<'t> {
        let (log_lengthscales, log_variances) = self.kernel.bind(tape, store);
        BoundGp {
            z: tape.param(store, self.inducing_inputs),
            mean: tape.param(store, self.mean),
            log_s: tape.param(store, self.log_s),
            log_lengthscales,
            log_variances,
            jitter: self.jitter,
        }
    }
}

impl<'t> BoundGp<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.z.tape()
    }

    pub fn num_inducing(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.mean.shape()[1]
    }

    /// Lower Cholesky factor of the unit-amplitude inducing correlation `K0(Z,Z) + jitter·I`.
    pub fn inducing_cholesky(&self) -> Result<Var<'t>> {
        let k0 = self.tape().se_kernel(self.z, self.z, self.log_lengthscales)?;
        k0.cholesky(self.jitter)
    }
}

/// Reparameterized draw `u = m + sqrt(S) ⊙ ε`, shape `M × D_out`.
pub fn sample_inducing_outputs<'t>(gp: &BoundGp<'t>, rng: &mut Rng) -> Result<Var<'t>> {
    let eps = gp.tape().constant(randn(&gp.mean.shape(), rng));
    gp.mean.add(gp.log_s.scale(0.5).exp().mul(eps)?)
}

/// `Σ_d KL(N(m_d, diag S_d) ‖ N(0, K_ZZ,d))` in closed form.
///
/// With `K_ZZ,d = σ²_d C`, `C = K0 + jitter·I` and `C = L Lᵀ`:
/// `2·KL_d = (Σ_i S_di [C⁻¹]_ii + ‖L⁻¹ m_d‖²)/σ²_d − M + M log σ²_d + log|C| − Σ_i log S_di`.
pub fn kl_inducing<'t>(gp: &BoundGp<'t>) -> Result<Var<'t>> {
    let l = gp.inducing_cholesky()?;
    kl_inducing_with_cholesky(gp, l)
}

pub(crate) fn kl_inducing_with_cholesky<'t>(gp: &BoundGp<'t>, l: Var<'t>) -> Result<Var<'t>> {
    let tape = gp.tape();
    let m = gp.num_inducing();
    let d_out = gp.d_out() as f64;
    let log_det_c = l.diag()?.log().sum().scale(2.0);
    let l_inv = l.tri_solve(tape.constant(Tensor::eye(m)), false)?;
    // [C⁻¹]_ii = Σ_k (L⁻¹)_ki²
    let c_inv_diag = l_inv.square().sum_axis(0)?;
    let s_t = gp.log_s.exp().t()?;
    let trace = s_t.mul(c_inv_diag)?.sum_axis(1)?;
    let whitened = l.tri_solve(gp.mean, false)?;
    let mahal = whitened.square().sum_axis(0)?;
    let inv_var = gp.log_variances.neg().exp();
    let scaled = trace.add(mahal)?.mul(inv_var)?.sum();
    let log_var_term = gp.log_variances.sum().scale(m as f64);
    let total = scaled
        .add(log_var_term)?
        .add(log_det_c.scale(d_out))?
        .sub(gp.log_s.sum())?
        .add_scalar(-(m as f64) * d_out);
    Ok(total.scale(0.5))
}

/// Inducing prior covariance `K_ZZ,d` (with the configured jitter) as a plain matrix.
pub fn inducing_prior_covariance(gp: &SparseGp, store: &ParamStore, d: usize) -> Result<Tensor> {
    let z = store.get(gp.inducing_inputs);
    let var = gp.kernel.variances(store)[d];
    let mut k = gp.kernel.matrix(store, z, z, d)?;
    let n = k.rows();
    for i in 0..n {
        k.set(i, i, k.at(i, i) + var * gp.jitter);
    }
    // sanity: must factor
    linalg::cholesky(&k, 0.0)?;
    Ok(k)
}
