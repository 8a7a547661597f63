//! Decoupled function draws from a sparse GP posterior.
//!
//! A draw is `f(x) = φ(x) + K0(x, Z) C⁻¹ (u − φ(Z))`, where `φ` is a random
//! Fourier feature sample of the prior, `u ~ q(U)` and `C = K0(Z,Z) + jitter·I`
//! is the unit-amplitude inducing correlation. The output variance cancels
//! in the correction term, so one Cholesky factor serves all output dims.
//! Once drawn, a function is fixed and can be evaluated at any inputs with
//! cost linear in `M + F` per point and output dimension.

use std::f64::consts::PI;

use super::sparse::{kl_inducing_with_cholesky, sample_inducing_outputs, BoundGp};
use crate::diffmath::{randn, uniform, Rng, Var};
use crate::error::{Error, Result};

/// Random Fourier basis of an SE prior path.
///
/// Frequencies and phases are shared across output dimensions; each output
/// dimension has its own standard-normal weights, so output paths are
/// independent a priori.
#[derive(Clone, Copy, Debug)]
pub struct RffBasis<'t> {
    /// `F × D_in`, rows distributed `N(0, diag(ℓ)⁻²)`.
    pub frequencies: Var<'t>,
    /// `F` phases, uniform on `[0, 2π)`.
    pub phases: Var<'t>,
    /// `F × D_out`, standard normal weights scaled by `σ_d·sqrt(2/F)`.
    pub weights: Var<'t>,
    pub num_features: usize,
}

impl<'t> RffBasis<'t> {
    pub fn sample(gp: &BoundGp<'t>, num_features: usize, rng: &mut Rng) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::Config("random Fourier basis needs at least one feature".into()));
        }
        let tape = gp.tape();
        let d_in = gp.z.shape()[1];
        let d_out = gp.d_out();
        let eps = tape.constant(randn(&[num_features, d_in], rng));
        let phases = tape.constant(uniform(&[num_features], 0.0, 2.0 * PI, rng));
        let w = tape.constant(randn(&[num_features, d_out], rng));
        let frequencies = eps.mul(gp.log_lengthscales.neg().exp())?;
        let amplitude = gp.log_variances.scale(0.5).exp().scale((2.0 / num_features as f64).sqrt());
        let weights = w.mul(amplitude)?;
        Ok(RffBasis { frequencies, phases, weights, num_features })
    }

    /// Prior path values at the rows of `x` (`n × D_in` → `n × D_out`).
    pub fn eval(&self, x: Var<'t>) -> Result<Var<'t>> {
        let proj = x.matmul(self.frequencies.t()?)?.add(self.phases)?;
        proj.cos().matmul(self.weights)
    }
}

/// One function sampled from the variational sparse-GP posterior.
#[derive(Clone, Copy, Debug)]
pub struct PathwiseFunction<'t> {
    pub basis: RffBasis<'t>,
    pub inducing_inputs: Var<'t>,
    pub log_lengthscales: Var<'t>,
    /// Sampled inducing outputs, `M × D_out`.
    pub inducing_outputs: Var<'t>,
    /// `C⁻¹ (u − φ(Z))`, `M × D_out`.
    pub coefficients: Var<'t>,
    /// Cholesky factor of `C`, reusable for the KL term.
    pub cholesky: Var<'t>,
}

impl<'t> PathwiseFunction<'t> {
    pub fn eval(&self, x: Var<'t>) -> Result<Var<'t>> {
        let prior = self.basis.eval(x)?;
        let k0 = x.tape().se_kernel(x, self.inducing_inputs, self.log_lengthscales)?;
        prior.add(k0.matmul(self.coefficients)?)
    }

    pub fn d_in(&self) -> usize {
        self.inducing_inputs.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.coefficients.shape()[1]
    }
}

/// Draws `f ~ ∫ p(f | u) q(u) du` pathwise with `num_features` Fourier features.
pub fn draw_pathwise<'t>(gp: &BoundGp<'t>, num_features: usize, rng: &mut Rng) -> Result<PathwiseFunction<'t>> {
    let basis = RffBasis::sample(gp, num_features, rng)?;
    let u = sample_inducing_outputs(gp, rng)?;
    let chol = gp.inducing_cholesky()?;
    let resid = u.sub(basis.eval(gp.z)?)?;
    let coefficients = chol.tri_solve(chol.tri_solve(resid, false)?, true)?;
    Ok(PathwiseFunction {
        basis,
        inducing_inputs: gp.z,
        log_lengthscales: gp.log_lengthscales,
        inducing_outputs: u,
        coefficients,
        cholesky: chol,
    })
}

/// KL of the GP that produced `f`, reusing its Cholesky factor.
pub fn kl_for_draw<'t>(gp: &BoundGp<'t>, f: &PathwiseFunction<'t>) -> Result<Var<'t>> {
    kl_inducing_with_cholesky(gp, f.cholesky)
}
