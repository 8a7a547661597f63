use crate::diffmath::Var;
use crate::error::Result;

/// `KL(N(mean, diag(exp(log_var))) ‖ N(0, I)) = ½ Σ (e^{log_var} + mean² − 1 − log_var)`.
pub fn kl_diag_gaussian_vs_standard<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let terms = log_var.exp().add(mean.square())?.sub(log_var)?.add_scalar(-1.0);
    Ok(terms.sum().scale(0.5))
}
