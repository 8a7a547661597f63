use crate::diffmath::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Squared-exponential kernel with lengthscales shared across output
/// dimensions and one output variance per output dimension. Both are stored
/// as logs in the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct SeKernel {
    pub log_lengthscales: ParamId,
    pub log_variances: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl SeKernel {
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, lengthscale: f64, variance: f64) -> Self {
        let log_lengthscales = store.add(format!("{prefix}.log_lengthscales"), Tensor::full(&[d_in], lengthscale.ln()));
        let log_variances = store.add(format!("{prefix}.log_variances"), Tensor::full(&[d_out], variance.ln()));
        SeKernel { log_lengthscales, log_variances, d_in, d_out }
    }

    pub fn lengthscales(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.log_lengthscales).data().iter().map(|v| v.exp()).collect()
    }

    pub fn variances(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.log_variances).data().iter().map(|v| v.exp()).collect()
    }

    /// Kernel matrix between the rows of `x` and `x2` for output dimension `d`.
    pub fn matrix(&self, store: &ParamStore, x: &Tensor, x2: &Tensor, d: usize) -> Result<Tensor> {
        if d >= self.d_out {
            return Err(Error::dim("se_kernel_matrix", format!("output dim {d} of {}", self.d_out)));
        }
        se_kernel_matrix(x, x2, &self.lengthscales(store), self.variances(store)[d])
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> (Var<'t>, Var<'t>) {
        (tape.param(store, self.log_lengthscales), tape.param(store, self.log_variances))
    }
}

/// `K[i,j] = σ² exp(-½ Σ_k (x_ik - x'_jk)² / ℓ_k²)`.
pub fn se_kernel_matrix(x: &Tensor, x2: &Tensor, lengthscales: &[f64], variance: f64) -> Result<Tensor> {
    if x.rank() != 2 || x2.rank() != 2 || x.cols() != x2.cols() || lengthscales.len() != x.cols() {
        return Err(Error::dim(
            "se_kernel_matrix",
            format!("{:?} vs {:?} with {} lengthscales", x.shape(), x2.shape(), lengthscales.len()),
        ));
    }
    let (n, m) = (x.rows(), x2.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x2.row(j))
                .zip(lengthscales)
                .map(|((a, b), l)| ((a - b) / l).powi(2))
                .sum();
            out.set(i, j, variance * (-0.5 * s).exp());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{linalg, randn, seeded};

    #[test]
    fn diagonal_is_variance() {
        let x = randn(&[5, 3], &mut seeded(1));
        let k = se_kernel_matrix(&x, &x, &[0.5, 1.0, 2.0], 1.7).unwrap();
        for i in 0..5 {
            assert_eq!(k.at(i, i), 1.7);
        }
    }

    #[test]
    fn far_inputs_decorrelate() {
        let x = Tensor::from_rows(&[&[0.0]]).unwrap();
        let far = Tensor::from_rows(&[&[1e3]]).unwrap();
        assert_eq!(se_kernel_matrix(&x, &far, &[1.0], 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn hand_value() {
        let x = Tensor::from_rows(&[&[0.0]]).unwrap();
        let y = Tensor::from_rows(&[&[1.0]]).unwrap();
        let k = se_kernel_matrix(&x, &y, &[1.0], 2.0).unwrap().item();
        assert!((k - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 1.2131).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Tensor::zeros(&[2, 2]);
        let y = Tensor::zeros(&[2, 3]);
        assert!(se_kernel_matrix(&x, &y, &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn symmetric_and_psd_after_jitter() {
        let x = randn(&[12, 2], &mut seeded(4));
        let k = se_kernel_matrix(&x, &x, &[0.7, 1.3], 0.4).unwrap();
        assert!(k.max_abs_diff(&k.transpose().unwrap()) < 1e-12);
        assert!(linalg::cholesky(&k, 1e-5).is_ok());
    }

    #[test]
    fn tape_kernel_matches_plain_matrix() {
        let mut store = ParamStore::new();
        let kern = SeKernel::init(&mut store, "k", 2, 3, 0.8, 0.3);
        let x = randn(&[4, 2], &mut seeded(2));
        let z = randn(&[6, 2], &mut seeded(3));
        let tape = Tape::new();
        let (ll, _) = kern.bind(&tape, &store);
        let k0 = tape.se_kernel(tape.constant(x.clone()), tape.constant(z.clone()), ll).unwrap();
        let plain = kern.matrix(&store, &x, &z, 1).unwrap();
        let scaled = k0.to_tensor().map(|v| 0.3 * v);
        assert!(scaled.max_abs_diff(&plain) < 1e-15);
    }
}
