#![allow(dead_code)]

use igpode_core::diffmath::{randn, seeded, Rng};
use igpode_core::dynamics::DriftKind;
use igpode_core::gp::{se_kernel_matrix, SparseGp, SparseGpConfig};
use igpode_core::inference::{mc_elbo, Batch, GlobalMode, Model, ModelConfig};
use igpode_core::simdata::{simulate_balls, BallsConfig, Dataset};
use igpode_core::{ParamStore, Tensor};
use rand::Rng as _;

/// One ball, one sequence of three frames.
pub fn tiny_dataset() -> Dataset {
    let cfg = BallsConfig { num_objects: 1, num_sequences: 1, num_steps: 3, ..Default::default() };
    simulate_balls(&cfg, 17).unwrap()
}

/// I-GPODE with M=3 inducing points and F=8 features whose encoder reads
/// all three frames.
pub fn tiny_model(ds: &Dataset, kind: DriftKind) -> Model {
    let mut cfg = ModelConfig::for_dataset(ds, kind, true, GlobalMode::Off);
    cfg.drift.gp.num_inducing = 3;
    cfg.drift.flat_gp.num_inducing = 3;
    cfg.drift.num_features = 8;
    cfg.encoder.initial_frames = 3;
    cfg.substeps = 1;
    // pinned so the finite-difference check does not follow the default
    cfg.init_noise_std = 0.5;
    Model::init(cfg, &mut seeded(5)).unwrap()
}

pub fn full_batch(model: &Model, ds: &Dataset) -> Batch {
    let seqs: Vec<usize> = (0..ds.num_sequences).collect();
    Batch::from_dataset(ds, &model.config, &seqs, 0, ds.num_steps).unwrap()
}

/// Per-tensor relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the
/// autodiff gradient of a single-sample ELBO with a frozen seed and central
/// finite differences.
pub fn elbo_gradient_errors(model: &Model, batch: &Batch, seed: u64) -> Vec<(String, f64)> {
    let (_, mut grads) = mc_elbo(model, batch, 1, 1.0, &mut seeded(seed)).unwrap();
    grads.densify(&model.store);
    let eval = |m: &Model| mc_elbo(m, batch, 1, 1.0, &mut seeded(seed)).unwrap().0.elbo();
    let mut out = Vec::new();
    let mut probe = model.clone();
    for (id, name, value) in model.store.iter() {
        let g = grads.get(id).unwrap();
        let mut diff2 = 0.0;
        let mut norm_g: f64 = 0.0;
        let mut norm_fd: f64 = 0.0;
        for k in 0..value.len() {
            let x = value.data()[k];
            let h = 1e-5 * x.abs().max(1.0);
            probe.store.get_mut(id).data_mut()[k] = x + h;
            let up = eval(&probe);
            probe.store.get_mut(id).data_mut()[k] = x - h;
            let down = eval(&probe);
            probe.store.get_mut(id).data_mut()[k] = x;
            let fd = (up - down) / (2.0 * h);
            let ad = g.data()[k];
            diff2 += (ad - fd).powi(2);
            norm_g += ad * ad;
            norm_fd += fd * fd;
        }
        let denom = norm_g.sqrt().max(norm_fd.sqrt());
        let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        out.push((name.to_string(), rel));
    }
    out
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn gp_with(
    z: Tensor,
    d_out: usize,
    lengthscale: f64,
    variance: f64,
    jitter: f64,
) -> (ParamStore, SparseGp) {
    let (m, d_in) = (z.rows(), z.cols());
    let mut store = ParamStore::new();
    let cfg = SparseGpConfig {
        num_inducing: m,
        jitter,
        init_lengthscale: lengthscale,
        init_variance: variance,
        ..Default::default()
    };
    let gp = SparseGp::init(&mut store, "g", d_in, d_out, &cfg, &mut seeded(0)).unwrap();
    *store.get_mut(gp.inducing_inputs) = z;
    (store, gp)
}

/// Plain lower Cholesky, kept separate from the library routine.
pub fn naive_cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = if i == j { s.sqrt() } else { s / l[j * n + j] };
        }
    }
    l
}

/// log N(x; 0, LLᵀ)
pub fn log_normal(x: &[f64], l: &[f64]) -> f64 {
    let n = x.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0;
    -0.5 * (y.iter().map(|v| v * v).sum::<f64>() + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of Σ_d KL(q(u_d) ‖ p(u_d)) with its standard error.
pub fn mc_kl_inducing(store: &ParamStore, gp: &SparseGp, n: usize, rng: &mut Rng) -> (f64, f64) {
    let m = gp.num_inducing;
    let z = store.get(gp.inducing_inputs);
    let ls = gp.kernel.lengthscales(store);
    let vars = gp.kernel.variances(store);
    let mut per_dim = Vec::new();
    for (d, &var) in vars.iter().enumerate() {
        let mut k = se_kernel_matrix(z, z, &ls, var).unwrap().data().to_vec();
        for i in 0..m {
            k[i * m + i] += var * gp.jitter;
        }
        let lk = naive_cholesky(&k, m);
        let mean: Vec<f64> = (0..m).map(|i| store.get(gp.mean).at(i, d)).collect();
        let s: Vec<f64> = (0..m).map(|i| store.get(gp.log_s).at(i, d).exp()).collect();
        let mut ls_q = vec![0.0; m * m];
        for i in 0..m {
            ls_q[i * m + i] = s[i].sqrt();
        }
        per_dim.push((lk, mean, ls_q));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut total = 0.0;
        for (lk, mean, lq) in &per_dim {
            let eps = randn(&[m], rng);
            let centred: Vec<f64> = (0..m).map(|i| lq[i * m + i] * eps.data()[i]).collect();
            let u: Vec<f64> = centred.iter().zip(mean).map(|(c, mu)| c + mu).collect();
            total += log_normal(&centred, lq) - log_normal(&u, lk);
        }
        values.push(total);
    }
    mean_and_se(&values)
}

pub fn random_small_gp(seed: u64) -> (ParamStore, SparseGp) {
    let mut rng = seeded(seed);
    let z = randn(&[3, 2], &mut rng);
    let ls: f64 = rng.random_range(0.5..2.0);
    let var: f64 = rng.random_range(0.2..2.0);
    let (mut store, gp) = gp_with(z, 2, ls, var, 1e-4);
    *store.get_mut(gp.mean) = randn(&[3, 2], &mut rng).map(|v| 0.5 * v);
    let log_s = randn(&[3, 2], &mut rng).map(|v| 0.3 * v + (0.5 * var).ln());
    *store.get_mut(gp.log_s) = log_s;
    (store, gp)
}

/// Monte-Carlo estimate of KL(N(mean, diag e^{log_var}) ‖ N(0, I)).
pub fn mc_kl_diag(mean: &Tensor, log_var: &Tensor, n: usize, rng: &mut Rng) -> (f64, f64) {
    let d = mean.len();
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let eps = randn(&[d], rng);
            (0..d)
                .map(|i| {
                    let sd = (0.5 * log_var.data()[i]).exp();
                    let x = mean.data()[i] + sd * eps.data()[i];
                    // log q − log p, with the 2π terms cancelling
                    -0.5 * eps.data()[i].powi(2) - sd.ln() + 0.5 * x * x
                })
                .sum()
        })
        .collect();
    mean_and_se(&values)
}
