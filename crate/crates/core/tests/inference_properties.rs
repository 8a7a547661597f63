mod common;

use common::*;
use igpode_core::diffmath::{randn, seeded};
use igpode_core::dynamics::{Component, DriftKind};
use igpode_core::inference::*;
use igpode_core::simdata::{simulate_balls, BallsConfig, Dataset};
use rand::Rng as _;

#[test]
fn tiny_model_gradients_match_finite_differences() {
    let ds = tiny_dataset();
    for kind in [DriftKind::Igpode, DriftKind::Gpode] {
        let model = tiny_model(&ds, kind);
        let batch = full_batch(&model, &ds);
        for (name, rel) in elbo_gradient_errors(&model, &batch, 3) {
            assert!(rel < 1e-4, "{kind:?} {name}: relative error {rel:e}");
        }
    }
}

/// `log N(y; 0, 11ᵀ + σ²I)` for one observed dim of a constant latent.
fn constant_latent_log_evidence(y: &[f64], noise_var: f64) -> f64 {
    // Σ = σ²I + 11ᵀ: |Σ| = σ^{2n}(1 + n/σ²), Σ⁻¹ = (I − 11ᵀ/(σ² + n))/σ²
    let n = y.len() as f64;
    let sum: f64 = y.iter().sum();
    let sq: f64 = y.iter().map(|v| v * v).sum();
    let quad = (sq - sum * sum / (noise_var + n)) / noise_var;
    let logdet = n * noise_var.ln() + (1.0 + n / noise_var).ln();
    -0.5 * (quad + logdet + n * (2.0 * std::f64::consts::PI).ln())
}

/// With a zero drift and `B = I` the model is linear-Gaussian with a closed
/// form evidence, which every ELBO must lower-bound.
#[test]
fn elbo_lower_bounds_linear_gaussian_evidence() {
    let (steps, obs) = (6, 2);
    let mut rng = seeded(41);
    for setting in 0..50 {
        let noise_std: f64 = rng.random_range(0.3..2.0);
        let h = randn(&[obs], &mut rng);
        let mut ds = Dataset::empty(steps, 1, obs, 0.1);
        ds.num_sequences = 1;
        for _ in 0..steps {
            let e = randn(&[obs], &mut rng);
            ds.observations.extend((0..obs).map(|o| h.data()[o] + noise_std * e.data()[o]));
        }
        let mut cfg = ModelConfig::for_dataset(&ds, DriftKind::Inode, false, GlobalMode::Off);
        cfg.drift.mlp_kinematics_width = 8;
        cfg.drift.mlp_interaction_width = 8;
        cfg.init_noise_std = noise_std;
        let mut model = Model::init(cfg, &mut seeded(1000 + setting)).unwrap();
        let Component::Mlp(f_s) = &model.drift.kinematics else { unreachable!() };
        f_s.zero_output_layer(&mut model.store);
        let batch = full_batch(&model, &ds);
        let (parts, _) = mc_elbo(&model, &batch, 20, 1.0, &mut seeded(setting)).unwrap();
        let evidence: f64 = (0..obs)
            .map(|o| {
                let y: Vec<f64> = (0..steps).map(|n| ds.observation(0, n, 0)[o]).collect();
                constant_latent_log_evidence(&y, noise_std * noise_std)
            })
            .sum();
        assert_eq!(parts.kl_u, 0.0);
        assert!(parts.elbo() <= evidence, "setting {setting}: elbo {} > log evidence {evidence}", parts.elbo());
    }
}

#[test]
fn more_samples_reduce_estimator_spread() {
    let ds = tiny_dataset();
    let model = tiny_model(&ds, DriftKind::Igpode);
    let batch = full_batch(&model, &ds);
    let spread = |l: usize| {
        let vals: Vec<f64> = (0..30)
            .map(|s| mc_elbo(&model, &batch, l, 1.0, &mut seeded(500 + s)).unwrap().0.elbo())
            .collect();
        std_dev(&vals)
    };
    let (one, ten) = (spread(1), spread(10));
    assert!(ten < one, "L=10 std {ten} vs L=1 std {one}");
}

fn toy_balls() -> Dataset {
    let cfg = BallsConfig { num_objects: 2, num_sequences: 10, num_steps: 20, ..Default::default() };
    simulate_balls(&cfg, 3).unwrap()
}

fn toy_model(ds: &Dataset) -> Model {
    let mut cfg = ModelConfig::for_dataset(ds, DriftKind::Igpode, true, GlobalMode::Off);
    cfg.drift.gp.num_inducing = 40;
    cfg.drift.num_features = 64;
    Model::init(cfg, &mut seeded(2)).unwrap()
}

/// Trains the toy model for one short round and checks both the ELBO trend
/// and that predictive spread grows along the forecast.
#[test]
fn toy_training_improves_and_spread_grows() {
    let ds = toy_balls();
    let tc = TrainConfig {
        rounds: vec![Round { subseq_len: 5, iterations: 300 }],
        learning_rate: 1e-2,
        batch_size: 5,
        log_every: 0,
        ..Default::default()
    };
    let (state, history) = train(&ds, TrainState::new(toy_model(&ds), &tc, seeded(9)), &tc).unwrap();
    assert_eq!(history.len(), 300);
    let tail: f64 = history[250..].iter().map(|h| h.elbo).sum::<f64>() / 50.0;
    assert!(tail > history[10].elbo, "smoothed final {tail} vs iteration 10 {}", history[10].elbo);

    let pred = predict(&state.model, &ds, &[0, 1, 2], ds.num_steps, 16, &mut seeded(4)).unwrap();
    let spread_at = |n: usize| {
        let mut total = 0.0;
        for r in 0..3 * ds.num_objects {
            for o in 0..pred.obs_dim() {
                let xs: Vec<f64> = (0..pred.num_samples()).map(|l| pred.at(l, n, r, o)).collect();
                total += std_dev(&xs).powi(2);
            }
        }
        total
    };
    let last = ds.num_steps - 1;
    assert!(spread_at(last) >= spread_at(1), "{} < {}", spread_at(last), spread_at(1));
}

#[test]
fn elbo_identity_holds_exactly() {
    let ds = toy_balls();
    let model = toy_model(&ds);
    let batch = Batch::from_dataset(&ds, &model.config, &[0, 3], 2, 7).unwrap();
    for seed in 0..5 {
        let (parts, _) = mc_elbo(&model, &batch, 2, 0.3, &mut seeded(seed)).unwrap();
        assert_eq!(parts.elbo(), parts.ell - parts.kl_h1 - parts.kl_c - parts.kl_u);
        assert!(parts.kl_h1 >= 0.0 && parts.kl_c >= 0.0 && parts.kl_u >= 0.0);
    }
}
