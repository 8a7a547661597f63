//! Finite-difference checks for every differentiable op.

use std::rc::Rc;

use super::random::{randn, seeded, uniform};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Error;

const H: f64 = 1e-5;

/// Compares reverse-mode gradients of `Σ w ⊙ f(inputs)` against central
/// differences, with fixed random weights `w`.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let weighted = |tape: &Tape, vars: &[Var<'_>]| -> f64 {
        let out = f(tape, vars);
        let w = randn(&out.shape(), &mut seeded(99));
        out.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars);
    let w = tape.constant(randn(&out.shape(), &mut seeded(99)));
    let loss = out.mul(w).unwrap().sum();
    for (k, input) in inputs.iter().enumerate() {
        let ad = tape.grad_of(loss, vars[k]).unwrap();
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let t2 = Tape::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        t2.variable(t)
                    })
                    .collect();
                weighted(&t2, &vs)
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let a = ad.data()[i];
            let err = (a - fd).abs();
            assert!(
                err < 1e-6 || err / fd.abs().max(a.abs()) < 1e-4,
                "input {k} elem {i}: autodiff {a} vs finite difference {fd}"
            );
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, &mut seeded(seed))
}

fn spd(n: usize, seed: u64) -> Tensor {
    let x = rnd(&[n, n], seed);
    let mut a = super::linalg::matmul(&x, &x.transpose().unwrap()).unwrap();
    for i in 0..n {
        a.set(i, i, a.at(i, i) + n as f64);
    }
    a
}

#[test]
fn square_at_three() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::scalar(3.0));
    let loss = x.square();
    assert_eq!(tape.grad_of(loss, x).unwrap().item(), 6.0);
    let y = tape.variable(Tensor::scalar(3.0));
    let loss2 = y.mul(y).unwrap();
    assert_eq!(tape.grad_of(loss2, y).unwrap().item(), 6.0);
}

#[test]
fn softplus_at_zero() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::scalar(0.0));
    let loss = x.softplus();
    assert!((loss.item() - 2f64.ln()).abs() < 1e-15);
    assert_eq!(tape.grad_of(loss, x).unwrap().item(), 0.5);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.grad(x), Err(Error::Contract(_))));
}

#[test]
fn unary_ops() {
    let x = rnd(&[3, 4], 1);
    let pos = uniform(&[3, 4], 0.2, 3.0, &mut seeded(2));
    check(&[x.clone()], |_, v| v[0].exp());
    check(&[pos.clone()], |_, v| v[0].log());
    check(&[x.clone()], |_, v| v[0].tanh());
    check(&[x.clone()], |_, v| v[0].sigmoid());
    check(&[x.clone()], |_, v| v[0].softplus());
    check(&[x.clone()], |_, v| v[0].relu());
    check(&[x.clone()], |_, v| v[0].elu());
    check(&[x.clone()], |_, v| v[0].cos());
    check(&[x.clone()], |_, v| v[0].square());
    check(&[pos], |_, v| v[0].sqrt());
    check(&[x.clone()], |_, v| v[0].scale(-2.5).add_scalar(1.0));
    check(&[x], |_, v| v[0].neg());
}

#[test]
fn unary_values() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().to_tensor().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(x.elu().to_tensor().data()[2], 2.0);
    assert!((x.elu().to_tensor().data()[0] - ((-1f64).exp() - 1.0)).abs() < 1e-15);
    assert_eq!(x.sigmoid().to_tensor().data()[1], 0.5);
    assert_eq!(x.tanh().to_tensor().data()[1], 0.0);
    assert_eq!(x.exp().to_tensor().data()[1], 1.0);
    // softplus stays finite for large magnitudes
    let big = tape.constant(Tensor::vector(vec![-800.0, 800.0]));
    assert_eq!(big.softplus().to_tensor().data(), &[0.0, 800.0]);
}

#[test]
fn binary_ops_with_broadcasting() {
    let a = rnd(&[2, 3, 4], 3);
    let b = rnd(&[3, 4], 4);
    let c = rnd(&[4], 5);
    let s = Tensor::scalar(1.7);
    let pos = uniform(&[3, 4], 0.5, 2.0, &mut seeded(6));
    check(&[a.clone(), b.clone()], |_, v| v[0].add(v[1]).unwrap());
    check(&[a.clone(), c.clone()], |_, v| v[0].sub(v[1]).unwrap());
    check(&[c.clone(), a.clone()], |_, v| v[0].sub(v[1]).unwrap());
    check(&[a.clone(), b.clone()], |_, v| v[0].mul(v[1]).unwrap());
    check(&[a.clone(), s.clone()], |_, v| v[0].mul(v[1]).unwrap());
    check(&[a.clone(), pos.clone()], |_, v| v[0].div(v[1]).unwrap());
    check(&[pos, a.clone()], |_, v| v[1].div(v[0]).unwrap());
    check(&[s, b], |_, v| v[0].div(v[1].square().add_scalar(1.0)).unwrap());
}

#[test]
fn broadcast_values_and_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::vector(vec![10.0, 20.0]));
    assert_eq!(a.add(b).unwrap().to_tensor().data(), &[11.0, 22.0, 13.0, 24.0]);
    assert_eq!(b.sub(a).unwrap().to_tensor().data(), &[9.0, 18.0, 7.0, 16.0]);
    assert_eq!(a.mul(tape.scalar(2.0)).unwrap().to_tensor().data(), &[2.0, 4.0, 6.0, 8.0]);
    let bad = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(a.add(bad), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_transpose_reshape() {
    let a = rnd(&[3, 4], 7);
    let b = rnd(&[4, 2], 8);
    check(&[a.clone(), b], |_, v| v[0].matmul(v[1]).unwrap());
    check(&[a.clone()], |_, v| v[0].t().unwrap());
    check(&[a], |_, v| v[0].reshape(&[2, 6]).unwrap().t().unwrap());
}

#[test]
fn reductions() {
    let a = rnd(&[2, 3, 4], 9);
    check(&[a.clone()], |_, v| v[0].sum());
    check(&[a.clone()], |_, v| v[0].mean());
    for axis in 0..3 {
        check(&[a.clone()], move |_, v| v[0].sum_axis(axis).unwrap());
    }
    let tape = Tape::new();
    let m = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap());
    assert_eq!(m.sum().item(), 21.0);
    assert_eq!(m.mean().item(), 3.5);
    assert_eq!(m.sum_axis(0).unwrap().to_tensor().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(m.sum_axis(1).unwrap().to_tensor().data(), &[6.0, 15.0]);
}

#[test]
fn concat_and_slice() {
    let a = rnd(&[3, 2], 10);
    let b = rnd(&[3, 5], 11);
    let c = rnd(&[4, 2], 12);
    check(&[a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    check(&[a.clone(), c], |t, v| t.concat(&[v[0], v[1], v[0]], 0).unwrap());
    check(&[b.clone()], |_, v| v[0].slice(1, 1, 3).unwrap());
    check(&[b], |_, v| v[0].slice(0, 1, 2).unwrap());

    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let y = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
    let cat = tape.concat(&[x, y], 1).unwrap();
    assert_eq!(cat.shape(), vec![2, 3]);
    assert_eq!(cat.to_tensor().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(cat.slice(1, 1, 2).unwrap().to_tensor().data(), &[2.0, 5.0, 4.0, 6.0]);
    assert!(cat.slice(1, 2, 2).is_err());
    assert!(tape.concat(&[x, tape.constant(Tensor::zeros(&[3, 1]))], 1).is_err());
}

#[test]
fn gather_and_scatter() {
    let a = rnd(&[4, 3], 13);
    let idx: Rc<[usize]> = vec![2, 0, 2, 3, 1].into();
    let idx2 = idx.clone();
    check(&[a.clone()], move |_, v| v[0].gather_rows(idx2.clone()).unwrap());
    let p = rnd(&[5, 3], 14);
    let idx3 = idx.clone();
    check(&[p], move |_, v| v[0].scatter_add_rows(idx3.clone(), 4).unwrap());

    let tape = Tape::new();
    let m = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap());
    let g = m.gather_rows(vec![2, 2, 0].into()).unwrap();
    assert_eq!(g.to_tensor().data(), &[3.0, 3.0, 1.0]);
    let s = g.scatter_add_rows(vec![1, 1, 0].into(), 2).unwrap();
    assert_eq!(s.to_tensor().data(), &[1.0, 6.0]);
    assert!(m.gather_rows(vec![3].into()).is_err());
}

#[test]
fn cholesky_gradient() {
    // symmetric input built from an unconstrained matrix
    let x = rnd(&[4, 4], 15);
    check(&[x], |_, v| {
        let a = v[0].matmul(v[0].t().unwrap()).unwrap();
        let eye = v[0].tape().constant(Tensor::eye(4).map(|e| 4.0 * e));
        a.add(eye).unwrap().cholesky(0.0).unwrap()
    });
}

#[test]
fn cholesky_log_det_gradient() {
    let x = rnd(&[3, 3], 16);
    check(&[x], |t, v| {
        let a = v[0].matmul(v[0].t().unwrap()).unwrap().add(t.constant(Tensor::eye(3))).unwrap();
        a.cholesky(1e-5).unwrap().diag().unwrap().log().sum().scale(2.0)
    });
}

#[test]
fn tri_solve_gradients() {
    let l = super::linalg::cholesky(&spd(4, 17), 0.0).unwrap().0;
    let b = rnd(&[4, 2], 18);
    for transpose in [false, true] {
        check(&[l.clone(), b.clone()], move |_, v| {
            // keep perturbations in the lower triangle meaningful
            v[0].tri_solve(v[1], transpose).unwrap()
        });
    }
}

#[test]
fn diag_gradient() {
    check(&[rnd(&[3, 3], 19)], |_, v| v[0].diag().unwrap());
}

#[test]
fn se_kernel_gradient() {
    let x = rnd(&[3, 2], 20);
    let z = rnd(&[4, 2], 21);
    let ls = Tensor::vector(vec![0.3, -0.2]);
    check(&[x, z, ls], |t, v| t.se_kernel(v[0], v[1], v[2]).unwrap());
}

#[test]
fn audit_flags_first_non_finite_op() {
    let tape = Tape::audited();
    let x = tape.variable(Tensor::vector(vec![-1.0, 4.0]));
    let y = x.log().sum();
    match tape.grad(y) {
        Err(Error::NonFinite { op, .. }) => assert_eq!(op, "log"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
    // unaudited tapes still expose an explicit scan
    let tape = Tape::new();
    let x = tape.variable(Tensor::vector(vec![-1.0]));
    let _ = x.sqrt();
    assert!(tape.check_finite().is_err());
}

#[test]
fn parameters_used_twice_accumulate() {
    use super::tape::ParamStore;
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![2.0]));
    let tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    let loss = a.mul(b).unwrap().sum();
    let g = tape.grad(loss).unwrap();
    assert_eq!(g.get(id).unwrap().data(), &[4.0]);
}
