//! Plain (non-recording) dense linear algebra kernels shared by the tape ops.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Starting jitter once the requested one fails.
pub const BASE_JITTER: f64 = 1e-5;
/// Number of ×10 escalations after the first failure.
pub const JITTER_ESCALATIONS: usize = 3;

/// `out = alpha * op(a) * op(b) + beta * out` where `op` optionally transposes.
///
/// `a` is stored as `a_rows × a_cols` row-major, likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: strides and extents describe the provided slices exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::dim(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(a.data(), a.rows(), a.cols(), false, b.data(), b.rows(), b.cols(), false, &mut out, 1.0, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn try_cholesky(a: &Tensor, jitter: f64) -> Option<Tensor> {
    let n = a.rows();
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = src[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = src[i * n + j];
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(Tensor::from_parts(vec![n, n], l))
}

/// Lower Cholesky factor of `a + jitter·I`, escalating the jitter on failure.
///
/// The requested jitter is tried first; afterwards the jitter is raised ×10
/// (starting from [`BASE_JITTER`] when the request was below it) at most
/// [`JITTER_ESCALATIONS`] times. Returns the factor and the jitter used.
pub fn cholesky(a: &Tensor, jitter: f64) -> Result<(Tensor, f64)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::dim("cholesky", format!("non-square {:?}", a.shape())));
    }
    if jitter < 0.0 {
        return Err(Error::Contract(format!("negative jitter {jitter}")));
    }
    if let Some(l) = try_cholesky(a, jitter) {
        return Ok((l, jitter));
    }
    let mut j = if jitter < BASE_JITTER { BASE_JITTER } else { jitter * 10.0 };
    for attempt in 0..JITTER_ESCALATIONS {
        if let Some(l) = try_cholesky(a, j) {
            return Ok((l, j));
        }
        if attempt + 1 < JITTER_ESCALATIONS {
            j *= 10.0;
        }
    }
    Err(Error::Decomposition { jitter: j })
}

const TRI_BLOCK: usize = 32;

/// Solves `L X = B` (or `Lᵀ X = B` when `transpose`) for lower-triangular `L`.
pub fn tri_solve(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor> {
    let n = l.rows();
    if l.rank() != 2 || l.cols() != n || b.rank() != 2 || b.rows() != n {
        return Err(Error::dim(
            "tri_solve",
            format!("L {:?}, B {:?}", l.shape(), b.shape()),
        ));
    }
    let k = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    if n == 0 || k == 0 {
        return Ok(Tensor::from_parts(vec![n, k], x));
    }
    // Blocked substitution: off-diagonal updates go through dgemm, the
    // diagonal blocks are solved in place.
    let xp = x.as_mut_ptr();
    let lp = ld.as_ptr();
    let (ni, ki) = (n as isize, k as isize);
    if !transpose {
        let mut r0 = 0;
        while r0 < n {
            let r1 = (r0 + TRI_BLOCK).min(n);
            if r0 > 0 {
                // X[r0..r1] -= L[r0..r1, 0..r0] · X[0..r0]
                // SAFETY: source rows 0..r0 and target rows r0..r1 of x are disjoint.
                unsafe {
                    matrixmultiply::dgemm(
                        r1 - r0, r0, k, -1.0,
                        lp.add(r0 * n), ni, 1,
                        xp, ki, 1,
                        1.0, xp.add(r0 * k), ki, 1,
                    );
                }
            }
            for i in r0..r1 {
                let lii = ld[i * n + i];
                for p in r0..i {
                    let lip = ld[i * n + p];
                    let (head, tail) = x.split_at_mut(i * k);
                    for (xi, xv) in tail[..k].iter_mut().zip(&head[p * k..(p + 1) * k]) {
                        *xi -= lip * xv;
                    }
                }
                for v in &mut x[i * k..(i + 1) * k] {
                    *v /= lii;
                }
            }
            r0 = r1;
        }
    } else {
        let mut r1 = n;
        while r1 > 0 {
            let r0 = r1.saturating_sub(TRI_BLOCK);
            if r1 < n {
                // X[r0..r1] -= L[r1..n, r0..r1]ᵀ · X[r1..n]
                // SAFETY: source rows r1..n and target rows r0..r1 of x are disjoint.
                unsafe {
                    matrixmultiply::dgemm(
                        r1 - r0, n - r1, k, -1.0,
                        lp.add(r1 * n + r0), 1, ni,
                        xp.add(r1 * k), ki, 1,
                        1.0, xp.add(r0 * k), ki, 1,
                    );
                }
            }
            for i in (r0..r1).rev() {
                let lii = ld[i * n + i];
                for p in (i + 1)..r1 {
                    let lpi = ld[p * n + i];
                    let (head, tail) = x.split_at_mut(p * k);
                    for (xi, xv) in head[i * k..(i + 1) * k].iter_mut().zip(&tail[..k]) {
                        *xi -= lpi * xv;
                    }
                }
                for v in &mut x[i * k..(i + 1) * k] {
                    *v /= lii;
                }
            }
            r1 = r0;
        }
    }
    Ok(Tensor::from_parts(vec![n, k], x))
}
