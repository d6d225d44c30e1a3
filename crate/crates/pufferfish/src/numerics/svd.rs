//! One-sided Jacobi SVD and the balanced truncated split used to
//! initialize low-rank factor pairs.
//!
//! One-sided Jacobi was chosen over bidiagonalization because the matrices
//! here are at most a few thousand rows and the method delivers high
//! relative accuracy with very little code.

use super::{matmul, Tensor};
use crate::error::{Error, Result};

/// Rotations stop once every normalized off-diagonal falls below this.
const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Factorization `input = u * diag(s) * vt`.
///
/// * `s` is non-negative and non-increasing, length `min(m, n)`.
/// * Columns of `u` (m x k) and rows of `vt` (k x n) are orthonormal.
/// * The largest-magnitude entry of every column of `u` is non-negative,
///   so repeated factorizations of the same matrix are reproducible.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

impl SvdResult {
    /// `u * diag(s) * vt`, for tests and reconstruction-error reports.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let k = self.s.len();
        let scaled = Tensor::from_fn_2d(k, self.vt.cols(), |i, j| self.s[i] * self.vt.at2(i, j));
        matmul(&self.u, &scaled)
    }
}

/// Singular value decomposition of a 2-D tensor.
pub fn svd(m: &Tensor) -> Result<SvdResult> {
    if m.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "svd expects a 2-D tensor, got {:?}",
            m.shape()
        )));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Argument("svd: empty matrix".into()));
    }
    if !m.all_finite() {
        return Err(Error::Argument("svd: non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // A = (A^T)^T = (U' S Vt')^T, so u = Vt'^T and vt = U'^T.
        let t = svd_tall(&m.transposed())?;
        let mut out = SvdResult {
            u: t.vt.transposed(),
            s: t.s,
            vt: t.u.transposed(),
        };
        apply_sign_convention(&mut out);
        Ok(out)
    }
}

/// Jacobi on a tall (m >= n) matrix. Works on the transpose so each column
/// of the input is a contiguous row of the working buffer.
fn svd_tall(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    // w[i] holds column i of `a`; v[i] holds column i of the accumulated V.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.at2(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();
    let mut norms2: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();

    let mut max_off = 0.0f64;
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        max_off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let c: f64 = w[i].iter().zip(&w[j]).map(|(x, y)| x * y).sum();
                let denom = (norms2[i] * norms2[j]).sqrt();
                if denom == 0.0 {
                    continue;
                }
                let off = c.abs() / denom;
                max_off = max_off.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let zeta = (norms2[j] - norms2[i]) / (2.0 * c);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_pair(&mut w, i, j, cs, sn);
                rotate_pair(&mut v, i, j, cs, sn);
                norms2[i] = w[i].iter().map(|x| x * x).sum();
                norms2[j] = w[j].iter().map(|x| x * x).sum();
            }
        }
        if max_off <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical {
            what: format!("one-sided Jacobi did not converge in {} sweeps", MAX_SWEEPS),
            residual: max_off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let s_all: Vec<f64> = norms2.iter().map(|x| x.sqrt()).collect();
    order.sort_by(|&i, &j| s_all[j].partial_cmp(&s_all[i]).unwrap().then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&i| s_all[i]).collect();
    let cutoff = s[0] * 1e-300;
    let mut u = Tensor::zeros(&[m, n]);
    let mut filled = vec![false; n];
    for (l, &src) in order.iter().enumerate() {
        if s[l] > cutoff && s[l] > 0.0 {
            let inv = 1.0 / s[l];
            for r in 0..m {
                u.set2(r, l, w[src][r] * inv);
            }
            filled[l] = true;
        }
    }
    complete_zero_columns(&mut u, &filled);

    let mut vt = Tensor::zeros(&[n, n]);
    for (l, &src) in order.iter().enumerate() {
        for c in 0..n {
            vt.set2(l, c, v[src][c]);
        }
    }

    let mut out = SvdResult { u, s, vt };
    apply_sign_convention(&mut out);
    Ok(out)
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, cs: f64, sn: f64) {
    debug_assert!(i < j);
    let (lo, hi) = cols.split_at_mut(j);
    let ci = &mut lo[i];
    let cj = &mut hi[0];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = cs * xi - sn * yj;
        *y = sn * xi + cs * yj;
    }
}

/// Exactly rank-deficient inputs leave some columns of `u` undefined; fill
/// them with a Gram-Schmidt completion over canonical basis vectors so the
/// orthonormality invariant holds regardless of input rank.
fn complete_zero_columns(u: &mut Tensor, filled: &[bool]) {
    let m = u.rows();
    let k = u.cols();
    let mut next_basis = 0usize;
    for l in 0..k {
        if filled[l] {
            continue;
        }
        'candidates: while next_basis < m {
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for c in 0..k {
                if c == l || (!filled[c] && c > l) {
                    continue;
                }
                let dot: f64 = (0..m).map(|r| cand[r] * u.at2(r, c)).sum();
                for (r, cv) in cand.iter_mut().enumerate() {
                    *cv -= dot * u.at2(r, c);
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (r, cv) in cand.iter().enumerate() {
                    u.set2(r, l, cv / norm);
                }
                break 'candidates;
            }
        }
    }
}

/// Force the largest-magnitude entry of each left singular vector
/// non-negative (first index wins ties), flipping the matching row of vt.
fn apply_sign_convention(res: &mut SvdResult) {
    let (m, k) = (res.u.rows(), res.u.cols());
    let n = res.vt.cols();
    for l in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for r in 0..m {
            let a = res.u.at2(r, l).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if res.u.at2(best, l) < 0.0 {
            for r in 0..m {
                let x = res.u.at2(r, l);
                res.u.set2(r, l, -x);
            }
            for c in 0..n {
                let x = res.vt.at2(l, c);
                res.vt.set2(l, c, -x);
            }
        }
    }
}

/// Splits `m ~ u_factor * v_factor` at rank `r` with the singular values
/// shared evenly: `u_factor = U[:, :r] sqrt(S)`, `v_factor = sqrt(S) Vt[:r, :]`.
/// Both factors end up with equal Frobenius norm, which keeps the
/// subsequent gradient updates balanced between the two.
pub fn truncated_split(m: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    if m.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "truncated_split expects a 2-D tensor, got {:?}",
            m.shape()
        )));
    }
    let bound = m.rows().min(m.cols());
    if r == 0 || r > bound {
        return Err(Error::Argument(format!(
            "truncated_split: rank {} out of range 1..={} for {:?}",
            r,
            bound,
            m.shape()
        )));
    }
    let res = svd(m)?;
    let u_factor = Tensor::from_fn_2d(m.rows(), r, |i, j| res.u.at2(i, j) * res.s[j].sqrt());
    let v_factor = Tensor::from_fn_2d(r, m.cols(), |i, j| res.s[i].sqrt() * res.vt.at2(i, j));
    Ok((u_factor, v_factor))
}
