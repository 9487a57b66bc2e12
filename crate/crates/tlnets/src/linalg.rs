//! Dense matrix helpers and a one-sided Jacobi SVD.
//!
//! The factorization of a `(k, n)` matrix with `k <= n` is `x = U diag(s) V`
//! where `U` is `(k, k)` orthogonal and `V` is `(k, n)` with orthonormal
//! rows. Jacobi rotations orthogonalize the columns of `x^T`, which keeps the
//! routine deterministic and accurate for the short-and-wide matrices the
//! blocks produce.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const JACOBI_MAX_SWEEPS: usize = 64;
const JACOBI_TOL: f64 = 1e-14;

/// Regularization constant for the singular-value coupling weights in the
/// backward pass.
pub const SVD_GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// Left factor, `(k, k)`, orthogonal.
    pub u: Tensor,
    /// Singular values, nonincreasing, length `k`.
    pub s: Vec<f64>,
    /// Right factor, `(k, n)`, orthonormal rows.
    pub v: Tensor,
}

/// Plain matrix product of rank-2 tensors.
pub fn mat_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim("mat_mul expects rank-2 tensors"));
    }
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let (q2, r) = (b.shape()[0], b.shape()[1]);
    if q != q2 {
        return Err(Error::dim(format!(
            "mat_mul inner dimensions disagree: ({p},{q}) x ({q2},{r})"
        )));
    }
    let mut out = vec![0.0; p * r];
    let ad = a.data();
    let bd = b.data();
    for i in 0..p {
        for kk in 0..q {
            let aik = ad[i * q + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * r..(kk + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![p, r], out)
}

/// `u * diag(s) * v` for factors shaped like [`SvdFactors`].
pub fn reconstruct(u: &Tensor, s: &[f64], v: &Tensor) -> Result<Tensor> {
    let k = s.len();
    let n = v.shape()[1];
    let mut scaled = vec![0.0; k * n];
    for i in 0..k {
        for j in 0..n {
            scaled[i * n + j] = s[i] * v.at2(i, j);
        }
    }
    mat_mul(u, &Tensor::new(vec![k, n], scaled)?)
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Result<Tensor> {
        reconstruct(&self.u, &self.s, &self.v)
    }
}

/// One-sided Jacobi SVD of a `(k, n)` matrix with `k <= n`.
///
/// Sign convention: in every column of `U` the entry of largest absolute
/// value is nonnegative (ties take the lowest row index); the matching row of
/// `V` is flipped with it. Identical inputs give bitwise-identical factors.
pub fn svd_factorize(x: &Tensor) -> Result<SvdFactors> {
    if x.rank() != 2 {
        return Err(Error::dim("svd expects a rank-2 tensor"));
    }
    let (k, n) = (x.shape()[0], x.shape()[1]);
    if k > n {
        return Err(Error::dim(format!(
            "svd expects rows <= cols, got ({k}, {n}); transpose at the caller"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }

    // columns of a = x^T, stored column-major as k contiguous n-vectors
    let mut cols = vec![0.0; n * k];
    for i in 0..k {
        for j in 0..n {
            cols[i * n + j] = x.at2(i, j);
        }
    }
    // rotation accumulator j_acc, (k, k) row-major, starts as identity
    let mut j_acc = vec![0.0; k * k];
    for i in 0..k {
        j_acc[i * k + i] = 1.0;
    }

    let mut converged = false;
    let mut worst = 0.0f64;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        worst = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let cp = &cols[p * n..(p + 1) * n];
                    let cq = &cols[q * n..(q + 1) * n];
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for j in 0..n {
                        a += cp[j] * cp[j];
                        b += cq[j] * cq[j];
                        g += cp[j] * cq[j];
                    }
                    (a, b, g)
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for j in 0..n {
                    let vp = cols[p * n + j];
                    let vq = cols[q * n + j];
                    cols[p * n + j] = c * vp - s * vq;
                    cols[q * n + j] = s * vp + c * vq;
                }
                for i in 0..k {
                    let jp = j_acc[i * k + p];
                    let jq = j_acc[i * k + q];
                    j_acc[i * k + p] = c * jp - s * jq;
                    j_acc[i * k + q] = s * jp + c * jq;
                }
            }
        }
        if worst <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged && worst > 1e-10 {
        return Err(Error::Numeric {
            what: "jacobi svd did not converge".into(),
            residual: worst,
        });
    }

    let mut sigma: Vec<f64> = (0..k)
        .map(|i| {
            let ci = &cols[i * n..(i + 1) * n];
            ci.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();

    // order by descending singular value, stable
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());

    let s_max = sigma[order[0]];
    let zero_thresh = s_max * 1e-13;

    let mut u = vec![0.0; k * k];
    let mut v = vec![0.0; k * n];
    let mut zero_rows = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        for i in 0..k {
            u[i * k + slot] = j_acc[i * k + src];
        }
        if sigma[src] > zero_thresh {
            let inv = 1.0 / sigma[src];
            for j in 0..n {
                v[slot * n + j] = cols[src * n + j] * inv;
            }
        } else {
            zero_rows.push(slot);
        }
    }
    let mut s: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    for &slot in &zero_rows {
        s[slot] = 0.0;
    }
    sigma.clear();

    // complete V rows for vanished singular values: pick the canonical basis
    // vector with the largest residual after projecting out the rows filled
    // so far (not-yet-completed rows are all zeros and project to nothing)
    for &slot in &zero_rows {
        let mut best_norm = -1.0;
        let mut best = vec![0.0; n];
        for cand in 0..n {
            let mut w = vec![0.0; n];
            w[cand] = 1.0;
            for r in 0..k {
                if r == slot {
                    continue;
                }
                let dot: f64 = (0..n).map(|j| w[j] * v[r * n + j]).sum();
                if dot != 0.0 {
                    for j in 0..n {
                        w[j] -= dot * v[r * n + j];
                    }
                }
            }
            let norm2: f64 = w.iter().map(|x| x * x).sum();
            if norm2 > best_norm {
                best_norm = norm2;
                best = w;
            }
        }
        let inv = 1.0 / best_norm.sqrt();
        for j in 0..n {
            v[slot * n + j] = best[j] * inv;
        }
    }

    // sign convention on U columns
    for col in 0..k {
        let mut arg = 0;
        let mut best = -1.0f64;
        for i in 0..k {
            let a = u[i * k + col].abs();
            if a > best {
                best = a;
                arg = i;
            }
        }
        if u[arg * k + col] < 0.0 {
            for i in 0..k {
                u[i * k + col] = -u[i * k + col];
            }
            for j in 0..n {
                v[col * n + j] = -v[col * n + j];
            }
        }
    }

    Ok(SvdFactors {
        u: Tensor::new(vec![k, k], u)?,
        s,
        v: Tensor::new(vec![k, n], v)?,
    })
}

/// Regularized coupling weight `(s_j^2 - s_i^2) / ((s_j^2 - s_i^2)^2 + eps)`;
/// equals `1/(s_j^2 - s_i^2)` away from degeneracy and stays bounded at it.
#[inline]
fn coupling(si: f64, sj: f64) -> f64 {
    let d = sj * sj - si * si;
    d / (d * d + SVD_GRAD_EPS)
}

/// Regularized reciprocal used for the wide-matrix correction term.
#[inline]
fn recip_s(s: f64) -> f64 {
    s / (s * s + SVD_GRAD_EPS)
}

/// Vector-Jacobian product of the SVD: maps cotangents of (U, s, V) back to a
/// cotangent of the input matrix.
pub fn svd_vjp(
    f: &SvdFactors,
    gu: Option<&Tensor>,
    gs: Option<&Tensor>,
    gv: Option<&Tensor>,
) -> Result<Tensor> {
    let k = f.s.len();
    let n = f.v.shape()[1];
    // inner = the (k, k) matrix M with dX = U M V + wide-matrix correction
    let mut inner = vec![0.0; k * k];

    if let Some(gs) = gs {
        for i in 0..k {
            inner[i * k + i] += gs.data()[i];
        }
    }

    if let Some(gu) = gu {
        // A = U^T gU; antisymmetric part weighted by the coupling matrix,
        // then right-multiplied by diag(s)
        let a = mat_mul(&f.u.transpose2()?, gu)?;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let w = coupling(f.s[i], f.s[j]);
                inner[i * k + j] += w * (a.at2(i, j) - a.at2(j, i)) * f.s[j];
            }
        }
    }

    if let Some(gv) = gv {
        // B = V gV^T; antisymmetric part weighted and left-multiplied by diag(s)
        let b = mat_mul(&f.v, &gv.transpose2()?)?;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let w = coupling(f.s[i], f.s[j]);
                inner[i * k + j] += f.s[i] * w * (b.at2(i, j) - b.at2(j, i));
            }
        }
    }

    let mut dx = mat_mul(&f.u, &mat_mul(&Tensor::new(vec![k, k], inner)?, &f.v)?)?;

    if let Some(gv) = gv {
        if n > k {
            // U diag(1/s) gV (I - V^T V), the component of gV outside row(V)
            let vg = mat_mul(&f.v, &gv.transpose2()?)?; // (k, k) = V gV^T
            let proj = mat_mul(&vg.transpose2()?, &f.v)?; // (V gV^T)^T V = gV projected
            let mut resid = gv.clone();
            for i in 0..k {
                for j in 0..n {
                    let r = resid.at2(i, j) - proj.at2(i, j);
                    resid.set2(i, j, r * recip_s(f.s[i]));
                }
            }
            let corr = mat_mul(&f.u, &resid)?;
            for (d, c) in dx.data_mut().iter_mut().zip(corr.data()) {
                *d += c;
            }
        }
    }

    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent reference decomposition via a two-sided Jacobi
    /// eigendecomposition of the Gram matrix `x x^T`.
    pub fn svd_via_gram_eigen(x: &Tensor) -> SvdFactors {
        let (k, n) = (x.shape()[0], x.shape()[1]);
        let gram = mat_mul(x, &x.transpose2().unwrap()).unwrap();
        let mut g: Vec<f64> = gram.data().to_vec();
        let mut q = vec![0.0; k * k];
        for i in 0..k {
            q[i * k + i] = 1.0;
        }
        for _ in 0..200 {
            let mut off = 0.0f64;
            for p in 0..k {
                for r in (p + 1)..k {
                    off = off.max(g[p * k + r].abs());
                }
            }
            if off < 1e-15 {
                break;
            }
            for p in 0..k {
                for r in (p + 1)..k {
                    let apq = g[p * k + r];
                    if apq.abs() < 1e-18 {
                        continue;
                    }
                    let app = g[p * k + p];
                    let aqq = g[r * k + r];
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..k {
                        let gip = g[i * k + p];
                        let giq = g[i * k + r];
                        g[i * k + p] = c * gip - s * giq;
                        g[i * k + r] = s * gip + c * giq;
                    }
                    for j in 0..k {
                        let gpj = g[p * k + j];
                        let gqj = g[r * k + j];
                        g[p * k + j] = c * gpj - s * gqj;
                        g[r * k + j] = s * gpj + c * gqj;
                    }
                    for i in 0..k {
                        let qip = q[i * k + p];
                        let qiq = q[i * k + r];
                        q[i * k + p] = c * qip - s * qiq;
                        q[i * k + r] = s * qip + c * qiq;
                    }
                }
            }
        }
        let mut eig: Vec<(f64, usize)> = (0..k).map(|i| (g[i * k + i], i)).collect();
        eig.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut u = vec![0.0; k * k];
        let mut s = vec![0.0; k];
        for (slot, &(lam, src)) in eig.iter().enumerate() {
            s[slot] = lam.max(0.0).sqrt();
            for i in 0..k {
                u[i * k + slot] = q[i * k + src];
            }
        }
        let u = Tensor::new(vec![k, k], u).unwrap();
        // v rows = u_i^T x / s_i
        let ut_x = mat_mul(&u.transpose2().unwrap(), x).unwrap();
        let mut v = vec![0.0; k * n];
        for i in 0..k {
            if s[i] > 1e-12 {
                for j in 0..n {
                    v[i * n + j] = ut_x.at2(i, j) / s[i];
                }
            }
        }
        let mut f = SvdFactors {
            u,
            s,
            v: Tensor::new(vec![k, n], v).unwrap(),
        };
        apply_sign_convention(&mut f);
        f
    }

    fn apply_sign_convention(f: &mut SvdFactors) {
        let k = f.s.len();
        let n = f.v.shape()[1];
        for col in 0..k {
            let mut arg = 0;
            let mut best = -1.0f64;
            for i in 0..k {
                let a = f.u.at2(i, col).abs();
                if a > best {
                    best = a;
                    arg = i;
                }
            }
            if f.u.at2(arg, col) < 0.0 {
                for i in 0..k {
                    let val = -f.u.at2(i, col);
                    f.u.set2(i, col, val);
                }
                for j in 0..n {
                    let val = -f.v.at2(col, j);
                    f.v.set2(col, j, val);
                }
            }
        }
    }

    fn check_invariants(x: &Tensor, f: &SvdFactors, tol: f64) {
        let k = f.s.len();
        // ordering and nonnegativity
        for i in 0..k {
            assert!(f.s[i] >= 0.0);
            if i > 0 {
                assert!(f.s[i - 1] >= f.s[i], "singular values out of order");
            }
        }
        // orthonormality
        let utu = mat_mul(&f.u.transpose2().unwrap(), &f.u).unwrap();
        let vvt = mat_mul(&f.v, &f.v.transpose2().unwrap()).unwrap();
        for i in 0..k {
            for j in 0..k {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (utu.at2(i, j) - e).abs() < tol,
                    "U^T U not identity at ({i},{j}): {}",
                    utu.at2(i, j)
                );
                assert!(
                    (vvt.at2(i, j) - e).abs() < tol,
                    "V V^T not identity at ({i},{j}): {}",
                    vvt.at2(i, j)
                );
            }
        }
        // reconstruction
        let rec = f.reconstruct().unwrap();
        assert!(x.max_abs_diff(&rec) < tol, "reconstruction off");
        // sign convention
        for col in 0..k {
            let mut arg = 0;
            let mut best = -1.0f64;
            for i in 0..k {
                let a = f.u.at2(i, col).abs();
                if a > best {
                    best = a;
                    arg = i;
                }
            }
            assert!(f.u.at2(arg, col) >= 0.0, "sign convention violated");
        }
    }

    #[test]
    fn identity_matrix() {
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let f = svd_factorize(&x).unwrap();
        for s in &f.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
        check_invariants(&x, &f, 1e-8);
    }

    #[test]
    fn diagonal_matrix() {
        let x = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = svd_factorize(&x).unwrap();
        assert!((f.s[0] - 3.0).abs() < 1e-12);
        assert!((f.s[1] - 1.0).abs() < 1e-12);
        check_invariants(&x, &f, 1e-8);
    }

    #[test]
    fn random_wide_matrix_matches_gram_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let (k, n) = (4, 12);
            let data: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::new(vec![k, n], data).unwrap();
            let f = svd_factorize(&x).unwrap();
            check_invariants(&x, &f, 1e-8);
            let r = svd_via_gram_eigen(&x);
            for i in 0..k {
                assert!(
                    (f.s[i] - r.s[i]).abs() < 1e-8,
                    "trial {trial}: s[{i}] {} vs {}",
                    f.s[i],
                    r.s[i]
                );
            }
            assert!(f.u.max_abs_diff(&r.u) < 1e-7, "trial {trial}: U mismatch");
            assert!(f.v.max_abs_diff(&r.v) < 1e-7, "trial {trial}: V mismatch");
        }
    }

    #[test]
    fn zero_matrix_keeps_orthonormal_factors() {
        let x = Tensor::zeros(vec![3, 5]);
        let f = svd_factorize(&x).unwrap();
        for s in &f.s {
            assert_eq!(*s, 0.0);
        }
        check_invariants(&x, &f, 1e-8);
    }

    #[test]
    fn rank_deficient_matrix() {
        // rank 1: second row is a multiple of the first
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]]).unwrap();
        let f = svd_factorize(&x).unwrap();
        assert!(f.s[1] < 1e-10);
        check_invariants(&x, &f, 1e-8);
    }

    #[test]
    fn tall_matrix_rejected() {
        let x = Tensor::zeros(vec![5, 3]);
        let err = svd_factorize(&x).unwrap_err();
        assert!(err.to_string().contains("transpose"));
    }

    #[test]
    fn determinism_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..6 * 10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![6, 10], data).unwrap();
        let f1 = svd_factorize(&x).unwrap();
        let f2 = svd_factorize(&x).unwrap();
        assert_eq!(f1.u, f2.u);
        assert_eq!(f1.s, f2.s);
        assert_eq!(f1.v, f2.v);
    }
}
