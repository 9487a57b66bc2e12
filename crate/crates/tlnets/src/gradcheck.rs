//! Central finite-difference verification of tape gradients.
//!
//! All checks run in f64 with step 1e-6 and relative tolerance 1e-4 unless a
//! caller overrides them; an element passes when
//! `|analytic - numeric| <= tol * max(|analytic|, |numeric|, ABS_SCALE)`.

use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Scale below which differences are judged absolutely rather than relatively.
pub const ABS_SCALE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub pass: bool,
    /// Largest `diff / max(|a|, |n|, ABS_SCALE)` seen.
    pub worst_rel: f64,
    pub worst_param: usize,
    pub worst_elem: usize,
    pub checked: usize,
}

/// Gradient of a scalar function by central differences.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + eps;
        let up = f(&work);
        work[i] = point[i] - eps;
        let down = f(&work);
        work[i] = point[i];
        grads.push((up - down) / (2.0 * eps));
    }
    grads
}

/// Compares analytic gradients of `eval` at `base` against central
/// differences over every element of every parameter tensor.
pub fn check_against_fd<F>(
    base: &[Tensor],
    analytic: &[Tensor],
    mut eval: F,
    eps: f64,
    rel_tol: f64,
) -> GradCheckSummary
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(base.len(), analytic.len());
    let mut worst_rel = 0.0f64;
    let mut worst_param = 0;
    let mut worst_elem = 0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = base.to_vec();
    for pi in 0..base.len() {
        assert_eq!(base[pi].shape(), analytic[pi].shape(), "param {pi}");
        for ei in 0..base[pi].len() {
            let orig = base[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work);
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_SCALE);
            if rel > worst_rel {
                worst_rel = rel;
                worst_param = pi;
                worst_elem = ei;
            }
            checked += 1;
        }
    }
    GradCheckSummary {
        pass: worst_rel <= rel_tol,
        worst_rel,
        worst_param,
        worst_elem,
        checked,
    }
}

/// Random matrix with orthonormal factors and prescribed singular values, so
/// SVD gradient checks can keep squared-singular-value gaps above a floor.
pub fn matrix_with_gapped_spectrum(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Tensor {
    assert!(k <= n);
    let u = random_orthonormal(rng, k, k);
    let v = random_orthonormal(rng, k, n);
    // squared singular values spaced 0.35 apart, far above the 1e-3 floor
    let s: Vec<f64> = (0..k)
        .map(|i| (1.0 + 0.35 * (k - i) as f64).sqrt())
        .collect();
    let mut data = vec![0.0; k * n];
    for i in 0..k {
        for j in 0..n {
            let mut acc = 0.0;
            for r in 0..k {
                acc += u[i][r] * s[r] * v[r][j];
            }
            data[i * n + j] = acc;
        }
    }
    Tensor::new(vec![k, n], data).unwrap()
}

/// Orthonormal rows from modified Gram-Schmidt over Gaussian draws.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(rows <= dim);
    let normal = rand_distr::StandardNormal;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(normal)).collect();
        for prev in &out {
            let dot: f64 = w.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= dot * pi;
            }
        }
        let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            for wi in w.iter_mut() {
                *wi /= norm;
            }
            out.push(w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Activation, Graph, LossKind};
    use std::sync::Arc;

    #[test]
    fn finite_diff_on_quadratic() {
        let f = |v: &[f64]| v[0] * v[0] + 2.0 * v[0] * v[1];
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_loss_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = crate::tensor::Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = crate::tensor::Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let eval = |params: &[Tensor]| {
            let mut g = Graph::new();
            let an = g.leaf(params[0].clone(), true).unwrap();
            let bn = g.leaf(params[1].clone(), true).unwrap();
            let p = g.matmul(an, bn).unwrap();
            let s = g.sum(p).unwrap();
            g.value(s).item().unwrap()
        };
        let (loss, da, db) = {
            let mut g = Graph::new();
            let an = g.leaf(a.clone(), true).unwrap();
            let bn = g.leaf(b.clone(), true).unwrap();
            let p = g.matmul(an, bn).unwrap();
            let s = g.sum(p).unwrap();
            let loss = g.value(s).item().unwrap();
            let mut grads = g.backward(s).unwrap();
            (loss, grads.take(an).unwrap(), grads.take(bn).unwrap())
        };
        assert!(loss.is_finite());
        let summary = check_against_fd(
            &[a, b],
            &[da, db],
            eval,
            FD_STEP,
            1e-5,
        );
        assert!(summary.pass, "worst rel {:e}", summary.worst_rel);
    }

    #[test]
    fn spectral_chain_grads_match_fd() {
        // loss through rfft -> complex weights -> irfft, gradients for both
        // the input signal and the weights
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, n_in, n_out) = (2usize, 8usize, 6usize);
        let f_in = crate::fft::n_freq_for(n_in);
        let f_out = crate::fft::n_freq_for(n_out);
        let x = Tensor::new(
            vec![c, n_in],
            (0..c * n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let wr = Tensor::new(
            vec![c, f_out, f_in],
            (0..c * f_out * f_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let wi = Tensor::new(
            vec![c, f_out, f_in],
            (0..c * f_out * f_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let target = Tensor::new(
            vec![c, n_out],
            (0..c * n_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let run = |params: &[Tensor]| -> (f64, Option<(Tensor, Tensor, Tensor)>) {
            let mut g = Graph::new();
            let xn = g.leaf(params[0].clone(), true).unwrap();
            let wrn = g.leaf(params[1].clone(), true).unwrap();
            let win = g.leaf(params[2].clone(), true).unwrap();
            let tn = g.leaf(target.clone(), false).unwrap();
            let spec = g.rfft(xn).unwrap();
            let out_spec = g.complex_apply(spec, wrn, win).unwrap();
            let y = g.irfft(out_spec, n_out).unwrap();
            let l = g.loss(y, tn, LossKind::Mse).unwrap();
            let loss = g.value(l).item().unwrap();
            let mut grads = g.backward(l).unwrap();
            (
                loss,
                Some((
                    grads.take(xn).unwrap(),
                    grads.take(wrn).unwrap(),
                    grads.take(win).unwrap(),
                )),
            )
        };
        let (_, g0) = run(&[x.clone(), wr.clone(), wi.clone()]);
        let (dx, dwr, dwi) = g0.unwrap();
        let summary = check_against_fd(
            &[x, wr, wi],
            &[dx, dwr, dwi],
            |p| run(p).0,
            FD_STEP,
            REL_TOL,
        );
        assert!(summary.pass, "worst rel {:e}", summary.worst_rel);
    }

    #[test]
    fn gelu_gradient_matches_fd_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            let numeric = {
                let up = Activation::Gelu.apply(x + 1e-6);
                let down = Activation::Gelu.apply(x - 1e-6);
                (up - down) / 2e-6
            };
            let analytic = Activation::Gelu.derivative(x);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel <= 1e-6, "gelu grad at {x}: rel {rel:e}");
        }
    }

    #[test]
    fn svd_scalar_function_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = matrix_with_gapped_spectrum(&mut rng, 3, 6);
        // weight tensors making the scalar depend on all three factors
        let cu = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cs = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cv = Tensor::new(vec![3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let run = |params: &[Tensor]| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xn = g.leaf(params[0].clone(), true).unwrap();
            let (u, s, v) = g.svd(xn).unwrap();
            let cun = g.constant(cu.clone()).unwrap();
            let csn = g.constant(cs.clone()).unwrap();
            let cvn = g.constant(cv.clone()).unwrap();
            let wu = g.mul(u, cun).unwrap();
            let ws = g.mul(s, csn).unwrap();
            let wv = g.mul(v, cvn).unwrap();
            let su = g.sum(wu).unwrap();
            let ss = g.sum(ws).unwrap();
            let sv = g.sum(wv).unwrap();
            let t = g.add(su, ss).unwrap();
            let t = g.add(t, sv).unwrap();
            let loss = g.value(t).item().unwrap();
            let mut grads = g.backward(t).unwrap();
            (loss, grads.take(xn))
        };
        let (_, dx) = run(&[x.clone()]);
        let summary =
            check_against_fd(&[x], &[dx.unwrap()], |p| run(p).0, FD_STEP, REL_TOL);
        assert!(summary.pass, "worst rel {:e}", summary.worst_rel);
    }

    #[test]
    fn masked_matmul_grads_match_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (p, q, r) = (5usize, 5usize, 3usize);
        let w = Tensor::new(vec![p, q], (0..p * q).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = Tensor::new(vec![q, r], (0..q * r).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut mask = vec![0.0; p * q];
        for i in 0..p as isize {
            for j in 0..q as isize {
                if (i - j).abs() <= 1 {
                    mask[(i * q as isize + j) as usize] = 1.0;
                }
            }
        }
        let mask = Arc::new(Tensor::new(vec![p, q], mask).unwrap());
        let run = |params: &[Tensor]| -> (f64, Option<(Tensor, Tensor)>) {
            let mut g = Graph::new();
            let wn = g.leaf(params[0].clone(), true).unwrap();
            let xn = g.leaf(params[1].clone(), true).unwrap();
            let y = g.masked_matmul(wn, Arc::clone(&mask), xn).unwrap();
            let s = g.sum(y).unwrap();
            let loss = g.value(s).item().unwrap();
            let mut grads = g.backward(s).unwrap();
            (loss, Some((grads.take(wn).unwrap(), grads.take(xn).unwrap())))
        };
        let (_, gr) = run(&[w.clone(), x.clone()]);
        let (dw, dx) = gr.unwrap();
        let summary = check_against_fd(
            &[w, x],
            &[dw, dx],
            |p| run(p).0,
            FD_STEP,
            REL_TOL,
        );
        assert!(summary.pass, "worst rel {:e}", summary.worst_rel);
    }
}
