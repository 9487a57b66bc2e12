//! The four learnable transform blocks.
//!
//! Each block maps a `(channels, time)` matrix to another one, with its
//! trainable state held in a small params struct. Forward passes are graph
//! compositions of tape primitives, so gradients come from the tape; the
//! `apply` helpers run the same composition off-tape for plain evaluation.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::fft::n_freq_for;
use crate::graph::{Activation, ConvMode, Graph, NodeId};
use crate::tensor::Tensor;

/// Standard deviation used for all noise in parameter initialization.
pub const INIT_STD: f64 = 0.02;

pub fn noise_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(normal)).collect();
    Tensor::new(shape, data).unwrap()
}

// ---------------------------------------------------------------------------
// FT block: x -> irfft(W · rfft(x)) with a dense per-channel complex W
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FtBlockParams {
    /// `(channels, F_out, F_in)` real parts of the spectral weights.
    pub w_re: Tensor,
    /// `(channels, F_out, F_in)` imaginary parts.
    pub w_im: Tensor,
    pub n_in: usize,
    pub n_out: usize,
}

impl FtBlockParams {
    /// Exact identity weights: `w_re = I`, `w_im = 0`. With `n_out == n_in`
    /// the block is the identity map on any real input.
    pub fn identity(channels: usize, n_in: usize, n_out: usize) -> Self {
        let (f_in, f_out) = (n_freq_for(n_in), n_freq_for(n_out));
        let mut w_re = Tensor::zeros(vec![channels, f_out, f_in]);
        for c in 0..channels {
            for k in 0..f_out.min(f_in) {
                w_re.data_mut()[(c * f_out + k) * f_in + k] = 1.0;
            }
        }
        FtBlockParams {
            w_re,
            w_im: Tensor::zeros(vec![channels, f_out, f_in]),
            n_in,
            n_out,
        }
    }

    /// Identity real part plus small noise on both parts, so a fresh block
    /// starts near the identity map.
    pub fn init(channels: usize, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::identity(channels, n_in, n_out);
        let (f_in, f_out) = (n_freq_for(n_in), n_freq_for(n_out));
        let noise_re = noise_tensor(rng, vec![channels, f_out, f_in]);
        let noise_im = noise_tensor(rng, vec![channels, f_out, f_in]);
        for (w, n) in p.w_re.data_mut().iter_mut().zip(noise_re.data()) {
            *w += n;
        }
        p.w_im = noise_im;
        p
    }

    /// Off-tape forward for plain evaluation.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false)?;
        let wr = g.leaf(self.w_re.clone(), false)?;
        let wi = g.leaf(self.w_im.clone(), false)?;
        let out = ft_block_forward(&mut g, xn, wr, wi, self.n_out)?;
        Ok(g.value(out).clone())
    }
}

/// Spectral-domain linear map: per channel,
/// `out = irfft(W · rfft(x), n_out)`. Linear in `x` for fixed `W`, and real
/// for arbitrary complex `W` by the real-part convention of `irfft`.
pub fn ft_block_forward(
    g: &mut Graph,
    x: NodeId,
    w_re: NodeId,
    w_im: NodeId,
    n_out: usize,
) -> Result<NodeId> {
    let spec = g.rfft(x)?;
    let out_spec = g.complex_apply(spec, w_re, w_im)?;
    g.irfft(out_spec, n_out)
}

// ---------------------------------------------------------------------------
// SVD block: Hadamard mixing of input factors with trainable-weight factors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SvdBlockParams {
    /// Trainable matrix with the same `(k, n)` shape as the block input.
    pub phi: Tensor,
}

impl SvdBlockParams {
    pub fn init(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        SvdBlockParams {
            phi: noise_tensor(rng, vec![k, n]),
        }
    }

    pub fn apply(&self, x: &Tensor, sigma: Activation) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false)?;
        let pn = g.leaf(self.phi.clone(), false)?;
        let out = svd_block_forward(&mut g, xn, pn, sigma)?;
        Ok(g.value(out).clone())
    }
}

/// Decomposes both the input and the weight, mixes corresponding factors
/// elementwise, and reconstructs:
/// `sigma((U_x ⊙ U_phi) diag(S_x ⊙ S_phi) (V_x ⊙ V_phi))`.
pub fn svd_block_forward(
    g: &mut Graph,
    x: NodeId,
    phi: NodeId,
    sigma: Activation,
) -> Result<NodeId> {
    let (ux, sx, vx) = g.svd(x)?;
    let (up, sp, vp) = g.svd(phi)?;
    let u = g.mul(ux, up)?;
    let s = g.mul(sx, sp)?;
    let v = g.mul(vx, vp)?;
    let us = g.mul_diag(u, s)?;
    let y = g.matmul(us, v)?;
    g.activation(y, sigma)
}

// ---------------------------------------------------------------------------
// Sparse matrix block: fixed binary shape mask over a trainable dense matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SparseMatrixParams {
    /// Trainable `(n_out, n_in)` matrix, applied along the time axis and
    /// shared across channels.
    pub phi_m: Tensor,
    /// Fixed binary mask, immutable after construction.
    pub mask: Arc<Tensor>,
}

impl SparseMatrixParams {
    pub fn init(mask: Arc<Tensor>, rng: &mut ChaCha8Rng) -> Self {
        let shape = mask.shape().to_vec();
        SparseMatrixParams {
            phi_m: noise_tensor(rng, shape),
            mask,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false)?;
        let pn = g.leaf(self.phi_m.clone(), false)?;
        let out = sparse_matrix_forward(&mut g, xn, pn, Arc::clone(&self.mask))?;
        Ok(g.value(out).clone())
    }
}

/// `(mask ⊙ phi) x` along the time axis: transposes the `(C, n_in)` input so
/// channels sit in columns, applies the masked matrix, transposes back.
pub fn sparse_matrix_forward(
    g: &mut Graph,
    x: NodeId,
    phi_m: NodeId,
    mask: Arc<Tensor>,
) -> Result<NodeId> {
    let xt = g.transpose(x)?;
    let y = g.masked_matmul(phi_m, mask, xt)?;
    g.transpose(y)
}

/// Shape mask made of wrap-around diagonal bands (one per width, each
/// centered on the mapped diagonal index `round(i * n_in / n_out)`) plus a
/// number of fully dense rows spaced evenly. Every row ends up with at least
/// one nonzero.
pub fn build_default_mask(
    n_out: usize,
    n_in: usize,
    band_widths: &[usize],
    global_rows: usize,
) -> Result<Tensor> {
    if n_out == 0 || n_in == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    if let Some(w) = band_widths.iter().find(|w| **w % 2 == 0 || **w == 0) {
        return Err(Error::invalid(format!("band width {w} must be odd")));
    }
    if global_rows > n_out {
        return Err(Error::invalid(format!(
            "global_rows {global_rows} exceeds n_out {n_out}"
        )));
    }
    let mut mask = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let center = ((i * n_in) as f64 / n_out as f64).round() as usize % n_in;
        for &w in band_widths {
            let half = (w as isize - 1) / 2;
            for off in -half..=half {
                let col = (center as isize + off).rem_euclid(n_in as isize) as usize;
                mask[i * n_in + col] = 1.0;
            }
        }
    }
    for j in 0..global_rows {
        let row = j * n_out / global_rows;
        for col in 0..n_in {
            mask[row * n_in + col] = 1.0;
        }
    }
    // a width list may be empty; keep every row connected
    for i in 0..n_out {
        if mask[i * n_in..(i + 1) * n_in].iter().all(|v| *v == 0.0) {
            let center = ((i * n_in) as f64 / n_out as f64).round() as usize % n_in;
            mask[i * n_in + center] = 1.0;
        }
    }
    Tensor::new(vec![n_out, n_in], mask)
}

// ---------------------------------------------------------------------------
// Conv block: same-padded 1D convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvBlockParams {
    /// `(C_out, C_in, K)` kernels, `K` odd.
    pub kernels: Tensor,
}

impl ConvBlockParams {
    /// Small random kernels.
    pub fn init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlockParams {
            kernels: noise_tensor(rng, vec![c_out, c_in, k]),
        }
    }

    /// Center-delta identity (square channel maps) plus small noise, so the
    /// block starts near the identity when it carries the layer signal.
    pub fn init_near_identity(channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut kernels = noise_tensor(rng, vec![channels, channels, k]);
        let mid = (k - 1) / 2;
        for c in 0..channels {
            kernels.data_mut()[(c * channels + c) * k + mid] += 1.0;
        }
        ConvBlockParams { kernels }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false)?;
        let kn = g.leaf(self.kernels.clone(), false)?;
        let out = conv_block_forward(&mut g, xn, kn)?;
        Ok(g.value(out).clone())
    }
}

/// Length-preserving convolution with zero padding.
pub fn conv_block_forward(g: &mut Graph, x: NodeId, kernels: NodeId) -> Result<NodeId> {
    g.conv1d(x, kernels, ConvMode::SameZero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_against_fd, FD_STEP, REL_TOL};
    use crate::linalg;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    // -- FT block ----------------------------------------------------------

    #[test]
    fn ft_identity_weights_are_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [8usize, 12, 15] {
            let p = FtBlockParams::identity(3, n, n);
            let x = rand_tensor(&mut rng, vec![3, n]);
            let y = p.apply(&x).unwrap();
            assert!(y.max_abs_diff(&x) <= 1e-10, "n={n}");
        }
    }

    #[test]
    fn ft_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = FtBlockParams::identity(2, 8, 8);
        p.w_re = Tensor::zeros(vec![2, 5, 5]);
        let x = rand_tensor(&mut rng, vec![2, 8]);
        let y = p.apply(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    /// Dense reference: builds the explicit DFT matrix, applies W in the
    /// frequency domain, Hermitian-extends, applies the inverse DFT matrix
    /// and keeps the real part.
    fn ft_reference(x: &Tensor, p: &FtBlockParams) -> Tensor {
        let (c, n_in) = (x.shape()[0], x.shape()[1]);
        let n_out = p.n_out;
        let (f_in, f_out) = (n_freq_for(n_in), n_freq_for(n_out));
        let mut out = Tensor::zeros(vec![c, n_out]);
        for ch in 0..c {
            // forward DFT, nonredundant bins
            let mut xr = vec![0.0; f_in];
            let mut xi = vec![0.0; f_in];
            for k in 0..f_in {
                for t in 0..n_in {
                    let ang = -std::f64::consts::TAU * (k * t) as f64 / n_in as f64;
                    xr[k] += x.at2(ch, t) * ang.cos();
                    xi[k] += x.at2(ch, t) * ang.sin();
                }
            }
            xi[0] = 0.0;
            if n_in % 2 == 0 {
                xi[f_in - 1] = 0.0;
            }
            // complex weight matrix-vector product
            let mut yr = vec![0.0; f_out];
            let mut yi = vec![0.0; f_out];
            for fo in 0..f_out {
                for fi in 0..f_in {
                    let wr = p.w_re.at3(ch, fo, fi);
                    let wi = p.w_im.at3(ch, fo, fi);
                    yr[fo] += wr * xr[fi] - wi * xi[fi];
                    yi[fo] += wr * xi[fi] + wi * xr[fi];
                }
            }
            // Hermitian extension and inverse DFT, real part
            let mut fr = vec![0.0; n_out];
            let mut fi_ = vec![0.0; n_out];
            fr[..f_out].copy_from_slice(&yr);
            fi_[..f_out].copy_from_slice(&yi);
            let last = if n_out % 2 == 0 { f_out - 2 } else { f_out - 1 };
            for k in 1..=last {
                fr[n_out - k] = yr[k];
                fi_[n_out - k] = -yi[k];
            }
            for t in 0..n_out {
                let mut acc = 0.0;
                for k in 0..n_out {
                    let ang = std::f64::consts::TAU * (k * t) as f64 / n_out as f64;
                    acc += fr[k] * ang.cos() - fi_[k] * ang.sin();
                }
                out.set2(ch, t, acc / n_out as f64);
            }
        }
        out
    }

    #[test]
    fn ft_random_weights_match_dft_matrix_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, n_in, n_out) = (2usize, 16usize, 8usize);
        let (f_in, f_out) = (n_freq_for(n_in), n_freq_for(n_out));
        let p = FtBlockParams {
            w_re: rand_tensor(&mut rng, vec![c, f_out, f_in]),
            w_im: rand_tensor(&mut rng, vec![c, f_out, f_in]),
            n_in,
            n_out,
        };
        let x = rand_tensor(&mut rng, vec![c, n_in]);
        let got = p.apply(&x).unwrap();
        let want = ft_reference(&x, &p);
        assert!(got.max_abs_diff(&want) <= 1e-9);
    }

    #[test]
    fn ft_block_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FtBlockParams::init(2, 12, 12, &mut rng);
        let x = rand_tensor(&mut rng, vec![2, 12]);
        let y = rand_tensor(&mut rng, vec![2, 12]);
        let (a, b) = (0.7, -1.3);
        let mut combo = Tensor::zeros(vec![2, 12]);
        for i in 0..combo.len() {
            combo.data_mut()[i] = a * x.data()[i] + b * y.data()[i];
        }
        let lhs = p.apply(&combo).unwrap();
        let fx = p.apply(&x).unwrap();
        let fy = p.apply(&y).unwrap();
        let mut rhs = Tensor::zeros(vec![2, 12]);
        for i in 0..rhs.len() {
            rhs.data_mut()[i] = a * fx.data()[i] + b * fy.data()[i];
        }
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn ft_output_real_for_arbitrary_complex_weights() {
        // realness is structural (irfft returns real tensors); check that a
        // wildly non-Hermitian W still produces finite real output
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f_in, f_out) = (n_freq_for(10), n_freq_for(10));
        let p = FtBlockParams {
            w_re: rand_tensor(&mut rng, vec![1, f_out, f_in]),
            w_im: rand_tensor(&mut rng, vec![1, f_out, f_in]),
            n_in: 10,
            n_out: 10,
        };
        let x = rand_tensor(&mut rng, vec![1, 10]);
        let y = p.apply(&x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    // -- SVD block ----------------------------------------------------------

    #[test]
    fn svd_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (k, n) in [(2usize, 5usize), (4, 32), (3, 3)] {
            let p = SvdBlockParams::init(k, n, &mut rng);
            let x = rand_tensor(&mut rng, vec![k, n]);
            let y = p.apply(&x, Activation::Relu).unwrap();
            assert_eq!(y.shape(), &[k, n]);
        }
    }

    #[test]
    fn svd_block_singular_values_multiply_pairwise() {
        // x with singular values [3, 1] and phi with [5, 2]: the mixed
        // diagonal pairs sorted factors positionwise, giving [15, 2]
        let x = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let phi = Tensor::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let fx = linalg::svd_factorize(&x).unwrap();
        let fp = linalg::svd_factorize(&phi).unwrap();
        let mixed: Vec<f64> = fx.s.iter().zip(&fp.s).map(|(a, b)| a * b).collect();
        assert!((mixed[0] - 15.0).abs() < 1e-10);
        assert!((mixed[1] - 2.0).abs() < 1e-10);
    }

    /// Scripted reference composing the same factor Hadamards from two
    /// independently computed decompositions.
    fn svd_block_reference(x: &Tensor, phi: &Tensor, sigma: Activation) -> Tensor {
        let fx = linalg::svd_factorize(x).unwrap();
        let fp = linalg::svd_factorize(phi).unwrap();
        let k = fx.s.len();
        let n = x.shape()[1];
        let mut u = Tensor::zeros(vec![k, k]);
        for i in 0..k {
            for j in 0..k {
                u.set2(i, j, fx.u.at2(i, j) * fp.u.at2(i, j));
            }
        }
        let s: Vec<f64> = fx.s.iter().zip(&fp.s).map(|(a, b)| a * b).collect();
        let mut v = Tensor::zeros(vec![k, n]);
        for i in 0..k {
            for j in 0..n {
                v.set2(i, j, fx.v.at2(i, j) * fp.v.at2(i, j));
            }
        }
        let rec = linalg::reconstruct(&u, &s, &v).unwrap();
        let data = rec.data().iter().map(|t| sigma.apply(*t)).collect();
        Tensor::new(vec![k, n], data).unwrap()
    }

    #[test]
    fn svd_block_matches_scripted_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (k, n) = (4usize, 32usize);
        let x = rand_tensor(&mut rng, vec![k, n]);
        let p = SvdBlockParams {
            phi: rand_tensor(&mut rng, vec![k, n]),
        };
        let got = p.apply(&x, Activation::Relu).unwrap();
        let want = svd_block_reference(&x, &p.phi, Activation::Relu);
        assert!(got.max_abs_diff(&want) <= 1e-8);
    }

    #[test]
    fn svd_block_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, vec![3, 10]);
        let p = SvdBlockParams::init(3, 10, &mut rng);
        let y1 = p.apply(&x, Activation::Relu).unwrap();
        let y2 = p.apply(&x, Activation::Relu).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn svd_block_rejects_tall_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SvdBlockParams::init(5, 3, &mut rng);
        let x = rand_tensor(&mut rng, vec![5, 3]);
        let err = p.apply(&x, Activation::Relu).unwrap_err();
        assert!(err.to_string().contains("transpose"));
    }

    // -- sparse matrix block -------------------------------------------------

    #[test]
    fn mask_width_one_is_identity_pattern() {
        let m = build_default_mask(4, 4, &[1], 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.at2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn mask_width_three_has_three_per_row_with_wraparound() {
        let m = build_default_mask(8, 8, &[3], 0).unwrap();
        for i in 0..8 {
            let count: f64 = m.row(i).iter().sum();
            assert_eq!(count, 3.0, "row {i}");
        }
        // wrap: row 0 covers columns 7, 0, 1
        assert_eq!(m.at2(0, 7), 1.0);
        assert_eq!(m.at2(0, 0), 1.0);
        assert_eq!(m.at2(0, 1), 1.0);
    }

    #[test]
    fn mask_nonzeros_match_brute_force_union() {
        let n = 64;
        let widths = [3usize, 9];
        let global_rows = 2;
        let m = build_default_mask(n, n, &widths, global_rows).unwrap();
        // brute-force set union
        let mut expect = std::collections::HashSet::new();
        for i in 0..n {
            let center = ((i * n) as f64 / n as f64).round() as usize % n;
            for &w in &widths {
                let half = (w - 1) / 2;
                for off in 0..w {
                    let col = (center + n + off - half) % n;
                    expect.insert((i, col));
                }
            }
        }
        for j in 0..global_rows {
            let row = j * n / global_rows;
            for col in 0..n {
                expect.insert((row, col));
            }
        }
        let nonzeros: usize = m.data().iter().filter(|v| **v == 1.0).count();
        assert_eq!(nonzeros, expect.len());
        for (i, j) in expect {
            assert_eq!(m.at2(i, j), 1.0);
        }
    }

    #[test]
    fn mask_rejects_even_widths() {
        assert!(matches!(
            build_default_mask(8, 8, &[4], 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sparse_forward_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (c, n_in, n_out) = (3usize, 12usize, 12usize);
        let mask = Arc::new(build_default_mask(n_out, n_in, &[3, 9], 2).unwrap());
        let p = SparseMatrixParams::init(Arc::clone(&mask), &mut rng);
        let x = rand_tensor(&mut rng, vec![c, n_in]);
        let got = p.apply(&x).unwrap();
        // dense (phi ⊙ mask) x, channel by channel
        let mut want = Tensor::zeros(vec![c, n_out]);
        for ch in 0..c {
            for i in 0..n_out {
                let mut acc = 0.0;
                for j in 0..n_in {
                    acc += p.phi_m.at2(i, j) * mask.at2(i, j) * x.at2(ch, j);
                }
                want.set2(ch, i, acc);
            }
        }
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn sparse_all_ones_equals_dense_all_zeros_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let ones = Arc::new(Tensor::new(vec![n, n], vec![1.0; n * n]).unwrap());
        let p = SparseMatrixParams::init(ones, &mut rng);
        let x = rand_tensor(&mut rng, vec![2, n]);
        let dense = p.apply(&x).unwrap();
        let want = linalg::mat_mul(&p.phi_m, &x.transpose2().unwrap())
            .unwrap()
            .transpose2()
            .unwrap();
        assert!(dense.max_abs_diff(&want) <= 1e-12);

        let zeros = Arc::new(Tensor::zeros(vec![n, n]));
        let pz = SparseMatrixParams {
            phi_m: p.phi_m.clone(),
            mask: zeros,
        };
        let out = pz.apply(&x).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    // -- conv block -----------------------------------------------------------

    #[test]
    fn conv_block_center_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ConvBlockParams::init_near_identity(3, 3, &mut rng);
        // strip the noise, keep the pure delta
        for (i, v) in p.kernels.data_mut().iter_mut().enumerate() {
            let (pair, j) = (i / 3, i % 3);
            let (o, c) = (pair / 3, pair % 3);
            *v = if o == c && j == 1 { 1.0 } else { 0.0 };
        }
        let x = rand_tensor(&mut rng, vec![3, 10]);
        let y = p.apply(&x).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-15);
    }

    #[test]
    fn conv_block_zero_kernels_zero_output() {
        let p = ConvBlockParams {
            kernels: Tensor::zeros(vec![2, 2, 3]),
        };
        let x = Tensor::new(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap();
        let y = p.apply(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    // -- gradients through every block ---------------------------------------

    #[test]
    fn block_parameter_gradients_pass_finite_difference_checks() {
        for seed in [100u64, 101, 102] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, n) = (2usize, 8usize);
            let f = n_freq_for(n);
            let x = rand_tensor(&mut rng, vec![c, n]);
            let target = rand_tensor(&mut rng, vec![c, n]);
            let mask = Arc::new(build_default_mask(n, n, &[3], 1).unwrap());

            // one parameter tensor per block kind, all reached from one loss
            let w_re = rand_tensor(&mut rng, vec![c, f, f]);
            let w_im = rand_tensor(&mut rng, vec![c, f, f]);
            let phi = crate::gradcheck::matrix_with_gapped_spectrum(&mut rng, c, n);
            let phi_m = rand_tensor(&mut rng, vec![n, n]);
            let kernels = rand_tensor(&mut rng, vec![c, c, 3]);

            let run = |params: &[Tensor]| -> (f64, Option<Vec<Tensor>>) {
                let mut g = Graph::new();
                let xn = g.leaf(x.clone(), false).unwrap();
                let tn = g.leaf(target.clone(), false).unwrap();
                let wrn = g.leaf(params[0].clone(), true).unwrap();
                let win = g.leaf(params[1].clone(), true).unwrap();
                let phin = g.leaf(params[2].clone(), true).unwrap();
                let pmn = g.leaf(params[3].clone(), true).unwrap();
                let kn = g.leaf(params[4].clone(), true).unwrap();

                let ft = ft_block_forward(&mut g, xn, wrn, win, n).unwrap();
                let sv = svd_block_forward(&mut g, xn, phin, Activation::Gelu).unwrap();
                let sp = sparse_matrix_forward(&mut g, xn, pmn, Arc::clone(&mask)).unwrap();
                let cv = conv_block_forward(&mut g, xn, kn).unwrap();

                let a = g.add(ft, sv).unwrap();
                let b = g.add(sp, cv).unwrap();
                let y = g.add(a, b).unwrap();
                let l = g.loss(y, tn, crate::graph::LossKind::Mse).unwrap();
                let loss = g.value(l).item().unwrap();
                let mut grads = g.backward(l).unwrap();
                let out = vec![
                    grads.take(wrn).unwrap(),
                    grads.take(win).unwrap(),
                    grads.take(phin).unwrap(),
                    grads.take(pmn).unwrap(),
                    grads.take(kn).unwrap(),
                ];
                (loss, Some(out))
            };

            let base = vec![w_re, w_im, phi, phi_m, kernels];
            let (_, analytic) = run(&base);
            let summary = check_against_fd(
                &base,
                &analytic.unwrap(),
                |p| run(p).0,
                FD_STEP,
                REL_TOL,
            );
            assert!(
                summary.pass,
                "seed {seed}: worst rel {:e} at param {} elem {}",
                summary.worst_rel, summary.worst_param, summary.worst_elem
            );
        }
    }
}
