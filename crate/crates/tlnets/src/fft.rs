//! Discrete Fourier transforms for real multichannel signals.
//!
//! The complex kernel is an iterative radix-2 transform; lengths that are not
//! powers of two go through Bluestein's chirp-z reformulation so that window
//! sizes like 336 or 1440 are handled exactly. Real transforms keep only the
//! `floor(N/2)+1` nonredundant bins.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel spectrum of a real signal: `n_freq = floor(time_len/2) + 1`
/// complex bins stored as split re/im arrays, row-major over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub channels: usize,
    pub n_freq: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn zeros(channels: usize, n_freq: usize) -> Self {
        ComplexSpectrum {
            channels,
            n_freq,
            re: vec![0.0; channels * n_freq],
            im: vec![0.0; channels * n_freq],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, k: usize) -> (f64, f64) {
        let i = c * self.n_freq + k;
        (self.re[i], self.im[i])
    }

    #[inline]
    pub fn set(&mut self, c: usize, k: usize, re: f64, im: f64) {
        let i = c * self.n_freq + k;
        self.re[i] = re;
        self.im[i] = im;
    }
}

pub fn n_freq_for(time_len: usize) -> usize {
    time_len / 2 + 1
}

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place complex DFT. `inverse` applies the conventional 1/N scaling.
pub fn fft_complex(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    if n <= 1 {
        return;
    }
    if is_pow2(n) {
        radix2(re, im, inverse);
    } else {
        bluestein(re, im, inverse);
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= scale;
        }
        for v in im.iter_mut() {
            *v *= scale;
        }
    }
}

/// Iterative radix-2 Cooley-Tukey, unscaled.
fn radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = {
                    let a = ang * k as f64;
                    (a.cos(), a.sin())
                };
                let i0 = start + k;
                let i1 = start + k + half;
                let tr = re[i1] * wr - im[i1] * wi;
                let ti = re[i1] * wi + im[i1] * wr;
                re[i1] = re[i0] - tr;
                im[i1] = im[i0] - ti;
                re[i0] += tr;
                im[i0] += ti;
            }
        }
        len <<= 1;
    }
}

/// Bluestein chirp-z transform for arbitrary lengths, unscaled.
///
/// Rewrites `X_k = w^{k^2/2} * sum_n (x_n w^{n^2/2}) w^{-(k-n)^2/2}` and
/// evaluates the convolution with a power-of-two transform of size
/// `M >= 2N-1`. Chirp exponents are reduced mod 2N to keep the phase accurate.
fn bluestein(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let m = (2 * n - 1).next_power_of_two();

    // chirp[j] = exp(sign * -i * pi * j^2 / n)  for the forward direction
    let mut chirp_re = vec![0.0; n];
    let mut chirp_im = vec![0.0; n];
    for jj in 0..n {
        let e = (jj * jj) % (2 * n);
        let ang = sign * std::f64::consts::PI * e as f64 / n as f64;
        chirp_re[jj] = ang.cos();
        chirp_im[jj] = ang.sin();
    }

    let mut a_re = vec![0.0; m];
    let mut a_im = vec![0.0; m];
    for jj in 0..n {
        a_re[jj] = re[jj] * chirp_re[jj] - im[jj] * chirp_im[jj];
        a_im[jj] = re[jj] * chirp_im[jj] + im[jj] * chirp_re[jj];
    }

    // b[j] = conj(chirp[j]) laid out circularly at +j and M-j
    let mut b_re = vec![0.0; m];
    let mut b_im = vec![0.0; m];
    b_re[0] = chirp_re[0];
    b_im[0] = -chirp_im[0];
    for jj in 1..n {
        b_re[jj] = chirp_re[jj];
        b_im[jj] = -chirp_im[jj];
        b_re[m - jj] = chirp_re[jj];
        b_im[m - jj] = -chirp_im[jj];
    }

    radix2(&mut a_re, &mut a_im, false);
    radix2(&mut b_re, &mut b_im, false);
    for jj in 0..m {
        let tr = a_re[jj] * b_re[jj] - a_im[jj] * b_im[jj];
        let ti = a_re[jj] * b_im[jj] + a_im[jj] * b_re[jj];
        a_re[jj] = tr;
        a_im[jj] = ti;
    }
    radix2(&mut a_re, &mut a_im, true);
    let scale = 1.0 / m as f64;

    for kk in 0..n {
        let cr = a_re[kk] * scale;
        let ci = a_im[kk] * scale;
        re[kk] = cr * chirp_re[kk] - ci * chirp_im[kk];
        im[kk] = cr * chirp_im[kk] + ci * chirp_re[kk];
    }
}

/// Forward real DFT of one channel; returns the nonredundant bins.
pub fn rfft_channel(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = x.to_vec();
    let mut im = vec![0.0; n];
    fft_complex(&mut re, &mut im, false);
    let f = n_freq_for(n);
    re.truncate(f);
    im.truncate(f);
    // a real input makes these bins real; pin them to exact zero
    im[0] = 0.0;
    if n % 2 == 0 {
        im[f - 1] = 0.0;
    }
    (re, im)
}

/// Hermitian extension of `f = floor(n/2)+1` bins to a full length-`n`
/// spectrum: `full[n-k] = conj(bin[k])`.
fn hermitian_extend(re: &[f64], im: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let f = n_freq_for(n);
    debug_assert_eq!(re.len(), f);
    let mut fr = vec![0.0; n];
    let mut fi = vec![0.0; n];
    fr[..f].copy_from_slice(re);
    fi[..f].copy_from_slice(im);
    let last_mirrored = if n % 2 == 0 { f - 2 } else { f - 1 };
    for k in 1..=last_mirrored {
        fr[n - k] = re[k];
        fi[n - k] = -im[k];
    }
    (fr, fi)
}

/// Inverse real DFT of one channel: Hermitian-extends the stored bins, runs
/// the full inverse transform, and keeps the real part. Imaginary components
/// of bin 0 (and the Nyquist bin for even lengths) therefore never reach the
/// output.
pub fn irfft_channel(re: &[f64], im: &[f64], out_len: usize) -> Vec<f64> {
    let (mut fr, mut fi) = hermitian_extend(re, im, out_len);
    fft_complex(&mut fr, &mut fi, true);
    fr
}

/// Adjoint of [`rfft_channel`] as a real-linear map: pushes a spectrum-shaped
/// cotangent back to the time domain.
pub fn rfft_adjoint_channel(g_re: &[f64], g_im: &[f64], n: usize) -> Vec<f64> {
    let f = n_freq_for(n);
    debug_assert_eq!(g_re.len(), f);
    let mut fr = vec![0.0; n];
    let mut fi = vec![0.0; n];
    fr[..f].copy_from_slice(g_re);
    fi[..f].copy_from_slice(g_im);
    // dx_n = Re sum_k G_k e^{+i 2 pi k n / N} = N * Re(idft(pad(G)))
    fft_complex(&mut fr, &mut fi, true);
    for v in fr.iter_mut() {
        *v *= n as f64;
    }
    fr
}

/// Adjoint of [`irfft_channel`]: time-domain cotangent back to bins. Interior
/// bins pick up a factor 2 from the Hermitian double-counting; the dead
/// imaginary slots at bin 0 / Nyquist stay exactly zero.
pub fn irfft_adjoint_channel(g: &[f64], out_len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = out_len;
    let f = n_freq_for(n);
    let (mut re, mut im) = rfft_channel(g);
    debug_assert_eq!(re.len(), f);
    let inv_n = 1.0 / n as f64;
    for k in 0..f {
        let interior = k != 0 && !(n % 2 == 0 && k == f - 1);
        let c = if interior { 2.0 * inv_n } else { inv_n };
        re[k] *= c;
        im[k] *= c;
    }
    im[0] = 0.0;
    if n % 2 == 0 {
        im[f - 1] = 0.0;
    }
    (re, im)
}

/// Forward real DFT of a `(channels, time)` tensor.
pub fn rfft(x: &Tensor) -> Result<ComplexSpectrum> {
    if x.rank() != 2 {
        return Err(Error::dim("rfft expects a (channels, time) tensor"));
    }
    let (c, n) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(Error::invalid("rfft needs time length >= 2"));
    }
    let f = n_freq_for(n);
    let mut spec = ComplexSpectrum::zeros(c, f);
    for ch in 0..c {
        let (re, im) = rfft_channel(x.row(ch));
        spec.re[ch * f..(ch + 1) * f].copy_from_slice(&re);
        spec.im[ch * f..(ch + 1) * f].copy_from_slice(&im);
    }
    Ok(spec)
}

/// Inverse real DFT back to a `(channels, out_len)` tensor.
pub fn irfft(spec: &ComplexSpectrum, out_len: usize) -> Result<Tensor> {
    let f = n_freq_for(out_len);
    if spec.n_freq != f {
        return Err(Error::dim(format!(
            "spectrum has {} bins but out_len {} wants {}",
            spec.n_freq, out_len, f
        )));
    }
    let c = spec.channels;
    let mut data = vec![0.0; c * out_len];
    for ch in 0..c {
        let re = &spec.re[ch * f..(ch + 1) * f];
        let im = &spec.im[ch * f..(ch + 1) * f];
        let y = irfft_channel(re, im, out_len);
        data[ch * out_len..(ch + 1) * out_len].copy_from_slice(&y);
    }
    Tensor::new(vec![c, out_len], data)
}
