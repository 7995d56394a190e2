//! Discrete Fourier analysis for the frequency branch.
//!
//! Bin `k` of a spectrum holds `Σ_t x_t · exp(-2πi·kt/n)`. Power-of-two
//! lengths use an iterative radix-2 transform; every other length falls back
//! to direct O(n²) summation. The token axis after patching is only a handful
//! of entries long, so no Bluestein stage is needed.

use std::cell::Cell;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static DFT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward transforms run on the current thread.
pub fn dft_calls() -> u64 {
    DFT_CALLS.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<S> {
    pub re: Vec<S>,
    pub im: Vec<S>,
}

impl<S: Scalar> ComplexSpectrum<S> {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Squared modulus summed over bins.
    pub fn energy(&self) -> S {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| r * r + i * i)
            .sum()
    }
}

/// `(cos, sin)` of `2π·k·t/n`, with the product reduced mod `n` first.
#[inline]
pub(crate) fn twiddle<S: Scalar>(k: usize, t: usize, n: usize) -> (S, S) {
    let angle = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
    (S::of(angle.cos()), S::of(angle.sin()))
}

pub fn dft_forward<S: Scalar>(x: &[S]) -> Result<ComplexSpectrum<S>> {
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    DFT_CALLS.with(|c| c.set(c.get() + 1));
    if x.len().is_power_of_two() {
        let mut re = x.to_vec();
        let mut im = vec![S::zero(); x.len()];
        fft_in_place(&mut re, &mut im, false);
        Ok(ComplexSpectrum { re, im })
    } else {
        Ok(dft_direct(x))
    }
}

/// Direct evaluation of the DFT sum, valid for any length.
pub fn dft_direct<S: Scalar>(x: &[S]) -> ComplexSpectrum<S> {
    let n = x.len();
    let mut re = vec![S::zero(); n];
    let mut im = vec![S::zero(); n];
    for k in 0..n {
        for (t, &xt) in x.iter().enumerate() {
            let (c, s) = twiddle::<S>(k, t, n);
            re[k] += xt * c;
            im[k] -= xt * s;
        }
    }
    ComplexSpectrum { re, im }
}

/// Inverse transform with `1/n` normalization.
pub fn inverse<S: Scalar>(spec: &ComplexSpectrum<S>) -> Result<ComplexSpectrum<S>> {
    let n = spec.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if spec.im.len() != n {
        return Err(Error::LengthMismatch(n, spec.im.len()));
    }
    let scale = S::one() / S::of(n as f64);
    let (mut re, mut im) = if n.is_power_of_two() {
        let mut re = spec.re.clone();
        let mut im = spec.im.clone();
        fft_in_place(&mut re, &mut im, true);
        (re, im)
    } else {
        let mut re = vec![S::zero(); n];
        let mut im = vec![S::zero(); n];
        for t in 0..n {
            for k in 0..n {
                let (c, s) = twiddle::<S>(k, t, n);
                re[t] += spec.re[k] * c - spec.im[k] * s;
                im[t] += spec.re[k] * s + spec.im[k] * c;
            }
        }
        (re, im)
    };
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
    Ok(ComplexSpectrum { re, im })
}

/// Per-bin modulus and argument; the argument lies in `(-π, π]`.
pub fn amplitude_phase<S: Scalar>(spec: &ComplexSpectrum<S>) -> (Vec<S>, Vec<S>) {
    spec.re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| {
            // atan2(-0, negative) would give -π
            let i = if i == S::zero() { S::zero() } else { i };
            (r.hypot(i), i.atan2(r))
        })
        .unzip()
}

/// Real part of the inverse transform of `amplitude · e^{i·phase}`.
pub fn reconstruct<S: Scalar>(amplitude: &[S], phase: &[S]) -> Result<Vec<S>> {
    if amplitude.len() != phase.len() {
        return Err(Error::LengthMismatch(amplitude.len(), phase.len()));
    }
    let spec = ComplexSpectrum {
        re: amplitude
            .iter()
            .zip(phase)
            .map(|(&a, &p)| a * p.cos())
            .collect(),
        im: amplitude
            .iter()
            .zip(phase)
            .map(|(&a, &p)| a * p.sin())
            .collect(),
    };
    Ok(inverse(&spec)?.re)
}

/// Iterative radix-2 Cooley-Tukey; `re.len()` must be a power of two.
fn fft_in_place<S: Scalar>(re: &mut [S], im: &mut [S], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
    }
    let sign = if inverse { S::one() } else { -S::one() };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for j in 0..half {
            let (c, s) = twiddle::<S>(j, 1, len);
            let (wr, wi) = (c, sign * s);
            for start in (0..n).step_by(len) {
                let (a, b) = (start + j, start + j + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}
