//! Radix-2 FFT and FFT-based linear convolution.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, sin};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Precomputed plan for in-place transforms of one power-of-two size.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    twiddles: Vec<Complex>,
    rev: Vec<usize>,
}

impl Fft {
    /// Panics unless `n` is a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size {n} is not a power of two");
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex::new(cos(a), sin(a))
            })
            .collect();
        Fft { n, twiddles, rev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform, `X_k = sum_j x_j e^{-2 pi i jk/n}`.
    pub fn forward(&self, buf: &mut [Complex]) {
        self.run(buf, false);
    }

    /// Inverse transform including the `1/n` factor.
    pub fn inverse(&self, buf: &mut [Complex]) {
        self.run(buf, true);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            v.re *= s;
            v.im *= s;
        }
    }

    fn run(&self, buf: &mut [Complex], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w.im = -w.im;
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half].mul(w);
                    buf[start + k] = Complex::new(a.re + b.re, a.im + b.im);
                    buf[start + k + half] = Complex::new(a.re - b.re, a.im - b.im);
                }
            }
            len <<= 1;
        }
    }
}

/// Full linear convolution, length `x.len() + h.len() - 1`.
///
/// Short filters use the direct sum; longer ones use overlap-add with two
/// real blocks packed into each complex transform.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if h.len() <= 32 || x.len() <= 64 {
        let mut y = vec![0.0; out_len];
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, &hv) in y[i..i + h.len()].iter_mut().zip(h) {
                *yv += xv * hv;
            }
        }
        return y;
    }
    let n = (4 * h.len()).next_power_of_two().max(256);
    let block = n - h.len() + 1;
    let fft = Fft::new(n);
    let mut hf = vec![Complex::default(); n];
    for (d, &v) in hf.iter_mut().zip(h) {
        d.re = v;
    }
    fft.forward(&mut hf);

    let mut y = vec![0.0; out_len];
    let mut buf = vec![Complex::default(); n];
    let mut start = 0;
    while start < x.len() {
        let second = start + block;
        buf.iter_mut().for_each(|c| *c = Complex::default());
        for (d, &v) in buf.iter_mut().zip(&x[start..x.len().min(start + block)]) {
            d.re = v;
        }
        if second < x.len() {
            for (d, &v) in buf.iter_mut().zip(&x[second..x.len().min(second + block)]) {
                d.im = v;
            }
        }
        fft.forward(&mut buf);
        for (b, &hv) in buf.iter_mut().zip(&hf) {
            *b = b.mul(hv);
        }
        fft.inverse(&mut buf);
        for (i, c) in buf.iter().enumerate() {
            if start + i < out_len {
                y[start + i] += c.re;
            }
            if second < x.len() && second + i < out_len {
                y[second + i] += c.im;
            }
        }
        start += 2 * block;
    }
    y
}
