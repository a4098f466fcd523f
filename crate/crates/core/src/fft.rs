//! Exact-length discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 transform. Any other length
//! goes through Bluestein's chirp-z identity
//!
//! ```text
//! X[k] = conj(c[k]) * sum_n (x[n] conj(c[n])) c[k - n],   c[n] = exp(i pi n^2 / N)
//! ```
//!
//! which turns the DFT into a circular convolution evaluated with a
//! power-of-two transform of length at least `2N - 1`. Bin spacing stays
//! exactly `1/N`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{ensure, Result};

/// Precomputed forward DFT of one length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    kind: Kind,
}

#[derive(Debug, Clone)]
enum Kind {
    Radix2(Radix2),
    Bluestein {
        inner: Radix2,
        /// `exp(-i pi n^2 / N)` for `n < N`.
        chirp: Vec<Complex64>,
        /// Transform of the zero-padded, wrapped conjugate chirp.
        filter: Vec<Complex64>,
    },
}

#[derive(Debug, Clone)]
struct Radix2 {
    n: usize,
    /// `exp(-2 pi i k / n)` for `k < n/2`.
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if n == 1 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Radix2 { n, twiddles, bitrev }
    }

    /// In-place forward transform; `inverse` conjugates the twiddles and
    /// leaves the result unscaled.
    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        ensure!(n >= 1, InvalidArgument, "transform length must be >= 1");
        if n.is_power_of_two() {
            return Ok(FftPlan {
                n,
                kind: Kind::Radix2(Radix2::new(n)),
            });
        }
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // n^2 mod 2N keeps the phase argument small and exact
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let q = ((k as u128 * k as u128) % (2 * n as u128)) as f64;
                Complex64::from_polar(1.0, -PI * q / n as f64)
            })
            .collect();
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..n {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        inner.run(&mut filter, false);
        Ok(FftPlan {
            n,
            kind: Kind::Bluestein { inner, chirp, filter },
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform `X[k] = sum_n x[n] exp(-2 pi i k n / N)` in place.
    pub fn forward(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        assert_eq!(buf.len(), self.n, "buffer length must match the plan");
        match &self.kind {
            Kind::Radix2(r) => r.run(buf, false),
            Kind::Bluestein { inner, chirp, filter } => {
                let m = inner.n;
                scratch.clear();
                scratch.resize(m, Complex64::new(0.0, 0.0));
                for k in 0..self.n {
                    scratch[k] = buf[k] * chirp[k];
                }
                inner.run(scratch, false);
                for (s, f) in scratch.iter_mut().zip(filter) {
                    *s *= f;
                }
                inner.run(scratch, true);
                let scale = 1.0 / m as f64;
                for k in 0..self.n {
                    buf[k] = scratch[k] * chirp[k] * scale;
                }
            }
        }
    }
}

/// Reference `O(N^2)` DFT.
pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let q = (k * j) % n;
                    v * Complex64::from_polar(1.0, -2.0 * PI * q as f64 / n as f64)
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).map(|(x, y)| (x - y).norm() / scale).fold(0.0, f64::max)
    }

    fn signal(n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|i| Complex64::new((i as f64 * 0.731).sin() + 0.2, (i as f64 * 1.37).cos()))
            .collect()
    }

    #[test]
    fn matches_naive_for_many_lengths() {
        let mut scratch = Vec::new();
        for n in [1, 2, 3, 5, 8, 12, 64, 97, 100, 198, 256, 300] {
            let x = signal(n);
            let plan = FftPlan::new(n).unwrap();
            let mut got = x.clone();
            plan.forward(&mut got, &mut scratch);
            let want = naive_dft(&x);
            assert!(max_rel_err(&got, &want) < 1e-12, "n={n}");
        }
    }

    #[test]
    fn impulse_is_flat() {
        let plan = FftPlan::new(198).unwrap();
        let mut buf = vec![Complex64::new(0.0, 0.0); 198];
        buf[0] = Complex64::new(1.0, 0.0);
        plan.forward(&mut buf, &mut Vec::new());
        for v in buf {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn zero_length_rejected() {
        assert!(FftPlan::new(0).is_err());
    }
}
