//! Sine and Fourier transforms on top of `rustfft`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Type-I discrete sine transform of length `n - 1`:
/// `X_k = sum_{i=1}^{n-1} u_i sin(pi k i / n)`, computed through a length-`2n`
/// FFT of the odd extension. Applying it twice multiplies by `n / 2`.
#[derive(Clone)]
pub struct SineTransform {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SineTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SineTransform").field("n", &self.n).finish()
    }
}

impl SineTransform {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * n);
        SineTransform { n, fft }
    }

    /// Number of interior points, `n - 1`.
    pub fn len(&self) -> usize {
        self.n - 1
    }

    pub fn is_empty(&self) -> bool {
        self.n <= 1
    }

    pub fn apply(&self, data: &mut [f64]) {
        let n = self.n;
        let mut buf = vec![Complex64::new(0.0, 0.0); 2 * n];
        for i in 1..n {
            buf[i].re = data[i - 1];
            buf[2 * n - i].re = -data[i - 1];
        }
        self.fft.process(&mut buf);
        for k in 1..n {
            data[k - 1] = -0.5 * buf[k].im;
        }
    }

    /// Apply along both axes of a row-major `(n-1) x (n-1)` array.
    pub fn apply_2d(&self, data: &mut [f64]) {
        let m = self.len();
        for row in data.chunks_mut(m) {
            self.apply(row);
        }
        let mut col = vec![0.0; m];
        for c in 0..m {
            for r in 0..m {
                col[r] = data[r * m + c];
            }
            self.apply(&mut col);
            for r in 0..m {
                data[r * m + c] = col[r];
            }
        }
    }
}

/// Complex FFT pair of a fixed length for periodic data.
#[derive(Clone)]
pub struct PeriodicTransform {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodicTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicTransform").field("n", &self.n).finish()
    }
}

impl PeriodicTransform {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        PeriodicTransform {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform of real data (unnormalized), one or two dimensions.
    pub fn forward(&self, data: &[f64], dim: usize) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, dim, &self.forward);
        buf
    }

    /// Inverse transform including the `1/N` normalization; returns the real part.
    pub fn inverse_real(&self, mut buf: Vec<Complex64>, dim: usize) -> Vec<f64> {
        self.run(&mut buf, dim, &self.inverse);
        let scale = 1.0 / (self.n.pow(dim as u32) as f64);
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn run(&self, buf: &mut [Complex64], dim: usize, fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        for row in buf.chunks_mut(n) {
            fft.process(row);
        }
        if dim == 2 {
            let mut col = vec![Complex64::new(0.0, 0.0); n];
            for c in 0..n {
                for r in 0..n {
                    col[r] = buf[r * n + c];
                }
                fft.process(&mut col);
                for r in 0..n {
                    buf[r * n + c] = col[r];
                }
            }
        }
    }

    /// Signed integer frequency of FFT bin `k`.
    pub fn frequency(&self, k: usize) -> i64 {
        if k <= self.n / 2 {
            k as i64
        } else {
            k as i64 - self.n as i64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_transform_matches_direct_sum() {
        let n = 12;
        let u: Vec<f64> = (1..n).map(|i| (i as f64 * 0.7).sin() + 0.1 * i as f64).collect();
        let mut fast = u.clone();
        SineTransform::new(n).apply(&mut fast);
        for k in 1..n {
            let direct: f64 = (1..n)
                .map(|i| u[i - 1] * (std::f64::consts::PI * (k * i) as f64 / n as f64).sin())
                .sum();
            assert!((fast[k - 1] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_transform_is_involution_up_to_scale() {
        let n = 16;
        let st = SineTransform::new(n);
        let u: Vec<f64> = (0..n - 1).map(|i| (i as f64).cos()).collect();
        let mut v = u.clone();
        st.apply(&mut v);
        st.apply(&mut v);
        for i in 0..n - 1 {
            assert!((v[i] * 2.0 / n as f64 - u[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_roundtrip_2d() {
        let n = 8;
        let t = PeriodicTransform::new(n);
        let u: Vec<f64> = (0..n * n).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let back = t.inverse_real(t.forward(&u, 2), 2);
        for i in 0..n * n {
            assert!((back[i] - u[i]).abs() < 1e-12);
        }
    }
}
