//! Frequency-sampled filtering with block overlap-add, and its adjoint.
//!
//! The input is cut into frames of N/2 samples, each zero-padded to N,
//! multiplied by a filter response sampled on the one-sided N-point grid, and
//! overlap-added back at hop N/2. The response's impulse response energy
//! beyond N/2 samples wraps around (time-aliasing); nothing else is
//! approximated.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

pub(crate) struct SpectralFilter {
    n: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl SpectralFilter {
    pub fn new(n: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        SpectralFilter {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn hop(&self) -> usize {
        self.n / 2
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    fn rfft(&self, frame: &mut [f64], out: &mut [Complex64]) {
        self.forward
            .process(frame, out)
            .expect("buffer sizes fixed by construction");
    }

    /// Unnormalized inverse; the caller scales by 1/N.
    fn irfft(&self, spec: &mut [Complex64], out: &mut [f64]) {
        spec[0].im = 0.0;
        spec[self.n / 2].im = 0.0;
        self.inverse
            .process(spec, out)
            .expect("buffer sizes fixed by construction");
    }

    /// Loads frame `start` of `x` (N/2 samples, zero-padded to N).
    fn load_frame(&self, x: &[f64], start: usize, buf: &mut [f64]) {
        let end = (start + self.hop()).min(x.len());
        buf.fill(0.0);
        buf[..end - start].copy_from_slice(&x[start..end]);
    }

    /// Filters `x` by the sampled response `h`; output has the input's length.
    pub fn apply(&self, x: &[f64], h: &[Complex64]) -> Vec<f64> {
        debug_assert_eq!(h.len(), self.bins());
        let n = self.n;
        let scale = 1.0 / n as f64;
        let mut out = vec![0.0; x.len() + n];
        let mut frame = vec![0.0; n];
        let mut spec = vec![Complex64::default(); self.bins()];
        let mut time = vec![0.0; n];
        for start in (0..x.len()).step_by(self.hop()) {
            self.load_frame(x, start, &mut frame);
            self.rfft(&mut frame, &mut spec);
            for (s, hk) in spec.iter_mut().zip(h) {
                *s *= hk;
            }
            self.irfft(&mut spec, &mut time);
            for (o, t) in out[start..start + n].iter_mut().zip(&time) {
                *o += t * scale;
            }
        }
        out.truncate(x.len());
        out
    }

    /// Vector-Jacobian product of [`apply`](Self::apply).
    ///
    /// Given `grad_out = dL/dy`, returns `dL/dx` and the complex gradient
    /// `G` of the response such that `dL = sum_k Re(conj(G_k) dH_k)`.
    pub fn adjoint(&self, x: &[f64], h: &[Complex64], grad_out: &[f64]) -> (Vec<f64>, Vec<Complex64>) {
        debug_assert_eq!(x.len(), grad_out.len());
        let n = self.n;
        let half = self.hop();
        let scale = 1.0 / n as f64;
        let mut grad_x = vec![0.0; x.len()];
        let mut grad_h = vec![Complex64::default(); self.bins()];

        let mut frame = vec![0.0; n];
        let mut xs = vec![Complex64::default(); self.bins()];
        let mut gs = vec![Complex64::default(); self.bins()];
        let mut time = vec![0.0; n];
        for start in (0..x.len()).step_by(half) {
            self.load_frame(x, start, &mut frame);
            self.rfft(&mut frame, &mut xs);

            let end = (start + n).min(x.len());
            frame.fill(0.0);
            frame[..end - start].copy_from_slice(&grad_out[start..end]);
            self.rfft(&mut frame, &mut gs);

            // interior bins stand for a conjugate pair
            for (k, (g, xk)) in gs.iter().zip(&xs).enumerate() {
                let w = if k == 0 || k == half { scale } else { 2.0 * scale };
                grad_h[k] += g * xk.conj() * w;
            }
            for (g, hk) in gs.iter_mut().zip(h) {
                *g *= hk.conj();
            }
            self.irfft(&mut gs, &mut time);
            let stop = (start + half).min(x.len());
            for (gx, t) in grad_x[start..stop].iter_mut().zip(&time) {
                *gx += t * scale;
            }
        }
        (grad_x, grad_h)
    }
}
