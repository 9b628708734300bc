//! Biquad mathematics: recursion, frequency response, cascades, cookbook
//! design, and the small gain/delay/nonlinearity primitives the model is
//! assembled from. Everything here is a pure function of its inputs.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smallest |A(e^jw)| accepted when evaluating a response.
pub const DENOMINATOR_GUARD: f64 = 1e-8;

/// Longest delay, in samples, the delay layer may realize.
pub const MAX_DELAY: f64 = 64.0;

/// One second-order section. The leading feedback coefficient is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoeffs {
    pub const IDENTITY: BiquadCoeffs = BiquadCoeffs {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    /// One-sample delay, `z^-1`.
    pub const UNIT_DELAY: BiquadCoeffs = BiquadCoeffs {
        b0: 0.0,
        b1: 1.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    pub fn new(b0: f64, b1: f64, b2: f64, a1: f64, a2: f64) -> Self {
        BiquadCoeffs { b0, b1, b2, a1, a2 }
    }

    pub fn from_array(c: [f64; 5]) -> Self {
        BiquadCoeffs::new(c[0], c[1], c[2], c[3], c[4])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.b0, self.b1, self.b2, self.a1, self.a2]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Strict interior of the stability triangle: both poles inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.is_finite() && self.a2 < 1.0 && self.a2 > self.a1.abs() - 1.0
    }

    /// Largest pole magnitude.
    pub fn pole_radius(&self) -> f64 {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc < 0.0 {
            self.a2.sqrt()
        } else {
            let s = disc.sqrt();
            ((-self.a1 + s) / 2.0).abs().max(((-self.a1 - s) / 2.0).abs())
        }
    }

    pub fn numerator_at(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        self.b0 + z1 * self.b1 + z2 * self.b2
    }

    pub fn denominator_at(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        1.0 + z1 * self.a1 + z2 * self.a2
    }

    /// H(e^jw) at a single digital frequency, without the degeneracy guard.
    pub fn response_at(&self, omega: f64) -> Complex64 {
        self.numerator_at(omega) / self.denominator_at(omega)
    }
}

impl Default for BiquadCoeffs {
    fn default() -> Self {
        BiquadCoeffs::IDENTITY
    }
}

/// One-sided frequency axis of an N-point transform: `w_i = 2*pi*i/N`, `i = 0..=N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    fft_size: usize,
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(fft_size: usize) -> Result<Self> {
        if fft_size < 2 || !fft_size.is_multiple_of(2) {
            return Err(Error::Domain(format!(
                "transform size must be even and at least 2, got {fft_size}"
            )));
        }
        let omegas = (0..=fft_size / 2)
            .map(|i| 2.0 * PI * i as f64 / fft_size as f64)
            .collect();
        Ok(FrequencyGrid { fft_size, omegas })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn bin_count(&self) -> usize {
        self.omegas.len()
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// Bin centre frequencies in Hz at the given sample rate.
    pub fn frequencies_hz(&self, sample_rate: f64) -> Vec<f64> {
        self.omegas.iter().map(|w| w * sample_rate / (2.0 * PI)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexResponse {
    pub values: Vec<Complex64>,
}

impl ComplexResponse {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn magnitude_db(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|h| 20.0 * h.norm().max(1e-300).log10())
            .collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.values.iter().map(|h| h.arg()).collect()
    }

    pub fn scaled(mut self, gain: f64) -> Self {
        for v in &mut self.values {
            *v *= gain;
        }
        self
    }
}

/// Mono audio buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_samples(&self, samples: Vec<f64>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn biquad_response(coeffs: &BiquadCoeffs, grid: &FrequencyGrid) -> Result<ComplexResponse> {
    let mut values = Vec::with_capacity(grid.bin_count());
    for (bin, &w) in grid.omegas().iter().enumerate() {
        let den = coeffs.denominator_at(w);
        let magnitude = den.norm();
        if !(magnitude >= DENOMINATOR_GUARD) {
            return Err(Error::Degenerate { bin, magnitude });
        }
        values.push(coeffs.numerator_at(w) / den);
    }
    Ok(ComplexResponse { values })
}

/// Pointwise product of the section responses.
pub fn cascade_response(stages: &[BiquadCoeffs], grid: &FrequencyGrid) -> Result<ComplexResponse> {
    let (first, rest) = stages
        .split_first()
        .ok_or_else(|| Error::Domain("cascade must contain at least one section".into()))?;
    let mut acc = biquad_response(first, grid)?;
    for c in rest {
        let r = biquad_response(c, grid)?;
        for (a, b) in acc.values.iter_mut().zip(&r.values) {
            *a *= b;
        }
    }
    Ok(acc)
}

/// Direct form I recursion over a buffer, in place.
///
/// `state` holds the previous two outputs `(y[-1], y[-2])`; inputs before the
/// buffer start are zero.
pub(crate) fn filter_in_place(c: &BiquadCoeffs, buf: &mut [f64], state: [f64; 2]) -> Result<()> {
    let (mut x1, mut x2) = (0.0, 0.0);
    let [mut y1, mut y2] = state;
    for (n, s) in buf.iter_mut().enumerate() {
        let x0 = *s;
        let y0 = c.b0 * x0 + c.b1 * x1 + c.b2 * x2 - c.a1 * y1 - c.a2 * y2;
        if !y0.is_finite() {
            return Err(Error::Unstable { index: n });
        }
        *s = y0;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
    }
    Ok(())
}

pub fn biquad_filter(coeffs: &BiquadCoeffs, x: &AudioClip, initial_state: Option<[f64; 2]>) -> Result<AudioClip> {
    debug_assert!(coeffs.is_stable());
    let mut out = x.samples.clone();
    filter_in_place(coeffs, &mut out, initial_state.unwrap_or([0.0; 2]))?;
    Ok(x.with_samples(out))
}

/// Sections applied in order; an empty cascade passes the signal through.
pub fn cascade_filter(stages: &[BiquadCoeffs], x: &AudioClip) -> Result<AudioClip> {
    let mut out = x.samples.clone();
    for c in stages {
        filter_in_place(c, &mut out, [0.0; 2])?;
    }
    Ok(x.with_samples(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqKind {
    Peaking,
    LowShelf,
    HighShelf,
}

impl EqKind {
    pub fn name(self) -> &'static str {
        match self {
            EqKind::Peaking => "peaking",
            EqKind::LowShelf => "low_shelf",
            EqKind::HighShelf => "high_shelf",
        }
    }
}

/// Cookbook peaking/shelving design, generic so the activations can be
/// differentiated. Returns `[b0, b1, b2, a1, a2]` normalized by `a0`.
/// Shelves use the Q form of the bandwidth term.
pub(crate) fn rbj_coefficients<T: Real>(kind: EqKind, f: T, gain_db: T, q: T, f_sr: f64) -> [T; 5] {
    let c = T::cst;
    let w0 = f * c(2.0 * PI / f_sr);
    let (sn, cs) = (w0.sin(), w0.cos());
    let alpha = sn / (c(2.0) * q);
    // A = 10^(g/40)
    let a = (gain_db * c(std::f64::consts::LN_10 / 40.0)).exp();
    let one = c(1.0);
    let two = c(2.0);

    let (b0, b1, b2, a0, a1, a2) = match kind {
        EqKind::Peaking => (
            one + alpha * a,
            -two * cs,
            one - alpha * a,
            one + alpha / a,
            -two * cs,
            one - alpha / a,
        ),
        EqKind::LowShelf => {
            let sq = two * a.sqrt() * alpha;
            let (ap, am) = (a + one, a - one);
            (
                a * (ap - am * cs + sq),
                two * a * (am - ap * cs),
                a * (ap - am * cs - sq),
                ap + am * cs + sq,
                -two * (am + ap * cs),
                ap + am * cs - sq,
            )
        }
        EqKind::HighShelf => {
            let sq = two * a.sqrt() * alpha;
            let (ap, am) = (a + one, a - one);
            (
                a * (ap + am * cs + sq),
                -two * a * (am + ap * cs),
                a * (ap + am * cs - sq),
                ap - am * cs + sq,
                two * (am - ap * cs),
                ap - am * cs - sq,
            )
        }
    };
    [b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0]
}

/// Peaking or shelving biquad from centre/corner frequency (Hz), gain (dB)
/// and Q at sample rate `f_sr`.
pub fn rbj_design(kind: EqKind, f: f64, gain_db: f64, q: f64, f_sr: f64) -> Result<BiquadCoeffs> {
    if !(f_sr > 0.0) {
        return Err(Error::Domain(format!("sample rate must be positive, got {f_sr}")));
    }
    if !(f > 0.0 && f < f_sr / 2.0) {
        return Err(Error::Domain(format!(
            "frequency {f} Hz outside (0, {}) Hz",
            f_sr / 2.0
        )));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Domain(format!("Q must be positive, got {q}")));
    }
    if !gain_db.is_finite() {
        return Err(Error::Domain(format!("gain must be finite, got {gain_db}")));
    }
    Ok(BiquadCoeffs::from_array(rbj_coefficients(kind, f, gain_db, q, f_sr)))
}

/// Two-tap linear-interpolation delay of `d` samples, zero history.
pub fn fractional_delay_filter(d: f64, x: &AudioClip) -> Result<AudioClip> {
    if !(0.0..=MAX_DELAY).contains(&d) {
        return Err(Error::Domain(format!("delay {d} samples outside [0, {MAX_DELAY}]")));
    }
    Ok(x.with_samples(fractional_delay(d, &x.samples)))
}

/// Tap weights `(w0, w1)` applied to `x[n - floor(d)]` and `x[n - floor(d) - 1]`.
pub fn fractional_delay_taps(d: f64) -> (usize, f64, f64) {
    let whole = d.floor();
    let frac = d - whole;
    (whole as usize, 1.0 - frac, frac)
}

pub(crate) fn fractional_delay(d: f64, x: &[f64]) -> Vec<f64> {
    let (m, w0, w1) = fractional_delay_taps(d);
    let at = |i: isize| -> f64 {
        if i >= 0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };
    (0..x.len() as isize)
        .map(|n| w0 * at(n - m as isize) + w1 * at(n - m as isize - 1))
        .collect()
}

pub fn db_to_linear(gain_db: f64) -> f64 {
    10f64.powf(gain_db / 20.0)
}

pub fn linear_to_db(gain: f64) -> f64 {
    20.0 * gain.abs().log10()
}

pub fn tanh_nl(x: &AudioClip) -> AudioClip {
    x.with_samples(x.samples.iter().map(|v| v.tanh()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn clip(v: &[f64]) -> AudioClip {
        AudioClip::new(v.to_vec(), 44100.0).unwrap()
    }

    fn impulse(n: usize) -> AudioClip {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        clip(&v)
    }

    const ONE_POLE: BiquadCoeffs = BiquadCoeffs {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: -0.5,
        a2: 0.0,
    };

    #[test]
    fn identity_response_is_one() {
        let g = FrequencyGrid::new(64).unwrap();
        let r = biquad_response(&BiquadCoeffs::IDENTITY, &g).unwrap();
        assert_eq!(r.len(), 33);
        for v in r.values {
            assert_eq!(v, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn one_pole_response_at_dc_and_nyquist() {
        let g = FrequencyGrid::new(8).unwrap();
        let r = biquad_response(&ONE_POLE, &g).unwrap();
        assert_abs_diff_eq!(r.values[0].re, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.values[0].im, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.values[4].re, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.values[4].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_denominator_is_reported() {
        // pole exactly on the unit circle at DC
        let c = BiquadCoeffs::new(1.0, 0.0, 0.0, -1.0, 0.0);
        let g = FrequencyGrid::new(16).unwrap();
        match biquad_response(&c, &g) {
            Err(Error::Degenerate { bin: 0, .. }) => {}
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn grid_rejects_odd_sizes() {
        assert!(FrequencyGrid::new(7).is_err());
        assert!(FrequencyGrid::new(0).is_err());
        let g = FrequencyGrid::new(4).unwrap();
        assert_eq!(g.omegas(), &[0.0, PI / 2.0, PI]);
    }

    #[test]
    fn cascade_response_examples() {
        let g = FrequencyGrid::new(16).unwrap();
        let ones = cascade_response(&[BiquadCoeffs::IDENTITY; 2], &g).unwrap();
        assert!(ones.values.iter().all(|v| *v == Complex64::new(1.0, 0.0)));

        let sq = cascade_response(&[ONE_POLE, ONE_POLE], &g).unwrap();
        assert_abs_diff_eq!(sq.values[0].re, 4.0, epsilon = 1e-14);

        let single = cascade_response(&[ONE_POLE], &g).unwrap();
        assert_eq!(single, biquad_response(&ONE_POLE, &g).unwrap());

        assert!(cascade_response(&[], &g).is_err());
    }

    #[test]
    fn biquad_filter_examples() {
        let x = clip(&[0.3, -1.0, 0.25, 0.0, 2.0]);
        assert_eq!(biquad_filter(&BiquadCoeffs::IDENTITY, &x, None).unwrap(), x);

        let y = biquad_filter(&ONE_POLE, &impulse(6), None).unwrap();
        assert_eq!(y.samples, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);

        let y = biquad_filter(&BiquadCoeffs::UNIT_DELAY, &clip(&[1.0, 2.0, 3.0]), None).unwrap();
        assert_eq!(y.samples, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn biquad_filter_uses_initial_state() {
        let y = biquad_filter(&ONE_POLE, &clip(&[0.0, 0.0]), Some([4.0, 0.0])).unwrap();
        assert_eq!(y.samples, vec![2.0, 1.0]);
    }

    #[test]
    fn unstable_recursion_names_the_sample() {
        let c = BiquadCoeffs::new(1.0, 0.0, 0.0, -1e200, 0.0);
        let x = impulse(4);
        let mut buf = x.samples.clone();
        match filter_in_place(&c, &mut buf, [0.0; 2]) {
            Err(Error::Unstable { index: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cascade_filter_examples() {
        let x = clip(&[0.5, -0.25, 1.0]);
        assert_eq!(cascade_filter(&[BiquadCoeffs::IDENTITY; 3], &x).unwrap(), x);

        let y = cascade_filter(&[ONE_POLE, ONE_POLE], &impulse(12)).unwrap();
        for (n, v) in y.samples.iter().enumerate() {
            assert_abs_diff_eq!(*v, (n as f64 + 1.0) * 0.5f64.powi(n as i32), epsilon = 1e-15);
        }

        let y = cascade_filter(&[BiquadCoeffs::UNIT_DELAY; 2], &clip(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.samples, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rbj_zero_gain_is_unity() {
        let g = FrequencyGrid::new(512).unwrap();
        for kind in [EqKind::Peaking, EqKind::LowShelf, EqKind::HighShelf] {
            for &(f, q) in &[(30.0, 0.3), (1000.0, 0.7), (15000.0, 1.0)] {
                let c = rbj_design(kind, f, 0.0, q, 44100.0).unwrap();
                for v in biquad_response(&c, &g).unwrap().values {
                    assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn rbj_peaking_centre_gain() {
        let c = rbj_design(EqKind::Peaking, 1000.0, 6.0206, 1.0, 44100.0).unwrap();
        let h = c.response_at(2.0 * PI * 1000.0 / 44100.0);
        assert_abs_diff_eq!(h.norm(), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn rbj_low_shelf_dc_gain() {
        let c = rbj_design(EqKind::LowShelf, 100.0, -12.0, 1.0, 44100.0).unwrap();
        assert_abs_diff_eq!(c.response_at(0.0).norm(), 10f64.powf(-12.0 / 20.0), epsilon = 1e-12);
        assert_abs_diff_eq!(c.response_at(PI).norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rbj_high_shelf_nyquist_gain() {
        let c = rbj_design(EqKind::HighShelf, 5000.0, 9.0, 0.7, 48000.0).unwrap();
        assert_abs_diff_eq!(c.response_at(PI).norm(), db_to_linear(9.0), epsilon = 1e-9);
        assert_abs_diff_eq!(c.response_at(0.0).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rbj_rejects_out_of_band_frequency() {
        assert!(rbj_design(EqKind::Peaking, 0.0, 3.0, 1.0, 44100.0).is_err());
        assert!(rbj_design(EqKind::Peaking, 22050.0, 3.0, 1.0, 44100.0).is_err());
        assert!(rbj_design(EqKind::LowShelf, -5.0, 3.0, 1.0, 44100.0).is_err());
        assert!(rbj_design(EqKind::Peaking, 1000.0, 3.0, 0.0, 44100.0).is_err());
    }

    #[test]
    fn fractional_delay_examples() {
        let x = clip(&[0.2, -0.7, 1.0]);
        assert_eq!(fractional_delay_filter(0.0, &x).unwrap(), x);
        let y = fractional_delay_filter(0.5, &clip(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.samples, vec![0.5, 0.5, 0.0]);
        let y = fractional_delay_filter(2.0, &clip(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.samples, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(fractional_delay_filter(-0.1, &x).is_err());
        assert!(fractional_delay_filter(64.5, &x).is_err());
    }

    #[test]
    fn gain_and_tanh_primitives() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert_abs_diff_eq!(db_to_linear(20.0), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(db_to_linear(-6.0206), 0.5, epsilon = 1e-6);
        let y = tanh_nl(&clip(&[0.0, 50.0, 0.5]));
        assert_eq!(y.samples[0], 0.0);
        assert_abs_diff_eq!(y.samples[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y.samples[2], 0.4621, epsilon = 1e-4);
    }

    #[test]
    fn clip_validation() {
        assert!(AudioClip::new(vec![0.0], 0.0).is_err());
        assert!(AudioClip::new(vec![f64::NAN], 44100.0).is_err());
    }

    #[test]
    fn stability_triangle() {
        assert!(BiquadCoeffs::IDENTITY.is_stable());
        assert!(ONE_POLE.is_stable());
        assert!(!BiquadCoeffs::new(1.0, 0.0, 0.0, 0.0, 1.0).is_stable());
        assert!(!BiquadCoeffs::new(1.0, 0.0, 0.0, 2.0, 1.0).is_stable());
        assert!(!BiquadCoeffs::new(1.0, 0.0, 0.0, 1.0, 0.0).is_stable());
        assert_abs_diff_eq!(ONE_POLE.pole_radius(), 0.5);
        assert_abs_diff_eq!(BiquadCoeffs::new(1.0, 0.0, 0.0, 0.0, 0.81).pole_radius(), 0.9);
    }
}
