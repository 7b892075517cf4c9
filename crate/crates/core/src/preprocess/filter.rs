//! Butterworth IIR design (bilinear transform, second-order sections) and
//! zero-phase forward-backward filtering.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One section in transposed direct form II; `a[0]` is implicitly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[1] + self.a[2])
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (1.0 + z_inv * self.a[1] + z2 * self.a[2])
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

#[derive(Clone, Copy)]
enum Kind {
    Low,
    High,
}

fn butterworth(kind: Kind, order: usize, cutoff: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::Config("filter order must be >= 1".into()));
    }
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::Config(format!(
            "cutoff {cutoff} Hz must lie in (0, {}) for fs = {fs} Hz",
            fs / 2.0
        )));
    }
    let two_fs = 2.0 * fs;
    let warped = two_fs * (std::f64::consts::PI * cutoff / fs).tan();
    let n = order as f64;
    let analog = |k: usize| {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
        let p = Complex64::from_polar(1.0, theta);
        match kind {
            Kind::Low => p * warped,
            Kind::High => warped / p,
        }
    };
    let bilinear = |s: Complex64| (two_fs + s) / (two_fs - s);

    let mut sections = Vec::new();
    for k in 0..order / 2 {
        let z = bilinear(analog(k));
        let a = [1.0, -2.0 * z.re, z.norm_sqr()];
        let b = match kind {
            Kind::Low => {
                let g = (1.0 + a[1] + a[2]) / 4.0;
                [g, 2.0 * g, g]
            }
            Kind::High => {
                let g = (1.0 - a[1] + a[2]) / 4.0;
                [g, -2.0 * g, g]
            }
        };
        sections.push(Biquad { b, a });
    }
    if order % 2 == 1 {
        let r = bilinear(analog(order / 2)).re;
        let a = [1.0, -r, 0.0];
        let b = match kind {
            Kind::Low => {
                let g = (1.0 - r) / 2.0;
                [g, g, 0.0]
            }
            Kind::High => {
                let g = (1.0 + r) / 2.0;
                [g, -g, 0.0]
            }
        };
        sections.push(Biquad { b, a });
    }
    Ok(Sos { sections })
}

impl Sos {
    pub fn butter_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Self> {
        butterworth(Kind::Low, order, cutoff, fs)
    }

    pub fn butter_highpass(order: usize, cutoff: f64, fs: f64) -> Result<Self> {
        butterworth(Kind::High, order, cutoff, fs)
    }

    /// High-pass at `low` cascaded with low-pass at `high`, each of `order`.
    pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Self> {
        if !(low < high) {
            return Err(Error::Config(format!("band edges {low} >= {high}")));
        }
        let mut sos = Self::butter_highpass(order, low, fs)?;
        sos.sections.extend(Self::butter_lowpass(order, high, fs)?.sections);
        Ok(sos)
    }

    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * freq / fs);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Per-section state giving a steady-state response to a unit step.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut gain = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = s.dc_gain();
                let z1 = s.b[2] - s.a[2] * g;
                let z0 = s.b[1] - s.a[1] * g + z1;
                let state = [gain * z0, gain * z1];
                gain *= g;
                state
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], x0: f64) {
        for (s, init) in self.sections.iter().zip(self.step_state()) {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let (mut z0, mut z1) = (init[0] * x0, init[1] * x0);
            for v in x.iter_mut() {
                let input = *v;
                let y = b0 * input + z0;
                z0 = b1 * input - a1 * y + z1;
                z1 = b2 * input - a2 * y;
                *v = y;
            }
        }
    }

    /// Causal filtering from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, 0.0);
        y
    }

    /// Zero-phase filtering: odd-reflection padding of `padlen` samples on each
    /// side, forward pass, backward pass, both started from the steady state
    /// matching the first sample they see.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Magnitude responses of scipy.signal.butter(4, fc, btype, fs=1024, output='sos')
    // evaluated with scipy.signal.sosfreqz at the listed frequencies.
    const LOW_30: [(f64, f64); 4] = [
        (10.0, 0.9999253187487299),
        (30.0, 0.7071067811865446),
        (45.0, 0.19115281183512212),
        (100.0, 0.007205362116687014),
    ];
    const HIGH_1: [(f64, f64); 4] = [
        (0.25, 0.0039061742401949365),
        (1.0, 0.7071067811892702),
        (2.0, 0.9980527246888896),
        (10.0, 0.999999995012414),
    ];

    #[test]
    fn matches_reference_magnitudes() {
        let lp = Sos::butter_lowpass(4, 30.0, 1024.0).unwrap();
        for (f, m) in LOW_30 {
            let got = lp.response(f, 1024.0).norm();
            assert!((got - m).abs() < 1e-9, "lowpass at {f}: {got} vs {m}");
        }
        let hp = Sos::butter_highpass(4, 1.0, 1024.0).unwrap();
        for (f, m) in HIGH_1 {
            let got = hp.response(f, 1024.0).norm();
            assert!((got - m).abs() < 1e-9, "highpass at {f}: {got} vs {m}");
        }
    }

    #[test]
    fn odd_order_has_first_order_section() {
        let lp = Sos::butter_lowpass(3, 10.0, 100.0).unwrap();
        assert_eq!(lp.sections.len(), 2);
        assert!((lp.response(0.0, 100.0).norm() - 1.0).abs() < 1e-12);
        assert!((lp.response(10.0, 100.0).norm() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn constant_input_passes_lowpass_unchanged() {
        let lp = Sos::butter_lowpass(4, 5.0, 100.0).unwrap();
        let y = lp.filtfilt(&[3.0; 50], 20);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_cutoff_above_nyquist() {
        assert!(Sos::butter_lowpass(4, 60.0, 100.0).is_err());
    }
}
