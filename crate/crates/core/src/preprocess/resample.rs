//! Integer decimation and polyphase rational resampling.

/// Keeps every `factor`-th sample starting at index 0.
pub fn decimate(x: &[f64], factor: usize) -> Vec<f64> {
    x.iter().step_by(factor).copied().collect()
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Reduced (up, down) ratio for an integer rate change.
pub fn rational_ratio(from: u64, to: u64) -> (usize, usize) {
    let g = gcd(from, to);
    ((to / g) as usize, (from / g) as usize)
}

/// Hamming-windowed sinc low-pass with cutoff at `1 / max(up, down)` of the
/// upsampled Nyquist, scaled by `up`.
fn design_fir(up: usize, down: usize) -> (Vec<f64>, usize) {
    let max = up.max(down);
    let half = 10 * max;
    let n = 2 * half + 1;
    let fc = 1.0 / max as f64;
    let taps = (0..n)
        .map(|k| {
            let m = k as f64 - half as f64;
            let sinc = if m == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * fc * m;
                a.sin() / a
            };
            let window = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
            up as f64 * fc * sinc * window
        })
        .collect();
    (taps, half)
}

/// Upsample by `up`, low-pass, downsample by `down`, centered so that output
/// sample `n` sits at input time `n * down / up`.
pub fn resample_poly(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    if up == down {
        return x.to_vec();
    }
    let (h, half) = design_fir(up, down);
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|n| {
            // Tap index for input j is t0 - j*up, valid in [0, 2*half].
            let t0 = n * down + half;
            let j_hi = (t0 / up).min(x.len().saturating_sub(1));
            let j_lo = t0.saturating_sub(2 * half).div_ceil(up);
            (j_lo..=j_hi)
                .filter(|&j| j < x.len())
                .map(|j| x[j] * h[t0 - j * up])
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_by_two_keeps_even_samples() {
        let x: Vec<f64> = (0..256).map(f64::from).collect();
        let y = decimate(&x, 2);
        assert_eq!(y.len(), 128);
        assert!(y.iter().enumerate().all(|(k, &v)| v == (2 * k) as f64));
    }

    #[test]
    fn ratio_is_reduced() {
        assert_eq!(rational_ratio(96, 64), (2, 3));
        assert_eq!(rational_ratio(1000, 64), (8, 125));
    }

    #[test]
    fn polyphase_tracks_a_slow_sinusoid() {
        let fs = 96.0;
        let x: Vec<f64> = (0..960)
            .map(|n| (2.0 * std::f64::consts::PI * 5.0 * n as f64 / fs).sin())
            .collect();
        let y = resample_poly(&x, 2, 3);
        assert_eq!(y.len(), 640);
        for (k, v) in y.iter().enumerate().skip(100).take(440) {
            let want = (2.0 * std::f64::consts::PI * 5.0 * k as f64 / 64.0).sin();
            assert!((v - want).abs() < 5e-3, "sample {k}: {v} vs {want}");
        }
    }
}
