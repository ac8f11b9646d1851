//! One-sided power spectral density of signal patches.
//!
//! The frequency branch of the EXG encoder consumes a per-patch PSD rather
//! than the raw waveform. A single-segment Hann periodogram is used: patches
//! are short, so Welch-style segment averaging would cost more frequency
//! resolution than the denoising is worth.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// One-sided Hann periodogram of a single channel.
///
/// Normalization: the two-sided spectrum is `|V[f]|² / M²` where `V` is the
/// DFT of the windowed signal. Folding to one side doubles every interior
/// bin and leaves DC and Nyquist unhalved, so that the bins sum exactly to
/// the windowed signal's mean power `Σ (w·x)² / M` (discrete Parseval).
/// The output has `F + 1 = floor(M/2) + 1` bins.
pub fn psd_channel(x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let m = x.len();
    if m < 4 {
        return Err(Error::ShapeMismatch(format!(
            "PSD needs at least 4 samples per patch, got {m}"
        )));
    }
    let window: Vec<f64> = (0..m)
        .map(|n| {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / m as f64).cos())
        })
        .collect();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .zip(&window)
        .map(|(&v, &w)| Complex::new(v * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);

    let f = m / 2;
    let norm = (m as f64) * (m as f64);
    let mut out = Array1::<f64>::zeros(f + 1);
    for k in 0..=f {
        let two_sided = buf[k].norm_sqr() / norm;
        let fold = if k == 0 || (m % 2 == 0 && k == f) { 1.0 } else { 2.0 };
        out[k] = fold * two_sided;
    }
    Ok(out)
}

/// One-sided periodogram per channel: `[C × M] → [C × (F+1)]`.
pub fn psd(patch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (c, m) = patch.dim();
    let f = m / 2;
    let mut out = Array2::<f64>::zeros((c, f + 1));
    for (mut row_out, row_in) in out.rows_mut().into_iter().zip(patch.rows()) {
        row_out.assign(&psd_channel(row_in)?);
    }
    Ok(out)
}

/// Center frequency in Hz of one-sided PSD bin `k` for patches of `m`
/// samples at `rate_hz`.
pub fn bin_freq_hz(k: usize, m: usize, rate_hz: f64) -> f64 {
    k as f64 * rate_hz / m as f64
}

/// Mean power of the Hann-windowed signal, `Σ (w·x)² / M` — the quantity the
/// one-sided PSD bins sum to.
pub fn windowed_mean_power(x: ArrayView1<'_, f64>) -> f64 {
    let m = x.len();
    x.iter()
        .enumerate()
        .map(|(n, &v)| {
            let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / m as f64).cos());
            (v * w).powi(2)
        })
        .sum::<f64>()
        / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_patch_gives_zero_psd() {
        let patch = Array2::<f64>::zeros((2, 64));
        let out = psd(patch.view()).unwrap();
        assert_eq!(out.dim(), (2, 33));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_at_integer_bin_peaks_there() {
        for &k in &[1usize, 5, 20, 31] {
            let m = 128;
            let x = Array1::from_shape_fn(m, |n| {
                (2.0 * std::f64::consts::PI * k as f64 * n as f64 / m as f64).sin()
            });
            let p = psd_channel(x.view()).unwrap();
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, k, "peak misplaced for bin {k}");
        }
    }

    #[test]
    fn parseval_holds_exactly_for_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = Array1::from_shape_fn(512, |_| rng.gen_range(-1.73..1.73));
            let p = psd_channel(x.view()).unwrap();
            let target = windowed_mean_power(x.view());
            worst = worst.max((p.sum() - target).abs() / target.max(1e-30));
        }
        // the folding normalization makes Parseval an identity, so the
        // Monte-Carlo margin of 10% is beaten by orders of magnitude
        assert!(worst < 1e-6, "worst relative Parseval error {worst:e}");
    }

    #[test]
    fn odd_length_has_no_nyquist_bin_but_still_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array1::from_shape_fn(101, |_| rng.gen_range(-1.0..1.0));
        let p = psd_channel(x.view()).unwrap();
        assert_eq!(p.len(), 51);
        let target = windowed_mean_power(x.view());
        assert!((p.sum() - target).abs() <= 1e-6 * target);
    }

    #[test]
    fn bin_frequencies_map_to_hz() {
        assert_eq!(bin_freq_hz(0, 256, 256.0), 0.0);
        assert_eq!(bin_freq_hz(10, 256, 256.0), 10.0);
        assert_eq!(bin_freq_hz(128, 256, 256.0), 128.0);
    }

    #[test]
    fn rejects_tiny_patches() {
        let x = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(psd_channel(x.view()).is_err());
    }

    proptest! {
        #[test]
        fn psd_is_nonnegative_and_parseval(seed in 0u64..300, m in 4usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array1::from_shape_fn(m, |_| rng.gen_range(-3.0..3.0));
            let p = psd_channel(x.view()).unwrap();
            prop_assert_eq!(p.len(), m / 2 + 1);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let target = windowed_mean_power(x.view());
            prop_assert!((p.sum() - target).abs() <= 1e-6 * target.max(1e-12));
        }

        #[test]
        fn psd_obeys_quadratic_scale_law(seed in 0u64..300, a in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array1::from_shape_fn(128, |_| rng.gen_range(-1.0..1.0));
            let base = psd_channel(x.view()).unwrap();
            let scaled = psd_channel((&x * a).view()).unwrap();
            for (s, b) in scaled.iter().zip(base.iter()) {
                let expect = a * a * b;
                prop_assert!((s - expect).abs() <= 1e-9 * expect.abs().max(1e-12));
            }
        }
    }
}
