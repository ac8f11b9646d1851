//! Sampling augmentation: 2× resampled views of an EXG patch.
//!
//! Alignment training treats each EXG patch, its 2×-upsampled variant, and
//! its ½×-downsampled variant as three positives of the same EEG anchor,
//! which teaches the encoder to ignore sampling-rate artifacts. Variants are
//! generated on the fly during training rather than stored.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::sigcore::{design_lowpass_fir, filter_same_reflect, PatchGrid, FIR_TAPS};

/// Linear 2× upsampling: output sample `k` is the input linearly
/// interpolated at position `k/2`; the final sample repeats the last input
/// value so the output is exactly `[C × 2M]`.
pub fn upsample2x(patch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (c, m) = patch.dim();
    if m < 2 {
        return Err(Error::ShapeMismatch(format!(
            "upsampling needs at least 2 samples per patch, got {m}"
        )));
    }
    let mut out = Array2::<f64>::zeros((c, 2 * m));
    for (mut row_out, row_in) in out.rows_mut().into_iter().zip(patch.rows()) {
        for i in 0..m {
            row_out[2 * i] = row_in[i];
            row_out[2 * i + 1] = if i + 1 < m {
                0.5 * (row_in[i] + row_in[i + 1])
            } else {
                row_in[i]
            };
        }
    }
    Ok(out)
}

/// Anti-aliased 2× downsampling: low-pass at 0.45 × output Nyquist with the
/// shared 101-tap design, then keep every second sample starting at index 0.
/// Output is exactly `[C × floor(M/2)]` (for odd `M` the final kept index is
/// dropped by the floor).
pub fn downsample2x(patch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (c, m) = patch.dim();
    if m < 4 {
        return Err(Error::ShapeMismatch(format!(
            "downsampling needs at least 4 samples per patch, got {m}"
        )));
    }
    // output Nyquist is a quarter of the input rate, so the normalized
    // cutoff is 0.45 × 0.25 cycles per input sample
    let taps = design_lowpass_fir(0.45 * 0.25, FIR_TAPS);
    let half = m / 2;
    let mut out = Array2::<f64>::zeros((c, half));
    for (mut row_out, row_in) in out.rows_mut().into_iter().zip(patch.rows()) {
        let filtered = filter_same_reflect(row_in, &taps);
        for k in 0..half {
            row_out[k] = filtered[2 * k];
        }
    }
    Ok(out)
}

/// Applies [`upsample2x`] to every patch of a grid; the result reads as the
/// same wall-clock windows at twice the sampling rate.
pub fn upsample_grid(grid: &PatchGrid) -> Result<PatchGrid> {
    resample_grid(grid, upsample2x, grid.rate_hz * 2.0)
}

/// Applies [`downsample2x`] to every patch of a grid (half the rate).
pub fn downsample_grid(grid: &PatchGrid) -> Result<PatchGrid> {
    resample_grid(grid, downsample2x, grid.rate_hz / 2.0)
}

fn resample_grid(
    grid: &PatchGrid,
    op: fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    new_rate: f64,
) -> Result<PatchGrid> {
    let (p, c, _) = grid.patches.dim();
    let first = op(grid.patch(0))?;
    let m_new = first.ncols();
    let mut patches = Array3::<f64>::zeros((p, c, m_new));
    patches.index_axis_mut(ndarray::Axis(0), 0).assign(&first);
    for j in 1..p {
        patches
            .index_axis_mut(ndarray::Axis(0), j)
            .assign(&op(grid.patch(j))?);
    }
    Ok(PatchGrid {
        patches,
        window_sec: grid.window_sec,
        rate_hz: new_rate,
    })
}
