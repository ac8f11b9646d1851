//! Core signal types, preprocessing, and time-window patching.
//!
//! A [`Recording`] is one modality's multi-channel signal. Preprocessing is
//! per-channel z-scoring plus an optional windowed-sinc low-pass. Patching
//! cuts a recording into consecutive, non-overlapping windows of fixed
//! wall-clock duration, so that two simultaneously recorded modalities with
//! different sampling rates still produce the same number of patches.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal modality. `EXG` in the docs collectively means any non-EEG entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "EEG")]
    Eeg,
    #[serde(rename = "EOG")]
    Eog,
    #[serde(rename = "ECG")]
    Ecg,
    #[serde(rename = "EMG")]
    Emg,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Eeg => "EEG",
            Modality::Eog => "EOG",
            Modality::Ecg => "ECG",
            Modality::Emg => "EMG",
        }
    }

    pub fn parse(tag: &str, context: &str) -> Result<Self> {
        match tag {
            "EEG" => Ok(Modality::Eeg),
            "EOG" => Ok(Modality::Eog),
            "ECG" => Ok(Modality::Ecg),
            "EMG" => Ok(Modality::Emg),
            _ => Err(Error::UnknownModality {
                tag: tag.to_string(),
                context: context.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One modality's multi-channel signal: `data` is `[channels × samples]`.
#[derive(Debug, Clone)]
pub struct Recording {
    pub modality: Modality,
    pub rate_hz: f64,
    pub data: Array2<f64>,
    pub subject_id: String,
    pub channel_names: Vec<String>,
}

impl Recording {
    /// Builds a recording, validating shape and rate. Channel names may be
    /// empty, in which case `"{modality}-{index}"` names are generated.
    pub fn new(
        modality: Modality,
        rate_hz: f64,
        data: Array2<f64>,
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let (c, l) = data.dim();
        if c == 0 || l == 0 {
            return Err(Error::Config(format!(
                "recording must have at least one channel and one sample, got {c}×{l}"
            )));
        }
        if !(rate_hz > 0.0) {
            return Err(Error::Config(format!("sampling rate must be positive, got {rate_hz}")));
        }
        let channel_names = if channel_names.is_empty() {
            (0..c).map(|i| format!("{}-{}", modality.as_str(), i)).collect()
        } else if channel_names.len() == c {
            channel_names
        } else {
            return Err(Error::Config(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                c
            )));
        };
        Ok(Recording {
            modality,
            rate_hz,
            data,
            subject_id: subject_id.into(),
            channel_names,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_sec(&self) -> f64 {
        self.n_samples() as f64 / self.rate_hz
    }

    /// Errors if any sample is NaN or infinite, naming the first bad channel.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (c, row) in self.data.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    channel: c,
                    name: self.channel_names[c].clone(),
                    context: context.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// A recording split into `P` consecutive windows: `patches` is `[P × C × M]`.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Array3<f64>,
    pub window_sec: f64,
    pub rate_hz: f64,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.patches.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.patches.dim().1
    }

    pub fn patch_len(&self) -> usize {
        self.patches.dim().2
    }

    pub fn patch(&self, j: usize) -> ArrayView2<'_, f64> {
        self.patches.slice(s![j, .., ..])
    }
}

/// Simultaneously recorded EEG and EXG sequences with an optional class label.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub eeg: Recording,
    pub exg: Recording,
    pub label: Option<usize>,
    pub pair_id: String,
}

impl LabeledPair {
    /// Validates that both recordings cover the same time span (within one
    /// sample period of the slower modality) and share a subject.
    pub fn new(
        eeg: Recording,
        exg: Recording,
        label: Option<usize>,
        pair_id: impl Into<String>,
    ) -> Result<Self> {
        let pair_id = pair_id.into();
        let slow_period = 1.0 / eeg.rate_hz.min(exg.rate_hz);
        let skew = (eeg.duration_sec() - exg.duration_sec()).abs();
        if skew > slow_period + 1e-12 {
            return Err(Error::Config(format!(
                "pair {pair_id}: modality durations differ by {skew:.6} s, more than one \
                 sample period ({slow_period:.6} s) of the slower modality"
            )));
        }
        if eeg.subject_id != exg.subject_id {
            return Err(Error::Config(format!(
                "pair {pair_id}: subject ids differ ({} vs {})",
                eeg.subject_id, exg.subject_id
            )));
        }
        Ok(LabeledPair { eeg, exg, label, pair_id })
    }

    pub fn subject_id(&self) -> &str {
        &self.eeg.subject_id
    }
}

/// Per-channel z-score with population (1/N) standard deviation.
///
/// Channels whose standard deviation falls below `eps` are mapped to
/// all-zeros rather than rejected.
pub fn zscore(rec: &Recording, eps: f64) -> Result<Recording> {
    rec.ensure_finite("zscore input")?;
    let mut data = rec.data.clone();
    let n = data.ncols() as f64;
    for mut row in data.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < eps {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - mean) / std);
        }
    }
    Ok(Recording { data, ..rec.clone() })
}

/// Number of taps used by every FIR design in this crate.
pub const FIR_TAPS: usize = 101;

/// Hamming-windowed sinc low-pass kernel with unit DC gain.
///
/// `normalized_cutoff` is in cycles per sample, in (0, 0.5).
pub(crate) fn design_lowpass_fir(normalized_cutoff: f64, taps: usize) -> Vec<f64> {
    debug_assert!(taps % 2 == 1, "zero-phase filtering needs an odd tap count");
    let alpha = (taps - 1) as f64 / 2.0;
    let omega_c = 2.0 * std::f64::consts::PI * normalized_cutoff;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let x = n as f64 - alpha;
            let sinc = if x == 0.0 {
                omega_c / std::f64::consts::PI
            } else {
                (omega_c * x).sin() / (std::f64::consts::PI * x)
            };
            let window = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    for v in &mut h {
        *v /= gain;
    }
    h
}

/// Index into a length-`len` signal reflected about its endpoints
/// (`[d c b | a b c d ...]` style, edge sample not repeated).
fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

/// Same-length convolution with a centered symmetric kernel and reflection
/// padding, i.e. zero-phase FIR filtering.
pub(crate) fn filter_same_reflect(x: ArrayView1<'_, f64>, taps: &[f64]) -> Array1<f64> {
    let len = x.len();
    let half = taps.len() / 2;
    let mut padded = Array1::<f64>::zeros(len + 2 * half);
    for (k, v) in padded.iter_mut().enumerate() {
        *v = x[reflect_index(k as isize - half as isize, len)];
    }
    let mut out = Array1::<f64>::zeros(len);
    for i in 0..len {
        let mut acc = 0.0;
        for (t, &h) in taps.iter().enumerate() {
            acc += h * padded[i + t];
        }
        out[i] = acc;
    }
    out
}

/// Zero-phase windowed-sinc low-pass at `cutoff_hz`, applied per channel.
/// Output length equals input length.
pub fn lowpass(rec: &Recording, cutoff_hz: f64) -> Result<Recording> {
    let nyquist = rec.rate_hz / 2.0;
    if !(cutoff_hz > 0.0) || cutoff_hz >= nyquist {
        return Err(Error::CutoffAboveNyquist {
            cutoff_hz,
            nyquist_hz: nyquist,
        });
    }
    let taps = design_lowpass_fir(cutoff_hz / rec.rate_hz, FIR_TAPS);
    let mut data = Array2::<f64>::zeros(rec.data.dim());
    for (mut out_row, in_row) in data.rows_mut().into_iter().zip(rec.data.rows()) {
        out_row.assign(&filter_same_reflect(in_row, &taps));
    }
    Ok(Recording { data, ..rec.clone() })
}

/// Splits a recording into consecutive non-overlapping patches of
/// `window_sec` seconds. The patch length in samples is
/// `M = round(window_sec × rate_hz)`; a trailing remainder shorter than `M`
/// is discarded.
pub fn patchify(rec: &Recording, window_sec: f64) -> Result<PatchGrid> {
    if !(window_sec > 0.0) {
        return Err(Error::Config(format!("window must be positive, got {window_sec} s")));
    }
    let m = (window_sec * rec.rate_hz).round() as usize;
    if m < 2 {
        return Err(Error::Config(format!(
            "window of {window_sec} s at {} Hz spans {m} sample(s); at least 2 are required",
            rec.rate_hz
        )));
    }
    let l = rec.n_samples();
    if m > l {
        return Err(Error::WindowTooLong {
            window_sec,
            window_samples: m,
            samples: l,
        });
    }
    let p = l / m;
    let c = rec.n_channels();
    let mut patches = Array3::<f64>::zeros((p, c, m));
    for j in 0..p {
        patches
            .slice_mut(s![j, .., ..])
            .assign(&rec.data.slice(s![.., j * m..(j + 1) * m]));
    }
    Ok(PatchGrid {
        patches,
        window_sec,
        rate_hz: rec.rate_hz,
    })
}
