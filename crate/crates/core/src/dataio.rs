//! On-disk dataset format: a versioned JSON manifest describing every pair,
//! next to raw signal files of little-endian 32-bit floats in channel-major
//! order (all of channel 0, then channel 1, …).
//!
//! The loader validates byte counts against the declared shapes *before*
//! constructing recordings, so a truncated or swapped file fails with a size
//! diagnostic naming the file rather than producing garbage signals.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigcore::{LabeledPair, Modality, Recording};

const FORMAT_PREFIX: &str = "bx-dataset/";
const FORMAT_VERSION: u32 = 1;
const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    /// `bx-dataset/<version>`.
    format: String,
    n_pairs: usize,
    pairs: Vec<PairEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairEntry {
    pair_id: String,
    label: Option<usize>,
    eeg: RecordingEntry,
    exg: RecordingEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordingEntry {
    subject_id: String,
    modality: String,
    rate_hz: f64,
    n_channels: usize,
    channel_names: Vec<String>,
    n_samples: usize,
    /// Signal file path, relative to the manifest.
    file: String,
    /// Always `little`; recorded so the format is self-describing.
    byte_order: String,
}

fn write_signal(path: &Path, rec: &Recording) -> Result<()> {
    let mut bytes = Vec::with_capacity(rec.data.len() * 4);
    for row in rec.data.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn recording_entry(rec: &Recording, file: String) -> RecordingEntry {
    RecordingEntry {
        subject_id: rec.subject_id.clone(),
        modality: rec.modality.as_str().to_string(),
        rate_hz: rec.rate_hz,
        n_channels: rec.n_channels(),
        channel_names: rec.channel_names.clone(),
        n_samples: rec.n_samples(),
        file,
        byte_order: "little".to_string(),
    }
}

/// Writes `pairs` into `dir` (created if needed) and returns the manifest
/// path. Signal files are named by pair index, so the same dataset saved
/// twice produces identical directory contents.
pub fn save_dataset(pairs: &[LabeledPair], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let eeg_file = format!("{i:05}.eeg.f32le");
        let exg_file = format!("{i:05}.exg.f32le");
        write_signal(&dir.join(&eeg_file), &pair.eeg)?;
        write_signal(&dir.join(&exg_file), &pair.exg)?;
        entries.push(PairEntry {
            pair_id: pair.pair_id.clone(),
            label: pair.label,
            eeg: recording_entry(&pair.eeg, eeg_file),
            exg: recording_entry(&pair.exg, exg_file),
        });
    }
    let manifest = Manifest {
        format: format!("{FORMAT_PREFIX}{FORMAT_VERSION}"),
        n_pairs: pairs.len(),
        pairs: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: format!("manifest serialization failed: {e}"),
        })?;
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

fn read_signal(base: &Path, entry: &RecordingEntry) -> Result<Recording> {
    if entry.byte_order != "little" {
        return Err(Error::Parse {
            path: entry.file.clone(),
            message: format!(
                "unsupported byte order {:?} (only \"little\" is written or read)",
                entry.byte_order
            ),
        });
    }
    let path = base.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let expected = (entry.n_channels * entry.n_samples * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.display().to_string(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((entry.n_channels, entry.n_samples), values)
        .expect("length checked against shape");
    let modality = Modality::parse(&entry.modality, &entry.file)?;
    Recording::new(
        modality,
        entry.rate_hz,
        data,
        entry.subject_id.clone(),
        entry.channel_names.clone(),
    )
}

/// Reads a dataset back from its manifest. Every declared shape is checked
/// against the actual file size, and each pair passes the usual pairing
/// validation (matching subjects, durations within one slow-rate sample).
pub fn load_dataset(path: &Path) -> Result<Vec<LabeledPair>> {
    // Accept either the dataset directory or its manifest file.
    let manifest_buf;
    let manifest_path = if path.is_dir() {
        manifest_buf = path.join(MANIFEST_NAME);
        &manifest_buf
    } else {
        path
    };
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    let version = manifest
        .format
        .strip_prefix(FORMAT_PREFIX)
        .ok_or_else(|| Error::Parse {
            path: manifest_path.display().to_string(),
            message: format!(
                "format {:?} is not a {FORMAT_PREFIX}<version> dataset",
                manifest.format
            ),
        })?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::UnsupportedVersion {
            found: version.to_string(),
            supported: FORMAT_VERSION.to_string(),
        });
    }
    if manifest.pairs.len() != manifest.n_pairs {
        return Err(Error::Parse {
            path: manifest_path.display().to_string(),
            message: format!(
                "manifest declares {} pairs but lists {}",
                manifest.n_pairs,
                manifest.pairs.len()
            ),
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let eeg = read_signal(base, &entry.eeg)?;
        let exg = read_signal(base, &entry.exg)?;
        pairs.push(LabeledPair::new(eeg, exg, entry.label, entry.pair_id.clone())?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};
    use tempfile::tempdir;

    fn sample_pairs(n: usize) -> Vec<LabeledPair> {
        generate(&SynthConfig {
            n_pairs: n,
            eeg_channels: 2,
            exg_channels: 1,
            duration_sec: 10.0,
            rate_eeg_hz: 64.0,
            rate_exg_hz: 128.0,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_structure_and_values() {
        let dir = tempdir().unwrap();
        let pairs = sample_pairs(4);
        let manifest = save_dataset(&pairs, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), pairs.len());
        for (orig, back) in pairs.iter().zip(&loaded) {
            assert_eq!(orig.pair_id, back.pair_id);
            assert_eq!(orig.label, back.label);
            assert_eq!(orig.eeg.subject_id, back.eeg.subject_id);
            assert_eq!(orig.eeg.rate_hz, back.eeg.rate_hz);
            assert_eq!(orig.eeg.channel_names, back.eeg.channel_names);
            assert_eq!(orig.exg.modality, back.exg.modality);
            // storage is f32, so the loaded value is exactly the f32 rounding
            for (a, b) in orig.eeg.data.iter().zip(back.eeg.data.iter()) {
                assert_eq!((*a as f32) as f64, *b);
            }
            for (a, b) in orig.exg.data.iter().zip(back.exg.data.iter()) {
                assert_eq!((*a as f32) as f64, *b);
            }
        }
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let pairs = sample_pairs(2);
        save_dataset(&pairs, dir_a.path()).unwrap();
        save_dataset(&pairs, dir_b.path()).unwrap();
        for name in ["manifest.json", "00000.eeg.f32le", "00001.exg.f32le"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between saves");
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&[], dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn signal_files_have_exactly_shape_times_four_bytes() {
        let dir = tempdir().unwrap();
        let data = Array2::from_shape_fn((2, 100), |(c, i)| (c * 100 + i) as f64);
        let eeg = Recording::new(Modality::Eeg, 10.0, data, "s", vec![]).unwrap();
        let exg = Recording::new(
            Modality::Ecg,
            20.0,
            Array2::zeros((1, 200)),
            "s",
            vec![],
        )
        .unwrap();
        let pair = LabeledPair::new(eeg, exg, None, "p0").unwrap();
        save_dataset(&[pair], dir.path()).unwrap();
        let meta = fs::metadata(dir.path().join("00000.eeg.f32le")).unwrap();
        assert_eq!(meta.len(), 2 * 100 * 4);
    }

    #[test]
    fn truncated_signal_file_names_itself_in_the_error() {
        let dir = tempdir().unwrap();
        let pairs = sample_pairs(1);
        let manifest = save_dataset(&pairs, dir.path()).unwrap();
        let victim = dir.path().join("00000.exg.f32le");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        match load_dataset(&manifest) {
            Err(Error::SizeMismatch { path, expected, found }) => {
                assert!(path.ends_with("00000.exg.f32le"), "path {path}");
                assert_eq!(expected, found + 4);
            }
            other => panic!("unexpected result {other:?}"),
        }
    }

    #[test]
    fn future_versions_are_rejected_by_number() {
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&sample_pairs(1), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("bx-dataset/1", "bx-dataset/9");
        fs::write(&manifest, text).unwrap();
        match load_dataset(&manifest) {
            Err(Error::UnsupportedVersion { found, supported }) => {
                assert_eq!(found, "9");
                assert_eq!(supported, "1");
            }
            other => panic!("unexpected result {other:?}"),
        }
    }

    #[test]
    fn foreign_formats_and_garbage_are_parse_errors() {
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&sample_pairs(1), dir.path()).unwrap();
        let good = fs::read_to_string(&manifest).unwrap();

        fs::write(&manifest, good.replace("bx-dataset/1", "other-thing")).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Parse { .. })));

        fs::write(&manifest, "{ not json").unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_modality_tags_are_distinct_errors() {
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&sample_pairs(1), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"modality\": \"ECG\"", "\"modality\": \"MEG\"");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(
            load_dataset(&manifest),
            Err(Error::UnknownModality { .. })
        ));
    }

    #[test]
    fn big_endian_declarations_are_refused() {
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&sample_pairs(1), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("\"byte_order\": \"little\"", "\"byte_order\": \"big\"");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_signal_files_carry_their_path() {
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&sample_pairs(1), dir.path()).unwrap();
        fs::remove_file(dir.path().join("00000.eeg.f32le")).unwrap();
        match load_dataset(&manifest) {
            Err(Error::Io { path, .. }) => assert!(path.contains("00000.eeg.f32le")),
            other => panic!("unexpected result {other:?}"),
        }
    }
}
