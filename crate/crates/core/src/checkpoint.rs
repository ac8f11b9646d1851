//! Binary checkpoint container.
//!
//! Layout: an 8-byte magic (`BXCKPT01`), a little-endian `u64` header
//! length, a JSON header, then every tensor's values as little-endian `f64`
//! in row-major order, concatenated in header-index order. The JSON header
//! carries a format version, a `kind` tag (`"alignment"`, `"probe"`, …), a
//! kind-specific metadata document, and the tensor index (name → shape).
//!
//! Everything needed to resume or audit a run rides along: the alignment
//! wrapper embeds the training configuration and the exact generator state
//! after the last random draw, so a reloaded model is bit-for-bit the model
//! that was saved.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, AlignmentModel, EegEncoderKind};
use crate::encoder::{EegEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"BXCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Container {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Generic layer: any ParamSet plus a JSON meta document
// ---------------------------------------------------------------------------

/// Serializes `params` under a `kind` tag with arbitrary `meta`. Tensor order
/// equals the parameter set's (sorted) iteration order.
pub fn save_raw(path: &Path, kind: &str, meta: serde_json::Value, params: &ParamSet) -> Result<()> {
    let tensors: Vec<TensorEntry> = params
        .iter()
        .map(|(name, value)| TensorEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
        })
        .collect();
    let container = Container {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors,
    };
    let header = serde_json::to_vec(&container)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let pstr = path.display().to_string();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * params.n_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, value) in params.iter() {
        for &v in value.as_standard_layout().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(&pstr, e))?;
    file.write_all(&out).map_err(|e| Error::io(&pstr, e))?;
    Ok(())
}

/// Reads a checkpoint back: `(kind, meta, params)`. Validates the magic, the
/// format version, and that the payload holds exactly the indexed scalars.
pub fn load_raw(path: &Path) -> Result<(String, serde_json::Value, ParamSet)> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!(
            "{pstr}: file too short ({} bytes) to be a checkpoint",
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{pstr}: bad magic (not a checkpoint file)"
        )));
    }
    let header_len =
        u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 8;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Checkpoint(format!(
            "{pstr}: header claims {header_len} bytes but the file ends early"
        )));
    }
    let container: Container = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| Error::Checkpoint(format!("{pstr}: malformed header: {e}")))?;
    if container.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: container.version.to_string(),
            supported: FORMAT_VERSION.to_string(),
        });
    }
    let n_scalars: usize = container
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let expected = (payload_start + 8 * n_scalars) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: pstr,
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut params = ParamSet::new();
    let mut offset = payload_start;
    for entry in &container.tensors {
        let count: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(
                bytes[offset..offset + 8].try_into().unwrap(),
            ));
            offset += 8;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .expect("shape/count agree by construction");
        params.insert(entry.name.clone(), arr);
    }
    Ok((container.kind, container.meta, params))
}

// ---------------------------------------------------------------------------
// Alignment checkpoints
// ---------------------------------------------------------------------------

/// Restorable ChaCha8 generator state: the seed plus the exact position
/// within the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedRng {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl SavedRng {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let word_pos = rng.get_word_pos();
        SavedRng {
            seed: rng.get_seed(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// The EEG side as it appears in a header. External encoders are opaque, so
/// only their embedding width is recorded; reloading one requires the caller
/// to supply the encoder again.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SavedEeg {
    Standin { cfg: EncoderConfig, channels: usize },
    External { dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlignmentMeta {
    eeg: SavedEeg,
    exg_encoder: EncoderConfig,
    exg_channels: usize,
    n_patches: usize,
    d_seq: usize,
    t_patch: f64,
    t_seq: f64,
    config: AlignConfig,
    rng: Option<SavedRng>,
}

const ALIGNMENT_KIND: &str = "alignment";

/// Saves an alignment model with its training configuration and, if given,
/// the post-training generator state.
pub fn save_alignment(
    path: &Path,
    model: &AlignmentModel,
    cfg: &AlignConfig,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    let eeg = match &model.eeg {
        EegEncoderKind::Standin { cfg } => SavedEeg::Standin {
            cfg: cfg.clone(),
            channels: model
                .eeg_channels
                .expect("stand-in models record their channel count"),
        },
        EegEncoderKind::External(enc) => SavedEeg::External { dim: enc.dim() },
    };
    let meta = AlignmentMeta {
        eeg,
        exg_encoder: model.exg_cfg.clone(),
        exg_channels: model.exg_channels,
        n_patches: model.n_patches,
        d_seq: model.d_seq,
        t_patch: model.t_patch,
        t_seq: model.t_seq,
        config: cfg.clone(),
        rng: rng.map(SavedRng::capture),
    };
    let meta = serde_json::to_value(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;
    save_raw(path, ALIGNMENT_KIND, meta, &model.params)
}

fn parse_alignment_meta(path: &Path) -> Result<(AlignmentMeta, ParamSet)> {
    let (kind, meta, params) = load_raw(path)?;
    if kind != ALIGNMENT_KIND {
        return Err(Error::Checkpoint(format!(
            "{}: expected an {ALIGNMENT_KIND} checkpoint, found kind {kind:?}",
            path.display()
        )));
    }
    let meta: AlignmentMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: malformed metadata: {e}", path.display())))?;
    Ok((meta, params))
}

fn rebuild(
    meta: AlignmentMeta,
    params: ParamSet,
    external: Option<Box<dyn EegEncoder>>,
) -> Result<(AlignmentModel, AlignConfig, Option<ChaCha8Rng>)> {
    let (eeg, eeg_channels) = match (meta.eeg, external) {
        (SavedEeg::Standin { cfg, channels }, None) => {
            (EegEncoderKind::Standin { cfg }, Some(channels))
        }
        (SavedEeg::Standin { .. }, Some(_)) => {
            return Err(Error::Checkpoint(
                "checkpoint holds a bundled EEG encoder; do not supply an external one".into(),
            ));
        }
        (SavedEeg::External { dim }, Some(enc)) => {
            if enc.dim() != dim {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was saved with a width-{dim} EEG encoder, supplied one emits {}",
                    enc.dim()
                )));
            }
            (EegEncoderKind::External(enc), None)
        }
        (SavedEeg::External { dim }, None) => {
            return Err(Error::Checkpoint(format!(
                "checkpoint references an external width-{dim} EEG encoder; reload it with \
                 load_alignment_with_eeg"
            )));
        }
    };
    let mut model = AlignmentModel::from_parts(
        eeg,
        meta.exg_encoder,
        eeg_channels,
        meta.exg_channels,
        meta.n_patches,
        meta.d_seq,
        params,
    )?;
    model.t_patch = meta.t_patch;
    model.t_seq = meta.t_seq;
    Ok((model, meta.config, meta.rng.map(|r| r.restore())))
}

/// Loads an alignment checkpoint whose EEG side is the bundled stand-in.
pub fn load_alignment(path: &Path) -> Result<(AlignmentModel, AlignConfig, Option<ChaCha8Rng>)> {
    let (meta, params) = parse_alignment_meta(path)?;
    rebuild(meta, params, None)
}

/// Loads an alignment checkpoint that was saved around an external EEG
/// encoder, re-attaching the supplied one (widths must match).
pub fn load_alignment_with_eeg(
    path: &Path,
    encoder: Box<dyn EegEncoder>,
) -> Result<(AlignmentModel, AlignConfig, Option<ChaCha8Rng>)> {
    let (meta, params) = parse_alignment_meta(path)?;
    rebuild(meta, params, Some(encoder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::RNG_STREAM_TRAIN;
    use crate::encoder::PatchEmbeddings;
    use crate::sigcore::PatchGrid;
    use rand::RngCore;

    fn tiny_cfg() -> AlignConfig {
        let enc = EncoderConfig {
            d_patch: 8,
            conv_channels: vec![4],
            conv_kernel: 7,
            conv_stride: 2,
            transformer_layers: 1,
            attention_heads: 2,
            ff_multiplier: 2,
            dropout: 0.0,
            positional_encoding: true,
        };
        AlignConfig {
            batch_sequences: 2,
            negatives_per_anchor: 2,
            d_seq: 4,
            eeg_encoder: enc.clone(),
            exg_encoder: enc,
            ..AlignConfig::default()
        }
    }

    #[test]
    fn alignment_checkpoint_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        let cfg = tiny_cfg();
        let model = AlignmentModel::init(&cfg, 2, 1, 4, 77).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(RNG_STREAM_TRAIN);
        rng.next_u64(); // advance so the saved position is nontrivial
        save_alignment(&path, &model, &cfg, Some(&rng)).unwrap();

        let (loaded, loaded_cfg, loaded_rng) = load_alignment(&path).unwrap();
        assert!(loaded.params.bit_identical(&model.params));
        assert_eq!(loaded.n_patches, model.n_patches);
        assert_eq!(loaded.d_seq, model.d_seq);
        assert_eq!(loaded.eeg_channels, Some(2));
        assert_eq!(loaded.exg_channels, 1);
        assert_eq!(loaded_cfg.negatives_per_anchor, cfg.negatives_per_anchor);
        assert_eq!(loaded_cfg.batch_sequences, cfg.batch_sequences);

        // The restored generator continues exactly where the original one is.
        let mut restored = loaded_rng.unwrap();
        let mut original = rng;
        for _ in 0..16 {
            assert_eq!(restored.next_u64(), original.next_u64());
        }
    }

    #[test]
    fn saved_rng_preserves_stream_and_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        rng.set_stream(5);
        for _ in 0..7 {
            rng.next_u64();
        }
        let saved = SavedRng::capture(&rng);
        let mut restored = saved.restore();
        assert_eq!(restored.get_stream(), 5);
        for _ in 0..8 {
            assert_eq!(restored.next_u64(), rng.next_u64());
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        let cfg = tiny_cfg();
        let model = AlignmentModel::init(&cfg, 1, 1, 4, 0).unwrap();
        save_alignment(&path, &model, &cfg, None).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_alignment(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn future_versions_are_rejected_with_both_versions_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        // Hand-roll a kind-only container with a bumped version.
        let container = serde_json::json!({
            "version": 99,
            "kind": "alignment",
            "meta": {},
            "tensors": [],
        });
        let header = serde_json::to_vec(&container).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        std::fs::write(&path, &bytes).unwrap();
        match load_raw(&path) {
            Err(Error::UnsupportedVersion { found, supported }) => {
                assert_eq!(found, "99");
                assert_eq!(supported, "1");
            }
            other => panic!("unexpected result {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_expected_and_found_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        let cfg = tiny_cfg();
        let model = AlignmentModel::init(&cfg, 1, 1, 4, 1).unwrap();
        save_alignment(&path, &model, &cfg, None).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_alignment(&path) {
            Err(Error::SizeMismatch {
                expected, found, ..
            }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(found, (bytes.len() - 9) as u64);
            }
            other => panic!("unexpected result {other:?}"),
        }
    }

    #[test]
    fn wrong_kind_is_rejected_by_the_alignment_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.bxc");
        save_raw(&path, "probe", serde_json::json!({}), &ParamSet::new()).unwrap();
        let err = load_alignment(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("probe"), "{err}");
    }

    #[test]
    fn external_checkpoints_need_the_encoder_back() {
        struct Fixed(usize);
        impl EegEncoder for Fixed {
            fn dim(&self) -> usize {
                self.0
            }
            fn encode(&self, grid: &PatchGrid) -> crate::Result<PatchEmbeddings> {
                PatchEmbeddings::new(ndarray::Array2::zeros((grid.n_patches(), self.0)))
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.bxc");
        let cfg = tiny_cfg();
        let model = AlignmentModel::with_external_eeg(&cfg, Box::new(Fixed(8)), 1, 4, 3).unwrap();
        save_alignment(&path, &model, &cfg, None).unwrap();

        assert!(matches!(load_alignment(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_alignment_with_eeg(&path, Box::new(Fixed(16))),
            Err(Error::Checkpoint(_))
        ));
        let (loaded, _, _) = load_alignment_with_eeg(&path, Box::new(Fixed(8))).unwrap();
        assert!(loaded.params.bit_identical(&model.params));
        assert_eq!(loaded.eeg_channels, None);
    }

    #[test]
    fn standin_params_survive_training_style_mutation_and_reload() {
        // Mutate a tensor to a value with a tricky bit pattern and confirm
        // exact binary fidelity through the container.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        let cfg = tiny_cfg();
        let mut model = AlignmentModel::init(&cfg, 1, 1, 4, 5).unwrap();
        let proj = model.params.get_mut("eeg.proj").unwrap();
        proj[[0, 0]] = f64::MIN_POSITIVE; // subnormal-adjacent
        proj[[0, 1]] = -0.1; // not exactly representable
        save_alignment(&path, &model, &cfg, None).unwrap();
        let (loaded, _, rng) = load_alignment(&path).unwrap();
        assert!(rng.is_none());
        assert!(loaded.params.bit_identical(&model.params));
    }

    #[test]
    fn standin_encoder_from_checkpoint_reproduces_embeddings() {
        // Round-trip through the container and compare actual encodings.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        let cfg = tiny_cfg();
        let model = AlignmentModel::init(&cfg, 1, 1, 4, 21).unwrap();

        let grid = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let data =
                ndarray::Array2::from_shape_fn((1, 64), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
            let rec =
                crate::sigcore::Recording::new(crate::sigcore::Modality::Eeg, 16.0, data, "s", vec![])
                    .unwrap();
            crate::sigcore::patchify(&rec, 1.0).unwrap()
        };

        save_alignment(&path, &model, &cfg, None).unwrap();
        let (loaded, _, _) = load_alignment(&path).unwrap();
        let a = model.encode_eeg(&grid).unwrap();
        let b = loaded.encode_eeg(&grid).unwrap();
        assert_eq!(a.values, b.values);
    }
}
