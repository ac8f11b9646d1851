//! Two-level contrastive alignment between simultaneously recorded EEG and
//! EXG sequences.
//!
//! The model couples two patch encoders (a trainable EEG stand-in or an
//! external plug-in, plus the EXG encoder) through two InfoNCE objectives:
//!
//! * **patch level** — every EEG patch embedding is pulled toward the EXG
//!   patch recorded at the same instant and pushed away from `K` patches
//!   sampled from *other* sequences in the batch (same-sequence patches share
//!   physiology and are never used as negatives);
//! * **sequence level** — whole sequences are compared CLIP-style after a
//!   linear projection of the flattened patch embeddings, with every other
//!   sequence in the batch acting as a negative.
//!
//! Each objective is evaluated three times per batch: on the original EXG
//! patches and on 2× upsampled / ½× downsampled copies (see [`crate::augment`]),
//! which trains the EXG encoder to tolerate sampling-rate changes. The six
//! terms are summed into one scalar that a two-group Adam optimizer descends
//! (EEG-side parameters at `lr_eeg`, EXG-side at `lr_exg`).
//!
//! # Randomness discipline
//!
//! All stochastic choices flow through explicit ChaCha8 generators so runs
//! replay exactly. Within one batch the draw order is fixed: patch negatives
//! for the original variant, then for the upsampled, then for the downsampled
//! variant; the sequence-level terms draw nothing. The training loop consumes
//! the same generator once per epoch to shuffle the pair order before any
//! batch is formed. Encoders run deterministically here (no dropout), so the
//! loss of a batch is a pure function of parameters, data, and the generator
//! state on entry.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Ix3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{downsample_grid, upsample_grid};
use crate::encoder::{
    eeg_encode, encode_batch, init_encoder_params, EegEncoder, EncoderConfig, PatchEmbeddings,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamSet, Tape, Var};
use crate::nn::params::init_uniform;
use crate::sigcore::{lowpass, patchify, zscore, LabeledPair, PatchGrid, Recording};

/// Softmax temperature shared by both alignment levels. Held constant rather
/// than learned; with L2-normalized embeddings this is the conventional
/// contrastive-learning operating point.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Channels whose standard deviation falls below this are zeroed by the
/// preprocessing z-score instead of amplifying numerical noise.
pub const ZSCORE_EPS: f64 = 1e-12;

/// ChaCha stream used when initializing model parameters.
pub const RNG_STREAM_INIT: u64 = 0;
/// ChaCha stream used by the training loop (shuffling + negative draws).
pub const RNG_STREAM_TRAIN: u64 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything the alignment stage needs beyond the data itself: preprocessing
/// geometry, encoder sizes, loss toggles, and optimization hyperparameters.
///
/// All fields have serde defaults, so a TOML file only needs to state what it
/// changes. Unknown keys are rejected to catch typos early.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Learning rate for every parameter named `eeg.*` (the stand-in encoder
    /// being fine-tuned plus the EEG-side projection).
    pub lr_eeg: f64,
    /// Learning rate for every other parameter (EXG encoder + projection).
    pub lr_exg: f64,
    /// Sequences per contrastive batch; must be at least 2 or no negatives
    /// exist. Trailing pairs that do not fill a batch are dropped.
    pub batch_sequences: usize,
    /// Patch-level negatives drawn per anchor (`K`). Must not exceed
    /// `(batch_sequences - 1) × P`.
    pub negatives_per_anchor: usize,
    /// Full passes over the pair list.
    pub epochs: usize,
    /// Seed for parameter initialization and the training loop's generator.
    pub seed: u64,
    /// L2-normalize embeddings before every similarity (recommended; makes
    /// the temperature meaningful and the losses scale-invariant).
    pub normalize_embeddings: bool,
    /// Average the sequence-level loss over both retrieval directions
    /// (EEG→EXG and EXG→EEG) instead of rows only.
    pub symmetric_seq_loss: bool,
    /// Ablation: drop the three patch-level terms.
    pub disable_patch_align: bool,
    /// Ablation: drop the three sequence-level terms.
    pub disable_seq_align: bool,
    /// Ablation: skip the resampled EXG variants, keeping only `L_p` / `L_s`.
    pub disable_sampling_aug: bool,
    /// Patch window length in seconds used when cutting recordings.
    pub window_sec: f64,
    /// Anti-drift low-pass cutoff applied before patching, in Hz.
    pub lowpass_hz: f64,
    /// Sequence-embedding width `D_s`.
    pub d_seq: usize,
    /// Architecture of the bundled EEG stand-in encoder.
    pub eeg_encoder: EncoderConfig,
    /// Architecture of the EXG encoder.
    pub exg_encoder: EncoderConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lr_eeg: 1e-5,
            lr_exg: 3e-4,
            batch_sequences: 16,
            negatives_per_anchor: 64,
            epochs: 4,
            seed: 0,
            normalize_embeddings: true,
            symmetric_seq_loss: false,
            disable_patch_align: false,
            disable_seq_align: false,
            disable_sampling_aug: false,
            window_sec: 5.0,
            lowpass_hz: 45.0,
            d_seq: 512,
            eeg_encoder: EncoderConfig::default(),
            exg_encoder: EncoderConfig::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_eeg.is_finite() && self.lr_eeg >= 0.0)
            || !(self.lr_exg.is_finite() && self.lr_exg >= 0.0)
        {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative, got lr_eeg={} lr_exg={}",
                self.lr_eeg, self.lr_exg
            )));
        }
        if self.batch_sequences < 2 {
            return Err(Error::Config(format!(
                "batch_sequences must be at least 2 (otherwise no negatives exist), got {}",
                self.batch_sequences
            )));
        }
        if self.negatives_per_anchor == 0 {
            return Err(Error::Config(
                "negatives_per_anchor must be at least 1".into(),
            ));
        }
        if !(self.window_sec > 0.0 && self.window_sec.is_finite()) {
            return Err(Error::Config(format!(
                "window_sec must be positive, got {}",
                self.window_sec
            )));
        }
        if !(self.lowpass_hz > 0.0 && self.lowpass_hz.is_finite()) {
            return Err(Error::Config(format!(
                "lowpass_hz must be positive, got {}",
                self.lowpass_hz
            )));
        }
        if self.d_seq == 0 {
            return Err(Error::Config("d_seq must be at least 1".into()));
        }
        self.eeg_encoder.validate()?;
        self.exg_encoder.validate()?;
        if self.eeg_encoder.d_patch != self.exg_encoder.d_patch {
            return Err(Error::Config(format!(
                "both encoders must embed into the same width; EEG d_patch={} vs EXG d_patch={}",
                self.eeg_encoder.d_patch, self.exg_encoder.d_patch
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The EEG side of the model: either the bundled trainable stand-in (its
/// parameters live in the model's set under `eeg.enc.*`) or an opaque
/// external encoder that only contributes activations.
pub enum EegEncoderKind {
    Standin { cfg: EncoderConfig },
    External(Box<dyn EegEncoder>),
}

impl std::fmt::Debug for EegEncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EegEncoderKind::Standin { cfg } => f.debug_struct("Standin").field("cfg", cfg).finish(),
            EegEncoderKind::External(enc) => {
                f.debug_tuple("External").field(&enc.dim()).finish()
            }
        }
    }
}

/// Both encoders, both sequence projections, and the fixed temperatures.
///
/// Learnable tensors live in one flat [`ParamSet`] keyed by dotted paths:
/// `eeg.enc.*` (stand-in only), `eeg.proj`, `exg.enc.*`, `exg.proj`. The
/// `eeg.` / non-`eeg.` prefix split is exactly the optimizer's two learning
/// rate groups. The projections fix the patch count `P`, so a model only
/// accepts sequences with the geometry it was built for.
#[derive(Debug)]
pub struct AlignmentModel {
    pub eeg: EegEncoderKind,
    pub exg_cfg: EncoderConfig,
    /// Input channels of the stand-in EEG encoder (`None` when external).
    pub eeg_channels: Option<usize>,
    pub exg_channels: usize,
    pub n_patches: usize,
    pub d_patch: usize,
    pub d_seq: usize,
    pub t_patch: f64,
    pub t_seq: f64,
    pub params: ParamSet,
    /// EEG-encoder invocations (one per sequence encoded) since construction
    /// or the last [`AlignmentModel::reset_eeg_calls`]. Lets callers prove
    /// that EEG-free inference paths really never touch the EEG encoder.
    eeg_calls: AtomicU64,
}

impl AlignmentModel {
    /// Builds a model with the bundled stand-in EEG encoder. Initialization
    /// draws, in order: stand-in encoder, EXG encoder, `eeg.proj`,
    /// `exg.proj` — all from one generator on [`RNG_STREAM_INIT`].
    pub fn init(
        cfg: &AlignConfig,
        eeg_channels: usize,
        exg_channels: usize,
        n_patches: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(RNG_STREAM_INIT);
        let eeg_enc = init_encoder_params(&cfg.eeg_encoder, eeg_channels, &mut rng)?;
        let mut params = eeg_enc.merged_under("eeg.enc");
        let exg_enc = init_encoder_params(&cfg.exg_encoder, exg_channels, &mut rng)?;
        for (k, v) in exg_enc.merged_under("exg.enc").iter() {
            params.insert(k.clone(), v.clone());
        }
        Self::finish_init(
            EegEncoderKind::Standin {
                cfg: cfg.eeg_encoder.clone(),
            },
            Some(eeg_channels),
            cfg,
            exg_channels,
            n_patches,
            params,
            &mut rng,
        )
    }

    /// Builds a model around an external EEG encoder. The encoder's embedding
    /// width must match the EXG encoder's `d_patch`; a mismatch is rejected
    /// here, at construction, rather than at first use.
    pub fn with_external_eeg(
        cfg: &AlignConfig,
        encoder: Box<dyn EegEncoder>,
        exg_channels: usize,
        n_patches: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if encoder.dim() != cfg.exg_encoder.d_patch {
            return Err(Error::Config(format!(
                "external EEG encoder emits dimension {} but the alignment head expects {}",
                encoder.dim(),
                cfg.exg_encoder.d_patch
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(RNG_STREAM_INIT);
        let exg_enc = init_encoder_params(&cfg.exg_encoder, exg_channels, &mut rng)?;
        let params = exg_enc.merged_under("exg.enc");
        Self::finish_init(
            EegEncoderKind::External(encoder),
            None,
            cfg,
            exg_channels,
            n_patches,
            params,
            &mut rng,
        )
    }

    fn finish_init(
        eeg: EegEncoderKind,
        eeg_channels: Option<usize>,
        cfg: &AlignConfig,
        exg_channels: usize,
        n_patches: usize,
        mut params: ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_patches == 0 {
            return Err(Error::Config(
                "alignment needs at least one patch per sequence".into(),
            ));
        }
        let d_patch = cfg.exg_encoder.d_patch;
        let flat = n_patches * d_patch;
        params.insert("eeg.proj", init_uniform(&[cfg.d_seq, flat], flat, rng));
        params.insert("exg.proj", init_uniform(&[cfg.d_seq, flat], flat, rng));
        Ok(AlignmentModel {
            eeg,
            exg_cfg: cfg.exg_encoder.clone(),
            eeg_channels,
            exg_channels,
            n_patches,
            d_patch,
            d_seq: cfg.d_seq,
            t_patch: DEFAULT_TEMPERATURE,
            t_seq: DEFAULT_TEMPERATURE,
            params,
            eeg_calls: AtomicU64::new(0),
        })
    }

    /// Reassembles a model from previously serialized pieces, re-checking the
    /// structural invariants (projection shapes, matching embedding widths).
    pub fn from_parts(
        eeg: EegEncoderKind,
        exg_cfg: EncoderConfig,
        eeg_channels: Option<usize>,
        exg_channels: usize,
        n_patches: usize,
        d_seq: usize,
        params: ParamSet,
    ) -> Result<Self> {
        exg_cfg.validate()?;
        let d_patch = exg_cfg.d_patch;
        match &eeg {
            EegEncoderKind::Standin { cfg } => {
                cfg.validate()?;
                if cfg.d_patch != d_patch {
                    return Err(Error::Config(format!(
                        "stand-in EEG encoder width {} differs from EXG width {}",
                        cfg.d_patch, d_patch
                    )));
                }
            }
            EegEncoderKind::External(enc) => {
                if enc.dim() != d_patch {
                    return Err(Error::Config(format!(
                        "external EEG encoder emits dimension {} but the alignment head expects {}",
                        enc.dim(),
                        d_patch
                    )));
                }
            }
        }
        if n_patches == 0 || d_seq == 0 {
            return Err(Error::Config(
                "model geometry needs n_patches ≥ 1 and d_seq ≥ 1".into(),
            ));
        }
        for proj in ["eeg.proj", "exg.proj"] {
            let shape = params
                .get(proj)
                .ok_or_else(|| Error::Config(format!("parameter set is missing {proj}")))?
                .shape()
                .to_vec();
            if shape != [d_seq, n_patches * d_patch] {
                return Err(Error::ShapeMismatch(format!(
                    "{proj} has shape {shape:?}, expected [{d_seq}, {}]",
                    n_patches * d_patch
                )));
            }
        }
        Ok(AlignmentModel {
            eeg,
            exg_cfg,
            eeg_channels,
            exg_channels,
            n_patches,
            d_patch,
            d_seq,
            t_patch: DEFAULT_TEMPERATURE,
            t_seq: DEFAULT_TEMPERATURE,
            params,
            eeg_calls: AtomicU64::new(0),
        })
    }

    /// EEG-encoder invocations so far (one count per sequence encoded).
    pub fn eeg_call_count(&self) -> u64 {
        self.eeg_calls.load(Ordering::Relaxed)
    }

    pub fn reset_eeg_calls(&self) {
        self.eeg_calls.store(0, Ordering::Relaxed);
    }

    /// All parameters as gradient-free graph constants.
    fn constant_vars(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Encodes a batch of EXG grids in inference mode: `[S × P × D_p]`.
    pub fn encode_exg_batch(&self, grids: &[&PatchGrid]) -> Result<Array3<f64>> {
        let tape = Tape::new();
        let vars = self.constant_vars(&tape);
        let out = encode_batch(&tape, &vars, "exg.enc", &self.exg_cfg, grids, None)?;
        let value = tape.value(out).clone();
        Ok(value
            .into_dimensionality::<Ix3>()
            .expect("encoder output is rank-3"))
    }

    /// Encodes a batch of EEG grids in inference mode: `[S × P × D_p]`.
    /// Counts one EEG-encoder invocation per sequence.
    pub fn encode_eeg_batch(&self, grids: &[&PatchGrid]) -> Result<Array3<f64>> {
        self.eeg_calls
            .fetch_add(grids.len() as u64, Ordering::Relaxed);
        match &self.eeg {
            EegEncoderKind::Standin { cfg } => {
                let tape = Tape::new();
                let vars = self.constant_vars(&tape);
                let out = encode_batch(&tape, &vars, "eeg.enc", cfg, grids, None)?;
                let value = tape.value(out).clone();
                Ok(value
                    .into_dimensionality::<Ix3>()
                    .expect("encoder output is rank-3"))
            }
            EegEncoderKind::External(enc) => {
                let mut out: Option<Array3<f64>> = None;
                for (i, grid) in grids.iter().enumerate() {
                    let emb = eeg_encode(grid, enc.as_ref())?;
                    let store = out.get_or_insert_with(|| {
                        Array3::zeros((grids.len(), emb.n_patches(), emb.dim()))
                    });
                    if store.dim().1 != emb.n_patches() || store.dim().2 != emb.dim() {
                        return Err(Error::ShapeMismatch(format!(
                            "EEG embeddings changed shape within a batch: {:?} vs {:?}",
                            (store.dim().1, store.dim().2),
                            (emb.n_patches(), emb.dim())
                        )));
                    }
                    store
                        .index_axis_mut(ndarray::Axis(0), i)
                        .assign(&emb.values);
                }
                out.ok_or_else(|| {
                    Error::ShapeMismatch("encoding needs at least one sequence".into())
                })
            }
        }
    }

    /// Graph-mode EEG embeddings for training. With the stand-in, gradients
    /// flow into `eeg.enc.*`; an external encoder contributes constants
    /// (its weights are not ours to update — only `eeg.proj` learns).
    pub(crate) fn eeg_embed_graph(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        grids: &[&PatchGrid],
    ) -> Result<Var> {
        self.eeg_calls
            .fetch_add(grids.len() as u64, Ordering::Relaxed);
        match &self.eeg {
            EegEncoderKind::Standin { cfg } => encode_batch(tape, vars, "eeg.enc", cfg, grids, None),
            EegEncoderKind::External(enc) => {
                let s = grids.len();
                let mut out: Option<Array3<f64>> = None;
                for (i, grid) in grids.iter().enumerate() {
                    let emb = eeg_encode(grid, enc.as_ref())?;
                    let store = out
                        .get_or_insert_with(|| Array3::zeros((s, emb.n_patches(), emb.dim())));
                    store
                        .index_axis_mut(ndarray::Axis(0), i)
                        .assign(&emb.values);
                }
                let stacked = out.ok_or_else(|| {
                    Error::ShapeMismatch("encoding needs at least one sequence".into())
                })?;
                Ok(tape.constant(stacked.into_dyn()))
            }
        }
    }

    /// Inference-mode patch embeddings for a single EEG grid.
    pub fn encode_eeg(&self, grid: &PatchGrid) -> Result<PatchEmbeddings> {
        let batch = self.encode_eeg_batch(&[grid])?;
        let (_, p, d) = batch.dim();
        PatchEmbeddings::new(
            batch
                .into_shape_with_order((p, d))
                .expect("single-grid batch"),
        )
    }

    /// Inference-mode patch embeddings for a single EXG grid.
    pub fn encode_exg(&self, grid: &PatchGrid) -> Result<PatchEmbeddings> {
        let batch = self.encode_exg_batch(&[grid])?;
        let (_, p, d) = batch.dim();
        PatchEmbeddings::new(
            batch
                .into_shape_with_order((p, d))
                .expect("single-grid batch"),
        )
    }

    fn proj_view(&self, name: &str) -> ArrayView2<'_, f64> {
        self.params
            .get(name)
            .expect("projection present (checked at construction)")
            .view()
            .into_dimensionality()
            .expect("projection is a matrix")
    }

    /// Projects EEG patch embeddings to the sequence space.
    pub fn project_eeg(&self, emb: &PatchEmbeddings) -> Result<Array1<f64>> {
        seq_project(emb.values.view(), self.proj_view("eeg.proj"))
    }

    /// Projects EXG patch embeddings to the sequence space.
    pub fn project_exg(&self, emb: &PatchEmbeddings) -> Result<Array1<f64>> {
        seq_project(emb.values.view(), self.proj_view("exg.proj"))
    }
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// The canonical preprocessing chain: per-channel z-score, low-pass, then
/// windowing into a patch grid.
pub fn prepare_grid(rec: &Recording, window_sec: f64, lowpass_hz: f64) -> Result<PatchGrid> {
    let z = zscore(rec, ZSCORE_EPS)?;
    let filtered = lowpass(&z, lowpass_hz)?;
    patchify(&filtered, window_sec)
}

/// One pair preprocessed for alignment, with the two resampled EXG variants
/// cut once up front so epochs never repeat filter work.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub eeg: PatchGrid,
    pub exg: PatchGrid,
    pub exg_up: PatchGrid,
    pub exg_down: PatchGrid,
    pub label: Option<usize>,
    pub pair_id: String,
    pub subject_id: String,
}

/// Preprocesses both modalities of a pair and precomputes the EXG variants.
/// Rejects pairs whose modalities disagree on the patch count.
pub fn prepare_pair(pair: &LabeledPair, window_sec: f64, lowpass_hz: f64) -> Result<PreparedPair> {
    let eeg = prepare_grid(&pair.eeg, window_sec, lowpass_hz)?;
    let exg = prepare_grid(&pair.exg, window_sec, lowpass_hz)?;
    if eeg.n_patches() != exg.n_patches() {
        return Err(Error::ShapeMismatch(format!(
            "pair {}: EEG cuts into {} patches but EXG into {}",
            pair.pair_id,
            eeg.n_patches(),
            exg.n_patches()
        )));
    }
    let exg_up = upsample_grid(&exg)?;
    let exg_down = downsample_grid(&exg)?;
    Ok(PreparedPair {
        eeg,
        exg,
        exg_up,
        exg_down,
        label: pair.label,
        pair_id: pair.pair_id.clone(),
        subject_id: pair.subject_id().to_string(),
    })
}

pub fn prepare_pairs(
    pairs: &[LabeledPair],
    window_sec: f64,
    lowpass_hz: f64,
) -> Result<Vec<PreparedPair>> {
    pairs
        .iter()
        .map(|p| prepare_pair(p, window_sec, lowpass_hz))
        .collect()
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// Draws `k` patch indices uniformly without replacement from all patches of
/// sequences other than `anchor_seq`. Returned indices are flat row-major
/// positions into the batch's `[S·P]` patch list.
pub fn sample_patch_negatives(
    s: usize,
    p: usize,
    anchor_seq: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if anchor_seq >= s || p == 0 {
        return Err(Error::Config(format!(
            "invalid negative-sampling geometry: S={s}, P={p}, anchor sequence {anchor_seq}"
        )));
    }
    if k == 0 {
        return Err(Error::Config(
            "negatives_per_anchor must be at least 1".into(),
        ));
    }
    let available = (s - 1) * p;
    if k > available {
        return Err(Error::NotEnoughNegatives {
            requested: k,
            available,
        });
    }
    let picks = rand::seq::index::sample(rng, available, k);
    Ok(picks
        .into_iter()
        .map(|c| {
            // `c` counts patches over the non-anchor sequences in order;
            // reinsert the gap left by the anchor sequence.
            let m0 = c / p;
            let m = if m0 >= anchor_seq { m0 + 1 } else { m0 };
            m * p + c % p
        })
        .collect())
}

/// Negatives for every anchor of an `[S × P]` batch, anchors visited in
/// row-major order. This is the exact per-batch draw order of the training
/// loop, so callers can replay it with a cloned generator.
pub fn draw_patch_negatives(
    s: usize,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut all = Vec::with_capacity(s * p);
    for i in 0..s {
        for _ in 0..p {
            all.push(sample_patch_negatives(s, p, i, k, rng)?);
        }
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// Losses — graph builders (training) and value-level twins (oracles, eval)
// ---------------------------------------------------------------------------

/// Patch-level InfoNCE over the tape. `anchors` and `candidates` are
/// `[S × P × D]`; `negatives[r]` lists the flat candidate indices contrasted
/// against anchor `r`. The positive (the candidate at the anchor's own
/// position) is always included in the denominator, so the loss is
/// non-negative.
pub fn patch_infonce_graph(
    tape: &Tape,
    anchors: Var,
    candidates: Var,
    t: f64,
    negatives: &[Vec<usize>],
    normalize: bool,
) -> Result<Var> {
    let ash = tape.shape(anchors);
    let csh = tape.shape(candidates);
    if ash.len() != 3 || ash != csh {
        return Err(Error::ShapeMismatch(format!(
            "patch alignment expects matching [S×P×D] embeddings, got {ash:?} and {csh:?}"
        )));
    }
    let (s, p, d) = (ash[0], ash[1], ash[2]);
    if s < 2 {
        return Err(Error::Config(format!(
            "patch alignment needs at least two sequences, got {s}"
        )));
    }
    let n = s * p;
    if negatives.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "need one negative list per anchor ({n}), got {}",
            negatives.len()
        )));
    }
    let k = negatives[0].len();
    let mut idx = Vec::with_capacity(n * (k + 1));
    for (r, negs) in negatives.iter().enumerate() {
        if negs.len() != k {
            return Err(Error::ShapeMismatch(
                "every anchor needs the same number of negatives".into(),
            ));
        }
        idx.push(r * n + r); // positive in column 0
        for &c in negs {
            if c >= n {
                return Err(Error::ShapeMismatch(format!(
                    "negative index {c} out of range for {n} patches"
                )));
            }
            debug_assert_ne!(c / p, r / p, "negative drawn from the anchor's own sequence");
            idx.push(r * n + c);
        }
    }
    let (a, c) = if normalize {
        (tape.l2norm_last(anchors), tape.l2norm_last(candidates))
    } else {
        (anchors, candidates)
    };
    let af = tape.reshape(a, &[n, d]);
    let cf = tape.reshape(c, &[n, d]);
    let sims = tape.scale(tape.matmul(af, tape.transpose2(cf)), 1.0 / t);
    // Per-anchor logit rows [positive, negatives…] gathered by flat index.
    let flat = tape.reshape(sims, &[n * n, 1]);
    let logits = tape.reshape(tape.gather_rows(flat, &idx), &[n, k + 1]);
    let lse = tape.logsumexp_last(logits);
    let pos = tape.gather_last(logits, &vec![0; n]);
    Ok(tape.mean_all(tape.sub(lse, pos)))
}

/// Value-level patch InfoNCE against an explicit negative set.
///
/// Sums inside each log-sum-exp (and the final mean) run in value order, so
/// the result is bit-for-bit invariant to permuting any negative list.
pub fn patch_infonce_with_negatives(
    anchors: ArrayView3<'_, f64>,
    candidates: ArrayView3<'_, f64>,
    t: f64,
    negatives: &[Vec<usize>],
    normalize: bool,
) -> Result<f64> {
    if anchors.dim() != candidates.dim() {
        return Err(Error::ShapeMismatch(format!(
            "patch alignment expects matching [S×P×D] embeddings, got {:?} and {:?}",
            anchors.dim(),
            candidates.dim()
        )));
    }
    let (s, p, d) = anchors.dim();
    if s < 2 {
        return Err(Error::Config(format!(
            "patch alignment needs at least two sequences, got {s}"
        )));
    }
    let n = s * p;
    if negatives.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "need one negative list per anchor ({n}), got {}",
            negatives.len()
        )));
    }
    let mut a = anchors
        .to_owned()
        .into_shape_with_order((n, d))
        .expect("contiguous batch");
    let mut c = candidates
        .to_owned()
        .into_shape_with_order((n, d))
        .expect("contiguous batch");
    if normalize {
        l2_normalize_rows(&mut a);
        l2_normalize_rows(&mut c);
    }
    let mut losses = Vec::with_capacity(n);
    for (r, negs) in negatives.iter().enumerate() {
        let pos = a.row(r).dot(&c.row(r)) / t;
        let mut logits = Vec::with_capacity(negs.len() + 1);
        logits.push(pos);
        for &j in negs {
            if j >= n {
                return Err(Error::ShapeMismatch(format!(
                    "negative index {j} out of range for {n} patches"
                )));
            }
            logits.push(a.row(r).dot(&c.row(j)) / t);
        }
        losses.push(stable_logsumexp(&mut logits) - pos);
    }
    Ok(stable_mean(&mut losses))
}

/// Patch-level InfoNCE drawing its own negatives from `rng` (the exact draw
/// order of [`draw_patch_negatives`]).
pub fn patch_infonce(
    anchors: &Array3<f64>,
    candidates: &Array3<f64>,
    t: f64,
    k: usize,
    normalize: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (s, p, _) = anchors.dim();
    let negs = draw_patch_negatives(s, p, k, rng)?;
    patch_infonce_with_negatives(anchors.view(), candidates.view(), t, &negs, normalize)
}

/// Sequence embedding: projects flattened patch embeddings (patch-major) with
/// one matrix, `s = proj · flatten(emb)`.
pub fn seq_project(
    embeddings: ArrayView2<'_, f64>,
    proj: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    let (p, d) = embeddings.dim();
    if proj.ncols() != p * d {
        return Err(Error::ShapeMismatch(format!(
            "projection expects {} flattened features, embeddings provide {}×{} = {}",
            proj.ncols(),
            p,
            d,
            p * d
        )));
    }
    let flat = Array1::from_iter(embeddings.iter().cloned());
    Ok(proj.dot(&flat))
}

/// Batched graph form of [`seq_project`]: `[S × P × D] → [S × D_s]`.
pub fn seq_project_graph(tape: &Tape, embeddings: Var, proj: Var) -> Result<Var> {
    let esh = tape.shape(embeddings);
    let psh = tape.shape(proj);
    if esh.len() != 3 || psh.len() != 2 || psh[1] != esh[1] * esh[2] {
        return Err(Error::ShapeMismatch(format!(
            "projection {psh:?} does not match embeddings {esh:?}"
        )));
    }
    let flat = tape.reshape(embeddings, &[esh[0], esh[1] * esh[2]]);
    Ok(tape.matmul(flat, tape.transpose2(proj)))
}

/// Sequence-level InfoNCE over the tape: row-wise softmax of the `[S × S]`
/// similarity matrix at the diagonal, optionally averaged with the
/// column-wise (EXG→EEG) direction.
pub fn seq_infonce_graph(
    tape: &Tape,
    eeg_seqs: Var,
    exg_seqs: Var,
    t: f64,
    symmetric: bool,
    normalize: bool,
) -> Result<Var> {
    let esh = tape.shape(eeg_seqs);
    let xsh = tape.shape(exg_seqs);
    if esh.len() != 2 || esh != xsh {
        return Err(Error::ShapeMismatch(format!(
            "sequence alignment expects matching [S×D] embeddings, got {esh:?} and {xsh:?}"
        )));
    }
    if esh[0] < 2 {
        return Err(Error::Config(format!(
            "sequence alignment needs at least two sequences, got {}",
            esh[0]
        )));
    }
    let (e, x) = if normalize {
        (tape.l2norm_last(eeg_seqs), tape.l2norm_last(exg_seqs))
    } else {
        (eeg_seqs, exg_seqs)
    };
    let sims = tape.scale(tape.matmul(e, tape.transpose2(x)), 1.0 / t);
    let rows = tape.mean_all(tape.sub(tape.logsumexp_last(sims), tape.diag(sims)));
    if !symmetric {
        return Ok(rows);
    }
    let simt = tape.transpose2(sims);
    let cols = tape.mean_all(tape.sub(tape.logsumexp_last(simt), tape.diag(simt)));
    Ok(tape.scale(tape.add(rows, cols), 0.5))
}

/// Value-level sequence InfoNCE (order-stable sums, like the patch twin).
pub fn seq_infonce(
    eeg_seqs: ArrayView2<'_, f64>,
    exg_seqs: ArrayView2<'_, f64>,
    t: f64,
    symmetric: bool,
    normalize: bool,
) -> Result<f64> {
    if eeg_seqs.dim() != exg_seqs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "sequence alignment expects matching [S×D] embeddings, got {:?} and {:?}",
            eeg_seqs.dim(),
            exg_seqs.dim()
        )));
    }
    let s = eeg_seqs.nrows();
    if s < 2 {
        return Err(Error::Config(format!(
            "sequence alignment needs at least two sequences, got {s}"
        )));
    }
    let mut e = eeg_seqs.to_owned();
    let mut x = exg_seqs.to_owned();
    if normalize {
        l2_normalize_rows(&mut e);
        l2_normalize_rows(&mut x);
    }
    let sims = e.dot(&x.t()) / t;
    let mut row_losses: Vec<f64> = (0..s)
        .map(|i| {
            let mut vals: Vec<f64> = sims.row(i).to_vec();
            stable_logsumexp(&mut vals) - sims[[i, i]]
        })
        .collect();
    let row_mean = stable_mean(&mut row_losses);
    if !symmetric {
        return Ok(row_mean);
    }
    let mut col_losses: Vec<f64> = (0..s)
        .map(|m| {
            let mut vals: Vec<f64> = sims.column(m).to_vec();
            stable_logsumexp(&mut vals) - sims[[m, m]]
        })
        .collect();
    Ok(0.5 * (row_mean + stable_mean(&mut col_losses)))
}

/// Max-shifted log-sum-exp with the addends summed in ascending value order,
/// making the result independent of input order. Sorts in place.
fn stable_logsumexp(vals: &mut [f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    vals.sort_by(f64::total_cmp);
    let sum: f64 = vals.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Mean with the addends summed in ascending order (order-independent).
fn stable_mean(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn l2_normalize_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let n = (row.dot(&row) + 1e-12).sqrt();
        row.mapv_inplace(|v| v / n);
    }
}

// ---------------------------------------------------------------------------
// The combined objective
// ---------------------------------------------------------------------------

/// All six loss terms of one batch plus their sum. `_up` terms come from the
/// 2× upsampled EXG variant, `_down` from the ½× downsampled one; disabled
/// terms are reported as exactly `0.0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_p_up: f64,
    pub l_p_down: f64,
    pub l_s: f64,
    pub l_s_up: f64,
    pub l_s_down: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn zero() -> Self {
        LossBreakdown {
            l_p: 0.0,
            l_p_up: 0.0,
            l_p_down: 0.0,
            l_s: 0.0,
            l_s_up: 0.0,
            l_s_down: 0.0,
            total: 0.0,
        }
    }

    /// The six terms in trace-column order.
    pub fn terms(&self) -> [f64; 6] {
        [
            self.l_p, self.l_p_up, self.l_p_down, self.l_s, self.l_s_up, self.l_s_down,
        ]
    }

    pub fn n_nonzero_terms(&self) -> usize {
        self.terms().iter().filter(|v| **v != 0.0).count()
    }
}

/// Builds the full training objective for one batch on `tape`.
///
/// The EEG side is encoded once; the EXG side once per active variant. Random
/// draws consume `rng` in the documented order (patch negatives: original,
/// upsampled, downsampled). Returns the scalar loss node plus the evaluated
/// breakdown.
pub fn total_loss_graph(
    model: &AlignmentModel,
    tape: &Tape,
    vars: &BTreeMap<String, Var>,
    batch: &[&PreparedPair],
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    if cfg.disable_patch_align && cfg.disable_seq_align {
        return Err(Error::NoActiveLossTerms);
    }
    let s = batch.len();
    if s < 2 {
        return Err(Error::Config(format!(
            "a contrastive batch needs at least two sequences, got {s}"
        )));
    }
    let p = model.n_patches;
    for pair in batch {
        if pair.eeg.n_patches() != p || pair.exg.n_patches() != p {
            return Err(Error::ShapeMismatch(format!(
                "pair {} has {} EEG / {} EXG patches; this model is built for P={p}",
                pair.pair_id,
                pair.eeg.n_patches(),
                pair.exg.n_patches()
            )));
        }
    }

    let eeg_grids: Vec<&PatchGrid> = batch.iter().map(|b| &b.eeg).collect();
    let eeg_emb = model.eeg_embed_graph(tape, vars, &eeg_grids)?;

    let mut variants: Vec<Var> = Vec::with_capacity(3);
    let originals: Vec<&PatchGrid> = batch.iter().map(|b| &b.exg).collect();
    variants.push(encode_batch(
        tape,
        vars,
        "exg.enc",
        &model.exg_cfg,
        &originals,
        None,
    )?);
    if !cfg.disable_sampling_aug {
        let ups: Vec<&PatchGrid> = batch.iter().map(|b| &b.exg_up).collect();
        variants.push(encode_batch(tape, vars, "exg.enc", &model.exg_cfg, &ups, None)?);
        let downs: Vec<&PatchGrid> = batch.iter().map(|b| &b.exg_down).collect();
        variants.push(encode_batch(
            tape,
            vars,
            "exg.enc",
            &model.exg_cfg,
            &downs,
            None,
        )?);
    }

    let mut breakdown = LossBreakdown::zero();
    let mut active: Vec<(usize, bool, Var)> = Vec::with_capacity(6); // (variant, is_seq, node)

    if !cfg.disable_patch_align {
        for (vi, &emb) in variants.iter().enumerate() {
            let negs = draw_patch_negatives(s, p, cfg.negatives_per_anchor, rng)?;
            let term = patch_infonce_graph(
                tape,
                eeg_emb,
                emb,
                model.t_patch,
                &negs,
                cfg.normalize_embeddings,
            )?;
            active.push((vi, false, term));
        }
    }
    if !cfg.disable_seq_align {
        let eeg_proj = *vars
            .get("eeg.proj")
            .ok_or_else(|| Error::Config("parameter set is missing eeg.proj".into()))?;
        let exg_proj = *vars
            .get("exg.proj")
            .ok_or_else(|| Error::Config("parameter set is missing exg.proj".into()))?;
        let eeg_seq = seq_project_graph(tape, eeg_emb, eeg_proj)?;
        for (vi, &emb) in variants.iter().enumerate() {
            let exg_seq = seq_project_graph(tape, emb, exg_proj)?;
            let term = seq_infonce_graph(
                tape,
                eeg_seq,
                exg_seq,
                model.t_seq,
                cfg.symmetric_seq_loss,
                cfg.normalize_embeddings,
            )?;
            active.push((vi, true, term));
        }
    }

    let mut total = None;
    for &(vi, is_seq, node) in &active {
        let value = tape.scalar(node);
        match (vi, is_seq) {
            (0, false) => breakdown.l_p = value,
            (1, false) => breakdown.l_p_up = value,
            (2, false) => breakdown.l_p_down = value,
            (0, true) => breakdown.l_s = value,
            (1, true) => breakdown.l_s_up = value,
            (2, true) => breakdown.l_s_down = value,
            _ => unreachable!("at most three variants"),
        }
        total = Some(match total {
            None => node,
            Some(acc) => tape.add(acc, node),
        });
    }
    let total = total.expect("at least one loss term is active");
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

/// Evaluates the combined objective on already-prepared pairs without
/// building gradients.
pub fn total_loss_prepared(
    model: &AlignmentModel,
    batch: &[&PreparedPair],
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let vars = model.constant_vars(&tape);
    let (_, breakdown) = total_loss_graph(model, &tape, &vars, batch, cfg, rng)?;
    Ok(breakdown)
}

/// Evaluates the combined objective on raw labeled pairs (preprocessing
/// included), reporting all six terms.
pub fn total_loss(
    model: &AlignmentModel,
    pairs: &[LabeledPair],
    cfg: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let prepared = prepare_pairs(pairs, cfg.window_sec, cfg.lowpass_hz)?;
    let refs: Vec<&PreparedPair> = prepared.iter().collect();
    total_loss_prepared(model, &refs, cfg, rng)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One optimizer step's losses. `step` counts batches globally across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// The outcome of a training run: the step-by-step loss trace and the
/// generator state after the last draw (serialized into checkpoints so a run
/// could be resumed or audited).
pub struct AlignRun {
    pub trace: Vec<TraceRow>,
    pub rng: ChaCha8Rng,
}

/// Renders a loss trace as CSV (one row per optimizer step).
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,step,L_p,L_p',L_p'',L_s,L_s',L_s'',total\n");
    for row in trace {
        let l = &row.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.epoch, row.step, l.l_p, l.l_p_up, l.l_p_down, l.l_s, l.l_s_up, l.l_s_down, l.total
        ));
    }
    out
}

/// Fits the model on labeled pairs (preprocessing included). See
/// [`train_align_prepared`] for the loop itself.
pub fn train_align(
    model: &mut AlignmentModel,
    pairs: &[LabeledPair],
    cfg: &AlignConfig,
) -> Result<AlignRun> {
    cfg.validate()?;
    let prepared = prepare_pairs(pairs, cfg.window_sec, cfg.lowpass_hz)?;
    train_align_prepared(model, &prepared, cfg)
}

/// The alignment training loop.
///
/// Per epoch the pair order is reshuffled (one generator drives shuffling and
/// negative draws, seeded from `cfg.seed` on [`RNG_STREAM_TRAIN`]), pairs are
/// grouped into batches of `batch_sequences` (remainder dropped), and each
/// batch takes one Adam step with two learning-rate groups: parameters named
/// `eeg.*` at `lr_eeg`, everything else at `lr_exg`. Both rates follow a
/// cosine decay from their configured values toward zero across the whole
/// run, so the final weights settle instead of orbiting the optimum at full
/// step size. A zero rate freezes its group bit-exactly. A non-finite loss
/// aborts with the offending batch's pair ids.
pub fn train_align_prepared(
    model: &mut AlignmentModel,
    prepared: &[PreparedPair],
    cfg: &AlignConfig,
) -> Result<AlignRun> {
    cfg.validate()?;
    if prepared.len() < cfg.batch_sequences {
        return Err(Error::Config(format!(
            "training needs at least batch_sequences = {} pairs, got {}",
            cfg.batch_sequences,
            prepared.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(RNG_STREAM_TRAIN);
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0usize;
    let total_steps = cfg.epochs * (prepared.len() / cfg.batch_sequences);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_sequences) {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &prepared[i]).collect();
            let tape = Tape::new();
            let vars = model.params.leaves(&tape);
            let (total, breakdown) = total_loss_graph(model, &tape, &vars, &batch, cfg, &mut rng)?;
            if !breakdown.total.is_finite() {
                let batch_id = batch
                    .iter()
                    .map(|b| b.pair_id.as_str())
                    .collect::<Vec<_>>()
                    .join(",");
                return Err(Error::TrainDiverged {
                    epoch,
                    step,
                    batch_id,
                });
            }
            let mut grads_store = tape.backward(total);
            let mut grads = BTreeMap::new();
            for (name, var) in &vars {
                if let Some(g) = grads_store.take(*var) {
                    grads.insert(name.clone(), g);
                }
            }
            let anneal =
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            adam.step(&mut model.params, &grads, |name| {
                anneal
                    * if name.starts_with("eeg.") {
                        cfg.lr_eeg
                    } else {
                        cfg.lr_exg
                    }
            });
            trace.push(TraceRow {
                epoch,
                step,
                loss: breakdown,
            });
            step += 1;
        }
    }
    Ok(AlignRun { trace, rng })
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

/// In-batch EEG→EXG retrieval: chunks `prepared` (in the given order) into
/// batches of `batch_sequences`, projects both modalities to sequence space,
/// and scores how often each EEG sequence's nearest EXG sequence (cosine, or
/// raw dot when `normalize` is off) is its own pair. The trailing partial
/// batch is dropped.
pub fn retrieval_top1(
    model: &AlignmentModel,
    prepared: &[PreparedPair],
    batch_sequences: usize,
    normalize: bool,
) -> Result<f64> {
    if batch_sequences < 2 {
        return Err(Error::Config(
            "retrieval needs batches of at least two sequences".into(),
        ));
    }
    let n_batches = prepared.len() / batch_sequences;
    if n_batches == 0 {
        return Err(Error::EmptySplit(format!(
            "retrieval needs at least one full batch of {batch_sequences}, got {} pairs",
            prepared.len()
        )));
    }
    let eeg_proj = model.proj_view("eeg.proj").to_owned();
    let exg_proj = model.proj_view("exg.proj").to_owned();
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in 0..n_batches {
        let batch = &prepared[b * batch_sequences..(b + 1) * batch_sequences];
        let eeg_grids: Vec<&PatchGrid> = batch.iter().map(|p| &p.eeg).collect();
        let exg_grids: Vec<&PatchGrid> = batch.iter().map(|p| &p.exg).collect();
        let eeg_emb = model.encode_eeg_batch(&eeg_grids)?;
        let exg_emb = model.encode_exg_batch(&exg_grids)?;
        let mut e = project_batch(&eeg_emb, &eeg_proj);
        let mut x = project_batch(&exg_emb, &exg_proj);
        if normalize {
            l2_normalize_rows(&mut e);
            l2_normalize_rows(&mut x);
        }
        let sims = e.dot(&x.t());
        for (i, row) in sims.rows().into_iter().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .expect("non-empty row");
            if best == i {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// `[S × P × D] → [S × D_s]` with a `[D_s × P·D]` projection (value level).
fn project_batch(emb: &Array3<f64>, proj: &Array2<f64>) -> Array2<f64> {
    let (s, p, d) = emb.dim();
    let flat = emb
        .view()
        .into_shape_with_order((s, p * d))
        .expect("standard-layout embeddings");
    flat.dot(&proj.t())
}

// ---------------------------------------------------------------------------
// Similarity diagnostics
// ---------------------------------------------------------------------------

/// Raw cosine similarities between the patch embeddings of two pairs, one
/// `[P_row × P_col]` block per (EEG pair, EXG pair) combination. Rows always
/// index EEG patches, columns EXG patches.
#[derive(Debug, Clone)]
pub struct SimilarityBlocks {
    pub pair_a: String,
    pub pair_b: String,
    /// eeg(a) × exg(a)
    pub within_a: Array2<f64>,
    /// eeg(a) × exg(b)
    pub cross_ab: Array2<f64>,
    /// eeg(b) × exg(a)
    pub cross_ba: Array2<f64>,
    /// eeg(b) × exg(b)
    pub within_b: Array2<f64>,
}

impl SimilarityBlocks {
    /// Blocks with their names, in reading order (a-row then b-row).
    pub fn blocks(&self) -> [(&'static str, &Array2<f64>); 4] {
        [
            ("within_a", &self.within_a),
            ("cross_ab", &self.cross_ab),
            ("cross_ba", &self.cross_ba),
            ("within_b", &self.within_b),
        ]
    }

    /// All four blocks min-max normalized **jointly** to `[0, 1]` (one shared
    /// min and max), so brightness is comparable across blocks. A degenerate
    /// constant field maps to 0.5 everywhere.
    pub fn normalized(&self) -> [Array2<f64>; 4] {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (_, b) in self.blocks() {
            for &v in b.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let map = |b: &Array2<f64>| {
            if hi > lo {
                b.mapv(|v| (v - lo) / (hi - lo))
            } else {
                Array2::from_elem(b.dim(), 0.5)
            }
        };
        [
            map(&self.within_a),
            map(&self.cross_ab),
            map(&self.cross_ba),
            map(&self.within_b),
        ]
    }

    /// Mean of the within-pair diagonals minus the mean over both cross-pair
    /// blocks, computed on the jointly normalized values. Alignment that
    /// matched simultaneous patches (and only those) drives this up.
    pub fn normalized_diag_gap(&self) -> f64 {
        let [wa, ab, ba, wb] = self.normalized();
        let mut diag: Vec<f64> = wa.diag().to_vec();
        diag.extend(wb.diag().iter());
        let diag_mean = diag.iter().sum::<f64>() / diag.len() as f64;
        let cross_n = ab.len() + ba.len();
        let cross_mean = (ab.sum() + ba.sum()) / cross_n as f64;
        diag_mean - cross_mean
    }
}

/// Encodes two pairs and tabulates all four EEG×EXG cosine-similarity blocks.
/// With an untrained model no particular block structure is expected; after
/// alignment the within-pair diagonals should dominate.
pub fn similarity_matrix(
    model: &AlignmentModel,
    pair_a: &LabeledPair,
    pair_b: &LabeledPair,
    window_sec: f64,
    lowpass_hz: f64,
) -> Result<SimilarityBlocks> {
    let embed = |rec: &Recording, is_eeg: bool| -> Result<Array2<f64>> {
        let grid = prepare_grid(rec, window_sec, lowpass_hz)?;
        let emb = if is_eeg {
            model.encode_eeg(&grid)?
        } else {
            model.encode_exg(&grid)?
        };
        let mut values = emb.values;
        l2_normalize_rows(&mut values);
        Ok(values)
    };
    let eeg_a = embed(&pair_a.eeg, true)?;
    let eeg_b = embed(&pair_b.eeg, true)?;
    let exg_a = embed(&pair_a.exg, false)?;
    let exg_b = embed(&pair_b.exg, false)?;
    Ok(SimilarityBlocks {
        pair_a: pair_a.pair_id.clone(),
        pair_b: pair_b.pair_id.clone(),
        within_a: eeg_a.dot(&exg_a.t()),
        cross_ab: eeg_a.dot(&exg_b.t()),
        cross_ba: eeg_b.dot(&exg_a.t()),
        within_b: eeg_b.dot(&exg_b.t()),
    })
}
