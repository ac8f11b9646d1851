//! Downstream classification on top of an aligned model: attention fusion of
//! patch tokens, a small classifier, probe/fine-tune training with early
//! stopping, and subject-aware data splitting.
//!
//! The fusion head attends over *patch tokens* with one learned query: in the
//! two-modality modes the token set is the concatenation of the EEG and EXG
//! patch embeddings (2P tokens), in the single-modality modes just that
//! modality's P tokens. Attention output feeds a two-layer perceptron whose
//! argmax is the predicted class.
//!
//! Probe training freezes the encoders everywhere except `finetune` mode and
//! early-stops on validation macro-F1. All inference goes through the same
//! graph code as training, so probe-time and training-time numerics agree by
//! construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{prepare_pairs, AlignmentModel, PreparedPair};
use crate::checkpoint;
use crate::encoder::{encode_batch, PatchEmbeddings};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nn::params::{init_uniform, init_zeros};
use crate::nn::{Adam, AdamConfig, ParamSet, Tape, Var};
use crate::sigcore::{LabeledPair, PatchGrid};

/// ChaCha stream used by probe training (head init + epoch shuffles).
pub const RNG_STREAM_PROBE: u64 = 2;

// ---------------------------------------------------------------------------
// Modes and configuration
// ---------------------------------------------------------------------------

/// What the probe trains and which tokens it sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Both modalities, encoders frozen; only the head learns.
    LinearProbe,
    /// Both modalities; encoder parameters receive gradients too.
    Finetune,
    /// EEG tokens only, encoders frozen.
    EegOnly,
    /// EXG tokens only, encoders frozen. The EEG encoder is never invoked.
    ExgOnly,
}

impl ProbeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeMode::LinearProbe => "linear_probe",
            ProbeMode::Finetune => "finetune",
            ProbeMode::EegOnly => "eeg_only",
            ProbeMode::ExgOnly => "exg_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear_probe" => Ok(ProbeMode::LinearProbe),
            "finetune" => Ok(ProbeMode::Finetune),
            "eeg_only" => Ok(ProbeMode::EegOnly),
            "exg_only" => Ok(ProbeMode::ExgOnly),
            other => Err(Error::Config(format!(
                "unknown probe mode {other:?} (expected linear_probe, finetune, eeg_only, or \
                 exg_only)"
            ))),
        }
    }

    pub fn uses_eeg(&self) -> bool {
        !matches!(self, ProbeMode::ExgOnly)
    }

    pub fn uses_exg(&self) -> bool {
        !matches!(self, ProbeMode::EegOnly)
    }

    pub fn trains_encoders(&self) -> bool {
        matches!(self, ProbeMode::Finetune)
    }
}

/// Probe training hyperparameters. Like the alignment configuration, every
/// field has a serde default and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    /// Class count; 0 means "infer from the training and validation labels".
    pub n_classes: usize,
    /// Classifier hidden width.
    pub hidden: usize,
    /// Learning rate for the fusion head.
    pub lr: f64,
    /// Learning rate for encoder parameters in `finetune` mode.
    pub lr_encoder: f64,
    /// Maximum epochs; early stopping usually ends training sooner.
    pub epochs: usize,
    pub batch_pairs: usize,
    /// Epochs without validation macro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Patch window used for preprocessing, in seconds (match the alignment
    /// checkpoint's value).
    pub window_sec: f64,
    /// Low-pass cutoff used for preprocessing, in Hz.
    pub lowpass_hz: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::LinearProbe,
            n_classes: 0,
            hidden: 64,
            lr: 1e-3,
            lr_encoder: 1e-5,
            epochs: 60,
            batch_pairs: 16,
            patience: 10,
            seed: 0,
            window_sec: 5.0,
            lowpass_hz: 45.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || !(self.lr_encoder.is_finite() && self.lr_encoder >= 0.0)
        {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative, got lr={} lr_encoder={}",
                self.lr, self.lr_encoder
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be at least 1".into()));
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
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The fusion head
// ---------------------------------------------------------------------------

/// Learned query, bias-free key/value projections, and a two-layer
/// classifier. Tensors live in a flat parameter set under the keys `query`
/// `[D_p]`, `key_proj`/`value_proj` `[D_p × D_p]`, and `cls.{w1,b1,w2,b2}`.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub d_patch: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub params: ParamSet,
}

impl FusionHead {
    /// Initialization draws, in order: query, key_proj, value_proj, cls.w1,
    /// cls.w2 (biases start at zero).
    pub fn init(d_patch: usize, hidden: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        params.insert("query", init_uniform(&[d_patch], d_patch, rng));
        params.insert("key_proj", init_uniform(&[d_patch, d_patch], d_patch, rng));
        params.insert(
            "value_proj",
            init_uniform(&[d_patch, d_patch], d_patch, rng),
        );
        params.insert("cls.w1", init_uniform(&[hidden, d_patch], d_patch, rng));
        params.insert("cls.b1", init_zeros(&[hidden]));
        params.insert("cls.w2", init_uniform(&[n_classes, hidden], hidden, rng));
        params.insert("cls.b2", init_zeros(&[n_classes]));
        FusionHead {
            d_patch,
            hidden,
            n_classes,
            params,
        }
    }

    /// Rebuilds a head from serialized parts, re-checking all tensor shapes.
    pub fn from_parts(
        d_patch: usize,
        hidden: usize,
        n_classes: usize,
        params: ParamSet,
    ) -> Result<Self> {
        let expected: [(&str, Vec<usize>); 7] = [
            ("query", vec![d_patch]),
            ("key_proj", vec![d_patch, d_patch]),
            ("value_proj", vec![d_patch, d_patch]),
            ("cls.w1", vec![hidden, d_patch]),
            ("cls.b1", vec![hidden]),
            ("cls.w2", vec![n_classes, hidden]),
            ("cls.b2", vec![n_classes]),
        ];
        for (name, shape) in &expected {
            let found = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("fusion head is missing {name}")))?
                .shape();
            if found != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "fusion head tensor {name} has shape {found:?}, expected {shape:?}"
                )));
            }
        }
        Ok(FusionHead {
            d_patch,
            hidden,
            n_classes,
            params,
        })
    }
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

fn head_var(vars: &BTreeMap<String, Var>, prefix: &str, name: &str) -> Result<Var> {
    let key = if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    };
    vars.get(&key)
        .copied()
        .ok_or_else(|| Error::Config(format!("fusion head variable {key} is missing")))
}

/// Single-query scaled dot-product attention over a `[B × T × D]` token
/// batch: returns the attention weights `[B × T]` and fused outputs
/// `[B × D]`. Head tensors are looked up under `prefix`.
pub fn fuse_graph(
    tape: &Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    tokens: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(tokens);
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "fusion expects [B×T×D] tokens, got {shape:?}"
        )));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t == 0 {
        return Err(Error::ShapeMismatch(
            "fusion needs at least one token (P = 0)".into(),
        ));
    }
    let query = head_var(vars, prefix, "query")?;
    let key_proj = head_var(vars, prefix, "key_proj")?;
    let value_proj = head_var(vars, prefix, "value_proj")?;
    if tape.shape(query) != [d] {
        return Err(Error::ShapeMismatch(format!(
            "query has dimension {:?}, tokens have D = {d}",
            tape.shape(query)
        )));
    }
    let flat = tape.reshape(tokens, &[b * t, d]);
    let keys = tape.matmul(flat, tape.transpose2(key_proj));
    let logits = tape.scale(
        tape.matmul(keys, tape.reshape(query, &[d, 1])),
        1.0 / (d as f64).sqrt(),
    );
    let weights = tape.softmax_last(tape.reshape(logits, &[b, t]));
    let values = tape.reshape(tape.matmul(flat, tape.transpose2(value_proj)), &[b, t, d]);
    let fused = tape.reshape(
        tape.bmm(tape.reshape(weights, &[b, 1, t]), values),
        &[b, d],
    );
    Ok((weights, fused))
}

/// Fusion followed by the two-layer classifier: `[B × T × D] → [B × C]`.
/// Returns (attention weights, class logits).
pub fn probe_logits_graph(
    tape: &Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    tokens: Var,
) -> Result<(Var, Var)> {
    let (weights, fused) = fuse_graph(tape, vars, prefix, tokens)?;
    let w1 = head_var(vars, prefix, "cls.w1")?;
    let b1 = head_var(vars, prefix, "cls.b1")?;
    let w2 = head_var(vars, prefix, "cls.w2")?;
    let b2 = head_var(vars, prefix, "cls.b2")?;
    let hidden = tape.gelu(tape.add_bias(tape.matmul(fused, tape.transpose2(w1)), b1));
    let logits = tape.add_bias(tape.matmul(hidden, tape.transpose2(w2)), b2);
    Ok((weights, logits))
}

/// Mean cross-entropy of `[B × C]` logits against integer labels.
pub fn cross_entropy_graph(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::LabelOutOfRange {
            label: bad as i64,
            n_classes: shape[1],
        });
    }
    let lse = tape.logsumexp_last(logits);
    let picked = tape.gather_last(logits, labels);
    Ok(tape.mean_all(tape.sub(lse, picked)))
}

// ---------------------------------------------------------------------------
// Value-level fusion and classification
// ---------------------------------------------------------------------------

fn head_constants(tape: &Tape, head: &FusionHead) -> BTreeMap<String, Var> {
    head.params
        .iter()
        .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
        .collect()
}

/// Attention-fuses the patch embeddings of both modalities into one `[D_p]`
/// vector (the 2P-token path used by the two-modality modes).
pub fn fuse(
    eeg: &PatchEmbeddings,
    exg: &PatchEmbeddings,
    head: &FusionHead,
) -> Result<Array1<f64>> {
    if eeg.dim() != exg.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths differ: EEG {} vs EXG {}",
            eeg.dim(),
            exg.dim()
        )));
    }
    let mut tokens = Array2::zeros((eeg.n_patches() + exg.n_patches(), eeg.dim()));
    for (i, row) in eeg.values.rows().into_iter().enumerate() {
        tokens.row_mut(i).assign(&row);
    }
    for (i, row) in exg.values.rows().into_iter().enumerate() {
        tokens.row_mut(eeg.n_patches() + i).assign(&row);
    }
    fuse_tokens(tokens.view(), head)
}

/// Attention-fuses an arbitrary `[T × D_p]` token list.
pub fn fuse_tokens(tokens: ArrayView2<'_, f64>, head: &FusionHead) -> Result<Array1<f64>> {
    let (t, d) = tokens.dim();
    let tape = Tape::new();
    let vars = head_constants(&tape, head);
    let tok = tape.constant(
        tokens
            .to_owned()
            .into_shape_with_order((1, t, d))
            .expect("owned tokens are contiguous")
            .into_dyn(),
    );
    let (_, fused) = fuse_graph(&tape, &vars, "", tok)?;
    let value = tape.value(fused).clone();
    Ok(Array1::from_iter(value.iter().cloned()))
}

/// The attention distribution the head places over a token list.
pub fn attention_weights(tokens: ArrayView2<'_, f64>, head: &FusionHead) -> Result<Array1<f64>> {
    let (t, d) = tokens.dim();
    let tape = Tape::new();
    let vars = head_constants(&tape, head);
    let tok = tape.constant(
        tokens
            .to_owned()
            .into_shape_with_order((1, t, d))
            .expect("owned tokens are contiguous")
            .into_dyn(),
    );
    let (weights, _) = fuse_graph(&tape, &vars, "", tok)?;
    let value = tape.value(weights).clone();
    Ok(Array1::from_iter(value.iter().cloned()))
}

/// Class logits for a `[B × T × D]` token batch (inference mode).
fn head_logits(head: &FusionHead, tokens: &Array3<f64>) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let vars = head_constants(&tape, head);
    let tok = tape.constant(tokens.clone().into_dyn());
    let (_, logits) = probe_logits_graph(&tape, &vars, "", tok)?;
    let value = tape.value(logits).clone();
    Ok(value
        .into_dimensionality::<Ix2>()
        .expect("logits are rank-2"))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn argmax_first(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Token assembly
// ---------------------------------------------------------------------------

/// Encodes every prepared pair once (inference mode, frozen parameters) and
/// returns each pair's token matrix. Modes that skip a modality never invoke
/// its encoder.
fn collect_tokens(
    model: &AlignmentModel,
    prepared: &[PreparedPair],
    mode: ProbeMode,
) -> Result<Vec<Array2<f64>>> {
    let eeg = if mode.uses_eeg() {
        let grids: Vec<&PatchGrid> = prepared.iter().map(|p| &p.eeg).collect();
        Some(model.encode_eeg_batch(&grids)?)
    } else {
        None
    };
    let exg = if mode.uses_exg() {
        let grids: Vec<&PatchGrid> = prepared.iter().map(|p| &p.exg).collect();
        Some(model.encode_exg_batch(&grids)?)
    } else {
        None
    };
    let d = model.d_patch;
    let p = model.n_patches;
    let t = [eeg.is_some(), exg.is_some()]
        .iter()
        .filter(|&&used| used)
        .count()
        * p;
    let mut out = Vec::with_capacity(prepared.len());
    for i in 0..prepared.len() {
        let mut tokens = Array2::zeros((t, d));
        let mut offset = 0;
        for emb in [&eeg, &exg].into_iter().flatten() {
            for j in 0..p {
                tokens
                    .row_mut(offset + j)
                    .assign(&emb.index_axis(ndarray::Axis(0), i).row(j));
            }
            offset += p;
        }
        out.push(tokens);
    }
    Ok(out)
}

fn stack_token_batch(tokens: &[Array2<f64>], indices: &[usize]) -> Array3<f64> {
    let (t, d) = tokens[indices[0]].dim();
    let mut out = Array3::zeros((indices.len(), t, d));
    for (b, &i) in indices.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), b).assign(&tokens[i]);
    }
    out
}

/// Graph-mode token batch for `finetune`: both encoders run on the tape so
/// gradients reach their parameters. Token order matches [`collect_tokens`]
/// (EEG patches first, then EXG).
fn batch_tokens_graph(
    model: &AlignmentModel,
    tape: &Tape,
    vars: &BTreeMap<String, Var>,
    batch: &[&PreparedPair],
) -> Result<Var> {
    let b = batch.len();
    let p = model.n_patches;
    let d = model.d_patch;
    let eeg_grids: Vec<&PatchGrid> = batch.iter().map(|x| &x.eeg).collect();
    let exg_grids: Vec<&PatchGrid> = batch.iter().map(|x| &x.exg).collect();
    let e = model.eeg_embed_graph(tape, vars, &eeg_grids)?;
    let x = encode_batch(tape, vars, "exg.enc", &model.exg_cfg, &exg_grids, None)?;
    let ef = tape.reshape(e, &[b, p * d]);
    let xf = tape.reshape(x, &[b, p * d]);
    Ok(tape.reshape(tape.concat_last(ef, xf), &[b, 2 * p, d]))
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// One scored pair: the true label, the argmax prediction, and the softmax
/// probability per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

/// Renders predictions as CSV: `pair_id,label,prediction,score_0,…`.
pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let n_classes = predictions.first().map_or(0, |p| p.scores.len());
    let mut out = String::from("pair_id,label,prediction");
    for k in 0..n_classes {
        out.push_str(&format!(",score_{k}"));
    }
    out.push('\n');
    for p in predictions {
        out.push_str(&format!("{},{},{}", p.pair_id, p.label, p.predicted));
        for s in &p.scores {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

fn require_label(pair_id: &str, label: Option<usize>, n_classes: usize) -> Result<usize> {
    let y = label
        .ok_or_else(|| Error::Config(format!("pair {pair_id} has no label to score against")))?;
    if y >= n_classes {
        return Err(Error::LabelOutOfRange {
            label: y as i64,
            n_classes,
        });
    }
    Ok(y)
}

fn classify_prepared(
    model: &AlignmentModel,
    head: &FusionHead,
    mode: ProbeMode,
    prepared: &[PreparedPair],
) -> Result<(Vec<Prediction>, EvalReport)> {
    if prepared.is_empty() {
        return Err(Error::EmptySplit("no pairs to classify".into()));
    }
    let tokens = collect_tokens(model, prepared, mode)?;
    let mut predictions = Vec::with_capacity(prepared.len());
    let mut labels = Vec::with_capacity(prepared.len());
    let mut preds = Vec::with_capacity(prepared.len());
    let mut scores = Array2::zeros((prepared.len(), head.n_classes));
    let indices: Vec<usize> = (0..prepared.len()).collect();
    for chunk in indices.chunks(64) {
        let batch = stack_token_batch(&tokens, chunk);
        let logits = head_logits(head, &batch)?;
        let probs = softmax_rows(&logits);
        for (local, &i) in chunk.iter().enumerate() {
            let label = require_label(&prepared[i].pair_id, prepared[i].label, head.n_classes)?;
            let row = probs.row(local);
            let predicted = argmax_first(row);
            labels.push(label);
            preds.push(predicted);
            scores.row_mut(i).assign(&row);
            predictions.push(Prediction {
                pair_id: prepared[i].pair_id.clone(),
                label,
                predicted,
                scores: row.to_vec(),
            });
        }
    }
    let report =
        EvalReport::from_predictions(&labels, &preds, Some(scores.view()), head.n_classes)?;
    Ok((predictions, report))
}

/// Scores labeled pairs with a trained head: encode (per the mode), fuse,
/// classify, argmax; the report includes the macro PR-AUC from the softmax
/// scores.
pub fn classify(
    model: &AlignmentModel,
    head: &FusionHead,
    mode: ProbeMode,
    pairs: &[LabeledPair],
    window_sec: f64,
    lowpass_hz: f64,
) -> Result<(Vec<Prediction>, EvalReport)> {
    let prepared = prepare_pairs(pairs, window_sec, lowpass_hz)?;
    classify_prepared(model, head, mode, &prepared)
}

// ---------------------------------------------------------------------------
// Probe training
// ---------------------------------------------------------------------------

/// One epoch of the probe trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_macro_f1: f64,
}

fn resolve_n_classes(
    cfg: &ProbeConfig,
    train: &[PreparedPair],
    val: &[PreparedPair],
) -> Result<usize> {
    let mut max_label = None;
    for pair in train.iter().chain(val) {
        let y = pair.label.ok_or_else(|| {
            Error::Config(format!("pair {} has no label; probes need labels", pair.pair_id))
        })?;
        max_label = Some(max_label.map_or(y, |m: usize| m.max(y)));
    }
    let observed = max_label.expect("splits checked non-empty") + 1;
    let n = if cfg.n_classes > 0 {
        if observed > cfg.n_classes {
            return Err(Error::LabelOutOfRange {
                label: (observed - 1) as i64,
                n_classes: cfg.n_classes,
            });
        }
        cfg.n_classes
    } else {
        observed
    };
    if n < 2 {
        return Err(Error::Config(format!(
            "classification needs at least two classes, found {n}"
        )));
    }
    Ok(n)
}

/// Trains a fusion head on `train`, early-stopping on `val` macro-F1 with
/// the configured patience, and returns the head from the best epoch along
/// with the per-epoch trace.
///
/// Encoders stay bit-identical in every mode except `finetune`, where they
/// receive gradients at `lr_encoder` and the best-epoch parameters are
/// written back into `model`.
pub fn train_probe(
    model: &mut AlignmentModel,
    train: &[LabeledPair],
    val: &[LabeledPair],
    cfg: &ProbeConfig,
) -> Result<(FusionHead, Vec<ProbeEpoch>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("probe training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("probe validation set is empty".into()));
    }
    let train_prepared = prepare_pairs(train, cfg.window_sec, cfg.lowpass_hz)?;
    let val_prepared = prepare_pairs(val, cfg.window_sec, cfg.lowpass_hz)?;
    let n_classes = resolve_n_classes(cfg, &train_prepared, &val_prepared)?;
    let train_labels: Vec<usize> = train_prepared
        .iter()
        .map(|p| p.label.expect("validated above"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(RNG_STREAM_PROBE);
    let mut head = FusionHead::init(model.d_patch, cfg.hidden, n_classes, &mut rng);

    let finetune = cfg.mode.trains_encoders();
    // Frozen modes encode every pair exactly once.
    let cached_train = if finetune {
        None
    } else {
        Some(collect_tokens(model, &train_prepared, cfg.mode)?)
    };

    let mut adam_head = Adam::new(AdamConfig::default());
    let mut adam_enc = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..train_prepared.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, ParamSet, Option<ParamSet>)> = None;
    let mut wait = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_pairs) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let tape = Tape::new();
            let mut vars = head.params.merged_under("head").leaves(&tape);
            let tokens = if let Some(cache) = &cached_train {
                tape.constant(stack_token_batch(cache, chunk).into_dyn())
            } else {
                vars.extend(model.params.leaves(&tape));
                let batch: Vec<&PreparedPair> =
                    chunk.iter().map(|&i| &train_prepared[i]).collect();
                batch_tokens_graph(model, &tape, &vars, &batch)?
            };
            let (_, logits) = probe_logits_graph(&tape, &vars, "head", tokens)?;
            let loss = cross_entropy_graph(&tape, logits, &labels)?;
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                let batch_id = chunk
                    .iter()
                    .map(|&i| train_prepared[i].pair_id.as_str())
                    .collect::<Vec<_>>()
                    .join(",");
                return Err(Error::TrainDiverged {
                    epoch,
                    step,
                    batch_id,
                });
            }
            loss_sum += loss_value;
            batches += 1;
            step += 1;

            let mut store = tape.backward(loss);
            let mut head_grads = BTreeMap::new();
            let mut enc_grads = BTreeMap::new();
            for (name, var) in &vars {
                if let Some(g) = store.take(*var) {
                    if let Some(stripped) = name.strip_prefix("head.") {
                        head_grads.insert(stripped.to_string(), g);
                    } else {
                        enc_grads.insert(name.clone(), g);
                    }
                }
            }
            adam_head.step(&mut head.params, &head_grads, |_| cfg.lr);
            if finetune {
                adam_enc.step(&mut model.params, &enc_grads, |_| cfg.lr_encoder);
            }
        }

        let (_, report) = classify_prepared(model, &head, cfg.mode, &val_prepared)?;
        let val_f1 = report.macro_f1;
        trace.push(ProbeEpoch {
            epoch,
            mean_train_loss: loss_sum / batches.max(1) as f64,
            val_macro_f1: val_f1,
        });

        let improved = best.as_ref().map_or(true, |(f1, _, _)| val_f1 > *f1);
        if improved {
            best = Some((
                val_f1,
                head.params.clone(),
                finetune.then(|| model.params.clone()),
            ));
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, head_params, model_params)) = best {
        head.params = head_params;
        if let Some(p) = model_params {
            model.params = p;
        }
    }
    Ok((head, trace))
}

// ---------------------------------------------------------------------------
// Head checkpoints
// ---------------------------------------------------------------------------

const PROBE_KIND: &str = "probe";

#[derive(Debug, Serialize, Deserialize)]
struct ProbeMeta {
    d_patch: usize,
    hidden: usize,
    n_classes: usize,
    mode: ProbeMode,
    window_sec: f64,
    lowpass_hz: f64,
}

/// Saves a fusion head plus the mode and preprocessing it was trained with.
pub fn save_probe(path: &Path, head: &FusionHead, cfg: &ProbeConfig) -> Result<()> {
    let meta = ProbeMeta {
        d_patch: head.d_patch,
        hidden: head.hidden,
        n_classes: head.n_classes,
        mode: cfg.mode,
        window_sec: cfg.window_sec,
        lowpass_hz: cfg.lowpass_hz,
    };
    let meta = serde_json::to_value(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization failed: {e}")))?;
    checkpoint::save_raw(path, PROBE_KIND, meta, &head.params)
}

/// Loads a fusion head checkpoint: the head, its mode, and the preprocessing
/// parameters (`window_sec`, `lowpass_hz`).
pub fn load_probe(path: &Path) -> Result<(FusionHead, ProbeMode, f64, f64)> {
    let (kind, meta, params) = checkpoint::load_raw(path)?;
    if kind != PROBE_KIND {
        return Err(Error::Checkpoint(format!(
            "{}: expected a {PROBE_KIND} checkpoint, found kind {kind:?}",
            path.display()
        )));
    }
    let meta: ProbeMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: malformed metadata: {e}", path.display())))?;
    let head = FusionHead::from_parts(meta.d_patch, meta.hidden, meta.n_classes, params)?;
    Ok((head, meta.mode, meta.window_sec, meta.lowpass_hz))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Largest-remainder apportionment of `n` items into a 3:1:1 ratio, ties
/// resolved in favor of train, then validation, then test.
fn three_way_counts(n: usize) -> (usize, usize, usize) {
    let weights = [3usize, 1, 1];
    let mut counts = [0usize; 3];
    let mut remainders = [0usize; 3];
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        counts[i] = n * w / 5;
        remainders[i] = n * w % 5;
        assigned += counts[i];
    }
    let mut leftover = n - assigned;
    // Stable selection sort by remainder: equal remainders keep index order,
    // which is exactly the train > val > test tie-break.
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&i| std::cmp::Reverse(remainders[i]));
    let mut i = 0;
    while leftover > 0 {
        counts[order[i]] += 1;
        leftover -= 1;
        i += 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Splits pairs 3:1:1 by *subject*: subjects are shuffled deterministically
/// under `seed` and partitioned, so no subject contributes pairs to more
/// than one split. Requires at least 5 distinct subjects.
pub fn split_subject_independent(
    pairs: &[LabeledPair],
    seed: u64,
) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>, Vec<LabeledPair>)> {
    let subjects: BTreeSet<&str> = pairs.iter().map(|p| p.subject_id()).collect();
    if subjects.len() < 5 {
        return Err(Error::TooFewSubjects {
            found: subjects.len(),
        });
    }
    let mut subjects: Vec<&str> = subjects.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let (n_train, n_val, _) = three_way_counts(subjects.len());
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        let split = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        assignment.insert(s, split);
    }
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for pair in pairs {
        out[assignment[pair.subject_id()]].push(pair.clone());
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}

/// Splits 3:1:1 at the pair level (for tasks without subject structure):
/// pairs are shuffled deterministically under `seed` and partitioned,
/// unstratified. Requires at least 5 pairs so every split is populated.
pub fn split_pairs(
    pairs: &[LabeledPair],
    seed: u64,
) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>, Vec<LabeledPair>)> {
    if pairs.len() < 5 {
        return Err(Error::Config(format!(
            "pair-level 3:1:1 split needs at least 5 pairs, got {}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = three_way_counts(pairs.len());
    let pick = |range: std::ops::Range<usize>| -> Vec<LabeledPair> {
        order[range].iter().map(|&i| pairs[i].clone()).collect()
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..pairs.len()),
    ))
}
