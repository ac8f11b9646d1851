//! End-to-end exercise of the command-line surface: one tiny dataset is
//! synthesized, aligned, probed, scored, and inspected, and every artifact
//! the run records promise is checked for existence and internal
//! consistency. Error paths that cross subcommand boundaries (bad configs,
//! unknown pair ids) are covered here too; pure flag parsing lives with the
//! unit tests.

use std::fs;
use std::path::Path;

use exalign::checkpoint::load_alignment;
use exalign::cli::run;
use exalign::dataio::load_dataset;
use exalign::downstream::{load_probe, ProbeMode};
use exalign::metrics::EvalReport;

const ALIGN_TOML: &str = r#"
lr_eeg = 3e-4
lr_exg = 3e-4
batch_sequences = 4
negatives_per_anchor = 6
epochs = 2
seed = 0
d_seq = 16
window_sec = 5.0
lowpass_hz = 45.0

[eeg_encoder]
d_patch = 16
conv_channels = [4, 8]
conv_kernel = 7
conv_stride = 4
transformer_layers = 1
attention_heads = 2
ff_multiplier = 2
dropout = 0.0
positional_encoding = true

[exg_encoder]
d_patch = 16
conv_channels = [4, 8]
conv_kernel = 7
conv_stride = 4
transformer_layers = 1
attention_heads = 2
ff_multiplier = 2
dropout = 0.0
positional_encoding = true
"#;

const PROBE_TOML: &str = r#"
mode = "linear_probe"
n_classes = 3
hidden = 16
lr = 1e-3
epochs = 8
batch_pairs = 4
patience = 8
seed = 0
"#;

fn path_str(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().expect("utf-8 path").to_string()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text)
        .unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn assert_artifact_hashes(record: &serde_json::Value, expected: &[&str]) {
    let artifacts = record["artifacts"]
        .as_object()
        .expect("run record lists artifacts");
    for name in expected {
        let hash = artifacts
            .get(*name)
            .unwrap_or_else(|| panic!("artifact {name} missing from run record"))
            .as_str()
            .expect("artifact hash is a string");
        assert_eq!(hash.len(), 64, "{name} hash should be sha-256 hex");
        assert!(
            hash.chars().all(|c| c.is_ascii_hexdigit()),
            "{name} hash {hash} is not hex"
        );
    }
}

#[test]
fn pipeline_emits_complete_and_consistent_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let aligned = root.path().join("aligned");
    let probed = root.path().join("probed");
    let scored = root.path().join("scored");
    let blocks = root.path().join("blocks");
    let align_cfg = root.path().join("align.toml");
    let probe_cfg = root.path().join("probe.toml");
    fs::write(&align_cfg, ALIGN_TOML).unwrap();
    fs::write(&probe_cfg, PROBE_TOML).unwrap();

    // synth: 20 pairs, 5 subjects (blocks of 4), short recordings
    let code = run([
        "exalign",
        "synth",
        "--out",
        &path_str(root.path(), "data"),
        "--n-pairs",
        "20",
        "--duration-sec",
        "10",
        "--eeg-channels",
        "2",
        "--exg-channels",
        "1",
        "--pairs-per-subject",
        "4",
        "--seed",
        "7",
    ]);
    assert_eq!(code, 0, "synth should succeed");
    let pairs = load_dataset(&data).unwrap();
    assert_eq!(pairs.len(), 20);
    assert!(data.join("run.json").exists());

    // align
    let code = run([
        "exalign",
        "align",
        "--dataset",
        &path_str(root.path(), "data"),
        "--out",
        &path_str(root.path(), "aligned"),
        "--config",
        align_cfg.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "align should succeed");
    let trace = fs::read_to_string(aligned.join("loss_trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(
        lines[0], "epoch,step,L_p,L_p',L_p'',L_s,L_s',L_s'',total",
        "trace header names all six terms"
    );
    // 20 pairs in batches of 4 = 5 steps per epoch, 2 epochs
    assert_eq!(lines.len(), 1 + 10, "one row per optimizer step");
    let (model, loaded_cfg, rng) = load_alignment(&aligned.join("alignment.bxc")).unwrap();
    assert_eq!(loaded_cfg.epochs, 2);
    assert_eq!(model.d_seq, 16);
    assert_eq!(model.n_patches, 2);
    assert!(rng.is_some(), "checkpoint preserves the training RNG");
    let record = read_json(&aligned.join("run.json"));
    assert_eq!(record["command"], "align");
    assert_artifact_hashes(&record, &["alignment.bxc", "loss_trace.csv"]);
    let inputs = record["inputs"].as_object().expect("align records inputs");
    assert!(
        inputs.keys().any(|k| k.ends_with("manifest.json")),
        "align records the dataset manifest it consumed"
    );

    // probe (subject-independent split of 5 subjects = 12/4/4 pairs)
    let code = run([
        "exalign",
        "probe",
        "--checkpoint",
        &path_str(&aligned, "alignment.bxc"),
        "--dataset",
        &path_str(root.path(), "data"),
        "--out",
        &path_str(root.path(), "probed"),
        "--config",
        probe_cfg.to_str().unwrap(),
        "--split",
        "subject",
    ]);
    assert_eq!(code, 0, "probe should succeed");
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(probed.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report.confusion_matrix.len(), 3);
    let test_total: u64 = report.confusion_matrix.iter().flatten().sum();
    assert_eq!(test_total, 4, "report covers exactly the test split");
    let predictions = fs::read_to_string(probed.join("predictions.csv")).unwrap();
    let pred_lines: Vec<&str> = predictions.lines().collect();
    assert_eq!(pred_lines.len(), 1 + 4);
    assert!(pred_lines[0].starts_with("pair_id,label,prediction,score_0"));
    let (head, mode, window_sec, lowpass_hz) =
        load_probe(&probed.join("probe.bxc")).unwrap();
    assert_eq!(mode, ProbeMode::LinearProbe);
    assert_eq!(head.n_classes, 3);
    assert_eq!(head.hidden, 16);
    assert_eq!(window_sec, 5.0);
    assert_eq!(lowpass_hz, 45.0);
    assert!(probed.join("probe_trace.json").exists());
    let record = read_json(&probed.join("run.json"));
    assert_eq!(
        record["split_sizes"],
        serde_json::json!({"train": 12, "val": 4, "test": 4})
    );
    assert!(record["eeg_encoder_invocations"].is_u64());
    assert_artifact_hashes(
        &record,
        &["probe.bxc", "eval_report.json", "predictions.csv", "probe_trace.json"],
    );

    // eval scores the full dataset with the saved head
    let code = run([
        "exalign",
        "eval",
        "--checkpoint",
        &path_str(&aligned, "alignment.bxc"),
        "--head",
        &path_str(&probed, "probe.bxc"),
        "--dataset",
        &path_str(root.path(), "data"),
        "--out",
        &path_str(root.path(), "scored"),
    ]);
    assert_eq!(code, 0, "eval should succeed");
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(scored.join("eval_report.json")).unwrap())
            .unwrap();
    let total: u64 = report.confusion_matrix.iter().flatten().sum();
    assert_eq!(total, 20, "eval scores every pair in the dataset");
    assert!(report.pr_auc.is_some(), "per-class scores give a PR-AUC");
    let predictions = fs::read_to_string(scored.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 1 + 20);

    // simmatrix on two dataset pairs
    let code = run([
        "exalign",
        "simmatrix",
        "--checkpoint",
        &path_str(&aligned, "alignment.bxc"),
        "--dataset",
        &path_str(root.path(), "data"),
        "--pair-a",
        "pair-00000",
        "--pair-b",
        "pair-00001",
        "--out",
        &path_str(root.path(), "blocks"),
    ]);
    assert_eq!(code, 0, "simmatrix should succeed");
    for name in ["within_a.csv", "cross_ab.csv", "cross_ba.csv", "within_b.csv"] {
        let grid = fs::read_to_string(blocks.join(name)).unwrap();
        let rows: Vec<&str> = grid.lines().collect();
        assert_eq!(rows.len(), 2, "{name} has one row per patch");
        for row in rows {
            let values: Vec<f64> = row
                .split(',')
                .map(|v| v.parse().expect("numeric cell"))
                .collect();
            assert_eq!(values.len(), 2, "{name} has one column per patch");
            assert!(
                values.iter().all(|v| (0.0..=1.0).contains(v)),
                "{name} is jointly min-max normalized"
            );
        }
    }
    let summary = read_json(&blocks.join("simmatrix.json"));
    assert_eq!(summary["pair_a"], "pair-00000");
    assert!(summary["normalized_diag_gap"].is_f64());
}

#[test]
fn misconfigured_runs_fail_with_validation_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let code = run([
        "exalign",
        "synth",
        "--out",
        &path_str(root.path(), "tiny"),
        "--n-pairs",
        "6",
        "--duration-sec",
        "10",
        "--eeg-channels",
        "1",
        "--exg-channels",
        "1",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);

    // a config file with a misspelled field is rejected before any work
    let bad_cfg = root.path().join("align.toml");
    fs::write(&bad_cfg, "epochz = 4\n").unwrap();
    let code = run([
        "exalign",
        "align",
        "--dataset",
        &path_str(root.path(), "tiny"),
        "--out",
        &path_str(root.path(), "nowhere"),
        "--config",
        bad_cfg.to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "unknown config fields are a usage error");
    assert!(!root.path().join("nowhere").join("alignment.bxc").exists());

    // simmatrix must name pairs that exist in the dataset
    let align_cfg = root.path().join("ok.toml");
    fs::write(&align_cfg, ALIGN_TOML).unwrap();
    let code = run([
        "exalign",
        "align",
        "--dataset",
        &path_str(root.path(), "tiny"),
        "--out",
        &path_str(root.path(), "aligned"),
        "--config",
        align_cfg.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let code = run([
        "exalign",
        "simmatrix",
        "--checkpoint",
        &path_str(&root.path().join("aligned"), "alignment.bxc"),
        "--dataset",
        &path_str(root.path(), "tiny"),
        "--pair-a",
        "pair-00000",
        "--pair-b",
        "pair-99999",
        "--out",
        &path_str(root.path(), "blocks"),
    ]);
    assert_eq!(code, 1, "unknown pair ids are a usage error");
}
