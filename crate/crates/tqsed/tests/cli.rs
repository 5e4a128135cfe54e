//! Binary-level checks: JSON summaries on stdout, machine-readable errors
//! on stderr with nonzero exit, artifact layout, length contracts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tqsed"))
}

fn write_small_config(path: &Path) {
    std::fs::write(
        path,
        r#"
seed = 5
cv_folds = 3

[synth]
vocabulary = ["tone_low", "noise_high"]
prototypes = [
  { kind = "tone", freq_hz = 440.0 },
  { kind = "noise_band", low_hz = 4000.0, high_hz = 5500.0 },
]
clip_seconds = 2.0
events_per_clip = [2, 3]
overlap_bias = 0.5
event_seconds = [0.5, 1.0]
event_level_db = [-14.0, -8.0]
label_hop_seconds = 0.2
label_window_seconds = 0.4
label_ref_rms = 0.1
seed = 0
sample_rate = 16000

[separation]
sample_rate = 16000
widths = [3, 6]
embedding_dim = 8

[separation.stft]
window_seconds = 0.032
hop_seconds = 0.016

[separation.dprnn]
hidden_size = 4

[lass_train]
learning_rate = 0.001
batch_size = 2
max_steps = 8
crop_seconds = 1.0

[branch]
conv_filters = 4

[sed_train]
batch_size = 4
max_epochs = 2
"#,
    )
    .unwrap();
}

#[test]
fn invalid_config_gives_error_json_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "definitely_not_a_key = true").unwrap();
    let out = bin()
        .args(["synth", "--clips", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["error"], "config");
    assert!(parsed["message"].as_str().unwrap().contains("definitely_not_a_key"));
}

#[test]
fn synth_prints_a_single_json_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write_small_config(&cfg);
    let out_dir = dir.path().join("data");
    let out = bin()
        .args(["synth", "--clips", "3"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1);
    let parsed: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(parsed["command"], "synth");
    assert_eq!(parsed["clips"], 3);
    assert!(out_dir.join("manifest_lass.jsonl").exists());
    assert!(out_dir.join("manifest_sed.jsonl").exists());
    assert!(out_dir.join("vocabulary.json").exists());
}

#[test]
fn separate_preserves_length_and_writes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write_small_config(&cfg);
    let data = dir.path().join("data");
    let lass_out = dir.path().join("lass");
    assert!(bin()
        .args(["synth", "--clips", "4"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    assert!(bin()
        .arg("train-lass")
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(data.join("manifest_lass.jsonl"))
        .arg("--out-dir")
        .arg(&lass_out)
        .status()
        .unwrap()
        .success());

    let input = data.join("audio/clip_00000.wav");
    let output = dir.path().join("sep.wav");
    let out = bin()
        .arg("separate")
        .arg("--checkpoint")
        .arg(lass_out.join("final.tqck"))
        .arg("--input")
        .arg(&input)
        .args(["--query", "tone_low"])
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().last().unwrap())
            .unwrap();
    assert_eq!(summary["input_samples"], summary["output_samples"]);

    let input_wave = tqsed::audio::wav::read_wav(&input).unwrap();
    let sep_wave = tqsed::audio::wav::read_wav(&output).unwrap();
    assert_eq!(input_wave.len(), sep_wave.len());

    // Unknown query: nonzero exit and a message naming the known queries.
    let bad = bin()
        .arg("separate")
        .arg("--checkpoint")
        .arg(lass_out.join("final.tqck"))
        .arg("--input")
        .arg(&input)
        .args(["--query", "spaceship"])
        .arg("--output")
        .arg(dir.path().join("nope.wav"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&bad.stderr).lines().last().unwrap())
            .unwrap();
    assert_eq!(err["error"], "invalid_input");
}

#[test]
fn oracle_stems_eval_reports_the_cap_for_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write_small_config(&cfg);
    let data = dir.path().join("data");
    assert!(bin()
        .args(["synth", "--clips", "3"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let eval_out = dir.path().join("eval");
    let out = bin()
        .args(["eval-lass", "--oracle-stems"])
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out-dir")
        .arg(&eval_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().last().unwrap())
            .unwrap();
    // est = ref pins per-pair SDR at the +100 dB cap.
    assert_eq!(summary["sdr"].as_f64().unwrap(), 100.0);
    let per_clip = std::fs::read_to_string(eval_out.join("per_clip.csv")).unwrap();
    for line in per_clip.lines().skip(1) {
        let sdr: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(sdr, 100.0);
    }
}

#[test]
fn report_renders_tables_from_a_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = serde_json::json!({
        "separation": {"clips": 2, "sdr": 8.764, "sdri": 8.658, "si_sdr": 7.349,
                        "mixture_sdr": 0.106},
        "er": 0.425,
        "macro_f1": 0.5097,
        "per_class": [
            {"label": "a", "f1": 0.6, "threshold": 0.4},
            {"label": "b", "f1": 0.42, "threshold": 0.55}
        ],
        "overlap": [
            {"label": "a", "percent": [50.0, 50.0, 0.0, 0.0],
             "duration_seconds": 12.0, "never_active": false}
        ],
        "threshold_fit": "eval",
        "config_hash": "abc",
        "separator_checksum": null,
        "folds": null,
        "framework": "tq_sed",
        "conv_filters": 128,
        "learnable_params": 371841,
        "deterministic": true
    });
    let metrics_path = dir.path().join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics).unwrap()).unwrap();
    let out_dir = dir.path().join("tables");
    let out = bin()
        .arg("report")
        .arg("--metrics")
        .arg(&metrics_path)
        .arg("--out-dir")
        .arg(&out_dir)
        .arg("--plots")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sed_table = std::fs::read_to_string(out_dir.join("sed_table.csv")).unwrap();
    assert!(sed_table.contains("tq_sed,128,371841,0.425,0.5097"));
    let sep_table = std::fs::read_to_string(out_dir.join("separation_table.csv")).unwrap();
    assert!(sep_table.contains("8.764"));
    assert!(out_dir.join("per_class.csv").exists());
    assert!(out_dir.join("overlap_table.csv").exists());
    assert!(out_dir.join("f1_per_class.svg").exists());
}

#[test]
fn failed_runs_leave_a_marker_in_the_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    let out = bin()
        .args(["eval-lass"])
        .arg("--data")
        .arg(dir.path().join("missing_dataset"))
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(out_dir.join("_FAILED").exists());
}
