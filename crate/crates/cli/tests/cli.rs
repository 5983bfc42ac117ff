use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drowsy_core::patterns::PatternTensor;
use drowsy_core::ClassLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn drowsy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drowsy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = drowsy(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Three subjects per class, 20 s each, and a three-block model.
const SMALL: &str = r#"{
  "cohort": {"n_per_class": 3, "drowsy": {"duration_s": 20}, "wakeful": {"duration_s": 20}},
  "tcn": {"num_blocks": 3, "dilation_schedule": [1, 2, 4], "channels_per_block": 4},
  "train": {"epochs": 3, "batch_size": 8},
  "bands": {"search": {"episodes": 3, "max_bands": 2,
            "reward": {"probe_epochs": 1, "train_windows": 16, "eval_windows": 16, "probe_channels": 4}}}
}"#;

struct Fixture {
    tmp: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("small.json"), SMALL).unwrap();
        let f = Self { tmp };
        ok(&["synth", "--config", s(&f.config()), "--seed", "4", "--out", s(&f.path("data"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.json")
    }
}

#[test]
fn synth_writes_one_file_per_subject() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["synth", "--n-per-class", "1", "--duration-s", "10", "--out", s(&out)]);
    let manifest = read_json(out.join("manifest.json"));
    let subjects = manifest["subjects"].as_array().unwrap();
    let listed = fs::read_dir(out.join("signals")).unwrap().count();
    assert_eq!(subjects.len(), 2);
    assert_eq!(listed, subjects.len());
    for sub in subjects {
        let text = fs::read_to_string(out.join(sub["file"].as_str().unwrap())).unwrap();
        assert_eq!(text.lines().count(), 1 + 10_000);
    }
    assert!(out.join("run_config.json").is_file());
}

#[test]
fn train_eval_round_trip() {
    let f = Fixture::new();
    let run = f.path("run");
    ok(&["train", s(&f.path("data")), "--config", s(&f.config()), "--out", s(&run)]);

    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,val_acc"));
    assert_eq!(lines.count(), 3);
    for name in ["model.json", "model.bin", "split.json", "run_config.json"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
    assert_eq!(read_json(run.join("bands.json")).as_array().unwrap().len(), 22);
    let cfg = read_json(run.join("run_config.json"));
    assert_eq!(cfg["tcn"]["in_channels"], 22);
    assert_eq!(cfg["cohort"]["n_per_class"], 3);
    assert_eq!(cfg["train"]["epochs"], 3);

    let out = ok(&["eval", s(&run), s(&f.path("data"))]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("98.71") && table.contains("99.03"));
    assert!(table.contains("paper-reported, private dataset"));

    let r = read_json(run.join("eval_report.json"));
    let cm: Vec<Vec<u64>> = serde_json::from_value(r["confusion_matrix"].clone()).unwrap();
    let n_test = r["n_test"].as_u64().unwrap();
    assert_eq!(cm.iter().flatten().sum::<u64>(), n_test);
    let split = read_json(run.join("split.json"));
    assert_eq!(split["n_test"].as_u64().unwrap(), n_test);
    // Overall accuracy as the support-weighted mean of the per-class ones.
    let acc = &r["per_class_accuracy"];
    let support = [cm[0][0] + cm[0][1], cm[1][0] + cm[1][1]];
    let weighted = (acc["Drowsy"].as_f64().unwrap() * support[0] as f64
        + acc["Wakeful"].as_f64().unwrap() * support[1] as f64)
        / n_test as f64;
    assert!((weighted - r["overall_accuracy"].as_f64().unwrap()).abs() < 1e-12);

    // Clipping the test signals leaves fewer windows.
    let clipped = f.path("clipped");
    ok(&["eval", s(&run), s(&f.path("data")), "--clip-seconds", "10", "--out", s(&clipped)]);
    let rc = read_json(clipped.join("eval_report.json"));
    assert!(rc["n_test"].as_u64().unwrap() < n_test);
    assert_eq!(rc["clip_seconds"], 10.0);

    // Same resolved config, fresh directory: identical checkpoint bytes.
    let again = f.path("again");
    ok(&["train", s(&f.path("data")), "--config", s(&run.join("run_config.json")), "--out", s(&again)]);
    assert_eq!(fs::read(run.join("model.bin")).unwrap(), fs::read(again.join("model.bin")).unwrap());
    assert_eq!(fs::read(run.join("model.json")).unwrap(), fs::read(again.join("model.json")).unwrap());

    // A config that disagrees with the checkpoint.
    let wide = f.path("wide.json");
    fs::write(&wide, SMALL.replace("\"channels_per_block\": 4", "\"channels_per_block\": 6")).unwrap();
    let out = drowsy(&["eval", s(&run), s(&f.path("data")), "--config", s(&wide)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_with_band_search_records_legal_bands() {
    let f = Fixture::new();
    let run = f.path("run");
    ok(&["train", s(&f.path("data")), "--config", s(&f.config()), "--bands", "search", "--out", s(&run)]);
    let bands = read_json(run.join("bands.json"));
    let bands = bands.as_array().unwrap();
    assert!(!bands.is_empty() && bands.len() <= 2);
    for b in bands {
        let ch = b["channel"].as_u64().unwrap();
        assert!(ch < 22);
        let idx = b["index"].as_u64().unwrap();
        assert!((1..=11).contains(&idx));
        let layer = if ch < 11 { "LowPassSweep" } else { "HighPassSweep" };
        assert_eq!(b["layer"], layer);
        assert_eq!(idx, ch % 11 + 1);
    }
    let log = fs::read_to_string(run.join("band_search.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run.join("q_table.json").is_file());
    assert_eq!(read_json(run.join("run_config.json"))["tcn"]["in_channels"], bands.len());
}

#[test]
fn bands_subcommand_writes_log_and_cutoffs() {
    let f = Fixture::new();
    let out = f.path("bands");
    ok(&["bands", s(&f.path("data")), "--config", s(&f.config()), "--episodes", "4", "--out", s(&out)]);
    let log = fs::read_to_string(out.join("band_search.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for key in ["episode", "epsilon", "bands", "reward", "wall_ms"] {
            assert!(rec.get(key).is_some(), "{key} missing");
        }
    }
    let lp = [0.0, 1.4, 2.9, 2.5, 3.8, 3.9, 4.0, 4.5, 5.0, 5.3, 6.9];
    let hp = [0.5, 1.2, 2.6, 2.7, 3.3, 3.5, 4.0, 4.4, 5.0, 5.7, 6.4];
    let best = read_json(out.join("best_bands.json"));
    assert_eq!(best.as_array().unwrap().len(), 2);
    for b in best.as_array().unwrap() {
        let i = b["index"].as_u64().unwrap() as usize - 1;
        match b["layer"].as_str().unwrap() {
            "LowPassSweep" => {
                assert_eq!(b["hp_hz"], 0.5);
                // a zero low-pass cutoff in the table means no low-pass stage
                assert_eq!(b["lp_hz"].as_f64(), Some(lp[i]).filter(|&v| v > 0.0));
            }
            "HighPassSweep" => {
                assert_eq!(b["hp_hz"].as_f64().unwrap(), hp[i]);
                assert_eq!(b["lp_hz"], 7.0);
            }
            other => panic!("unknown layer {other}"),
        }
    }
}

/// 22 channels of noise except `informative`, which steps to +1 (Drowsy) or
/// -1 (Wakeful) halfway through each window. Ten subjects per class.
fn rigged(informative: usize, seed: u64) -> PatternTensor {
    let (per_class, windows, c, l) = (10u32, 8, 22, 64);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut data, mut labels, mut subjects) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..2 * per_class {
        let label = if s < per_class { ClassLabel::Drowsy } else { ClassLabel::Wakeful };
        let sign = if s < per_class { 1.0 } else { -1.0 };
        for _ in 0..windows {
            for ch in 0..c {
                for t in 0..l {
                    let noise: f32 = r.gen_range(-1.0..1.0);
                    data.push(if ch == informative && t >= l / 2 { sign + 0.3 * noise } else { noise });
                }
            }
            labels.push(label);
            subjects.push(s);
        }
    }
    PatternTensor::new(data, c, l, labels, subjects, 0.64, 100.0).unwrap()
}

#[test]
fn bands_finds_the_informative_band_on_rigged_patterns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut found = 0;
    for seed in 0..5u64 {
        let informative = (seed as usize * 7 + 3) % 22;
        let input = tmp.path().join(format!("rigged{seed}"));
        rigged(informative, 50 + seed).save(&input).unwrap();
        let out = tmp.path().join(format!("bands{seed}"));
        let seed_arg = seed.to_string();
        ok(&["bands", s(&input), "--seed", &seed_arg, "--episodes", "60", "--max-bands", "3", "--out", s(&out)]);
        let best = read_json(out.join("best_bands.json"));
        if best.as_array().unwrap().iter().any(|b| b["channel"] == informative) {
            found += 1;
        }
    }
    assert!(found >= 4, "informative band chosen in {found} of 5 runs");
}

#[test]
fn single_class_dataset_exits_3() {
    let f = Fixture::new();
    let data = f.path("data");
    let mut manifest = read_json(data.join("manifest.json"));
    manifest["subjects"]
        .as_array_mut()
        .unwrap()
        .retain(|s| s["label"] == "Wakeful");
    fs::write(data.join("manifest.json"), manifest.to_string()).unwrap();
    let out = drowsy(&["train", s(&data), "--config", s(&f.config()), "--out", s(&f.path("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn io_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = drowsy(&["synth", "--n-per-class", "1", "--duration-s", "1", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = drowsy(&["train", s(&tmp.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(2));
}
