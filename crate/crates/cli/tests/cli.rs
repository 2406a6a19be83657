use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgtsd::io::{checkpoint_bytes, dataset_csv, load_checkpoint, load_dataset};
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "frequency": "1h",
  "granularities": [{"window": "1h", "weight": 0.8}, {"window": "4h", "weight": 0.2}],
  "train": {"epochs": 2, "batches_per_epoch": 3, "batch_size": 4, "context_length": 8,
            "prediction_length": 4, "share_ratios": [1.0, 0.8], "diffusion_steps": 10, "beta_end": 0.2},
  "model": {"hidden_size": 4, "gru_layers": 1, "denoiser_width": 8, "denoiser_blocks": 1,
            "step_embedding_dim": 4},
  "generate": {"kind": "sinusoid-mixture", "length": 120, "dims": 3},
  "forecast": {"num_samples": 5},
  "evaluate": {"num_windows": 2, "num_samples": 5},
  "select": {"windows": ["4h", 12], "num_windows": 2, "num_samples": 4}
}"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("cfg.json"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn exec(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mgtsd"))
            .current_dir(self.dir.path())
            .args(["--config", "cfg.json", "--out-dir", "out"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.exec(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path("out").join(name)).unwrap()
    }

    /// gen-data, train, forecast.
    fn pipeline(&self, seed: &str) {
        self.ok(&["--seed", seed, "gen-data"]);
        self.ok(&["--seed", seed, "train", "--data", "out/data.csv"]);
        self.ok(&["--seed", seed, "forecast", "--data", "out/data.csv", "--include-coarse"]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn train_twice_gives_identical_outputs() {
    let a = Run::new(CONFIG);
    let b = Run::new(CONFIG);
    for r in [&a, &b] {
        r.ok(&["gen-data"]);
        r.ok(&["--seed", "7", "train", "--data", "out/data.csv"]);
    }
    assert_eq!(a.read("loss.csv"), b.read("loss.csv"));
    assert_eq!(
        fs::read(a.path("out/checkpoint.mgtsd")).unwrap(),
        fs::read(b.path("out/checkpoint.mgtsd")).unwrap()
    );
}

#[test]
fn every_subcommand_is_reproducible() {
    let runs = [Run::new(CONFIG), Run::new(CONFIG)];
    for r in &runs {
        r.pipeline("3");
        r.ok(&["evaluate", "--data", "out/data.csv"]);
        r.ok(&["make-grans", "--data", "out/data.csv"]);
        r.ok(&["analyze-fft", "--data", "out/data.csv"]);
    }
    for name in ["data.csv", "loss.csv", "samples.csv", "metrics.json", "grans.csv", "spectrum.csv"] {
        assert_eq!(runs[0].read(name), runs[1].read(name), "{name}");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let a = Run::new(CONFIG);
    a.pipeline("5");
    let first = a.read("samples.csv");
    a.ok(&["--seed", "5", "--workers", "1", "forecast", "--data", "out/data.csv", "--include-coarse"]);
    assert_eq!(a.read("samples.csv"), first);
    a.ok(&["evaluate", "--data", "out/data.csv"]);
    let metrics = a.read("metrics.json");
    a.ok(&["--workers", "1", "evaluate", "--data", "out/data.csv"]);
    assert_eq!(a.read("metrics.json"), metrics);
}

#[test]
fn dataset_and_checkpoint_round_trip() {
    let r = Run::new(CONFIG);
    r.pipeline("1");
    let text = r.read("data.csv");
    let ds = load_dataset(&r.path("out/data.csv")).unwrap();
    assert_eq!((ds.len(), ds.dims()), (120, 3));
    assert_eq!(dataset_csv(&ds), text);

    let bytes = fs::read(r.path("out/checkpoint.mgtsd")).unwrap();
    let model = load_checkpoint(&r.path("out/checkpoint.mgtsd")).unwrap();
    assert_eq!(checkpoint_bytes(&model).unwrap(), bytes);
}

#[test]
fn output_layouts() {
    let r = Run::new(CONFIG);
    r.pipeline("2");
    let loss = r.read("loss.csv");
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,loss_g1,loss_g2");
    assert_eq!(lines.len(), 3);

    // 5 samples × 2 levels × 4 steps × 3 dims
    let samples = r.read("samples.csv");
    let mut it = samples.lines();
    assert_eq!(it.next(), Some("sample,granularity,t,dim,value"));
    let rows: Vec<Vec<&str>> = it.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5 * 2 * 4 * 3);
    let mut grans: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    grans.sort_unstable();
    grans.dedup();
    assert_eq!(grans, ["1", "4"]);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap().is_finite()));

    r.ok(&["make-grans", "--data", "out/data.csv", "--windows", "1,6"]);
    let grans = r.read("grans.csv");
    assert!(grans.starts_with("window,t,dim_0,dim_1,dim_2\n"));
    assert_eq!(grans.lines().count(), 1 + 2 * 120);

    r.ok(&["analyze-fft", "--data", "out/data.csv"]);
    let spec = r.read("spectrum.csv");
    assert!(spec.starts_with("bin,frequency,amplitude_w1,amplitude_w4\n"));
    assert_eq!(spec.lines().count(), 1 + 61);

    r.ok(&["evaluate", "--data", "out/data.csv"]);
    let m: serde_json::Value = serde_json::from_str(&r.read("metrics.json")).unwrap();
    assert_eq!(m["windows"].as_array().unwrap().len(), 2);
    assert_eq!(m["num_samples"], 5);
    assert!(m["crps_sum"].as_f64().unwrap() > 0.0);
}

#[test]
fn select_ratio_writes_curves() {
    let single = CONFIG
        .replace(r#"{"window": "1h", "weight": 0.8}, {"window": "4h", "weight": 0.2}"#, r#"{"window": "1h", "weight": 1.0}"#)
        .replace(r#""share_ratios": [1.0, 0.8]"#, r#""share_ratios": [1.0]"#);
    let r = Run::new(&single);
    r.pipeline("4");
    r.ok(&["select-ratio", "--data", "out/data.csv"]);
    let csv = r.read("ratio_curve.csv");
    assert!(csv.starts_with("window,step,ratio,score\n"));
    // 10 steps for each of the 4- and 12-tick targets
    assert_eq!(csv.lines().count(), 1 + 20);
    let curves: serde_json::Value = serde_json::from_str(&r.read("ratio_curve.json")).unwrap();
    assert_eq!(curves[0]["window"], 4);
    assert_eq!(curves[1]["window"], 12);
}

#[test]
fn perfect_samples_score_zero() {
    let r = Run::new("{}");
    fs::write(r.path("truth.csv"), "timestamp,dim_0,dim_1\n0,1.5,2.0\n1,3.0,-1.0\n").unwrap();
    let truth = [[1.5, 2.0], [3.0, -1.0]];
    let mut samples = String::from("sample,granularity,t,dim,value\n");
    for s in 0..3 {
        for (t, row) in truth.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                samples += &format!("{s},1,{t},{d},{v:?}\n");
            }
        }
    }
    fs::write(r.path("samples.csv"), samples).unwrap();
    r.ok(&["evaluate", "--samples-file", "samples.csv", "--truth", "truth.csv"]);
    let m: serde_json::Value = serde_json::from_str(&r.read("metrics.json")).unwrap();
    assert_eq!(m["crps_sum"], 0.0);
    assert_eq!(m["nmae_sum"], 0.0);
    assert_eq!(m["nrmse_sum"], 0.0);
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn exit_codes() {
    let r = Run::new(CONFIG);
    assert_eq!(code(&r.exec(&["no-such-command"])), 1);
    assert_eq!(code(&r.exec(&["train"])), 1);
    assert_eq!(code(&r.exec(&["--workers", "0", "gen-data"])), 1);

    write(r.dir.path(), "bad.csv", "timestamp,dim_0\n0,1.0\n1,oops\n");
    let out = r.exec(&["train", "--data", "bad.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    write(r.dir.path(), "bad.json", r#"{"train": {"context_length": 0}}"#);
    let out = Command::new(env!("CARGO_BIN_EXE_mgtsd"))
        .current_dir(r.dir.path())
        .args(["--config", "bad.json", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    r.ok(&["gen-data"]);
    let blowup = CONFIG.replace(r#""beta_end": 0.2"#, r#""beta_end": 0.2, "learning_rate": 1e300"#);
    write(r.dir.path(), "cfg.json", &blowup);
    let out = r.exec(&["train", "--data", "out/data.csv"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
