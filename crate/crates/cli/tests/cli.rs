use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use raimkit::ingest::parse_episode;

fn raimkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raimkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn raimkit")
}

fn ok(args: &[&str]) -> String {
    let out = raimkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = raimkit(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates and ingests a small cohort under `dir`.
fn dataset(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let cohort = dir.join("cohort");
    let data = dir.join("data");
    ok(&["generate", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&cohort)]);
    ok(&["ingest", "--episodes", s(&cohort), "--out", s(&data)]);
    (cohort, data)
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn generate_is_reproducible_and_guards_existing_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["generate", "--n", "10", "--seed", "4", "--out", s(&a)]);
    ok(&["generate", "--n", "10", "--seed", "4", "--out", s(&b)]);
    let episodes = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "episode"))
        .count();
    assert_eq!(episodes, 10);
    let manifest = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(manifest(&a)["content_hash"], manifest(&b)["content_hash"]);
    assert_eq!(manifest(&a)["n_episodes"], 10);
    assert!(a.join("resolved.conf").exists());

    let err = fails(&["generate", "--n", "10", "--out", s(&a)], 2);
    assert!(err.contains("--force"), "{err}");
    ok(&["generate", "--n", "3", "--seed", "5", "--out", s(&a), "--force"]);
    assert_eq!(manifest(&a)["n_episodes"], 3);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "bad.conf", "seed = 1\nmodel.widht = 8\n");
    let err = fails(&["generate", "--config", s(&bad), "--out", s(&dir.path().join("x"))], 2);
    assert!(err.contains("model.widht"), "{err}");
    let dup = config(dir.path(), "dup.conf", "seed = 1\nseed = 2\n");
    let err = fails(&["generate", "--config", s(&dup), "--out", s(&dir.path().join("x"))], 2);
    assert!(err.contains("line 2"), "{err}");
    fails(&["gradcheck", "--variant", "raim9"], 2);
}

#[test]
fn ingest_rejects_malformed_files_unless_skipping() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    ok(&["generate", "--n", "6", "--out", s(&cohort)]);
    fs::write(cohort.join("zz_broken.episode"), "[episode]\nid = broken\nlength_s = ten\n").unwrap();

    let data = dir.path().join("data");
    let err = fails(&["ingest", "--episodes", s(&cohort), "--out", s(&data)], 3);
    assert!(err.contains("zz_broken.episode"), "{err}");

    let out = ok(&["ingest", "--episodes", s(&cohort), "--out", s(&data), "--skip-bad"]);
    assert!(out.contains("1 rejected"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("ingest_report.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 7);
    assert_eq!(report["rejected"][0][0], "zz_broken.episode");
    assert!(data.join("windows.bin").exists() && data.join("windows.jsonl").exists());

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fails(&["ingest", "--episodes", s(&empty), "--out", s(&data)], 3);
}

#[test]
fn training_is_deterministic_and_zero_epochs_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(dir.path(), 12, 1);
    let run = |name: &str, epochs: &str| -> PathBuf {
        let out = dir.path().join(name);
        ok(&["train", "--data", s(&data), "--epochs", epochs, "--seed", "3", "--out", s(&out)]);
        out
    };
    let zero = run("zero", "0");
    assert!(zero.join("model.ckpt").exists() && zero.join("model.json").exists());
    let loss = fs::read_to_string(zero.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "{loss}");

    let a = run("a", "2");
    let b = run("b", "2");
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(zero.join("model.ckpt")).unwrap());
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("split.json")).unwrap()).unwrap();
    assert!(!split["test_patients"].as_array().unwrap().is_empty());
}

#[test]
fn divergence_exits_4_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(dir.path(), 8, 2);
    let conf = config(dir.path(), "hot.conf", "lr = 1e300\nepochs = 3\n");
    let out = dir.path().join("run");
    let err = fails(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&out)], 4);
    assert!(err.contains("diverged") || err.contains("non-finite"), "{err}");
    assert!(out.join("model.ckpt").exists());
    // The saved parameters are the last finite ones.
    let tensors = raimkit::checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert!(!tensors.is_empty());
    assert!(tensors.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    assert!(raimkit::model::Model::load(&out.join("model.ckpt")).is_ok());
}

#[test]
fn evaluate_reports_and_checks_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(dir.path(), 10, 10);
    let conf = config(
        dir.path(),
        "memorize.conf",
        "seed = 10\ntrain_fraction = 1\nepochs = 200\nlr = 1e-2\nbatch_size = 10\n",
    );
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("model.ckpt");

    let report_path = dir.path().join("report.json");
    ok(&["evaluate", "--data", s(&data), "--checkpoint", s(&ckpt), "--split", "train", "--out", s(&report_path)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["task"], "decomp");
    assert_eq!(report["n"], 10);
    assert_eq!(report["accuracy"], 1.0);
    assert!(report.get("auc_roc").is_some() || report["undefined"].is_array());

    fails(&["evaluate", "--data", s(&data), "--checkpoint", s(&ckpt), "--task", "los"], 5);
    fails(&["evaluate", "--data", s(&data), "--checkpoint", s(&ckpt), "--split", "some"], 2);

    let table = ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--checkpoint",
        s(&ckpt),
        "--split",
        "all",
    ]);
    assert_eq!(table.matches("| CNN-IntLabMultiChAttRNN (RAIM-3) |").count(), 2, "{table}");
}

#[test]
fn los_evaluation_writes_a_confusion_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = dataset(dir.path(), 8, 3);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--task", "los", "--variant", "raim0", "--epochs", "1", "--out", s(&run)]);
    let out = dir.path().join("los.json");
    ok(&["evaluate", "--data", s(&data), "--checkpoint", s(&run.join("model.ckpt")), "--split", "all", "--out", s(&out)]);
    let csv = fs::read_to_string(dir.path().join("los.confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.starts_with("true\\pred,1,2,3,4,5,6,7,8,9"));
}

#[test]
fn predict_exports_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, data) = dataset(dir.path(), 8, 4);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--out", s(&run)]);
    let ckpt = run.join("model.ckpt");
    let episode = cohort.join("ep000000.episode");
    let out = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&ckpt), "--episode", s(&episode), "--svg", "--out", s(&out)]);

    let jsonl = fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    let windows = jsonl.lines().count() / 12;
    assert!(windows >= 1 && jsonl.lines().count() == 12 * windows);
    for line in jsonl.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let risk = rec["risk"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&risk));
        assert!(rec["beta"].is_array() && rec["gamma_int"].is_array());
    }
    let svg = fs::read_to_string(out.join("predictions.svg")).unwrap();
    let k = 8;
    assert_eq!(svg.matches("<rect class=\"cell").count(), k * 12 * windows);

    // Cut the episode below one observation window.
    let mut ep = parse_episode(&fs::read_to_string(&episode).unwrap()).unwrap();
    ep.length_s = 300.0;
    for c in &mut ep.channels {
        c.samples.truncate((c.rate_hz * 300.0) as usize);
    }
    ep.chart.retain(|o| o.t_s < 300.0);
    ep.labs.retain(|o| o.t_s < 300.0);
    ep.interventions.retain(|o| o.t_s < 300.0);
    let short = dir.path().join("short.episode");
    fs::write(&short, ep.to_text()).unwrap();
    let err = fails(&["predict", "--checkpoint", s(&ckpt), "--episode", s(&short), "--out", s(&out)], 3);
    assert!(err.contains("shorter"), "{err}");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ckpt, bytes).unwrap();
    fails(&["predict", "--checkpoint", s(&ckpt), "--episode", s(&episode), "--out", s(&out)], 3);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.json");
    let text = ok(&["gradcheck", "--out", s(&out)]);
    assert!(text.contains("all "), "{text}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["checks"].as_array().unwrap().len() > 20);

    let err = fails(&["gradcheck", "--inject-fault", "sigmoid"], 4);
    assert!(err.contains("sigmoid"), "{err}");
    fails(&["gradcheck", "--inject-fault", "nosuchop"], 2);
}
