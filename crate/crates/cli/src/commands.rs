use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use raimkit::autodiff::OpKind;
use raimkit::config::{parse_pairs, RunConfig};
use raimkit::export::{render_svg, step_records, to_jsonl};
use raimkit::gradcheck::run_suite;
use raimkit::ingest::{
    parse_episode, read_dataset, split_by_patient, window_episode, write_dataset, Dataset, Exclusion, IngestReport,
};
use raimkit::metrics::EvalReport;
use raimkit::model::{prepare_all, train as fit, EpochLog, Model, PreparedWindow, Task};
use raimkit::synthgen::{generate_cohort, read_manifest};
use raimkit::Error;

use crate::Common;

/// A failure with its own exit code, outside the library's error kinds.
#[derive(Debug)]
struct Failed(u8, String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Failed {}

/// The error and its causes on one line.
fn describe(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cause = e.source();
    while let Some(c) = cause {
        let _ = write!(s, ": {c}");
        cause = c.source();
    }
    s
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return err.exit_code() as u8;
        }
        if let Some(Failed(code, _)) = cause.downcast_ref::<Failed>() {
            return *code;
        }
    }
    1
}

pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RAIMKIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("RAIMKIT_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    Ok(())
}

/// Defaults, then the config file, then flags. Returns the config and
/// whether a task was given explicitly.
fn resolve(common: &Common, extra: &[(&str, String)]) -> Result<(RunConfig, bool)> {
    let mut cfg = RunConfig::default();
    let mut explicit_task = false;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_pairs(&text)? {
            explicit_task |= k == "task";
            cfg.set(&k, &v)?;
        }
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &common.variant {
        flags.push(("variant", v.clone()));
    }
    if let Some(t) = &common.task {
        flags.push(("task", t.clone()));
        explicit_task = true;
    }
    if let Some(s) = common.seed {
        flags.push(("seed", s.to_string()));
    }
    if let Some(e) = common.epochs {
        flags.push(("epochs", e.to_string()));
    }
    flags.extend(extra.iter().cloned());
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok((cfg, explicit_task))
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub const RESOLVED_NAME: &str = "resolved.conf";

pub fn generate(common: &Common, n: Option<usize>, force: bool) -> Result<()> {
    let extra: Vec<(&str, String)> = n.map(|n| ("gen.n_episodes", n.to_string())).into_iter().collect();
    let (cfg, _) = resolve(common, &extra)?;
    let dir = out_dir(common, "cohort");
    let manifest = generate_cohort(&cfg.generator(), &dir, force)?;
    write(&dir.join(RESOLVED_NAME), cfg.resolved())?;
    println!(
        "{} episodes in {}: {} deaths, decompensation rate {:.3}, {:.2} interventions and {:.2} labs per episode, \
         mean length {:.2} h",
        manifest.n_episodes,
        dir.display(),
        manifest.deaths,
        manifest.positive_rate,
        manifest.mean_interventions,
        manifest.mean_labs,
        manifest.mean_length_h
    );
    println!("content hash {}", manifest.content_hash);
    Ok(())
}

pub fn ingest(common: &Common, episodes: &Path, skip_bad: bool) -> Result<()> {
    let (mut cfg, _) = resolve(common, &[])?;
    // A generated cohort carries its own sampling rate and timeline.
    if let Ok(m) = read_manifest(episodes) {
        cfg.ecg_hz = m.config.ecg_hz;
        cfg.timeline = if m.config.timeline == raimkit::ingest::Timeline::paper() {
            raimkit::config::TimelinePreset::Paper
        } else {
            raimkit::config::TimelinePreset::Fast
        };
    }
    let (schema, timeline) = (cfg.schema(), cfg.timeline());
    let mut files: Vec<PathBuf> = fs::read_dir(episodes)
        .map_err(|e| Error::Io {
            path: episodes.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "episode"))
        .collect();
    files.sort();
    let mut report = IngestReport::default();
    let mut windows = Vec::new();
    for path in &files {
        report.episodes += 1;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let result = fs::read_to_string(path)
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })
            .and_then(|text| parse_episode(&text))
            .and_then(|ep| window_episode(&ep, &schema, &timeline));
        match result {
            Ok(Ok(w)) => {
                report.record(&w);
                windows.extend(w);
            }
            Ok(Err(Exclusion::Minor)) => report.minors += 1,
            Ok(Err(Exclusion::TooShort)) => report.too_short += 1,
            Err(e) if skip_bad => {
                warn!("skipping {name}: {e}");
                report.rejected.push((name, describe(&e)));
            }
            Err(e) => return Err(Error::Data(format!("{name}: {}", describe(&e))).into()),
        }
    }
    if windows.is_empty() {
        return Err(Error::Data(format!("no eligible episodes in {}", episodes.display())).into());
    }
    let dir = out_dir(common, "dataset");
    write_dataset(
        &dir,
        &Dataset {
            schema,
            timeline,
            windows,
        },
    )?;
    write(&dir.join("ingest_report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&dir.join(RESOLVED_NAME), cfg.resolved())?;
    println!(
        "{} episodes: {} windows, positive rate {:.3}, {} minors, {} too short, {} rejected",
        report.episodes,
        report.windows,
        report.positive_rate(),
        report.minors,
        report.too_short,
        report.rejected.len()
    );
    println!("LOS classes 1-9: {:?}", report.los_histogram);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Split {
    seed: u64,
    train_fraction: f64,
    test_patients: Vec<String>,
}

pub const MODEL_NAME: &str = "model.ckpt";
const SPLIT_NAME: &str = "split.json";

fn loss_csv(initial: Option<f64>, logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    if let Some(l) = initial {
        let _ = writeln!(s, "0,{l},");
    }
    for e in logs {
        let val = e.val_loss.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{val}", e.epoch, e.train_loss);
    }
    s
}

pub fn train(common: &Common, data: &Path) -> Result<()> {
    let (cfg, _) = resolve(common, &[])?;
    let ds = read_dataset(data)?;
    let prepared = prepare_all(&ds.windows, &ds.schema)?;
    let (train_set, test_set) =
        split_by_patient(prepared, |w| w.patient_id.as_str(), cfg.train_fraction, cfg.seed);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()).into());
    }
    let (train_set, val_set) = if cfg.patience.is_some() {
        split_by_patient(train_set, |w| w.patient_id.as_str(), cfg.train_fraction, cfg.seed.wrapping_add(1))
    } else {
        (train_set, Vec::new())
    };
    let dir = out_dir(common, "run");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join(RESOLVED_NAME), cfg.resolved())?;
    let test_patients: BTreeSet<String> = test_set.iter().map(|w| w.patient_id.clone()).collect();
    let split = Split {
        seed: cfg.seed,
        train_fraction: cfg.train_fraction,
        test_patients: test_patients.into_iter().collect(),
    };
    write(&dir.join(SPLIT_NAME), serde_json::to_string_pretty(&split)?)?;

    let mc = cfg.model_config(&ds.schema, &ds.timeline);
    let mut model = Model::new(mc, &ds.schema, &ds.timeline, cfg.seed)?;
    let ckpt = dir.join(MODEL_NAME);
    let tc = cfg.train_config();
    info!(
        "training {} on {} windows ({} validation, {} held out) for {} epochs",
        cfg.variant.as_str(),
        train_set.len(),
        val_set.len(),
        test_set.len(),
        tc.epochs
    );
    let mut logs = Vec::new();
    let initial = if tc.initial_loss {
        Some(model.mean_loss(&train_set)?)
    } else {
        None
    };
    let tc = raimkit::model::TrainConfig {
        initial_loss: false,
        ..tc
    };
    let result = fit(&mut model, &train_set, &val_set, &tc, |log| {
        info!(
            "epoch {}: train loss {:.5}{}",
            log.epoch,
            log.train_loss,
            log.val_loss.map_or(String::new(), |v| format!(", validation {v:.5}"))
        );
        logs.push(log.clone());
    });
    // On divergence the model holds its last good parameters.
    model.save(&ckpt)?;
    write(&dir.join("loss.csv"), loss_csv(initial, &logs))?;
    let report = result?;
    write(&dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn load_split(ckpt: &Path) -> Option<Split> {
    let text = fs::read_to_string(ckpt.parent()?.join(SPLIT_NAME)).ok()?;
    serde_json::from_str(&text).ok()
}

fn select(windows: &[PreparedWindow], ckpt: &Path, which: &str) -> Result<Vec<PreparedWindow>> {
    let pick = |keep: &dyn Fn(&PreparedWindow) -> bool| -> Vec<PreparedWindow> {
        windows.iter().filter(|w| keep(w)).cloned().collect::<Vec<_>>()
    };
    match which {
        "all" => Ok(windows.to_vec()),
        "test" | "train" => {
            let Some(split) = load_split(ckpt) else {
                warn!("no split recorded next to {}; scoring every window", ckpt.display());
                return Ok(windows.to_vec());
            };
            let test: BTreeSet<&str> = split.test_patients.iter().map(String::as_str).collect();
            let want_test = which == "test";
            Ok(pick(&|w| test.contains(w.patient_id.as_str()) == want_test))
        }
        other => Err(Error::Config(format!("`--split` must be test, train or all, got `{other}`")).into()),
    }
}

#[derive(Serialize)]
struct Row {
    checkpoint: String,
    variant: String,
    title: String,
    report: EvalReport,
}

pub fn evaluate(common: &Common, data: &Path, checkpoints: &[PathBuf], which: &str) -> Result<()> {
    let (cfg, explicit_task) = resolve(common, &[])?;
    let ds = read_dataset(data)?;
    let prepared = prepare_all(&ds.windows, &ds.schema)?;
    let mut rows = Vec::new();
    for ckpt in checkpoints {
        let model = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let mc = model.config().clone();
        if explicit_task && mc.task != cfg.task {
            return Err(Error::Compat(format!(
                "{} has a {} head but the task is {}",
                ckpt.display(),
                mc.task.as_str(),
                cfg.task.as_str()
            ))
            .into());
        }
        if model.schema() != &ds.schema {
            return Err(Error::Compat(format!("{} was trained on a different schema", ckpt.display())).into());
        }
        let windows = select(&prepared, ckpt, which)?;
        if windows.is_empty() {
            return Err(Error::Data(format!("no `{which}` windows for {}", ckpt.display())).into());
        }
        let preds = model.predict(&windows, false)?;
        let report = EvalReport::from_predictions(mc.task, &preds, &windows)?;
        rows.push(Row {
            checkpoint: ckpt.display().to_string(),
            variant: mc.variant.as_str().into(),
            title: mc.variant.title().into(),
            report,
        });
    }
    let json = if rows.len() == 1 {
        serde_json::to_string_pretty(&rows[0].report)?
    } else {
        serde_json::to_string_pretty(&serde_json::json!({ "rows": rows }))?
    };
    if let Some(out) = &common.out {
        write(out, &json)?;
        if let Some(cm) = rows.iter().find_map(|r| r.report.confusion.as_ref()).filter(|_| rows.len() == 1) {
            write(&out.with_extension("confusion.csv"), cm.to_csv())?;
        }
    }
    println!("{}", table(&rows));
    if common.out.is_none() {
        println!("{json}");
    }
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn table(rows: &[Row]) -> String {
    let mut s = String::from("| model | n | AUC-ROC | AUC-PR | accuracy | kappa |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.title,
            r.report.n,
            cell(r.report.auc_roc),
            cell(r.report.auc_pr),
            cell(r.report.accuracy),
            cell(r.report.kappa.map(|k| k.value))
        );
    }
    s
}

pub fn predict(common: &Common, ckpt: &Path, episode: &Path, svg: bool) -> Result<()> {
    resolve(common, &[])?;
    let model = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let text = fs::read_to_string(episode).map_err(|e| Error::Io {
        path: episode.to_path_buf(),
        source: e,
    })?;
    let ep = parse_episode(&text)?;
    let windows = match window_episode(&ep, model.schema(), model.timeline())? {
        Ok(w) => w,
        Err(Exclusion::TooShort) => {
            return Err(Error::Data(format!("{}: shorter than one observation window", ep.id)).into())
        }
        Err(Exclusion::Minor) => return Err(Error::Data(format!("{}: patient is under the age cut-off", ep.id)).into()),
    };
    let prepared = prepare_all(&windows, model.schema())?;
    let preds = model.predict(&prepared, true)?;
    let task: Task = model.config().task;
    let mut records = Vec::new();
    for (w, p) in prepared.iter().zip(&preds) {
        records.extend(step_records(task, w, p));
    }
    let dir = out_dir(common, "predictions");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join("predictions.jsonl"), to_jsonl(&records)?)?;
    if svg {
        let names: Vec<String> = model.schema().channels.iter().map(|c| c.name.clone()).collect();
        let pairs: Vec<_> = prepared.iter().zip(&preds).collect();
        write(&dir.join("predictions.svg"), render_svg(&names, &pairs))?;
    }
    println!("{} windows, {} steps written to {}", prepared.len(), records.len(), dir.display());
    Ok(())
}

pub fn gradcheck(common: &Common, fault: Option<&str>) -> Result<()> {
    resolve(common, &[])?;
    let fault = match fault {
        None => None,
        Some(name) => Some(
            OpKind::parse(name).ok_or_else(|| Error::Config(format!("unknown op `{name}` for --inject-fault")))?,
        ),
    };
    let report = run_suite(fault)?;
    for c in &report.checks {
        println!("{:<40} {:>10.3e} {}", c.name, c.max_error, if c.passed { "ok" } else { "FAIL" });
    }
    if let Some(out) = &common.out {
        write(out, serde_json::to_string_pretty(&report)?)?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks within {:.0e}", report.checks.len(), report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        Err(Failed(4, format!("gradient check failed for {}", names.join(", "))).into())
    }
}
