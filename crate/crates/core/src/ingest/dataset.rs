//! Windowed datasets: `windows.bin` holds the tensors (checkpoint container
//! format), `windows.jsonl` a header line followed by one label line per
//! window.
//!
//! Tensor names per window `i`: `w{i}.seg.{channel}` `[W x samples]`,
//! `w{i}.chart` `[W x 3 n_chart]`, `w{i}.lab` `[W x 2 n_labs]`,
//! `w{i}.events` `[2 x W]` (lab row, intervention row), `w{i}.baseline`,
//! `w{i}.missing` `[W x K]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{Schema, Timeline};
use super::window::{LabeledWindow, StepInput};
use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::error::{Error, Result};

pub const FORMAT: &str = "raimkit-windows";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub schema: Schema,
    pub timeline: Timeline,
    pub windows: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowMeta {
    pub index: usize,
    pub episode_id: String,
    pub patient_id: String,
    pub window: usize,
    pub end_s: f64,
    pub decomp: u8,
    pub los_class: u8,
    pub los_days: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    pub timeline: Timeline,
    pub windows: Vec<LabeledWindow>,
}

fn matrix(rows: &[&[f64]]) -> Tensor {
    let cols = rows[0].len();
    Tensor::new(vec![rows.len(), cols], rows.concat()).expect("rows have equal length")
}

pub fn encode_dataset(ds: &Dataset) -> Result<(Vec<u8>, String)> {
    let w = ds.timeline.window;
    let mut named = Vec::new();
    let header = Header {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        schema: ds.schema.clone(),
        timeline: ds.timeline,
        windows: ds.windows.len(),
    };
    let mut jsonl = serde_json::to_string(&header)?;
    jsonl.push('\n');
    for (i, win) in ds.windows.iter().enumerate() {
        if win.steps.len() != w {
            return Err(Error::Data(format!("window {i} has {} steps, expected {w}", win.steps.len())));
        }
        for (k, ch) in ds.schema.channels.iter().enumerate() {
            let rows: Vec<&[f64]> = win.steps.iter().map(|s| s.segments[k].as_slice()).collect();
            named.push((format!("w{i}.seg.{}", ch.name), matrix(&rows)));
        }
        let take = |f: &dyn Fn(&StepInput) -> &[f64]| -> Tensor {
            let rows: Vec<&[f64]> = win.steps.iter().map(f).collect();
            matrix(&rows)
        };
        named.push((format!("w{i}.chart"), take(&|s| &s.chart)));
        named.push((format!("w{i}.lab"), take(&|s| &s.lab)));
        let mut events = vec![0.0; 2 * w];
        for &j in &win.lab_steps {
            events[j as usize - 1] = 1.0;
        }
        for &j in &win.intervention_steps {
            events[w + j as usize - 1] = 1.0;
        }
        named.push((format!("w{i}.events"), Tensor::new(vec![2, w], events)?));
        named.push((format!("w{i}.baseline"), Tensor::vector(win.baseline.clone())));
        named.push((format!("w{i}.missing"), take(&|s| &s.missing)));
        let meta = WindowMeta {
            index: i,
            episode_id: win.episode_id.clone(),
            patient_id: win.patient_id.clone(),
            window: win.index,
            end_s: win.end_s,
            decomp: win.decomp,
            los_class: win.los_class,
            los_days: win.los_days,
        };
        jsonl.push_str(&serde_json::to_string(&meta)?);
        jsonl.push('\n');
    }
    Ok((checkpoint::encode(&named), jsonl))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

fn bool_row(t: &Tensor, r: usize, name: &str) -> Result<Vec<i64>> {
    let mut out = Vec::new();
    for (j, &v) in t.row(r).iter().enumerate() {
        if v == 1.0 {
            out.push(j as i64 + 1);
        } else if v != 0.0 {
            return Err(corrupt(format!("`{name}` holds {v}; events must be 0 or 1")));
        }
    }
    Ok(out)
}

/// Rebuilds a dataset from its two files' contents, checking every shape
/// against the header's schema.
pub fn decode_dataset(bin: &[u8], jsonl: &str) -> Result<Dataset> {
    let mut lines = jsonl.lines().filter(|l| !l.trim().is_empty());
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| corrupt("empty sidecar"))?)
        .map_err(|e| corrupt(format!("sidecar header: {e}")))?;
    if header.format != FORMAT {
        return Err(corrupt(format!("sidecar format `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let (schema, timeline) = (header.schema, header.timeline);
    timeline.validate().map_err(|e| corrupt(e.to_string()))?;
    schema.validate(&timeline).map_err(|e| corrupt(e.to_string()))?;
    let metas = lines
        .map(|l| serde_json::from_str::<WindowMeta>(l).map_err(|e| corrupt(format!("sidecar line: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if metas.len() != header.windows {
        return Err(corrupt(format!("header announces {} windows, sidecar has {}", header.windows, metas.len())));
    }

    let mut tensors: HashMap<String, Tensor> = checkpoint::decode(bin)?.into_iter().collect();
    let per_window = schema.k() + 5;
    if tensors.len() != per_window * metas.len() {
        return Err(corrupt(format!(
            "{} tensors for {} windows (expected {})",
            tensors.len(),
            metas.len(),
            per_window * metas.len()
        )));
    }
    let w = timeline.window;
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = tensors.remove(&name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(corrupt(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };

    let mut windows = Vec::with_capacity(metas.len());
    for (i, m) in metas.into_iter().enumerate() {
        if m.index != i {
            return Err(corrupt(format!("sidecar line {} has index {}", i + 2, m.index)));
        }
        if m.decomp > 1 || !(1..=9).contains(&m.los_class) {
            return Err(corrupt(format!("window {i}: labels out of range")));
        }
        let segs = schema
            .channels
            .iter()
            .enumerate()
            .map(|(k, c)| take(format!("w{i}.seg.{}", c.name), &[w, schema.samples_per_step(k, &timeline)]))
            .collect::<Result<Vec<_>>>()?;
        let chart = take(format!("w{i}.chart"), &[w, schema.chart_dim()])?;
        let lab = take(format!("w{i}.lab"), &[w, schema.lab_dim()])?;
        let events = take(format!("w{i}.events"), &[2, w])?;
        let baseline = take(format!("w{i}.baseline"), &[schema.baseline_dim()])?;
        let missing = take(format!("w{i}.missing"), &[w, schema.k()])?;
        let steps = (0..w)
            .map(|s| StepInput {
                segments: segs.iter().map(|t| t.row(s).to_vec()).collect(),
                chart: chart.row(s).to_vec(),
                lab: lab.row(s).to_vec(),
                missing: missing.row(s).to_vec(),
            })
            .collect();
        windows.push(LabeledWindow {
            episode_id: m.episode_id,
            patient_id: m.patient_id,
            index: m.window,
            end_s: m.end_s,
            steps,
            lab_steps: bool_row(&events, 0, "events")?,
            intervention_steps: bool_row(&events, 1, "events")?,
            baseline: baseline.into_data(),
            decomp: m.decomp,
            los_class: m.los_class,
            los_days: m.los_days,
        });
    }
    Ok(Dataset {
        schema,
        timeline,
        windows,
    })
}

pub const BIN_NAME: &str = "windows.bin";
pub const JSONL_NAME: &str = "windows.jsonl";

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bin, jsonl) = encode_dataset(ds)?;
    let b = dir.join(BIN_NAME);
    fs::write(&b, bin).map_err(|e| Error::io(&b, e))?;
    let j = dir.join(JSONL_NAME);
    fs::write(&j, jsonl).map_err(|e| Error::io(&j, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let b = dir.join(BIN_NAME);
    let j = dir.join(JSONL_NAME);
    let bin = fs::read(&b).map_err(|e| Error::io(&b, e))?;
    let jsonl = fs::read_to_string(&j).map_err(|e| Error::io(&j, e))?;
    decode_dataset(&bin, &jsonl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset() -> Dataset {
        let schema = Schema::standard(0.5);
        let timeline = Timeline::fast();
        let w = timeline.window;
        let step = |t: usize| StepInput {
            segments: (0..schema.k())
                .map(|k| vec![t as f64 + k as f64; schema.samples_per_step(k, &timeline)])
                .collect(),
            chart: vec![1.5; schema.chart_dim()],
            lab: vec![-2.0; schema.lab_dim()],
            missing: vec![0.0; schema.k()],
        };
        let windows = (0..3)
            .map(|i| LabeledWindow {
                episode_id: format!("e{i}"),
                patient_id: format!("p{}", i / 2),
                index: 0,
                end_s: 780.0,
                steps: (0..w).map(step).collect(),
                lab_steps: vec![3],
                intervention_steps: vec![1, 12],
                baseline: vec![0.25; schema.baseline_dim()],
                decomp: (i % 2) as u8,
                los_class: 9,
                los_days: 20.0,
            })
            .collect();
        Dataset {
            schema,
            timeline,
            windows,
        }
    }

    #[test]
    fn round_trip() {
        let ds = dataset();
        let (bin, jsonl) = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bin, &jsonl).unwrap();
        assert_eq!(back.windows, ds.windows);
        assert_eq!(back.schema, ds.schema);
    }

    #[test]
    fn mismatched_sidecar_is_corrupt() {
        let ds = dataset();
        let (bin, jsonl) = encode_dataset(&ds).unwrap();
        let short: String = jsonl.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(decode_dataset(&bin, &short), Err(Error::Corrupt(_))));
        assert!(matches!(decode_dataset(&bin[..bin.len() - 3], &jsonl), Err(Error::Corrupt(_))));
        assert!(decode_dataset(&bin, "").is_err());
    }
}
