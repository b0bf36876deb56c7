//! Standardized model inputs built from labeled windows.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ingest::{LabeledWindow, Schema};

use super::config::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedStep {
    /// One standardized segment per schema channel.
    pub segments: Vec<Tensor>,
    /// Chart triples then lab values and freshness flags.
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWindow {
    pub episode_id: String,
    pub patient_id: String,
    pub index: usize,
    pub steps: Vec<PreparedStep>,
    pub baseline: Vec<f64>,
    pub lab_steps: Vec<i64>,
    pub intervention_steps: Vec<i64>,
    pub decomp: u8,
    pub los_class: u8,
    pub los_days: f64,
}

/// Class index or regression target for `task`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl PreparedWindow {
    pub fn target(&self, task: Task) -> Target {
        match task {
            Task::Decomp => Target::Class(self.decomp as usize),
            Task::Los => Target::Class(self.los_class as usize - 1),
            Task::LosDays => Target::Value(self.los_days),
        }
    }
}

pub fn prepare_window(w: &LabeledWindow, schema: &Schema) -> Result<PreparedWindow> {
    let n_lab = schema.labs.len();
    let mut steps = Vec::with_capacity(w.steps.len());
    for (s, step) in w.steps.iter().enumerate() {
        if step.segments.len() != schema.k() || step.chart.len() != schema.chart_dim() || step.lab.len() != schema.lab_dim() {
            return Err(Error::Data(format!("{}: step {} does not match the schema", w.episode_id, s + 1)));
        }
        let segments: Vec<Tensor> = step
            .segments
            .iter()
            .zip(&schema.channels)
            .map(|(seg, spec)| Tensor::vector(seg.iter().map(|v| (v - spec.mean) / spec.scale).collect()))
            .collect();
        let mut x = Vec::with_capacity(schema.x_dim());
        for (v, spec) in schema.chart.iter().enumerate() {
            x.extend(step.chart[3 * v..3 * v + 3].iter().map(|c| (c - spec.mean) / spec.scale));
        }
        for (v, spec) in schema.labs.iter().enumerate() {
            x.push((step.lab[v] - spec.mean) / spec.scale);
        }
        x.extend_from_slice(&step.lab[n_lab..]);
        let finite = x.iter().chain(&w.baseline).all(|v| v.is_finite())
            && segments.iter().all(|t: &Tensor| t.is_finite());
        if !finite {
            return Err(Error::Data(format!("{}: non-finite input at step {}", w.episode_id, s + 1)));
        }
        steps.push(PreparedStep { segments, x });
    }
    Ok(PreparedWindow {
        episode_id: w.episode_id.clone(),
        patient_id: w.patient_id.clone(),
        index: w.index,
        steps,
        baseline: w.baseline.clone(),
        lab_steps: w.lab_steps.clone(),
        intervention_steps: w.intervention_steps.clone(),
        decomp: w.decomp,
        los_class: w.los_class,
        los_days: w.los_days,
    })
}

pub fn prepare_all(windows: &[LabeledWindow], schema: &Schema) -> Result<Vec<PreparedWindow>> {
    windows.iter().map(|w| prepare_window(w, schema)).collect()
}
