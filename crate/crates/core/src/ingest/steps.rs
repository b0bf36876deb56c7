use std::collections::BTreeMap;

use super::episode::{ChannelData, Observation, Outcome};
use super::schema::{Timeline, VarSpec};
use crate::error::{Error, Result};

/// One channel's samples for one step. Gaps (NaN or past the end of the
/// recording) are zero-filled; `missing` counts them.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub values: Vec<f64>,
    pub missing: usize,
}

/// Cuts absolute steps `first..=last` out of a channel.
pub fn segment_channel(ch: &ChannelData, timeline: &Timeline, first: i64, last: i64) -> Result<Vec<Segment>> {
    if ch.samples.is_empty() || ch.samples.iter().all(|v| v.is_nan()) {
        return Err(Error::Data(format!("channel `{}` has no samples", ch.name)));
    }
    let n = (ch.rate_hz * timeline.step_s).round() as usize;
    let mut out = Vec::with_capacity((last - first + 1).max(0) as usize);
    for k in first..=last {
        let start = (timeline.step_start_s(k) * ch.rate_hz).round() as i64;
        let mut values = Vec::with_capacity(n);
        let mut missing = 0;
        for i in 0..n as i64 {
            let v = usize::try_from(start + i)
                .ok()
                .and_then(|j| ch.samples.get(j))
                .copied()
                .unwrap_or(f64::NAN);
            if v.is_nan() {
                missing += 1;
                values.push(0.0);
            } else {
                values.push(v);
            }
        }
        out.push(Segment { values, missing });
    }
    Ok(out)
}

fn group_by_step(
    obs: &[Observation],
    vars: &[VarSpec],
    timeline: &Timeline,
    last: i64,
    what: &str,
) -> Result<BTreeMap<i64, Vec<(usize, f64)>>> {
    let mut by_step: BTreeMap<i64, Vec<(usize, f64)>> = BTreeMap::new();
    for o in obs {
        let v = vars.iter().position(|s| s.name == o.name).ok_or_else(|| {
            let names: Vec<&str> = vars.iter().map(|s| s.name.as_str()).collect();
            Error::Data(format!("unknown {what} variable `{}`; schema has {names:?}", o.name))
        })?;
        let k = timeline.step_of(o.t_s);
        if k <= last {
            by_step.entry(k).or_default().push((v, o.value));
        }
    }
    Ok(by_step)
}

/// Replaces every `None` with the most recent `Some` (or `init` before the
/// first one).
pub fn forward_fill<T: Clone>(rows: &[Option<T>], init: &T) -> Vec<T> {
    let mut last = init.clone();
    rows.iter()
        .map(|r| {
            if let Some(v) = r {
                last = v.clone();
            }
            last.clone()
        })
        .collect()
}

/// `(min, mean, max)` per variable for steps `first..=last`, laid out as
/// `[v0_min, v0_mean, v0_max, v1_min, ...]`. A step without observations
/// repeats the previous step's triple; earlier observations (including the
/// discarded hour) seed the carry, and the schema default covers the rest.
pub fn aggregate_chart(
    obs: &[Observation],
    vars: &[VarSpec],
    timeline: &Timeline,
    first: i64,
    last: i64,
) -> Result<Vec<Vec<f64>>> {
    let by_step = group_by_step(obs, vars, timeline, last, "chart")?;
    let start = by_step.keys().next().copied().unwrap_or(first).min(first);
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(3 * vars.len()); (last - first + 1).max(0) as usize];
    for (v, spec) in vars.iter().enumerate() {
        let per_step: Vec<Option<[f64; 3]>> = (start..=last)
            .map(|k| {
                let vals: Vec<f64> = by_step
                    .get(&k)?
                    .iter()
                    .filter(|(i, _)| *i == v)
                    .map(|(_, x)| *x)
                    .collect();
                if vals.is_empty() {
                    return None;
                }
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                Some([lo, mean, hi])
            })
            .collect();
        let filled = forward_fill(&per_step, &[spec.default; 3]);
        for (row, triple) in out.iter_mut().zip(&filled[(first - start) as usize..]) {
            row.extend_from_slice(triple);
        }
    }
    Ok(out)
}

/// Per step: latest value of each lab at or before the step's end, then one
/// freshness flag per lab (1 iff measured within the step). Within a step
/// the latest timestamp wins.
pub fn build_lab_vectors(
    obs: &[Observation],
    vars: &[VarSpec],
    timeline: &Timeline,
    first: i64,
    last: i64,
) -> Result<Vec<Vec<f64>>> {
    let mut sorted: Vec<&Observation> = obs.iter().collect();
    sorted.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    let owned: Vec<Observation> = sorted.into_iter().cloned().collect();
    let by_step = group_by_step(&owned, vars, timeline, last, "lab")?;
    let n = vars.len();
    let mut values: Vec<f64> = vars.iter().map(|v| v.default).collect();
    let mut out = Vec::new();
    let start = by_step.keys().next().copied().unwrap_or(first).min(first);
    for k in start..=last {
        let mut flags = vec![0.0; n];
        if let Some(rows) = by_step.get(&k) {
            for &(v, x) in rows {
                values[v] = x;
                flags[v] = 1.0;
            }
        }
        if k >= first {
            let mut row = values.clone();
            row.extend_from_slice(&flags);
            out.push(row);
        }
    }
    Ok(out)
}

/// Binary 2 x min(t, W) matrix. Row 0 marks lab steps, row 1 intervention
/// steps; column `j` (1-based) is absolute step `max(t - W, 0) + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceMatrix {
    pub lab: Vec<bool>,
    pub intervention: Vec<bool>,
}

impl GuidanceMatrix {
    pub fn cols(&self) -> usize {
        self.lab.len()
    }

    /// Entry at row `r` and 1-based column `j`.
    pub fn get(&self, r: usize, j: usize) -> bool {
        let row = if r == 0 { &self.lab } else { &self.intervention };
        row[j - 1]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        if r == 0 {
            &self.lab
        } else {
            &self.intervention
        }
    }
}

/// `lab_steps` / `intervention_steps` are absolute 1-based steps holding at
/// least one event.
pub fn build_guidance(lab_steps: &[i64], intervention_steps: &[i64], t: usize, w: usize) -> GuidanceMatrix {
    let cols = t.min(w);
    let offset = t.saturating_sub(w) as i64;
    let mark = |steps: &[i64]| -> Vec<bool> {
        (1..=cols as i64)
            .map(|j| steps.contains(&(offset + j)))
            .collect()
    };
    GuidanceMatrix {
        lab: mark(lab_steps),
        intervention: mark(intervention_steps),
    }
}

/// 1 iff death falls in `(end, end + 24 h]`.
pub fn label_decompensation(outcome: &Outcome, end_s: f64, timeline: &Timeline) -> u8 {
    match outcome.death_s {
        Some(d) if d > end_s && d <= end_s + timeline.horizon_s() => 1,
        _ => 0,
    }
}

/// Remaining stay in days mapped to classes 1..=9: `ceil(r)` up to a week,
/// 8 for (7, 14], 9 beyond.
pub fn los_class(days: f64) -> u8 {
    if days <= 7.0 {
        days.ceil().max(1.0) as u8
    } else if days <= 14.0 {
        8
    } else {
        9
    }
}

/// `(class, remaining days)` measured from the window end.
pub fn label_los(outcome: &Outcome, end_s: f64, timeline: &Timeline) -> Result<(u8, f64)> {
    if outcome.discharge_s <= end_s {
        return Err(Error::Data(format!(
            "discharge at {} s is not after window end {end_s} s",
            outcome.discharge_s
        )));
    }
    let days = (outcome.discharge_s - end_s) / timeline.day_s();
    Ok((los_class(days), days))
}
