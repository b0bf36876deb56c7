use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Waveform,
    Vital,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Waveform => "waveform",
            ChannelKind::Vital => "vital",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "waveform" => Some(ChannelKind::Waveform),
            "vital" => Some(ChannelKind::Vital),
            _ => None,
        }
    }
}

/// One monitored stream. `mean`/`scale` standardize its samples before
/// embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    pub rate_hz: f64,
    pub mean: f64,
    pub scale: f64,
}

/// A charted or lab variable. `default` is imputed before the first
/// observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub default: f64,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub channels: Vec<ChannelSpec>,
    pub chart: Vec<VarSpec>,
    pub labs: Vec<VarSpec>,
    pub genders: Vec<String>,
    pub ethnicities: Vec<String>,
    pub min_age: f64,
}

fn var(name: &str, default: f64, scale: f64) -> VarSpec {
    VarSpec {
        name: name.into(),
        default,
        mean: default,
        scale,
    }
}

const VITALS: [(&str, f64, f64); 7] = [
    ("abp_sys", 120.0, 20.0),
    ("abp_dia", 65.0, 12.0),
    ("nbp_sys", 118.0, 20.0),
    ("nbp_dia", 63.0, 12.0),
    ("pulse", 85.0, 15.0),
    ("resp", 18.0, 5.0),
    ("spo2", 96.0, 3.0),
];

impl Schema {
    /// Lead-II ECG plus seven minutely vitals, six charted variables and
    /// three labs, with the waveform sampled at `ecg_hz`.
    pub fn standard(ecg_hz: f64) -> Self {
        let mut channels = vec![ChannelSpec {
            name: "ecg_ii".into(),
            kind: ChannelKind::Waveform,
            rate_hz: ecg_hz,
            mean: 0.0,
            scale: 1.0,
        }];
        for (name, mean, scale) in VITALS {
            channels.push(ChannelSpec {
                name: name.into(),
                kind: ChannelKind::Vital,
                rate_hz: 1.0 / 60.0,
                mean,
                scale,
            });
        }
        Schema {
            channels,
            chart: vec![
                var("spo2", 96.0, 3.0),
                var("dbp", 64.0, 12.0),
                var("sbp", 119.0, 20.0),
                var("mbp", 82.0, 14.0),
                var("hr", 85.0, 15.0),
                var("rr", 18.0, 5.0),
            ],
            labs: vec![
                var("glucose", 130.0, 40.0),
                var("ph", 7.38, 0.07),
                var("temperature", 37.0, 0.7),
            ],
            genders: vec!["F".into(), "M".into()],
            ethnicities: vec![
                "white".into(),
                "black".into(),
                "hispanic".into(),
                "asian".into(),
                "other".into(),
            ],
            min_age: 18.0,
        }
    }

    /// 125 Hz ECG.
    pub fn paper() -> Self {
        Schema::standard(125.0)
    }

    /// 50 Hz ECG for desk-scale runs.
    pub fn fast() -> Self {
        Schema::standard(50.0)
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    pub fn chart_dim(&self) -> usize {
        3 * self.chart.len()
    }

    pub fn lab_dim(&self) -> usize {
        2 * self.labs.len()
    }

    /// Width of `x_t = x_chart ++ x_lab`.
    pub fn x_dim(&self) -> usize {
        self.chart_dim() + self.lab_dim()
    }

    /// Standardized age plus one-hot gender and ethnicity.
    pub fn baseline_dim(&self) -> usize {
        1 + self.genders.len() + self.ethnicities.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Samples per step for channel `k`.
    pub fn samples_per_step(&self, k: usize, timeline: &Timeline) -> usize {
        (self.channels[k].rate_hz * timeline.step_s).round() as usize
    }

    pub fn validate(&self, timeline: &Timeline) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("schema has no channels".into()));
        }
        for (k, c) in self.channels.iter().enumerate() {
            if !(c.rate_hz > 0.0) || !(c.scale > 0.0) {
                return Err(Error::Config(format!("channel `{}`: rate and scale must be positive", c.name)));
            }
            if self.samples_per_step(k, timeline) == 0 {
                return Err(Error::Config(format!(
                    "channel `{}` has no samples in a {} s step",
                    c.name, timeline.step_s
                )));
            }
        }
        for v in self.chart.iter().chain(&self.labs) {
            if !(v.scale > 0.0) || !v.default.is_finite() {
                return Err(Error::Config(format!("variable `{}`: bad default or scale", v.name)));
            }
        }
        Ok(())
    }
}

/// Step geometry. Clinical rules (discard, cohort length, label horizons)
/// are stated in hours; `hour_s` says how many seconds an hour spans so a
/// compressed profile can keep every rule intact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub step_s: f64,
    pub hour_s: f64,
    /// Observation window W, in steps.
    pub window: usize,
    /// Distance between window starts, in steps.
    pub stride: usize,
}

const EPS: f64 = 1e-9;

impl Timeline {
    pub fn paper() -> Self {
        Timeline {
            step_s: 3600.0,
            hour_s: 3600.0,
            window: 12,
            stride: 12,
        }
    }

    /// One-minute steps; an "hour" lasts one minute.
    pub fn fast() -> Self {
        Timeline {
            step_s: 60.0,
            hour_s: 60.0,
            window: 12,
            stride: 12,
        }
    }

    pub fn discard_s(&self) -> f64 {
        self.hour_s
    }

    pub fn min_length_s(&self) -> f64 {
        13.0 * self.hour_s
    }

    pub fn horizon_s(&self) -> f64 {
        24.0 * self.hour_s
    }

    pub fn day_s(&self) -> f64 {
        24.0 * self.hour_s
    }

    /// Whole steps after the discard; a trailing partial step is dropped.
    pub fn n_steps(&self, length_s: f64) -> usize {
        let span = (length_s - self.discard_s()) / self.step_s;
        if span <= 0.0 {
            0
        } else {
            (span + EPS).floor() as usize
        }
    }

    /// 1-based step containing time `t`. Step `k` covers
    /// `[discard + (k-1) step, discard + k step)`; times inside the discard
    /// map to steps <= 0.
    pub fn step_of(&self, t: f64) -> i64 {
        ((t - self.discard_s()) / self.step_s + EPS).floor() as i64 + 1
    }

    pub fn step_start_s(&self, k: i64) -> f64 {
        self.discard_s() + (k - 1) as f64 * self.step_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_s > 0.0) || !(self.hour_s > 0.0) {
            return Err(Error::Config("step_s and hour_s must be positive".into()));
        }
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirteen_hours_gives_twelve_steps() {
        let tl = Timeline::paper();
        assert_eq!(tl.n_steps(13.0 * 3600.0), 12);
        assert_eq!(tl.n_steps(13.0 * 3600.0 - 1.0), 11);
        assert_eq!(Timeline::fast().n_steps(13.0 * 60.0), 12);
    }

    #[test]
    fn boundary_event_goes_to_later_step() {
        let tl = Timeline::paper();
        assert_eq!(tl.step_of(3600.0), 1);
        assert_eq!(tl.step_of(7199.0), 1);
        assert_eq!(tl.step_of(7200.0), 2);
        assert_eq!(tl.step_of(0.0), 0);
    }

    #[test]
    fn paper_segment_sizes() {
        let s = Schema::paper();
        let tl = Timeline::paper();
        assert_eq!(s.samples_per_step(0, &tl), 450_000);
        assert_eq!(s.samples_per_step(1, &tl), 60);
        assert_eq!(s.k(), 8);
    }
}
