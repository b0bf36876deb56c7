//! Raw episodes and their on-disk text form.
//!
//! ```text
//! [episode]
//! id = ep000001
//! length_s = 900
//!
//! [baseline]
//! patient_id = p000001
//! age = 63.5
//! gender = F
//! ethnicity = white
//!
//! [outcome]
//! death_s = none
//! discharge_s = 172800
//!
//! [channel ecg_ii]
//! kind = waveform
//! rate_hz = 50
//! samples = 0.01 0.12 nan ...
//!
//! [chart]
//! t_s,name,value
//! 75,hr,88
//!
//! [labs]
//! t_s,name,value
//!
//! [interventions]
//! t_s,kind
//! 400,iv_start
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. `nan` samples mark
//! missing data.

use std::fmt::Write as _;

use super::schema::ChannelKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub patient_id: String,
    pub age: f64,
    pub gender: String,
    pub ethnicity: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub death_s: Option<f64>,
    pub discharge_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelData {
    pub name: String,
    pub kind: ChannelKind,
    pub rate_hz: f64,
    /// Sample `i` is taken at `i / rate_hz` seconds. NaN marks a gap.
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub t_s: f64,
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub t_s: f64,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEpisode {
    pub id: String,
    pub length_s: f64,
    pub baseline: Baseline,
    pub outcome: Outcome,
    pub channels: Vec<ChannelData>,
    pub chart: Vec<Observation>,
    pub labs: Vec<Observation>,
    pub interventions: Vec<Intervention>,
}

fn err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {msg}"))
}

fn num(line: usize, what: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| err(line, format!("{what}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(err(line, format!("{what} must be finite")));
    }
    Ok(v)
}

fn sample(line: usize, s: &str) -> Result<f64> {
    if s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    num(line, "sample", s)
}

enum Section {
    None,
    Episode,
    Baseline,
    Outcome,
    Channel(usize),
    Table(Table),
}

#[derive(Clone, Copy, PartialEq)]
enum Table {
    Chart,
    Labs,
    Interventions,
}

#[derive(Default)]
struct Partial {
    id: Option<String>,
    length_s: Option<f64>,
    patient_id: Option<String>,
    age: Option<f64>,
    gender: Option<String>,
    ethnicity: Option<String>,
    death_s: Option<Option<f64>>,
    discharge_s: Option<f64>,
    channels: Vec<(String, Option<ChannelKind>, Option<f64>, Option<Vec<f64>>)>,
    chart: Vec<Observation>,
    labs: Vec<Observation>,
    interventions: Vec<Intervention>,
    header_seen: [bool; 3],
}

fn set<T>(slot: &mut Option<T>, v: T, line: usize, key: &str) -> Result<()> {
    if slot.is_some() {
        return Err(err(line, format!("duplicate key `{key}`")));
    }
    *slot = Some(v);
    Ok(())
}

fn need<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Data(format!("missing `{what}`")))
}

/// Parses an episode file. Only syntax and self-consistency are checked
/// here; schema conformance is checked when windowing.
pub fn parse_episode(text: &str) -> Result<RawEpisode> {
    let mut p = Partial::default();
    let mut section = Section::None;
    let mut seen_sections: Vec<String> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(inner) = l.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| err(line, "unterminated section header"))?
                .trim();
            if seen_sections.iter().any(|s| s == inner) {
                return Err(err(line, format!("duplicate section [{inner}]")));
            }
            seen_sections.push(inner.to_string());
            section = match inner {
                "episode" => Section::Episode,
                "baseline" => Section::Baseline,
                "outcome" => Section::Outcome,
                "chart" => Section::Table(Table::Chart),
                "labs" => Section::Table(Table::Labs),
                "interventions" => Section::Table(Table::Interventions),
                other => match other.strip_prefix("channel ") {
                    Some(name) if !name.trim().is_empty() => {
                        p.channels.push((name.trim().to_string(), None, None, None));
                        Section::Channel(p.channels.len() - 1)
                    }
                    _ => return Err(err(line, format!("unknown section [{other}]"))),
                },
            };
            continue;
        }
        match section {
            Section::None => return Err(err(line, "content before the first section")),
            Section::Table(table) => {
                let idx = table as usize;
                let cols: Vec<&str> = l.split(',').map(str::trim).collect();
                if !p.header_seen[idx] {
                    let expected: &[&str] = match table {
                        Table::Interventions => &["t_s", "kind"],
                        _ => &["t_s", "name", "value"],
                    };
                    if cols != expected {
                        return Err(err(line, format!("expected header `{}`", expected.join(","))));
                    }
                    p.header_seen[idx] = true;
                    continue;
                }
                match table {
                    Table::Interventions => {
                        if cols.len() != 2 || cols[1].is_empty() {
                            return Err(err(line, "expected `t_s,kind`"));
                        }
                        p.interventions.push(Intervention {
                            t_s: num(line, "t_s", cols[0])?,
                            kind: cols[1].to_string(),
                        });
                    }
                    _ => {
                        if cols.len() != 3 || cols[1].is_empty() {
                            return Err(err(line, "expected `t_s,name,value`"));
                        }
                        let obs = Observation {
                            t_s: num(line, "t_s", cols[0])?,
                            name: cols[1].to_string(),
                            value: num(line, "value", cols[2])?,
                        };
                        if table == Table::Chart {
                            p.chart.push(obs);
                        } else {
                            p.labs.push(obs);
                        }
                    }
                }
            }
            _ => {
                let (key, value) = l
                    .split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| err(line, "expected `key = value`"))?;
                match (&section, key) {
                    (Section::Episode, "id") => set(&mut p.id, value.to_string(), line, key)?,
                    (Section::Episode, "length_s") => set(&mut p.length_s, num(line, key, value)?, line, key)?,
                    (Section::Baseline, "patient_id") => set(&mut p.patient_id, value.to_string(), line, key)?,
                    (Section::Baseline, "age") => set(&mut p.age, num(line, key, value)?, line, key)?,
                    (Section::Baseline, "gender") => set(&mut p.gender, value.to_string(), line, key)?,
                    (Section::Baseline, "ethnicity") => set(&mut p.ethnicity, value.to_string(), line, key)?,
                    (Section::Outcome, "death_s") => {
                        let d = if value == "none" { None } else { Some(num(line, key, value)?) };
                        set(&mut p.death_s, d, line, key)?
                    }
                    (Section::Outcome, "discharge_s") => set(&mut p.discharge_s, num(line, key, value)?, line, key)?,
                    (Section::Channel(c), "kind") => {
                        let kind = ChannelKind::parse(value)
                            .ok_or_else(|| err(line, format!("unknown channel kind `{value}`")))?;
                        set(&mut p.channels[*c].1, kind, line, key)?
                    }
                    (Section::Channel(c), "rate_hz") => set(&mut p.channels[*c].2, num(line, key, value)?, line, key)?,
                    (Section::Channel(c), "samples") => {
                        let s = value.split_ascii_whitespace().map(|v| sample(line, v)).collect::<Result<Vec<_>>>()?;
                        set(&mut p.channels[*c].3, s, line, key)?
                    }
                    _ => return Err(err(line, format!("unknown key `{key}`"))),
                }
            }
        }
    }

    let mut channels = Vec::with_capacity(p.channels.len());
    for (name, kind, rate, samples) in p.channels {
        let rate = need(rate, &format!("rate_hz of channel `{name}`"))?;
        if rate <= 0.0 {
            return Err(Error::Data(format!("channel `{name}`: rate_hz must be positive")));
        }
        channels.push(ChannelData {
            kind: need(kind, &format!("kind of channel `{name}`"))?,
            rate_hz: rate,
            samples: samples.unwrap_or_default(),
            name,
        });
    }
    let ep = RawEpisode {
        id: need(p.id, "id")?,
        length_s: need(p.length_s, "length_s")?,
        baseline: Baseline {
            patient_id: need(p.patient_id, "patient_id")?,
            age: need(p.age, "age")?,
            gender: need(p.gender, "gender")?,
            ethnicity: need(p.ethnicity, "ethnicity")?,
        },
        outcome: Outcome {
            death_s: need(p.death_s, "death_s")?,
            discharge_s: need(p.discharge_s, "discharge_s")?,
        },
        channels,
        chart: p.chart,
        labs: p.labs,
        interventions: p.interventions,
    };
    ep.check_times()?;
    Ok(ep)
}

impl RawEpisode {
    /// Every timestamp lies in `[0, length_s]`.
    pub fn check_times(&self) -> Result<()> {
        if self.length_s <= 0.0 {
            return Err(Error::Data(format!("{}: length_s must be positive", self.id)));
        }
        let bad = |what: &str, t: f64| -> Result<()> {
            if !(0.0..=self.length_s).contains(&t) {
                return Err(Error::Data(format!(
                    "{}: {what} timestamp {t} outside [0, {}]",
                    self.id, self.length_s
                )));
            }
            Ok(())
        };
        for o in &self.chart {
            bad("chart", o.t_s)?;
        }
        for o in &self.labs {
            bad("lab", o.t_s)?;
        }
        for e in &self.interventions {
            bad("intervention", e.t_s)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = &self.baseline;
        writeln!(s, "[episode]\nid = {}\nlength_s = {}\n", self.id, self.length_s).unwrap();
        writeln!(
            s,
            "[baseline]\npatient_id = {}\nage = {}\ngender = {}\nethnicity = {}\n",
            b.patient_id, b.age, b.gender, b.ethnicity
        )
        .unwrap();
        let death = self.outcome.death_s.map_or("none".to_string(), |d| d.to_string());
        writeln!(s, "[outcome]\ndeath_s = {death}\ndischarge_s = {}\n", self.outcome.discharge_s).unwrap();
        for c in &self.channels {
            writeln!(s, "[channel {}]\nkind = {}\nrate_hz = {}", c.name, c.kind.as_str(), c.rate_hz).unwrap();
            s.push_str("samples =");
            for v in &c.samples {
                if v.is_nan() {
                    s.push_str(" nan");
                } else {
                    write!(s, " {v}").unwrap();
                }
            }
            s.push_str("\n\n");
        }
        for (title, rows) in [("chart", &self.chart), ("labs", &self.labs)] {
            writeln!(s, "[{title}]\nt_s,name,value").unwrap();
            for o in rows {
                writeln!(s, "{},{},{}", o.t_s, o.name, o.value).unwrap();
            }
            s.push('\n');
        }
        s.push_str("[interventions]\nt_s,kind\n");
        for e in &self.interventions {
            writeln!(s, "{},{}", e.t_s, e.kind).unwrap();
        }
        s
    }
}
