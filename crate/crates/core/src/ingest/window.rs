use super::episode::RawEpisode;
use super::schema::{Schema, Timeline};
use super::steps::{
    aggregate_chart, build_guidance, build_lab_vectors, label_decompensation, label_los, segment_channel,
    GuidanceMatrix,
};
use crate::error::{Error, Result};

/// Inputs for one step: one raw segment per channel (schema order), the
/// chart triple vector, the lab value+flag vector, and the fraction of each
/// segment that was missing.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub segments: Vec<Vec<f64>>,
    pub chart: Vec<f64>,
    pub lab: Vec<f64>,
    pub missing: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub episode_id: String,
    pub patient_id: String,
    /// Position of this window within its episode.
    pub index: usize,
    pub end_s: f64,
    pub steps: Vec<StepInput>,
    /// Window-relative steps (1-based) with at least one lab event.
    pub lab_steps: Vec<i64>,
    /// Window-relative steps (1-based) with at least one intervention.
    pub intervention_steps: Vec<i64>,
    pub baseline: Vec<f64>,
    pub decomp: u8,
    pub los_class: u8,
    pub los_days: f64,
}

impl LabeledWindow {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Guidance matrix at window-relative step `t`.
    pub fn guidance(&self, t: usize, w: usize) -> GuidanceMatrix {
        build_guidance(&self.lab_steps, &self.intervention_steps, t, w)
    }
}

/// Standardized age, then one-hot gender and ethnicity.
pub fn encode_baseline(ep: &RawEpisode, schema: &Schema) -> Result<Vec<f64>> {
    let b = &ep.baseline;
    let mut out = vec![(b.age - 65.0) / 15.0];
    for (what, value, cats) in [
        ("gender", &b.gender, &schema.genders),
        ("ethnicity", &b.ethnicity, &schema.ethnicities),
    ] {
        let idx = cats.iter().position(|c| c == value).ok_or_else(|| {
            Error::Data(format!("{}: unknown {what} `{value}`; schema has {cats:?}", ep.id))
        })?;
        out.extend((0..cats.len()).map(|i| if i == idx { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

/// Why an episode produced no windows.
#[derive(Clone, Debug, PartialEq)]
pub enum Exclusion {
    Minor,
    TooShort,
}

/// Schema conformance of a parsed episode.
pub fn check_episode(ep: &RawEpisode, schema: &Schema, timeline: &Timeline) -> Result<()> {
    ep.check_times()?;
    for spec in &schema.channels {
        let ch = ep
            .channels
            .iter()
            .find(|c| c.name == spec.name)
            .ok_or_else(|| Error::Data(format!("{}: channel `{}` missing", ep.id, spec.name)))?;
        if ch.kind != spec.kind || (ch.rate_hz - spec.rate_hz).abs() > 1e-9 * spec.rate_hz {
            return Err(Error::Data(format!(
                "{}: channel `{}` is {} at {} Hz, schema expects {} at {} Hz",
                ep.id,
                ch.name,
                ch.kind.as_str(),
                ch.rate_hz,
                spec.kind.as_str(),
                spec.rate_hz
            )));
        }
        let expected = ch.rate_hz * ep.length_s;
        let slack = ch.rate_hz * timeline.step_s;
        if (ch.samples.len() as f64 - expected).abs() > slack + 1.0 {
            return Err(Error::Data(format!(
                "{}: channel `{}` has {} samples, {} s at {} Hz needs about {expected:.0}",
                ep.id,
                ch.name,
                ch.samples.len(),
                ep.length_s,
                ch.rate_hz
            )));
        }
    }
    for c in &ep.channels {
        if schema.channel_index(&c.name).is_none() {
            return Err(Error::Data(format!("{}: channel `{}` not in schema", ep.id, c.name)));
        }
    }
    Ok(())
}

/// Cohort rules, then non-overlapping (or strided) W-step windows after the
/// discarded first hour, each labeled at its end. `Ok(Err(_))` means the
/// episode is valid but excluded from the cohort.
pub fn window_episode(
    ep: &RawEpisode,
    schema: &Schema,
    timeline: &Timeline,
) -> Result<std::result::Result<Vec<LabeledWindow>, Exclusion>> {
    check_episode(ep, schema, timeline)?;
    if ep.baseline.age < schema.min_age {
        return Ok(Err(Exclusion::Minor));
    }
    let w = timeline.window;
    let n = timeline.n_steps(ep.length_s);
    if ep.length_s + 1e-9 < timeline.min_length_s() || n < w {
        return Ok(Err(Exclusion::TooShort));
    }
    let baseline = encode_baseline(ep, schema)?;
    let n_windows = (n - w) / timeline.stride + 1;

    let event_steps = |times: &mut dyn Iterator<Item = f64>| -> Vec<i64> {
        let mut v: Vec<i64> = times.map(|t| timeline.step_of(t)).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let lab_abs = event_steps(&mut ep.labs.iter().map(|o| o.t_s));
    let int_abs = event_steps(&mut ep.interventions.iter().map(|e| e.t_s));

    let channels: Vec<_> = schema
        .channels
        .iter()
        .map(|spec| ep.channels.iter().find(|c| c.name == spec.name).expect("checked"))
        .collect();

    let mut out = Vec::with_capacity(n_windows);
    for i in 0..n_windows {
        let first = (i * timeline.stride) as i64 + 1;
        let last = first + w as i64 - 1;
        let end_s = timeline.step_start_s(last + 1);
        let chart = aggregate_chart(&ep.chart, &schema.chart, timeline, first, last)?;
        let lab = build_lab_vectors(&ep.labs, &schema.labs, timeline, first, last)?;
        let segs = channels
            .iter()
            .map(|c| segment_channel(c, timeline, first, last))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Data(format!("{}: {e}", ep.id)))?;
        let steps = (0..w)
            .map(|s| StepInput {
                segments: segs.iter().map(|c| c[s].values.clone()).collect(),
                missing: segs.iter().map(|c| c[s].missing as f64 / c[s].values.len() as f64).collect(),
                chart: chart[s].clone(),
                lab: lab[s].clone(),
            })
            .collect();
        let rel = |abs: &[i64]| -> Vec<i64> {
            abs.iter()
                .filter(|&&k| k >= first && k <= last)
                .map(|&k| k - first + 1)
                .collect()
        };
        let (los_class, los_days) =
            label_los(&ep.outcome, end_s, timeline).map_err(|e| Error::Data(format!("{}: {e}", ep.id)))?;
        out.push(LabeledWindow {
            episode_id: ep.id.clone(),
            patient_id: ep.baseline.patient_id.clone(),
            index: i,
            end_s,
            steps,
            lab_steps: rel(&lab_abs),
            intervention_steps: rel(&int_abs),
            baseline: baseline.clone(),
            decomp: label_decompensation(&ep.outcome, end_s, timeline),
            los_class,
            los_days,
        });
    }
    Ok(Ok(out))
}

/// Splits by patient: a seeded shuffle of the distinct patient ids sends
/// the first `ceil(train_frac * n)` patients to the training side.
pub fn split_by_patient<T>(
    items: Vec<T>,
    patient: impl Fn(&T) -> &str,
    train_frac: f64,
    seed: u64,
) -> (Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut ids: Vec<String> = items.iter().map(|t| patient(t).to_string()).collect();
    ids.sort();
    ids.dedup();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    ids.shuffle(&mut rng);
    let n_train = ((train_frac.clamp(0.0, 1.0) * ids.len() as f64).ceil() as usize).min(ids.len());
    let train_ids: std::collections::HashSet<&str> = ids[..n_train].iter().map(String::as_str).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for t in items {
        if train_ids.contains(patient(&t)) {
            train.push(t);
        } else {
            test.push(t);
        }
    }
    (train, test)
}

/// Cohort statistics printed by the ingest command.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct IngestReport {
    pub episodes: usize,
    pub rejected: Vec<(String, String)>,
    pub minors: usize,
    pub too_short: usize,
    pub windows: usize,
    pub positives: usize,
    pub los_histogram: [usize; 9],
}

impl IngestReport {
    pub fn record(&mut self, windows: &[LabeledWindow]) {
        self.windows += windows.len();
        for w in windows {
            self.positives += w.decomp as usize;
            self.los_histogram[w.los_class as usize - 1] += 1;
        }
    }

    pub fn positive_rate(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.positives as f64 / self.windows as f64
        }
    }
}
