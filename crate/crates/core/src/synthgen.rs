//! Seeded synthetic cohorts with planted intervention/outcome coupling.
//!
//! Each episode draws a latent frailty `u ~ N(0, 1)`. Death occurs when
//! `u + sigma_eta * eta` exceeds a threshold calibrated to the target death
//! rate, so labels depend on `u` at every effect size. Inputs depend on `u`
//! only through `delta`:
//!
//! * interventions arrive at rate `lambda_int * exp(delta k u - (delta k)^2 / 2)`
//!   (the mean rate does not move with `delta`);
//! * each intervention starts an excursion of size `delta (u + sigma_r z)`
//!   in the waveform amplitude and the vitals, decaying by `rho` per step;
//! * lab draws start excursions with a smaller gain;
//! * distractor excursions at random times have the same marginal size but
//!   use an independent frailty draw;
//! * charted variables shift by `chart_gain * delta * u` scales.
//!
//! At `delta = 0` every input is independent of the label.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::ingest::{
    label_decompensation, ChannelData, ChannelKind, Intervention, Observation, Outcome, RawEpisode, Schema, Timeline,
};
use crate::ingest::{window_episode, Baseline};
use crate::model::{prepare_window, PreparedWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_episodes: usize,
    pub ecg_hz: f64,
    pub timeline: Timeline,
    /// Events per hour.
    pub lambda_lab: f64,
    pub lambda_int: f64,
    pub lambda_distractor: f64,
    /// Effect size: how strongly inputs carry the frailty.
    pub delta: f64,
    /// Frailty sensitivity of the intervention rate.
    pub kappa: f64,
    /// Per-step decay of excursions.
    pub rho: f64,
    pub sigma_r: f64,
    pub lab_gain: f64,
    pub chart_gain: f64,
    pub wave_gain: f64,
    pub vital_gain: f64,
    pub noise: f64,
    pub sigma_eta: f64,
    /// Target fraction of deaths; sets the threshold.
    pub death_rate: f64,
    /// Episode length range in hours.
    pub length_h: (f64, f64),
    /// Log-normal remaining stay (days) of survivors at 13 h.
    pub los_mu: f64,
    pub los_sigma: f64,
    pub los_gain: f64,
    pub age: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_episodes: 2000,
            ecg_hz: 50.0,
            timeline: Timeline::fast(),
            lambda_lab: 0.3,
            lambda_int: 0.25,
            lambda_distractor: 3.0,
            delta: 1.0,
            kappa: 0.5,
            rho: 0.5,
            sigma_r: 0.5,
            lab_gain: 0.3,
            chart_gain: 0.05,
            wave_gain: 0.5,
            vital_gain: 1.0,
            noise: 0.1,
            sigma_eta: 0.6,
            death_rate: 0.114,
            length_h: (13.0, 16.0),
            los_mu: 1.0,
            los_sigma: 0.8,
            los_gain: 0.3,
            age: (20.0, 90.0),
        }
    }
}

impl GeneratorConfig {
    pub fn schema(&self) -> Schema {
        Schema::standard(self.ecg_hz)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_lab", self.lambda_lab),
            ("lambda_int", self.lambda_int),
            ("lambda_distractor", self.lambda_distractor),
            ("delta", self.delta),
            ("kappa", self.kappa),
            ("sigma_r", self.sigma_r),
            ("noise", self.noise),
            ("sigma_eta", self.sigma_eta),
            ("los_sigma", self.los_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.death_rate > 0.0 && self.death_rate < 1.0) {
            return bad(format!("death_rate must lie in (0, 1), got {}", self.death_rate));
        }
        if !(self.length_h.0 >= 13.0 && self.length_h.1 > self.length_h.0) {
            return bad(format!("length_h must satisfy 13 <= min < max, got {:?}", self.length_h));
        }
        if !(self.age.0 <= self.age.1) || !(self.ecg_hz > 0.0) {
            return bad("age range and ecg_hz must be valid".into());
        }
        self.timeline.validate()?;
        self.schema().validate(&self.timeline)
    }

    /// Death threshold on `u + sigma_eta * eta`.
    pub fn threshold(&self) -> f64 {
        let q = StatNormal::new(0.0, 1.0).expect("unit normal").inverse_cdf(1.0 - self.death_rate);
        (1.0 + self.sigma_eta * self.sigma_eta).sqrt() * q
    }

    /// Canonical JSON and its SHA-256.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Latent state and event times of one episode, before any signal is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub index: usize,
    pub u: f64,
    pub length_s: f64,
    pub outcome: Outcome,
    pub baseline: Baseline,
    pub labs: Vec<(f64, usize)>,
    pub interventions: Vec<Intervention>,
    /// `(time, size)` of every excursion, informative or not.
    pub excursions: Vec<(f64, f64)>,
}

const INTERVENTION_KINDS: [&str; 4] = ["vasopressor", "fluid_bolus", "intubation", "sedation"];

fn episode_rng(cfg: &GeneratorConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    rng
}

fn poisson_times(rng: &mut ChaCha8Rng, rate_per_s: f64, end_s: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if rate_per_s <= 0.0 {
        return out;
    }
    let gap = Exp::new(rate_per_s).expect("positive rate");
    let mut t = gap.sample(rng);
    while t < end_s {
        out.push(t);
        t += gap.sample(rng);
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn skeleton_with(cfg: &GeneratorConfig, index: usize, rng: &mut ChaCha8Rng) -> Skeleton {
    let hour = cfg.timeline.hour_s;
    let u = normal(rng);
    let eta = normal(rng);
    let dies = u + cfg.sigma_eta * eta > cfg.threshold();
    let base_len = rng.gen_range(cfg.length_h.0..cfg.length_h.1) * hour;
    let window_end = 13.0 * hour;
    let (length_s, outcome) = if dies {
        let d = window_end + (1.0 - rng.gen::<f64>()) * 24.0 * hour;
        (
            base_len.min(d),
            Outcome {
                death_s: Some(d),
                discharge_s: d,
            },
        )
    } else {
        let days = (cfg.los_mu + cfg.los_sigma * normal(rng) + cfg.los_gain * cfg.delta * u).exp();
        (
            base_len,
            Outcome {
                death_s: None,
                discharge_s: base_len.max(window_end + days * cfg.timeline.day_s()),
            },
        )
    };
    let schema_eth = ["white", "black", "hispanic", "asian", "other"];
    let baseline = Baseline {
        patient_id: format!("p{index:06}"),
        age: (rng.gen_range(cfg.age.0..=cfg.age.1) * 10.0).round() / 10.0,
        gender: if rng.gen_bool(0.5) { "F" } else { "M" }.into(),
        ethnicity: schema_eth[rng.gen_range(0..schema_eth.len())].into(),
    };

    let dk = cfg.delta * cfg.kappa;
    let int_rate = cfg.lambda_int * (dk * u - dk * dk / 2.0).exp() / hour;
    let sizes = Normal::new(0.0, 1.0).expect("unit normal");
    let mut excursions = Vec::new();
    let interventions: Vec<Intervention> = poisson_times(rng, int_rate, length_s)
        .into_iter()
        .map(|t| {
            excursions.push((t, cfg.delta * (u + cfg.sigma_r * sizes.sample(rng))));
            Intervention {
                t_s: round_to(t, 3),
                kind: INTERVENTION_KINDS[rng.gen_range(0..INTERVENTION_KINDS.len())].into(),
            }
        })
        .collect();
    let labs: Vec<(f64, usize)> = poisson_times(rng, cfg.lambda_lab / hour, length_s)
        .into_iter()
        .map(|t| {
            excursions.push((t, cfg.lab_gain * cfg.delta * (u + cfg.sigma_r * sizes.sample(rng))));
            (round_to(t, 3), rng.gen_range(0..3))
        })
        .collect();
    for t in poisson_times(rng, cfg.lambda_distractor / hour, length_s) {
        let other = normal(rng);
        excursions.push((t, cfg.delta * (other + cfg.sigma_r * sizes.sample(rng))));
    }
    Skeleton {
        index,
        u,
        length_s,
        outcome,
        baseline,
        labs,
        interventions,
        excursions,
    }
}

/// Rounds to `digits` decimals so the text form stays short.
fn round_to(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

/// Latent draws and events only; cheap enough for Monte Carlo checks.
pub fn skeleton(cfg: &GeneratorConfig, index: usize) -> Skeleton {
    skeleton_with(cfg, index, &mut episode_rng(cfg, index))
}

pub fn episode_id(index: usize) -> String {
    format!("ep{index:06}")
}

/// Vital sign direction under rising severity, in schema order.
const VITAL_SIGNS: [f64; 7] = [-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, -1.0];
const CHART_SIGNS: [f64; 6] = [-1.0, -1.0, -1.0, -1.0, 1.0, 1.0];

/// Excursion level per step on the `step_s` grid from admission.
fn severity_track(sk: &Skeleton, cfg: &GeneratorConfig, n_steps: usize) -> Vec<f64> {
    let mut impulses = vec![0.0; n_steps];
    for &(t, size) in &sk.excursions {
        let k = (t / cfg.timeline.step_s).floor() as usize;
        if k < n_steps {
            impulses[k] += size;
        }
    }
    let mut s = vec![0.0; n_steps];
    let mut level = 0.0;
    for k in 0..n_steps {
        level = cfg.rho * level + impulses[k];
        s[k] = level;
    }
    s
}

fn render(cfg: &GeneratorConfig, sk: &Skeleton, rng: &mut ChaCha8Rng) -> RawEpisode {
    let schema = cfg.schema();
    let tl = &cfg.timeline;
    let n_steps = (sk.length_s / tl.step_s).ceil() as usize + 1;
    let sev = severity_track(sk, cfg, n_steps);
    let sev_at = |t: f64| sev[((t / tl.step_s).floor() as usize).min(n_steps - 1)];

    let mut channels = Vec::with_capacity(schema.k());
    let mut vital = 0;
    for spec in &schema.channels {
        let n = (spec.rate_hz * sk.length_s).round() as usize;
        let samples = match spec.kind {
            ChannelKind::Waveform => pulse_train(cfg, spec.rate_hz, n, &sev_at, rng),
            ChannelKind::Vital => {
                let sign = VITAL_SIGNS[vital % VITAL_SIGNS.len()];
                vital += 1;
                let phi: f64 = 0.9;
                let mut e = normal(rng);
                (0..n)
                    .map(|i| {
                        e = phi * e + (1.0 - phi * phi).sqrt() * normal(rng);
                        let t = i as f64 / spec.rate_hz;
                        let z = 0.5 * e + cfg.vital_gain * sign * sev_at(t);
                        round_to(spec.mean + spec.scale * z, 2)
                    })
                    .collect()
            }
        };
        channels.push(ChannelData {
            name: spec.name.clone(),
            kind: spec.kind,
            rate_hz: spec.rate_hz,
            samples,
        });
    }

    let mut chart = Vec::new();
    let hours = (sk.length_s / tl.hour_s).floor() as usize;
    for h in 0..=hours {
        let t = round_to((h as f64 + rng.gen_range(0.1..0.9)) * tl.hour_s, 3);
        if t > sk.length_s {
            break;
        }
        for (v, spec) in schema.chart.iter().enumerate() {
            let z = 0.5 * normal(rng) + cfg.chart_gain * cfg.delta * CHART_SIGNS[v % CHART_SIGNS.len()] * sk.u;
            chart.push(Observation {
                t_s: t,
                name: spec.name.clone(),
                value: round_to(spec.mean + spec.scale * z, 2),
            });
        }
    }
    let labs = sk
        .labs
        .iter()
        .map(|&(t, which)| {
            let spec = &schema.labs[which % schema.labs.len()];
            Observation {
                t_s: t,
                name: spec.name.clone(),
                value: round_to(spec.mean + spec.scale * 0.7 * normal(rng), 3),
            }
        })
        .collect();
    RawEpisode {
        id: episode_id(sk.index),
        length_s: sk.length_s,
        baseline: sk.baseline.clone(),
        outcome: sk.outcome,
        channels,
        chart,
        labs,
        interventions: sk.interventions.clone(),
    }
}

/// Quasi-periodic beats whose amplitude follows the severity track.
fn pulse_train(cfg: &GeneratorConfig, hz: f64, n: usize, sev_at: &dyn Fn(f64) -> f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).map(|_| cfg.noise * normal(rng)).collect();
    let rate = rng.gen_range(65.0..95.0);
    let end = n as f64 / hz;
    let mut beat = rng.gen_range(0.0..60.0 / rate);
    while beat < end + 0.5 {
        let s = sev_at(beat.min(end));
        let amp = 1.0 + cfg.wave_gain * s;
        let lo = (((beat - 0.2) * hz).floor().max(0.0)) as usize;
        let hi = (((beat + 0.5) * hz).ceil() as usize).min(n);
        for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let dt = i as f64 / hz - beat;
            let r = (-dt * dt / (2.0 * 0.03 * 0.03)).exp();
            let tw = 0.3 * (-(dt - 0.25) * (dt - 0.25) / (2.0 * 0.06 * 0.06)).exp();
            *o += amp * (r + tw);
        }
        let jitter = 1.0 + 0.03 * normal(rng);
        beat += 60.0 / (rate * (1.0 + 0.1 * s)).max(20.0) * jitter;
    }
    out.iter().map(|&v| round_to(v, 4)).collect()
}

/// One episode, a pure function of `(cfg, index)`.
pub fn generate_episode(cfg: &GeneratorConfig, index: usize) -> RawEpisode {
    let mut rng = episode_rng(cfg, index);
    let sk = skeleton_with(cfg, index, &mut rng);
    render(cfg, &sk, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: GeneratorConfig,
    pub config_hash: String,
    /// SHA-256 over every episode file, in index order.
    pub content_hash: String,
    pub n_episodes: usize,
    pub deaths: usize,
    /// Positive rate of the first window's decompensation label.
    pub positive_rate: f64,
    pub mean_interventions: f64,
    pub mean_labs: f64,
    pub mean_length_h: f64,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn episode_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.episode", episode_id(index)))
}

/// Writes `n_episodes` episode files and a manifest into `dir`. Refuses to
/// touch a directory that already holds a cohort unless `force` is set.
pub fn generate_cohort(cfg: &GeneratorConfig, dir: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if dir.exists() && !force {
        let existing = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .any(|e| {
                let name = e.file_name();
                let name = name.to_string_lossy();
                name == MANIFEST_NAME || name.ends_with(".episode")
            });
        if existing {
            return Err(Error::Config(format!(
                "{} already holds a cohort; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digests: Vec<Result<(Vec<u8>, Skeleton)>> = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(cfg, i);
            let sk = skeleton_with(cfg, i, &mut rng);
            let text = render(cfg, &sk, &mut rng).to_text();
            let path = episode_file(dir, i);
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            Ok((Sha256::digest(text.as_bytes()).to_vec(), sk))
        })
        .collect();
    let mut hasher = Sha256::new();
    let mut skeletons = Vec::with_capacity(cfg.n_episodes);
    for d in digests {
        let (digest, sk) = d?;
        hasher.update(&digest);
        skeletons.push(sk);
    }
    let content_hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let manifest = summarize(cfg, &skeletons, content_hash);
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn summarize(cfg: &GeneratorConfig, skeletons: &[Skeleton], content_hash: String) -> Manifest {
    let n = skeletons.len().max(1) as f64;
    let end = cfg.timeline.step_start_s(cfg.timeline.window as i64 + 1);
    let positives = skeletons
        .iter()
        .filter(|s| label_decompensation(&s.outcome, end, &cfg.timeline) == 1)
        .count();
    Manifest {
        format: "raimkit-cohort".into(),
        version: 1,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        content_hash,
        n_episodes: skeletons.len(),
        deaths: skeletons.iter().filter(|s| s.outcome.death_s.is_some()).count(),
        positive_rate: positives as f64 / n,
        mean_interventions: skeletons.iter().map(|s| s.interventions.len() as f64).sum::<f64>() / n,
        mean_labs: skeletons.iter().map(|s| s.labs.len() as f64).sum::<f64>() / n,
        mean_length_h: skeletons.iter().map(|s| s.length_s).sum::<f64>() / n / cfg.timeline.hour_s,
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

/// Generates, windows and standardizes a cohort in memory, one episode at
/// a time. Excluded episodes are skipped; windows keep episode order.
pub fn prepared_cohort(cfg: &GeneratorConfig) -> Result<Vec<PreparedWindow>> {
    cfg.validate()?;
    let schema = cfg.schema();
    let per_episode: Vec<Result<Vec<PreparedWindow>>> = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep = generate_episode(cfg, i);
            match window_episode(&ep, &schema, &cfg.timeline)? {
                Ok(windows) => windows.iter().map(|w| prepare_window(w, &schema)).collect(),
                Err(_) => Ok(Vec::new()),
            }
        })
        .collect();
    let mut out = Vec::new();
    for w in per_episode {
        out.extend(w?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_episode;

    fn cfg(delta: f64) -> GeneratorConfig {
        GeneratorConfig {
            delta,
            ..GeneratorConfig::default()
        }
    }

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx * vy).sqrt()
    }

    /// Plug-in mutual information (nats) between the label and the
    /// intervention count capped at 6.
    fn plug_in_mi(sk: &[Skeleton], cfg: &GeneratorConfig) -> f64 {
        let end = cfg.timeline.step_start_s(13);
        let mut joint = [[0.0; 7]; 2];
        for s in sk {
            let y = label_decompensation(&s.outcome, end, &cfg.timeline) as usize;
            joint[y][s.interventions.len().min(6)] += 1.0;
        }
        let n = sk.len() as f64;
        let py: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
        let px: Vec<f64> = (0..7).map(|c| (joint[0][c] + joint[1][c]) / n).collect();
        let mut mi = 0.0;
        for (y, row) in joint.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    let p = v / n;
                    mi += p * (p / (py[y] * px[c])).ln();
                }
            }
        }
        mi
    }

    fn skeletons(cfg: &GeneratorConfig, n: usize) -> Vec<Skeleton> {
        (0..n).map(|i| skeleton(cfg, i)).collect()
    }

    #[test]
    fn episodes_are_deterministic_and_ingestible() {
        let c = GeneratorConfig {
            n_episodes: 3,
            ..cfg(1.0)
        };
        let schema = c.schema();
        for i in 0..3 {
            let a = generate_episode(&c, i);
            assert_eq!(a, generate_episode(&c, i));
            let back = parse_episode(&a.to_text()).unwrap();
            let windows = window_episode(&back, &schema, &c.timeline).unwrap().unwrap();
            assert_eq!(windows.len(), 1);
        }
        assert_ne!(generate_episode(&c, 0), generate_episode(&c, 1));
    }

    #[test]
    fn null_effect_count_is_uncorrelated_with_label() {
        let c = cfg(0.0);
        let sk = skeletons(&c, 2000);
        let end = c.timeline.step_start_s(13);
        let counts: Vec<f64> = sk.iter().map(|s| s.interventions.len() as f64).collect();
        let labels: Vec<f64> = sk
            .iter()
            .map(|s| label_decompensation(&s.outcome, end, &c.timeline) as f64)
            .collect();
        let r = corr(&counts, &labels);
        assert!(r.abs() <= 0.05, "{r}");
    }

    #[test]
    fn intervention_count_matches_poisson_mean() {
        let c = cfg(0.0);
        let sk = skeletons(&c, 2000);
        let counts: Vec<f64> = sk.iter().map(|s| s.interventions.len() as f64).collect();
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let expected = c.lambda_int * sk.iter().map(|s| s.length_s / c.timeline.hour_s).sum::<f64>() / n;
        let se = (var / n).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn mutual_information_grows_with_effect() {
        let mi: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&d| {
                let c = cfg(d);
                plug_in_mi(&skeletons(&c, 4000), &c)
            })
            .collect();
        assert!(mi[0] < mi[1] && mi[1] < mi[2], "{mi:?}");
    }

    #[test]
    fn positive_rate_near_target() {
        let c = cfg(1.0);
        let m = summarize(&c, &skeletons(&c, 2000), String::new());
        assert!((m.positive_rate - 0.114).abs() <= 0.03, "{}", m.positive_rate);
    }

    #[test]
    fn no_interventions_at_zero_rate() {
        let c = GeneratorConfig {
            lambda_int: 0.0,
            ..cfg(1.0)
        };
        assert!(skeletons(&c, 200).iter().all(|s| s.interventions.is_empty()));
    }

    #[test]
    fn cohort_files_and_overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("cohort");
        let c = GeneratorConfig {
            n_episodes: 4,
            ..cfg(1.0)
        };
        let m = generate_cohort(&c, &out, false).unwrap();
        let files = fs::read_dir(&out).unwrap().count();
        assert_eq!(files, 5);
        assert_eq!(read_manifest(&out).unwrap(), m);
        assert!(matches!(generate_cohort(&c, &out, false), Err(Error::Config(_))));
        let again = generate_cohort(&c, &out, true).unwrap();
        assert_eq!(again.content_hash, m.content_hash);
        assert_eq!(again.config_hash, c.hash());
    }

    #[test]
    fn invalid_config_is_rejected() {
        for bad in [
            GeneratorConfig { rho: 1.0, ..cfg(1.0) },
            GeneratorConfig { lambda_int: -0.1, ..cfg(1.0) },
            GeneratorConfig { length_h: (12.0, 14.0), ..cfg(1.0) },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
