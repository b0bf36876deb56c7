use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::lstm::{lstm_step, BoundLstm, LstmParams, LstmState};
use super::prepare::{PreparedWindow, Target};
use crate::attention::{
    active_set, channel_energy, context, guided_context, last_marked, time_energy, AttentionTrace, Bound, EnergyParams,
};
use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint;
use crate::embed::{BnUpdate, Embedder};
use crate::error::{Error, Result};
use crate::ingest::{build_guidance, Schema, Timeline};

#[derive(Clone, Debug)]
struct HeadParams {
    w_h: ParamId,
    w_x: ParamId,
    w_b: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    fwd: LstmParams,
    bwd: Option<LstmParams>,
}

/// Architecture: parameter handles plus the shapes they were built for.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub schema: Schema,
    pub timeline: Timeline,
    embedder: Embedder,
    time: Option<EnergyParams>,
    channel: Option<EnergyParams>,
    lab: Option<EnergyParams>,
    int: Option<EnergyParams>,
    layers: Vec<Layer>,
    head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

struct BoundLayer {
    fwd: BoundLstm,
    bwd: Option<BoundLstm>,
}

struct BoundNet {
    time: Option<Bound>,
    channel: Option<Bound>,
    lab: Option<Bound>,
    int: Option<Bound>,
    layers: Vec<BoundLayer>,
    head: [Var; 4],
}

/// Per-step outputs of one window on a tape.
#[derive(Clone, Debug)]
pub struct WindowOutput {
    /// Class probabilities, or a one-element prediction for regression.
    pub outputs: Vec<Var>,
    pub traces: Vec<AttentionTrace>,
}

/// Per-step outputs of one window as plain values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub outputs: Vec<Vec<f64>>,
    pub traces: Vec<AttentionTrace>,
}

impl Prediction {
    pub fn last(&self) -> &[f64] {
        self.outputs.last().expect("windows have at least one step")
    }

    /// Positive-class probability at the final step (binary tasks).
    pub fn score(&self) -> f64 {
        self.last()[self.last().len() - 1]
    }

    /// Arg-max at the final step, lowest index on ties.
    pub fn class(&self) -> usize {
        let o = self.last();
        (0..o.len()).fold(0, |best, i| if o[i] > o[best] { i } else { best })
    }
}

fn uniform<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
    store.add_uniform(name, &[rows, cols], 1.0 / (cols.max(1) as f64).sqrt(), rng)
}

impl Model {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(cfg: ModelConfig, schema: &Schema, timeline: &Timeline, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = Embedder::new(&cfg.embed, schema, timeline, &mut store, &mut rng)?;
        let (w, k, d, h, a) = (cfg.window, cfg.k(), cfg.embed.d_emb, cfg.hidden, cfg.a_dim());
        let v = cfg.variant;
        let time = if v.uses_time() {
            Some(EnergyParams::time(&mut store, "attention.time", w, a, h, false, &mut rng)?)
        } else {
            None
        };
        let channel = if cfg.uses_channel() {
            Some(EnergyParams::channel(&mut store, "attention.channel", k, w, d, h, &mut rng)?)
        } else {
            None
        };
        let lab = if v.uses_lab() {
            Some(EnergyParams::time(&mut store, "attention.lab", w, a, h, false, &mut rng)?)
        } else {
            None
        };
        let int = if v.uses_int() {
            Some(EnergyParams::time(&mut store, "attention.int", w, a, h, true, &mut rng)?)
        } else {
            None
        };
        let mut layers = Vec::new();
        if v.has_encoder() {
            let dirs = if cfg.bidirectional { 2 } else { 1 };
            for l in 0..cfg.layers {
                let input = if l == 0 { cfg.encoder_input() } else { dirs * h };
                let fwd = LstmParams::new(&mut store, &format!("encoder.l{l}.fwd"), input, h, &mut rng)?;
                let bwd = if cfg.bidirectional {
                    Some(LstmParams::new(&mut store, &format!("encoder.l{l}.bwd"), input, h, &mut rng)?)
                } else {
                    None
                };
                layers.push(Layer { fwd, bwd });
            }
        }
        let n = cfg.task.n_outputs();
        let head = HeadParams {
            w_h: uniform(&mut store, "head.W_h", n, cfg.head_input(), &mut rng)?,
            w_x: uniform(&mut store, "head.W_x", n, schema.x_dim(), &mut rng)?,
            w_b: uniform(&mut store, "head.W_b", n, schema.baseline_dim(), &mut rng)?,
            b: store.add("head.b", Tensor::zeros(&[n]))?,
        };
        Ok(Model {
            net: Network {
                cfg,
                schema: schema.clone(),
                timeline: *timeline,
                embedder,
                time,
                channel,
                lab,
                int,
                layers,
                head,
            },
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn schema(&self) -> &Schema {
        &self.net.schema
    }

    pub fn timeline(&self) -> &Timeline {
        &self.net.timeline
    }

    /// Runs a batch of windows on one tape. Training-mode batchnorm pools
    /// statistics over the whole batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        windows: &[&PreparedWindow],
        train: bool,
        record: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<WindowOutput>> {
        self.net.forward(tape, binder, windows, train, record, updates)
    }

    /// Summed per-step loss of one window against its label.
    pub fn window_loss(&self, tape: &mut Tape, out: &WindowOutput, w: &PreparedWindow) -> Result<Var> {
        window_loss(tape, &out.outputs, w.target(self.net.cfg.task))
    }

    /// Evaluation-mode predictions, in input order.
    pub fn predict(&self, windows: &[PreparedWindow], record: bool) -> Result<Vec<Prediction>> {
        let chunks: Vec<Result<Vec<Prediction>>> = windows
            .par_chunks(8)
            .map(|chunk| {
                let mut tape = Tape::new();
                let mut binder = Binder::new(&self.store, false);
                let refs: Vec<&PreparedWindow> = chunk.iter().collect();
                let outs = self.forward(&mut tape, &mut binder, &refs, false, record, &mut Vec::new())?;
                Ok(outs
                    .into_iter()
                    .map(|o| Prediction {
                        outputs: o.outputs.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
                        traces: o.traces,
                    })
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Mean summed-window loss in evaluation mode.
    pub fn mean_loss(&self, windows: &[PreparedWindow]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Data("no windows to score".into()));
        }
        let parts: Vec<Result<f64>> = windows
            .par_chunks(8)
            .map(|chunk| {
                let mut tape = Tape::new();
                let mut binder = Binder::new(&self.store, false);
                let refs: Vec<&PreparedWindow> = chunk.iter().collect();
                let outs = self.forward(&mut tape, &mut binder, &refs, false, false, &mut Vec::new())?;
                let mut total = 0.0;
                for (o, w) in outs.iter().zip(chunk) {
                    let l = self.window_loss(&mut tape, o, w)?;
                    total += tape.value(l).item();
                }
                Ok(total)
            })
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total / windows.len() as f64)
    }

    /// Writes the checkpoint and its `.json` architecture sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.net.cfg.clone(),
            schema: self.net.schema.clone(),
            timeline: self.net.timeline,
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&side, e))?;
        checkpoint::save(path, &self.store.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", side.display())))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Corrupt(format!("{}: format `{}`", side.display(), file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: MODEL_VERSION,
            });
        }
        let mut model = Model::new(file.config, &file.schema, &file.timeline, 0)?;
        model.store.load_named(checkpoint::load(path)?)?;
        Ok(model)
    }
}

pub const MODEL_FORMAT: &str = "raimkit-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub schema: Schema,
    pub timeline: Timeline,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Cross-entropy of every step against `target`, summed; squared error for
/// regression.
pub fn window_loss(tape: &mut Tape, outputs: &[Var], target: Target) -> Result<Var> {
    if outputs.is_empty() {
        return Err(Error::Contract("window loss needs at least one prediction".into()));
    }
    let mut terms = Vec::with_capacity(outputs.len());
    for &o in outputs {
        terms.push(match target {
            Target::Class(c) => tape.cross_entropy(o, c)?,
            Target::Value(y) => {
                let t = tape.constant(Tensor::vector(vec![y]));
                let d = tape.sub(o, t)?;
                let sq = tape.mul(d, d)?;
                tape.sum(sq)
            }
        });
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.sum(all))
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

impl Network {
    fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> BoundNet {
        let mut b = |p: &Option<EnergyParams>| p.as_ref().map(|p| p.bind(tape, binder));
        let (time, channel, lab, int) = (b(&self.time), b(&self.channel), b(&self.lab), b(&self.int));
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                fwd: l.fwd.bind(tape, binder),
                bwd: l.bwd.as_ref().map(|p| p.bind(tape, binder)),
            })
            .collect();
        let head = [self.head.w_h, self.head.w_x, self.head.w_b, self.head.b].map(|id| binder.var(tape, id));
        BoundNet {
            time,
            channel,
            lab,
            int,
            layers,
            head,
        }
    }

    fn embed_batch(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        windows: &[&PreparedWindow],
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<Vec<Var>>> {
        let k = self.embedder.k();
        let mut blocks = Vec::with_capacity(k);
        for c in 0..k {
            let si = self.embedder.schema_index(c);
            let segs: Vec<Var> = windows
                .iter()
                .flat_map(|w| w.steps.iter())
                .map(|s| tape.constant(s.segments[si].clone()))
                .collect();
            blocks.push(self.embedder.embed_channel(tape, binder, c, &segs, train, updates)?);
        }
        let mut out = Vec::with_capacity(windows.len());
        let mut at = 0;
        for w in windows {
            let mut steps = Vec::with_capacity(w.steps.len());
            for _ in 0..w.steps.len() {
                let parts: Vec<Var> = blocks.iter().map(|b| b[at]).collect();
                steps.push(tape.concat(&parts, 0)?);
                at += 1;
            }
            out.push(steps);
        }
        Ok(out)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        windows: &[&PreparedWindow],
        train: bool,
        record: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<WindowOutput>> {
        let xd = self.schema.x_dim();
        for w in windows {
            if w.steps.is_empty() {
                return Err(Error::Data(format!("{}: window has no steps", w.episode_id)));
            }
            if w.steps.iter().any(|s| s.x.len() != xd || s.segments.len() != self.schema.k())
                || w.baseline.len() != self.schema.baseline_dim()
            {
                return Err(Error::Compat(format!(
                    "{}: window inputs do not match the model's schema",
                    w.episode_id
                )));
            }
        }
        let bound = self.bind(tape, binder);
        let embedded = self.embed_batch(tape, binder, windows, train, updates)?;
        let mut out = Vec::with_capacity(windows.len());
        for (w, a) in windows.iter().zip(&embedded) {
            let (states, traces) = self.encode(tape, &bound, a, w, record)?;
            let [w_h, w_x, w_b, b] = bound.head;
            let base = tape.constant(Tensor::vector(w.baseline.clone()));
            let wb = tape.matvec(w_b, base)?;
            let fixed = tape.add(wb, b)?;
            let mut outputs = Vec::with_capacity(states.len());
            for (s, h) in states.into_iter().enumerate() {
                let x = tape.constant(Tensor::vector(w.steps[s].x.clone()));
                let zh = tape.matvec(w_h, h)?;
                let zx = tape.matvec(w_x, x)?;
                let z = tape.add(zh, zx)?;
                let z = tape.add(z, fixed)?;
                outputs.push(if self.cfg.task.is_regression() { z } else { tape.softmax(z)? });
            }
            out.push(WindowOutput { outputs, traces });
        }
        Ok(out)
    }

    /// Encoder input at step `tau` (1-based) given conditioning states
    /// `cond[k] = h_k`, `cond[0]` the zero state.
    fn step_input(
        &self,
        tape: &mut Tape,
        p: &BoundNet,
        a: &[Var],
        w: &PreparedWindow,
        tau: usize,
        cond: &[Var],
        trace: &mut Option<AttentionTrace>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let v = cfg.variant;
        let a_t = a[tau - 1];
        if !v.has_attention() {
            return Ok(a_t);
        }
        let (k, d) = (cfg.k(), cfg.embed.d_emb);
        let wp = tau.min(cfg.window);
        let off = tau - wp;
        let steps = tape.concat(&a[off..tau], 0)?;
        let steps = tape.reshape(steps, &[wp, cfg.a_dim()])?;
        let h_prev = cond[tau - 1];

        let beta = match &p.channel {
            Some(ch) => {
                let e = channel_energy(tape, ch, h_prev, steps, k, d)?;
                Some(tape.softmax(e)?)
            }
            None => None,
        };
        if let (Some(t), Some(b)) = (trace.as_mut(), beta) {
            t.beta = Some(values(tape, b));
        }
        let g = build_guidance(&w.lab_steps, &w.intervention_steps, tau, cfg.window);
        let phi_or_all = |phi: Vec<usize>| {
            if phi.is_empty() && cfg.empty_fallback {
                (1..=wp).collect()
            } else {
                phi
            }
        };

        let mut parts = Vec::new();
        if let Some(tp) = &p.time {
            let e = time_energy(tape, tp, h_prev, None, steps)?;
            let alpha = tape.softmax(e)?;
            if let Some(t) = trace.as_mut() {
                t.alpha = Some(values(tape, alpha));
            }
            let b = if v == Variant::Raim0 { beta } else { None };
            parts.push(context(tape, alpha, b, steps, k, d)?);
        }
        if let Some(lp) = &p.lab {
            let phi = phi_or_all(active_set(&g.lab, cfg.n1));
            let (gamma, z) = guided_context(tape, lp, h_prev, None, steps, &phi, beta, k, d)?;
            if let Some(t) = trace.as_mut() {
                t.gamma_lab = Some(values(tape, gamma));
                t.phi_lab = Some(phi);
            }
            parts.push(z);
        }
        if let Some(ip) = &p.int {
            let m = last_marked(&g.intervention);
            let h_m = match m {
                Some(m) => cond[(off + m).min(tau - 1)],
                None => tape.constant(Tensor::zeros(&[cfg.hidden])),
            };
            let phi = phi_or_all(active_set(&g.intervention, cfg.n2));
            let (gamma, z) = guided_context(tape, ip, h_prev, Some(h_m), steps, &phi, beta, k, d)?;
            if let Some(t) = trace.as_mut() {
                t.gamma_int = Some(values(tape, gamma));
                t.phi_int = Some(phi);
                t.m = m;
            }
            parts.push(z);
        }
        if cfg.concat_step_input {
            parts.push(a_t);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts, 0)
        }
    }

    /// States fed to the head at every step, plus attention traces.
    fn encode(
        &self,
        tape: &mut Tape,
        p: &BoundNet,
        a: &[Var],
        w: &PreparedWindow,
        record: bool,
    ) -> Result<(Vec<Var>, Vec<AttentionTrace>)> {
        let t_len = a.len();
        let mut traces = Vec::new();
        if self.cfg.variant == Variant::CnnOnly {
            let mut sum = a[0];
            let mut states = vec![sum];
            for (tau, &a_t) in a.iter().enumerate().skip(1) {
                sum = tape.add(sum, a_t)?;
                states.push(tape.scale(sum, 1.0 / (tau + 1) as f64));
            }
            return Ok((states, traces));
        }
        let hidden = self.cfg.hidden;
        let zero = LstmState::zero(tape, hidden);
        let mut cond = vec![zero.h];
        let record = record && self.cfg.variant.has_attention();

        if !self.cfg.bidirectional {
            let mut state: Vec<LstmState> = vec![zero; p.layers.len()];
            let mut outs = Vec::with_capacity(t_len);
            for tau in 1..=t_len {
                let mut tr = record.then(AttentionTrace::default);
                let mut x = self.step_input(tape, p, a, w, tau, &cond, &mut tr)?;
                for (l, layer) in p.layers.iter().enumerate() {
                    state[l] = lstm_step(tape, &layer.fwd, x, state[l])?;
                    x = state[l].h;
                }
                cond.push(x);
                outs.push(x);
                traces.extend(tr);
            }
            return Ok((outs, traces));
        }

        // Attention runs on layer 0's forward states; backward passes and
        // upper layers see the whole window.
        let mut inputs = Vec::with_capacity(t_len);
        let mut s = zero;
        let mut fwd = Vec::with_capacity(t_len);
        for tau in 1..=t_len {
            let mut tr = record.then(AttentionTrace::default);
            let x = self.step_input(tape, p, a, w, tau, &cond, &mut tr)?;
            s = lstm_step(tape, &p.layers[0].fwd, x, s)?;
            cond.push(s.h);
            fwd.push(s.h);
            inputs.push(x);
            traces.extend(tr);
        }
        let mut seq = self.join_backward(tape, &p.layers[0], &inputs, fwd, zero)?;
        for layer in &p.layers[1..] {
            let mut s = zero;
            let mut fwd = Vec::with_capacity(t_len);
            for &x in &seq {
                s = lstm_step(tape, &layer.fwd, x, s)?;
                fwd.push(s.h);
            }
            seq = self.join_backward(tape, layer, &seq, fwd, zero)?;
        }
        Ok((seq, traces))
    }

    fn join_backward(
        &self,
        tape: &mut Tape,
        layer: &BoundLayer,
        inputs: &[Var],
        fwd: Vec<Var>,
        zero: LstmState,
    ) -> Result<Vec<Var>> {
        let bwd_p = layer.bwd.as_ref().expect("bidirectional layers own a backward cell");
        let mut bwd = vec![zero.h; inputs.len()];
        let mut s = zero;
        for t in (0..inputs.len()).rev() {
            s = lstm_step(tape, bwd_p, inputs[t], s)?;
            bwd[t] = s.h;
        }
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat(&[f, b], 0))
            .collect()
    }
}
