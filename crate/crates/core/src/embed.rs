//! Per-channel embedders mapping one step's raw segment to a `d_emb` vector.
//!
//! Waveforms go through a conv -> batchnorm -> relu -> maxpool stack, global
//! average pooling and a linear projection. Vitals use a single linear map
//! (or pass through unchanged when their length already equals `d_emb`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Binder, BnMode, ParamId, ParamStore, Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ingest::{ChannelKind, Schema, Timeline};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub widths: Vec<usize>,
    pub pools: Vec<usize>,
    pub batchnorm: bool,
}

impl CnnSpec {
    /// Five layers, kernels 10 down to 3.
    pub fn paper() -> Self {
        CnnSpec {
            kernels: vec![10, 7, 5, 3, 3],
            strides: vec![1; 5],
            widths: vec![16, 32, 32, 64, 64],
            pools: vec![4; 5],
            batchnorm: true,
        }
    }

    /// A strided two-layer stack cheap enough for desk-scale cohorts.
    pub fn fast() -> Self {
        CnnSpec {
            kernels: vec![10, 5],
            strides: vec![10, 1],
            widths: vec![4, 4],
            pools: vec![4, 1],
            batchnorm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kernels.len();
        if n == 0 || self.strides.len() != n || self.widths.len() != n || self.pools.len() != n {
            return Err(Error::Config(
                "cnn kernels, strides, widths and pools must be non-empty and of equal length".into(),
            ));
        }
        if [&self.kernels, &self.strides, &self.widths, &self.pools]
            .iter()
            .any(|v| v.contains(&0))
        {
            return Err(Error::Config("cnn sizes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EmbedKind {
    Cnn(CnnSpec),
    Linear,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEmbed {
    pub name: String,
    #[serde(flatten)]
    pub kind: EmbedKind,
}

/// Embedder layout. Output blocks follow the order of `channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub d_emb: usize,
    pub channels: Vec<ChannelEmbed>,
}

impl EmbedConfig {
    /// CNN for waveforms, linear maps for vitals, in schema order.
    pub fn for_schema(schema: &Schema, d_emb: usize, cnn: &CnnSpec) -> Self {
        EmbedConfig {
            d_emb,
            channels: schema
                .channels
                .iter()
                .map(|c| ChannelEmbed {
                    name: c.name.clone(),
                    kind: match c.kind {
                        ChannelKind::Waveform => EmbedKind::Cnn(cnn.clone()),
                        ChannelKind::Vital => EmbedKind::Linear,
                    },
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    weight: ParamId,
    bias: ParamId,
    bn: Option<Bn>,
    stride: usize,
    pool: usize,
}

#[derive(Clone, Debug)]
enum Net {
    Cnn {
        layers: Vec<ConvLayer>,
        proj_w: ParamId,
        proj_b: ParamId,
    },
    Linear {
        w: ParamId,
        b: ParamId,
    },
    Identity,
}

#[derive(Clone, Debug)]
struct ChannelNet {
    schema_index: usize,
    input_len: usize,
    net: Net,
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    d_emb: usize,
    channels: Vec<ChannelNet>,
}

impl Embedder {
    /// Registers parameters named `embed.{channel}.*` in `store`.
    pub fn new<R: Rng>(
        cfg: &EmbedConfig,
        schema: &Schema,
        timeline: &Timeline,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_emb;
        if d == 0 {
            return Err(Error::Config("d_emb must be at least 1".into()));
        }
        for spec in &schema.channels {
            if !cfg.channels.iter().any(|c| c.name == spec.name) {
                return Err(Error::Config(format!("no embedder configured for channel `{}`", spec.name)));
            }
        }
        if cfg.channels.len() != schema.k() {
            return Err(Error::Config(format!(
                "{} embedders configured for {} channels",
                cfg.channels.len(),
                schema.k()
            )));
        }
        let mut channels = Vec::with_capacity(cfg.channels.len());
        for c in &cfg.channels {
            let k = schema
                .channel_index(&c.name)
                .ok_or_else(|| Error::Config(format!("embedder for unknown channel `{}`", c.name)))?;
            let n = schema.samples_per_step(k, timeline);
            let p = format!("embed.{}", c.name);
            let net = match &c.kind {
                EmbedKind::Identity => {
                    if n != d {
                        return Err(Error::Config(format!(
                            "identity embedder for `{}` needs d_emb = {n}, got {d}",
                            c.name
                        )));
                    }
                    Net::Identity
                }
                EmbedKind::Linear => {
                    let bound = 1.0 / (n as f64).sqrt();
                    Net::Linear {
                        w: store.add_uniform(&format!("{p}.linear.weight"), &[d, n], bound, rng)?,
                        b: store.add(&format!("{p}.linear.bias"), Tensor::zeros(&[d]))?,
                    }
                }
                EmbedKind::Cnn(spec) => {
                    spec.validate()?;
                    let mut layers = Vec::new();
                    let mut cin = 1;
                    for l in 0..spec.kernels.len() {
                        let (k, cout) = (spec.kernels[l], spec.widths[l]);
                        let name = format!("{p}.conv{l}");
                        let bound = 1.0 / ((cin * k) as f64).sqrt();
                        let weight = store.add_uniform(&format!("{name}.weight"), &[cout, cin, k], bound, rng)?;
                        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
                        let bn = if spec.batchnorm {
                            Some(Bn {
                                gamma: store.add(&format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0))?,
                                beta: store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[cout]))?,
                                mean: store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]))?,
                                var: store.add_buffer(&format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0))?,
                            })
                        } else {
                            None
                        };
                        layers.push(ConvLayer {
                            name,
                            weight,
                            bias,
                            bn,
                            stride: spec.strides[l],
                            pool: spec.pools[l],
                        });
                        cin = cout;
                    }
                    let bound = 1.0 / (cin as f64).sqrt();
                    Net::Cnn {
                        layers,
                        proj_w: store.add_uniform(&format!("{p}.proj.weight"), &[d, cin], bound, rng)?,
                        proj_b: store.add(&format!("{p}.proj.bias"), Tensor::zeros(&[d]))?,
                    }
                }
            };
            channels.push(ChannelNet {
                schema_index: k,
                input_len: n,
                net,
            });
        }
        Ok(Embedder { d_emb: d, channels })
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    /// Schema index of the channel in output block `c`.
    pub fn schema_index(&self, c: usize) -> usize {
        self.channels[c].schema_index
    }

    /// Embeds the segments of output block `c` (rank-1, standardized) for a
    /// whole minibatch. Training-mode batchnorm normalizes over every
    /// segment and position in the batch and reports running-stat updates.
    pub fn embed_channel(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        c: usize,
        segments: &[Var],
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<Var>> {
        let ch = &self.channels[c];
        for &s in segments {
            if tape.shape(s) != [ch.input_len] {
                return Err(Error::shape(
                    "embed",
                    format!("segment of shape {:?}, expected [{}]", tape.shape(s), ch.input_len),
                ));
            }
        }
        match &ch.net {
            Net::Identity => Ok(segments.to_vec()),
            Net::Linear { w, b } => {
                let (w, b) = (binder.var(tape, *w), binder.var(tape, *b));
                segments
                    .iter()
                    .map(|&s| {
                        let y = tape.matvec(w, s)?;
                        tape.add(y, b)
                    })
                    .collect()
            }
            Net::Cnn { layers, proj_w, proj_b } => {
                let mut h: Vec<Var> = segments
                    .iter()
                    .map(|&s| tape.reshape(s, &[1, ch.input_len]))
                    .collect::<Result<_>>()?;
                for layer in layers {
                    let (w, b) = (binder.var(tape, layer.weight), binder.var(tape, layer.bias));
                    for v in h.iter_mut() {
                        let y = tape.conv1d(*v, w, layer.stride, Padding::Same)?;
                        *v = tape.bias_add(y, b)?;
                    }
                    if let Some(bn) = &layer.bn {
                        h = self.batchnorm(tape, binder, bn, &h, train, updates)?;
                    }
                    for v in h.iter_mut() {
                        let r = tape.relu(*v);
                        *v = if layer.pool > 1 {
                            tape.maxpool1d(r, layer.pool, layer.pool).map_err(|e| {
                                Error::shape("embed", format!("{}: segment too short ({e})", layer.name))
                            })?
                        } else {
                            r
                        };
                    }
                }
                let (pw, pb) = (binder.var(tape, *proj_w), binder.var(tape, *proj_b));
                h.into_iter()
                    .map(|v| {
                        let len = tape.shape(v)[1];
                        let avg = tape.constant(Tensor::full(&[len], 1.0 / len as f64));
                        let pooled = tape.matvec(v, avg)?;
                        let y = tape.matvec(pw, pooled)?;
                        tape.add(y, pb)
                    })
                    .collect()
            }
        }
    }

    fn batchnorm(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        bn: &Bn,
        h: &[Var],
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<Var>> {
        let (gamma, beta) = (binder.var(tape, bn.gamma), binder.var(tape, bn.beta));
        if !train {
            let store = binder.store();
            let (mean, var) = (store.get(bn.mean).data(), store.get(bn.var).data());
            return h
                .iter()
                .map(|&v| {
                    let mode = BnMode::Eval { mean, var, eps: BN_EPS };
                    Ok(tape.batchnorm1d(v, gamma, beta, mode)?.0)
                })
                .collect();
        }
        let lens: Vec<usize> = h.iter().map(|&v| tape.shape(v)[1]).collect();
        let joined = tape.concat(h, 1)?;
        let (y, stats) = tape.batchnorm1d(joined, gamma, beta, BnMode::Train { eps: BN_EPS })?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                mean: bn.mean,
                var: bn.var,
                stats,
            });
        }
        let mut out = Vec::with_capacity(h.len());
        let mut start = 0;
        for len in lens {
            out.push(tape.slice(y, 1, start, start + len)?);
            start += len;
        }
        Ok(out)
    }

    /// Embeds one step; `segments` are in schema order. Returns `a_t` of
    /// length `K * d_emb` with blocks in configured order.
    pub fn embed_step(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        segments: &[Var],
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        if segments.len() != self.channels.len() {
            return Err(Error::shape(
                "embed_step",
                format!("{} segments for {} channels", segments.len(), self.channels.len()),
            ));
        }
        let mut blocks = Vec::with_capacity(self.channels.len());
        for c in 0..self.channels.len() {
            let seg = segments[self.channels[c].schema_index];
            blocks.push(self.embed_channel(tape, binder, c, &[seg], train, updates)?[0]);
        }
        tape.concat(&blocks, 0)
    }
}

/// `running = (1 - m) running + m batch` for every update.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, new) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(new) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::ingest::ChannelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_channel_schema() -> Schema {
        let mut s = Schema::fast();
        s.channels = vec![
            ChannelSpec {
                name: "ecg".into(),
                kind: ChannelKind::Waveform,
                rate_hz: 0.5,
                mean: 0.0,
                scale: 1.0,
            },
            ChannelSpec {
                name: "pulse".into(),
                kind: ChannelKind::Vital,
                rate_hz: 0.1,
                mean: 0.0,
                scale: 1.0,
            },
        ];
        s
    }

    fn small_cnn(bn: bool) -> CnnSpec {
        CnnSpec {
            kernels: vec![4, 3],
            strides: vec![2, 1],
            widths: vec![3, 2],
            pools: vec![2, 1],
            batchnorm: bn,
        }
    }

    fn build(cfg: &EmbedConfig, schema: &Schema, seed: u64) -> (Embedder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Embedder::new(cfg, schema, &Timeline::fast(), &mut store, &mut rng).unwrap();
        (e, store)
    }

    fn seg(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_segment_yields_projection_bias() {
        let schema = two_channel_schema();
        let cfg = EmbedConfig::for_schema(&schema, 4, &small_cnn(false));
        let (e, mut store) = build(&cfg, &schema, 1);
        let pb = store.id("embed.ecg.proj.bias").unwrap();
        *store.get_mut(pb) = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(Tensor::zeros(&[30]));
        let y = e.embed_channel(&mut tape, &mut binder, 0, &[x], false, &mut vec![]).unwrap();
        assert_eq!(tape.value(y[0]).data(), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn paper_preset_gives_128() {
        let mut schema = two_channel_schema();
        schema.channels[0].rate_hz = 2000.0 / 60.0;
        let cfg = EmbedConfig::for_schema(&schema, 128, &CnnSpec::paper());
        let (e, store) = build(&cfg, &schema, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(seg(2000, 3));
        let y = e.embed_channel(&mut tape, &mut binder, 0, &[x], false, &mut vec![]).unwrap();
        assert_eq!(tape.shape(y[0]), &[128]);
    }

    #[test]
    fn short_segment_names_layer() {
        let mut schema = two_channel_schema();
        schema.channels[0].rate_hz = 20.0 / 60.0;
        let cfg = EmbedConfig::for_schema(&schema, 4, &CnnSpec::paper());
        let (e, store) = build(&cfg, &schema, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(seg(20, 3));
        let err = e
            .embed_channel(&mut tape, &mut binder, 0, &[x], false, &mut vec![])
            .unwrap_err()
            .to_string();
        assert!(err.contains("embed.ecg.conv"), "{err}");
    }

    #[test]
    fn vital_linear_and_identity() {
        let schema = two_channel_schema();
        let mut cfg = EmbedConfig::for_schema(&schema, 6, &small_cnn(false));
        let (e, store) = build(&cfg, &schema, 4);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(Tensor::zeros(&[6]));
        let y = e.embed_channel(&mut tape, &mut binder, 1, &[x], false, &mut vec![]).unwrap();
        assert!(tape.value(y[0]).data().iter().all(|v| *v == 0.0));

        cfg.channels[1].kind = EmbedKind::Identity;
        let (e, store) = build(&cfg, &schema, 4);
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(seg(6, 5));
        let y = e.embed_channel(&mut tape, &mut binder, 1, &[x], false, &mut vec![]).unwrap();
        assert_eq!(tape.value(y[0]), tape.value(x));

        cfg.d_emb = 5;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Embedder::new(&cfg, &schema, &Timeline::fast(), &mut store, &mut rng).is_err());
    }

    #[test]
    fn step_shape_and_channel_order() {
        let schema = two_channel_schema();
        let cfg = EmbedConfig::for_schema(&schema, 4, &small_cnn(false));
        let (e, store) = build(&cfg, &schema, 6);
        let mut rev = cfg.clone();
        rev.channels.reverse();
        let (er, mut store_r) = build(&rev, &schema, 6);
        store_r.load_named(store.named()).unwrap();

        let mut tape = Tape::new();
        let segs = [tape.constant(seg(30, 7)), tape.constant(seg(6, 8))];
        let mut b1 = Binder::new(&store, false);
        let a = e.embed_step(&mut tape, &mut b1, &segs, false, &mut vec![]).unwrap();
        let mut b2 = Binder::new(&store_r, false);
        let ar = er.embed_step(&mut tape, &mut b2, &segs, false, &mut vec![]).unwrap();
        assert_eq!(tape.shape(a), &[8]);
        let (a, ar) = (tape.value(a).data(), tape.value(ar).data());
        assert_eq!(&a[..4], &ar[4..]);
        assert_eq!(&a[4..], &ar[..4]);
    }

    #[test]
    fn missing_channel_is_config_error() {
        let schema = two_channel_schema();
        let mut cfg = EmbedConfig::for_schema(&schema, 4, &small_cnn(false));
        cfg.channels.pop();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Embedder::new(&cfg, &schema, &Timeline::fast(), &mut store, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn blocks_depend_only_on_their_channel() {
        let schema = two_channel_schema();
        let cfg = EmbedConfig::for_schema(&schema, 4, &small_cnn(false));
        let (e, store) = build(&cfg, &schema, 9);
        let run = |pulse_seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut b = Binder::new(&store, false);
            let segs = [tape.constant(seg(30, 1)), tape.constant(seg(6, pulse_seed))];
            let a = e.embed_step(&mut tape, &mut b, &segs, false, &mut vec![]).unwrap();
            tape.value(a).data().to_vec()
        };
        let (x, y) = (run(1), run(2));
        assert_eq!(&x[..4], &y[..4]);
        assert_ne!(&x[4..], &y[4..]);
    }

    /// Finite-difference check of the whole embedder with respect to every
    /// parameter and the inputs, batchnorm in training mode over a batch.
    #[test]
    fn embedder_gradients() {
        let schema = two_channel_schema();
        let cfg = EmbedConfig::for_schema(&schema, 3, &small_cnn(true));
        let (e, store) = build(&cfg, &schema, 10);
        let names: Vec<String> = store.ids().filter(|&id| store.is_trainable(id)).map(|id| store.name(id).to_string()).collect();
        let mut inputs: Vec<(&str, Tensor)> = names
            .iter()
            .map(|n| (n.as_str(), store.get(store.id(n).unwrap()).clone()))
            .collect();
        inputs.push(("seg0", seg(30, 11)));
        inputs.push(("seg1", seg(30, 12)));
        inputs.push(("vital", seg(6, 13)));
        let n_params = names.len();
        let report = check_gradients(
            &inputs,
            |tape, vars| {
                let mut b = Binder::preset(&store, &vars[..n_params]);
                let mut ups = Vec::new();
                let mut out = e.embed_channel(tape, &mut b, 0, &vars[n_params..n_params + 2], true, &mut ups)?;
                out.extend(e.embed_channel(tape, &mut b, 1, &vars[n_params + 2..], true, &mut ups)?);
                let cat = tape.concat(&out, 0)?;
                let t = tape.tanh(cat);
                Ok(tape.sum(t))
            },
            1e-5,
        )
        .unwrap();
        for (name, err) in report {
            assert!(err <= 1e-4, "{name}: {err:e}");
        }
    }
}
