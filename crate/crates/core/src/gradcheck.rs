//! Finite-difference suite over every differentiable primitive and a tiny
//! end-to-end RAIM-3, plus the fixtures it runs on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, Binder, BnMode, OpKind, Padding, Tape, Tensor, Var};
use crate::embed::{ChannelEmbed, CnnSpec, EmbedConfig, EmbedKind};
use crate::error::Result;
use crate::ingest::{ChannelKind, ChannelSpec, Schema, Timeline, VarSpec};
use crate::model::{Model, ModelConfig, PreparedStep, PreparedWindow, Task, Variant};

pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-6;

/// Two channels (a 12-sample waveform and one vital), one chart variable,
/// one lab.
pub fn tiny_schema() -> Schema {
    let var = |name: &str| VarSpec {
        name: name.into(),
        default: 0.0,
        mean: 0.0,
        scale: 1.0,
    };
    Schema {
        channels: vec![
            ChannelSpec {
                name: "wave".into(),
                kind: ChannelKind::Waveform,
                rate_hz: 0.2,
                mean: 0.0,
                scale: 1.0,
            },
            ChannelSpec {
                name: "vital".into(),
                kind: ChannelKind::Vital,
                rate_hz: 1.0 / 60.0,
                mean: 0.0,
                scale: 1.0,
            },
        ],
        chart: vec![var("hr")],
        labs: vec![var("ph")],
        genders: vec!["F".into(), "M".into()],
        ethnicities: vec!["a".into(), "b".into()],
        min_age: 18.0,
    }
}

/// K=2, d_emb=4, |h|=8, W=4; a one-layer batchnormed CNN on the waveform.
pub fn tiny_config(schema: &Schema, variant: Variant, task: Task) -> ModelConfig {
    let tl = Timeline::fast();
    let cnn = CnnSpec {
        kernels: vec![3],
        strides: vec![1],
        widths: vec![2],
        pools: vec![2],
        batchnorm: true,
    };
    ModelConfig {
        embed: EmbedConfig {
            d_emb: 4,
            channels: vec![
                ChannelEmbed {
                    name: schema.channels[0].name.clone(),
                    kind: EmbedKind::Cnn(cnn),
                },
                ChannelEmbed {
                    name: schema.channels[1].name.clone(),
                    kind: EmbedKind::Linear,
                },
            ],
        },
        hidden: 8,
        window: 4,
        ..ModelConfig::desk(schema, &tl, variant, task)
    }
}

/// A random standardized window of `steps` steps with the given events.
pub fn random_window(
    schema: &Schema,
    steps: usize,
    labs: &[i64],
    interventions: &[i64],
    seed: u64,
) -> PreparedWindow {
    let tl = Timeline::fast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let steps = (0..steps)
        .map(|_| PreparedStep {
            segments: (0..schema.k())
                .map(|k| Tensor::vector(r(schema.samples_per_step(k, &tl))))
                .collect(),
            x: r(schema.x_dim()),
        })
        .collect();
    PreparedWindow {
        episode_id: format!("fixture-{seed}"),
        patient_id: format!("p{seed}"),
        index: 0,
        steps,
        baseline: r(schema.baseline_dim()),
        lab_steps: labs.to_vec(),
        intervention_steps: interventions.to_vec(),
        decomp: (seed % 2) as u8,
        los_class: (seed % 9) as u8 + 1,
        los_days: 1.0 + seed as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Fixed random projection to a scalar.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand_t(&mut rng, &shape));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = |s: &[usize]| rand_t(rng, s);
    // Max-pool inputs with distinct values so no window holds a tie.
    let pool_in = Tensor::vector((0..12).map(|i| ((i * 7) % 12) as f64 * 0.1 - 0.5).collect());
    vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        })),
        ("matvec", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| {
            let y = t.matvec(v[0], v[1])?;
            project(t, y, 2)
        })),
        ("outer", vec![r(&[3]), r(&[4])], Box::new(|t, v| {
            let y = t.outer(v[0], v[1])?;
            project(t, y, 3)
        })),
        ("add_sub_mul_scale", vec![r(&[5]), r(&[5])], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            let y = t.scale(m, -1.5);
            project(t, y, 4)
        })),
        ("bias_add", vec![r(&[3, 4]), r(&[3])], Box::new(|t, v| {
            let y = t.bias_add(v[0], v[1])?;
            project(t, y, 5)
        })),
        ("scale_rows", vec![r(&[3, 4]), r(&[3])], Box::new(|t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            project(t, y, 6)
        })),
        ("conv1d", vec![r(&[2, 9]), r(&[3, 2, 4])], Box::new(|t, v| {
            let y = t.conv1d(v[0], v[1], 2, Padding::Same)?;
            project(t, y, 7)
        })),
        ("maxpool1d", vec![pool_in.reshaped(&[1, 12]).expect("12 values")], Box::new(|t, v| {
            let y = t.maxpool1d(v[0], 3, 2)?;
            project(t, y, 8)
        })),
        ("batchnorm1d", vec![r(&[3, 6]), r(&[3]), r(&[3])], Box::new(|t, v| {
            let (y, _) = t.batchnorm1d(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?;
            project(t, y, 9)
        })),
        ("relu", vec![r(&[6])], Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 10)
        })),
        ("tanh", vec![r(&[6])], Box::new(|t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 11)
        })),
        ("sigmoid", vec![r(&[6])], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 12)
        })),
        ("masked_softmax", vec![r(&[6])], Box::new(|t, v| {
            let y = t.masked_softmax(v[0], Some(&[true, false, true, true, false, true]), false)?;
            project(t, y, 13)
        })),
        ("concat_slice_gather_reshape", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(c, 1, 1, 5)?;
            let g = t.gather(s, vec![7, 0, 3, 3, 5, 1], &[3, 2])?;
            let y = t.reshape(g, &[6])?;
            project(t, y, 14)
        })),
        ("sum_mean", vec![r(&[4])], Box::new(|t, v| {
            let s = t.sum(v[0]);
            let m = t.mean(v[0]);
            let both = t.mul(s, m)?;
            Ok(t.sum(both))
        })),
        ("cross_entropy", vec![r(&[4])], Box::new(|t, v| {
            let p = t.softmax(v[0])?;
            t.cross_entropy(p, 2)
        })),
    ]
}

fn record(checks: &mut Vec<CheckResult>, prefix: &str, report: Vec<(String, f64)>) {
    for (name, err) in report {
        checks.push(CheckResult {
            name: format!("{prefix}/{name}"),
            max_error: err,
            passed: err <= TOLERANCE,
        });
    }
}

/// Runs every check. `fault` flips the sign of one op's backward rule, for
/// testing that the suite notices.
pub fn run_suite(fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checks = Vec::new();
    for (name, tensors, build) in primitive_cases(&mut rng) {
        let names: Vec<String> = (0..tensors.len()).map(|i| format!("input{i}")).collect();
        let inputs: Vec<(&str, Tensor)> = names.iter().map(String::as_str).zip(tensors).collect();
        let report = check_gradients(
            &inputs,
            |t, v| {
                t.inject_fault(fault);
                build(t, v)
            },
            H,
        )?;
        record(&mut checks, name, report);
    }
    record(&mut checks, "raim3", end_to_end(Variant::Raim3, fault)?);
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        checks,
    })
}

/// Gradient error for every trainable parameter of a tiny model on two
/// windows, batchnorm in training mode.
pub fn end_to_end(variant: Variant, fault: Option<OpKind>) -> Result<Vec<(String, f64)>> {
    let schema = tiny_schema();
    let tl = Timeline::fast();
    let model = Model::new(tiny_config(&schema, variant, Task::Decomp), &schema, &tl, 11)?;
    let windows = [
        random_window(&schema, 6, &[2, 5], &[3], 1),
        random_window(&schema, 6, &[1], &[2, 6], 2),
    ];
    let named: Vec<(String, Tensor)> = model
        .store
        .trainable_ids()
        .map(|id| (model.store.name(id).to_string(), model.store.get(id).clone()))
        .collect();
    let inputs: Vec<(&str, Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    check_gradients(
        &inputs,
        |t, v| {
            t.inject_fault(fault);
            let mut binder = Binder::preset(&model.store, v);
            let refs: Vec<&PreparedWindow> = windows.iter().collect();
            let outs = model.forward(t, &mut binder, &refs, true, false, &mut Vec::new())?;
            let mut losses = Vec::new();
            for (o, w) in outs.iter().zip(&windows) {
                losses.push(model.window_loss(t, o, w)?);
            }
            let all = t.concat(&losses, 0)?;
            Ok(t.sum(all))
        },
        H,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let report = run_suite(None).unwrap();
        let failures = report.failures();
        assert!(failures.is_empty(), "{failures:?}");
        assert!(report.checks.iter().any(|c| c.name == "raim3/attention.int.W_m"));
    }

    #[test]
    fn sign_flip_is_reported_by_name() {
        let report = run_suite(Some(OpKind::Sigmoid)).unwrap();
        assert!(!report.passed());
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"sigmoid/input0"), "{names:?}");
        assert!(names.iter().any(|n| n.starts_with("raim3/encoder.")), "{names:?}");
    }
}
