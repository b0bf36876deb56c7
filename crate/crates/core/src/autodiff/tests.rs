use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum against fixed random coefficients so every output
/// coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn assert_grads(report: Vec<(String, f64)>, tol: f64) {
    for (name, err) in report {
        assert!(err <= tol, "{name}: gradient error {err:e} > {tol:e}");
    }
}

#[test]
fn matmul_identity_and_product() {
    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(2));
    let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = t.matmul(i, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [("a", rand_tensor(&mut rng, &[3, 4])), ("b", rand_tensor(&mut rng, &[4, 2]))];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            project(t, p, 7)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(report, 1e-6);
}

#[test]
fn matvec_outer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        ("w", rand_tensor(&mut rng, &[3, 4])),
        ("x", rand_tensor(&mut rng, &[4])),
        ("u", rand_tensor(&mut rng, &[3])),
    ];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let y = t.matvec(v[0], v[1])?;
            let o = t.outer(y, v[2])?;
            project(t, o, 3)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(report, 1e-6);
}

#[test]
fn conv1d_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let k = t.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv1d(x, k, 1, Padding::Same).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0]);

    let x = t.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
    let y = t.conv1d(x, k, 1, Padding::Valid).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 5.0, 7.0]);
}

#[test]
fn conv1d_same_pads_extra_zero_on_the_right() {
    // k=2 over length 3 needs one zero; it goes on the right
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let k = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 10.0]).unwrap());
    let y = t.conv1d(x, k, 1, Padding::Same).unwrap();
    assert_eq!(t.value(y).data(), &[21.0, 32.0, 3.0]);
}

#[test]
fn conv1d_valid_rejects_long_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    let k = t.constant(Tensor::zeros(&[1, 1, 4]));
    assert!(matches!(
        t.conv1d(x, k, 1, Padding::Valid),
        Err(crate::Error::Shape { .. })
    ));
}

#[test]
fn conv1d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (2, Padding::Valid), (3, Padding::Valid)] {
        let inputs = [("x", rand_tensor(&mut rng, &[2, 11])), ("kernel", rand_tensor(&mut rng, &[3, 2, 4]))];
        let report = check_gradients(
            &inputs,
            |t, v| {
                let y = t.conv1d(v[0], v[1], stride, padding)?;
                project(t, y, 11)
            },
            1e-6,
        )
        .unwrap();
        assert_grads(report, 1e-6);
    }
}

#[test]
fn maxpool_examples_and_ties() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(1, 4, vec![1.0, 3.0, 2.0, 5.0]).unwrap(), true);
    let y = t.maxpool1d(x, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 5.0]);

    let c = t.leaf(Tensor::full(&[1, 4], 2.0), true);
    let y = t.maxpool1d(c, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 2.0]);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(c).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);

    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2]));
    assert!(t.maxpool1d(x, 3, 1).is_err());
}

#[test]
fn maxpool_gradient_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [("x", rand_tensor(&mut rng, &[2, 9]))];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let y = t.maxpool1d(v[0], 3, 2)?;
            project(t, y, 5)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(report, 1e-6);
}

#[test]
fn batchnorm_eval_identity_and_constant_batch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    let (y, stats) = t
        .batchnorm1d(
            x,
            g,
            b,
            BnMode::Eval {
                mean: &[0.0, 0.0],
                var: &[1.0, 1.0],
                eps: 0.0,
            },
        )
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(t.value(y), t.value(x));

    let c = t.constant(Tensor::full(&[2, 4], 3.0));
    let shift = t.constant(Tensor::vector(vec![0.25, -1.0]));
    let (y, stats) = t.batchnorm1d(c, g, shift, BnMode::Train { eps: 1e-5 }).unwrap();
    assert_eq!(t.value(y).data(), &[0.25, 0.25, 0.25, 0.25, -1.0, -1.0, -1.0, -1.0]);
    assert_eq!(stats.unwrap().mean, vec![3.0, 3.0]);
}

#[test]
fn batchnorm_single_sample_is_identity() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let g = t.constant(Tensor::full(&[2], 3.0));
    let b = t.constant(Tensor::full(&[2], 1.0));
    let (y, stats) = t.batchnorm1d(x, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
    assert_eq!(y, x);
    assert!(stats.is_none());
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        ("x", rand_tensor(&mut rng, &[3, 6])),
        ("gamma", rand_tensor(&mut rng, &[3])),
        ("beta", rand_tensor(&mut rng, &[3])),
    ];
    let train = check_gradients(
        &inputs,
        |t, v| {
            let (y, _) = t.batchnorm1d(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?;
            project(t, y, 9)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(train, 1e-5);
    let eval = check_gradients(
        &inputs,
        |t, v| {
            let mode = BnMode::Eval {
                mean: &[0.1, -0.2, 0.3],
                var: &[0.5, 1.5, 2.0],
                eps: 1e-5,
            };
            let (y, _) = t.batchnorm1d(v[0], v[1], v[2], mode)?;
            project(t, y, 9)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(eval, 1e-5);
}

#[test]
fn activation_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = t.constant(Tensor::scalar(0.0));
    let th = t.tanh(z);
    assert_eq!(t.value(th).item(), 0.0);
    let sg = t.sigmoid(z);
    assert_eq!(t.value(sg).item(), 0.5);
}

#[test]
fn relu_kink_has_zero_subgradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, 1.0]), true);
    let r = t.relu(x);
    let s = t.sum(r);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn activation_gradients() {
    let inputs = [("x", Tensor::vector(vec![-1.3, -0.4, 0.2, 0.9, 2.1]))];
    for which in 0..3 {
        let report = check_gradients(
            &inputs,
            |t, v| {
                let y = match which {
                    0 => t.relu(v[0]),
                    1 => t.tanh(v[0]),
                    _ => t.sigmoid(v[0]),
                };
                project(t, y, 13)
            },
            1e-6,
        )
        .unwrap();
        assert_grads(report, 1e-6);
    }
}

#[test]
fn masked_softmax_examples() {
    let mut t = Tape::new();
    let s = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let p = t.masked_softmax(s, None, false).unwrap();
    for v in t.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = t.constant(Tensor::vector(vec![5.0, 1.0, 1.0]));
    let p = t.masked_softmax(s, Some(&[true, false, false]), false).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 0.0, 0.0]);

    let none = [false, false, false];
    assert!(matches!(
        t.masked_softmax(s, Some(&none), false),
        Err(crate::Error::Domain { .. })
    ));
    let z = t.masked_softmax(s, Some(&none), true).unwrap();
    assert_eq!(t.value(z).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn masked_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [("s", rand_tensor(&mut rng, &[6]))];
    for mask in [None, Some([true, false, true, true, false, true])] {
        let report = check_gradients(
            &inputs,
            |t, v| {
                let p = t.masked_softmax(v[0], mask.as_ref().map(|m| &m[..]), false)?;
                project(t, p, 17)
            },
            1e-6,
        )
        .unwrap();
        assert_grads(report, 1e-6);
    }
}

#[test]
fn structural_examples() {
    let mut t = Tape::new();
    let u = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let v = t.constant(Tensor::vector(vec![2.0, 3.0]));
    let o = t.outer(u, v).unwrap();
    assert_eq!(t.value(o).shape(), &[2, 2]);
    assert_eq!(t.value(o).data(), &[2.0, 3.0, 0.0, 0.0]);

    let a = t.constant(Tensor::vector(vec![1.0]));
    let b = t.constant(Tensor::vector(vec![2.0]));
    let c = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0]);

    let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let n = t.constant(Tensor::matrix(2, 1, vec![9.0, 8.0]).unwrap());
    let c = t.concat(&[m, n], 1).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let s = t.slice(c, 1, 1, 3).unwrap();
    assert_eq!(t.value(s).data(), &[2.0, 9.0, 4.0, 8.0]);
    let r = t.slice(c, 0, 1, 2).unwrap();
    assert_eq!(t.value(r).data(), &[3.0, 4.0, 8.0]);

    assert!(t.concat(&[m, a], 0).is_err());
    let mean = t.mean(m);
    assert_eq!(t.value(mean).item(), 2.5);
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        ("a", rand_tensor(&mut rng, &[2, 3])),
        ("b", rand_tensor(&mut rng, &[2, 2])),
        ("bias", rand_tensor(&mut rng, &[2])),
        ("w", rand_tensor(&mut rng, &[2])),
    ];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let c = t.bias_add(c, v[2])?;
            let c = t.scale_rows(c, v[3])?;
            let s = t.slice(c, 1, 1, 4)?;
            let r = t.reshape(s, &[6])?;
            let head = t.slice(r, 0, 0, 3)?;
            let tail = t.slice(r, 0, 3, 6)?;
            let d = t.sub(head, tail)?;
            let e = t.mul(d, head)?;
            let e = t.scale(e, 0.7);
            let row = t.concat(&[e, tail], 0)?;
            let m = t.mean(row);
            let p = project(t, row, 19)?;
            t.add(p, m)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(report, 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let l = t.cross_entropy(p, 0).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let p = t.constant(Tensor::vector(vec![0.5, 0.5]));
    let l = t.cross_entropy(p, 1).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(t.cross_entropy(p, 2), Err(crate::Error::Index { .. })));
    // floor keeps the loss finite at p = 0
    let p = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let l = t.cross_entropy(p, 1).unwrap();
    assert!((t.value(l).item() - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [("logits", rand_tensor(&mut rng, &[5]))];
    let report = check_gradients(
        &inputs,
        |t, v| {
            let p = t.softmax(v[0])?;
            t.cross_entropy(p, 3)
        },
        1e-6,
    )
    .unwrap();
    assert_grads(report, 1e-6);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 1.0, 1.0]), true);
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_nan() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    let n = t.leaf(Tensor::scalar(f64::NAN), true);
    assert!(matches!(t.backward(n), Err(crate::Error::NonFinite(_))));
}

#[test]
fn injected_fault_is_detected() {
    let inputs = [("x", Tensor::vector(vec![0.3, -0.7]))];
    let build = |t: &mut Tape, v: &[Var]| {
        t.inject_fault(Some(OpKind::Tanh));
        let y = t.tanh(v[0]);
        project(t, y, 23)
    };
    let report = check_gradients(&inputs, build, 1e-6).unwrap();
    assert!(report[0].1 > 0.1);
}

fn deterministic_grads(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let x = t.leaf(rand_tensor(&mut rng, &[2, 16]), true);
    let k = t.leaf(rand_tensor(&mut rng, &[3, 2, 5]), true);
    let y = t.conv1d(x, k, 2, Padding::Same).unwrap();
    let y = t.tanh(y);
    let y = t.maxpool1d(y, 2, 2).unwrap();
    let f = t.reshape(y, &[12]).unwrap();
    let p = t.softmax(f).unwrap();
    let l = t.cross_entropy(p, 4).unwrap();
    t.backward(l).unwrap();
    let mut out = t.grad(x).unwrap().into_data();
    out.extend(t.grad(k).unwrap().into_data());
    out
}

#[test]
fn tape_is_deterministic() {
    let a = deterministic_grads(42);
    let b = deterministic_grads(42);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn conv_same_length_law(len in 1usize..=64, stride in 1usize..=2, k in 1usize..=11) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, len]));
        let w = t.constant(Tensor::zeros(&[1, 1, k]));
        let y = t.conv1d(x, w, stride, Padding::Same).unwrap();
        prop_assert_eq!(t.shape(y)[1], len.div_ceil(stride));
    }

    #[test]
    fn masked_softmax_normalizes(
        s in proptest::collection::vec(-30.0f64..30.0, 1..16),
        mask_bits in proptest::collection::vec(any::<bool>(), 16),
        shift in -50.0f64..50.0,
    ) {
        let n = s.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        mask[0] = true;
        let mut t = Tape::new();
        let sv = t.constant(Tensor::vector(s.clone()));
        let p = t.masked_softmax(sv, Some(&mask), false).unwrap();
        let pv = t.value(p).clone();
        let total: f64 = pv.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for (i, m) in mask.iter().enumerate() {
            if !m { prop_assert_eq!(pv.data()[i], 0.0); }
        }
        let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let sv2 = t.constant(Tensor::vector(shifted));
        let p2 = t.masked_softmax(sv2, Some(&mask), false).unwrap();
        prop_assert!(t.value(p2).max_abs_diff(&pv) <= 1e-12);
    }
}
