//! Central finite differences, the reference every backward rule is
//! checked against.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `max(|a - f|, |a - f| / max(|f|, 1))`, maximized over coordinates.
pub fn grad_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, f)| {
            let abs = (a - f).abs();
            abs.max(abs / f.abs().max(1.0))
        })
        .fold(0.0, f64::max)
}

/// Worst gradient error of a tape-built scalar function, per input.
///
/// `build` receives the tape and one leaf per input and must return a
/// one-element output.
pub fn check_gradients<F>(inputs: &[(&str, Tensor)], build: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, t))| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = Vec::with_capacity(inputs.len());
    for (k, (name, x)) in inputs.iter().enumerate() {
        let eval = |probe: &Tensor| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, (_, v))| t.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let o = build(&mut t, &vs)?;
            Ok(t.value(o).item())
        };
        let numeric = finite_diff_grad(eval, x, h)?;
        report.push((name.to_string(), grad_error(&analytic[k], &numeric)));
    }
    Ok(report)
}
