//! LSTM cell with gate order input, forget, candidate, output.

use rand::Rng;

use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, forget bias 1, other biases 0.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let w_ih = store.add_uniform(&format!("{prefix}.W_ih"), &[4 * hidden, input], 1.0 / (input as f64).sqrt(), rng)?;
        let w_hh = store.add_uniform(&format!("{prefix}.W_hh"), &[4 * hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng)?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let b = store.add(&format!("{prefix}.b"), Tensor::vector(b))?;
        Ok(LstmParams {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        })
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> BoundLstm {
        BoundLstm {
            w_ih: binder.var(tape, self.w_ih),
            w_hh: binder.var(tape, self.w_hh),
            b: binder.var(tape, self.b),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zero(tape: &mut Tape, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[hidden])),
            c: tape.constant(Tensor::zeros(&[hidden])),
        }
    }
}

pub fn lstm_step(tape: &mut Tape, p: &BoundLstm, x: Var, s: LstmState) -> Result<LstmState> {
    let input = tape.shape(p.w_ih)[1];
    if tape.shape(x) != [input] {
        return Err(Error::shape(
            "lstm_step",
            format!("input {:?}, layer expects [{input}]", tape.shape(x)),
        ));
    }
    let h = p.hidden;
    let zx = tape.matvec(p.w_ih, x)?;
    let zh = tape.matvec(p.w_hh, s.h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, p.b)?;
    let zi = tape.slice(z, 0, 0, h)?;
    let zf = tape.slice(z, 0, h, 2 * h)?;
    let zg = tape.slice(z, 0, 2 * h, 3 * h)?;
    let zo = tape.slice(z, 0, 3 * h, 4 * h)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, s.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}
