//! Multi-channel attention over the last `W'` embedded steps, plus the
//! lab- and intervention-guided variants restricted to active sets.
//!
//! `steps` is always `S [W' x K*d]`, one row per step (oldest first), each
//! row the concatenation of the K channel embeddings.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Energy MLP parameters for one branch. Time-style branches hold
/// `W_h [W x |h|]`, `w_a [K*d]`, `b [W]`; the channel branch holds
/// `W_h [K x |h|]`, `w_a [W*d]`, `b [K]`. The intervention branch adds
/// `W_m [W x |h|]`.
#[derive(Clone, Debug)]
pub struct EnergyParams {
    pub w_h: ParamId,
    pub w_a: ParamId,
    pub b: ParamId,
    pub w_m: Option<ParamId>,
}

fn init<R: Rng>(store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<ParamId> {
    store.add_uniform(name, shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl EnergyParams {
    pub fn time<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        w: usize,
        a_dim: usize,
        h: usize,
        with_m: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w_h = init(store, &format!("{prefix}.W_h"), &[w, h], h, rng)?;
        let w_m = if with_m {
            Some(init(store, &format!("{prefix}.W_m"), &[w, h], h, rng)?)
        } else {
            None
        };
        Ok(EnergyParams {
            w_h,
            w_a: init(store, &format!("{prefix}.w_a"), &[a_dim], a_dim, rng)?,
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[w]))?,
            w_m,
        })
    }

    pub fn channel<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        w: usize,
        d: usize,
        h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EnergyParams {
            w_h: init(store, &format!("{prefix}.W_h"), &[k, h], h, rng)?,
            w_a: init(store, &format!("{prefix}.w_a"), &[w * d], w * d, rng)?,
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[k]))?,
            w_m: None,
        })
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder) -> Bound {
        Bound {
            w_h: binder.var(tape, self.w_h),
            w_a: binder.var(tape, self.w_a),
            b: binder.var(tape, self.b),
            w_m: self.w_m.map(|m| binder.var(tape, m)),
        }
    }
}

/// Energy parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub w_h: Var,
    pub w_a: Var,
    pub b: Var,
    pub w_m: Option<Var>,
}

fn rows_of(tape: &Tape, steps: Var) -> Result<(usize, usize)> {
    match tape.shape(steps) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape("attention", format!("steps must be [W', |a|], got {s:?}"))),
    }
}

/// `s_j = tanh((W_h h)_j + (W_m h_m)_j + S_j . w_a + b_j)` for `j < W'`,
/// using the first `W'` positional rows. `h_m` is required iff the branch
/// owns `W_m`.
pub fn time_energy(tape: &mut Tape, p: &Bound, h_prev: Var, h_m: Option<Var>, steps: Var) -> Result<Var> {
    let (wp, _) = rows_of(tape, steps)?;
    let w = tape.shape(p.b)[0];
    if wp == 0 || wp > w {
        return Err(Error::shape("time_energy", format!("{wp} steps for window {w}")));
    }
    let hh = tape.matvec(p.w_h, h_prev)?;
    let mut e = tape.slice(hh, 0, 0, wp)?;
    match (p.w_m, h_m) {
        (Some(w_m), Some(h_m)) => {
            let mm = tape.matvec(w_m, h_m)?;
            let mm = tape.slice(mm, 0, 0, wp)?;
            e = tape.add(e, mm)?;
        }
        (None, None) => {}
        _ => return Err(Error::Contract("W_m and h_m must be given together".into())),
    }
    let sa = tape.matvec(steps, p.w_a)?;
    e = tape.add(e, sa)?;
    let b = tape.slice(p.b, 0, 0, wp)?;
    e = tape.add(e, b)?;
    Ok(tape.tanh(e))
}

/// Re-arranges `S [W' x K*d]` into channel vectors `[K x W'*d]`, row `k`
/// being channel `k`'s embeddings concatenated over time.
pub fn channel_vectors(tape: &mut Tape, steps: Var, k: usize, d: usize) -> Result<Var> {
    let (wp, a) = rows_of(tape, steps)?;
    if a != k * d {
        return Err(Error::shape("channel_vectors", format!("row width {a} for K={k}, d={d}")));
    }
    let mut idx = Vec::with_capacity(wp * a);
    for c in 0..k {
        for j in 0..wp {
            for e in 0..d {
                idx.push(j * a + c * d + e);
            }
        }
    }
    tape.gather(steps, idx, &[k, wp * d])
}

/// Channel energies `tanh((W_h h)_k + a^{ch_k} . w_a[..W'd] + b_k)`.
pub fn channel_energy(tape: &mut Tape, p: &Bound, h_prev: Var, steps: Var, k: usize, d: usize) -> Result<Var> {
    let (wp, _) = rows_of(tape, steps)?;
    let cv = channel_vectors(tape, steps, k, d)?;
    let wa = tape.slice(p.w_a, 0, 0, wp * d)?;
    let sa = tape.matvec(cv, wa)?;
    let hh = tape.matvec(p.w_h, h_prev)?;
    let e = tape.add(hh, sa)?;
    let e = tape.add(e, p.b)?;
    Ok(tape.tanh(e))
}

/// `Z = sum_j w_j (beta (*) S_j)`; without `beta`, plain `sum_j w_j S_j`.
/// Works for both alpha and the masked gamma.
pub fn context(tape: &mut Tape, weights: Var, beta: Option<Var>, steps: Var, k: usize, d: usize) -> Result<Var> {
    let (wp, a) = rows_of(tape, steps)?;
    if tape.shape(weights) != [wp] {
        return Err(Error::shape(
            "context",
            format!("weights {:?} for {wp} steps", tape.shape(weights)),
        ));
    }
    let row = tape.reshape(weights, &[1, wp])?;
    let z = tape.matmul(row, steps)?;
    match beta {
        None => tape.reshape(z, &[a]),
        Some(beta) => {
            let blocks = tape.reshape(z, &[k, d])?;
            let scaled = tape.scale_rows(blocks, beta)?;
            tape.reshape(scaled, &[a])
        }
    }
}

/// 1-based steps within `n/2` of a marked column, clipped to `[1, W']`.
pub fn active_set(row: &[bool], n: usize) -> Vec<usize> {
    let r = (n / 2) as i64;
    let wp = row.len() as i64;
    let marked: Vec<i64> = (1..=wp).filter(|&j| row[j as usize - 1]).collect();
    (1..=wp)
        .filter(|&j| marked.iter().any(|&m| (j - m).abs() <= r))
        .map(|j| j as usize)
        .collect()
}

pub fn mask_of(phi: &[usize], wp: usize) -> Vec<bool> {
    let mut m = vec![false; wp];
    for &j in phi {
        m[j - 1] = true;
    }
    m
}

/// Most recent intervention column, 1-based.
pub fn last_marked(row: &[bool]) -> Option<usize> {
    row.iter().rposition(|&b| b).map(|i| i + 1)
}

/// Guided weights and context: full-length energies, masked softmax over
/// `phi`, and an all-zero result when `phi` is empty.
pub fn guided_context(
    tape: &mut Tape,
    p: &Bound,
    h_prev: Var,
    h_m: Option<Var>,
    steps: Var,
    phi: &[usize],
    beta: Option<Var>,
    k: usize,
    d: usize,
) -> Result<(Var, Var)> {
    let (wp, _) = rows_of(tape, steps)?;
    let e = time_energy(tape, p, h_prev, h_m, steps)?;
    let mask = mask_of(phi, wp);
    let gamma = tape.masked_softmax(e, Some(&mask), true)?;
    let z = context(tape, gamma, beta, steps, k, d)?;
    Ok((gamma, z))
}

/// Attention weights at one step, as plain values for export.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AttentionTrace {
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub gamma_lab: Option<Vec<f64>>,
    pub phi_lab: Option<Vec<usize>>,
    pub gamma_int: Option<Vec<f64>>,
    pub phi_int: Option<Vec<usize>>,
    pub m: Option<usize>,
}

impl AttentionTrace {
    pub fn is_empty(&self) -> bool {
        *self == AttentionTrace::default()
    }

    /// `A = beta^T alpha` as K rows of W' weights.
    pub fn joint(&self) -> Option<Vec<Vec<f64>>> {
        let (a, b) = (self.alpha.as_ref()?, self.beta.as_ref()?);
        Some(b.iter().map(|bk| a.iter().map(|aj| bk * aj).collect()).collect())
    }
}
