//! Fused gated-recurrent-unit recurrence with backpropagation through time.
//!
//! The input projection `x·W_ihᵀ + b_ih` is an ordinary matmul on the tape;
//! this op only covers the sequential part, which would otherwise put
//! several nodes per time step on the tape.

use super::{matmul_nn, matmul_nt, matmul_tn, Op, Var};
use crate::error::{Error, Result};

pub(crate) struct GruCache {
    batch: usize,
    steps: usize,
    hidden: usize,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
    h: Vec<f64>,
}

pub(crate) struct GruGrads {
    pub d_gi: Vec<f64>,
    pub d_whh: Vec<f64>,
    pub d_bhh: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the recurrence from a zero initial state.
///
/// `gi`: `[batch, steps, 3·hidden]` input projections in gate order
/// (reset, update, candidate); `whh`: `[3·hidden, hidden]`; `bhh`:
/// `[3·hidden]`. Returns hidden states `[batch, steps, hidden]`.
pub fn gru_recurrence(gi: &Var, whh: &Var, bhh: &Var) -> Result<Var> {
    gi.check_same_tape(whh)?;
    gi.check_same_tape(bhh)?;
    let (gs, ws, bs) = (gi.shape(), whh.shape(), bhh.shape());
    let bad = || Error::InvalidShape {
        op: "gru",
        detail: format!("gi {gs:?}, whh {ws:?}, bhh {bs:?}"),
    };
    if gs.len() != 3 || ws.len() != 2 || gs[2] != ws[0] || ws[0] != 3 * ws[1] || bs != [ws[0]] {
        return Err(bad());
    }
    let (batch, steps, hidden) = (gs[0], gs[1], ws[1]);
    let h3 = 3 * hidden;
    let tape = gi.tape().clone();
    let (cache, rg) = {
        let nodes = tape.nodes();
        let (giv, wv, bv) = (&nodes[gi.id()].value, &nodes[whh.id()].value, &nodes[bhh.id()].value);
        let size = batch * steps * hidden;
        let mut c = GruCache {
            batch,
            steps,
            hidden,
            r: vec![0.0; size],
            z: vec![0.0; size],
            n: vec![0.0; size],
            ghn: vec![0.0; size],
            h: vec![0.0; size],
        };
        let mut h_prev = vec![0.0; batch * hidden];
        let mut gh = vec![0.0; batch * h3];
        for t in 0..steps {
            for b in 0..batch {
                gh[b * h3..(b + 1) * h3].copy_from_slice(bv);
            }
            matmul_nt(batch, hidden, h3, &h_prev, wv, &mut gh);
            for b in 0..batch {
                let gi_row = &giv[(b * steps + t) * h3..(b * steps + t + 1) * h3];
                let gh_row = &gh[b * h3..(b + 1) * h3];
                let o = (b * steps + t) * hidden;
                for j in 0..hidden {
                    let r = sigmoid(gi_row[j] + gh_row[j]);
                    let z = sigmoid(gi_row[hidden + j] + gh_row[hidden + j]);
                    let ghn = gh_row[2 * hidden + j];
                    let n = (gi_row[2 * hidden + j] + r * ghn).tanh();
                    let hp = h_prev[b * hidden + j];
                    let h = (1.0 - z) * n + z * hp;
                    c.r[o + j] = r;
                    c.z[o + j] = z;
                    c.n[o + j] = n;
                    c.ghn[o + j] = ghn;
                    c.h[o + j] = h;
                    h_prev[b * hidden + j] = h;
                }
            }
        }
        let rg = nodes[gi.id()].requires_grad || nodes[whh.id()].requires_grad || nodes[bhh.id()].requires_grad;
        (c, rg)
    };
    let value = cache.h.clone();
    Ok(tape.push(
        vec![batch, steps, hidden],
        value,
        Op::Gru {
            gi: gi.id(),
            whh: whh.id(),
            bhh: bhh.id(),
            cache: Box::new(cache),
        },
        rg,
    ))
}

pub(crate) fn backward(c: &GruCache, whh: &[f64], g: &[f64]) -> GruGrads {
    let (batch, steps, hidden) = (c.batch, c.steps, c.hidden);
    let h3 = 3 * hidden;
    let mut d_gi = vec![0.0; batch * steps * h3];
    let mut d_whh = vec![0.0; h3 * hidden];
    let mut d_bhh = vec![0.0; h3];
    let mut dh = vec![0.0; batch * hidden];
    let mut dgh = vec![0.0; batch * h3];
    let mut h_prev = vec![0.0; batch * hidden];
    for t in (0..steps).rev() {
        for b in 0..batch {
            for j in 0..hidden {
                h_prev[b * hidden + j] = if t == 0 {
                    0.0
                } else {
                    c.h[(b * steps + t - 1) * hidden + j]
                };
            }
        }
        let mut dh_next = vec![0.0; batch * hidden];
        for b in 0..batch {
            let o = (b * steps + t) * hidden;
            for j in 0..hidden {
                let d = dh[b * hidden + j] + g[o + j];
                let (r, z, n, ghn) = (c.r[o + j], c.z[o + j], c.n[o + j], c.ghn[o + j]);
                let hp = h_prev[b * hidden + j];
                let dn = d * (1.0 - z);
                let dz = d * (hp - n);
                dh_next[b * hidden + j] = d * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * ghn;
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                let gi_o = (b * steps + t) * h3;
                d_gi[gi_o + j] = dr_pre;
                d_gi[gi_o + hidden + j] = dz_pre;
                d_gi[gi_o + 2 * hidden + j] = dn_pre;
                dgh[b * h3 + j] = dr_pre;
                dgh[b * h3 + hidden + j] = dz_pre;
                dgh[b * h3 + 2 * hidden + j] = dn_pre * r;
            }
        }
        for b in 0..batch {
            for (acc, v) in d_bhh.iter_mut().zip(&dgh[b * h3..(b + 1) * h3]) {
                *acc += v;
            }
        }
        matmul_tn(h3, batch, hidden, &dgh, &h_prev, &mut d_whh);
        matmul_nn(batch, h3, hidden, &dgh, whh, &mut dh_next);
        dh = dh_next;
    }
    GruGrads { d_gi, d_whh, d_bhh }
}
