//! Composite layers built from tape primitives. Their reverse rules come for
//! free from the primitives they are assembled from.

use super::tape::{Tape, Var};
use crate::error::Result;

/// `x · w + b` with `w: [in, out]`, `b: [out]`.
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = t.matmul(x, w)?;
    match b {
        Some(b) => t.add_row(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[in, 3H]`, gate order reset | update | candidate.
    pub w_ih: Var,
    /// `[H, 3H]`.
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

/// One GRU update on row-batched `x: [n, in]`, `h: [n, H]`.
pub fn gru_cell(t: &mut Tape, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let hid = t.shape(h)[1];
    let gi = linear(t, x, w.w_ih, Some(w.b_ih))?;
    let gh = linear(t, h, w.w_hh, Some(w.b_hh))?;
    let i_r = t.slice(gi, 1, 0, hid)?;
    let i_z = t.slice(gi, 1, hid, hid)?;
    let i_n = t.slice(gi, 1, 2 * hid, hid)?;
    let h_r = t.slice(gh, 1, 0, hid)?;
    let h_z = t.slice(gh, 1, hid, hid)?;
    let h_n = t.slice(gh, 1, 2 * hid, hid)?;
    let r = t.add(i_r, h_r)?;
    let r = t.sigmoid(r);
    let z = t.add(i_z, h_z)?;
    let z = t.sigmoid(z);
    let rn = t.mul(r, h_n)?;
    let n = t.add(i_n, rn)?;
    let n = t.tanh(n);
    // h' = n + z ⊙ (h − n)
    let d = t.sub(h, n)?;
    let zd = t.mul(z, d)?;
    t.add(n, zd)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[in, 4H]`, gate order input | forget | cell | output.
    pub w_ih: Var,
    /// `[H, 4H]`.
    pub w_hh: Var,
    pub b: Var,
}

/// One LSTM update; returns `(h', c')`.
pub fn lstm_cell(t: &mut Tape, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hid = t.shape(h)[1];
    let gi = linear(t, x, w.w_ih, Some(w.b))?;
    let gh = t.matmul(h, w.w_hh)?;
    let gates = t.add(gi, gh)?;
    let i = t.slice(gates, 1, 0, hid)?;
    let f = t.slice(gates, 1, hid, hid)?;
    let g = t.slice(gates, 1, 2 * hid, hid)?;
    let o = t.slice(gates, 1, 3 * hid, hid)?;
    let i = t.sigmoid(i);
    let f = t.sigmoid(f);
    let g = t.tanh(g);
    let o = t.sigmoid(o);
    let fc = t.mul(f, c)?;
    let ig = t.mul(i, g)?;
    let c2 = t.add(fc, ig)?;
    let tc = t.tanh(c2);
    let h2 = t.mul(o, tc)?;
    Ok((h2, c2))
}
