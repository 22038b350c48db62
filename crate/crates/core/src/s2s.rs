//! Single-layer GRU decoder with location-aware attention.
//!
//! All token arguments are label indices (the inventory without blank, see
//! [`TokenInventory::label_index`](crate::text::TokenInventory::label_index)).
//! The first step is fed the start token; targets end with eos.
//!
//! One step, with `f` the `T×D` encoder features and `α` the previous
//! attention weights:
//!
//! ```text
//! e_t  = vᵀ tanh(K f_t + U (F * α)_t + Q s + b)
//! α'   = softmax(e)            (padded frames excluded)
//! g    = Σ_t α'_t f_t
//! s'   = GRU([emb(prev); g], s)
//! logp = log_softmax(W [s'; g] + b_out)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{gru_cell, linear, GruWeights};
use crate::numerics::{Array, Graph, ParamStore, Var, LOG_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct S2sConfig {
    pub feat_dim: usize,
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    /// Odd width keeps the location features aligned with the frames.
    pub loc_width: usize,
    pub loc_channels: usize,
}

impl S2sConfig {
    pub fn toy(feat_dim: usize, vocab: usize) -> Self {
        Self {
            feat_dim,
            vocab,
            emb_dim: 32,
            hidden: 64,
            attn_dim: 32,
            loc_width: 11,
            loc_channels: 8,
        }
    }

    pub fn reference(feat_dim: usize, vocab: usize) -> Self {
        Self {
            hidden: 1024,
            attn_dim: 256,
            ..Self::toy(feat_dim, vocab)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Sum,
    /// Mean over decoding steps.
    Mean,
}

pub fn init_s2s_params(cfg: &S2sConfig, params: &mut ParamStore, rng: &mut impl rand::Rng) {
    let p = "head.s2s";
    params.init_uniform(&format!("{p}.emb"), &[cfg.vocab, cfg.emb_dim], 0.1, rng);
    params.init_glorot(&format!("{p}.key"), &[cfg.feat_dim, cfg.attn_dim], rng);
    params.init_glorot(&format!("{p}.query"), &[cfg.hidden, cfg.attn_dim], rng);
    params.init_uniform(&format!("{p}.loc_conv"), &[cfg.loc_channels, cfg.loc_width], 0.1, rng);
    params.init_glorot(&format!("{p}.loc_proj"), &[cfg.loc_channels, cfg.attn_dim], rng);
    params.init_const(&format!("{p}.attn_b"), &[cfg.attn_dim], 0.0);
    params.init_glorot(&format!("{p}.v"), &[cfg.attn_dim, 1], rng);
    let x = cfg.emb_dim + cfg.feat_dim;
    params.init_glorot(&format!("{p}.gru.w_ih"), &[x, 3 * cfg.hidden], rng);
    params.init_glorot(&format!("{p}.gru.w_hh"), &[cfg.hidden, 3 * cfg.hidden], rng);
    params.init_const(&format!("{p}.gru.b_ih"), &[3 * cfg.hidden], 0.0);
    params.init_const(&format!("{p}.gru.b_hh"), &[3 * cfg.hidden], 0.0);
    params.init_glorot(&format!("{p}.out.w"), &[cfg.hidden + cfg.feat_dim, cfg.vocab], rng);
    params.init_const(&format!("{p}.out.b"), &[cfg.vocab], 0.0);
}

/// Additive attention mask `[1, T]`: 0 on valid frames, floor on padding.
pub fn frame_mask(frames: usize, valid: usize) -> Array {
    let data = (0..frames).map(|t| if t < valid { 0.0 } else { LOG_FLOOR }).collect();
    Array::matrix(1, frames, data).unwrap()
}

/// Encoder-side values shared by every step of one utterance.
#[derive(Clone, Copy, Debug)]
struct Memory {
    f: Var,
    keys: Var,
}

fn memory(g: &mut Graph, f: Var) -> Result<Memory> {
    let k = g.param("head.s2s.key")?;
    let keys = g.matmul(f, k)?;
    Ok(Memory { f, keys })
}

struct StepOut {
    logp: Var,
    hidden: Var,
    attn: Var,
}

fn step_node(
    g: &mut Graph,
    cfg: &S2sConfig,
    mem: Memory,
    mask: &Array,
    prev: usize,
    hidden: Var,
    attn: Var,
) -> Result<StepOut> {
    let frames = g.shape(mem.f)[0];
    let p = "head.s2s";
    let a_col = g.reshape(attn, &[frames, 1])?;
    let conv = g.param(&format!("{p}.loc_conv"))?;
    let loc = g.conv1d(a_col, conv, None, 1, cfg.loc_width / 2)?;
    let loc_proj = g.param(&format!("{p}.loc_proj"))?;
    let loc = g.matmul(loc, loc_proj)?;
    let qw = g.param(&format!("{p}.query"))?;
    let q = g.matmul(hidden, qw)?;
    let q = g.reshape(q, &[cfg.attn_dim])?;
    let b = g.param(&format!("{p}.attn_b"))?;
    let q = g.add(q, b)?;
    let e = g.add(mem.keys, loc)?;
    let e = g.add_row(e, q)?;
    let e = g.tanh(e);
    let v = g.param(&format!("{p}.v"))?;
    let e = g.matmul(e, v)?;
    let e = g.reshape(e, &[1, frames])?;
    let e = g.add_const(e, mask)?;
    let a = g.softmax(e);
    let ctx = g.matmul(a, mem.f)?;
    let emb = g.param(&format!("{p}.emb"))?;
    let x = g.embedding(emb, &[prev])?;
    let x = g.concat(&[x, ctx], 1)?;
    let w = GruWeights {
        w_ih: g.param(&format!("{p}.gru.w_ih"))?,
        w_hh: g.param(&format!("{p}.gru.w_hh"))?,
        b_ih: g.param(&format!("{p}.gru.b_ih"))?,
        b_hh: g.param(&format!("{p}.gru.b_hh"))?,
    };
    let h = gru_cell(g, x, hidden, &w)?;
    let o = g.concat(&[h, ctx], 1)?;
    let ow = g.param(&format!("{p}.out.w"))?;
    let ob = g.param(&format!("{p}.out.b"))?;
    let o = linear(g, o, ow, Some(ob))?;
    let logp = g.log_softmax(o);
    Ok(StepOut {
        logp,
        hidden: h,
        attn: a,
    })
}

fn initial_attention(frames: usize, valid: usize) -> Array {
    let data = (0..frames)
        .map(|t| if t < valid { 1.0 / valid as f64 } else { 0.0 })
        .collect();
    Array::matrix(1, frames, data).unwrap()
}

/// Teacher-forced loss `−Σ log p(target_n | target_<n, f)`. `target` ends
/// with eos; `start` is the label index fed at the first step. Frames at or
/// beyond `valid` are treated as padding.
pub fn s2s_loss(
    g: &mut Graph,
    cfg: &S2sConfig,
    f: Var,
    valid: usize,
    start: usize,
    target: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::InvalidToken(bad));
    }
    let frames = g.shape(f)[0];
    let valid = valid.min(frames);
    let mem = memory(g, f)?;
    let mask = frame_mask(frames, valid);
    let mut hidden = g.constant(Array::zeros(&[1, cfg.hidden]));
    let mut attn = g.constant(initial_attention(frames, valid));
    let mut prev = start;
    let mut picked = Vec::with_capacity(target.len());
    for &y in target {
        let s = step_node(g, cfg, mem, &mask, prev, hidden, attn)?;
        picked.push(g.gather(s.logp, &[y])?);
        hidden = s.hidden;
        attn = s.attn;
        prev = y;
    }
    let all = g.concat(&picked, 0)?;
    let total = match reduction {
        Reduction::Sum => g.sum(all),
        Reduction::Mean => g.mean(all),
    };
    Ok(g.scale(total, -1.0))
}

/// Value-semantic decoder state for beam search.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub weights: Vec<f64>,
    pub hidden: Vec<f64>,
    pub step: usize,
}

/// Inference-time stepper over one utterance's features.
pub struct S2sScorer<'p> {
    params: &'p ParamStore,
    cfg: S2sConfig,
    f: Array,
    keys: Array,
    mask: Array,
    valid: usize,
}

impl<'p> S2sScorer<'p> {
    pub fn new(params: &'p ParamStore, cfg: S2sConfig, f: Array) -> Result<Self> {
        let valid = f.rows();
        Self::with_padding(params, cfg, f, valid)
    }

    pub fn with_padding(params: &'p ParamStore, cfg: S2sConfig, f: Array, valid: usize) -> Result<Self> {
        if f.ndim() != 2 || f.cols() != cfg.feat_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.feat_dim,
                got: f.cols(),
            });
        }
        let mut g = Graph::inference(params);
        let fv = g.constant(f.clone());
        let mem = memory(&mut g, fv)?;
        let keys = g.value(mem.keys).clone();
        let frames = f.rows();
        let valid = valid.min(frames);
        Ok(Self {
            params,
            cfg,
            f,
            keys,
            mask: frame_mask(frames, valid),
            valid,
        })
    }

    pub fn frames(&self) -> usize {
        self.f.rows()
    }

    pub fn init(&self) -> AttentionState {
        AttentionState {
            weights: initial_attention(self.frames(), self.valid).into_data(),
            hidden: vec![0.0; self.cfg.hidden],
            step: 0,
        }
    }

    /// Log-posterior over the label space after feeding `prev`.
    pub fn step(&self, state: &AttentionState, prev: usize) -> Result<(Vec<f64>, AttentionState)> {
        if state.weights.len() != self.frames() || state.hidden.len() != self.cfg.hidden {
            return Err(Error::StateMismatch(format!(
                "state for {} frames / hidden {}, decoder has {} / {}",
                state.weights.len(),
                state.hidden.len(),
                self.frames(),
                self.cfg.hidden
            )));
        }
        if prev >= self.cfg.vocab {
            return Err(Error::InvalidToken(prev));
        }
        let mut g = Graph::inference(self.params);
        let mem = Memory {
            f: g.constant(self.f.clone()),
            keys: g.constant(self.keys.clone()),
        };
        let h = g.constant(Array::matrix(1, self.cfg.hidden, state.hidden.clone())?);
        let a = g.constant(Array::matrix(1, self.frames(), state.weights.clone())?);
        let s = step_node(&mut g, &self.cfg, mem, &self.mask, prev, h, a)?;
        Ok((
            g.value(s.logp).data().to_vec(),
            AttentionState {
                weights: g.value(s.attn).data().to_vec(),
                hidden: g.value(s.hidden).data().to_vec(),
                step: state.step + 1,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{logsumexp, rng};
    use rand::Rng;

    fn setup(frames: usize, seed: u64) -> (S2sConfig, ParamStore, Array) {
        let cfg = S2sConfig {
            feat_dim: 5,
            vocab: 4,
            emb_dim: 3,
            hidden: 6,
            attn_dim: 4,
            loc_width: 3,
            loc_channels: 2,
        };
        let mut p = ParamStore::new();
        let mut r = rng::stream(seed, "s2s", 0);
        init_s2s_params(&cfg, &mut p, &mut r);
        let f = Array::new(
            vec![frames, 5],
            (0..frames * 5).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (cfg, p, f)
    }

    #[test]
    fn single_frame_attention_is_one() {
        let (cfg, p, f) = setup(1, 0);
        let s = S2sScorer::new(&p, cfg, f).unwrap();
        let (logp, st) = s.step(&s.init(), 0).unwrap();
        assert_eq!(st.weights, vec![1.0]);
        assert!(logsumexp(&logp).abs() < 1e-8);
    }

    #[test]
    fn weights_normalize_and_steps_repeat() {
        let (cfg, p, f) = setup(9, 1);
        let s = S2sScorer::new(&p, cfg, f).unwrap();
        let mut st = s.init();
        for tok in [0, 2, 1] {
            let (a, s1) = s.step(&st, tok).unwrap();
            let (b, s2) = s.step(&st, tok).unwrap();
            assert_eq!((a, &s1), (b, &s2));
            assert!((s1.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!(s1.weights.iter().all(|&w| w >= 0.0));
            st = s1;
        }
        let bad = AttentionState {
            weights: vec![1.0],
            ..st
        };
        assert!(matches!(s.step(&bad, 0), Err(Error::StateMismatch(_))));
    }

    #[test]
    fn zero_location_weights_give_content_attention() {
        let (cfg, mut p, f) = setup(7, 2);
        p.insert("head.s2s.loc_conv", Array::zeros(&[2, 3]));
        let s = S2sScorer::new(&p, cfg, f.clone()).unwrap();
        let st = s.init();
        let (_, next) = s.step(&st, 1).unwrap();
        // content-only scores from the raw parameter arrays
        let key = p.get("head.s2s.key").unwrap();
        let v = p.get("head.s2s.v").unwrap();
        let b = p.get("head.s2s.attn_b").unwrap();
        let e: Vec<f64> = (0..7)
            .map(|t| {
                (0..4)
                    .map(|j| {
                        let k: f64 = (0..5).map(|i| f.get2(t, i) * key.get2(i, j)).sum();
                        (k + b.data()[j]).tanh() * v.get2(j, 0)
                    })
                    .sum()
            })
            .collect();
        let z = logsumexp(&e);
        for t in 0..7 {
            assert!((next.weights[t] - (e[t] - z).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_frames_do_not_change_attention() {
        let (cfg, p, f) = setup(4, 3);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|t| f.row(t).to_vec()).collect();
        rows.extend(std::iter::repeat(vec![0.0; 5]).take(3));
        let padded = Array::from_rows(&rows).unwrap();
        let a = S2sScorer::new(&p, cfg, f).unwrap();
        let b = S2sScorer::with_padding(&p, cfg, padded, 4).unwrap();
        let (la, sa) = a.step(&a.init(), 0).unwrap();
        let (lb, sb) = b.step(&b.init(), 0).unwrap();
        for t in 0..4 {
            assert!((sa.weights[t] - sb.weights[t]).abs() < 1e-12);
        }
        assert!(sb.weights[4..].iter().all(|&w| w == 0.0));
        for (x, y) in la.iter().zip(&lb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_equals_manual_accumulation() {
        let (cfg, p, f) = setup(6, 4);
        let target = [2, 1, 1, 3];
        let mut g = Graph::inference(&p);
        let fv = g.constant(f.clone());
        let loss = s2s_loss(&mut g, &cfg, fv, 6, 0, &target, Reduction::Sum).unwrap();
        let s = S2sScorer::new(&p, cfg, f.clone()).unwrap();
        let mut st = s.init();
        let mut prev = 0;
        let mut manual = 0.0;
        for &y in &target {
            let (logp, next) = s.step(&st, prev).unwrap();
            manual -= logp[y];
            st = next;
            prev = y;
        }
        assert!((g.value(loss).item() - manual).abs() < 1e-10);
        let mut g = Graph::inference(&p);
        let fv = g.constant(f);
        let mean = s2s_loss(&mut g, &cfg, fv, 6, 0, &target, Reduction::Mean).unwrap();
        assert!((g.value(mean).item() - manual / 4.0).abs() < 1e-10);
    }

    #[test]
    fn uniform_output_gives_n_ln_v() {
        let (cfg, mut p, f) = setup(5, 5);
        p.insert("head.s2s.out.w", Array::zeros(&[cfg.hidden + 5, 4]));
        let mut g = Graph::inference(&p);
        let fv = g.constant(f);
        let loss = s2s_loss(&mut g, &cfg, fv, 5, 0, &[1, 2, 3], Reduction::Sum).unwrap();
        assert!((g.value(loss).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
        let mut g = Graph::inference(&p);
        let fv = g.constant(Array::zeros(&[5, 5]));
        assert!(matches!(
            s2s_loss(&mut g, &cfg, fv, 5, 0, &[], Reduction::Sum),
            Err(Error::EmptyTarget)
        ));
    }

    #[test]
    fn confident_output_gives_zero_loss() {
        let (cfg, mut p, f) = setup(3, 6);
        // a huge bias on label 2 makes every step certain of it
        p.insert("head.s2s.out.w", Array::zeros(&[cfg.hidden + 5, 4]));
        p.insert("head.s2s.out.b", Array::vector(vec![0.0, 0.0, 1e3, 0.0]));
        let mut g = Graph::inference(&p);
        let fv = g.constant(f);
        let loss = s2s_loss(&mut g, &cfg, fv, 3, 0, &[2, 2], Reduction::Sum).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
    }
}
