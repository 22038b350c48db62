//! Character-level LSTM language model for shallow fusion.
//!
//! Tokens are label indices (blank excluded). A sentence is scored by priming
//! the state with the start token, then summing the log-probability of every
//! character and of the closing eos.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{linear, lstm_cell, LstmWeights};
use crate::numerics::{
    adam_step, config_hash, load_checkpoint, rng, save_checkpoint, AdamConfig, AdamState, Array, CheckpointMeta, Graph,
    ParamStore, Var, CHECKPOINT_VERSION,
};
use crate::text::{self, TokenInventory};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub emb_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
}

impl LmConfig {
    pub fn toy(vocab: usize) -> Self {
        Self {
            vocab,
            emb_dim: 32,
            layers: 2,
            hidden: 128,
            mlp_layers: 2,
            mlp_hidden: 64,
        }
    }

    pub fn reference(vocab: usize) -> Self {
        Self {
            vocab,
            emb_dim: 32,
            layers: 3,
            hidden: 2048,
            mlp_layers: 3,
            mlp_hidden: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.vocab, self.emb_dim, self.layers, self.hidden, self.mlp_hidden].contains(&0) {
            return Err(Error::config("lm", "dimensions must be positive"));
        }
        Ok(())
    }
}

pub fn init_lm_params(cfg: &LmConfig, params: &mut ParamStore, rng: &mut impl rand::Rng) {
    params.init_uniform("lm.emb", &[cfg.vocab, cfg.emb_dim], 0.1, rng);
    let mut x = cfg.emb_dim;
    for l in 0..cfg.layers {
        params.init_glorot(&format!("lm.lstm{l}.w_ih"), &[x, 4 * cfg.hidden], rng);
        params.init_glorot(&format!("lm.lstm{l}.w_hh"), &[cfg.hidden, 4 * cfg.hidden], rng);
        // forget-gate bias of 1
        let mut b = vec![0.0; 4 * cfg.hidden];
        b[cfg.hidden..2 * cfg.hidden].iter_mut().for_each(|v| *v = 1.0);
        params.insert(format!("lm.lstm{l}.b"), Array::vector(b));
        x = cfg.hidden;
    }
    for l in 0..cfg.mlp_layers {
        params.init_glorot(&format!("lm.mlp{l}.w"), &[x, cfg.mlp_hidden], rng);
        params.init_const(&format!("lm.mlp{l}.b"), &[cfg.mlp_hidden], 0.0);
        x = cfg.mlp_hidden;
    }
    params.init_glorot("lm.out.w", &[x, cfg.vocab], rng);
    params.init_const("lm.out.b", &[cfg.vocab], 0.0);
}

/// Recurrent state per layer, value-semantic for beam branching.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub steps: usize,
}

impl LmState {
    pub fn zeros(cfg: &LmConfig) -> Self {
        Self {
            h: vec![vec![0.0; cfg.hidden]; cfg.layers],
            c: vec![vec![0.0; cfg.hidden]; cfg.layers],
            steps: 0,
        }
    }
}

/// Feeds `tokens` (one per row) through the network; returns next-token
/// log-probabilities `[n, V]` and the new per-layer states.
fn step_rows(
    g: &mut Graph,
    cfg: &LmConfig,
    tokens: &[usize],
    h: &[Var],
    c: &[Var],
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let emb = g.param("lm.emb")?;
    let mut x = g.embedding(emb, tokens)?;
    let (mut hs, mut cs) = (Vec::new(), Vec::new());
    for l in 0..cfg.layers {
        let w = LstmWeights {
            w_ih: g.param(&format!("lm.lstm{l}.w_ih"))?,
            w_hh: g.param(&format!("lm.lstm{l}.w_hh"))?,
            b: g.param(&format!("lm.lstm{l}.b"))?,
        };
        let (h2, c2) = lstm_cell(g, x, h[l], c[l], &w)?;
        hs.push(h2);
        cs.push(c2);
        x = h2;
    }
    for l in 0..cfg.mlp_layers {
        let w = g.param(&format!("lm.mlp{l}.w"))?;
        let b = g.param(&format!("lm.mlp{l}.b"))?;
        x = linear(g, x, w, Some(b))?;
        x = g.leaky_relu(x, LEAKY_SLOPE);
    }
    let w = g.param("lm.out.w")?;
    let b = g.param("lm.out.b")?;
    let o = linear(g, x, w, Some(b))?;
    Ok((g.log_softmax(o), hs, cs))
}

pub struct LmScorer<'p> {
    params: &'p ParamStore,
    cfg: LmConfig,
}

impl<'p> LmScorer<'p> {
    pub fn new(params: &'p ParamStore, cfg: LmConfig) -> Self {
        Self { params, cfg }
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Feeds `token`; returns the distribution over the next token.
    pub fn step(&self, state: &LmState, token: usize) -> Result<(Vec<f64>, LmState)> {
        if token >= self.cfg.vocab {
            return Err(Error::InvalidToken(token));
        }
        if state.h.len() != self.cfg.layers || state.h.iter().any(|h| h.len() != self.cfg.hidden) {
            return Err(Error::StateMismatch("language model state dims".into()));
        }
        let mut g = Graph::inference(self.params);
        let mut h = Vec::new();
        let mut c = Vec::new();
        for l in 0..self.cfg.layers {
            h.push(g.constant(Array::matrix(1, self.cfg.hidden, state.h[l].clone())?));
            c.push(g.constant(Array::matrix(1, self.cfg.hidden, state.c[l].clone())?));
        }
        let (logp, hs, cs) = step_rows(&mut g, &self.cfg, &[token], &h, &c)?;
        Ok((
            g.value(logp).data().to_vec(),
            LmState {
                h: hs.iter().map(|&v| g.value(v).data().to_vec()).collect(),
                c: cs.iter().map(|&v| g.value(v).data().to_vec()).collect(),
                steps: state.steps + 1,
            },
        ))
    }

    /// `log p(tokens, eos)` given the start token.
    pub fn score(&self, start: usize, tokens: &[usize], eos: usize) -> Result<f64> {
        let mut state = LmState::zeros(&self.cfg);
        let mut prev = start;
        let mut total = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&eos)) {
            let (logp, next) = self.step(&state, prev)?;
            total += logp[t];
            state = next;
            prev = t;
        }
        Ok(total)
    }
}

/// Summed next-token NLL of a batch plus the number of predicted tokens.
/// Each sequence is predicted from `start` and closed with `eos`.
pub fn batch_nll(
    g: &mut Graph,
    cfg: &LmConfig,
    batch: &[Vec<usize>],
    start: usize,
    eos: usize,
) -> Result<(Var, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = batch.len();
    let steps = batch.iter().map(|s| s.len() + 1).max().unwrap();
    let zeros = Array::zeros(&[n, cfg.hidden]);
    let mut h: Vec<Var> = (0..cfg.layers).map(|_| g.constant(zeros.clone())).collect();
    let mut c = h.clone();
    let mut picks = Vec::new();
    let mut count = 0;
    for t in 0..steps {
        let inputs: Vec<usize> = batch
            .iter()
            .map(|s| {
                if t == 0 {
                    start
                } else {
                    s.get(t - 1).copied().unwrap_or(eos)
                }
            })
            .collect();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= cfg.vocab) {
            return Err(Error::InvalidToken(bad));
        }
        let (logp, hs, cs) = step_rows(g, cfg, &inputs, &h, &c)?;
        h = hs;
        c = cs;
        let idx: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|(_, s)| t <= s.len())
            .map(|(r, s)| r * cfg.vocab + s.get(t).copied().unwrap_or(eos))
            .collect();
        count += idx.len();
        picks.push(g.gather(logp, &idx)?);
    }
    let all = g.concat(&picks, 0)?;
    let total = g.sum(all);
    Ok((g.scale(total, -1.0), count))
}

/// Label-index sequences for normalized lines.
pub fn encode_corpus<S: AsRef<str>>(lines: &[S], inv: &TokenInventory) -> Result<Vec<Vec<usize>>> {
    lines
        .iter()
        .map(|l| {
            text::encode(l.as_ref(), inv)?
                .into_iter()
                .map(|id| inv.label_index(id))
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 20,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_perplexity: f64,
}

#[derive(Clone, Debug)]
pub struct LmTrained {
    pub params: ParamStore,
    pub history: Vec<LmEpoch>,
    pub best_epoch: usize,
}

/// Per-token perplexity (eos included) of `seqs`.
pub fn perplexity(params: &ParamStore, cfg: &LmConfig, seqs: &[Vec<usize>], start: usize, eos: usize) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for chunk in seqs.chunks(64) {
        let mut g = Graph::inference(params);
        let (loss, n) = batch_nll(&mut g, cfg, chunk, start, eos)?;
        nll += g.value(loss).item();
        count += n;
    }
    Ok((nll / count.max(1) as f64).exp())
}

/// Adam on mean per-token NLL; keeps the parameters of the epoch with the
/// lowest dev perplexity (train perplexity when `dev` is empty).
pub fn lm_train(
    train: &[Vec<usize>],
    dev: &[Vec<usize>],
    cfg: &LmConfig,
    tc: &LmTrainConfig,
    start: usize,
    eos: usize,
    mut on_epoch: impl FnMut(&LmEpoch),
) -> Result<LmTrained> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let mut params = ParamStore::new();
    init_lm_params(cfg, &mut params, &mut rng::stream(tc.seed, "lm-init", 0));
    let mut adam = AdamState::default();
    let adam_cfg = AdamConfig::default();
    let dev = if dev.is_empty() { train } else { dev };
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tc.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(tc.seed, "lm-shuffle", epoch as u64));
        let mut total = 0.0;
        let mut tokens = 0;
        for chunk in order.chunks(tc.batch.max(1)) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::training(&params);
            let (loss, n) = batch_nll(&mut g, cfg, &batch, start, eos)?;
            total += g.value(loss).item();
            tokens += n;
            let mean = g.scale(loss, 1.0 / n as f64);
            let grads = g.param_grads(mean)?;
            drop(g);
            adam_step(&mut params, &grads, &mut adam, &|_| tc.lr, &adam_cfg);
        }
        let ppl = perplexity(&params, cfg, dev, start, eos)?;
        let stat = LmEpoch {
            epoch,
            train_loss: total / tokens as f64,
            dev_perplexity: ppl,
        };
        on_epoch(&stat);
        history.push(stat);
        if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
            best = Some((ppl, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.ok_or(Error::config("epochs", "must be at least 1"))?;
    Ok(LmTrained {
        params,
        history,
        best_epoch,
    })
}

/// A trained language model bound to its inventory.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub inventory: TokenInventory,
    pub params: ParamStore,
}

impl LanguageModel {
    pub fn scorer(&self) -> LmScorer<'_> {
        LmScorer::new(&self.params, self.cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            inventory_hash: self.inventory.hash(),
            arch_hash: config_hash(&self.cfg),
            arch: serde_json::json!({
                "lm": serde_json::to_value(self.cfg)?,
                "inventory": self.inventory.symbols(),
            }),
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let cfg: LmConfig = serde_json::from_value(meta.arch["lm"].clone())?;
        let symbols: Vec<String> = serde_json::from_value(meta.arch["inventory"].clone())?;
        let inventory = TokenInventory::from_symbols(symbols)?;
        if inventory.hash() != meta.inventory_hash || config_hash(&cfg) != meta.arch_hash {
            return Err(Error::CheckpointMismatch(
                "metadata hashes do not match contents".into(),
            ));
        }
        Ok(Self { cfg, inventory, params })
    }
}
