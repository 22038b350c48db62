//! Beam search over the log-linear combination
//!
//! ```text
//! score(w) = λ_b·log P_ctc(w) + (1 − λ_b)·log P_att(w) + λ_c·log P_lm(w)
//! ```
//!
//! Unfinished hypotheses carry the CTC prefix probability (mass of every
//! completion); finishing with eos swaps it for the probability of the exact
//! sequence. The attention and LM terms both score eos. Every term can only
//! decrease as a prefix grows, so the search stops as soon as the best
//! finished hypothesis beats everything still in the beam.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ctc::{CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmScorer, LmState};
use crate::model::{self, Model};
use crate::numerics::Array;
use crate::s2s::{AttentionState, S2sScorer};
use crate::text::{self, TokenInventory};

/// Upper limit applied to any requested beam size.
pub const BEAM_CEILING: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeWeights {
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub beam: usize,
    /// Most labels (eos excluded) a hypothesis may hold; defaults to the
    /// frame count.
    pub max_len: Option<usize>,
    /// At `max_len`, only eos may follow. When off, such hypotheses stop
    /// expanding and can only be returned as unfinished.
    pub force_end: bool,
}

impl DecodeWeights {
    pub fn dsing() -> Self {
        Self {
            lambda_b: 0.4,
            lambda_c: 0.5,
            beam: 512,
            max_len: None,
            force_end: true,
        }
    }

    pub fn dali() -> Self {
        Self {
            lambda_b: 0.3,
            lambda_c: 0.2,
            ..Self::dsing()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "dsing" => Ok(Self::dsing()),
            "dali" => Ok(Self::dali()),
            other => Err(Error::config("profile", format!("unknown decode profile {other:?}"))),
        }
    }

    pub fn validated(mut self) -> Result<Self> {
        if !(0.0..=1.0).contains(&self.lambda_b) {
            return Err(Error::config("lambda_b", "must lie in [0, 1]"));
        }
        if self.lambda_c < 0.0 || !self.lambda_c.is_finite() {
            return Err(Error::config("lambda_c", "must be nonnegative"));
        }
        if self.beam == 0 {
            return Err(Error::config("beam", "must be at least 1"));
        }
        self.beam = self.beam.min(BEAM_CEILING);
        Ok(self)
    }

    pub fn combine(&self, ctc: f64, s2s: f64, lm: f64) -> f64 {
        self.lambda_b * ctc + (1.0 - self.lambda_b) * s2s + self.lambda_c * lm
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Inventory ids; ends with eos once finished.
    pub tokens: Vec<usize>,
    pub ctc_state: CtcPrefixState,
    /// Attention state before feeding the last token.
    pub attn: Option<AttentionState>,
    pub lm_state: Option<LmState>,
    pub ctc: f64,
    pub s2s: f64,
    pub lm: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Labels without the closing eos.
    pub fn labels(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Scorers for one utterance.
pub struct Scorers<'a> {
    pub inventory: &'a TokenInventory,
    pub ctc: CtcPrefixScorer<'a>,
    pub s2s: Option<&'a S2sScorer<'a>>,
    pub lm: Option<&'a LmScorer<'a>>,
}

impl Scorers<'_> {
    fn uses_s2s(&self, w: &DecodeWeights) -> Result<bool> {
        let needed = w.lambda_b < 1.0;
        if needed && self.s2s.is_none() {
            return Err(Error::config("lambda_b", "below 1 needs an attention decoder"));
        }
        Ok(needed)
    }

    fn uses_lm(&self, w: &DecodeWeights) -> Result<bool> {
        let needed = w.lambda_c > 0.0;
        if needed && self.lm.is_none() {
            return Err(Error::config("lambda_c", "above 0 needs a language model"));
        }
        Ok(needed)
    }

    pub fn root(&self, w: &DecodeWeights) -> Result<Hypothesis> {
        Ok(Hypothesis {
            tokens: Vec::new(),
            ctc_state: self.ctc.init(),
            attn: match self.uses_s2s(w)? {
                true => Some(self.s2s.unwrap().init()),
                false => None,
            },
            lm_state: match self.uses_lm(w)? {
                true => Some(LmState::zeros(self.lm.unwrap().config())),
                false => None,
            },
            ctc: 0.0,
            s2s: 0.0,
            lm: 0.0,
            score: 0.0,
            finished: false,
        })
    }
}

/// One child per emittable token (everything except blank and the start
/// token), or only eos when `eos_only`.
pub fn expand(hyp: &Hypothesis, w: &DecodeWeights, sc: &Scorers, eos_only: bool) -> Result<Vec<Hypothesis>> {
    if hyp.finished {
        return Err(Error::InvalidExtension);
    }
    let inv = sc.inventory;
    let prev = match hyp.tokens.last() {
        Some(&t) => inv.label_index(t)?,
        None => inv.label_index(inv.start_token())?,
    };
    let s2s_step = match (&hyp.attn, sc.s2s) {
        (Some(a), Some(s)) => Some(s.step(a, prev)?),
        _ => None,
    };
    let lm_step = match (&hyp.lm_state, sc.lm) {
        (Some(st), Some(l)) => Some(l.step(st, prev)?),
        _ => None,
    };
    let eos = inv.eos();
    let tokens: Vec<usize> = if eos_only { vec![eos] } else { inv.emittable() };
    let mut out = Vec::with_capacity(tokens.len());
    for c in tokens {
        let label = inv.label_index(c)?;
        let finished = c == eos;
        let (ctc_state, ctc) = if finished {
            (hyp.ctc_state.clone(), hyp.ctc_state.log_final())
        } else {
            let st = sc.ctc.extend(&hyp.ctc_state, c)?;
            let v = st.log_prefix;
            (st, v)
        };
        let s2s = hyp.s2s + s2s_step.as_ref().map_or(0.0, |(lp, _)| lp[label]);
        let lm = hyp.lm + lm_step.as_ref().map_or(0.0, |(lp, _)| lp[label]);
        let mut tokens = hyp.tokens.clone();
        tokens.push(c);
        out.push(Hypothesis {
            tokens,
            ctc_state,
            attn: s2s_step.as_ref().map(|(_, a)| a.clone()),
            lm_state: lm_step.as_ref().map(|(_, s)| s.clone()),
            ctc,
            s2s,
            lm,
            score: w.combine(ctc, s2s, lm),
            finished,
        });
    }
    Ok(out)
}

/// Higher score first, then shorter, then lexicographically smaller ids.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn prune(mut hyps: Vec<Hypothesis>, beam: usize) -> Vec<Hypothesis> {
    hyps.sort_by(rank);
    hyps.truncate(beam);
    hyps
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredOutput {
    /// Label ids without eos.
    pub labels: Vec<usize>,
    pub text: String,
    pub ctc: f64,
    pub s2s: f64,
    pub lm: f64,
    pub score: f64,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeResult {
    pub best: ScoredOutput,
    pub nbest: Vec<ScoredOutput>,
    /// No hypothesis reached eos; `best` is the best unfinished one.
    pub no_finished_hypothesis: bool,
}

fn summarize(h: &Hypothesis, inv: &TokenInventory) -> ScoredOutput {
    ScoredOutput {
        labels: h.labels().to_vec(),
        text: text::render(h.labels(), inv),
        ctc: h.ctc,
        s2s: h.s2s,
        lm: h.lm,
        score: h.score,
        finished: h.finished,
    }
}

pub fn decode(sc: &Scorers, weights: &DecodeWeights, nbest: usize) -> Result<DecodeResult> {
    let w = weights.validated()?;
    let max_len = w.max_len.unwrap_or(sc.ctc.frames());
    let mut beam = vec![sc.root(&w)?];
    let mut completed: Vec<Hypothesis> = Vec::new();
    let mut stalled: Vec<Hypothesis> = Vec::new();
    while !beam.is_empty() {
        let mut next = Vec::new();
        for h in &beam {
            let at_limit = h.tokens.len() >= max_len;
            if at_limit && !w.force_end {
                stalled.push(h.clone());
                continue;
            }
            for child in expand(h, &w, sc, at_limit)? {
                if child.finished {
                    completed.push(child);
                } else {
                    next.push(child);
                }
            }
        }
        beam = prune(next, w.beam);
        let best_done = completed.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if beam.first().is_some_and(|h| h.score < best_done) {
            break;
        }
    }
    completed.sort_by(rank);
    let no_finished = completed.is_empty();
    let pool = if no_finished {
        stalled.sort_by(rank);
        stalled
    } else {
        completed
    };
    let best = pool
        .first()
        .map(|h| summarize(h, sc.inventory))
        .ok_or_else(|| Error::config("max_len", "no hypothesis survived the search"))?;
    Ok(DecodeResult {
        best,
        nbest: pool
            .iter()
            .take(nbest.max(1))
            .map(|h| summarize(h, sc.inventory))
            .collect(),
        no_finished_hypothesis: no_finished,
    })
}

/// Runs the encoder and head on `features`, then searches with whichever
/// scorers `weights` needs.
pub fn decode_model(
    model: &Model,
    lm: Option<&LanguageModel>,
    features: &Array,
    weights: &DecodeWeights,
    nbest: usize,
) -> Result<DecodeResult> {
    if let Some(lm) = lm {
        if lm.inventory.hash() != model.inventory.hash() {
            return Err(Error::CheckpointMismatch("language model inventory differs".into()));
        }
    }
    let post = model::posteriors(model, features)?;
    let s2s = match (&post.features, weights.lambda_b < 1.0) {
        (Some(f), true) => Some(S2sScorer::new(&model.params, model.cfg.s2s, f.clone())?),
        _ => None,
    };
    let lm_scorer = lm.filter(|_| weights.lambda_c > 0.0).map(LanguageModel::scorer);
    let sc = Scorers {
        inventory: &model.inventory,
        ctc: CtcPrefixScorer::new(&post.ctc_logp, model.inventory.blank())?,
        s2s: s2s.as_ref(),
        lm: lm_scorer.as_ref(),
    };
    decode(&sc, weights, nbest)
}
