//! Connectionist temporal classification.
//!
//! All recursions run in log space over a `T×V` grid of per-frame
//! log-probabilities (`logp`) whose columns include the blank.
//!
//! # Prefix scoring
//!
//! For a label prefix `g` the scorer keeps two per-frame vectors:
//! `r_n[t]`, the log-probability that frames `0..=t` collapse to `g` with
//! frame `t` emitting the last label of `g`, and `r_b[t]`, the same with
//! frame `t` emitting blank. Extending `g` by a label `c` gives `h = g·c`:
//!
//! ```text
//! φ[t]     = r_b^g[t-1] ⊕ (c == last(g) ? 0 : r_n^g[t-1])
//! r_n^h[t] = (r_n^h[t-1] ⊕ φ[t]) + logp[t][c]
//! r_b^h[t] = (r_b^h[t-1] ⊕ r_n^h[t-1]) + logp[t][blank]
//! ψ(h)     = r_n^h[0] ⊕ ⊕_{t≥1} (φ[t] + logp[t][c])
//! ```
//!
//! with `r_n^h[0] = logp[0][c]` only when `g` is empty. `ψ(h)` is the total
//! probability of every alignment whose label sequence starts with `h`; the
//! probability of `h` exactly is `r_n^h[T-1] ⊕ r_b^h[T-1]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{log_add, Array, Tape, Var, LOG_FLOOR};

/// Merges adjacent duplicates, then removes blanks.
pub fn collapse(alignment: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in alignment {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Minimum number of frames an alignment of `target` needs.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    /// `−log P(target)`, `+∞` when no alignment exists.
    pub value: f64,
    pub feasible: bool,
}

fn check_grid(logp: &Array, blank: usize) -> Result<(usize, usize)> {
    if logp.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "ctc posteriors must be T×V, got {:?}",
            logp.shape()
        )));
    }
    let (t, v) = (logp.rows(), logp.cols());
    if blank >= v {
        return Err(Error::InvalidId(blank));
    }
    Ok((t, v))
}

fn check_target(target: &[usize], v: usize, blank: usize) -> Result<()> {
    for &l in target {
        if l >= v || l == blank {
            return Err(Error::InvalidToken(l));
        }
    }
    Ok(())
}

fn lp(logp: &Array, t: usize, k: usize) -> f64 {
    logp.get2(t, k).max(LOG_FLOOR)
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward(logp: &Array, ext: &[usize], blank: usize) -> Vec<f64> {
    let (t_len, s_len) = (logp.rows(), ext.len());
    let mut alpha = vec![LOG_FLOOR; t_len * s_len];
    alpha[0] = lp(logp, 0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(logp, 0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = (a + lp(logp, t, ext[s])).max(LOG_FLOOR);
        }
    }
    alpha
}

fn backward(logp: &Array, ext: &[usize], blank: usize) -> Vec<f64> {
    let (t_len, s_len) = (logp.rows(), ext.len());
    let mut beta = vec![LOG_FLOOR; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(logp, t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp(logp, t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                b = log_add(b, beta[next + s + 2] + lp(logp, t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b.max(LOG_FLOOR);
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let row = &alpha[(t_len - 1) * s_len..t_len * s_len];
    if s_len == 1 {
        row[0]
    } else {
        log_add(row[s_len - 1], row[s_len - 2])
    }
}

/// `−log Σ_{π ∈ B⁻¹(target)} Π_t p(π_t)` by the forward recursion.
pub fn ctc_loss(logp: &Array, target: &[usize], blank: usize) -> Result<CtcLoss> {
    let (t_len, v) = check_grid(logp, blank)?;
    check_target(target, v, blank)?;
    if t_len == 0 || min_frames(target) > t_len {
        return Ok(CtcLoss {
            value: f64::INFINITY,
            feasible: false,
        });
    }
    let ext = extended(target, blank);
    let alpha = forward(logp, &ext, blank);
    let lp_total = total_log_prob(&alpha, t_len, ext.len());
    if lp_total <= LOG_FLOOR {
        return Ok(CtcLoss {
            value: f64::INFINITY,
            feasible: false,
        });
    }
    Ok(CtcLoss {
        value: (-lp_total).max(0.0),
        feasible: true,
    })
}

/// Loss and its gradient with respect to every `logp` cell (treated as free
/// inputs). Infeasible targets yield `None`.
pub fn ctc_loss_and_gradient(logp: &Array, target: &[usize], blank: usize) -> Result<Option<(f64, Array)>> {
    let (t_len, v) = check_grid(logp, blank)?;
    check_target(target, v, blank)?;
    if t_len == 0 || min_frames(target) > t_len {
        return Ok(None);
    }
    let ext = extended(target, blank);
    let s_len = ext.len();
    let alpha = forward(logp, &ext, blank);
    let lp_total = total_log_prob(&alpha, t_len, s_len);
    if lp_total <= LOG_FLOOR {
        return Ok(None);
    }
    let beta = backward(logp, &ext, blank);
    let mut grad = Array::zeros(&[t_len, v]);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - lp_total;
            row[ext[s]] -= occ.exp();
        }
    }
    Ok(Some(((-lp_total).max(0.0), grad)))
}

/// Gradient of [`ctc_loss`] with respect to the log-probability grid.
pub fn ctc_gradient(logp: &Array, target: &[usize], blank: usize) -> Result<Option<Array>> {
    Ok(ctc_loss_and_gradient(logp, target, blank)?.map(|(_, g)| g))
}

/// CTC loss as a tape node over `logp`. Returns `None` for infeasible targets
/// so callers can exclude them from batch means.
pub fn ctc_loss_node(t: &mut Tape, logp: Var, target: &[usize], blank: usize) -> Result<Option<Var>> {
    match ctc_loss_and_gradient(t.value(logp), target, blank)? {
        Some((loss, grad)) => Ok(Some(t.external_scalar(logp, loss, grad)?)),
        None => Ok(None),
    }
}

/// Per-frame argmax, collapsed.
pub fn greedy_decode(logp: &Array, blank: usize) -> Vec<usize> {
    collapse(&logp.argmax_rows(), blank)
}

/// Incremental prefix state; cheap to clone for beam branching.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    last: Option<usize>,
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    /// `log ψ` of the prefix: mass of all alignments extending it.
    pub log_prefix: f64,
}

impl CtcPrefixState {
    /// Log-probability that all frames collapse to exactly this prefix.
    pub fn log_final(&self) -> f64 {
        match (self.r_n.last(), self.r_b.last()) {
            (Some(&n), Some(&b)) => log_add(n, b),
            _ => LOG_FLOOR,
        }
    }
}

/// Prefix scorer bound to one utterance's posteriors.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer<'a> {
    logp: &'a Array,
    blank: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(logp: &'a Array, blank: usize) -> Result<Self> {
        let (t, _) = check_grid(logp, blank)?;
        if t == 0 {
            return Err(Error::ShapeMismatch("ctc posteriors have no frames".into()));
        }
        Ok(Self { logp, blank })
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    /// State of the empty prefix.
    pub fn init(&self) -> CtcPrefixState {
        let t_len = self.frames();
        let mut r_b = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc = (acc + lp(self.logp, t, self.blank)).max(LOG_FLOOR);
            r_b.push(acc);
        }
        CtcPrefixState {
            last: None,
            r_n: vec![LOG_FLOOR; t_len],
            r_b,
            log_prefix: 0.0,
        }
    }

    /// State of `g·c`.
    pub fn extend(&self, g: &CtcPrefixState, c: usize) -> Result<CtcPrefixState> {
        if c == self.blank {
            return Err(Error::InvalidExtension);
        }
        if c >= self.logp.cols() {
            return Err(Error::InvalidToken(c));
        }
        if g.r_n.len() != self.frames() {
            return Err(Error::StateMismatch(format!(
                "prefix state over {} frames, posteriors have {}",
                g.r_n.len(),
                self.frames()
            )));
        }
        let t_len = self.frames();
        let mut r_n = vec![LOG_FLOOR; t_len];
        let mut r_b = vec![LOG_FLOOR; t_len];
        if g.last.is_none() {
            r_n[0] = lp(self.logp, 0, c);
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let phi = if g.last == Some(c) {
                g.r_b[t - 1]
            } else {
                log_add(g.r_b[t - 1], g.r_n[t - 1])
            };
            let emit = lp(self.logp, t, c);
            r_n[t] = (log_add(r_n[t - 1], phi) + emit).max(LOG_FLOOR);
            r_b[t] = (log_add(r_b[t - 1], r_n[t - 1]) + lp(self.logp, t, self.blank)).max(LOG_FLOOR);
            psi = log_add(psi, (phi + emit).max(LOG_FLOOR));
        }
        Ok(CtcPrefixState {
            last: Some(c),
            r_n,
            r_b,
            log_prefix: psi,
        })
    }

    /// Scores a whole label sequence token by token.
    pub fn score_sequence(&self, labels: &[usize]) -> Result<CtcPrefixState> {
        let mut s = self.init();
        for &c in labels {
            s = self.extend(&s, c)?;
        }
        Ok(s)
    }
}

/// Frame-synchronous CTC prefix beam search over the label set `labels`.
/// Returns `(labels, log P)` pairs, best first.
pub fn prefix_beam_search(logp: &Array, blank: usize, labels: &[usize], beam: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    check_grid(logp, blank)?;
    let beam = beam.max(1);
    // prefix -> (log p ending in blank, log p ending in label)
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, LOG_FLOOR));
    for t in 0..logp.rows() {
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        let mut bump = |k: Vec<usize>, b: f64, n: f64| {
            let e = next.entry(k).or_insert((LOG_FLOOR, LOG_FLOOR));
            e.0 = log_add(e.0, b);
            e.1 = log_add(e.1, n);
        };
        for (prefix, &(pb, pn)) in &beams {
            let total = log_add(pb, pn);
            bump(prefix.clone(), total + lp(logp, t, blank), LOG_FLOOR);
            for &c in labels {
                let e = lp(logp, t, c);
                let mut ext = prefix.clone();
                ext.push(c);
                if prefix.last() == Some(&c) {
                    bump(ext, LOG_FLOOR, pb + e);
                    bump(prefix.clone(), LOG_FLOOR, pn + e);
                } else {
                    bump(ext, LOG_FLOOR, total + e);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            log_add(b.1 .0, b.1 .1)
                .total_cmp(&log_add(a.1 .0, a.1 .1))
                .then_with(|| a.0.len().cmp(&b.0.len()))
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam);
        beams = ranked.into_iter().collect();
    }
    let mut out: Vec<(Vec<usize>, f64)> = beams.into_iter().map(|(k, (b, n))| (k, log_add(b, n))).collect();
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logp(rng: &mut impl Rng, t: usize, v: usize) -> Array {
        let data = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        log_softmax_rows(&Array::matrix(t, v, data).unwrap())
    }

    /// Character-by-character reference for the collapse map.
    fn collapse_oracle(pi: &[usize], blank: usize) -> Vec<usize> {
        let mut merged: Vec<usize> = Vec::new();
        for &p in pi {
            if merged.last() != Some(&p) {
                merged.push(p);
            }
        }
        merged.into_iter().filter(|&p| p != blank).collect()
    }

    #[test]
    fn collapse_examples() {
        let (b, a, bb) = (0, 1, 2);
        assert_eq!(collapse(&[a, a, b, a, bb, b], b), vec![a, a, bb]);
        assert!(collapse(&[b, b, b], b).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.gen_range(0..12);
            let pi: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            assert_eq!(collapse(&pi, 0), collapse_oracle(&pi, 0));
        }
    }

    #[test]
    fn single_frame_certain_target_has_zero_loss() {
        let logp = Array::matrix(1, 2, vec![LOG_FLOOR, 0.0]).unwrap();
        let l = ctc_loss(&logp, &[1], 0).unwrap();
        assert!(l.feasible);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn uniform_two_frames() {
        let h = 0.5f64.ln();
        let logp = Array::matrix(2, 2, vec![h; 4]).unwrap();
        let l = ctc_loss(&logp, &[1], 0).unwrap();
        assert!((l.value + 0.75f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn infeasible_target_is_flagged() {
        let logp = Array::matrix(2, 2, vec![0.5f64.ln(); 4]).unwrap();
        let l = ctc_loss(&logp, &[1, 1], 0).unwrap();
        assert!(!l.feasible);
        assert!(l.value.is_infinite());
        assert!(ctc_gradient(&logp, &[1, 1], 0).unwrap().is_none());
    }

    #[test]
    fn blank_in_target_is_rejected() {
        let logp = Array::matrix(2, 2, vec![0.5f64.ln(); 4]).unwrap();
        assert!(ctc_loss(&logp, &[0], 0).is_err());
    }

    #[test]
    fn deterministic_alignment_gradient() {
        // frames emit A, blank, B with certainty; the realized cells get -1
        let f = LOG_FLOOR;
        let logp = Array::matrix(3, 3, vec![f, 0.0, f, 0.0, f, f, f, f, 0.0]).unwrap();
        let (loss, g) = ctc_loss_and_gradient(&logp, &[1, 2], 0).unwrap().unwrap();
        assert_eq!(loss, 0.0);
        assert!((g.get2(0, 1) + 1.0).abs() < 1e-12);
        assert!((g.get2(1, 0) + 1.0).abs() < 1e-12);
        assert!((g.get2(2, 2) + 1.0).abs() < 1e-12);
        assert!((g.sum() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_through_softmax_sums_to_zero_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let x = t.leaf(Array::matrix(5, 4, logits).unwrap());
        let lp = t.log_softmax(x);
        let loss = ctc_loss_node(&mut t, lp, &[1, 2, 2], 0).unwrap().unwrap();
        let g = t.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        for r in 0..5 {
            assert!(gx.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn empty_prefix_final_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logp = random_logp(&mut rng, 6, 4);
        let scorer = CtcPrefixScorer::new(&logp, 0).unwrap();
        let expected: f64 = (0..6).map(|t| logp.get2(t, 0)).sum();
        assert!((scorer.init().log_final() - expected).abs() < 1e-12);
        assert!(matches!(scorer.extend(&scorer.init(), 0), Err(Error::InvalidExtension)));
    }

    #[test]
    fn prefix_mass_dominates_completions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let logp = random_logp(&mut rng, 5, 3);
            let scorer = CtcPrefixScorer::new(&logp, 0).unwrap();
            let g = scorer.score_sequence(&[1]).unwrap();
            for ext in [vec![1, 1], vec![1, 2], vec![1, 2, 1], vec![1, 1, 2]] {
                let full = scorer.score_sequence(&ext).unwrap();
                assert!(g.log_prefix >= full.log_final() - 1e-12);
                assert!(g.log_prefix >= full.log_prefix - 1e-12);
            }
        }
    }

    #[test]
    fn greedy_decoding() {
        let f = LOG_FLOOR;
        let logp = Array::matrix(4, 3, vec![f, 0.0, f, f, 0.0, f, 0.0, f, f, f, 0.0, f]).unwrap();
        assert_eq!(greedy_decode(&logp, 0), vec![1, 1]);
    }
}
