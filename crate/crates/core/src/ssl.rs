//! Contrastive pretraining objective over masked frames.
//!
//! Targets come from a fixed codebook: each unmasked latent frame is mapped to
//! its nearest codeword by cosine similarity. For every masked frame the
//! projected context vector must pick its own target out of a candidate set
//! made of distractor targets from other masked frames plus the positive.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, FrameMask, MaskPolicy};
use crate::error::{Error, Result};
use crate::numerics::nn::linear;
use crate::numerics::{Array, Graph, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Array,
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (row_norm(a) * row_norm(b))
}

impl Codebook {
    pub fn new(entries: Array) -> Result<Self> {
        if entries.ndim() != 2 || entries.rows() < 2 {
            return Err(Error::InvalidCodebook("need at least two codewords".into()));
        }
        if !entries.is_finite() {
            return Err(Error::InvalidCodebook("non-finite codeword".into()));
        }
        for i in 0..entries.rows() {
            if row_norm(entries.row(i)) == 0.0 {
                return Err(Error::ZeroNormVector("codeword"));
            }
            for j in 0..i {
                if entries.row(i) == entries.row(j) {
                    return Err(Error::InvalidCodebook(format!("rows {j} and {i} are identical")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Array {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Spherical k-means with k-means++ seeding on the rows of `data`.
    pub fn kmeans(data: &Array, k: usize, iters: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let n = data.rows();
        let unit: Vec<Vec<f64>> = (0..n)
            .filter_map(|i| {
                let r = data.row(i);
                let norm = row_norm(r);
                (norm > 0.0).then(|| r.iter().map(|v| v / norm).collect())
            })
            .collect();
        let mut distinct = unit.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() < k || k < 2 {
            return Err(Error::InvalidCodebook(format!(
                "{} distinct directions for {k} codewords",
                distinct.len()
            )));
        }
        let dist = |a: &[f64], b: &[f64]| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut centers: Vec<Vec<f64>> = vec![unit[rng.gen_range(0..unit.len())].clone()];
        while centers.len() < k {
            let d: Vec<f64> = unit
                .iter()
                .map(|u| {
                    centers
                        .iter()
                        .map(|c| dist(u, c))
                        .fold(f64::INFINITY, f64::min)
                        .max(0.0)
                })
                .collect();
            let total: f64 = d.iter().sum();
            let next = if total <= 1e-12 {
                distinct.iter().find(|u| !centers.contains(u)).unwrap().clone()
            } else {
                let mut x = rng.gen_range(0.0..total);
                let mut pick = d.len() - 1;
                for (i, &di) in d.iter().enumerate() {
                    if x < di {
                        pick = i;
                        break;
                    }
                    x -= di;
                }
                unit[pick].clone()
            };
            if !centers.contains(&next) {
                centers.push(next);
            }
        }
        for _ in 0..iters {
            let mut sums = vec![vec![0.0; data.cols()]; k];
            let mut counts = vec![0usize; k];
            for u in &unit {
                let best = nearest(u, &centers);
                counts[best] += 1;
                sums[best].iter_mut().zip(u).for_each(|(s, v)| *s += v);
            }
            for j in 0..k {
                let norm = row_norm(&sums[j]);
                if counts[j] > 0 && norm > 0.0 {
                    let c: Vec<f64> = sums[j].iter().map(|v| v / norm).collect();
                    if !centers.iter().enumerate().any(|(i, o)| i != j && *o == c) {
                        centers[j] = c;
                    }
                }
            }
        }
        Self::new(Array::from_rows(&centers)?)
    }
}

/// Highest cosine similarity; the lowest index wins ties.
fn nearest(u: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let s = cosine(u, c);
        if s > best_sim {
            best = j;
            best_sim = s;
        }
    }
    best
}

/// Nearest codeword for each row of `z`, as `(q, indices)`.
pub fn quantize(z: &Array, cb: &Codebook) -> Result<(Array, Vec<usize>)> {
    if z.ndim() != 2 || z.cols() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            got: z.cols(),
        });
    }
    let centers: Vec<Vec<f64>> = (0..cb.len()).map(|j| cb.entries.row(j).to_vec()).collect();
    let mut idx = Vec::with_capacity(z.rows());
    let mut q = Array::zeros(&[z.rows(), cb.dim()]);
    for t in 0..z.rows() {
        if row_norm(z.row(t)) == 0.0 {
            return Err(Error::ZeroNormVector("latent frame"));
        }
        let j = nearest(z.row(t), &centers);
        q.row_mut(t).copy_from_slice(cb.entries.row(j));
        idx.push(j);
    }
    Ok((q, idx))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistractorSets {
    /// For each masked frame, candidate frame indices with the positive last.
    pub sets: Vec<Vec<usize>>,
    /// `(requested, available)` when the count had to be reduced.
    pub clamped: Option<(usize, usize)>,
}

/// Draws `count` other masked frames per masked frame, uniformly without
/// replacement.
pub fn sample_distractors(masked: &[usize], count: usize, rng: &mut impl rand::Rng) -> Result<DistractorSets> {
    if count == 0 {
        return Err(Error::config("distractors", "count must be at least 1"));
    }
    if masked.len() < 2 {
        return Err(Error::NotEnoughFrames(masked.len()));
    }
    let available = masked.len() - 1;
    let k = count.min(available);
    let sets = masked
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            let mut set: Vec<usize> = sample(rng, available, k)
                .into_iter()
                .map(|j| masked[if j >= i { j + 1 } else { j }])
                .collect();
            set.push(pos);
            set
        })
        .collect();
    Ok(DistractorSets {
        sets,
        clamped: (k < count).then_some((count, available)),
    })
}

/// Mean over rows of `c` of `−log softmax(sim(c_i, cands[set_i]) / κ)[last]`.
///
/// `c: [M, D]`, `cands: [N, D]`; `sets[i]` indexes rows of `cands`, positive
/// last.
pub fn contrastive_loss_node(t: &mut Tape, c: Var, cands: Var, sets: &[Vec<usize>], kappa: f64) -> Result<Var> {
    if kappa <= 0.0 {
        return Err(Error::config("kappa", "temperature must be positive"));
    }
    let m = t.shape(c)[0];
    if sets.len() != m || sets.iter().any(Vec::is_empty) {
        return Err(Error::LengthMismatch {
            expected: m,
            got: sets.len(),
        });
    }
    let n = t.shape(cands)[0];
    let cn = t.l2_normalize_rows(c)?;
    let qn = t.l2_normalize_rows(cands)?;
    let sims = t.matmul_nt(cn, qn)?;
    let sims = t.scale(sims, 1.0 / kappa);
    let mut losses = Vec::with_capacity(m);
    for (i, set) in sets.iter().enumerate() {
        let idx: Vec<usize> = set.iter().map(|&j| i * n + j).collect();
        let row = t.gather(sims, &idx)?;
        let lp = t.log_softmax(row);
        losses.push(t.gather(lp, &[set.len() - 1])?);
    }
    let all = t.concat(&losses, 0)?;
    let mean = t.mean(all);
    Ok(t.scale(mean, -1.0))
}

/// Explicit per-frame candidate sets.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub context: Array,
    pub positives: Array,
    /// Distractors per frame, `K_t × D` each (may be empty).
    pub distractors: Vec<Array>,
    pub kappa: f64,
}

pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let m = batch.context.rows();
    if batch.positives.rows() != m || batch.distractors.len() != m {
        return Err(Error::LengthMismatch {
            expected: m,
            got: batch.positives.rows(),
        });
    }
    let mut rows = Vec::new();
    let mut sets = Vec::with_capacity(m);
    for i in 0..m {
        let d = &batch.distractors[i];
        let mut set = Vec::new();
        for r in 0..d.rows() {
            set.push(rows.len());
            rows.push(d.row(r).to_vec());
        }
        set.push(rows.len());
        rows.push(batch.positives.row(i).to_vec());
        sets.push(set);
    }
    let mut t = Tape::new();
    let c = t.constant(batch.context.clone());
    let q = t.constant(Array::from_rows(&rows)?);
    let loss = contrastive_loss_node(&mut t, c, q, &sets, batch.kappa)?;
    Ok(t.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub kappa: f64,
    pub distractors: usize,
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    pub mask: MaskPolicy,
    /// Weight of the optional diversity term; unused unless a hook is given.
    pub diversity_weight: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            distractors: 100,
            codebook_size: 32,
            kmeans_iters: 10,
            mask: MaskPolicy::default(),
            diversity_weight: 0.0,
        }
    }
}

/// Optional extra term added to the contrastive loss with
/// `diversity_weight`.
pub type DiversityHook<'a> = &'a dyn Fn(&mut Graph, &encoder::EncoderOutput) -> Result<Var>;

pub fn init_ssl_params(enc: &EncoderConfig, params: &mut ParamStore, rng: &mut impl rand::Rng) {
    params.init_glorot("ssl.proj.w", &[enc.dim, enc.latent_dim()], rng);
    params.init_const("ssl.proj.b", &[enc.latent_dim()], 0.0);
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SslDiagnostics {
    pub masked_frames: usize,
    pub distractors_clamped: Option<(usize, usize)>,
}

/// Builds the pretraining loss for one utterance. Returns `NotEnoughFrames`
/// when fewer than two frames end up masked.
pub fn ssl_loss(
    g: &mut Graph,
    enc: &EncoderConfig,
    cfg: &SslConfig,
    input: &Array,
    codebook: &Codebook,
    rng: &mut impl rand::Rng,
    diversity: Option<DiversityHook>,
) -> Result<(Var, SslDiagnostics)> {
    let frames = enc.output_frames(input.rows())?;
    let mask = FrameMask::sample(frames, &cfg.mask, rng);
    let masked = mask.masked_indices();
    let sets = sample_distractors(&masked, cfg.distractors, rng)?;
    let out = encoder::encode(g, enc, input, Some(&mask))?;
    let (q, _) = quantize(g.value(out.latent), codebook)?;
    let w = g.param("ssl.proj.w")?;
    let b = g.param("ssl.proj.b")?;
    let proj = linear(g, out.context, w, Some(b))?;
    let d = g.shape(proj)[1];
    let flat: Vec<usize> = masked.iter().flat_map(|&t| (t * d)..(t * d + d)).collect();
    let c = g.gather(proj, &flat)?;
    let c = g.reshape(c, &[masked.len(), d])?;
    let q = g.constant(q);
    let mut loss = contrastive_loss_node(g, c, q, &sets.sets, cfg.kappa)?;
    if let (Some(hook), true) = (diversity, cfg.diversity_weight != 0.0) {
        let ld = hook(g, &out)?;
        let ld = g.scale(ld, cfg.diversity_weight);
        loss = g.add(loss, ld)?;
    }
    Ok((
        loss,
        SslDiagnostics {
            masked_frames: masked.len(),
            distractors_clamped: sets.clamped,
        },
    ))
}
