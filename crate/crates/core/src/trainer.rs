//! Training loops: contrastive pretraining, supervised finetuning with the
//! weighted CTC/attention objective, and consecutive transfer between corpora.
//!
//! Each utterance gets its own graph. Per-utterance gradients are computed on
//! a worker pool and summed in utterance order, so results do not depend on
//! the worker count.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::data::Manifest;
use crate::encoder::{self, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, HeadKind, Model, ModelConfig};
use crate::numerics::{accumulate_grads, adam_step, rng, AdamConfig, AdamState, Array, Graph, ParamGrads, ParamStore};
use crate::s2s::Reduction;
use crate::ssl::{self, Codebook, SslConfig};
use crate::text::{self, TokenInventory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FinetuneSpeech,
    TransferSinging,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_a: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub anneal_head: f64,
    pub anneal_encoder: f64,
    /// Relative dev-loss improvement below which the rates are annealed.
    pub newbob_threshold: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training utterances longer than this (seconds) are skipped.
    pub max_duration: f64,
    pub seed: u64,
    pub stage: Stage,
    pub reduction: Reduction,
    /// Disabled when every count is zero.
    pub spec_augment: SpecAugmentPolicy,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_a: 0.2,
            lr_head: 3e-4,
            lr_encoder: 1e-5,
            anneal_head: 0.8,
            anneal_encoder: 0.9,
            newbob_threshold: 0.0025,
            batch_size: 4,
            max_epochs: 10,
            max_duration: 28.0,
            seed: 0,
            stage: Stage::TransferSinging,
            reduction: Reduction::Mean,
            spec_augment: SpecAugmentPolicy::default(),
            grad_clip: 5.0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// CTC-only speech finetuning.
    pub fn finetune_speech() -> Self {
        Self {
            lambda_a: 1.0,
            stage: Stage::FinetuneSpeech,
            spec_augment: SpecAugmentPolicy::off(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_a) {
            return Err(Error::config("lambda_a", "must lie in [0, 1]"));
        }
        if self.lr_head < 0.0 || self.lr_encoder < 0.0 {
            return Err(Error::config("lr", "learning rates must be nonnegative"));
        }
        for (k, v) in [
            ("anneal_head", self.anneal_head),
            ("anneal_encoder", self.anneal_encoder),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(k, "must lie in (0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rates under Newbob annealing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Newbob {
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub anneal_head: f64,
    pub anneal_encoder: f64,
    pub threshold: f64,
    pub prev_dev: Option<f64>,
    pub anneals: usize,
}

impl Newbob {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr_head: cfg.lr_head,
            lr_encoder: cfg.lr_encoder,
            anneal_head: cfg.anneal_head,
            anneal_encoder: cfg.anneal_encoder,
            threshold: cfg.newbob_threshold,
            prev_dev: None,
            anneals: 0,
        }
    }

    /// Records a dev loss; returns whether the rates were annealed.
    pub fn update(&mut self, dev_loss: f64) -> bool {
        let stalled = match self.prev_dev {
            Some(prev) => (prev - dev_loss) / prev.abs().max(f64::MIN_POSITIVE) < self.threshold,
            None => false,
        };
        if stalled {
            self.lr_head *= self.anneal_head;
            self.lr_encoder *= self.anneal_encoder;
            self.anneals += 1;
        }
        self.prev_dev = Some(dev_loss);
        stalled
    }
}

/// One labelled utterance in memory.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub duration: f64,
    pub features: Array,
    /// Inventory ids of the normalized transcript.
    pub target: Vec<usize>,
    pub text: String,
}

/// Loads features and encodes transcripts of every record.
pub fn load_utterances(manifest: &Manifest, manifest_path: &Path, inv: &TokenInventory) -> Result<Vec<Utterance>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = crate::data::feature_path(manifest_path, r).ok_or_else(|| Error::Format {
                what: "manifest",
                detail: format!("{} has no feature file", r.id),
            })?;
            Ok(Utterance {
                id: r.id.clone(),
                duration: r.duration(),
                features: encoder::read_matrix(&path)?,
                target: text::encode(&r.normalized, inv)?,
                text: r.normalized.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_ctc: f64,
    pub dev_s2s: f64,
    pub dev_wer: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    /// Training utterances skipped by the duration cap.
    pub filtered: usize,
    /// Utterances skipped because CTC could not align their target.
    pub infeasible: usize,
    pub wall_time: f64,
}

/// A worker pool of `workers` threads.
pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

fn clip(grads: &mut ParamGrads, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for g in grads.values_mut() {
            g.scale_assign(max_norm / norm);
        }
    }
}

fn lr_for(name: &str, s: &Newbob) -> f64 {
    if name.starts_with("encoder.") {
        s.lr_encoder
    } else {
        s.lr_head
    }
}

/// Shuffled batches of similar-length utterances.
fn batches(n: usize, lengths: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, "batches", epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut out = Vec::new();
    for bucket in order.chunks(batch * 8) {
        let mut b = bucket.to_vec();
        b.sort_by_key(|&i| (lengths[i], i));
        out.extend(b.chunks(batch).map(<[usize]>::to_vec));
    }
    out.shuffle(&mut r);
    out
}

struct Item {
    loss: f64,
    grads: ParamGrads,
}

fn utterance_grads(
    model: &Model,
    u: &Utterance,
    cfg: &TrainConfig,
    augment_rng: Option<rng::Rng>,
) -> Result<Option<Item>> {
    let mut g = Graph::training(&model.params);
    let mut r = augment_rng;
    let augment = r.as_mut().map(|r| (&cfg.spec_augment, r));
    let Some(l) = model::utterance_loss(
        &mut g,
        model,
        &u.features,
        &u.target,
        cfg.lambda_a,
        cfg.reduction,
        augment,
    )?
    else {
        return Ok(None);
    };
    let loss = g.value(l.loss).item();
    Ok(Some(Item {
        loss,
        grads: g.param_grads(l.loss)?,
    }))
}

/// One pass over `train`. Returns `(mean loss, filtered, infeasible)`.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    sched: &Newbob,
    train: &[Utterance],
    cfg: &TrainConfig,
    epoch: usize,
    workers: &rayon::ThreadPool,
) -> Result<(f64, usize, usize)> {
    let kept: Vec<&Utterance> = train.iter().filter(|u| u.duration <= cfg.max_duration).collect();
    let filtered = train.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::AllUtterancesFiltered);
    }
    let lengths: Vec<usize> = kept.iter().map(|u| u.features.rows()).collect();
    let mut total = 0.0;
    let mut counted = 0;
    let mut infeasible = 0;
    for batch in batches(kept.len(), &lengths, cfg.batch_size, cfg.seed, epoch) {
        let results: Vec<Result<Option<Item>>> = workers.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let r = (!cfg.spec_augment.is_off())
                        .then(|| rng::stream(cfg.seed, "spec-augment", (epoch as u64) << 32 | i as u64));
                    utterance_grads(model, kept[i], cfg, r)
                })
                .collect()
        });
        let mut acc = ParamGrads::new();
        let mut items = Vec::new();
        for r in results {
            match r? {
                Some(it) => items.push(it),
                None => infeasible += 1,
            }
        }
        if items.is_empty() {
            continue;
        }
        let w = 1.0 / items.len() as f64;
        for it in &items {
            accumulate_grads(&mut acc, &it.grads, w);
            total += it.loss;
            counted += 1;
        }
        if cfg.grad_clip > 0.0 {
            clip(&mut acc, cfg.grad_clip);
        }
        adam_step(
            &mut model.params,
            &acc,
            adam,
            &|n| lr_for(n, sched),
            &AdamConfig::default(),
        );
    }
    let mean = if counted == 0 { f64::NAN } else { total / counted as f64 };
    Ok((mean, filtered, infeasible))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DevScore {
    pub loss: f64,
    /// Mean CTC and attention terms before weighting (NaN when unweighted).
    pub ctc: f64,
    pub s2s: f64,
    /// Greedy CTC word error rate, utterance averaged.
    pub wer: f64,
}

impl DevScore {
    fn unscored(loss: f64) -> Self {
        Self {
            loss,
            ctc: f64::NAN,
            s2s: f64::NAN,
            wer: f64::NAN,
        }
    }
}

fn mean_or(xs: &[f64], empty: f64) -> f64 {
    if xs.is_empty() {
        empty
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean loss and greedy-CTC WER with no duration filter and no augmentation.
pub fn evaluate(
    model: &Model,
    dev: &[Utterance],
    lambda_a: f64,
    reduction: Reduction,
    workers: &rayon::ThreadPool,
) -> Result<DevScore> {
    if dev.is_empty() {
        return Ok(DevScore::unscored(f64::NAN));
    }
    type Scored = (Option<(f64, Option<f64>, Option<f64>)>, String);
    let per: Vec<Result<Scored>> = workers.install(|| {
        dev.par_iter()
            .map(|u| {
                let mut g = Graph::inference(&model.params);
                let l = model::utterance_loss(&mut g, model, &u.features, &u.target, lambda_a, reduction, None)?;
                let loss = l.map(|l| (g.value(l.loss).item(), l.ctc, l.s2s));
                let hyp = greedy_transcript(model, &u.features)?;
                Ok((loss, hyp))
            })
            .collect()
    });
    let (mut losses, mut ctc, mut s2s) = (Vec::new(), Vec::new(), Vec::new());
    let mut pairs = Vec::new();
    for (u, r) in dev.iter().zip(per) {
        let (l, hyp) = r?;
        if let Some((l, c, a)) = l {
            losses.push(l);
            ctc.extend(c);
            s2s.extend(a);
        }
        pairs.push((u.text.clone(), hyp));
    }
    Ok(DevScore {
        loss: mean_or(&losses, f64::INFINITY),
        ctc: mean_or(&ctc, f64::NAN),
        s2s: mean_or(&s2s, f64::NAN),
        wer: metrics::corpus_wer(&pairs).utterance_averaged,
    })
}

pub fn greedy_transcript(model: &Model, features: &Array) -> Result<String> {
    let post = model::posteriors(model, features)?;
    let ids = ctc::greedy_decode(&post.ctc_logp, model.inventory.blank());
    Ok(text::render(&ids, &model.inventory))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest dev loss.
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
}

/// Epoch loop with Newbob annealing and best-dev selection. With an empty
/// dev set the training loss drives both.
pub fn train(
    mut model: Model,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.lambda_a < 1.0 && model.cfg.head != HeadKind::Hybrid {
        return Err(Error::config("lambda_a", "attention loss needs a hybrid head"));
    }
    let workers = pool(cfg.workers)?;
    let mut adam = AdamState::default();
    let mut sched = Newbob::new(cfg);
    let mut reports = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let (lr_head, lr_encoder) = (sched.lr_head, sched.lr_encoder);
        let (train_loss, filtered, infeasible) =
            train_epoch(&mut model, &mut adam, &sched, train, cfg, epoch, &workers)?;
        let score = if dev.is_empty() {
            DevScore::unscored(train_loss)
        } else {
            evaluate(&model, dev, cfg.lambda_a, cfg.reduction, &workers)?
        };
        sched.update(score.loss);
        let report = EpochReport {
            epoch,
            train_loss,
            dev_loss: score.loss,
            dev_ctc: score.ctc,
            dev_s2s: score.s2s,
            dev_wer: score.wer,
            lr_head,
            lr_encoder,
            filtered,
            infeasible,
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        if best.as_ref().is_none_or(|(b, _, _)| score.loss < *b) {
            best = Some((score.loss, epoch, model.params.clone()));
        }
        reports.push(report);
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        model.params = p;
    }
    Ok(TrainOutcome {
        model,
        reports,
        best_epoch,
    })
}

/// Continues training a checkpoint on a new corpus. The checkpoint must have
/// the expected architecture and inventory.
pub fn consecutive_transfer(
    checkpoint: Model,
    expected: &ModelConfig,
    inventory: &TokenInventory,
    train_set: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    if checkpoint.inventory.hash() != inventory.hash() {
        return Err(Error::CheckpointMismatch("token inventory differs".into()));
    }
    if checkpoint.cfg.arch_hash() != expected.arch_hash() {
        return Err(Error::CheckpointMismatch("architecture differs".into()));
    }
    if train_set.is_empty() {
        return Err(Error::AllUtterancesFiltered);
    }
    train(checkpoint, train_set, dev, cfg, on_epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub ssl: SslConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Utterances whose latents seed the codebook.
    pub warmup_utterances: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            ssl: SslConfig::default(),
            lr: 1e-3,
            epochs: 1,
            batch_size: 8,
            warmup_utterances: 64,
            seed: 0,
            grad_clip: 5.0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub epoch: usize,
    pub loss: f64,
    /// Utterances with fewer than two masked frames.
    pub skipped: usize,
    pub distractors_clamped: usize,
}

/// Fits the codebook on the current encoder's latents of `corpus[..warmup]`.
pub fn fit_codebook(model: &Model, corpus: &[Array], cfg: &PretrainConfig) -> Result<Codebook> {
    let mut rows = Vec::new();
    for x in corpus.iter().take(cfg.warmup_utterances.max(1)) {
        let mut g = Graph::inference(&model.params);
        let z = encoder::encode_latent(&mut g, &model.cfg.encoder, x)?;
        let z = g.value(z);
        rows.extend((0..z.rows()).map(|t| z.row(t).to_vec()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Codebook::kmeans(
        &Array::from_rows(&rows)?,
        cfg.ssl.codebook_size,
        cfg.ssl.kmeans_iters,
        &mut rng::stream(cfg.seed, "kmeans", 0),
    )
}

/// Contrastive pretraining of a head-less model.
pub fn pretrain(
    mut model: Model,
    corpus: &[Array],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&PretrainReport),
) -> Result<(Model, Codebook, Vec<PretrainReport>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !model.params.contains("ssl.proj.w") {
        ssl::init_ssl_params(
            &model.cfg.encoder,
            &mut model.params,
            &mut rng::stream(cfg.seed, "init-ssl", 0),
        );
    }
    let workers = pool(cfg.workers.max(1))?;
    let codebook = fit_codebook(&model, corpus, cfg)?;
    let mut adam = AdamState::default();
    let mut reports = Vec::new();
    let lengths: Vec<usize> = corpus.iter().map(Array::rows).collect();
    for epoch in 1..=cfg.epochs {
        let (mut total, mut counted, mut skipped, mut clamped) = (0.0, 0, 0, 0);
        for batch in batches(corpus.len(), &lengths, cfg.batch_size.max(1), cfg.seed, epoch) {
            let results: Vec<Result<Option<(f64, ParamGrads, bool)>>> = workers.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut r = rng::stream(cfg.seed, "ssl-mask", (epoch as u64) << 32 | i as u64);
                        let mut g = Graph::training(&model.params);
                        match ssl::ssl_loss(
                            &mut g,
                            &model.cfg.encoder,
                            &cfg.ssl,
                            &corpus[i],
                            &codebook,
                            &mut r,
                            None,
                        ) {
                            Ok((l, diag)) => Ok(Some((
                                g.value(l).item(),
                                g.param_grads(l)?,
                                diag.distractors_clamped.is_some(),
                            ))),
                            Err(Error::NotEnoughFrames(_)) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect()
            });
            let mut items = Vec::new();
            for r in results {
                match r? {
                    Some(it) => items.push(it),
                    None => skipped += 1,
                }
            }
            if items.is_empty() {
                continue;
            }
            let mut acc = ParamGrads::new();
            let w = 1.0 / items.len() as f64;
            for (loss, grads, c) in &items {
                accumulate_grads(&mut acc, grads, w);
                total += loss;
                counted += 1;
                clamped += usize::from(*c);
            }
            if cfg.grad_clip > 0.0 {
                clip(&mut acc, cfg.grad_clip);
            }
            adam_step(&mut model.params, &acc, &mut adam, &|_| cfg.lr, &AdamConfig::default());
        }
        let report = PretrainReport {
            epoch,
            loss: if counted == 0 { f64::NAN } else { total / counted as f64 },
            skipped,
            distractors_clamped: clamped,
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok((model, codebook, reports))
}
