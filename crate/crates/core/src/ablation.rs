//! Toy-scale ablations on synthetic corpora: removing training stages before
//! transfer to the singing-like domain, and the decoding ladder from CTC-only
//! through attention rescoring to language-model fusion.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{self, DecodeWeights};
use crate::encoder::{EncoderConfig, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::lm::{self, LanguageModel, LmConfig, LmTrainConfig};
use crate::metrics;
use crate::model::{HeadKind, Model, ModelConfig};
use crate::numerics::Array;
use crate::synth::{self, Domain};
use crate::text::TokenInventory;
use crate::trainer::{self, EpochReport, PretrainConfig, TrainConfig, Utterance};

/// Model dimensions for toy runs on synthetic features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDims {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub decoder_hidden: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            blocks: 1,
            decoder_hidden: 32,
        }
    }
}

pub fn toy_model_config(dims: &ToyDims, head: HeadKind, inv: &TokenInventory) -> ModelConfig {
    let mut enc = EncoderConfig::toy_features(synth::FEATURE_DIM);
    enc.dim = dims.dim;
    enc.heads = dims.heads;
    enc.ffn_dim = 2 * dims.dim;
    enc.context_blocks = dims.blocks;
    let mut cfg = ModelConfig::new(enc, head, inv);
    cfg.s2s.hidden = dims.decoder_hidden;
    cfg.s2s.attn_dim = dims.decoder_hidden / 2;
    cfg.s2s.emb_dim = 16;
    cfg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pretraining, speech finetuning, then transfer.
    Full,
    NoFinetune,
    NoPretrain,
    /// Transfer from random initialization.
    Scratch,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoFinetune,
        Variant::NoPretrain,
        Variant::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFinetune => "no-finetune",
            Variant::NoPretrain => "no-pretrain",
            Variant::Scratch => "scratch",
        }
    }

    fn pretrains(self) -> bool {
        matches!(self, Variant::Full | Variant::NoFinetune)
    }

    fn finetunes(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPretrain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageRemovalConfig {
    pub seed: u64,
    pub speech_utterances: usize,
    pub sing_train: usize,
    pub sing_dev: usize,
    pub dims: ToyDims,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub transfer: TrainConfig,
}

impl Default for StageRemovalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            speech_utterances: 2000,
            sing_train: 50,
            sing_dev: 20,
            dims: ToyDims::default(),
            pretrain: PretrainConfig {
                lr: 1e-3,
                epochs: 1,
                batch_size: 8,
                ..PretrainConfig::default()
            },
            finetune: TrainConfig {
                lr_head: 1e-3,
                lr_encoder: 1e-3,
                max_epochs: 2,
                batch_size: 8,
                ..TrainConfig::finetune_speech()
            },
            transfer: TrainConfig {
                lr_head: 3e-3,
                lr_encoder: 3e-4,
                batch_size: 2,
                max_epochs: 10,
                spec_augment: SpecAugmentPolicy::off(),
                ..TrainConfig::default()
            },
        }
    }
}

impl StageRemovalConfig {
    fn with_seed(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = self.seed;
        c.finetune.seed = self.seed;
        c.transfer.seed = self.seed;
        c
    }
}

/// Synthetic data shared by every variant of one seed.
pub struct StageData {
    pub speech: Vec<Utterance>,
    pub sing_train: Vec<Utterance>,
    pub sing_dev: Vec<Utterance>,
}

impl StageData {
    pub fn generate(cfg: &StageRemovalConfig, inv: &TokenInventory) -> Result<Self> {
        let speech = synth::generate(&Domain::speechlike(), cfg.speech_utterances, cfg.seed, inv)?;
        let sing = synth::generate(&Domain::singlike(), cfg.sing_train + cfg.sing_dev, cfg.seed, inv)?;
        let sing = synth::to_utterances(&sing, inv)?;
        Ok(Self {
            speech: synth::to_utterances(&speech, inv)?,
            sing_dev: sing[cfg.sing_train..].to_vec(),
            sing_train: sing[..cfg.sing_train].to_vec(),
        })
    }
}

/// Runs the stages of `variant`; returns the transfer-stage epoch reports.
pub fn run_variant(
    variant: Variant,
    cfg: &StageRemovalConfig,
    data: &StageData,
    inv: &TokenInventory,
) -> Result<Vec<EpochReport>> {
    let cfg = cfg.with_seed();
    let hybrid = toy_model_config(&cfg.dims, HeadKind::Hybrid, inv);
    let mut encoder_source = Model::new(hybrid.with_head(HeadKind::None), inv.clone(), cfg.seed)?;
    if variant.pretrains() {
        let feats: Vec<Array> = data.speech.iter().map(|u| u.features.clone()).collect();
        encoder_source = trainer::pretrain(encoder_source, &feats, &cfg.pretrain, |_| {})?.0;
    }
    if variant.finetunes() {
        let ctc = encoder_source.with_new_head(HeadKind::Ctc, cfg.seed)?;
        encoder_source = trainer::train(ctc, &data.speech, &[], &cfg.finetune, |_| {})?.model;
    }
    let start = encoder_source.with_new_head(HeadKind::Hybrid, cfg.seed)?;
    let out = trainer::consecutive_transfer(
        start,
        &hybrid,
        inv,
        &data.sing_train,
        &data.sing_dev,
        &cfg.transfer,
        |_| {},
    )?;
    Ok(out.reports)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_wer: f64,
}

pub fn stage_removal(cfg: &StageRemovalConfig, variants: &[Variant], inv: &TokenInventory) -> Result<Vec<CurvePoint>> {
    let data = StageData::generate(cfg, inv)?;
    let mut points = Vec::new();
    for &v in variants {
        for r in run_variant(v, cfg, &data, inv)? {
            points.push(CurvePoint {
                variant: v.name().to_string(),
                seed: cfg.seed,
                epoch: r.epoch,
                train_loss: r.train_loss,
                dev_loss: r.dev_loss,
                dev_wer: r.dev_wer,
            });
        }
    }
    Ok(points)
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("variant,seed,epoch,train_loss,dev_loss,dev_wer\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            p.variant, p.seed, p.epoch, p.train_loss, p.dev_loss, p.dev_wer
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderRow {
    pub mode: String,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub wer: f64,
}

/// CTC-only, joint CTC/attention, and joint with language-model fusion, all
/// on one checkpoint. The joint rows use `weights.lambda_b`.
pub fn decode_ladder(
    model: &Model,
    lm: Option<&LanguageModel>,
    test: &[Utterance],
    weights: &DecodeWeights,
    workers: usize,
) -> Result<Vec<LadderRow>> {
    let mut modes = vec![("ctc-only", 1.0, 0.0), ("joint", weights.lambda_b, 0.0)];
    if lm.is_some() {
        modes.push(("joint+lm", weights.lambda_b, weights.lambda_c));
    }
    let pool = trainer::pool(workers)?;
    let mut rows = Vec::new();
    for (mode, lambda_b, lambda_c) in modes {
        let w = DecodeWeights {
            lambda_b,
            lambda_c,
            ..*weights
        };
        let hyps: Vec<Result<String>> = pool.install(|| {
            test.par_iter()
                .map(|u| Ok(decode::decode_model(model, lm, &u.features, &w, 1)?.best.text))
                .collect()
        });
        let pairs = test
            .iter()
            .zip(hyps)
            .map(|(u, h)| Ok((u.text.clone(), h?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(LadderRow {
            mode: mode.to_string(),
            lambda_b,
            lambda_c,
            wer: metrics::corpus_wer(&pairs).utterance_averaged,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    pub seed: u64,
    pub train_utterances: usize,
    pub test_utterances: usize,
    /// Noise of the held-out set.
    pub test_noise: f64,
    pub dims: ToyDims,
    pub train: TrainConfig,
    pub lm_sentences: usize,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub weights: DecodeWeights,
    pub workers: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        let inv = TokenInventory::default();
        Self {
            seed: 0,
            train_utterances: 200,
            test_utterances: 40,
            test_noise: 0.3,
            dims: ToyDims::default(),
            train: TrainConfig {
                lr_head: 3e-3,
                lr_encoder: 3e-3,
                max_epochs: 40,
                spec_augment: SpecAugmentPolicy::off(),
                ..TrainConfig::default()
            },
            lm_sentences: 2000,
            lm: LmConfig {
                emb_dim: 16,
                layers: 1,
                hidden: 64,
                mlp_layers: 1,
                mlp_hidden: 64,
                ..LmConfig::toy(inv.label_count())
            },
            lm_train: LmTrainConfig {
                lr: 3e-3,
                batch: 20,
                epochs: 3,
                seed: 0,
            },
            weights: DecodeWeights {
                beam: 8,
                ..DecodeWeights::dsing()
            },
            workers: 1,
        }
    }
}

/// Trains a hybrid model on speechlike data and an LM on grammar sentences,
/// then runs the ladder on a noisier held-out set.
pub fn ladder_experiment(cfg: &LadderConfig, inv: &TokenInventory) -> Result<Vec<LadderRow>> {
    if cfg.lm.vocab != inv.label_count() {
        return Err(Error::config("lm.vocab", "must equal the inventory label count"));
    }
    let domain = Domain::speechlike();
    let train = synth::to_utterances(&synth::generate(&domain, cfg.train_utterances, cfg.seed, inv)?, inv)?;
    let test_domain = Domain {
        name: "speechlike-test".into(),
        ..domain.with_noise(cfg.test_noise)
    };
    let test = synth::to_utterances(&synth::generate(&test_domain, cfg.test_utterances, cfg.seed, inv)?, inv)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        workers: cfg.workers,
        ..cfg.train.clone()
    };
    let model = Model::new(
        toy_model_config(&cfg.dims, HeadKind::Hybrid, inv),
        inv.clone(),
        cfg.seed,
    )?;
    let model = trainer::train(model, &train, &[], &tc, |_| {})?.model;
    let sentences = lm::encode_corpus(&synth::lm_corpus(cfg.lm_sentences, cfg.seed), inv)?;
    let ltc = LmTrainConfig {
        seed: cfg.seed,
        ..cfg.lm_train
    };
    let start = inv.label_index(inv.start_token())?;
    let eos = inv.label_index(inv.eos())?;
    let trained = lm::lm_train(&sentences, &[], &cfg.lm, &ltc, start, eos, |_| {})?;
    let lm = LanguageModel {
        cfg: cfg.lm,
        inventory: inv.clone(),
        params: trained.params,
    };
    decode_ladder(&model, Some(&lm), &test, &cfg.weights, cfg.workers)
}
