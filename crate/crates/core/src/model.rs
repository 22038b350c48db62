//! Encoder plus output head, with checkpoint plumbing.
//!
//! Parameter names are grouped by prefix: `encoder.*` for the pretrained
//! network, `head.*` for the recognition head and `ssl.*` for the
//! pretraining projection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::encoder::{self, EncoderConfig, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::numerics::nn::linear;
use crate::numerics::{
    config_hash, load_checkpoint, rng, save_checkpoint, Array, CheckpointMeta, Graph, ParamStore, Var,
    CHECKPOINT_VERSION,
};
use crate::s2s::{self, Reduction, S2sConfig};
use crate::ssl;
use crate::text::TokenInventory;

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Pretraining only: no recognition head.
    None,
    /// A single linear CTC layer on the context vectors.
    Ctc,
    /// Linear + leaky ReLU feeding both a CTC layer and the attention decoder.
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    /// Width of the shared head features (hybrid head).
    pub head_dim: usize,
    pub s2s: S2sConfig,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, head: HeadKind, inventory: &TokenInventory) -> Self {
        let head_dim = encoder.dim;
        Self {
            s2s: S2sConfig::toy(head_dim, inventory.label_count()),
            encoder,
            head,
            head_dim,
        }
    }

    pub fn with_head(&self, head: HeadKind) -> Self {
        Self { head, ..self.clone() }
    }

    pub fn arch_hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub inventory: TokenInventory,
    pub params: ParamStore,
}

fn init_head(cfg: &ModelConfig, inv: &TokenInventory, params: &mut ParamStore, rng: &mut impl rand::Rng) {
    let d = cfg.encoder.dim;
    match cfg.head {
        HeadKind::None => {}
        HeadKind::Ctc => {
            params.init_glorot("head.ctc.w", &[d, inv.len()], rng);
            params.init_const("head.ctc.b", &[inv.len()], 0.0);
        }
        HeadKind::Hybrid => {
            params.init_glorot("head.f.w", &[d, cfg.head_dim], rng);
            params.init_const("head.f.b", &[cfg.head_dim], 0.0);
            params.init_glorot("head.ctc.w", &[cfg.head_dim, inv.len()], rng);
            params.init_const("head.ctc.b", &[inv.len()], 0.0);
            s2s::init_s2s_params(&cfg.s2s, params, rng);
        }
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, inventory: TokenInventory, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        if cfg.head == HeadKind::Hybrid && cfg.s2s.vocab != inventory.label_count() {
            return Err(Error::config("s2s.vocab", "must equal the inventory label count"));
        }
        let mut params = ParamStore::new();
        encoder::init_encoder_params(&cfg.encoder, &mut params, &mut rng::stream(seed, "init-encoder", 0));
        if cfg.head == HeadKind::None {
            ssl::init_ssl_params(&cfg.encoder, &mut params, &mut rng::stream(seed, "init-ssl", 0));
        }
        init_head(&cfg, &inventory, &mut params, &mut rng::stream(seed, "init-head", 0));
        Ok(Self { cfg, inventory, params })
    }

    /// A fresh head of `kind` on top of this model's encoder.
    pub fn with_new_head(&self, kind: HeadKind, seed: u64) -> Result<Self> {
        let cfg = self.cfg.with_head(kind);
        let mut m = Self::new(cfg, self.inventory.clone(), seed)?;
        m.params.copy_prefix_from(&self.params, "encoder.");
        Ok(m)
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            inventory_hash: self.inventory.hash(),
            arch_hash: self.cfg.arch_hash(),
            arch: serde_json::json!({
                "model": serde_json::to_value(&self.cfg)?,
                "inventory": self.inventory.symbols(),
            }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, &self.meta()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_value(meta.arch["model"].clone())?;
        let symbols: Vec<String> = serde_json::from_value(meta.arch["inventory"].clone())?;
        let inventory = TokenInventory::from_symbols(symbols)?;
        if inventory.hash() != meta.inventory_hash || cfg.arch_hash() != meta.arch_hash {
            return Err(Error::CheckpointMismatch(
                "metadata hashes do not match contents".into(),
            ));
        }
        Ok(Self { cfg, inventory, params })
    }

    /// Errors unless `other` has the same architecture and inventory.
    pub fn check_compatible(&self, other: &Model) -> Result<()> {
        if self.inventory.hash() != other.inventory.hash() {
            return Err(Error::CheckpointMismatch("token inventory differs".into()));
        }
        if self.cfg.arch_hash() != other.cfg.arch_hash() {
            return Err(Error::CheckpointMismatch("architecture differs".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// CTC log-posteriors `[T, |inventory|]`.
    pub ctc_logp: Var,
    /// Attention-decoder input features (hybrid head only).
    pub features: Option<Var>,
    pub frames: usize,
}

/// Encoder and head on one utterance. SpecAugment is applied to feature
/// inputs when a policy is given.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    input: &Array,
    augment: Option<(&SpecAugmentPolicy, &mut rng::Rng)>,
) -> Result<HeadOutput> {
    let augmented;
    let input = match augment {
        Some((policy, r)) => {
            augmented = encoder::spec_augment(input, policy, r).features;
            &augmented
        }
        None => input,
    };
    let enc = encoder::encode(g, &cfg.encoder, input, None)?;
    let (ctc_in, features) = match cfg.head {
        HeadKind::None => return Err(Error::config("head", "model has no recognition head")),
        HeadKind::Ctc => (enc.context, None),
        HeadKind::Hybrid => {
            let w = g.param("head.f.w")?;
            let b = g.param("head.f.b")?;
            let f = linear(g, enc.context, w, Some(b))?;
            let f = g.leaky_relu(f, LEAKY_SLOPE);
            (f, Some(f))
        }
    };
    let w = g.param("head.ctc.w")?;
    let b = g.param("head.ctc.b")?;
    let logits = linear(g, ctc_in, w, Some(b))?;
    Ok(HeadOutput {
        ctc_logp: g.log_softmax(logits),
        features,
        frames: enc.frames,
    })
}

/// Weighted CTC / attention objective `λ_a·ctc + (1 − λ_a)·s2s`.
pub fn joint_loss(ctc: f64, s2s: f64, lambda_a: f64) -> f64 {
    lambda_a * ctc + (1.0 - lambda_a) * s2s
}

#[derive(Clone, Copy, Debug)]
pub struct UtteranceLoss {
    pub loss: Var,
    pub ctc: Option<f64>,
    pub s2s: Option<f64>,
}

/// Training loss for one utterance; `None` when the CTC target cannot be
/// aligned to the available frames (and CTC carries weight).
pub fn utterance_loss(
    g: &mut Graph,
    model: &Model,
    input: &Array,
    target: &[usize],
    lambda_a: f64,
    reduction: Reduction,
    augment: Option<(&SpecAugmentPolicy, &mut rng::Rng)>,
) -> Result<Option<UtteranceLoss>> {
    let out = forward(g, &model.cfg, input, augment)?;
    let inv = &model.inventory;
    let mut parts = Vec::new();
    let mut ctc_value = None;
    if lambda_a > 0.0 {
        let Some(l) = ctc::ctc_loss_node(g, out.ctc_logp, target, inv.blank())? else {
            return Ok(None);
        };
        ctc_value = Some(g.value(l).item());
        parts.push(g.scale(l, lambda_a));
    }
    let mut s2s_value = None;
    if lambda_a < 1.0 {
        let f = out
            .features
            .ok_or_else(|| Error::config("lambda_a", "attention loss needs a hybrid head"))?;
        let mut labels = target.iter().map(|&t| inv.label_index(t)).collect::<Result<Vec<_>>>()?;
        labels.push(inv.label_index(inv.eos())?);
        let start = inv.label_index(inv.start_token())?;
        let l = s2s::s2s_loss(g, &model.cfg.s2s, f, out.frames, start, &labels, reduction)?;
        s2s_value = Some(g.value(l).item());
        parts.push(g.scale(l, 1.0 - lambda_a));
    }
    let loss = match parts[..] {
        [a] => a,
        [a, b] => g.add(a, b)?,
        _ => unreachable!("lambda_a is in [0, 1]"),
    };
    Ok(Some(UtteranceLoss {
        loss,
        ctc: ctc_value,
        s2s: s2s_value,
    }))
}

/// Inference outputs as plain arrays.
#[derive(Clone, Debug)]
pub struct Posteriors {
    pub ctc_logp: Array,
    pub features: Option<Array>,
}

pub fn posteriors(model: &Model, input: &Array) -> Result<Posteriors> {
    let mut g = Graph::inference(&model.params);
    let out = forward(&mut g, &model.cfg, input, None)?;
    Ok(Posteriors {
        ctc_logp: g.value(out.ctc_logp).clone(),
        features: out.features.map(|f| g.value(f).clone()),
    })
}
