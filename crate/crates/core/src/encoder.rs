//! Convolutional feature encoder followed by a Transformer context network.
//!
//! The input is a `T×C_in` matrix: a raw mono signal is `L×1`, a precomputed
//! feature matrix is `T×F`. Configs with no conv blocks feed features straight
//! to the projection. The latent `z` is the layer-normalised frontend output;
//! the context `c` is the Transformer output after masking.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::linear;
use crate::numerics::{Array, Graph, ParamStore, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of the input matrix (1 for a raw signal).
    pub input_dim: usize,
    pub conv: Vec<ConvBlock>,
    pub context_blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
}

impl EncoderConfig {
    /// Small signal-input config.
    pub fn toy() -> Self {
        Self {
            input_dim: 1,
            conv: vec![
                ConvBlock {
                    channels: 32,
                    width: 4,
                    stride: 2,
                };
                2
            ],
            context_blocks: 2,
            heads: 4,
            dim: 64,
            ffn_dim: 128,
        }
    }

    /// Feature-input config: the conv frontend is bypassed.
    pub fn toy_features(feature_dim: usize) -> Self {
        Self {
            input_dim: feature_dim,
            conv: Vec::new(),
            ..Self::toy()
        }
    }

    /// Full-size dimensions, used for shape arithmetic only.
    pub fn reference() -> Self {
        let widths = [10, 3, 3, 3, 3, 2, 2];
        let strides = [5, 2, 2, 2, 2, 2, 2];
        Self {
            input_dim: 1,
            conv: widths
                .iter()
                .zip(strides)
                .map(|(&width, stride)| ConvBlock {
                    channels: 512,
                    width,
                    stride,
                })
                .collect(),
            context_blocks: 12,
            heads: 16,
            dim: 1024,
            ffn_dim: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::config("encoder", reason));
        if self.input_dim == 0 || self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.dim % self.heads != 0 {
            return bad("model dim must be divisible by head count");
        }
        if self
            .conv
            .iter()
            .any(|b| b.channels == 0 || b.width == 0 || b.stride == 0)
        {
            return bad("conv block fields must be positive");
        }
        Ok(())
    }

    /// Width of the frontend output (the latent dimension).
    pub fn latent_dim(&self) -> usize {
        self.conv.last().map_or(self.input_dim, |b| b.channels)
    }

    pub fn receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1, 1);
        for b in &self.conv {
            rf += (b.width - 1) * jump;
            jump *= b.stride;
        }
        rf
    }

    pub fn total_stride(&self) -> usize {
        self.conv.iter().map(|b| b.stride).product()
    }

    /// Frames produced for an input of `len` rows.
    pub fn output_frames(&self, len: usize) -> Result<usize> {
        let mut t = len;
        for b in &self.conv {
            if t < b.width {
                return Err(Error::InputTooShort {
                    len,
                    field: self.receptive_field(),
                });
            }
            t = (t - b.width) / b.stride + 1;
        }
        if t == 0 {
            return Err(Error::InputTooShort { len, field: 1 });
        }
        Ok(t)
    }
}

pub fn init_encoder_params(cfg: &EncoderConfig, params: &mut ParamStore, rng: &mut impl rand::Rng) {
    let mut c_in = cfg.input_dim;
    for (i, b) in cfg.conv.iter().enumerate() {
        let p = format!("encoder.conv{i}");
        params.init_glorot(&format!("{p}.w"), &[b.channels, b.width * c_in], rng);
        params.init_const(&format!("{p}.b"), &[b.channels], 0.0);
        params.init_const(&format!("{p}.ln_g"), &[b.channels], 1.0);
        params.init_const(&format!("{p}.ln_b"), &[b.channels], 0.0);
        c_in = b.channels;
    }
    let z = cfg.latent_dim();
    let d = cfg.dim;
    params.init_const("encoder.ln_g", &[z], 1.0);
    params.init_const("encoder.ln_b", &[z], 0.0);
    params.init_glorot("encoder.proj.w", &[z, d], rng);
    params.init_const("encoder.proj.b", &[d], 0.0);
    params.init_uniform("encoder.mask_emb", &[d], 0.5, rng);
    for i in 0..cfg.context_blocks {
        let p = format!("encoder.block{i}");
        for ln in ["ln1", "ln2"] {
            params.init_const(&format!("{p}.{ln}_g"), &[d], 1.0);
            params.init_const(&format!("{p}.{ln}_b"), &[d], 0.0);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            params.init_glorot(&format!("{p}.{w}"), &[d, d], rng);
            params.init_const(&format!("{p}.{w}_b"), &[d], 0.0);
        }
        params.init_glorot(&format!("{p}.ff1"), &[d, cfg.ffn_dim], rng);
        params.init_const(&format!("{p}.ff1_b"), &[cfg.ffn_dim], 0.0);
        params.init_glorot(&format!("{p}.ff2"), &[cfg.ffn_dim, d], rng);
        params.init_const(&format!("{p}.ff2_b"), &[d], 0.0);
    }
    params.init_const("encoder.out_ln_g", &[d], 1.0);
    params.init_const("encoder.out_ln_b", &[d], 0.0);
}

/// Fixed sinusoidal position table `[T, D]`.
pub fn positional_encoding(frames: usize, dim: usize) -> Array {
    let mut a = Array::zeros(&[frames, dim]);
    for t in 0..frames {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 / rate;
            a.row_mut(t)[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    a
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Frontend latent `[T, latent_dim]`, before masking.
    pub latent: Var,
    /// Context representations `[T, dim]`.
    pub context: Var,
    pub frames: usize,
}

fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}_g"))?;
    let beta = g.param(&format!("{prefix}_b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn dense(g: &mut Graph, x: Var, w: &str) -> Result<Var> {
    let wv = g.param(w)?;
    let bv = g.param(&format!("{w}_b"))?;
    linear(g, x, wv, Some(bv))
}

fn self_attention(g: &mut Graph, x: Var, p: &str, heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let q = dense(g, x, &format!("{p}.wq"))?;
    let k = dense(g, x, &format!("{p}.wk"))?;
    let v = dense(g, x, &format!("{p}.wv"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat(&outs, 1)?;
    dense(g, cat, &format!("{p}.wo"))
}

fn context_block(g: &mut Graph, x: Var, p: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{p}.ln1"))?;
    let h = self_attention(g, h, p, heads)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, x, &format!("{p}.ln2"))?;
    let h = dense(g, h, &format!("{p}.ff1"))?;
    let h = g.gelu(h);
    let h = dense(g, h, &format!("{p}.ff2"))?;
    g.add(x, h)
}

/// Runs the frontend only, returning the latent `z`.
pub fn encode_latent(g: &mut Graph, cfg: &EncoderConfig, input: &Array) -> Result<Var> {
    if input.ndim() != 2 || input.cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim,
            got: if input.ndim() == 2 { input.cols() } else { input.len() },
        });
    }
    cfg.output_frames(input.rows())?;
    let mut x = g.constant(input.clone());
    for (i, b) in cfg.conv.iter().enumerate() {
        let p = format!("encoder.conv{i}");
        let w = g.param(&format!("{p}.w"))?;
        let bias = g.param(&format!("{p}.b"))?;
        x = g.conv1d(x, w, Some(bias), b.stride, 0)?;
        x = layer_norm(g, x, &format!("{p}.ln"))?;
        x = g.gelu(x);
    }
    layer_norm(g, x, "encoder.ln")
}

/// Full encoder; masked frames (if any) are replaced by the mask embedding
/// after projection.
pub fn encode(g: &mut Graph, cfg: &EncoderConfig, input: &Array, mask: Option<&FrameMask>) -> Result<EncoderOutput> {
    let latent = encode_latent(g, cfg, input)?;
    let frames = g.shape(latent)[0];
    let w = g.param("encoder.proj.w")?;
    let b = g.param("encoder.proj.b")?;
    let mut x = linear(g, latent, w, Some(b))?;
    if let Some(m) = mask {
        x = apply_mask(g, x, m)?;
    }
    x = g.add_const(x, &positional_encoding(frames, cfg.dim))?;
    for i in 0..cfg.context_blocks {
        x = context_block(g, x, &format!("encoder.block{i}"), cfg.heads)?;
    }
    let context = layer_norm(g, x, "encoder.out_ln")?;
    Ok(EncoderOutput {
        latent,
        context,
        frames,
    })
}

/// Replaces masked rows of `z` with the trainable `encoder.mask_emb`.
pub fn apply_mask(g: &mut Graph, z: Var, mask: &FrameMask) -> Result<Var> {
    let emb = g.param("encoder.mask_emb")?;
    g.row_replace(z, emb, &mask.mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub span: usize,
    pub start_prob: f64,
    /// Spans forced when the draw yields none.
    pub min_spans: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            span: 4,
            start_prob: 0.15,
            min_spans: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMask {
    pub mask: Vec<bool>,
    pub starts: Vec<usize>,
    pub span: usize,
}

impl FrameMask {
    pub fn none(frames: usize) -> Self {
        Self {
            mask: vec![false; frames],
            starts: Vec::new(),
            span: 0,
        }
    }

    /// Union of `[s, s + span)` for each start, dropping trailing starts until
    /// at least one frame stays visible.
    pub fn from_starts(frames: usize, starts: &[usize], span: usize) -> Self {
        let mut starts: Vec<usize> = starts.iter().copied().filter(|&s| s < frames).collect();
        starts.sort_unstable();
        starts.dedup();
        loop {
            let mut mask = vec![false; frames];
            for &s in &starts {
                for m in mask.iter_mut().skip(s).take(span) {
                    *m = true;
                }
            }
            if frames == 0 || mask.iter().any(|&m| !m) {
                return Self { mask, starts, span };
            }
            starts.pop();
        }
    }

    pub fn sample(frames: usize, policy: &MaskPolicy, rng: &mut impl rand::Rng) -> Self {
        let mut starts: Vec<usize> = (0..frames).filter(|_| rng.gen_bool(policy.start_prob)).collect();
        while starts.len() < policy.min_spans && frames > policy.span {
            let s = rng.gen_range(0..frames - policy.span + 1);
            if !starts.contains(&s) {
                starts.push(s);
            }
        }
        Self::from_starts(frames, &starts, policy.span)
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentPolicy {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            time_masks: 2,
            time_width: 10,
            freq_masks: 2,
            freq_width: 4,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn off() -> Self {
        Self {
            time_masks: 0,
            time_width: 0,
            freq_masks: 0,
            freq_width: 0,
        }
    }

    pub fn is_off(&self) -> bool {
        self.time_masks == 0 && self.freq_masks == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub features: Array,
    /// `(start, width)` of each zeroed time band.
    pub time_bands: Vec<(usize, usize)>,
    pub freq_bands: Vec<(usize, usize)>,
}

fn draw_bands(extent: usize, count: usize, max_width: usize, rng: &mut impl rand::Rng) -> Vec<(usize, usize)> {
    let limit = max_width.min(extent.saturating_sub(1));
    let mut bands = Vec::new();
    for _ in 0..count {
        let w = rng.gen_range(0..=limit);
        if w == 0 {
            continue;
        }
        let s = rng.gen_range(0..=extent - w);
        bands.push((s, w));
    }
    // bands may overlap; keep one row or column untouched
    while !bands.is_empty() {
        let mut hit = vec![false; extent];
        for &(s, w) in &bands {
            hit[s..s + w].iter_mut().for_each(|h| *h = true);
        }
        if hit.iter().any(|&h| !h) {
            break;
        }
        bands.pop();
    }
    bands
}

/// Zeroes random time and frequency bands of a `T×F` matrix.
pub fn spec_augment(features: &Array, policy: &SpecAugmentPolicy, rng: &mut impl rand::Rng) -> Augmented {
    let (t, f) = (features.rows(), features.cols());
    let time_bands = draw_bands(t, policy.time_masks, policy.time_width, rng);
    let freq_bands = draw_bands(f, policy.freq_masks, policy.freq_width, rng);
    let mut out = features.clone();
    for &(s, w) in &time_bands {
        for r in s..s + w {
            out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for &(s, w) in &freq_bands {
        for r in 0..t {
            out.row_mut(r)[s..s + w].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Augmented {
        features: out,
        time_bands,
        freq_bands,
    }
}

/// Binary matrix: `T` and `F` as u32 LE, then `T·F` row-major f32 LE.
pub fn encode_matrix(a: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + a.len() * 4);
    out.extend_from_slice(&(a.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(a.cols() as u32).to_le_bytes());
    for &v in a.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array> {
    let bad = |d: String| Error::Format {
        what: "feature matrix",
        detail: d,
    };
    if bytes.len() < 8 {
        return Err(bad("missing header".into()));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != t * f * 4 {
        return Err(bad(format!("expected {} values, found {} bytes", t * f, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array::matrix(t, f, data)
}

pub fn read_matrix(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub fn write_matrix(path: &Path, a: &Array) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_matrix(a)).map_err(|e| Error::io(path, e))
}

/// Comma-separated rows, one frame per line.
pub fn parse_matrix_csv(text: &str) -> Result<Array> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| Error::Format {
                        what: "feature csv",
                        detail: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Array::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use proptest::prelude::*;

    fn toy_params(cfg: &EncoderConfig) -> ParamStore {
        let mut p = ParamStore::new();
        init_encoder_params(cfg, &mut p, &mut rng::stream(0, "enc", 0));
        p
    }

    /// Walks the window positions of each block explicitly.
    fn walk_frames(cfg: &EncoderConfig, len: usize) -> usize {
        let mut t = len;
        for b in &cfg.conv {
            let mut n = 0;
            let mut pos = 0;
            while pos + b.width <= t {
                n += 1;
                pos += b.stride;
            }
            t = n;
        }
        t
    }

    #[test]
    fn receptive_field_gives_one_frame() {
        let cfg = EncoderConfig::toy();
        let rf = cfg.receptive_field();
        assert_eq!(cfg.output_frames(rf).unwrap(), 1);
        assert!(matches!(cfg.output_frames(rf - 1), Err(Error::InputTooShort { .. })));
        let p = toy_params(&cfg);
        let mut g = Graph::inference(&p);
        let out = encode(&mut g, &cfg, &Array::zeros(&[rf, 1]), None).unwrap();
        assert_eq!(g.shape(out.context), &[1, 64]);
    }

    #[test]
    fn toy_and_reference_shapes() {
        let cfg = EncoderConfig::toy();
        assert_eq!(cfg.output_frames(64).unwrap(), walk_frames(&cfg, 64));
        assert_eq!(cfg.output_frames(64).unwrap(), 14);
        let r = EncoderConfig::reference();
        assert_eq!(r.total_stride(), 320);
        assert_eq!(r.output_frames(16000).unwrap(), 49);
        r.validate().unwrap();
    }

    proptest! {
        #[test]
        fn frame_count_matches_walk(len in 1usize..3000, blocks in proptest::collection::vec((1usize..8, 1usize..5), 1..4)) {
            let cfg = EncoderConfig {
                conv: blocks.iter().map(|&(width, stride)| ConvBlock { channels: 2, width, stride }).collect(),
                ..EncoderConfig::toy()
            };
            let walked = walk_frames(&cfg, len);
            match cfg.output_frames(len) {
                Ok(t) => prop_assert_eq!(t, walked),
                Err(_) => prop_assert_eq!(walked, 0),
            }
        }

        #[test]
        fn mask_partition_is_exact(frames in 1usize..60, seed in 0u64..1000) {
            let mut r = rng::stream(seed, "m", 0);
            let m = FrameMask::sample(frames, &MaskPolicy::default(), &mut r);
            prop_assert!(m.count() < frames);
            let cfg = EncoderConfig::toy_features(3);
            let p = toy_params(&cfg);
            let mut g = Graph::inference(&p);
            let z = g.constant(Array::new(vec![frames, 64], (0..frames * 64).map(|i| i as f64 * 0.01).collect()).unwrap());
            let out = apply_mask(&mut g, z, &m).unwrap();
            let emb = p.get("encoder.mask_emb").unwrap().data();
            for t in 0..frames {
                let row = g.value(out).row(t);
                if m.mask[t] {
                    prop_assert_eq!(row, emb);
                } else {
                    prop_assert_eq!(row, g.value(z).row(t));
                }
            }
        }

        #[test]
        fn spec_augment_within_policy(seed in 0u64..100, t in 1usize..40, f in 1usize..12) {
            let x = Array::full(&[t, f], 1.0);
            let pol = SpecAugmentPolicy::default();
            let a = spec_augment(&x, &pol, &mut rng::stream(seed, "sa", 0));
            prop_assert_eq!(a.features.shape(), x.shape());
            prop_assert!(a.time_bands.len() <= pol.time_masks && a.freq_bands.len() <= pol.freq_masks);
            prop_assert!(a.time_bands.iter().all(|&(_, w)| w <= pol.time_width));
            prop_assert!(a.freq_bands.iter().all(|&(_, w)| w <= pol.freq_width));
            prop_assert!(a.features.data().iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn empty_and_near_full_masks() {
        let cfg = EncoderConfig::toy_features(3);
        let p = toy_params(&cfg);
        let mut g = Graph::inference(&p);
        let z = g.constant(Array::full(&[5, 64], 2.0));
        let out = apply_mask(&mut g, z, &FrameMask::none(5)).unwrap();
        assert_eq!(g.value(out), g.value(z));
        let m = FrameMask::from_starts(5, &[0], 4);
        let out = apply_mask(&mut g, z, &m).unwrap();
        let same = (0..5).filter(|&t| g.value(out).row(t) == g.value(z).row(t)).count();
        assert_eq!(same, 1);
        assert!(matches!(
            apply_mask(&mut g, z, &FrameMask::none(4)),
            Err(Error::LengthMismatch { .. })
        ));
        // a single span over everything is dropped
        assert_eq!(FrameMask::from_starts(3, &[0], 4).count(), 0);
    }

    #[test]
    fn spec_augment_identity_and_clamp() {
        let x = Array::new(vec![6, 3], (0..18).map(|i| i as f64 + 1.0).collect()).unwrap();
        let a = spec_augment(&x, &SpecAugmentPolicy::off(), &mut rng::stream(1, "sa", 0));
        assert_eq!(a.features, x);
        let wide = SpecAugmentPolicy {
            time_masks: 1,
            time_width: 6,
            freq_masks: 0,
            freq_width: 0,
        };
        for s in 0..50 {
            let a = spec_augment(&x, &wide, &mut rng::stream(s, "sa", 0));
            assert!(a.time_bands.iter().all(|&(_, w)| w < 6));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::toy_features(5);
        let p = toy_params(&cfg);
        let x = Array::new(vec![7, 5], (0..35).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = || {
            let mut g = Graph::inference(&p);
            let o = encode(&mut g, &cfg, &x, None).unwrap();
            g.value(o.context).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn matrix_formats_roundtrip() {
        let a = Array::new(vec![2, 3], vec![0.5, -1.25, 2.0, 3.0, 0.0, 8.5]).unwrap();
        assert_eq!(decode_matrix(&encode_matrix(&a)).unwrap(), a);
        assert!(decode_matrix(&[1, 0, 0, 0, 1, 0, 0, 0]).is_err());
        let c = parse_matrix_csv("0.5,-1.25,2\n3,0,8.5\n").unwrap();
        assert_eq!(c, a);
    }
}
