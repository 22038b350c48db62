//! Synthetic corpora standing in for speech and singing.
//!
//! Every emittable character owns a fixed template shared by all domains: an
//! ordered triple drawn from a small set of phone vectors, so no single frame
//! identifies a character. An utterance renders each character of a sentence
//! as a run of frames split across its three phones, with an onset flag on the
//! first frame of the run, then adds Gaussian noise. Domains differ in run length, duration jitter,
//! noise level and a slow amplitude vibrato. Sentences come from a small
//! lexicon walked by a fixed first-order word grammar, so a character
//! language model trained on the same grammar is in-domain.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{round_ms, Manifest, UtteranceRecord};
use crate::encoder;
use crate::error::{Error, Result};
use crate::numerics::{rng, Array};
use crate::text::{self, TokenInventory};
use crate::trainer::Utterance;

/// Seconds per feature frame.
pub const FRAME_PERIOD: f64 = 0.02;
/// Template dimensions plus one onset flag.
pub const FEATURE_DIM: usize = 16;
const TEMPLATE_SEED: u64 = 0x7e3a_11c5;
const GRAMMAR_SEED: u64 = 0x61a3_9d02;
const SUCCESSORS: usize = 3;
const PHONES: usize = 8;
/// Phones per character template.
pub const TEMPLATE_LEN: usize = 3;
const EDGE_FRAMES: usize = 2;

pub const LEXICON: [&str; 32] = [
    "LOVE", "HEART", "NIGHT", "DREAM", "FIRE", "RAIN", "SKY", "HOME", "BABY", "TIME", "LIGHT", "SOUL", "GOLD", "ROAD",
    "MOON", "SUN", "DANCE", "CRY", "HOLD", "FALL", "RUN", "STAY", "BURN", "SHINE", "WILD", "SLOW", "BLUE", "COLD",
    "SWEET", "DON'T", "I'M", "YOU",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    /// Mean frames per character.
    pub frames_per_char: f64,
    /// Relative duration jitter; run lengths vary by up to this fraction.
    pub jitter: f64,
    /// Standard deviation of additive noise.
    pub noise: f64,
    /// Depth of the sinusoidal amplitude modulation.
    pub vibrato: f64,
}

impl Domain {
    pub fn speechlike() -> Self {
        Self {
            name: "speechlike".into(),
            frames_per_char: 3.5,
            jitter: 0.2,
            noise: 0.2,
            vibrato: 0.0,
        }
    }

    /// Runs 2.5 times longer than speechlike, noisier and modulated.
    pub fn singlike() -> Self {
        Self {
            name: "singlike".into(),
            frames_per_char: 8.75,
            jitter: 0.4,
            noise: 0.3,
            vibrato: 0.2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "speechlike" => Ok(Self::speechlike()),
            "singlike" => Ok(Self::singlike()),
            _ => Err(Error::config("domain", format!("unknown preset {name:?}"))),
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frames_per_char >= 1.0) {
            return Err(Error::config("frames_per_char", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("jitter", "must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0) || !(self.vibrato >= 0.0) {
            return Err(Error::config("noise", "noise and vibrato must be nonnegative"));
        }
        Ok(())
    }
}

fn phone(p: usize) -> Vec<f64> {
    let mut r = rng::stream(TEMPLATE_SEED, "phone", p as u64);
    (0..FEATURE_DIM - 1).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Phone indices of inventory token `id`; distinct tokens get distinct
/// triples.
pub fn template_phones(id: usize) -> [usize; TEMPLATE_LEN] {
    let mut codes: Vec<usize> = (0..PHONES.pow(TEMPLATE_LEN as u32)).collect();
    codes.shuffle(&mut rng::stream(TEMPLATE_SEED, "codes", 0));
    let c = codes[id % codes.len()];
    [c / (PHONES * PHONES), (c / PHONES) % PHONES, c % PHONES]
}

/// The fixed template of inventory token `id`, one vector per phone.
pub fn template(id: usize) -> Vec<Vec<f64>> {
    template_phones(id).iter().map(|&p| phone(p)).collect()
}

fn successors(word: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..LEXICON.len()).filter(|&w| w != word).collect();
    all.shuffle(&mut rng::stream(GRAMMAR_SEED, "grammar", word as u64));
    all.truncate(SUCCESSORS);
    all
}

/// A sentence of two to four words from the grammar.
pub fn sentence(r: &mut impl Rng) -> String {
    let len = r.gen_range(2..=4);
    let mut w = r.gen_range(0..LEXICON.len());
    let mut words = vec![LEXICON[w]];
    for _ in 1..len {
        w = *successors(w).choose(r).expect("successors are nonempty");
        words.push(LEXICON[w]);
    }
    words.join(" ")
}

/// Sentences for language-model training.
pub fn lm_corpus(n: usize, seed: u64) -> Vec<String> {
    (0..n)
        .map(|i| sentence(&mut rng::stream(seed, "lm-corpus", i as u64)))
        .collect()
}

/// Renders `ids` as features. Returns `[frames, FEATURE_DIM]`.
pub fn render(ids: &[usize], domain: &Domain, r: &mut impl Rng) -> Result<Array> {
    domain.validate()?;
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let silence = vec![0.0; FEATURE_DIM];
    frames.extend(std::iter::repeat_n(silence.clone(), EDGE_FRAMES));
    for &id in ids {
        let t = template(id);
        let stretch = 1.0 + domain.jitter * r.gen_range(-1.0..=1.0);
        let n = ((domain.frames_per_char * stretch).round() as usize).max(TEMPLATE_LEN);
        for k in 0..n {
            let mut f = t[k * TEMPLATE_LEN / n].clone();
            f.push(if k == 0 { 1.0 } else { 0.0 });
            frames.push(f);
        }
    }
    frames.extend(std::iter::repeat_n(silence, EDGE_FRAMES));
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, domain.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    for (t, f) in frames.iter_mut().enumerate() {
        let amp = 1.0 + domain.vibrato * (phase + t as f64 * 0.7).sin();
        for v in f.iter_mut() {
            *v *= amp;
            if domain.noise > 0.0 {
                *v += noise.sample(r);
            }
        }
    }
    Array::from_rows(&frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub text: String,
    pub features: Array,
}

impl SynthUtterance {
    pub fn duration(&self) -> f64 {
        round_ms(self.features.rows() as f64 * FRAME_PERIOD)
    }

    pub fn to_utterance(&self, inv: &TokenInventory) -> Result<Utterance> {
        Ok(Utterance {
            id: self.id.clone(),
            duration: self.duration(),
            features: self.features.clone(),
            target: text::encode(&self.text, inv)?,
            text: self.text.clone(),
        })
    }
}

/// `count` utterances of `domain`; utterance `i` depends only on
/// `(seed, domain name, i)`.
pub fn generate(domain: &Domain, count: usize, seed: u64, inv: &TokenInventory) -> Result<Vec<SynthUtterance>> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &domain.name, i as u64);
            let text = sentence(&mut r);
            let ids = text::encode(&text, inv)?;
            Ok(SynthUtterance {
                id: format!("{}-{seed}-{i:05}", domain.name),
                features: render(&ids, domain, &mut r)?,
                text,
            })
        })
        .collect()
}

pub fn to_utterances(utts: &[SynthUtterance], inv: &TokenInventory) -> Result<Vec<Utterance>> {
    utts.iter().map(|u| u.to_utterance(inv)).collect()
}

/// Writes features under `dir/feats/` and returns the manifest, which the
/// caller saves in `dir` so the relative feature paths resolve.
pub fn write_corpus(dir: &Path, name: &str, split: &str, utts: &[SynthUtterance]) -> Result<Manifest> {
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("feats/{}.f32", u.id);
        encoder::write_matrix(&dir.join(&rel), &u.features)?;
        records.push(UtteranceRecord {
            id: u.id.clone(),
            recording: u.id.clone(),
            start: 0.0,
            end: u.duration(),
            text: u.text.clone(),
            normalized: u.text.clone(),
            split: split.to_string(),
            features: Some(rel),
        });
    }
    Manifest::new(name, split, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let inv = TokenInventory::default();
        let a = generate(&Domain::speechlike(), 5, 3, &inv).unwrap();
        let b = generate(&Domain::speechlike(), 5, 3, &inv).unwrap();
        assert_eq!(a, b);
        let c = generate(&Domain::speechlike(), 5, 4, &inv).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn singlike_is_about_two_and_a_half_times_longer() {
        let inv = TokenInventory::default();
        let frames = |d: &Domain| -> f64 {
            let us = generate(d, 200, 1, &inv).unwrap();
            let chars: usize = us.iter().map(|u| u.text.len()).sum();
            let f: usize = us.iter().map(|u| u.features.rows() - 2 * EDGE_FRAMES).sum();
            f as f64 / chars as f64
        };
        let ratio = frames(&Domain::singlike()) / frames(&Domain::speechlike());
        assert!((ratio - 2.5).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn zero_noise_frames_are_exact_templates() {
        let inv = TokenInventory::default();
        let ids = text::encode("AB", &inv).unwrap();
        let d = Domain::speechlike().with_noise(0.0);
        let x = render(&ids, &d, &mut rng::stream(0, "t", 0)).unwrap();
        let a = template(ids[0]);
        assert_eq!(&x.row(EDGE_FRAMES)[..FEATURE_DIM - 1], &a[0][..]);
        assert_eq!(x.row(EDGE_FRAMES)[FEATURE_DIM - 1], 1.0);
        assert_eq!(x.row(EDGE_FRAMES + 1)[FEATURE_DIM - 1], 0.0);
        assert!(x.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn templates_are_distinct_and_share_phones() {
        let inv = TokenInventory::default();
        let ids = inv.emittable();
        let mut seen = std::collections::HashSet::new();
        for &id in &ids {
            assert!(seen.insert(template_phones(id)));
        }
        let used: std::collections::HashSet<usize> = ids.iter().flat_map(|&i| template_phones(i)).collect();
        assert!(used.len() <= PHONES);
    }

    #[test]
    fn sentences_follow_the_grammar() {
        let mut r = rng::stream(9, "g", 0);
        for _ in 0..100 {
            let s = sentence(&mut r);
            let idx: Vec<usize> = s
                .split(' ')
                .map(|w| LEXICON.iter().position(|l| *l == w).unwrap())
                .collect();
            assert!((2..=4).contains(&idx.len()));
            for p in idx.windows(2) {
                assert!(successors(p[0]).contains(&p[1]));
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_files() {
        let inv = TokenInventory::default();
        let dir = tempfile::tempdir().unwrap();
        let us = generate(&Domain::singlike(), 3, 0, &inv).unwrap();
        let m = write_corpus(dir.path(), "sing", "train", &us).unwrap();
        let path = dir.path().join("sing.jsonl");
        m.write(&path).unwrap();
        let back = crate::trainer::load_utterances(&Manifest::read(&path).unwrap(), &path, &inv).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].text, us[1].text);
        let diff = back[1]
            .features
            .data()
            .iter()
            .zip(us[1].features.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }
}
