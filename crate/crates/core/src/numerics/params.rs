use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::ops::{Deref, DerefMut};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Named parameter arrays in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
}

pub type ParamGrads = BTreeMap<String, Array>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Uniform Glorot initialisation for a `[fan_in, fan_out]` matrix.
    pub fn init_glorot(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) {
        let (fan_in, fan_out) = match shape {
            [a, b] => (*a, *b),
            [a] => (*a, *a),
            _ => (shape.iter().product(), 1),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Array::new(shape.to_vec(), data).unwrap());
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], limit: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Array::new(shape.to_vec(), data).unwrap());
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Array::full(shape, value));
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A tape together with lazily bound parameters.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// Parameters are bound as differentiable leaves.
    pub fn training(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Parameters are bound as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::training(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Backward from `root`, returning gradients for every bound parameter.
    pub fn param_grads(&self, root: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(root)?;
        let mut out = ParamGrads::new();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// In-order accumulation `acc += g · weight`.
pub fn accumulate_grads(acc: &mut ParamGrads, g: &ParamGrads, weight: f64) {
    for (k, v) in g {
        let mut v = v.clone();
        v.scale_assign(weight);
        match acc.get_mut(k) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(k.clone(), v);
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub inventory_hash: String,
    pub arch_hash: String,
    pub arch: serde_json::Value,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Container bytes: magic, version (u32 LE), header length (u64 LE), JSON
/// header of `(name, shape, offset)` entries, then raw f64 LE values.
pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (k, v) in params.iter() {
        entries.push(HeaderEntry {
            name: k.clone(),
            shape: v.shape().to_vec(),
            offset,
        });
        offset += v.len();
    }
    let header = serde_json::to_vec(&entries).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, v) in params.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |d: &str| Error::Format {
        what: "checkpoint",
        detail: d.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let entries: Vec<HeaderEntry> = serde_json::from_slice(&bytes[20..body])?;
    let data = &bytes[body..];
    let mut store = ParamStore::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let start = body + e.offset * 8;
        let end = start + n * 8;
        if end > bytes.len() || e.offset * 8 + n * 8 > data.len() {
            return Err(bad(&format!("entry {} out of range", e.name)));
        }
        let values = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(e.name, Array::new(e.shape, values)?);
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(params))
        .map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_checkpoint(&bytes)?;
    let mp = meta_path(path);
    let meta_bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "format version {} != {}",
            meta.format_version, CHECKPOINT_VERSION
        )));
    }
    Ok((params, meta))
}

/// Stable hash of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}
