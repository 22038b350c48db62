//! Config resolution: defaults, then the TOML file, then `--set` overrides.
//!
//! Keys absent from the resolved config are rejected, so a misspelt key fails
//! loudly instead of being ignored.

use std::fs;
use std::path::Path;

use alt_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn leaf_paths(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(inner) if !inner.is_empty() => leaf_paths(inner, &path, out),
            _ => out.push(path),
        }
    }
}

fn has_path(t: &Table, path: &str) -> bool {
    let mut cur = t;
    let mut parts = path.split('.').peekable();
    while let Some(p) = parts.next() {
        match cur.get(p) {
            Some(Value::Table(inner)) if parts.peek().is_some() => cur = inner,
            Some(_) if parts.peek().is_none() => return true,
            _ => return false,
        }
    }
    false
}

/// Parses `key.path=value`; the value is read as TOML, falling back to a
/// bare string.
pub fn parse_set(set: &str) -> Result<(String, Value)> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::config(set, "override must look like key.path=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(set, "empty key"));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(t: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = t;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.to_string(), value);
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.message().to_string()))
}

/// Resolves a config of type `T` from its defaults, an optional file and
/// overrides.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Table>, sets: &[String]) -> Result<T> {
    let mut table = Table::try_from(defaults).map_err(|e| Error::config("defaults", e.to_string()))?;
    let mut given = Vec::new();
    if let Some(f) = file {
        merge(&mut table, f);
        leaf_paths(f, "", &mut given);
    }
    for s in sets {
        let (k, v) = parse_set(s)?;
        set_path(&mut table, &k, v);
        given.push(k);
    }
    let cfg: T = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        Error::config(given.last().cloned().unwrap_or_default(), e.message().to_string())
    })?;
    let echo = Table::try_from(&cfg).map_err(|e| Error::config("config", e.to_string()))?;
    if let Some(unknown) = given.iter().find(|k| !has_path(&echo, k)) {
        return Err(Error::config(unknown.clone(), "unknown key"));
    }
    Ok(cfg)
}
