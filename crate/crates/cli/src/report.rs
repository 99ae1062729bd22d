//! Config loading, the JSON report envelope and plain-text rendering.

use serde::Serialize;
use sha2::{Digest, Sha256};

use moeplan::config::Config;

use crate::error::CliError;
use crate::Globals;

/// Bumped on any breaking change to a `results` payload.
pub const SCHEMA_VERSION: u32 = 1;

pub const SEED_ENV: &str = "MOEPLAN_SEED";

#[derive(Debug, Serialize)]
pub struct ReportEnvelope<T: Serialize> {
    pub command: &'static str,
    pub schema_version: u32,
    /// SHA-256 of the canonical (fully explicit) config TOML; absent for
    /// commands that take no config.
    pub config_digest: Option<String>,
    pub results: T,
}

impl<T: Serialize> ReportEnvelope<T> {
    pub fn new(command: &'static str, cfg: Option<&Config>, results: T) -> Self {
        Self {
            command,
            schema_version: SCHEMA_VERSION,
            config_digest: cfg.map(config_digest),
            results,
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn config_digest(cfg: &Config) -> String {
    hex::encode(Sha256::digest(cfg.to_toml_string().as_bytes()))
}

/// Seed from $MOEPLAN_SEED, if set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

/// Loads `--config`, then applies the seed and `--set` overrides in
/// increasing precedence: $MOEPLAN_SEED (only when the file sets no
/// `job.seed`), `--seed`, `--set`.
pub fn load(g: &Globals) -> Result<Config, CliError> {
    let path = g.config.as_ref().ok_or_else(|| {
        CliError::Usage("this command needs a config file: pass --config PATH".into())
    })?;
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| moeplan::Error::Parse {
        source_name: name.clone(),
        message: format!("cannot read file: {e}"),
    })?;
    let mut overrides = Vec::new();
    if let Some(seed) = g.seed {
        overrides.push(format!("job.seed={seed}"));
    } else if let Some(seed) = env_seed()? {
        let file_sets_seed = text
            .parse::<toml::Table>()
            .ok()
            .and_then(|t| t.get("job").and_then(|j| j.get("seed")).cloned())
            .is_some();
        if !file_sets_seed {
            overrides.push(format!("job.seed={seed}"));
        }
    }
    overrides.extend(g.overrides.iter().cloned());
    Ok(Config::from_toml_str(&text, &name, &overrides)?)
}

/// Left-aligned text table.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    );
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

pub fn csv(headers: &[&str], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| CliError::Serialize(e.to_string());
    w.write_record(headers).map_err(ser)?;
    for r in rows {
        w.write_record(r).map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Serialize(e.to_string()))
}

/// Key/value block for single-record reports.
pub fn fields(pairs: &[(&str, String)]) -> String {
    let w = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    pairs
        .iter()
        .map(|(k, v)| format!("{k:<w$}  {v}\n"))
        .collect()
}

pub fn ms(seconds: f64) -> String {
    format!("{:.3}", seconds * 1e3)
}

pub fn gib(bytes: u64) -> String {
    format!("{:.2}", bytes as f64 / (1u64 << 30) as f64)
}

pub fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}
