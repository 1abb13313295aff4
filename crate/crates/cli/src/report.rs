//! Output helpers: number formatting, files, run manifest.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use smolux_core::{Error, Result};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

/// Git-style object hash (`blob <len>\0<content>`) of the config text, SHA-256 flavour.
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub struct Manifest<'a> {
    pub command: &'a str,
    pub config_text: &'a str,
    pub seed: u64,
    pub dt: f64,
    pub dt_quad: f64,
    pub n_paths: usize,
    pub extra: Value,
}

impl Manifest<'_> {
    pub fn to_json(&self) -> String {
        let v = json!({
            "tool": "smolux",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config_hash": config_hash(self.config_text),
            "seed": self.seed,
            "dt": self.dt,
            "dt_quad": self.dt_quad,
            "n_paths": self.n_paths,
            "results": self.extra,
        });
        serde_json::to_string_pretty(&v).expect("manifest is plain JSON") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("x"), config_hash("x"));
        assert_ne!(config_hash("x"), config_hash("y"));
        assert_eq!(config_hash("").len(), 64);
    }
}
