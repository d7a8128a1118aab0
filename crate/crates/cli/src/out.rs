use std::env;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sp2ot_core::io::AtomicWriter;

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "SP2OT_OUT_DIR";

/// Relative output paths land under `$SP2OT_OUT_DIR` when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    match env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() && !dir.is_empty() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// `plan.csv` -> `plan.json`.
pub fn sibling_json(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// The JSON wrapper every command writes: schema version, command, the
/// resolved configuration, the seed (null for deterministic commands) and
/// the command-specific result.
pub fn envelope<C: Serialize, R: Serialize>(command: &str, config: &C, seed: Option<u64>, result: &R) -> Result<Value> {
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config)?,
        "result": serde_json::to_value(result)?,
    }))
}

pub fn to_json_bytes(v: &Value) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Collects outputs and publishes them only when the whole command succeeded.
#[derive(Default)]
pub struct Outputs {
    writer: AtomicWriter,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn add(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dest = resolve(path);
        self.writer
            .stage(&dest, bytes)
            .with_context(|| format!("staging {}", dest.display()))?;
        self.written.push(dest);
        Ok(())
    }

    pub fn add_json(&mut self, path: &Path, v: &Value) -> Result<()> {
        self.add(path, &to_json_bytes(v)?)
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        self.writer.commit().context("publishing outputs")?;
        Ok(self.written)
    }
}

/// CSV assembled from string cells; every row starts with the schema version.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = String::from("schema_version");
        for h in header {
            text.push(',');
            text.push_str(h);
        }
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&SCHEMA_VERSION.to_string());
        for c in cells {
            self.text.push(',');
            self.text.push_str(c);
        }
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_carry_version() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&[num(1.5), opt(None)]);
        assert_eq!(String::from_utf8(c.into_bytes()).unwrap(), "schema_version,a,b\n1,1.5,\n");
    }

    #[test]
    fn json_sibling() {
        assert_eq!(sibling_json(Path::new("x/plan.csv")), PathBuf::from("x/plan.json"));
    }
}
