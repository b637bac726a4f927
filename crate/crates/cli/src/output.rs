use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;

/// 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Human-table rounding.
pub fn h(v: f64) -> String {
    format!("{v:.4}")
}

/// 1-based word, e.g. `(2,1,1)`.
pub fn word(w: &[usize]) -> String {
    let parts: Vec<String> = w.iter().map(|i| (i + 1).to_string()).collect();
    format!("({})", parts.join(","))
}

/// CSV document starting with the config header.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut text = cfg.header();
        text.push('\n');
        Csv { text }
    }

    pub fn comment(&mut self, line: &str) {
        let _ = writeln!(self.text, "# {line}");
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: impl IntoIterator<Item = S>) {
        let cells: Vec<String> = cells.into_iter().map(|c| c.as_ref().to_string()).collect();
        let _ = writeln!(self.text, "{}", cells.join(","));
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

pub fn write_file(out: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Pretty JSON with the config under a top-level `config` key.
pub fn json_doc(cfg: &RunConfig, body: impl Serialize) -> anyhow::Result<String> {
    let mut doc = serde_json::to_value(body)?;
    let map = doc
        .as_object_mut()
        .context("JSON output body must be an object")?;
    map.insert("config".into(), serde_json::to_value(cfg)?);
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}
