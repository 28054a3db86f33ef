//! Text checkpoint container.
//!
//! ```text
//! dagrl-ckpt-v1
//! <key> <rows> <cols>
//! <row-major values, space separated>
//! ...
//! ```
//!
//! Values are written with the shortest round-tripping decimal form, so a
//! save/load cycle is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

pub const CHECKPOINT_HEADER: &str = "dagrl-ckpt-v1";

/// Ordered key → tensor map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.entries.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds every parameter of `store` under `<prefix>/<name>`.
    pub fn insert_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Entries under `<prefix>/`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.iter().filter_map(move |(k, v)| {
            k.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('/'))
                .map(|rest| (rest, v))
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for (key, t) in &self.entries {
            writeln!(out, "{key} {} {}", t.rows(), t.cols()).expect("string write");
            let mut first = true;
            for v in t.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, AutodiffError> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: String| AutodiffError::Checkpoint { line: line + 1, message: msg };
        match lines.next() {
            Some((_, h)) if h.trim_end() == CHECKPOINT_HEADER => {}
            other => {
                return Err(bad(
                    0,
                    format!("expected header {CHECKPOINT_HEADER:?}, found {:?}", other.map(|l| l.1)),
                ))
            }
        }
        let mut ckpt = Self::new();
        while let Some((ln, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [key, rows, cols] = parts[..] else {
                return Err(bad(ln, format!("malformed entry header {header:?}")));
            };
            let rows: usize = rows.parse().map_err(|e| bad(ln, format!("rows: {e}")))?;
            let cols: usize = cols.parse().map_err(|e| bad(ln, format!("cols: {e}")))?;
            let (vln, values) = lines
                .next()
                .ok_or_else(|| bad(ln, format!("missing values for {key}")))?;
            let data = values
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(vln, format!("value: {e}")))?;
            if data.len() != rows * cols {
                return Err(bad(
                    vln,
                    format!("{key}: expected {} values, found {}", rows * cols, data.len()),
                ));
            }
            ckpt.insert(key, Tensor::from_vec(rows, cols, data));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        fs::write(path, self.to_text()).map_err(|source| AutodiffError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let text = fs::read_to_string(path).map_err(|source| AutodiffError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}
