//! Versioned text container of named tensors.
//!
//! ```text
//! simcf-checkpoint 1
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <rows*cols values, space separated, shortest round-trip decimal>
//! end
//! ```
//!
//! Values are printed with Rust's shortest round-trip formatting, so a
//! write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::params::ParameterSet;
use super::tape::Tensor;
use crate::error::{Result, SimError};

pub const MAGIC: &str = "simcf-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push_params(&mut self, ps: &ParameterSet) {
        for (name, t) in ps.iter() {
            self.tensors.push((name.to_string(), t.clone()));
        }
    }

    /// Collects the tensors whose names start with `prefix`, in file order.
    pub fn params_with_prefix(&self, prefix: &str) -> ParameterSet {
        let mut ps = ParameterSet::new();
        for (name, t) in &self.tensors {
            if name.starts_with(prefix) {
                ps.add(name.clone(), t.clone());
            }
        }
        ps
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| SimError::Checkpoint(format!("missing meta key `{key}`")))?;
        raw.parse()
            .map_err(|_| SimError::Checkpoint(format!("meta key `{key}` has unparsable value `{raw}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", t.rows(), t.cols());
            let line: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| SimError::Checkpoint(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad(format!("bad magic in header `{header}`")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad version in header `{header}`")))?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let mut ck = Checkpoint::default();
        let mut ended = false;
        while let Some(line) = lines.next() {
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("bad meta line `{line}`")))?;
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
                    if fields.len() != 3 {
                        return Err(bad(format!("bad tensor header `{line}`")));
                    }
                    let rows: usize = fields[1].parse().map_err(|_| bad(format!("bad rows in `{line}`")))?;
                    let cols: usize = fields[2].parse().map_err(|_| bad(format!("bad cols in `{line}`")))?;
                    let data_line = lines.next().ok_or_else(|| bad(format!("missing data for `{}`", fields[0])))?;
                    let data = data_line
                        .split_whitespace()
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("bad value in `{}`: {e}", fields[0])))?;
                    let t = Tensor::new(rows, cols, data)
                        .map_err(|_| bad(format!("tensor `{}` does not hold {rows}x{cols} values", fields[0])))?;
                    ck.tensors.push((fields[0].to_string(), t));
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some("") | None => {}
                Some(other) => return Err(bad(format!("unexpected record `{other}`"))),
            }
        }
        if !ended {
            return Err(bad("truncated checkpoint (no `end` record)".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
