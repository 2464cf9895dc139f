//! Textual parameter checkpoints.
//!
//! ```text
//! metaocc-checkpoint 1
//! config_hash <hex>
//! meta <key> <value>
//! param <name> <rows> <cols>
//! <row-major values as 16-digit hex of the IEEE-754 bits>
//! end
//! ```
//!
//! Values are stored as raw bit patterns so a read restores every parameter
//! bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &str = "metaocc-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let _ = writeln!(out, "config_hash {}", self.config_hash);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, m) in self.params.iter() {
            let _ = writeln!(out, "param {name} {} {}", m.rows(), m.cols());
            let vals: Vec<String> = m
                .data()
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Checkpoint> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, "not a metaocc checkpoint".into())),
        }
        let mut config_hash = None;
        let mut meta = BTreeMap::new();
        let mut params = ParamStore::new();
        let mut finished = false;
        while let Some((no, line)) = lines.next() {
            let mut parts = line.splitn(2, ' ');
            let tag = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match tag {
                "config_hash" => config_hash = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| err(no, "meta line needs key and value".into()))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(err(no, "param line needs name rows cols".into()));
                    }
                    let rows: usize = f[1].parse().map_err(|_| err(no, "bad rows".into()))?;
                    let cols: usize = f[2].parse().map_err(|_| err(no, "bad cols".into()))?;
                    let (vno, values) = lines
                        .next()
                        .ok_or_else(|| err(no, "missing value line".into()))?;
                    let data = values
                        .split_ascii_whitespace()
                        .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| err(vno, format!("bad value: {e}")))?;
                    let m = Matrix::from_vec(rows, cols, data)
                        .map_err(|e| err(vno, e.to_string()))?;
                    params.add(f[0], m).map_err(|e| err(no, e.to_string()))?;
                }
                "end" => {
                    finished = true;
                    break;
                }
                other => return Err(err(no, format!("unknown record `{other}`"))),
            }
        }
        if !finished {
            return Err(err(text.lines().count(), "truncated checkpoint".into()));
        }
        Ok(Checkpoint {
            config_hash: config_hash.ok_or_else(|| err(2, "missing config_hash".into()))?,
            meta,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text, path)
    }
}
