//! Self-describing text format shared by coefficient, training-set and
//! surrogate files.
//!
//! ```text
//! # tikreg v1
//! kind = neural_operator
//! activation = logistic
//! [array alpha 2 3]
//! 1.0000000000000000e0 0.0000000000000000e0 ...
//! ```
//!
//! Header lines are `key = value`. Each array block names its dimensions and
//! lists its row-major payload, one innermost row per line. Floats are written
//! with 17 significant digits so reading them back is exact.

use crate::error::{Error, Result};
use std::fmt::Write as _;

pub const MAGIC: &str = "# tikreg v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Array {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextDoc {
    pub header: Vec<(String, String)>,
    pub arrays: Vec<Array>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl TextDoc {
    pub fn new(kind: &str) -> Self {
        let mut d = TextDoc::default();
        d.set("kind", kind);
        d
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(slot) = self.header.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.header.push((key.to_string(), value));
        }
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, fmt_f64(value));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("missing header key '{key}'")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("bad value '{raw}' for '{key}'")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let got = self.get("kind")?;
        if got != kind {
            return Err(Error::Parse(format!(
                "expected kind '{kind}', found '{got}'"
            )));
        }
        Ok(())
    }

    pub fn push_array(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.arrays.push(Array {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Parse(format!("missing array '{name}'")))
    }

    /// Payload of `name`, checking its dimensions.
    pub fn array_dims(&self, name: &str, dims: &[usize]) -> Result<&[f64]> {
        let a = self.array(name)?;
        if a.dims != dims {
            return Err(Error::Parse(format!(
                "array '{name}' has dims {:?}, expected {:?}",
                a.dims, dims
            )));
        }
        Ok(&a.data)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k} = {v}");
        }
        for a in &self.arrays {
            let dims: Vec<String> = a.dims.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "[array {} {}]", a.name, dims.join(" "));
            let row = a.dims.last().copied().unwrap_or(1).max(1);
            for chunk in a.data.chunks(row) {
                let line: Vec<String> = chunk.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim() == MAGIC => {}
            _ => return Err(Error::Parse("missing format header line".into())),
        }
        let mut doc = TextDoc::default();
        let mut current: Option<Array> = None;
        for (no, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(spec) = line
                .strip_prefix("[array ")
                .and_then(|r| r.strip_suffix(']'))
            {
                if let Some(a) = current.take() {
                    finish_array(&mut doc, a)?;
                }
                let mut parts = spec.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Parse(format!("line {}: array without name", no + 2)))?;
                let dims = parts
                    .map(|p| {
                        p.parse::<usize>().map_err(|_| {
                            Error::Parse(format!("line {}: bad dimension '{p}'", no + 2))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                current = Some(Array {
                    name: name.to_string(),
                    dims,
                    data: Vec::new(),
                });
                continue;
            }
            if let Some(a) = current.as_mut() {
                for tok in line.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| {
                        Error::Parse(format!("line {}: bad number '{tok}'", no + 2))
                    })?;
                    a.data.push(v);
                }
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Parse(format!("line {}: expected 'key = value'", no + 2))
                })?;
                doc.header
                    .push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        if let Some(a) = current.take() {
            finish_array(&mut doc, a)?;
        }
        Ok(doc)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn finish_array(doc: &mut TextDoc, a: Array) -> Result<()> {
    let expected: usize = a.dims.iter().product();
    if expected != a.data.len() {
        return Err(Error::Parse(format!(
            "array '{}' declares {} values but has {}",
            a.name,
            expected,
            a.data.len()
        )));
    }
    doc.arrays.push(a);
    Ok(())
}
