//! Binary tensor container.
//!
//! Layout: the 8-byte magic `D2MZ0001`, a little-endian `u64` manifest
//! length, the UTF-8 manifest, then zero padding and the tensor payloads.
//! Each payload is row-major little-endian binary64 and starts at a file
//! offset that is a multiple of 64.
//!
//! Manifest lines are either `tensor <name> <rows> <cols> <offset>` or
//! `meta <key> <value>`; names and keys contain no whitespace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use d2moe::Matrix;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"D2MZ0001";
pub const ALIGN: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic: not a D2MZ0001 container")]
    BadMagic,
    #[error("file ends inside the header")]
    TruncatedHeader,
    #[error("payload of tensor `{tensor}` is truncated: needs bytes up to {needed}, file has {len}")]
    Truncated { tensor: String, needed: usize, len: usize },
    #[error("tensors `{first}` and `{second}` have overlapping payloads")]
    Overlap { first: String, second: String },
    #[error("tensor `{tensor}` contains a non-finite value at index {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("tensor `{tensor}` offset {offset} is not {ALIGN}-byte aligned or precedes the payload region")]
    Misaligned { tensor: String, offset: usize },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("duplicate name `{0}`")]
    Duplicate(String),
    #[error("invalid name `{0}`: must be non-empty without whitespace")]
    InvalidName(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("missing or invalid metadata `{key}`: {detail}")]
    Meta { key: String, detail: String },
}

/// Named matrices plus string metadata, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<(String, Matrix)>,
    meta: BTreeMap<String, String>,
}

fn check_name(name: &str) -> Result<(), ContainerError> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(ContainerError::InvalidName(name.to_string()));
    }
    Ok(())
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) -> Result<(), ContainerError> {
        let name = name.into();
        check_name(&name)?;
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(ContainerError::Duplicate(name));
        }
        self.tensors.push((name, m));
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<(), ContainerError> {
        let key = key.into();
        let value = value.into();
        check_name(&key)?;
        if value.contains('\n') {
            return Err(ContainerError::Meta { key, detail: "value contains a newline".into() });
        }
        self.meta.insert(key, value);
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_required(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta(key).ok_or_else(|| ContainerError::Meta { key: key.to_string(), detail: "missing".into() })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        let raw = self.meta_required(key)?;
        raw.parse().map_err(|_| ContainerError::Meta { key: key.to_string(), detail: format!("cannot parse `{raw}`") })
    }

    fn manifest(&self, offsets: &[usize]) -> String {
        let mut s = String::new();
        for ((name, m), off) in self.tensors.iter().zip(offsets) {
            s.push_str(&format!("tensor {name} {} {} {off}\n", m.rows(), m.cols()));
        }
        for (k, v) in &self.meta {
            s.push_str(&format!("meta {k} {v}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // Offsets depend on the manifest length, which depends on the offsets'
        // digits; iterate until the layout is stable.
        let mut offsets = vec![0usize; self.tensors.len()];
        let manifest = loop {
            let manifest = self.manifest(&offsets);
            let mut pos = align_up(16 + manifest.len());
            let next: Vec<usize> = self
                .tensors
                .iter()
                .map(|(_, m)| {
                    let off = pos;
                    pos = align_up(pos + m.len() * 8);
                    off
                })
                .collect();
            if next == offsets {
                break manifest;
            }
            offsets = next;
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for ((_, m), &off) in self.tensors.iter().zip(&offsets) {
            out.resize(off, 0);
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let end = align_up(out.len());
        out.resize(end, 0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(ContainerError::TruncatedHeader);
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mend = 16usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or(ContainerError::TruncatedHeader)?;
        let text = std::str::from_utf8(&bytes[16..mend])
            .map_err(|e| ContainerError::Manifest { line: 0, detail: format!("not UTF-8: {e}") })?;

        struct Entry {
            name: String,
            rows: usize,
            cols: usize,
            offset: usize,
        }
        let mut entries: Vec<Entry> = Vec::new();
        let mut out = Container::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |detail: String| ContainerError::Manifest { line: line_no, detail };
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("tensor") => {
                    let rest: Vec<&str> = line.split(' ').skip(1).collect();
                    if rest.len() != 4 {
                        return Err(bad(format!("expected `tensor name rows cols offset`, got `{line}`")));
                    }
                    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} `{s}`")));
                    check_name(rest[0])?;
                    let (rows, cols, offset) = (num(rest[1], "rows")?, num(rest[2], "cols")?, num(rest[3], "offset")?);
                    if rows == 0 || cols == 0 {
                        return Err(bad(format!("tensor `{}` has zero dimension", rest[0])));
                    }
                    if entries.iter().any(|e| e.name == rest[0]) {
                        return Err(ContainerError::Duplicate(rest[0].to_string()));
                    }
                    entries.push(Entry { name: rest[0].to_string(), rows, cols, offset });
                }
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad("meta line without key".into()))?;
                    check_name(key)?;
                    let value = parts.next().unwrap_or("");
                    if out.meta.insert(key.to_string(), value.to_string()).is_some() {
                        return Err(ContainerError::Duplicate(key.to_string()));
                    }
                }
                _ => return Err(bad(format!("unknown record `{line}`"))),
            }
        }

        let payload_start = align_up(mend);
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.offset % ALIGN != 0 || e.offset < payload_start {
                return Err(ContainerError::Misaligned { tensor: e.name.clone(), offset: e.offset });
            }
            let size = e.rows.checked_mul(e.cols).and_then(|n| n.checked_mul(8));
            let end = size.and_then(|s| e.offset.checked_add(s));
            match end {
                Some(end) if end <= bytes.len() => spans.push((e.offset, end, &e.name)),
                _ => {
                    return Err(ContainerError::Truncated {
                        tensor: e.name.clone(),
                        needed: end.unwrap_or(usize::MAX),
                        len: bytes.len(),
                    })
                }
            }
        }
        let mut sorted = spans.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(ContainerError::Overlap { first: w[0].2.to_string(), second: w[1].2.to_string() });
            }
        }
        for (e, &(start, end, _)) in entries.iter().zip(&spans) {
            let mut data = Vec::with_capacity(e.rows * e.cols);
            for (index, chunk) in bytes[start..end].chunks_exact(8).enumerate() {
                let v = f64::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(ContainerError::NonFinite { tensor: e.name.clone(), index });
                }
                data.push(v);
            }
            let m = Matrix::new(e.rows, e.cols, data).expect("dimensions and finiteness checked");
            out.tensors.push((e.name.clone(), m));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, crate::error::CliError> {
        let bytes = fs::read(path).map_err(|e| crate::error::CliError::io(path, e))?;
        Container::from_bytes(&bytes).map_err(|e| crate::error::CliError::Container { path: path.to_path_buf(), source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_aligned() {
        let mut c = Container::new();
        c.push("a", Matrix::from_rows(&[&[1.0, 2.0, 3.0]])).unwrap();
        c.push("b", Matrix::from_rows(&[&[4.0], &[5.0]])).unwrap();
        c.set_meta("kind", "test").unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len() % ALIGN, 0);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn names_are_validated() {
        let mut c = Container::new();
        assert!(c.push("has space", Matrix::zeros(1, 1)).is_err());
        c.push("x", Matrix::zeros(1, 1)).unwrap();
        assert_eq!(c.push("x", Matrix::zeros(1, 1)), Err(ContainerError::Duplicate("x".into())));
        assert!(c.set_meta("k", "line\nbreak").is_err());
    }
}
