//! On-disk training state: `state.manifest` lists one tensor per line as
//! `name [d1,d2,...]`, and `state.bin` holds their values back to back as
//! little-endian IEEE-754 doubles in manifest order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "state.manifest";
pub const VALUES_FILE: &str = "state.bin";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(!name.contains(char::is_whitespace));
        self.entries.push(Entry { name: name.to_string(), shape, values });
    }

    pub fn push_vector(&mut self, name: &str, values: Vec<f64>) {
        self.push(name, vec![values.len()], values);
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.push(name, vec![], vec![value]);
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Values of `name`, which must hold exactly `len` entries.
    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        if e.values.len() != len {
            return Err(Error::Checkpoint(format!(
                "`{name}` holds {} values, expected {len}",
                e.values.len()
            )));
        }
        Ok(e.values.clone())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.vector(name, 1)?[0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let mut bytes = Vec::new();
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} [{}]\n", e.name, dims.join(",")));
            for v in &e.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        // values first so a present manifest always has its data
        write_atomic(&dir.join(VALUES_FILE), &bytes)?;
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let bytes = fs::read(dir.join(VALUES_FILE))?;
        let mut entries = Vec::new();
        let mut offset = 0;
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Checkpoint(format!("manifest line {}: `{line}`", lineno + 1));
            let (name, shape) = line.split_once(' ').ok_or_else(bad)?;
            let inner = shape.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')).ok_or_else(bad)?;
            let shape: Vec<usize> = if inner.is_empty() {
                vec![]
            } else {
                inner.split(',').map(|d| d.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
            };
            let len: usize = shape.iter().product();
            let end = offset + len * 8;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("values file too short for `{name}`")));
            }
            let values = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            entries.push(Entry { name: name.to_string(), shape, values });
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "values file has {} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(Self { entries })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
