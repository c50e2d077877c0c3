//! Flat named-array container (safetensors layout, `f64` payloads, string metadata).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedArrays {
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

fn corrupt(section: &str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        message: message.into(),
    }
}

const META_KEY: &str = "meta";

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// `key<TAB>value` lines in key order, with tabs and newlines escaped.
fn pack_meta(meta: &BTreeMap<String, String>) -> String {
    meta.iter()
        .map(|(k, v)| format!("{}\t{}\n", escape(k), escape(v)))
        .collect()
}

fn unpack_meta(packed: &str) -> Result<BTreeMap<String, String>> {
    packed
        .lines()
        .map(|line| {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| corrupt("header", format!("malformed metadata line `{line}`")))?;
            Ok((unescape(k), unescape(v)))
        })
        .collect()
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.insert(name.into(), (shape.to_vec(), values.to_vec()));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, section: &str, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(section, format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.meta(section, key)?;
        raw.parse()
            .map_err(|_| corrupt(section, format!("metadata `{key}` = `{raw}` is malformed")))
    }

    /// Looks up an array and checks its shape.
    pub fn get(&self, section: &str, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (s, v) = self
            .arrays
            .get(name)
            .ok_or_else(|| corrupt(section, format!("missing array `{name}`")))?;
        if s != shape {
            return Err(corrupt(
                section,
                format!("array `{name}` has shape {s:?}, expected {shape:?}"),
            ));
        }
        Ok(v)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.arrays
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(k, (s, v))| (k.clone(), s.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = buffers
            .iter()
            .map(|(k, s, b)| Ok((k.as_str(), TensorView::new(Dtype::F64, s.clone(), b)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| corrupt("header", e.to_string()))?;
        // A single entry keeps the header byte-stable: the container stores
        // metadata in a hash map whose iteration order varies between runs.
        let meta: HashMap<String, String> = HashMap::from([(META_KEY.to_string(), pack_meta(&self.metadata))]);
        safetensors::serialize(views, Some(meta)).map_err(|e| corrupt("header", e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt("header", e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt("header", e.to_string()))?;
        let mut out = NamedArrays::new();
        if let Some(m) = header.metadata() {
            let packed = m.get(META_KEY).ok_or_else(|| corrupt("header", format!("missing `{META_KEY}` entry")))?;
            out.metadata = unpack_meta(packed)?;
        }
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(corrupt(&name, format!("unsupported dtype {:?}", view.dtype())));
            }
            let values = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            out.arrays.insert(name, (view.shape().to_vec(), values));
        }
        Ok(out)
    }

    /// Writes to a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = NamedArrays::new();
        a.insert("x.weight", &[2, 2], &[0.1, -0.0, f64::MIN_POSITIVE, 1e300]);
        a.insert("y", &[1], &[std::f64::consts::PI]);
        a.set_meta("kind", "test");
        a.set_meta("multi", "a = 1\nb\t= \\2\n");
        for i in 0..20 {
            a.set_meta(format!("k{i}"), i.to_string());
        }
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.clone().to_bytes().unwrap());
        let back = NamedArrays::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, a.metadata);
        for (k, (s, v)) in &a.arrays {
            let (s2, v2) = &back.arrays[k];
            assert_eq!(s, s2);
            assert!(v.iter().zip(v2).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn truncated_bytes_fail_with_section() {
        let mut a = NamedArrays::new();
        a.insert("x", &[3], &[1.0, 2.0, 3.0]);
        let bytes = a.to_bytes().unwrap();
        match NamedArrays::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Checkpoint { section, .. }) => assert_eq!(section, "header"),
            other => panic!("{other:?}"),
        }
        assert!(a.get("generator", "x", &[2]).is_err());
    }
}
