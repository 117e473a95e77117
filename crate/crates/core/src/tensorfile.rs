//! Tensor container: a TOML manifest plus one flat little-endian array file
//! per tensor, stored next to the manifest.
//!
//! ```text
//! <stem>.toml            manifest: format, version, [meta], [[tensors]]
//! <stem>.<name>.bin      raw little-endian f32 or i32 values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub const FORMAT_TAG: &str = "headsparse-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(arg_err!(
                "tensor shape {shape:?} holds {n} values, data has {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I32(_) => Err(Error::Format("expected f32 tensor, found i32".into())),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format("expected i32 tensor, found f32".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    I32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default)]
    meta: toml::Table,
    #[serde(default)]
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    file: String,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub meta: toml::Table,
    pub tensors: BTreeMap<String, Tensor>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !valid_name(name) {
            return Err(arg_err!("tensor name {name:?} must be [A-Za-z0-9_-]+"));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = toml::Value::try_from(value)
            .map_err(|e| Error::Format(format!("meta {key}: {e}")))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get_meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("manifest missing meta key {key:?}")))?;
        v.clone()
            .try_into()
            .map_err(|e| Error::Format(format!("meta {key}: {e}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("bundle missing tensor {name:?}")))
    }

    /// Write `<dir>/<stem>.toml` and its array files. Returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        if !valid_name(stem) {
            return Err(arg_err!("bundle stem {stem:?} must be [A-Za-z0-9_-]+"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{stem}.{name}.bin");
            let path = dir.join(&file);
            fs::write(&path, encode(&t.data)).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        let path = dir.join(format!("{stem}.toml"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported container {} v{}",
                manifest.format, manifest.version
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            if entry.file.contains('/') || entry.file.contains('\\') {
                return Err(Error::Format(format!("tensor file {:?} escapes the bundle", entry.file)));
            }
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let data = decode(entry.dtype, &bytes)
                .ok_or_else(|| Error::Format(format!("{}: length not a multiple of 4", path.display())))?;
            let tensor = Tensor::new(entry.shape, data)
                .map_err(|e| Error::Format(format!("{}: {e}", entry.name)))?;
            tensors.insert(entry.name, tensor);
        }
        Ok(TensorBundle {
            meta: manifest.meta,
            tensors,
        })
    }
}

fn encode(data: &TensorData) -> Vec<u8> {
    match data {
        TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn decode(dtype: DType, bytes: &[u8]) -> Option<TensorData> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    Some(match dtype {
        DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
        DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), 0..64), ints in prop::collection::vec(any::<i32>(), 1..16)) {
            let dir = tempfile::tempdir().unwrap();
            let floats: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
            let mut b = TensorBundle::new();
            b.insert("x", Tensor::f32(vec![floats.len()], floats.clone()).unwrap()).unwrap();
            b.insert("ids", Tensor::i32(vec![ints.len(), 1], ints.clone()).unwrap()).unwrap();
            b.set_meta("label", &"hello").unwrap();
            let path = b.save(dir.path(), "bundle").unwrap();
            let back = TensorBundle::load(&path).unwrap();
            let got: Vec<u32> = back.get("x").unwrap().as_f32().unwrap().iter().map(|f| f.to_bits()).collect();
            prop_assert_eq!(got, bits);
            prop_assert_eq!(back.get("ids").unwrap().as_i32().unwrap(), &ints[..]);
            prop_assert_eq!(back.get_meta::<String>("label").unwrap(), "hello");
        }
    }

    #[test]
    fn rejects_bad_shapes_and_names() {
        assert!(Tensor::f32(vec![2, 2], vec![0.0; 3]).is_err());
        let mut b = TensorBundle::new();
        assert!(b.insert("../x", Tensor::f32(vec![0], vec![]).unwrap()).is_err());
    }

    #[test]
    fn rejects_truncated_array() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = TensorBundle::new();
        b.insert("x", Tensor::f32(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let path = b.save(dir.path(), "t").unwrap();
        fs::write(dir.path().join("t.x.bin"), [0u8; 5]).unwrap();
        assert!(matches!(TensorBundle::load(&path), Err(Error::Format(_))));
    }
}
