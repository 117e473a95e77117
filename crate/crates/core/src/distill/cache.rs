use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensorfile::{Tensor, TensorBundle};

use super::{TopKLogits, TOP_K};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRecord {
    pub position: u32,
    pub logits: TopKLogits,
}

/// Teacher top-10 logits per decode position. On disk each field is one
/// flat array with a fixed stride per record, so records can be read in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherCache {
    pub vocab: usize,
    pub records: Vec<TeacherRecord>,
}

impl TeacherCache {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn save_teacher_cache(dir: &Path, stem: &str, cache: &TeacherCache) -> Result<PathBuf> {
    let n = cache.records.len();
    let mut positions = Vec::with_capacity(n);
    let mut indices = Vec::with_capacity(n * TOP_K);
    let mut values = Vec::with_capacity(n * TOP_K);
    for r in &cache.records {
        if r.logits.indices.len() != TOP_K || r.logits.values.len() != TOP_K {
            return Err(Error::Format(format!("record at position {} is not top-{TOP_K}", r.position)));
        }
        positions.push(r.position as i32);
        indices.extend(r.logits.indices.iter().map(|i| *i as i32));
        values.extend_from_slice(&r.logits.values);
    }
    let mut b = TensorBundle::new();
    b.set_meta("kind", &"teacher_logits")?;
    b.set_meta("vocab", &(cache.vocab as i64))?;
    b.set_meta("top_k", &(TOP_K as i64))?;
    b.insert("positions", Tensor::i32(vec![n], positions)?)?;
    b.insert("indices", Tensor::i32(vec![n, TOP_K], indices)?)?;
    b.insert("values", Tensor::f32(vec![n, TOP_K], values)?)?;
    b.save(dir, stem)
}

pub fn load_teacher_cache(manifest: &Path) -> Result<TeacherCache> {
    let b = TensorBundle::load(manifest)?;
    if b.get_meta::<String>("kind")? != "teacher_logits" {
        return Err(Error::Format(format!("{} is not a teacher cache", manifest.display())));
    }
    if b.get_meta::<i64>("top_k")? != TOP_K as i64 {
        return Err(Error::Format("teacher cache has a different top-k".into()));
    }
    let vocab = b.get_meta::<i64>("vocab")? as usize;
    let positions = b.get("positions")?.as_i32()?;
    let indices = b.get("indices")?.as_i32()?;
    let values = b.get("values")?.as_f32()?;
    let n = positions.len();
    if indices.len() != n * TOP_K || values.len() != n * TOP_K {
        return Err(Error::Format("teacher cache arrays disagree in length".into()));
    }
    let records = (0..n)
        .map(|r| {
            let idx = &indices[r * TOP_K..(r + 1) * TOP_K];
            if idx.iter().any(|i| *i < 0 || *i as usize >= vocab) {
                return Err(Error::Format(format!("record {r} has an index outside the vocabulary")));
            }
            Ok(TeacherRecord {
                position: positions[r] as u32,
                logits: TopKLogits {
                    indices: idx.iter().map(|i| *i as u32).collect(),
                    values: values[r * TOP_K..(r + 1) * TOP_K].to_vec(),
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(TeacherCache { vocab, records })
}
