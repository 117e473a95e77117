use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensorfile::{Tensor, TensorBundle};

use super::generator::{HeadActivations, Workload};
use super::geometry::HeadId;

/// Dump a workload as a tensor bundle: the manifest carries geometry, spec,
/// seed and annotations; every stream is one flat array.
pub fn save_workload(workload: &Workload, dir: &Path, stem: &str) -> Result<PathBuf> {
    let g = &workload.geometry;
    let a = &workload.activations;
    let shape = vec![a.seq_len, a.head_dim];
    let mut bundle = TensorBundle::new();
    bundle.set_meta("kind", &"workload")?;
    bundle.set_meta("geometry", g)?;
    bundle.set_meta("spec", &workload.spec)?;
    // u64 does not fit a TOML integer; keep the seed textual.
    bundle.set_meta("seed", &workload.seed.to_string())?;
    bundle.set_meta("annotations", &workload.annotations)?;
    for (f, q) in a.queries.iter().enumerate() {
        let h = HeadId::from_flat(f, g);
        bundle.insert(&format!("q_l{}_h{}", h.layer, h.head), Tensor::f32(shape.clone(), q.clone())?)?;
    }
    for (f, (k, v)) in a.keys.iter().zip(&a.values).enumerate() {
        let (layer, kv) = (f / g.n_kv_heads, f % g.n_kv_heads);
        bundle.insert(&format!("k_l{layer}_kv{kv}"), Tensor::f32(shape.clone(), k.clone())?)?;
        bundle.insert(&format!("v_l{layer}_kv{kv}"), Tensor::f32(shape.clone(), v.clone())?)?;
    }
    bundle.save(dir, stem)
}

pub fn load_workload(manifest: &Path) -> Result<Workload> {
    let bundle = TensorBundle::load(manifest)?;
    if bundle.get_meta::<String>("kind")? != "workload" {
        return Err(Error::Format(format!("{} is not a workload bundle", manifest.display())));
    }
    let geometry: crate::workload::ModelGeometry = bundle.get_meta("geometry")?;
    geometry.validate()?;
    let seed: u64 = bundle
        .get_meta::<String>("seed")?
        .parse()
        .map_err(|e| Error::Format(format!("seed: {e}")))?;
    let spec = bundle.get_meta("spec")?;
    let annotations = bundle.get_meta("annotations")?;
    let take = |name: String| -> Result<(Vec<usize>, Vec<f32>)> {
        let t = bundle.get(&name)?;
        Ok((t.shape.clone(), t.as_f32()?.to_vec()))
    };
    let mut queries = Vec::new();
    let mut shape = None;
    for f in 0..geometry.total_q_heads() {
        let h = HeadId::from_flat(f, &geometry);
        let (s, data) = take(format!("q_l{}_h{}", h.layer, h.head))?;
        shape.get_or_insert(s);
        queries.push(data);
    }
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for layer in 0..geometry.n_layers {
        for kv in 0..geometry.n_kv_heads {
            keys.push(take(format!("k_l{layer}_kv{kv}"))?.1);
            values.push(take(format!("v_l{layer}_kv{kv}"))?.1);
        }
    }
    let shape = shape.ok_or_else(|| Error::Format("workload has no query streams".into()))?;
    if shape.len() != 2 || shape[1] != geometry.head_dim {
        return Err(Error::Format(format!("stream shape {shape:?} disagrees with head_dim")));
    }
    Ok(Workload {
        geometry,
        spec,
        seed,
        annotations,
        activations: HeadActivations {
            seq_len: shape[0],
            head_dim: shape[1],
            queries,
            keys,
            values,
        },
    })
}
