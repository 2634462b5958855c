//! Checkpoint files.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    8  bytes  "XBNCKPT\0"
//! version  u32       currently 1
//! meta     u32 count, then per entry: u32 key len, key utf8, u32 val len, val utf8
//! topology u64 len, network spec text (the `net::text` format)
//! tensors  u32 count, then per tensor:
//!          u32 name len, name utf8, u32 ndim, ndim x u64 extents,
//!          prod(extents) x f64 values
//! ```
//!
//! Batchnorm running statistics are stored alongside the trainable tensors.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::net::{parse_netspec, serialize_netspec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XBNCKPT\0";
const VERSION: u32 = 1;

/// Metadata keys the toolkit itself reads back.
pub mod meta_keys {
    pub const BN_EPS: &str = "bn_eps";
    pub const BN_MOMENTUM: &str = "bn_momentum";
    pub const DC_RATE: &str = "dc_rate";
    pub const DC_PREDICATE: &str = "dc_predicate";
    pub const TRAIN_SEED: &str = "train_seed";
    pub const UPDATEVAR_P_PRIME: &str = "updatevar_p_prime";
}

pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 28 {
        return Err(corrupt(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| corrupt(format!("{what} is not utf-8")))
}

/// Serialize model plus metadata to `path`.
pub fn save(path: &Path, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;

    let mut meta = meta.clone();
    meta.insert(meta_keys::BN_EPS.into(), format!("{:?}", model.bn_eps));
    meta.insert(
        meta_keys::BN_MOMENTUM.into(),
        format!("{:?}", model.bn_momentum),
    );
    write_u32(&mut w, meta.len() as u32)?;
    for (k, v) in &meta {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }

    let topology = serialize_netspec(&model.spec);
    write_u64(&mut w, topology.len() as u64)?;
    w.write_all(topology.as_bytes())?;

    let tensors = model.named_tensors();
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        write_str(&mut w, &name)?;
        write_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u64(&mut w, d as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt(format!(
            "bad magic {magic:02x?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }

    let meta_count = read_u32(&mut r)? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..meta_count {
        let k = read_str(&mut r, "meta key")?;
        let v = read_str(&mut r, "meta value")?;
        meta.insert(k, v);
    }

    let topo_len = read_u64(&mut r)? as usize;
    let mut topo = vec![0u8; topo_len];
    r.read_exact(&mut topo)?;
    let topo = String::from_utf8(topo).map_err(|_| corrupt("topology is not utf-8"))?;
    let spec = parse_netspec(&topo, &path.display().to_string())?;

    let mut model = Model::init(spec, 0)?;
    if let Some(eps) = meta.get(meta_keys::BN_EPS) {
        model.bn_eps = eps
            .parse()
            .map_err(|_| corrupt(format!("bad {}", meta_keys::BN_EPS)))?;
    }
    if let Some(m) = meta.get(meta_keys::BN_MOMENTUM) {
        model.bn_momentum = m
            .parse()
            .map_err(|_| corrupt(format!("bad {}", meta_keys::BN_MOMENTUM)))?;
    }

    let expected: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let tensor_count = read_u32(&mut r)? as usize;
    if tensor_count != expected.len() {
        return Err(corrupt(format!(
            "{tensor_count} tensors stored, topology wants {}",
            expected.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..tensor_count {
        let name = read_str(&mut r, "tensor name")?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let slot = model
            .tensor_mut(&name)
            .ok_or_else(|| corrupt(format!("unknown tensor `{name}` for this topology")))?;
        if slot.shape() != shape.as_slice() {
            return Err(corrupt(format!(
                "tensor `{name}` stored as {shape:?}, topology wants {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(&shape, data)?;
        seen.insert(name);
    }
    for name in expected {
        if !seen.contains(&name) {
            return Err(corrupt(format!("tensor `{name}` missing from checkpoint")));
        }
    }
    Ok(Checkpoint { model, meta })
}

/// SHA-256 over the trainable tensors (names, shapes, little-endian values)
/// in canonical order. Running statistics are excluded, so the hash is
/// invariant under statistics recalibration.
pub fn weight_hash(model: &Model) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in model.trainable_tensors() {
        hasher.update((name.len() as u32).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::desk_resnet;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::init(desk_resnet(&Default::default()), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("note".to_string(), "round trip".to_string());
        save(&path, &model, &meta).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.meta.get("note").unwrap(), "round trip");
        assert_eq!(loaded.model.spec, model.spec);
        for ((na, ta), (nb, tb)) in model.named_tensors().iter().zip(loaded.model.named_tensors())
        {
            assert_eq!(*na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(weight_hash(&model), weight_hash(&loaded.model));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT________").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn hash_ignores_running_stats_but_not_weights() {
        let mut model = Model::init(desk_resnet(&Default::default()), 4).unwrap();
        let h0 = weight_hash(&model);
        model
            .tensor_mut("layer1.running_mean")
            .unwrap()
            .data_mut()[0] = 5.0;
        assert_eq!(weight_hash(&model), h0);
        model.tensor_mut("layer0.weight").unwrap().data_mut()[0] += 1e-12;
        assert_ne!(weight_hash(&model), h0);
    }
}
