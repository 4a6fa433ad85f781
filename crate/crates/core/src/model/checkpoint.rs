//! Checkpoint serialization: magic + version + JSON config + named
//! little-endian parameter tensors. Round-trips are bit-exact and loads
//! reject precision or architecture mismatches.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rng::SeedRng;
use crate::tensor::{Element, ParamStore, Tensor};

use super::{ModelConfig, ModelError, SattisUnet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SATC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write `config` and every parameter of `store` to `path`.
pub fn save_checkpoint<E: Element>(
    config: &ModelConfig,
    store: &ParamStore<E>,
    path: &Path,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

    let config_json = serde_json::to_vec(config)
        .map_err(|e| ModelError::Checkpoint(format!("config serialization failed: {e}")))?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(&config_json)?;

    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, param) in store.iter() {
        let name = param.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(param.value.rank() as u32).to_le_bytes())?;
        for &d in param.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[E::PRECISION.bit_flag()])?;
        let mut payload = Vec::with_capacity(param.value.len() * E::BYTES);
        for &v in param.value.data() {
            v.write_le(&mut payload);
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuild the model and its parameter store from `path`. The stored
/// precision must match `E`; loading a 32-bit checkpoint as 64-bit (or vice
/// versa) is rejected rather than silently converted.
pub fn load_checkpoint<E: Element>(
    path: &Path,
) -> Result<(SattisUnet, ParamStore<E>), ModelError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let bad = |msg: String| ModelError::Checkpoint(msg);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!(
            "bad magic {magic:02x?}; not a checkpoint file"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }

    let config_len = read_u64(&mut r)? as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| bad(format!("malformed config block: {e}")))?;

    let count = read_u64(&mut r)? as usize;
    let mut loaded: HashMap<String, Tensor<E>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| bad(format!("parameter name not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let flag = read_u8(&mut r)?;
        if flag != E::PRECISION.bit_flag() {
            return Err(bad(format!(
                "precision mismatch: checkpoint stores {flag}-bit values, \
                 loader expects {}-bit",
                E::PRECISION.bit_flag()
            )));
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * E::BYTES];
        r.read_exact(&mut payload)?;
        let data: Vec<E> = payload.chunks_exact(E::BYTES).map(E::read_le).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| bad(format!("parameter {name:?}: {e}")))?;
        if loaded.insert(name.clone(), tensor).is_some() {
            return Err(bad(format!("duplicate parameter {name:?}")));
        }
    }

    // rebuild the architecture, then overwrite every freshly initialized
    // value with its stored counterpart (matched by name)
    let mut store = ParamStore::<E>::new();
    let model = SattisUnet::new(&config, &mut store, &mut SeedRng::new(0))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let value = loaded.remove(&name).ok_or_else(|| {
            bad(format!("checkpoint missing parameter {name:?}"))
        })?;
        if value.shape() != store.get(id).value.shape() {
            return Err(bad(format!(
                "parameter {name:?} has shape {:?}, model expects {:?}",
                value.shape(),
                store.get(id).value.shape()
            )));
        }
        store.get_mut(id).value = value;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(bad(format!(
            "checkpoint has {} unused parameters (e.g. {extra:?})",
            loaded.len()
        )));
    }
    Ok((model, store))
}

fn read_u8(r: &mut impl Read) -> Result<u8, std::io::Error> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, std::io::Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, std::io::Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
