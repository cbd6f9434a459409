//! Binary checkpoint of named parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "MMERCKPT"
//! version u32      1
//! count   u32      number of parameters
//! then per parameter, in store order:
//!   name_len u32, name bytes (utf-8)
//!   ndim     u32, dims u64 x ndim
//!   data     f64 x prod(dims), little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMERCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, entry) in store.iter() {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = entry.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in entry.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &buf[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        let b = take(cursor, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };

    if take(&mut cursor, 8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut cursor)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut cursor)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut cursor)? as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint name is not utf-8".into()))?;
        let ndim = read_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = take(&mut cursor, 8)?;
            shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let b = take(&mut cursor, 8)?;
            data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

/// Overwrite `store`'s values from checkpoint entries; every entry must match
/// an existing parameter's name and shape, and every parameter must be
/// covered.
pub fn apply_checkpoint(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in entries {
        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint parameter {name:?} not in model")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Data(format!(
                "parameter {name:?} has shape {:?} in checkpoint, {:?} in model",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        store.add_uniform("layer.w", vec![3, 4], 3, &mut rng).unwrap();
        store.add_zeros("layer.b", vec![4]).unwrap();
        store
            .add("odd.tensor", Tensor::new(vec![2, 1, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let store = sample_store();
        let path = std::env::temp_dir().join(format!("mmerc_ckpt_{}.bin", std::process::id()));
        save_checkpoint(&store, &path).unwrap();
        let entries = load_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 3);

        let mut restored = sample_store();
        // Smudge the values, then restore.
        for idx in 0..restored.len() {
            let id = crate::params::ParamId(idx);
            for v in restored.value_mut(id).data_mut() {
                *v += 42.0;
            }
        }
        apply_checkpoint(&mut restored, entries).unwrap();
        for (idx, entry) in store.iter() {
            assert_eq!(entry.value, *restored.value(idx));
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn mismatched_shape_is_rejected() {
        let store = sample_store();
        let path = std::env::temp_dir().join(format!("mmerc_ckpt_bad_{}.bin", std::process::id()));
        save_checkpoint(&store, &path).unwrap();
        let mut entries = load_checkpoint(&path).unwrap();
        entries[0].1 = Tensor::zeros(vec![4, 3]);
        let mut target = sample_store();
        assert!(apply_checkpoint(&mut target, entries).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let path = std::env::temp_dir().join(format!("mmerc_ckpt_corrupt_{}.bin", std::process::id()));
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"MMERCKPT\x01").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
