//! Binary checkpoint container: a flat list of named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "RLCK0001" (version tag)
//! count   u32
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u32 * ndim
//!   data     f32 * product(dims), little-endian, row-major
//! ```
//!
//! Values are stored as `f32`; in-memory math is `f64`.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RLCK0001";

pub fn save_arrays(path: impl AsRef<Path>, arrays: &[(String, &ArrayD<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in arr.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_arrays(path: impl AsRef<Path>) -> Result<Vec<(String, ArrayD<f64>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(err("bad magic / unsupported version"));
    }
    let mut pos = 8;
    let mut read_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(err("truncated"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let count = read_u32(&mut pos)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(err("truncated name"));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| err("non-UTF-8 name"))?;
        pos += name_len;
        let ndim = read_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut pos)? as usize);
        }
        let n: usize = dims.iter().product();
        if pos + 4 * n > bytes.len() {
            return Err(err("truncated data"));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let v = f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap());
            data.push(v as f64);
        }
        pos += 4 * n;
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| err("bad shape"))?;
        arrays.push((name, arr));
    }
    Ok(arrays)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.25, 0.0, 3.0, 0.5, -0.125])
            .unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        save_arrays(&path, &[("layer.w".into(), &a), ("layer.b".into(), &b)]).unwrap();
        let back = load_arrays(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "layer.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        // exactly representable values survive the f32 round trip
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1.shape(), &[4]);
        for (x, y) in back[1].1.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_arrays(&path), Err(Error::Checkpoint(_))));
    }
}
