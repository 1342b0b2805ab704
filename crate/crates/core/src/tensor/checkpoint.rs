//! Checkpoint file format.
//!
//! Little-endian binary: magic `OMGT`, version u32, tensor count u32, then
//! per tensor: name length u32 + UTF-8 name, rank u32, dims u64 each,
//! 32-bit float payload.

use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"OMGT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let expect: usize = t.dims.iter().product();
        assert_eq!(expect, t.data.len(), "tensor `{}` payload size", t.name);
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "truncated at byte {pos} (want {n} more)",
                pos = *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(CheckpointError::VersionMismatch(format!(
            "bad magic {magic:?}"
        )));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
        }
        out.push(NamedTensor { name, dims, data });
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join("omgpt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.omgt");
        let tensors = vec![
            NamedTensor {
                name: "w".into(),
                dims: vec![2, 3],
                data: vec![1.0, -2.0, 3.5, 0.0, 1e-8, -7.25],
            },
            NamedTensor {
                name: "meta/step".into(),
                dims: vec![1],
                data: vec![42.0],
            },
        ];
        save_checkpoint(&path, &tensors).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(tensors, back);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = std::env::temp_dir().join("omgpt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.omgt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch(_))
        ));
    }

    #[test]
    fn truncated_rejected() {
        let dir = std::env::temp_dir().join("omgpt_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.omgt");
        let tensors = vec![NamedTensor {
            name: "w".into(),
            dims: vec![4],
            data: vec![1.0; 4],
        }];
        save_checkpoint(&path, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
