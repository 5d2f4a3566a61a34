//! Versioned checkpoint files: named little-endian f32 tensors.
//!
//! Layout: magic `RCCK`, version u32, tensor count u32, then per tensor:
//! name (u32 length + UTF-8), ndim u32, dims (u32 each), data (f32 LE).

use std::io::{Read, Write};
use std::path::Path;

use super::{IoError, Result};

const MAGIC: &[u8; 4] = b"RCCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Self { name: name.into(), shape, data };
        assert_eq!(t.shape.iter().product::<usize>(), t.data.len(), "tensor shape/data mismatch");
        t
    }
}

pub fn save_tensors(tensors: &[NamedTensor], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
    file.write_all(&out)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| IoError::Missing { path: path.to_path_buf(), source })?;

    let corrupt = |detail: String| IoError::Checkpoint { path: path.to_path_buf(), detail };
    let mut offset = 0usize;
    let mut take = move |n: usize, bytes: &[u8]| -> std::result::Result<usize, String> {
        if offset + n > bytes.len() {
            return Err(format!("unexpected end of file at byte {offset}"));
        }
        let at = offset;
        offset += n;
        Ok(at)
    };

    let at = take(4, &bytes).map_err(&corrupt)?;
    if &bytes[at..at + 4] != MAGIC {
        return Err(corrupt("bad checkpoint magic".into()));
    }
    let at = take(4, &bytes).map_err(&corrupt)?;
    let version = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let at = take(4, &bytes).map_err(&corrupt)?;
    let count = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let at = take(4, &bytes).map_err(&corrupt)?;
        let name_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let at = take(name_len, &bytes).map_err(&corrupt)?;
        let name = String::from_utf8(bytes[at..at + name_len].to_vec())
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
        let at = take(4, &bytes).map_err(&corrupt)?;
        let ndim = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let at = take(4, &bytes).map_err(&corrupt)?;
            shape.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let at = take(numel * 4, &bytes).map_err(&corrupt)?;
        let data = bytes[at..at + numel * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let tensors = vec![
            NamedTensor::new("w", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]),
            NamedTensor::new("b", vec![2], vec![0.5, -0.5]),
        ];
        save_tensors(&tensors, &path).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), tensors);
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_tensors(&[NamedTensor::new("w", vec![4], vec![1.0; 4])], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_tensors(&path), Err(IoError::Checkpoint { .. })));
    }
}
