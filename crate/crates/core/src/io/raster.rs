//! Row-major rasters and their binary file formats.
//!
//! - RGB: binary PPM (P6, maxval 255)
//! - Labels / region maps: binary PGM (P5, maxval 65535), 16-bit samples
//!   stored little-endian
//! - Depth: raw little-endian f32 with a 16-byte header
//!   (`RCD0`, width u32, height u32, reserved u32)
//!
//! All multi-byte values are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{IoError, Result};

/// Dense row-major 2D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "raster data length mismatch");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col] = value;
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U: Copy>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| IoError::Missing { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|source| IoError::Truncated { path: path.to_path_buf(), source })
}

/// Reads a PNM header token, skipping whitespace and `#` comments.
fn pnm_token(reader: &mut impl Read, path: &Path) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        read_exact(reader, &mut byte, path)?;
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' if token.is_empty() => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !token.is_empty() {
                    break;
                }
            }
            _ => token.push(b),
        }
    }
    String::from_utf8(token).map_err(|_| IoError::Header {
        path: path.to_path_buf(),
        detail: "non-ASCII token in PNM header".into(),
    })
}

fn pnm_usize(reader: &mut impl Read, path: &Path, what: &str) -> Result<usize> {
    let tok = pnm_token(reader, path)?;
    tok.parse().map_err(|_| IoError::Header {
        path: path.to_path_buf(),
        detail: format!("bad {what}: {tok:?}"),
    })
}

/// Writes RGB as binary PPM (P6).
pub fn write_ppm(raster: &Raster<[u8; 3]>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let header = format!("P6\n{} {}\n255\n", raster.width(), raster.height());
    let mut body = Vec::with_capacity(raster.len() * 3);
    for px in raster.data() {
        body.extend_from_slice(px);
    }
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&body))
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

pub fn read_ppm(path: &Path) -> Result<Raster<[u8; 3]>> {
    let mut r = open(path)?;
    let magic = pnm_token(&mut r, path)?;
    if magic != "P6" {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("expected P6, got {magic:?}"),
        });
    }
    let width = pnm_usize(&mut r, path, "width")?;
    let height = pnm_usize(&mut r, path, "height")?;
    let maxval = pnm_usize(&mut r, path, "maxval")?;
    if maxval != 255 {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("expected maxval 255, got {maxval}"),
        });
    }
    let mut bytes = vec![0u8; width * height * 3];
    read_exact(&mut r, &mut bytes, path)?;
    let data = bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Raster::from_vec(width, height, data))
}

/// Writes 16-bit labels as binary PGM (P5, maxval 65535), little-endian samples.
pub fn write_pgm16(raster: &Raster<u16>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let header = format!("P5\n{} {}\n65535\n", raster.width(), raster.height());
    let mut body = Vec::with_capacity(raster.len() * 2);
    for v in raster.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&body))
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

pub fn read_pgm16(path: &Path) -> Result<Raster<u16>> {
    let mut r = open(path)?;
    let magic = pnm_token(&mut r, path)?;
    if magic != "P5" {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("expected P5, got {magic:?}"),
        });
    }
    let width = pnm_usize(&mut r, path, "width")?;
    let height = pnm_usize(&mut r, path, "height")?;
    let maxval = pnm_usize(&mut r, path, "maxval")?;
    if maxval != 65535 {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("expected maxval 65535, got {maxval}"),
        });
    }
    let mut bytes = vec![0u8; width * height * 2];
    read_exact(&mut r, &mut bytes, path)?;
    let data = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok(Raster::from_vec(width, height, data))
}

const DEPTH_MAGIC: &[u8; 4] = b"RCD0";

/// Writes depth as raw little-endian f32 with a 16-byte header.
pub fn write_depth(raster: &Raster<f32>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(DEPTH_MAGIC);
    header.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    header.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    let mut body = Vec::with_capacity(raster.len() * 4);
    for v in raster.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header)
        .and_then(|_| w.write_all(&body))
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

pub fn read_depth(path: &Path) -> Result<Raster<f32>> {
    let mut r = open(path)?;
    let mut header = [0u8; 16];
    read_exact(&mut r, &mut header, path)?;
    if &header[0..4] != DEPTH_MAGIC {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("bad depth magic {:?}", &header[0..4]),
        });
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; width * height * 4];
    read_exact(&mut r, &mut bytes, path)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Raster::from_vec(width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut r = Raster::new(3, 2, [0u8, 0, 0]);
        r.set(1, 2, [10, 20, 30]);
        write_ppm(&r, &path).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), r);
    }

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut r = Raster::new(2, 2, 0u16);
        r.set(0, 1, 65535);
        r.set(1, 0, 257);
        write_pgm16(&r, &path).unwrap();
        assert_eq!(read_pgm16(&path).unwrap(), r);
    }

    #[test]
    fn depth_round_trip_and_golden_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.depth");
        let r = Raster::from_vec(2, 1, vec![1.0f32, -0.0]);
        write_depth(&r, &path).unwrap();
        assert_eq!(read_depth(&path).unwrap(), r);

        // Frozen byte layout: header then little-endian f32s.
        let bytes = std::fs::read(&path).unwrap();
        let expected: Vec<u8> = [
            b"RCD0".to_vec(),
            2u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            0u32.to_le_bytes().to_vec(),
            vec![0x00, 0x00, 0x80, 0x3f], // 1.0f32 LE
            vec![0x00, 0x00, 0x00, 0x80], // -0.0f32 LE
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pgm16_is_little_endian_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("le.pgm");
        let r = Raster::from_vec(1, 1, vec![0x0102u16]);
        write_pgm16(&r, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0x02, 0x01]);
    }

    #[test]
    fn truncated_depth_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.depth");
        let r = Raster::new(4, 4, 1.0f32);
        write_depth(&r, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        let err = read_depth(&path).unwrap_err();
        assert!(err.to_string().contains("t.depth"), "{err}");
    }

    #[test]
    fn bad_magic_is_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\nxxx").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(matches!(err, IoError::Header { .. }), "{err}");
    }
}
