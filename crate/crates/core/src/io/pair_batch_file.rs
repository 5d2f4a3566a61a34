//! Binary pair-batch files.
//!
//! Layout (all integers little-endian):
//! magic `RCPB`, version u32, id1, id2, strategy (each u32 length +
//! UTF-8 bytes), requested u32, count u32, then `count` records of
//! 4 x u16: p_row, p_col, q_row, q_col.

use std::io::{Read, Write};
use std::path::Path;

use super::{IoError, Result};
use crate::sampling::{PairBatch, PixelPair};

const MAGIC: &[u8; 4] = b"RCPB";
const VERSION: u32 = 1;

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(IoError::PairBatch {
                path: self.path.to_path_buf(),
                offset: self.offset as u64,
                detail: format!("unexpected end of file while reading {what}"),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.offset;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IoError::PairBatch {
            path: self.path.to_path_buf(),
            offset: at as u64,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

pub fn save_pair_batch(batch: &PairBatch, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(64 + batch.pairs.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_string(&mut out, &batch.id1);
    put_string(&mut out, &batch.id2);
    put_string(&mut out, &batch.strategy);
    out.extend_from_slice(&batch.requested.to_le_bytes());
    out.extend_from_slice(&(batch.pairs.len() as u32).to_le_bytes());
    for pair in &batch.pairs {
        out.extend_from_slice(&pair.p.0.to_le_bytes());
        out.extend_from_slice(&pair.p.1.to_le_bytes());
        out.extend_from_slice(&pair.q.0.to_le_bytes());
        out.extend_from_slice(&pair.q.1.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
    file.write_all(&out)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })
}

pub fn load_pair_batch(path: &Path) -> Result<PairBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| IoError::Missing { path: path.to_path_buf(), source })?;
    let mut cur = Cursor { bytes: &bytes, offset: 0, path };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("bad pair-batch magic {magic:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(IoError::Header {
            path: path.to_path_buf(),
            detail: format!("unsupported pair-batch version {version}"),
        });
    }
    let id1 = cur.string("id1")?;
    let id2 = cur.string("id2")?;
    let strategy = cur.string("strategy")?;
    let requested = cur.u32("requested")?;
    let count = cur.u32("count")? as usize;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("record {i}");
        pairs.push(PixelPair {
            p: (cur.u16(&what)?, cur.u16(&what)?),
            q: (cur.u16(&what)?, cur.u16(&what)?),
        });
    }
    if cur.offset != bytes.len() {
        return Err(IoError::PairBatch {
            path: path.to_path_buf(),
            offset: cur.offset as u64,
            detail: format!("{} trailing bytes after last record", bytes.len() - cur.offset),
        });
    }
    Ok(PairBatch { id1, id2, strategy, requested, pairs })
}
