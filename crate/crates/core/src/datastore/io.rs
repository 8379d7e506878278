//! Binary persistence, all little-endian.
//!
//! Datastore: `KNDS`, version u32, count u64, dim u32, keys (count × dim f32,
//! row-major), values (count u32).
//!
//! Index: `KNIX`, version u32, n_clusters u32, dim u32, centroids
//! (n_clusters × dim f32), then for each cluster its list length u64 followed
//! by that many entry indices u64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Datastore, IvfIndex};
use crate::error::{Error, Result};
use crate::io_util::{expect_eof, read_exact_or, read_u32, read_u64};

const STORE_MAGIC: &[u8; 4] = b"KNDS";
const INDEX_MAGIC: &[u8; 4] = b"KNIX";
const VERSION: u32 = 1;

/// Bytes before the key array in a datastore file.
pub const STORE_HEADER_LEN: u64 = 4 + 4 + 8 + 4;

const CHUNK: usize = 1 << 16;

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; CHUNK * 4];
    let mut left = n;
    while left > 0 {
        let m = left.min(CHUNK);
        read_exact_or(r, &mut buf[..m * 4], what)?;
        out.extend(
            buf[..m * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        left -= m;
    }
    Ok(out)
}

fn read_u32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; CHUNK * 4];
    let mut left = n;
    while left > 0 {
        let m = left.min(CHUNK);
        read_exact_or(r, &mut buf[..m * 4], what)?;
        out.extend(
            buf[..m * 4]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        left -= m;
    }
    Ok(out)
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    read_exact_or(r, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::Format(format!("bad magic {m:?}, expected {magic:?}")));
    }
    let v = read_u32(r, "version")?;
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

impl Datastore {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        w.write_all(STORE_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        for &k in &self.keys {
            w.write_all(&k.to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, STORE_MAGIC, VERSION)?;
        let count = usize::try_from(read_u64(r, "count")?)
            .map_err(|_| Error::Format("count exceeds address space".into()))?;
        let dim = read_u32(r, "dim")? as usize;
        let n_keys = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
        let keys = read_f32s(r, n_keys, "keys")?;
        let values = read_u32s(r, count, "values")?;
        expect_eof(r)?;
        Datastore::from_parts(dim, keys, values).map_err(|e| Error::Format(e.to_string()))
    }
}

impl IvfIndex {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.n_clusters() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for &c in self.centroids() {
            w.write_all(&c.to_le_bytes())?;
        }
        for list in self.lists() {
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for &i in list {
                w.write_all(&(i as u64).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, INDEX_MAGIC, VERSION)?;
        let n_clusters = read_u32(r, "n_clusters")? as usize;
        let dim = read_u32(r, "dim")? as usize;
        if n_clusters == 0 || dim == 0 {
            return Err(Error::Format("index with zero clusters or dimension".into()));
        }
        let centroids = read_f32s(r, n_clusters * dim, "centroids")?;
        let mut lists = Vec::with_capacity(n_clusters);
        for _ in 0..n_clusters {
            let len = read_u64(r, "list length")? as usize;
            let mut list = Vec::with_capacity(len.min(1 << 24));
            for _ in 0..len {
                list.push(read_u64(r, "list entry")? as usize);
            }
            lists.push(list);
        }
        expect_eof(r)?;
        IvfIndex::from_parts(dim, centroids, lists)
    }
}
