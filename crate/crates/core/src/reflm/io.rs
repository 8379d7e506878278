//! Model file: `KNLM`, version, then `vocab_size n_ctx d_emb d_h` as u32 LE,
//! then every parameter array as f32 LE in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, ModelShape};
use crate::error::{Error, Result};
use crate::io_util::{read_exact_or, read_u32, expect_eof};

const MAGIC: &[u8; 4] = b"KNLM";
const VERSION: u32 = 1;

impl ModelParams {
    /// Writes parameters at `f32` precision.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = self.shape();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for d in [s.vocab_size, s.n_ctx, s.d_emb, s.d_h] {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for slice in self.slices() {
            for &x in slice {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad model magic {magic:?}")));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(r, "dimension")? as usize;
        }
        let shape = ModelShape {
            vocab_size: dims[0],
            n_ctx: dims[1],
            d_emb: dims[2],
            d_h: dims[3],
        };
        let mut params = ModelParams::zeros(shape)
            .map_err(|e| Error::Format(format!("bad model header: {e}")))?;
        let mut buf = [0u8; 4];
        for slice in params.slices_mut() {
            for x in slice {
                read_exact_or(r, &mut buf, "parameters")?;
                *x = f32::from_le_bytes(buf) as f64;
            }
        }
        expect_eof(r)?;
        if !params.is_finite() {
            return Err(Error::Format("non-finite parameter in model file".into()));
        }
        Ok(params)
    }
}
