//! Binary checkpoint format.
//!
//! Layout, all integers little-endian: magic `MREC`, `u32` version, then for
//! every parameter in name order a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per extent and the `f64` values row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ModelParams;

const MAGIC: &[u8; 4] = b"MREC";
const VERSION: u32 = 1;

/// Serialises named tensors, sorted by name.
pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut sorted: Vec<&(String, &Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in sorted {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name `{name}` is too long")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("`{name}` has rank {}", t.rank())))?;
        buf.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("`{name}` extent {e} overflows u32")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Length {
                what: format!("checkpoint {what}"),
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses named tensors in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8, &format!("values of `{name}`"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, values).map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), &params.named())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path)?;
    ModelParams::from_named(read_checkpoint(std::io::BufReader::new(file))?)
}
