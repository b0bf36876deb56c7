//! Versioned container of named `f64` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RAIMTNSR"
//! version  u32      1
//! count    u64
//! count x {
//!   name_len u32, name (UTF-8),
//!   rank u32, dims u64 x rank,
//!   data f64 x prod(dims)
//! }
//! ```
//!
//! The same container holds model checkpoints and windowed datasets.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RAIMTNSR";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn encode(named: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = named
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.rank() + 8 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(20 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} ({} bytes needed, {} left)",
                self.pos,
                n,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes a container. Every length is checked against the bytes actually
/// present before anything is allocated, so hostile input cannot trigger
/// large allocations.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic; not a tensor container".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u64("tensor count")?;
    // each record is at least 8 bytes (name_len + rank)
    if count > (r.remaining() / 8) as u64 {
        return Err(Error::Corrupt(format!("tensor count {count} exceeds file size")));
    }
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Corrupt(format!("tensor {i}: name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Corrupt(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Corrupt(format!("`{name}`: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            if d == 0 {
                return Err(Error::Corrupt(format!("`{name}`: zero dimension")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Corrupt(format!("`{name}`: element count overflows")))?;
            shape.push(d as usize);
        }
        if numel > (r.remaining() / 8) as u64 {
            return Err(Error::Corrupt(format!(
                "truncated while reading data of `{name}` ({numel} values declared)"
            )));
        }
        let raw = r.take(numel as usize * 8, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint under the final name.
pub fn save(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(named);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
            ("head.W_x".into(), Tensor::vector(vec![1e300, -7.25])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let named = sample();
        let back = decode(&encode(&named)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in named.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (x, y) in t0.data().iter().zip(t1.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn every_truncation_is_corrupt() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Corrupt(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn huge_declared_sizes_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &sample()).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, sample());
    }
}
