//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `HIBCGCK1`, `u32` version, `u32` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols, `rows*cols` `f64` values. Values round-trip bit-exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::Params;
use crate::tape::Mat;

pub const MAGIC: &[u8; 8] = b"HIBCGCK1";
pub const VERSION: u32 = 1;

// guards against absurd allocations from corrupt headers
const MAX_NAME: usize = 1 << 12;

pub fn encode(params: &Params) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.0.len() as u32).to_le_bytes());
    for (name, m) in &params.0 {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(Error::Checkpoint(format!("bad name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
        let Some(nbytes) = n else {
            return Err(Error::Checkpoint("tensor too large".into()));
        };
        let raw = r.take(nbytes)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if map.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Params(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Params {
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), Mat::from_vec(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]));
        m.insert("b".to_string(), Mat::from_vec(1, 1, vec![f64::NAN]));
        m.insert("empty".to_string(), Mat::zeros(0, 3));
        Params(m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let q = decode(&encode(&p)).unwrap();
        assert_eq!(p.0.keys().collect::<Vec<_>>(), q.0.keys().collect::<Vec<_>>());
        for (k, m) in &p.0 {
            let other = &q.0[k];
            assert_eq!(m.shape(), other.shape());
            let bits = |m: &Mat| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(m), bits(other));
        }
        assert_eq!(encode(&q), encode(&p));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        assert!(decode(&[]).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decode_never_panics_after_valid_prefix(tail in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut bytes = MAGIC.to_vec();
            bytes.extend_from_slice(&VERSION.to_le_bytes());
            bytes.extend(tail);
            let _ = decode(&bytes);
        }
    }
}
