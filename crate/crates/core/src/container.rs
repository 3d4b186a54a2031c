//! FLMW tensor container.
//!
//! ```text
//! "FLMW" | u32 version = 1 | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u8 rank | u64 dims[rank] | u64 payload offset
//! u64 FNV-1a of the payload
//! payload: contiguous little-endian f32 tensors in header order
//! ```
//! All integers are little-endian. Offsets are relative to the payload start.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numerics::{fnv1a64, Tensor};

pub const FLMW_MAGIC: [u8; 4] = *b"FLMW";
pub const FLMW_VERSION: u32 = 1;

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode_flmw<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
    let mut header = Vec::new();
    header.extend_from_slice(&FLMW_MAGIC);
    header.extend_from_slice(&FLMW_VERSION.to_le_bytes());
    header.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in &entries {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(t.rank() as u8);
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    header.extend_from_slice(&payload);
    header
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(
                FormatError::Truncated(format!("reading {what} at byte {}", self.pos)).into(),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found }.into());
        }
        Ok(())
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }
}

pub(crate) fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode_flmw(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader::new(bytes);
    r.magic(FLMW_MAGIC)?;
    let version = r.u32("version")?;
    if version != FLMW_VERSION {
        return Err(FormatError::BadVersion {
            expected: FLMW_VERSION,
            found: version,
        }
        .into());
    }
    let count = r.u32("tensor count")? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| FormatError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let offset = r.u64("offset")? as usize;
        headers.push((name, dims, offset));
    }
    let stored = r.u64("checksum")?;
    let payload = r.rest();
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, dims, offset) in headers {
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("tensor {name:?} size overflows")))?;
        let end = numel
            .checked_mul(4)
            .and_then(|n| offset.checked_add(n))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                FormatError::Malformed(format!("tensor {name:?} extends past the payload"))
            })?;
        let t = Tensor::new(&dims, f32s_from_le(&payload[offset..end]))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_flmw<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    std::fs::write(path, encode_flmw(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_flmw(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flmw(&bytes)
}

/// Removes the tensor called `name`, checking its shape when `expected` is given.
pub(crate) fn take_tensor(
    tensors: &mut NamedTensors,
    name: &str,
    expected: Option<&[usize]>,
) -> Result<Tensor> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| FormatError::MissingTensor(name.to_string()))?;
    let (_, t) = tensors.swap_remove(idx);
    if let Some(shape) = expected {
        if t.shape() != shape {
            return Err(FormatError::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "a".into(),
                Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]).unwrap(),
            ),
            (
                "b.c".into(),
                Tensor::new(&[3], vec![0.0, -0.0, 1e30]).unwrap(),
            ),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let entries = sample();
        let bytes = encode_flmw(entries.iter().map(|(n, t)| (n.as_str(), t)));
        let back = decode_flmw(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
        let again = encode_flmw(back.iter().map(|(n, t)| (n.as_str(), t)));
        assert_eq!(bytes, again);
    }

    #[test]
    fn distinct_errors() {
        let entries = sample();
        let bytes = encode_flmw(entries.iter().map(|(n, t)| (n.as_str(), t)));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_flmw(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_flmw(&bad),
            Err(Error::Format(FormatError::BadVersion { found: 9, .. }))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_flmw(truncated),
            Err(Error::Format(FormatError::Checksum { .. }))
        ));

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        assert!(matches!(
            decode_flmw(&bad),
            Err(Error::Format(FormatError::Checksum { .. }))
        ));

        assert!(matches!(
            decode_flmw(&bytes[..10]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
    }
}
