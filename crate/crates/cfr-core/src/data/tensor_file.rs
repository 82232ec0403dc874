//! Binary container for named tensors.
//!
//! Layout, all little-endian:
//!   magic "CFRT" | version u8 (=1) | entry count u32
//!   per entry: name length u16 | UTF-8 name | ndim u8 | dims u32 each |
//!              payload f32 row-major
//!
//! Values live as f64 in memory and f32 on disk; a read-back therefore
//! round-trips exactly at 32-bit precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CFRT";
const VERSION: u8 = 1;

/// Serialize named tensors to `path`. Names must be unique; the whole file is
/// assembled in memory first so a validation failure writes nothing.
pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    for (i, (name, _)) in entries.iter().enumerate() {
        if entries[..i].iter().any(|(other, _)| other == name) {
            return Err(Error::Input(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Input(format!("tensor name too long: {name:?}")));
        }
    }
    if entries.len() > u32::MAX as usize {
        return Err(Error::Input("too many entries".into()));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.dims().len() as u8);
        for &d in tensor.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption(format!(
                "file truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read back a tensor container written by [`write_tensors`].
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CFRT\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")? as usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for idx in 0..count {
        let name_len = cur.u16(&format!("name length of entry {idx}"))? as usize;
        let name_bytes = cur.take(name_len, &format!("name of entry {idx}"))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::Format(format!("entry {idx} name is not UTF-8")))?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let ndim = cur.u8(&format!("ndim of {name:?}"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32(&format!("dims of {name:?}"))? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(4 * n, &format!("payload of {name:?}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Corruption(format!("entry {name:?}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("cfr-tensor-file-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_preserves_dims_and_values() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 2.0, 3.5, -0.75, 1.0]).unwrap();
        let path = tmp("roundtrip.cfrt");
        write_tensors(&path, &[("weights".into(), t.clone())]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "weights");
        assert_eq!(back[0].1.dims(), t.dims());
        assert_eq!(back[0].1.data(), t.data());
    }

    #[test]
    fn empty_file_is_valid() {
        let path = tmp("empty.cfrt");
        write_tensors(&path, &[]).unwrap();
        assert!(read_tensors(&path).unwrap().is_empty());
    }

    #[test]
    fn unit_payload_bytes_are_ieee754() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let path = tmp("ieee.cfrt");
        write_tensors(&path, &[("x".into(), t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // 4 magic + 1 version + 4 count + 2 name len + 1 name + 1 ndim + 4 dim
        let offset = 4 + 1 + 4 + 2 + 1 + 1 + 4;
        assert_eq!(&bytes[offset..offset + 4], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let path = tmp("badmagic.cfrt");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_corruption_error() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = tmp("trunc.cfrt");
        write_tensors(&path, &[("m".into(), t)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        match read_tensors(&path) {
            Err(Error::Corruption(msg)) => assert!(msg.contains("\"m\""), "msg: {msg}"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_name_rejected_on_write() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let path = tmp("dup.cfrt");
        let err = write_tensors(&path, &[("a".into(), t.clone()), ("a".into(), t)]);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn random_round_trips_are_exact_at_f32() {
        let mut rng = DetRng::from_seed_stream(31, 0);
        let path = tmp("random.cfrt");
        for case in 0..40 {
            let ndim = 1 + rng.below(3);
            let dims: Vec<usize> = (0..ndim).map(|_| 1 + rng.below(5)).collect();
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| (rng.range_f64(-100.0, 100.0) as f32) as f64)
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            write_tensors(&path, &[(format!("case{case}"), t.clone())]).unwrap();
            let back = read_tensors(&path).unwrap();
            assert_eq!(back[0].1.dims(), t.dims());
            assert_eq!(back[0].1.data(), t.data());
        }
    }
}
