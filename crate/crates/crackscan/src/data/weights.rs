//! Portable weight bundle: `NWB1` magic, a length-prefixed text header
//! indexing the tensors, then a raw little-endian f64 payload.
//!
//! Header layout (UTF-8, one entry per line, tensors sorted by name):
//!
//! ```text
//! NWB1
//! <u32 LE header byte length>
//! version=1
//! tensors=<count>
//! <name> f64 <d0>x<d1>x... <byte offset> <byte length>
//! <payload: count * 8 bytes per element, little endian>
//! ```
//!
//! Offsets are contiguous and ascending; the payload length must equal the
//! sum of entry lengths. Save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NWB1";
const VERSION: u32 = 1;

/// Serialize a named tensor store. Names must be free of whitespace.
pub fn save_bundle(params: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("version={VERSION}\n"));
    header.push_str(&format!("tensors={}\n", params.len()));
    let mut offset = 0u64;
    for (name, tensor) in params {
        if name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::Bundle(format!("tensor name {name:?} contains whitespace")));
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let bytes = (tensor.numel() * 8) as u64;
        header.push_str(&format!(
            "{name} f64 {} {offset} {bytes}\n",
            dims.join("x")
        ));
        offset += bytes;
    }

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for tensor in params.values() {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Deserialize a bundle, validating magic, version, offsets, and payload
/// length.
pub fn load_bundle(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Bundle("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Bundle(format!("bad magic {magic:?}")));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Bundle("file too short for header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::Bundle("truncated header".into()))?;
    let header = String::from_utf8(header).map_err(|_| Error::Bundle("header not UTF-8".into()))?;

    let mut lines = header.lines();
    let version_line = lines.next().ok_or_else(|| Error::Bundle("empty header".into()))?;
    let version: u32 = version_line
        .strip_prefix("version=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Bundle(format!("bad version line {version_line:?}")))?;
    if version != VERSION {
        return Err(Error::Bundle(format!(
            "unsupported bundle version {version} (expected {VERSION})"
        )));
    }
    let count_line = lines.next().ok_or_else(|| Error::Bundle("missing tensor count".into()))?;
    let count: usize = count_line
        .strip_prefix("tensors=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Bundle(format!("bad count line {count_line:?}")))?;

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        bytes: u64,
    }
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Bundle("header ends before all entries".into()))?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 || fields[1] != "f64" {
            return Err(Error::Bundle(format!("bad entry {line:?}")));
        }
        let shape: Vec<usize> = fields[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Bundle(format!("bad shape {line:?}"))))
            .collect::<Result<_>>()?;
        let offset: u64 = fields[3].parse().map_err(|_| Error::Bundle("bad offset".into()))?;
        let bytes: u64 = fields[4].parse().map_err(|_| Error::Bundle("bad length".into()))?;
        let numel: usize = shape.iter().product();
        if bytes != (numel * 8) as u64 {
            return Err(Error::Bundle(format!(
                "entry {} declares {bytes} bytes for {numel} values",
                fields[0]
            )));
        }
        if offset != expected_offset {
            return Err(Error::Bundle(format!(
                "entry {} offset {offset} overlaps or leaves a gap (expected {expected_offset})",
                fields[0]
            )));
        }
        expected_offset += bytes;
        entries.push(Entry {
            name: fields[0].to_string(),
            shape,
            offset,
            bytes,
        });
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected_offset {
        return Err(Error::Bundle(format!(
            "payload is {} bytes, header expects {expected_offset}",
            payload.len()
        )));
    }

    let mut out = BTreeMap::new();
    for e in entries {
        let start = e.offset as usize;
        let end = start + e.bytes as usize;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&e.shape, data)
            .map_err(|err| Error::Bundle(format!("entry {}: {err}", e.name)))?;
        if out.insert(e.name.clone(), tensor).is_some() {
            return Err(Error::Bundle(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn store() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "layer.weight".to_string(),
            Tensor::new(&[2, 2], vec![1.5, -2.25, 0.0, 1e-300]).unwrap(),
        );
        m.insert("layer.bias".to_string(), Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.nwb");
        let b = dir.path().join("b.nwb");
        let params = store();
        save_bundle(&params, &a).unwrap();
        let loaded = load_bundle(&a).unwrap();
        save_bundle(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        for (k, v) in &params {
            assert_eq!(loaded[k].data(), v.data());
            assert_eq!(loaded[k].shape(), v.shape());
        }
    }

    #[test]
    fn single_2x2_tensor_payload_is_32_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.nwb");
        let mut m = BTreeMap::new();
        m.insert("t".to_string(), Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        save_bundle(&m, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8 + header_len..];
        assert_eq!(payload.len(), 32);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.nwb");
        save_bundle(&store(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Bundle(_))));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.nwb");
        save_bundle(&store(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_bundle(&path).is_err());

        save_bundle(&store(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // "version=1\n" starts right after magic + u32.
        let pos = 8 + "version=".len();
        bytes[pos] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Bundle(_))));
    }
}
