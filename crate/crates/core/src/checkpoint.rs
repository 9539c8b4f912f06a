//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | offset      | size | content                                         |
//! |-------------|------|-------------------------------------------------|
//! | 0           | 8    | magic `DLTMRG01`                                |
//! | 8           | 8    | `u64` header length `H`                         |
//! | 16          | H    | UTF-8 JSON header, compact, keys sorted         |
//! | 16 + H      | ...  | payload: `f64` values, tensors in name order    |
//!
//! The header is `{"metadata":{..},"tensors":{name:{"offsets":[start,end],"shape":[..]}}}`
//! where offsets are byte positions relative to the start of the payload.
//! Tensors are packed contiguously in name order, so a given `ParamSet` has
//! exactly one valid encoding.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{validate_name, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DLTMRG01";
/// Size of magic plus header-length field.
pub const PREAMBLE_LEN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub offsets: [u64; 2],
    pub shape: Vec<usize>,
}

/// Decoded checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub metadata: BTreeMap<String, String>,
    /// Entries in name order.
    pub tensors: Vec<(String, TensorEntry)>,
    /// Length of the JSON header in bytes.
    pub header_len: u64,
}

impl Header {
    pub fn payload_start(&self) -> u64 {
        PREAMBLE_LEN + self.header_len
    }

    pub fn payload_len(&self) -> u64 {
        self.tensors.last().map_or(0, |(_, e)| e.offsets[1])
    }
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    metadata: &'a BTreeMap<String, String>,
    tensors: BTreeMap<&'a str, TensorEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: TensorTable,
}

/// JSON object decoded in document order, rejecting repeated keys.
struct TensorTable(Vec<(String, TensorEntry)>);

impl<'de> Deserialize<'de> for TensorTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct TableVisitor;

        impl<'de> Visitor<'de> for TableVisitor {
            type Value = TensorTable;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of tensor name to entry")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<TensorTable, A::Error> {
                let mut seen = HashSet::new();
                let mut out = Vec::new();
                while let Some((name, entry)) = map.next_entry::<String, TensorEntry>()? {
                    if !seen.insert(name.clone()) {
                        return Err(de::Error::custom(format_args!("duplicate tensor name {name:?}")));
                    }
                    out.push((name, entry));
                }
                Ok(TensorTable(out))
            }
        }

        deserializer.deserialize_map(TableVisitor)
    }
}

/// Encode a parameter set into its canonical byte representation.
pub fn to_bytes(params: &ParamSet) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in params {
        let end = offset + 8 * t.len() as u64;
        tensors.insert(
            name.as_str(),
            TensorEntry {
                offsets: [offset, end],
                shape: t.shape().to_vec(),
            },
        );
        offset = end;
    }
    let header = serde_json::to_vec(&HeaderOut {
        metadata: params.metadata(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN as usize + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn parse_preamble(bytes: &[u8], file_len: u64) -> Result<u64> {
    if bytes.len() < PREAMBLE_LEN as usize {
        return Err(Error::format(
            bytes.len() as u64,
            "file shorter than the 16-byte preamble",
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > file_len - PREAMBLE_LEN {
        return Err(Error::format(
            8,
            format!(
                "header length {header_len} exceeds the {} bytes remaining in the file",
                file_len - PREAMBLE_LEN
            ),
        ));
    }
    Ok(header_len)
}

fn json_offset(err: &serde_json::Error, header: &[u8]) -> u64 {
    // serde_json reports 1-based line/column; map back to a byte position.
    let mut line = 1;
    let mut pos = 0usize;
    for (i, &b) in header.iter().enumerate() {
        if line == err.line() {
            pos = i;
            break;
        }
        if b == b'\n' {
            line += 1;
        }
    }
    PREAMBLE_LEN + (pos + err.column().saturating_sub(1)) as u64
}

/// Parse and validate a header, given the full file length.
fn parse_header(header_bytes: &[u8], file_len: u64) -> Result<Header> {
    let header_len = header_bytes.len() as u64;
    let raw: HeaderIn = match serde_json::from_slice(header_bytes) {
        Ok(h) => h,
        Err(e) => {
            let msg = e.to_string();
            if let Some(name) = msg
                .strip_prefix("duplicate tensor name \"")
                .and_then(|rest| rest.split('"').next())
            {
                return Err(Error::DuplicateName(name.to_string()));
            }
            return Err(Error::format(
                json_offset(&e, header_bytes),
                format!("invalid header: {msg}"),
            ));
        }
    };

    let mut tensors = raw.tensors.0;
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let payload_start = PREAMBLE_LEN + header_len;
    let mut expected = 0u64;
    for (name, entry) in &tensors {
        validate_name(name)?;
        let [start, end] = entry.offsets;
        if start != expected {
            return Err(Error::format(
                payload_start.saturating_add(start),
                format!("tensor {name:?} starts at payload byte {start}, expected {expected}"),
            ));
        }
        let want = entry
            .shape
            .iter()
            .try_fold(8u64, |acc, &d| acc.checked_mul(d as u64))
            .unwrap_or(u64::MAX);
        if end < start || end - start != want {
            return Err(Error::format(
                payload_start.saturating_add(start),
                format!(
                    "tensor {name:?} spans {} bytes but shape {:?} needs {want}",
                    end.saturating_sub(start),
                    entry.shape
                ),
            ));
        }
        expected = end;
    }
    let actual = file_len - payload_start;
    if actual != expected {
        return Err(Error::format(
            payload_start + actual.min(expected),
            format!("header declares {expected} payload bytes but the file holds {actual}"),
        ));
    }
    Ok(Header {
        metadata: raw.metadata,
        tensors,
        header_len,
    })
}

/// Decode a checkpoint from bytes, validating every structural constraint.
pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let file_len = bytes.len() as u64;
    let header_len = parse_preamble(bytes, file_len)?;
    let header_end = (PREAMBLE_LEN + header_len) as usize;
    let header = parse_header(&bytes[PREAMBLE_LEN as usize..header_end], file_len)?;

    let payload = &bytes[header_end..];
    let mut params = ParamSet::new();
    for (name, entry) in &header.tensors {
        let [start, end] = entry.offsets;
        let chunk = &payload[start as usize..end as usize];
        let mut data = Vec::with_capacity(chunk.len() / 8);
        for (i, word) in chunk.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(word.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(Error::format(
                    header.payload_start() + start + 8 * i as u64,
                    format!("non-finite value in tensor {name:?}"),
                ));
            }
            data.push(v);
        }
        params.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    *params.metadata_mut() = header.metadata;
    Ok(params)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"),
        })?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

/// Read and validate only the preamble and header of a checkpoint file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let file_len = f.metadata().map_err(io_err(path))?.len();
    let mut preamble = vec![0u8; file_len.min(PREAMBLE_LEN) as usize];
    f.read_exact(&mut preamble).map_err(io_err(path))?;
    let header_len = parse_preamble(&preamble, file_len)?;
    let mut header = vec![0u8; header_len as usize];
    f.read_exact(&mut header).map_err(io_err(path))?;
    parse_header(&header, file_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new()
            .with("w", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap())
            .unwrap()
            .with("b", Tensor::scalar(1e-5).unwrap())
            .unwrap();
        p.set_metadata("source", "unit-test");
        p
    }

    #[test]
    fn round_trip_is_bit_exact_and_canonical() {
        let p = sample();
        let bytes = to_bytes(&p).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.get("b").unwrap().data()[0].to_bits(), 1e-5f64.to_bits());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_is_compact_sorted_json() {
        let bytes = to_bytes(&sample()).unwrap();
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + h]).unwrap();
        assert_eq!(
            header,
            r#"{"metadata":{"source":"unit-test"},"tensors":{"b":{"offsets":[0,8],"shape":[]},"w":{"offsets":[8,24],"shape":[2]}}}"#
        );
        assert_eq!(bytes.len(), 16 + h + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = to_bytes(&sample()).unwrap();
        assert!(matches!(
            from_bytes(&bytes[..10]),
            Err(Error::Format { offset: 10, .. })
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(truncated), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn rejects_header_length_beyond_file() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
        match from_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 8);
                assert!(message.contains("exceeds"));
            }
            other => panic!("{other:?}"),
        }
    }

    fn with_header(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn rejects_duplicate_names() {
        let bytes = with_header(
            r#"{"metadata":{},"tensors":{"a":{"offsets":[0,8],"shape":[1]},"a":{"offsets":[8,16],"shape":[1]}}}"#,
            &[0u8; 16],
        );
        match from_bytes(&bytes) {
            Err(Error::DuplicateName(n)) => assert_eq!(n, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_inconsistent_offsets_and_payload() {
        let bad_span = with_header(r#"{"tensors":{"a":{"offsets":[0,16],"shape":[1]}}}"#, &[0u8; 16]);
        assert!(matches!(from_bytes(&bad_span), Err(Error::Format { .. })));
        let short = with_header(r#"{"tensors":{"a":{"offsets":[0,16],"shape":[2]}}}"#, &[0u8; 8]);
        assert!(matches!(from_bytes(&short), Err(Error::Format { .. })));
        let garbage = with_header("{not json", &[]);
        assert!(matches!(from_bytes(&garbage), Err(Error::Format { offset, .. }) if offset >= 16));
        let mut nan = with_header(r#"{"tensors":{"a":{"offsets":[0,8],"shape":[1]}}}"#, &[]);
        let hl = nan.len() as u64;
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&nan), Err(Error::Format { offset, .. }) if offset == hl));
    }

    #[test]
    fn file_round_trip_and_header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let p = sample();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        let header = read_header(&path).unwrap();
        assert_eq!(header.tensors.len(), 2);
        assert_eq!(header.payload_len(), 24);
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
