//! `.adlm` model files, `.adak` key files and atomic writes.
//!
//! Model layout: `"ADLM"`, format version (u32 LE), header length (u32 LE),
//! header JSON `{tag, spec}`, the `d` parameters as f64 LE in flat-index
//! order, then the SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::keying::Key;
use crate::network::{ModelTag, NetworkSpec, ParameterStore};

pub const MAGIC: &[u8; 4] = b"ADLM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tag: ModelTag,
    spec: NetworkSpec,
}

pub fn encode_model(store: &ParameterStore) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        tag: store.tag(),
        spec: store.spec().clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + store.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in store.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Fingerprint::of(&out);
    out.extend_from_slice(&digest.0);
    out
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        message: format!(
            "truncated {what}: missing {} byte(s)",
            at + n - bytes.len().min(at + n)
        ),
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<ParameterStore> {
    if take(bytes, 0, 4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a model file (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported model format version {version}"),
        });
    }
    let hlen =
        u32::from_le_bytes(take(bytes, 8, 4, "header length")?.try_into().expect("4")) as usize;
    let header: Header =
        serde_json::from_slice(take(bytes, 12, hlen, "header")?).map_err(|e| Error::Parse {
            offset: 12,
            message: format!("bad header: {e}"),
        })?;
    let d = header.spec.param_count()?;
    let body = 12 + hlen;
    let raw = take(bytes, body, d * 8, "parameters")?;
    let digest = take(bytes, body + d * 8, 32, "content hash")?;
    if bytes.len() != body + d * 8 + 32 {
        return Err(Error::Parse {
            offset: (body + d * 8 + 32) as u64,
            message: "trailing bytes after content hash".into(),
        });
    }
    if Fingerprint::of(&bytes[..body + d * 8]).0 != digest {
        return Err(Error::Validation(
            "model file content hash does not match".into(),
        ));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParameterStore::from_values(header.spec, values, header.tag)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_model(path: &Path, store: &ParameterStore) -> Result<Fingerprint> {
    let bytes = encode_model(store);
    write_atomic(path, &bytes)?;
    Ok(Fingerprint::of(&bytes))
}

pub fn read_model(path: &Path) -> Result<ParameterStore> {
    decode_model(&read_bytes(path)?)
}

pub fn write_key(path: &Path, key: &Key) -> Result<Fingerprint> {
    let text = key.to_json()?;
    write_atomic(path, text.as_bytes())?;
    Ok(Fingerprint::of(text.as_bytes()))
}

pub fn read_key(path: &Path) -> Result<Key> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to() as u64,
        message: "key file is not UTF-8".into(),
    })?;
    Key::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_network;

    #[test]
    fn model_roundtrip_bytes() {
        let s = init_network(&NetworkSpec::mlp(&[3, 5, 2]).unwrap(), 1).unwrap();
        let bytes = encode_model(&s);
        assert_eq!(&bytes[..4], b"ADLM");
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let s = init_network(&NetworkSpec::mlp(&[3, 5, 2]).unwrap(), 1).unwrap();
        let bytes = encode_model(&s);
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(Error::Validation(_))));
        assert!(matches!(
            decode_model(&bytes[..n - 10]),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_model(b"NOPE0000"),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.adlm");
        let s = init_network(&NetworkSpec::mlp(&[2, 2, 2]).unwrap(), 0).unwrap();
        write_model(&p, &s).unwrap();
        write_model(&p, &s).unwrap();
        assert_eq!(read_model(&p).unwrap(), s);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
