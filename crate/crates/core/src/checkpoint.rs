//! The `FGCK1` archive: a TOML header plus named `f32` tensor blobs,
//! sealed with a SHA-256 digest.
//!
//! Layout: the 6 bytes `FGCK1\n`, a little-endian `u64` header length, the
//! UTF-8 TOML header, the little-endian `f32` payload, and the 32-byte
//! digest of everything before it. The header's `tensors` array lists each
//! blob's name, shape and offset into the payload (in values).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"FGCK1\n";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    version: u32,
    meta: H,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct VersionOnly {
    version: u32,
}

/// Named tensors of an archive, sorted by name.
pub type Blobs = BTreeMap<String, Tensor<f32>>;

/// Adds every tensor of `store` to `blobs` under `prefix`.
pub fn add_store(blobs: &mut Blobs, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        blobs.insert(format!("{prefix}{name}"), t.clone());
    }
}

/// Removes every tensor under `prefix` from `blobs` into a store.
pub fn take_store(blobs: &mut Blobs, prefix: &str) -> ParamStore<f32> {
    let names: Vec<String> = blobs
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    let mut store = ParamStore::new();
    for name in names {
        let t = blobs.remove(&name).expect("listed above");
        store.insert(&name[prefix.len()..], t);
    }
    store
}

pub fn encode<H: Serialize>(meta: &H, blobs: &Blobs) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = blobs
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = toml::to_string(&Envelope {
        version: VERSION,
        meta,
        tensors,
    })
    .map_err(|e| Error::format(format!("cannot serialize checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset * 4 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in blobs.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Blobs)> {
    let corrupt = |what: &str| Error::format(format!("not a valid checkpoint: {what}"));
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing FGCK1 magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    let len_bytes: [u8; 8] = body[MAGIC.len()..MAGIC.len() + 8]
        .try_into()
        .expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    let header = body
        .get(start..start.saturating_add(header_len))
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not UTF-8"))?;
    let version: VersionOnly = toml::from_str(header).map_err(|e| corrupt(&e.to_string()))?;
    if version.version != VERSION {
        return Err(Error::format(format!(
            "checkpoint format version {} is not supported (expected {VERSION})",
            version.version
        )));
    }
    let env: Envelope<H> = toml::from_str(header).map_err(|e| corrupt(&e.to_string()))?;
    let payload = &body[start + header_len..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut blobs = Blobs::new();
    let mut expected = 0;
    for e in env.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(corrupt(&format!(
                "tensor {} lies outside the payload",
                e.name
            )));
        }
        expected += n;
        let t = Tensor::from_vec(&e.shape, values[e.offset..e.offset + n].to_vec())?;
        blobs.insert(e.name, t);
    }
    if expected != values.len() {
        return Err(corrupt("payload has trailing values"));
    }
    Ok((env.meta, blobs))
}

/// Writes through a temporary sibling file so a crash never leaves a
/// truncated archive behind.
pub fn save<H: Serialize>(path: &Path, meta: &H, blobs: &Blobs) -> Result<()> {
    let bytes = encode(meta, blobs)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("fgck.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, Blobs)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::config(format!("checkpoint {} does not exist", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}
