//! Seed derivation, hashing, and JSON-lines I/O shared across modules.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::{Result, SwapLabError};

/// Derives a child seed from a root seed, a role tag, and an index.
///
/// Every random draw in the crate flows through this: a run has one root seed and
/// every consumer (factor sampling, proxy noise, training noise, init, ...) gets its
/// own stateless stream. Derivation is SHA-256 over (root, tag, index), truncated to
/// 64 bits, so streams never collide across tags and resuming a run never has to
/// serialize RNG state.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0xfe]);
    h.update(tag.as_bytes());
    h.update([0xff]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest >= 8 bytes"))
}

/// Deterministic RNG for a derived stream.
pub fn rng_for(root: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, tag, index))
}

/// SHA-256 hex digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hashes a list of named f64 tensors (name, data) into a stable hex digest.
///
/// The digest covers names, lengths, and little-endian payloads in the given order,
/// so it changes iff any parameter value or the layout changes.
pub fn hash_named_tensors<'a>(entries: impl Iterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut h = Sha256::new();
    for (name, data) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a JSON-lines file into a vector, reporting the first malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| {
            SwapLabError::Manifest(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Appends one JSON value as a line to an open writer (training logs).
pub fn append_jsonl_line<T: Serialize, W: Write>(w: &mut W, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")
        .map_err(|e| SwapLabError::io("<jsonl stream>", e))?;
    Ok(())
}

// ---- checkpoint container ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"SWLB";
const CHECKPOINT_VERSION: u32 = 1;

/// One named-tensor bundle plus free-form JSON metadata, as stored on disk.
///
/// Layout: magic, version, header length, JSON header (kind, meta, tensor names and
/// shapes), raw little-endian f64 payloads in header order, and a SHA-256 trailer
/// over everything before it. The trailer turns silent corruption into a load error.
#[derive(Debug)]
pub struct CheckpointPayload {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, serde::Deserialize)]
struct CheckpointHeader {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Writes a checkpoint container to `path`.
pub fn write_checkpoint(path: &Path, payload: &CheckpointPayload) -> Result<()> {
    let header = CheckpointHeader {
        kind: payload.kind.clone(),
        meta: payload.meta.clone(),
        tensors: payload
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape.clone()))
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(
        16 + header_bytes.len()
            + payload
                .tensors
                .iter()
                .map(|(_, t)| t.data.len() * 8)
                .sum::<usize>()
            + 32,
    );
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, t) in &payload.tensors {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    bytes.extend_from_slice(&digest);
    std::fs::write(path, &bytes).map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a checkpoint container, verifying magic, version, and the hash trailer.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointPayload> {
    let bytes =
        std::fs::read(path).map_err(|e| SwapLabError::io(path.display().to_string(), e))?;
    let fail = |msg: &str| SwapLabError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 + 32 {
        return Err(fail("file too short for container framing"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let mut h = Sha256::new();
    h.update(body);
    if h.finalize().as_slice() != trailer {
        return Err(fail("hash trailer mismatch (corrupt or truncated)"));
    }
    if &body[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header length out of range"))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end])?;
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in header.tensors {
        let numel: usize = shape.iter().product();
        let end = offset
            .checked_add(numel * 8)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fail(&format!("tensor `{name}` payload out of range")))?;
        let mut data = Vec::with_capacity(numel);
        for chunk in body[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        tensors.push((name, Tensor::new(shape, data)));
        offset = end;
    }
    if offset != body.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok(CheckpointPayload {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_separates_streams() {
        let a = derive_seed(7, "noise", 0);
        let b = derive_seed(7, "noise", 0);
        assert_eq!(a, b);
        assert_ne!(derive_seed(7, "noise", 0), derive_seed(7, "noise", 1));
        assert_ne!(derive_seed(7, "noise", 0), derive_seed(7, "batch", 0));
        assert_ne!(derive_seed(7, "noise", 0), derive_seed(8, "noise", 0));
    }

    #[test]
    fn tensor_hash_tracks_values_and_order() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0];
        let h1 = hash_named_tensors([("w", a.as_slice()), ("b", b.as_slice())].into_iter());
        let h2 = hash_named_tensors([("w", a.as_slice()), ("b", b.as_slice())].into_iter());
        assert_eq!(h1, h2);
        let h3 = hash_named_tensors([("b", b.as_slice()), ("w", a.as_slice())].into_iter());
        assert_ne!(h1, h3);
        let a2 = vec![1.0, 2.0 + 1e-15];
        let h4 = hash_named_tensors([("w", a2.as_slice()), ("b", b.as_slice())].into_iter());
        assert_ne!(h1, h4);
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.swlb");
        let payload = CheckpointPayload {
            kind: "test-bundle".into(),
            meta: serde_json::json!({"step": 41, "note": "x"}),
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.0, 3.25, 1e-300, -0.5])),
                ("b".into(), Tensor::new(vec![1], vec![f64::MIN_POSITIVE])),
            ],
        };
        write_checkpoint(&path, &payload).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.kind, payload.kind);
        assert_eq!(back.meta, payload.meta);
        assert_eq!(back.tensors.len(), 2);
        for ((n0, t0), (n1, t1)) in payload.tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape, t1.shape);
            assert_eq!(t0.data, t1.data, "payload must round-trip bit-exactly");
        }

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(
            err.to_string().contains("hash trailer mismatch"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn checkpoint_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.swlb");
        let payload = CheckpointPayload {
            kind: "test-bundle".into(),
            meta: serde_json::Value::Null,
            tensors: vec![("w".into(), Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]))],
        };
        write_checkpoint(&path, &payload).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(read_checkpoint(&path).is_err());

        let mut forged = bytes.clone();
        forged[0..4].copy_from_slice(b"NOPE");
        // Re-stamp the trailer so only the magic check can object.
        let body_len = forged.len() - 32;
        let mut h = Sha256::new();
        h.update(&forged[..body_len]);
        let digest = h.finalize();
        forged[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &forged).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "unexpected error: {err}");
    }

    #[test]
    fn jsonl_round_trip() {
        #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
        struct Row {
            k: String,
            v: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![
            Row { k: "a".into(), v: 1.5 },
            Row { k: "b".into(), v: -2.25 },
        ];
        write_jsonl(&path, &rows).unwrap();
        let back: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(back, rows);
    }
}
