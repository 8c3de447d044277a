//! Binary checkpoint container: an 8-byte magic, a format version, a JSON
//! header describing the run and the tensor table, then raw little-endian
//! f32 blobs in table order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"XMCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    epoch: usize,
    config_hash: String,
    config: Value,
    extra: Value,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the JSON serialization of `cfg`.
pub fn hash_config<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Model family, e.g. `"cyclegan"` or `"segnet"`.
    pub kind: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub config: Value,
    /// Free-form run state (RNG seeds, metric history, ...).
    pub extra: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes to a temporary sibling and renames it into place, so a
    /// crash never leaves a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 32 + self.tensors.iter().map(|(_, t)| t.numel() * 4).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(VERSION).unwrap();
        buf.write_u64::<LittleEndian>(json.len() as u64).unwrap();
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                buf.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension(format!(
            "{}.tmp{}",
            path.extension().and_then(|e| e.to_str()).unwrap_or(""),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut r = &bytes[8..];
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 4 {
                return Err(bad(&format!("truncated data for tensor {}", entry.name)));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated"))?;
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            epoch: header.epoch,
            config_hash: header.config_hash,
            config: header.config,
            extra: header.extra,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "segnet".into(),
            epoch: 3,
            config_hash: "abc".into(),
            config: serde_json::json!({"levels": 5}),
            extra: serde_json::json!({"best": 0.5}),
            tensors: vec![
                ("w".into(), Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE])),
                ("b".into(), Tensor::scalar(0.25)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.kind, "segnet");
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config, c.config);
        assert_eq!(back.extra, c.extra);
        assert_eq!(back.tensors, c.tensors);
        // no temporary files left behind
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, &bytes).unwrap();
        assert!(Checkpoint::load(&p).unwrap_err().to_string().contains("truncated"));
        fs::write(&p, b"hello world, not a checkpoint").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
