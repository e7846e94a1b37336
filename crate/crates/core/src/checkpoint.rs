//! Versioned binary checkpoints with a text manifest.
//!
//! Blob layout (little endian):
//!
//! ```text
//! magic      8 bytes  "PURSUITQ"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 key-value text
//! n_tensors  u32
//! per tensor: name_len u16, name bytes, rows u32, cols u32, rows*cols f64
//! ```
//!
//! The manifest next to the blob (`<stem>.manifest`) lists every tensor with
//! its shape and the SHA-256 of the blob; loading through the manifest
//! refuses blobs whose checksum or tensor list disagrees.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::qnet::{NetShape, QNetwork};

pub const MAGIC: &[u8; 8] = b"PURSUITQ";
pub const VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "pursuit-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form key-value text (world config, method, shapes, ...).
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest path belonging to a checkpoint blob.
pub fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("manifest")
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Checkpoint {
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `net`, with names prefixed by `prefix/`.
    pub fn add_network(&mut self, prefix: &str, net: &QNetwork) {
        for s in net.layout() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}/{}", s.name),
                rows: s.rows,
                cols: s.cols,
                data: net.params()[s.range()].to_vec(),
            });
        }
    }

    /// Rebuilds the network stored under `prefix`.
    pub fn network(&self, prefix: &str, shape: NetShape) -> Result<QNetwork> {
        let mut net = QNetwork::new(shape, 0);
        let layout = net.layout().to_vec();
        for s in &layout {
            let name = format!("{prefix}/{}", s.name);
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::ArtifactMismatch(format!("checkpoint lacks tensor `{name}`")))?;
            if (t.rows, t.cols) != (s.rows, s.cols) {
                return Err(Error::ArtifactMismatch(format!(
                    "tensor `{name}` is {}x{}, network expects {}x{}",
                    t.rows, t.cols, s.rows, s.cols
                )));
            }
            net.params_mut()[s.range()].copy_from_slice(&t.data);
        }
        Ok(net)
    }

    pub fn meta(&self) -> Result<KvMap> {
        KvMap::parse(&self.metadata)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::ArtifactMismatch("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::ArtifactMismatch("metadata is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::ArtifactMismatch("tensor name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, rows, cols, data });
        }
        ensure!(r.at == bytes.len(), "trailing bytes after checkpoint");
        Ok(Checkpoint { metadata, tensors })
    }

    /// Manifest text for the serialized `blob` of this checkpoint.
    pub fn manifest(&self, blob_name: &str, blob: &[u8]) -> String {
        let mut w = KvWriter::new();
        w.comment("checkpoint manifest: tensor shapes and blob checksum")
            .put("format", MANIFEST_FORMAT)
            .put("version", VERSION)
            .put("blob", blob_name)
            .put("sha256", sha256_hex(blob))
            .put("n_tensors", self.tensors.len());
        for t in &self.tensors {
            w.put(&format!("tensor.{}", t.name), format!("{}x{}", t.rows, t.cols));
        }
        w.finish()
    }

    /// Writes the blob and its manifest; returns the manifest path.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let blob = self.to_bytes();
        std::fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mpath = manifest_path(path);
        std::fs::write(&mpath, self.manifest(&name, &blob)).map_err(|e| Error::io(&mpath, e))?;
        Ok(mpath)
    }

    /// Loads a blob after checking it against its manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let manifest = KvMap::read(&mpath)?;
        verify_manifest(&manifest, &blob)?;
        let ckpt = Checkpoint::from_bytes(&blob)?;
        let listed: usize = manifest.require("n_tensors")?;
        if listed != ckpt.tensors.len() {
            return Err(Error::ArtifactMismatch(format!(
                "manifest lists {listed} tensors, blob holds {}",
                ckpt.tensors.len()
            )));
        }
        for t in &ckpt.tensors {
            let want = format!("{}x{}", t.rows, t.cols);
            match manifest.get_str(&format!("tensor.{}", t.name)) {
                Some(s) if s == want => {}
                other => {
                    return Err(Error::ArtifactMismatch(format!(
                        "tensor `{}` is {want} in the blob but {:?} in the manifest",
                        t.name, other
                    )))
                }
            }
        }
        Ok(ckpt)
    }
}

/// Checks format, version and checksum of `blob` against a parsed manifest.
pub fn verify_manifest(manifest: &KvMap, blob: &[u8]) -> Result<()> {
    if manifest.get_str("format") != Some(MANIFEST_FORMAT) {
        return Err(Error::ArtifactMismatch("manifest has the wrong format tag".into()));
    }
    let version: u32 = manifest.require("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let want: String = manifest.require("sha256")?;
    let got = sha256_hex(blob);
    if want != got {
        return Err(Error::ArtifactMismatch(format!(
            "checksum mismatch: manifest {want}, blob {got}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Checkpoint, QNetwork) {
        let net = QNetwork::new(NetShape::new(13, false), 3);
        let mut c = Checkpoint::new("method = dqdil\n");
        c.add_network("agent0", &net);
        (c, net)
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn bytes_round_trip() {
        let (c, net) = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.network("agent0", *net.shape()).unwrap(), net);
        assert_eq!(back.meta().unwrap().get_str("method"), Some("dqdil"));
    }

    #[test]
    fn save_load_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let (c, _) = sample();
        let mpath = c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let text = std::fs::read_to_string(&mpath).unwrap();
        assert!(text.contains("tensor.agent0/gru.weight_hh = 96x32"));

        let mut blob = std::fs::read(&path).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 1;
        std::fs::write(&path, &blob).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::ArtifactMismatch(_))));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let (c, _) = sample();
        let bytes = c.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::ArtifactMismatch(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (c, _) = sample();
        let err = c.network("agent0", NetShape::new(13, true)).unwrap_err();
        assert!(matches!(err, Error::ArtifactMismatch(_)));
        assert!(c.network("agent9", NetShape::new(13, false)).is_err());
    }
}
