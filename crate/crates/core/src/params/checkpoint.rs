//! Sectioned binary container used for server checkpoints and for every blob
//! exchanged through the store.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FEDP" | format_version u32 | section_count u32
//! per section: name_len u16 | name (UTF-8) | kind u8 | payload_len u64 | payload | crc32 u32
//! ```
//!
//! Kinds: 0 = f32 vector, 1 = u64 scalar, 2 = f64 scalar, 3 = UTF-8 JSON.

use serde::{de::DeserializeOwned, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

use super::vector::{check_finite, LayoutManifest, ParamVector};

pub const MAGIC: &[u8; 4] = b"FEDP";
pub const FORMAT_VERSION: u32 = 1;
/// Name of the JSON section holding the tensor layout.
pub const MANIFEST_SECTION: &str = "manifest";

const KIND_F32_VEC: u8 = 0;
const KIND_U64: u8 = 1;
const KIND_F64: u8 = 2;
const KIND_JSON: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch in section {section:?}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { section: String, stored: u32, computed: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("section {0:?} not present")]
    MissingSection(String),
    #[error("section {name:?} has kind {found}, expected {expected}")]
    WrongKind { name: String, found: &'static str, expected: &'static str },
    #[error("section {name:?}: {source}")]
    Values { name: String, source: super::ParamError },
    #[error("section {name:?}: json: {source}")]
    Json { name: String, source: serde_json::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    Vector(Vec<f32>),
    U64(u64),
    F64(f64),
    Json(String),
}

impl Section {
    fn kind_name(&self) -> &'static str {
        match self {
            Section::Vector(_) => "f32 vector",
            Section::U64(_) => "u64",
            Section::F64(_) => "f64",
            Section::Json(_) => "json",
        }
    }
}

/// An ordered set of named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a section, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, section: Section) {
        let name = name.into();
        match self.sections.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = section,
            None => self.sections.push((name, section)),
        }
    }

    pub fn with_vector(mut self, name: &str, v: &ParamVector) -> Self {
        self.insert(name, Section::Vector(v.as_slice().to_vec()));
        self
    }

    pub fn with_u64(mut self, name: &str, v: u64) -> Self {
        self.insert(name, Section::U64(v));
        self
    }

    pub fn with_f64(mut self, name: &str, v: f64) -> Self {
        self.insert(name, Section::F64(v));
        self
    }

    pub fn with_json<T: Serialize>(mut self, name: &str, v: &T) -> Self {
        let text = serde_json::to_string(v).expect("in-memory values always serialize");
        self.insert(name, Section::Json(text));
        self
    }

    pub fn with_manifest(self, manifest: &LayoutManifest) -> Self {
        self.with_json(MANIFEST_SECTION, manifest)
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.section(name).is_some()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    fn require(&self, name: &str) -> Result<&Section, CheckpointError> {
        self.section(name).ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<ParamVector, CheckpointError> {
        match self.require(name)? {
            Section::Vector(v) => ParamVector::new(v.clone())
                .map_err(|source| CheckpointError::Values { name: name.to_string(), source }),
            other => Err(wrong_kind(name, other, "f32 vector")),
        }
    }

    /// Like [`Checkpoint::vector`], but a missing section yields `None`.
    pub fn optional_vector(&self, name: &str) -> Result<Option<ParamVector>, CheckpointError> {
        if self.contains(name) {
            self.vector(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64, CheckpointError> {
        match self.require(name)? {
            Section::U64(v) => Ok(*v),
            other => Err(wrong_kind(name, other, "u64")),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64, CheckpointError> {
        match self.require(name)? {
            Section::F64(v) => Ok(*v),
            other => Err(wrong_kind(name, other, "f64")),
        }
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T, CheckpointError> {
        match self.require(name)? {
            Section::Json(text) => serde_json::from_str(text)
                .map_err(|source| CheckpointError::Json { name: name.to_string(), source }),
            other => Err(wrong_kind(name, other, "json")),
        }
    }

    pub fn manifest(&self) -> Result<LayoutManifest, CheckpointError> {
        self.json(MANIFEST_SECTION)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            let name_len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Malformed(format!("section name too long: {name}")))?;
            let (kind, payload) = match section {
                Section::Vector(v) => {
                    check_finite(v).map_err(|source| CheckpointError::Values { name: name.clone(), source })?;
                    let mut bytes = Vec::with_capacity(v.len() * 4);
                    for x in v {
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                    (KIND_F32_VEC, bytes)
                }
                Section::U64(v) => (KIND_U64, v.to_le_bytes().to_vec()),
                Section::F64(v) => (KIND_F64, v.to_le_bytes().to_vec()),
                Section::Json(s) => (KIND_JSON, s.as_bytes().to_vec()),
            };
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        Ok(out)
    }

    /// Exact size of [`Checkpoint::to_bytes`] output.
    pub fn encoded_len(&self) -> usize {
        12 + self
            .sections
            .iter()
            .map(|(name, s)| {
                let payload = match s {
                    Section::Vector(v) => v.len() * 4,
                    Section::U64(_) | Section::F64(_) => 8,
                    Section::Json(t) => t.len(),
                };
                2 + name.len() + 1 + 8 + payload + 4
            })
            .sum::<usize>()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("section name: {e}")))?
                .to_string();
            let kind = r.take(1)?[0];
            let payload_len = usize::try_from(r.u64()?)
                .map_err(|_| CheckpointError::Malformed("payload length overflows usize".into()))?;
            let payload = r.take(payload_len)?;
            let stored = r.u32()?;
            let computed = crc32fast::hash(payload);
            if stored != computed {
                return Err(CheckpointError::Checksum { section: name, stored, computed });
            }
            let section = match kind {
                KIND_F32_VEC => {
                    if payload.len() % 4 != 0 {
                        return Err(CheckpointError::Malformed(format!(
                            "vector section {name} has {} bytes",
                            payload.len()
                        )));
                    }
                    Section::Vector(
                        payload
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                KIND_U64 | KIND_F64 => {
                    let raw: [u8; 8] = payload.try_into().map_err(|_| {
                        CheckpointError::Malformed(format!("scalar section {name} has {} bytes", payload.len()))
                    })?;
                    if kind == KIND_U64 {
                        Section::U64(u64::from_le_bytes(raw))
                    } else {
                        Section::F64(f64::from_le_bytes(raw))
                    }
                }
                KIND_JSON => Section::Json(
                    String::from_utf8(payload.to_vec())
                        .map_err(|e| CheckpointError::Malformed(format!("json section {name}: {e}")))?,
                ),
                other => return Err(CheckpointError::Malformed(format!("unknown section kind {other}"))),
            };
            if ckpt.contains(&name) {
                return Err(CheckpointError::Malformed(format!("duplicate section {name}")));
            }
            ckpt.sections.push((name, section));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after last section",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }
}

fn wrong_kind(name: &str, found: &Section, expected: &'static str) -> CheckpointError {
    CheckpointError::WrongKind { name: name.to_string(), found: found.kind_name(), expected }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.bytes.len())),
        }
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes `ckpt` to `path`, returning the byte length.
///
/// The bytes land in a sibling temp file that is synced and then renamed over
/// `path`, so readers never observe a partial checkpoint.
pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<u64, CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CheckpointError::Malformed(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(bytes.len() as u64)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut manifest = LayoutManifest::new();
        manifest.push("w", &[2, 2]);
        Checkpoint::new()
            .with_u64("round", 7)
            .with_vector("global", &ParamVector::new(vec![1.0, -2.5, 0.0, 3.25]).unwrap())
            .with_f64("eta", 0.1)
            .with_manifest(&manifest)
    }

    #[test]
    fn round_trip_in_memory_and_on_disk() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(bytes.len(), ckpt.encoded_len());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ckpt.fedp");
        let n = write_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(n as usize, bytes.len());
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        // Only the final file remains; the temp name was renamed away.
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn absent_optional_section_is_reflected_in_count() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.optional_vector("momentum").unwrap(), None);
        assert!(matches!(back.vector("momentum"), Err(CheckpointError::MissingSection(_))));
    }

    #[test]
    fn million_element_blob_size() {
        let n = 1_000_000usize;
        let mut manifest = LayoutManifest::new();
        manifest.push("params", &[n]);
        let v = ParamVector::zeros(n).unwrap();
        let ckpt = Checkpoint::new().with_vector("params", &v).with_manifest(&manifest);
        let manifest_json = serde_json::to_string(&manifest).unwrap();
        // header + vector section framing + payload + manifest section framing + json
        let expected = 12 + (2 + 6 + 1 + 8 + 4) + 4 * n + (2 + 8 + 1 + 8 + 4) + manifest_json.len();
        assert_eq!(ckpt.to_bytes().unwrap().len(), expected);
    }

    #[test]
    fn corrupted_payload_is_a_checksum_error() {
        let mut bytes = sample().to_bytes().unwrap();
        // First section: "round" → header(12) + name_len(2) + name(5) + kind(1) + len(8) = payload at 28.
        bytes[28] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum { section, .. }) if section == "round"));
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::UnsupportedVersion(9))));
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn non_finite_vectors_are_refused_on_write() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("bad", Section::Vector(vec![1.0, f32::NAN]));
        assert!(matches!(ckpt.to_bytes(), Err(CheckpointError::Values { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn vectors_round_trip_bitwise(bits in prop::collection::vec(any::<u32>(), 1..200)) {
                let data: Vec<f32> = bits
                    .into_iter()
                    .map(f32::from_bits)
                    .map(|x| if x.is_finite() { x } else { 0.5 })
                    .collect();
                let v = ParamVector::new(data).unwrap();
                let bytes = Checkpoint::new().with_vector("v", &v).to_bytes().unwrap();
                let back = Checkpoint::from_bytes(&bytes).unwrap().vector("v").unwrap();
                prop_assert!(back.bit_eq(&v));
            }
        }
    }
}
