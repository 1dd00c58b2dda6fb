//! Persistent memory bank for encoded and generated latents.
//!
//! Layout: `<root>/<video_id>/<role>-<fingerprint>.lat`. Entries are written to
//! a temporary file in the same directory and renamed into place, so readers
//! never observe a partially written entry.
//!
//! File format (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "VAPLAT01"
//! shape     4 x u32  L, C, H, W
//! video_id  u16 length + UTF-8
//! encoder   u16 length + UTF-8 (encoder fingerprint)
//! sources   L x i64  real frame index, -1 for generated
//! data      L*C*H*W x f32
//! crc32     u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;
use tracing::warn;

use crate::latents::{short_hash, LatentFrame, LatentSequence, LatentShape, LatentSource};

pub const BANK_DIR_ENV: &str = "VAP_BANK_DIR";
const MAGIC: &[u8; 8] = b"VAPLAT01";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("corrupt bank entry {path}: {reason}")]
    CorruptEntry { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Real,
    Generated,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Real => "real",
            Role::Generated => "generated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub video_id: String,
    pub encoder_fingerprint: String,
    pub role: Role,
    /// Required for generated latents: identifies predictor config and conditioning.
    pub predictor_fingerprint: Option<String>,
}

impl CacheKey {
    pub fn real(video_id: &str, encoder_fingerprint: &str) -> Self {
        Self {
            video_id: video_id.into(),
            encoder_fingerprint: encoder_fingerprint.into(),
            role: Role::Real,
            predictor_fingerprint: None,
        }
    }

    pub fn generated(
        video_id: &str,
        encoder_fingerprint: &str,
        predictor_fingerprint: &str,
    ) -> Self {
        Self {
            video_id: video_id.into(),
            encoder_fingerprint: encoder_fingerprint.into(),
            role: Role::Generated,
            predictor_fingerprint: Some(predictor_fingerprint.into()),
        }
    }

    fn fingerprint(&self) -> String {
        match &self.predictor_fingerprint {
            None => self.encoder_fingerprint.clone(),
            Some(p) => short_hash(format!("{}|{}", self.encoder_fingerprint, p).as_bytes()),
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BankStats {
    pub videos: usize,
    pub real_entries: usize,
    pub generated_entries: usize,
    pub bytes: u64,
}

#[derive(Debug)]
pub struct LatentBank {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt: AtomicU64,
}

impl LatentBank {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
        }
    }

    /// Bank rooted at `$VAP_BANK_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(BANK_DIR_ENV).map(Self::new)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(sanitize(&key.video_id)).join(format!(
            "{}-{}.lat",
            key.role.as_str(),
            key.fingerprint()
        ))
    }

    pub fn put(&self, key: &CacheKey, seq: &LatentSequence) -> Result<(), BankError> {
        let path = self.path_for(key);
        let dir = path.parent().expect("entry paths always have a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&serialize(seq))?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| BankError::Io(e.error))?;
        Ok(())
    }

    /// Reads an entry, surfacing corruption as an error.
    pub fn read_entry(&self, key: &CacheKey) -> Result<Option<LatentSequence>, BankError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        deserialize(&bytes)
            .map(Some)
            .map_err(|reason| BankError::CorruptEntry { path, reason })
    }

    /// Cache lookup. A corrupt entry is logged and reported as a miss.
    pub fn get(&self, key: &CacheKey) -> Option<LatentSequence> {
        match self.read_entry(key) {
            Ok(Some(seq)) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(seq)
            }
            Ok(None) => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
            Err(e) => {
                warn!(error = %e, "treating bank entry as a miss");
                self.corrupt.fetch_add(1, Ordering::Relaxed);
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn corrupt_reads(&self) -> u64 {
        self.corrupt.load(Ordering::Relaxed)
    }

    pub fn stat(&self) -> Result<BankStats, BankError> {
        let mut stats = BankStats::default();
        if !self.root.exists() {
            return Ok(stats);
        }
        for video in fs::read_dir(&self.root)? {
            let video = video?;
            if !video.file_type()?.is_dir() {
                continue;
            }
            stats.videos += 1;
            for entry in fs::read_dir(video.path())? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if !name.ends_with(".lat") {
                    continue;
                }
                stats.bytes += entry.metadata()?.len();
                if name.starts_with("real-") {
                    stats.real_entries += 1;
                } else if name.starts_with("generated-") {
                    stats.generated_entries += 1;
                }
            }
        }
        Ok(stats)
    }

    /// Removes every entry under the root.
    pub fn clear(&self) -> Result<(), BankError> {
        if self.root.exists() {
            fs::remove_dir_all(&self.root)?;
        }
        Ok(())
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let len = u16::try_from(bytes.len()).expect("identifiers are shorter than 64 KiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn serialize(seq: &LatentSequence) -> Vec<u8> {
    let shape = seq.shape().unwrap_or(LatentShape::new(0, 0, 0));
    let mut out = Vec::with_capacity(64 + seq.len() * (8 + shape.len() * 4));
    out.extend_from_slice(MAGIC);
    for dim in [seq.len(), shape.channels, shape.height, shape.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    push_str(&mut out, &seq.video_id);
    push_str(&mut out, &seq.encoder_fingerprint);
    for l in seq.latents() {
        let src: i64 = match l.source {
            LatentSource::Real(i) => i as i64,
            LatentSource::Generated => -1,
        };
        out.extend_from_slice(&src.to_le_bytes());
    }
    for l in seq.latents() {
        for v in l.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        let slice = self.buf.get(self.pos..end).ok_or("truncated entry")?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<LatentSequence, String> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err("truncated entry".into());
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        ));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let len = r.u32()? as usize;
    let shape = LatentShape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let video_id = r.string()?;
    let encoder = r.string()?;
    let mut sources = Vec::with_capacity(len);
    for _ in 0..len {
        let src = i64::from_le_bytes(r.take(8)?.try_into().unwrap());
        sources.push(if src < 0 {
            LatentSource::Generated
        } else {
            LatentSource::Real(src as usize)
        });
    }
    let mut latents = Vec::with_capacity(len);
    for source in sources {
        let raw = r.take(shape.len() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        latents.push(LatentFrame::new(shape, data, source).map_err(|e| e.to_string())?);
    }
    if r.pos != body.len() {
        return Err("trailing bytes".into());
    }
    LatentSequence::new(video_id, encoder, latents).map_err(|e| e.to_string())
}
