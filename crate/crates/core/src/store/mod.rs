//! Untrusted service-provider storage.
//!
//! Directory layout under the store root:
//!
//! ```text
//! MANIFEST            append-only, one `chunk index=.. records=.. active=.. bytes=.. g=..` line per chunk
//! ANCHORS             enclave public key, genesis anchor, terminal anchor (text)
//! chunks/<index>.chunk
//! notices.log         u32 LE length-prefixed NoticeMessage records
//! acks.log            u32 LE length-prefixed Acknowledgment records
//! rules-archive.log   u32 LE length-prefixed expired-rule records
//! ```
//!
//! Chunk files are written to a temporary name and renamed, so readers never
//! see a partial chunk. Nothing here is trusted: verifiers check everything
//! the store serves.

pub mod bundle;
pub mod format;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::crypto::{self, CryptoError, Digest, PublicKey, RandomString, Signature};
use crate::enclave::{ExpiredRule, GenesisAnchor, SealedChunk, TerminalAnchor};
use crate::model::{put_lp, DeviceId, Timestamp};
use crate::notify::{Acknowledgment, NoticeMessage, NotifyError};
use crate::rules::{Action, RuleSet};

pub use bundle::{Boundary, BundleEntry, BundleHeader, BundleKind, BundleReader, VerifierBundle};
pub use format::{ChunkManifest, FormatError};

const MANIFEST_HEADER: &str = "# sensorseal manifest v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a store: {0}")]
    NotAStore(PathBuf),
    #[error("chunk {0} already stored")]
    Duplicate(u64),
    #[error("bad range {0}..{1}")]
    BadRange(u64, u64),
    #[error("requester not authorized")]
    Unauthorized,
    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Notify(#[from] NotifyError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn corrupt(what: &'static str, detail: impl ToString) -> StoreError {
    StoreError::Corrupt {
        what,
        detail: detail.to_string(),
    }
}

/// One MANIFEST line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestLine {
    pub index: u64,
    pub records: usize,
    pub active: usize,
    pub bytes: usize,
    pub g_self: RandomString,
}

impl ManifestLine {
    fn render(&self) -> String {
        format!(
            "chunk index={} records={} active={} bytes={} g={}",
            self.index,
            self.records,
            self.active,
            self.bytes,
            self.g_self.to_hex()
        )
    }

    fn parse(line: &str) -> Result<Self, StoreError> {
        let mut it = line.split_whitespace();
        if it.next() != Some("chunk") {
            return Err(corrupt("manifest", line));
        }
        let mut kv = HashMap::new();
        for tok in it {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| corrupt("manifest", line))?;
            kv.insert(k, v);
        }
        let num = |k: &str| -> Result<u64, StoreError> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt("manifest", line))
        };
        Ok(Self {
            index: num("index")?,
            records: num("records")? as usize,
            active: num("active")? as usize,
            bytes: num("bytes")? as usize,
            g_self: RandomString::from_hex(kv.get("g").ok_or_else(|| corrupt("manifest", line))?)?,
        })
    }
}

/// Public values a verifier needs besides chunks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Anchors {
    pub enclave_key: Option<PublicKey>,
    pub genesis: Option<GenesisAnchor>,
    pub terminal: Option<TerminalAnchor>,
}

/// A user's request for a bundle.
#[derive(Clone, Debug)]
pub struct UserRequest {
    pub device: DeviceId,
    pub token: [u8; 32],
}

/// Decides whether a user request may be served.
pub trait VerifierAuth {
    fn authorize(&self, request: &UserRequest) -> bool;
}

/// Default hook: each device holds a key shared with the SP and presents
/// `SHA-256("sensorseal.psk" || key || LP(device))`.
#[derive(Clone, Debug, Default)]
pub struct PreSharedKeyAuth {
    keys: HashMap<DeviceId, [u8; 32]>,
}

impl PreSharedKeyAuth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enroll(&mut self, device: DeviceId, key: [u8; 32]) {
        self.keys.insert(device, key);
    }

    pub fn token_for(key: &[u8; 32], device: &DeviceId) -> [u8; 32] {
        let mut lp = Vec::new();
        put_lp(&mut lp, device.as_bytes());
        crypto::hash_parts(&[b"sensorseal.psk", key, &lp]).0
    }
}

impl VerifierAuth for PreSharedKeyAuth {
    fn authorize(&self, request: &UserRequest) -> bool {
        self.keys.get(&request.device).is_some_and(|k| {
            let want = Self::token_for(k, &request.device);
            // Fold differences so the comparison does not exit early.
            want.iter()
                .zip(request.token.iter())
                .fold(0u8, |acc, (a, b)| acc | (a ^ b))
                == 0
        })
    }
}

pub struct Store {
    root: PathBuf,
}

fn append_record(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut rec = Vec::with_capacity(4 + bytes.len());
    rec.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    rec.extend_from_slice(bytes);
    f.write_all(&rec)
}

fn read_records(path: &Path) -> Result<Vec<Vec<u8>>, StoreError> {
    let data = match fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut rest = &data[..];
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(corrupt("log", path.display()));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() - 4 < len {
            return Err(corrupt("log", path.display()));
        }
        out.push(rest[4..4 + len].to_vec());
        rest = &rest[4 + len..];
    }
    Ok(out)
}

impl Store {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("chunks"))?;
        let manifest = root.join("MANIFEST");
        if !manifest.exists() {
            fs::write(&manifest, format!("{MANIFEST_HEADER}\n"))?;
        }
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        if !root.join("MANIFEST").is_file() {
            return Err(StoreError::NotAStore(root));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn chunk_path(&self, index: u64) -> PathBuf {
        self.root.join("chunks").join(format!("{index:08}.chunk"))
    }

    pub fn put_sealed_chunk(&self, sc: &SealedChunk) -> Result<ChunkManifest, StoreError> {
        let path = self.chunk_path(sc.index);
        if path.exists() {
            return Err(StoreError::Duplicate(sc.index));
        }
        let (bytes, manifest) = format::encode_chunk(sc);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &path)?;
        let line = ManifestLine {
            index: sc.index,
            records: manifest.record_count,
            active: manifest.active_count,
            bytes: bytes.len(),
            g_self: manifest.g_self,
        };
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.root.join("MANIFEST"))?;
        writeln!(f, "{}", line.render())?;
        Ok(manifest)
    }

    pub fn read_chunk_bytes(&self, index: u64) -> Result<Option<Vec<u8>>, StoreError> {
        match fs::read(self.chunk_path(index)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get_chunk(&self, index: u64) -> Result<Option<SealedChunk>, StoreError> {
        match self.read_chunk_bytes(index)? {
            None => Ok(None),
            Some(b) => Ok(Some(format::decode_chunk(&b)?.0)),
        }
    }

    /// Overwrite a stored chunk file in place. Used by tamper tooling.
    pub fn write_chunk_bytes(&self, index: u64, bytes: &[u8]) -> Result<(), StoreError> {
        Ok(fs::write(self.chunk_path(index), bytes)?)
    }

    /// Remove a chunk file and its manifest line.
    pub fn remove_chunk(&self, index: u64) -> Result<bool, StoreError> {
        let path = self.chunk_path(index);
        let existed = path.exists();
        if existed {
            fs::remove_file(path)?;
        }
        let kept: Vec<String> = self
            .manifest_text()?
            .lines()
            .filter(|l| ManifestLine::parse(l).map_or(true, |m| m.index != index))
            .map(str::to_string)
            .collect();
        fs::write(self.root.join("MANIFEST"), kept.join("\n") + "\n")?;
        Ok(existed)
    }

    fn manifest_text(&self) -> Result<String, StoreError> {
        Ok(fs::read_to_string(self.root.join("MANIFEST"))?)
    }

    pub fn manifest(&self) -> Result<Vec<ManifestLine>, StoreError> {
        self.manifest_text()?
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(ManifestLine::parse)
            .collect()
    }

    /// Indices listed in the manifest, ascending.
    pub fn indices(&self) -> Result<Vec<u64>, StoreError> {
        let mut v: Vec<u64> = self.manifest()?.iter().map(|m| m.index).collect();
        v.sort_unstable();
        Ok(v)
    }

    pub fn anchors(&self) -> Result<Anchors, StoreError> {
        let text = match fs::read_to_string(self.root.join("ANCHORS")) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Anchors::default()),
            Err(e) => return Err(e.into()),
        };
        let mut a = Anchors::default();
        for line in text.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let sig = |s: &str| -> Result<Signature, StoreError> {
                let mut b = [0u8; 64];
                hex::decode_to_slice(s, &mut b).map_err(|e| corrupt("anchors", e))?;
                Ok(Signature(b))
            };
            match parts.as_slice() {
                ["enclave-key", k] => a.enclave_key = Some(PublicKey::from_hex(k)?),
                ["genesis", g, s] => {
                    a.genesis = Some(GenesisAnchor {
                        seed: RandomString::from_hex(g)?,
                        sig: sig(s)?,
                    })
                }
                ["terminal", i, g, s] => {
                    a.terminal = Some(TerminalAnchor {
                        last_index: i.parse().map_err(|e| corrupt("anchors", e))?,
                        terminal: RandomString::from_hex(g)?,
                        sig: sig(s)?,
                    })
                }
                [] => {}
                _ => return Err(corrupt("anchors", line)),
            }
        }
        Ok(a)
    }

    pub fn put_anchors(&self, a: &Anchors) -> Result<(), StoreError> {
        let mut text = String::new();
        if let Some(k) = &a.enclave_key {
            text.push_str(&format!("enclave-key {}\n", k.to_hex()));
        }
        if let Some(g) = &a.genesis {
            text.push_str(&format!(
                "genesis {} {}\n",
                g.seed.to_hex(),
                hex::encode(g.sig.as_bytes())
            ));
        }
        if let Some(t) = &a.terminal {
            text.push_str(&format!(
                "terminal {} {} {}\n",
                t.last_index,
                t.terminal.to_hex(),
                hex::encode(t.sig.as_bytes())
            ));
        }
        let path = self.root.join("ANCHORS");
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        Ok(fs::rename(tmp, path)?)
    }

    pub fn put_notice(&self, n: &NoticeMessage) -> Result<(), StoreError> {
        Ok(append_record(&self.root.join("notices.log"), &n.encode())?)
    }

    pub fn notices(&self) -> Result<Vec<NoticeMessage>, StoreError> {
        read_records(&self.root.join("notices.log"))?
            .iter()
            .map(|b| Ok(NoticeMessage::decode(b)?))
            .collect()
    }

    pub fn put_ack(&self, a: &Acknowledgment) -> Result<(), StoreError> {
        Ok(append_record(&self.root.join("acks.log"), &a.encode())?)
    }

    pub fn acks(&self) -> Result<Vec<Acknowledgment>, StoreError> {
        read_records(&self.root.join("acks.log"))?
            .iter()
            .map(|b| Ok(Acknowledgment::decode(b)?))
            .collect()
    }

    /// Archive a rule evicted on expiry: `evicted_at u64 BE || digest || rule text`.
    pub fn put_expired(&self, e: &ExpiredRule) -> Result<(), StoreError> {
        let text = RuleSet::new(vec![e.rule.clone()], Action::OptOut)
            .map_err(|err| corrupt("expired rule", err))?
            .to_text();
        let line = text.lines().nth(1).unwrap_or_default();
        let mut rec = Vec::new();
        rec.extend_from_slice(&e.evicted_at.to_be_bytes());
        rec.extend_from_slice(e.ruleset_digest.as_bytes());
        rec.extend_from_slice(line.as_bytes());
        Ok(append_record(&self.root.join("rules-archive.log"), &rec)?)
    }

    pub fn expired_rules(&self) -> Result<Vec<ExpiredRule>, StoreError> {
        read_records(&self.root.join("rules-archive.log"))?
            .iter()
            .map(|b| {
                if b.len() < 40 {
                    return Err(corrupt("rules archive", "short record"));
                }
                let at = Timestamp::new(u64::from_be_bytes(b[..8].try_into().unwrap()))
                    .map_err(|e| corrupt("rules archive", e))?;
                let digest = Digest(b[8..40].try_into().unwrap());
                let text = format!("default opt-out\n{}\n", String::from_utf8_lossy(&b[40..]));
                let rs = RuleSet::parse(&text).map_err(|e| corrupt("rules archive", e))?;
                Ok(ExpiredRule {
                    evicted_at: at,
                    ruleset_digest: digest,
                    rule: rs.rules()[0].clone(),
                })
            })
            .collect()
    }

    /// Ruleset digests of every stored notice.
    pub fn known_digests(&self) -> Result<Vec<Digest>, StoreError> {
        let mut v: Vec<Digest> = self.notices()?.iter().map(|n| n.ruleset_digest).collect();
        v.sort();
        v.dedup();
        Ok(v)
    }

    fn neighbor_string(
        &self,
        index: u64,
        kind: BundleKind,
    ) -> Result<Option<RandomString>, StoreError> {
        let Some(bytes) = self.read_chunk_bytes(index)? else {
            return Ok(None);
        };
        let Ok((_, spans)) = format::scan_sections(&bytes) else {
            return Ok(None);
        };
        let span = match kind {
            BundleKind::Auditor => spans[2],
            BundleKind::User => spans[3],
        };
        if span.len < 32 {
            return Ok(None);
        }
        Ok(Some(RandomString(
            bytes[span.offset..span.offset + 32].try_into().unwrap(),
        )))
    }

    fn boundaries(
        &self,
        range: &RangeInclusive<u64>,
        kind: BundleKind,
    ) -> Result<(Boundary, Boundary), StoreError> {
        let anchors = self.anchors()?;
        let (start, end) = (*range.start(), *range.end());
        let before = if start == 1 {
            anchors
                .genesis
                .map_or(Boundary::Unavailable, Boundary::Seed)
        } else {
            self.neighbor_string(start - 1, kind)?
                .map_or(Boundary::Unavailable, Boundary::Neighbor)
        };
        let after = match self.neighbor_string(end + 1, kind)? {
            Some(g) => Boundary::Neighbor(g),
            None => match anchors.terminal {
                Some(t) if t.last_index == end => Boundary::Terminal(t),
                _ => Boundary::Unavailable,
            },
        };
        Ok((before, after))
    }

    fn check_range(range: &RangeInclusive<u64>) -> Result<(), StoreError> {
        if *range.start() == 0 || range.start() > range.end() {
            return Err(StoreError::BadRange(*range.start(), *range.end()));
        }
        Ok(())
    }

    /// Full chunks in `range` plus boundary strings. Missing chunks become
    /// gap entries.
    pub fn get_auditor_bundle(
        &self,
        range: RangeInclusive<u64>,
    ) -> Result<VerifierBundle, StoreError> {
        Self::check_range(&range)?;
        let (before, after) = self.boundaries(&range, BundleKind::Auditor)?;
        let entries = range
            .clone()
            .map(|index| {
                Ok(BundleEntry {
                    index,
                    payload: self.read_chunk_bytes(index)?,
                })
            })
            .collect::<Result<_, StoreError>>()?;
        Ok(VerifierBundle {
            header: BundleHeader {
                kind: BundleKind::Auditor,
                start: *range.start(),
                end: *range.end(),
                before,
                after,
                known_digests: self.known_digests()?,
            },
            entries,
        })
    }

    /// Redacted records and PU for each chunk in `range`, for an
    /// authorized user.
    pub fn get_user_bundle(
        &self,
        range: RangeInclusive<u64>,
        request: &UserRequest,
        auth: &dyn VerifierAuth,
    ) -> Result<VerifierBundle, StoreError> {
        if !auth.authorize(request) {
            log::warn!("refused user bundle for unauthenticated requester");
            return Err(StoreError::Unauthorized);
        }
        Self::check_range(&range)?;
        let (before, after) = self.boundaries(&range, BundleKind::User)?;
        let entries = range
            .clone()
            .map(|index| {
                let payload = self.read_chunk_bytes(index)?.map(|b| {
                    // An unscannable file is served as an empty payload so
                    // the verifier reports it rather than the store hiding it.
                    format::user_view_bytes(&b).unwrap_or_default()
                });
                Ok(BundleEntry { index, payload })
            })
            .collect::<Result<_, StoreError>>()?;
        Ok(VerifierBundle {
            header: BundleHeader {
                kind: BundleKind::User,
                start: *range.start(),
                end: *range.end(),
                before,
                after,
                known_digests: Vec::new(),
            },
            entries,
        })
    }

    /// Total bytes stored, by category: (chunk files, manifest and logs).
    pub fn disk_usage(&self) -> Result<(u64, u64), StoreError> {
        let mut chunks = 0;
        for e in fs::read_dir(self.root.join("chunks"))? {
            chunks += e?.metadata()?.len();
        }
        let mut other = 0;
        for e in fs::read_dir(&self.root)? {
            let e = e?;
            if e.file_type()?.is_file() {
                other += e.metadata()?.len();
            }
        }
        Ok((chunks, other))
    }

    /// Every byte the store holds, for privacy scans.
    pub fn all_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        for dir in [self.root.clone(), self.root.join("chunks")] {
            let mut names: Vec<PathBuf> = fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            names.sort();
            for p in names {
                if p.is_file() {
                    out.extend(fs::read(p)?);
                }
            }
        }
        Ok(out)
    }
}

/// Recursively copy a store directory.
pub fn copy_store(from: &Path, to: &Path) -> io::Result<()> {
    fs::create_dir_all(to)?;
    for e in fs::read_dir(from)? {
        let e = e?;
        let dst = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_store(&e.path(), &dst)?;
        } else {
            fs::copy(e.path(), dst)?;
        }
    }
    Ok(())
}
