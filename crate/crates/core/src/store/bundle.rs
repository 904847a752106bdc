//! Verifier bundles: the requested chunks plus the neighbor strings needed
//! to recompute their end-of-chunk strings, and nothing else.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic "SSBUNDLE" | version u16 | kind u8 (1 auditor, 2 user)
//! start u64 | end u64 | before boundary | after boundary
//! known-digest count u32 | digests (32 each)
//! entry count u32 | entries: index u64 | tag u8 (0 gap, 1 payload) | [len u32 | bytes]
//! boundary: tag u8 then 0 unavailable | 1 seed: g(32) sig(64)
//!           | 2 neighbor: g(32) | 3 terminal: last u64, g(32), sig(64)
//! ```
//!
//! Auditor payloads are whole chunk files; user payloads are user views.

use std::io::{self, Read, Write};

use crate::crypto::{Digest, RandomString, Signature};
use crate::enclave::{GenesisAnchor, TerminalAnchor};

pub const BUNDLE_MAGIC: &[u8; 8] = b"SSBUNDLE";
const BUNDLE_VERSION: u16 = 1;
const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BundleKind {
    Auditor,
    User,
}

/// The string on the far side of a requested range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Seed(GenesisAnchor),
    Neighbor(RandomString),
    Terminal(TerminalAnchor),
    /// Neighbor missing, or the stream is not finalized yet.
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleEntry {
    pub index: u64,
    /// `None` marks a chunk the store could not produce.
    pub payload: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleHeader {
    pub kind: BundleKind,
    pub start: u64,
    pub end: u64,
    pub before: Boundary,
    pub after: Boundary,
    pub known_digests: Vec<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifierBundle {
    pub header: BundleHeader,
    pub entries: Vec<BundleEntry>,
}

impl VerifierBundle {
    /// Neighbor strings carried: the two boundaries plus one per payload.
    pub fn string_count(&self) -> usize {
        2 + self.entries.iter().filter(|e| e.payload.is_some()).count()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write_header(w, &self.header, self.entries.len())?;
        for e in &self.entries {
            write_entry(w, e)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> io::Result<Self> {
        let mut rd = BundleReader::new(bytes)?;
        let mut entries = Vec::with_capacity(rd.remaining().min(4096));
        while let Some(e) = rd.next_entry()? {
            entries.push(e);
        }
        if !rd.inner.is_empty() {
            return Err(invalid("trailing bytes after bundle"));
        }
        Ok(Self {
            header: rd.header,
            entries,
        })
    }
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn write_boundary<W: Write>(w: &mut W, b: &Boundary) -> io::Result<()> {
    match b {
        Boundary::Unavailable => w.write_all(&[0]),
        Boundary::Seed(a) => {
            w.write_all(&[1])?;
            w.write_all(a.seed.as_bytes())?;
            w.write_all(a.sig.as_bytes())
        }
        Boundary::Neighbor(g) => {
            w.write_all(&[2])?;
            w.write_all(g.as_bytes())
        }
        Boundary::Terminal(t) => {
            w.write_all(&[3])?;
            w.write_all(&t.last_index.to_le_bytes())?;
            w.write_all(t.terminal.as_bytes())?;
            w.write_all(t.sig.as_bytes())
        }
    }
}

pub fn write_header<W: Write>(w: &mut W, h: &BundleHeader, entries: usize) -> io::Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    w.write_all(&[match h.kind {
        BundleKind::Auditor => 1,
        BundleKind::User => 2,
    }])?;
    w.write_all(&h.start.to_le_bytes())?;
    w.write_all(&h.end.to_le_bytes())?;
    write_boundary(w, &h.before)?;
    write_boundary(w, &h.after)?;
    w.write_all(&(h.known_digests.len() as u32).to_le_bytes())?;
    for d in &h.known_digests {
        w.write_all(d.as_bytes())?;
    }
    w.write_all(&(entries as u32).to_le_bytes())
}

pub fn write_entry<W: Write>(w: &mut W, e: &BundleEntry) -> io::Result<()> {
    w.write_all(&e.index.to_le_bytes())?;
    match &e.payload {
        None => w.write_all(&[0]),
        Some(p) => {
            w.write_all(&[1])?;
            w.write_all(&(p.len() as u32).to_le_bytes())?;
            w.write_all(p)
        }
    }
}

fn read_arr<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_boundary<R: Read>(r: &mut R) -> io::Result<Boundary> {
    let [tag] = read_arr::<_, 1>(r)?;
    Ok(match tag {
        0 => Boundary::Unavailable,
        1 => Boundary::Seed(GenesisAnchor {
            seed: RandomString(read_arr(r)?),
            sig: Signature(read_arr(r)?),
        }),
        2 => Boundary::Neighbor(RandomString(read_arr(r)?)),
        3 => Boundary::Terminal(TerminalAnchor {
            last_index: u64::from_le_bytes(read_arr(r)?),
            terminal: RandomString(read_arr(r)?),
            sig: Signature(read_arr(r)?),
        }),
        t => return Err(invalid(format!("boundary tag {t}"))),
    })
}

/// Incremental bundle reader holding one entry at a time.
pub struct BundleReader<R> {
    inner: R,
    pub header: BundleHeader,
    remaining: usize,
}

impl<R: Read> BundleReader<R> {
    pub fn new(mut inner: R) -> io::Result<Self> {
        if &read_arr::<_, 8>(&mut inner)? != BUNDLE_MAGIC {
            return Err(invalid("not a bundle"));
        }
        let v = u16::from_le_bytes(read_arr(&mut inner)?);
        if v != BUNDLE_VERSION {
            return Err(invalid(format!("bundle version {v}")));
        }
        let kind = match read_arr::<_, 1>(&mut inner)?[0] {
            1 => BundleKind::Auditor,
            2 => BundleKind::User,
            k => return Err(invalid(format!("bundle kind {k}"))),
        };
        let start = u64::from_le_bytes(read_arr(&mut inner)?);
        let end = u64::from_le_bytes(read_arr(&mut inner)?);
        let before = read_boundary(&mut inner)?;
        let after = read_boundary(&mut inner)?;
        let n = u32::from_le_bytes(read_arr(&mut inner)?) as usize;
        let mut known_digests = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            known_digests.push(Digest(read_arr(&mut inner)?));
        }
        let remaining = u32::from_le_bytes(read_arr(&mut inner)?) as usize;
        Ok(Self {
            inner,
            header: BundleHeader {
                kind,
                start,
                end,
                before,
                after,
                known_digests,
            },
            remaining,
        })
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn next_entry(&mut self) -> io::Result<Option<BundleEntry>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        self.remaining -= 1;
        let index = u64::from_le_bytes(read_arr(&mut self.inner)?);
        let payload = match read_arr::<_, 1>(&mut self.inner)?[0] {
            0 => None,
            1 => {
                let len = u32::from_le_bytes(read_arr(&mut self.inner)?) as usize;
                if len > MAX_PAYLOAD {
                    return Err(invalid(format!("payload of {len} bytes")));
                }
                let mut p = vec![0u8; len];
                self.inner.read_exact(&mut p)?;
                Some(p)
            }
            t => return Err(invalid(format!("entry tag {t}"))),
        };
        Ok(Some(BundleEntry { index, payload }))
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}
