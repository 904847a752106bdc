//! Binary chunk file format, version 1.
//!
//! ```text
//! 0   magic      8   "SSCHUNK\0"
//! 8   version    2   u16 LE = 1
//! 10  index      8   u64 LE
//! 18  sections, in this order, each `tag u8 || len u32 LE || body`:
//!     1 RECORDS  count u32 LE, then per reading in sealing order:
//!                o_i(32) || LP(sensor) || state(1) || time(u64 BE)
//!     2 ACTIVE   count u32 LE, then per Active reading in order:
//!                canonical encoding || params_len u32 LE || params
//!     3 PI       g_self(32) || sig(64)
//!     4 PU       g_self(32) || sig(64)
//!     5 RULESET  flag(1: 0 none, 1 some) || digest(32, zero when none)
//! ```
//!
//! Decoding is strict: unknown tags, reordered sections, count mismatches,
//! nonzero padding and trailing bytes are all errors. User views carry only
//! `index u64 LE || RECORDS || PU` with the same section encoding.

use std::fmt;

use crate::chain::UserRecord;
use crate::crypto::{Digest, RandomString, Signature};
use crate::enclave::{ProofForUser, ProofOfIntegrity, SealedChunk};
use crate::model::{
    canonical_decode_prefix, write_canonical, Cursor, SensorState, StatefulReading,
};

pub const CHUNK_MAGIC: &[u8; 8] = b"SSCHUNK\0";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8 + 2 + 8;
pub const SECTION_HEADER_LEN: usize = 1 + 4;
pub const PROOF_LEN: usize = 32 + 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Section {
    Records = 1,
    Active = 2,
    Pi = 3,
    Pu = 4,
    Ruleset = 5,
}

const ORDER: [Section; 5] = [
    Section::Records,
    Section::Active,
    Section::Pi,
    Section::Pu,
    Section::Ruleset,
];

/// Where decoding stopped. `record` is the sealing-order position of the
/// reading being parsed, when the failure can be pinned to one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub record: Option<usize>,
    pub reason: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.offset, self.reason)?;
        if let Some(r) = self.record {
            write!(f, " (record {r})")?;
        }
        Ok(())
    }
}

impl std::error::Error for FormatError {}

fn err(offset: usize, record: Option<usize>, reason: impl Into<String>) -> FormatError {
    FormatError {
        offset,
        record,
        reason: reason.into(),
    }
}

/// Byte span of one section body within a chunk file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// Section layout and counts of one chunk file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkManifest {
    pub index: u64,
    pub records: Span,
    pub active: Span,
    pub pi: Span,
    pub pu: Span,
    pub ruleset: Span,
    pub record_count: usize,
    pub active_count: usize,
    pub g_self: RandomString,
    /// Spans of each record within the file, in sealing order.
    pub record_spans: Vec<Span>,
    /// Spans of each Active entry, in order.
    pub active_spans: Vec<Span>,
    pub total_len: usize,
}

fn put_section(out: &mut Vec<u8>, tag: Section, body: impl FnOnce(&mut Vec<u8>)) -> Span {
    out.push(tag as u8);
    let len_at = out.len();
    out.extend_from_slice(&[0; 4]);
    let start = out.len();
    body(out);
    let len = out.len() - start;
    out[len_at..start].copy_from_slice(&(len as u32).to_le_bytes());
    Span { offset: start, len }
}

fn put_proof(out: &mut Vec<u8>, g: &RandomString, sig: &Signature) {
    out.extend_from_slice(g.as_bytes());
    out.extend_from_slice(sig.as_bytes());
}

pub fn encode_chunk(sc: &SealedChunk) -> (Vec<u8>, ChunkManifest) {
    let mut out = Vec::with_capacity(HEADER_LEN + 64 * sc.records.len() + 128 * sc.active.len());
    out.extend_from_slice(CHUNK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&sc.index.to_le_bytes());
    let mut record_spans = Vec::with_capacity(sc.records.len());
    let records = put_section(&mut out, Section::Records, |o| {
        o.extend_from_slice(&(sc.records.len() as u32).to_le_bytes());
        for r in &sc.records {
            let s = o.len();
            r.encode_into(o);
            record_spans.push(Span {
                offset: s,
                len: o.len() - s,
            });
        }
    });
    let mut active_spans = Vec::with_capacity(sc.active.len());
    let active = put_section(&mut out, Section::Active, |o| {
        o.extend_from_slice(&(sc.active.len() as u32).to_le_bytes());
        for r in &sc.active {
            let s = o.len();
            write_canonical(o, r);
            o.extend_from_slice(&(r.reading.params.len() as u32).to_le_bytes());
            o.extend_from_slice(&r.reading.params);
            active_spans.push(Span {
                offset: s,
                len: o.len() - s,
            });
        }
    });
    let pi = put_section(&mut out, Section::Pi, |o| {
        put_proof(o, &sc.pi.g_self, &sc.pi.sig)
    });
    let pu = put_section(&mut out, Section::Pu, |o| {
        put_proof(o, &sc.pu.g_self, &sc.pu.sig)
    });
    let ruleset = put_section(&mut out, Section::Ruleset, |o| match sc.ruleset_digest {
        None => {
            o.push(0);
            o.extend_from_slice(&[0; 32]);
        }
        Some(d) => {
            o.push(1);
            o.extend_from_slice(d.as_bytes());
        }
    });
    let manifest = ChunkManifest {
        index: sc.index,
        records,
        active,
        pi,
        pu,
        ruleset,
        record_count: sc.records.len(),
        active_count: sc.active.len(),
        g_self: sc.g_self(),
        record_spans,
        active_spans,
        total_len: out.len(),
    };
    (out, manifest)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(err(self.pos, None, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn section(&mut self, want: Section) -> Result<Span, FormatError> {
        let at = self.pos;
        let tag = self.take(1, "section tag")?[0];
        if tag != want as u8 {
            return Err(err(
                at,
                None,
                format!("expected section {want:?}, found tag {tag}"),
            ));
        }
        let len = self.u32_le("section length")? as usize;
        let offset = self.pos;
        self.take(len, "section body")?;
        Ok(Span { offset, len })
    }
}

/// Locate the header and the five section bodies without parsing them.
pub fn scan_sections(bytes: &[u8]) -> Result<(u64, [Span; 5]), FormatError> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(8, "magic")? != CHUNK_MAGIC {
        return Err(err(0, None, "bad magic"));
    }
    let v = u16::from_le_bytes(rd.take(2, "version")?.try_into().unwrap());
    if v != FORMAT_VERSION {
        return Err(err(8, None, format!("unsupported version {v}")));
    }
    let index = u64::from_le_bytes(rd.take(8, "index")?.try_into().unwrap());
    let mut spans = [Span { offset: 0, len: 0 }; 5];
    for (i, s) in ORDER.iter().enumerate() {
        spans[i] = rd.section(*s)?;
    }
    if rd.pos != bytes.len() {
        return Err(err(rd.pos, None, "trailing bytes"));
    }
    Ok((index, spans))
}

/// Parse records until the first malformed one.
fn decode_records_lenient(
    bytes: &[u8],
    span: Span,
) -> (Vec<UserRecord>, Vec<Span>, Option<FormatError>) {
    let body = &bytes[span.offset..span.end()];
    let mut cur = Cursor::new(body);
    let count = match cur.array::<4>() {
        Ok(b) => u32::from_le_bytes(b) as usize,
        Err(e) => {
            return (
                Vec::new(),
                Vec::new(),
                Some(err(span.offset, Some(0), e.to_string())),
            )
        }
    };
    // Smallest record: 32 + 2 + 1 + 1 + 8.
    if count > body.len() / 44 {
        return (
            Vec::new(),
            Vec::new(),
            Some(err(
                span.offset,
                Some(0),
                format!("record count {count} exceeds section"),
            )),
        );
    }
    let mut recs = Vec::with_capacity(count);
    let mut spans = Vec::with_capacity(count);
    for i in 0..count {
        let start = cur.pos;
        match UserRecord::decode_from(&mut cur) {
            Ok(rec) => {
                spans.push(Span {
                    offset: span.offset + start,
                    len: cur.pos - start,
                });
                recs.push(rec);
            }
            Err(e) => {
                let e = err(span.offset + start, Some(i), e.to_string());
                return (recs, spans, Some(e));
            }
        }
    }
    if cur.finish().is_err() {
        let e = err(
            span.offset + cur.pos,
            Some(count.saturating_sub(1)),
            "bytes after last record",
        );
        return (recs, spans, Some(e));
    }
    (recs, spans, None)
}

fn decode_records(bytes: &[u8], span: Span) -> Result<(Vec<UserRecord>, Vec<Span>), FormatError> {
    match decode_records_lenient(bytes, span) {
        (r, s, None) => Ok((r, s)),
        (_, _, Some(e)) => Err(e),
    }
}

/// Parse cleartext entries until the first malformed one. `positions` maps
/// the j-th entry to the sealing-order position of the j-th Active record,
/// for error localization.
fn decode_active_lenient(
    bytes: &[u8],
    span: Span,
    positions: &[usize],
) -> (Vec<StatefulReading>, Vec<Span>, Option<FormatError>) {
    let body = &bytes[span.offset..span.end()];
    let mut cur = Cursor::new(body);
    let at_entry = |j: usize| positions.get(j).copied();
    let count = match cur.array::<4>() {
        Ok(b) => u32::from_le_bytes(b) as usize,
        Err(e) => {
            return (
                Vec::new(),
                Vec::new(),
                Some(err(span.offset, at_entry(0), e.to_string())),
            )
        }
    };
    // Smallest entry: LP(1) + LP(1) + state + time + params length.
    if count > body.len() / 19 {
        let e = err(
            span.offset,
            at_entry(0),
            format!("cleartext count {count} exceeds section"),
        );
        return (Vec::new(), Vec::new(), Some(e));
    }
    let mut active = Vec::with_capacity(count);
    let mut spans = Vec::with_capacity(count);
    for j in 0..count {
        let start = cur.pos;
        let at = span.offset + start;
        let parsed = (|| {
            let (mut r, used) = canonical_decode_prefix(&body[start..])?;
            cur.take(used)?;
            let plen = u32::from_le_bytes(cur.array::<4>()?) as usize;
            r.reading.params = cur.take(plen)?.to_vec();
            Ok::<_, crate::model::ModelError>(r)
        })();
        match parsed {
            Ok(r) => {
                spans.push(Span {
                    offset: at,
                    len: cur.pos - start,
                });
                active.push(r);
            }
            // Params lengths are not covered by any digest, so a bad entry
            // may have been framed by its predecessor.
            Err(e) => {
                return (
                    active,
                    spans,
                    Some(err(at, at_entry(j.saturating_sub(1)), e.to_string())),
                )
            }
        }
    }
    if cur.finish().is_err() {
        let e = err(
            span.offset + cur.pos,
            at_entry(count.saturating_sub(1)),
            "bytes after last cleartext reading",
        );
        return (active, spans, Some(e));
    }
    (active, spans, None)
}

fn decode_proof(bytes: &[u8], span: Span) -> Result<(RandomString, Signature), FormatError> {
    if span.len != PROOF_LEN {
        return Err(err(
            span.offset,
            None,
            format!("proof section of {} bytes", span.len),
        ));
    }
    let b = &bytes[span.offset..span.end()];
    Ok((
        RandomString(b[..32].try_into().unwrap()),
        Signature(b[32..].try_into().unwrap()),
    ))
}

fn decode_ruleset(bytes: &[u8], span: Span) -> Result<Option<Digest>, FormatError> {
    if span.len != 33 {
        return Err(err(span.offset, None, "ruleset section must be 33 bytes"));
    }
    let rb = &bytes[span.offset..span.end()];
    match rb[0] {
        0 if rb[1..].iter().all(|&b| b == 0) => Ok(None),
        0 => Err(err(
            span.offset,
            None,
            "nonzero padding after empty ruleset flag",
        )),
        1 => Ok(Some(Digest(rb[1..].try_into().unwrap()))),
        f => Err(err(span.offset, None, format!("ruleset flag {f}"))),
    }
}

/// A chunk file decoded section by section. Framing errors abort; errors
/// inside RECORDS or ACTIVE stop that section only, keeping the prefix that
/// parsed, so a verifier can still cross-check what precedes the damage.
#[derive(Clone, Debug)]
pub struct ChunkParts {
    pub index: u64,
    pub records: Vec<UserRecord>,
    pub records_error: Option<FormatError>,
    pub active: Vec<StatefulReading>,
    pub active_error: Option<FormatError>,
    pub pi: Result<ProofOfIntegrity, FormatError>,
    pub pu: Result<ProofForUser, FormatError>,
    pub ruleset_digest: Result<Option<Digest>, FormatError>,
    spans: [Span; 5],
    record_spans: Vec<Span>,
    active_spans: Vec<Span>,
    total_len: usize,
}

pub fn parse_parts(bytes: &[u8]) -> Result<ChunkParts, FormatError> {
    let (index, spans) = scan_sections(bytes)?;
    let [rs, act, pis, pus, rls] = spans;
    let (records, record_spans, records_error) = decode_records_lenient(bytes, rs);
    let positions: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.state == SensorState::Active)
        .map(|(i, _)| i)
        .collect();
    let (active, active_spans, active_error) = decode_active_lenient(bytes, act, &positions);
    Ok(ChunkParts {
        index,
        records,
        records_error,
        active,
        active_error,
        pi: decode_proof(bytes, pis).map(|(g_self, sig)| ProofOfIntegrity { g_self, sig }),
        pu: decode_proof(bytes, pus).map(|(g_self, sig)| ProofForUser { g_self, sig }),
        ruleset_digest: decode_ruleset(bytes, rls),
        spans,
        record_spans,
        active_spans,
        total_len: bytes.len(),
    })
}

/// Strictly decode a chunk file, returning the chunk and its layout.
pub fn decode_chunk(bytes: &[u8]) -> Result<(SealedChunk, ChunkManifest), FormatError> {
    let p = parse_parts(bytes)?;
    if let Some(e) = p.records_error.or(p.active_error) {
        return Err(e);
    }
    let n_active = p.records.iter().filter(|r| r.state.is_active()).count();
    if n_active != p.active.len() {
        return Err(err(
            p.spans[1].offset,
            None,
            format!(
                "{} cleartext readings for {n_active} Active records",
                p.active.len()
            ),
        ));
    }
    let pi = p.pi?;
    let pu = p.pu?;
    let ruleset_digest = p.ruleset_digest?;
    let [rs, act, pis, pus, rls] = p.spans;
    let manifest = ChunkManifest {
        index: p.index,
        records: rs,
        active: act,
        pi: pis,
        pu: pus,
        ruleset: rls,
        record_count: p.records.len(),
        active_count: p.active.len(),
        g_self: pi.g_self,
        record_spans: p.record_spans,
        active_spans: p.active_spans,
        total_len: p.total_len,
    };
    let sc = SealedChunk::from_parts(p.index, p.active, p.records, pi, pu, ruleset_digest);
    Ok((sc, manifest))
}

/// The records and PU a user verifier receives for one chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserView {
    pub index: u64,
    pub records: Vec<UserRecord>,
    pub pu: ProofForUser,
}

/// Project a chunk file onto its user view by copying the RECORDS and PU
/// sections verbatim. Only the section headers are checked.
pub fn user_view_bytes(chunk_file: &[u8]) -> Result<Vec<u8>, FormatError> {
    let (index, [rs, _, _, pu, _]) = scan_sections(chunk_file)?;
    let mut out = Vec::with_capacity(8 + 2 * SECTION_HEADER_LEN + rs.len + pu.len);
    out.extend_from_slice(&index.to_le_bytes());
    for (tag, span) in [(Section::Records, rs), (Section::Pu, pu)] {
        out.push(tag as u8);
        out.extend_from_slice(&(span.len as u32).to_le_bytes());
        out.extend_from_slice(&chunk_file[span.offset..span.end()]);
    }
    Ok(out)
}

pub fn encode_user_view(sc: &SealedChunk) -> Vec<u8> {
    user_view_bytes(&encode_chunk(sc).0).expect("fresh encoding scans")
}

pub fn decode_user_view(bytes: &[u8]) -> Result<UserView, FormatError> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let index = u64::from_le_bytes(rd.take(8, "index")?.try_into().unwrap());
    let rs = rd.section(Section::Records)?;
    let pu = rd.section(Section::Pu)?;
    if rd.pos != bytes.len() {
        return Err(err(rd.pos, None, "trailing bytes"));
    }
    let (records, _) = decode_records(bytes, rs)?;
    let (g_self, sig) = decode_proof(bytes, pu)?;
    Ok(UserView {
        index,
        records,
        pu: ProofForUser { g_self, sig },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyPair, KeyRole};
    use crate::enclave::Sealer;
    use crate::model::{DeviceId, SensorId, SensorReading, Timestamp};

    fn chunk(states: &[SensorState]) -> SealedChunk {
        let mut s = Sealer::new(KeyPair::generate(KeyRole::Enclave)).unwrap();
        let mut c = s.open_chunk(Some(crate::crypto::hash(b"rules"))).unwrap();
        for (i, st) in states.iter().enumerate() {
            let mut r = SensorReading::new(
                DeviceId::new(vec![0xD0, 0, 0, 0, 0, i as u8]).unwrap(),
                SensorId::new(vec![0x5E, i as u8]).unwrap(),
                Timestamp::new(1000 + i as u64).unwrap(),
            );
            r.params = vec![i as u8; i % 3];
            c.seal_append(StatefulReading::new(r, *st));
        }
        s.seal(c).unwrap().unwrap()
    }

    use SensorState::{Active as A, Passive as P};

    #[test]
    fn round_trip_is_bit_exact() {
        let sc = chunk(&[A, P, A, A, P]);
        let (bytes, m) = encode_chunk(&sc);
        let (back, m2) = decode_chunk(&bytes).unwrap();
        assert_eq!(
            back,
            SealedChunk {
                trace: None,
                ..sc.clone()
            }
        );
        assert_eq!(m, m2);
        assert_eq!(encode_chunk(&back).0, bytes);
        assert_eq!(m.record_count, 5);
        assert_eq!(m.active_count, 3);
        assert_eq!(m.pi.len, PROOF_LEN);
        assert_eq!(m.total_len, bytes.len());
    }

    #[test]
    fn header_layout() {
        let sc = chunk(&[P]);
        let (bytes, m) = encode_chunk(&sc);
        assert_eq!(&bytes[..8], CHUNK_MAGIC);
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(&bytes[10..18], &1u64.to_le_bytes());
        assert_eq!(bytes[18], Section::Records as u8);
        assert_eq!(m.records.offset, 23);
    }

    #[test]
    fn passive_device_ids_absent_from_file() {
        let sc = chunk(&[A, P, P, A]);
        let (bytes, _) = encode_chunk(&sc);
        for i in 0..4u8 {
            let id = [0xD0, 0, 0, 0, 0, i];
            let present = bytes.windows(6).any(|w| w == id);
            assert_eq!(present, i == 0 || i == 3, "device {i}");
        }
    }

    #[test]
    fn parse_failure_in_cleartext_points_at_or_before_its_record() {
        let sc = chunk(&[P, A, P, A]);
        let (bytes, m) = encode_chunk(&sc);
        // A bad length prefix on the second cleartext looks the same as a
        // bad params length on the first, so blame the first.
        let mut b = bytes.clone();
        b[m.active_spans[1].offset] = 0xFF;
        assert_eq!(decode_chunk(&b).unwrap_err().record, Some(1));
        let mut b = bytes;
        b[m.active_spans[0].offset] = 0xFF;
        assert_eq!(decode_chunk(&b).unwrap_err().record, Some(1));
    }

    #[test]
    fn rejects_trailing_and_padding() {
        let sc = chunk(&[P]);
        let (mut bytes, _) = encode_chunk(&sc);
        bytes.push(0);
        assert!(decode_chunk(&bytes).is_err());
        let sc = SealedChunk {
            ruleset_digest: None,
            ..chunk(&[P])
        };
        let (mut bytes, m) = encode_chunk(&sc);
        bytes[m.ruleset.offset + 5] = 1;
        assert!(decode_chunk(&bytes).is_err());
    }

    #[test]
    fn user_view_round_trip_and_redaction() {
        let sc = chunk(&[A, P, A]);
        let v = decode_user_view(&encode_user_view(&sc)).unwrap();
        assert_eq!(v.index, sc.index);
        assert_eq!(v.records, sc.records);
        assert_eq!(v.pu, sc.pu);
        let bytes = encode_user_view(&sc);
        for i in 0..3u8 {
            assert!(!bytes.windows(6).any(|w| w == [0xD0, 0, 0, 0, 0, i]));
        }
    }
}
