//! Offline verifiers.
//!
//! The auditor recomputes each chunk's chain over cleartext Active readings
//! and redacted Passive records, cross-checks the two sections against each
//! other, and checks PI. It also checks PU, since both proofs must commit to
//! the same neighbor strings. A user recomputes the XOR fold over the
//! redacted records, checks PU, and finds their own readings by recomputing
//! `H(LP(device) || time)` for every bundled time.
//!
//! Outcomes: `Missing` for a gap, `Tampered` when the payload is malformed or
//! disagrees with the signed chain, `BadProof` when the neighbor strings or
//! the proofs themselves cannot be validated.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Read};
use std::time::{Duration, Instant};

use crate::chain::{occurrence_digest, ChainFold, UserFold, UserRecord};
use crate::crypto::{Digest, PublicKey, RandomString};
use crate::enclave::proof_verifies;
use crate::model::{DeviceId, SensorId, SensorState, StatefulReading, Timestamp};
use crate::store::bundle::{Boundary, BundleEntry, BundleKind, BundleReader, VerifierBundle};
use crate::store::format::{self, scan_sections};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Intact,
    Tampered,
    Missing,
    BadProof,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Intact => "intact",
            Self::Tampered => "tampered",
            Self::Missing => "missing",
            Self::BadProof => "bad-proof",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub chunk_index: u64,
    pub detail: String,
    /// Sealing-order position of the earliest record known to be bad.
    pub first_bad_record: Option<usize>,
}

impl Verdict {
    fn new(outcome: Outcome, chunk_index: u64, detail: impl Into<String>) -> Self {
        Self {
            outcome,
            chunk_index,
            detail: detail.into(),
            first_bad_record: None,
        }
    }

    fn at(mut self, record: Option<usize>) -> Self {
        self.first_bad_record = record;
        self
    }

    pub fn is_intact(&self) -> bool {
        self.outcome == Outcome::Intact
    }

    /// `chunk=<i> outcome=<o> first_bad=<n|-> detail=<text>`.
    pub fn to_line(&self) -> String {
        format!(
            "chunk={} outcome={} first_bad={} detail={}",
            self.chunk_index,
            self.outcome,
            self.first_bad_record
                .map_or_else(|| "-".to_string(), |r| r.to_string()),
            self.detail
        )
    }
}

/// A neighbor string as the verifier sees it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Side {
    Known(RandomString),
    Unavailable(String),
}

impl Side {
    pub fn from_boundary_before(b: &Boundary, start: u64, pk: &PublicKey) -> Self {
        match b {
            Boundary::Seed(a) if start == 1 && a.verify(pk) => Side::Known(a.seed),
            Boundary::Seed(_) if start == 1 => {
                Side::Unavailable("genesis anchor signature invalid".into())
            }
            Boundary::Neighbor(g) if start > 1 => Side::Known(*g),
            Boundary::Unavailable => Side::Unavailable(format!(
                "string of chunk {} not served",
                start.saturating_sub(1)
            )),
            _ => Side::Unavailable("boundary kind does not fit the range start".into()),
        }
    }

    pub fn from_boundary_after(b: &Boundary, end: u64, pk: &PublicKey) -> Self {
        match b {
            Boundary::Neighbor(g) => Side::Known(*g),
            Boundary::Terminal(t) if t.last_index == end && t.verify(pk) => Side::Known(t.terminal),
            Boundary::Terminal(_) => {
                Side::Unavailable("terminal anchor invalid for this range".into())
            }
            Boundary::Unavailable => Side::Unavailable(format!(
                "string of chunk {} not served and stream not finalized at {end}",
                end + 1
            )),
            Boundary::Seed(_) => Side::Unavailable("seed offered as successor".into()),
        }
    }

    /// The string a bundle entry contributes to its neighbors.
    pub fn from_entry(e: &BundleEntry, kind: BundleKind) -> Self {
        let Some(p) = &e.payload else {
            return Side::Unavailable(format!("chunk {} missing", e.index));
        };
        let g = match kind {
            BundleKind::Auditor => scan_sections(p).ok().and_then(|(_, s)| {
                (s[2].len >= 32).then(|| p[s[2].offset..s[2].offset + 32].try_into().unwrap())
            }),
            BundleKind::User => format::decode_user_view(p).ok().map(|v| v.pu.g_self.0),
        };
        match g {
            Some(g) => Side::Known(RandomString(g)),
            None => Side::Unavailable(format!("chunk {} unreadable", e.index)),
        }
    }
}

/// Earliest record at which cleartext and records disagree.
fn cross_check(
    records: &[UserRecord],
    active: &[StatefulReading],
    records_complete: bool,
    active_complete: bool,
) -> Option<(usize, String)> {
    let home = |c: &StatefulReading| {
        let o = occurrence_digest(c.device().as_bytes(), c.time());
        records
            .iter()
            .position(|r| r.time == c.time() && r.occurrence == o)
    };
    let mut j = 0;
    // o of the next unmatched cleartext; a redacted record carrying it
    // hides an Active reading.
    let mut pending: Option<(usize, Digest)> = None;
    for (i, rec) in records.iter().enumerate() {
        if !rec.state.is_active() {
            if let Some(c) = active.get(j) {
                let o = match pending {
                    Some((k, o)) if k == j => o,
                    _ => occurrence_digest(c.device().as_bytes(), c.time()),
                };
                pending = Some((j, o));
                if rec.occurrence == o {
                    return Some((i, format!("record {i} redacts cleartext {j}")));
                }
            }
            continue;
        }
        let Some(c) = active.get(j) else {
            return active_complete.then(|| (i, "Active record has no cleartext".to_string()));
        };
        if !rec.describes(c) {
            let at = home(c).map_or(i, |h| h.min(i));
            return Some((at, format!("cleartext {j} does not match record {i}")));
        }
        j += 1;
    }
    if records_complete && j < active.len() {
        let at = home(&active[j]).unwrap_or(records.len().saturating_sub(1));
        return Some((at, format!("cleartext {j} has no Active record")));
    }
    None
}

fn min_opt(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

/// Audit one chunk of an auditor bundle. `known` restricts which ruleset
/// digests a chunk may carry.
pub fn audit_chunk(
    entry: &BundleEntry,
    prev: &Side,
    next: &Side,
    pk: &PublicKey,
    known: Option<&HashSet<Digest>>,
) -> Verdict {
    let idx = entry.index;
    let Some(bytes) = &entry.payload else {
        return Verdict::new(Outcome::Missing, idx, "chunk not served");
    };
    let parts = match format::parse_parts(bytes) {
        Ok(p) => p,
        Err(e) => {
            return Verdict::new(Outcome::Tampered, idx, format!("malformed: {e}")).at(e.record)
        }
    };
    if parts.index != idx {
        return Verdict::new(
            Outcome::Tampered,
            idx,
            format!("file claims index {}", parts.index),
        );
    }

    let cross = cross_check(
        &parts.records,
        &parts.active,
        parts.records_error.is_none(),
        parts.active_error.is_none(),
    );
    let parse_err = parts.records_error.as_ref().or(parts.active_error.as_ref());
    if cross.is_some() || parse_err.is_some() {
        let at = min_opt(
            cross.as_ref().map(|c| c.0),
            min_opt(
                parts.records_error.as_ref().and_then(|e| e.record),
                parts.active_error.as_ref().and_then(|e| e.record),
            ),
        );
        let detail = match (&cross, parse_err) {
            (Some((_, c)), _) => c.clone(),
            (None, Some(e)) => format!("malformed: {e}"),
            (None, None) => unreachable!(),
        };
        return Verdict::new(Outcome::Tampered, idx, detail).at(at);
    }
    let (pi, pu, ruleset) = match (&parts.pi, &parts.pu, &parts.ruleset_digest) {
        (Ok(pi), Ok(pu), Ok(r)) => (pi, pu, r),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
            return Verdict::new(Outcome::Tampered, idx, format!("malformed: {e}"))
        }
    };
    if let (Some(d), Some(known)) = (ruleset, known) {
        if !known.contains(d) {
            return Verdict::new(
                Outcome::Tampered,
                idx,
                format!("ruleset digest {d} matches no published notice"),
            );
        }
    }

    let mut chain = ChainFold::default();
    let mut users = UserFold::default();
    let mut active = parts.active.iter();
    for rec in &parts.records {
        if rec.state.is_active() {
            chain.push_active(active.next().expect("cross-checked"));
        } else {
            chain.push_redacted(rec);
        }
        users.push(rec);
    }

    let (g_prev, g_next) = match (prev, next) {
        (Side::Known(p), Side::Known(n)) => (p, n),
        (Side::Unavailable(why), _) | (_, Side::Unavailable(why)) => {
            return Verdict::new(Outcome::BadProof, idx, why.clone())
        }
    };
    if pi.g_self != pu.g_self {
        return Verdict::new(
            Outcome::BadProof,
            idx,
            "PI and PU disagree on the chunk string",
        );
    }
    let pi_ok = proof_verifies(pk, &chain.digest(), g_prev, &pi.g_self, g_next, &pi.sig);
    let pu_ok = proof_verifies(pk, &users.digest(), g_prev, &pu.g_self, g_next, &pu.sig);
    match (pi_ok, pu_ok) {
        (true, true) => Verdict::new(Outcome::Intact, idx, "ok"),
        (false, true) => Verdict::new(Outcome::Tampered, idx, "recomputed chain does not match PI"),
        (true, false) => Verdict::new(Outcome::BadProof, idx, "PU does not verify"),
        (false, false) => Verdict::new(
            Outcome::BadProof,
            idx,
            "neither proof verifies under the enclave key with these neighbor strings",
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PresenceEntry {
    pub record: usize,
    pub time: Timestamp,
    pub sensor: SensorId,
    pub state: SensorState,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChunkPresence {
    pub chunk_index: u64,
    pub entries: Vec<PresenceEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PresenceReport {
    pub chunks: Vec<ChunkPresence>,
    pub verdicts: Vec<Verdict>,
}

impl PresenceReport {
    pub fn total_entries(&self) -> usize {
        self.chunks.iter().map(|c| c.entries.len()).sum()
    }
}

/// Verify one chunk of a user bundle and list the device's readings in it.
pub fn verify_user_chunk(
    entry: &BundleEntry,
    prev: &Side,
    next: &Side,
    device: &DeviceId,
    pk: &PublicKey,
) -> (Verdict, ChunkPresence) {
    let idx = entry.index;
    let mut presence = ChunkPresence {
        chunk_index: idx,
        entries: Vec::new(),
    };
    let Some(bytes) = &entry.payload else {
        return (
            Verdict::new(Outcome::Missing, idx, "chunk not served"),
            presence,
        );
    };
    let view = match format::decode_user_view(bytes) {
        Ok(v) => v,
        Err(e) => {
            let v = Verdict::new(Outcome::Tampered, idx, format!("malformed: {e}")).at(e.record);
            return (v, presence);
        }
    };
    let mut users = UserFold::default();
    for (i, rec) in view.records.iter().enumerate() {
        users.push(rec);
        if occurrence_digest(device.as_bytes(), rec.time) == rec.occurrence {
            presence.entries.push(PresenceEntry {
                record: i,
                time: rec.time,
                sensor: rec.sensor.clone(),
                state: rec.state,
            });
        }
    }
    if view.index != idx {
        let v = Verdict::new(
            Outcome::Tampered,
            idx,
            format!("view claims index {}", view.index),
        );
        return (v, presence);
    }
    let (g_prev, g_next) = match (prev, next) {
        (Side::Known(p), Side::Known(n)) => (p, n),
        (Side::Unavailable(why), _) | (_, Side::Unavailable(why)) => {
            return (Verdict::new(Outcome::BadProof, idx, why.clone()), presence)
        }
    };
    let v = if proof_verifies(
        pk,
        &users.digest(),
        g_prev,
        &view.pu.g_self,
        g_next,
        &view.pu.sig,
    ) {
        Verdict::new(Outcome::Intact, idx, "ok")
    } else {
        Verdict::new(
            Outcome::Tampered,
            idx,
            "recomputed user digest does not match PU",
        )
    };
    (v, presence)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Summary {
    pub intact: usize,
    pub tampered: usize,
    pub missing: usize,
    pub bad_proof: usize,
}

impl Summary {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Intact => self.intact += 1,
            Outcome::Tampered => self.tampered += 1,
            Outcome::Missing => self.missing += 1,
            Outcome::BadProof => self.bad_proof += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.intact + self.tampered + self.missing + self.bad_proof
    }

    pub fn all_intact(&self) -> bool {
        self.intact == self.total()
    }

    pub fn of(verdicts: &[Verdict]) -> Self {
        let mut s = Self::default();
        verdicts.iter().for_each(|v| s.add(v.outcome));
        s
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} intact={} tampered={} missing={} bad-proof={}",
            self.total(),
            self.intact,
            self.tampered,
            self.missing,
            self.bad_proof
        )
    }
}

#[derive(Clone, Debug)]
pub struct RangeReport {
    pub verdicts: Vec<Verdict>,
    pub summary: Summary,
    pub elapsed: Duration,
}

/// Entries in bundle order paired with the index they should carry. A
/// misplaced entry is reported as a gap at its expected position.
fn aligned(bundle: &VerifierBundle) -> Vec<BundleEntry> {
    let h = &bundle.header;
    (h.start..=h.end)
        .enumerate()
        .map(|(i, index)| match bundle.entries.get(i) {
            Some(e) if e.index == index => e.clone(),
            _ => BundleEntry {
                index,
                payload: None,
            },
        })
        .collect()
}

fn sides(bundle: &VerifierBundle, entries: &[BundleEntry], pk: &PublicKey) -> Vec<Side> {
    let h = &bundle.header;
    let mut s = Vec::with_capacity(entries.len() + 2);
    s.push(Side::from_boundary_before(&h.before, h.start, pk));
    s.extend(entries.iter().map(|e| Side::from_entry(e, h.kind)));
    s.push(Side::from_boundary_after(&h.after, h.end, pk));
    s
}

/// Audit every chunk of an auditor bundle on `workers` threads.
pub fn audit_range(bundle: &VerifierBundle, pk: &PublicKey, workers: usize) -> RangeReport {
    let started = Instant::now();
    let entries = aligned(bundle);
    let sides = sides(bundle, &entries, pk);
    let known: HashSet<Digest> = bundle.header.known_digests.iter().copied().collect();
    let audit = |i: usize| audit_chunk(&entries[i], &sides[i], &sides[i + 2], pk, Some(&known));
    let workers = workers.max(1).min(entries.len().max(1));
    let verdicts: Vec<Verdict> = if workers == 1 {
        (0..entries.len()).map(audit).collect()
    } else {
        let per = entries.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let audit = &audit;
                    let lo = w * per;
                    let hi = ((w + 1) * per).min(entries.len());
                    scope.spawn(move || (lo..hi).map(audit).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("audit worker panicked"))
                .collect()
        })
    };
    RangeReport {
        summary: Summary::of(&verdicts),
        verdicts,
        elapsed: started.elapsed(),
    }
}

/// Verify every chunk of a user bundle held in memory.
pub fn verify_user_range(
    bundle: &VerifierBundle,
    device: &DeviceId,
    pk: &PublicKey,
) -> (RangeReport, PresenceReport) {
    let started = Instant::now();
    let entries = aligned(bundle);
    let sides = sides(bundle, &entries, pk);
    let mut report = PresenceReport::default();
    for (i, e) in entries.iter().enumerate() {
        let (v, p) = verify_user_chunk(e, &sides[i], &sides[i + 2], device, pk);
        report.verdicts.push(v);
        report.chunks.push(p);
    }
    let range = RangeReport {
        summary: Summary::of(&report.verdicts),
        verdicts: report.verdicts.clone(),
        elapsed: started.elapsed(),
    };
    (range, report)
}

/// What a streaming verifier produced for one chunk.
pub enum StreamItem {
    Audit(Verdict),
    User(Verdict, ChunkPresence),
}

impl StreamItem {
    pub fn verdict(&self) -> &Verdict {
        match self {
            Self::Audit(v) | Self::User(v, _) => v,
        }
    }
}

/// Verify a bundle read incrementally, holding at most three entries.
/// `device` is required for user bundles and ignored for auditor bundles.
pub fn verify_stream<R: Read>(
    mut reader: BundleReader<R>,
    device: Option<&DeviceId>,
    pk: &PublicKey,
    mut emit: impl FnMut(StreamItem),
) -> io::Result<(Summary, Duration)> {
    let started = Instant::now();
    let h = reader.header.clone();
    if h.kind == BundleKind::User && device.is_none() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "user bundle needs a device",
        ));
    }
    if h.start == 0 || h.end < h.start {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "bad bundle range",
        ));
    }
    let known: HashSet<Digest> = h.known_digests.iter().copied().collect();
    let mut summary = Summary::default();
    let mut next_expected = h.start;
    let mut pull = |reader: &mut BundleReader<R>| -> io::Result<Option<BundleEntry>> {
        if next_expected > h.end {
            return Ok(None);
        }
        let index = next_expected;
        next_expected += 1;
        Ok(Some(match reader.next_entry()? {
            Some(e) if e.index == index => e,
            _ => BundleEntry {
                index,
                payload: None,
            },
        }))
    };
    let mut prev = Side::from_boundary_before(&h.before, h.start, pk);
    let mut cur = pull(&mut reader)?;
    while let Some(entry) = cur {
        let upcoming = pull(&mut reader)?;
        let next = match &upcoming {
            Some(n) => Side::from_entry(n, h.kind),
            None => Side::from_boundary_after(&h.after, h.end, pk),
        };
        let item = match h.kind {
            BundleKind::Auditor => {
                StreamItem::Audit(audit_chunk(&entry, &prev, &next, pk, Some(&known)))
            }
            BundleKind::User => {
                let (v, p) = verify_user_chunk(&entry, &prev, &next, device.expect("checked"), pk);
                StreamItem::User(v, p)
            }
        };
        summary.add(item.verdict().outcome);
        emit(item);
        prev = Side::from_entry(&entry, h.kind);
        cur = upcoming;
    }
    Ok((summary, started.elapsed()))
}
