//! Synthetic WiFi association workload and store tamper injection.
//!
//! Traffic follows a two-level diurnal step: `peak_per_hour` events per hour
//! between `peak_start_h` and `peak_end_h` (UTC), `off_peak_per_hour`
//! otherwise, both multiplied by `rate_scale`. Fractional expected counts
//! carry over to the next hour, so long runs hit the expected total exactly
//! up to one event. Within an hour, timestamps are uniform and sorted.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::chain::{end_of_chunk, proof_payload, ChainFold, UserFold, UserRecord};
use crate::crypto::{self, CryptoError, KeyPair, KeyRole, PublicKey, RandomString};
use crate::model::{DeviceId, SensorId, SensorReading, SensorState, StatefulReading, Timestamp};
use crate::store::format::{self, FormatError};
use crate::store::{Store, StoreError};

pub const HOUR_MS: u64 = 3_600_000;
pub const DAY_MS: u64 = 24 * HOUR_MS;
/// 2019-01-07T00:00:00Z.
pub const DEFAULT_START_MS: u64 = 1_546_819_200_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiurnalProfile {
    pub peak_start_h: u32,
    pub peak_end_h: u32,
    pub peak_per_hour: f64,
    pub off_peak_per_hour: f64,
}

impl Default for DiurnalProfile {
    fn default() -> Self {
        Self {
            peak_start_h: 9,
            peak_end_h: 17,
            peak_per_hour: 74_000.0,
            off_peak_per_hour: 1_200.0,
        }
    }
}

impl DiurnalProfile {
    pub fn rate_at_hour(&self, hour_of_day: u32) -> f64 {
        if (self.peak_start_h..self.peak_end_h).contains(&hour_of_day) {
            self.peak_per_hour
        } else {
            self.off_peak_per_hour
        }
    }

    pub fn per_day(&self) -> f64 {
        (0..24).map(|h| self.rate_at_hour(h)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub n_sensors: usize,
    pub n_buildings: usize,
    pub n_devices: usize,
    pub start_ms: u64,
    pub duration_ms: u64,
    pub profile: DiurnalProfile,
    pub rate_scale: f64,
    pub params_len: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n_sensors: 490,
            n_buildings: 30,
            n_devices: 10_000,
            start_ms: DEFAULT_START_MS,
            duration_ms: DAY_MS,
            profile: DiurnalProfile::default(),
            rate_scale: 1.0,
            params_len: 0,
            seed: 0x5e5e_5ea1,
        }
    }
}

impl WorkloadSpec {
    pub fn days(mut self, days: f64) -> Self {
        self.duration_ms = (days * DAY_MS as f64).round() as u64;
        self
    }

    pub fn scaled(mut self, rate_scale: f64) -> Self {
        self.rate_scale = rate_scale;
        self
    }

    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_devices(mut self, n: usize) -> Self {
        self.n_devices = n;
        self
    }

    /// Expected number of events over the whole duration.
    pub fn expected_events(&self) -> f64 {
        let mut total = 0.0;
        let mut t = self.start_ms;
        let end = self.start_ms + self.duration_ms;
        while t < end {
            let hour_end = (t / HOUR_MS + 1) * HOUR_MS;
            let span = hour_end.min(end) - t;
            let hod = ((t % DAY_MS) / HOUR_MS) as u32;
            total +=
                self.profile.rate_at_hour(hod) * self.rate_scale * span as f64 / HOUR_MS as f64;
            t = hour_end;
        }
        total
    }

    fn validate(&self) {
        assert!(self.n_sensors > 0 && self.n_buildings > 0 && self.n_devices > 0);
        assert!(self.n_sensors < 1 << 16 && self.n_buildings < 256);
        assert!(self.start_ms > 0 && self.rate_scale >= 0.0);
    }
}

/// Sensor `i` sits in building `i % n_buildings`.
pub fn sensor_id(spec: &WorkloadSpec, i: usize) -> SensorId {
    let b = (i % spec.n_buildings) as u8;
    SensorId::new(vec![0x5E, 0x50, 0x00, b, (i >> 8) as u8, i as u8]).expect("six bytes")
}

pub fn building_of(spec: &WorkloadSpec, sensor: usize) -> usize {
    sensor % spec.n_buildings
}

/// Distinct, locally administered 6-byte ids, drawn from the seed.
pub fn device_ids(spec: &WorkloadSpec) -> Vec<DeviceId> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0xD3D1_CE00);
    let mut seen = HashSet::with_capacity(spec.n_devices);
    let mut out = Vec::with_capacity(spec.n_devices);
    while out.len() < spec.n_devices {
        let mut id = [0u8; 6];
        rng.fill_bytes(&mut id);
        id[0] = (id[0] & 0xFC) | 0x02;
        if seen.insert(id) {
            out.push(DeviceId::new(id.to_vec()).expect("six bytes"));
        }
    }
    out
}

/// Deterministic plaintext reading stream.
pub struct Generator {
    spec: WorkloadSpec,
    rng: ChaCha20Rng,
    devices: Vec<DeviceId>,
    sensors: Vec<SensorId>,
    cursor_ms: u64,
    carry: f64,
    pending: VecDeque<SensorReading>,
}

impl Generator {
    pub fn new(spec: WorkloadSpec) -> Self {
        spec.validate();
        Self {
            rng: ChaCha20Rng::seed_from_u64(spec.seed),
            devices: device_ids(&spec),
            sensors: (0..spec.n_sensors).map(|i| sensor_id(&spec, i)).collect(),
            cursor_ms: spec.start_ms,
            carry: 0.0,
            pending: VecDeque::new(),
            spec,
        }
    }

    pub fn devices(&self) -> &[DeviceId] {
        &self.devices
    }

    fn fill_next_hour(&mut self) -> bool {
        let end = self.spec.start_ms + self.spec.duration_ms;
        while self.pending.is_empty() {
            if self.cursor_ms >= end {
                return false;
            }
            let t0 = self.cursor_ms;
            let t1 = ((t0 / HOUR_MS + 1) * HOUR_MS).min(end);
            self.cursor_ms = t1;
            let hod = ((t0 % DAY_MS) / HOUR_MS) as u32;
            let expected =
                self.spec.profile.rate_at_hour(hod) * self.spec.rate_scale * (t1 - t0) as f64
                    / HOUR_MS as f64
                    + self.carry;
            let n = expected.floor() as usize;
            self.carry = expected - n as f64;
            let mut times: Vec<u64> = (0..n).map(|_| self.rng.gen_range(t0..t1)).collect();
            times.sort_unstable();
            for t in times {
                let d = self.rng.gen_range(0..self.devices.len());
                let s = self.rng.gen_range(0..self.sensors.len());
                let mut r = SensorReading::new(
                    self.devices[d].clone(),
                    self.sensors[s].clone(),
                    Timestamp::new(t).expect("start is positive"),
                );
                if self.spec.params_len > 0 {
                    r.params = vec![0; self.spec.params_len];
                    self.rng.fill_bytes(&mut r.params);
                }
                self.pending.push_back(r);
            }
        }
        true
    }
}

impl Iterator for Generator {
    type Item = SensorReading;

    fn next(&mut self) -> Option<SensorReading> {
        if self.pending.is_empty() && !self.fill_next_hour() {
            return None;
        }
        self.pending.pop_front()
    }
}

/// The controller stand-in: readings sealed to the enclave key.
pub fn generate(spec: WorkloadSpec, enclave: PublicKey) -> impl Iterator<Item = Vec<u8>> {
    Generator::new(spec).map(move |r| {
        crypto::seal_to_enclave(&enclave, &r.to_wire()).expect("sealing to a valid key")
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TamperKind {
    InsertReading,
    DeleteReading,
    ModifyReading,
    TruncateChunk,
    DeleteChunk,
    ForgeProof,
    SwapChunks,
}

impl TamperKind {
    pub const ALL: [TamperKind; 7] = [
        Self::InsertReading,
        Self::DeleteReading,
        Self::ModifyReading,
        Self::TruncateChunk,
        Self::DeleteChunk,
        Self::ForgeProof,
        Self::SwapChunks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::InsertReading => "insert",
            Self::DeleteReading => "delete",
            Self::ModifyReading => "modify",
            Self::TruncateChunk => "truncate",
            Self::DeleteChunk => "delete-chunk",
            Self::ForgeProof => "forge",
            Self::SwapChunks => "swap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for TamperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `record` is a sealing-order position; for truncation it is the number of
/// records kept. `offset` selects the byte and bit a modification flips.
/// `other` is the second chunk of a swap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TamperAction {
    pub kind: TamperKind,
    pub chunk: u64,
    pub record: usize,
    pub offset: usize,
    pub other: u64,
}

impl TamperAction {
    pub fn new(kind: TamperKind, chunk: u64) -> Self {
        Self {
            kind,
            chunk,
            record: 0,
            offset: 0,
            other: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TamperReport {
    pub description: String,
    /// Chunks whose stored bytes changed or vanished.
    pub touched: Vec<u64>,
}

#[derive(Debug, Error)]
pub enum TamperError {
    #[error("target out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("stored chunk unreadable: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn oob(msg: impl Into<String>) -> TamperError {
    TamperError::OutOfRange(msg.into())
}

fn load(
    store: &Store,
    index: u64,
) -> Result<(Vec<u8>, crate::enclave::SealedChunk, format::ChunkManifest), TamperError> {
    let bytes = store
        .read_chunk_bytes(index)?
        .ok_or_else(|| oob(format!("chunk {index} not stored")))?;
    let (sc, m) = format::decode_chunk(&bytes)?;
    Ok((bytes, sc, m))
}

fn active_slot(sc: &crate::enclave::SealedChunk, record: usize) -> Option<usize> {
    sc.records[record].state.is_active().then(|| {
        sc.records[..record]
            .iter()
            .filter(|r| r.state.is_active())
            .count()
    })
}

fn stored_string(store: &Store, index: u64, before: bool) -> Result<RandomString, TamperError> {
    let anchors = store.anchors()?;
    if before && index == 1 {
        return anchors
            .genesis
            .map(|g| g.seed)
            .ok_or_else(|| oob("no genesis anchor"));
    }
    let n = if before { index - 1 } else { index + 1 };
    if let Some(c) = store.get_chunk(n)? {
        return Ok(c.g_self());
    }
    match anchors.terminal {
        Some(t) if !before && t.last_index == index => Ok(t.terminal),
        _ => Err(oob(format!("no neighbor string for chunk {index}"))),
    }
}

/// Apply one adversarial edit to a sealed store.
pub fn apply_tamper(store: &Store, a: &TamperAction) -> Result<TamperReport, TamperError> {
    let report = |d: String, touched: Vec<u64>| {
        Ok(TamperReport {
            description: d,
            touched,
        })
    };
    match a.kind {
        TamperKind::ModifyReading => {
            let (mut bytes, sc, m) = load(store, a.chunk)?;
            if a.record >= sc.len() {
                return Err(oob(format!("record {} of {}", a.record, sc.len())));
            }
            // Record bytes, plus the cleartext up to and including its params
            // length; params themselves are not covered by the proofs.
            let mut positions: Vec<usize> =
                (m.record_spans[a.record].offset..m.record_spans[a.record].end()).collect();
            if let Some(j) = active_slot(&sc, a.record) {
                let s = m.active_spans[j];
                let covered = s.len - sc.active[j].reading.params.len();
                positions.extend(s.offset..s.offset + covered);
            }
            let byte = positions[a.offset % positions.len()];
            let bit = (a.offset / positions.len()) % 8;
            bytes[byte] ^= 1 << bit;
            store.write_chunk_bytes(a.chunk, &bytes)?;
            report(
                format!(
                    "flipped bit {bit} of byte {byte} in chunk {} record {}",
                    a.chunk, a.record
                ),
                vec![a.chunk],
            )
        }
        TamperKind::InsertReading => {
            let (_, mut sc, _) = load(store, a.chunk)?;
            if a.record > sc.len() {
                return Err(oob(format!("insert position {} of {}", a.record, sc.len())));
            }
            let template = &sc.records[a.record.min(sc.len() - 1)];
            let mut dev = [0u8; 6];
            dev.copy_from_slice(&crypto::hash(&a.offset.to_be_bytes()).0[..6]);
            dev[0] = (dev[0] & 0xFC) | 0x02;
            let fake = StatefulReading::new(
                SensorReading::new(
                    DeviceId::new(dev.to_vec()).expect("six bytes"),
                    template.sensor.clone(),
                    template.time,
                ),
                if a.offset.is_multiple_of(2) {
                    SensorState::Active
                } else {
                    SensorState::Passive
                },
            );
            let slot = sc.records[..a.record]
                .iter()
                .filter(|r| r.state.is_active())
                .count();
            sc.records.insert(a.record, UserRecord::for_reading(&fake));
            if fake.state.is_active() {
                sc.active.insert(slot, fake);
            }
            store.write_chunk_bytes(a.chunk, &format::encode_chunk(&sc).0)?;
            report(
                format!("inserted a reading at {} in chunk {}", a.record, a.chunk),
                vec![a.chunk],
            )
        }
        TamperKind::DeleteReading => {
            let (_, mut sc, _) = load(store, a.chunk)?;
            if a.record >= sc.len() {
                return Err(oob(format!("record {} of {}", a.record, sc.len())));
            }
            if let Some(j) = active_slot(&sc, a.record) {
                sc.active.remove(j);
            }
            sc.records.remove(a.record);
            store.write_chunk_bytes(a.chunk, &format::encode_chunk(&sc).0)?;
            report(
                format!("deleted record {} of chunk {}", a.record, a.chunk),
                vec![a.chunk],
            )
        }
        TamperKind::TruncateChunk => {
            let (_, mut sc, _) = load(store, a.chunk)?;
            if a.record >= sc.len() {
                return Err(oob(format!("keep {} of {}", a.record, sc.len())));
            }
            let kept_active = sc.records[..a.record]
                .iter()
                .filter(|r| r.state.is_active())
                .count();
            sc.records.truncate(a.record);
            sc.active.truncate(kept_active);
            store.write_chunk_bytes(a.chunk, &format::encode_chunk(&sc).0)?;
            report(
                format!("truncated chunk {} to {} records", a.chunk, a.record),
                vec![a.chunk],
            )
        }
        TamperKind::DeleteChunk => {
            if !store.remove_chunk(a.chunk)? {
                return Err(oob(format!("chunk {} not stored", a.chunk)));
            }
            report(format!("deleted chunk {}", a.chunk), vec![a.chunk])
        }
        TamperKind::ForgeProof => {
            let (_, mut sc, _) = load(store, a.chunk)?;
            let g_prev = stored_string(store, a.chunk, true)?;
            let g_next = stored_string(store, a.chunk, false)?;
            let mut chain = ChainFold::default();
            let mut users = UserFold::default();
            let mut active = sc.active.iter();
            for rec in &sc.records {
                match rec.state {
                    SensorState::Active => {
                        chain.push_active(active.next().expect("consistent chunk"))
                    }
                    SensorState::Passive => chain.push_redacted(rec),
                }
                users.push(rec);
            }
            let eoc = end_of_chunk(&g_prev, &sc.g_self(), &g_next);
            let forger = KeyPair::generate(KeyRole::Enclave);
            sc.pi.sig = forger.sign(&proof_payload(&chain.digest(), &eoc));
            sc.pu.sig = forger.sign(&proof_payload(&users.digest(), &eoc));
            store.write_chunk_bytes(a.chunk, &format::encode_chunk(&sc).0)?;
            report(
                format!("re-signed chunk {} with a fresh key", a.chunk),
                vec![a.chunk],
            )
        }
        TamperKind::SwapChunks => {
            if a.chunk == a.other {
                return Err(oob("swap needs two distinct chunks"));
            }
            let (_, mut x, _) = load(store, a.chunk)?;
            let (_, mut y, _) = load(store, a.other)?;
            std::mem::swap(&mut x.index, &mut y.index);
            store.write_chunk_bytes(a.chunk, &format::encode_chunk(&y).0)?;
            store.write_chunk_bytes(a.other, &format::encode_chunk(&x).0)?;
            report(
                format!("swapped chunks {} and {}", a.chunk, a.other),
                vec![a.chunk, a.other],
            )
        }
    }
}

/// Draw valid coordinates for `kind` against `store`.
pub fn random_action(
    kind: TamperKind,
    store: &Store,
    rng: &mut impl Rng,
) -> Result<TamperAction, TamperError> {
    let indices = store.indices()?;
    if indices.is_empty() || (kind == TamperKind::SwapChunks && indices.len() < 2) {
        return Err(oob("store has too few chunks"));
    }
    let chunk = indices[rng.gen_range(0..indices.len())];
    let len = store
        .get_chunk(chunk)?
        .map(|c| c.len())
        .ok_or_else(|| oob(format!("chunk {chunk} not stored")))?;
    let record = match kind {
        TamperKind::InsertReading => rng.gen_range(0..=len),
        _ => rng.gen_range(0..len),
    };
    let other = loop {
        let o = indices[rng.gen_range(0..indices.len())];
        if o != chunk || indices.len() < 2 {
            break o;
        }
    };
    Ok(TamperAction {
        kind,
        chunk,
        record,
        offset: rng.gen_range(0..1 << 20),
        other,
    })
}
