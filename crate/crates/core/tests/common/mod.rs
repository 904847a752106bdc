//! Fixtures and a straight-line reference implementation of the digests.
//!
//! The reference works on raw bytes with `sha2` directly and shares no code
//! with the crate's folds or encoders.

#![allow(dead_code)]

use sha2::{Digest, Sha256};

use sensorseal::crypto::{KeyPair, KeyRole, PublicKey};
use sensorseal::enclave::{SealedChunk, Sealer};
use sensorseal::model::{
    DeviceId, SensorId, SensorReading, SensorState, StatefulReading, Timestamp,
};
use sensorseal::store::{Anchors, PreSharedKeyAuth, Store, UserRequest, VerifierBundle};
use sensorseal::verify::{audit_range, Verdict};

pub const T0: u64 = 1_546_819_200_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raw {
    pub device: Vec<u8>,
    pub sensor: Vec<u8>,
    pub time: u64,
    pub active: bool,
}

impl Raw {
    pub fn of(r: &StatefulReading) -> Self {
        Self {
            device: r.reading.device.as_bytes().to_vec(),
            sensor: r.reading.sensor.as_bytes().to_vec(),
            time: r.reading.time.millis(),
            active: r.state == SensorState::Active,
        }
    }
}

pub fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn lp(b: &[u8]) -> Vec<u8> {
    let mut v = vec![(b.len() >> 8) as u8, b.len() as u8];
    v.extend_from_slice(b);
    v
}

pub fn ref_occurrence(device: &[u8], time: u64) -> [u8; 32] {
    sha(&[&lp(device), &time.to_be_bytes()])
}

pub fn ref_chain(readings: &[Raw]) -> [u8; 32] {
    let mut h = sha(&[&[0u8; 8]]);
    for r in readings {
        let mut enc = Vec::new();
        if r.active {
            enc.extend(lp(&r.device));
            enc.extend(lp(&r.sensor));
            enc.push(1);
        } else {
            enc.extend(ref_occurrence(&r.device, r.time));
            enc.extend(lp(&r.sensor));
            enc.push(0);
        }
        enc.extend(r.time.to_be_bytes());
        h = sha(&[&enc, &h]);
    }
    h
}

pub fn ref_user(readings: &[Raw]) -> [u8; 32] {
    let mut acc = [0u8; 32];
    for r in readings {
        let term = sha(&[&ref_occurrence(&r.device, r.time), &[r.active as u8]]);
        for i in 0..32 {
            acc[i] ^= term[i];
        }
    }
    acc
}

pub fn ref_eoc(prev: &[u8; 32], own: &[u8; 32], next: &[u8; 32]) -> [u8; 32] {
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = prev[i] ^ own[i] ^ next[i];
    }
    out
}

pub fn reading(device: &[u8], sensor: u8, time: u64) -> SensorReading {
    SensorReading::new(
        DeviceId::new(device.to_vec()).unwrap(),
        SensorId::new(vec![0x5E, 0x50, 0, 0, 0, sensor]).unwrap(),
        Timestamp::new(time).unwrap(),
    )
}

pub fn device(i: u8) -> [u8; 6] {
    [0x02, 0xAA, 0xBB, 0xCC, 0xDD, i]
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub store: Store,
    pub pk: PublicKey,
    pub chunks: Vec<SealedChunk>,
}

/// `n_chunks` chunks of `per_chunk` readings sealed straight into a store.
/// Reading `j` of chunk `i` comes from device `j % 4` with state
/// `state(i, j)`.
pub fn sealed_fixture(
    n_chunks: usize,
    per_chunk: usize,
    state: impl Fn(usize, usize) -> SensorState,
    finalize: bool,
) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::create(dir.path().join("store")).unwrap();
    let mut sealer = Sealer::new(KeyPair::generate(KeyRole::Enclave)).unwrap();
    let mut chunks = Vec::new();
    let mut t = T0;
    for i in 0..n_chunks {
        let mut open = sealer.open_chunk(None).unwrap();
        for j in 0..per_chunk {
            t += 1000;
            let r = reading(&device((j % 4) as u8), (j % 7) as u8, t);
            open.seal_append(StatefulReading::new(r, state(i, j)));
        }
        let sc = sealer.seal(open).unwrap().unwrap();
        store.put_sealed_chunk(&sc).unwrap();
        chunks.push(sc);
    }
    let terminal = finalize.then(|| sealer.finalize().unwrap());
    store
        .put_anchors(&Anchors {
            enclave_key: Some(sealer.public_key()),
            genesis: Some(*sealer.genesis()),
            terminal,
        })
        .unwrap();
    Fixture {
        dir,
        store,
        pk: sealer.public_key(),
        chunks,
    }
}

pub fn audit_all(store: &Store, pk: &PublicKey, last: u64) -> Vec<Verdict> {
    audit_range(&store.get_auditor_bundle(1..=last).unwrap(), pk, 1).verdicts
}

/// Outcomes as their short names, for compact assertions.
pub fn outcomes(vs: &[Verdict]) -> Vec<String> {
    vs.iter().map(|v| v.outcome.to_string()).collect()
}

/// A user bundle for `device`, fetched through the pre-shared-key hook.
pub fn user_bundle(store: &Store, first: u64, last: u64, device: &[u8]) -> VerifierBundle {
    let dev = DeviceId::new(device.to_vec()).unwrap();
    let key = [7u8; 32];
    let mut auth = PreSharedKeyAuth::new();
    auth.enroll(dev.clone(), key);
    let req = UserRequest {
        token: PreSharedKeyAuth::token_for(&key, &dev),
        device: dev,
    };
    store.get_user_bundle(first..=last, &req, &auth).unwrap()
}
