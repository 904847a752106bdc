//! Hash-chain arithmetic shared by the sealer and the verifiers.
//!
//! Auditor chain over the `i`-th record of a chunk:
//!
//! ```text
//! h_0 = SHA-256(0x00 * 8)
//! h_i = SHA-256(enc_i || h_{i-1})
//! ```
//!
//! where `enc_i` is the canonical encoding for Active readings and the
//! redacted user record `o_i || LP(sensor) || state || time` for Passive
//! ones. User chain:
//!
//! ```text
//! o_i    = SHA-256(LP(device) || time)
//! hu_i   = SHA-256(o_i || state)
//! hu_end = hu_1 ^ hu_2 ^ ... ^ hu_n
//! ```
//!
//! Each chunk is closed by `S_eoc = g_prev ^ g_self ^ g_next`.

use crate::crypto::{hash, hash_parts, xor32, xor_into, Digest, RandomString};
use crate::model::{put_lp, Cursor, ModelError, SensorId, SensorState, StatefulReading, Timestamp};

/// Digest every chain starts from: SHA-256 of eight zero bytes.
pub fn initial_digest() -> Digest {
    hash(&[0u8; 8])
}

/// Privacy digest binding a device to the time of one of its readings.
pub fn occurrence_digest(device: &[u8], time: Timestamp) -> Digest {
    let mut buf = Vec::with_capacity(2 + device.len() + 8);
    put_lp(&mut buf, device);
    buf.extend_from_slice(&time.to_be_bytes());
    hash(&buf)
}

/// `hu_i`: the per-record term folded into the user proof.
pub fn user_term(o: &Digest, state: SensorState) -> Digest {
    hash_parts(&[o.as_bytes(), &[state.as_byte()]])
}

/// One auditor-chain step.
pub fn chain_step(encoded: &[u8], prev: &Digest) -> Digest {
    hash_parts(&[encoded, prev.as_bytes()])
}

pub fn end_of_chunk(prev: &RandomString, own: &RandomString, next: &RandomString) -> [u8; 32] {
    let mut s = xor32(prev.as_bytes(), own.as_bytes());
    xor_into(&mut s, next.as_bytes());
    s
}

/// The 32-byte value a chunk proof signs: `digest ^ S_eoc`.
pub fn proof_payload(digest: &Digest, eoc: &[u8; 32]) -> [u8; 32] {
    xor32(digest.as_bytes(), eoc)
}

/// Per-reading record persisted for every reading of a chunk. It is the
/// only view of a reading that user verifiers receive, and the auditor-chain
/// input for Passive readings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub occurrence: Digest,
    pub sensor: SensorId,
    pub state: SensorState,
    pub time: Timestamp,
}

impl UserRecord {
    pub fn for_reading(r: &StatefulReading) -> Self {
        Self {
            occurrence: occurrence_digest(r.device().as_bytes(), r.time()),
            sensor: r.sensor().clone(),
            state: r.state,
            time: r.time(),
        }
    }

    /// `o_i || LP(sensor) || state || time (u64 BE)`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self.occurrence.as_bytes());
        put_lp(out, self.sensor.as_bytes());
        out.push(self.state.as_byte());
        out.extend_from_slice(&self.time.to_be_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encoded_len(&self) -> usize {
        32 + 2 + self.sensor.as_bytes().len() + 1 + 8
    }

    pub(crate) fn decode_from(cur: &mut Cursor<'_>) -> Result<Self, ModelError> {
        let occurrence = Digest(cur.array()?);
        let sensor = SensorId::new(cur.lp()?)?;
        let state = SensorState::from_byte(cur.u8()?)?;
        let time = Timestamp::new(cur.u64_be()?)?;
        Ok(Self {
            occurrence,
            sensor,
            state,
            time,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut cur = Cursor::new(bytes);
        let r = Self::decode_from(&mut cur)?;
        cur.finish()?;
        Ok(r)
    }

    /// True when this record describes `r` (device via its occurrence digest).
    pub fn describes(&self, r: &StatefulReading) -> bool {
        self.state == r.state
            && self.time == r.time()
            && &self.sensor == r.sensor()
            && self.occurrence == occurrence_digest(r.device().as_bytes(), r.time())
    }
}

/// Running auditor-chain digest.
#[derive(Clone, Debug)]
pub struct ChainFold {
    digest: Digest,
    scratch: Vec<u8>,
}

impl Default for ChainFold {
    fn default() -> Self {
        Self {
            digest: initial_digest(),
            scratch: Vec::with_capacity(160),
        }
    }
}

impl ChainFold {
    pub fn push_active(&mut self, r: &StatefulReading) {
        self.scratch.clear();
        crate::model::write_canonical(&mut self.scratch, r);
        self.digest = chain_step(&self.scratch, &self.digest);
    }

    pub fn push_redacted(&mut self, rec: &UserRecord) {
        self.scratch.clear();
        rec.encode_into(&mut self.scratch);
        self.digest = chain_step(&self.scratch, &self.digest);
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }
}

/// Running XOR of `hu_i` terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UserFold([u8; 32]);

impl UserFold {
    pub fn push(&mut self, rec: &UserRecord) {
        xor_into(
            &mut self.0,
            user_term(&rec.occurrence, rec.state).as_bytes(),
        );
    }

    pub fn digest(&self) -> Digest {
        Digest(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeviceId, SensorReading};

    #[test]
    fn initial_digest_is_hash_of_zero_u64() {
        assert_eq!(
            initial_digest().to_hex(),
            "af5570f5a1810b7af78caf4bc70a660f0df51e42baf91d4de5b2328de0e83dfc"
        );
    }

    #[test]
    fn same_device_distinct_times_distinct_occurrences() {
        let d = [1u8, 2, 3, 4, 5, 6];
        let a = occurrence_digest(&d, Timestamp::new(1000).unwrap());
        let b = occurrence_digest(&d, Timestamp::new(1001).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn user_record_round_trip() {
        let r = StatefulReading::new(
            SensorReading::new(
                DeviceId::new(vec![9; 6]).unwrap(),
                SensorId::new(b"ap-17".to_vec()).unwrap(),
                Timestamp::new(123_456).unwrap(),
            ),
            SensorState::Passive,
        );
        let rec = UserRecord::for_reading(&r);
        assert!(rec.describes(&r));
        let enc = rec.encode();
        assert_eq!(enc.len(), rec.encoded_len());
        assert_eq!(UserRecord::decode(&enc).unwrap(), rec);
    }

    #[test]
    fn xor_fold_is_order_independent() {
        let recs: Vec<UserRecord> = (1..=5u64)
            .map(|t| UserRecord {
                occurrence: hash(&t.to_be_bytes()),
                sensor: SensorId::new(b"s".to_vec()).unwrap(),
                state: SensorState::Active,
                time: Timestamp::new(t).unwrap(),
            })
            .collect();
        let mut fwd = UserFold::default();
        recs.iter().for_each(|r| fwd.push(r));
        let mut rev = UserFold::default();
        recs.iter().rev().for_each(|r| rev.push(r));
        assert_eq!(fwd, rev);
    }
}
