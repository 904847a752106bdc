//! Chunk sealing: open chunks, proofs, and the signed stream boundary
//! anchors.

use crate::chain::{end_of_chunk, proof_payload, ChainFold, UserFold, UserRecord};
use crate::crypto::{
    self, fresh_random_string, Digest, KeyPair, KeyRole, PublicKey, RandomString, Signature,
};
use crate::model::{canonical_len, StatefulReading, Timestamp};

use super::EnclaveError;

const GENESIS_TAG: &[u8] = b"sensorseal.genesis.v1";
const TERMINAL_TAG: &[u8] = b"sensorseal.terminal.v1";

/// A chunk closes when either limit is reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPolicy {
    pub max_bytes: usize,
    pub max_window_ms: u64,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            max_bytes: 5 * 1024 * 1024,
            max_window_ms: 30 * 60 * 1000,
        }
    }
}

impl ChunkPolicy {
    pub fn new(max_bytes: usize, max_window_ms: u64) -> Result<Self, EnclaveError> {
        if max_bytes == 0 || max_window_ms == 0 {
            return Err(EnclaveError::BadPolicy);
        }
        Ok(Self {
            max_bytes,
            max_window_ms,
        })
    }
}

/// Bytes a reading occupies in a persisted chunk.
pub fn persisted_size(r: &StatefulReading) -> usize {
    let record = 32 + 2 + r.sensor().as_bytes().len() + 1 + 8;
    if r.state.is_active() {
        record + canonical_len(r) + 4 + r.reading.params.len()
    } else {
        record
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProofOfIntegrity {
    pub g_self: RandomString,
    pub sig: Signature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProofForUser {
    pub g_self: RandomString,
    pub sig: Signature,
}

/// Verify either proof's signature over `digest ^ S_eoc`.
pub fn proof_verifies(
    pk: &PublicKey,
    digest: &Digest,
    g_prev: &RandomString,
    g_self: &RandomString,
    g_next: &RandomString,
    sig: &Signature,
) -> bool {
    let payload = proof_payload(digest, &end_of_chunk(g_prev, g_self, g_next));
    crypto::verify(pk, &payload, sig)
}

/// Values the sealer signed, kept in memory for cross-checking only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SealTrace {
    pub chain_digest: Digest,
    pub user_digest: Digest,
    pub end_of_chunk: [u8; 32],
}

/// A closed chunk. `records` holds one user record per reading in sealing
/// order; `active` holds the cleartext of the Active ones, also in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedChunk {
    pub index: u64,
    pub active: Vec<StatefulReading>,
    pub records: Vec<UserRecord>,
    pub pi: ProofOfIntegrity,
    pub pu: ProofForUser,
    pub ruleset_digest: Option<Digest>,
    pub(crate) trace: Option<SealTrace>,
}

impl SealedChunk {
    pub fn from_parts(
        index: u64,
        active: Vec<StatefulReading>,
        records: Vec<UserRecord>,
        pi: ProofOfIntegrity,
        pu: ProofForUser,
        ruleset_digest: Option<Digest>,
    ) -> Self {
        Self {
            index,
            active,
            records,
            pi,
            pu,
            ruleset_digest,
            trace: None,
        }
    }

    pub fn g_self(&self) -> RandomString {
        self.pi.g_self
    }

    /// Number of readings sealed, Active and Passive.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn redacted_passive(&self) -> impl Iterator<Item = &UserRecord> {
        self.records.iter().filter(|r| !r.state.is_active())
    }

    /// Present only on chunks produced by this process's sealer.
    pub fn sealing_trace(&self) -> Option<&SealTrace> {
        self.trace.as_ref()
    }
}

/// A chunk accepting readings. Closing consumes it, so a sealed chunk can
/// never be appended to.
#[derive(Debug)]
pub struct OpenChunk {
    index: u64,
    active: Vec<StatefulReading>,
    records: Vec<UserRecord>,
    chain: ChainFold,
    users: UserFold,
    g_self: RandomString,
    g_next: RandomString,
    opened_at: Option<Timestamp>,
    bytes: usize,
    ruleset_digest: Option<Digest>,
}

impl OpenChunk {
    pub fn seal_append(&mut self, r: StatefulReading) {
        let rec = UserRecord::for_reading(&r);
        if r.state.is_active() {
            self.chain.push_active(&r);
        } else {
            self.chain.push_redacted(&rec);
        }
        self.users.push(&rec);
        self.opened_at.get_or_insert(r.time());
        self.bytes += persisted_size(&r);
        self.records.push(rec);
        if r.state.is_active() {
            self.active.push(r);
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn running_digest(&self) -> Digest {
        self.chain.digest()
    }

    pub fn user_digest(&self) -> Digest {
        self.users.digest()
    }

    pub fn records(&self) -> &[UserRecord] {
        &self.records
    }

    pub fn g_self(&self) -> RandomString {
        self.g_self
    }

    pub fn g_next(&self) -> RandomString {
        self.g_next
    }

    pub fn byte_size(&self) -> usize {
        self.bytes
    }

    pub fn opened_at(&self) -> Option<Timestamp> {
        self.opened_at
    }

    pub fn ruleset_digest(&self) -> Option<Digest> {
        self.ruleset_digest
    }

    /// Time at which the window limit closes this chunk.
    pub fn deadline(&self, policy: &ChunkPolicy) -> Option<u64> {
        self.opened_at
            .map(|t| t.millis().saturating_add(policy.max_window_ms))
    }

    /// Whether appending `r` would break either limit. An empty chunk always
    /// accepts its first reading.
    pub fn must_close_before(&self, r: &StatefulReading, policy: &ChunkPolicy) -> bool {
        if self.is_empty() {
            return false;
        }
        self.deadline(policy)
            .is_some_and(|d| r.time().millis() >= d)
            || self.bytes + persisted_size(r) > policy.max_bytes
    }
}

/// Signed publication of the seed string g*, the stand-in predecessor of
/// chunk 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenesisAnchor {
    pub seed: RandomString,
    pub sig: Signature,
}

impl GenesisAnchor {
    fn payload(seed: &RandomString) -> Vec<u8> {
        [GENESIS_TAG, seed.as_bytes()].concat()
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        crypto::verify(pk, &Self::payload(&self.seed), &self.sig)
    }
}

/// Signed publication of the string that closed the last chunk of a
/// finalized stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerminalAnchor {
    pub last_index: u64,
    pub terminal: RandomString,
    pub sig: Signature,
}

impl TerminalAnchor {
    fn payload(last_index: u64, terminal: &RandomString) -> Vec<u8> {
        [TERMINAL_TAG, &last_index.to_be_bytes(), terminal.as_bytes()].concat()
    }

    pub fn verify(&self, pk: &PublicKey) -> bool {
        crypto::verify(
            pk,
            &Self::payload(self.last_index, &self.terminal),
            &self.sig,
        )
    }
}

/// Holds PR_E and threads random strings between consecutive chunks.
pub struct Sealer {
    key: KeyPair,
    genesis: GenesisAnchor,
    g_prev: RandomString,
    carry: RandomString,
    next_index: u64,
    terminal: Option<TerminalAnchor>,
}

impl Sealer {
    pub fn new(key: KeyPair) -> Result<Self, EnclaveError> {
        if key.role() != KeyRole::Enclave {
            return Err(EnclaveError::WrongKeyRole(key.role()));
        }
        let seed = fresh_random_string()?;
        let genesis = GenesisAnchor {
            seed,
            sig: key.sign(&GenesisAnchor::payload(&seed)),
        };
        Ok(Self {
            key,
            genesis,
            g_prev: seed,
            carry: fresh_random_string()?,
            next_index: 1,
            terminal: None,
        })
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    pub(crate) fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn genesis(&self) -> &GenesisAnchor {
        &self.genesis
    }

    /// Index the next sealed chunk will carry.
    pub fn next_index(&self) -> u64 {
        self.next_index
    }

    /// Open the next chunk. Its string was drawn when the previous chunk
    /// opened; the successor's string is drawn now.
    pub fn open_chunk(
        &mut self,
        ruleset_digest: Option<Digest>,
    ) -> Result<OpenChunk, EnclaveError> {
        if self.terminal.is_some() {
            return Err(EnclaveError::Finalized);
        }
        Ok(OpenChunk {
            index: self.next_index,
            active: Vec::new(),
            records: Vec::new(),
            chain: ChainFold::default(),
            users: UserFold::default(),
            g_self: self.carry,
            g_next: fresh_random_string()?,
            opened_at: None,
            bytes: 0,
            ruleset_digest,
        })
    }

    /// Sign both proofs of `chunk` against `g_prev` and return the sealed
    /// chunk plus the string its successor must use as its own.
    pub fn close_chunk(
        &self,
        chunk: OpenChunk,
        g_prev: &RandomString,
    ) -> Result<(SealedChunk, RandomString), EnclaveError> {
        if chunk.is_empty() {
            return Err(EnclaveError::EmptyChunk);
        }
        let eoc = end_of_chunk(g_prev, &chunk.g_self, &chunk.g_next);
        let h_n = chunk.chain.digest();
        let hu_end = chunk.users.digest();
        let pi = ProofOfIntegrity {
            g_self: chunk.g_self,
            sig: self.key.sign(&proof_payload(&h_n, &eoc)),
        };
        let pu = ProofForUser {
            g_self: chunk.g_self,
            sig: self.key.sign(&proof_payload(&hu_end, &eoc)),
        };
        let sealed = SealedChunk {
            index: chunk.index,
            active: chunk.active,
            records: chunk.records,
            pi,
            pu,
            ruleset_digest: chunk.ruleset_digest,
            trace: Some(SealTrace {
                chain_digest: h_n,
                user_digest: hu_end,
                end_of_chunk: eoc,
            }),
        };
        Ok((sealed, chunk.g_next))
    }

    /// Close `chunk` as the stream's next chunk. Empty chunks are dropped
    /// without consuming an index.
    pub fn seal(&mut self, chunk: OpenChunk) -> Result<Option<SealedChunk>, EnclaveError> {
        if chunk.index != self.next_index || chunk.g_self != self.carry {
            return Err(EnclaveError::StaleChunk(chunk.index));
        }
        if chunk.is_empty() {
            return Ok(None);
        }
        let g_self = chunk.g_self;
        let (sealed, g_next) = self.close_chunk(chunk, &self.g_prev)?;
        self.g_prev = g_self;
        self.carry = g_next;
        self.next_index += 1;
        Ok(Some(sealed))
    }

    /// End the stream, publishing the string the last chunk was closed with.
    pub fn finalize(&mut self) -> Result<TerminalAnchor, EnclaveError> {
        if self.terminal.is_some() {
            return Err(EnclaveError::Finalized);
        }
        let last_index = self.next_index - 1;
        let anchor = TerminalAnchor {
            last_index,
            terminal: self.carry,
            sig: self
                .key
                .sign(&TerminalAnchor::payload(last_index, &self.carry)),
        };
        self.terminal = Some(anchor);
        Ok(anchor)
    }

    pub fn terminal(&self) -> Option<&TerminalAnchor> {
        self.terminal.as_ref()
    }
}
