//! Notification phase: user registry, signed notice messages, notifier
//! receipts and device acknowledgments.
//!
//! Under the notice-only model the enclave hands an envelope sealed to the
//! notifier, which decrypts it, signs a notice carrying one sealed copy of
//! the rule text per registered user, and returns a signed receipt. Rules
//! are enforceable only once the enclave holds that receipt. Under the
//! notice-and-ACK model the enclave signs the notice itself and retains a
//! device's data only after that device has acknowledged the notice.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::crypto::{self, CryptoError, Digest, KeyPair, KeyRole, PublicKey, Signature};
use crate::model::{put_lp, Cursor, DeviceId, ModelError, Timestamp};
use crate::rules::{RuleError, RuleSet};

const NOTICE_TAG: &[u8] = b"sensorseal.notice.v1";
const RECEIPT_TAG: &[u8] = b"sensorseal.receipt.v1";
const ACK_TAG: &[u8] = b"sensorseal.ack.v1";

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error("device {0} is already registered")]
    DuplicateDevice(DeviceId),
    #[error("device {0} is not registered")]
    UnknownDevice(DeviceId),
    #[error("signature did not verify: {0}")]
    BadSignature(&'static str),
    #[error("notice envelope could not be opened")]
    EnvelopeRejected(#[source] CryptoError),
    #[error("decrypted rules digest {got} does not match announced {want}")]
    DigestMismatch { got: Digest, want: Digest },
    #[error("no delivery for registry slot {0}")]
    NoDelivery(usize),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed record: {0}")]
    Malformed(String),
}

impl From<ModelError> for NotifyError {
    fn from(e: ModelError) -> Self {
        NotifyError::Malformed(e.to_string())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoticeId(pub [u8; 16]);

impl NoticeId {
    pub fn derive(ruleset_digest: &Digest, issued_at: Timestamp, version: u64) -> Self {
        let d = crypto::hash_parts(&[
            b"notice-id",
            ruleset_digest.as_bytes(),
            &issued_at.to_be_bytes(),
            &version.to_be_bytes(),
        ]);
        let mut id = [0u8; 16];
        id.copy_from_slice(&d.0[..16]);
        Self(id)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, NotifyError> {
        let mut id = [0u8; 16];
        hex::decode_to_slice(s, &mut id).map_err(CryptoError::from)?;
        Ok(Self(id))
    }
}

impl fmt::Debug for NoticeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NoticeId({})", self.to_hex())
    }
}

impl fmt::Display for NoticeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NotificationModel {
    /// Notice-only: mandatory capture, trusted notifier guarantees delivery.
    NoticeOnly,
    /// Notice-and-ACK: retention requires explicit device consent.
    NoticeAndAck,
}

impl NotificationModel {
    fn byte(self) -> u8 {
        match self {
            Self::NoticeOnly => 1,
            Self::NoticeAndAck => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self, NotifyError> {
        match b {
            1 => Ok(Self::NoticeOnly),
            2 => Ok(Self::NoticeAndAck),
            other => Err(NotifyError::Malformed(format!("model byte {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRegistration {
    pub device: DeviceId,
    pub contact: String,
    pub public_key: PublicKey,
}

/// Devices registered with the trusted authority, in registration order.
/// A device's position is its delivery slot in notice messages.
#[derive(Clone, Debug, Default)]
pub struct UserRegistry {
    regs: Vec<UserRegistration>,
    by_device: HashMap<DeviceId, usize>,
}

impl UserRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, reg: UserRegistration) -> Result<usize, NotifyError> {
        if self.by_device.contains_key(&reg.device) {
            return Err(NotifyError::DuplicateDevice(reg.device));
        }
        let slot = self.regs.len();
        self.by_device.insert(reg.device.clone(), slot);
        self.regs.push(reg);
        Ok(slot)
    }

    pub fn slot_of(&self, device: &DeviceId) -> Option<usize> {
        self.by_device.get(device).copied()
    }

    pub fn get(&self, device: &DeviceId) -> Option<&UserRegistration> {
        self.slot_of(device).map(|i| &self.regs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserRegistration> {
        self.regs.iter()
    }

    pub fn len(&self) -> usize {
        self.regs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty()
    }

    /// One registration per line: `<device hex> <contact> <public key hex>`.
    pub fn to_text(&self) -> String {
        self.regs
            .iter()
            .map(|r| format!("{} {} {}\n", r.device, r.contact, r.public_key.to_hex()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, NotifyError> {
        let mut reg = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(NotifyError::Malformed(format!("registry line {}", i + 1)));
            }
            reg.register(UserRegistration {
                device: DeviceId::from_hex(parts[0])?,
                contact: parts[1].to_string(),
                public_key: PublicKey::from_hex(parts[2])?,
            })?;
        }
        Ok(reg)
    }
}

/// Rule set sealed by the enclave to the notifier's public key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoticeEnvelope {
    pub notice_id: NoticeId,
    pub ruleset_digest: Digest,
    pub issued_at: Timestamp,
    pub ciphertext: Vec<u8>,
}

/// A signed notice. `deliveries[slot]` is the rule text sealed to the
/// registered user in that slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoticeMessage {
    pub notice_id: NoticeId,
    pub model: NotificationModel,
    pub ruleset_digest: Digest,
    pub issued_at: Timestamp,
    pub deliveries: Vec<Vec<u8>>,
    pub signer: KeyRole,
    pub sig: Signature,
}

impl NoticeMessage {
    /// Seal `rules` to every registered user and sign the result.
    pub fn build(
        notice_id: NoticeId,
        model: NotificationModel,
        rules: &RuleSet,
        issued_at: Timestamp,
        users: &UserRegistry,
        signer: &KeyPair,
    ) -> Result<Self, NotifyError> {
        let text = rules.to_text();
        let deliveries = users
            .iter()
            .map(|u| crypto::seal_to_enclave(&u.public_key, text.as_bytes()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut msg = Self {
            notice_id,
            model,
            ruleset_digest: rules.digest(),
            issued_at,
            deliveries,
            signer: signer.role(),
            sig: Signature([0u8; 64]),
        };
        msg.sig = signer.sign(&msg.signed_bytes());
        Ok(msg)
    }

    fn signed_bytes(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(128);
        for d in &self.deliveries {
            h.extend_from_slice(&(d.len() as u32).to_be_bytes());
            h.extend_from_slice(d);
        }
        let delivery_digest = crypto::hash(&h);
        let mut out = Vec::with_capacity(NOTICE_TAG.len() + 16 + 1 + 32 + 8 + 32 + 1);
        out.extend_from_slice(NOTICE_TAG);
        out.extend_from_slice(&self.notice_id.0);
        out.push(self.model.byte());
        out.extend_from_slice(self.ruleset_digest.as_bytes());
        out.extend_from_slice(&self.issued_at.to_be_bytes());
        out.extend_from_slice(delivery_digest.as_bytes());
        out.push(self.signer as u8);
        out
    }

    pub fn verify(&self, signer: &PublicKey) -> bool {
        signer.role() == self.signer && crypto::verify(signer, &self.signed_bytes(), &self.sig)
    }

    /// Decrypt the copy addressed to `slot` and check it against the
    /// announced digest.
    pub fn open_for(&self, slot: usize, device_key: &KeyPair) -> Result<RuleSet, NotifyError> {
        let blob = self
            .deliveries
            .get(slot)
            .ok_or(NotifyError::NoDelivery(slot))?;
        let text = device_key
            .open(blob)
            .map_err(NotifyError::EnvelopeRejected)?;
        let text = String::from_utf8(text).map_err(|e| NotifyError::Malformed(e.to_string()))?;
        let rs = RuleSet::parse(&text)?;
        if rs.digest() != self.ruleset_digest {
            return Err(NotifyError::DigestMismatch {
                got: rs.digest(),
                want: self.ruleset_digest,
            });
        }
        Ok(rs)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.notice_id.0);
        out.push(self.model.byte());
        out.extend_from_slice(self.ruleset_digest.as_bytes());
        out.extend_from_slice(&self.issued_at.to_be_bytes());
        out.extend_from_slice(&(self.deliveries.len() as u32).to_be_bytes());
        for d in &self.deliveries {
            out.extend_from_slice(&(d.len() as u32).to_be_bytes());
            out.extend_from_slice(d);
        }
        out.push(self.signer as u8);
        out.extend_from_slice(self.sig.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NotifyError> {
        let mut cur = Cursor::new(bytes);
        let notice_id = NoticeId(cur.array()?);
        let model = NotificationModel::from_byte(cur.u8()?)?;
        let ruleset_digest = Digest(cur.array()?);
        let issued_at = Timestamp::new(cur.u64_be()?)?;
        let count = u32::from_be_bytes(cur.array()?) as usize;
        if count > cur.remaining() / 4 {
            return Err(NotifyError::Malformed("delivery count".into()));
        }
        let mut deliveries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_be_bytes(cur.array()?) as usize;
            deliveries.push(cur.take(len)?.to_vec());
        }
        let signer = match cur.u8()? {
            1 => KeyRole::Enclave,
            2 => KeyRole::Notifier,
            3 => KeyRole::Device,
            b => return Err(NotifyError::Malformed(format!("signer role {b}"))),
        };
        let sig = Signature(cur.array()?);
        cur.finish()?;
        Ok(Self {
            notice_id,
            model,
            ruleset_digest,
            issued_at,
            deliveries,
            signer,
            sig,
        })
    }
}

/// The notifier's signed acknowledgment-of-transmission to the enclave.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotifierReceipt {
    pub notice_id: NoticeId,
    pub ruleset_digest: Digest,
    pub sig: Signature,
}

impl NotifierReceipt {
    fn payload(notice_id: &NoticeId, digest: &Digest) -> Vec<u8> {
        [RECEIPT_TAG, &notice_id.0, digest.as_bytes()].concat()
    }

    pub fn verify(&self, notifier: &PublicKey) -> bool {
        notifier.role() == KeyRole::Notifier
            && crypto::verify(
                notifier,
                &Self::payload(&self.notice_id, &self.ruleset_digest),
                &self.sig,
            )
    }

    pub fn encode(&self) -> Vec<u8> {
        [
            &self.notice_id.0[..],
            self.ruleset_digest.as_bytes(),
            self.sig.as_bytes(),
        ]
        .concat()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NotifyError> {
        let mut cur = Cursor::new(bytes);
        let r = Self {
            notice_id: NoticeId(cur.array()?),
            ruleset_digest: Digest(cur.array()?),
            sig: Signature(cur.array()?),
        };
        cur.finish()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub slot: usize,
    pub contact: String,
    pub delivered: bool,
}

#[derive(Clone, Debug)]
pub struct Publication {
    pub notice: NoticeMessage,
    pub deliveries: Vec<DeliveryRecord>,
    pub receipt: NotifierReceipt,
}

/// The trusted notifier role.
pub struct Notifier {
    keys: KeyPair,
    users: UserRegistry,
    unreachable: HashSet<String>,
    version: u64,
}

impl Notifier {
    pub fn new(keys: KeyPair, users: UserRegistry) -> Self {
        Self {
            keys,
            users,
            unreachable: HashSet::new(),
            version: 0,
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn users(&self) -> &UserRegistry {
        &self.users
    }

    /// Simulate a contact whose delivery fails.
    pub fn set_unreachable(&mut self, contact: impl Into<String>) {
        self.unreachable.insert(contact.into());
    }

    /// Decrypt the enclave's envelope, sign the notice, fan it out to every
    /// registered user and return a receipt for the enclave. Delivery is
    /// best effort; failures are recorded, not fatal.
    pub fn publish_notice_nom(&mut self, env: &NoticeEnvelope) -> Result<Publication, NotifyError> {
        let text = self
            .keys
            .open(&env.ciphertext)
            .map_err(NotifyError::EnvelopeRejected)?;
        let text = String::from_utf8(text).map_err(|e| NotifyError::Malformed(e.to_string()))?;
        let rules = RuleSet::parse(&text)?;
        if rules.digest() != env.ruleset_digest {
            return Err(NotifyError::DigestMismatch {
                got: rules.digest(),
                want: env.ruleset_digest,
            });
        }
        let notice = NoticeMessage::build(
            env.notice_id,
            NotificationModel::NoticeOnly,
            &rules,
            env.issued_at,
            &self.users,
            &self.keys,
        )?;
        let deliveries = self
            .users
            .iter()
            .enumerate()
            .map(|(slot, u)| DeliveryRecord {
                slot,
                contact: u.contact.clone(),
                delivered: !self.unreachable.contains(&u.contact),
            })
            .collect();
        let receipt = NotifierReceipt {
            notice_id: env.notice_id,
            ruleset_digest: env.ruleset_digest,
            sig: self.keys.sign(&NotifierReceipt::payload(
                &env.notice_id,
                &env.ruleset_digest,
            )),
        };
        self.version += 1;
        log::info!(
            "notice {} published to {} users",
            env.notice_id,
            self.users.len()
        );
        Ok(Publication {
            notice,
            deliveries,
            receipt,
        })
    }
}

/// A device's signed consent to one notice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Acknowledgment {
    pub notice_id: NoticeId,
    pub device: DeviceId,
    pub device_sig: Signature,
    pub received_at: Timestamp,
}

impl Acknowledgment {
    fn payload(notice_id: &NoticeId, device: &DeviceId) -> Vec<u8> {
        let mut out = Vec::with_capacity(ACK_TAG.len() + 16 + 2 + device.as_bytes().len());
        out.extend_from_slice(ACK_TAG);
        out.extend_from_slice(&notice_id.0);
        put_lp(&mut out, device.as_bytes());
        out
    }

    pub fn create(
        notice_id: NoticeId,
        device: DeviceId,
        key: &KeyPair,
        received_at: Timestamp,
    ) -> Self {
        let device_sig = key.sign(&Self::payload(&notice_id, &device));
        Self {
            notice_id,
            device,
            device_sig,
            received_at,
        }
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        crypto::verify(
            key,
            &Self::payload(&self.notice_id, &self.device),
            &self.device_sig,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 2 + 64 + 64 + 8);
        out.extend_from_slice(&self.notice_id.0);
        put_lp(&mut out, self.device.as_bytes());
        out.extend_from_slice(self.device_sig.as_bytes());
        out.extend_from_slice(&self.received_at.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NotifyError> {
        let mut cur = Cursor::new(bytes);
        let ack = Self {
            notice_id: NoticeId(cur.array()?),
            device: DeviceId::new(cur.lp()?)?,
            device_sig: Signature(cur.array()?),
            received_at: Timestamp::new(cur.u64_be()?)?,
        };
        cur.finish()?;
        Ok(ack)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AckOutcome {
    Added,
    Duplicate,
}

/// Append-only log of verified acknowledgments.
#[derive(Clone, Debug, Default)]
pub struct AckRegistry {
    log: Vec<Acknowledgment>,
    seen: HashSet<(NoticeId, DeviceId)>,
}

impl AckRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_ack(
        &mut self,
        ack: Acknowledgment,
        users: &UserRegistry,
    ) -> Result<AckOutcome, NotifyError> {
        let reg = users
            .get(&ack.device)
            .ok_or_else(|| NotifyError::UnknownDevice(ack.device.clone()))?;
        if !ack.verify(&reg.public_key) {
            return Err(NotifyError::BadSignature("acknowledgment"));
        }
        if !self.seen.insert((ack.notice_id, ack.device.clone())) {
            return Ok(AckOutcome::Duplicate);
        }
        self.log.push(ack);
        Ok(AckOutcome::Added)
    }

    pub fn consenting(&self, notice_id: &NoticeId) -> HashSet<DeviceId> {
        self.log
            .iter()
            .filter(|a| &a.notice_id == notice_id)
            .map(|a| a.device.clone())
            .collect()
    }

    pub fn has(&self, notice_id: &NoticeId, device: &DeviceId) -> bool {
        self.seen.contains(&(*notice_id, device.clone()))
    }

    pub fn log(&self) -> &[Acknowledgment] {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{Action, DataCaptureRule};

    fn ts(ms: u64) -> Timestamp {
        Timestamp::new(ms).unwrap()
    }

    fn users(n: u8) -> (UserRegistry, Vec<KeyPair>) {
        let mut reg = UserRegistry::new();
        let mut keys = Vec::new();
        for i in 0..n {
            let kp = KeyPair::generate(KeyRole::Device);
            reg.register(UserRegistration {
                device: DeviceId::new(vec![i + 1; 6]).unwrap(),
                contact: format!("user{i}@example.edu"),
                public_key: kp.public(),
            })
            .unwrap();
            keys.push(kp);
        }
        (reg, keys)
    }

    fn sample_rules() -> RuleSet {
        RuleSet::new(
            vec![DataCaptureRule::new("all", Action::OptIn, ts(3))],
            Action::OptOut,
        )
        .unwrap()
    }

    fn envelope(to: &PublicKey, rs: &RuleSet) -> NoticeEnvelope {
        NoticeEnvelope {
            notice_id: NoticeId::derive(&rs.digest(), ts(10), 0),
            ruleset_digest: rs.digest(),
            issued_at: ts(10),
            ciphertext: crypto::seal_to_enclave(to, rs.to_text().as_bytes()).unwrap(),
        }
    }

    #[test]
    fn nom_fan_out() {
        let (reg, keys) = users(3);
        let mut notifier = Notifier::new(KeyPair::generate(KeyRole::Notifier), reg);
        notifier.set_unreachable("user1@example.edu");
        let rs = sample_rules();
        let env = envelope(&notifier.public_key(), &rs);
        let publ = notifier.publish_notice_nom(&env).unwrap();
        assert_eq!(publ.deliveries.len(), 3);
        assert_eq!(publ.deliveries.iter().filter(|d| d.delivered).count(), 2);
        assert!(publ.receipt.verify(&notifier.public_key()));
        assert!(publ.notice.verify(&notifier.public_key()));
        for (slot, k) in keys.iter().enumerate() {
            assert_eq!(publ.notice.open_for(slot, k).unwrap(), rs);
        }
        assert!(publ.notice.open_for(0, &keys[1]).is_err());
        assert_eq!(
            NoticeMessage::decode(&publ.notice.encode()).unwrap(),
            publ.notice
        );
        assert_eq!(
            NotifierReceipt::decode(&publ.receipt.encode()).unwrap(),
            publ.receipt
        );
    }

    #[test]
    fn tampered_envelope_publishes_nothing() {
        let (reg, _) = users(2);
        let mut notifier = Notifier::new(KeyPair::generate(KeyRole::Notifier), reg);
        let mut env = envelope(&notifier.public_key(), &sample_rules());
        env.ciphertext[50] ^= 1;
        assert!(matches!(
            notifier.publish_notice_nom(&env),
            Err(NotifyError::EnvelopeRejected(_))
        ));

        let mut env = envelope(&notifier.public_key(), &sample_rules());
        env.ruleset_digest = crypto::hash(b"other");
        assert!(matches!(
            notifier.publish_notice_nom(&env),
            Err(NotifyError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn notice_signature_binds_content() {
        let (reg, _) = users(1);
        let signer = KeyPair::generate(KeyRole::Enclave);
        let rs = sample_rules();
        let mut msg = NoticeMessage::build(
            NoticeId::derive(&rs.digest(), ts(4), 0),
            NotificationModel::NoticeAndAck,
            &rs,
            ts(4),
            &reg,
            &signer,
        )
        .unwrap();
        assert!(msg.verify(&signer.public()));
        msg.deliveries[0][0] ^= 1;
        assert!(!msg.verify(&signer.public()));
    }

    #[test]
    fn ack_registry() {
        let (reg, keys) = users(2);
        let nid = NoticeId([7; 16]);
        let d1 = DeviceId::new(vec![1; 6]).unwrap();
        let d2 = DeviceId::new(vec![2; 6]).unwrap();
        let mut acks = AckRegistry::new();

        let ack = Acknowledgment::create(nid, d1.clone(), &keys[0], ts(100));
        assert_eq!(Acknowledgment::decode(&ack.encode()).unwrap(), ack);
        assert_eq!(
            acks.register_ack(ack.clone(), &reg).unwrap(),
            AckOutcome::Added
        );
        assert_eq!(acks.register_ack(ack, &reg).unwrap(), AckOutcome::Duplicate);

        // d2 signing with d1's key is an impersonation attempt.
        let forged = Acknowledgment::create(nid, d2.clone(), &keys[0], ts(101));
        assert!(matches!(
            acks.register_ack(forged, &reg),
            Err(NotifyError::BadSignature(_))
        ));
        let stranger = KeyPair::generate(KeyRole::Device);
        let unknown =
            Acknowledgment::create(nid, DeviceId::new(vec![9; 6]).unwrap(), &stranger, ts(5));
        assert!(matches!(
            acks.register_ack(unknown, &reg),
            Err(NotifyError::UnknownDevice(_))
        ));

        let consent = acks.consenting(&nid);
        assert!(consent.contains(&d1));
        assert!(!consent.contains(&d2));
        assert!(acks.consenting(&NoticeId([0; 16])).is_empty());
    }

    #[test]
    fn registry_text_round_trip() {
        let (reg, _) = users(3);
        let back = UserRegistry::parse(&reg.to_text()).unwrap();
        assert_eq!(back.len(), 3);
        for r in reg.iter() {
            assert_eq!(back.get(&r.device), Some(r));
        }
        let mut dup = reg.clone();
        let first = reg.iter().next().unwrap().clone();
        assert!(matches!(
            dup.register(first),
            Err(NotifyError::DuplicateDevice(_))
        ));
    }
}
