//! The simulated trusted enclave.
//!
//! Untrusted code reaches it only through ciphertext submission, rule
//! installation, notifier receipts and device acknowledgments. It returns
//! sealed chunks and notices. PR_E never leaves except through the
//! simulated platform sealing in [`sealed_storage`].

mod sealer;

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::crypto::{self, CryptoError, Digest, KeyPair, KeyRole, PublicKey};
use crate::model::{DeviceId, ModelError, SensorReading, SensorState, StatefulReading, Timestamp};
use crate::notify::{
    AckOutcome, AckRegistry, Acknowledgment, NoticeEnvelope, NoticeId, NoticeMessage,
    NotificationModel, NotifierReceipt, NotifyError, UserRegistry,
};
use crate::rules::{evaluate_with, Action, DataCaptureRule, RuleError, RuleSet};

pub use sealer::{
    persisted_size, proof_verifies, ChunkPolicy, GenesisAnchor, OpenChunk, ProofForUser,
    ProofOfIntegrity, SealTrace, SealedChunk, Sealer, TerminalAnchor,
};

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("chunk has no readings")]
    EmptyChunk,
    #[error("chunk {0} is not the chunk the sealer expects")]
    StaleChunk(u64),
    #[error("stream already finalized")]
    Finalized,
    #[error("chunk limits must be positive")]
    BadPolicy,
    #[error("sealer needs an enclave key, got {0:?}")]
    WrongKeyRole(KeyRole),
    #[error("ciphertext failed authentication")]
    Authentication,
    #[error("reading at {got} precedes last accepted reading at {last}")]
    OutOfOrder { got: u64, last: u64 },
    #[error("no staged rule set awaiting activation")]
    NothingStaged,
    #[error("receipt does not match the staged notice")]
    ReceiptMismatch,
    #[error("receipt signature did not verify under the notifier key")]
    BadReceipt,
    #[error("notice-only model requires a notifier public key")]
    NoNotifier,
    #[error("operation not available under {0:?}")]
    WrongModel(NotificationModel),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Notify(#[from] NotifyError),
    #[error("sealed storage: {0}")]
    Storage(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct EnclaveConfig {
    pub model: NotificationModel,
    pub policy: ChunkPolicy,
    /// Notifier verification key; required under the notice-only model.
    pub notifier: Option<PublicKey>,
}

/// What the untrusted side must forward after a rule install.
#[derive(Clone, Debug)]
pub enum InstallOutcome {
    /// Notice-only: hand to the notifier, return its receipt.
    Envelope(NoticeEnvelope),
    /// Notice-and-ACK: publish; devices acknowledge it.
    Notice(NoticeMessage),
}

impl InstallOutcome {
    pub fn notice_id(&self) -> NoticeId {
        match self {
            Self::Envelope(e) => e.notice_id,
            Self::Notice(n) => n.notice_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlertKind {
    Authentication,
    Malformed,
    OutOfOrder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alert {
    pub kind: AlertKind,
    pub detail: String,
}

/// A rule that expired and was evicted from the working set at a boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpiredRule {
    pub evicted_at: Timestamp,
    pub ruleset_digest: Digest,
    pub rule: DataCaptureRule,
}

struct Live {
    rules: RuleSet,
    notice_id: NoticeId,
    working: Vec<usize>,
}

struct Staged {
    rules: RuleSet,
    notice_id: NoticeId,
    receipt: bool,
}

pub struct Enclave {
    sealer: Sealer,
    config: EnclaveConfig,
    users: UserRegistry,
    acks: AckRegistry,
    live: Option<Live>,
    staged: Option<Staged>,
    consent: HashSet<DeviceId>,
    open: Option<OpenChunk>,
    last_time: Option<Timestamp>,
    alerts: Vec<Alert>,
    expired: Vec<ExpiredRule>,
    evicted: HashSet<String>,
    notices: u64,
    published: Vec<Digest>,
}

impl Enclave {
    pub fn new(
        key: KeyPair,
        config: EnclaveConfig,
        users: UserRegistry,
    ) -> Result<Self, EnclaveError> {
        if config.model == NotificationModel::NoticeOnly && config.notifier.is_none() {
            return Err(EnclaveError::NoNotifier);
        }
        Ok(Self {
            sealer: Sealer::new(key)?,
            config,
            users,
            acks: AckRegistry::new(),
            live: None,
            staged: None,
            consent: HashSet::new(),
            open: None,
            last_time: None,
            alerts: Vec::new(),
            expired: Vec::new(),
            evicted: HashSet::new(),
            notices: 0,
            published: Vec::new(),
        })
    }

    pub fn public_key(&self) -> PublicKey {
        self.sealer.public_key()
    }

    pub fn genesis(&self) -> &GenesisAnchor {
        self.sealer.genesis()
    }

    pub fn model(&self) -> NotificationModel {
        self.config.model
    }

    pub fn policy(&self) -> &ChunkPolicy {
        &self.config.policy
    }

    /// Digest of the rules governing the currently open chunk, if any.
    pub fn current_ruleset_digest(&self) -> Option<Digest> {
        self.live.as_ref().map(|l| l.rules.digest())
    }

    /// Digests of every rule set this enclave has issued a notice for.
    pub fn published_digests(&self) -> &[Digest] {
        &self.published
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn acks(&self) -> &AckRegistry {
        &self.acks
    }

    pub fn drain_expired(&mut self) -> Vec<ExpiredRule> {
        std::mem::take(&mut self.expired)
    }

    /// Merge `additions` into the live rules and issue a notice for the
    /// result. The new set governs chunks opened after activation: under
    /// notice-only, once the notifier's receipt is accepted; under
    /// notice-and-ACK, at the next boundary, for acknowledging devices only.
    pub fn install_ruleset(
        &mut self,
        additions: RuleSet,
        issued_at: Timestamp,
    ) -> Result<InstallOutcome, EnclaveError> {
        let merged = match (&self.staged, &self.live) {
            (Some(s), _) => s.rules.extended(&additions)?,
            (None, Some(l)) => l.rules.extended(&additions)?,
            (None, None) => RuleSet::empty(additions.default_action()).extended(&additions)?,
        };
        let digest = merged.digest();
        let notice_id = NoticeId::derive(&digest, issued_at, self.notices);
        self.notices += 1;
        let outcome = match self.config.model {
            NotificationModel::NoticeOnly => {
                let notifier = self
                    .config
                    .notifier
                    .as_ref()
                    .ok_or(EnclaveError::NoNotifier)?;
                InstallOutcome::Envelope(NoticeEnvelope {
                    notice_id,
                    ruleset_digest: digest,
                    issued_at,
                    ciphertext: crypto::seal_to_enclave(notifier, merged.to_text().as_bytes())?,
                })
            }
            NotificationModel::NoticeAndAck => InstallOutcome::Notice(NoticeMessage::build(
                notice_id,
                NotificationModel::NoticeAndAck,
                &merged,
                issued_at,
                &self.users,
                self.sealer.key(),
            )?),
        };
        let receipt = self.config.model == NotificationModel::NoticeAndAck;
        self.staged = Some(Staged {
            rules: merged,
            notice_id,
            receipt,
        });
        self.published.push(digest);
        Ok(outcome)
    }

    pub fn accept_receipt(&mut self, receipt: &NotifierReceipt) -> Result<(), EnclaveError> {
        if self.config.model != NotificationModel::NoticeOnly {
            return Err(EnclaveError::WrongModel(self.config.model));
        }
        let notifier = self
            .config
            .notifier
            .as_ref()
            .ok_or(EnclaveError::NoNotifier)?;
        let staged = self.staged.as_mut().ok_or(EnclaveError::NothingStaged)?;
        if receipt.notice_id != staged.notice_id || receipt.ruleset_digest != staged.rules.digest()
        {
            return Err(EnclaveError::ReceiptMismatch);
        }
        if !receipt.verify(notifier) {
            return Err(EnclaveError::BadReceipt);
        }
        staged.receipt = true;
        Ok(())
    }

    /// Record a device's consent. It counts from the next chunk boundary.
    pub fn register_ack(&mut self, ack: Acknowledgment) -> Result<AckOutcome, EnclaveError> {
        if self.config.model != NotificationModel::NoticeAndAck {
            return Err(EnclaveError::WrongModel(self.config.model));
        }
        Ok(self.acks.register_ack(ack, &self.users)?)
    }

    fn decrypt(&mut self, ciphertext: &[u8]) -> Result<SensorReading, EnclaveError> {
        let plain = match crypto::open_in_enclave(self.sealer.key(), ciphertext) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("discarding reading: {e}");
                self.alerts.push(Alert {
                    kind: AlertKind::Authentication,
                    detail: e.to_string(),
                });
                return Err(EnclaveError::Authentication);
            }
        };
        SensorReading::from_wire(&plain).map_err(|e| {
            log::warn!("discarding malformed reading: {e}");
            self.alerts.push(Alert {
                kind: AlertKind::Malformed,
                detail: e.to_string(),
            });
            EnclaveError::Model(e)
        })
    }

    fn assign_state(&self, reading: SensorReading) -> StatefulReading {
        let state = match &self.live {
            None => SensorState::Passive,
            Some(_)
                if self.config.model == NotificationModel::NoticeAndAck
                    && !self.consent.contains(&reading.device) =>
            {
                SensorState::Passive
            }
            Some(l) => evaluate_with(
                l.working.iter().map(|&i| &l.rules.rules()[i]),
                l.rules.default_action(),
                &reading,
            ),
        };
        StatefulReading::new(reading, state)
    }

    /// Decrypt one reading and assign its state under the rules governing
    /// the open chunk. Does not append it.
    pub fn ingest(&mut self, ciphertext: &[u8]) -> Result<StatefulReading, EnclaveError> {
        let r = self.decrypt(ciphertext)?;
        Ok(self.assign_state(r))
    }

    /// Chunk-boundary bookkeeping: activate staged rules, snapshot consent,
    /// evict expired rules.
    fn boundary(&mut self, at: Timestamp) {
        if self.staged.as_ref().is_some_and(|s| s.receipt) {
            let s = self.staged.take().expect("checked above");
            log::info!("activating rule set {}", s.rules.digest());
            self.live = Some(Live {
                working: (0..s.rules.rules().len()).collect(),
                rules: s.rules,
                notice_id: s.notice_id,
            });
        }
        if let Some(l) = &mut self.live {
            if self.config.model == NotificationModel::NoticeAndAck {
                self.consent = self.acks.consenting(&l.notice_id);
            }
            let rules = l.rules.rules();
            l.working.retain(|&i| {
                let r = &rules[i];
                if !r.expired_by(at) {
                    return true;
                }
                if self.evicted.insert(r.rule_id.clone()) {
                    self.expired.push(ExpiredRule {
                        evicted_at: at,
                        ruleset_digest: l.rules.digest(),
                        rule: r.clone(),
                    });
                }
                false
            });
        }
    }

    fn seal_open(&mut self) -> Result<Option<SealedChunk>, EnclaveError> {
        match self.open.take() {
            Some(c) => self.sealer.seal(c),
            None => Ok(None),
        }
    }

    /// Decrypt, state and append one reading, first sealing the open chunk
    /// if this reading would break its limits.
    pub fn submit(&mut self, ciphertext: &[u8]) -> Result<Vec<SealedChunk>, EnclaveError> {
        let reading = self.decrypt(ciphertext)?;
        if let Some(last) = self.last_time {
            if reading.time < last {
                self.alerts.push(Alert {
                    kind: AlertKind::OutOfOrder,
                    detail: format!("{} < {}", reading.time.millis(), last.millis()),
                });
                return Err(EnclaveError::OutOfOrder {
                    got: reading.time.millis(),
                    last: last.millis(),
                });
            }
        }
        let mut out = Vec::new();
        let policy = self.config.policy;
        if let Some(open) = &self.open {
            // Active footprint bounds either state; the rules may not be
            // evaluated before a boundary decides which rules apply.
            let probe = StatefulReading::new(reading.clone(), SensorState::Active);
            if open.must_close_before(&probe, &policy) {
                out.extend(self.seal_open()?);
            }
        }
        if self.open.is_none() {
            self.boundary(reading.time);
            self.open = Some(self.sealer.open_chunk(self.current_ruleset_digest())?);
        }
        self.last_time = Some(reading.time);
        let r = self.assign_state(reading);
        self.open.as_mut().expect("opened above").seal_append(r);
        Ok(out)
    }

    /// Seal the open chunk if its window has elapsed by `now`.
    pub fn tick(&mut self, now: Timestamp) -> Result<Option<SealedChunk>, EnclaveError> {
        let due = self
            .open
            .as_ref()
            .and_then(|c| c.deadline(&self.config.policy))
            .is_some_and(|d| now.millis() >= d);
        if due {
            self.seal_open()
        } else {
            Ok(None)
        }
    }

    /// Seal what remains and finalize the stream.
    pub fn finish(&mut self) -> Result<(Option<SealedChunk>, TerminalAnchor), EnclaveError> {
        let last = self.seal_open()?;
        Ok((last, self.sealer.finalize()?))
    }

    pub fn default_action(&self) -> Option<Action> {
        self.live.as_ref().map(|l| l.rules.default_action())
    }
}

/// Simulated platform sealing of the enclave key. Real enclaves bind this
/// blob to the CPU; here it is a file only this crate can produce or read.
pub mod sealed_storage {
    use super::*;

    const MAGIC: &[u8; 8] = b"SSENCLV1";

    pub fn provision(path: &Path) -> Result<PublicKey, EnclaveError> {
        let key = KeyPair::generate(KeyRole::Enclave);
        let mut blob = MAGIC.to_vec();
        blob.extend_from_slice(&key.secret_bytes());
        std::fs::write(path, blob)?;
        Ok(key.public())
    }

    pub fn unseal(path: &Path) -> Result<KeyPair, EnclaveError> {
        let blob = std::fs::read(path)?;
        if blob.len() < MAGIC.len() || &blob[..MAGIC.len()] != MAGIC {
            return Err(CryptoError::MalformedKey("not a sealed enclave key".into()).into());
        }
        Ok(KeyPair::from_secret(&blob[MAGIC.len()..])?)
    }
}
