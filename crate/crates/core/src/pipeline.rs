//! End-to-end run: synthetic controller, enclave, notifier and store.

use std::time::{Duration, Instant};

use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::crypto::{self, Digest, KeyPair, KeyRole, PublicKey};
use crate::enclave::{
    ChunkPolicy, Enclave, EnclaveConfig, EnclaveError, InstallOutcome, SealedChunk,
};
use crate::harness::{Generator, WorkloadSpec};
use crate::model::{canonical_encode, DeviceId, Timestamp};
use crate::notify::{
    Acknowledgment, NotificationModel, Notifier, NotifyError, UserRegistration, UserRegistry,
};
use crate::rules::RuleSet;
use crate::store::{Anchors, Store, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Notify(#[from] NotifyError),
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub workload: WorkloadSpec,
    pub model: NotificationModel,
    pub policy: ChunkPolicy,
    /// Installed before the first reading; `None` leaves every reading Passive.
    pub rules: Option<RuleSet>,
    /// The first `registered` workload devices enroll with the authority.
    pub registered: usize,
    /// Under notice-and-ACK, the first `consenting` registered devices ACK.
    pub consenting: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec::default(),
            model: NotificationModel::NoticeOnly,
            policy: ChunkPolicy::default(),
            rules: None,
            registered: 0,
            consenting: 0,
        }
    }
}

/// A registered device and what it needs to verify its own data.
#[derive(Debug)]
pub struct Participant {
    pub device: DeviceId,
    pub keys: KeyPair,
    pub psk: [u8; 32],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyStats {
    pub p50: Duration,
    pub p90: Duration,
    pub p99: Duration,
    pub max: Duration,
}

impl LatencyStats {
    pub fn of(mut xs: Vec<Duration>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_unstable();
        let at = |q: f64| xs[((xs.len() - 1) as f64 * q).round() as usize];
        Self {
            p50: at(0.5),
            p90: at(0.9),
            p99: at(0.99),
            max: *xs.last().expect("non-empty"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub readings: usize,
    pub rejected: usize,
    pub chunks: usize,
    pub active: usize,
    pub passive: usize,
    /// Latency of the submit calls that sealed a chunk.
    pub close_latency: LatencyStats,
    /// Time spent inside the enclave across all submits and the final seal.
    pub enclave_time: Duration,
    /// SHA-256 over every chunk's index, records and cleartext. Independent
    /// of keys and random strings, so equal seeds give equal digests.
    pub payload_digest: Digest,
    pub chunk_bytes: u64,
    pub meta_bytes: u64,
    pub elapsed: Duration,
}

impl PipelineReport {
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("readings {}", self.readings),
            format!("rejected {}", self.rejected),
            format!("chunks {}", self.chunks),
            format!("active {}", self.active),
            format!("passive {}", self.passive),
            format!(
                "close-latency-us p50={} p90={} p99={} max={}",
                self.close_latency.p50.as_micros(),
                self.close_latency.p90.as_micros(),
                self.close_latency.p99.as_micros(),
                self.close_latency.max.as_micros()
            ),
            format!("enclave-seconds {:.3}", self.enclave_time.as_secs_f64()),
            format!("payload-digest {}", self.payload_digest),
            format!("chunk-bytes {}", self.chunk_bytes),
            format!("meta-bytes {}", self.meta_bytes),
            format!("elapsed-seconds {:.3}", self.elapsed.as_secs_f64()),
        ]
    }
}

pub struct PipelineRun {
    pub report: PipelineReport,
    pub enclave_key: PublicKey,
    pub notifier_key: Option<PublicKey>,
    pub participants: Vec<Participant>,
}

fn fold_payload(h: &mut Sha256, sc: &SealedChunk) {
    h.update(sc.index.to_be_bytes());
    for r in &sc.records {
        h.update(r.encode());
    }
    for a in &sc.active {
        h.update(canonical_encode(a));
        h.update((a.reading.params.len() as u32).to_be_bytes());
        h.update(&a.reading.params);
    }
}

#[derive(Clone, Debug)]
pub struct SealStats {
    pub readings: usize,
    pub rejected: usize,
    pub chunks: usize,
    pub active: usize,
    pub passive: usize,
    pub close_latencies: Vec<Duration>,
    pub enclave_time: Duration,
    pub payload_digest: Digest,
}

/// Feed ciphertexts to `enclave`, persist every sealed chunk and expired
/// rule, then finalize the stream and store its anchors. Only the enclave
/// calls are timed.
pub fn seal_into(
    enclave: &mut Enclave,
    input: impl IntoIterator<Item = Vec<u8>>,
    store: &Store,
) -> Result<SealStats, PipelineError> {
    let pk = enclave.public_key();
    store.put_anchors(&Anchors {
        enclave_key: Some(pk.clone()),
        genesis: Some(*enclave.genesis()),
        terminal: None,
    })?;
    let mut payload = Sha256::new();
    let mut stats = SealStats {
        readings: 0,
        rejected: 0,
        chunks: 0,
        active: 0,
        passive: 0,
        close_latencies: Vec::new(),
        enclave_time: Duration::ZERO,
        payload_digest: Digest([0; 32]),
    };
    let persist = |sc: SealedChunk,
                   stats: &mut SealStats,
                   payload: &mut Sha256|
     -> Result<(), PipelineError> {
        fold_payload(payload, &sc);
        stats.chunks += 1;
        stats.active += sc.active.len();
        stats.passive += sc.len() - sc.active.len();
        store.put_sealed_chunk(&sc)?;
        Ok(())
    };
    for ct in input {
        stats.readings += 1;
        let t = Instant::now();
        let sealed = enclave.submit(&ct);
        let dt = t.elapsed();
        stats.enclave_time += dt;
        match sealed {
            Ok(v) => {
                if !v.is_empty() {
                    stats.close_latencies.push(dt);
                }
                for sc in v {
                    persist(sc, &mut stats, &mut payload)?;
                }
            }
            Err(e) => {
                log::warn!("reading {} rejected: {e}", stats.readings);
                stats.rejected += 1;
            }
        }
        for e in enclave.drain_expired() {
            store.put_expired(&e)?;
        }
    }
    let t = Instant::now();
    let (last, terminal) = enclave.finish()?;
    stats.enclave_time += t.elapsed();
    if let Some(sc) = last {
        persist(sc, &mut stats, &mut payload)?;
    }
    store.put_anchors(&Anchors {
        enclave_key: Some(pk),
        genesis: Some(*enclave.genesis()),
        terminal: Some(terminal),
    })?;
    stats.payload_digest = Digest(payload.finalize().into());
    Ok(stats)
}

/// Run the workload through a fresh enclave into `store`.
pub fn run_pipeline(cfg: &PipelineConfig, store: &Store) -> Result<PipelineRun, PipelineError> {
    let started = Instant::now();
    let gen = Generator::new(cfg.workload.clone());
    let mut users = UserRegistry::new();
    let mut participants = Vec::new();
    for (i, d) in gen.devices().iter().take(cfg.registered).enumerate() {
        let keys = KeyPair::generate(KeyRole::Device);
        let mut psk = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut psk);
        users.register(UserRegistration {
            device: d.clone(),
            contact: format!("user{i}@example.org"),
            public_key: keys.public(),
        })?;
        participants.push(Participant {
            device: d.clone(),
            keys,
            psk,
        });
    }

    let notifier_keys = KeyPair::generate(KeyRole::Notifier);
    let notifier_key = (cfg.model == NotificationModel::NoticeOnly).then(|| notifier_keys.public());
    let mut notifier = Notifier::new(notifier_keys, users.clone());
    let enclave_keys = KeyPair::generate(KeyRole::Enclave);
    let mut enclave = Enclave::new(
        enclave_keys,
        EnclaveConfig {
            model: cfg.model,
            policy: cfg.policy,
            notifier: notifier_key.clone(),
        },
        users,
    )?;
    let pk = enclave.public_key();

    if let Some(rules) = &cfg.rules {
        let issued = Timestamp::new(cfg.workload.start_ms - 1).expect("start is positive");
        match enclave.install_ruleset(rules.clone(), issued)? {
            InstallOutcome::Envelope(env) => {
                let publication = notifier.publish_notice_nom(&env)?;
                store.put_notice(&publication.notice)?;
                enclave.accept_receipt(&publication.receipt)?;
            }
            InstallOutcome::Notice(notice) => {
                store.put_notice(&notice)?;
                for p in participants.iter().take(cfg.consenting) {
                    let ack =
                        Acknowledgment::create(notice.notice_id, p.device.clone(), &p.keys, issued);
                    enclave.register_ack(ack.clone())?;
                    store.put_ack(&ack)?;
                }
            }
        }
    }

    let stats = seal_into(
        &mut enclave,
        gen.map(|r| crypto::seal_to_enclave(&pk, &r.to_wire()).expect("valid enclave key")),
        store,
    )?;
    let (chunk_bytes, meta_bytes) = store.disk_usage()?;
    let report = PipelineReport {
        readings: stats.readings,
        rejected: stats.rejected,
        chunks: stats.chunks,
        active: stats.active,
        passive: stats.passive,
        close_latency: LatencyStats::of(stats.close_latencies),
        enclave_time: stats.enclave_time,
        payload_digest: stats.payload_digest,
        chunk_bytes,
        meta_bytes,
        elapsed: started.elapsed(),
    };
    Ok(PipelineRun {
        report,
        enclave_key: pk,
        notifier_key,
        participants,
    })
}
