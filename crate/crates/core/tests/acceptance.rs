//! Acceptance run. Prints one `criterion N PASS|FAIL` line per criterion
//! and exits nonzero if any fails. Pass criterion numbers as arguments to
//! run a subset.

mod common;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ed25519_dalek::{Signature as EdSignature, VerifyingKey};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::Raw;
use sensorseal::bench::{bench_synthetic, fit_rows};
use sensorseal::crypto::{self, KeyPair, KeyRole, PublicKey};
use sensorseal::enclave::{
    ChunkPolicy, Enclave, EnclaveConfig, InstallOutcome, SealedChunk, Sealer,
};
use sensorseal::harness::{
    apply_tamper, random_action, Generator, TamperKind, WorkloadSpec, DEFAULT_START_MS, HOUR_MS,
};
use sensorseal::model::{
    DeviceId, SensorId, SensorReading, SensorState, StatefulReading, Timestamp, DAY_MS,
};
use sensorseal::notify::{
    Acknowledgment, NoticeId, NotificationModel, Notifier, UserRegistration, UserRegistry,
};
use sensorseal::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use sensorseal::rules::{evaluate_state, Action, DailyWindow, DataCaptureRule, RuleSet};
use sensorseal::store::bundle::BundleReader;
use sensorseal::store::format::{encode_chunk, user_view_bytes};
use sensorseal::store::{copy_store, PreSharedKeyAuth, Store, UserRequest, VerifierBundle};
use sensorseal::verify::{audit_range, verify_stream, verify_user_range, StreamItem};

// Criterion 1
const C1_DAYS: f64 = 7.0;
const C1_RATE: f64 = 0.01;
const C1_DEVICES: usize = 1000;
const C1_USERS: usize = 5;
const C1_MIN_CHUNKS: usize = 200;
const C1_WORKERS: usize = 4;
const C1_DEADLINE_S: f64 = 120.0;
// Criterion 2
const C2_TRIALS_PER_KIND: usize = 100;
const C2_CLEAN_TRIALS: usize = 1000;
// Criterion 3
const C3_COUNTS: [usize; 5] = [1, 50, 100, 500, 1000];
const C3_PER_CHUNK: usize = 100;
const C3_REPEATS: usize = 3;
const C3_MIN_R2: f64 = 0.98;
// Criterion 4
const C4_READINGS: usize = 37_000;
const C4_DEADLINE_S: f64 = 1.0;
// Criterion 5
const C5_PI_BYTES: usize = 96;
const C5_PER_READING: usize = 64;
const C5_CONSTANT: usize = 256;
// Criterion 6
const C6_CHUNKS: u64 = 50;
const C6_DEADLINE_S: f64 = 30.0;
// Criterion 7
const C7_CHUNKS: usize = 100;
const C7_MAX_READINGS: usize = 20;
// Criterion 8
const C8_RUNS: usize = 50;
// Criterion 9
const C9_INTERLEAVINGS: usize = 1000;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn opt_in_9_to_17() -> RuleSet {
    let created = Timestamp::new(DEFAULT_START_MS - 1).unwrap();
    RuleSet::new(
        vec![DataCaptureRule::new("work-hours", Action::OptIn, created)
            .with_window(DailyWindow::hours(9, 17))],
        Action::OptOut,
    )
    .unwrap()
}

fn in_9_to_17(t: u64) -> bool {
    let tod = t % DAY_MS;
    (9 * HOUR_MS..17 * HOUR_MS).contains(&tod)
}

fn request(p: &sensorseal::pipeline::Participant) -> (UserRequest, PreSharedKeyAuth) {
    let mut auth = PreSharedKeyAuth::new();
    auth.enroll(p.device.clone(), p.psk);
    let req = UserRequest {
        device: p.device.clone(),
        token: PreSharedKeyAuth::token_for(&p.psk, &p.device),
    };
    (req, auth)
}

fn user_bundle(
    store: &Store,
    run: &PipelineRun,
    who: usize,
    last: u64,
) -> Result<VerifierBundle, String> {
    let (req, auth) = request(&run.participants[who]);
    store.get_user_bundle(1..=last, &req, &auth).map_err(err)
}

fn c1_round_trip() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::create(dir.path().join("store")).map_err(err)?;
    let workload = WorkloadSpec::default()
        .days(C1_DAYS)
        .scaled(C1_RATE)
        .with_devices(C1_DEVICES)
        .seeded(20190107);
    let cfg = PipelineConfig {
        workload: workload.clone(),
        model: NotificationModel::NoticeOnly,
        rules: Some(opt_in_9_to_17()),
        registered: C1_USERS,
        ..PipelineConfig::default()
    };
    let run = run_pipeline(&cfg, &store).map_err(err)?;
    let n = run.report.chunks;
    ensure!(n >= C1_MIN_CHUNKS, "{n} chunks < {C1_MIN_CHUNKS}");

    let audit = audit_range(
        &store.get_auditor_bundle(1..=n as u64).map_err(err)?,
        &run.enclave_key,
        C1_WORKERS,
    );
    ensure!(audit.summary.all_intact(), "auditor: {}", audit.summary);

    // Plaintext oracle: the same seeded stream, states from the window alone.
    let mut expected: HashMap<DeviceId, Vec<(u64, SensorId, u8)>> = HashMap::new();
    let users: HashSet<&DeviceId> = run.participants.iter().map(|p| &p.device).collect();
    for r in Generator::new(workload) {
        if users.contains(&r.device) {
            let s = if in_9_to_17(r.time.millis()) {
                SensorState::Active
            } else {
                SensorState::Passive
            };
            expected.entry(r.device.clone()).or_default().push((
                r.time.millis(),
                r.sensor.clone(),
                s.as_byte(),
            ));
        }
    }
    let mut entries = 0;
    for (i, p) in run.participants.iter().enumerate() {
        let b = user_bundle(&store, &run, i, n as u64)?;
        let (range, presence) = verify_user_range(&b, &p.device, &run.enclave_key);
        ensure!(range.summary.all_intact(), "user {i}: {}", range.summary);
        let mut got: Vec<_> = presence
            .chunks
            .iter()
            .flat_map(|c| c.entries.iter())
            .map(|e| (e.time.millis(), e.sensor.clone(), e.state.as_byte()))
            .collect();
        got.sort();
        let mut want = expected.remove(&p.device).unwrap_or_default();
        want.sort();
        ensure!(
            got == want,
            "user {i}: presence has {} entries, oracle {}",
            got.len(),
            want.len()
        );
        entries += got.len();
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < C1_DEADLINE_S, "took {secs:.1}s");
    Ok(format!(
        "{} readings, {n} chunks intact with {C1_WORKERS} workers; {C1_USERS} users intact, {entries} presence entries match; {secs:.1}s",
        run.report.readings
    ))
}

fn c2_tamper_matrix() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let base = Store::create(dir.path().join("base")).map_err(err)?;
    let cfg = PipelineConfig {
        workload: WorkloadSpec::default()
            .days(1.0)
            .scaled(0.002)
            .with_devices(40)
            .seeded(2),
        rules: Some(opt_in_9_to_17()),
        registered: 3,
        ..PipelineConfig::default()
    };
    let run = run_pipeline(&cfg, &base).map_err(err)?;
    let last = run.report.chunks as u64;
    ensure!(last >= 3, "base store has {last} chunks");
    let mut rng = ChaCha20Rng::seed_from_u64(0x7A3);
    let mut per_kind = Vec::new();
    for kind in TamperKind::ALL {
        let mut detected = 0;
        for trial in 0..C2_TRIALS_PER_KIND {
            let path = dir.path().join(format!("{kind}-{trial}"));
            copy_store(base.root(), &path).map_err(err)?;
            let store = Store::open(&path).map_err(err)?;
            let action = random_action(kind, &store, &mut rng).map_err(err)?;
            apply_tamper(&store, &action).map_err(|e| format!("{kind} {action:?}: {e}"))?;
            let bundle = store.get_auditor_bundle(1..=last).map_err(err)?;
            let r = audit_range(&bundle, &run.enclave_key, 1);
            ensure!(!r.summary.all_intact(), "{kind} undetected: {action:?}");
            detected += 1;
            std::fs::remove_dir_all(&path).map_err(err)?;
        }
        per_kind.push(format!("{kind} {detected}/{C2_TRIALS_PER_KIND}"));
    }

    let mut false_positives = 0;
    let mut chunks = 0;
    for trial in 0..C2_CLEAN_TRIALS {
        let d = tempfile::tempdir().map_err(err)?;
        let store = Store::create(d.path().join("s")).map_err(err)?;
        let model = if rng.gen() {
            NotificationModel::NoticeOnly
        } else {
            NotificationModel::NoticeAndAck
        };
        let cfg = PipelineConfig {
            workload: WorkloadSpec {
                start_ms: DEFAULT_START_MS + rng.gen_range(0..DAY_MS),
                ..WorkloadSpec::default()
            }
            .days(rng.gen_range(0.02..0.15))
            .scaled(rng.gen_range(0.002..0.01))
            .with_devices(rng.gen_range(5..30))
            .seeded(trial as u64),
            model,
            policy: ChunkPolicy::new(
                rng.gen_range(4096..1 << 20),
                rng.gen_range(60_000..1_800_000),
            )
            .map_err(err)?,
            rules: Some(opt_in_9_to_17()),
            registered: 3,
            consenting: rng.gen_range(0..=3),
        };
        let run = run_pipeline(&cfg, &store).map_err(err)?;
        let n = run.report.chunks as u64;
        if n == 0 {
            continue;
        }
        chunks += n;
        let audit = audit_range(
            &store.get_auditor_bundle(1..=n).map_err(err)?,
            &run.enclave_key,
            1,
        );
        let b = user_bundle(&store, &run, trial % 3, n)?;
        let (user, _) =
            verify_user_range(&b, &run.participants[trial % 3].device, &run.enclave_key);
        if !audit.summary.all_intact() || !user.summary.all_intact() {
            false_positives += 1;
        }
    }
    ensure!(
        false_positives == 0,
        "{false_positives} false positives in {C2_CLEAN_TRIALS} clean runs"
    );
    Ok(format!(
        "{}; 0 false positives over {C2_CLEAN_TRIALS} clean runs ({chunks} chunks)",
        per_kind.join(", ")
    ))
}

fn c3_linear_scaling() -> Check {
    let rows = bench_synthetic(&C3_COUNTS, C3_PER_CHUNK, C3_REPEATS, 1);
    let fit = fit_rows(&rows);
    let t = |n: usize| {
        rows.iter()
            .find(|r| r.chunks == n)
            .map_or(f64::NAN, |r| r.seconds)
    };
    let summary = format!(
        "R2 {:.4}, {:.3} ms/chunk; t(100)/t(50) {:.2}, t(1000)/t(1) {:.0}",
        fit.r2,
        fit.slope * 1e3,
        t(100) / t(50),
        t(1000) / t(1)
    );
    ensure!(fit.r2 >= C3_MIN_R2, "{summary}");
    Ok(summary)
}

fn peak_half_hour() -> WorkloadSpec {
    WorkloadSpec {
        start_ms: DEFAULT_START_MS + 9 * HOUR_MS,
        duration_ms: HOUR_MS / 2,
        ..WorkloadSpec::default()
    }
}

fn c4_sealing_throughput() -> Check {
    let rules = opt_in_9_to_17();
    let readings: Vec<StatefulReading> = Generator::new(peak_half_hour())
        .map(|r| {
            let s = evaluate_state(&rules, &r);
            StatefulReading::new(r, s)
        })
        .collect();
    ensure!(
        readings.len() == C4_READINGS,
        "generated {}",
        readings.len()
    );
    let policy = ChunkPolicy::default();
    let mut sealer = Sealer::new(KeyPair::generate(KeyRole::Enclave)).map_err(err)?;
    let started = Instant::now();
    let mut open = sealer.open_chunk(Some(rules.digest())).map_err(err)?;
    let mut closes = 0;
    for r in readings {
        if open.must_close_before(&r, &policy) {
            closes += 1;
        }
        open.seal_append(r);
    }
    let sc = sealer.seal(open).map_err(err)?.ok_or("empty chunk")?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(
        closes == 0,
        "default policy would split the half hour {closes} times"
    );
    ensure!(sc.len() == C4_READINGS, "sealed {}", sc.len());
    ensure!(secs <= C4_DEADLINE_S, "sealing took {secs:.3}s");
    let bytes = encode_chunk(&sc).0.len();
    Ok(format!(
        "{} readings ({} Active, {:.2} MB) sealed in one chunk in {:.0} ms",
        sc.len(),
        sc.active.len(),
        bytes as f64 / 1e6,
        secs * 1e3
    ))
}

fn c5_proof_overhead() -> Check {
    let mut sealer = Sealer::new(KeyPair::generate(KeyRole::Enclave)).map_err(err)?;
    let rules = opt_in_9_to_17();
    let all: Vec<SensorReading> = Generator::new(peak_half_hour()).collect();
    let mut lines = Vec::new();
    for n in [1usize, 10, 100, 1000, 10_000, 37_000] {
        let mut open = sealer.open_chunk(None).map_err(err)?;
        for r in &all[..n] {
            let s = evaluate_state(&rules, r);
            open.seal_append(StatefulReading::new(r.clone(), s));
        }
        let sc = sealer.seal(open).map_err(err)?.ok_or("empty chunk")?;
        let (file, m) = encode_chunk(&sc);
        ensure!(
            m.pi.len == C5_PI_BYTES,
            "PI section is {} bytes for {n} readings",
            m.pi.len
        );
        let view = user_view_bytes(&file).map_err(err)?.len();
        ensure!(
            view <= C5_PER_READING * n + C5_CONSTANT,
            "user view {view} B for {n} readings"
        );
        lines.push(format!(
            "n={n} view={view}B ({:.1}B/reading)",
            view as f64 / n as f64
        ));
    }
    Ok(format!(
        "PI {C5_PI_BYTES}B at every size; {}",
        lines.join(", ")
    ))
}

fn c6_user_streaming() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::create(dir.path().join("store")).map_err(err)?;
    let spec = WorkloadSpec::default().days(25.0 / 24.0).seeded(6);
    let gen = Generator::new(spec);
    let device = gen.devices()[0].clone();
    let rules = opt_in_9_to_17();
    let policy = ChunkPolicy::default();
    let mut sealer = Sealer::new(KeyPair::generate(KeyRole::Enclave)).map_err(err)?;
    let mut open = sealer.open_chunk(Some(rules.digest())).map_err(err)?;
    let mut chunks = 0u64;
    for r in gen {
        let s = evaluate_state(&rules, &r);
        let r = StatefulReading::new(r, s);
        if open.must_close_before(&r, &policy) {
            let sc = sealer.seal(open).map_err(err)?.ok_or("empty chunk")?;
            store.put_sealed_chunk(&sc).map_err(err)?;
            chunks += 1;
            open = sealer.open_chunk(Some(rules.digest())).map_err(err)?;
        }
        open.seal_append(r);
    }
    if let Some(sc) = sealer.seal(open).map_err(err)? {
        store.put_sealed_chunk(&sc).map_err(err)?;
        chunks += 1;
    }
    let terminal = sealer.finalize().map_err(err)?;
    store
        .put_anchors(&sensorseal::store::Anchors {
            enclave_key: Some(sealer.public_key()),
            genesis: Some(*sealer.genesis()),
            terminal: Some(terminal),
        })
        .map_err(err)?;
    ensure!(chunks >= C6_CHUNKS, "only {chunks} chunks");

    let psk = [0x42; 32];
    let mut auth = PreSharedKeyAuth::new();
    auth.enroll(device.clone(), psk);
    let req = UserRequest {
        token: PreSharedKeyAuth::token_for(&psk, &device),
        device: device.clone(),
    };
    let path = dir.path().join("user.bundle");
    let bundle = store
        .get_user_bundle(1..=C6_CHUNKS, &req, &auth)
        .map_err(err)?;
    bundle
        .write_to(&mut BufWriter::new(File::create(&path).map_err(err)?))
        .map_err(err)?;
    let records: usize = store.manifest().map_err(err)?[..C6_CHUNKS as usize]
        .iter()
        .map(|m| m.records)
        .sum();
    drop(bundle);

    let reader = BundleReader::new(BufReader::new(File::open(&path).map_err(err)?)).map_err(err)?;
    let mut mine = 0;
    let (summary, elapsed) = verify_stream(reader, Some(&device), &sealer.public_key(), |item| {
        if let StreamItem::User(_, p) = item {
            mine += p.entries.len();
        }
    })
    .map_err(err)?;
    let secs = elapsed.as_secs_f64();
    ensure!(summary.all_intact(), "{summary}");
    ensure!(mine > 0, "device has no readings in range");
    ensure!(secs <= C6_DEADLINE_S, "took {secs:.2}s");
    Ok(format!(
        "{C6_CHUNKS} chunks, {records} records, {mine} own; streamed single-threaded in {secs:.2}s"
    ))
}

fn ed_verify(pk: &PublicKey, payload: &[u8; 32], sig: &[u8; 64]) -> bool {
    let bytes = pk.to_bytes();
    let vk = VerifyingKey::from_bytes(bytes[1..33].try_into().unwrap()).unwrap();
    vk.verify_strict(payload, &EdSignature::from_bytes(sig))
        .is_ok()
}

fn c7_oracle() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut sealer = Sealer::new(KeyPair::generate(KeyRole::Enclave)).map_err(err)?;
    let pk = sealer.public_key();
    let mut t = common::T0;
    let mut sealed: Vec<(SealedChunk, Vec<Raw>)> = Vec::new();
    let mut total = 0;
    while sealed.len() < C7_CHUNKS {
        let n = rng.gen_range(1..=C7_MAX_READINGS);
        let mut open = sealer.open_chunk(None).map_err(err)?;
        let mut raw = Vec::new();
        for _ in 0..n {
            t += rng.gen_range(0..5000);
            let dlen = rng.gen_range(6..=12);
            let device: Vec<u8> = (0..dlen).map(|_| rng.gen()).collect();
            let slen = rng.gen_range(1..=16);
            let sensor: Vec<u8> = (0..slen).map(|_| rng.gen()).collect();
            let state = if rng.gen() {
                SensorState::Active
            } else {
                SensorState::Passive
            };
            let mut r = SensorReading::new(
                DeviceId::new(device).map_err(err)?,
                SensorId::new(sensor).map_err(err)?,
                Timestamp::new(t).map_err(err)?,
            );
            r.params = (0..rng.gen_range(0..8)).map(|_| rng.gen()).collect();
            let sr = StatefulReading::new(r, state);
            raw.push(Raw::of(&sr));
            open.seal_append(sr);
        }
        total += n;
        sealed.push((sealer.seal(open).map_err(err)?.ok_or("empty chunk")?, raw));
    }
    let terminal = sealer.finalize().map_err(err)?;
    let genesis = sealer.genesis().seed.0;
    let strings: Vec<[u8; 32]> = sealed.iter().map(|(c, _)| c.g_self().0).collect();
    for (k, (sc, raw)) in sealed.iter().enumerate() {
        let trace = sc.sealing_trace().ok_or("no trace")?;
        for (i, (rec, r)) in sc.records.iter().zip(raw).enumerate() {
            ensure!(
                rec.occurrence.0 == common::ref_occurrence(&r.device, r.time),
                "chunk {k} o_{i} differs"
            );
        }
        let h_n = common::ref_chain(raw);
        let hu_end = common::ref_user(raw);
        let g_prev = if k == 0 { genesis } else { strings[k - 1] };
        let g_next = strings.get(k + 1).copied().unwrap_or(terminal.terminal.0);
        let eoc = common::ref_eoc(&g_prev, &strings[k], &g_next);
        ensure!(trace.chain_digest.0 == h_n, "chunk {k} h_n differs");
        ensure!(trace.user_digest.0 == hu_end, "chunk {k} hu_end differs");
        ensure!(trace.end_of_chunk == eoc, "chunk {k} S_eoc differs");
        let xor = |d: [u8; 32]| -> [u8; 32] { std::array::from_fn(|i| d[i] ^ eoc[i]) };
        ensure!(
            ed_verify(&pk, &xor(h_n), &sc.pi.sig.0),
            "chunk {k} PI fails on oracle payload"
        );
        ensure!(
            ed_verify(&pk, &xor(hu_end), &sc.pu.sig.0),
            "chunk {k} PU fails on oracle payload"
        );
    }
    Ok(format!(
        "{C7_CHUNKS} chunks, {total} readings: o_i, h_n, hu_end, S_eoc bit-exact; PI and PU verify on oracle payloads"
    ))
}

fn windows6(bytes: &[u8]) -> HashSet<[u8; 6]> {
    bytes.windows(6).map(|w| w.try_into().unwrap()).collect()
}

fn c8_privacy_scan() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(88);
    let mut scanned = 0usize;
    let mut seen_consenting = 0usize;
    let mut checked_ids = 0usize;
    for run_no in 0..C8_RUNS {
        let dir = tempfile::tempdir().map_err(err)?;
        let store = Store::create(dir.path().join("store")).map_err(err)?;
        let registered = rng.gen_range(2..8);
        let consenting = rng.gen_range(0..=registered);
        let created = Timestamp::new(1).unwrap();
        let rules = if rng.gen() {
            opt_in_9_to_17()
        } else {
            RuleSet::new(
                vec![DataCaptureRule::new("all", Action::OptIn, created)],
                Action::OptOut,
            )
            .map_err(err)?
        };
        let cfg = PipelineConfig {
            workload: WorkloadSpec::default()
                .days(rng.gen_range(0.1..0.5))
                .scaled(rng.gen_range(0.002..0.01))
                .with_devices(rng.gen_range(10..200))
                .seeded(1000 + run_no as u64),
            model: NotificationModel::NoticeAndAck,
            policy: ChunkPolicy::new(1 << 20, rng.gen_range(300_000..1_800_000)).map_err(err)?,
            rules: Some(rules),
            registered,
            consenting,
        };
        let run = run_pipeline(&cfg, &store).map_err(err)?;
        let n = run.report.chunks as u64;
        let mut bytes = store.all_bytes().map_err(err)?;
        for i in 0..run.participants.len() {
            if n > 0 {
                bytes.extend(user_bundle(&store, &run, i, n)?.to_bytes());
            }
        }
        scanned += bytes.len();
        let windows = windows6(&bytes);
        let text = String::from_utf8_lossy(&bytes).to_lowercase();
        let consent: HashSet<&DeviceId> = run.participants[..consenting]
            .iter()
            .map(|p| &p.device)
            .collect();
        let devices = Generator::new(cfg.workload.clone()).devices().to_vec();
        for d in &devices {
            let id: [u8; 6] = d.as_bytes().try_into().map_err(err)?;
            let found = windows.contains(&id) || text.contains(&d.to_hex());
            if consent.contains(d) {
                seen_consenting += found as usize;
            } else {
                checked_ids += 1;
                ensure!(
                    !found,
                    "run {run_no}: non-consenting device {} found in persisted bytes",
                    d.to_hex()
                );
            }
        }
    }
    ensure!(
        seen_consenting > 0,
        "no consenting id ever appeared; the scan would not notice leaks"
    );
    Ok(format!(
        "{C8_RUNS} NaM runs, {:.1} MB scanned, {checked_ids} non-consenting ids absent; {seen_consenting} consenting ids present",
        scanned as f64 / 1e6
    ))
}

#[derive(Clone, Debug)]
enum Event {
    Install {
        rules: Vec<OracleRule>,
        notice: usize,
    },
    Receipt {
        notice: usize,
        accepted: bool,
    },
    Ack {
        notice: usize,
        device: usize,
        accepted: bool,
    },
    Reading {
        device: usize,
        sensor: usize,
        time: u64,
    },
}

#[derive(Clone, Debug)]
struct OracleRule {
    sensor: Option<usize>,
    window: Option<(u64, u64)>,
}

impl OracleRule {
    fn matches(&self, sensor: usize, time: u64) -> bool {
        self.sensor.is_none_or(|s| s == sensor)
            && self
                .window
                .is_none_or(|(a, b)| (a..b).contains(&(time % DAY_MS)))
    }
}

#[derive(Clone, Debug)]
struct Staged {
    rules: Vec<OracleRule>,
    notice: usize,
    receipt: bool,
}

const C9_DEVICES: usize = 6;
const C9_REGISTERED: usize = 4;
const C9_SENSORS: usize = 3;

/// One randomized interleaving. Returns (readings, gated readings, chunks).
fn c9_one(rng: &mut ChaCha20Rng) -> Result<(usize, usize, usize), String> {
    let model = if rng.gen() {
        NotificationModel::NoticeOnly
    } else {
        NotificationModel::NoticeAndAck
    };
    let devices: Vec<DeviceId> = (0..C9_DEVICES)
        .map(|i| DeviceId::new(vec![0x02, 0x9A, rng.gen(), rng.gen(), rng.gen(), i as u8]).unwrap())
        .collect();
    let sensors: Vec<SensorId> = (0..C9_SENSORS)
        .map(|i| SensorId::new(vec![0x5E, 0x50, 0, 0, 0, i as u8]).unwrap())
        .collect();
    let device_keys: Vec<KeyPair> = (0..C9_DEVICES)
        .map(|_| KeyPair::generate(KeyRole::Device))
        .collect();
    let mut users = UserRegistry::new();
    for i in 0..C9_REGISTERED {
        users
            .register(UserRegistration {
                device: devices[i].clone(),
                contact: format!("u{i}"),
                public_key: device_keys[i].public(),
            })
            .map_err(err)?;
    }
    let notifier_keys = KeyPair::generate(KeyRole::Notifier);
    let notifier_pk = notifier_keys.public();
    let mut notifier = Notifier::new(notifier_keys, users.clone());
    let window_ms = rng.gen_range(1..=6) * 10 * 60_000;
    let policy = ChunkPolicy::new(1 << 20, window_ms).map_err(err)?;
    let mut enclave = Enclave::new(
        KeyPair::generate(KeyRole::Enclave),
        EnclaveConfig {
            model,
            policy,
            notifier: Some(notifier_pk),
        },
        users,
    )
    .map_err(err)?;
    let pk = enclave.public_key();

    let mut t = DEFAULT_START_MS + rng.gen_range(6..12) * HOUR_MS;
    let mut events = Vec::new();
    let mut envelopes = Vec::new();
    let mut notice_ids: Vec<NoticeId> = Vec::new();
    let mut installs = 0;
    // Every install extends whichever version is newest, so a version holds
    // all rules installed so far.
    let mut installed: Vec<OracleRule> = Vec::new();
    let mut chunks: Vec<SealedChunk> = Vec::new();
    let n_events = rng.gen_range(20..80);
    for _ in 0..n_events {
        let roll: f64 = rng.gen();
        if roll < 0.08 && installs < 2 {
            installs += 1;
            let created = Timestamp::new(t).unwrap();
            let sensor = rng.gen_bool(0.3).then(|| rng.gen_range(0..C9_SENSORS));
            let window = rng.gen_bool(0.4).then_some((9 * HOUR_MS, 17 * HOUR_MS));
            let mut rule = DataCaptureRule::new(format!("r{installs}"), Action::OptIn, created);
            if let Some(s) = sensor {
                rule = rule.with_sensors([sensors[s].clone()]);
            }
            if window.is_some() {
                rule = rule.with_window(DailyWindow::hours(9, 17));
            }
            let added = OracleRule { sensor, window };
            let rs = RuleSet::new(vec![rule], Action::OptOut).map_err(err)?;
            let out = enclave.install_ruleset(rs, created).map_err(err)?;
            notice_ids.push(out.notice_id());
            let notice = notice_ids.len() - 1;
            if let InstallOutcome::Envelope(env) = out {
                envelopes.push((notice, env));
            }
            installed.push(added);
            let rules = installed.clone();
            events.push(Event::Install { rules, notice });
        } else if roll < 0.25 && model == NotificationModel::NoticeOnly && !envelopes.is_empty() {
            let (notice, env) = envelopes.choose(rng).unwrap().clone();
            let publication = notifier.publish_notice_nom(&env).map_err(err)?;
            let accepted = enclave.accept_receipt(&publication.receipt).is_ok();
            events.push(Event::Receipt { notice, accepted });
        } else if roll < 0.25 && model == NotificationModel::NoticeAndAck && !notice_ids.is_empty()
        {
            let notice = rng.gen_range(0..notice_ids.len());
            let device = rng.gen_range(0..C9_DEVICES);
            let ack = Acknowledgment::create(
                notice_ids[notice],
                devices[device].clone(),
                &device_keys[device],
                Timestamp::new(t).unwrap(),
            );
            let accepted = enclave.register_ack(ack).is_ok();
            events.push(Event::Ack {
                notice,
                device,
                accepted,
            });
        } else {
            t += if rng.gen_bool(0.05) {
                rng.gen_range(HOUR_MS..6 * HOUR_MS)
            } else {
                rng.gen_range(0..window_ms / 3)
            };
            let device = rng.gen_range(0..C9_DEVICES);
            let sensor = rng.gen_range(0..C9_SENSORS);
            let r = SensorReading::new(
                devices[device].clone(),
                sensors[sensor].clone(),
                Timestamp::new(t).unwrap(),
            );
            let ct = crypto::seal_to_enclave(&pk, &r.to_wire()).map_err(err)?;
            chunks.extend(enclave.submit(&ct).map_err(err)?);
            events.push(Event::Reading {
                device,
                sensor,
                time: t,
            });
        }
    }
    let (last, _) = enclave.finish().map_err(err)?;
    chunks.extend(last);

    // Boundaries come from the sealed chunks.
    let mut firsts = HashSet::new();
    let mut sealed_records = Vec::new();
    for c in &chunks {
        firsts.insert(sealed_records.len());
        sealed_records.extend(c.records.iter().cloned());
    }
    for w in chunks.windows(2) {
        let a = w[0].records[0].time.millis();
        let last = w[0].records.last().unwrap().time.millis();
        let b = w[1].records[0].time.millis();
        ensure!(
            last < a + window_ms && b >= a + window_ms,
            "chunk boundary does not follow the window policy"
        );
    }

    // Replay.
    let mut staged: Option<Staged> = None;
    let mut live: Option<Staged> = None;
    let mut acks: HashMap<usize, HashSet<usize>> = HashMap::new();
    let mut consent: HashSet<usize> = HashSet::new();
    let mut any_receipt = false;
    let mut acked_any: HashSet<usize> = HashSet::new();
    let mut k = 0;
    let mut gated = 0;
    for e in &events {
        match e {
            Event::Install { rules, notice } => {
                staged = Some(Staged {
                    rules: rules.clone(),
                    notice: *notice,
                    receipt: model == NotificationModel::NoticeAndAck,
                })
            }
            Event::Receipt { notice, accepted } => {
                let want = staged.as_ref().is_some_and(|s| s.notice == *notice);
                ensure!(
                    *accepted == want,
                    "receipt for notice {notice}: accepted {accepted}, oracle {want}"
                );
                if want {
                    staged.as_mut().unwrap().receipt = true;
                    any_receipt = true;
                }
            }
            Event::Ack {
                notice,
                device,
                accepted,
            } => {
                let want = *device < C9_REGISTERED;
                ensure!(
                    *accepted == want,
                    "ack from device {device}: accepted {accepted}, oracle {want}"
                );
                if want {
                    acks.entry(*notice).or_default().insert(*device);
                    acked_any.insert(*device);
                }
            }
            Event::Reading {
                device,
                sensor,
                time,
            } => {
                if firsts.contains(&k) {
                    if staged.as_ref().is_some_and(|s| s.receipt) {
                        live = staged.take();
                    }
                    if let Some(l) = &live {
                        consent = acks.get(&l.notice).cloned().unwrap_or_default();
                    }
                }
                let want = match &live {
                    None => SensorState::Passive,
                    Some(_)
                        if model == NotificationModel::NoticeAndAck
                            && !consent.contains(device) =>
                    {
                        SensorState::Passive
                    }
                    Some(l) if l.rules.iter().any(|r| r.matches(*sensor, *time)) => {
                        SensorState::Active
                    }
                    Some(_) => SensorState::Passive,
                };
                let rec = sealed_records
                    .get(k)
                    .ok_or("fewer sealed records than readings")?;
                ensure!(rec.time.millis() == *time, "reading {k} out of place");
                ensure!(
                    rec.state == want,
                    "reading {k}: sealed {:?}, oracle {want:?}",
                    rec.state
                );
                let ungated = match model {
                    NotificationModel::NoticeOnly => any_receipt,
                    NotificationModel::NoticeAndAck => acked_any.contains(device),
                };
                if !ungated {
                    gated += 1;
                    ensure!(
                        rec.state == SensorState::Passive,
                        "reading {k} Active before notice gate opened"
                    );
                }
                k += 1;
            }
        }
    }
    ensure!(
        k == sealed_records.len(),
        "{} sealed records for {k} readings",
        sealed_records.len()
    );
    Ok((k, gated, chunks.len()))
}

fn c9_gating() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let (mut readings, mut gated, mut chunks) = (0, 0, 0);
    for i in 0..C9_INTERLEAVINGS {
        let (r, g, c) = c9_one(&mut rng).map_err(|e| format!("interleaving {i}: {e}"))?;
        readings += r;
        gated += g;
        chunks += c;
    }
    ensure!(gated > 0, "no reading was ever gated");
    Ok(format!(
        "{C9_INTERLEAVINGS} interleavings, {readings} readings in {chunks} chunks match the oracle; {gated} gated readings all Passive"
    ))
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 9] = [
        ("round-trip integrity", c1_round_trip),
        ("tamper matrix", c2_tamper_matrix),
        ("linear verification scaling", c3_linear_scaling),
        ("sealing throughput", c4_sealing_throughput),
        ("proof overhead", c5_proof_overhead),
        ("user verification by streaming", c6_user_streaming),
        ("oracle equivalence", c7_oracle),
        ("privacy scan", c8_privacy_scan),
        ("notice gating", c9_gating),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
