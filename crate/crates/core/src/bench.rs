//! Verification timing against chunk count.

use std::fmt::Write as _;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{KeyPair, KeyRole, PublicKey};
use crate::enclave::{Sealer, TerminalAnchor};
use crate::model::{DeviceId, SensorId, SensorReading, SensorState, StatefulReading, Timestamp};
use crate::store::bundle::{Boundary, BundleEntry, BundleHeader, BundleKind, VerifierBundle};
use crate::store::format::encode_chunk;
use crate::store::{Store, StoreError};
use crate::verify::{audit_range, verify_stream, Summary};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub chunks: usize,
    pub readings: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    LinearFit {
        slope,
        intercept,
        r2,
    }
}

pub fn fit_rows(rows: &[BenchRow]) -> LinearFit {
    let pts: Vec<_> = rows.iter().map(|r| (r.chunks as f64, r.seconds)).collect();
    linear_fit(&pts)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("chunks,seconds,readings\n");
    for r in rows {
        writeln!(s, "{},{:.6},{}", r.chunks, r.seconds, r.readings).expect("writing to a String");
    }
    s
}

pub fn to_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>10} {:>12} {:>12}\n", "chunks", "readings", "seconds");
    for r in rows {
        writeln!(s, "{:>10} {:>12} {:>12.4}", r.chunks, r.readings, r.seconds)
            .expect("writing to a String");
    }
    s
}

/// A sealed stream of `chunks` chunks of `per_chunk` readings each, as one
/// auditor bundle, plus the enclave key. Every other reading is Active.
pub fn synthetic_bundle(chunks: usize, per_chunk: usize, seed: u64) -> (VerifierBundle, PublicKey) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sealer = Sealer::new(KeyPair::generate(KeyRole::Enclave)).expect("enclave key");
    let mut t = 1_546_819_200_000u64;
    let mut entries = Vec::with_capacity(chunks);
    for _ in 0..chunks {
        let mut open = sealer.open_chunk(None).expect("not finalized");
        for j in 0..per_chunk {
            t += rng.gen_range(1..50);
            let r = SensorReading::new(
                DeviceId::new(rng.gen::<[u8; 6]>().to_vec()).expect("six bytes"),
                SensorId::new(vec![0x5E, 0x50, 0, 0, 0, rng.gen()]).expect("six bytes"),
                Timestamp::new(t).expect("positive"),
            );
            let state = if j % 2 == 0 {
                SensorState::Active
            } else {
                SensorState::Passive
            };
            open.seal_append(StatefulReading::new(r, state));
        }
        let sc = sealer.seal(open).expect("sealing").expect("non-empty");
        entries.push(BundleEntry {
            index: sc.index,
            payload: Some(encode_chunk(&sc).0),
        });
    }
    let terminal = sealer.finalize().expect("finalize");
    let bundle = VerifierBundle {
        header: BundleHeader {
            kind: BundleKind::Auditor,
            start: 1,
            end: chunks as u64,
            before: Boundary::Seed(*sealer.genesis()),
            after: Boundary::Terminal(terminal),
            known_digests: Vec::new(),
        },
        entries,
    };
    (bundle, sealer.public_key())
}

/// The first `n` chunks of `full`, with the right-hand boundary taken from
/// chunk `n + 1`.
pub fn prefix_bundle(
    full: &VerifierBundle,
    n: usize,
    terminal: Option<TerminalAnchor>,
) -> VerifierBundle {
    let mut b = VerifierBundle {
        header: full.header.clone(),
        entries: full.entries[..n].to_vec(),
    };
    b.header.end = n as u64;
    if n < full.entries.len() {
        let next = full.entries[n]
            .payload
            .as_deref()
            .expect("synthetic payload");
        let (sc, _) = crate::store::format::decode_chunk(next).expect("synthetic chunk");
        b.header.after = Boundary::Neighbor(sc.g_self());
    } else if let Some(t) = terminal {
        b.header.after = Boundary::Terminal(t);
    }
    b
}

/// Minimum audit time over `repeats`, or the summary of a failed audit.
fn time_audit(
    bundle: &VerifierBundle,
    pk: &PublicKey,
    repeats: usize,
    workers: usize,
) -> Result<Duration, Summary> {
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let r = audit_range(bundle, pk, workers);
        if !r.summary.all_intact() {
            return Err(r.summary);
        }
        best = best.min(r.elapsed);
    }
    Ok(best)
}

fn not_intact(s: Summary) -> StoreError {
    StoreError::Corrupt {
        what: "benchmark range",
        detail: format!("audit not intact: {s}"),
    }
}

/// Minimum audit time over `repeats` for each prefix size in `counts`.
pub fn bench_synthetic(
    counts: &[usize],
    per_chunk: usize,
    repeats: usize,
    workers: usize,
) -> Vec<BenchRow> {
    let max = counts.iter().copied().max().unwrap_or(0);
    let (full, pk) = synthetic_bundle(max, per_chunk, 7);
    counts
        .iter()
        .map(|&n| {
            let b = prefix_bundle(&full, n, None);
            BenchRow {
                chunks: n,
                readings: n * per_chunk,
                seconds: time_audit(&b, &pk, repeats, workers)
                    .expect("synthetic bundles are intact")
                    .as_secs_f64(),
            }
        })
        .collect()
}

/// Audit ranges `1..=n` of a sealed store. Counts beyond the store are
/// skipped.
pub fn bench_store(
    store: &Store,
    counts: &[usize],
    repeats: usize,
    workers: usize,
) -> Result<Vec<BenchRow>, StoreError> {
    let pk = store.anchors()?.enclave_key.ok_or(StoreError::Corrupt {
        what: "anchors",
        detail: "no enclave key".into(),
    })?;
    let manifest = store.manifest()?;
    let mut rows = Vec::new();
    for &n in counts {
        if n == 0 || n > manifest.len() {
            continue;
        }
        let bundle = store.get_auditor_bundle(1..=n as u64)?;
        rows.push(BenchRow {
            chunks: n,
            readings: manifest[..n].iter().map(|m| m.records).sum(),
            seconds: time_audit(&bundle, &pk, repeats, workers)
                .map_err(not_intact)?
                .as_secs_f64(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaysRow {
    pub days: u64,
    pub chunks: usize,
    pub seconds: f64,
}

pub fn days_to_csv(rows: &[DaysRow]) -> String {
    let mut s = String::from("days,chunks,seconds\n");
    for r in rows {
        writeln!(s, "{},{},{:.6}", r.days, r.chunks, r.seconds).expect("writing to a String");
    }
    s
}

/// Streaming audit time for the chunks opened within the first `d` days of
/// the store, for each `d` in `days`. The verifier holds three chunks at a
/// time, as a memory-constrained auditor would.
pub fn bench_stream_days(
    store: &Store,
    days: &[u64],
    repeats: usize,
) -> Result<Vec<DaysRow>, StoreError> {
    let pk = store.anchors()?.enclave_key.ok_or(StoreError::Corrupt {
        what: "anchors",
        detail: "no enclave key".into(),
    })?;
    let mut opened = Vec::new();
    for i in store.indices()? {
        if let Some(c) = store.get_chunk(i)? {
            opened.push(c.records.first().map_or(0, |r| r.time.millis()));
        }
    }
    let Some(&t0) = opened.first() else {
        return Ok(Vec::new());
    };
    let day0 = t0 - t0 % crate::model::DAY_MS;
    let mut rows = Vec::new();
    for &d in days {
        let n = opened
            .iter()
            .take_while(|&&t| t < day0 + d * crate::model::DAY_MS)
            .count();
        if n == 0 {
            continue;
        }
        let bytes = store.get_auditor_bundle(1..=n as u64)?.to_bytes();
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let reader = crate::store::bundle::BundleReader::new(&bytes[..])?;
            let (summary, elapsed) = verify_stream(reader, None, &pk, |_| {})?;
            if !summary.all_intact() {
                return Err(not_intact(summary));
            }
            best = best.min(elapsed.as_secs_f64());
        }
        rows.push(DaysRow {
            days: d,
            chunks: n,
            seconds: best,
        });
    }
    Ok(rows)
}
