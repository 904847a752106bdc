//! `sensorseal` command-line driver.
//!
//! State lives in two directories. The key directory (trusted side) holds
//! the sealed enclave key, public keys, the user registry, device secrets and
//! the current rules. The store directory (untrusted side) holds chunks,
//! anchors, notices and acknowledgments.

mod config;

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{model_name, parse_model, RunConfig};
use sensorseal::bench;
use sensorseal::crypto::{self, KeyPair, KeyRole, PublicKey};
use sensorseal::enclave::{sealed_storage, Enclave, EnclaveConfig, InstallOutcome};
use sensorseal::harness::{self, TamperAction, TamperKind};
use sensorseal::model::{DeviceId, Timestamp};
use sensorseal::notify::{
    Acknowledgment, NoticeId, NotificationModel, Notifier, NotifierReceipt, UserRegistration,
    UserRegistry,
};
use sensorseal::pipeline::{self, PipelineConfig};
use sensorseal::rules::RuleSet;
use sensorseal::store::bundle::{BundleKind, BundleReader, VerifierBundle};
use sensorseal::store::{PreSharedKeyAuth, Store, UserRequest};
use sensorseal::verify::{self, StreamItem, Summary};

const READS_MAGIC: &[u8; 8] = b"SSREADS1";

#[derive(Parser)]
#[command(
    name = "sensorseal",
    version,
    about = "Seal and verify IoT sensor logs"
)]
struct Cli {
    /// key = value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store directory.
    #[arg(long, global = true, env = "SENSORSEAL_STORE")]
    store: Option<PathBuf>,
    /// Key directory.
    #[arg(long, global = true)]
    keys: Option<PathBuf>,
    /// Notification model: nom or nam.
    #[arg(long, global = true)]
    model: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct WorkloadArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    days: Option<f64>,
    /// Multiplier on the reference diurnal rates.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    params_len: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Provision the enclave, notifier and registered device keys.
    Keygen {
        #[arg(long)]
        registered: Option<usize>,
        #[command(flatten)]
        w: WorkloadArgs,
    },
    /// Validate a rule file and make it the pending rule set.
    Rules {
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Install the pending rules in the enclave and issue the notice.
    Notify {
        #[arg(long)]
        issued_at: Option<u64>,
        /// Contact whose delivery fails.
        #[arg(long)]
        unreachable: Vec<String>,
    },
    /// Acknowledge the latest notice on behalf of a registered device.
    Ack {
        #[arg(long)]
        device: String,
    },
    /// Generate encrypted readings.
    Gen {
        #[command(flatten)]
        w: WorkloadArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run readings through the enclave into the store.
    Seal {
        /// Output of `gen`; without it the configured workload is generated.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        w: WorkloadArgs,
        #[arg(long)]
        max_bytes: Option<usize>,
        #[arg(long)]
        max_window_ms: Option<u64>,
    },
    /// Write an auditor bundle, or a user bundle with --device.
    ExportBundle {
        #[arg(long)]
        range: Option<String>,
        #[arg(long)]
        device: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a range; exit 0 iff every chunk is intact.
    VerifyAuditor {
        #[arg(long)]
        range: Option<String>,
        /// Verify this bundle file instead of reading the store.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Hold three chunks at a time.
        #[arg(long)]
        stream: bool,
    },
    /// Verify a device's view of a range; exit 0 iff every chunk is intact.
    VerifyUser {
        #[arg(long)]
        device: String,
        #[arg(long)]
        range: Option<String>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        stream: bool,
    },
    /// Apply one adversarial edit to the store.
    Tamper {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        chunk: u64,
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = 0)]
        other: u64,
    },
    /// Verification time against chunk count, as a table and CSV.
    Bench {
        #[arg(long, default_value = "1,50,100,500,1000,3000")]
        counts: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        workers: Option<usize>,
        /// Benchmark synthetic chunks of this many readings instead of the store.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Also time streaming audits over the first N days, e.g. 1,7,30.
        #[arg(long)]
        days: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fresh keys, rule install, notify, generate, seal and store in one run.
    Pipeline {
        #[command(flatten)]
        w: WorkloadArgs,
        /// Rule file; defaults to the pending rules if any.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        registered: Option<usize>,
        #[arg(long)]
        consenting: Option<usize>,
    },
}

#[derive(Debug)]
struct CliError {
    stage: &'static str,
    msg: String,
}

trait At<T> {
    fn at(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> At<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            stage,
            msg: e.to_string(),
        })
    }
}

fn fail<T>(stage: &'static str, msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError {
        stage,
        msg: msg.into(),
    })
}

type CliResult = Result<ExitCode, CliError>;

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn key_path(&self, name: &str) -> PathBuf {
        self.cfg.keys.join(name)
    }

    fn read_key_file(&self, name: &str, stage: &'static str) -> Result<String, CliError> {
        let p = self.key_path(name);
        fs::read_to_string(&p)
            .map(|s| s.trim().to_string())
            .at(stage)
            .map_err(|e| CliError {
                msg: format!("{}: {}", p.display(), e.msg),
                ..e
            })
    }

    fn enclave_pk(&self, stage: &'static str) -> Result<PublicKey, CliError> {
        PublicKey::from_hex(&self.read_key_file("enclave.pub", stage)?).at(stage)
    }

    fn users(&self, stage: &'static str) -> Result<UserRegistry, CliError> {
        match fs::read_to_string(self.key_path("users.txt")) {
            Ok(t) => UserRegistry::parse(&t).at(stage),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(UserRegistry::new()),
            Err(e) => Err(e).at(stage),
        }
    }

    /// `(device, secret key, psk)` per registered device.
    fn devices(&self, stage: &'static str) -> Result<Vec<(DeviceId, KeyPair, [u8; 32])>, CliError> {
        let text = match fs::read_to_string(self.key_path("devices.txt")) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e).at(stage),
        };
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return fail(stage, format!("devices.txt: bad line {line:?}"));
            }
            let device = DeviceId::from_hex(parts[0]).at(stage)?;
            let key = KeyPair::from_secret(&hex::decode(parts[1]).at(stage)?).at(stage)?;
            let psk: [u8; 32] =
                hex::decode(parts[2])
                    .at(stage)?
                    .try_into()
                    .map_err(|_| CliError {
                        stage,
                        msg: "psk must be 32 bytes".into(),
                    })?;
            out.push((device, key, psk));
        }
        Ok(out)
    }

    fn device(
        &self,
        hex_id: &str,
        stage: &'static str,
    ) -> Result<(DeviceId, KeyPair, [u8; 32]), CliError> {
        let id = DeviceId::from_hex(hex_id).at(stage)?;
        self.devices(stage)?
            .into_iter()
            .find(|d| d.0 == id)
            .ok_or_else(|| CliError {
                stage,
                msg: format!(
                    "device {hex_id} is not registered in {}",
                    self.cfg.keys.display()
                ),
            })
    }

    fn write_participants(
        &self,
        rows: &[(DeviceId, &KeyPair, [u8; 32])],
        stage: &'static str,
    ) -> Result<(), CliError> {
        let mut users = UserRegistry::new();
        let mut devices = String::new();
        for (i, (d, k, psk)) in rows.iter().enumerate() {
            users
                .register(UserRegistration {
                    device: d.clone(),
                    contact: format!("user{i}@example.org"),
                    public_key: k.public(),
                })
                .at(stage)?;
            devices.push_str(&format!(
                "{} {} {}\n",
                d,
                hex::encode(k.export_secret().at(stage)?),
                hex::encode(psk)
            ));
        }
        fs::write(self.key_path("users.txt"), users.to_text()).at(stage)?;
        fs::write(self.key_path("devices.txt"), devices).at(stage)
    }

    fn open_or_create_store(&self, stage: &'static str) -> Result<Store, CliError> {
        if self.cfg.store.join("MANIFEST").exists() {
            Store::open(&self.cfg.store).at(stage)
        } else {
            Store::create(&self.cfg.store).at(stage)
        }
    }

    fn open_store(&self, stage: &'static str) -> Result<Store, CliError> {
        Store::open(&self.cfg.store).at(stage)
    }

    fn range(
        &self,
        store: &Store,
        spec: Option<&str>,
        stage: &'static str,
    ) -> Result<RangeInclusive<u64>, CliError> {
        if let Some(s) = spec {
            return parse_range(s).at(stage);
        }
        let last = match store.anchors().at(stage)?.terminal {
            Some(t) => t.last_index,
            None => store
                .manifest()
                .at(stage)?
                .iter()
                .map(|m| m.index)
                .max()
                .unwrap_or(0),
        };
        if last == 0 {
            return fail(stage, "store holds no chunks");
        }
        Ok(1..=last)
    }
}

fn parse_range(s: &str) -> Result<RangeInclusive<u64>, String> {
    let bad = || format!("range must look like a..b, got {s:?}");
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad list item {x:?}")))
        .collect()
}

fn apply_workload(cfg: &mut RunConfig, w: &WorkloadArgs) {
    if let Some(v) = w.seed {
        cfg.seed = v;
    }
    if let Some(v) = w.days {
        cfg.days = v;
    }
    if let Some(v) = w.rate {
        cfg.rate = v;
    }
    if let Some(v) = w.devices {
        cfg.devices = v;
    }
    if let Some(v) = w.params_len {
        cfg.params_len = v;
    }
}

/// The enclave's record of the last install: `issued_at`, model and either
/// the notifier receipt or the notice id.
struct InstallRecord {
    issued_at: u64,
    model: NotificationModel,
    notice_id: NoticeId,
    receipt: Option<NotifierReceipt>,
}

impl InstallRecord {
    fn render(&self) -> String {
        let mut s = format!(
            "issued_at={}\nmodel={}\nnotice={}\n",
            self.issued_at,
            model_name(self.model),
            self.notice_id
        );
        if let Some(r) = &self.receipt {
            s.push_str(&format!("receipt={}\n", hex::encode(r.encode())));
        }
        s
    }

    fn parse(text: &str) -> Result<Self, String> {
        let mut issued_at = None;
        let mut model = None;
        let mut notice_id = None;
        let mut receipt = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or("install record: bad line")?;
            match k {
                "issued_at" => issued_at = Some(v.parse::<u64>().map_err(|e| e.to_string())?),
                "model" => model = Some(parse_model(v)?),
                "notice" => notice_id = Some(NoticeId::from_hex(v).map_err(|e| e.to_string())?),
                "receipt" => {
                    let b = hex::decode(v).map_err(|e| e.to_string())?;
                    receipt = Some(NotifierReceipt::decode(&b).map_err(|e| e.to_string())?);
                }
                other => return Err(format!("install record: unknown key {other}")),
            }
        }
        Ok(Self {
            issued_at: issued_at.ok_or("install record: no issued_at")?,
            model: model.ok_or("install record: no model")?,
            notice_id: notice_id.ok_or("install record: no notice")?,
            receipt,
        })
    }
}

fn build_enclave(
    ctx: &Ctx,
    model: NotificationModel,
    stage: &'static str,
) -> Result<Enclave, CliError> {
    let key = sealed_storage::unseal(&ctx.key_path("enclave.sealed")).at(stage)?;
    let notifier = match model {
        NotificationModel::NoticeOnly => {
            Some(PublicKey::from_hex(&ctx.read_key_file("notifier.pub", stage)?).at(stage)?)
        }
        NotificationModel::NoticeAndAck => None,
    };
    Enclave::new(
        key,
        EnclaveConfig {
            model,
            policy: ctx.cfg.policy().at(stage)?,
            notifier,
        },
        ctx.users(stage)?,
    )
    .at(stage)
}

fn pending_rules(ctx: &Ctx, stage: &'static str) -> Result<RuleSet, CliError> {
    RuleSet::parse(&ctx.read_key_file("rules.txt", stage)?).at(stage)
}

fn cmd_keygen(ctx: &Ctx, registered: Option<usize>) -> CliResult {
    const S: &str = "keygen";
    fs::create_dir_all(&ctx.cfg.keys).at(S)?;
    let pk = sealed_storage::provision(&ctx.key_path("enclave.sealed")).at(S)?;
    fs::write(ctx.key_path("enclave.pub"), pk.to_hex()).at(S)?;
    let notifier = KeyPair::generate(KeyRole::Notifier);
    fs::write(
        ctx.key_path("notifier.key"),
        hex::encode(notifier.export_secret().at(S)?),
    )
    .at(S)?;
    fs::write(ctx.key_path("notifier.pub"), notifier.public().to_hex()).at(S)?;
    let n = registered.unwrap_or(ctx.cfg.registered);
    let ids = harness::device_ids(&ctx.cfg.workload());
    if n > ids.len() {
        return fail(
            S,
            format!("cannot register {n} of {} workload devices", ids.len()),
        );
    }
    let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(KeyRole::Device)).collect();
    let rows: Vec<_> = ids
        .into_iter()
        .zip(&keys)
        .map(|(d, k)| {
            let psk: [u8; 32] = crypto::fresh_random_string().expect("entropy").0;
            (d, k, psk)
        })
        .collect();
    ctx.write_participants(&rows, S)?;
    println!("enclave {pk:?}");
    println!("registered {n}");
    for (d, _, _) in &rows {
        println!("device {d}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_rules(ctx: &Ctx, file: Option<&Path>) -> CliResult {
    const S: &str = "rules";
    let rules = match file {
        Some(f) => {
            let r = RuleSet::parse(&fs::read_to_string(f).at(S)?).at(S)?;
            fs::create_dir_all(&ctx.cfg.keys).at(S)?;
            fs::write(ctx.key_path("rules.txt"), r.to_text()).at(S)?;
            r
        }
        None => pending_rules(ctx, S)?,
    };
    print!("{}", rules.to_text());
    println!("digest {}", rules.digest());
    Ok(ExitCode::SUCCESS)
}

fn cmd_notify(ctx: &Ctx, issued_at: Option<u64>, unreachable: &[String]) -> CliResult {
    const S: &str = "notify";
    let rules = pending_rules(ctx, S)?;
    let model = ctx.cfg.model;
    let mut enclave = build_enclave(ctx, model, S)?;
    let issued_at = issued_at.unwrap_or(ctx.cfg.start_ms - 1);
    let store = ctx.open_or_create_store(S)?;
    let outcome = enclave
        .install_ruleset(rules, Timestamp::new(issued_at).at(S)?)
        .at(S)?;
    let record = match outcome {
        InstallOutcome::Envelope(env) => {
            let secret = hex::decode(ctx.read_key_file("notifier.key", S)?).at(S)?;
            let mut notifier = Notifier::new(KeyPair::from_secret(&secret).at(S)?, ctx.users(S)?);
            for c in unreachable {
                notifier.set_unreachable(c.clone());
            }
            let publication = notifier.publish_notice_nom(&env).at(S)?;
            store.put_notice(&publication.notice).at(S)?;
            for d in &publication.deliveries {
                println!(
                    "delivery slot={} contact={} delivered={}",
                    d.slot, d.contact, d.delivered
                );
            }
            InstallRecord {
                issued_at,
                model,
                notice_id: env.notice_id,
                receipt: Some(publication.receipt),
            }
        }
        InstallOutcome::Notice(notice) => {
            store.put_notice(&notice).at(S)?;
            InstallRecord {
                issued_at,
                model,
                notice_id: notice.notice_id,
                receipt: None,
            }
        }
    };
    fs::write(ctx.key_path("install.txt"), record.render()).at(S)?;
    println!("notice {} model={}", record.notice_id, model_name(model));
    Ok(ExitCode::SUCCESS)
}

fn cmd_ack(ctx: &Ctx, device_hex: &str) -> CliResult {
    const S: &str = "ack";
    let (device, key, _) = ctx.device(device_hex, S)?;
    let pk = ctx.enclave_pk(S)?;
    let store = ctx.open_store(S)?;
    let notice = store
        .notices()
        .at(S)?
        .into_iter()
        .rev()
        .find(|n| n.model == NotificationModel::NoticeAndAck)
        .ok_or_else(|| CliError {
            stage: S,
            msg: "no notice-and-ACK notice in the store".into(),
        })?;
    if !notice.verify(&pk) {
        return fail(
            S,
            "notice signature does not verify against the enclave key",
        );
    }
    let slot = ctx.users(S)?.slot_of(&device).ok_or_else(|| CliError {
        stage: S,
        msg: "device has no delivery slot".into(),
    })?;
    let rules = notice.open_for(slot, &key).at(S)?;
    let ack = Acknowledgment::create(notice.notice_id, device.clone(), &key, notice.issued_at);
    store.put_ack(&ack).at(S)?;
    println!(
        "ack notice={} device={} rules={}",
        notice.notice_id,
        device,
        rules.digest()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_readings(path: &Path, readings: impl Iterator<Item = Vec<u8>>) -> io::Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(READS_MAGIC)?;
    let mut n = 0;
    for ct in readings {
        w.write_all(&(ct.len() as u32).to_le_bytes())?;
        w.write_all(&ct)?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

struct ReadingFile(BufReader<File>);

impl ReadingFile {
    fn open(path: &Path) -> io::Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != READS_MAGIC {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "not a readings file",
            ));
        }
        Ok(Self(r))
    }
}

impl Iterator for ReadingFile {
    type Item = io::Result<Vec<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut len = [0u8; 4];
        match self.0.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return None,
            Err(e) => return Some(Err(e)),
        }
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        Some(self.0.read_exact(&mut buf).map(|_| buf))
    }
}

fn cmd_gen(ctx: &Ctx, out: &Path) -> CliResult {
    const S: &str = "gen";
    let pk = ctx.enclave_pk(S)?;
    let n = write_readings(out, harness::generate(ctx.cfg.workload(), pk)).at(S)?;
    println!("readings {n}");
    println!("expected {:.1}", ctx.cfg.workload().expected_events());
    Ok(ExitCode::SUCCESS)
}

fn cmd_seal(ctx: &Ctx, input: Option<&Path>) -> CliResult {
    const S: &str = "seal";
    let store = ctx.open_or_create_store(S)?;
    if !store.indices().at(S)?.is_empty() {
        return fail(S, "store already holds a sealed stream");
    }
    let install = match fs::read_to_string(ctx.key_path("install.txt")) {
        Ok(t) => Some(InstallRecord::parse(&t).at(S)?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e).at(S),
    };
    let model = install.as_ref().map_or(ctx.cfg.model, |i| i.model);
    let mut enclave = build_enclave(ctx, model, S)?;
    if let Some(rec) = &install {
        let outcome = enclave
            .install_ruleset(pending_rules(ctx, S)?, Timestamp::new(rec.issued_at).at(S)?)
            .at(S)?;
        if outcome.notice_id() != rec.notice_id {
            return fail(S, "pending rules changed since notify; run notify again");
        }
        match &rec.receipt {
            Some(r) => enclave.accept_receipt(r).at(S)?,
            None => {
                for ack in store.acks().at(S)? {
                    if ack.notice_id == rec.notice_id {
                        enclave.register_ack(ack).at(S)?;
                    }
                }
            }
        }
    }
    let stats = match input {
        Some(p) => {
            let file = ReadingFile::open(p).at(S)?;
            let mut io_err = None;
            let iter = file.map_while(|r| r.map_err(|e| io_err = Some(e)).ok());
            let stats = pipeline::seal_into(&mut enclave, iter, &store).at(S)?;
            if let Some(e) = io_err {
                return Err(e).at(S);
            }
            stats
        }
        None => {
            let pk = enclave.public_key();
            pipeline::seal_into(
                &mut enclave,
                harness::generate(ctx.cfg.workload(), pk),
                &store,
            )
            .at(S)?
        }
    };
    let lat = pipeline::LatencyStats::of(stats.close_latencies.clone());
    println!("readings {}", stats.readings);
    println!("rejected {}", stats.rejected);
    println!("chunks {}", stats.chunks);
    println!("active {}", stats.active);
    println!("passive {}", stats.passive);
    println!(
        "close-latency-us p50={} p99={} max={}",
        lat.p50.as_micros(),
        lat.p99.as_micros(),
        lat.max.as_micros()
    );
    println!("payload-digest {}", stats.payload_digest);
    Ok(ExitCode::SUCCESS)
}

fn user_bundle(
    ctx: &Ctx,
    store: &Store,
    range: RangeInclusive<u64>,
    device_hex: &str,
    stage: &'static str,
) -> Result<VerifierBundle, CliError> {
    let (device, _, psk) = ctx.device(device_hex, stage)?;
    let mut auth = PreSharedKeyAuth::new();
    for (d, _, k) in ctx.devices(stage)? {
        auth.enroll(d, k);
    }
    let token = PreSharedKeyAuth::token_for(&psk, &device);
    store
        .get_user_bundle(range, &UserRequest { device, token }, &auth)
        .at(stage)
}

fn cmd_export(ctx: &Ctx, range: Option<&str>, device: Option<&str>, out: &Path) -> CliResult {
    const S: &str = "export-bundle";
    let store = ctx.open_store(S)?;
    let range = ctx.range(&store, range, S)?;
    let bundle = match device {
        Some(d) => user_bundle(ctx, &store, range, d, S)?,
        None => store.get_auditor_bundle(range).at(S)?,
    };
    let mut w = BufWriter::new(File::create(out).at(S)?);
    bundle.write_to(&mut w).at(S)?;
    w.flush().at(S)?;
    println!(
        "bundle {} chunks={} strings={}",
        out.display(),
        bundle.entries.len(),
        bundle.string_count()
    );
    Ok(ExitCode::SUCCESS)
}

fn finish_verdicts(summary: &Summary) -> ExitCode {
    println!("summary {summary}");
    if summary.all_intact() && summary.total() > 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn print_item(item: &StreamItem) {
    println!("{}", item.verdict().to_line());
    if let StreamItem::User(_, p) = item {
        print_presence(p);
    }
}

fn print_presence(p: &verify::ChunkPresence) {
    for e in &p.entries {
        println!(
            "presence chunk={} record={} time={} sensor={} state={}",
            p.chunk_index,
            e.record,
            e.time.millis(),
            e.sensor,
            if e.state.is_active() {
                "active"
            } else {
                "passive"
            }
        );
    }
}

fn load_bundle(
    ctx: &Ctx,
    file: Option<&Path>,
    range: Option<&str>,
    device: Option<&str>,
    stage: &'static str,
) -> Result<VerifierBundle, CliError> {
    match file {
        Some(p) => VerifierBundle::from_bytes(&fs::read(p).at(stage)?).at(stage),
        None => {
            let store = ctx.open_store(stage)?;
            let range = ctx.range(&store, range, stage)?;
            match device {
                Some(d) => user_bundle(ctx, &store, range, d, stage),
                None => store.get_auditor_bundle(range).at(stage),
            }
        }
    }
}

fn stream_bundle(
    ctx: &Ctx,
    file: Option<&Path>,
    range: Option<&str>,
    device: Option<&DeviceId>,
    pk: &PublicKey,
    stage: &'static str,
) -> Result<Summary, CliError> {
    let (summary, _) = match file {
        Some(p) => {
            let reader = BundleReader::new(BufReader::new(File::open(p).at(stage)?)).at(stage)?;
            verify::verify_stream(reader, device, pk, |i| print_item(&i)).at(stage)?
        }
        None => {
            let bytes = load_bundle(
                ctx,
                None,
                range,
                device.map(|d| d.to_hex()).as_deref(),
                stage,
            )?
            .to_bytes();
            let reader = BundleReader::new(&bytes[..]).at(stage)?;
            verify::verify_stream(reader, device, pk, |i| print_item(&i)).at(stage)?
        }
    };
    Ok(summary)
}

fn cmd_verify_auditor(
    ctx: &Ctx,
    range: Option<&str>,
    file: Option<&Path>,
    workers: Option<usize>,
    stream: bool,
) -> CliResult {
    const S: &str = "verify-auditor";
    let pk = ctx.enclave_pk(S)?;
    if stream {
        return Ok(finish_verdicts(&stream_bundle(
            ctx, file, range, None, &pk, S,
        )?));
    }
    let bundle = load_bundle(ctx, file, range, None, S)?;
    if bundle.header.kind != BundleKind::Auditor {
        return fail(S, "not an auditor bundle");
    }
    let report = verify::audit_range(&bundle, &pk, workers.unwrap_or(ctx.cfg.workers));
    for v in &report.verdicts {
        println!("{}", v.to_line());
    }
    println!("elapsed-seconds {:.3}", report.elapsed.as_secs_f64());
    Ok(finish_verdicts(&report.summary))
}

fn cmd_verify_user(
    ctx: &Ctx,
    device_hex: &str,
    range: Option<&str>,
    file: Option<&Path>,
    stream: bool,
) -> CliResult {
    const S: &str = "verify-user";
    let pk = ctx.enclave_pk(S)?;
    let device = DeviceId::from_hex(device_hex).at(S)?;
    if stream {
        return Ok(finish_verdicts(&stream_bundle(
            ctx,
            file,
            range,
            Some(&device),
            &pk,
            S,
        )?));
    }
    let bundle = load_bundle(ctx, file, range, Some(device_hex), S)?;
    if bundle.header.kind != BundleKind::User {
        return fail(S, "not a user bundle");
    }
    let (report, presence) = verify::verify_user_range(&bundle, &device, &pk);
    for (v, p) in report.verdicts.iter().zip(&presence.chunks) {
        println!("{}", v.to_line());
        print_presence(p);
    }
    println!("readings {}", presence.total_entries());
    Ok(finish_verdicts(&report.summary))
}

fn cmd_tamper(ctx: &Ctx, action: TamperAction) -> CliResult {
    const S: &str = "tamper";
    let store = ctx.open_store(S)?;
    let report = harness::apply_tamper(&store, &action).at(S)?;
    println!("tamper kind={} {}", action.kind, report.description);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(
    ctx: &Ctx,
    counts: &str,
    repeats: usize,
    workers: Option<usize>,
    synthetic: Option<usize>,
    days: Option<&str>,
    csv: Option<&Path>,
) -> CliResult {
    const S: &str = "bench";
    let counts: Vec<usize> = parse_list(counts).at(S)?;
    let workers = workers.unwrap_or(ctx.cfg.workers);
    let store = match synthetic {
        Some(_) => None,
        None => Some(ctx.open_store(S)?),
    };
    let rows = match (synthetic, &store) {
        (Some(per_chunk), _) => bench::bench_synthetic(&counts, per_chunk, repeats, workers),
        (None, Some(s)) => bench::bench_store(s, &counts, repeats, workers).at(S)?,
        (None, None) => unreachable!("store opened above"),
    };
    print!("{}", bench::to_table(&rows));
    if rows.len() >= 2 {
        let fit = bench::fit_rows(&rows);
        println!(
            "fit slope={:.6e} intercept={:.6e} r2={:.4}",
            fit.slope, fit.intercept, fit.r2
        );
        let first = rows[0];
        for r in &rows[1..] {
            println!(
                "ratio chunks={}/{} time={:.2}",
                r.chunks,
                first.chunks,
                r.seconds / first.seconds.max(f64::MIN_POSITIVE)
            );
        }
    }
    let csv_text = bench::to_csv(&rows);
    match csv {
        Some(p) => fs::write(p, &csv_text).at(S)?,
        None => print!("{csv_text}"),
    }
    if let Some(d) = days {
        let Some(store) = &store else {
            return fail(S, "--days needs a sealed store");
        };
        let rows = bench::bench_stream_days(store, &parse_list(d).at(S)?, repeats).at(S)?;
        print!("{}", bench::days_to_csv(&rows));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_pipeline(ctx: &Ctx, rules: Option<&Path>) -> CliResult {
    const S: &str = "pipeline";
    let rules = match rules {
        Some(p) => Some(RuleSet::parse(&fs::read_to_string(p).at(S)?).at(S)?),
        None => match fs::read_to_string(ctx.key_path("rules.txt")) {
            Ok(t) => Some(RuleSet::parse(&t).at(S)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e).at(S),
        },
    };
    let store = ctx.open_or_create_store(S)?;
    if !store.indices().at(S)?.is_empty() {
        return fail(S, "store already holds a sealed stream");
    }
    let cfg = PipelineConfig {
        workload: ctx.cfg.workload(),
        model: ctx.cfg.model,
        policy: ctx.cfg.policy().at(S)?,
        rules,
        registered: ctx.cfg.registered,
        consenting: ctx.cfg.consenting,
    };
    let run = pipeline::run_pipeline(&cfg, &store).at(S)?;
    fs::create_dir_all(&ctx.cfg.keys).at(S)?;
    fs::write(ctx.key_path("enclave.pub"), run.enclave_key.to_hex()).at(S)?;
    let rows: Vec<_> = run
        .participants
        .iter()
        .map(|p| (p.device.clone(), &p.keys, p.psk))
        .collect();
    ctx.write_participants(&rows, S)?;
    for line in run.report.to_lines() {
        println!("{line}");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).at("config")?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.store {
        cfg.store = s;
    }
    if let Some(k) = cli.keys {
        cfg.keys = k;
    }
    if let Some(m) = &cli.model {
        cfg.model = parse_model(m).at("config")?;
    }
    match &cli.cmd {
        Cmd::Keygen { w, .. }
        | Cmd::Gen { w, .. }
        | Cmd::Seal { w, .. }
        | Cmd::Pipeline { w, .. } => apply_workload(&mut cfg, w),
        _ => {}
    }
    match &cli.cmd {
        Cmd::Seal {
            max_bytes,
            max_window_ms,
            ..
        } => {
            cfg.max_bytes = max_bytes.unwrap_or(cfg.max_bytes);
            cfg.max_window_ms = max_window_ms.unwrap_or(cfg.max_window_ms);
        }
        Cmd::Pipeline {
            registered,
            consenting,
            ..
        } => {
            cfg.registered = registered.unwrap_or(cfg.registered);
            cfg.consenting = consenting.unwrap_or(cfg.consenting);
        }
        _ => {}
    }
    let ctx = Ctx { cfg };
    match cli.cmd {
        Cmd::Keygen { registered, .. } => cmd_keygen(&ctx, registered),
        Cmd::Rules { file } => cmd_rules(&ctx, file.as_deref()),
        Cmd::Notify {
            issued_at,
            unreachable,
        } => cmd_notify(&ctx, issued_at, &unreachable),
        Cmd::Ack { device } => cmd_ack(&ctx, &device),
        Cmd::Gen { out, .. } => cmd_gen(&ctx, &out),
        Cmd::Seal { input, .. } => cmd_seal(&ctx, input.as_deref()),
        Cmd::ExportBundle { range, device, out } => {
            cmd_export(&ctx, range.as_deref(), device.as_deref(), &out)
        }
        Cmd::VerifyAuditor {
            range,
            bundle,
            workers,
            stream,
        } => cmd_verify_auditor(&ctx, range.as_deref(), bundle.as_deref(), workers, stream),
        Cmd::VerifyUser {
            device,
            range,
            bundle,
            stream,
        } => cmd_verify_user(&ctx, &device, range.as_deref(), bundle.as_deref(), stream),
        Cmd::Tamper {
            kind,
            chunk,
            record,
            offset,
            other,
        } => {
            let kind = TamperKind::parse(&kind).ok_or_else(|| CliError {
                stage: "tamper",
                msg: format!(
                    "unknown kind {kind:?}; one of {}",
                    TamperKind::ALL.map(|k| k.name()).join(", ")
                ),
            })?;
            cmd_tamper(
                &ctx,
                TamperAction {
                    kind,
                    chunk,
                    record,
                    offset,
                    other,
                },
            )
        }
        Cmd::Bench {
            counts,
            repeats,
            workers,
            synthetic,
            days,
            csv,
        } => cmd_bench(
            &ctx,
            &counts,
            repeats,
            workers,
            synthetic,
            days.as_deref(),
            csv.as_deref(),
        ),
        Cmd::Pipeline { rules, .. } => cmd_pipeline(&ctx, rules.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.stage, e.msg);
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("3..7").unwrap(), 3..=7);
        assert_eq!(parse_range("3..=7").unwrap(), 3..=7);
        assert_eq!(parse_range("4").unwrap(), 4..=4);
        assert!(parse_range("0..2").is_err());
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("x").is_err());
    }

    #[test]
    fn install_record_round_trip() {
        let r = InstallRecord {
            issued_at: 99,
            model: NotificationModel::NoticeAndAck,
            notice_id: NoticeId([7; 16]),
            receipt: None,
        };
        let back = InstallRecord::parse(&r.render()).unwrap();
        assert_eq!(back.issued_at, 99);
        assert_eq!(back.notice_id, r.notice_id);
        assert_eq!(back.model, r.model);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("1, 50,100").unwrap(), vec![1, 50, 100]);
        assert!(parse_list::<usize>("1,,2").is_err());
    }
}
