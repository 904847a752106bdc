//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so a
//! typo cannot silently fall back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use sensorseal::enclave::ChunkPolicy;
use sensorseal::harness::WorkloadSpec;
use sensorseal::notify::NotificationModel;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub store: PathBuf,
    pub keys: PathBuf,
    pub model: NotificationModel,
    pub max_bytes: usize,
    pub max_window_ms: u64,
    pub seed: u64,
    pub days: f64,
    pub rate: f64,
    pub devices: usize,
    pub registered: usize,
    pub consenting: usize,
    pub params_len: usize,
    pub start_ms: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let policy = ChunkPolicy::default();
        let w = WorkloadSpec::default();
        Self {
            store: PathBuf::from("store"),
            keys: PathBuf::from("keys"),
            model: NotificationModel::NoticeOnly,
            max_bytes: policy.max_bytes,
            max_window_ms: policy.max_window_ms,
            seed: w.seed,
            days: 1.0,
            rate: 0.01,
            devices: 1000,
            registered: 5,
            consenting: 5,
            params_len: 0,
            start_ms: w.start_ms,
            workers: 1,
        }
    }
}

pub fn parse_model(s: &str) -> Result<NotificationModel, String> {
    match s {
        "nom" => Ok(NotificationModel::NoticeOnly),
        "nam" => Ok(NotificationModel::NoticeAndAck),
        other => Err(format!("model must be nom or nam, got {other:?}")),
    }
}

pub fn model_name(m: NotificationModel) -> &'static str {
    match m {
        NotificationModel::NoticeOnly => "nom",
        NotificationModel::NoticeAndAck => "nam",
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: not a number: {v:?}"))
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "store" => self.store = PathBuf::from(v),
            "keys" => self.keys = PathBuf::from(v),
            "model" => self.model = parse_model(v)?,
            "max_bytes" => self.max_bytes = num(key, v)?,
            "max_window_ms" => self.max_window_ms = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "days" => self.days = num(key, v)?,
            "rate" => self.rate = num(key, v)?,
            "devices" => self.devices = num(key, v)?,
            "registered" => self.registered = num(key, v)?,
            "consenting" => self.consenting = num(key, v)?,
            "params_len" => self.params_len = num(key, v)?,
            "start_ms" => self.start_ms = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut c = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
            c.apply(k.trim(), v.trim())
                .map_err(|e| format!("config line {}: {e}", i + 1))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn policy(&self) -> Result<ChunkPolicy, String> {
        ChunkPolicy::new(self.max_bytes, self.max_window_ms).map_err(|e| e.to_string())
    }

    pub fn workload(&self) -> WorkloadSpec {
        WorkloadSpec {
            n_devices: self.devices,
            start_ms: self.start_ms,
            params_len: self.params_len,
            ..WorkloadSpec::default()
        }
        .days(self.days)
        .scaled(self.rate)
        .seeded(self.seed)
    }
}
