//! Data-capture rules and sensor-state assignment.
//!
//! Precedence among matching rules is a total order: a rule naming devices
//! outranks a rule for all devices, then the later `created_at` wins, then
//! opt-out beats opt-in, then the greater `rule_id` wins.
//!
//! Text format, one record per line, `#` starts a comment:
//!
//! ```text
//! default opt-out
//! rule <id> opt-in|opt-out devices=*|<hex>[,<hex>..] sensors=*|<hex>[,..] window=*|HH:MM[:SS]-HH:MM[:SS] valid=<from>..<to|inf> created=<ms>
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::crypto::{hash, Digest};
use crate::model::{put_lp, DeviceId, SensorId, SensorReading, SensorState, Timestamp, DAY_MS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("rule {0}: validity start must precede its end")]
    EmptyValidity(String),
    #[error("rule {0}: daily window start equals end")]
    DegenerateWindow(String),
    #[error("rule {0}: window bound outside a day")]
    WindowOutOfRange(String),
    #[error("rule id must be a non-empty token without whitespace")]
    BadRuleId,
    #[error("duplicate rule id {0}")]
    DuplicateRule(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    OptIn,
    OptOut,
}

impl Action {
    pub fn state(self) -> SensorState {
        match self {
            Action::OptIn => SensorState::Active,
            Action::OptOut => SensorState::Passive,
        }
    }

    fn byte(self) -> u8 {
        match self {
            Action::OptIn => 1,
            Action::OptOut => 0,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            Action::OptIn => "opt-in",
            Action::OptOut => "opt-out",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "opt-in" => Some(Action::OptIn),
            "opt-out" => Some(Action::OptOut),
            _ => None,
        }
    }
}

/// Recurring daily time window in milliseconds after midnight UTC,
/// half-open `[start, end)`. `start > end` wraps past midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DailyWindow {
    pub start_ms: u32,
    pub end_ms: u32,
}

impl DailyWindow {
    pub fn hours(start_h: u32, end_h: u32) -> Self {
        Self {
            start_ms: start_h * 3_600_000,
            end_ms: end_h * 3_600_000,
        }
    }

    pub fn contains(&self, tod_ms: u32) -> bool {
        if self.start_ms < self.end_ms {
            (self.start_ms..self.end_ms).contains(&tod_ms)
        } else {
            tod_ms >= self.start_ms || tod_ms < self.end_ms
        }
    }
}

/// Closed validity interval `[from, to]` in epoch milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Validity {
    pub from: u64,
    pub to: u64,
}

impl Validity {
    pub const FOREVER: Validity = Validity {
        from: 0,
        to: u64::MAX,
    };

    pub fn contains(&self, t: Timestamp) -> bool {
        (self.from..=self.to).contains(&t.millis())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataCaptureRule {
    pub rule_id: String,
    pub action: Action,
    /// Empty means every device.
    pub devices: BTreeSet<DeviceId>,
    /// Empty means every sensor. A building is the set of its sensors.
    pub sensors: BTreeSet<SensorId>,
    pub window: Option<DailyWindow>,
    pub validity: Validity,
    pub created_at: Timestamp,
}

impl DataCaptureRule {
    pub fn new(rule_id: impl Into<String>, action: Action, created_at: Timestamp) -> Self {
        Self {
            rule_id: rule_id.into(),
            action,
            devices: BTreeSet::new(),
            sensors: BTreeSet::new(),
            window: None,
            validity: Validity::FOREVER,
            created_at,
        }
    }

    pub fn with_devices(mut self, devices: impl IntoIterator<Item = DeviceId>) -> Self {
        self.devices = devices.into_iter().collect();
        self
    }

    pub fn with_sensors(mut self, sensors: impl IntoIterator<Item = SensorId>) -> Self {
        self.sensors = sensors.into_iter().collect();
        self
    }

    pub fn with_window(mut self, window: DailyWindow) -> Self {
        self.window = Some(window);
        self
    }

    pub fn with_validity(mut self, from: u64, to: u64) -> Self {
        self.validity = Validity { from, to };
        self
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        if self.rule_id.is_empty() || self.rule_id.chars().any(char::is_whitespace) {
            return Err(RuleError::BadRuleId);
        }
        if self.validity.from >= self.validity.to {
            return Err(RuleError::EmptyValidity(self.rule_id.clone()));
        }
        if let Some(w) = self.window {
            if w.start_ms == w.end_ms {
                return Err(RuleError::DegenerateWindow(self.rule_id.clone()));
            }
            if u64::from(w.start_ms.max(w.end_ms)) >= DAY_MS {
                return Err(RuleError::WindowOutOfRange(self.rule_id.clone()));
            }
        }
        Ok(())
    }

    pub fn is_device_specific(&self) -> bool {
        !self.devices.is_empty()
    }

    /// True once the rule can no longer match readings at or after `t`.
    pub fn expired_by(&self, t: Timestamp) -> bool {
        self.validity.to < t.millis()
    }

    /// Tuple compared to pick the winner among matching rules.
    fn precedence(&self) -> (bool, Timestamp, bool, &str) {
        (
            self.is_device_specific(),
            self.created_at,
            self.action == Action::OptOut,
            &self.rule_id,
        )
    }

    /// Deterministic byte encoding covered by the rule-set digest.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        put_lp(&mut out, self.rule_id.as_bytes());
        out.push(self.action.byte());
        out.extend_from_slice(&(self.devices.len() as u16).to_be_bytes());
        for d in &self.devices {
            put_lp(&mut out, d.as_bytes());
        }
        out.extend_from_slice(&(self.sensors.len() as u16).to_be_bytes());
        for s in &self.sensors {
            put_lp(&mut out, s.as_bytes());
        }
        match self.window {
            None => out.push(0),
            Some(w) => {
                out.push(1);
                out.extend_from_slice(&w.start_ms.to_be_bytes());
                out.extend_from_slice(&w.end_ms.to_be_bytes());
            }
        }
        out.extend_from_slice(&self.validity.from.to_be_bytes());
        out.extend_from_slice(&self.validity.to.to_be_bytes());
        out.extend_from_slice(&self.created_at.to_be_bytes());
        out
    }
}

pub fn matches(rule: &DataCaptureRule, reading: &SensorReading) -> bool {
    rule.validity.contains(reading.time)
        && (rule.devices.is_empty() || rule.devices.contains(&reading.device))
        && (rule.sensors.is_empty() || rule.sensors.contains(&reading.sensor))
        && rule
            .window
            .is_none_or(|w| w.contains(reading.time.time_of_day_ms()))
}

/// Digest over the rules' canonical encodings in `rule_id` order, each
/// prefixed by its u32 big-endian length.
pub fn ruleset_digest<'a>(rules: impl IntoIterator<Item = &'a DataCaptureRule>) -> Digest {
    let mut sorted: Vec<&DataCaptureRule> = rules.into_iter().collect();
    sorted.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
    let mut buf = Vec::new();
    for r in sorted {
        let enc = r.canonical_bytes();
        buf.extend_from_slice(&(enc.len() as u32).to_be_bytes());
        buf.extend_from_slice(&enc);
    }
    hash(&buf)
}

/// An immutable, versioned collection of rules with its integrity digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<DataCaptureRule>,
    default_action: Action,
    digest: Digest,
}

impl RuleSet {
    pub fn new(rules: Vec<DataCaptureRule>, default_action: Action) -> Result<Self, RuleError> {
        let mut ids = HashSet::new();
        for r in &rules {
            r.validate()?;
            if !ids.insert(r.rule_id.as_str()) {
                return Err(RuleError::DuplicateRule(r.rule_id.clone()));
            }
        }
        let digest = ruleset_digest(&rules);
        Ok(Self {
            rules,
            default_action,
            digest,
        })
    }

    pub fn empty(default_action: Action) -> Self {
        Self::new(Vec::new(), default_action).expect("empty rule set is valid")
    }

    pub fn rules(&self) -> &[DataCaptureRule] {
        &self.rules
    }

    pub fn default_action(&self) -> Action {
        self.default_action
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn get(&self, rule_id: &str) -> Option<&DataCaptureRule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    /// New version containing these rules plus `additions`, with the
    /// additions' default action. Reusing a live `rule_id` is rejected.
    pub fn extended(&self, additions: &RuleSet) -> Result<RuleSet, RuleError> {
        if let Some(dup) = additions
            .rules
            .iter()
            .find(|r| self.get(&r.rule_id).is_some())
        {
            return Err(RuleError::DuplicateRule(dup.rule_id.clone()));
        }
        let mut rules = self.rules.clone();
        rules.extend(additions.rules.iter().cloned());
        RuleSet::new(rules, additions.default_action)
    }

    pub fn to_text(&self) -> String {
        to_text(self)
    }

    pub fn parse(text: &str) -> Result<Self, RuleError> {
        parse_text(text)
    }
}

/// Assign the sensor state of `reading` under `rs`.
pub fn evaluate_state(rs: &RuleSet, reading: &SensorReading) -> SensorState {
    evaluate_with(rs.rules.iter(), rs.default_action, reading)
}

/// Same as [`evaluate_state`] over an arbitrary working set of rules.
pub fn evaluate_with<'a>(
    rules: impl IntoIterator<Item = &'a DataCaptureRule>,
    default_action: Action,
    reading: &SensorReading,
) -> SensorState {
    rules
        .into_iter()
        .filter(|r| matches(r, reading))
        .max_by(|a, b| a.precedence().cmp(&b.precedence()))
        .map_or(default_action, |r| r.action)
        .state()
}

struct HhMm(u32);

impl fmt::Display for HhMm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let secs = self.0 / 1000;
        let (h, m, s) = (secs / 3600, (secs / 60) % 60, secs % 60);
        if s == 0 && self.0.is_multiple_of(1000) {
            write!(f, "{h:02}:{m:02}")
        } else {
            write!(f, "{h:02}:{m:02}:{s:02}")
        }
    }
}

fn parse_hhmm(s: &str) -> Option<u32> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return None;
    }
    let nums: Vec<u32> = parts
        .iter()
        .map(|p| p.parse().ok())
        .collect::<Option<_>>()?;
    let (h, m, sec) = (nums[0], nums[1], nums.get(2).copied().unwrap_or(0));
    if h > 23 || m > 59 || sec > 59 {
        return None;
    }
    Some(((h * 60 + m) * 60 + sec) * 1000)
}

fn write_ids<'a>(out: &mut String, ids: impl ExactSizeIterator<Item = String> + 'a) {
    if ids.len() == 0 {
        out.push('*');
        return;
    }
    let joined: Vec<String> = ids.collect();
    out.push_str(&joined.join(","));
}

fn to_text(rs: &RuleSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "default {}", rs.default_action.keyword());
    for r in &rs.rules {
        let _ = write!(out, "rule {} {} devices=", r.rule_id, r.action.keyword());
        write_ids(&mut out, r.devices.iter().map(DeviceId::to_hex));
        out.push_str(" sensors=");
        write_ids(&mut out, r.sensors.iter().map(SensorId::to_hex));
        match r.window {
            None => out.push_str(" window=*"),
            Some(w) => {
                let _ = write!(out, " window={}-{}", HhMm(w.start_ms), HhMm(w.end_ms));
            }
        }
        let to = if r.validity.to == u64::MAX {
            "inf".to_string()
        } else {
            r.validity.to.to_string()
        };
        let _ = writeln!(
            out,
            " valid={}..{} created={}",
            r.validity.from, to, r.created_at
        );
    }
    out
}

fn parse_text(text: &str) -> Result<RuleSet, RuleError> {
    let mut default_action = Action::OptOut;
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| RuleError::Parse { line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "default" => {
                if tokens.len() != 2 {
                    return Err(err("expected `default opt-in|opt-out`".into()));
                }
                default_action = Action::parse(tokens[1])
                    .ok_or_else(|| err(format!("unknown action {}", tokens[1])))?;
            }
            "rule" => rules.push(parse_rule(&tokens).map_err(err)?),
            other => return Err(err(format!("unknown record type {other}"))),
        }
    }
    RuleSet::new(rules, default_action)
}

fn parse_rule(tokens: &[&str]) -> Result<DataCaptureRule, String> {
    if tokens.len() < 3 {
        return Err("expected `rule <id> <action> ...`".into());
    }
    let action = Action::parse(tokens[2]).ok_or_else(|| format!("unknown action {}", tokens[2]))?;
    let mut devices = BTreeSet::new();
    let mut sensors = BTreeSet::new();
    let mut window = None;
    let mut validity = Validity::FOREVER;
    let mut created = None;
    for tok in &tokens[3..] {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {tok}"))?;
        match key {
            "devices" if value != "*" => {
                for h in value.split(',') {
                    devices.insert(DeviceId::from_hex(h).map_err(|e| e.to_string())?);
                }
            }
            "sensors" if value != "*" => {
                for h in value.split(',') {
                    sensors.insert(SensorId::from_hex(h).map_err(|e| e.to_string())?);
                }
            }
            "devices" | "sensors" => {}
            "window" if value == "*" => window = None,
            "window" => {
                let (a, b) = value
                    .split_once('-')
                    .ok_or_else(|| format!("bad window {value}"))?;
                let start_ms = parse_hhmm(a).ok_or_else(|| format!("bad time {a}"))?;
                let end_ms = parse_hhmm(b).ok_or_else(|| format!("bad time {b}"))?;
                window = Some(DailyWindow { start_ms, end_ms });
            }
            "valid" => {
                let (a, b) = value
                    .split_once("..")
                    .ok_or_else(|| format!("bad validity {value}"))?;
                let from = a.parse().map_err(|_| format!("bad validity start {a}"))?;
                let to = if b == "inf" {
                    u64::MAX
                } else {
                    b.parse().map_err(|_| format!("bad validity end {b}"))?
                };
                validity = Validity { from, to };
            }
            "created" => {
                let ms: u64 = value.parse().map_err(|_| format!("bad created {value}"))?;
                created = Some(Timestamp::new(ms).map_err(|e| e.to_string())?);
            }
            other => return Err(format!("unknown field {other}")),
        }
    }
    let rule = DataCaptureRule {
        rule_id: tokens[1].to_string(),
        action,
        devices,
        sensors,
        window,
        validity,
        created_at: created.ok_or("missing created=")?,
    };
    rule.validate().map_err(|e| e.to_string())?;
    Ok(rule)
}
