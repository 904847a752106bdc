//! Sensor reading value types and their canonical byte encodings.
//!
//! The canonical encoding of a [`StatefulReading`] is normative:
//!
//! ```text
//! LP(device) || LP(sensor) || state_byte || time_ms (u64 big-endian)
//! ```
//!
//! where `LP(x)` is a 2-byte big-endian length followed by the raw bytes.
//! The optional `params` payload is carried alongside a reading but never
//! enters any digest.

use std::fmt;

use thiserror::Error;

/// Maximum length of a device or sensor identifier in bytes.
pub const MAX_ID_LEN: usize = 64;

/// Milliseconds in one day, used for time-of-day arithmetic.
pub const DAY_MS: u64 = 86_400_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("{field} identifier is empty")]
    EmptyId { field: &'static str },
    #[error("{field} identifier is {len} bytes, limit is {MAX_ID_LEN}")]
    IdTooLong { field: &'static str, len: usize },
    #[error("timestamp must be strictly positive")]
    ZeroTimestamp,
    #[error("invalid sensor state byte {0:#04x}")]
    BadState(u8),
    #[error("invalid hex identifier: {0}")]
    BadHex(String),
    #[error("encoding truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after record")]
    Trailing(usize),
}

fn check_id(field: &'static str, bytes: &[u8]) -> Result<(), ModelError> {
    if bytes.is_empty() {
        return Err(ModelError::EmptyId { field });
    }
    if bytes.len() > MAX_ID_LEN {
        return Err(ModelError::IdTooLong {
            field,
            len: bytes.len(),
        });
    }
    Ok(())
}

macro_rules! opaque_id {
    ($name:ident, $field:literal) => {
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Vec<u8>);

        impl $name {
            pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, ModelError> {
                let bytes = bytes.into();
                check_id($field, &bytes)?;
                Ok(Self(bytes))
            }

            pub fn from_hex(s: &str) -> Result<Self, ModelError> {
                let cleaned: String = s.chars().filter(|c| *c != ':' && *c != '-').collect();
                let bytes =
                    hex::decode(&cleaned).map_err(|e| ModelError::BadHex(format!("{s}: {e}")))?;
                Self::new(bytes)
            }

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }
    };
}

opaque_id!(DeviceId, "device");
opaque_id!(SensorId, "sensor");

/// Milliseconds since the Unix epoch. Always strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(u64);

impl Timestamp {
    pub fn new(ms: u64) -> Result<Self, ModelError> {
        if ms == 0 {
            return Err(ModelError::ZeroTimestamp);
        }
        Ok(Self(ms))
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    /// Milliseconds elapsed since midnight UTC.
    pub fn time_of_day_ms(self) -> u32 {
        (self.0 % DAY_MS) as u32
    }

    pub fn to_be_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SensorState {
    Passive = 0,
    Active = 1,
}

impl SensorState {
    pub fn as_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Result<Self, ModelError> {
        match b {
            0 => Ok(Self::Passive),
            1 => Ok(Self::Active),
            other => Err(ModelError::BadState(other)),
        }
    }

    pub fn is_active(self) -> bool {
        self == Self::Active
    }
}

/// One association event reported by a sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensorReading {
    pub device: DeviceId,
    pub sensor: SensorId,
    pub time: Timestamp,
    /// Opaque extra payload. Stored, never hashed.
    pub params: Vec<u8>,
}

impl SensorReading {
    pub fn new(device: DeviceId, sensor: SensorId, time: Timestamp) -> Self {
        Self {
            device,
            sensor,
            time,
            params: Vec::new(),
        }
    }

    /// Controller wire format, the plaintext sealed to the enclave:
    /// `LP(device) || LP(sensor) || time (u64 BE) || u32 BE params length || params`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 + 4 + self.params.len() + 2 * MAX_ID_LEN);
        put_lp(&mut out, self.device.as_bytes());
        put_lp(&mut out, self.sensor.as_bytes());
        out.extend_from_slice(&self.time.to_be_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.params);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut cur = Cursor::new(bytes);
        let device = DeviceId::new(cur.lp()?)?;
        let sensor = SensorId::new(cur.lp()?)?;
        let time = Timestamp::new(cur.u64_be()?)?;
        let plen = u32::from_be_bytes(cur.array::<4>()?) as usize;
        let params = cur.take(plen)?.to_vec();
        cur.finish()?;
        Ok(Self {
            device,
            sensor,
            time,
            params,
        })
    }
}

/// A reading after the rules engine has assigned its sensor state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatefulReading {
    pub reading: SensorReading,
    pub state: SensorState,
}

impl StatefulReading {
    pub fn new(reading: SensorReading, state: SensorState) -> Self {
        Self { reading, state }
    }

    pub fn device(&self) -> &DeviceId {
        &self.reading.device
    }

    pub fn sensor(&self) -> &SensorId {
        &self.reading.sensor
    }

    pub fn time(&self) -> Timestamp {
        self.reading.time
    }
}

/// Append a 2-byte big-endian length prefix followed by `bytes`.
pub fn put_lp(out: &mut Vec<u8>, bytes: &[u8]) {
    debug_assert!(bytes.len() <= u16::MAX as usize);
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Canonical encoding from raw field bytes, validating identifier lengths.
pub fn encode_parts(
    device: &[u8],
    sensor: &[u8],
    state: SensorState,
    time_ms: u64,
) -> Result<Vec<u8>, ModelError> {
    check_id("device", device)?;
    check_id("sensor", sensor)?;
    let mut out = Vec::with_capacity(4 + device.len() + sensor.len() + 1 + 8);
    put_lp(&mut out, device);
    put_lp(&mut out, sensor);
    out.push(state.as_byte());
    out.extend_from_slice(&time_ms.to_be_bytes());
    Ok(out)
}

/// Canonical encoding of a stateful reading. Identifier invariants are
/// enforced at construction so this cannot fail for typed values.
pub fn canonical_encode(r: &StatefulReading) -> Vec<u8> {
    let mut out = Vec::with_capacity(canonical_len(r));
    write_canonical(&mut out, r);
    out
}

pub(crate) fn write_canonical(out: &mut Vec<u8>, r: &StatefulReading) {
    put_lp(out, r.device().as_bytes());
    put_lp(out, r.sensor().as_bytes());
    out.push(r.state.as_byte());
    out.extend_from_slice(&r.time().to_be_bytes());
}

pub fn canonical_len(r: &StatefulReading) -> usize {
    4 + r.device().as_bytes().len() + r.sensor().as_bytes().len() + 1 + 8
}

/// Decode one canonical record from the front of `bytes`, returning the
/// reading (with empty params) and the number of bytes consumed.
pub fn canonical_decode_prefix(bytes: &[u8]) -> Result<(StatefulReading, usize), ModelError> {
    let mut cur = Cursor::new(bytes);
    let device = DeviceId::new(cur.lp()?)?;
    let sensor = SensorId::new(cur.lp()?)?;
    let state = SensorState::from_byte(cur.u8()?)?;
    let time = Timestamp::new(cur.u64_be()?)?;
    let used = cur.pos;
    Ok((
        StatefulReading::new(SensorReading::new(device, sensor, time), state),
        used,
    ))
}

/// Decode exactly one canonical record.
pub fn canonical_decode(bytes: &[u8]) -> Result<StatefulReading, ModelError> {
    let (r, used) = canonical_decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ModelError::Trailing(bytes.len() - used));
    }
    Ok(r)
}

/// Minimal forward-only byte reader shared by the binary decoders.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.remaining() < n {
            return Err(ModelError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u64_be(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub(crate) fn lp(&mut self) -> Result<&'a [u8], ModelError> {
        let len = u16::from_be_bytes(self.array()?) as usize;
        self.take(len)
    }

    pub(crate) fn finish(&self) -> Result<(), ModelError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(ModelError::Trailing(n)),
        }
    }
}
