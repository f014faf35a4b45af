//! Datagram layout, little-endian throughout.
//!
//! ```text
//! header (12)   magic u32 = 0x48434349 | version u8 = 1 | type u8 | reserved u16 | seq u32
//! type 1 (64)   cycle u32 | imep ca50 nox mprr r_imep r_ca50 f64
//! type 2 (48)   cycle u32 | doi_fuel doi_water nvo f64 | solve_time_us u32 | status u8 | reserved [u8; 3]
//! type 3 (16)   last handled cycle u32
//! ```

use thiserror::Error;

use crate::nn::ModelOutput;
use crate::plant::Actuation;

pub const MAGIC: u32 = 0x4843_4349;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MEASUREMENT_LEN: usize = HEADER_LEN + 4 + 6 * 8;
pub const ACTUATION_LEN: usize = HEADER_LEN + 4 + 3 * 8 + 4 + 1 + 3;
pub const HEARTBEAT_LEN: usize = HEADER_LEN + 4;
/// Largest datagram the protocol produces.
pub const MAX_PACKET: usize = MEASUREMENT_LEN;

const TYPE_MEASUREMENT: u8 = 1;
const TYPE_ACTUATION: u8 = 2;
const TYPE_HEARTBEAT: u8 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("datagram of {0} bytes is shorter than the header")]
    Truncated(usize),
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("message type {msg_type} must be {expected} bytes, got {got}")]
    WrongLength { msg_type: u8, expected: usize, got: usize },
    #[error("non-finite value in payload")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementMsg {
    pub cycle: u32,
    pub imep: f64,
    pub ca50: f64,
    pub nox: f64,
    pub mprr: f64,
    pub r_imep: f64,
    pub r_ca50: f64,
}

impl MeasurementMsg {
    pub fn new(cycle: u32, y: &ModelOutput, r_imep: f64, r_ca50: f64) -> Self {
        Self {
            cycle,
            imep: y.imep,
            ca50: y.ca50,
            nox: y.nox,
            mprr: y.mprr,
            r_imep,
            r_ca50,
        }
    }

    pub fn output(&self) -> ModelOutput {
        ModelOutput {
            imep: self.imep,
            ca50: self.ca50,
            nox: self.nox,
            mprr: self.mprr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuationMsg {
    pub cycle: u32,
    pub doi_fuel: f64,
    pub doi_water: f64,
    pub nvo: f64,
    pub solve_time_us: u32,
    /// 0 ok, 1 degraded, 2 fallback.
    pub status: u8,
}

impl ActuationMsg {
    pub fn actuation(&self) -> Actuation {
        Actuation::new(self.doi_fuel, self.doi_water, self.nvo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatMsg {
    pub last_cycle: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Message {
    Measurement(MeasurementMsg),
    Actuation(ActuationMsg),
    Heartbeat(HeartbeatMsg),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    pub seq: u32,
    pub msg: Message,
}

pub fn encode(packet: &Packet) -> Vec<u8> {
    let (msg_type, len) = match packet.msg {
        Message::Measurement(_) => (TYPE_MEASUREMENT, MEASUREMENT_LEN),
        Message::Actuation(_) => (TYPE_ACTUATION, ACTUATION_LEN),
        Message::Heartbeat(_) => (TYPE_HEARTBEAT, HEARTBEAT_LEN),
    };
    let mut b = Vec::with_capacity(len);
    b.extend(MAGIC.to_le_bytes());
    b.push(VERSION);
    b.push(msg_type);
    b.extend(0u16.to_le_bytes());
    b.extend(packet.seq.to_le_bytes());
    match packet.msg {
        Message::Measurement(m) => {
            b.extend(m.cycle.to_le_bytes());
            for v in [m.imep, m.ca50, m.nox, m.mprr, m.r_imep, m.r_ca50] {
                b.extend(v.to_le_bytes());
            }
        }
        Message::Actuation(a) => {
            b.extend(a.cycle.to_le_bytes());
            for v in [a.doi_fuel, a.doi_water, a.nvo] {
                b.extend(v.to_le_bytes());
            }
            b.extend(a.solve_time_us.to_le_bytes());
            b.push(a.status);
            b.extend([0u8; 3]);
        }
        Message::Heartbeat(h) => b.extend(h.last_cycle.to_le_bytes()),
    }
    debug_assert_eq!(b.len(), len);
    b
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let magic = u32_at(bytes, 0);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    let msg_type = bytes[5];
    let expected = match msg_type {
        TYPE_MEASUREMENT => MEASUREMENT_LEN,
        TYPE_ACTUATION => ACTUATION_LEN,
        TYPE_HEARTBEAT => HEARTBEAT_LEN,
        t => return Err(WireError::UnknownType(t)),
    };
    if bytes.len() != expected {
        return Err(WireError::WrongLength {
            msg_type,
            expected,
            got: bytes.len(),
        });
    }
    let seq = u32_at(bytes, 8);
    let p = &bytes[HEADER_LEN..];
    let msg = match msg_type {
        TYPE_MEASUREMENT => {
            let v: [f64; 6] = std::array::from_fn(|i| f64_at(p, 4 + 8 * i));
            if !v.iter().all(|x| x.is_finite()) {
                return Err(WireError::NonFinite);
            }
            Message::Measurement(MeasurementMsg {
                cycle: u32_at(p, 0),
                imep: v[0],
                ca50: v[1],
                nox: v[2],
                mprr: v[3],
                r_imep: v[4],
                r_ca50: v[5],
            })
        }
        TYPE_ACTUATION => {
            let v: [f64; 3] = std::array::from_fn(|i| f64_at(p, 4 + 8 * i));
            if !v.iter().all(|x| x.is_finite()) {
                return Err(WireError::NonFinite);
            }
            Message::Actuation(ActuationMsg {
                cycle: u32_at(p, 0),
                doi_fuel: v[0],
                doi_water: v[1],
                nvo: v[2],
                solve_time_us: u32_at(p, 28),
                status: p[32],
            })
        }
        _ => Message::Heartbeat(HeartbeatMsg { last_cycle: u32_at(p, 0) }),
    };
    Ok(Packet { seq, msg })
}
