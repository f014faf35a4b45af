//! Plant and controller nodes exchanging one measurement and one actuation
//! per engine cycle over UDP.

use std::io::{self, Write};
use std::net::{SocketAddr, UdpSocket};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::timing::{collect_timing, CycleClock, TimingSample, TimingStats};
use super::wire::{decode, encode, ActuationMsg, HeartbeatMsg, MeasurementMsg, Message, Packet, MAX_PACKET};
use crate::nn::{ModelOutput, NetworkWeights};
use crate::ocp::Feedback;
use crate::plant::{ActuatorBounds, Actuation};
use crate::sim::{Controller, ControllerConfig, Plant, ReferenceProfile};
use crate::sqp::SolveStatus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantNodeConfig {
    pub clock: CycleClock,
    pub initial_actuation: Actuation,
    pub bounds: ActuatorBounds,
    /// Probability of discarding each incoming actuation.
    pub drop_probability: f64,
    pub loss_seed: u64,
}

impl Default for PlantNodeConfig {
    fn default() -> Self {
        Self {
            clock: CycleClock::default(),
            initial_actuation: Actuation::new(0.75, 0.0, 255.0),
            bounds: ActuatorBounds::default(),
            drop_probability: 0.0,
            loss_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantLogEntry {
    pub cycle: u32,
    /// Offset of the measurement emission from the run start.
    pub emitted_ms: f64,
    /// Measurement sent at the start of this cycle (previous cycle's output).
    pub feedback: ModelOutput,
    pub r_imep: f64,
    pub r_ca50: f64,
    pub applied: Actuation,
    /// This cycle's plant output.
    pub measured: ModelOutput,
    pub solve_time_us: Option<u32>,
    /// Controller status, or 2 when the last actuation was held.
    pub status: u8,
    pub missed: bool,
    pub round_trip_ms: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PlantRunLog {
    pub entries: Vec<PlantLogEntry>,
    pub heartbeats: usize,
    pub stale: usize,
    pub malformed: usize,
    pub dropped: usize,
    pub rejected: usize,
}

impl PlantRunLog {
    pub fn timing(&self, budget_ms: f64) -> TimingStats {
        let samples: Vec<TimingSample> = self
            .entries
            .iter()
            .map(|e| TimingSample {
                solve_ms: e.solve_time_us.map(|t| t as f64 / 1e3),
                round_trip_ms: e.round_trip_ms,
                missed: e.missed,
            })
            .collect();
        collect_timing(&samples, budget_ms)
    }

    pub fn misses(&self) -> usize {
        self.entries.iter().filter(|e| e.missed).count()
    }

    /// Largest deviation of an emission interval from the period, ms.
    pub fn max_jitter_ms(&self, period_ms: f64) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].emitted_ms - w[0].emitted_ms - period_ms).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "cycle",
            "emitted_ms",
            "imep",
            "ca50",
            "nox",
            "mprr",
            "r_imep",
            "r_ca50",
            "doi_fuel",
            "doi_water",
            "nvo",
            "solve_time_us",
            "status",
            "missed",
            "round_trip_ms",
        ])?;
        for e in &self.entries {
            let opt = |v: Option<String>| v.unwrap_or_default();
            out.write_record([
                e.cycle.to_string(),
                e.emitted_ms.to_string(),
                e.measured.imep.to_string(),
                e.measured.ca50.to_string(),
                e.measured.nox.to_string(),
                e.measured.mprr.to_string(),
                e.r_imep.to_string(),
                e.r_ca50.to_string(),
                e.applied.doi_fuel.to_string(),
                e.applied.doi_water.to_string(),
                e.applied.nvo.to_string(),
                opt(e.solve_time_us.map(|t| t.to_string())),
                e.status.to_string(),
                (e.missed as u8).to_string(),
                opt(e.round_trip_ms.map(|t| t.to_string())),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        std::thread::sleep(t - now);
    }
}

/// Paces the plant: each cycle emits the previous output with the cycle's
/// reference, waits up to the compute budget for the matching actuation and
/// steps the plant with it, or with the last accepted actuation on a miss.
pub fn plant_node<P: Plant>(
    plant: &mut P,
    y0: ModelOutput,
    profile: &ReferenceProfile,
    config: &PlantNodeConfig,
    socket: &UdpSocket,
    controller: SocketAddr,
) -> io::Result<PlantRunLog> {
    config.clock.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let mut loss = ChaCha8Rng::seed_from_u64(config.loss_seed);
    let mut log = PlantRunLog::default();
    let mut held = config.initial_actuation;
    let mut y = y0;
    let mut buf = [0u8; 2 * MAX_PACKET];
    let start = Instant::now();
    for (k, (r_imep, r_ca50)) in profile.expand().into_iter().enumerate() {
        let cycle = k as u32;
        sleep_until(start + config.clock.period().mul_f64(k as f64));
        let sent = Instant::now();
        let packet = Packet {
            seq: cycle,
            msg: Message::Measurement(MeasurementMsg::new(cycle, &y, r_imep, r_ca50)),
        };
        socket.send_to(&encode(&packet), controller)?;

        let deadline = sent + config.clock.budget();
        let mut reply: Option<(ActuationMsg, f64)> = None;
        while reply.is_none() {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            socket.set_read_timeout(Some(deadline - now))?;
            let n = match socket.recv_from(&mut buf) {
                Ok((n, _)) => n,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => break,
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e),
            };
            match decode(&buf[..n]) {
                Ok(Packet {
                    msg: Message::Actuation(a), ..
                }) if a.cycle == cycle => {
                    if config.drop_probability > 0.0 && loss.random::<f64>() < config.drop_probability {
                        log.dropped += 1;
                    } else if a.status <= 1 && config.bounds.contains(&a.actuation()) {
                        reply = Some((a, sent.elapsed().as_secs_f64() * 1e3));
                    } else {
                        log.rejected += 1;
                    }
                }
                Ok(Packet {
                    msg: Message::Actuation(_), ..
                }) => log.stale += 1,
                Ok(Packet {
                    msg: Message::Heartbeat(_), ..
                }) => log.heartbeats += 1,
                Ok(_) | Err(_) => log.malformed += 1,
            }
        }

        let missed = reply.is_none();
        if missed {
            log::warn!("cycle {cycle}: no valid actuation within budget, holding last");
        }
        if let Some((a, _)) = &reply {
            held = a.actuation();
        }
        let feedback = y;
        y = plant.step(&held);
        log.entries.push(PlantLogEntry {
            cycle,
            emitted_ms: (sent - start).as_secs_f64() * 1e3,
            feedback,
            r_imep,
            r_ca50,
            applied: held,
            measured: y,
            solve_time_us: reply.map(|(a, _)| a.solve_time_us),
            status: reply.map_or(SolveStatus::Fallback.code(), |(a, _)| a.status),
            missed,
            round_trip_ms: reply.map(|(_, t)| t),
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerNodeConfig {
    /// Actuation the plant holds before the first controlled cycle.
    pub initial_actuation: Actuation,
    /// Heartbeat interval while no measurement arrives.
    pub heartbeat_ms: f64,
    /// Return after this long without a measurement (once one has arrived).
    pub idle_exit_ms: f64,
    /// Stop after handling this many measurements.
    pub stop_after: Option<usize>,
}

impl Default for ControllerNodeConfig {
    fn default() -> Self {
        Self {
            initial_actuation: Actuation::new(0.75, 0.0, 255.0),
            heartbeat_ms: 80.0,
            idle_exit_ms: 2000.0,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerLogEntry {
    pub seq: u32,
    pub cycle: u32,
    pub applied: Actuation,
    pub solve_time_us: u32,
    pub status: u8,
    /// Measurements skipped between this one and the previous.
    pub gap: u32,
}

#[derive(Debug, Clone, Default)]
pub struct ControllerRunLog {
    pub entries: Vec<ControllerLogEntry>,
    pub duplicates: usize,
    pub malformed: usize,
    pub gaps: usize,
    pub heartbeats_sent: usize,
}

impl ControllerRunLog {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seq", "cycle", "doi_fuel", "doi_water", "nvo", "solve_time_us", "status", "gap"])?;
        for e in &self.entries {
            out.write_record([
                e.seq.to_string(),
                e.cycle.to_string(),
                e.applied.doi_fuel.to_string(),
                e.applied.doi_water.to_string(),
                e.applied.nvo.to_string(),
                e.solve_time_us.to_string(),
                e.status.to_string(),
                e.gap.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Answers each new measurement with one actuation stamped with its solve
/// time. Duplicate or older sequence numbers are ignored; heartbeats go to the
/// last peer while idle.
pub fn controller_node(
    model: Arc<NetworkWeights>,
    config: &ControllerConfig,
    node: &ControllerNodeConfig,
    socket: &UdpSocket,
) -> io::Result<ControllerRunLog> {
    let mut log = ControllerRunLog::default();
    let mut ctrl: Option<Controller> = None;
    let mut last_seq: Option<u32> = None;
    let mut last_cycle = 0u32;
    let mut peer: Option<SocketAddr> = None;
    let mut last_seen = Instant::now();
    let mut next_seq = 0u32;
    let heartbeat = Duration::from_secs_f64(node.heartbeat_ms.max(1.0) / 1e3);
    let idle_exit = Duration::from_secs_f64(node.idle_exit_ms.max(1.0) / 1e3);
    let mut buf = [0u8; 2 * MAX_PACKET];
    socket.set_read_timeout(Some(heartbeat))?;
    loop {
        if node.stop_after.is_some_and(|n| log.entries.len() >= n) {
            return Ok(log);
        }
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(r) => r,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if ctrl.is_some() && last_seen.elapsed() >= idle_exit {
                    return Ok(log);
                }
                if let Some(p) = peer {
                    let hb = Packet {
                        seq: next_seq,
                        msg: Message::Heartbeat(HeartbeatMsg { last_cycle }),
                    };
                    next_seq = next_seq.wrapping_add(1);
                    socket.send_to(&encode(&hb), p)?;
                    log.heartbeats_sent += 1;
                }
                continue;
            }
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
            Err(e) => return Err(e),
        };
        let (seq, m) = match decode(&buf[..n]) {
            Ok(Packet {
                seq,
                msg: Message::Measurement(m),
            }) => (seq, m),
            _ => {
                log.malformed += 1;
                continue;
            }
        };
        if last_seq.is_some_and(|s| seq <= s) {
            log.duplicates += 1;
            continue;
        }
        let gap = last_seq.map_or(0, |s| seq - s - 1);
        if gap > 0 {
            log.gaps += 1;
            log::warn!("sequence gap: {gap} measurement(s) missing before seq {seq}");
        }
        last_seq = Some(seq);
        peer = Some(from);
        last_seen = Instant::now();

        let y = m.output();
        let c = match ctrl.as_mut() {
            Some(c) => c,
            None => ctrl.insert(
                Controller::settled(model.clone(), config.clone(), &y, node.initial_actuation)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            ),
        };
        let (applied, solve_us, status) = match c.step(Feedback::from(&y), m.r_imep, m.r_ca50) {
            Ok(step) => {
                let us = step.solve_time.map_or(1, |d| d.as_micros().clamp(1, u32::MAX as u128) as u32);
                (step.applied, us, step.result.status.code())
            }
            Err(e) => {
                log::error!("cycle {}: solve failed: {e}", m.cycle);
                (c.u_prev, 1, SolveStatus::Fallback.code())
            }
        };
        let reply = Packet {
            seq: next_seq,
            msg: Message::Actuation(ActuationMsg {
                cycle: m.cycle,
                doi_fuel: applied.doi_fuel,
                doi_water: applied.doi_water,
                nvo: applied.nvo,
                solve_time_us: solve_us,
                status,
            }),
        };
        next_seq = next_seq.wrapping_add(1);
        socket.send_to(&encode(&reply), from)?;
        last_cycle = m.cycle;
        log.entries.push(ControllerLogEntry {
            seq,
            cycle: m.cycle,
            applied,
            solve_time_us: solve_us,
            status,
            gap,
        });
    }
}
