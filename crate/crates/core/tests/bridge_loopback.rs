mod common;

use std::net::UdpSocket;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::random_model;
use hcci_nmpc::bridge::{
    controller_node, decode, encode, plant_node, ControllerNodeConfig, CycleClock, MeasurementMsg, Message, Packet, PlantNodeConfig,
};
use hcci_nmpc::nn::{ModelOutput, NetworkWeights};
use hcci_nmpc::ocp::Feedback;
use hcci_nmpc::plant::{settle, Actuation, PlantParams, SurrogatePlant};
use hcci_nmpc::sim::{Controller, ControllerConfig, ReferenceProfile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const A0: Actuation = Actuation {
    doi_fuel: 0.75,
    doi_water: 0.0,
    nvo: 255.0,
};

fn model() -> Arc<NetworkWeights> {
    Arc::new(random_model(&mut ChaCha8Rng::seed_from_u64(200)))
}

fn plant() -> (SurrogatePlant, ModelOutput) {
    let params = PlantParams::default();
    let (state, y0) = settle(&params, &A0, 200);
    (SurrogatePlant::new(params, state), y0)
}

fn profile(cycles: usize) -> ReferenceProfile {
    let mut p = ReferenceProfile::default();
    p.cycles = cycles;
    p.points.retain(|q| q.cycle < cycles);
    p.points.push(hcci_nmpc::sim::ReferencePoint {
        cycle: cycles / 2,
        r_imep: 4.0,
        r_ca50: 6.0,
    });
    p.points.sort_by_key(|q| q.cycle);
    p.points.dedup_by_key(|q| q.cycle);
    p
}

fn plant_config(period_ms: f64) -> PlantNodeConfig {
    PlantNodeConfig {
        clock: CycleClock {
            period_ms,
            budget_ms: 22.0,
        },
        initial_actuation: A0,
        ..PlantNodeConfig::default()
    }
}

fn node_config() -> ControllerNodeConfig {
    ControllerNodeConfig {
        initial_actuation: A0,
        idle_exit_ms: 300.0,
        ..ControllerNodeConfig::default()
    }
}

fn sockets() -> (UdpSocket, UdpSocket) {
    (UdpSocket::bind("127.0.0.1:0").unwrap(), UdpSocket::bind("127.0.0.1:0").unwrap())
}

fn spawn_controller(node: ControllerNodeConfig, socket: UdpSocket) -> thread::JoinHandle<hcci_nmpc::bridge::ControllerRunLog> {
    let m = model();
    thread::spawn(move || controller_node(m, &ControllerConfig::default(), &node, &socket).unwrap())
}

#[test]
fn transport_is_transparent() {
    let cycles = 60;
    let prof = profile(cycles);
    let (mut p, y0) = plant();
    let mut ctrl = Controller::settled(model(), ControllerConfig::default(), &y0, A0).unwrap();
    let mut y = y0;
    let mut direct = Vec::new();
    for (r_imep, r_ca50) in prof.expand() {
        let a = ctrl.step(Feedback::from(&y), r_imep, r_ca50).unwrap().applied;
        y = p.step(&a);
        direct.push((a, y));
    }

    let (ps, cs) = sockets();
    let caddr = cs.local_addr().unwrap();
    let handle = spawn_controller(node_config(), cs);
    let (mut p, y0) = plant();
    let log = plant_node(&mut p, y0, &prof, &plant_config(40.0), &ps, caddr).unwrap();
    let clog = handle.join().unwrap();

    assert_eq!(log.misses(), 0);
    assert_eq!(log.entries.len(), cycles);
    for (e, (a, y)) in log.entries.iter().zip(&direct) {
        assert_eq!(e.applied.to_array().map(f64::to_bits), a.to_array().map(f64::to_bits), "cycle {}", e.cycle);
        assert_eq!(e.measured.to_array().map(f64::to_bits), y.to_array().map(f64::to_bits));
        assert!(e.status <= 1 && e.solve_time_us.unwrap() >= 1);
    }
    assert_eq!(clog.entries.len(), cycles);
    assert_eq!((clog.duplicates, clog.gaps, clog.malformed), (0, 0, 0));
    let jitter = log.max_jitter_ms(40.0);
    assert!(jitter <= 4.0, "jitter {jitter} ms");
}

#[test]
fn duplicates_get_one_reply_and_garbage_none() {
    let (ts, cs) = sockets();
    let caddr = cs.local_addr().unwrap();
    let handle = spawn_controller(
        ControllerNodeConfig {
            stop_after: Some(2),
            ..node_config()
        },
        cs,
    );
    let (_, y0) = plant();
    let meas = |seq: u32| {
        encode(&Packet {
            seq,
            msg: Message::Measurement(MeasurementMsg::new(seq, &y0, 3.0, 6.0)),
        })
    };
    ts.send_to(&[0xde, 0xad, 0xbe, 0xef], caddr).unwrap();
    ts.send_to(&meas(0), caddr).unwrap();
    ts.send_to(&meas(0), caddr).unwrap();
    thread::sleep(Duration::from_millis(100));
    ts.send_to(&meas(2), caddr).unwrap();
    let clog = handle.join().unwrap();
    assert_eq!(clog.entries.len(), 2);
    assert_eq!(clog.duplicates, 1);
    assert_eq!(clog.malformed, 1);
    assert_eq!((clog.gaps, clog.entries[1].gap), (1, 1));

    ts.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
    let mut buf = [0u8; 256];
    let mut cycles = Vec::new();
    while let Ok((n, _)) = ts.recv_from(&mut buf) {
        if let Ok(Packet {
            msg: Message::Actuation(a), ..
        }) = decode(&buf[..n])
        {
            cycles.push(a.cycle);
        }
    }
    assert_eq!(cycles, vec![0, 2]);
}

#[test]
fn controller_loss_holds_last_actuation() {
    let (ps, cs) = sockets();
    let caddr = cs.local_addr().unwrap();
    let handle = spawn_controller(
        ControllerNodeConfig {
            stop_after: Some(8),
            ..node_config()
        },
        cs,
    );
    let (mut p, y0) = plant();
    let log = plant_node(&mut p, y0, &profile(20), &plant_config(30.0), &ps, caddr).unwrap();
    handle.join().unwrap();
    let held = log.entries[7].applied;
    assert!(log.entries[..8].iter().all(|e| !e.missed));
    for e in &log.entries[8..] {
        assert!(e.missed);
        assert_eq!(e.status, 2);
        assert_eq!(e.applied, held);
        assert!(e.measured.to_array().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn total_loss_keeps_initial_actuation() {
    let (ps, cs) = sockets();
    let caddr = cs.local_addr().unwrap();
    let handle = spawn_controller(node_config(), cs);
    let (mut p, y0) = plant();
    let config = PlantNodeConfig {
        drop_probability: 1.0,
        ..plant_config(30.0)
    };
    let log = plant_node(&mut p, y0, &profile(15), &config, &ps, caddr).unwrap();
    handle.join().unwrap();
    assert_eq!(log.misses(), 15);
    assert_eq!(log.dropped, 15);
    assert!(log.entries.iter().all(|e| e.applied == A0 && config.bounds.contains(&e.applied)));
    assert!(log.heartbeats == 0 || log.stale == 0);
}

#[test]
fn plant_without_controller_runs_open_loop() {
    let ps = UdpSocket::bind("127.0.0.1:0").unwrap();
    // bound and dropped so the port is closed
    let gone = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let (mut p, y0) = plant();
    let log = plant_node(&mut p, y0, &profile(5), &plant_config(25.0), &ps, gone).unwrap();
    assert_eq!(log.misses(), 5);
    assert!(log.entries.iter().all(|e| e.applied == A0));
}
