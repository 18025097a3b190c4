use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use meshcast::exec::Exec;
use meshcast::gateway::{store_load, Gateway, GatewayConfig, RunningGateway, WireRecord};
use meshcast::htm::{detect_stream, DetectorConfig, DetectorSnapshot};
use meshcast::model::SensorReading;
use meshcast::simulate::{gen_weather, SimConfig};

fn start(cfg: impl FnOnce(SocketAddr) -> GatewayConfig) -> RunningGateway {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = cfg(listener.local_addr().unwrap());
    Gateway::with_listener(listener, &cfg).unwrap().spawn().unwrap()
}

struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let writer = TcpStream::connect(addr).unwrap();
        writer.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let reader = BufReader::new(writer.try_clone().unwrap());
        Self { writer, reader }
    }

    fn send_line(&mut self, line: &str) -> String {
        self.writer.write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut ack = String::new();
        self.reader.read_line(&mut ack).unwrap();
        ack.trim_end().to_string()
    }

    fn send(&mut self, r: &SensorReading) -> String {
        self.send_line(&serde_json::to_string(&WireRecord::from(r)).unwrap())
    }
}

fn readings(sensors: usize, days: usize) -> Vec<SensorReading> {
    let cfg = SimConfig {
        n_sensors: sensors,
        n_days: days,
        ..SimConfig::default()
    };
    gen_weather(&cfg).unwrap().readings()
}

const OK: &str = "{\"ok\":true}";

#[test]
fn concurrent_clients_all_land_in_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.csv");
    let gw = start(|addr| GatewayConfig::new(addr, &store));
    let all = readings(4, 5);
    let threads: Vec<_> = (0..4)
        .map(|s| {
            let mine: Vec<SensorReading> = all.iter().filter(|r| r.sensor_id == format!("s{}", s + 1)).cloned().collect();
            let addr = gw.addr;
            std::thread::spawn(move || {
                let mut c = Client::connect(addr);
                mine.iter().filter(|r| c.send(r) == OK).count()
            })
        })
        .collect();
    let acked: usize = threads.into_iter().map(|t| t.join().unwrap()).sum();
    let stats = gw.stop().unwrap();
    assert_eq!(acked, all.len());
    assert_eq!(stats.accepted as usize, all.len());

    let mut stored = store_load(&store).unwrap();
    let mut sent = all.clone();
    let key = |r: &SensorReading| (r.sensor_id.clone(), r.timestamp);
    stored.sort_by_key(key);
    sent.sort_by_key(key);
    assert_eq!(stored, sent);
}

#[test]
fn shutdown_is_prompt_with_an_idle_client() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.csv");
    let gw = start(|addr| GatewayConfig::new(addr, &store));
    let mut idle = Client::connect(gw.addr);
    assert_eq!(idle.send(&readings(2, 2)[0]), OK);
    let t0 = Instant::now();
    gw.stop().unwrap();
    assert!(t0.elapsed() < Duration::from_secs(1), "{:?}", t0.elapsed());
    assert_eq!(store_load(&store).unwrap().len(), 1);
}

#[test]
fn conflicting_duplicate_is_refused_and_first_write_stands() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.csv");
    let gw = start(|addr| GatewayConfig::new(addr, &store));
    let first = readings(2, 2)[0].clone();
    let mut changed = first.clone();
    changed.temperature += 1.0;
    let mut c = Client::connect(gw.addr);
    assert_eq!(c.send(&first), OK);
    assert_eq!(c.send(&first), OK);
    assert_eq!(c.send(&changed), "{\"ok\":false,\"err\":\"conflict\"}");
    drop(c);
    let stats = gw.stop().unwrap();
    assert_eq!((stats.accepted, stats.duplicates, stats.rejected), (1, 1, 1));

    // the refusal survives a restart, which reloads the store
    let gw = start(|addr| GatewayConfig::new(addr, &store));
    let mut c = Client::connect(gw.addr);
    assert_eq!(c.send(&changed), "{\"ok\":false,\"err\":\"conflict\"}");
    drop(c);
    gw.stop().unwrap();
    assert_eq!(store_load(&store).unwrap(), vec![first]);
}

fn detecting(addr: SocketAddr, dir: &Path) -> GatewayConfig {
    GatewayConfig {
        online_detection: true,
        alert_sink: Some(dir.join("alerts.ndjson")),
        detector_snapshot: Some(dir.join("detectors.json")),
        ..GatewayConfig::new(addr, dir.join("store.csv"))
    }
}

fn alert_lines(dir: &Path) -> Vec<String> {
    let mut lines: Vec<String> = std::fs::read_to_string(dir.join("alerts.ndjson"))
        .unwrap_or_default()
        .lines()
        .map(str::to_string)
        .collect();
    lines.sort();
    lines
}

#[test]
fn online_detection_resumes_from_its_snapshot() {
    let all = readings(2, 20);
    let cut = all.len() / 2;

    let whole = tempfile::tempdir().unwrap();
    let gw = start(|addr| detecting(addr, whole.path()));
    let mut c = Client::connect(gw.addr);
    assert!(all.iter().all(|r| c.send(r) == OK));
    drop(c);
    gw.stop().unwrap();

    let split = tempfile::tempdir().unwrap();
    for part in [&all[..cut], &all[cut..]] {
        let gw = start(|addr| detecting(addr, split.path()));
        let mut c = Client::connect(gw.addr);
        assert!(part.iter().all(|r| c.send(r) == OK));
        drop(c);
        gw.stop().unwrap();
    }

    let a = DetectorSnapshot::load(&whole.path().join("detectors.json")).unwrap();
    let b = DetectorSnapshot::load(&split.path().join("detectors.json")).unwrap();
    assert_eq!(a.detectors.len(), 2);
    assert_eq!(a.detectors, b.detectors);
    assert_eq!(alert_lines(whole.path()), alert_lines(split.path()));

    // the gateway raises exactly the alerts of an offline pass
    let cfg = SimConfig {
        n_sensors: 2,
        n_days: 20,
        ..SimConfig::default()
    };
    let offline = detect_stream(&gen_weather(&cfg).unwrap(), &DetectorConfig::default(), Exec::Sequential).unwrap();
    let mut expected: Vec<String> = offline.iter().map(|a| serde_json::to_string(a).unwrap()).collect();
    expected.sort();
    assert_eq!(alert_lines(whole.path()), expected);
}
