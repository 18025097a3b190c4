//! Local telemetry gateway.
//!
//! Sensors connect over TCP and send newline-delimited JSON, one reading per
//! line:
//!
//! ```text
//! {"ts":"2024-01-01T00:00:00Z","sensor":"s1","t":25.0,"h":60.0,"p":1005.0}
//! ```
//!
//! Every line gets exactly one ack line, `{"ok":true}` or
//! `{"ok":false,"err":"<field-or-reason>"}`. Accepted readings are appended
//! to a CSV store in the ingest format and flushed before the ack is sent.
//! A repeated (sensor, hour) with identical values is acked without writing;
//! one with different values is refused and the first write stands.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htm::{DetectorConfig, DetectorSnapshot, StreamDetector};
use crate::ingest::{csv_row, format_timestamp, parse_csv, parse_timestamp, CSV_HEADER};
use crate::model::{hour_index, validate_reading, SensorReading, FEATURES};

const POLL: Duration = Duration::from_millis(50);
const MAX_LINE: usize = 64 * 1024;

/// One reading on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub ts: String,
    pub sensor: String,
    pub t: f64,
    pub h: f64,
    pub p: f64,
}

impl From<&SensorReading> for WireRecord {
    fn from(r: &SensorReading) -> Self {
        Self {
            ts: format_timestamp(&r.timestamp),
            sensor: r.sensor_id.clone(),
            t: r.temperature,
            h: r.humidity,
            p: r.pressure,
        }
    }
}

impl WireRecord {
    pub fn to_reading(&self) -> std::result::Result<SensorReading, String> {
        let timestamp = parse_timestamp(&self.ts).ok_or_else(|| "ts".to_string())?;
        if self.sensor.trim().is_empty() || self.sensor.contains([',', '\n', '\r']) {
            return Err("sensor".into());
        }
        Ok(SensorReading {
            sensor_id: self.sensor.clone(),
            timestamp,
            temperature: self.t,
            humidity: self.h,
            pressure: self.p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<String>,
}

impl Ack {
    pub fn ok() -> Self {
        Self { ok: true, err: None }
    }

    pub fn err(reason: impl Into<String>) -> Self {
        Self {
            ok: false,
            err: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended,
    /// Same key and values already stored.
    Duplicate,
    /// Same key with different values already stored.
    Conflict,
}

/// Append-only CSV store keyed by (sensor, hour).
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    writer: BufWriter<File>,
    index: HashMap<(String, i64), [u64; FEATURES]>,
    rows: usize,
}

fn bits(r: &SensorReading) -> [u64; FEATURES] {
    r.values().map(f64::to_bits)
}

impl Store {
    /// Opens (creating if needed) the store at `path`, indexing existing rows.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let existing = if path.exists() { store_load(&path)? } else { Vec::new() };
        let fresh = !path.exists() || std::fs::metadata(&path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut writer = BufWriter::new(file);
        if fresh {
            writeln!(writer, "{CSV_HEADER}")?;
            writer.flush()?;
        }
        let mut index = HashMap::with_capacity(existing.len());
        for r in &existing {
            index.entry((r.sensor_id.clone(), hour_index(&r.timestamp))).or_insert_with(|| bits(r));
        }
        Ok(Self {
            path,
            writer,
            rows: index.len(),
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Appends and flushes `r` unless its key is already present.
    pub fn append(&mut self, r: &SensorReading) -> Result<AppendOutcome> {
        let key = (r.sensor_id.clone(), hour_index(&r.timestamp));
        if let Some(stored) = self.index.get(&key) {
            return Ok(if *stored == bits(r) {
                AppendOutcome::Duplicate
            } else {
                AppendOutcome::Conflict
            });
        }
        writeln!(self.writer, "{}", csv_row(r))?;
        self.writer.flush()?;
        self.index.insert(key, bits(r));
        self.rows += 1;
        Ok(AppendOutcome::Appended)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        self.writer.get_ref().sync_data()?;
        Ok(())
    }
}

/// Reads every row of a store file. Rows that fail validation are an error:
/// the gateway never writes them.
pub fn store_load(path: impl AsRef<Path>) -> Result<Vec<SensorReading>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let parsed = parse_csv(&text)?;
    if let Some(bad) = parsed.rejected.first() {
        return Err(Error::Implausible {
            row: bad.line,
            fields: bad.violations.iter().map(|v| v.field()).collect::<Vec<_>>().join(","),
        });
    }
    Ok(parsed.readings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub store_path: PathBuf,
    pub online_detection: bool,
    pub alert_sink: Option<PathBuf>,
    pub detector: DetectorConfig,
    /// Detector state is restored from and saved to this file when set.
    pub detector_snapshot: Option<PathBuf>,
}

impl GatewayConfig {
    pub fn new(listen: SocketAddr, store_path: impl Into<PathBuf>) -> Self {
        Self {
            listen,
            store_path: store_path.into(),
            online_detection: false,
            alert_sink: None,
            detector: DetectorConfig::default(),
            detector_snapshot: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.listen.port() == 0 {
            return Err(Error::InvalidConfig("listen port must be in 1..=65535".into()));
        }
        if self.online_detection {
            self.detector.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub accepted: AtomicU64,
    pub duplicates: AtomicU64,
    pub rejected: AtomicU64,
    pub alerts: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub accepted: u64,
    pub duplicates: u64,
    pub rejected: u64,
    pub alerts: u64,
}

impl GatewayStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            accepted: self.accepted.load(Ordering::Relaxed),
            duplicates: self.duplicates.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            alerts: self.alerts.load(Ordering::Relaxed),
        }
    }
}

type DetectorSlot = Arc<Mutex<StreamDetector>>;

struct Shared {
    store: Mutex<Store>,
    detectors: Option<Mutex<HashMap<String, DetectorSlot>>>,
    detector_cfg: DetectorConfig,
    alerts: Option<Mutex<BufWriter<File>>>,
    stats: GatewayStats,
    shutdown: Arc<AtomicBool>,
}

impl Shared {
    fn handle_line(&self, line: &[u8]) -> Ack {
        let Ok(text) = std::str::from_utf8(line) else {
            return Ack::err("utf8");
        };
        let text = text.trim();
        if text.is_empty() {
            return Ack::err("empty");
        }
        let rec: WireRecord = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(_) => return Ack::err("parse"),
        };
        let reading = match rec.to_reading() {
            Ok(r) => r,
            Err(field) => return Ack::err(field),
        };
        let violations = validate_reading(&reading);
        if !violations.is_empty() {
            let fields: Vec<&str> = violations.iter().map(|v| v.field()).collect();
            return Ack::err(fields.join(","));
        }
        let outcome = {
            let mut store = self.store.lock().unwrap();
            match store.append(&reading) {
                Ok(o) => o,
                Err(e) => {
                    // a store that cannot be written is fatal for the gateway
                    self.shutdown.store(true, Ordering::SeqCst);
                    return Ack::err(format!("store: {e}"));
                }
            }
        };
        match outcome {
            AppendOutcome::Conflict => return Ack::err("conflict"),
            AppendOutcome::Duplicate => {
                self.stats.duplicates.fetch_add(1, Ordering::Relaxed);
                return Ack::ok();
            }
            AppendOutcome::Appended => {
                self.stats.accepted.fetch_add(1, Ordering::Relaxed);
            }
        }
        if let Err(e) = self.detect(&reading) {
            return Ack::err(format!("detector: {e}"));
        }
        Ack::ok()
    }

    fn detect(&self, reading: &SensorReading) -> Result<()> {
        let Some(detectors) = &self.detectors else { return Ok(()) };
        let slot = {
            let mut map = detectors.lock().unwrap();
            match map.get(&reading.sensor_id) {
                Some(slot) => slot.clone(),
                None => {
                    let det = StreamDetector::new(reading.sensor_id.clone(), self.detector_cfg.clone())?;
                    let slot = Arc::new(Mutex::new(det));
                    map.insert(reading.sensor_id.clone(), slot.clone());
                    slot
                }
            }
        };
        let outcome = slot.lock().unwrap().process(reading)?;
        if let (Some(alert), Some(sink)) = (outcome.alert, &self.alerts) {
            let mut sink = sink.lock().unwrap();
            writeln!(sink, "{}", serde_json::to_string(&alert)?)?;
            sink.flush()?;
            self.stats.alerts.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }
}

/// A bound, not yet running gateway.
pub struct Gateway {
    listener: TcpListener,
    shared: Arc<Shared>,
    snapshot_path: Option<PathBuf>,
}

/// Requests a graceful stop from any thread.
#[derive(Debug, Clone)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn shutdown(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_shutdown(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

impl Gateway {
    pub fn bind(cfg: &GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let listener = TcpListener::bind(cfg.listen)?;
        Self::with_listener(listener, cfg)
    }

    /// Uses an already bound listener (the configured address is ignored).
    pub fn with_listener(listener: TcpListener, cfg: &GatewayConfig) -> Result<Self> {
        if cfg.online_detection {
            cfg.detector.validate()?;
        }
        listener.set_nonblocking(true)?;
        let store = Store::open(&cfg.store_path)?;
        let detectors = if cfg.online_detection {
            let mut map = HashMap::new();
            if let Some(path) = cfg.detector_snapshot.as_ref().filter(|p| p.exists()) {
                for det in DetectorSnapshot::load(path)?.detectors {
                    map.insert(det.sensor_id().to_string(), Arc::new(Mutex::new(det)));
                }
            }
            Some(Mutex::new(map))
        } else {
            None
        };
        let alerts = match (&cfg.alert_sink, cfg.online_detection) {
            (Some(path), true) => Some(Mutex::new(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(path)?,
            ))),
            _ => None,
        };
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                store: Mutex::new(store),
                detectors,
                detector_cfg: cfg.detector.clone(),
                alerts,
                stats: GatewayStats::default(),
                shutdown: Arc::new(AtomicBool::new(false)),
            }),
            snapshot_path: cfg.detector_snapshot.clone(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        ShutdownHandle(self.shared.shutdown.clone())
    }

    /// Serves until shutdown is requested, then flushes the store and, with
    /// online detection, writes the detector snapshot.
    pub fn run(self) -> Result<StatsSnapshot> {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.shared.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    let shared = self.shared.clone();
                    workers.push(std::thread::spawn(move || {
                        let _ = serve_connection(stream, &shared);
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        for w in workers {
            let _ = w.join();
        }
        self.shared.store.lock().unwrap().flush()?;
        if let Some(sink) = &self.shared.alerts {
            sink.lock().unwrap().flush()?;
        }
        if let (Some(detectors), Some(path)) = (&self.shared.detectors, &self.snapshot_path) {
            let map = detectors.lock().unwrap();
            let mut ids: Vec<&String> = map.keys().collect();
            ids.sort();
            let dets = ids.iter().map(|id| map[*id].lock().unwrap().clone()).collect();
            DetectorSnapshot::new(dets).save(path)?;
        }
        Ok(self.shared.stats.snapshot())
    }

    /// Runs on a background thread.
    pub fn spawn(self) -> Result<RunningGateway> {
        let addr = self.local_addr()?;
        let handle = self.shutdown_handle();
        let join = std::thread::spawn(move || self.run());
        Ok(RunningGateway { addr, handle, join })
    }
}

pub struct RunningGateway {
    pub addr: SocketAddr,
    handle: ShutdownHandle,
    join: JoinHandle<Result<StatsSnapshot>>,
}

impl RunningGateway {
    pub fn shutdown_handle(&self) -> ShutdownHandle {
        self.handle.clone()
    }

    pub fn stop(self) -> Result<StatsSnapshot> {
        self.handle.shutdown();
        self.join
            .join()
            .map_err(|_| Error::Io(io::Error::other("gateway thread panicked")))?
    }
}

/// Binds and serves `cfg` until `shutdown` is triggered.
pub fn serve(cfg: &GatewayConfig, shutdown: Option<ShutdownHandle>) -> Result<StatsSnapshot> {
    let gw = Gateway::bind(cfg)?;
    if let Some(external) = shutdown {
        let internal = gw.shutdown_handle();
        std::thread::spawn(move || {
            while !external.is_shutdown() && !internal.is_shutdown() {
                std::thread::sleep(POLL);
            }
            internal.shutdown();
        });
    }
    gw.run()
}

impl ShutdownHandle {
    pub fn new() -> Self {
        Self(Arc::new(AtomicBool::new(false)))
    }
}

impl Default for ShutdownHandle {
    fn default() -> Self {
        Self::new()
    }
}

fn serve_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL * 2))?;
    stream.set_nodelay(true).ok();
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::with_capacity(256);
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) => {
                if buf.last() != Some(&b'\n') {
                    // EOF in the middle of a line; wait for the rest or the close
                    if buf.len() > MAX_LINE {
                        buf.clear();
                        reply(&mut writer, &Ack::err("line too long"))?;
                    }
                    continue;
                }
                let ack = shared.handle_line(&buf[..buf.len() - 1]);
                if ack.ok {
                    // counted by handle_line
                } else {
                    shared.stats.rejected.fetch_add(1, Ordering::Relaxed);
                }
                buf.clear();
                reply(&mut writer, &ack)?;
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if buf.len() > MAX_LINE {
                    buf.clear();
                    reply(&mut writer, &Ack::err("line too long"))?;
                }
            }
            Err(e) => return Err(e),
        }
    }
}

fn reply(writer: &mut BufWriter<TcpStream>, ack: &Ack) -> io::Result<()> {
    let mut line = serde_json::to_string(ack).map_err(io::Error::other)?;
    line.push('\n');
    writer.write_all(line.as_bytes())?;
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hour_to_timestamp;

    fn reading(h: i64, t: f64) -> SensorReading {
        SensorReading {
            sensor_id: "s1".into(),
            timestamp: hour_to_timestamp(473_352 + h),
            temperature: t,
            humidity: 60.0,
            pressure: 1005.0,
        }
    }

    #[test]
    fn ack_wire_format() {
        assert_eq!(serde_json::to_string(&Ack::ok()).unwrap(), r#"{"ok":true}"#);
        assert_eq!(serde_json::to_string(&Ack::err("humidity")).unwrap(), r#"{"ok":false,"err":"humidity"}"#);
    }

    #[test]
    fn wire_record_format() {
        let rec = WireRecord::from(&reading(0, 25.0));
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"ts":"2024-01-01T00:00:00Z","sensor":"s1","t":25.0,"h":60.0,"p":1005.0}"#
        );
        assert_eq!(rec.to_reading().unwrap(), reading(0, 25.0));
    }

    #[test]
    fn store_append_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.csv");
        let mut store = Store::open(&path).unwrap();
        assert!(store_load(&path).unwrap().is_empty());
        let rs = [reading(0, 25.0), reading(1, 25.5), reading(2, 26.125)];
        for r in &rs {
            assert_eq!(store.append(r).unwrap(), AppendOutcome::Appended);
        }
        assert_eq!(store_load(&path).unwrap(), rs.to_vec());
    }

    #[test]
    fn store_is_idempotent_and_first_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.csv");
        let mut store = Store::open(&path).unwrap();
        assert_eq!(store.append(&reading(0, 25.0)).unwrap(), AppendOutcome::Appended);
        assert_eq!(store.append(&reading(0, 25.0)).unwrap(), AppendOutcome::Duplicate);
        assert_eq!(store.append(&reading(0, 26.0)).unwrap(), AppendOutcome::Conflict);
        assert_eq!(store_load(&path).unwrap(), vec![reading(0, 25.0)]);
        drop(store);
        // reopening keeps the index
        let mut store = Store::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.append(&reading(0, 26.0)).unwrap(), AppendOutcome::Conflict);
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        assert!(store_load(&path).unwrap().is_empty());
    }

    #[test]
    fn port_zero_rejected() {
        let cfg = GatewayConfig::new("127.0.0.1:0".parse().unwrap(), "/tmp/never.csv");
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
