use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use meshcast::eval::report::{render_table1, render_table2};
use meshcast::eval::{load_data, run_table1, run_table2, RunConfig};
use meshcast::forecast::{rollout_24h, train, CellKind, Checkpoint, ROLLOUT_HOURS};
use meshcast::gateway::{serve, GatewayConfig, ShutdownHandle};
use meshcast::htm::detect_stream;
use meshcast::ingest::{
    align_mesh, apply_normalizer, dedup_dataset, fill_gaps, fit_normalizer, format_timestamp, gap_stats, parse_csv,
    parse_timestamp, write_csv,
};
use meshcast::model::{hour_index, Feature, MeshDataset};
use meshcast::simulate::{replay, write_labels_csv};
use meshcast::{Error, Result};

#[derive(Parser)]
#[command(name = "meshcast", version, about = "Hyperlocal weather forecasting and anomaly detection for sensor meshes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file, or `default`. Falls back to $MESHCAST_CONFIG.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides sim.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `ingest` and `detect`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic mesh: readings.csv and labels.csv.
    Simulate,
    /// Send a readings CSV to a gateway, one record per line.
    Replay {
        csv: PathBuf,
        #[arg(long)]
        to: String,
        /// Hours per hour of wall clock; omit to send as fast as acks arrive.
        #[arg(long)]
        speedup: Option<f64>,
    },
    /// Accept readings over TCP into an append-only CSV store.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
        #[arg(long)]
        store: PathBuf,
        /// Run an anomaly detector per sensor and append alerts here.
        #[arg(long)]
        alerts: Option<PathBuf>,
        /// Restore detector state from, and save it to, this file.
        #[arg(long, requires = "alerts")]
        snapshot: Option<PathBuf>,
    },
    /// Clean a readings CSV: drop duplicate runs, fill short gaps.
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        max_gap: Option<usize>,
    },
    /// Train a recurrent forecaster on the configured data.
    Train {
        #[arg(long, value_enum, default_value = "lstm")]
        kind: Kind,
    },
    /// 24-hour temperature forecast for one sensor from a checkpoint.
    Forecast {
        checkpoint: PathBuf,
        #[arg(long)]
        sensor: String,
        /// Last observed hour, e.g. 2024-03-01T12:00:00Z.
        #[arg(long)]
        anchor: String,
    },
    /// Stream the configured data through the detectors; alerts as NDJSON.
    Detect,
    /// Produce an evaluation report.
    Eval {
        #[arg(value_enum)]
        table: Table,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Lstm,
    Gru,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Table1,
    Table2,
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Dedup and gap filling shared by training and forecasting.
fn prepared(cfg: &RunConfig) -> Result<MeshDataset> {
    let (d, _) = dedup_dataset(&load_data(cfg)?.data)?;
    Ok(fill_gaps(&d, cfg.max_gap))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Simulate => {
            let cfg = config(common)?;
            let loaded = load_data(&RunConfig { data_csv: None, data_labels: None, ..cfg })?;
            let dir = out_dir(common)?;
            let readings = loaded.data.readings();
            std::fs::write(dir.join("readings.csv"), write_csv(&readings))?;
            std::fs::write(dir.join("labels.csv"), write_labels_csv(&loaded.labels))?;
            println!(
                "wrote {} readings and {} labels to {}",
                readings.len(),
                loaded.labels.len(),
                dir.display()
            );
        }
        Command::Replay { csv, to, speedup } => {
            let parsed = parse_csv(&std::fs::read_to_string(&csv)?)?;
            let d = align_mesh(&parsed.readings)?;
            let report = replay(&d, to.as_str(), speedup.unwrap_or(f64::INFINITY))?;
            println!("sent={} acked={} nacked={}", report.sent, report.acked, report.nacked);
        }
        Command::Serve {
            listen,
            store,
            alerts,
            snapshot,
        } => {
            let cfg = config(common)?;
            let gw = GatewayConfig {
                online_detection: alerts.is_some(),
                alert_sink: alerts,
                detector: cfg.detector,
                detector_snapshot: snapshot,
                ..GatewayConfig::new(listen, store)
            };
            let handle = ShutdownHandle::new();
            let on_signal = handle.clone();
            ctrlc::set_handler(move || on_signal.shutdown())
                .map_err(|e| Error::InvalidConfig(format!("cannot install signal handler: {e}")))?;
            eprintln!("listening on {listen}");
            let stats = serve(&gw, Some(handle))?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Ingest { csv, max_gap } => {
            let parsed = parse_csv(&std::fs::read_to_string(&csv)?)?;
            for r in &parsed.rejected {
                let fields: Vec<&str> = r.violations.iter().map(|v| v.field()).collect();
                eprintln!("line {}: rejected ({})", r.line, fields.join(", "));
            }
            let d = align_mesh(&parsed.readings)?;
            let (deduped, removed) = dedup_dataset(&d)?;
            let before = gap_stats(&deduped);
            let filled = fill_gaps(&deduped, max_gap.unwrap_or(RunConfig::default().max_gap));
            let after = gap_stats(&filled);
            println!("rejected_rows={}", parsed.rejected.len());
            println!("removed_count={}", removed.iter().sum::<usize>());
            println!("missing_cells={}", before.missing_cells);
            println!("filled_cells={}", before.missing_cells - after.missing_cells);
            println!("remaining_gaps={}", after.gaps);
            println!("longest_gap={}", after.longest_gap);
            if let Some(out) = &common.out {
                std::fs::write(out, write_csv(&filled.readings()))?;
            }
        }
        Command::Train { kind } => {
            let cfg = config(common)?;
            let d = prepared(&cfg)?;
            let norm = fit_normalizer(&d)?;
            let data = apply_normalizer(&d, &norm)?;
            let cell = match kind {
                Kind::Lstm => CellKind::Lstm,
                Kind::Gru => CellKind::Gru,
            };
            let (state, report) = train(&cfg.net.net_config(data.n_sensors(), cell), &data, cfg.exec)?;
            let dir = out_dir(common)?;
            Checkpoint::new(&state, data.sensor_ids().to_vec(), Some(norm)).save(&dir.join("checkpoint.json"))?;
            write_json(&dir.join("train_report.json"), &report)?;
            println!(
                "{cell}: best epoch {} of {}, validation MSE {:.6}",
                report.best_epoch, report.stopped_at, report.best_val_mse
            );
        }
        Command::Forecast {
            checkpoint,
            sensor,
            anchor,
        } => {
            let cfg = config(common)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let state = ckpt.state()?;
            let norm = ckpt
                .normalization
                .clone()
                .ok_or_else(|| Error::InvalidDataset("checkpoint carries no normalization".into()))?;
            let d = prepared(&cfg)?;
            if d.sensor_ids() != ckpt.sensor_ids.as_slice() {
                return Err(Error::InvalidDataset(format!(
                    "checkpoint sensors {:?} differ from data sensors {:?}",
                    ckpt.sensor_ids,
                    d.sensor_ids()
                )));
            }
            let data = apply_normalizer(&d, &norm)?;
            let target = data.sensor_index(&sensor)?;
            let ts = parse_timestamp(&anchor).ok_or_else(|| Error::InvalidConfig(format!("bad anchor {anchor}")))?;
            let offset = hour_index(&ts) - hour_index(&data.start());
            let anchor_hour =
                usize::try_from(offset).map_err(|_| Error::Insufficient(format!("anchor {anchor} precedes the data")))?;
            let preds = rollout_24h(&state, &data, target, anchor_hour)?;
            println!("timestamp,sensor_id,temperature_c");
            for (k, p) in preds.iter().enumerate().take(ROLLOUT_HOURS) {
                let t = norm.unscale(Feature::Temperature, *p);
                println!("{},{sensor},{t:.3}", format_timestamp(&data.timestamp(anchor_hour + k + 1)));
            }
        }
        Command::Detect => {
            let cfg = config(common)?;
            let d = load_data(&cfg)?.data;
            let alerts = detect_stream(&d, &cfg.detector, cfg.exec)?;
            let mut text = String::new();
            for a in &alerts {
                text.push_str(&serde_json::to_string(a)?);
                text.push('\n');
            }
            match &common.out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            eprintln!("{} alerts", alerts.len());
        }
        Command::Eval { table } => {
            let cfg = config(common)?;
            let dir = out_dir(common)?;
            match table {
                Table::Table1 => {
                    let (report, timing) = run_table1(&cfg)?;
                    write_json(&dir.join("table1.json"), &report)?;
                    write_json(&dir.join("table1.timing.json"), &timing)?;
                    print!("{}", render_table1(&report));
                }
                Table::Table2 => {
                    let (report, latency) = run_table2(&cfg)?;
                    write_json(&dir.join("table2.json"), &report)?;
                    write_json(&dir.join("table2.latency.json"), &latency)?;
                    print!("{}", render_table2(&report));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
