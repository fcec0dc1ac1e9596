//! Per-round CSV and run-summary JSON. Every real number is written with
//! 17 significant digits so files round-trip exactly and compare bytewise.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use oafel_core::scheduler::RoundTrace;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, Serializer};

use crate::experiment::SeedRun;
use crate::HarnessError;

pub const CSV_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

/// `t,loss,accuracy,sigma_t,k_star,snr,unified_energy` followed by
/// `q_n,E_est_n,E_cp_n,E_tr_n,sched_n` for every device.
pub fn csv_header(devices: usize) -> Vec<String> {
    let mut h: Vec<String> =
        ["t", "loss", "accuracy", "sigma_t", "k_star", "snr", "unified_energy"].map(String::from).to_vec();
    for n in 0..devices {
        for col in ["q", "E_est", "E_cp", "E_tr", "sched"] {
            h.push(format!("{col}_{n}"));
        }
    }
    h
}

pub fn csv_row(tr: &RoundTrace) -> Vec<String> {
    let mut row = vec![
        tr.t.to_string(),
        fmt_opt(tr.loss),
        fmt_opt(tr.accuracy),
        fmt_real(tr.sigma_t),
        tr.k_star.to_string(),
        fmt_opt(tr.snr),
        fmt_real(tr.unified_energy),
    ];
    for d in &tr.devices {
        row.extend([
            fmt_real(d.q),
            fmt_real(d.e_est),
            fmt_real(d.e_cp),
            fmt_real(d.e_tr),
            u8::from(d.scheduled).to_string(),
        ]);
    }
    row
}

pub fn write_csv<W: Write>(traces: &[RoundTrace], out: W) -> Result<(), csv::Error> {
    let devices = traces.first().map_or(0, |t| t.devices.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(devices))?;
    for tr in traces {
        w.write_record(csv_row(tr))?;
    }
    w.flush()?;
    Ok(())
}

/// JSON formatter writing floats as `{:.16e}`.
struct FixedDigits;

impl Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(fmt_real(value).as_bytes())
        } else {
            // JSON has no infinities; mirror serde_json's own choice.
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        CompactFormatter.begin_object_key(writer, first)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, FixedDigits);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Writes `metrics.csv` and `summary.json` for one seed under
/// `out/seed_<seed>/` and returns that directory.
pub fn emit_metrics(run: &SeedRun, out: &Path) -> Result<PathBuf, HarnessError> {
    let dir = seed_dir(out, run.seed);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let csv_path = dir.join(CSV_FILE);
    let file = fs::File::create(&csv_path).map_err(|e| HarnessError::io(&csv_path, e))?;
    write_csv(&run.traces, io::BufWriter::new(file)).map_err(|e| HarnessError::io(&csv_path, e.into()))?;
    write_json(&run.summary, &dir.join(SUMMARY_FILE))?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    let bytes = to_json_bytes(value).map_err(|e| HarnessError::io(path, e.into()))?;
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}
