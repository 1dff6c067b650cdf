//! CSV and JSON reports for sweep tables and per-round logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::engine::RoundOutcome;
use crate::error::{Error, Result};
use crate::sweep::{sort_rows, SweepRow};

pub const CSV_HEADER: &str =
    "policy,tau,capacity,seed,rounds,comm_bytes,cache_hits,peak_mem_bytes,final_accuracy,reduction_vs_baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Writes the table sorted by `(policy, tau, capacity, seed)`.
pub fn write_table<W: Write>(rows: &[SweepRow], format: Format, out: W) -> std::result::Result<(), String> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(CSV_HEADER.split(',')).map_err(|e| e.to_string())?;
            for row in &sorted {
                w.serialize(row).map_err(|e| e.to_string())?;
            }
            w.flush().map_err(|e| e.to_string())
        }
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &sorted).map_err(|e| e.to_string())?;
            out.write_all(b"\n").map_err(|e| e.to_string())
        }
    }
}

pub fn emit_report(rows: &[SweepRow], format: Format, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_table(rows, format, &mut out).map_err(|m| fmt_err(path, m))?;
    out.flush().map_err(io_err(path))
}

pub fn read_report(path: &Path, format: Format) -> Result<Vec<SweepRow>> {
    let file = File::open(path).map_err(io_err(path))?;
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let header: Vec<String> = r
                .headers()
                .map_err(|e| fmt_err(path, e))?
                .iter()
                .map(str::to_owned)
                .collect();
            if header.join(",") != CSV_HEADER {
                return Err(fmt_err(path, format!("unexpected header `{}`", header.join(","))));
            }
            r.deserialize().map(|row| row.map_err(|e| fmt_err(path, e))).collect()
        }
        Format::Json => serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| fmt_err(path, e)),
    }
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Per-round log as CSV; client-id sets are space separated.
pub fn write_round_log<W: Write>(log: &[RoundOutcome], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record([
        "round",
        "transmitted",
        "cache_hits",
        "skipped",
        "bytes_sent",
        "cache_mem_bytes",
        "cache_entries",
        "accuracy",
        "loss",
    ])
    .map_err(io)?;
    for o in log {
        w.write_record([
            o.round.to_string(),
            join_ids(&o.transmitted_ids),
            join_ids(&o.cache_hit_ids),
            join_ids(&o.skipped_ids),
            o.bytes_sent.to_string(),
            o.cache_mem_bytes.to_string(),
            o.cache_entries.to_string(),
            o.eval_accuracy.to_string(),
            o.eval_loss.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
}
