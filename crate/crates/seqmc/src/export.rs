//! Trace export in CSV or JSON Lines.
//!
//! Both formats start with one metadata line carrying the config hash. In
//! CSV it is a `#` comment ahead of the column header; in JSONL it is an
//! object with `"kind": "meta"`. Missing energies are empty CSV fields and
//! JSON `null`s. Reals use the shortest text that reads back exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use seqmc_core::seq::Sequence;
use seqmc_core::trace::{Trace, TraceRecord};

use crate::error::{AppError, Result};

pub const COLUMNS: [&str; 10] = [
    "chain_id",
    "epoch",
    "step",
    "burn_in",
    "accepted",
    "novel",
    "acceptance_prob",
    "energy_raw",
    "energy_norm",
    "target_temp",
];

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub config_hash: String,
    pub format_version: u32,
}

impl ExportMeta {
    pub fn new(config_hash: &str) -> Self {
        ExportMeta {
            config_hash: config_hash.to_string(),
            format_version: FORMAT_VERSION,
        }
    }
}

fn real(x: f64) -> String {
    format!("{x:?}")
}

fn malformed(m: impl std::fmt::Display) -> AppError {
    AppError::Io(format!("malformed trace: {m}"))
}

pub fn write_csv<'a, W: Write>(
    w: W,
    meta: &ExportMeta,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(
        w,
        "# seqmc trace config_hash={} format_version={}",
        meta.config_hash, meta.format_version
    )?;
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| AppError::Io(e.to_string());
    out.write_record(COLUMNS).map_err(io)?;
    for r in records {
        out.write_record([
            r.chain_id.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.burn_in.to_string(),
            r.accepted.to_string(),
            r.novel.to_string(),
            real(r.acceptance_prob),
            r.energy_raw.map(real).unwrap_or_default(),
            r.energy_norm.map(real).unwrap_or_default(),
            real(r.target_temp),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_meta_comment(line: &str) -> Result<ExportMeta> {
    let body = line
        .trim_end()
        .strip_prefix("# seqmc trace ")
        .ok_or_else(|| malformed("missing metadata line"))?;
    let mut hash = None;
    let mut version = None;
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("config_hash", v)) => hash = Some(v.to_string()),
            Some(("format_version", v)) => version = v.parse().ok(),
            _ => return Err(malformed(format!("unknown metadata field {field:?}"))),
        }
    }
    match (hash, version) {
        (Some(config_hash), Some(format_version)) if format_version == FORMAT_VERSION => Ok(ExportMeta {
            config_hash,
            format_version,
        }),
        (_, Some(v)) if v != FORMAT_VERSION => Err(malformed(format!("unsupported format version {v}"))),
        _ => Err(malformed("incomplete metadata line")),
    }
}

pub fn read_csv<R: Read>(r: R) -> Result<(ExportMeta, Vec<TraceRecord>)> {
    let mut r = BufReader::new(r);
    let mut first = String::new();
    r.read_line(&mut first)?;
    let meta = parse_meta_comment(&first)?;
    let mut rows = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rows.headers().map_err(malformed)?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(malformed(format!("unexpected columns {header:?}")));
    }
    let mut records = Vec::new();
    for (n, row) in rows.records().enumerate() {
        let row = row.map_err(malformed)?;
        let at = |e: String| malformed(format!("row {}: {e}", n + 1));
        let field = |i: usize| row.get(i).ok_or_else(|| at(format!("missing {}", COLUMNS[i])));
        fn parse<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} {s:?}"))
        }
        let opt = |i: usize| -> Result<Option<f64>> {
            let s = field(i)?;
            if s.is_empty() {
                Ok(None)
            } else {
                parse(s, COLUMNS[i]).map(Some).map_err(at)
            }
        };
        records.push(TraceRecord {
            chain_id: parse(field(0)?, COLUMNS[0]).map_err(at)?,
            epoch: parse(field(1)?, COLUMNS[1]).map_err(at)?,
            step: parse(field(2)?, COLUMNS[2]).map_err(at)?,
            burn_in: parse(field(3)?, COLUMNS[3]).map_err(at)?,
            accepted: parse(field(4)?, COLUMNS[4]).map_err(at)?,
            novel: parse(field(5)?, COLUMNS[5]).map_err(at)?,
            acceptance_prob: parse(field(6)?, COLUMNS[6]).map_err(at)?,
            energy_raw: opt(7)?,
            energy_norm: opt(8)?,
            target_temp: parse(field(9)?, COLUMNS[9]).map_err(at)?,
        });
    }
    Ok((meta, records))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    kind: String,
    config_hash: String,
    format_version: u32,
    columns: Vec<String>,
}

pub fn write_jsonl<'a, W: Write>(
    w: W,
    meta: &ExportMeta,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<()> {
    let mut w = BufWriter::new(w);
    let head = MetaLine {
        kind: "meta".into(),
        config_hash: meta.config_hash.clone(),
        format_version: meta.format_version,
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
    };
    serde_json::to_writer(&mut w, &head).map_err(|e| AppError::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| AppError::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read>(r: R) -> Result<(ExportMeta, Vec<TraceRecord>)> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| malformed("empty file"))??;
    let head: MetaLine = serde_json::from_str(&first).map_err(malformed)?;
    if head.kind != "meta" || head.format_version != FORMAT_VERSION || head.columns.iter().ne(COLUMNS) {
        return Err(malformed("unexpected metadata line"));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(malformed)?);
    }
    Ok((
        ExportMeta {
            config_hash: head.config_hash,
            format_version: head.format_version,
        },
        records,
    ))
}

/// Writes every chain's records, chain by chain, to `path`.
pub fn export_traces(path: &Path, format: Format, meta: &ExportMeta, traces: &[Trace]) -> Result<()> {
    let file = File::create(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    let records = traces.iter().flat_map(|t| t.records());
    match format {
        Format::Csv => write_csv(file, meta, records),
        Format::Jsonl => write_jsonl(file, meta, records),
    }
}

pub fn import_traces(path: &Path, format: Format) -> Result<(ExportMeta, Vec<TraceRecord>)> {
    let file = File::open(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    match format {
        Format::Csv => read_csv(file),
        Format::Jsonl => read_jsonl(file),
    }
}

/// Groups records by chain id, preserving order within each chain.
pub fn split_chains(records: Vec<TraceRecord>, include_burn_in: bool) -> Vec<Trace> {
    let mut ids: Vec<usize> = records.iter().map(|r| r.chain_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&id| {
            let t = Trace::from_records(id, records.iter().filter(|r| r.chain_id == id).cloned());
            if include_burn_in {
                t.including_burn_in()
            } else {
                t
            }
        })
        .collect()
}

/// `chain_id,sample,tokens` with tokens space-separated.
pub fn write_samples<W: Write>(w: W, samples: &[Vec<Sequence>]) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "chain_id,sample,tokens")?;
    for (chain, seqs) in samples.iter().enumerate() {
        for (i, s) in seqs.iter().enumerate() {
            let toks: Vec<String> = s.tokens().iter().map(|t| t.to_string()).collect();
            writeln!(w, "{chain},{i},{}", toks.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}
