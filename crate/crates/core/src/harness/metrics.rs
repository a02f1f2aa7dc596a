//! Long-format spectral-efficiency metrics and their per-cell summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SCHEMES;
use crate::error::{Error, Result};
use crate::io;

pub const METRICS_HEADER: &str = "scheme,intent_id,total_power,step,spectral_efficiency,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scheme: String,
    pub intent_id: u8,
    pub total_power: f64,
    pub step: usize,
    pub spectral_efficiency: f64,
    pub seed: u64,
}

/// Writes `# config_hash=… seed=…`, the header, then one line per row.
pub fn write_metrics(path: &Path, config_hash: &str, seed: u64, rows: &[MetricsRow]) -> Result<String> {
    let mut bytes = format!("# config_hash={config_hash} seed={seed}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        for row in rows {
            w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    if rows.is_empty() {
        bytes.extend_from_slice(METRICS_HEADER.as_bytes());
        bytes.push(b'\n');
    }
    io::write_bytes(path, &bytes)
}

/// Parses a metrics file back into its config hash, seed and rows.
pub fn read_metrics(path: &Path) -> Result<(String, u64, Vec<MetricsRow>)> {
    let bytes = io::read_bytes(path)?;
    let format_error = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_error("missing provenance line".into()))?;
    let first = std::str::from_utf8(&bytes[..newline]).map_err(|e| format_error(e.to_string()))?;
    let (hash, seed) = parse_provenance(first).ok_or_else(|| format_error(format!("bad provenance line {first:?}")))?;
    let body = &bytes[newline + 1..];
    let mut reader = csv::Reader::from_reader(body);
    let header = reader.headers().map_err(|e| format_error(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(format_error(format!("unexpected header {header:?}")));
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| format_error(e.to_string()))?;
    if !body.ends_with(b"\n") {
        return Err(format_error("truncated final row".into()));
    }
    Ok((hash, seed, rows))
}

fn parse_provenance(line: &str) -> Option<(String, u64)> {
    let rest = line.strip_prefix("# config_hash=")?;
    let (hash, seed) = rest.split_once(" seed=")?;
    Some((hash.to_owned(), seed.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub intent_id: u8,
    pub total_power: f64,
    pub scheme: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// `delta = mean(scheme) − mean(baseline)` within one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeDelta {
    pub intent_id: u8,
    pub total_power: f64,
    pub scheme: String,
    pub baseline: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    pub deltas: Vec<SchemeDelta>,
}

impl MetricsSummary {
    pub fn cell(&self, intent_id: u8, total_power: f64, scheme: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.intent_id == intent_id && c.total_power == total_power && c.scheme == scheme)
    }
}

fn scheme_rank(name: &str) -> usize {
    SCHEMES.iter().position(|s| *s == name).unwrap_or(SCHEMES.len())
}

/// Mean and population std of every `(intent, power, scheme)` cell, and
/// pairwise deltas between the schemes of each `(intent, power)`.
pub fn summarize(config_hash: &str, seed: u64, rows: &[MetricsRow]) -> MetricsSummary {
    // positive finite powers order the same way as their bit patterns
    let mut groups: BTreeMap<(u8, u64, usize, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.intent_id,
                r.total_power.to_bits(),
                scheme_rank(&r.scheme),
                r.scheme.clone(),
            ))
            .or_default()
            .push(r.spectral_efficiency);
    }
    let cells: Vec<CellSummary> = groups
        .into_iter()
        .map(|((intent_id, p, _, scheme), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            CellSummary {
                intent_id,
                total_power: f64::from_bits(p),
                scheme,
                mean,
                std,
                count: v.len(),
            }
        })
        .collect();
    let mut deltas = Vec::new();
    for (i, b) in cells.iter().enumerate() {
        for a in &cells[i + 1..] {
            if a.intent_id == b.intent_id && a.total_power == b.total_power {
                deltas.push(SchemeDelta {
                    intent_id: a.intent_id,
                    total_power: a.total_power,
                    scheme: a.scheme.clone(),
                    baseline: b.scheme.clone(),
                    delta: a.mean - b.mean,
                });
            }
        }
    }
    MetricsSummary {
        config_hash: config_hash.to_owned(),
        seed,
        cells,
        deltas,
    }
}
