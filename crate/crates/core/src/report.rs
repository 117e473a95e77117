//! CSV reports with fixed headers. Every writer has a loader that rejects a
//! file whose header differs, so reports round-trip.

use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::PartitionEntry;
use crate::engine::{BudgetPoint, DecodeTraceEntry, HeadSummary};
use crate::error::{Error, Result};
use crate::workload::HeadRole;

/// A row type with a fixed column list.
pub trait CsvRecord: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_csv<T: CsvRecord>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(T::HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: CsvRecord>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(T::HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "{}: header {:?} does not match expected {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>(),
            T::HEADER
        )));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTraceRow {
    pub layer: usize,
    pub head: usize,
    pub position: u32,
    pub role: HeadRole,
    pub tokens_selected: usize,
    pub visible: usize,
    pub projected_mass: Option<f64>,
    pub true_mass: Option<f64>,
}

impl From<&DecodeTraceEntry> for DecodeTraceRow {
    fn from(e: &DecodeTraceEntry) -> Self {
        DecodeTraceRow {
            layer: e.layer,
            head: e.head,
            position: e.position,
            role: e.role,
            tokens_selected: e.tokens_selected,
            visible: e.visible,
            projected_mass: e.projected_mass,
            true_mass: e.true_mass,
        }
    }
}

impl CsvRecord for DecodeTraceRow {
    const HEADER: &'static [&'static str] = &[
        "layer",
        "head",
        "position",
        "role",
        "tokens_selected",
        "visible",
        "projected_mass",
        "true_mass",
    ];
}

/// One selection made for one query, by any selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTraceRow {
    pub query_position: u32,
    /// Flat query-head index.
    pub head: usize,
    pub method: String,
    pub k_or_p: f64,
    pub tokens_selected: usize,
    pub covered_mass: f64,
}

impl CsvRecord for SelectionTraceRow {
    const HEADER: &'static [&'static str] =
        &["query_position", "head", "method", "k_or_p", "tokens_selected", "covered_mass"];
}

impl CsvRecord for PartitionEntry {
    const HEADER: &'static [&'static str] = &["layer", "head", "score", "role"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl CsvRecord for LossRow {
    const HEADER: &'static [&'static str] = &["step", "lr", "loss"];
}

impl CsvRecord for HeadSummary {
    const HEADER: &'static [&'static str] = &[
        "layer",
        "head",
        "role",
        "steps",
        "mean_active",
        "min_active",
        "max_active",
        "mean_visible",
        "mean_projected_mass",
        "mean_true_mass",
    ];
}

impl CsvRecord for BudgetPoint {
    const HEADER: &'static [&'static str] = &["method", "budget", "mean_tokens", "mean_mass"];
}

/// Timing of one decode mode at one cache length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub mode: String,
    pub iterations: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub mean_tokens: f64,
}

impl CsvRecord for BenchRow {
    const HEADER: &'static [&'static str] = &["length", "mode", "iterations", "median_us", "p95_us", "mean_tokens"];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_rows_round_trip() {
        let rows = vec![
            DecodeTraceRow {
                layer: 0,
                head: 3,
                position: 4097,
                role: HeadRole::Retrieval,
                tokens_selected: 17,
                visible: 4098,
                projected_mass: Some(0.912_345_678_901_234_5),
                true_mass: Some(1.0 / 3.0),
            },
            DecodeTraceRow {
                layer: 1,
                head: 0,
                position: 4097,
                role: HeadRole::Local,
                tokens_selected: 260,
                visible: 4098,
                projected_mass: None,
                true_mass: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("layer,head,position,role,tokens_selected,visible,projected_mass,true_mass\n"));
        assert_eq!(read_csv::<DecodeTraceRow>(&path).unwrap(), rows);
    }

    #[test]
    fn header_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_csv(&path, &[LossRow { step: 0, lr: 1e-3, loss: 2.5 }]).unwrap();
        assert!(read_csv::<BenchRow>(&path).is_err());
        assert_eq!(read_csv::<LossRow>(&path).unwrap()[0].loss, 2.5);
    }

    #[test]
    fn other_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        let entries = vec![PartitionEntry {
            layer: 0,
            head: 1,
            score: 0.267_949_192_431_122_7,
            role: HeadRole::Retrieval,
        }];
        write_csv(&p, &entries).unwrap();
        assert_eq!(read_csv::<PartitionEntry>(&p).unwrap(), entries);
        let sel = vec![SelectionTraceRow {
            query_position: 9,
            head: 2,
            method: "histogram".into(),
            k_or_p: 0.9,
            tokens_selected: 128,
            covered_mass: 0.93,
        }];
        write_csv(&p, &sel).unwrap();
        assert_eq!(read_csv::<SelectionTraceRow>(&p).unwrap(), sel);
    }
}
