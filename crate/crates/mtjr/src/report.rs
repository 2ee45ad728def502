//! CSV artifacts. Missing values (a term the mode does not train, a metric
//! it cannot produce) are empty cells. WER and accuracies are percentages.

use std::fs;
use std::path::Path;

use mtjr_core::data::ACCENT_NAMES;
use mtjr_core::decode::EvalReport;
use mtjr_core::train::EpochMetrics;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 9] = ["epoch", "ctc", "att", "asr", "accent", "total", "dev_wer", "dev_acc", "lr"];

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn percent(x: Option<f64>) -> String {
    cell(x.map(|v| 100.0 * v))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let err = |source| Error::Csv { path: path.to_owned(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_owned(), source: e })
}

fn metrics_cells(m: &EpochMetrics) -> Vec<String> {
    vec![
        m.epoch.to_string(),
        cell(m.ctc),
        cell(m.att),
        cell(m.asr),
        cell(m.accent),
        m.total.to_string(),
        percent(m.dev_wer),
        percent(m.dev_acc),
        m.lr.to_string(),
    ]
}

/// Per-epoch training log.
pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    write_rows(path, &header, &metrics.iter().map(metrics_cells).collect::<Vec<_>>())
}

/// One evaluated system on one split.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub system: String,
    pub split: String,
    pub report: EvalReport,
}

pub fn results_header() -> Vec<String> {
    let mut h: Vec<String> = ["system", "split", "wer", "acc"].iter().map(|s| s.to_string()).collect();
    h.extend(ACCENT_NAMES.iter().map(|a| format!("acc_{a}")));
    h
}

/// Results table with one row per system and split.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.system.clone(),
                r.split.clone(),
                percent(r.report.wer.as_ref().map(|w| w.wer)),
                percent(r.report.accent_accuracy),
            ];
            cells.extend(
                (0..ACCENT_NAMES.len()).map(|a| percent(r.report.per_accent_accuracy.get(a).copied().flatten())),
            );
            cells
        })
        .collect();
    write_rows(path, &results_header(), &rows)
}

/// Outcome of training and evaluating one swept value.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub wer: Option<f64>,
    pub acc: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
}

/// `sweep.csv` (one row per value) and `curves.csv` (one row per value and
/// epoch) inside `dir`.
pub fn write_sweep(dir: &Path, points: &[SweepPoint]) -> Result<()> {
    let header = ["value", "wer", "acc"].map(String::from);
    let rows: Vec<Vec<String>> =
        points.iter().map(|p| vec![p.value.to_string(), percent(p.wer), percent(p.acc)]).collect();
    write_rows(&dir.join("sweep.csv"), &header, &rows)?;

    let mut header = vec!["value".to_string()];
    header.extend(METRICS_HEADER.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = points
        .iter()
        .flat_map(|p| {
            p.metrics.iter().map(move |m| {
                let mut row = vec![p.value.to_string()];
                row.extend(metrics_cells(m));
                row
            })
        })
        .collect();
    write_rows(&dir.join("curves.csv"), &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch(epoch: usize, accent: Option<f64>) -> EpochMetrics {
        EpochMetrics {
            epoch,
            ctc: Some(1.5),
            att: Some(0.5),
            asr: Some(0.8),
            accent,
            total: 0.8,
            dev_wer: None,
            dev_acc: Some(0.25),
            lr: 1e-3,
        }
    }

    #[test]
    fn metrics_csv_has_documented_columns_and_blank_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &[epoch(1, None), epoch(2, Some(2.0))]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,ctc,att,asr,accent,total,dev_wer,dev_acc,lr");
        assert_eq!(lines[1], "1,1.5,0.5,0.8,,0.8,,25,0.001");
        assert_eq!(lines[2], "2,1.5,0.5,0.8,2,0.8,,25,0.001");
    }

    #[test]
    fn results_header_follows_accent_order() {
        assert_eq!(
            results_header().join(","),
            "system,split,wer,acc,acc_US,acc_UK,acc_CHN,acc_IND,acc_JPN,acc_KR,acc_PT,acc_RU"
        );
    }

    #[test]
    fn sweep_writes_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<SweepPoint> = [0.0, 0.1, 2.0]
            .iter()
            .map(|&value| SweepPoint {
                value,
                wer: Some(0.1),
                acc: None,
                metrics: vec![epoch(1, None), epoch(2, None)],
            })
            .collect();
        write_sweep(dir.path(), &points).unwrap();
        let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().count(), 1 + points.len());
        assert_eq!(sweep.lines().nth(2).unwrap(), "0.1,10,");
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 1 + 2 * points.len());
    }
}
