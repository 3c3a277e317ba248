//! Reading metrics and result CSVs back for analysis and plotting.

use std::fmt::Write;
use std::path::Path;

use dfpt_core::analysis::GapRow;
use dfpt_core::trainer::{sig6, EpochRecord, Split};
use serde::Deserialize;

use crate::error::{IoError, Result};
use crate::plot::Series;

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |e| IoError::Csv(format!("{}: {e}", path.display()))
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    epoch: usize,
    split: String,
    top1: f64,
    ce: f64,
    kd_t: Option<f64>,
    kd_p: Option<f64>,
    prompt_top1: Option<f64>,
    kl_s_t: Option<f64>,
    kl_s_p: Option<f64>,
    one_minus_pt_t: Option<f64>,
    one_minus_pt_p: Option<f64>,
    lr: f64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpochRecord>> {
    read_metrics_from(text.as_bytes(), Path::new("<metrics>"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = std::fs::File::open(path).map_err(IoError::io(path))?;
    read_metrics_from(file, path)
}

fn read_metrics_from(r: impl std::io::Read, path: &Path) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize::<MetricsRow>() {
        let m = row.map_err(csv_err(path))?;
        let split = Split::parse(&m.split).ok_or_else(|| IoError::Csv(format!("unknown split `{}`", m.split)))?;
        out.push(EpochRecord {
            epoch: m.epoch,
            split: Some(split),
            top1: m.top1,
            ce: m.ce,
            kd_t: m.kd_t,
            kd_p: m.kd_p,
            prompt_top1: m.prompt_top1,
            kl_s_t: m.kl_s_t,
            kl_s_p: m.kl_s_p,
            one_minus_pt_t: m.one_minus_pt_t,
            one_minus_pt_p: m.one_minus_pt_p,
            lr: m.lr,
        });
    }
    Ok(out)
}

/// `method,teacher,student` rows; extra columns and an `average` row are
/// ignored.
pub fn read_gap_rows(path: &Path) -> Result<Vec<GapRow>> {
    #[derive(Deserialize)]
    struct Row {
        method: String,
        teacher: f64,
        student: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let r = row.map_err(csv_err(path))?;
        if r.method != "average" {
            out.push(GapRow {
                method: r.method,
                teacher: r.teacher,
                student: r.student,
            });
        }
    }
    Ok(out)
}

/// Named columns of any CSV as series against `epoch` (or the row index),
/// restricted to rows whose `split` equals `split` when that column exists.
/// Empty cells are skipped.
pub fn read_series(path: &Path, cols: &[String], split: &str) -> Result<Vec<Series>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let index = |name: &str| headers.iter().position(|h| h == name);
    let split_col = index("split");
    let epoch_col = index("epoch");
    let targets = cols
        .iter()
        .map(|c| index(c).ok_or_else(|| IoError::Csv(format!("{}: no column `{c}`", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    let mut series: Vec<Series> = cols.iter().map(|c| Series { name: c.clone(), points: Vec::new() }).collect();
    let num = |s: &str, what: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| IoError::Csv(format!("{}: `{s}` in column `{what}` is not a number", path.display())))
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if split_col.is_some_and(|c| &rec[c] != split) {
            continue;
        }
        let x = match epoch_col {
            Some(c) => num(&rec[c], "epoch")?,
            None => i as f64,
        };
        for (s, &c) in series.iter_mut().zip(&targets) {
            if !rec[c].trim().is_empty() {
                s.points.push((x, num(&rec[c], &s.name)?));
            }
        }
    }
    Ok(series)
}

/// Side-by-side per-epoch `KL(p_S‖p_T)` / `KL(p_S‖p_P)` of two runs.
pub fn similarity_table(a: &[EpochRecord], b: &[EpochRecord], split: Split) -> String {
    let pick = |rs: &[EpochRecord]| -> Vec<EpochRecord> { rs.iter().filter(|r| r.split() == split).cloned().collect() };
    let (a, b) = (pick(a), pick(b));
    let opt = |v: Option<f64>| v.map(sig6).unwrap_or_default();
    let mut out = String::from("epoch,a_kl_s_t,a_kl_s_p,b_kl_s_t,b_kl_s_p,diff_kl_s_t,diff_kl_s_p\n");
    for ra in &a {
        let Some(rb) = b.iter().find(|r| r.epoch == ra.epoch) else { continue };
        let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            ra.epoch,
            opt(ra.kl_s_t),
            opt(ra.kl_s_p),
            opt(rb.kl_s_t),
            opt(rb.kl_s_p),
            opt(diff(ra.kl_s_t, rb.kl_s_t)),
            opt(diff(ra.kl_s_p, rb.kl_s_p))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfpt_core::trainer::MetricsLog;

    fn log() -> MetricsLog {
        let mut log = MetricsLog::new();
        for epoch in 1..=2 {
            for split in [Split::Train, Split::Test] {
                log.push(EpochRecord {
                    epoch,
                    split: Some(split),
                    top1: 0.25 * epoch as f64,
                    ce: 1.5,
                    kd_t: Some(0.3),
                    kl_s_t: Some(0.1 / epoch as f64),
                    lr: 0.05,
                    ..Default::default()
                })
                .unwrap();
            }
        }
        log
    }

    #[test]
    fn metrics_csv_round_trips() {
        let log = log();
        let back = parse_metrics(&log.to_csv()).unwrap();
        assert_eq!(back, log.records());
    }

    #[test]
    fn series_filter_by_split_and_skip_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, log().to_csv()).unwrap();
        let s = read_series(&p, &["top1".into(), "prompt_top1".into()], "test").unwrap();
        assert_eq!(s[0].points, vec![(1.0, 0.25), (2.0, 0.5)]);
        assert!(s[1].points.is_empty());
        assert!(read_series(&p, &["nope".into()], "test").is_err());
    }

    #[test]
    fn similarity_aligns_epochs() {
        let r = log();
        let t = similarity_table(r.records(), r.records(), Split::Test);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().ends_with(",0,"));
    }
}
