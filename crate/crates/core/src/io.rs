//! File formats: datasets and events as CSV, models and metrics as JSON.
//!
//! Dataset CSV has a header `f1,...,fD,label` optionally followed by
//! `start_s,dur_s`. Events are `start_s,end_s` rows.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dataeval::{Interval, LabeledDataset, Segment};
use crate::error::{Result, TkmError};
use crate::solver::TkmModel;

fn parse_f64(field: &str, line: u64, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        TkmError::Parse(format!(
            "line {line}, column {column}: not a number: {field:?}"
        ))
    })
}

/// Reads a dataset from any CSV source.
pub fn read_dataset<R: Read>(reader: R) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| TkmError::Parse("dataset header has no `label` column".into()))?;
    for (i, h) in header[..label_col].iter().enumerate() {
        if *h != format!("f{}", i + 1) {
            return Err(TkmError::Parse(format!(
                "expected column f{} before label, found {h:?}",
                i + 1
            )));
        }
    }
    if label_col == 0 {
        return Err(TkmError::Parse("dataset has no feature columns".into()));
    }
    let timed = match &header[label_col + 1..] {
        [] => false,
        [a, b] if a == "start_s" && b == "dur_s" => true,
        rest => {
            return Err(TkmError::Parse(format!(
                "unexpected columns after label: {rest:?} (allowed: start_s,dur_s)"
            )))
        }
    };
    let d = label_col;
    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut timing = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        for i in 0..d {
            values.push(parse_f64(&rec[i], line, &header[i])?);
        }
        y.push(parse_f64(&rec[d], line, "label")?);
        if timed {
            timing.push(Segment {
                start_s: parse_f64(&rec[d + 1], line, "start_s")?,
                dur_s: parse_f64(&rec[d + 2], line, "dur_s")?,
            });
        }
    }
    let x = DMatrix::from_row_slice(y.len(), d, &values);
    LabeledDataset::new(x, y, timed.then_some(timing))
}

pub fn read_dataset_file(path: &Path) -> Result<LabeledDataset> {
    read_dataset(File::open(path)?)
}

pub fn write_dataset<W: Write>(writer: W, ds: &LabeledDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=ds.n_features()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    if ds.timing.is_some() {
        header.push("start_s".into());
        header.push("dur_s".into());
    }
    wtr.write_record(&header)?;
    for n in 0..ds.len() {
        let mut row: Vec<String> = ds.x.row(n).iter().map(|v| v.to_string()).collect();
        row.push(format!("{}", ds.y[n] as i64));
        if let Some(t) = &ds.timing {
            row.push(t[n].start_s.to_string());
            row.push(t[n].dur_s.to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, ds: &LabeledDataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), ds)
}

pub fn read_events<R: Read>(reader: R) -> Result<Vec<Interval>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != ["start_s", "end_s"] {
        return Err(TkmError::Parse(format!(
            "events header must be start_s,end_s, got {header:?}"
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let start = parse_f64(&rec[0], line, "start_s")?;
        let end = parse_f64(&rec[1], line, "end_s")?;
        if !(start.is_finite() && end.is_finite() && start <= end) {
            return Err(TkmError::Parse(format!(
                "line {line}: invalid interval [{start}, {end}]"
            )));
        }
        out.push(Interval::new(start, end));
    }
    Ok(out)
}

pub fn read_events_file(path: &Path) -> Result<Vec<Interval>> {
    read_events(File::open(path)?)
}

pub fn write_events<W: Write>(writer: W, events: &[Interval]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["start_s", "end_s"])?;
    for e in events {
        wtr.write_record([e.start_s.to_string(), e.end_s.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_events_file(path: &Path, events: &[Interval]) -> Result<()> {
    write_events(BufWriter::new(File::create(path)?), events)
}

/// `iteration,loss`, iteration 0 being the initial weights.
pub fn write_trace<W: Write>(writer: W, losses: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        wtr.write_record([i.to_string(), l.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trace_file(path: &Path, losses: &[f64]) -> Result<()> {
    write_trace(BufWriter::new(File::create(path)?), losses)
}

/// `score,label` per sample.
pub fn write_scores<W: Write>(writer: W, scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(TkmError::arg("scores and labels differ in length"));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["score", "label"])?;
    for (s, l) in scores.iter().zip(labels) {
        wtr.write_record([s.to_string(), format!("{}", *l as i64)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_scores_file(path: &Path, scores: &[f64], labels: &[f64]) -> Result<()> {
    write_scores(BufWriter::new(File::create(path)?), scores, labels)
}

/// Reads a `score[,label]` file. Returns the scores and, if present, the
/// predicted labels.
pub fn read_scores<R: Read>(reader: R) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let with_labels = match header.as_slice() {
        [s] if s == "score" => false,
        [s, l] if s == "score" && l == "label" => true,
        _ => {
            return Err(TkmError::Parse(format!(
                "scores header must be score[,label], got {header:?}"
            )))
        }
    };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        scores.push(parse_f64(&rec[0], line, "score")?);
        if with_labels {
            labels.push(parse_f64(&rec[1], line, "label")?);
        }
    }
    Ok((scores, with_labels.then_some(labels)))
}

pub fn read_scores_file(path: &Path) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    read_scores(File::open(path)?)
}

pub fn read_model_file(path: &Path) -> Result<TkmModel> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    TkmModel::from_json(&s)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_text_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_with_timing() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, -0.25, 0.3, 1e-17, -0.7, 0.123456789012345]);
        let t = vec![
            Segment {
                start_s: 0.0,
                dur_s: 2.0,
            },
            Segment {
                start_s: 2.0,
                dur_s: 2.0,
            },
            Segment {
                start_s: 4.0,
                dur_s: 2.0,
            },
        ];
        let ds = LabeledDataset::new(x, vec![1.0, -1.0, 1.0], Some(t)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f1,f2,label,start_s,dur_s\n"));
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(read_dataset("f1,f2\n0.1,0.2\n".as_bytes()).is_err());
        assert!(read_dataset("f1,label\n0.1,2\n".as_bytes()).is_err());
        assert!(read_dataset("f1,label\nabc,1\n".as_bytes()).is_err());
        assert!(read_dataset("f2,label\n0.1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn events_and_scores() {
        let ev = vec![Interval::new(0.0, 10.0), Interval::new(20.5, 30.0)];
        let mut buf = Vec::new();
        write_events(&mut buf, &ev).unwrap();
        assert_eq!(read_events(buf.as_slice()).unwrap(), ev);
        assert!(read_events("start_s,end_s\n".as_bytes())
            .unwrap()
            .is_empty());

        let mut buf = Vec::new();
        write_scores(&mut buf, &[0.5, -0.25], &[1.0, -1.0]).unwrap();
        let (s, l) = read_scores(buf.as_slice()).unwrap();
        assert_eq!(s, vec![0.5, -0.25]);
        assert_eq!(l, Some(vec![1.0, -1.0]));
        let (s, l) = read_scores("score\n".as_bytes()).unwrap();
        assert!(s.is_empty() && l.is_none());
    }
}
