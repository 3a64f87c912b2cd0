//! Point and loss-history CSV files. Numbers use Rust's shortest
//! round-trip formatting, which is locale independent.

use std::fmt::Write as _;
use std::path::Path;

use vdm_core::data::{Dataset, DatasetSpec};
use vdm_core::train::{TrainRecord, VaeRecord};

use crate::error::{self, LabError, Result};

fn header(dim: usize, labels: bool) -> String {
    let mut cols: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    if labels {
        cols.push("label".into());
    }
    cols.join(",")
}

/// `x1,x2[,label]` rows.
pub fn points_to_csv(points: &[Vec<f64>], labels: Option<&[usize]>) -> String {
    let dim = points.first().map_or(2, Vec::len);
    let mut out = header(dim, labels.is_some());
    out.push('\n');
    for (i, p) in points.iter().enumerate() {
        let mut first = true;
        for v in p {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v}").expect("string write");
        }
        if let Some(l) = labels {
            write!(out, ",{}", l[i]).expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn write_points(path: &Path, points: &[Vec<f64>], labels: Option<&[usize]>) -> Result<()> {
    error::write(path, points_to_csv(points, labels))
}

/// Parses a point file; a trailing `label` column becomes class labels.
pub fn parse_points(path: &Path, text: &str) -> Result<Dataset> {
    let err = |line: usize, msg: String| LabError::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = head.split(',').map(str::trim).collect();
    let has_labels = cols.last() == Some(&"label");
    let dim = cols.len() - usize::from(has_labels);
    if dim == 0 {
        return Err(err(1, "no coordinate columns".into()));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(err(i + 1, format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let p = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| err(i + 1, format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        points.push(p);
        if has_labels {
            labels.push(fields[dim].parse::<usize>().map_err(|e| err(i + 1, format!("label: {e}")))?);
        }
    }
    let spec = DatasetSpec::File {
        path: path.display().to_string(),
    };
    Ok(Dataset::new(points, has_labels.then_some(labels), spec)?)
}

pub fn read_points(path: &Path) -> Result<Dataset> {
    parse_points(path, &error::read_to_string(path)?)
}

pub fn loss_history_csv(history: &[TrainRecord]) -> String {
    let mut out = String::from("step,loss,t_mean\n");
    for r in history {
        writeln!(out, "{},{},{}", r.step, r.loss, r.t_mean).expect("string write");
    }
    out
}

pub fn vae_history_csv(history: &[VaeRecord]) -> String {
    let mut out = String::from("step,loss,reconstruction,kl,mse\n");
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.step, r.loss, r.reconstruction, r.kl, r.mse).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_labels() {
        let pts = vec![vec![0.1, -2.5], vec![1e-300, 3.0]];
        let text = points_to_csv(&pts, Some(&[0, 2]));
        assert!(text.starts_with("x1,x2,label\n"));
        let d = parse_points(Path::new("mem.csv"), &text).unwrap();
        assert_eq!(d.points, pts);
        assert_eq!(d.labels, Some(vec![0, 2]));
    }

    #[test]
    fn malformed_rows_are_parse_errors() {
        let bad = "x1,x2\n1.0\n";
        assert!(matches!(parse_points(Path::new("m"), bad), Err(LabError::Parse { .. })));
        assert!(matches!(parse_points(Path::new("m"), "x1,x2\n1,zz\n"), Err(LabError::Parse { .. })));
        assert!(parse_points(Path::new("m"), "").is_err());
    }
}
