//! CSV and JSON persistence for samples, metric traces and reports.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};

/// One row per sample: `x0, x1, ..., label`. `labels` may be empty for
/// generated samples, in which case the column is omitted.
pub fn samples_csv(x: ArrayView2<f64>, labels: &[i8]) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = (0..x.ncols()).map(|k| format!("x{k}")).collect();
    if !labels.is_empty() {
        header.push("label".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels.get(i) {
            fields.push(l.to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Read a sample matrix written by [`samples_csv`]; a trailing `label`
/// column is returned separately.
pub fn read_samples_csv(path: &Path) -> Result<(Array2<f64>, Vec<i8>)> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))??;
    let cols: Vec<&str> = header.split(',').collect();
    let has_label = cols.last() == Some(&"label");
    let d = cols.len() - usize::from(has_label);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Config(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        for f in &fields[..d] {
            values.push(f.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2))
            })?);
        }
        if has_label {
            labels.push(fields[d].trim().parse::<i8>().map_err(|e| {
                Error::Config(format!("{}:{}: bad label: {e}", path.display(), lineno + 2))
            })?);
        }
        rows += 1;
    }
    let x = Array2::from_shape_vec((rows, d), values)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((x, labels))
}

/// Header line followed by one line per row.
pub fn table_csv<I: IntoIterator<Item = String>>(header: &str, rows: I) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn samples_round_trip_exactly() {
        let x = array![[0.1, -1.0 / 3.0], [1e-300, 12345.678]];
        let dir = std::env::temp_dir().join(format!("fedmix-io-{}", std::process::id()));
        let path = dir.join("s.csv");
        write_text(&path, &samples_csv(x.view(), &[1, -1])).unwrap();
        let (y, labels) = read_samples_csv(&path).unwrap();
        assert_eq!(x, y);
        assert_eq!(labels, vec![1, -1]);
        write_text(&path, &samples_csv(x.view(), &[])).unwrap();
        let (y, labels) = read_samples_csv(&path).unwrap();
        assert_eq!(x, y);
        assert!(labels.is_empty());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
