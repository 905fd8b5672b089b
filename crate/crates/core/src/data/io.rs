use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// One sample per row under an `x0,x1,...` header. When `header` is given it
/// is written as JSON next to the CSV with the extension replaced by `json`.
pub fn write_csv<H: Serialize>(path: &Path, data: &Array, header: Option<&H>) -> Result<()> {
    if !data.is_matrix() {
        return Err(Error::invalid("only [N, D] arrays can be written as CSV"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..data.cols()).map(|j| format!("x{j}")))?;
    for row in data.iter_rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    if let Some(h) = header {
        let mut f = File::create(path.with_extension("json"))?;
        serde_json::to_writer_pretty(&mut f, h)?;
        writeln!(f)?;
    }
    Ok(())
}

/// Inverse of [`write_csv`]; the first line is taken as a header.
pub fn read_csv(path: &Path) -> Result<Array> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::invalid(format!(
                "{}: row {rows} has {} fields, expected {cols}",
                path.display(),
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::invalid(format!("{}: cannot parse `{field}` as a number", path.display()))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Array::new(vec![rows, cols], data)
}

/// Greyscale binary PGM; values are clamped to `[0, 1]` and scaled to 255.
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!(
            "{} pixels do not form a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
