//! CSV writers for plot-ready grids and tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// Writes a row-major `rows × cols` grid as CSV.
pub fn write_grid(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    std::fs::write(path, grid_csv(values, rows, cols))?;
    Ok(())
}

pub fn grid_csv(values: &[f64], rows: usize, cols: usize) -> String {
    assert_eq!(values.len(), rows * cols, "grid size");
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Writes a header row followed by data rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Parses a CSV grid written by [`write_grid`].
pub fn read_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| crate::Error::Format(format!("bad grid value `{v}`: {e}")))
                })
                .collect()
        })
        .collect()
}
