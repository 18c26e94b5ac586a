//! CSV and PGM (P5, 8-bit) readers/writers shared by the export paths.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Render a matrix as CSV: one header line `rows,cols`, then the values
/// row-major, one matrix row per line. Floats use Rust's shortest
/// round-trippable formatting, so equal inputs give byte-equal output.
pub fn matrix_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    assert_eq!(rows * cols, data.len());
    let mut out = String::new();
    out.push_str(&format!("{rows},{cols}\n"));
    for row in data.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Rows of unescaped cells joined under a header line.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Min-max normalize into u8; a constant map becomes all zeros.
pub fn normalize_to_u8(data: &[f64]) -> Vec<u8> {
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0; data.len()];
    }
    let span = max - min;
    data.iter().map(|v| (((v - min) / span) * 255.0).round() as u8).collect()
}

/// Encode 8-bit grayscale pixels as binary PGM (P5).
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(width * height, pixels.len());
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, pixels))?;
    Ok(())
}

/// Parse a binary PGM (P5) file into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|msg| Error::Validation(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        // Skip whitespace and `#` comments between tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(bytes)? != "P5" {
        return Err("not a P5 PGM".into());
    }
    let width: usize = token(bytes)?.parse().map_err(|_| "bad width")?;
    let height: usize = token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    pos += 1; // single whitespace byte after maxval
    let expected = width * height;
    if bytes.len() < pos + expected {
        return Err("truncated pixel data".into());
    }
    Ok((width, height, bytes[pos..pos + expected].to_vec()))
}
