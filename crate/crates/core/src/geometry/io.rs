//! Pointcloud files: ASCII `x y z` lines or packed little-endian `f32` triples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CartesianPoint, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ascii,
    Binary,
}

impl CloudFormat {
    /// `.bin` selects the binary layout; anything else is read as text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("bin") => CloudFormat::Binary,
            _ => CloudFormat::Ascii,
        }
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let file = File::open(path)?;
    match CloudFormat::from_path(path) {
        CloudFormat::Ascii => read_ascii(BufReader::new(file)),
        CloudFormat::Binary => read_binary(BufReader::new(file)),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match CloudFormat::from_path(path) {
        CloudFormat::Ascii => {
            for p in &cloud.points {
                writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
        CloudFormat::Binary => {
            for p in &cloud.points {
                for v in [p.x, p.y, p.z] {
                    out.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_ascii<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if values.len() < 3 {
            return Err(Error::Format(format!(
                "line {}: expected 3 coordinates, found {}",
                lineno + 1,
                values.len()
            )));
        }
        let p = CartesianPoint::new(values[0], values[1], values[2]);
        if !p.is_finite() {
            return Err(Error::Format(format!("line {}: non-finite point", lineno + 1)));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

fn read_binary<R: Read>(mut reader: R) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Length {
            expected: bytes.len() / 12 * 12 + 12,
            actual: bytes.len(),
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let points = bytes
        .chunks_exact(12)
        .map(|c| CartesianPoint::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12])))
        .collect::<Vec<_>>();
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("non-finite point in binary cloud".into()));
    }
    Ok(PointCloud::new(points))
}
