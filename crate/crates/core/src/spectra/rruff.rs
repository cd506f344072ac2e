//! RRUFF-style text spectra: `##KEY=VALUE` header lines, `wavenumber, intensity`
//! data lines, optional `##END=` terminator.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::RawSpectrum;
use crate::error::{Error, Result};

pub fn parse_rruff(text: &str) -> Result<RawSpectrum> {
    let mut metadata = BTreeMap::new();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix("##") {
            let (key, value) = header.split_once('=').unwrap_or((header, ""));
            let key = key.trim();
            if key.eq_ignore_ascii_case("END") {
                break;
            }
            metadata.insert(key.to_string(), value.trim().to_string());
            continue;
        }
        let point = parse_point(line).ok_or(Error::MalformedLine(line_no))?;
        if let Some(&(prev, _)) = points.last() {
            if point.0 <= prev {
                return Err(Error::NonMonotonicGrid(line_no));
            }
        }
        points.push(point);
    }
    RawSpectrum::new(points, metadata)
}

fn parse_point(line: &str) -> Option<(f64, f64)> {
    let (w, i) = line.split_once(',')?;
    let w: f64 = w.trim().parse().ok()?;
    let i: f64 = i.trim().parse().ok()?;
    (w.is_finite() && i.is_finite()).then_some((w, i))
}

/// Writes `raw` in the same grammar `parse_rruff` reads. Floats use the
/// shortest representation that parses back to the identical value.
pub fn serialize_rruff(raw: &RawSpectrum) -> String {
    let mut out = String::new();
    for (k, v) in &raw.metadata {
        let _ = writeln!(out, "##{k}={v}");
    }
    for (w, i) in &raw.points {
        let _ = writeln!(out, "{w:?}, {i:?}");
    }
    out.push_str("##END=\n");
    out
}
