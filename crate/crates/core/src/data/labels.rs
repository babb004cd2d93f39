use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Result, SeldError};
use crate::metrics::{Event, EventList};
use crate::model::N_TRACKS;

pub const LABEL_HEADER: &str = "frame_100ms,class,track,azimuth_deg,elevation_deg,distance_m";

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> SeldError {
    SeldError::Parse {
        path: path.display().to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

/// Writes frame-wise labels, one row per event; the track column is the
/// event's position within its frame.
pub fn write_labels(path: impl AsRef<Path>, list: &EventList) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::error::invalid(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| crate::error::invalid(format!("{}: {e}", path.display()));
    w.write_record(LABEL_HEADER.split(',')).map_err(io)?;
    for (k, frame) in list.iter().enumerate() {
        for (track, e) in frame.iter().enumerate() {
            w.write_record([
                k.to_string(),
                e.class.to_string(),
                track.to_string(),
                format!("{:.4}", e.azimuth),
                format!("{:.4}", e.elevation),
                format!("{:.4}", e.distance),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))
}

/// Reads frame-wise labels. The list spans frames `0..=max frame`; events
/// within a frame are ordered by their track column.
pub fn read_labels(path: impl AsRef<Path>) -> Result<EventList> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| crate::error::invalid(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<(usize, usize, Event)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.get(0) == Some("frame_100ms") {
            continue;
        }
        if rec.len() != 6 {
            return Err(parse_err(path, line, format!("expected 6 fields, found {}", rec.len())));
        }
        let int = |i: usize, name: &str| -> Result<usize> {
            rec[i].parse().map_err(|_| parse_err(path, line, format!("{name} {:?} is not a non-negative integer", &rec[i])))
        };
        let real = |i: usize, name: &str| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("{name} {:?} is not a number", &rec[i])))
        };
        let (frame, class, track) = (int(0, "frame")?, int(1, "class")?, int(2, "track")?);
        let (az, el, dist) = (real(3, "azimuth")?, real(4, "elevation")?, real(5, "distance")?);
        if track >= N_TRACKS {
            return Err(parse_err(path, line, format!("track {track} out of range 0..{N_TRACKS}")));
        }
        if !(-180.0..180.0).contains(&az) || !(-90.0..=90.0).contains(&el) {
            return Err(parse_err(path, line, format!("angles out of range: azimuth {az}, elevation {el}")));
        }
        if dist <= 0.0 {
            return Err(parse_err(path, line, format!("distance must be positive, got {dist}")));
        }
        rows.push((frame, track, Event::new(class, az, el, dist)));
    }
    let frames = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    rows.sort_by_key(|r| (r.0, r.1));
    let mut list = vec![Vec::new(); frames];
    for (frame, _, e) in rows {
        list[frame].push(e);
    }
    Ok(list)
}

/// One clip/label pair of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip: PathBuf,
    pub labels: PathBuf,
}

/// Reads a manifest: one `clip_path label_path` pair per line, `#` comments
/// and blank lines ignored, relative paths resolved against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(path, i as u64 + 1, "expected `clip_path label_path`"));
        }
        out.push(ManifestEntry {
            clip: base.join(parts[0]),
            labels: base.join(parts[1]),
        });
    }
    Ok(out)
}

/// Writes a manifest with paths relative to its directory where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut f = fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    for e in entries {
        writeln!(f, "{} {}", rel(&e.clip), rel(&e.labels)).map_err(io_err(format!("writing {}", path.display())))?;
    }
    Ok(())
}
