//! `.xyz` text and `P2PC` binary point-cloud files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::points::{Point, PointCloud};

pub const BINARY_MAGIC: &[u8; 4] = b"P2PC";
pub const BINARY_VERSION: u32 = 1;
const FLAG_NORMALS: u8 = 1;
const FLAG_PARTS: u8 = 2;

fn is_text_path(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("xyz" | "txt" | "pts"))
}

/// Loads a cloud; `.xyz`/`.txt`/`.pts` are parsed as text, anything else
/// must carry the binary magic.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return decode_binary(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        });
    }
    if is_text_path(path) {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Format(format!("{}: not valid UTF-8", path.display())))?;
        return parse_xyz(text, path);
    }
    Err(Error::Format(format!("{}: unknown magic bytes {:?}", path.display(), &bytes[..bytes.len().min(4)])))
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes = if is_text_path(path) { format_xyz(cloud).into_bytes() } else { encode_binary(cloud)? };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses whitespace-separated `x y z [nx ny nz]` lines; `#` starts a comment.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut coords = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut vals = Vec::with_capacity(6);
        for (col, tok) in body.split_whitespace().enumerate() {
            let v: f64 = tok.parse().map_err(|_| err(line, format!("column {}: cannot parse {tok:?} as a number", col + 1)))?;
            if !v.is_finite() {
                return Err(err(line, format!("column {}: non-finite value {tok}", col + 1)));
            }
            vals.push(v);
        }
        if vals.len() != 3 && vals.len() != 6 {
            return Err(err(line, format!("expected 3 or 6 values, found {}", vals.len())));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => return Err(err(line, format!("expected {w} values like the first point, found {}", vals.len()))),
            _ => {}
        }
        coords.push([vals[0], vals[1], vals[2]]);
        if vals.len() == 6 {
            normals.push([vals[3], vals[4], vals[5]]);
        }
    }
    if coords.is_empty() {
        return Err(err(0, "no points".into()));
    }
    let normals = (!normals.is_empty()).then_some(normals);
    PointCloud::with_attributes(coords, normals, None)
}

/// Nine significant digits per value.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.coords().iter().enumerate() {
        let _ = write!(out, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
        if let Some(n) = cloud.normals() {
            let _ = write!(out, " {:.8e} {:.8e} {:.8e}", n[i][0], n[i][1], n[i][2]);
        }
        out.push('\n');
    }
    out
}

/// Binary layout: magic, u32 version, u32 N, u8 flags, N f32 triplets,
/// optional normal triplets, optional N u16 part labels (little endian).
/// Coordinates are stored in single precision.
pub fn encode_binary(cloud: &PointCloud) -> Result<Vec<u8>> {
    let n = cloud.len();
    let mut flags = 0u8;
    if cloud.normals().is_some() {
        flags |= FLAG_NORMALS;
    }
    if let Some(parts) = cloud.part_labels() {
        if let Some(bad) = parts.iter().find(|&&p| p > u16::MAX as usize) {
            return Err(Error::InvalidArgument(format!("part label {bad} does not fit in 16 bits")));
        }
        flags |= FLAG_PARTS;
    }
    let n32 = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} points exceed the binary format limit")))?;
    let mut out = Vec::with_capacity(13 + n * 26);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.push(flags);
    let mut put = |pts: &[Point]| {
        for p in pts {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    };
    put(cloud.coords());
    if let Some(ns) = cloud.normals() {
        put(ns);
    }
    if let Some(parts) = cloud.part_labels() {
        for &p in parts {
            out.extend_from_slice(&(p as u16).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn points(&mut self, n: usize, what: &str) -> Result<Vec<Point>> {
        let raw = self.take(n * 12, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(12).enumerate() {
            let v = |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().expect("4 bytes")) as f64;
            let p = [v(0), v(1), v(2)];
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("non-finite {what} value at point {i}")));
            }
            out.push(p);
        }
        Ok(out)
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != BINARY_MAGIC {
        return Err(Error::Format("unknown magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported binary version {version}")));
    }
    let n = r.u32("point count")? as usize;
    let flags = r.take(1, "flags")?[0];
    if flags & !(FLAG_NORMALS | FLAG_PARTS) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    let coords = r.points(n, "coordinate")?;
    let normals = if flags & FLAG_NORMALS != 0 { Some(r.points(n, "normal")?) } else { None };
    let parts = if flags & FLAG_PARTS != 0 {
        let raw = r.take(n * 2, "part labels")?;
        Some(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect())
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    PointCloud::with_attributes(coords, normals, parts)
}

/// One non-negative integer per line; `#` comments allowed.
pub fn load_part_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v = body.parse().map_err(|_| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("cannot parse {body:?} as a part label") })?;
        out.push(v);
    }
    Ok(out)
}

pub fn save_part_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
