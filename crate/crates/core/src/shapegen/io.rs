//! Point cloud files.
//!
//! - XYZ: one `x y z` line per point, written with 17 significant digits so a
//!   read after write is exact. Blank lines and `#` comments are skipped.
//! - PLY: `binary_little_endian 1.0` with a single `vertex` element of `float`
//!   `x`, `y`, `z` properties.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// Format implied by the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::Ply),
            _ => Err(Error::Config(format!("cannot infer cloud format from {}", path.display()))),
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            _ => Err(Error::Config(format!("unknown cloud format `{s}`"))),
        }
    }
}

pub fn encode_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        s.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn decode_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("line {}", lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(loc, format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse().map_err(|_| Error::parse(&loc, format!("invalid number `{f}`")))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::parse("end of input", "no points"));
    }
    PointCloud::new(points)
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * 12);
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<String> {
        let rest = &bytes[*offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(format!("byte {}", *offset), "truncated header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(format!("byte {}", *offset), "header is not UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        *offset += end + 1;
        Ok(line)
    };
    let at = |o: usize| format!("byte {o}");

    if next_line(&mut offset)? != "ply" {
        return Err(Error::parse(at(0), "missing `ply` magic"));
    }
    let mut vertices: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut format_ok = false;
    let mut in_vertex = false;
    loop {
        let start = offset;
        let line = next_line(&mut offset)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(Error::parse(at(start), format!("unsupported format `{other}`"))),
            ["element", "vertex", n] => {
                let n = n.parse().map_err(|_| Error::parse(at(start), format!("bad vertex count `{n}`")))?;
                vertices = Some(n);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(Error::parse(at(start), format!("unsupported element `{name}`")));
            }
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32") {
                    return Err(Error::parse(at(start), format!("property {name} must be float, got {ty}")));
                }
                props.push(name.to_string());
            }
            _ => return Err(Error::parse(at(start), format!("unexpected header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(Error::parse(at(offset), "missing binary_little_endian format line"));
    }
    if props != ["x", "y", "z"] {
        return Err(Error::parse(at(offset), format!("expected properties x y z, got {props:?}")));
    }
    let n = vertices.ok_or_else(|| Error::parse(at(offset), "missing vertex element"))?;
    let need = n * 12;
    let body = &bytes[offset..];
    if body.len() < need {
        return Err(Error::parse(at(offset + body.len()), format!("payload truncated: need {need} bytes")));
    }
    let mut points: Vec<Point> = Vec::with_capacity(n);
    for chunk in body[..need].chunks_exact(12) {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(1), f(2)]);
    }
    PointCloud::new(points)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Xyz => encode_xyz(cloud).into_bytes(),
        CloudFormat::Ply => encode_ply(cloud),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(format!("byte {}", e.valid_up_to()), "not UTF-8"))?;
            decode_xyz(text)
        }
        CloudFormat::Ply => decode_ply(&bytes),
    }
}
