//! ASCII PLY point files and TUM trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::{Pose, Quat};

/// Pixel a point was back-projected from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelKey {
    pub frame: usize,
    pub row: u32,
    pub col: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyPoints {
    pub points: Vec<Vector3<f64>>,
    pub confidences: Option<Vec<f64>>,
    pub keys: Option<Vec<PixelKey>>,
}

pub fn write_ply(path: &Path, data: &PlyPoints) -> Result<()> {
    let n = data.points.len();
    if data.confidences.as_ref().is_some_and(|c| c.len() != n) || data.keys.as_ref().is_some_and(|k| k.len() != n) {
        return Err(Error::DimensionMismatch("PLY attribute lengths differ".into()));
    }
    let mut s = String::with_capacity(64 * n + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {n}");
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if data.confidences.is_some() {
        s.push_str("property double confidence\n");
    }
    if data.keys.is_some() {
        s.push_str("property int frame_id\nproperty int px_row\nproperty int px_col\n");
    }
    s.push_str("end_header\n");
    for i in 0..n {
        let p = &data.points[i];
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(c) = &data.confidences {
            let _ = write!(s, " {}", c[i]);
        }
        if let Some(k) = &data.keys {
            let _ = write!(s, " {} {} {}", k[i].frame, k[i].row, k[i].col);
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PlyPoints> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or_else(|| bad("missing end_header"))?.trim();
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => return Err(bad("only ASCII PLY is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err(bad("list properties are not supported")),
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("x, y and z properties are required")),
    };
    let ic = col("confidence");
    let ik = match (col("frame_id"), col("px_row"), col("px_col")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut out = PlyPoints {
        points: Vec::with_capacity(count),
        confidences: ic.map(|_| Vec::with_capacity(count)),
        keys: ik.map(|_| Vec::with_capacity(count)),
    };
    let mut vals: Vec<&str> = Vec::with_capacity(props.len());
    for i in 0..count {
        let line = lines.next().ok_or_else(|| bad(&format!("expected {count} vertices, found {i}")))?;
        vals.clear();
        vals.extend(line.split_whitespace());
        if vals.len() != props.len() {
            return Err(bad(&format!("vertex {i}: expected {} values", props.len())));
        }
        let f = |j: usize| vals[j].parse::<f64>().map_err(|_| bad(&format!("vertex {i}: bad number `{}`", vals[j])));
        let u = |j: usize| vals[j].parse::<u64>().map_err(|_| bad(&format!("vertex {i}: bad integer `{}`", vals[j])));
        out.points.push(Vector3::new(f(ix)?, f(iy)?, f(iz)?));
        if let (Some(c), Some(v)) = (ic, out.confidences.as_mut()) {
            v.push(f(c)?);
        }
        if let (Some((a, b, c)), Some(v)) = (ik, out.keys.as_mut()) {
            v.push(PixelKey {
                frame: u(a)? as usize,
                row: u(b)? as u32,
                col: u(c)? as u32,
            });
        }
    }
    Ok(out)
}

/// Writes `frame_id tx ty tz qx qy qz qw`, where the line holds the
/// world-from-camera transform (camera center and orientation).
pub fn write_tum(path: &Path, poses: &[(usize, Pose)]) -> Result<()> {
    let mut s = String::from("# frame_id tx ty tz qx qy qz qw\n");
    for (id, pose) in poses {
        let c = pose.center();
        let o = pose.orientation();
        let _ = writeln!(s, "{id} {} {} {} {} {} {} {}", c.x, c.y, c.z, o.x, o.y, o.z, o.w);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a TUM file written by [`write_tum`] back into camera-from-world poses.
pub fn read_tum(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 8 {
            return Err(Error::format(path, format!("line {}: expected 8 fields", n + 1)));
        }
        let id = tok[0].parse::<usize>().map_err(|_| Error::format(path, format!("line {}: bad frame id", n + 1)))?;
        let mut v = [0.0; 7];
        for (k, t) in tok[1..].iter().enumerate() {
            v[k] = t.parse().map_err(|_| Error::format(path, format!("line {}: bad number `{t}`", n + 1)))?;
        }
        let orientation = Quat::try_new(v[6], v[3], v[4], v[5]).map_err(|_| Error::format(path, format!("line {}: zero quaternion", n + 1)))?;
        out.push((id, Pose::from_center(&orientation, &Vector3::new(v[0], v[1], v[2]))));
    }
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
