//! RGB float images and their PFM / PPM encodings.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, interleaved RGB image with `f64` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Bilinear sample at continuous pixel coordinates (`u` = column, `v` = row),
    /// clamped to the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let (a, b, c, d) = (self.pixel(r0, c0), self.pixel(r0, c1), self.pixel(r1, c0), self.pixel(r1, c1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (a[k] * (1.0 - fu) + b[k] * fu) * (1.0 - fv) + (c[k] * (1.0 - fu) + d[k] * fu) * fv;
        }
        out
    }

    /// Little-endian colour PFM. Values are stored as `f32`.
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        buf.reserve(self.data.len() * 4);
        // PFM scanlines run bottom to top.
        for row in (0..self.height).rev() {
            let start = row * self.width * 3;
            for v in &self.data[start..start + self.width * 3] {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, offset) = split_header(&bytes, 3).ok_or_else(|| Error::format(path, "truncated PFM header"))?;
        if header[0] != "PF" {
            return Err(Error::format(path, "only colour PFM (PF) is supported"));
        }
        let dims: Vec<usize> = header[1].split_whitespace().filter_map(|t| t.parse().ok()).collect();
        let [width, height] = dims[..] else {
            return Err(Error::format(path, "bad PFM dimensions"));
        };
        let scale: f64 = header[2].trim().parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
        let little = scale < 0.0;
        let body = &bytes[offset..];
        if body.len() != width * height * 12 {
            return Err(Error::format(path, "PFM payload size does not match its header"));
        }
        let mut data = vec![0.0; width * height * 3];
        for (k, chunk) in body.chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let file_row = k / (width * 3);
            let rest = k % (width * 3);
            data[(height - 1 - file_row) * width * 3 + rest] = v as f64;
        }
        Ok(Image { width, height, data })
    }

    /// 8-bit binary PPM for viewing; channels are clamped to `[0, 1]`.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// Splits `count` newline-terminated header lines off a binary file.
fn split_header(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut lines = Vec::with_capacity(count);
    let mut pos = 0;
    while lines.len() < count {
        let end = pos + bytes[pos..].iter().position(|b| *b == b'\n')?;
        lines.push(String::from_utf8_lossy(&bytes[pos..end]).into_owned());
        pos = end + 1;
    }
    Some((lines, pos))
}
