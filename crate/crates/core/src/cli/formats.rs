//! On-disk formats: binary PPM images, PBM masks, raw f32 maps with a
//! 16-byte header, and camera JSON files.
//!
//! All formats round-trip byte-identically: write → read → write reproduces
//! the original file.

use crate::geometry::CameraEncoding;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Magic prefix of the raw f32 map format.
pub const F32_MAP_MAGIC: &[u8; 4] = b"IVGF";

/// Binary P6 PPM, 8-bit, values from [0,1] rounded to 0..255.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<(), FormatError> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads binary P6 PPM back to [0,1] floats.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>), FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    // header: magic, width, height, maxval, single whitespace, then raster
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad(path, "non-utf8 header"))?.to_string());
    }
    if fields.len() < 4 || fields[0] != "P6" {
        return Err(bad(path, "not a P6 ppm"));
    }
    pos += 1; // single whitespace after maxval
    let width: usize = fields[1].parse().map_err(|_| bad(path, "bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad(path, "bad height"))?;
    let maxval: f64 = fields[3].parse().map_err(|_| bad(path, "bad maxval"))?;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad(path, format!("raster truncated: need {need} bytes")));
    }
    let rgb = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval)
        .collect();
    Ok((width, height, rgb))
}

/// Raw little-endian f32 map: 16-byte header (magic, width, height, channels)
/// followed by `width*height*channels` f32 values, row-major.
pub fn write_f32_map(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f64],
) -> Result<(), FormatError> {
    assert_eq!(data.len(), width * height * channels);
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(F32_MAP_MAGIC);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub struct F32Map {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn read_f32_map(path: &Path) -> Result<F32Map, FormatError> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[0..4] != F32_MAP_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| io_err(path, e))?;
    let need = width * height * channels * 4;
    if raw.len() != need {
        return Err(bad(
            path,
            format!("payload {} bytes, expected {need}", raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(F32Map {
        width,
        height,
        channels,
        data,
    })
}

/// Binary P4 PBM. Convention: 1 = masked-in (foreground).
pub fn write_pbm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), FormatError> {
    assert_eq!(mask.len(), width * height);
    let mut buf = format!("P4\n{width} {height}\n").into_bytes();
    let row_bytes = width.div_ceil(8);
    for y in 0..height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..width {
            if mask[y * width + x] {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        buf.extend_from_slice(&row);
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_pbm(path: &Path) -> Result<(usize, usize, Vec<bool>), FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]);
    let mut it = text.split_ascii_whitespace();
    if it.next() != Some("P4") {
        return Err(bad(path, "not a P4 pbm"));
    }
    let width: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(path, "bad width"))?;
    let height: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(path, "bad height"))?;
    // find the raster: after the third whitespace-terminated field
    let mut pos = 0;
    let mut fields = 0;
    while fields < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields += 1;
    }
    pos += 1;
    let row_bytes = width.div_ceil(8);
    if bytes.len() < pos + row_bytes * height {
        return Err(bad(path, "raster truncated"));
    }
    let mut mask = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let b = bytes[pos + y * row_bytes + x / 8];
            mask[y * width + x] = b & (0x80 >> (x % 8)) != 0;
        }
    }
    Ok((width, height, mask))
}

/// Camera file: the 9-dim encoding plus the image resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraFile {
    pub g: [f64; 9],
    pub width: u32,
    pub height: u32,
}

impl CameraFile {
    pub fn encoding(&self) -> CameraEncoding {
        CameraEncoding(self.g)
    }
}

pub fn write_camera_json(path: &Path, cam: &CameraFile) -> Result<(), FormatError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let text = serde_json::to_string_pretty(cam).expect("camera serializes");
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(b"\n").map_err(|e| io_err(path, e))
}

pub fn read_camera_json(path: &Path) -> Result<CameraFile, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| bad(path, e.to_string()))
}
