//! Mesh export: PLY (binary little-endian and ascii) with positions,
//! normals, and 8-bit colors; OBJ with positions and normals (colors are
//! dropped with a warning). A small PLY reader covers round-trip checks.

use super::Mesh;
use nalgebra::Vector3;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("unknown mesh format '{0}' (expected ply, ply-ascii, or obj)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    PlyBinary,
    PlyAscii,
    Obj,
}

impl MeshFormat {
    pub fn parse(s: &str) -> Result<Self, MeshIoError> {
        match s {
            "ply" | "ply-binary" => Ok(MeshFormat::PlyBinary),
            "ply-ascii" => Ok(MeshFormat::PlyAscii),
            "obj" => Ok(MeshFormat::Obj),
            other => Err(MeshIoError::UnknownFormat(other.to_string())),
        }
    }

    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("obj") => MeshFormat::Obj,
            _ => MeshFormat::PlyBinary,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> MeshIoError {
    MeshIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn color_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn export_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<(), MeshIoError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let nv = mesh.vertices.len();
    let zero3 = Vector3::zeros();
    let white = [1.0; 3];
    let vertex_row = |i: usize| -> (Vector3<f64>, Vector3<f64>, [f64; 3]) {
        (
            mesh.vertices[i],
            *mesh.normals.get(i).unwrap_or(&zero3),
            *mesh.colors.get(i).unwrap_or(&white),
        )
    };
    match format {
        MeshFormat::PlyBinary | MeshFormat::PlyAscii => {
            let fmt = if format == MeshFormat::PlyBinary {
                "binary_little_endian"
            } else {
                "ascii"
            };
            write!(
                f,
                "ply\nformat {fmt} 1.0\nelement vertex {nv}\n\
                 property float x\nproperty float y\nproperty float z\n\
                 property float nx\nproperty float ny\nproperty float nz\n\
                 property uchar red\nproperty uchar green\nproperty uchar blue\n\
                 element face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.triangles.len()
            )
            .map_err(|e| io_err(path, e))?;
            if format == MeshFormat::PlyBinary {
                let mut buf = Vec::with_capacity(nv * 27);
                for i in 0..nv {
                    let (v, n, c) = vertex_row(i);
                    for val in [v.x, v.y, v.z, n.x, n.y, n.z] {
                        buf.extend_from_slice(&(val as f32).to_le_bytes());
                    }
                    buf.extend_from_slice(&[color_u8(c[0]), color_u8(c[1]), color_u8(c[2])]);
                }
                for t in &mesh.triangles {
                    buf.push(3u8);
                    for &idx in t {
                        buf.extend_from_slice(&(idx as i32).to_le_bytes());
                    }
                }
                f.write_all(&buf).map_err(|e| io_err(path, e))?;
            } else {
                for i in 0..nv {
                    let (v, n, c) = vertex_row(i);
                    writeln!(
                        f,
                        "{} {} {} {} {} {} {} {} {}",
                        v.x as f32,
                        v.y as f32,
                        v.z as f32,
                        n.x as f32,
                        n.y as f32,
                        n.z as f32,
                        color_u8(c[0]),
                        color_u8(c[1]),
                        color_u8(c[2])
                    )
                    .map_err(|e| io_err(path, e))?;
                }
                for t in &mesh.triangles {
                    writeln!(f, "3 {} {} {}", t[0], t[1], t[2]).map_err(|e| io_err(path, e))?;
                }
            }
        }
        MeshFormat::Obj => {
            if !mesh.colors.is_empty() {
                eprintln!("warning: obj export drops per-vertex colors");
            }
            for v in &mesh.vertices {
                writeln!(f, "v {} {} {}", v.x, v.y, v.z).map_err(|e| io_err(path, e))?;
            }
            for n in &mesh.normals {
                writeln!(f, "vn {} {} {}", n.x, n.y, n.z).map_err(|e| io_err(path, e))?;
            }
            let has_normals = mesh.normals.len() == nv;
            for t in &mesh.triangles {
                if has_normals {
                    writeln!(
                        f,
                        "f {0}//{0} {1}//{1} {2}//{2}",
                        t[0] + 1,
                        t[1] + 1,
                        t[2] + 1
                    )
                    .map_err(|e| io_err(path, e))?;
                } else {
                    writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)
                        .map_err(|e| io_err(path, e))?;
                }
            }
        }
    }
    Ok(())
}

/// Reads the PLY files this module writes (both encodings) plus plain
/// vertex-only point clouds.
pub fn import_ply(path: &Path) -> Result<Mesh, MeshIoError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |reason: &str| MeshIoError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("missing end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-utf8 header"))?;
    let mut binary = true;
    let mut nv = 0usize;
    let mut nf = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    for line in header.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["element", "vertex", n] => {
                nv = n.parse().map_err(|_| bad("bad vertex count"))?;
                in_vertex = true;
            }
            ["element", "face", n] => {
                nf = n.parse().map_err(|_| bad("bad face count"))?;
                in_vertex = false;
            }
            ["property", kind, name] if in_vertex => {
                vertex_props.push(format!("{kind} {name}"));
            }
            _ => {}
        }
    }
    let has = |name: &str| vertex_props.iter().any(|p| p.ends_with(name));
    let (has_normals, has_colors) = (has(" nx"), has(" red"));

    let mut mesh = Mesh::default();
    if binary {
        let mut pos = header_end;
        let floats = 3 + if has_normals { 3 } else { 0 };
        let colors = if has_colors { 3 } else { 0 };
        for _ in 0..nv {
            if pos + floats * 4 + colors > bytes.len() {
                return Err(bad("vertex data truncated"));
            }
            let mut vals = [0.0f32; 6];
            for (v, chunk) in vals.iter_mut().zip(bytes[pos..].chunks_exact(4)).take(floats) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            pos += floats * 4;
            mesh.vertices
                .push(Vector3::new(vals[0] as f64, vals[1] as f64, vals[2] as f64));
            if has_normals {
                mesh.normals
                    .push(Vector3::new(vals[3] as f64, vals[4] as f64, vals[5] as f64));
            }
            if has_colors {
                mesh.colors.push([
                    bytes[pos] as f64 / 255.0,
                    bytes[pos + 1] as f64 / 255.0,
                    bytes[pos + 2] as f64 / 255.0,
                ]);
                pos += 3;
            }
        }
        for _ in 0..nf {
            if pos + 13 > bytes.len() {
                return Err(bad("face data truncated"));
            }
            if bytes[pos] != 3 {
                return Err(bad("only triangle faces are supported"));
            }
            pos += 1;
            let mut tri = [0u32; 3];
            for t in &mut tri {
                *t = i32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as u32;
                pos += 4;
            }
            mesh.triangles.push(tri);
        }
    } else {
        let body = std::str::from_utf8(&bytes[header_end..]).map_err(|_| bad("non-utf8 body"))?;
        let mut lines = body.lines();
        for _ in 0..nv {
            let line = lines.next().ok_or_else(|| bad("vertex rows truncated"))?;
            // float properties are f32 in both encodings
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f32>().map(f64::from).map_err(|_| bad("bad vertex number")))
                .collect::<Result<_, _>>()?;
            mesh.vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
            let mut k = 3;
            if has_normals {
                mesh.normals.push(Vector3::new(nums[k], nums[k + 1], nums[k + 2]));
                k += 3;
            }
            if has_colors {
                mesh.colors
                    .push([nums[k] / 255.0, nums[k + 1] / 255.0, nums[k + 2] / 255.0]);
            }
        }
        for _ in 0..nf {
            let line = lines.next().ok_or_else(|| bad("face rows truncated"))?;
            let nums: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad face number")))
                .collect::<Result<_, _>>()?;
            if nums.first() != Some(&3) {
                return Err(bad("only triangle faces are supported"));
            }
            mesh.triangles.push([nums[1], nums[2], nums[3]]);
        }
    }
    Ok(mesh)
}
