//! Coarse-to-fine SDF grid evaluation, Marching Cubes extraction, vertex
//! coloring, and mesh export.
//!
//! Grid resolutions count cells per axis (vertices are resolution+1), so a
//! coarse grid nests exactly inside any fine grid it divides.

mod tables;

pub mod mesh_io;

use crate::field::{SceneModel, SdfField};
use crate::geometry::{unproject_depth_to_pointmap, Aabb};
use nalgebra::Vector3;
use std::collections::HashMap;
use tables::{triangle_table, CORNER_OFFSETS, EDGE_CORNERS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("no valid depths to estimate bounds from")]
    NoValidDepths,
    #[error("grid resolution must be at least 2 cells, got {0}")]
    ResolutionTooSmall(usize),
    #[error("coarse resolution {0} must divide fine resolution {1}")]
    NotDivisible(usize, usize),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// Valid-cell mask at the coarse resolution.
#[derive(Debug, Clone)]
pub struct CoarseMask {
    pub bounds: Aabb,
    pub cells: usize,
    /// Row-major over (z, y, x), cells³ entries.
    pub valid: Vec<bool>,
}

impl CoarseMask {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn cell(&self, x: usize, y: usize, z: usize) -> bool {
        self.valid[(z * self.cells + y) * self.cells + x]
    }
}

/// SDF samples at the vertices of a regular grid.
pub struct SdfGrid {
    pub bounds: Aabb,
    /// Cells per axis; the vertex lattice is (cells+1)³.
    pub cells: usize,
    /// f32 vertex values, x fastest.
    pub values: Vec<f32>,
    /// When present, only cells inside valid blocks are marched.
    pub valid_blocks: Option<CoarseMask>,
    /// Number of field evaluations that produced this grid.
    pub queries: usize,
}

impl SdfGrid {
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        let n = self.cells + 1;
        (z * n + y) * n + x
    }

    pub fn vertex_position(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let e = self.bounds.extent();
        let n = self.cells as f64;
        self.bounds.min
            + Vector3::new(
                e.x * x as f64 / n,
                e.y * y as f64 / n,
                e.z * z as f64 / n,
            )
    }

    pub fn cell_size(&self) -> Vector3<f64> {
        self.bounds.extent() / self.cells as f64
    }

    fn cell_in_valid_block(&self, cx: usize, cy: usize, cz: usize) -> bool {
        match &self.valid_blocks {
            None => true,
            Some(mask) => {
                let ratio = self.cells / mask.cells;
                mask.cell(cx / ratio, cy / ratio, cz / ratio)
            }
        }
    }
}

/// Triangle mesh with per-vertex normals and colors.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Signed volume via the divergence theorem; positive for outward
    /// orientation of a closed surface.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// True when every undirected edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        !counts.is_empty() && counts.values().all(|&c| c == 2)
    }

    /// Total surface area (for sampling).
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| self.triangle_area(t))
            .sum()
    }

    fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let (a, b, c) = (
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        );
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Area-weighted surface samples, deterministic per seed.
    pub fn sample_surface(&self, count: usize, seed: u64) -> Vec<Vector3<f64>> {
        use rand::Rng;
        use rand::SeedableRng;
        if self.triangles.is_empty() || count == 0 {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        let total = acc;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let u = rng.random_range(0.0..total);
                let ti = cdf.partition_point(|&c| c < u).min(self.triangles.len() - 1);
                let t = &self.triangles[ti];
                let (a, b, c) = (
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                );
                let (mut r1, mut r2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + r1 * (b - a) + r2 * (c - a)
            })
            .collect()
    }
}

/// Scene extent from the per-view depth heads: unproject all predicted
/// depths through the predicted cameras, take extrema, pad 5%. Degenerate
/// boxes are inflated to a minimum extent of 0.1 · scene scale.
pub fn estimate_bounds(model: &SceneModel) -> Result<Aabb, SurfaceError> {
    let cameras = model.cameras();
    let reference = &cameras[0];
    let (w, h) = (
        model.camera_resolution.0 as usize,
        model.camera_resolution.1 as usize,
    );
    let mut bb: Option<Aabb> = None;
    let mut any = false;
    for (i, cam) in cameras.iter().enumerate() {
        let (depth, _) = model.predict_view_depth(i)?;
        let pm = unproject_depth_to_pointmap(&depth, w, h, cam, reference, model.convention)
            .expect("model resolution matches its cameras");
        for (p, &valid) in pm.points.iter().zip(&pm.valid) {
            if !valid {
                continue;
            }
            any = true;
            bb = Some(match bb {
                None => Aabb::new(*p, *p),
                Some(mut b) => {
                    b.min = b.min.inf(p);
                    b.max = b.max.sup(p);
                    b
                }
            });
        }
    }
    let Some(mut bb) = bb else {
        return Err(SurfaceError::NoValidDepths);
    };
    if !any {
        return Err(SurfaceError::NoValidDepths);
    }
    bb = bb.padded(0.05);
    let min_extent = 0.1 * model.scene_scale();
    for i in 0..3 {
        let e = bb.max[i] - bb.min[i];
        if e < min_extent {
            let grow = 0.5 * (min_extent - e);
            bb.min[i] -= grow;
            bb.max[i] += grow;
        }
    }
    Ok(bb)
}

/// Coarse-cell filter: a cell is valid when any of its 8 corners has
/// |ŝ| below the threshold (default: the coarse cell diagonal, which for a
/// 1-Lipschitz field guarantees no zero crossing is pruned).
pub fn coarse_filter(
    field: &dyn SdfField,
    bounds: &Aabb,
    cells: usize,
    threshold: Option<f64>,
) -> Result<CoarseMask, SurfaceError> {
    if cells < 2 {
        return Err(SurfaceError::ResolutionTooSmall(cells));
    }
    let threshold = threshold.unwrap_or_else(|| (bounds.extent() / cells as f64).norm());
    let n = cells + 1;
    let e = bounds.extent();
    let mut near = vec![false; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = bounds.min
                    + Vector3::new(
                        e.x * x as f64 / cells as f64,
                        e.y * y as f64 / cells as f64,
                        e.z * z as f64 / cells as f64,
                    );
                near[(z * n + y) * n + x] = field.sdf(&p).abs() < threshold;
            }
        }
    }
    let mut valid = vec![false; cells * cells * cells];
    for cz in 0..cells {
        for cy in 0..cells {
            for cx in 0..cells {
                let hit = CORNER_OFFSETS.iter().any(|&(dx, dy, dz)| {
                    near[((cz + dz) * n + (cy + dy)) * n + (cx + dx)]
                });
                valid[(cz * cells + cy) * cells + cx] = hit;
            }
        }
    }
    Ok(CoarseMask {
        bounds: *bounds,
        cells,
        valid,
    })
}

/// Large positive fill for vertices outside every valid block.
fn outside_fill(bounds: &Aabb) -> f32 {
    (10.0 * bounds.diagonal()) as f32
}

/// Fine-grid evaluation restricted to valid blocks; pruned vertices get a
/// large positive fill and pruned cells are skipped during extraction.
pub fn fine_eval(
    field: &dyn SdfField,
    mask: &CoarseMask,
    cells: usize,
) -> Result<SdfGrid, SurfaceError> {
    if cells < 2 {
        return Err(SurfaceError::ResolutionTooSmall(cells));
    }
    if cells % mask.cells != 0 {
        return Err(SurfaceError::NotDivisible(mask.cells, cells));
    }
    let ratio = cells / mask.cells;
    let bounds = mask.bounds;
    let n = cells + 1;
    // vertices in the closure of any valid block
    let mut evaluate = vec![false; n * n * n];
    for cz in 0..mask.cells {
        for cy in 0..mask.cells {
            for cx in 0..mask.cells {
                if !mask.cell(cx, cy, cz) {
                    continue;
                }
                for z in cz * ratio..=(cz + 1) * ratio {
                    for y in cy * ratio..=(cy + 1) * ratio {
                        for x in cx * ratio..=(cx + 1) * ratio {
                            evaluate[(z * n + y) * n + x] = true;
                        }
                    }
                }
            }
        }
    }
    let fill = outside_fill(&bounds);
    let e = bounds.extent();
    let mut values = vec![fill; n * n * n];
    let mut queries = 0usize;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let i = (z * n + y) * n + x;
                if evaluate[i] {
                    let p = bounds.min
                        + Vector3::new(
                            e.x * x as f64 / cells as f64,
                            e.y * y as f64 / cells as f64,
                            e.z * z as f64 / cells as f64,
                        );
                    values[i] = field.sdf(&p) as f32;
                    queries += 1;
                }
            }
        }
    }
    Ok(SdfGrid {
        bounds,
        cells,
        values,
        valid_blocks: Some(mask.clone()),
        queries,
    })
}

/// Dense evaluation of the full lattice (the coarse-to-fine reference path).
pub fn dense_eval(
    field: &dyn SdfField,
    bounds: &Aabb,
    cells: usize,
) -> Result<SdfGrid, SurfaceError> {
    if cells < 2 {
        return Err(SurfaceError::ResolutionTooSmall(cells));
    }
    let n = cells + 1;
    let e = bounds.extent();
    let mut values = vec![0.0f32; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = bounds.min
                    + Vector3::new(
                        e.x * x as f64 / cells as f64,
                        e.y * y as f64 / cells as f64,
                        e.z * z as f64 / cells as f64,
                    );
                values[(z * n + y) * n + x] = field.sdf(&p) as f32;
            }
        }
    }
    Ok(SdfGrid {
        bounds: *bounds,
        cells,
        values,
        valid_blocks: None,
        queries: n * n * n,
    })
}

/// Standard marching cubes at the given iso level: generated 256-case table,
/// linear edge interpolation, vertices welded by exact grid-edge identity,
/// outward orientation (normals toward positive SDF). An empty mesh is a
/// valid result.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Mesh {
    let table = triangle_table();
    let n = grid.cells + 1;
    let mut mesh = Mesh::default();
    // grid edge identity: (flat index of the lower vertex, axis)
    let mut edge_vertices: HashMap<(usize, u8), u32> = HashMap::new();

    for cz in 0..grid.cells {
        for cy in 0..grid.cells {
            for cx in 0..grid.cells {
                if !grid.cell_in_valid_block(cx, cy, cz) {
                    continue;
                }
                let corner_idx: [usize; 8] = std::array::from_fn(|i| {
                    let (dx, dy, dz) = CORNER_OFFSETS[i];
                    grid.idx(cx + dx, cy + dy, cz + dz)
                });
                let mut case = 0usize;
                for (i, &ci) in corner_idx.iter().enumerate() {
                    if (grid.values[ci] as f64) < iso {
                        case |= 1 << i;
                    }
                }
                if table[case].is_empty() {
                    continue;
                }
                // vertex on each crossing edge, welded across cells
                let mut cell_edge_vertex = [u32::MAX; 12];
                for tri in &table[case] {
                    for &e in tri {
                        let e = e as usize;
                        if cell_edge_vertex[e] != u32::MAX {
                            continue;
                        }
                        let (a, b) = EDGE_CORNERS[e];
                        let (ia, ib) = (corner_idx[a], corner_idx[b]);
                        let key = (ia.min(ib), edge_axis(ia.min(ib), ia.max(ib), n));
                        let vid = *edge_vertices.entry(key).or_insert_with(|| {
                            let va = grid.values[ia] as f64;
                            let vb = grid.values[ib] as f64;
                            let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                            let (ax, ay, az) = unflatten(ia, n);
                            let (bx, by, bz) = unflatten(ib, n);
                            let pa = grid.vertex_position(ax, ay, az);
                            let pb = grid.vertex_position(bx, by, bz);
                            mesh.vertices.push(pa + t * (pb - pa));
                            (mesh.vertices.len() - 1) as u32
                        });
                        cell_edge_vertex[e] = vid;
                    }
                    let v = [
                        cell_edge_vertex[tri[0] as usize],
                        cell_edge_vertex[tri[1] as usize],
                        cell_edge_vertex[tri[2] as usize],
                    ];
                    // interpolation can merge two ring points onto a shared
                    // grid vertex; drop the degenerate sliver
                    if v[0] != v[1] && v[1] != v[2] && v[0] != v[2] {
                        mesh.triangles.push(v);
                    }
                }
            }
        }
    }
    mesh
}

fn unflatten(i: usize, n: usize) -> (usize, usize, usize) {
    (i % n, (i / n) % n, i / (n * n))
}

fn edge_axis(lo: usize, hi: usize, n: usize) -> u8 {
    match hi - lo {
        1 => 0,
        d if d == n => 1,
        _ => 2,
    }
}

/// Fills vertex normals from the field gradient (finite differences at half
/// the cell size), normalized outward.
pub fn compute_vertex_normals(field: &dyn SdfField, mesh: &mut Mesh, cell_size: f64) {
    let step = 0.5 * cell_size;
    mesh.normals = mesh
        .vertices
        .iter()
        .map(|v| {
            let mut g = Vector3::zeros();
            for k in 0..3 {
                let mut hi = *v;
                let mut lo = *v;
                hi[k] += step;
                lo[k] -= step;
                g[k] = (field.sdf(&hi) - field.sdf(&lo)) / (2.0 * step);
            }
            let norm = g.norm();
            if norm > 1e-12 {
                g / norm
            } else {
                Vector3::zeros()
            }
        })
        .collect();
}

/// Per-vertex colors from the appearance decoder, with the outward normal
/// standing in for the viewing direction. Vertices with a degenerate normal
/// borrow the nearest valid neighbor's color; the count is returned.
pub fn color_vertices(model: &SceneModel, mesh: &mut Mesh) -> usize {
    let field = crate::field::ModelField::new(model);
    let mut missing = Vec::new();
    mesh.colors = vec![[0.0; 3]; mesh.vertices.len()];
    for i in 0..mesh.vertices.len() {
        let n = mesh.normals.get(i).copied().unwrap_or_else(Vector3::zeros);
        if n.norm() > 0.5 {
            mesh.colors[i] = field.color(&mesh.vertices[i], &n);
        } else {
            missing.push(i);
        }
    }
    for &i in &missing {
        // nearest valid vertex by Euclidean distance
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for j in 0..mesh.vertices.len() {
            if missing.binary_search(&j).is_ok() {
                continue;
            }
            let d = (mesh.vertices[i] - mesh.vertices[j]).norm_squared();
            if d < best_d {
                best_d = d;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            mesh.colors[i] = mesh.colors[j];
        }
    }
    missing.len()
}

pub struct ExtractionStats {
    pub coarse_cells: usize,
    pub valid_cells: usize,
    pub fine_queries: usize,
    pub fine_vertices_total: usize,
}

/// The full coarse-to-fine pipeline over any field.
pub fn extract_surface(
    field: &dyn SdfField,
    bounds: &Aabb,
    coarse: usize,
    fine: usize,
) -> Result<(Mesh, ExtractionStats), SurfaceError> {
    let mask = coarse_filter(field, bounds, coarse, None)?;
    let grid = fine_eval(field, &mask, fine)?;
    let mut mesh = marching_cubes(&grid, 0.0);
    let cell = grid.cell_size();
    compute_vertex_normals(field, &mut mesh, cell.x.max(cell.y).max(cell.z));
    let n = fine + 1;
    Ok((
        mesh,
        ExtractionStats {
            coarse_cells: coarse * coarse * coarse,
            valid_cells: mask.valid_count(),
            fine_queries: grid.queries,
            fine_vertices_total: n * n * n,
        },
    ))
}
