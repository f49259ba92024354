//! Analytic CSG scenes with exact SDF and normal oracles, sphere-traced
//! ground-truth rendering, and dataset generation.
//!
//! Sign convention: negative inside, positive outside. Union of exact
//! primitive SDFs is exact (1-Lipschitz) outside the shapes; intersection
//! and subtraction give conservative bounds, which is all sphere tracing
//! needs when marching from outside.

use crate::geometry::{
    encode_camera, generate_ray, ray_depth, Aabb, Camera, Ray, RayDepthConvention,
};
use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("zero SDF gradient at {0:?} (medial axis or singular point)")]
    ZeroGradient(Vector3<f64>),
    #[error("unknown scene preset '{0}'; available: {1}")]
    UnknownPreset(String, String),
    #[error("camera rig needs at least 2 views, got {0}")]
    RigTooSmall(u32),
    #[error("rig camera {0} does not see the scene")]
    RigBlindCamera(usize),
}

/// Shading background for missed rays; mid-gray keeps the RGB loss defined
/// on background pixels.
pub const BACKGROUND_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// Ambient term added to the Lambertian factor before multiplying the albedo.
pub const AMBIENT: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Primitive {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    #[serde(rename = "box")]
    Cuboid {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
    },
    Torus {
        center: Vector3<f64>,
        /// (ring radius, tube radius); the ring lies in the y-normal plane.
        radii: (f64, f64),
    },
    Plane {
        normal: Vector3<f64>,
        offset: f64,
    },
}

impl Primitive {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Cuboid {
                center,
                half_extents,
            } => {
                let q = (p - center).abs() - half_extents;
                let outside = q.sup(&Vector3::zeros()).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Primitive::Torus { center, radii } => {
                let d = p - center;
                let ring = (d.x * d.x + d.z * d.z).sqrt() - radii.0;
                (ring * ring + d.y * d.y).sqrt() - radii.1
            }
            Primitive::Plane { normal, offset } => p.dot(normal) - offset,
        }
    }

    /// Analytic gradient; `None` at ambiguous points (ties, axes, centers).
    fn gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        match self {
            Primitive::Sphere { center, .. } => {
                let d = p - center;
                let n = d.norm();
                (n > 1e-12).then(|| d / n)
            }
            Primitive::Cuboid {
                center,
                half_extents,
            } => {
                let d = p - center;
                let q = d.abs() - half_extents;
                let sgn = Vector3::new(sign_nz(d.x), sign_nz(d.y), sign_nz(d.z));
                if q.x.max(q.y).max(q.z) > 0.0 {
                    // outside: gradient of the clamped norm
                    let m = q.sup(&Vector3::zeros());
                    let n = m.norm();
                    (n > 1e-12).then(|| Vector3::new(m.x * sgn.x, m.y * sgn.y, m.z * sgn.z) / n)
                } else {
                    // inside: face of the largest (least-negative) component;
                    // ties are ambiguous
                    let (mut axis, mut best, mut tie) = (0, q.x, false);
                    for i in 1..3 {
                        if (q[i] - best).abs() < 1e-12 {
                            tie = true;
                        } else if q[i] > best {
                            best = q[i];
                            axis = i;
                            tie = false;
                        }
                    }
                    if tie {
                        return None;
                    }
                    let mut g = Vector3::zeros();
                    g[axis] = sgn[axis];
                    Some(g)
                }
            }
            Primitive::Torus { center, radii } => {
                let d = p - center;
                let rxz = (d.x * d.x + d.z * d.z).sqrt();
                if rxz < 1e-12 {
                    return None; // on the torus axis
                }
                let ring_point = Vector3::new(d.x / rxz * radii.0, 0.0, d.z / rxz * radii.0);
                let to_surface = d - ring_point;
                let n = to_surface.norm();
                (n > 1e-12).then(|| to_surface / n)
            }
            Primitive::Plane { normal, .. } => Some(normal.normalize()),
        }
    }
}

fn sign_nz(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum CsgNode {
    Prim {
        shape: Primitive,
        albedo: [f64; 3],
    },
    Union {
        a: Box<CsgNode>,
        b: Box<CsgNode>,
    },
    Intersection {
        a: Box<CsgNode>,
        b: Box<CsgNode>,
    },
    Subtraction {
        a: Box<CsgNode>,
        b: Box<CsgNode>,
    },
}

impl CsgNode {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            CsgNode::Prim { shape, .. } => shape.sdf(p),
            CsgNode::Union { a, b } => a.sdf(p).min(b.sdf(p)),
            CsgNode::Intersection { a, b } => a.sdf(p).max(b.sdf(p)),
            CsgNode::Subtraction { a, b } => a.sdf(p).max(-b.sdf(p)),
        }
    }

    /// SDF and the albedo of the branch that wins the CSG combination.
    fn sdf_albedo(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        match self {
            CsgNode::Prim { shape, albedo } => (shape.sdf(p), *albedo),
            CsgNode::Union { a, b } => {
                let (sa, ca) = a.sdf_albedo(p);
                let (sb, cb) = b.sdf_albedo(p);
                if sa <= sb {
                    (sa, ca)
                } else {
                    (sb, cb)
                }
            }
            CsgNode::Intersection { a, b } => {
                let (sa, ca) = a.sdf_albedo(p);
                let (sb, cb) = b.sdf_albedo(p);
                if sa >= sb {
                    (sa, ca)
                } else {
                    (sb, cb)
                }
            }
            CsgNode::Subtraction { a, b } => {
                let (sa, ca) = a.sdf_albedo(p);
                let (sb, cb) = b.sdf_albedo(p);
                if sa >= -sb {
                    (sa, ca)
                } else {
                    (-sb, cb)
                }
            }
        }
    }

    /// Analytic gradient of the winning branch; `None` near CSG joints.
    fn gradient(&self, p: &Vector3<f64>, tie_eps: f64) -> Option<Vector3<f64>> {
        match self {
            CsgNode::Prim { shape, .. } => shape.gradient(p),
            CsgNode::Union { a, b } => {
                let (sa, sb) = (a.sdf(p), b.sdf(p));
                if (sa - sb).abs() < tie_eps {
                    None
                } else if sa < sb {
                    a.gradient(p, tie_eps)
                } else {
                    b.gradient(p, tie_eps)
                }
            }
            CsgNode::Intersection { a, b } => {
                let (sa, sb) = (a.sdf(p), b.sdf(p));
                if (sa - sb).abs() < tie_eps {
                    None
                } else if sa > sb {
                    a.gradient(p, tie_eps)
                } else {
                    b.gradient(p, tie_eps)
                }
            }
            CsgNode::Subtraction { a, b } => {
                let (sa, sb) = (a.sdf(p), -b.sdf(p));
                if (sa - sb).abs() < tie_eps {
                    None
                } else if sa > sb {
                    a.gradient(p, tie_eps)
                } else {
                    b.gradient(p, tie_eps).map(|g| -g)
                }
            }
        }
    }
}

/// An analytic scene: a CSG tree plus the evaluation bounds containing the
/// surface of interest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnalyticScene {
    pub root: CsgNode,
    pub bounds: Aabb,
}

impl AnalyticScene {
    /// Signed distance (exact for unions of primitives, a conservative bound
    /// for intersection/subtraction).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.root.sdf(p)
    }

    pub fn sdf_albedo(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        self.root.sdf_albedo(p)
    }

    /// Unit surface normal: analytic where unambiguous, central differences
    /// (step 1e-6 · scene scale) at CSG joints. Zero gradients are rejected.
    pub fn normal(&self, p: &Vector3<f64>) -> Result<Vector3<f64>, SceneError> {
        let scale = self.bounds.scale();
        let tie_eps = 1e-9 * scale;
        if let Some(g) = self.root.gradient(p, tie_eps) {
            let n = g.norm();
            if n > 1e-9 {
                return Ok(g / n);
            }
        }
        let g = self.fd_gradient(p, 1e-6 * scale);
        let n = g.norm();
        if n < 1e-6 {
            return Err(SceneError::ZeroGradient(*p));
        }
        Ok(g / n)
    }

    /// Central-difference SDF gradient (not normalized).
    pub fn fd_gradient(&self, p: &Vector3<f64>, step: f64) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for i in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[i] += step;
            lo[i] -= step;
            g[i] = (self.sdf(&hi) - self.sdf(&lo)) / (2.0 * step);
        }
        g
    }

    pub fn scale(&self) -> f64 {
        self.bounds.scale()
    }
}

/// Sphere-trace a ray; `Some(t)` with |sdf| < 1e-6·scale at the hit.
///
/// Marches with the Lipschitz step rule, then refines the crossing by
/// bracketed bisection so oblique hits are as tight as head-on ones.
pub fn sphere_trace(scene: &AnalyticScene, ray: &Ray, max_t: f64) -> Option<f64> {
    let eps = 1e-6 * scene.scale();
    let mut t = 0.0;
    for _ in 0..4096 {
        let s = scene.sdf(&ray.at(t));
        if s < eps {
            return Some(refine_hit(scene, ray, t, eps));
        }
        t += s;
        if t > max_t {
            return None;
        }
    }
    None
}

/// Walk forward from a near-surface `t` until the SDF changes sign, then
/// bisect the bracket. Falls back to the entry point for tangential grazes.
fn refine_hit(scene: &AnalyticScene, ray: &Ray, t: f64, eps: f64) -> f64 {
    let mut lo = t;
    let mut hi = t;
    let step = 8.0 * eps;
    let mut found = scene.sdf(&ray.at(t)) <= 0.0;
    if !found {
        for _ in 0..256 {
            hi += step;
            if scene.sdf(&ray.at(hi)) <= 0.0 {
                found = true;
                break;
            }
            lo = hi;
        }
    } else {
        lo = (t - step).max(0.0);
    }
    if !found {
        return t;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if scene.sdf(&ray.at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Ground-truth render of one view: shaded image, depth, normals, mask.
pub struct GtView {
    pub width: usize,
    pub height: usize,
    /// RGB per pixel, row-major, in [0,1].
    pub image: Vec<f64>,
    /// Ray depth per pixel (the dataset convention); 0 marks background.
    pub depth: Vec<f64>,
    /// World-frame unit normals; zeros on background.
    pub normal: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Lambertian shading with a fixed ambient floor, clamped to [0,1].
pub fn shade(albedo: [f64; 3], normal: &Vector3<f64>, light: &Vector3<f64>) -> [f64; 3] {
    let lambert = normal.dot(light).max(0.0) + AMBIENT;
    [
        (albedo[0] * lambert).clamp(0.0, 1.0),
        (albedo[1] * lambert).clamp(0.0, 1.0),
        (albedo[2] * lambert).clamp(0.0, 1.0),
    ]
}

pub fn render_gt_view(
    scene: &AnalyticScene,
    camera: &Camera,
    light: &Vector3<f64>,
    convention: RayDepthConvention,
) -> GtView {
    let (w, h) = (camera.resolution.0 as usize, camera.resolution.1 as usize);
    let light = light.normalize();
    let max_t = (camera.center - scene.bounds.center()).norm() + scene.bounds.diagonal();
    let mut view = GtView {
        width: w,
        height: h,
        image: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        normal: vec![0.0; w * h * 3],
        mask: vec![false; w * h],
    };
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            let ray = generate_ray(camera, (px as f64 + 0.5, py as f64 + 0.5))
                .expect("pixel centers are inside the image");
            match sphere_trace(scene, &ray, max_t) {
                Some(t) => {
                    let p = ray.at(t);
                    let (_, albedo) = scene.sdf_albedo(&p);
                    let n = scene
                        .normal(&p)
                        .unwrap_or_else(|_| -ray.direction);
                    let rgb = shade(albedo, &n, &light);
                    view.image[i * 3..i * 3 + 3].copy_from_slice(&rgb);
                    view.depth[i] = ray_depth(camera, &p, convention);
                    view.normal[i * 3] = n.x;
                    view.normal[i * 3 + 1] = n.y;
                    view.normal[i * 3 + 2] = n.z;
                    view.mask[i] = true;
                }
                None => {
                    view.image[i * 3..i * 3 + 3].copy_from_slice(&BACKGROUND_COLOR);
                }
            }
        }
    }
    view
}

// ── camera rigs ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "placement", rename_all = "kebab-case")]
pub enum RigPlacement {
    /// Evenly spaced azimuths on a circle at fixed elevation.
    Orbit { radius: f64, elevation: f64 },
    /// Orbit at zero elevation.
    Ring { radius: f64 },
    /// Seeded random positions in a spherical shell.
    RandomInShell { r_min: f64, r_max: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraRig {
    pub count: u32,
    #[serde(flatten)]
    pub placement: RigPlacement,
    pub look_at: Vector3<f64>,
    pub fov: (f64, f64),
    pub resolution: (u32, u32),
}

/// World-to-camera rotation for a camera at `position` looking at `target`,
/// with image rows roughly horizontal.
pub fn look_at_rotation(position: &Vector3<f64>, target: &Vector3<f64>) -> UnitQuaternion<f64> {
    let forward = (target - position).normalize();
    // y_c ≈ world-down keeps rendered images upright
    let up_hint = if forward.y.abs() > 0.99 {
        Vector3::new(0.0, 0.0, -1.0)
    } else {
        Vector3::new(0.0, -1.0, 0.0)
    };
    let cam_to_world = Rotation3::face_towards(&forward, &up_hint);
    UnitQuaternion::from_rotation_matrix(&cam_to_world.inverse())
}

impl CameraRig {
    pub fn build(&self, seed: u64) -> Result<Vec<Camera>, SceneError> {
        if self.count < 2 {
            return Err(SceneError::RigTooSmall(self.count));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cameras = Vec::with_capacity(self.count as usize);
        for k in 0..self.count {
            let position = match self.placement {
                RigPlacement::Orbit { radius, elevation } => {
                    let az = 2.0 * std::f64::consts::PI * k as f64 / self.count as f64;
                    self.look_at
                        + radius
                            * Vector3::new(
                                elevation.cos() * az.cos(),
                                elevation.sin(),
                                elevation.cos() * az.sin(),
                            )
                }
                RigPlacement::Ring { radius } => {
                    let az = 2.0 * std::f64::consts::PI * k as f64 / self.count as f64;
                    self.look_at + radius * Vector3::new(az.cos(), 0.0, az.sin())
                }
                RigPlacement::RandomInShell { r_min, r_max } => {
                    let dir = loop {
                        let v = Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        let n = v.norm();
                        if n > 1e-3 && n <= 1.0 {
                            break v / n;
                        }
                    };
                    self.look_at + dir * rng.random_range(r_min..r_max)
                }
            };
            let rotation = look_at_rotation(&position, &self.look_at);
            cameras.push(
                Camera::new(rotation, position, self.fov, self.resolution)
                    .expect("rig fov/resolution validated by construction"),
            );
        }
        Ok(cameras)
    }
}

// ── presets and the scene file ───────────────────────────────────────

pub const PRESET_NAMES: [&str; 4] = ["sphere", "box", "two-spheres", "torus-on-plane"];

pub fn preset_scene(name: &str) -> Result<AnalyticScene, SceneError> {
    let prim = |shape, albedo| CsgNode::Prim { shape, albedo };
    let scene = match name {
        "sphere" => AnalyticScene {
            root: prim(
                Primitive::Sphere {
                    center: Vector3::zeros(),
                    radius: 1.0,
                },
                [0.8, 0.15, 0.15],
            ),
            bounds: Aabb::new(Vector3::new(-1.25, -1.25, -1.25), Vector3::new(1.25, 1.25, 1.25)),
        },
        "box" => AnalyticScene {
            root: prim(
                Primitive::Cuboid {
                    center: Vector3::zeros(),
                    half_extents: Vector3::new(0.8, 0.5, 0.6),
                },
                [0.2, 0.35, 0.8],
            ),
            bounds: Aabb::new(Vector3::new(-1.0, -0.7, -0.8), Vector3::new(1.0, 0.7, 0.8)),
        },
        "two-spheres" => AnalyticScene {
            root: CsgNode::Union {
                a: Box::new(prim(
                    Primitive::Sphere {
                        center: Vector3::new(-0.75, 0.0, 0.0),
                        radius: 0.7,
                    },
                    [0.8, 0.2, 0.2],
                )),
                b: Box::new(prim(
                    Primitive::Sphere {
                        center: Vector3::new(0.7, 0.1, 0.15),
                        radius: 0.5,
                    },
                    [0.2, 0.7, 0.25],
                )),
            },
            bounds: Aabb::new(Vector3::new(-1.65, -0.9, -0.9), Vector3::new(1.4, 0.9, 0.9)),
        },
        "torus-on-plane" => AnalyticScene {
            root: CsgNode::Union {
                a: Box::new(prim(
                    Primitive::Torus {
                        center: Vector3::new(0.0, -0.05, 0.0),
                        radii: (0.8, 0.25),
                    },
                    [0.85, 0.6, 0.15],
                )),
                // a finite plate: the plane halfspace clipped by a box whose
                // top sits above the cut so only the plane face shows
                b: Box::new(CsgNode::Intersection {
                    a: Box::new(prim(
                        Primitive::Plane {
                            normal: Vector3::new(0.0, 1.0, 0.0),
                            offset: -0.3,
                        },
                        [0.3, 0.45, 0.3],
                    )),
                    b: Box::new(prim(
                        Primitive::Cuboid {
                            center: Vector3::new(0.0, -0.625, 0.0),
                            half_extents: Vector3::new(1.5, 0.375, 1.5),
                        },
                        [0.3, 0.45, 0.3],
                    )),
                }),
            },
            bounds: Aabb::new(Vector3::new(-1.6, -1.1, -1.6), Vector3::new(1.6, 0.4, 1.6)),
        },
        other => {
            return Err(SceneError::UnknownPreset(
                other.to_string(),
                PRESET_NAMES.join(", "),
            ))
        }
    };
    Ok(scene)
}

/// Everything needed to regenerate and re-evaluate a dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneFile {
    pub version: u32,
    pub scene: AnalyticScene,
    pub rig: CameraRig,
    pub light: Vector3<f64>,
    pub background: [f64; 3],
    pub seed: u64,
    pub ray_depth_convention: RayDepthConvention,
}

/// Renders the rig's views and writes the dataset directory layout:
/// `scene.json` plus `views/v{k}/{image.ppm, depth.f32, normal.f32,
/// mask.pbm, camera.json}`. Deterministic for a fixed seed.
pub fn generate_dataset(
    scene_file: &SceneFile,
    out_dir: &std::path::Path,
) -> Result<Vec<Camera>, crate::cli::formats::FormatError> {
    use crate::cli::formats;
    let cameras = scene_file
        .rig
        .build(scene_file.seed)
        .expect("rig validated before generation");
    std::fs::create_dir_all(out_dir).map_err(|e| formats::FormatError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let scene_path = out_dir.join("scene.json");
    let text = serde_json::to_string_pretty(scene_file).expect("scene serializes");
    std::fs::write(&scene_path, text + "\n").map_err(|e| formats::FormatError::Io {
        path: scene_path.display().to_string(),
        source: e,
    })?;
    for (k, camera) in cameras.iter().enumerate() {
        let vdir = out_dir.join("views").join(format!("v{k}"));
        std::fs::create_dir_all(&vdir).map_err(|e| formats::FormatError::Io {
            path: vdir.display().to_string(),
            source: e,
        })?;
        let view = render_gt_view(
            &scene_file.scene,
            camera,
            &scene_file.light,
            scene_file.ray_depth_convention,
        );
        formats::write_ppm(&vdir.join("image.ppm"), view.width, view.height, &view.image)?;
        formats::write_f32_map(&vdir.join("depth.f32"), view.width, view.height, 1, &view.depth)?;
        formats::write_f32_map(
            &vdir.join("normal.f32"),
            view.width,
            view.height,
            3,
            &view.normal,
        )?;
        formats::write_pbm(&vdir.join("mask.pbm"), view.width, view.height, &view.mask)?;
        let enc = encode_camera(camera);
        formats::write_camera_json(
            &vdir.join("camera.json"),
            &formats::CameraFile {
                g: enc.0,
                width: camera.resolution.0,
                height: camera.resolution.1,
            },
        )?;
    }
    Ok(cameras)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_sphere() -> AnalyticScene {
        preset_scene("sphere").unwrap()
    }

    #[test]
    fn sphere_sdf_values() {
        let s = unit_sphere();
        assert_relative_eq!(s.sdf(&Vector3::new(2.0, 0.0, 0.0)), 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.sdf(&Vector3::zeros()), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn disjoint_union_midpoint() {
        let s = AnalyticScene {
            root: CsgNode::Union {
                a: Box::new(CsgNode::Prim {
                    shape: Primitive::Sphere {
                        center: Vector3::new(-2.0, 0.0, 0.0),
                        radius: 1.0,
                    },
                    albedo: [1.0, 0.0, 0.0],
                }),
                b: Box::new(CsgNode::Prim {
                    shape: Primitive::Sphere {
                        center: Vector3::new(2.0, 0.0, 0.0),
                        radius: 1.0,
                    },
                    albedo: [0.0, 1.0, 0.0],
                }),
            },
            bounds: Aabb::new(Vector3::new(-3.2, -1.2, -1.2), Vector3::new(3.2, 1.2, 1.2)),
        };
        assert_relative_eq!(s.sdf(&Vector3::zeros()), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn union_sdf_below_operands() {
        let s = preset_scene("two-spheres").unwrap();
        let CsgNode::Union { a, b } = &s.root else {
            panic!("preset is a union");
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let p = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let u = s.sdf(&p);
            assert!(u <= a.sdf(&p) + 1e-15);
            assert!(u <= b.sdf(&p) + 1e-15);
        }
    }

    #[test]
    fn sphere_normal_is_radial() {
        let s = unit_sphere();
        let n = s.normal(&Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!((n - Vector3::new(1.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn box_face_center_normal() {
        let s = preset_scene("box").unwrap();
        let n = s.normal(&Vector3::new(0.8, 0.0, 0.0)).unwrap();
        assert_relative_eq!((n - Vector3::new(1.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
        let n_in = s.normal(&Vector3::new(0.75, 0.1, 0.05)).unwrap();
        assert_relative_eq!((n_in - Vector3::new(1.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn normals_are_unit_everywhere_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for name in PRESET_NAMES {
            let s = preset_scene(name).unwrap();
            let mut checked = 0;
            while checked < 200 {
                let p = Vector3::new(
                    rng.random_range(s.bounds.min.x..s.bounds.max.x),
                    rng.random_range(s.bounds.min.y..s.bounds.max.y),
                    rng.random_range(s.bounds.min.z..s.bounds.max.z),
                );
                if let Ok(n) = s.normal(&p) {
                    assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn normal_matches_fd_away_from_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in PRESET_NAMES {
            let s = preset_scene(name).unwrap();
            let step = 1e-6 * s.scale();
            let mut checked = 0;
            while checked < 100 {
                let p = Vector3::new(
                    rng.random_range(s.bounds.min.x..s.bounds.max.x),
                    rng.random_range(s.bounds.min.y..s.bounds.max.y),
                    rng.random_range(s.bounds.min.z..s.bounds.max.z),
                );
                // skip CSG joints: analytic gradient must be defined
                if s.root.gradient(&p, 1e-4 * s.scale()).is_none() {
                    continue;
                }
                let Ok(n) = s.normal(&p) else { continue };
                let fd = s.fd_gradient(&p, step);
                if fd.norm() < 0.5 {
                    continue;
                }
                assert!((n - fd.normalize()).norm() < 1e-4, "scene {name} at {p:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn eikonal_residual_vanishes_on_primitives() {
        // exact SDFs of single primitives: |‖∇sdf‖ − 1| < 1e-6
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["sphere", "box"] {
            let s = preset_scene(name).unwrap();
            let mut checked = 0;
            while checked < 200 {
                let p = Vector3::new(
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                );
                if s.root.gradient(&p, 1e-6).is_none() || s.sdf(&p).abs() < 1e-3 {
                    continue;
                }
                let g = s.fd_gradient(&p, 1e-7 * s.scale());
                assert!(
                    (g.norm() - 1.0).abs() < 1e-6,
                    "{name}: |grad| = {} at {p:?}",
                    g.norm()
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn sphere_trace_head_on() {
        let s = unit_sphere();
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -3.0),
            direction: Vector3::new(0.0, 0.0, 1.0),
        };
        let t = sphere_trace(&s, &ray, 10.0).unwrap();
        assert_relative_eq!(t, 2.0, epsilon = 1e-5);
    }

    #[test]
    fn sphere_trace_miss() {
        let s = unit_sphere();
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -3.0),
            direction: Vector3::new(0.0, 1.0, 0.0),
        };
        assert!(sphere_trace(&s, &ray, 10.0).is_none());
    }

    /// Bisection on scene_sdf along the ray refines the root independently.
    fn bisect_root(scene: &AnalyticScene, ray: &Ray, lo: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if scene.sdf(&ray.at(mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn sphere_trace_matches_bisection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for name in PRESET_NAMES {
            let s = preset_scene(name).unwrap();
            let mut hits = 0;
            while hits < 250 {
                let origin = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
                    * 3.0;
                let target = Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                );
                let ray = Ray {
                    origin,
                    direction: (target - origin).normalize(),
                };
                let Some(t) = sphere_trace(&s, &ray, 12.0) else {
                    continue;
                };
                // bracket the crossing around the reported hit
                let lo = (t - 0.05).max(0.0);
                if s.sdf(&ray.at(lo)) <= 0.0 {
                    continue; // grazing entry, bracket invalid
                }
                let refined = bisect_root(&s, &ray, lo, t + 0.05);
                assert!(
                    (t - refined).abs() < 1e-5,
                    "{name}: trace {t} vs bisection {refined}"
                );
                hits += 1;
            }
        }
    }

    #[test]
    fn gt_render_center_pixel_shading_and_depth() {
        let s = unit_sphere();
        // camera on the -z axis looking at the origin, light along the axis
        let rig = CameraRig {
            count: 2,
            placement: RigPlacement::Ring { radius: 2.5 },
            look_at: Vector3::zeros(),
            fov: (1.0, 1.0),
            resolution: (33, 33),
        };
        let cams = rig.build(0).unwrap();
        let cam = &cams[0];
        let light = -cam.forward(); // head-on
        let view = render_gt_view(&s, cam, &light, RayDepthConvention::Distance);
        let center = (16 * 33 + 16) as usize;
        assert!(view.mask[center]);
        // n·l = 1 at the silhouette center: color = albedo·(1 + ambient)
        let expected: [f64; 3] = [0.8 * 1.1, 0.15 * 1.1, 0.15 * 1.1];
        for c in 0..3 {
            assert_relative_eq!(view.image[center * 3 + c], expected[c].min(1.0), epsilon = 1e-3);
        }
        // depth at the center pixel = orbit radius − sphere radius
        assert_relative_eq!(view.depth[center], 1.5, epsilon = 1e-3);
        // background pixel
        assert!(!view.mask[0]);
        assert_eq!(view.depth[0], 0.0);
        assert_eq!(&view.image[0..3], &BACKGROUND_COLOR);
    }

    #[test]
    fn gt_normals_match_oracle_at_hits() {
        let s = preset_scene("two-spheres").unwrap();
        let rig = CameraRig {
            count: 3,
            placement: RigPlacement::Orbit {
                radius: 2.8,
                elevation: 0.4,
            },
            look_at: Vector3::zeros(),
            fov: (1.0, 0.9),
            resolution: (24, 20),
        };
        let cam = &rig.build(0).unwrap()[1];
        let light = Vector3::new(0.3, 0.8, 0.5);
        let view = render_gt_view(&s, cam, &light, RayDepthConvention::Distance);
        for py in 0..20 {
            for px in 0..24 {
                let i = py * 24 + px;
                if !view.mask[i] {
                    continue;
                }
                let ray = generate_ray(cam, (px as f64 + 0.5, py as f64 + 0.5)).unwrap();
                let p = ray.at(view.depth[i]);
                let n = s.normal(&p).unwrap();
                let stored = Vector3::new(
                    view.normal[i * 3],
                    view.normal[i * 3 + 1],
                    view.normal[i * 3 + 2],
                );
                assert!((n - stored).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn unknown_preset_lists_options() {
        let err = preset_scene("cube").unwrap_err();
        assert!(err.to_string().contains("torus-on-plane"));
    }

    #[test]
    fn orbit_rig_cameras_see_look_at() {
        let rig = CameraRig {
            count: 8,
            placement: RigPlacement::Orbit {
                radius: 2.5,
                elevation: 0.35,
            },
            look_at: Vector3::new(0.1, -0.2, 0.3),
            fov: (1.05, 1.05),
            resolution: (16, 16),
        };
        for cam in rig.build(7).unwrap() {
            let p = crate::geometry::project(&cam, &rig.look_at, RayDepthConvention::Distance);
            assert!(p.visible);
            assert_relative_eq!(p.pixel.0, 8.0, epsilon = 1e-9);
            assert_relative_eq!(p.pixel.1, 8.0, epsilon = 1e-9);
        }
    }

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
