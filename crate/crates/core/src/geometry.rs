//! Pinhole cameras, ray generation, the 9-dim camera encoding, and
//! similarity alignment.
//!
//! Conventions: pixel origin at the top-left, pixel centers at half-integers,
//! world-to-camera rotation stored as a unit quaternion, camera `center`
//! expressed in world coordinates. The first view's camera frame is the
//! canonical world frame during training.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({0}, {1}) outside image {2}x{3}")]
    PixelOutsideImage(f64, f64, u32, u32),
    #[error("cannot decode a zero quaternion")]
    ZeroQuaternion,
    #[error("camera invalid: {0}")]
    InvalidCamera(String),
    #[error("alignment needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("point lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate (collinear) point configuration")]
    DegeneratePoints,
    #[error("depth map {0}x{1} does not match camera resolution {2}x{3}")]
    ResolutionMismatch(usize, usize, u32, u32),
}

/// How the scalar depth of a 3D point w.r.t. a camera is measured.
///
/// `Distance` (the default) is the Euclidean distance from the camera center
/// along the viewing ray, which is invariant to in-plane camera roll;
/// `ZDepth` is the camera-frame z coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RayDepthConvention {
    #[default]
    Distance,
    ZDepth,
}

/// Pinhole camera. `rotation` maps world to camera coordinates; `center` is
/// the camera position in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: UnitQuaternion<f64>,
    pub center: Vector3<f64>,
    /// (horizontal, vertical) field of view in radians.
    pub fov: (f64, f64),
    /// (width, height) in pixels.
    pub resolution: (u32, u32),
}

/// The learnable 9-dim camera encoding: quaternion(4) + center(3) + fov(2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraEncoding(pub [f64; 9]);

/// A world-space ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    /// Largest axis extent; the scene scale used for step sizes and epsilons.
    pub fn scale(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Box grown by `frac` of its extent on every side.
    pub fn padded(&self, frac: f64) -> Aabb {
        let pad = self.extent() * frac;
        Aabb {
            min: self.min - pad,
            max: self.max + pad,
        }
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vector3::new(a.x, a.y, a.z),
            Vector3::new(b.x, a.y, a.z),
            Vector3::new(a.x, b.y, a.z),
            Vector3::new(b.x, b.y, a.z),
            Vector3::new(a.x, a.y, b.z),
            Vector3::new(b.x, a.y, b.z),
            Vector3::new(a.x, b.y, b.z),
            Vector3::new(b.x, b.y, b.z),
        ]
    }

    /// Smallest box containing all points.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut bb = Aabb::new(first, first);
        for p in it {
            bb.min = bb.min.inf(p);
            bb.max = bb.max.sup(p);
        }
        Some(bb)
    }

    /// Overlap of two boxes, when nonempty.
    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (0..3).all(|i| min[i] < max[i]).then_some(Aabb { min, max })
    }

    /// Slab intersection: entry/exit parameters of a ray, if it hits.
    pub fn ray_intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let d = ray.direction[i];
            if d.abs() < 1e-300 {
                if ray.origin[i] < self.min[i] || ray.origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let mut a = (self.min[i] - ray.origin[i]) / d;
            let mut b = (self.max[i] - ray.origin[i]) / d;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Continuous image coordinates (origin top-left).
    pub pixel: (f64, f64),
    pub ray_depth: f64,
    /// True iff the point is in front of the camera and inside the image.
    pub visible: bool,
}

impl Camera {
    pub fn new(
        rotation: UnitQuaternion<f64>,
        center: Vector3<f64>,
        fov: (f64, f64),
        resolution: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let c = Camera {
            rotation,
            center,
            fov,
            resolution,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fov.0 > 0.0 && self.fov.0 < std::f64::consts::PI) {
            return Err(GeometryError::InvalidCamera(format!(
                "horizontal fov {} not in (0, pi)",
                self.fov.0
            )));
        }
        if !(self.fov.1 > 0.0 && self.fov.1 < std::f64::consts::PI) {
            return Err(GeometryError::InvalidCamera(format!(
                "vertical fov {} not in (0, pi)",
                self.fov.1
            )));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(GeometryError::InvalidCamera(
                "resolution must be positive".into(),
            ));
        }
        Ok(())
    }

    /// An identity camera at the world origin looking down +z.
    pub fn identity(fov: (f64, f64), resolution: (u32, u32)) -> Self {
        Camera {
            rotation: UnitQuaternion::identity(),
            center: Vector3::zeros(),
            fov,
            resolution,
        }
    }

    pub fn focal(&self) -> (f64, f64) {
        let (w, h) = (self.resolution.0 as f64, self.resolution.1 as f64);
        (
            0.5 * w / (0.5 * self.fov.0).tan(),
            0.5 * h / (0.5 * self.fov.1).tan(),
        )
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (
            0.5 * self.resolution.0 as f64,
            0.5 * self.resolution.1 as f64,
        )
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (x - self.center)
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.inverse() * Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Project a world point; invisibility is a flag, not an error.
pub fn project(camera: &Camera, x: &Vector3<f64>, convention: RayDepthConvention) -> Projection {
    let p = camera.world_to_camera(x);
    let (fx, fy) = camera.focal();
    let (cx, cy) = camera.principal_point();
    let (w, h) = (camera.resolution.0 as f64, camera.resolution.1 as f64);
    let in_front = p.z > 1e-12;
    let z = if in_front { p.z } else { 1e-12 };
    let u = cx + fx * p.x / z;
    let v = cy + fy * p.y / z;
    let visible = in_front && (0.0..=w).contains(&u) && (0.0..=h).contains(&v);
    let ray_depth = match convention {
        RayDepthConvention::Distance => p.norm(),
        RayDepthConvention::ZDepth => p.z,
    };
    Projection {
        pixel: (u, v),
        ray_depth,
        visible,
    }
}

/// Cast the ray through a continuous pixel coordinate.
pub fn generate_ray(camera: &Camera, pixel: (f64, f64)) -> Result<Ray, GeometryError> {
    let (w, h) = (camera.resolution.0 as f64, camera.resolution.1 as f64);
    if !(0.0..=w).contains(&pixel.0) || !(0.0..=h).contains(&pixel.1) {
        return Err(GeometryError::PixelOutsideImage(
            pixel.0,
            pixel.1,
            camera.resolution.0,
            camera.resolution.1,
        ));
    }
    let (fx, fy) = camera.focal();
    let (cx, cy) = camera.principal_point();
    let dir_cam = Vector3::new((pixel.0 - cx) / fx, (pixel.1 - cy) / fy, 1.0).normalize();
    Ok(Ray {
        origin: camera.center,
        direction: camera.rotation.inverse() * dir_cam,
    })
}

/// Ray depth of a world point under the given convention.
pub fn ray_depth(camera: &Camera, x: &Vector3<f64>, convention: RayDepthConvention) -> f64 {
    match convention {
        RayDepthConvention::Distance => (x - camera.center).norm(),
        RayDepthConvention::ZDepth => camera.world_to_camera(x).z,
    }
}

pub fn encode_camera(camera: &Camera) -> CameraEncoding {
    let q = camera.rotation.quaternion();
    CameraEncoding([
        q.w,
        q.i,
        q.j,
        q.k,
        camera.center.x,
        camera.center.y,
        camera.center.z,
        camera.fov.0,
        camera.fov.1,
    ])
}

/// Decode a 9-vector, renormalizing the quaternion part.
pub fn decode_camera(
    g: &CameraEncoding,
    resolution: (u32, u32),
) -> Result<Camera, GeometryError> {
    let v = &g.0;
    let qn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    if qn < 1e-12 {
        return Err(GeometryError::ZeroQuaternion);
    }
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    Camera::new(
        q,
        Vector3::new(v[4], v[5], v[6]),
        (v[7], v[8]),
        resolution,
    )
}

/// Similarity transform aligning a source point set onto a target:
/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares Sim(3) between correspondences (Umeyama).
/// Requires at least 3 non-collinear pairs; the returned rotation is proper.
pub fn umeyama_sim3(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
) -> Result<Sim3, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch(source.len(), target.len()));
    }
    let n = source.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mu_s: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / nf;
    let mu_t: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / nf;

    let mut sigma = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let sc = s - mu_s;
        let tc = t - mu_t;
        sigma += tc * sc.transpose();
        var_s += sc.norm_squared();
    }
    sigma /= nf;
    var_s /= nf;

    let svd = SVD::new(sigma, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = svd.singular_values;
    // collinear sources have rank-1 covariance: rotation about the line is
    // unconstrained
    if d[1] <= 1e-12 * d[0].max(1e-300) {
        return Err(GeometryError::DegeneratePoints);
    }
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = (d[0] * s_diag.x + d[1] * s_diag.y + d[2] * s_diag.z) / var_s;
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// Per-pixel 3D points of a depth map, expressed in `reference`'s camera frame.
/// Depth 0 marks invalid pixels; the returned mask mirrors that.
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

pub fn unproject_depth_to_pointmap(
    depth: &[f64],
    width: usize,
    height: usize,
    camera: &Camera,
    reference: &Camera,
    convention: RayDepthConvention,
) -> Result<PointMap, GeometryError> {
    if width != camera.resolution.0 as usize || height != camera.resolution.1 as usize {
        return Err(GeometryError::ResolutionMismatch(
            width,
            height,
            camera.resolution.0,
            camera.resolution.1,
        ));
    }
    debug_assert_eq!(depth.len(), width * height);
    let (fx, fy) = camera.focal();
    let (cx, cy) = camera.principal_point();
    let rot_inv = camera.rotation.inverse();
    let mut points = vec![Vector3::zeros(); width * height];
    let mut valid = vec![false; width * height];
    for py in 0..height {
        for px in 0..width {
            let i = py * width + px;
            let d = depth[i];
            if d <= 0.0 {
                continue;
            }
            let u = px as f64 + 0.5;
            let v = py as f64 + 0.5;
            let dir_cam = Vector3::new((u - cx) / fx, (v - cy) / fy, 1.0);
            let p_cam = match convention {
                RayDepthConvention::Distance => dir_cam.normalize() * d,
                RayDepthConvention::ZDepth => dir_cam * d,
            };
            let world = camera.center + rot_inv * p_cam;
            points[i] = reference.world_to_camera(&world);
            valid[i] = true;
        }
    }
    Ok(PointMap {
        width,
        height,
        points,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CONV: RayDepthConvention = RayDepthConvention::Distance;

    fn test_camera() -> Camera {
        Camera::identity((1.0, 0.8), (64, 48))
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        let rotation = if axis.norm() > 1e-6 {
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        } else {
            UnitQuaternion::identity()
        };
        Camera::new(
            rotation,
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
            (rng.random_range(0.5..1.8), rng.random_range(0.5..1.8)),
            (64, 48),
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_point_hits_image_center() {
        let cam = test_camera();
        let p = project(&cam, &Vector3::new(0.0, 0.0, 2.0), CONV);
        assert!(p.visible);
        assert_relative_eq!(p.pixel.0, 32.0, epsilon = 1e-12);
        assert_relative_eq!(p.pixel.1, 24.0, epsilon = 1e-12);
        assert_relative_eq!(p.ray_depth, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn point_behind_camera_is_invisible() {
        let cam = test_camera();
        assert!(!project(&cam, &Vector3::new(0.0, 0.0, -1.0), CONV).visible);
    }

    #[test]
    fn frustum_corner_maps_to_image_corner() {
        let cam = test_camera();
        // direction through the (W, H) corner: tan(fov/2) at z = 1
        let x = Vector3::new((0.5f64).tan(), (0.4f64).tan(), 1.0) * 3.0;
        let p = project(&cam, &x, CONV);
        assert_relative_eq!(p.pixel.0, 64.0, epsilon = 1e-6);
        assert_relative_eq!(p.pixel.1, 48.0, epsilon = 1e-6);
    }

    #[test]
    fn center_pixel_ray_is_optical_axis() {
        let cam = test_camera();
        let ray = generate_ray(&cam, (32.0, 24.0)).unwrap();
        assert_relative_eq!(ray.direction.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ray_projection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let cam = random_camera(&mut rng);
            let pixel = (
                rng.random_range(0.0..cam.resolution.0 as f64),
                rng.random_range(0.0..cam.resolution.1 as f64),
            );
            let ray = generate_ray(&cam, pixel).unwrap();
            assert_relative_eq!(ray.direction.norm(), 1.0, epsilon = 1e-9);
            let t = rng.random_range(0.5..10.0);
            let p = project(&cam, &ray.at(t), CONV);
            assert_relative_eq!(p.pixel.0, pixel.0, epsilon = 1e-9);
            assert_relative_eq!(p.pixel.1, pixel.1, epsilon = 1e-9);
            // ray depth along a generated ray equals the parameter t
            assert_relative_eq!(p.ray_depth, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn distinct_pixels_give_nonparallel_rays() {
        let cam = test_camera();
        let r1 = generate_ray(&cam, (10.0, 10.0)).unwrap();
        let r2 = generate_ray(&cam, (50.0, 30.0)).unwrap();
        assert!(r1.direction.cross(&r2.direction).norm() > 1e-6);
    }

    #[test]
    fn pixel_outside_image_rejected() {
        let cam = test_camera();
        assert!(generate_ray(&cam, (-1.0, 10.0)).is_err());
        assert!(generate_ray(&cam, (10.0, 49.0)).is_err());
    }

    #[test]
    fn identity_camera_encoding_layout() {
        let cam = test_camera();
        let g = encode_camera(&cam);
        assert_eq!(
            g.0,
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.8]
        );
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let g = encode_camera(&cam);
            let back = decode_camera(&g, cam.resolution).unwrap();
            // up to quaternion sign
            let dot = cam.rotation.quaternion().dot(back.rotation.quaternion());
            assert!(dot.abs() > 1.0 - 1e-12);
            assert_relative_eq!((cam.center - back.center).norm(), 0.0, epsilon = 1e-12);
            assert_relative_eq!(cam.fov.0, back.fov.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scaled_quaternion_decodes_to_same_camera() {
        let cam = test_camera();
        let mut g = encode_camera(&cam);
        for v in g.0.iter_mut().take(4) {
            *v *= 2.0;
        }
        let back = decode_camera(&g, cam.resolution).unwrap();
        let dot = cam.rotation.quaternion().dot(back.rotation.quaternion());
        assert!(dot.abs() > 1.0 - 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        let g = CameraEncoding([0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1.0, 1.0]);
        assert!(matches!(
            decode_camera(&g, (8, 8)),
            Err(GeometryError::ZeroQuaternion)
        ));
    }

    #[test]
    fn umeyama_identity_for_equal_clouds() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let sim = umeyama_sim3(&pts, &pts).unwrap();
        assert_relative_eq!(sim.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!((sim.rotation - Matrix3::identity()).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(sim.translation.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn umeyama_recovers_constructed_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let r0 = random_camera(&mut rng).rotation.to_rotation_matrix();
            let t0 = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let src: Vec<Vector3<f64>> = (0..12)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let dst: Vec<Vector3<f64>> =
                src.iter().map(|p| 2.0 * (r0 * p) + t0).collect();
            let sim = umeyama_sim3(&src, &dst).unwrap();
            assert_relative_eq!(sim.scale, 2.0, epsilon = 1e-9);
            assert_relative_eq!(
                (sim.rotation - r0.into_inner()).norm(),
                0.0,
                epsilon = 1e-9
            );
            assert_relative_eq!((sim.translation - t0).norm(), 0.0, epsilon = 1e-9);
            assert_relative_eq!(sim.rotation.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn umeyama_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src: Vec<Vector3<f64>> = (0..8)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .map(|p| {
                1.5 * p
                    + Vector3::new(0.3, -0.2, 0.9)
                    + Vector3::new(
                        rng.random_range(-0.01..0.01),
                        rng.random_range(-0.01..0.01),
                        rng.random_range(-0.01..0.01),
                    )
            })
            .collect();
        let sim = umeyama_sim3(&src, &dst).unwrap();
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let src_p: Vec<_> = perm.iter().map(|&i| src[i]).collect();
        let dst_p: Vec<_> = perm.iter().map(|&i| dst[i]).collect();
        let sim_p = umeyama_sim3(&src_p, &dst_p).unwrap();
        assert_relative_eq!(sim.scale, sim_p.scale, epsilon = 1e-12);
        assert_relative_eq!((sim.rotation - sim_p.rotation).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            (sim.translation - sim_p.translation).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn umeyama_beats_random_candidates_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let src: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let r0 = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.7).to_rotation_matrix();
        let dst: Vec<Vector3<f64>> = src
            .iter()
            .map(|p| {
                1.3 * (r0 * p)
                    + Vector3::new(0.5, 0.1, -0.4)
                    + Vector3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                    )
            })
            .collect();
        let residual = |sim: &Sim3| -> f64 {
            src.iter()
                .zip(&dst)
                .map(|(s, d)| (sim.apply(s) - d).norm_squared())
                .sum::<f64>()
                / src.len() as f64
        };
        let best = residual(&umeyama_sim3(&src, &dst).unwrap());
        for _ in 0..1000 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let cand = Sim3 {
                scale: rng.random_range(0.5..2.0),
                rotation: if axis.norm() > 1e-9 {
                    UnitQuaternion::from_axis_angle(
                        &nalgebra::Unit::new_normalize(axis),
                        rng.random_range(-3.0..3.0),
                    )
                    .to_rotation_matrix()
                    .into_inner()
                } else {
                    Matrix3::identity()
                },
                translation: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            };
            assert!(best <= residual(&cand) + 1e-12);
        }
    }

    #[test]
    fn umeyama_rejects_degenerate_input() {
        let line: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.5 * i as f64))
            .collect();
        assert!(matches!(
            umeyama_sim3(&line, &line),
            Err(GeometryError::DegeneratePoints)
        ));
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(matches!(
            umeyama_sim3(&two, &two),
            Err(GeometryError::TooFewPoints(2))
        ));
    }

    #[test]
    fn unproject_center_pixel_in_own_frame() {
        let cam = test_camera();
        let (w, h) = (64usize, 48usize);
        let mut depth = vec![0.0; w * h];
        // center pixel (pixel centers at half-integers: use the pixel whose
        // center is closest to the principal point)
        depth[24 * w + 32] = 2.0;
        let pm = unproject_depth_to_pointmap(&depth, w, h, &cam, &cam, CONV).unwrap();
        let p = pm.points[24 * w + 32];
        assert!(pm.valid[24 * w + 32]);
        // pixel center (32.5, 24.5) is half a pixel off the principal point
        assert!(p.z > 1.99 && (p.x.abs() + p.y.abs()) < 0.15);
        assert_relative_eq!(p.norm(), 2.0, epsilon = 1e-12);
        assert!(!pm.valid[0]);
    }

    #[test]
    fn unproject_project_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = random_camera(&mut rng);
        let (w, h) = (
            cam.resolution.0 as usize,
            cam.resolution.1 as usize,
        );
        let mut depth = vec![0.0; w * h];
        for i in 0..depth.len() {
            depth[i] = rng.random_range(1.0..5.0);
        }
        let identity_ref = Camera::identity(cam.fov, cam.resolution);
        let pm = unproject_depth_to_pointmap(&depth, w, h, &cam, &identity_ref, CONV).unwrap();
        for py in (0..h).step_by(7) {
            for px in (0..w).step_by(5) {
                let i = py * w + px;
                // identity reference frame == world frame here
                let p = project(&cam, &pm.points[i], CONV);
                assert_relative_eq!(p.pixel.0, px as f64 + 0.5, epsilon = 1e-9);
                assert_relative_eq!(p.pixel.1, py as f64 + 0.5, epsilon = 1e-9);
                assert_relative_eq!(p.ray_depth, depth[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn translated_rigs_give_translated_pointmaps() {
        let cam_a = test_camera();
        let mut cam_b = cam_a.clone();
        cam_b.center += Vector3::new(0.4, -0.2, 0.1);
        let (w, h) = (64usize, 48usize);
        let depth = vec![2.5; w * h];
        let identity_ref = Camera::identity(cam_a.fov, cam_a.resolution);
        let pa = unproject_depth_to_pointmap(&depth, w, h, &cam_a, &identity_ref, CONV).unwrap();
        let pb = unproject_depth_to_pointmap(&depth, w, h, &cam_b, &identity_ref, CONV).unwrap();
        for i in 0..w * h {
            let delta = pb.points[i] - pa.points[i];
            assert_relative_eq!(
                (delta - Vector3::new(0.4, -0.2, 0.1)).norm(),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let cam = test_camera();
        let depth = vec![1.0; 10 * 10];
        assert!(matches!(
            unproject_depth_to_pointmap(&depth, 10, 10, &cam, &cam, CONV),
            Err(GeometryError::ResolutionMismatch(..))
        ));
    }
}
