//! The neural scene representation: per-view feature grids, multi-view
//! aggregation, positional embedding (with ablation modes), and the cascaded
//! geometry/appearance decoders.
//!
//! This module is the inference (value) path. The training path builds the
//! same computation on the autodiff tape (`train::graph`); both share the
//! projection/sampling conventions below and agree to float precision.

use crate::autodiff::{matmul_into, softplus, Tensor};
use crate::geometry::{
    decode_camera, project, Aabb, Camera, CameraEncoding, RayDepthConvention,
};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("viewing direction must be unit length, |v| = {0}")]
    NonUnitDirection(f64),
    #[error("view index {0} out of range ({1} views)")]
    ViewOutOfRange(usize, usize),
    #[error("unknown encoding mode '{0}'")]
    UnknownMode(String),
}

/// Positional-information injection strategy for query points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingMode {
    /// No spatial encoding: the embedding is a zero vector.
    None,
    /// Fixed sinusoidal encoding of the 3D coordinates.
    XyzPosenc,
    /// A small MLP applied to the 3D coordinates.
    XyzEmbed,
    /// Sum of per-view MLP embeddings of the point's ray depths (default).
    #[default]
    RaydepthEmbed,
}

impl EncodingMode {
    pub fn parse(s: &str) -> Result<Self, FieldError> {
        match s {
            "none" => Ok(EncodingMode::None),
            "xyz-posenc" => Ok(EncodingMode::XyzPosenc),
            "xyz-embed" => Ok(EncodingMode::XyzEmbed),
            "raydepth-embed" => Ok(EncodingMode::RaydepthEmbed),
            other => Err(FieldError::UnknownMode(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncodingMode::None => "none",
            EncodingMode::XyzPosenc => "xyz-posenc",
            EncodingMode::XyzEmbed => "xyz-embed",
            EncodingMode::RaydepthEmbed => "raydepth-embed",
        }
    }
}

/// Architecture sizes. Defaults are the desk-scale training profile; all of
/// them are configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Per-view feature grid side length.
    pub grid_size: usize,
    /// Feature channels C.
    pub grid_channels: usize,
    /// Positional embedding width C_d.
    pub embed_dim: usize,
    /// Hidden width of the ray-depth / xyz embedding MLP (2 hidden layers).
    pub embed_hidden: usize,
    /// Geometry decoder layer count (skip connection at layer 4).
    pub geo_layers: usize,
    pub geo_hidden: usize,
    /// Intermediate appearance feature width C_app.
    pub app_feat_dim: usize,
    /// Appearance decoder hidden width (2 layers).
    pub app_hidden: usize,
    /// Octaves for the xyz positional encoding.
    pub posenc_octaves_xyz: usize,
    /// Octaves for the viewing-direction encoding.
    pub posenc_octaves_view: usize,
    pub depth_head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            grid_size: 16,
            grid_channels: 16,
            embed_dim: 32,
            embed_hidden: 24,
            geo_layers: 8,
            geo_hidden: 32,
            app_feat_dim: 32,
            app_hidden: 32,
            posenc_octaves_xyz: 6,
            posenc_octaves_view: 4,
            depth_head_hidden: 32,
        }
    }
}

impl ModelDims {
    /// Geometry decoder input width.
    pub fn geo_input(&self) -> usize {
        self.grid_channels + self.embed_dim
    }

    /// Appearance decoder input width: ẑ ⊕ n̂ ⊕ γ(v).
    pub fn app_input(&self) -> usize {
        self.app_feat_dim + 3 + 2 * self.posenc_octaves_view * 3
    }

    pub fn posenc_xyz_dim(&self) -> usize {
        2 * self.posenc_octaves_xyz * 3
    }
}

/// Softplus MLP with linear output and an optional input skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// Per-layer (weights [in,out], bias [out]).
    pub layers: Vec<(Tensor, Tensor)>,
    /// 1-based layer index whose input is concat(hidden, mlp input).
    pub skip_at: Option<usize>,
}

impl Mlp {
    /// Xavier-uniform initialization.
    pub fn init(
        rng: &mut ChaCha8Rng,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        skip_at: Option<usize>,
    ) -> Mlp {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut fan_in = if l == 0 { input } else { hidden };
            if skip_at == Some(l + 1) && l > 0 {
                fan_in += input;
            }
            let fan_out = if l + 1 == layers { output } else { hidden };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Tensor::new(
                vec![fan_in, fan_out],
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..a))
                    .collect(),
            )
            .expect("weight shape");
            let b = Tensor::zeros(&[fan_out]);
            out.push((w, b));
        }
        Mlp {
            layers: out,
            skip_at,
        }
    }

    /// Forward pass for a single input row. Hidden activations are softplus,
    /// the last layer is linear. Accumulation order matches the tape matmul.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let n = self.layers.len();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let joined;
            let x: &[f64] = if self.skip_at == Some(l + 1) && l > 0 {
                joined = [h.as_slice(), input].concat();
                &joined
            } else {
                &h
            };
            let (fan_in, fan_out) = (w.rows(), w.cols());
            debug_assert_eq!(x.len(), fan_in);
            let mut out = b.data().to_vec();
            matmul_into(x, w.data(), &mut out, 1, fan_in, fan_out, false, false);
            if l + 1 < n {
                for v in &mut out {
                    *v = softplus(*v);
                }
            }
            h = out;
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.numel() + b.numel())
            .sum()
    }
}

/// NeRF-style positional encoding: per octave l, sin(2^l π v) then
/// cos(2^l π v) over all components.
pub fn positional_encoding(v: &[f64], octaves: usize) -> Vec<f64> {
    assert!(octaves >= 1);
    let mut out = Vec::with_capacity(2 * octaves * v.len());
    for l in 0..octaves {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        for &x in v {
            out.push((f * x).sin());
        }
        for &x in v {
            out.push((f * x).cos());
        }
    }
    out
}

/// Output of one continuous query.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub sdf: f64,
    /// Intermediate appearance feature ẑ.
    pub appearance: Vec<f64>,
    /// Finite-difference SDF gradient (not normalized).
    pub gradient: Vector3<f64>,
    /// View-dependent color in [0,1]³.
    pub color: [f64; 3],
}

/// All learnable state of one scene fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub dims: ModelDims,
    pub mode: EncodingMode,
    /// One [S², C] feature grid per view.
    pub grids: Vec<Tensor>,
    /// Positional embedding MLP (input 1 for ray depth, 3 for xyz-embed).
    pub embed: Mlp,
    /// Fixed projection of the xyz positional encoding onto C_d (only used
    /// when the encoding is wider than C_d; seeded, not trainable).
    pub posenc_proj: Option<Tensor>,
    pub geometry: Mlp,
    pub appearance: Mlp,
    pub depth_head: Mlp,
    /// Learnable per-view camera encodings; index 0 is frozen.
    pub camera_g: Vec<Tensor>,
    pub camera_resolution: (u32, u32),
    /// β = exp(beta_raw), shared density sharpness.
    pub beta_raw: Tensor,
    /// Canonical-frame bounds of the scene (the training region).
    pub bounds: Aabb,
    pub convention: RayDepthConvention,
    pub background: [f64; 3],
    /// Mean ground-truth depth of the training sequence.
    pub sequence_norm: f64,
}

/// Finite-difference step for SDF spatial gradients, as a fraction of the
/// scene scale.
pub const SDF_GRAD_STEP_FRAC: f64 = 1e-3;

impl SceneModel {
    pub fn new(
        dims: ModelDims,
        mode: EncodingMode,
        camera_g: Vec<Tensor>,
        camera_resolution: (u32, u32),
        bounds: Aabb,
        convention: RayDepthConvention,
        background: [f64; 3],
        sequence_norm: f64,
        beta_init: f64,
        seed: u64,
    ) -> SceneModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = camera_g.len();
        let grids = (0..n)
            .map(|_| {
                Tensor::new(
                    vec![dims.grid_size * dims.grid_size, dims.grid_channels],
                    (0..dims.grid_size * dims.grid_size * dims.grid_channels)
                        .map(|_| rng.random_range(-0.05..0.05))
                        .collect(),
                )
                .expect("grid shape")
            })
            .collect();
        let embed_input = match mode {
            EncodingMode::XyzEmbed => 3,
            _ => 1,
        };
        let embed = Mlp::init(
            &mut rng,
            embed_input,
            dims.embed_hidden,
            3,
            dims.embed_dim,
            None,
        );
        let posenc_proj = (dims.posenc_xyz_dim() > dims.embed_dim).then(|| {
            let rows = dims.posenc_xyz_dim();
            let a = (1.0 / rows as f64).sqrt();
            Tensor::new(
                vec![rows, dims.embed_dim],
                (0..rows * dims.embed_dim)
                    .map(|_| rng.random_range(-a..a))
                    .collect(),
            )
            .expect("proj shape")
        });
        let geometry = Mlp::init(
            &mut rng,
            dims.geo_input(),
            dims.geo_hidden,
            dims.geo_layers,
            1 + dims.app_feat_dim,
            Some(4),
        );
        let appearance = Mlp::init(&mut rng, dims.app_input(), dims.app_hidden, 2, 3, None);
        let mut depth_head = Mlp::init(
            &mut rng,
            dims.grid_channels,
            dims.depth_head_hidden,
            2,
            2,
            None,
        );
        // start the depth head near the sequence mean with unit confidence
        depth_head.layers.last_mut().expect("two layers").1.data_mut()[0] = sequence_norm;
        SceneModel {
            dims,
            mode,
            grids,
            embed,
            posenc_proj,
            geometry,
            appearance,
            depth_head,
            camera_g,
            camera_resolution,
            beta_raw: Tensor::scalar(beta_init.ln()),
            bounds,
            convention,
            background,
            sequence_norm,
        }
    }

    pub fn num_views(&self) -> usize {
        self.grids.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta_raw.item().exp()
    }

    pub fn scene_scale(&self) -> f64 {
        self.bounds.scale()
    }

    pub fn camera(&self, i: usize) -> Camera {
        let g = &self.camera_g[i];
        decode_camera(
            &CameraEncoding(g.data().try_into().expect("9-vector")),
            self.camera_resolution,
        )
        .expect("stored encodings stay decodable")
    }

    pub fn cameras(&self) -> Vec<Camera> {
        (0..self.num_views()).map(|i| self.camera(i)).collect()
    }

    /// Trainable parameters in a fixed order: (name, tensor, weight-decay).
    /// Camera encodings and β are excluded from weight decay; view 0's
    /// camera is frozen and not listed.
    pub fn params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for (i, g) in self.grids.iter().enumerate() {
            out.push((format!("grid.{i}"), g, true));
        }
        for (name, mlp) in [
            ("embed", &self.embed),
            ("geometry", &self.geometry),
            ("appearance", &self.appearance),
            ("depth_head", &self.depth_head),
        ] {
            for (l, (w, b)) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.w{l}"), w, true));
                out.push((format!("{name}.b{l}"), b, true));
            }
        }
        for (i, g) in self.camera_g.iter().enumerate().skip(1) {
            out.push((format!("camera.{i}"), g, false));
        }
        out.push(("beta_raw".into(), &self.beta_raw, false));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out: Vec<(String, &mut Tensor, bool)> = Vec::new();
        for (i, g) in self.grids.iter_mut().enumerate() {
            out.push((format!("grid.{i}"), g, true));
        }
        for (name, mlp) in [
            ("embed", &mut self.embed),
            ("geometry", &mut self.geometry),
            ("appearance", &mut self.appearance),
            ("depth_head", &mut self.depth_head),
        ] {
            for (l, (w, b)) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("{name}.w{l}"), w, true));
                out.push((format!("{name}.b{l}"), b, true));
            }
        }
        for (i, g) in self.camera_g.iter_mut().enumerate().skip(1) {
            out.push((format!("camera.{i}"), g, false));
        }
        out.push(("beta_raw".into(), &mut self.beta_raw, false));
        out
    }

    /// Pixel coordinates → grid index space, corner-aligned: the image
    /// rectangle [0,W]×[0,H] maps onto [0,S−1]² exactly, so visible points
    /// never touch the clamp region and sampling stays smooth in the
    /// camera parameters. The expression matches the training tape
    /// bit-for-bit.
    pub fn grid_coords(&self, pixel: (f64, f64)) -> (f64, f64) {
        let s = (self.dims.grid_size - 1) as f64;
        let (w, h) = (
            self.camera_resolution.0 as f64,
            self.camera_resolution.1 as f64,
        );
        (pixel.0 * (s / w), pixel.1 * (s / h))
    }

    fn bilinear_grid(&self, view: usize, gx: f64, gy: f64, out: &mut [f64]) {
        let s = self.dims.grid_size;
        let c = self.dims.grid_channels;
        let gd = self.grids[view].data();
        let gxc = gx.clamp(0.0, (s - 1) as f64);
        let gyc = gy.clamp(0.0, (s - 1) as f64);
        let x0 = (gxc.floor() as usize).min(s - 2);
        let y0 = (gyc.floor() as usize).min(s - 2);
        let (tx, ty) = (gxc - x0 as f64, gyc - y0 as f64);
        let f00 = &gd[(y0 * s + x0) * c..];
        let f01 = &gd[(y0 * s + x0 + 1) * c..];
        let f10 = &gd[((y0 + 1) * s + x0) * c..];
        let f11 = &gd[((y0 + 1) * s + x0 + 1) * c..];
        for j in 0..c {
            out[j] = (1.0 - ty) * ((1.0 - tx) * f00[j] + tx * f01[j])
                + ty * ((1.0 - tx) * f10[j] + tx * f11[j]);
        }
    }

    /// Sum of bilinearly sampled per-view features over views where the
    /// point is visible. Returns the aggregated feature and the valid views.
    pub fn aggregate_features(
        &self,
        x: &Vector3<f64>,
        context: Option<&[usize]>,
        cameras: &[Camera],
    ) -> (Vec<f64>, Vec<usize>) {
        let c = self.dims.grid_channels;
        let mut z_f = vec![0.0; c];
        let mut valid = Vec::new();
        let mut sample = vec![0.0; c];
        let all: Vec<usize>;
        let views = match context {
            Some(v) => v,
            None => {
                all = (0..self.num_views()).collect();
                &all
            }
        };
        for &i in views {
            let p = project(&cameras[i], x, self.convention);
            if !p.visible {
                continue;
            }
            let (gx, gy) = self.grid_coords(p.pixel);
            self.bilinear_grid(i, gx, gy, &mut sample);
            for j in 0..c {
                z_f[j] += sample[j];
            }
            valid.push(i);
        }
        (z_f, valid)
    }

    /// Positional embedding z_d for a query point under the active mode.
    pub fn embed_position(
        &self,
        x: &Vector3<f64>,
        valid_views: &[usize],
        cameras: &[Camera],
    ) -> Vec<f64> {
        let cd = self.dims.embed_dim;
        match self.mode {
            EncodingMode::None => vec![0.0; cd],
            EncodingMode::RaydepthEmbed => {
                let mut z_d = vec![0.0; cd];
                for &i in valid_views {
                    let d = crate::geometry::ray_depth(&cameras[i], x, self.convention);
                    let e = self.embed.forward(&[d]);
                    for j in 0..cd {
                        z_d[j] += e[j];
                    }
                }
                z_d
            }
            EncodingMode::XyzEmbed => self.embed.forward(&[x.x, x.y, x.z]),
            EncodingMode::XyzPosenc => {
                let enc = positional_encoding(&[x.x, x.y, x.z], self.dims.posenc_octaves_xyz);
                match &self.posenc_proj {
                    Some(proj) => {
                        let mut out = vec![0.0; cd];
                        matmul_into(&enc, proj.data(), &mut out, 1, enc.len(), cd, false, false);
                        out
                    }
                    None => {
                        let mut out = enc;
                        out.resize(cd, 0.0);
                        out
                    }
                }
            }
        }
    }

    /// Geometry decoder: spatial feature → (ŝ, ẑ).
    pub fn decode_geometry(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let out = self.geometry.forward(z);
        (out[0], out[1..].to_vec())
    }

    /// ŝ at a point (no appearance, no gradient).
    pub fn sdf_at(&self, x: &Vector3<f64>, context: Option<&[usize]>, cameras: &[Camera]) -> f64 {
        let (z_f, valid) = self.aggregate_features(x, context, cameras);
        let z_d = self.embed_position(x, &valid, cameras);
        let z = [z_f, z_d].concat();
        self.geometry.forward(&z)[0]
    }

    /// Central-difference SDF gradient of the full query (six extra forward
    /// evaluations; not normalized).
    pub fn sdf_gradient(
        &self,
        x: &Vector3<f64>,
        context: Option<&[usize]>,
        cameras: &[Camera],
    ) -> Vector3<f64> {
        let eps = SDF_GRAD_STEP_FRAC * self.scene_scale();
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut hi = *x;
            let mut lo = *x;
            hi[k] += eps;
            lo[k] -= eps;
            g[k] = (self.sdf_at(&hi, context, cameras) - self.sdf_at(&lo, context, cameras))
                / (2.0 * eps);
        }
        g
    }

    /// Full continuous query: ŝ, ẑ, n̂, ĉ.
    pub fn query(
        &self,
        x: &Vector3<f64>,
        v: &Vector3<f64>,
        context: Option<&[usize]>,
    ) -> Result<QueryResult, FieldError> {
        let cameras = self.cameras();
        self.query_with_cameras(x, v, context, &cameras)
    }

    /// As [`query`], with pre-decoded cameras (hot loop variant).
    pub fn query_with_cameras(
        &self,
        x: &Vector3<f64>,
        v: &Vector3<f64>,
        context: Option<&[usize]>,
        cameras: &[Camera],
    ) -> Result<QueryResult, FieldError> {
        let vn = v.norm();
        if (vn - 1.0).abs() > 1e-6 {
            return Err(FieldError::NonUnitDirection(vn));
        }
        let (z_f, valid) = self.aggregate_features(x, context, cameras);
        let z_d = self.embed_position(x, &valid, cameras);
        let z = [z_f, z_d].concat();
        let (sdf, zhat) = self.decode_geometry(&z);
        let gradient = self.sdf_gradient(x, context, cameras);
        let color = self.decode_appearance(&zhat, &gradient, v);
        Ok(QueryResult {
            sdf,
            appearance: zhat,
            gradient,
            color,
        })
    }

    /// Appearance decoder: (ẑ, n̂, γ(v)) → sigmoid RGB.
    pub fn decode_appearance(
        &self,
        zhat: &[f64],
        gradient: &Vector3<f64>,
        v: &Vector3<f64>,
    ) -> [f64; 3] {
        let gv = positional_encoding(&[v.x, v.y, v.z], self.dims.posenc_octaves_view);
        let mut input = Vec::with_capacity(self.dims.app_input());
        input.extend_from_slice(zhat);
        input.extend_from_slice(&[gradient.x, gradient.y, gradient.z]);
        input.extend_from_slice(&gv);
        let raw = self.appearance.forward(&input);
        // sigmoid written as exp(−softplus(−x)) to match the tape path
        let sig = |x: f64| (-softplus(-x)).exp();
        [sig(raw[0]), sig(raw[1]), sig(raw[2])]
    }

    /// Per-view depth and uncertainty maps at image resolution: the head runs
    /// on the grid cells, then both channels are bilinearly upsampled; Σ is
    /// exponentiated after upsampling so it stays positive.
    pub fn predict_view_depth(&self, view: usize) -> Result<(Vec<f64>, Vec<f64>), FieldError> {
        if view >= self.num_views() {
            return Err(FieldError::ViewOutOfRange(view, self.num_views()));
        }
        let s = self.dims.grid_size;
        let c = self.dims.grid_channels;
        let gd = self.grids[view].data();
        let mut head_out = vec![0.0; s * s * 2];
        for cell in 0..s * s {
            let o = self.depth_head.forward(&gd[cell * c..(cell + 1) * c]);
            head_out[cell * 2] = o[0];
            head_out[cell * 2 + 1] = o[1];
        }
        let (w, h) = (
            self.camera_resolution.0 as usize,
            self.camera_resolution.1 as usize,
        );
        let mut depth = vec![0.0; w * h];
        let mut sigma = vec![0.0; w * h];
        for py in 0..h {
            for px in 0..w {
                let (gx, gy) = self.grid_coords((px as f64 + 0.5, py as f64 + 0.5));
                let gxc = gx.clamp(0.0, (s - 1) as f64);
                let gyc = gy.clamp(0.0, (s - 1) as f64);
                let x0 = (gxc.floor() as usize).min(s - 2);
                let y0 = (gyc.floor() as usize).min(s - 2);
                let (tx, ty) = (gxc - x0 as f64, gyc - y0 as f64);
                let mut acc = [0.0; 2];
                for (j, a) in acc.iter_mut().enumerate() {
                    let f00 = head_out[(y0 * s + x0) * 2 + j];
                    let f01 = head_out[(y0 * s + x0 + 1) * 2 + j];
                    let f10 = head_out[((y0 + 1) * s + x0) * 2 + j];
                    let f11 = head_out[((y0 + 1) * s + x0 + 1) * 2 + j];
                    *a = (1.0 - ty) * ((1.0 - tx) * f00 + tx * f01)
                        + ty * ((1.0 - tx) * f10 + tx * f11);
                }
                let i = py * w + px;
                depth[i] = acc[0];
                sigma[i] = acc[1].exp();
            }
        }
        Ok((depth, sigma))
    }
}

/// One combined field sample used by the renderer.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample {
    pub sdf: f64,
    pub gradient: Vector3<f64>,
    pub color: [f64; 3],
}

/// A queryable SDF field: the trained model or an analytic stand-in.
pub trait SdfField {
    fn sdf(&self, x: &Vector3<f64>) -> f64;
    /// Finite-difference gradient with the step the field considers right.
    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64>;
    /// View-dependent color at a point.
    fn color(&self, x: &Vector3<f64>, v: &Vector3<f64>) -> [f64; 3];
    fn bounds(&self) -> Aabb;

    /// sdf + gradient + color in one call (overridden where one pass is
    /// cheaper than three).
    fn query_full(&self, x: &Vector3<f64>, v: &Vector3<f64>) -> FieldSample {
        FieldSample {
            sdf: self.sdf(x),
            gradient: self.gradient(x),
            color: self.color(x, v),
        }
    }
}

/// The trained model as a field, with a fixed context-view subset and
/// pre-decoded cameras.
pub struct ModelField<'a> {
    pub model: &'a SceneModel,
    pub cameras: Vec<Camera>,
    pub context: Option<Vec<usize>>,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a SceneModel) -> Self {
        ModelField {
            cameras: model.cameras(),
            model,
            context: None,
        }
    }

    fn ctx(&self) -> Option<&[usize]> {
        self.context.as_deref()
    }
}

impl SdfField for ModelField<'_> {
    fn sdf(&self, x: &Vector3<f64>) -> f64 {
        self.model.sdf_at(x, self.ctx(), &self.cameras)
    }

    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.model.sdf_gradient(x, self.ctx(), &self.cameras)
    }

    fn color(&self, x: &Vector3<f64>, v: &Vector3<f64>) -> [f64; 3] {
        self.model
            .query_with_cameras(x, v, self.ctx(), &self.cameras)
            .map(|q| q.color)
            .unwrap_or([0.0; 3])
    }

    fn bounds(&self) -> Aabb {
        self.model.bounds
    }

    fn query_full(&self, x: &Vector3<f64>, v: &Vector3<f64>) -> FieldSample {
        match self.model.query_with_cameras(x, v, self.ctx(), &self.cameras) {
            Ok(q) => FieldSample {
                sdf: q.sdf,
                gradient: q.gradient,
                color: q.color,
            },
            Err(_) => FieldSample {
                sdf: 0.0,
                gradient: Vector3::zeros(),
                color: [0.0; 3],
            },
        }
    }
}

/// Analytic scene injected in place of the learned field (oracle tests).
pub struct AnalyticField<'a> {
    pub scene: &'a crate::scenegen::AnalyticScene,
    /// Flat color returned everywhere.
    pub albedo: [f64; 3],
}

impl SdfField for AnalyticField<'_> {
    fn sdf(&self, x: &Vector3<f64>) -> f64 {
        self.scene.sdf(x)
    }

    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scene
            .fd_gradient(x, SDF_GRAD_STEP_FRAC * self.scene.scale())
    }

    fn color(&self, _x: &Vector3<f64>, _v: &Vector3<f64>) -> [f64; 3] {
        self.albedo
    }

    fn bounds(&self) -> Aabb {
        self.scene.bounds
    }
}

/// A rigged linear field ŝ(x) = a·x + b (gradient oracles).
pub struct LinearField {
    pub a: Vector3<f64>,
    pub b: f64,
    pub bounds: Aabb,
}

impl SdfField for LinearField {
    fn sdf(&self, x: &Vector3<f64>) -> f64 {
        self.a.dot(x) + self.b
    }

    fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let eps = SDF_GRAD_STEP_FRAC * self.bounds.scale();
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut hi = *x;
            let mut lo = *x;
            hi[k] += eps;
            lo[k] -= eps;
            g[k] = (self.sdf(&hi) - self.sdf(&lo)) / (2.0 * eps);
        }
        g
    }

    fn color(&self, _x: &Vector3<f64>, _v: &Vector3<f64>) -> [f64; 3] {
        [0.5; 3]
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}
