//! Builds the per-step training computation on the autodiff tape.
//!
//! The graph mirrors the field/render value path exactly (same projection,
//! sampling, and compositing conventions); sample depths, visibility masks,
//! and loss masks are frozen per step so the recorded tape is a smooth
//! function of the parameters, which keeps finite-difference checks honest.

use crate::autodiff::{NodeId, Op, Tape, TapeError, Tensor};
use crate::field::{EncodingMode, SceneModel, SDF_GRAD_STEP_FRAC};
use crate::losses::{LossWeights, RegularizationBatch};
use std::collections::BTreeMap;

/// Node ids of all registered model leaves.
pub struct GraphModel {
    /// Trainable leaves, aligned with `SceneModel::params()` order.
    pub param_nodes: Vec<NodeId>,
    grids: Vec<NodeId>,
    embed: Vec<(NodeId, NodeId)>,
    geometry: Vec<(NodeId, NodeId)>,
    appearance: Vec<(NodeId, NodeId)>,
    depth_head: Vec<(NodeId, NodeId)>,
    /// All views; index 0 is a frozen constant leaf.
    camera_g: Vec<NodeId>,
    beta_raw: NodeId,
    posenc_proj: Option<NodeId>,
    /// (q, center, fov) slices per view, built once.
    camera_parts: Vec<(NodeId, NodeId, NodeId)>,
    dims: crate::field::ModelDims,
    mode: EncodingMode,
    resolution: (u32, u32),
    grad_step: f64,
}

impl GraphModel {
    pub fn register(tape: &mut Tape, model: &SceneModel) -> Result<GraphModel, TapeError> {
        let mut param_nodes = Vec::new();
        let grids: Vec<NodeId> = model
            .grids
            .iter()
            .map(|g| {
                let id = tape.param(g.clone());
                param_nodes.push(id);
                id
            })
            .collect();
        let mut reg_mlp = |tape: &mut Tape, mlp: &crate::field::Mlp| -> Vec<(NodeId, NodeId)> {
            mlp.layers
                .iter()
                .map(|(w, b)| {
                    let wi = tape.param(w.clone());
                    param_nodes.push(wi);
                    let bi = tape.param(b.clone());
                    param_nodes.push(bi);
                    (wi, bi)
                })
                .collect()
        };
        let embed = reg_mlp(tape, &model.embed);
        let geometry = reg_mlp(tape, &model.geometry);
        let appearance = reg_mlp(tape, &model.appearance);
        let depth_head = reg_mlp(tape, &model.depth_head);
        let mut camera_g = Vec::with_capacity(model.num_views());
        for (i, g) in model.camera_g.iter().enumerate() {
            if i == 0 {
                camera_g.push(tape.leaf(g.clone()));
            } else {
                let id = tape.param(g.clone());
                param_nodes.push(id);
                camera_g.push(id);
            }
        }
        let beta_raw = tape.param(model.beta_raw.clone());
        param_nodes.push(beta_raw);
        let posenc_proj = model.posenc_proj.as_ref().map(|p| tape.leaf(p.clone()));

        let mut camera_parts = Vec::with_capacity(camera_g.len());
        for &g in &camera_g {
            let q = tape.push(Op::SliceCols { start: 0, len: 4 }, &[g])?;
            let c = tape.push(Op::SliceCols { start: 4, len: 3 }, &[g])?;
            let fov = tape.push(Op::SliceCols { start: 7, len: 2 }, &[g])?;
            camera_parts.push((q, c, fov));
        }
        Ok(GraphModel {
            param_nodes,
            grids,
            embed,
            geometry,
            appearance,
            depth_head,
            camera_g,
            beta_raw,
            posenc_proj,
            camera_parts,
            dims: model.dims.clone(),
            mode: model.mode,
            resolution: model.camera_resolution,
            grad_step: SDF_GRAD_STEP_FRAC * model.scene_scale(),
        })
    }

    pub fn beta_node(&self) -> NodeId {
        self.beta_raw
    }

    pub fn camera_node(&self, view: usize) -> NodeId {
        self.camera_g[view]
    }

    pub fn camera_part_nodes(&self, view: usize) -> (NodeId, NodeId, NodeId) {
        self.camera_parts[view]
    }

    pub fn grid_node(&self, view: usize) -> NodeId {
        self.grids[view]
    }

    fn mlp_forward(
        &self,
        tape: &mut Tape,
        layers: &[(NodeId, NodeId)],
        input: NodeId,
        skip_at: Option<usize>,
        slice_out: Option<usize>,
    ) -> Result<NodeId, TapeError> {
        let n = layers.len();
        let mut h = input;
        for (l, &(w, b)) in layers.iter().enumerate() {
            let x = if skip_at == Some(l + 1) && l > 0 {
                tape.push(Op::Concat, &[h, input])?
            } else {
                h
            };
            let (w, b) = if l + 1 == n {
                match slice_out {
                    Some(len) => (
                        tape.push(Op::SliceCols { start: 0, len }, &[w])?,
                        tape.push(Op::SliceCols { start: 0, len }, &[b])?,
                    ),
                    None => (w, b),
                }
            } else {
                (w, b)
            };
            let mm = tape.push(Op::Matmul, &[x, w])?;
            let lin = tape.push(Op::Add, &[mm, b])?;
            h = if l + 1 < n {
                tape.push(Op::Softplus, &[lin])?
            } else {
                lin
            };
        }
        Ok(h)
    }

    fn posenc(
        &self,
        tape: &mut Tape,
        input: NodeId,
        octaves: usize,
    ) -> Result<NodeId, TapeError> {
        let mut parts = Vec::with_capacity(2 * octaves);
        for l in 0..octaves {
            let f = (1u64 << l) as f64 * std::f64::consts::PI;
            let fc = tape.leaf(Tensor::scalar(f));
            let scaled = tape.push(Op::Mul, &[input, fc])?;
            parts.push(tape.push(Op::Sin, &[scaled])?);
            parts.push(tape.push(Op::Cos, &[scaled])?);
        }
        tape.push(Op::Concat, &parts)
    }

    /// Full SDF pipeline for a positions node `[B,3]`: multi-view feature
    /// aggregation, positional embedding, geometry decoder. Visibility masks
    /// are frozen constants derived from the tape's own forward values.
    pub fn sdf_forward(
        &self,
        tape: &mut Tape,
        positions: NodeId,
        context: &[usize],
        sdf_only: bool,
    ) -> Result<(NodeId, Option<NodeId>), TapeError> {
        let b = tape.value(positions).rows();
        let (iw, ih) = (self.resolution.0 as f64, self.resolution.1 as f64);
        let s = self.dims.grid_size as f64;
        let cd = self.dims.embed_dim;

        let mut z_f: Option<NodeId> = None;
        let mut z_d: Option<NodeId> = None;
        for &view in context {
            let (q, c, fov) = self.camera_parts[view];
            let campts = tape.push(Op::WorldToCamera, &[q, c, positions])?;
            let proj = tape.push(
                Op::PinholeProject {
                    width: iw,
                    height: ih,
                },
                &[campts, fov],
            )?;
            // frozen visibility: in front and inside the image rectangle
            let mask = {
                let cp = tape.value(campts);
                let pr = tape.value(proj);
                let mut m = vec![0.0; b];
                for i in 0..b {
                    let z = cp.data()[i * 3 + 2];
                    let (u, v) = (pr.data()[i * 3], pr.data()[i * 3 + 1]);
                    if z > 1e-12 && (0.0..=iw).contains(&u) && (0.0..=ih).contains(&v) {
                        m[i] = 1.0;
                    }
                }
                tape.leaf(Tensor::from_rows(b, 1, m).expect("mask"))
            };
            let uv = tape.push(Op::SliceCols { start: 0, len: 2 }, &[proj])?;
            let scale = tape.leaf(
                Tensor::from_rows(1, 2, vec![(s - 1.0) / iw, (s - 1.0) / ih]).expect("scale"),
            );
            let gc = tape.push(Op::Mul, &[uv, scale])?;
            let feats = tape.push(
                Op::BilinearSample {
                    height: self.dims.grid_size,
                    width: self.dims.grid_size,
                },
                &[self.grids[view], gc],
            )?;
            let fm = tape.push(Op::Mul, &[feats, mask])?;
            z_f = Some(match z_f {
                Some(acc) => tape.push(Op::Add, &[acc, fm])?,
                None => fm,
            });
            if self.mode == EncodingMode::RaydepthEmbed {
                let d = tape.push(Op::SliceCols { start: 2, len: 1 }, &[proj])?;
                let e = self.mlp_forward(tape, &self.embed, d, None, None)?;
                let em = tape.push(Op::Mul, &[e, mask])?;
                z_d = Some(match z_d {
                    Some(acc) => tape.push(Op::Add, &[acc, em])?,
                    None => em,
                });
            }
        }
        let z_f = match z_f {
            Some(n) => n,
            None => tape.leaf(Tensor::zeros(&[b, self.dims.grid_channels])),
        };
        let z_d = match self.mode {
            EncodingMode::None => tape.leaf(Tensor::zeros(&[b, cd])),
            EncodingMode::RaydepthEmbed => match z_d {
                Some(n) => n,
                None => tape.leaf(Tensor::zeros(&[b, cd])),
            },
            EncodingMode::XyzEmbed => self.mlp_forward(tape, &self.embed, positions, None, None)?,
            EncodingMode::XyzPosenc => {
                let enc = self.posenc(tape, positions, self.dims.posenc_octaves_xyz)?;
                match self.posenc_proj {
                    Some(proj) => tape.push(Op::Matmul, &[enc, proj])?,
                    None => {
                        let pad = cd - self.dims.posenc_xyz_dim();
                        if pad == 0 {
                            enc
                        } else {
                            let zeros = tape.leaf(Tensor::zeros(&[b, pad]));
                            tape.push(Op::Concat, &[enc, zeros])?
                        }
                    }
                }
            }
        };
        let z = tape.push(Op::Concat, &[z_f, z_d])?;
        let out = self.mlp_forward(
            tape,
            &self.geometry,
            z,
            Some(4),
            sdf_only.then_some(1),
        )?;
        if sdf_only {
            Ok((out, None))
        } else {
            let sdf = tape.push(Op::SliceCols { start: 0, len: 1 }, &[out])?;
            let zhat = tape.push(
                Op::SliceCols {
                    start: 1,
                    len: self.dims.app_feat_dim,
                },
                &[out],
            )?;
            Ok((sdf, Some(zhat)))
        }
    }

    /// Central-difference SDF gradient (six extra pipeline runs) `[B,3]`.
    pub fn fd_normal(
        &self,
        tape: &mut Tape,
        positions: NodeId,
        context: &[usize],
    ) -> Result<NodeId, TapeError> {
        let eps = self.grad_step;
        let inv = tape.leaf(Tensor::scalar(1.0 / (2.0 * eps)));
        let mut comps = Vec::with_capacity(3);
        for k in 0..3 {
            let mut off = vec![0.0; 3];
            off[k] = eps;
            let off_p = tape.leaf(Tensor::from_rows(1, 3, off.clone()).expect("offset"));
            let pos_p = tape.push(Op::Add, &[positions, off_p])?;
            let pos_m = tape.push(Op::Sub, &[positions, off_p])?;
            let (sp, _) = self.sdf_forward(tape, pos_p, context, true)?;
            let (sm, _) = self.sdf_forward(tape, pos_m, context, true)?;
            let diff = tape.push(Op::Sub, &[sp, sm])?;
            comps.push(tape.push(Op::Mul, &[diff, inv])?);
        }
        tape.push(Op::Concat, &comps)
    }

    /// Appearance decoder with the composed-sigmoid output.
    pub fn appearance_forward(
        &self,
        tape: &mut Tape,
        zhat: NodeId,
        normal: NodeId,
        dirs: NodeId,
    ) -> Result<NodeId, TapeError> {
        let gv = self.posenc(tape, dirs, self.dims.posenc_octaves_view)?;
        let ain = tape.push(Op::Concat, &[zhat, normal, gv])?;
        let raw = self.mlp_forward(tape, &self.appearance, ain, None, None)?;
        // sigmoid(x) = exp(−softplus(−x))
        let neg1 = tape.leaf(Tensor::scalar(-1.0));
        let neg = tape.push(Op::Mul, &[raw, neg1])?;
        let sp = tape.push(Op::Softplus, &[neg])?;
        let nsp = tape.push(Op::Mul, &[sp, neg1])?;
        tape.push(Op::Exp, &[nsp])
    }

    /// Per-view depth head: MLP over grid cells, bilinear upsampling of both
    /// channels, Σ exponentiated after upsampling. Returns (D̂, logΣ) image
    /// nodes `[H·W, 1]`.
    pub fn depth_head_forward(
        &self,
        tape: &mut Tape,
        view: usize,
    ) -> Result<(NodeId, NodeId), TapeError> {
        let out = self.mlp_forward(tape, &self.depth_head, self.grids[view], None, None)?;
        let dgrid = tape.push(Op::SliceCols { start: 0, len: 1 }, &[out])?;
        let lsgrid = tape.push(Op::SliceCols { start: 1, len: 1 }, &[out])?;
        let (w, h) = (self.resolution.0 as usize, self.resolution.1 as usize);
        let s = (self.dims.grid_size - 1) as f64;
        let mut coords = Vec::with_capacity(w * h * 2);
        for py in 0..h {
            for px in 0..w {
                coords.push((px as f64 + 0.5) * (s / w as f64));
                coords.push((py as f64 + 0.5) * (s / h as f64));
            }
        }
        let coords = tape.leaf(Tensor::from_rows(w * h, 2, coords).expect("coords"));
        let sample = |tape: &mut Tape, grid| {
            tape.push(
                Op::BilinearSample {
                    height: self.dims.grid_size,
                    width: self.dims.grid_size,
                },
                &[grid, coords],
            )
        };
        let dimg = sample(tape, dgrid)?;
        let lsimg = sample(tape, lsgrid)?;
        Ok((dimg, lsimg))
    }
}

/// One ray of a training batch with its frozen sampling.
#[derive(Debug, Clone)]
pub struct RayEntry {
    pub view: usize,
    pub pixel: (f64, f64),
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub gt_color: [f64; 3],
    pub gt_depth: f64,
    pub gt_normal: [f64; 3],
    pub gt_valid: bool,
}

/// A training batch: rendered views (context + novel), rays grouped by view.
pub struct StepBatch {
    /// Context views whose grids condition the field this step.
    pub context: Vec<usize>,
    /// All rendered views, in ray grouping order.
    pub rendered_views: Vec<usize>,
    pub rays: Vec<RayEntry>,
    pub samples_per_ray: usize,
}

/// Node handles of the assembled step graph.
pub struct StepGraph {
    pub total: NodeId,
    pub terms: BTreeMap<&'static str, NodeId>,
    /// Per-ray composited values (diagnostics + consistency tests).
    pub rendered_color: NodeId,
    pub rendered_depth: NodeId,
    pub rendered_normal: NodeId,
    pub opacity: NodeId,
}

/// Everything the graph needs beyond the model: gt camera encodings and the
/// shared scene facts.
pub struct StepContext<'a> {
    pub gt_cameras: &'a [[f64; 9]],
    pub background: [f64; 3],
    pub sequence_norm: f64,
    /// Per-view (gt depth map, gt valid mask) for the depth-head term.
    pub view_depths: &'a [(&'a [f64], &'a [bool])],
    pub image_size: (usize, usize),
}

pub fn build_step_graph(
    tape: &mut Tape,
    gm: &GraphModel,
    batch: &StepBatch,
    reg: Option<&RegularizationBatch>,
    weights: &LossWeights,
    stage: u8,
    ctx: &StepContext,
) -> Result<StepGraph, TapeError> {
    let m = batch.samples_per_ray;
    let r_total = batch.rays.len();
    let rm = r_total * m;

    // ── ray sample positions, per rendered view ──────────────────────
    let mut pos_parts = Vec::new();
    let mut dir_parts = Vec::new();
    let mut idx = 0;
    while idx < r_total {
        let view = batch.rays[idx].view;
        let mut end = idx;
        while end < r_total && batch.rays[end].view == view {
            end += 1;
        }
        let rays = &batch.rays[idx..end];
        let rv = rays.len();
        let pixels = tape.leaf(
            Tensor::from_rows(
                rv,
                2,
                rays.iter()
                    .flat_map(|r| [r.pixel.0, r.pixel.1])
                    .collect(),
            )
            .expect("pixels"),
        );
        let (q, c, fov) = gm.camera_part_nodes(view);
        let dirs = tape.push(
            Op::CameraRayDirs {
                width: gm.resolution.0 as f64,
                height: gm.resolution.1 as f64,
            },
            &[q, fov, pixels],
        )?;
        let dirs_rep = tape.push(Op::RepeatRows { times: m }, &[dirs])?;
        let origin_rep = tape.push(Op::RepeatRows { times: rv * m }, &[c])?;
        let t_const = tape.leaf(
            Tensor::from_rows(
                rv * m,
                1,
                rays.iter().flat_map(|r| r.t.iter().copied()).collect(),
            )
            .expect("t"),
        );
        let scaled = tape.push(Op::Mul, &[dirs_rep, t_const])?;
        let x = tape.push(Op::Add, &[origin_rep, scaled])?;
        pos_parts.push(x);
        dir_parts.push(dirs_rep);
        idx = end;
    }
    let ray_positions = tape.push(Op::ConcatRows, &pos_parts)?;
    let ray_dirs = tape.push(Op::ConcatRows, &dir_parts)?;

    // append regularization points + twins so one pipeline serves all rows
    let reg_count = reg.map_or(0, |r| r.points.len());
    let all_positions = if let Some(r) = reg {
        let flat = |pts: &[nalgebra::Vector3<f64>]| -> Vec<f64> {
            pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
        };
        let p = tape.leaf(Tensor::from_rows(r.points.len(), 3, flat(&r.points)).expect("reg"));
        let t = tape.leaf(Tensor::from_rows(r.twins.len(), 3, flat(&r.twins)).expect("twins"));
        tape.push(Op::ConcatRows, &[ray_positions, p, t])?
    } else {
        ray_positions
    };

    // ── field pipeline: center + FD-normal runs ──────────────────────
    let (s_all, zhat_all) = gm.sdf_forward(tape, all_positions, &batch.context, false)?;
    let zhat_all = zhat_all.expect("full run keeps the appearance feature");
    let n_all = gm.fd_normal(tape, all_positions, &batch.context)?;

    let s_rays = tape.push(Op::SliceRows { start: 0, len: rm }, &[s_all])?;
    let zhat_rays = tape.push(Op::SliceRows { start: 0, len: rm }, &[zhat_all])?;
    let n_rays = tape.push(Op::SliceRows { start: 0, len: rm }, &[n_all])?;
    let color_rays = gm.appearance_forward(tape, zhat_rays, n_rays, ray_dirs)?;

    // ── compositing ──────────────────────────────────────────────────
    let beta = gm.beta_node();
    let sigma = tape.push(Op::SdfDensity, &[s_rays, beta])?;
    let delta = tape.leaf(
        Tensor::from_rows(
            rm,
            1,
            batch
                .rays
                .iter()
                .flat_map(|r| r.delta.iter().copied())
                .collect(),
        )
        .expect("delta"),
    );
    let sig_delta = tape.push(Op::Mul, &[sigma, delta])?;
    let mat = tape.push(Op::Reshape { rows: r_total, cols: m }, &[sig_delta])?;
    let acc = tape.push(Op::CumsumRowsExclusive, &[mat])?;
    let neg1 = tape.leaf(Tensor::scalar(-1.0));
    let trans = {
        let n = tape.push(Op::Mul, &[acc, neg1])?;
        tape.push(Op::Exp, &[n])?
    };
    let alpha = {
        let n = tape.push(Op::Mul, &[mat, neg1])?;
        let e = tape.push(Op::Exp, &[n])?;
        let ones = tape.leaf(Tensor::from_rows(r_total, m, vec![1.0; rm]).expect("ones"));
        tape.push(Op::Sub, &[ones, e])?
    };
    let w_mat = tape.push(Op::Mul, &[trans, alpha])?;
    let w_flat = tape.push(Op::Reshape { rows: rm, cols: 1 }, &[w_mat])?;

    let group = Op::SumGroups { group: m };
    let rendered_color = {
        let wc = tape.push(Op::Mul, &[color_rays, w_flat])?;
        tape.push(group.clone(), &[wc])?
    };
    let rendered_depth = {
        let t_all = tape.leaf(
            Tensor::from_rows(
                rm,
                1,
                batch
                    .rays
                    .iter()
                    .flat_map(|r| r.t.iter().copied())
                    .collect(),
            )
            .expect("t-all"),
        );
        let wt = tape.push(Op::Mul, &[w_flat, t_all])?;
        tape.push(group.clone(), &[wt])?
    };
    let rendered_normal = {
        let wn = tape.push(Op::Mul, &[n_rays, w_flat])?;
        tape.push(group.clone(), &[wn])?
    };
    let opacity = tape.push(group, &[w_flat])?;

    // composite over the known background for the RGB supervision
    let color_over = {
        let ones = tape.leaf(Tensor::from_rows(r_total, 1, vec![1.0; r_total]).expect("ones"));
        let open = tape.push(Op::Sub, &[ones, opacity])?;
        let bg = tape.leaf(
            Tensor::from_rows(
                r_total,
                3,
                (0..r_total).flat_map(|_| ctx.background).collect(),
            )
            .expect("bg"),
        );
        let bgw = tape.push(Op::Mul, &[bg, open])?;
        tape.push(Op::Add, &[rendered_color, bgw])?
    };

    let mut terms: BTreeMap<&'static str, NodeId> = BTreeMap::new();

    // rgb: mean over rays of the per-ray RGB L1
    {
        let gt = tape.leaf(
            Tensor::from_rows(
                r_total,
                3,
                batch.rays.iter().flat_map(|r| r.gt_color).collect(),
            )
            .expect("gt color"),
        );
        let d = tape.push(Op::Sub, &[color_over, gt])?;
        let a = tape.push(Op::Abs, &[d])?;
        let s = tape.push(Op::Sum, &[a])?;
        let invn = tape.leaf(Tensor::scalar(1.0 / r_total as f64));
        terms.insert("rgb", tape.push(Op::Mul, &[s, invn])?);
    }

    // depth-render: both sides normalized by the sequence norm
    {
        let n_valid = batch
            .rays
            .iter()
            .filter(|r| r.gt_valid && r.gt_depth > 0.0)
            .count();
        let node = if n_valid == 0 {
            tape.leaf(Tensor::scalar(0.0))
        } else {
            let inv_norm = tape.leaf(Tensor::scalar(1.0 / ctx.sequence_norm));
            let dn = tape.push(Op::Mul, &[rendered_depth, inv_norm])?;
            let gt = tape.leaf(
                Tensor::from_rows(
                    r_total,
                    1,
                    batch
                        .rays
                        .iter()
                        .map(|r| r.gt_depth / ctx.sequence_norm)
                        .collect(),
                )
                .expect("gt depth"),
            );
            let mask = tape.leaf(
                Tensor::from_rows(
                    r_total,
                    1,
                    batch
                        .rays
                        .iter()
                        .map(|r| if r.gt_valid && r.gt_depth > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                )
                .expect("depth mask"),
            );
            let d = tape.push(Op::Sub, &[dn, gt])?;
            let a = tape.push(Op::Abs, &[d])?;
            let am = tape.push(Op::Mul, &[a, mask])?;
            let s = tape.push(Op::Sum, &[am])?;
            let invn = tape.leaf(Tensor::scalar(1.0 / n_valid as f64));
            tape.push(Op::Mul, &[s, invn])?
        };
        terms.insert("depth-render", node);
    }

    // normal: normalize the composited normal, L1 + angular, masked mean
    {
        let norms_now: Vec<f64> = {
            let v = tape.value(rendered_normal);
            (0..r_total)
                .map(|i| {
                    let row = v.row(i);
                    (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt()
                })
                .collect()
        };
        let valid: Vec<bool> = batch
            .rays
            .iter()
            .enumerate()
            .map(|(i, r)| r.gt_valid && norms_now[i] > 1e-12)
            .collect();
        let n_valid = valid.iter().filter(|&&v| v).count();
        let node = if n_valid == 0 {
            tape.leaf(Tensor::scalar(0.0))
        } else {
            let mask = tape.leaf(
                Tensor::from_rows(
                    r_total,
                    1,
                    valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
                )
                .expect("n mask"),
            );
            // replace masked rows by a unit placeholder so the norm stays
            // away from zero (they are excluded from the mean anyway)
            let fill = tape.leaf(
                Tensor::from_rows(
                    r_total,
                    3,
                    valid
                        .iter()
                        .flat_map(|&v| if v { [0.0; 3] } else { [1.0, 0.0, 0.0] })
                        .collect(),
                )
                .expect("fill"),
            );
            let nm = tape.push(Op::Mul, &[rendered_normal, mask])?;
            let nadj = tape.push(Op::Add, &[nm, fill])?;
            let norms = tape.push(Op::L2NormRows, &[nadj])?;
            let lg = tape.push(Op::Log, &[norms])?;
            let neg1b = tape.leaf(Tensor::scalar(-1.0));
            let nl = tape.push(Op::Mul, &[lg, neg1b])?;
            let inv = tape.push(Op::Exp, &[nl])?;
            let unit = tape.push(Op::Mul, &[nadj, inv])?;
            let gt = tape.leaf(
                Tensor::from_rows(
                    r_total,
                    3,
                    batch.rays.iter().flat_map(|r| r.gt_normal).collect(),
                )
                .expect("gt normals"),
            );
            let d = tape.push(Op::Sub, &[unit, gt])?;
            let l1 = {
                let a = tape.push(Op::Abs, &[d])?;
                tape.push(Op::SumRows, &[a])?
            };
            let ang = {
                let prod = tape.push(Op::Mul, &[unit, gt])?;
                let dot = tape.push(Op::SumRows, &[prod])?;
                let ones = tape.leaf(Tensor::from_rows(r_total, 1, vec![1.0; r_total]).expect("ones"));
                let dd = tape.push(Op::Sub, &[ones, dot])?;
                tape.push(Op::Abs, &[dd])?
            };
            let per_ray = tape.push(Op::Add, &[l1, ang])?;
            let masked = tape.push(Op::Mul, &[per_ray, mask])?;
            let s = tape.push(Op::Sum, &[masked])?;
            let invn = tape.leaf(Tensor::scalar(1.0 / n_valid as f64));
            tape.push(Op::Mul, &[s, invn])?
        };
        terms.insert("normal", node);
    }

    // camera: Huber on g, gt quaternion sign-aligned, view 0 excluded
    {
        let n = gm.camera_g.len();
        let mut acc: Option<NodeId> = None;
        for view in 1..n {
            let g = gm.camera_node(view);
            let mut gt = ctx.gt_cameras[view];
            let pred = tape.value(g);
            let qdot: f64 = (0..4).map(|k| pred.data()[k] * gt[k]).sum();
            if qdot < 0.0 {
                for v in gt.iter_mut().take(4) {
                    *v = -*v;
                }
            }
            let gt = tape.leaf(Tensor::new(vec![9], gt.to_vec()).expect("gt g"));
            let d = tape.push(Op::Sub, &[g, gt])?;
            let h = tape.push(
                Op::Huber {
                    delta: weights.huber_eps,
                },
                &[d],
            )?;
            let s = tape.push(Op::Sum, &[h])?;
            acc = Some(match acc {
                Some(a) => tape.push(Op::Add, &[a, s])?,
                None => s,
            });
        }
        let node = match acc {
            Some(a) => {
                let invn = tape.leaf(Tensor::scalar(1.0 / (n - 1) as f64));
                tape.push(Op::Mul, &[a, invn])?
            }
            None => tape.leaf(Tensor::scalar(0.0)),
        };
        terms.insert("camera", node);
    }

    // ── stage-2 terms ────────────────────────────────────────────────
    if stage >= 2 {
        let p = reg_count;
        let n_reg = tape.push(Op::SliceRows { start: rm, len: p }, &[n_all])?;
        let n_twin = tape.push(Op::SliceRows { start: rm + p, len: p }, &[n_all])?;

        // eikonal: mean (‖∇ŝ‖ − 1)²
        {
            let norms = tape.push(Op::L2NormRows, &[n_reg])?;
            let ones = tape.leaf(Tensor::from_rows(p, 1, vec![1.0; p]).expect("ones"));
            let dev = tape.push(Op::Sub, &[norms, ones])?;
            let sq = tape.push(Op::Mul, &[dev, dev])?;
            terms.insert("eikonal", tape.push(Op::Mean, &[sq])?);
        }

        // smoothness: ‖unit∇(x) − unit∇(x⁺)‖₂, zero-norm rows masked
        {
            let unitize = |tape: &mut Tape,
                           node: NodeId,
                           valid: &[bool]|
             -> Result<NodeId, TapeError> {
                let rows = valid.len();
                let mask = tape.leaf(
                    Tensor::from_rows(
                        rows,
                        1,
                        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
                    )
                    .expect("mask"),
                );
                let fill = tape.leaf(
                    Tensor::from_rows(
                        rows,
                        3,
                        valid
                            .iter()
                            .flat_map(|&v| if v { [0.0; 3] } else { [1.0, 0.0, 0.0] })
                            .collect(),
                    )
                    .expect("fill"),
                );
                let nm = tape.push(Op::Mul, &[node, mask])?;
                let nadj = tape.push(Op::Add, &[nm, fill])?;
                let norms = tape.push(Op::L2NormRows, &[nadj])?;
                let lg = tape.push(Op::Log, &[norms])?;
                let n1 = tape.leaf(Tensor::scalar(-1.0));
                let nl = tape.push(Op::Mul, &[lg, n1])?;
                let inv = tape.push(Op::Exp, &[nl])?;
                tape.push(Op::Mul, &[nadj, inv])
            };
            let row_norm = |t: &Tensor, i: usize| {
                let r = t.row(i);
                (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
            };
            let valid: Vec<bool> = (0..p)
                .map(|i| {
                    row_norm(tape.value(n_reg), i) > 1e-12
                        && row_norm(tape.value(n_twin), i) > 1e-12
                })
                .collect();
            let n_valid = valid.iter().filter(|&&v| v).count();
            let node = if n_valid == 0 {
                tape.leaf(Tensor::scalar(0.0))
            } else {
                let u1 = unitize(tape, n_reg, &valid)?;
                let u2 = unitize(tape, n_twin, &valid)?;
                let d = tape.push(Op::Sub, &[u1, u2])?;
                let l2 = tape.push(Op::L2NormRows, &[d])?;
                let mask = tape.leaf(
                    Tensor::from_rows(
                        p,
                        1,
                        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
                    )
                    .expect("mask"),
                );
                let lm = tape.push(Op::Mul, &[l2, mask])?;
                let s = tape.push(Op::Sum, &[lm])?;
                let invn = tape.leaf(Tensor::scalar(1.0 / n_valid as f64));
                tape.push(Op::Mul, &[s, invn])?
            };
            terms.insert("smooth", node);
        }

        // depth-head term, averaged over the batch's rendered views
        {
            let mut views: Vec<usize> = batch.rendered_views.clone();
            views.sort_unstable();
            views.dedup();
            let mut acc: Option<NodeId> = None;
            for &view in &views {
                let node = vggt_depth_term(
                    tape,
                    gm,
                    view,
                    ctx.view_depths[view].0,
                    ctx.view_depths[view].1,
                    ctx.image_size,
                    weights.alpha_u,
                )?;
                acc = Some(match acc {
                    Some(a) => tape.push(Op::Add, &[a, node])?,
                    None => node,
                });
            }
            let node = match acc {
                Some(a) => {
                    let invn = tape.leaf(Tensor::scalar(1.0 / views.len() as f64));
                    tape.push(Op::Mul, &[a, invn])?
                }
                None => tape.leaf(Tensor::scalar(0.0)),
            };
            terms.insert("vggt-depth", node);
        }
    }

    // ── weighted stage total ─────────────────────────────────────────
    let weighted = |tape: &mut Tape, node: NodeId, w: f64| -> Result<NodeId, TapeError> {
        let c = tape.leaf(Tensor::scalar(w));
        tape.push(Op::Mul, &[node, c])
    };
    let mut total = terms["rgb"];
    for (key, w) in [
        ("depth-render", weights.lambda[0]),
        ("normal", weights.lambda[1]),
        ("camera", weights.lambda[2]),
    ] {
        let t = weighted(tape, terms[key], w)?;
        total = tape.push(Op::Add, &[total, t])?;
    }
    if stage >= 2 {
        for (key, w) in [
            ("eikonal", weights.lambda[3]),
            ("smooth", weights.lambda[4]),
            ("vggt-depth", weights.lambda[5]),
        ] {
            let t = weighted(tape, terms[key], w)?;
            total = tape.push(Op::Add, &[total, t])?;
        }
    }

    Ok(StepGraph {
        total,
        terms,
        rendered_color: color_over,
        rendered_depth,
        rendered_normal,
        opacity,
    })
}

/// Eq.-14-style uncertainty depth term for one view on the tape.
fn vggt_depth_term(
    tape: &mut Tape,
    gm: &GraphModel,
    view: usize,
    gt_depth: &[f64],
    gt_valid: &[bool],
    (w, h): (usize, usize),
    alpha_u: f64,
) -> Result<NodeId, TapeError> {
    let (dimg, lsimg) = gm.depth_head_forward(tape, view)?;
    let sigma = tape.push(Op::Exp, &[lsimg])?;
    let n_valid = gt_valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let maskv: Vec<f64> = gt_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = tape.leaf(Tensor::from_rows(w * h, 1, maskv.clone()).expect("mask"));
    let gt = tape.leaf(Tensor::from_rows(w * h, 1, gt_depth.to_vec()).expect("gt"));

    // value term: mean over valid of Σ·|D̂ − D|
    let value_term = {
        let d = tape.push(Op::Sub, &[dimg, gt])?;
        let a = tape.push(Op::Abs, &[d])?;
        let sa = tape.push(Op::Mul, &[a, sigma])?;
        let sam = tape.push(Op::Mul, &[sa, mask])?;
        let s = tape.push(Op::Sum, &[sam])?;
        let inv = tape.leaf(Tensor::scalar(1.0 / n_valid as f64));
        tape.push(Op::Mul, &[s, inv])?
    };

    // forward-difference gradient term over pairs with both pixels valid
    let d_mat = tape.push(Op::Reshape { rows: h, cols: w }, &[dimg])?;
    let s_mat = tape.push(Op::Reshape { rows: h, cols: w }, &[sigma])?;
    let mut grad_terms: Vec<(NodeId, NodeId, Vec<f64>, Vec<f64>)> = Vec::new();
    // horizontal pairs
    {
        let right = tape.push(Op::SliceCols { start: 1, len: w - 1 }, &[d_mat])?;
        let left = tape.push(Op::SliceCols { start: 0, len: w - 1 }, &[d_mat])?;
        let pd = tape.push(Op::Sub, &[right, left])?;
        let sl = tape.push(Op::SliceCols { start: 0, len: w - 1 }, &[s_mat])?;
        let mut gt_d = Vec::with_capacity(h * (w - 1));
        let mut pm = Vec::with_capacity(h * (w - 1));
        for y in 0..h {
            for x in 0..w - 1 {
                let (i, j) = (y * w + x, y * w + x + 1);
                gt_d.push(gt_depth[j] - gt_depth[i]);
                pm.push(if gt_valid[i] && gt_valid[j] { 1.0 } else { 0.0 });
            }
        }
        grad_terms.push((pd, sl, gt_d, pm));
    }
    // vertical pairs
    {
        let down = tape.push(Op::SliceRows { start: 1, len: h - 1 }, &[d_mat])?;
        let up = tape.push(Op::SliceRows { start: 0, len: h - 1 }, &[d_mat])?;
        let pd = tape.push(Op::Sub, &[down, up])?;
        let sl = tape.push(Op::SliceRows { start: 0, len: h - 1 }, &[s_mat])?;
        let mut gt_d = Vec::with_capacity((h - 1) * w);
        let mut pm = Vec::with_capacity((h - 1) * w);
        for y in 0..h - 1 {
            for x in 0..w {
                let (i, j) = (y * w + x, (y + 1) * w + x);
                gt_d.push(gt_depth[j] - gt_depth[i]);
                pm.push(if gt_valid[i] && gt_valid[j] { 1.0 } else { 0.0 });
            }
        }
        grad_terms.push((pd, sl, gt_d, pm));
    }
    let mut grad_sum: Option<NodeId> = None;
    let mut pair_count = 0usize;
    for (pd, sl, gt_d, pm) in grad_terms {
        pair_count += pm.iter().filter(|&&v| v > 0.0).count();
        let rows = pm.len();
        let gt_node = tape.leaf(Tensor::from_rows(rows, 1, gt_d).expect("gt grad"));
        let pm_node = tape.leaf(Tensor::from_rows(rows, 1, pm).expect("pair mask"));
        let pd_flat = tape.push(Op::Reshape { rows, cols: 1 }, &[pd])?;
        let sl_flat = tape.push(Op::Reshape { rows, cols: 1 }, &[sl])?;
        let d = tape.push(Op::Sub, &[pd_flat, gt_node])?;
        let a = tape.push(Op::Abs, &[d])?;
        let sa = tape.push(Op::Mul, &[a, sl_flat])?;
        let sam = tape.push(Op::Mul, &[sa, pm_node])?;
        let s = tape.push(Op::Sum, &[sam])?;
        grad_sum = Some(match grad_sum {
            Some(g) => tape.push(Op::Add, &[g, s])?,
            None => s,
        });
    }
    let grad_term = match (grad_sum, pair_count) {
        (Some(g), n) if n > 0 => {
            let inv = tape.leaf(Tensor::scalar(1.0 / n as f64));
            tape.push(Op::Mul, &[g, inv])?
        }
        _ => tape.leaf(Tensor::scalar(0.0)),
    };

    // −α · mean(log Σ) over valid pixels (logΣ is the raw head output)
    let log_term = {
        let lm = tape.push(Op::Mul, &[lsimg, mask])?;
        let s = tape.push(Op::Sum, &[lm])?;
        let c = tape.leaf(Tensor::scalar(-alpha_u / n_valid as f64));
        tape.push(Op::Mul, &[s, c])?
    };

    let a = tape.push(Op::Add, &[value_term, grad_term])?;
    tape.push(Op::Add, &[a, log_term])
}
