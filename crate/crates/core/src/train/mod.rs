//! Two-stage training: AdamW with warmup+cosine schedule, ray batches over
//! context and novel views, and checkpointing.

pub mod adamw;
pub mod checkpoint;
pub mod graph;
pub mod schedule;

pub use adamw::{AdamW, AdamWConfig, SkippedStep};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, LoadedCheckpoint};
pub use schedule::lr_at;

use crate::autodiff::{Tape, TapeError, Tensor};
use crate::cli::dataset::Dataset;
use crate::field::{EncodingMode, ModelDims, ModelField, SceneModel, SdfField};
use crate::geometry::encode_camera;
use crate::losses::{
    sample_regularization_points, stage_total, LossReport, LossWeights,
    SurfaceAnchor,
};
use crate::render::{near_far, sample_ray, RenderConfig};
use graph::{build_step_graph, GraphModel, RayEntry, StepBatch, StepContext};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
    #[error("dataset has no usable rays this step")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub lr_max: f64,
    /// Warmup length as a fraction of stage-1 steps.
    pub warmup_frac: f64,
    pub views_per_iter: usize,
    pub context_views: usize,
    pub rays_per_view: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub beta_init: f64,
    /// Initial camera perturbation: rotation (radians) and translation
    /// (fraction of scene scale). View 0 stays exact.
    pub camera_noise_rot: f64,
    pub camera_noise_trans: f64,
    /// Geometric-init calibration: fit the decoder to a centered sphere of
    /// radius `sphere_init_radius_frac · scene scale` before training.
    pub sphere_init_steps: u64,
    pub sphere_init_radius_frac: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 2000,
            stage2_steps: 2000,
            lr_max: 1e-3,
            warmup_frac: 0.1,
            views_per_iter: 8,
            context_views: 4,
            rays_per_view: 12,
            checkpoint_every: 500,
            seed: 0,
            beta_init: 0.1,
            camera_noise_rot: 0.02,
            camera_noise_trans: 0.01,
            sphere_init_steps: 250,
            sphere_init_radius_frac: 0.25,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.stage1_steps as f64 * self.warmup_frac) as u64).max(1)
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x
}

/// Initial camera encodings: view 0 exact, later views perturbed by a seeded
/// rotation/translation so the camera loss has work to do.
pub fn init_camera_encodings(dataset: &Dataset, config: &TrainConfig) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xCA3E_7A, 0));
    let scale = dataset.bounds.scale();
    dataset
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut cam = v.camera.clone();
            if i > 0 {
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0f64),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let angle = rng.random_range(-config.camera_noise_rot..=config.camera_noise_rot);
                if axis.norm() > 1e-9 {
                    let dq = nalgebra::UnitQuaternion::from_axis_angle(
                        &nalgebra::Unit::new_normalize(axis),
                        angle,
                    );
                    cam.rotation = dq * cam.rotation;
                }
                let t = config.camera_noise_trans * scale;
                cam.center += Vector3::new(
                    rng.random_range(-t..=t),
                    rng.random_range(-t..=t),
                    rng.random_range(-t..=t),
                );
            }
            Tensor::new(vec![9], encode_camera(&cam).0.to_vec()).expect("encoding")
        })
        .collect()
}

/// Builds a fresh model for a dataset, including the geometric-init
/// calibration of the decoder toward a centered sphere.
pub fn init_model(
    dataset: &Dataset,
    dims: ModelDims,
    mode: EncodingMode,
    config: &TrainConfig,
) -> Result<SceneModel, TrainError> {
    let camera_g = init_camera_encodings(dataset, config);
    let (w, h) = dataset.resolution();
    let mut model = SceneModel::new(
        dims,
        mode,
        camera_g,
        (w as u32, h as u32),
        dataset.bounds,
        dataset.convention,
        dataset.background,
        dataset.sequence_norm,
        config.beta_init,
        mix_seed(config.seed, 0x11, 0),
    );
    if config.sphere_init_steps > 0 {
        let radius = config.sphere_init_radius_frac * model.scene_scale();
        calibrate_sphere_init(
            &mut model,
            radius,
            config.sphere_init_steps,
            mix_seed(config.seed, 0x22, 0),
        )?;
    }
    Ok(model)
}

/// Seeded regression pulling the initial field toward a centered sphere SDF.
/// The decoder consumes aggregated features rather than coordinates, so the
/// usual closed-form geometric initialization does not apply; a short fit
/// against the target sphere achieves the same starting shape. Cameras, β,
/// and the depth head are left untouched.
pub fn calibrate_sphere_init(
    model: &mut SceneModel,
    radius: f64,
    steps: u64,
    seed: u64,
) -> Result<(), TrainError> {
    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|(_, t, _)| t.shape().to_vec())
        .collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &shapes,
    );
    let center = model.bounds.center();
    let bounds = model.bounds;
    let all_views: Vec<usize> = (0..model.num_views()).collect();
    let batch = 256;
    for step in 0..steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step, 1));
        let mut pos = Vec::with_capacity(batch * 3);
        let mut target = Vec::with_capacity(batch);
        for _ in 0..batch {
            let p = Vector3::new(
                rng.random_range(bounds.min.x..bounds.max.x),
                rng.random_range(bounds.min.y..bounds.max.y),
                rng.random_range(bounds.min.z..bounds.max.z),
            );
            pos.extend_from_slice(&[p.x, p.y, p.z]);
            target.push((p - center).norm() - radius);
        }
        let mut tape = Tape::new();
        let gm = GraphModel::register(&mut tape, model)?;
        let positions = tape.leaf(Tensor::from_rows(batch, 3, pos).expect("positions"));
        let (s, _) = gm.sdf_forward(&mut tape, positions, &all_views, true)?;
        let tgt = tape.leaf(Tensor::from_rows(batch, 1, target).expect("target"));
        let d = tape.push(crate::autodiff::Op::Sub, &[s, tgt])?;
        let sq = tape.push(crate::autodiff::Op::Mul, &[d, d])?;
        let loss = tape.push(crate::autodiff::Op::Mean, &[sq])?;
        let grads_map = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = gm
            .param_nodes
            .iter()
            .map(|&id| grads_map.get(id))
            .collect();
        // freeze everything the sphere target should not move
        {
            let params = model.params();
            for (g, (name, _, _)) in grads.iter_mut().zip(&params) {
                if name.starts_with("camera.") || name == "beta_raw" || name.starts_with("depth_head") {
                    for v in g.data_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
        let mut params = model.params_mut();
        let _ = opt.step(&mut params, &grads, 1e-3);
    }
    Ok(())
}

/// Draws the per-step ray batch: `views_per_iter` views (context + novel),
/// `rays_per_view` pixels each, with frozen per-ray sample depths from the
/// current model. Falls back to sampling views with replacement when the
/// dataset is smaller than the view budget.
pub fn sample_ray_batch(
    dataset: &Dataset,
    model: &SceneModel,
    render_cfg: &RenderConfig,
    config: &TrainConfig,
    step: u64,
) -> Result<StepBatch, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, step, 2));
    let n = dataset.views.len();
    let chosen: Vec<usize> = if n >= config.views_per_iter {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(config.views_per_iter);
        idx
    } else {
        (0..config.views_per_iter)
            .map(|_| rng.random_range(0..n))
            .collect()
    };
    let mut context: Vec<usize> = chosen[..config.context_views.min(chosen.len())].to_vec();
    context.sort_unstable();
    context.dedup();

    let cameras = model.cameras();
    let field = ModelField {
        model,
        cameras: cameras.clone(),
        context: Some(context.clone()),
    };
    let (w, h) = dataset.resolution();
    let mut rays = Vec::with_capacity(chosen.len() * config.rays_per_view);
    let beta = model.beta();
    let mut ray_counter = 0u64;
    for &view in &chosen {
        let gt = &dataset.views[view];
        for _ in 0..config.rays_per_view {
            let px = rng.random_range(0..w);
            let py = rng.random_range(0..h);
            let pixel = (px as f64 + 0.5, py as f64 + 0.5);
            ray_counter += 1;
            let Ok(ray) = crate::geometry::generate_ray(&cameras[view], pixel) else {
                continue;
            };
            let Some((near, far)) = near_far(&field, &ray, render_cfg.near_far_pad) else {
                continue;
            };
            let Ok(samples) = sample_ray(
                &field,
                beta,
                &ray,
                near,
                far,
                render_cfg.coarse_samples,
                render_cfg.fine_samples,
                mix_seed(config.seed, step, 1000 + ray_counter),
            ) else {
                continue;
            };
            let i = py * w + px;
            rays.push(RayEntry {
                view,
                pixel,
                t: samples.t,
                delta: samples.delta,
                gt_color: [
                    gt.image[i * 3],
                    gt.image[i * 3 + 1],
                    gt.image[i * 3 + 2],
                ],
                gt_depth: gt.depth[i],
                gt_normal: [gt.normal[i * 3], gt.normal[i * 3 + 1], gt.normal[i * 3 + 2]],
                gt_valid: gt.mask[i],
            });
        }
    }
    if rays.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(StepBatch {
        context,
        rendered_views: chosen,
        rays,
        samples_per_ray: render_cfg.samples_per_ray(),
    })
}

/// Near-surface anchors for the regularization batch: value-path composited
/// depths of a few batch rays.
fn surface_anchors(model: &SceneModel, batch: &StepBatch, limit: usize) -> Vec<SurfaceAnchor> {
    let cameras = model.cameras();
    let beta = model.beta();
    let field = ModelField {
        model,
        cameras: cameras.clone(),
        context: Some(batch.context.clone()),
    };
    let mut anchors = Vec::new();
    for entry in batch.rays.iter().take(limit) {
        let Ok(ray) = crate::geometry::generate_ray(&cameras[entry.view], entry.pixel) else {
            continue;
        };
        let mut acc = 0.0f64;
        let mut depth = 0.0;
        let mut weight_sum = 0.0;
        for (i, &t) in entry.t.iter().enumerate() {
            let s = field.sdf(&ray.at(t));
            let sigma = crate::autodiff::laplace_density(s, beta);
            let alpha = 1.0 - (-sigma * entry.delta[i]).exp();
            let w = (-acc).exp() * alpha;
            depth += w * t;
            weight_sum += w;
            acc += sigma * entry.delta[i];
        }
        if weight_sum > 0.2 {
            anchors.push(SurfaceAnchor {
                origin: ray.origin,
                direction: ray.direction,
                depth: depth / weight_sum,
            });
        }
    }
    anchors
}

/// Outcome of one optimization step.
pub struct StepOutcome {
    pub report: LossReport,
    pub skipped: Option<String>,
    pub lr: f64,
}

/// Renders the batch on the tape, backpropagates the stage total, applies
/// AdamW. Non-finite losses or gradients skip the update and are reported.
pub fn train_step(
    model: &mut SceneModel,
    opt: &mut AdamW,
    dataset: &Dataset,
    batch: &StepBatch,
    weights: &LossWeights,
    stage: u8,
    lr: f64,
    reg_seed: u64,
) -> Result<StepOutcome, TrainError> {
    let reg = (stage >= 2).then(|| {
        let eps = weights.smooth_eps_frac * model.scene_scale();
        let anchors = surface_anchors(model, batch, 32);
        sample_regularization_points(
            &model.bounds,
            &anchors,
            weights.reg_uniform,
            weights.reg_surface,
            eps,
            reg_seed,
        )
    });
    let gt_cameras: Vec<[f64; 9]> = dataset
        .views
        .iter()
        .map(|v| encode_camera(&v.camera).0)
        .collect();
    let view_depths: Vec<(&[f64], &[bool])> = dataset
        .views
        .iter()
        .map(|v| (v.depth.as_slice(), v.mask.as_slice()))
        .collect();
    let ctx = StepContext {
        gt_cameras: &gt_cameras,
        background: model.background,
        sequence_norm: model.sequence_norm,
        view_depths: &view_depths,
        image_size: dataset.resolution(),
    };

    let mut tape = Tape::new();
    let gm = GraphModel::register(&mut tape, model)?;
    let built = build_step_graph(&mut tape, &gm, batch, reg.as_ref(), weights, stage, &ctx);
    let sg = match built {
        Ok(sg) => sg,
        Err(TapeError::NonFinite { op }) => {
            return Ok(StepOutcome {
                report: LossReport {
                    stage,
                    terms: BTreeMap::new(),
                    weighted_total: f64::NAN,
                },
                skipped: Some(format!("non-finite forward value in {op}")),
                lr,
            });
        }
        Err(e) => return Err(e.into()),
    };

    let term_values: BTreeMap<&'static str, f64> = sg
        .terms
        .iter()
        .map(|(k, &id)| (*k, tape.value(id).item()))
        .collect();
    let report = stage_total(&term_values, weights, stage).expect("graph built all stage terms");
    let total_value = tape.value(sg.total).item();
    debug_assert!((report.weighted_total - total_value).abs() <= 1e-12 * total_value.abs().max(1.0));
    if !total_value.is_finite() {
        return Ok(StepOutcome {
            report,
            skipped: Some("non-finite loss".into()),
            lr,
        });
    }

    let grads_map = tape.backward(sg.total)?;
    let grads: Vec<Tensor> = gm.param_nodes.iter().map(|&id| grads_map.get(id)).collect();
    drop(tape);
    let mut params = model.params_mut();
    let skipped = match opt.step(&mut params, &grads, lr) {
        Ok(()) => None,
        Err(SkippedStep::NonFiniteGradient { param }) => {
            Some(format!("non-finite gradient in {param}"))
        }
    };
    Ok(StepOutcome {
        report,
        skipped,
        lr,
    })
}

pub struct FitResult {
    pub model: SceneModel,
    pub optimizer: AdamW,
    pub reports: Vec<LossReport>,
    pub skipped_steps: usize,
    pub final_step: u64,
}

/// Canonical hash of a config for checkpoint compatibility checks.
pub fn config_hash(json: &str) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(json.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Runs stage 1 then stage 2, with periodic checkpoints and an append-only
/// per-step log. Resumable from a saved checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    dataset: &Dataset,
    dims: ModelDims,
    mode: EncodingMode,
    config: &TrainConfig,
    weights: &LossWeights,
    render_cfg: &RenderConfig,
    out_dir: Option<&Path>,
    resume: Option<LoadedCheckpoint>,
    cfg_hash: &str,
) -> Result<FitResult, TrainError> {
    let (mut model, mut opt, start_step) = match resume {
        Some(loaded) => {
            let shapes: Vec<Vec<usize>> = loaded
                .model
                .params()
                .iter()
                .map(|(_, t, _)| t.shape().to_vec())
                .collect();
            let _ = shapes;
            (loaded.model, loaded.optimizer, loaded.meta.step)
        }
        None => {
            let model = init_model(dataset, dims, mode, config)?;
            let shapes: Vec<Vec<usize>> = model
                .params()
                .iter()
                .map(|(_, t, _)| t.shape().to_vec())
                .collect();
            (model, AdamW::new(config.optimizer, &shapes), 0)
        }
    };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(TrainError::Log)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.tsv"))
                .map_err(TrainError::Log)?;
            Some(f)
        }
        None => None,
    };
    if let (Some(f), 0) = (&mut log_file, start_step) {
        writeln!(
            f,
            "step\tstage\tlr\trgb\tdepth-render\tnormal\tcamera\teikonal\tsmooth\tvggt-depth\ttotal\tskipped"
        )
        .map_err(TrainError::Log)?;
    }

    let total = config.total_steps();
    let warmup = config.warmup_steps();
    let mut reports = Vec::new();
    let mut skipped_steps = 0usize;
    for step in start_step..total {
        let stage: u8 = if step < config.stage1_steps { 1 } else { 2 };
        let lr = lr_at(step, total, warmup, config.lr_max);
        let batch = sample_ray_batch(dataset, &model, render_cfg, config, step)?;
        let outcome = train_step(
            &mut model,
            &mut opt,
            dataset,
            &batch,
            weights,
            stage,
            lr,
            mix_seed(config.seed, step, 3),
        )?;
        if outcome.skipped.is_some() {
            skipped_steps += 1;
        }
        if let Some(f) = &mut log_file {
            let g = |k: &str| {
                outcome
                    .report
                    .terms
                    .get(k)
                    .map_or("-".to_string(), |v| format!("{v:.6e}"))
            };
            writeln!(
                f,
                "{step}\t{stage}\t{lr:.6e}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6e}\t{}",
                g("rgb"),
                g("depth-render"),
                g("normal"),
                g("camera"),
                g("eikonal"),
                g("smooth"),
                g("vggt-depth"),
                outcome.report.weighted_total,
                outcome.skipped.as_deref().unwrap_or("")
            )
            .map_err(TrainError::Log)?;
        }
        reports.push(outcome.report);
        if let Some(dir) = out_dir {
            let at_interval =
                config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
            if at_interval || step + 1 == total {
                save_checkpoint(
                    &dir.join("checkpoint.ckpt"),
                    &model,
                    &opt,
                    step + 1,
                    stage,
                    cfg_hash,
                )?;
            }
        }
    }
    Ok(FitResult {
        model,
        optimizer: opt,
        reports,
        skipped_steps,
        final_step: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::geometry::RayDepthConvention;
    use crate::scenegen::{generate_dataset, preset_scene, CameraRig, RigPlacement, SceneFile};
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            grid_size: 4,
            grid_channels: 4,
            embed_dim: 6,
            embed_hidden: 6,
            geo_layers: 8,
            geo_hidden: 8,
            app_feat_dim: 6,
            app_hidden: 8,
            posenc_octaves_xyz: 2,
            posenc_octaves_view: 2,
            depth_head_hidden: 6,
        }
    }

    fn tiny_dataset(dir: &Path, views: u32, res: u32) -> Dataset {
        let file = SceneFile {
            version: 1,
            scene: preset_scene("sphere").unwrap(),
            rig: CameraRig {
                count: views,
                placement: RigPlacement::Orbit {
                    radius: 2.5,
                    elevation: 0.35,
                },
                look_at: Vector3::zeros(),
                fov: (1.05, 1.05),
                resolution: (res, res),
            },
            light: Vector3::new(0.4, 0.8, 0.45),
            background: crate::scenegen::BACKGROUND_COLOR,
            seed: 0,
            ray_depth_convention: RayDepthConvention::Distance,
        };
        generate_dataset(&file, dir).unwrap();
        crate::cli::dataset::load_dataset(dir).unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            stage1_steps: 10,
            stage2_steps: 10,
            views_per_iter: 4,
            context_views: 2,
            rays_per_view: 4,
            sphere_init_steps: 20,
            checkpoint_every: 0,
            seed,
            ..TrainConfig::default()
        }
    }

    fn tiny_render() -> RenderConfig {
        RenderConfig {
            coarse_samples: 6,
            fine_samples: 2,
            near_far_pad: 0.05,
        }
    }

    #[test]
    fn graph_matches_value_path_rendering() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 16);
        let config = tiny_config(0);
        let model = init_model(&ds, tiny_dims(), EncodingMode::RaydepthEmbed, &config).unwrap();
        let render_cfg = tiny_render();
        let batch = sample_ray_batch(&ds, &model, &render_cfg, &config, 0).unwrap();

        let gt_cameras: Vec<[f64; 9]> = ds.views.iter().map(|v| encode_camera(&v.camera).0).collect();
        let view_depths: Vec<(&[f64], &[bool])> = ds
            .views
            .iter()
            .map(|v| (v.depth.as_slice(), v.mask.as_slice()))
            .collect();
        let ctx = StepContext {
            gt_cameras: &gt_cameras,
            background: model.background,
            sequence_norm: model.sequence_norm,
            view_depths: &view_depths,
            image_size: ds.resolution(),
        };
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let gm = GraphModel::register(&mut tape, &model).unwrap();
        let sg = build_step_graph(&mut tape, &gm, &batch, None, &weights, 1, &ctx).unwrap();

        // value path with the same frozen sample depths
        let cameras = model.cameras();
        let beta = model.beta();
        for (i, entry) in batch.rays.iter().enumerate() {
            let ray = crate::geometry::generate_ray(&cameras[entry.view], entry.pixel).unwrap();
            let mut sigma = Vec::new();
            let mut colors = Vec::new();
            let mut normals = Vec::new();
            for &t in &entry.t {
                let q = model
                    .query_with_cameras(&ray.at(t), &ray.direction, Some(&batch.context), &cameras)
                    .unwrap();
                sigma.push(crate::autodiff::laplace_density(q.sdf, beta));
                colors.push(q.color);
                normals.push(q.gradient);
            }
            let px =
                crate::render::composite(&entry.t, &entry.delta, &sigma, &colors, &normals)
                    .unwrap();
            let over: Vec<f64> = (0..3)
                .map(|c| px.color[c] + (1.0 - px.opacity) * model.background[c])
                .collect();
            let tape_color = tape.value(sg.rendered_color);
            let tape_depth = tape.value(sg.rendered_depth);
            let tape_norm = tape.value(sg.rendered_normal);
            for c in 0..3 {
                assert_relative_eq!(tape_color.row(i)[c], over[c], epsilon = 1e-9);
                assert_relative_eq!(tape_norm.row(i)[c], px.normal[c], epsilon = 1e-9);
            }
            assert_relative_eq!(tape_depth.row(i)[0], px.depth, epsilon = 1e-9);
        }
    }

    /// Every stage-2 loss term's analytic gradient matches central finite
    /// differences on a tiny random model.
    #[test]
    fn every_loss_term_passes_gradient_check() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 12);
        let mut config = tiny_config(5);
        config.rays_per_view = 3;
        let model = init_model(&ds, tiny_dims(), EncodingMode::RaydepthEmbed, &config).unwrap();
        let render_cfg = RenderConfig {
            coarse_samples: 4,
            fine_samples: 2,
            near_far_pad: 0.05,
        };
        let batch = sample_ray_batch(&ds, &model, &render_cfg, &config, 1).unwrap();
        let reg = {
            let eps = 0.01 * model.scene_scale();
            let anchors = surface_anchors(&model, &batch, 8);
            sample_regularization_points(&model.bounds, &anchors, 4, 4, eps, 7)
        };
        let gt_cameras: Vec<[f64; 9]> = ds.views.iter().map(|v| encode_camera(&v.camera).0).collect();
        let view_depths: Vec<(&[f64], &[bool])> = ds
            .views
            .iter()
            .map(|v| (v.depth.as_slice(), v.mask.as_slice()))
            .collect();
        let ctx = StepContext {
            gt_cameras: &gt_cameras,
            background: model.background,
            sequence_norm: model.sequence_norm,
            view_depths: &view_depths,
            image_size: ds.resolution(),
        };
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let gm = GraphModel::register(&mut tape, &model).unwrap();
        let sg = build_step_graph(&mut tape, &gm, &batch, Some(&reg), &weights, 2, &ctx).unwrap();
        let terms: Vec<(&str, crate::autodiff::NodeId)> =
            sg.terms.iter().map(|(k, v)| (*k, *v)).collect();
        for (name, node) in terms {
            let report = finite_difference_check(&mut tape, node, 3e-6, 1e-3, 11).unwrap();
            assert!(
                report.passed(),
                "term {name}: max rel err {:.3e} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn sphere_calibration_shapes_the_field() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 16);
        let mut config = tiny_config(2);
        config.sphere_init_steps = 400;
        let model = init_model(&ds, tiny_dims(), EncodingMode::RaydepthEmbed, &config).unwrap();
        let radius = 0.5 * model.scene_scale();
        let center = model.bounds.center();
        let cameras = model.cameras();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut err = 0.0;
        let n = 200;
        for _ in 0..n {
            let p = Vector3::new(
                rng.random_range(model.bounds.min.x..model.bounds.max.x),
                rng.random_range(model.bounds.min.y..model.bounds.max.y),
                rng.random_range(model.bounds.min.z..model.bounds.max.z),
            );
            let target = (p - center).norm() - radius;
            let got = model.sdf_at(&p, None, &cameras);
            err += (got - target).abs();
        }
        err /= n as f64;
        assert!(err < 0.15, "mean |sdf - sphere| = {err}");
    }

    #[test]
    fn training_loss_decreases_over_fifty_steps() {
        // median over 5 seeds of (mean first 10) - (mean last 10) must be
        // positive on a fixed tiny scene
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 16);
        let mut deltas = Vec::new();
        for seed in 0..5 {
            let mut config = tiny_config(seed);
            config.stage1_steps = 50;
            config.stage2_steps = 0;
            config.rays_per_view = 8;
            config.lr_max = 3e-3;
            config.warmup_frac = 0.1;
            let result = fit(
                &ds,
                tiny_dims(),
                EncodingMode::RaydepthEmbed,
                &config,
                &LossWeights::default(),
                &tiny_render(),
                None,
                None,
                "test",
            )
            .unwrap();
            let totals: Vec<f64> = result.reports.iter().map(|r| r.weighted_total).collect();
            let first: f64 = totals[..10].iter().sum::<f64>() / 10.0;
            let last: f64 = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
            deltas.push(first - last);
        }
        deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            deltas[2] > 0.0,
            "median improvement must be positive: {deltas:?}"
        );
    }

    #[test]
    fn stage_reports_contain_expected_terms() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 12);
        let config = tiny_config(3);
        let result = fit(
            &ds,
            tiny_dims(),
            EncodingMode::RaydepthEmbed,
            &config,
            &LossWeights::default(),
            &tiny_render(),
            None,
            None,
            "test",
        )
        .unwrap();
        let stage1 = &result.reports[0];
        assert_eq!(
            stage1.terms.keys().copied().collect::<Vec<_>>(),
            vec!["camera", "depth-render", "normal", "rgb"]
        );
        let stage2 = result.reports.last().unwrap();
        assert!(stage2.terms.contains_key("eikonal"));
        assert!(stage2.terms.contains_key("smooth"));
        assert!(stage2.terms.contains_key("vggt-depth"));
    }

    #[test]
    fn checkpoint_resume_continues_step_counter() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 12);
        let out = tempdir().unwrap();
        let mut config = tiny_config(4);
        config.checkpoint_every = 5;
        let r1 = fit(
            &ds,
            tiny_dims(),
            EncodingMode::RaydepthEmbed,
            &config,
            &LossWeights::default(),
            &tiny_render(),
            Some(out.path()),
            None,
            "hash123",
        )
        .unwrap();
        assert_eq!(r1.final_step, 20);
        let loaded = load_checkpoint(&out.path().join("checkpoint.ckpt")).unwrap();
        assert_eq!(loaded.meta.step, 20);
        assert_eq!(loaded.meta.config_hash, "hash123");
        // resuming from the final checkpoint performs no further steps and
        // keeps the model identical
        let r2 = fit(
            &ds,
            tiny_dims(),
            EncodingMode::RaydepthEmbed,
            &config,
            &LossWeights::default(),
            &tiny_render(),
            None,
            Some(loaded),
            "hash123",
        )
        .unwrap();
        let a = r1.model.params();
        let b = r2.model.params();
        for ((_, t1, _), (_, t2, _)) in a.iter().zip(&b) {
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn deterministic_training_same_seed() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4, 12);
        let config = tiny_config(7);
        let run = || {
            fit(
                &ds,
                tiny_dims(),
                EncodingMode::RaydepthEmbed,
                &config,
                &LossWeights::default(),
                &tiny_render(),
                None,
                None,
                "x",
            )
            .unwrap()
        };
        let (r1, r2) = (run(), run());
        for ((_, t1, _), (_, t2, _)) in r1.model.params().iter().zip(&r2.model.params()) {
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
