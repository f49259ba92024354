use sdfrecon::cli::dataset::load_dataset;
use sdfrecon::field::*;
use sdfrecon::geometry::{encode_camera, RayDepthConvention};
use sdfrecon::losses::LossWeights;
use sdfrecon::render::{render_view, RenderConfig};
use sdfrecon::scenegen::*;
use sdfrecon::train::*;
use nalgebra::Vector3;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);

    let dir = tempfile::tempdir().unwrap();
    let file = SceneFile {
        version: 1,
        scene: preset_scene("sphere").unwrap(),
        rig: CameraRig {
            count: 8,
            placement: RigPlacement::Orbit { radius: 2.5, elevation: 0.35 },
            look_at: Vector3::zeros(),
            fov: (1.05, 1.05),
            resolution: (64, 64),
        },
        light: Vector3::new(0.4, 0.8, 0.45),
        background: BACKGROUND_COLOR,
        seed: 0,
        ray_depth_convention: RayDepthConvention::Distance,
    };
    generate_dataset(&file, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();

    let config = TrainConfig { stage1_steps: steps, stage2_steps: steps, lr_max: lr, ..TrainConfig::default() };
    let t0 = Instant::now();
    let result = fit(&ds, ModelDims::default(), EncodingMode::RaydepthEmbed, &config,
        &LossWeights::default(), &RenderConfig::default(), None, None, "probe").unwrap();
    println!("trained {} steps in {:.1}s, skipped {}", result.final_step, t0.elapsed().as_secs_f64(), result.skipped_steps);
    let model = result.model;
    for w in [0, (steps as usize/10), steps as usize - 10, 2*steps as usize - 10] {
        let r = &result.reports[w.min(result.reports.len()-1)];
        println!("  step {w}: total={:.4} rgb={:.4} depth={:.4} normal={:.4} cam={:.6} eik={} ",
            r.weighted_total, r.terms.get("rgb").unwrap_or(&f64::NAN), r.terms.get("depth-render").unwrap_or(&f64::NAN),
            r.terms.get("normal").unwrap_or(&f64::NAN), r.terms.get("camera").unwrap_or(&f64::NAN),
            r.terms.get("eikonal").map(|v| format!("{v:.4}")).unwrap_or("-".into()));
    }
    println!("beta = {:.5}", model.beta());
    // radial SDF profile along +x/+y/+z and a diagonal
    let mf0 = ModelField::new(&model);
    for d in [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::new(1.0,1.0,1.0).normalize()] {
        let prof: Vec<String> = [0.2, 0.6, 0.9, 1.0, 1.1, 1.24].iter()
            .map(|&r| format!("{:+.3}", mf0.sdf(&(d * r)))).collect();
        println!("  sdf along {:?}: {}", [d.x, d.y, d.z].map(|v| (v*100.0).round()/100.0), prof.join(" "));
    }

    // SDF radius accuracy along random directions
    let mf = ModelField::new(&model);
    let mut err = 0.0;
    let mut n = 0;
    use rand::Rng; use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        // bisect the learned sdf along the ray from origin
        let (mut lo, mut hi) = (0.2, 1.24);
        if mf.sdf(&(d * lo)) > 0.0 || mf.sdf(&(d * hi)) < 0.0 { continue; }
        for _ in 0..40 { let mid: f64 = 0.5 * (lo + hi); if mf.sdf(&(d * mid)) < 0.0 { lo = mid; } else { hi = mid; } }
        err += (0.5 * (lo + hi) - 1.0f64).abs();
        n += 1;
    }
    println!("learned zero-set radius: mean |r - 1| = {:.4} over {n} dirs", err / n.max(1) as f64);

    // held-out view: orbit position between training cameras
    let scene = preset_scene("sphere").unwrap();
    let mid_az = 2.0 * std::f64::consts::PI * 0.5 / 8.0;
    let pos = Vector3::new(0.35f64.cos() * mid_az.cos(), 0.35f64.sin(), 0.35f64.cos() * mid_az.sin()) * 2.5;
    let rot = look_at_rotation(&pos, &Vector3::zeros());
    let cam_scene = sdfrecon::geometry::Camera::new(rot, pos, (1.05, 1.05), (64, 64)).unwrap();
    let gt = render_gt_view(&scene, &cam_scene, &file.light, RayDepthConvention::Distance);
    // move the camera into the canonical frame
    let cam_canon = sdfrecon::cli::dataset::reframe_camera(&cam_scene, &{
        let c0 = file.rig.build(0).unwrap().remove(0); c0
    });
    let t0 = Instant::now();
    let rv = render_view(&mf, model.beta(), &cam_canon, &RenderConfig::default(), 7).unwrap();
    let img = rv.over_background(model.background);
    let mse: f64 = img.iter().zip(&gt.image).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.len() as f64;
    println!("held-out PSNR = {:.2} dB (render {:.1}s)", -10.0 * mse.log10(), t0.elapsed().as_secs_f64());
    let _ = encode_camera(&cam_canon);
}
