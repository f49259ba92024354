use sdfrecon::cli::dataset::load_dataset;
use sdfrecon::field::*;
use sdfrecon::geometry::RayDepthConvention;
use sdfrecon::losses::LossWeights;
use sdfrecon::render::RenderConfig;
use sdfrecon::scenegen::*;
use sdfrecon::train::*;
use nalgebra::Vector3;
use std::time::Instant;

fn main() {
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
    let t0 = Instant::now();
    generate_dataset(&file, dir.path()).unwrap();
    println!("gen-data: {:.2}s", t0.elapsed().as_secs_f64());
    let ds = load_dataset(dir.path()).unwrap();

    let dims = ModelDims::default();
    let config = TrainConfig::default();
    let render_cfg = RenderConfig::default();
    let weights = LossWeights::default();

    let t0 = Instant::now();
    let mut model = init_model(&ds, dims, EncodingMode::RaydepthEmbed, &config).unwrap();
    println!("init+calibration: {:.2}s", t0.elapsed().as_secs_f64());

    let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t, _)| t.shape().to_vec()).collect();
    let mut opt = AdamW::new(config.optimizer, &shapes);
    println!("param tensors: {}, total params: {}", shapes.len(),
        shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>());

    for stage in [1u8, 2] {
        let t0 = Instant::now();
        let n = 20;
        for step in 0..n {
            let batch = sample_ray_batch(&ds, &model, &render_cfg, &config, step).unwrap();
            let _ = train_step(&mut model, &mut opt, &ds, &batch, &weights, stage, 1e-4, step).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("stage {stage}: {:.3}s/step -> 2000 steps = {:.1} min", dt, dt * 2000.0 / 60.0);
    }

    // inference costs
    let mf = ModelField::new(&model);
    let cam = model.camera(0);
    let t0 = Instant::now();
    let _v = sdfrecon::render::render_view(&mf, model.beta(), &cam, &render_cfg, 0).unwrap();
    println!("render_view 64x64: {:.2}s", t0.elapsed().as_secs_f64());
}
