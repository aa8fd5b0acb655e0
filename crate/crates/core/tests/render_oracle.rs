use ehsg_core::deform::deform_cloud;
use ehsg_core::gradcheck::{random_scene, GradcheckSettings};
use ehsg_core::raster::{rasterize, rasterize_reference, RasterSettings};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tiled_matches_brute_force() {
    let s = GradcheckSettings {
        gaussians: 100,
        size: 64,
        ..Default::default()
    };
    for seed in 0..50 {
        let scene = random_scene(seed, &s).unwrap();
        let m = &scene.model;
        let attrs = deform_cloud(&m.cloud, &m.field, scene.frame.timestamp, &scene.active).unwrap();
        for normalize_depth in [false, true] {
            let settings = RasterSettings {
                normalize_depth,
                track_gates: false,
            };
            let tiled = rasterize(&scene.camera, &attrs, &settings).unwrap();
            let brute = rasterize_reference(&scene.camera, &attrs, &settings).unwrap();
            let flat = |c: &[[f64; 3]]| c.iter().flatten().copied().collect::<Vec<_>>();
            let dc = max_diff(&flat(&tiled.color), &flat(&brute.color));
            let dd = max_diff(&tiled.depth, &brute.depth);
            assert!(dc < 1e-5 && dd < 1e-5, "seed {seed}: color {dc:e} depth {dd:e}");
        }
    }
}

#[test]
fn render_is_independent_of_thread_count() {
    let s = GradcheckSettings {
        gaussians: 80,
        size: 64,
        ..Default::default()
    };
    let scene = random_scene(7, &s).unwrap();
    let m = &scene.model;
    let attrs = deform_cloud(&m.cloud, &m.field, 0.3, &scene.active).unwrap();
    let settings = RasterSettings::default();
    let render = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| rasterize(&scene.camera, &attrs, &settings).unwrap())
    };
    let a = render(1);
    let b = render(4);
    assert_eq!(a.color, b.color);
    assert_eq!(a.depth, b.depth);
}
