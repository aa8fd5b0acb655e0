//! Seeded finite-difference check of the full loss pipeline:
//! deformation, rasterization and losses back to every parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward_deform, backward_render, finite_diff_check, FdReport, Probe};
use crate::deform::{deform_cloud, init_field, LifecycleMode};
use crate::error::Result;
use crate::params::{param_path, Model, ParamTensors};
use crate::raster::{rasterize, RasterSettings};
use crate::scene::{Camera, FrameSample, GaussianCloud};
use crate::train::loss::{losses, sample_rank_pairs, LossSettings, RankPair};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckSettings {
    pub gaussians: usize,
    pub size: usize,
    pub basis: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            gaussians: 20,
            size: 32,
            basis: 3,
            step: 1e-4,
            tolerance: 1e-3,
        }
    }
}

/// Everything needed to evaluate the loss of one random scene.
#[derive(Clone, Debug)]
pub struct GradScene {
    pub camera: Camera,
    pub model: Model,
    pub frame: FrameSample,
    pub active: Vec<bool>,
    pub pairs: Vec<RankPair>,
    pub loss: LossSettings,
    pub raster: RasterSettings,
}

/// A random scene in front of the camera with a non-trivial field and a
/// random target. The lifecycle mode cycles with the seed.
pub fn random_scene(seed: u64, s: &GradcheckSettings) -> Result<GradScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = s.size;
    let f = 0.9 * size as f64;
    let camera = Camera::new(size, size, f, f, size as f64 / 2.0, size as f64 / 2.0, 0.01, 50.0)?;
    let n = s.gaussians;
    let cloud = GaussianCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(3.0..5.0),
                ]
            })
            .collect(),
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-2.0..-0.8),
                    rng.gen_range(-2.0..-0.8),
                    rng.gen_range(-2.0..-0.8),
                ]
            })
            .collect(),
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.5..1.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
    )?;
    let lifecycle = [
        LifecycleMode::Additive,
        LifecycleMode::Multiplicative,
        LifecycleMode::None,
    ][(seed % 3) as usize];
    let mut field = init_field(n, s.basis, lifecycle)?;
    for w in &mut field.position.weights {
        *w = rng.gen_range(-0.2..0.2);
    }
    for w in &mut field.rotation.weights {
        *w = rng.gen_range(-0.2..0.2);
    }
    for w in &mut field.scale.weights {
        *w = rng.gen_range(-0.3..0.3);
    }
    for w in &mut field.opacity.weights {
        *w += rng.gen_range(-0.5..0.5);
    }
    for c in [
        &mut field.position,
        &mut field.rotation,
        &mut field.scale,
        &mut field.opacity,
    ] {
        for (k, w) in c.widths.iter_mut().enumerate() {
            *w = rng.gen_range(0.2..0.5);
            c.centers[k] += rng.gen_range(-0.1..0.1);
        }
    }
    let t = rng.gen_range(0.0..1.0);
    let pixels = size * size;
    let frame = FrameSample::new(
        size,
        size,
        (0..pixels).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        (0..pixels)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(2.0..6.0)
                }
            })
            .collect(),
        (0..pixels).map(|_| rng.gen_bool(0.1)).collect(),
        t,
    )?;
    let active = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    let loss = LossSettings {
        lambda_rank: 0.5,
        ..Default::default()
    };
    let pairs = sample_rank_pairs(&frame, 256, loss.rank_margin * camera.zfar, &mut rng);
    Ok(GradScene {
        camera,
        model: Model { cloud, field },
        frame,
        active,
        pairs,
        loss,
        raster: RasterSettings {
            normalize_depth: seed % 2 == 1,
            track_gates: true,
        },
    })
}

impl GradScene {
    /// Loss and gate fingerprint at the given model.
    pub fn probe(&self, model: &Model) -> Result<Probe> {
        let attrs = deform_cloud(&model.cloud, &model.field, self.frame.timestamp, &self.active)?;
        let out = rasterize(&self.camera, &attrs, &self.raster)?;
        let (terms, _) = losses(&out, &self.frame, &self.loss, &self.pairs)?;
        Ok(Probe {
            loss: terms.total,
            gate: out.gate_signature ^ terms.kink_signature.rotate_left(17),
        })
    }

    /// Analytic gradient in flat parameter order.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let m = &self.model;
        let attrs = deform_cloud(&m.cloud, &m.field, self.frame.timestamp, &self.active)?;
        let out = rasterize(&self.camera, &attrs, &self.raster)?;
        let (_, d_pix) = losses(&out, &self.frame, &self.loss, &self.pairs)?;
        let d_attrs = backward_render(&self.camera, &attrs, &out, &d_pix)?;
        Ok(backward_deform(&m.cloud, &m.field, self.frame.timestamp, &self.active, &d_attrs)?.flatten())
    }
}

/// Central differences against the analytic gradient for one seeded scene.
pub fn check_scene(seed: u64, settings: &GradcheckSettings) -> Result<FdReport> {
    let scene = random_scene(seed, settings)?;
    let analytic = scene.gradient()?;
    let params = scene.model.flatten();
    let mut scratch = scene.model.clone();
    let report = finite_diff_check(
        |x| {
            scratch.assign(x);
            scene.probe(&scratch).unwrap_or(Probe {
                loss: f64::NAN,
                gate: u64::MAX,
            })
        },
        &params,
        &analytic,
        |k| param_path(&scene.model, k),
        settings.step,
        settings.tolerance,
    );
    Ok(report)
}
