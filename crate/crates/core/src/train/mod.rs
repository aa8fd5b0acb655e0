//! Joint optimization of the canonical Gaussians and the deformation field,
//! interleaved with motion-mask updates.

pub mod adam;
pub mod config;
pub mod densify;
pub mod loss;
pub mod metrics;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward_deform, backward_render};
use crate::data::{fused_init, Dataset};
use crate::deform::{deform_cloud, init_field};
use crate::error::{Error, Result};
use crate::motion::{
    active_flags, assign_regions, compute_region_stats, deformed_count, update_mask, MotionMask, RegionDecision,
    RegionStatus,
};
use crate::params::Model;
use crate::raster::{rasterize, RasterSettings, RenderOutput};
use crate::scene::{Camera, FrameSample};

use adam::{adam_step, OptimizerState};
pub use config::TrainConfig;
use densify::densify_prune;
use loss::{losses, sample_rank_pairs};

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub frame: usize,
    pub color: f64,
    pub depth: f64,
    pub rank: f64,
    pub total: f64,
    pub deformed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskUpdateRecord {
    pub iteration: usize,
    pub loss: f64,
    pub factor: f64,
    pub interval: f64,
    pub next_update_iter: usize,
    pub decisions: Vec<RegionDecision>,
    pub static_regions: usize,
    pub regions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub mask_updates: Vec<MaskUpdateRecord>,
    pub densify: Vec<String>,
    /// Sum over iterations of the Gaussians passed through the deformation field.
    pub deformed_evaluations: u64,
}

impl TrainLog {
    /// Line-delimited `key=value` records.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut updates = self.mask_updates.iter().peekable();
        let mut dens = self.densify.iter();
        for r in &self.iterations {
            let _ = writeln!(
                s,
                "iter={} frame={} color={:.9e} depth={:.9e} rank={:.9e} total={:.9e} deformed={}",
                r.iteration, r.frame, r.color, r.depth, r.rank, r.total, r.deformed
            );
            while let Some(u) = updates.next_if(|u| u.iteration == r.iteration) {
                let _ = writeln!(
                    s,
                    "mask iter={} loss={:.9e} factor={:.6} interval={:.3} next={} static={} regions={}",
                    u.iteration, u.loss, u.factor, u.interval, u.next_update_iter, u.static_regions, u.regions
                );
                for d in &u.decisions {
                    let _ = writeln!(
                        s,
                        "region iter={} id={} rect={},{},{},{} delta={:.6e} ld={:.6} ls={:.6} gaussians={} pixels={} decision={}",
                        u.iteration,
                        d.id,
                        d.rect.x0,
                        d.rect.y0,
                        d.rect.x1,
                        d.rect.y1,
                        d.stat.avg_deform,
                        d.stat.loss_deformed,
                        d.stat.loss_canonical,
                        d.stat.gaussian_count,
                        d.stat.valid_pixels,
                        d.decision.as_str()
                    );
                }
            }
        }
        for d in dens.by_ref() {
            let _ = writeln!(s, "{d}");
        }
        let _ = writeln!(
            s,
            "summary iterations={} deformed_evaluations={}",
            self.iterations.len(),
            self.deformed_evaluations
        );
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub mask: MotionMask,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
}

pub fn raster_settings(config: &TrainConfig) -> RasterSettings {
    RasterSettings {
        normalize_depth: config.normalize_depth,
        track_gates: false,
    }
}

/// Back-projected cloud, its deformation field and a fresh mask.
pub fn initialize(dataset: &Dataset, config: &TrainConfig) -> Result<(Model, MotionMask)> {
    config.validate()?;
    let train = dataset.train_frames();
    if train.len() < 2 {
        return Err(Error::Domain(format!(
            "training needs ≥ 2 training frames, found {}",
            train.len()
        )));
    }
    for (k, f) in train.iter().enumerate() {
        if f.tool_mask.iter().all(|m| *m) {
            return Err(Error::EmptyFrame(format!("training frame {}", dataset.train[k])));
        }
    }
    let extra = config.init_extra_frames.min(train.len() - 1);
    let mut seeds: Vec<&FrameSample> = vec![train[0]];
    for j in 1..=extra {
        seeds.push(train[j * (train.len() - 1) / extra]);
    }
    let cloud = fused_init(&seeds, &dataset.camera, config.init_stride)?;
    let field = init_field(cloud.count(), config.basis, config.lifecycle)?;
    let mut mask = MotionMask::new(
        dataset.camera.width,
        dataset.camera.height,
        config.grid_n,
        config.mask,
        config.mask_interval,
    )?;
    // The mask clock starts when the field does.
    mask.next_update_iter += config.deform_warmup;
    Ok((Model { cloud, field }, mask))
}

/// Deformation flags for rendering: mask-driven when the hierarchy is on.
pub fn render_flags(camera: &Camera, model: &Model, mask: &MotionMask, amhs: bool) -> Vec<bool> {
    if amhs {
        active_flags(mask, &assign_regions(camera, &model.cloud, mask))
    } else {
        vec![true; model.count()]
    }
}

pub fn render_model(
    camera: &Camera,
    model: &Model,
    active: &[bool],
    t: f64,
    settings: &RasterSettings,
) -> Result<RenderOutput> {
    rasterize(camera, &deform_cloud(&model.cloud, &model.field, t, active)?, settings)
}

fn evenly_spaced(count: usize, k: usize) -> Vec<usize> {
    let k = k.min(count);
    (0..k).map(|j| j * count / k).collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, config, |_| {})
}

/// Runs training, calling `progress` after every iteration.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&IterationRecord),
) -> Result<TrainState> {
    let (mut model, mut mask) = initialize(dataset, config)?;
    let camera = &dataset.camera;
    let mut optimizer = OptimizerState::new(&model, config.adam);
    let mut log = TrainLog::default();
    let raster = raster_settings(config);
    let lrs = config.tensor_learning_rates();
    let train_idx = &dataset.train;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let margin = config.loss.rank_margin * camera.zfar;

    let mut loss_window = (0.0, 0usize);
    let mut grad_accum = vec![0.0; model.count()];
    let mut grad_count = vec![0u32; model.count()];

    for it in 0..config.iterations {
        let iteration = it + 1;
        let frame_index = train_idx[it % train_idx.len()];
        let frame = &dataset.frames[frame_index];
        let active = if it < config.deform_warmup {
            vec![false; model.count()]
        } else {
            render_flags(camera, &model, &mask, config.amhs)
        };
        let attrs = deform_cloud(&model.cloud, &model.field, frame.timestamp, &active)?;
        let out = rasterize(camera, &attrs, &raster)?;
        let pairs = sample_rank_pairs(frame, config.loss.rank_pairs, margin, &mut rng);
        let (terms, d_pix) = losses(&out, frame, &config.loss, &pairs)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let d_attrs = backward_render(camera, &attrs, &out, &d_pix)?;
        let grads = backward_deform(&model.cloud, &model.field, frame.timestamp, &active, &d_attrs)?;
        let decay = config.lr_decay(it);
        adam_step(&mut model, &grads, &mut optimizer, &lrs.map(|r| r * decay))?;

        let deformed = deformed_count(&active);
        log.deformed_evaluations += deformed as u64;
        loss_window.0 += terms.total;
        loss_window.1 += 1;
        let record = IterationRecord {
            iteration,
            frame: frame_index,
            color: terms.color,
            depth: terms.depth,
            rank: terms.rank,
            total: terms.total,
            deformed,
        };
        progress(&record);
        log.iterations.push(record);

        if config.densify.enabled {
            for (i, g) in d_attrs.mean2d_grad_norm.iter().enumerate() {
                if *g > 0.0 {
                    grad_accum[i] += g;
                    grad_count[i] += 1;
                }
            }
            let d = &config.densify;
            if iteration >= d.from && iteration <= d.until && iteration % d.interval == 0 {
                let mean: Vec<f64> = grad_accum
                    .iter()
                    .zip(&grad_count)
                    .map(|(s, &c)| if c > 0 { s / f64::from(c) } else { 0.0 })
                    .collect();
                let before = model.count();
                let outcome = densify_prune(&model, &mean, d);
                optimizer = optimizer.gather(before, &outcome.sources);
                model = outcome.model;
                log.densify.push(format!(
                    "densify iter={iteration} before={before} after={} cloned={} split={} pruned={}",
                    model.count(),
                    outcome.cloned,
                    outcome.split,
                    outcome.pruned
                ));
                grad_accum = vec![0.0; model.count()];
                grad_count = vec![0; model.count()];
            }
        }

        if config.amhs && iteration >= mask.next_update_iter {
            let current = loss_window.0 / loss_window.1.max(1) as f64;
            loss_window = (0.0, 0);
            let assignment = assign_regions(camera, &model.cloud, &mask);
            let sample: Vec<&FrameSample> = evenly_spaced(train_idx.len(), config.mask_samples)
                .into_iter()
                .map(|k| &dataset.frames[train_idx[k]])
                .collect();
            let stats = compute_region_stats(&model.cloud, &model.field, &assignment, camera, &mask, &sample, &raster)?;
            let update = update_mask(&mask, &stats, iteration, current)?;
            mask = update.mask;
            log.mask_updates.push(MaskUpdateRecord {
                iteration,
                loss: current,
                factor: update.factor,
                interval: mask.interval,
                next_update_iter: mask.next_update_iter,
                decisions: update.decisions,
                static_regions: mask.static_count(),
                regions: mask.regions.len(),
            });
        }
    }
    Ok(TrainState {
        model,
        mask,
        optimizer,
        log,
    })
}

/// Per-frame `(index, psnr, ssim)` on the test split.
pub fn evaluate(
    dataset: &Dataset,
    model: &Model,
    mask: &MotionMask,
    amhs: bool,
    settings: &RasterSettings,
) -> Result<Vec<(usize, f64, f64)>> {
    let cam = &dataset.camera;
    let active = render_flags(cam, model, mask, amhs);
    dataset
        .test
        .iter()
        .map(|&i| {
            let f = &dataset.frames[i];
            let out = render_model(cam, model, &active, f.timestamp, settings)?;
            Ok((
                i,
                metrics::psnr(&out.color, &f.image)?,
                metrics::ssim(&out.color, &f.image, cam.width, cam.height)?,
            ))
        })
        .collect()
}

/// Fraction of regions in `mask` that are static.
pub fn static_fraction(mask: &MotionMask) -> f64 {
    let n = mask.regions.len().max(1);
    mask.regions.iter().filter(|r| r.status == RegionStatus::Static).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthSpec};

    fn tiny_dataset() -> Dataset {
        let spec = SynthSpec {
            width: 32,
            height: 32,
            frames: 8,
            background_grid: 8,
            blobs: 2,
            ..SynthSpec::preset("cut").unwrap()
        };
        synth_dataset(&spec).unwrap().0
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            basis: 4,
            grid_n: 2,
            mask_interval: 5.0,
            mask: crate::motion::MaskSettings {
                min_side: 4,
                ..Default::default()
            },
            init_stride: 4,
            deform_warmup: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let d = tiny_dataset();
        let c = quick(0);
        let state = train(&d, &c).unwrap();
        let (model, mask) = initialize(&d, &c).unwrap();
        assert_eq!(state.model, model);
        assert_eq!(state.mask, mask);
        assert!(state.log.iterations.is_empty());
    }

    #[test]
    fn short_run_is_deterministic_and_logs_updates() {
        let d = tiny_dataset();
        let c = quick(12);
        let a = train(&d, &c).unwrap();
        let b = train(&d, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.to_text(), b.log.to_text());
        assert_eq!(a.log.iterations.len(), 12);
        assert!(!a.log.mask_updates.is_empty());
        assert!(a.log.to_text().contains("mask iter=7"));
        assert_ne!(a.model, initialize(&d, &c).unwrap().0);
    }

    #[test]
    fn amhs_off_matches_pinned_dynamic_mask() {
        let d = tiny_dataset();
        let mut off = quick(8);
        off.amhs = false;
        let mut pinned = quick(8);
        pinned.mask_interval = 1e9;
        let a = train(&d, &off).unwrap();
        let b = train(&d, &pinned).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.iterations, b.log.iterations);
    }

    #[test]
    fn rejects_all_masked_training_frame() {
        let mut d = tiny_dataset();
        let i = d.train[1];
        d.frames[i].tool_mask = vec![true; 32 * 32];
        assert!(matches!(train(&d, &quick(1)), Err(Error::EmptyFrame(_))));
    }

    #[test]
    fn densify_keeps_optimizer_in_step() {
        let d = tiny_dataset();
        let mut c = quick(6);
        c.densify = densify::DensifySettings {
            enabled: true,
            from: 1,
            until: 6,
            interval: 3,
            grad_threshold: 0.0,
            ..Default::default()
        };
        let s = train(&d, &c).unwrap();
        assert!(s.model.count() > initialize(&d, &c).unwrap().0.count());
        assert_eq!(s.optimizer.m[0].len(), 3 * s.model.count());
        assert_eq!(s.log.densify.len(), 2);
    }
}
