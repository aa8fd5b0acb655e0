//! Optional clone/split/prune pass over the canonical Gaussians.

use crate::deform::LifecycleMode;
use crate::params::Model;
use crate::scene::{rotation_matrix, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifySettings {
    pub enabled: bool,
    pub from: usize,
    pub until: usize,
    pub interval: usize,
    pub grad_threshold: f64,
    /// Fraction of the largest scene extent.
    pub scale_threshold: f64,
    pub prune_opacity: f64,
}

impl Default for DensifySettings {
    fn default() -> Self {
        Self {
            enabled: false,
            from: 200,
            until: 1500,
            interval: 100,
            grad_threshold: 2e-4,
            scale_threshold: 0.01,
            prune_opacity: 0.005,
        }
    }
}

pub const SPLIT_SHRINK: f64 = 1.6;

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub model: Model,
    /// Source row of every output row.
    pub sources: Vec<usize>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large Gaussians whose mean screen-space gradient
/// norm exceeds the threshold, and prunes transparent ones when opacity has
/// no lifecycle term. Split children sit one standard deviation either side
/// of the parent along its largest axis.
pub fn densify_prune(model: &Model, grad_norm: &[f64], settings: &DensifySettings) -> DensifyOutcome {
    let cloud = &model.cloud;
    let n = cloud.count();
    let extent = cloud.extents().iter().cloned().fold(0.0, f64::max);
    let prune = model.field.lifecycle == LifecycleMode::None;
    let mut sources = Vec::with_capacity(n);
    let mut offsets: Vec<Option<[f64; 3]>> = Vec::with_capacity(n);
    let (mut cloned, mut split, mut pruned) = (0, 0, 0);
    for i in 0..n {
        if prune && sigmoid(cloud.raw_opacities[i]) < settings.prune_opacity {
            pruned += 1;
            continue;
        }
        let g = grad_norm.get(i).copied().unwrap_or(0.0);
        if !(g > settings.grad_threshold) {
            sources.push(i);
            offsets.push(None);
            continue;
        }
        let s = cloud.raw_scales[i];
        let (axis, smax) = (0..3)
            .map(|k| (k, s[k].exp()))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if smax <= settings.scale_threshold * extent {
            cloned += 1;
            sources.extend([i, i]);
            offsets.extend([None, None]);
        } else {
            split += 1;
            let r = rotation_matrix(&cloud.rotations[i]).unwrap_or_else(|_| nalgebra::Matrix3::identity());
            let d = [r[(0, axis)] * smax, r[(1, axis)] * smax, r[(2, axis)] * smax];
            sources.extend([i, i]);
            offsets.extend([Some(d), Some([-d[0], -d[1], -d[2]])]);
        }
    }
    let mut out = model.gather(&sources);
    for (k, off) in offsets.iter().enumerate() {
        if let Some(d) = off {
            for a in 0..3 {
                out.cloud.means[k][a] += d[a];
                out.cloud.raw_scales[k][a] -= SPLIT_SHRINK.ln();
            }
        }
    }
    DensifyOutcome {
        model: out,
        sources,
        cloned,
        split,
        pruned,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::init_field;
    use crate::scene::GaussianCloud;

    fn model(lifecycle: LifecycleMode) -> Model {
        let cloud = GaussianCloud::new(
            vec![[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [0.0, 1.0, 6.0]],
            vec![[-5.0; 3], [0.0, -3.0, -3.0], [-5.0; 3]],
            vec![[1.0, 0.0, 0.0, 0.0]; 3],
            vec![0.0, 0.0, -9.2],
            vec![[0.5; 3]; 3],
        )
        .unwrap();
        let mut field = init_field(3, 2, lifecycle).unwrap();
        field.position.weights[0] = 0.7;
        Model { cloud, field }
    }

    #[test]
    fn infinite_threshold_is_identity() {
        let m = model(LifecycleMode::Additive);
        let s = DensifySettings {
            grad_threshold: f64::INFINITY,
            ..Default::default()
        };
        let out = densify_prune(&m, &[1e9; 3], &s);
        assert_eq!(out.model, m);
        assert_eq!(out.sources, vec![0, 1, 2]);
    }

    #[test]
    fn clone_small_gaussian() {
        let m = model(LifecycleMode::Additive);
        let out = densify_prune(&m, &[1.0, 0.0, 0.0], &DensifySettings::default());
        assert_eq!(out.model.count(), 4);
        assert_eq!(out.cloned, 1);
        assert_eq!(out.model.cloud.means[0], out.model.cloud.means[1]);
        assert_eq!(out.model.field.position.weights[0], 0.7);
        assert_eq!(out.model.field.position.weights[3 * 2], 0.7);
    }

    #[test]
    fn split_large_gaussian() {
        let m = model(LifecycleMode::Additive);
        let out = densify_prune(&m, &[0.0, 1.0, 0.0], &DensifySettings::default());
        assert_eq!(out.split, 1);
        assert_eq!(out.model.count(), 4);
        let (a, b) = (out.model.cloud.means[1], out.model.cloud.means[2]);
        assert!((a[0] - 2.0).abs() < 1e-12 && b[0].abs() < 1e-12);
        assert!((out.model.cloud.raw_scales[1][0] + 1.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prune_only_without_lifecycle() {
        let out = densify_prune(&model(LifecycleMode::None), &[0.0; 3], &DensifySettings::default());
        assert_eq!(out.pruned, 1);
        assert_eq!(out.sources, vec![0, 1]);
        let kept = densify_prune(&model(LifecycleMode::Additive), &[0.0; 3], &DensifySettings::default());
        assert_eq!(kept.pruned, 0);
    }
}
