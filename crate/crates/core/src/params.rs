//! Named flat views over every learnable tensor.
//!
//! All tensors are per-Gaussian row-major, so the same ordering serves the
//! optimizer, checkpoints and densification.

use crate::autodiff::GradientBundle;
use crate::deform::DeformField;
use crate::scene::GaussianCloud;

/// Canonical Gaussians together with their deformation field.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub field: DeformField,
}

pub const TENSOR_NAMES: [&str; 17] = [
    "means",
    "raw_scales",
    "rotations",
    "raw_opacities",
    "colors",
    "position.weights",
    "position.centers",
    "position.widths",
    "rotation.weights",
    "rotation.centers",
    "rotation.widths",
    "scale.weights",
    "scale.centers",
    "scale.widths",
    "opacity.weights",
    "opacity.centers",
    "opacity.widths",
];

pub trait ParamTensors {
    /// Tensors in [`TENSOR_NAMES`] order.
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    /// All tensors concatenated.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Inverse of [`Self::flatten`]. Panics on a length mismatch.
    fn assign(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }
}

fn cloud_tensors(c: &GaussianCloud) -> [&[f64]; 5] {
    [
        c.means.as_flattened(),
        c.raw_scales.as_flattened(),
        c.rotations.as_flattened(),
        &c.raw_opacities,
        c.colors.as_flattened(),
    ]
}

fn field_tensors(f: &DeformField) -> [&[f64]; 12] {
    [
        &f.position.weights,
        &f.position.centers,
        &f.position.widths,
        &f.rotation.weights,
        &f.rotation.centers,
        &f.rotation.widths,
        &f.scale.weights,
        &f.scale.centers,
        &f.scale.widths,
        &f.opacity.weights,
        &f.opacity.centers,
        &f.opacity.widths,
    ]
}

macro_rules! field_tensors_mut {
    ($f:expr) => {
        [
            &mut $f.position.weights[..],
            &mut $f.position.centers[..],
            &mut $f.position.widths[..],
            &mut $f.rotation.weights[..],
            &mut $f.rotation.centers[..],
            &mut $f.rotation.widths[..],
            &mut $f.scale.weights[..],
            &mut $f.scale.centers[..],
            &mut $f.scale.widths[..],
            &mut $f.opacity.weights[..],
            &mut $f.opacity.centers[..],
            &mut $f.opacity.widths[..],
        ]
    };
}

impl ParamTensors for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = cloud_tensors(&self.cloud).to_vec();
        v.extend(field_tensors(&self.field));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let c = &mut self.cloud;
        let mut v: Vec<&mut [f64]> = vec![
            c.means.as_flattened_mut(),
            c.raw_scales.as_flattened_mut(),
            c.rotations.as_flattened_mut(),
            &mut c.raw_opacities[..],
            c.colors.as_flattened_mut(),
        ];
        v.extend(field_tensors_mut!(self.field));
        v
    }
}

impl ParamTensors for GradientBundle {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            self.d_means.as_flattened(),
            self.d_raw_scales.as_flattened(),
            self.d_rotations.as_flattened(),
            &self.d_raw_opacities,
            self.d_colors.as_flattened(),
        ];
        v.extend(field_tensors(&self.d_field));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.d_means.as_flattened_mut(),
            self.d_raw_scales.as_flattened_mut(),
            self.d_rotations.as_flattened_mut(),
            &mut self.d_raw_opacities[..],
            self.d_colors.as_flattened_mut(),
        ];
        v.extend(field_tensors_mut!(self.d_field));
        v
    }
}

impl GradientBundle {
    pub fn zeros_like(model: &Model) -> Self {
        let n = model.count();
        Self {
            d_means: vec![[0.0; 3]; n],
            d_raw_scales: vec![[0.0; 3]; n],
            d_rotations: vec![[0.0; 4]; n],
            d_raw_opacities: vec![0.0; n],
            d_colors: vec![[0.0; 3]; n],
            d_field: model.field.zeros_like(),
        }
    }
}

impl Model {
    /// Row gather across every tensor (rows may repeat for cloning).
    pub fn gather(&self, rows: &[usize]) -> Self {
        Self {
            cloud: self.cloud.gather(rows),
            field: self.field.gather(rows),
        }
    }

    pub fn count(&self) -> usize {
        self.cloud.count()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Human-readable location of flat index `k`, e.g. `position.weights[g=3][7]`.
pub fn param_path(model: &Model, k: usize) -> String {
    let n = model.count().max(1);
    let mut at = 0;
    for (name, t) in TENSOR_NAMES.iter().zip(model.tensors()) {
        if k < at + t.len() {
            let local = k - at;
            let width = t.len() / n;
            return format!("{name}[g={}][{}]", local / width, local % width);
        }
        at += t.len();
    }
    format!("out-of-range[{k}]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{init_field, LifecycleMode};

    fn model(n: usize) -> Model {
        let cloud = GaussianCloud::new(
            (0..n).map(|i| [i as f64, 0.0, 1.0]).collect(),
            vec![[0.1, 0.2, 0.3]; n],
            vec![[1.0, 0.0, 0.0, 0.0]; n],
            vec![0.5; n],
            vec![[0.2; 3]; n],
        )
        .unwrap();
        Model {
            cloud,
            field: init_field(n, 3, LifecycleMode::Additive).unwrap(),
        }
    }

    #[test]
    fn flatten_round_trip_and_paths() {
        let m = model(3);
        let flat = m.flatten();
        assert_eq!(flat.len(), m.parameter_count());
        // 14 canonical scalars + 11 channels × 3 weights + 4 × (3 centers + 3 widths)
        assert_eq!(m.parameter_count(), 3 * (14 + 33 + 24));
        let mut z = m.clone();
        z.assign(&vec![0.0; flat.len()]);
        z.assign(&flat);
        assert_eq!(z, m);
        assert_eq!(param_path(&m, 4), "means[g=1][1]");
        assert_eq!(param_path(&m, 9), "raw_scales[g=0][0]");
        let g = GradientBundle::zeros_like(&m);
        assert_eq!(g.flatten().len(), flat.len());
    }
}
