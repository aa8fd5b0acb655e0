//! Reverse-mode gradients for rendering and deformation, and a central
//! finite-difference checker.
//!
//! The backward pass replays each pixel's composited list back to front,
//! recovering the transmittance in front of every splat from the stored final
//! transmittance. Cutoffs act as gates: skipped or clamped contributions get
//! no gradient through the gated quantity.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::deform::{backward_row, basis_sum, deform_one, DeformField, LifecycleMode};
use crate::error::{Error, Result};
use crate::raster::{evaluate, projection_jacobian, RenderAttributes, RenderCache, RenderOutput, TILE_SIZE};
use crate::scene::{covariance3d_backward, sigmoid, Camera, GaussianCloud};

/// Upstream gradients on the rendered images.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGradients {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl PixelGradients {
    pub fn zeros(pixels: usize) -> Self {
        Self {
            color: vec![[0.0; 3]; pixels],
            depth: vec![0.0; pixels],
        }
    }
}

/// Gradients with respect to [`RenderAttributes`].
///
/// Covariance gradients treat all nine entries as independent.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeGradients {
    pub d_means3d: Vec<[f64; 3]>,
    pub d_covariances3d: Vec<Matrix3<f64>>,
    pub d_opacities: Vec<f64>,
    pub d_colors: Vec<[f64; 3]>,
    /// Norm of the gradient on each projected 2D mean (densification statistic).
    pub mean2d_grad_norm: Vec<f64>,
}

impl AttributeGradients {
    fn zeros(n: usize) -> Self {
        Self {
            d_means3d: vec![[0.0; 3]; n],
            d_covariances3d: vec![Matrix3::zeros(); n],
            d_opacities: vec![0.0; n],
            d_colors: vec![[0.0; 3]; n],
            mean2d_grad_norm: vec![0.0; n],
        }
    }
}

/// Loss gradients for every learnable parameter, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_means: Vec<[f64; 3]>,
    pub d_raw_scales: Vec<[f64; 3]>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_raw_opacities: Vec<f64>,
    pub d_colors: Vec<[f64; 3]>,
    pub d_field: DeformField,
}

/// Image-space gradient of one splat, accumulated over pixels.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn backward_pixel(
    cache: &RenderCache,
    out: &RenderOutput,
    d_out: &PixelGradients,
    x: usize,
    y: usize,
    list: &[u32],
    acc: &mut [SplatGrad],
) {
    let p = y * out.width + x;
    let n = cache.contrib[p] as usize;
    if n == 0 {
        return;
    }
    let gc = d_out.color[p];
    let mut gd = d_out.depth[p];
    let t_final = out.final_transmittance[p];
    let mut g_t = 0.0;
    if cache.settings.normalize_depth {
        let covered = 1.0 - t_final;
        if covered > 1e-6 {
            g_t = gd * cache.raw_depth[p] / (covered * covered);
            gd /= covered;
        } else {
            gd = 0.0;
        }
    }
    if gc == [0.0; 3] && gd == 0.0 && g_t == 0.0 {
        return;
    }
    let (px, py) = (x as f64, y as f64);
    let mut t = t_final;
    let mut behind_c = [0.0; 3];
    let mut behind_d = 0.0;
    for k in (0..n).rev() {
        let s = &cache.splats[list[k] as usize];
        let Some(c) = evaluate(s, px, py) else {
            continue;
        };
        let a = c.alpha;
        let one_minus = 1.0 - a;
        let t_i = t / one_minus;
        let w = a * t_i;
        let g = &mut acc[k];
        for ch in 0..3 {
            g.color[ch] += gc[ch] * w;
        }
        g.depth += gd * w;
        let mut dl_da = 0.0;
        for ch in 0..3 {
            dl_da += gc[ch] * (s.color[ch] - behind_c[ch]);
        }
        dl_da += gd * (s.depth - behind_d);
        dl_da *= t_i;
        dl_da -= g_t * t_final / one_minus;
        for ch in 0..3 {
            behind_c[ch] = a * s.color[ch] + one_minus * behind_c[ch];
        }
        behind_d = a * s.depth + one_minus * behind_d;
        t = t_i;
        if c.clamped {
            continue;
        }
        g.opacity += dl_da * c.gauss;
        let dl_dpower = -dl_da * a;
        let (dx, dy) = (c.dx, c.dy);
        g.conic[0] += dl_dpower * 0.5 * dx * dx;
        g.conic[1] += dl_dpower * dx * dy;
        g.conic[2] += dl_dpower * 0.5 * dy * dy;
        g.mean[0] -= dl_dpower * (s.conic[0] * dx + s.conic[1] * dy);
        g.mean[1] -= dl_dpower * (s.conic[1] * dx + s.conic[2] * dy);
    }
}

/// Gradients of a scalar loss with respect to the render attributes, given
/// the loss gradients on the rendered color and depth images.
pub fn backward_render(
    camera: &Camera,
    attrs: &RenderAttributes,
    out: &RenderOutput,
    d_out: &PixelGradients,
) -> Result<AttributeGradients> {
    let n = attrs.len();
    let pixels = out.width * out.height;
    let cache = &out.cache;
    if cache.splats.len() != n || camera.width != out.width || camera.height != out.height {
        return Err(Error::Shape(
            "render output does not belong to these attributes and camera".into(),
        ));
    }
    if d_out.color.len() != pixels || d_out.depth.len() != pixels {
        return Err(Error::Shape(format!(
            "pixel gradients have {} color and {} depth entries for {pixels} pixels",
            d_out.color.len(),
            d_out.depth.len()
        )));
    }

    let mut splat_grads = vec![SplatGrad::default(); n];
    if cache.tiled {
        let (w, h) = (out.width, out.height);
        let tiles_x = cache.tiles_x;
        // Per-tile buffers aligned with each tile's list, merged in tile order.
        let per_tile: Vec<Vec<SplatGrad>> = (0..cache.lists.len())
            .into_par_iter()
            .map(|tile| {
                let list = &cache.lists[tile];
                let mut acc = vec![SplatGrad::default(); list.len()];
                let (tx, ty) = (tile % tiles_x, tile / tiles_x);
                for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                    for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                        backward_pixel(cache, out, d_out, x, y, list, &mut acc);
                    }
                }
                acc
            })
            .collect();
        for (tile, acc) in per_tile.iter().enumerate() {
            for (k, g) in acc.iter().enumerate() {
                splat_grads[cache.lists[tile][k] as usize].add(g);
            }
        }
    } else {
        let list = &cache.lists[0];
        let mut acc = vec![SplatGrad::default(); list.len()];
        for y in 0..out.height {
            for x in 0..out.width {
                backward_pixel(cache, out, d_out, x, y, list, &mut acc);
            }
        }
        for (k, g) in acc.iter().enumerate() {
            splat_grads[list[k] as usize].add(g);
        }
    }

    let mut grads = AttributeGradients::zeros(n);
    let w_rot = camera.rotation();
    for i in 0..n {
        let Some(proj) = &cache.projections[i] else {
            continue;
        };
        let g = &splat_grads[i];
        grads.d_colors[i] = g.color;
        grads.d_opacities[i] = g.opacity;
        grads.mean2d_grad_norm[i] = g.mean[0].hypot(g.mean[1]);

        // conic = inverse(Σ'): dL/dΣ' = -Q G_Q Q
        let q = Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
        let g_q = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2 = -(q * g_q * q);

        let cam = Vector3::from(proj.cam);
        let j = projection_jacobian(camera, &cam);
        let t = j * w_rot;
        let cov = &attrs.covariances3d[i];
        grads.d_covariances3d[i] = t.transpose() * g_cov2 * t;
        let g_t = 2.0 * g_cov2 * t * cov;
        let g_j = g_t * w_rot.transpose();

        let (x, y, z) = (cam.x, cam.y, cam.z);
        let (fx, fy) = (camera.fx, camera.fy);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_cam = Vector3::new(
            g.mean[0] * fx * iz,
            g.mean[1] * fy * iz,
            -g.mean[0] * fx * x * iz2 - g.mean[1] * fy * y * iz2 + g.depth,
        );
        d_cam.x += g_j[(0, 2)] * (-fx * iz2);
        d_cam.y += g_j[(1, 2)] * (-fy * iz2);
        d_cam.z += g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * y * iz3);
        let d_mean = w_rot.transpose() * d_cam;
        grads.d_means3d[i] = [d_mean.x, d_mean.y, d_mean.z];
    }
    Ok(grads)
}

/// Propagates attribute gradients through activation, covariance
/// construction and the deformation field.
pub fn backward_deform(
    cloud: &GaussianCloud,
    field: &DeformField,
    t: f64,
    active: &[bool],
    d_attrs: &AttributeGradients,
) -> Result<GradientBundle> {
    let n = cloud.count();
    if active.len() != n || d_attrs.d_means3d.len() != n {
        return Err(Error::Shape(format!(
            "backward_deform: {n} gaussians, {} flags, {} gradients",
            active.len(),
            d_attrs.d_means3d.len()
        )));
    }
    let b = field.basis();
    let mut out = GradientBundle {
        d_means: vec![[0.0; 3]; n],
        d_raw_scales: vec![[0.0; 3]; n],
        d_rotations: vec![[0.0; 4]; n],
        d_raw_opacities: vec![0.0; n],
        d_colors: d_attrs.d_colors.clone(),
        d_field: field.zeros_like(),
    };
    let mut basis = vec![0.0; b];
    for i in 0..n {
        let d = deform_one(cloud, field, i, t, active[i], &mut basis);
        let (d_scale, d_rot) = covariance3d_backward(&d.raw_scale, &d.rotation, &d_attrs.d_covariances3d[i])?;
        let s = sigmoid(d.raw_opacity);
        let d_raw_op = d_attrs.d_opacities[i] * s * (1.0 - s);
        let d_mean = d_attrs.d_means3d[i];

        out.d_means[i] = d_mean;
        out.d_raw_scales[i] = d_scale;
        out.d_rotations[i] = d_rot;
        out.d_raw_opacities[i] = d_raw_op;
        if !active[i] {
            continue;
        }

        macro_rules! head {
            ($group:ident, $grad:expr, $scale:expr) => {{
                let f = &field.$group;
                let gf = &mut out.d_field.$group;
                let wb = f.channels * b;
                backward_row(
                    &f.row(i),
                    t,
                    $grad,
                    $scale,
                    &mut gf.weights[i * wb..(i + 1) * wb],
                    &mut gf.centers[i * b..(i + 1) * b],
                    &mut gf.widths[i * b..(i + 1) * b],
                );
            }};
        }
        head!(position, &d_mean, 1.0);
        head!(rotation, &d_rot, 1.0);
        head!(scale, &d_scale, 1.0);
        match field.lifecycle {
            LifecycleMode::Additive => head!(opacity, &[d_raw_op], 1.0),
            LifecycleMode::Multiplicative => {
                let alpha0 = cloud.raw_opacities[i];
                out.d_raw_opacities[i] = d_raw_op * basis_sum(&field.opacity.row(i), t);
                head!(opacity, &[d_raw_op], alpha0);
            }
            LifecycleMode::None => {}
        }
    }
    Ok(out)
}

/// One evaluation of the function under test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// Fingerprint of every non-differentiable branch taken; evaluations with
    /// different fingerprints are not comparable by finite differences.
    pub gate: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Checked parameters, worst first.
    pub entries: Vec<FdEntry>,
    pub skipped_gate: usize,
    pub skipped_small: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.rel_error)
    }

    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries.first()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.entries.len()
    }
}

/// Magnitude below which a gradient component is not compared.
pub const FD_MIN_GRAD: f64 = 1e-6;

/// Central finite differences on every scalar of `params`.
///
/// A parameter is excluded when perturbing it by `±step` or `±10·step`
/// changes the gate fingerprint, or when both gradients are below
/// [`FD_MIN_GRAD`]. Relative error is `|a − n| / max(|a|, |n|)`.
pub fn finite_diff_check<F, N>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    path: N,
    step: f64,
    tolerance: f64,
) -> FdReport
where
    F: FnMut(&[f64]) -> Probe,
    N: Fn(usize) -> String,
{
    assert_eq!(params.len(), analytic.len(), "parameter/gradient length mismatch");
    let base = loss_fn(params).gate;
    let mut x = params.to_vec();
    let mut entries = Vec::new();
    let mut skipped_gate = 0;
    let mut skipped_small = 0;
    for k in 0..params.len() {
        let mut eval = |delta: f64| {
            x[k] = params[k] + delta;
            let p = loss_fn(&x);
            x[k] = params[k];
            p
        };
        let far_plus = eval(10.0 * step);
        let far_minus = eval(-10.0 * step);
        let plus = eval(step);
        let minus = eval(-step);
        if [far_plus, far_minus, plus, minus].iter().any(|p| p.gate != base) {
            skipped_gate += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * step);
        let a = analytic[k];
        let scale = a.abs().max(numeric.abs());
        if scale <= FD_MIN_GRAD {
            skipped_small += 1;
            continue;
        }
        entries.push(FdEntry {
            path: path(k),
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / scale,
        });
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    FdReport {
        entries,
        skipped_gate,
        skipped_small,
        tolerance,
    }
}
