//! Forward rendering: EWA projection of 3D Gaussians and front-to-back alpha
//! compositing of color and depth.
//!
//! [`rasterize`] bins splats into 16×16 tiles and composites each tile
//! independently. [`rasterize_reference`] composites every pixel against the
//! full depth-sorted list. Both apply the same per-pixel cutoffs, so their
//! outputs agree regardless of tiling:
//!
//! * a splat only touches pixels inside its 3σ ellipse;
//! * contributions with `α < 1/255` are skipped;
//! * `α` is clamped to `0.99`;
//! * a pixel stops once its transmittance would fall below `1e-4`.

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::Camera;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Added to the diagonal of every projected covariance, in px².
pub const LOW_PASS: f64 = 0.3;
/// Half the squared Mahalanobis radius (3σ) beyond which a splat is ignored.
pub const POWER_CUTOFF: f64 = 4.5;

/// Render-ready (activated) Gaussian attributes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderAttributes {
    pub means3d: Vec<[f64; 3]>,
    pub covariances3d: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl RenderAttributes {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            means3d: Vec::with_capacity(n),
            covariances3d: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.means3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means3d.is_empty()
    }

    /// Shape and finiteness checks.
    pub fn validate(&self) -> Result<()> {
        let n = self.means3d.len();
        if self.covariances3d.len() != n || self.opacities.len() != n || self.colors.len() != n {
            return Err(Error::Shape(format!(
                "render attributes: {} means, {} covariances, {} opacities, {} colors",
                n,
                self.covariances3d.len(),
                self.opacities.len(),
                self.colors.len()
            )));
        }
        for i in 0..n {
            let poisoned = |attribute| Err(Error::PoisonedInput { index: i, attribute });
            if !self.means3d[i].iter().all(|v| v.is_finite()) {
                return poisoned("mean");
            }
            if !self.covariances3d[i].iter().all(|v| v.is_finite()) {
                return poisoned("covariance");
            }
            if !self.opacities[i].is_finite() {
                return poisoned("opacity");
            }
            if !self.colors[i].iter().all(|v| v.is_finite()) {
                return poisoned("color");
            }
        }
        Ok(())
    }
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// Upper triangle `(a, b, c)` of the 2D covariance including the low-pass term.
    pub cov2d: [f64; 3],
    /// Upper triangle of the inverse 2D covariance.
    pub conic: [f64; 3],
    pub view_depth: f64,
    /// Bounding radius in pixels, `ceil(3 sqrt(λ_max))`.
    pub radius: u32,
    /// Camera-space mean.
    pub cam: [f64; 3],
}

/// Jacobian of the pinhole projection at camera-space point `p`.
pub(crate) fn projection_jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * p.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * p.y * iz * iz,
    )
}

/// Projects one Gaussian. Returns `None` when it is outside the depth range
/// or its projected covariance is degenerate.
pub fn project(camera: &Camera, mean: &[f64; 3], cov: &Matrix3<f64>) -> Option<Projection> {
    let p = camera.world_to_camera(mean);
    if !(p.z > camera.znear && p.z < camera.zfar) {
        return None;
    }
    let j = projection_jacobian(camera, &p);
    let t = j * camera.rotation();
    let c = t * cov * t.transpose();
    let a = c[(0, 0)] + LOW_PASS;
    let b = c[(0, 1)];
    let cc = c[(1, 1)] + LOW_PASS;
    let det = a * cc - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + cc);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda_max.sqrt()).ceil();
    let mean2d = camera.to_pixel(&p);
    Some(Projection {
        mean2d,
        cov2d: [a, b, cc],
        conic: [cc / det, -b / det, a / det],
        view_depth: p.z,
        radius: radius as u32,
        cam: [p.x, p.y, p.z],
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RasterSettings {
    /// Divide composited depth by accumulated opacity.
    pub normalize_depth: bool,
    /// Record a hash of every pixel's composited splat list and clamp states;
    /// used to detect gate flips during finite-difference checks.
    pub track_gates: bool,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub final_transmittance: Vec<f64>,
    /// Gaussian–tile pairs processed.
    pub splat_count: usize,
    /// Zero unless [`RasterSettings::track_gates`] was set.
    pub gate_signature: u64,
    pub(crate) cache: RenderCache,
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RenderCache {
    pub settings: RasterSettings,
    pub splats: Vec<Splat>,
    pub projections: Vec<Option<Projection>>,
    /// Depth-sorted splat lists; one per tile, or a single global list.
    pub lists: Vec<Vec<u32>>,
    pub tiled: bool,
    pub tiles_x: usize,
    /// Per pixel: number of list entries up to and including the last
    /// composited splat.
    pub contrib: Vec<u32>,
    /// Depth before normalization.
    pub raw_depth: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Splat {
    pub mx: f64,
    pub my: f64,
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

/// Evaluation of one splat at one pixel, shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub dx: f64,
    pub dy: f64,
    pub gauss: f64,
    pub alpha: f64,
    pub clamped: bool,
}

#[inline]
pub(crate) fn evaluate(s: &Splat, px: f64, py: f64) -> Option<Contribution> {
    let dx = px - s.mx;
    let dy = py - s.my;
    let power = 0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) + s.conic[1] * dx * dy;
    if power > POWER_CUTOFF {
        return None;
    }
    let gauss = (-power).exp();
    let raw = s.opacity * gauss;
    if raw < ALPHA_MIN {
        return None;
    }
    let clamped = raw > ALPHA_MAX;
    Some(Contribution {
        dx,
        dy,
        gauss,
        alpha: if clamped { ALPHA_MAX } else { raw },
        clamped,
    })
}

#[derive(Clone, Copy, Debug)]
struct PixelResult {
    color: [f64; 3],
    depth: f64,
    transmittance: f64,
    contrib: u32,
    gate: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn composite_pixel(px: f64, py: f64, list: &[u32], splats: &[Splat], track: bool) -> PixelResult {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut contrib = 0u32;
    let mut gate = FNV_OFFSET;
    for (k, &g) in list.iter().enumerate() {
        let s = &splats[g as usize];
        let Some(c) = evaluate(s, px, py) else {
            continue;
        };
        let next_t = t * (1.0 - c.alpha);
        if next_t < TRANSMITTANCE_MIN {
            break;
        }
        let w = c.alpha * t;
        color[0] += s.color[0] * w;
        color[1] += s.color[1] * w;
        color[2] += s.color[2] * w;
        depth += s.depth * w;
        t = next_t;
        contrib = k as u32 + 1;
        if track {
            gate = (gate ^ (u64::from(g) << 1 | u64::from(c.clamped))).wrapping_mul(FNV_PRIME);
        }
    }
    PixelResult {
        color,
        depth,
        transmittance: t,
        contrib,
        gate,
    }
}

struct Prepared {
    splats: Vec<Splat>,
    projections: Vec<Option<Projection>>,
    order: Vec<u32>,
}

fn prepare(camera: &Camera, attrs: &RenderAttributes) -> Result<Prepared> {
    attrs.validate()?;
    let n = attrs.len();
    let mut splats = vec![Splat::default(); n];
    let mut projections = Vec::with_capacity(n);
    let mut order = Vec::with_capacity(n);
    for i in 0..n {
        let p = project(camera, &attrs.means3d[i], &attrs.covariances3d[i]);
        if let Some(p) = &p {
            splats[i] = Splat {
                mx: p.mean2d[0],
                my: p.mean2d[1],
                conic: p.conic,
                opacity: attrs.opacities[i],
                color: attrs.colors[i],
                depth: p.view_depth,
            };
            order.push(i as u32);
        }
        projections.push(p);
    }
    order.sort_by(|&a, &b| {
        splats[a as usize]
            .depth
            .total_cmp(&splats[b as usize].depth)
            .then(a.cmp(&b))
    });
    Ok(Prepared {
        splats,
        projections,
        order,
    })
}

fn finish_depth(settings: &RasterSettings, raw: f64, t: f64) -> f64 {
    if settings.normalize_depth {
        let acc = 1.0 - t;
        if acc > 1e-6 {
            raw / acc
        } else {
            0.0
        }
    } else {
        raw
    }
}

fn fold_gates(gates: &[u64]) -> u64 {
    gates.iter().fold(FNV_OFFSET, |h, &g| (h ^ g).wrapping_mul(FNV_PRIME))
}

/// Tile-based renderer.
pub fn rasterize(camera: &Camera, attrs: &RenderAttributes, settings: &RasterSettings) -> Result<RenderOutput> {
    let prep = prepare(camera, attrs)?;
    let (w, h) = (camera.width, camera.height);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &g in &prep.order {
        let p = prep.projections[g as usize].as_ref().expect("visible");
        let r = f64::from(p.radius);
        let (x0, x1) = (p.mean2d[0] - r, p.mean2d[0] + r);
        let (y0, y1) = (p.mean2d[1] - r, p.mean2d[1] + r);
        if x1 < 0.0 || y1 < 0.0 || x0 >= w as f64 || y0 >= h as f64 {
            continue;
        }
        let tx0 = (x0.max(0.0) / TILE_SIZE as f64) as usize;
        let ty0 = (y0.max(0.0) / TILE_SIZE as f64) as usize;
        let tx1 = ((x1 / TILE_SIZE as f64) as usize).min(tiles_x - 1);
        let ty1 = ((y1 / TILE_SIZE as f64) as usize).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(g);
            }
        }
    }
    let splat_count = lists.iter().map(Vec::len).sum();

    let track = settings.track_gates;
    let tile_results: Vec<Vec<PixelResult>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &lists[tile];
            let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    out.push(composite_pixel(x as f64, y as f64, list, &prep.splats, track));
                }
            }
            out
        })
        .collect();

    let n_pix = w * h;
    let mut color = vec![[0.0; 3]; n_pix];
    let mut raw_depth = vec![0.0; n_pix];
    let mut trans = vec![1.0; n_pix];
    let mut contrib = vec![0u32; n_pix];
    let mut gates = vec![0u64; if track { n_pix } else { 0 }];
    for (tile, results) in tile_results.into_iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut it = results.into_iter();
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
            for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                let r = it.next().expect("tile pixel");
                let p = y * w + x;
                color[p] = r.color;
                raw_depth[p] = r.depth;
                trans[p] = r.transmittance;
                contrib[p] = r.contrib;
                if track {
                    gates[p] = r.gate;
                }
            }
        }
    }
    let depth = raw_depth
        .iter()
        .zip(&trans)
        .map(|(&d, &t)| finish_depth(settings, d, t))
        .collect();
    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        depth,
        final_transmittance: trans,
        splat_count,
        gate_signature: if track { fold_gates(&gates) } else { 0 },
        cache: RenderCache {
            settings: *settings,
            splats: prep.splats,
            projections: prep.projections,
            lists,
            tiled: true,
            tiles_x,
            contrib,
            raw_depth,
        },
    })
}

/// Brute-force renderer: every pixel walks the full depth-sorted list.
pub fn rasterize_reference(
    camera: &Camera,
    attrs: &RenderAttributes,
    settings: &RasterSettings,
) -> Result<RenderOutput> {
    let prep = prepare(camera, attrs)?;
    let (w, h) = (camera.width, camera.height);
    let n_pix = w * h;
    let mut color = Vec::with_capacity(n_pix);
    let mut raw_depth = Vec::with_capacity(n_pix);
    let mut trans = Vec::with_capacity(n_pix);
    let mut contrib = Vec::with_capacity(n_pix);
    let mut gates = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let r = composite_pixel(x as f64, y as f64, &prep.order, &prep.splats, settings.track_gates);
            color.push(r.color);
            raw_depth.push(r.depth);
            trans.push(r.transmittance);
            contrib.push(r.contrib);
            if settings.track_gates {
                gates.push(r.gate);
            }
        }
    }
    let depth = raw_depth
        .iter()
        .zip(&trans)
        .map(|(&d, &t)| finish_depth(settings, d, t))
        .collect();
    let splat_count = prep.order.len();
    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        depth,
        final_transmittance: trans,
        splat_count,
        gate_signature: if settings.track_gates { fold_gates(&gates) } else { 0 },
        cache: RenderCache {
            settings: *settings,
            splats: prep.splats,
            projections: prep.projections,
            lists: vec![prep.order],
            tiled: false,
            tiles_x: 1,
            contrib,
            raw_depth,
        },
    })
}
