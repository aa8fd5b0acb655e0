//! Masked photometric and depth losses with the depth ranking term.

use rand::Rng;

use crate::autodiff::PixelGradients;
use crate::error::{Error, Result};
use crate::raster::RenderOutput;
use crate::scene::FrameSample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda_rank: f64,
    pub depth_weight: f64,
    pub rank_pairs: usize,
    /// Fraction of `zfar`.
    pub rank_margin: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda_rank: 2e-4,
            depth_weight: 1.0,
            rank_pairs: 1024,
            rank_margin: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub color: f64,
    pub depth: f64,
    pub rank: f64,
    pub total: f64,
    /// Hash of every L1 sign and active hinge; changes when a perturbation
    /// crosses a kink.
    pub kink_signature: u64,
}

/// Depth-ordered pixel pair `(near, far)` with `D(near) + margin < D(far)`.
pub type RankPair = (usize, usize);

/// Draws up to `count` ordered pairs among non-tool pixels with valid depth.
/// At most `4 · count` candidate draws are made.
pub fn sample_rank_pairs<R: Rng>(frame: &FrameSample, count: usize, margin: f64, rng: &mut R) -> Vec<RankPair> {
    let valid: Vec<usize> = (0..frame.depth.len())
        .filter(|&p| !frame.tool_mask[p] && frame.depth[p] > 0.0)
        .collect();
    let mut pairs = Vec::with_capacity(count);
    if valid.len() < 2 {
        return pairs;
    }
    for _ in 0..4 * count {
        if pairs.len() == count {
            break;
        }
        let p = valid[rng.gen_range(0..valid.len())];
        let q = valid[rng.gen_range(0..valid.len())];
        if frame.depth[p] + margin < frame.depth[q] {
            pairs.push((p, q));
        } else if frame.depth[q] + margin < frame.depth[p] {
            pairs.push((q, p));
        }
    }
    pairs
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss terms and their gradients with respect to the rendered images.
///
/// A frame whose pixels are all tool pixels yields zero losses and zero
/// gradients.
pub fn losses(
    render: &RenderOutput,
    frame: &FrameSample,
    settings: &LossSettings,
    pairs: &[RankPair],
) -> Result<(LossTerms, PixelGradients)> {
    let n = render.width * render.height;
    if frame.width != render.width || frame.height != render.height || frame.image.len() != n {
        return Err(Error::Shape(format!(
            "render {}x{} vs frame {}x{}",
            render.width, render.height, frame.width, frame.height
        )));
    }
    let mut grads = PixelGradients::zeros(n);
    let mut kink = FNV_OFFSET;
    let mut mix = |v: u64| kink = (kink ^ v).wrapping_mul(FNV_PRIME);

    let color_px = frame.tool_mask.iter().filter(|m| !**m).count();
    let depth_px = frame.valid_pixel_count();
    let mut color = 0.0;
    let mut depth = 0.0;
    let cw = if color_px > 0 { 1.0 / (3 * color_px) as f64 } else { 0.0 };
    let dw = if depth_px > 0 {
        settings.depth_weight / depth_px as f64
    } else {
        0.0
    };
    for p in 0..n {
        if frame.tool_mask[p] {
            continue;
        }
        for c in 0..3 {
            let r = render.color[p][c] - frame.image[p][c];
            color += r.abs();
            grads.color[p][c] = cw * sign(r);
            mix(sign(r) as i64 as u64);
        }
        if frame.depth[p] > 0.0 {
            let r = render.depth[p] - frame.depth[p];
            depth += r.abs();
            grads.depth[p] = dw * sign(r);
            mix(sign(r) as i64 as u64);
        }
    }
    color *= cw;
    depth *= dw;

    let mut rank = 0.0;
    if !pairs.is_empty() {
        let scale = 1.0 / pairs.len() as f64;
        let g = settings.lambda_rank * scale;
        for &(near, far) in pairs {
            let v = render.depth[near] - render.depth[far];
            let active = v > 0.0;
            mix(active as u64);
            if active {
                rank += v;
                grads.depth[near] += g;
                grads.depth[far] -= g;
            }
        }
        rank *= scale;
    }
    let total = color + depth + settings.lambda_rank * rank;
    Ok((
        LossTerms {
            color,
            depth,
            rank,
            total,
            kink_signature: kink,
        },
        grads,
    ))
}
