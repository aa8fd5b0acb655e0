//! Canonical point cloud from back-projected depth.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{logit, Camera, FrameSample, GaussianCloud};

/// A pixel in a later frame whose depth exceeds the deepest value seen so
/// far by this ratio counts as newly revealed.
pub const DISOCCLUSION_RATIO: f64 = 0.05;

struct Point {
    mean: [f64; 3],
    color: [f64; 3],
    depth: f64,
}

fn lift(camera: &Camera, frame: &FrameSample, u: usize, v: usize) -> Point {
    let p = u + v * frame.width;
    let d = frame.depth[p];
    let cam = Vector3::new(
        (u as f64 - camera.cx) * d / camera.fx,
        (v as f64 - camera.cy) * d / camera.fy,
        d,
    );
    Point {
        mean: camera.camera_to_world(&cam),
        color: frame.image[p],
        depth: d,
    }
}

fn grid(frame: &FrameSample, stride: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..frame.height)
        .step_by(stride)
        .flat_map(move |v| (0..frame.width).step_by(stride).map(move |u| (u, v)))
}

fn usable(frame: &FrameSample, u: usize, v: usize) -> bool {
    let p = u + v * frame.width;
    !frame.tool_mask[p] && frame.depth[p] > 0.0
}

fn build(camera: &Camera, points: Vec<Point>, stride: usize) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::EmptyFrame(
            "no pixel has valid depth outside the tool mask".into(),
        ));
    }
    let f = 0.5 * (camera.fx + camera.fy);
    let spacing = points.iter().map(|p| stride as f64 * p.depth / f).sum::<f64>() / points.len() as f64;
    let n = points.len();
    GaussianCloud::new(
        points.iter().map(|p| p.mean).collect(),
        vec![[spacing.ln(); 3]; n],
        vec![[1.0, 0.0, 0.0, 0.0]; n],
        vec![logit(0.5); n],
        points.iter().map(|p| p.color).collect(),
    )
}

/// One isotropic Gaussian per `stride`-th pixel (both axes) with valid
/// depth outside the tool mask. The shared scale is the mean pixel
/// footprint `stride · d / f`.
pub fn backproject_init(frame: &FrameSample, camera: &Camera, stride: usize) -> Result<GaussianCloud> {
    fused_init(&[frame], camera, stride)
}

/// Back-projects the first frame, then adds pixels of the remaining frames
/// that reveal surface behind everything seen so far.
pub fn fused_init(frames: &[&FrameSample], camera: &Camera, stride: usize) -> Result<GaussianCloud> {
    if stride == 0 {
        return Err(Error::Domain("stride must be ≥ 1".into()));
    }
    let Some(first) = frames.first() else {
        return Err(Error::Domain("initialization needs a frame".into()));
    };
    let mut deepest = vec![0.0f64; first.width * first.height];
    let mut points = Vec::new();
    for (k, frame) in frames.iter().enumerate() {
        if frame.width != camera.width || frame.height != camera.height {
            return Err(Error::Shape("frame and camera sizes differ".into()));
        }
        for (u, v) in grid(frame, stride) {
            if !usable(frame, u, v) {
                continue;
            }
            let p = u + v * frame.width;
            let d = frame.depth[p];
            if k == 0 || d > deepest[p] * (1.0 + DISOCCLUSION_RATIO) {
                points.push(lift(camera, frame, u, v));
                deepest[p] = deepest[p].max(d);
            }
        }
    }
    build(camera, points, stride)
}
