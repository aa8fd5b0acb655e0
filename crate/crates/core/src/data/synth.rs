//! Synthetic deformable scenes with known ground truth.
//!
//! A scene is a textured background plane of static Gaussians plus a set of
//! foreground blobs. Some blobs follow sinusoidal trajectories and some
//! vanish or appear at a scripted time. Frames are rendered with the
//! reference rasterizer and written as an ordinary dataset directory.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{rasterize_reference, RasterSettings, RenderAttributes};
use crate::scene::{covariance3d, sigmoid, Camera, FrameSample};

use super::{timestamp, write_atomic, write_dataset, Dataset, DepthFormat};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventKind {
    Vanish,
    Appear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifecycleEvent {
    pub kind: EventKind,
    /// Index into the foreground blobs.
    pub blob: usize,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    /// Background Gaussians per side of the plane.
    pub background_grid: usize,
    pub blobs: usize,
    /// Fraction of blobs that never move.
    pub static_fraction: f64,
    /// World-unit amplitude of moving blobs.
    pub motion_amplitude: f64,
    /// Oscillations over the whole sequence.
    pub motion_frequency: f64,
    /// Normalized image rectangle `x0, y0, x1, y1` holding moving blobs.
    pub motion_region: [f64; 4],
    pub events: Vec<LifecycleEvent>,
    pub depth_format: DepthFormat,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 64,
            seed: 1,
            background_grid: 32,
            blobs: 10,
            static_fraction: 1.0,
            motion_amplitude: 0.3,
            motion_frequency: 1.0,
            motion_region: [0.0, 0.0, 1.0, 1.0],
            events: Vec::new(),
            depth_format: DepthFormat::Pfm,
        }
    }
}

const BACKGROUND_DEPTH: f64 = 6.0;
const BLOB_OPACITY: f64 = 0.92;
const HIDDEN_RAW_OPACITY: f64 = -12.0;

impl SynthSpec {
    /// Named presets: `static`, `cut` and `half_static`.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        match name {
            "static" => Some(base),
            "cut" => Some(Self {
                blobs: 8,
                events: vec![LifecycleEvent {
                    kind: EventKind::Vanish,
                    blob: 0,
                    time: 0.5,
                }],
                ..base
            }),
            "half_static" => Some(Self {
                blobs: 12,
                static_fraction: 0.5,
                motion_amplitude: 0.3,
                motion_region: [0.62, 0.1, 0.95, 0.9],
                ..base
            }),
            _ => None,
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.background_grid * self.background_grid + self.blobs
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut events = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Config(format!("spec line {}: {m}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(&format!("invalid number `{v}`")))
            };
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(&format!("invalid integer `{v}`")));
            match k {
                "preset" => {
                    let keep = std::mem::take(&mut events);
                    spec = Self::preset(v).ok_or_else(|| bad(&format!("unknown preset `{v}`")))?;
                    events = spec.events.clone();
                    events.extend(keep);
                }
                "width" => spec.width = int(v)?,
                "height" => spec.height = int(v)?,
                "frames" => spec.frames = int(v)?,
                "seed" => spec.seed = v.parse().map_err(|_| bad("invalid seed"))?,
                "background_grid" => spec.background_grid = int(v)?,
                "blobs" => spec.blobs = int(v)?,
                "static_fraction" => spec.static_fraction = num(v)?,
                "motion_amplitude" => spec.motion_amplitude = num(v)?,
                "motion_frequency" => spec.motion_frequency = num(v)?,
                "motion_region" => {
                    let parts: Vec<f64> = v.split(',').map(|x| num(x.trim())).collect::<Result<_>>()?;
                    spec.motion_region = parts.try_into().map_err(|_| bad("motion_region needs four numbers"))?;
                }
                "depth_format" => {
                    spec.depth_format = match v {
                        "pfm" => DepthFormat::Pfm,
                        "png16" => DepthFormat::Png16,
                        _ => return Err(bad("depth_format is pfm or png16")),
                    }
                }
                "event" => {
                    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
                    let [kind, blob, time] = parts[..] else {
                        return Err(bad("event is kind:blob:time"));
                    };
                    let kind = match kind {
                        "vanish" => EventKind::Vanish,
                        "appear" => EventKind::Appear,
                        _ => return Err(bad("event kind is vanish or appear")),
                    };
                    events.push(LifecycleEvent {
                        kind,
                        blob: int(blob)?,
                        time: num(time)?,
                    });
                }
                _ => return Err(bad(&format!("unknown key `{k}`"))),
            }
        }
        spec.events = events;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "background_grid={}", self.background_grid);
        let _ = writeln!(s, "blobs={}", self.blobs);
        let _ = writeln!(s, "static_fraction={:?}", self.static_fraction);
        let _ = writeln!(s, "motion_amplitude={:?}", self.motion_amplitude);
        let _ = writeln!(s, "motion_frequency={:?}", self.motion_frequency);
        let r = self.motion_region;
        let _ = writeln!(s, "motion_region={:?},{:?},{:?},{:?}", r[0], r[1], r[2], r[3]);
        let _ = writeln!(s, "depth_format={}", self.depth_format.as_str());
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Vanish => "vanish",
                EventKind::Appear => "appear",
            };
            let _ = writeln!(s, "event={kind}:{}:{:?}", e.blob, e.time);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("image {}x{} is smaller than 16x16", self.width, self.height));
        }
        if self.frames < 2 {
            return bad("need at least 2 frames".into());
        }
        if self.background_grid < 2 {
            return bad("background_grid must be ≥ 2".into());
        }
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return bad("static_fraction must lie in [0, 1]".into());
        }
        let r = self.motion_region;
        if !(r.iter().all(|v| (0.0..=1.0).contains(v)) && r[0] < r[2] && r[1] < r[3]) {
            return bad("motion_region must be an ordered rectangle inside [0, 1]".into());
        }
        for e in &self.events {
            if e.blob >= self.blobs {
                return bad(format!("event refers to blob {} of {}", e.blob, self.blobs));
            }
            if !(0.0..=1.0).contains(&e.time) {
                return bad(format!("event time {} outside [0, 1]", e.time));
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        let f = 0.78125 * self.width as f64;
        Camera::new(
            self.width,
            self.height,
            f,
            f,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            0.01,
            100.0,
        )
        .expect("valid synthetic camera")
    }
}

/// One ground-truth Gaussian with its motion script.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueGaussian {
    pub mean: [f64; 3],
    pub raw_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    pub opacity: f64,
    /// World displacement amplitude and phase of a sinusoidal path.
    pub motion: Option<([f64; 3], f64)>,
    pub event: Option<LifecycleEvent>,
}

impl TrueGaussian {
    pub fn mean_at(&self, t: f64, frequency: f64) -> [f64; 3] {
        match self.motion {
            None => self.mean,
            Some((a, phase)) => {
                let s = (2.0 * PI * frequency * t + phase).sin();
                [
                    self.mean[0] + a[0] * s,
                    self.mean[1] + a[1] * s,
                    self.mean[2] + a[2] * s,
                ]
            }
        }
    }

    pub fn opacity_at(&self, t: f64) -> f64 {
        let visible = match self.event {
            None => true,
            Some(LifecycleEvent {
                kind: EventKind::Vanish,
                time,
                ..
            }) => t < time,
            Some(LifecycleEvent {
                kind: EventKind::Appear,
                time,
                ..
            }) => t >= time,
        };
        if visible {
            self.opacity
        } else {
            sigmoid(HIDDEN_RAW_OPACITY)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub gaussians: Vec<TrueGaussian>,
    pub blob_offset: usize,
    pub frequency: f64,
}

impl GroundTruth {
    pub fn attributes_at(&self, t: f64) -> Result<RenderAttributes> {
        let mut a = RenderAttributes::with_capacity(self.gaussians.len());
        for g in &self.gaussians {
            a.means3d.push(g.mean_at(t, self.frequency));
            a.covariances3d.push(covariance3d(&g.raw_scale, &g.rotation)?);
            a.opacities.push(g.opacity_at(t));
            a.colors.push(g.color);
        }
        Ok(a)
    }

    /// Text sidecar: one `frame t index x y z opacity` line per Gaussian and frame.
    pub fn trajectories_text(&self, frames: usize) -> String {
        let mut s = String::from("# frame t gaussian x y z opacity\n");
        let _ = writeln!(
            s,
            "# background {} blobs {}",
            self.blob_offset,
            self.gaussians.len() - self.blob_offset
        );
        for i in 0..frames {
            let t = timestamp(i, frames);
            for (k, g) in self.gaussians.iter().enumerate() {
                let m = g.mean_at(t, self.frequency);
                let _ = writeln!(
                    s,
                    "{i} {t:?} {k} {:?} {:?} {:?} {:?}",
                    m[0],
                    m[1],
                    m[2],
                    g.opacity_at(t)
                );
            }
        }
        s
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Builds the ground-truth Gaussians for `spec`.
pub fn build_ground_truth(spec: &SynthSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let cam = spec.camera();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gs = Vec::with_capacity(spec.gaussian_count());

    let half_w = 1.15 * (spec.width as f64 / 2.0) / cam.fx * BACKGROUND_DEPTH;
    let half_h = 1.15 * (spec.height as f64 / 2.0) / cam.fy * BACKGROUND_DEPTH;
    let n = spec.background_grid;
    let (sx, sy) = (2.0 * half_w / n as f64, 2.0 * half_h / n as f64);
    let phase: [f64; 3] = [rng.gen_range(0.0..PI), rng.gen_range(0.0..PI), rng.gen_range(0.0..PI)];
    for r in 0..n {
        for c in 0..n {
            let x = -half_w + (c as f64 + 0.5) * sx;
            let y = -half_h + (r as f64 + 0.5) * sy;
            let base = [0.72, 0.38, 0.36];
            let color = [0, 1, 2].map(|k| {
                let tex = 0.12 * (0.9 * x + phase[k]).sin() * (0.7 * y + 2.0 * phase[k]).cos();
                (base[k] + tex + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0)
            });
            let z = BACKGROUND_DEPTH + 0.15 * (0.5 * x).sin() * (0.4 * y).cos();
            gs.push(TrueGaussian {
                mean: [x, y, z],
                raw_scale: [(0.75 * sx).ln(), (0.75 * sy).ln(), (0.2 * sx).ln()],
                rotation: [1.0, 0.0, 0.0, 0.0],
                color,
                opacity: 0.95,
                motion: None,
                event: None,
            });
        }
    }
    let blob_offset = gs.len();

    let moving = ((1.0 - spec.static_fraction) * spec.blobs as f64).round() as usize;
    let staying = spec.blobs - moving;
    let to_world = |u: f64, v: f64, z: f64| {
        [
            (u * spec.width as f64 - cam.cx) / cam.fx * z,
            (v * spec.height as f64 - cam.cy) / cam.fy * z,
            z,
        ]
    };
    for b in 0..spec.blobs {
        let event = spec.events.iter().find(|e| e.blob == b).copied();
        let is_moving = b >= staying;
        let z = rng.gen_range(4.0..5.0);
        let (u, v) = if is_moving {
            let r = spec.motion_region;
            (rng.gen_range(r[0]..r[2]), rng.gen_range(r[1]..r[3]))
        } else {
            (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85))
        };
        let size = if event.is_some() { 0.4..0.5 } else { 0.18..0.3 };
        let raw_scale = [0, 1, 2].map(|k| {
            let s: f64 = rng.gen_range(size.clone());
            if k == 2 {
                (0.5 * s).ln()
            } else {
                s.ln()
            }
        });
        let color = [
            rng.gen_range(0.1..0.95),
            rng.gen_range(0.1..0.95),
            rng.gen_range(0.1..0.95),
        ];
        let motion = is_moving.then(|| {
            let ang: f64 = rng.gen_range(0.0..2.0 * PI);
            let a = spec.motion_amplitude;
            ([a * ang.cos(), a * ang.sin(), 0.0], rng.gen_range(0.0..2.0 * PI))
        });
        gs.push(TrueGaussian {
            mean: to_world(u, v, z),
            raw_scale,
            rotation: random_rotation(&mut rng),
            color,
            opacity: BLOB_OPACITY,
            motion,
            event,
        });
    }
    Ok(GroundTruth {
        gaussians: gs,
        blob_offset,
        frequency: spec.motion_frequency,
    })
}

/// Renders every frame of `spec` in memory.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    let gt = build_ground_truth(spec)?;
    let cam = spec.camera();
    let settings = RasterSettings::default();
    let frames: Vec<FrameSample> = (0..spec.frames)
        .map(|i| -> Result<FrameSample> {
            let t = timestamp(i, spec.frames);
            let out = rasterize_reference(&cam, &gt.attributes_at(t)?, &settings)?;
            let image = out
                .color
                .iter()
                .map(|c| c.map(|v| f64::from(super::quantize(v)) / 255.0))
                .collect();
            let n = cam.pixel_count();
            FrameSample::new(spec.width, spec.height, image, out.depth, vec![false; n], t)
        })
        .collect::<Result<_>>()?;
    Ok((Dataset::new(cam, frames, spec.depth_format, 1000.0)?, gt))
}

/// Renders `spec` and writes the dataset plus `gt/trajectories.txt` to `out`.
pub fn synth_generate(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<(Dataset, GroundTruth)> {
    let (d, gt) = synth_dataset(spec)?;
    let out = out.as_ref();
    write_dataset(out, &d)?;
    write_atomic(
        &out.join("gt").join("trajectories.txt"),
        gt.trajectories_text(spec.frames).as_bytes(),
    )?;
    write_atomic(&out.join("gt").join("spec.txt"), spec.to_text().as_bytes())?;
    Ok((d, gt))
}
