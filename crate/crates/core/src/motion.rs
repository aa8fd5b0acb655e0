//! Adaptive motion hierarchy: an image-space region mask that decides which
//! Gaussians pass through the deformation field.
//!
//! The image starts as an `N × N` grid of dynamic regions. At each update a
//! region is scored by two criteria:
//!
//! 1. the average normalized position change of its Gaussians (`Δ_t`), which
//!    puts it in the potential-dynamic set `Q` (above `δ1`) or the
//!    potential-static set `W`;
//! 2. the rendering error with (`L_d`) and without (`L_s`) deformation, which
//!    puts it in `W′` when they agree within `δ2` and in `Q′` otherwise.
//!
//! `W∩W′` becomes static, `Q∩Q′` stays dynamic, and a conflict splits the
//! region into four dynamic quadrants. The update interval is rescaled by the
//! ratio of previous to current loss.

use rayon::prelude::*;

use crate::deform::{deform_cloud, position_offset, DeformField};
use crate::error::{Error, Result};
use crate::raster::{project, rasterize, RasterSettings};
use crate::scene::{covariance3d, Camera, FrameSample, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionStatus {
    Dynamic,
    Static,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn quadrants(&self) -> [Rect; 4] {
        let xm = self.x0 + self.width() / 2;
        let ym = self.y0 + self.height() / 2;
        [
            Rect {
                x0: self.x0,
                y0: self.y0,
                x1: xm,
                y1: ym,
            },
            Rect {
                x0: xm,
                y0: self.y0,
                x1: self.x1,
                y1: ym,
            },
            Rect {
                x0: self.x0,
                y0: ym,
                x1: xm,
                y1: self.y1,
            },
            Rect {
                x0: xm,
                y0: ym,
                x1: self.x1,
                y1: self.y1,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: u32,
    pub rect: Rect,
    pub status: RegionStatus,
    /// Split level; 0 for an original grid cell.
    pub depth: u32,
    /// `L_s` recorded when the region last became static.
    pub static_baseline: f64,
}

/// Thresholds and ablation switches for mask updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSettings {
    /// Average deformation threshold.
    pub delta1: f64,
    /// Dynamic/static loss agreement threshold (8-bit MAE).
    pub delta2: f64,
    /// Growth of a static region's canonical loss that re-enables deformation.
    pub delta3: f64,
    /// Quadrants smaller than this are not created.
    pub min_side: usize,
    pub use_deformation_criterion: bool,
    pub use_loss_criterion: bool,
    pub split_conflicts: bool,
    pub adaptive_interval: bool,
    pub factor_min: f64,
    pub factor_max: f64,
}

impl Default for MaskSettings {
    fn default() -> Self {
        Self {
            delta1: 0.05,
            delta2: 0.5,
            delta3: 1.0,
            min_side: 16,
            use_deformation_criterion: true,
            use_loss_criterion: true,
            split_conflicts: true,
            adaptive_interval: true,
            factor_min: 0.5,
            factor_max: 2.0,
        }
    }
}

pub const DEFAULT_INTERVAL: f64 = 500.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask {
    pub width: usize,
    pub height: usize,
    pub grid_n: usize,
    pub regions: Vec<Region>,
    /// Iteration at which the next update runs.
    pub next_update_iter: usize,
    /// Current update interval `N_m`.
    pub interval: f64,
    /// Loss recorded at the previous update (`L_l`).
    pub last_update_loss: Option<f64>,
    pub next_id: u32,
    pub settings: MaskSettings,
}

/// `grid_n × grid_n` dynamic regions; the last row and column absorb any
/// remainder pixels.
pub fn init_mask(width: usize, height: usize, grid_n: usize) -> Result<MotionMask> {
    MotionMask::new(width, height, grid_n, MaskSettings::default(), DEFAULT_INTERVAL)
}

impl MotionMask {
    pub fn new(width: usize, height: usize, grid_n: usize, settings: MaskSettings, interval: f64) -> Result<Self> {
        if grid_n == 0 || width < grid_n || height < grid_n {
            return Err(Error::Domain(format!(
                "cannot divide {width}x{height} into a {grid_n}x{grid_n} grid"
            )));
        }
        if !(interval >= 1.0) {
            return Err(Error::Domain(format!("update interval {interval} must be ≥ 1")));
        }
        let (cw, ch) = (width / grid_n, height / grid_n);
        let mut regions = Vec::with_capacity(grid_n * grid_n);
        for r in 0..grid_n {
            for c in 0..grid_n {
                let rect = Rect {
                    x0: c * cw,
                    y0: r * ch,
                    x1: if c + 1 == grid_n { width } else { (c + 1) * cw },
                    y1: if r + 1 == grid_n { height } else { (r + 1) * ch },
                };
                regions.push(Region {
                    id: regions.len() as u32,
                    rect,
                    status: RegionStatus::Dynamic,
                    depth: 0,
                    static_baseline: 0.0,
                });
            }
        }
        Ok(Self {
            width,
            height,
            grid_n,
            next_id: regions.len() as u32,
            regions,
            next_update_iter: interval.round() as usize,
            interval,
            last_update_loss: None,
            settings,
        })
    }

    /// Index into [`Self::regions`] of the region containing pixel `(x, y)`.
    pub fn region_at(&self, x: usize, y: usize) -> Option<usize> {
        self.regions.iter().position(|r| r.rect.contains(x, y))
    }

    pub fn static_count(&self) -> usize {
        self.regions.iter().filter(|r| r.status == RegionStatus::Static).count()
    }

    /// Per-pixel region index, row-major.
    pub fn lookup_table(&self) -> Vec<usize> {
        let mut table = vec![usize::MAX; self.width * self.height];
        for (k, r) in self.regions.iter().enumerate() {
            for y in r.rect.y0..r.rect.y1 {
                table[y * self.width + r.rect.x0..y * self.width + r.rect.x1].fill(k);
            }
        }
        table
    }
}

/// Region index of each Gaussian's projected canonical mean; `None` when it
/// is culled or lands off-image. Pixel `u` covers `[u − ½, u + ½)`.
pub fn assign_regions(camera: &Camera, cloud: &GaussianCloud, mask: &MotionMask) -> Vec<Option<usize>> {
    let table = mask.lookup_table();
    (0..cloud.count())
        .map(|i| {
            let p = camera.world_to_camera(&cloud.means[i]);
            if !(p.z > camera.znear && p.z < camera.zfar) {
                return None;
            }
            let [u, v] = camera.to_pixel(&p);
            let (x, y) = ((u + 0.5).floor(), (v + 0.5).floor());
            if !(x >= 0.0 && y >= 0.0 && x < mask.width as f64 && y < mask.height as f64) {
                return None;
            }
            let k = table[y as usize * mask.width + x as usize];
            (k != usize::MAX).then_some(k)
        })
        .collect()
}

/// `true` when the Gaussian's region is dynamic or it has no region.
pub fn active_flags(mask: &MotionMask, assignment: &[Option<usize>]) -> Vec<bool> {
    assignment
        .iter()
        .map(|a| a.is_none_or(|k| mask.regions[k].status == RegionStatus::Dynamic))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionStat {
    /// Average normalized position change `Δ_t`.
    pub avg_deform: f64,
    /// Mean absolute error (0–255 scale) with deformation applied.
    pub loss_deformed: f64,
    /// Mean absolute error (0–255 scale) of the canonical render.
    pub loss_canonical: f64,
    pub gaussian_count: usize,
    pub valid_pixels: usize,
}

impl RegionStat {
    pub fn is_valid(&self) -> bool {
        self.valid_pixels > 0
    }

    pub fn is_empty(&self) -> bool {
        self.gaussian_count == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats {
    pub regions: Vec<RegionStat>,
}

/// Scores every region over the sampled frames.
///
/// Position changes are divided by the canonical means' bounding-box
/// extents; an extent smaller than 1e-3 of the largest is raised to that
/// floor so a flat scene does not divide by zero.
pub fn compute_region_stats(
    cloud: &GaussianCloud,
    field: &DeformField,
    assignment: &[Option<usize>],
    camera: &Camera,
    mask: &MotionMask,
    frames: &[&FrameSample],
    raster: &RasterSettings,
) -> Result<RegionStats> {
    if frames.is_empty() {
        return Err(Error::Domain("region statistics need at least one frame".into()));
    }
    let n = cloud.count();
    if assignment.len() != n {
        return Err(Error::Shape(format!(
            "{} assignments for {n} gaussians",
            assignment.len()
        )));
    }
    let nr = mask.regions.len();
    let ext = cloud.extents();
    let emax = ext.iter().cloned().fold(0.0, f64::max);
    let floor = 1e-3 * emax;
    let ext = ext.map(|e| e.max(floor));

    let mut deform_sum = vec![0.0; nr];
    let mut counts = vec![0usize; nr];
    for a in assignment.iter().flatten() {
        counts[*a] += 1;
    }
    if emax > 0.0 {
        for f in frames {
            for i in 0..n {
                if let Some(k) = assignment[i] {
                    let off = position_offset(field, i, f.timestamp);
                    deform_sum[k] += (off[0].abs() / ext[0] + off[1].abs() / ext[1] + off[2].abs() / ext[2]) / 3.0;
                }
            }
        }
    }

    let table = mask.lookup_table();
    let all = vec![true; n];
    let none = vec![false; n];
    let per_frame: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = frames
        .par_iter()
        .map(|f| -> Result<_> {
            let deformed = rasterize(camera, &deform_cloud(cloud, field, f.timestamp, &all)?, raster)?;
            let canonical = rasterize(camera, &deform_cloud(cloud, field, f.timestamp, &none)?, raster)?;
            let mut ld = vec![0.0; nr];
            let mut ls = vec![0.0; nr];
            let mut px = vec![0usize; nr];
            for p in 0..f.image.len() {
                if f.tool_mask[p] {
                    continue;
                }
                let k = table[p];
                let gt = f.image[p];
                let mut ed = 0.0;
                let mut es = 0.0;
                for c in 0..3 {
                    ed += (deformed.color[p][c] - gt[c]).abs();
                    es += (canonical.color[p][c] - gt[c]).abs();
                }
                ld[k] += ed;
                ls[k] += es;
                px[k] += 1;
            }
            Ok((ld, ls, px))
        })
        .collect::<Result<_>>()?;

    let mut ld = vec![0.0; nr];
    let mut ls = vec![0.0; nr];
    let mut px = vec![0usize; nr];
    for (fd, fs, fp) in &per_frame {
        for k in 0..nr {
            ld[k] += fd[k];
            ls[k] += fs[k];
            px[k] += fp[k];
        }
    }
    let k_frames = frames.len() as f64;
    let regions = (0..nr)
        .map(|k| {
            let denom = (px[k] * 3) as f64;
            RegionStat {
                avg_deform: if counts[k] > 0 {
                    deform_sum[k] / (counts[k] as f64 * k_frames)
                } else {
                    0.0
                },
                loss_deformed: if px[k] > 0 { 255.0 * ld[k] / denom } else { 0.0 },
                loss_canonical: if px[k] > 0 { 255.0 * ls[k] / denom } else { 0.0 },
                gaussian_count: counts[k],
                valid_pixels: px[k] / frames.len(),
            }
        })
        .collect();
    Ok(RegionStats { regions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Static,
    Dynamic,
    Split,
    /// Conflict at minimum size, kept dynamic.
    ConflictDynamic,
    /// Conflict with splitting disabled, made static.
    ConflictStatic,
    /// Region had no valid pixels.
    Invalid,
    StayStatic,
    Recovered,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Static => "static",
            Decision::Dynamic => "dynamic",
            Decision::Split => "split",
            Decision::ConflictDynamic => "conflict-dynamic",
            Decision::ConflictStatic => "conflict-static",
            Decision::Invalid => "invalid",
            Decision::StayStatic => "stay-static",
            Decision::Recovered => "recovered",
        }
    }
}

/// Per-region record of one mask update, for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDecision {
    pub id: u32,
    pub rect: Rect,
    pub stat: RegionStat,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskUpdate {
    pub mask: MotionMask,
    pub decisions: Vec<RegionDecision>,
    pub factor: f64,
}

fn classify(s: &MaskSettings, stat: &RegionStat, rect: &Rect) -> Decision {
    if !stat.is_valid() {
        return Decision::Invalid;
    }
    let in_q = stat.avg_deform > s.delta1;
    let in_w_prime = (stat.loss_deformed - stat.loss_canonical).abs() < s.delta2;
    let (is_static, is_dynamic) = match (s.use_deformation_criterion, s.use_loss_criterion) {
        (true, true) => (!in_q && in_w_prime, in_q && !in_w_prime),
        (true, false) => (!in_q, in_q),
        (false, true) => (in_w_prime, !in_w_prime),
        (false, false) => (false, true),
    };
    if is_static {
        Decision::Static
    } else if is_dynamic {
        Decision::Dynamic
    } else if !s.split_conflicts {
        Decision::ConflictStatic
    } else if rect.width() / 2 >= s.min_side && rect.height() / 2 >= s.min_side {
        Decision::Split
    } else {
        Decision::ConflictDynamic
    }
}

/// Applies one mask update. Pure: the same inputs always give the same mask.
pub fn update_mask(
    mask: &MotionMask,
    stats: &RegionStats,
    current_iter: usize,
    current_loss: f64,
) -> Result<MaskUpdate> {
    if stats.regions.len() != mask.regions.len() {
        return Err(Error::Shape(format!(
            "{} region stats for {} regions",
            stats.regions.len(),
            mask.regions.len()
        )));
    }
    let s = mask.settings;
    let mut next = mask.clone();
    next.regions.clear();
    let mut decisions = Vec::with_capacity(mask.regions.len());
    for (region, stat) in mask.regions.iter().zip(&stats.regions) {
        let decision = match region.status {
            RegionStatus::Static => {
                if stat.is_valid() && stat.loss_canonical - region.static_baseline > s.delta3 {
                    Decision::Recovered
                } else {
                    Decision::StayStatic
                }
            }
            RegionStatus::Dynamic => classify(&s, stat, &region.rect),
        };
        decisions.push(RegionDecision {
            id: region.id,
            rect: region.rect,
            stat: *stat,
            decision,
        });
        let mut r = region.clone();
        match decision {
            Decision::Static | Decision::ConflictStatic | Decision::Invalid => {
                r.status = RegionStatus::Static;
                r.static_baseline = stat.loss_canonical;
                next.regions.push(r);
            }
            Decision::StayStatic => next.regions.push(r),
            Decision::Dynamic | Decision::ConflictDynamic | Decision::Recovered => {
                r.status = RegionStatus::Dynamic;
                next.regions.push(r);
            }
            Decision::Split => {
                for rect in region.rect.quadrants() {
                    next.regions.push(Region {
                        id: next.next_id,
                        rect,
                        status: RegionStatus::Dynamic,
                        depth: region.depth + 1,
                        static_baseline: 0.0,
                    });
                    next.next_id += 1;
                }
            }
        }
    }

    let mut factor = 1.0;
    if s.adaptive_interval {
        if let Some(prev) = mask.last_update_loss {
            if current_loss > 0.0 && prev.is_finite() {
                factor = (prev / current_loss).clamp(s.factor_min, s.factor_max);
            }
        }
        next.interval = (mask.interval * factor).max(1.0);
    }
    next.next_update_iter = (mask.next_update_iter + next.interval.round() as usize).max(current_iter + 1);
    next.last_update_loss = Some(current_loss);
    Ok(MaskUpdate {
        mask: next,
        decisions,
        factor,
    })
}

/// Work counter: number of Gaussians that pass through the deformation field.
pub fn deformed_count(active: &[bool]) -> usize {
    active.iter().filter(|a| **a).count()
}

/// Whether Gaussian `i` survives projection in its canonical state.
pub fn is_visible(camera: &Camera, cloud: &GaussianCloud, i: usize) -> bool {
    covariance3d(&cloud.raw_scales[i], &cloud.rotations[i])
        .ok()
        .and_then(|c| project(camera, &cloud.means[i], &c))
        .is_some()
}
