//! Time-dependent deformation with a life-cycle opacity term.
//!
//! Every Gaussian carries, per attribute group, `B` temporal Gaussian bases
//! `b_j(t) = exp(-(t - θ_j)² / (2 w_j²))`. An attribute at time `t` is the
//! canonical value plus `Σ_j ω_j b_j(t)`. Centers and widths are shared by the
//! channels of a group; weights are per channel.
//!
//! Position, rotation and scale always use the additive form. Opacity uses
//! the additive form by default, which lets a Gaussian fade in as well as
//! out; the multiplicative and disabled forms exist for ablation.

use crate::error::{Error, Result};
use crate::raster::RenderAttributes;
use crate::scene::{covariance3d, sigmoid, GaussianCloud};

pub const DEFAULT_BASIS: usize = 20;
pub const WIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LifecycleMode {
    /// `α_t = α_0 + Σ ω b(t)`.
    #[default]
    Additive,
    /// `α_t = α_0 · Σ ω b(t)`.
    Multiplicative,
    /// `α_t = α_0`.
    None,
}

impl LifecycleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LifecycleMode::Additive => "additive",
            LifecycleMode::Multiplicative => "multiplicative",
            LifecycleMode::None => "none",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LifecycleMode::Additive => 0,
            LifecycleMode::Multiplicative => 1,
            LifecycleMode::None => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LifecycleMode::Additive),
            1 => Some(LifecycleMode::Multiplicative),
            2 => Some(LifecycleMode::None),
            _ => None,
        }
    }
}

impl std::str::FromStr for LifecycleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "additive" => Ok(LifecycleMode::Additive),
            "multiplicative" => Ok(LifecycleMode::Multiplicative),
            "none" => Ok(LifecycleMode::None),
            other => Err(format!(
                "unknown lifecycle mode `{other}` (expected additive, multiplicative or none)"
            )),
        }
    }
}

/// Temporal bases for one attribute group, stored row-major per Gaussian.
///
/// `weights[(i * channels + c) * basis + j]`, `centers[i * basis + j]`,
/// `widths[i * basis + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeField {
    pub channels: usize,
    pub basis: usize,
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

/// Borrowed view of one Gaussian's bases in an [`AttributeField`].
#[derive(Clone, Copy, Debug)]
pub struct FieldRow<'a> {
    pub weights: &'a [f64],
    pub centers: &'a [f64],
    pub widths: &'a [f64],
}

impl AttributeField {
    pub fn zeros(count: usize, channels: usize, basis: usize) -> Self {
        Self {
            channels,
            basis,
            weights: vec![0.0; count * channels * basis],
            centers: vec![0.0; count * basis],
            widths: vec![0.0; count * basis],
        }
    }

    pub fn count(&self) -> usize {
        if self.basis == 0 {
            0
        } else {
            self.centers.len() / self.basis
        }
    }

    pub fn row(&self, i: usize) -> FieldRow<'_> {
        let wb = self.channels * self.basis;
        FieldRow {
            weights: &self.weights[i * wb..(i + 1) * wb],
            centers: &self.centers[i * self.basis..(i + 1) * self.basis],
            widths: &self.widths[i * self.basis..(i + 1) * self.basis],
        }
    }

    fn validate(&self, name: &str, count: usize) -> Result<()> {
        let expect = (count * self.channels * self.basis, count * self.basis);
        if self.weights.len() != expect.0 || self.centers.len() != expect.1 || self.widths.len() != expect.1 {
            return Err(Error::Shape(format!(
                "{name} field does not match {count} gaussians with {} channels and {} bases",
                self.channels, self.basis
            )));
        }
        Ok(())
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        let wb = self.channels * self.basis;
        let b = self.basis;
        let mut out = Self {
            channels: self.channels,
            basis: self.basis,
            weights: Vec::with_capacity(rows.len() * wb),
            centers: Vec::with_capacity(rows.len() * b),
            widths: Vec::with_capacity(rows.len() * b),
        };
        for &r in rows {
            out.weights.extend_from_slice(&self.weights[r * wb..(r + 1) * wb]);
            out.centers.extend_from_slice(&self.centers[r * b..(r + 1) * b]);
            out.widths.extend_from_slice(&self.widths[r * b..(r + 1) * b]);
        }
        out
    }
}

/// Deformation parameters for every Gaussian of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    pub position: AttributeField,
    pub rotation: AttributeField,
    pub scale: AttributeField,
    pub opacity: AttributeField,
    pub lifecycle: LifecycleMode,
}

impl DeformField {
    pub fn count(&self) -> usize {
        self.position.count()
    }

    pub fn basis(&self) -> usize {
        self.position.basis
    }

    pub fn groups(&self) -> [(&'static str, &AttributeField); 4] {
        [
            ("position", &self.position),
            ("rotation", &self.rotation),
            ("scale", &self.scale),
            ("opacity", &self.opacity),
        ]
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        for (name, f) in self.groups() {
            f.validate(name, count)?;
        }
        Ok(())
    }

    pub fn clamp_widths(&mut self) {
        for f in [
            &mut self.position,
            &mut self.rotation,
            &mut self.scale,
            &mut self.opacity,
        ] {
            for w in &mut f.widths {
                if *w < WIDTH_FLOOR {
                    *w = WIDTH_FLOOR;
                }
            }
        }
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        Self {
            position: self.position.gather(rows),
            rotation: self.rotation.gather(rows),
            scale: self.scale.gather(rows),
            opacity: self.opacity.gather(rows),
            lifecycle: self.lifecycle,
        }
    }

    /// Same shape, all entries zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let n = self.count();
        let b = self.basis();
        Self {
            position: AttributeField::zeros(n, 3, b),
            rotation: AttributeField::zeros(n, 4, b),
            scale: AttributeField::zeros(n, 3, b),
            opacity: AttributeField::zeros(n, 1, b),
            lifecycle: self.lifecycle,
        }
    }
}

/// Temporal Gaussian basis value.
pub fn basis_eval(t: f64, center: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::Domain(format!("basis width must be positive, got {width}")));
    }
    Ok(basis_unchecked(t, center, width))
}

#[inline]
fn basis_unchecked(t: f64, center: f64, width: f64) -> f64 {
    let d = t - center;
    (-d * d / (2.0 * width * width)).exp()
}

fn basis_values(row: &FieldRow<'_>, t: f64, out: &mut [f64]) {
    for ((o, &c), &w) in out.iter_mut().zip(row.centers).zip(row.widths) {
        *o = basis_unchecked(t, c, w);
    }
}

/// `x0 + Σ_j ω_j b_j(t)` per channel.
pub fn deform_attribute(x0: &[f64], row: &FieldRow<'_>, t: f64) -> Result<Vec<f64>> {
    let b = row.centers.len();
    if row.widths.len() != b || row.weights.len() != x0.len() * b {
        return Err(Error::Shape(format!(
            "field row has {} weights, {} centers, {} widths for {} channels",
            row.weights.len(),
            b,
            row.widths.len(),
            x0.len()
        )));
    }
    let mut basis = vec![0.0; b];
    basis_values(row, t, &mut basis);
    Ok(x0
        .iter()
        .enumerate()
        .map(|(c, &x)| x + dot(&row.weights[c * b..(c + 1) * b], &basis))
        .collect())
}

/// Raw (pre-sigmoid) opacity at time `t`.
pub fn lifecycle_opacity(raw_opacity: f64, row: &FieldRow<'_>, t: f64, mode: LifecycleMode) -> f64 {
    let sum = || {
        row.weights
            .iter()
            .zip(row.centers)
            .zip(row.widths)
            .map(|((&w, &c), &s)| w * basis_unchecked(t, c, s))
            .sum::<f64>()
    };
    match mode {
        LifecycleMode::Additive => raw_opacity + sum(),
        LifecycleMode::Multiplicative => raw_opacity * sum(),
        LifecycleMode::None => raw_opacity,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evenly spaced bases with zero weights.
///
/// Centers sit at `(j - 0.5) / B` and widths are `1 / B`. In multiplicative
/// mode the opacity weights start at the constant that makes `Σ ω b(t)`
/// average to one over `[0, 1]`, so the initial product reproduces the
/// canonical opacity on average instead of collapsing every logit to zero.
pub fn init_field(count: usize, basis: usize, lifecycle: LifecycleMode) -> Result<DeformField> {
    if basis == 0 {
        return Err(Error::Domain("basis count must be at least 1".into()));
    }
    let centers_row: Vec<f64> = (1..=basis).map(|j| (j as f64 - 0.5) / basis as f64).collect();
    let width = 1.0 / basis as f64;
    let make = |channels: usize| {
        let mut f = AttributeField::zeros(count, channels, basis);
        for i in 0..count {
            f.centers[i * basis..(i + 1) * basis].copy_from_slice(&centers_row);
        }
        f.widths.fill(width);
        f
    };
    let mut opacity = make(1);
    if lifecycle == LifecycleMode::Multiplicative {
        let w0 = 1.0 / mean_basis_sum(&centers_row, width);
        opacity.weights.fill(w0);
    }
    Ok(DeformField {
        position: make(3),
        rotation: make(4),
        scale: make(3),
        opacity,
        lifecycle,
    })
}

/// Mean of `Σ_j b_j(t)` over `t ∈ [0, 1]` (midpoint rule).
fn mean_basis_sum(centers: &[f64], width: f64) -> f64 {
    const STEPS: usize = 4096;
    let mut acc = 0.0;
    for k in 0..STEPS {
        let t = (k as f64 + 0.5) / STEPS as f64;
        acc += centers.iter().map(|&c| basis_unchecked(t, c, width)).sum::<f64>();
    }
    acc / STEPS as f64
}

/// Deformed, un-activated parameters of one Gaussian.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformedRaw {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub raw_scale: [f64; 3],
    pub raw_opacity: f64,
}

pub(crate) fn deform_one(
    cloud: &GaussianCloud,
    field: &DeformField,
    i: usize,
    t: f64,
    active: bool,
    basis: &mut [f64],
) -> DeformedRaw {
    let mut out = DeformedRaw {
        mean: cloud.means[i],
        rotation: cloud.rotations[i],
        raw_scale: cloud.raw_scales[i],
        raw_opacity: cloud.raw_opacities[i],
    };
    if !active {
        return out;
    }
    let b = field.basis();
    let mut apply = |f: &AttributeField, x: &mut [f64]| {
        let row = f.row(i);
        basis_values(&row, t, basis);
        for (c, v) in x.iter_mut().enumerate() {
            *v += dot(&row.weights[c * b..(c + 1) * b], basis);
        }
    };
    apply(&field.position, &mut out.mean);
    apply(&field.rotation, &mut out.rotation);
    apply(&field.scale, &mut out.raw_scale);
    if field.lifecycle != LifecycleMode::None {
        let row = field.opacity.row(i);
        basis_values(&row, t, basis);
        let s = dot(row.weights, basis);
        out.raw_opacity = match field.lifecycle {
            LifecycleMode::Additive => out.raw_opacity + s,
            LifecycleMode::Multiplicative => out.raw_opacity * s,
            LifecycleMode::None => unreachable!(),
        };
    }
    out
}

/// Deforms the active Gaussians to time `t` and activates every attribute.
///
/// Inactive Gaussians bypass all four deformation heads and render with their
/// canonical parameters.
pub fn deform_cloud(cloud: &GaussianCloud, field: &DeformField, t: f64, active: &[bool]) -> Result<RenderAttributes> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestamp {t} outside [0, 1]")));
    }
    let n = cloud.count();
    if active.len() != n {
        return Err(Error::Shape(format!("{} active flags for {n} gaussians", active.len())));
    }
    field.validate(n)?;
    let mut basis = vec![0.0; field.basis()];
    let mut attrs = RenderAttributes::with_capacity(n);
    for i in 0..n {
        let d = deform_one(cloud, field, i, t, active[i], &mut basis);
        attrs.means3d.push(d.mean);
        attrs.covariances3d.push(
            covariance3d(&d.raw_scale, &d.rotation).map_err(|_| Error::PoisonedInput {
                index: i,
                attribute: "rotation",
            })?,
        );
        attrs.opacities.push(sigmoid(d.raw_opacity));
        attrs.colors.push(cloud.colors[i]);
    }
    Ok(attrs)
}

/// Canonical attributes, activated, without consulting any field.
pub fn activate_canonical(cloud: &GaussianCloud) -> Result<RenderAttributes> {
    let mut attrs = RenderAttributes::with_capacity(cloud.count());
    for i in 0..cloud.count() {
        attrs.means3d.push(cloud.means[i]);
        attrs
            .covariances3d
            .push(
                covariance3d(&cloud.raw_scales[i], &cloud.rotations[i]).map_err(|_| Error::PoisonedInput {
                    index: i,
                    attribute: "rotation",
                })?,
            );
        attrs.opacities.push(sigmoid(cloud.raw_opacities[i]));
        attrs.colors.push(cloud.colors[i]);
    }
    Ok(attrs)
}

/// Position offset `μ_t − μ_0` of Gaussian `i`.
pub fn position_offset(field: &DeformField, i: usize, t: f64) -> [f64; 3] {
    let row = field.position.row(i);
    let b = field.basis();
    let mut off = [0.0; 3];
    for j in 0..b {
        let bv = basis_unchecked(t, row.centers[j], row.widths[j]);
        for (c, o) in off.iter_mut().enumerate() {
            *o += row.weights[c * b + j] * bv;
        }
    }
    off
}

/// Accumulates the gradient of `x_t = x0 + Σ ω b(t)` (per channel) into the
/// field gradient `d_field`, given `d_x` = ∂L/∂x_t. `scale` multiplies the
/// basis sum (the canonical value for multiplicative opacity, otherwise 1).
pub(crate) fn backward_row(
    row: &FieldRow<'_>,
    t: f64,
    d_x: &[f64],
    scale: f64,
    d_weights: &mut [f64],
    d_centers: &mut [f64],
    d_widths: &mut [f64],
) {
    let b = row.centers.len();
    for j in 0..b {
        let c0 = row.centers[j];
        let w = row.widths[j];
        let diff = t - c0;
        let bv = basis_unchecked(t, c0, w);
        let mut d_b = 0.0;
        for (c, &g) in d_x.iter().enumerate() {
            let gs = g * scale;
            d_weights[c * b + j] += gs * bv;
            d_b += gs * row.weights[c * b + j];
        }
        // ∂b/∂θ = b (t−θ)/w², ∂b/∂w = b (t−θ)²/w³
        d_centers[j] += d_b * bv * diff / (w * w);
        d_widths[j] += d_b * bv * diff * diff / (w * w * w);
    }
}

/// `Σ_j ω_j b_j(t)` for a single-channel row.
pub(crate) fn basis_sum(row: &FieldRow<'_>, t: f64) -> f64 {
    row.weights
        .iter()
        .zip(row.centers)
        .zip(row.widths)
        .map(|((&w, &c), &s)| w * basis_unchecked(t, c, s))
        .sum()
}
