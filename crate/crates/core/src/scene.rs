//! Canonical-space types: the Gaussian cloud, the pinhole camera and
//! training frames, plus covariance construction from scale and rotation.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Canonical 3D Gaussians.
///
/// Scales are stored in log space and opacities as logits; both are
/// activated at render time. Quaternions are `(w, x, y, z)` and are
/// normalized on use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<[f64; 3]>,
    pub raw_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub raw_opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new(
        means: Vec<[f64; 3]>,
        raw_scales: Vec<[f64; 3]>,
        rotations: Vec<[f64; 4]>,
        raw_opacities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let cloud = Self {
            means,
            raw_scales,
            rotations,
            raw_opacities,
            colors,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn count(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        let lens = [
            ("raw_scales", self.raw_scales.len()),
            ("rotations", self.rotations.len()),
            ("raw_opacities", self.raw_opacities.len()),
            ("colors", self.colors.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Shape(format!("cloud has {n} means but {len} {name}")));
            }
        }
        for (i, q) in self.rotations.iter().enumerate() {
            if quat_norm(q) == 0.0 {
                return Err(Error::Shape(format!("gaussian {i} has a zero quaternion")));
            }
        }
        Ok(())
    }

    /// Keeps the rows selected by `rows`, in that order (rows may repeat).
    pub fn gather(&self, rows: &[usize]) -> Self {
        Self {
            means: rows.iter().map(|&r| self.means[r]).collect(),
            raw_scales: rows.iter().map(|&r| self.raw_scales[r]).collect(),
            rotations: rows.iter().map(|&r| self.rotations[r]).collect(),
            raw_opacities: rows.iter().map(|&r| self.raw_opacities[r]).collect(),
            colors: rows.iter().map(|&r| self.colors[r]).collect(),
        }
    }

    /// Axis-aligned extents of the means.
    pub fn extents(&self) -> [f64; 3] {
        if self.means.is_empty() {
            return [0.0; 3];
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for m in &self.means {
            for k in 0..3 {
                lo[k] = lo[k].min(m[k]);
                hi[k] = hi[k].max(m[k]);
            }
        }
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }
}

/// Pinhole camera with a world-to-camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Matrix4<f64>,
    pub znear: f64,
    pub zfar: f64,
}

impl Camera {
    /// Camera with an identity pose (the fixed-endoscope setting).
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64, znear: f64, zfar: f64) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            pose: Matrix4::identity(),
            znear,
            zfar,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// 128×128, fx = fy = 100, principal point at the image center.
    pub fn synthetic_default() -> Self {
        Self::new(128, 128, 100.0, 100.0, 64.0, 64.0, 0.01, 100.0).expect("default camera is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.znear > 0.0 && self.znear < self.zfar) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < znear < zfar (znear={}, zfar={})",
                self.znear, self.zfar
            )));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "pose rotation is not orthonormal (error {err:e})"
            )));
        }
        let bottom = self.pose.fixed_view::<1, 4>(3, 0);
        if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::InvalidCamera("pose is not an affine transform".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn world_to_camera(&self, p: &[f64; 3]) -> Vector3<f64> {
        self.rotation() * Vector3::from(*p) + self.translation()
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> [f64; 3] {
        let w = self.rotation().transpose() * (p - self.translation());
        [w.x, w.y, w.z]
    }

    /// Pixel coordinates of a camera-space point; pixel centers sit on
    /// integer coordinates.
    pub fn to_pixel(&self, cam: &Vector3<f64>) -> [f64; 2] {
        [self.fx * cam.x / cam.z + self.cx, self.fy * cam.y / cam.z + self.cy]
    }
}

/// One training frame. Images are row-major, `width * height` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<[f64; 3]>,
    /// World-unit depth; 0 marks an invalid pixel.
    pub depth: Vec<f64>,
    /// `true` marks a tool pixel excluded from every loss.
    pub tool_mask: Vec<bool>,
    pub timestamp: f64,
}

impl FrameSample {
    pub fn new(
        width: usize,
        height: usize,
        image: Vec<[f64; 3]>,
        depth: Vec<f64>,
        tool_mask: Vec<bool>,
        timestamp: f64,
    ) -> Result<Self> {
        let frame = Self {
            width,
            height,
            image,
            depth,
            tool_mask,
            timestamp,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.image.len() != n || self.depth.len() != n || self.tool_mask.len() != n {
            return Err(Error::Shape(format!(
                "frame {}x{} has image {}, depth {}, mask {} pixels",
                self.width,
                self.height,
                self.image.len(),
                self.depth.len(),
                self.tool_mask.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.timestamp) {
            return Err(Error::Domain(format!("timestamp {} outside [0, 1]", self.timestamp)));
        }
        if let Some(d) = self.depth.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::Domain(format!("invalid depth value {d}")));
        }
        Ok(())
    }

    /// Number of pixels that are neither tool pixels nor missing depth.
    pub fn valid_pixel_count(&self) -> usize {
        self.tool_mask
            .iter()
            .zip(&self.depth)
            .filter(|(m, d)| !**m && **d > 0.0)
            .count()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix from a (not necessarily unit) `(w, x, y, z)` quaternion.
pub fn rotation_matrix(q: &[f64; 4]) -> Result<Matrix3<f64>> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidRotation);
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(raw_scale))`.
pub fn covariance3d(raw_scale: &[f64; 3], quaternion: &[f64; 4]) -> Result<Matrix3<f64>> {
    let r = rotation_matrix(quaternion)?;
    let s = Vector3::new(raw_scale[0].exp(), raw_scale[1].exp(), raw_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Reverse of [`covariance3d`].
///
/// `d_cov` holds `∂L/∂Σ_ij` with all nine entries treated as independent.
/// Returns gradients for the raw (log) scale and the unnormalized quaternion.
pub fn covariance3d_backward(
    raw_scale: &[f64; 3],
    quaternion: &[f64; 4],
    d_cov: &Matrix3<f64>,
) -> Result<([f64; 3], [f64; 4])> {
    let r = rotation_matrix(quaternion)?;
    let s = [raw_scale[0].exp(), raw_scale[1].exp(), raw_scale[2].exp()];
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    // Σ = M Mᵀ
    let d_m = (d_cov + d_cov.transpose()) * m;

    let mut d_raw = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for i in 0..3 {
        let mut acc = 0.0;
        for k in 0..3 {
            acc += d_m[(k, i)] * r[(k, i)];
            d_r[(k, i)] = d_m[(k, i)] * s[i];
        }
        d_raw[i] = acc * s[i];
    }

    let n = quat_norm(quaternion);
    let (w, x, y, z) = (
        quaternion[0] / n,
        quaternion[1] / n,
        quaternion[2] / n,
        quaternion[3] / n,
    );
    let g = |i, j| d_r[(i, j)];
    let dq_hat = [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ];
    let q_hat = [w, x, y, z];
    let dot: f64 = (0..4).map(|k| q_hat[k] * dq_hat[k]).sum();
    let mut d_q = [0.0; 4];
    for k in 0..4 {
        d_q[k] = (dq_hat[k] - q_hat[k] * dot) / n;
    }
    Ok((d_raw, d_q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_mat_eq(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        let err = (a - b).abs().max();
        assert!(err < tol, "matrices differ by {err:e}:\n{a}\n{b}");
    }

    #[test]
    fn covariance_identity() {
        let c = covariance3d(&[0.0; 3], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_mat_eq(&c, &Matrix3::identity(), 1e-15);
    }

    #[test]
    fn covariance_scaled_axis() {
        let c = covariance3d(&[2f64.ln(), 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_mat_eq(&c, &Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), 1e-12);
    }

    #[test]
    fn covariance_rotated_about_z() {
        // Dense oracle: explicit 90° rotation about z.
        let half = std::f64::consts::FRAC_PI_4;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let oracle = rz * s * s.transpose() * rz.transpose();
        let c = covariance3d(&[2f64.ln(), 0.0, 0.0], &q).unwrap();
        assert_mat_eq(&c, &oracle, 1e-12);
        assert_mat_eq(&c, &Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(
            covariance3d(&[0.0; 3], &[0.0; 4]),
            Err(Error::InvalidRotation)
        ));
    }

    #[test]
    fn mismatched_cloud_rejected() {
        let err = GaussianCloud::new(
            vec![[0.0; 3]; 2],
            vec![[0.0; 3]; 2],
            vec![[1.0, 0.0, 0.0, 0.0]; 1],
            vec![0.0; 2],
            vec![[0.0; 3]; 2],
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        assert!(Camera::new(8, 8, 0.0, 1.0, 4.0, 4.0, 0.1, 10.0).is_err());
        assert!(Camera::new(8, 8, 1.0, 1.0, 4.0, 4.0, 1.0, 0.5).is_err());
        let mut cam = Camera::synthetic_default();
        cam.pose[(0, 0)] = 2.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let raw = [0.3, -0.2, 0.1];
        let q = [0.9, 0.2, -0.3, 0.4];
        // L = Σ_ij W_ij Σ_ij for a fixed asymmetric W.
        let w = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 1.1, 0.2, -0.6);
        let loss = |raw: &[f64; 3], q: &[f64; 4]| covariance3d(raw, q).unwrap().component_mul(&w).sum();
        let (d_raw, d_q) = covariance3d_backward(&raw, &q, &w).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let (mut a, mut b) = (raw, raw);
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&a, &q) - loss(&b, &q)) / (2.0 * h);
            assert!((fd - d_raw[k]).abs() < 1e-7, "scale {k}: {fd} vs {}", d_raw[k]);
        }
        for k in 0..4 {
            let (mut a, mut b) = (q, q);
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&raw, &a) - loss(&raw, &b)) / (2.0 * h);
            assert!((fd - d_q[k]).abs() < 1e-7, "quat {k}: {fd} vs {}", d_q[k]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = [f64; 4]> {
            prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| quat_norm(q) > 0.1)
        }

        proptest! {
            #[test]
            fn spectrum_is_squared_scales(
                raw in prop::array::uniform3(-1.5f64..1.5),
                q in quat(),
            ) {
                let c = covariance3d(&raw, &q).unwrap();
                let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
                let mut expected: Vec<f64> = raw.iter().map(|s| (2.0 * s).exp()).collect();
                eig.sort_by(f64::total_cmp);
                expected.sort_by(f64::total_cmp);
                for (a, b) in eig.iter().zip(&expected) {
                    prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }

            #[test]
            fn quaternion_scale_invariance(
                raw in prop::array::uniform3(-1.5f64..1.5),
                q in quat(),
            ) {
                let q2 = [2.0 * q[0], 2.0 * q[1], 2.0 * q[2], 2.0 * q[3]];
                prop_assert_eq!(covariance3d(&raw, &q).unwrap(), covariance3d(&raw, &q2).unwrap());
            }
        }
    }
}
