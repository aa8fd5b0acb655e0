//! Image quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};

/// `10 log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("psnr on {} vs {} pixels", a.len(), b.len())));
    }
    let mut se = 0.0;
    for (p, q) in a.iter().zip(b) {
        for c in 0..3 {
            let d = p[c] - q[c];
            se += d * d;
        }
    }
    let mse = se / (3 * a.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-contained 11×11 windows and the three channels.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::Shape(format!(
            "ssim on {} and {} pixels for {width}x{height}",
            a.len(),
            b.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }
    let g = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..3 {
        // Separable filtering: rows first, then columns.
        let fields = |f: &dyn Fn(usize) -> f64| {
            let mut rows = vec![0.0; ow * height];
            for y in 0..height {
                for x in 0..ow {
                    let mut s = 0.0;
                    for (k, w) in g.iter().enumerate() {
                        s += w * f(y * width + x + k);
                    }
                    rows[y * ow + x] = s;
                }
            }
            let mut out = vec![0.0; ow * oh];
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for (k, w) in g.iter().enumerate() {
                        s += w * rows[(y + k) * ow + x];
                    }
                    out[y * ow + x] = s;
                }
            }
            out
        };
        let mu_a = fields(&|p| a[p][c]);
        let mu_b = fields(&|p| b[p][c]);
        let e_aa = fields(&|p| a[p][c] * a[p][c]);
        let e_bb = fields(&|p| b[p][c] * b[p][c]);
        let e_ab = fields(&|p| a[p][c] * b[p][c]);
        for k in 0..ow * oh {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = e_aa[k] - ma * ma;
            let vb = e_bb[k] - mb * mb;
            let cov = e_ab[k] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    /// Direct two-dimensional window sums, no separability.
    fn ssim_oracle(a: &[[f64; 3]], b: &[[f64; 3]], w: usize, h: usize) -> f64 {
        let mut win = [[0.0; 11]; 11];
        let mut s = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                win[i][j] = (-(di * di + dj * dj) / 4.5).exp();
                s += win[i][j];
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i][j] / s;
                            let p = (y + i) * w + x + j;
                            let (u, v) = (a[p][c], b[p][c]);
                            ma += wt * u;
                            mb += wt * v;
                            aa += wt * u * u;
                            bb += wt * v * v;
                            ab += wt * u * v;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_values() {
        let a = vec![[0.2; 3]; 16];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = vec![[0.3; 3]; 16];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..4]).is_err());
    }

    #[test]
    fn metrics_match_oracles_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(11..24), rng.gen_range(11..24));
            let a = random_image(&mut rng, w * h);
            let b = random_image(&mut rng, w * h);
            let mut se = 0.0;
            for p in 0..w * h {
                for c in 0..3 {
                    se += (a[p][c] - b[p][c]).powi(2);
                }
            }
            let oracle = 10.0 * (1.0 / (se / (3 * w * h) as f64)).log10();
            assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
            assert!((ssim(&a, &b, w, h).unwrap() - ssim_oracle(&a, &b, w, h)).abs() < 1e-9);
            assert_eq!(ssim(&a, &a, w, h).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        let (w, h) = (16, 16);
        let a: Vec<[f64; 3]> = (0..w * h)
            .map(|p| if (p / w + p % w) % 2 == 0 { [1.0; 3] } else { [0.0; 3] })
            .collect();
        let inv: Vec<[f64; 3]> = a.iter().map(|p| [1.0 - p[0]; 3]).collect();
        assert!(ssim(&a, &inv, w, h).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_shift() {
        let (w, h) = (16, 12);
        let a = vec![[0.25; 3]; w * h];
        let b = vec![[0.75; 3]; w * h];
        let s = ssim(&a, &b, w, h).unwrap();
        assert!((s - ssim_oracle(&a, &b, w, h)).abs() < 1e-9);
        assert!(ssim(&a, &b, 8, 8).is_err());
    }
}
