//! PSNR on RGB and SSIM on BT.601 luma, both on inputs clamped to `[0, 1]`.

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::InvalidParam {
            name: "images",
            reason: format!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims()),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized separable Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// Mean SSIM over every fully contained window.
pub fn ssim_with(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    let k = cfg.window;
    if k == 0 || h < k || w < k {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            reason: format!("SSIM needs at least a {k}x{k} image"),
        });
    }
    let la = a.clamped().luminance();
    let lb = b.clamped().luminance();
    let g = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                let row = (y0 + dy) * w + x0;
                for (dx, gx) in g.iter().enumerate() {
                    let wt = gy * gx;
                    let (p, q) = (la[row + dx], lb[row + dx]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_half_gray() {
        let a = Image::filled(8, 8, 3, 0.0);
        let b = Image::filled(8, 8, 3, 0.5);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_clamps_inputs() {
        let a = Image::filled(8, 8, 3, 1.7);
        let b = Image::filled(8, 8, 3, 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 100.0);
    }

    #[test]
    fn ssim_constant_patches() {
        let cfg = SsimConfig::default();
        let a = Image::filled(16, 16, 3, 0.0);
        let b = Image::filled(16, 16, 3, 1.0);
        // Zero variance: only the luminance term survives.
        let mb: f64 = crate::image::luma(1.0, 1.0, 1.0);
        let expected = cfg.c1() / (mb * mb + cfg.c1());
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = Image::from_fn(16, 16, 3, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f32 / 10.0);
        let b = Image::from_fn(16, 16, 3, |c, y, x| ((c + y * 2 + x * 7) % 13) as f32 / 12.0);
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Image::filled(8, 8, 3, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
        let small = SsimConfig {
            window: 7,
            ..SsimConfig::default()
        };
        assert_eq!(ssim_with(&a, &a, &small).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(psnr(&Image::filled(8, 8, 3, 0.0), &Image::filled(8, 9, 3, 0.0)).is_err());
    }
}
