//! Image quality metrics on `[H, W, 3]` float images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

/// Reported for identical images instead of `+∞`.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{op}: image shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.rank() != 3 || a.shape()[2] != 3 {
        return Err(Error::Contract(format!("{op}: expected [H, W, 3], got {:?}", a.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for a peak value of 1.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn luminance(img: &Tensor<f64>) -> Vec<f64> {
    img.data().chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Mean SSIM over all 8×8 windows (stride 1) of the luminance channel.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (la, lb) = (luminance(a), luminance(b));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::full(&[h, w, 3], v)
    }

    fn checker(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 3], |i| (((i / 3) % w + (i / 3) / w) % 2) as f64)
    }

    #[test]
    fn psnr_reference_values() {
        let a = constant(4, 4, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&constant(4, 4, 0.0), &constant(4, 4, 1.0)).unwrap(), 0.0);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_rejects_mismatched_shapes() {
        assert!(matches!(psnr(&constant(4, 4, 0.0), &constant(4, 5, 0.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = checker(12, 10);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = constant(7, 20, 0.5);
        assert!(matches!(ssim(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn ssim_of_constant_images_depends_on_means() {
        let a = constant(8, 8, 0.2);
        let b = constant(8, 8, 0.6);
        let expected = (2.0 * 0.2 * 0.6 + C1) / (0.04 + 0.36 + C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }
}
