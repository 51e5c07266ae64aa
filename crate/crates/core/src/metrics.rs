//! Image quality metrics.

use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

/// Reported value for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// True when the images were identical and `db` is the sentinel cap.
    pub capped: bool,
}

/// Peak signal-to-noise ratio with peak 255.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Psnr> {
    if a.shape() != b.shape() {
        return Err(invalid_arg!("psnr: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(invalid_arg!("psnr of empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, capped: true });
    }
    Ok(Psnr { db: (10.0 * libm::log10(255.0 * 255.0 / mse)).min(PSNR_CAP_DB), capped: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_the_cap() {
        let a = Tensor::full(&[3, 4, 4], 9.0);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr { db: PSNR_CAP_DB, capped: true });
    }

    #[test]
    fn constant_offset_is_analytic() {
        let a = Tensor::full(&[3, 4, 4], 100.0);
        let b = Tensor::full(&[3, 4, 4], 110.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p.db - 20.0 * libm::log10(25.5)).abs() < 1e-12);
        assert!((p.db - 28.13).abs() < 0.01);
    }

    #[test]
    fn shape_mismatch() {
        assert!(psnr(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 2, 3])).is_err());
    }
}
