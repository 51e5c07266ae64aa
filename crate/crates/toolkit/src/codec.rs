//! Baseline JPEG codec for the degradation pipeline.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use panini_core::degrade::Codec;
use panini_core::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct JpegCodec;

impl Codec for JpegCodec {
    fn round_trip(&self, pixels: &[u8], channels: usize, width: usize, height: usize, quality: u8) -> Result<Vec<u8>> {
        let color = match channels {
            1 => ExtendedColorType::L8,
            3 => ExtendedColorType::Rgb8,
            c => return Err(Error::Codec(format!("unsupported channel count {c}"))),
        };
        if pixels.len() != channels * width * height {
            return Err(Error::Codec(format!("{} samples for a {width}x{height}x{channels} image", pixels.len())));
        }
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100))
            .encode(pixels, width as u32, height as u32, color)
            .map_err(|e| Error::Codec(e.to_string()))?;
        let img = image::load(Cursor::new(buf), ImageFormat::Jpeg).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(if channels == 1 { img.to_luma8().into_raw() } else { img.to_rgb8().into_raw() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, n: usize) -> Vec<u8> {
        (0..c * n * n).map(|i| ((i * 7) % 256) as u8).collect()
    }

    #[test]
    fn preserves_size_and_degrades_with_quality() {
        let px = ramp(3, 16);
        let err = |q| {
            let out = JpegCodec.round_trip(&px, 3, 16, 16, q).unwrap();
            assert_eq!(out.len(), px.len());
            out.iter().zip(&px).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>()
        };
        assert!(err(5) > err(95));
        let grey = JpegCodec.round_trip(&ramp(1, 8), 1, 8, 8, 50).unwrap();
        assert_eq!(grey.len(), 64);
    }

    #[test]
    fn round_trip_is_deterministic() {
        let px = ramp(3, 12);
        assert_eq!(JpegCodec.round_trip(&px, 3, 12, 12, 30).unwrap(), JpegCodec.round_trip(&px, 3, 12, 12, 30).unwrap());
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(matches!(JpegCodec.round_trip(&[0; 8], 2, 2, 2, 50), Err(Error::Codec(_))));
        assert!(matches!(JpegCodec.round_trip(&[0; 5], 1, 2, 2, 50), Err(Error::Codec(_))));
    }
}
