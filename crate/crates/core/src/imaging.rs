//! Resampling, blurring and value-range helpers on `C x H x W` images.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{FeatureMap, Tensor};

/// Bilinear resize with half-pixel centers and edge clamping (no antialiasing).
pub fn resize_bilinear(img: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let (c, h, w) = img.dims3();
    if out_h == h && out_w == w {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = libm::floor(src) as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = img.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out).expect("shape")
}

/// Normalized 1-D Gaussian taps at integer offsets `-(size/2)..=size/2`.
pub fn gaussian_taps(sigma: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            libm::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable convolution with the same 1-D taps along both axes,
/// replicating edge pixels.
pub fn separable_blur(img: &FeatureMap, taps: &[f64]) -> FeatureMap {
    let (c, h, w) = img.dims3();
    let half = (taps.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    let src = img.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in taps.iter().enumerate() {
                    let xx = clamp(x as isize + t as isize - half, w);
                    acc += k * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in taps.iter().enumerate() {
                    let yy = clamp(y as isize + t as isize - half, h);
                    acc += k * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("shape")
}

/// `[0, 255]` pixel scale to the `[-1, 1]` network scale.
pub fn to_unit_range(img: &FeatureMap) -> FeatureMap {
    img.map(|v| v / 127.5 - 1.0)
}

/// Square-resizes a `[0, 255]` image and maps it to the network scale.
pub fn network_input(img: &FeatureMap, res: usize) -> FeatureMap {
    to_unit_range(&resize_bilinear(img, res, res))
}

/// `[-1, 1]` network scale back to `[0, 255]`, clamped.
pub fn to_pixel_range(img: &FeatureMap) -> FeatureMap {
    img.map(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0))
}

/// Rounds to the nearest 8-bit level.
pub fn quantize(img: &FeatureMap) -> FeatureMap {
    img.map(|v| libm::round(v.clamp(0.0, 255.0)))
}

/// Planar `C x H x W` floats to interleaved 8-bit samples.
pub fn to_interleaved_u8(img: &FeatureMap) -> Vec<u8> {
    let (c, h, w) = img.dims3();
    let d = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(libm::round(d[(ch * h + y) * w + x].clamp(0.0, 255.0)) as u8);
            }
        }
    }
    out
}

/// Interleaved 8-bit samples to a planar `C x H x W` image.
pub fn from_interleaved_u8(bytes: &[u8], c: usize, h: usize, w: usize) -> FeatureMap {
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = f64::from(bytes[(y * w + x) * c + ch]);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("shape")
}
