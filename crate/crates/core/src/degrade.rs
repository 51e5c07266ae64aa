//! Synthetic degradation `X = JPEG_q((Y * k_sigma) down_r up_r + N_delta)`.
//!
//! The pipeline order is fixed: Gaussian blur, bilinear downsample by `r`,
//! bilinear upsample back to the input size, additive Gaussian noise, clamp to
//! `[0, 255]`, then a codec round trip at quality `q`. Every random draw comes
//! from a generator seeded by [`DegradationParams::seed`].

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid_arg, Error, Result};
use crate::imaging;
use crate::rng::{self, derive_seed, stream};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationParams {
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
    /// Down-sampling factor, `>= 1`.
    pub down_rate: f64,
    /// Noise standard deviation on the 0-255 scale.
    pub noise_std: f64,
    pub jpeg_quality: u8,
    pub seed: u64,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(invalid_arg!("blur_sigma must be > 0, got {}", self.blur_sigma));
        }
        if !(self.down_rate >= 1.0) || !self.down_rate.is_finite() {
            return Err(invalid_arg!("down_rate must be >= 1, got {}", self.down_rate));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(invalid_arg!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(invalid_arg!("jpeg_quality must lie in [1, 100], got {}", self.jpeg_quality));
        }
        Ok(())
    }

    /// Same degradation, different noise stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub blur_sigma: Interval,
    pub down_rate: Interval,
    pub noise_std: Interval,
    pub jpeg_quality: (u8, u8),
}

impl Default for ParamRanges {
    /// Ranges for 64-pixel images: noise and quality as in the full-scale
    /// setting, blur and rate rescaled to the smaller resolution.
    fn default() -> Self {
        Self {
            blur_sigma: Interval::new(0.2, 6.0),
            down_rate: Interval::new(1.0, 8.0),
            noise_std: Interval::new(0.0, 25.0),
            jpeg_quality: (5, 50),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, i: &Interval| {
            if !(i.lo <= i.hi) || !i.lo.is_finite() || !i.hi.is_finite() {
                return Err(invalid_arg!("{} range [{}, {}] is empty", name, i.lo, i.hi));
            }
            Ok(())
        };
        check("blur_sigma", &self.blur_sigma)?;
        check("down_rate", &self.down_rate)?;
        check("noise_std", &self.noise_std)?;
        if self.blur_sigma.lo <= 0.0 {
            return Err(invalid_arg!("blur_sigma range must be positive"));
        }
        if self.down_rate.lo < 1.0 {
            return Err(invalid_arg!("down_rate range must be >= 1"));
        }
        if self.noise_std.lo < 0.0 {
            return Err(invalid_arg!("noise_std range must be >= 0"));
        }
        let (qlo, qhi) = self.jpeg_quality;
        if qlo > qhi || qlo < 1 || qhi > 100 {
            return Err(invalid_arg!("jpeg_quality range [{}, {}] invalid", qlo, qhi));
        }
        Ok(())
    }
}

/// Smallest odd size `>= 6 sigma + 1`, covering three standard deviations.
pub fn kernel_size_for(sigma: f64) -> usize {
    let n = libm::ceil(6.0 * sigma + 1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Isotropic Gaussian kernel `1 x size x size`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<FeatureMap> {
    if size == 0 || size % 2 == 0 {
        return Err(invalid_arg!("kernel size must be odd and positive, got {}", size));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid_arg!("sigma must be > 0, got {}", sigma));
    }
    let half = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            data.push(libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::from_vec(&[1, size, size], data)
}

/// JPEG-style lossy round trip on interleaved 8-bit samples.
pub trait Codec {
    fn round_trip(&self, pixels: &[u8], channels: usize, width: usize, height: usize, quality: u8) -> Result<Vec<u8>>;
}

/// Codec stand-in that only quantizes to 8 bits. Lets the pipeline run where
/// no JPEG implementation is linked.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuantizeOnly;

impl Codec for QuantizeOnly {
    fn round_trip(&self, pixels: &[u8], _: usize, _: usize, _: usize, _: u8) -> Result<Vec<u8>> {
        Ok(pixels.to_vec())
    }
}

fn validate_image(img: &FeatureMap) -> Result<()> {
    if img.rank() != 3 {
        return Err(invalid_arg!("expected a C x H x W image, got {:?}", img.shape()));
    }
    let (c, h, w) = img.dims3();
    if h != w {
        return Err(invalid_arg!("image must be square, got {}x{}", h, w));
    }
    if c != 1 && c != 3 {
        return Err(invalid_arg!("image must have 1 or 3 channels, got {}", c));
    }
    if let Some(v) = img.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(invalid_arg!("pixel value {} outside [0, 255]", v));
    }
    Ok(())
}

/// Applies the full degradation pipeline; output shape equals input shape.
pub fn apply_degradation(hq: &FeatureMap, p: &DegradationParams, codec: &dyn Codec) -> Result<FeatureMap> {
    validate_image(hq)?;
    p.validate()?;
    let (c, h, w) = hq.dims3();
    let taps = imaging::gaussian_taps(p.blur_sigma, kernel_size_for(p.blur_sigma));
    let blurred = imaging::separable_blur(hq, &taps);
    let dh = libm::round(h as f64 / p.down_rate).max(1.0) as usize;
    let dw = libm::round(w as f64 / p.down_rate).max(1.0) as usize;
    let small = imaging::resize_bilinear(&blurred, dh, dw);
    let mut restored = imaging::resize_bilinear(&small, h, w);
    if p.noise_std > 0.0 {
        let mut r = rng::rng(derive_seed(p.seed, stream::NOISE));
        for v in restored.data_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += p.noise_std * z;
        }
    }
    let bytes = imaging::to_interleaved_u8(&restored);
    let coded = codec.round_trip(&bytes, c, w, h, p.jpeg_quality)?;
    if coded.len() != bytes.len() {
        return Err(Error::Codec(alloc::format!(
            "codec returned {} samples, expected {}",
            coded.len(),
            bytes.len()
        )));
    }
    Ok(imaging::from_interleaved_u8(&coded, c, h, w))
}

/// Draws each field independently and uniformly from its interval.
pub fn sample_params(ranges: &ParamRanges, rng_seed: u64) -> Result<DegradationParams> {
    ranges.validate()?;
    let mut r = rng::rng(rng_seed);
    let mut uniform = |i: &Interval| if i.lo == i.hi { i.lo } else { r.random_range(i.lo..=i.hi) };
    let blur_sigma = uniform(&ranges.blur_sigma);
    let down_rate = uniform(&ranges.down_rate);
    let noise_std = uniform(&ranges.noise_std);
    let (qlo, qhi) = ranges.jpeg_quality;
    let jpeg_quality = r.random_range(qlo..=qhi);
    let seed = r.random::<u64>();
    Ok(DegradationParams { blur_sigma, down_rate, noise_std, jpeg_quality, seed })
}

/// How training loops draw degradations.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSampler {
    /// Independent uniform draws from ranges.
    Ranges(ParamRanges),
    /// Uniform choice among fixed templates; each draw gets a fresh seed.
    Classes(Vec<DegradationParams>),
}

impl ParamSampler {
    /// Returns the parameters and, for template sampling, the class index.
    pub fn sample(&self, seed: u64) -> Result<(DegradationParams, Option<usize>)> {
        match self {
            ParamSampler::Ranges(r) => Ok((sample_params(r, seed)?, None)),
            ParamSampler::Classes(classes) => {
                if classes.is_empty() {
                    return Err(invalid_arg!("no degradation classes"));
                }
                let mut r = rng::rng(seed);
                let idx = r.random_range(0..classes.len());
                Ok((classes[idx].with_seed(r.random::<u64>()), Some(idx)))
            }
        }
    }
}

/// A query/key pair sharing one degradation function over two contents.
#[derive(Debug, Clone)]
pub struct PositivePair {
    pub query: FeatureMap,
    pub key: FeatureMap,
    /// Set when both contents were identical; allowed, but the pair then
    /// no longer separates degradation from content.
    pub same_content: bool,
}

/// Noise seed of the key side, derived from the query parameters.
pub fn key_seed(p: &DegradationParams) -> u64 {
    derive_seed(p.seed, stream::KEY_NOISE)
}

pub fn make_positive_pair(
    hq_a: &FeatureMap,
    hq_b: &FeatureMap,
    p: &DegradationParams,
    codec: &dyn Codec,
) -> Result<PositivePair> {
    hq_a.expect_same_shape(hq_b)?;
    let query = apply_degradation(hq_a, p, codec)?;
    let key = apply_degradation(hq_b, &p.with_seed(key_seed(p)), codec)?;
    Ok(PositivePair { query, key, same_content: hq_a == hq_b })
}

/// Degrades `hq` then resizes to the network input resolution.
pub fn degrade_to_input(hq: &FeatureMap, p: &DegradationParams, codec: &dyn Codec, input_res: usize) -> Result<FeatureMap> {
    let lq = apply_degradation(hq, p, codec)?;
    Ok(imaging::resize_bilinear(&lq, input_res, input_res))
}

/// Human-readable one-line summary, also used in report rows.
pub fn describe(p: &DegradationParams) -> String {
    alloc::format!(
        "sigma={:.3} r={:.3} noise={:.3} q={} seed={}",
        p.blur_sigma,
        p.down_rate,
        p.noise_std,
        p.jpeg_quality,
        p.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use alloc::vec;

    fn params(sigma: f64, r: f64, noise: f64, q: u8, seed: u64) -> DegradationParams {
        DegradationParams { blur_sigma: sigma, down_rate: r, noise_std: noise, jpeg_quality: q, seed }
    }

    fn test_image(n: usize) -> FeatureMap {
        let mut data = Vec::with_capacity(3 * n * n);
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let v = 128.0 + 60.0 * libm::sin((x as f64 + 2.0 * c as f64) * 0.4) * libm::cos(y as f64 * 0.3);
                    data.push(libm::round(v));
                }
            }
        }
        Tensor::from_vec(&[3, n, n], data).unwrap()
    }

    #[test]
    fn near_delta_kernel() {
        let k = gaussian_kernel(0.1, 3).unwrap();
        assert!(k.data()[4] > 0.99);
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_isotropic() {
        for &(s, n) in &[(0.7, 3), (1.3, 7), (2.5, 9)] {
            let k = gaussian_kernel(s, n).unwrap();
            for y in 0..n {
                for x in 0..n {
                    let v = k.data()[y * n + x];
                    assert_eq!(v, k.data()[x * n + y]);
                    assert_eq!(v, k.data()[y * n + (n - 1 - x)]);
                    assert_eq!(v, k.data()[(n - 1 - y) * n + x]);
                }
            }
        }
    }

    #[test]
    fn kernel_matches_direct_formula() {
        let k = gaussian_kernel(1.0, 5).unwrap();
        let mut want = vec![0.0; 25];
        let mut total = 0.0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let v = libm::exp(-f64::from(dx * dx + dy * dy) / 2.0);
                want[((dy + 2) * 5 + dx + 2) as usize] = v;
                total += v;
            }
        }
        for (a, b) in k.data().iter().zip(&want) {
            assert!((a - b / total).abs() < 1e-7);
        }
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(1.0, 0).is_err());
        assert!(gaussian_kernel(0.0, 3).is_err());
        assert!(gaussian_kernel(-1.0, 3).is_err());
    }

    #[test]
    fn kernel_size_covers_three_sigma() {
        assert_eq!(kernel_size_for(1.0), 7);
        assert_eq!(kernel_size_for(0.2), 3);
        assert_eq!(kernel_size_for(0.5), 5);
        assert_eq!(kernel_size_for(6.0), 37);
    }

    #[test]
    fn identity_limit_is_lossless_without_codec() {
        let img = test_image(16);
        let out = apply_degradation(&img, &params(1e-3, 1.0, 0.0, 100, 0), &QuantizeOnly).unwrap();
        assert!(psnr(&out, &img).unwrap().db > 40.0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[3, 16, 16], 77.0);
        let out = apply_degradation(&img, &params(3.0, 1.0, 0.0, 100, 0), &QuantizeOnly).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn shape_and_determinism() {
        let img = test_image(20);
        let p = params(1.5, 2.7, 10.0, 30, 99);
        let a = apply_degradation(&img, &p, &QuantizeOnly).unwrap();
        let b = apply_degradation(&img, &p, &QuantizeOnly).unwrap();
        assert_eq!(a.shape(), img.shape());
        assert_eq!(a, b);
        let c = apply_degradation(&img, &p.with_seed(100), &QuantizeOnly).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_invalid_images() {
        let p = params(1.0, 1.0, 0.0, 90, 0);
        assert!(apply_degradation(&Tensor::zeros(&[3, 4, 5]), &p, &QuantizeOnly).is_err());
        assert!(apply_degradation(&Tensor::full(&[3, 4, 4], 256.0), &p, &QuantizeOnly).is_err());
        assert!(apply_degradation(&Tensor::full(&[3, 4, 4], -1.0), &p, &QuantizeOnly).is_err());
        assert!(apply_degradation(&Tensor::zeros(&[4, 4]), &p, &QuantizeOnly).is_err());
    }

    #[test]
    fn rejects_invalid_params() {
        let img = test_image(8);
        for p in [params(0.0, 1.0, 0.0, 90, 0), params(1.0, 0.5, 0.0, 90, 0), params(1.0, 1.0, -1.0, 90, 0), params(1.0, 1.0, 0.0, 0, 0), params(1.0, 1.0, 0.0, 101, 0)] {
            assert!(apply_degradation(&img, &p, &QuantizeOnly).is_err());
        }
    }

    #[test]
    fn noise_lowers_psnr_monotonically() {
        let img = test_image(32);
        let mut wins = 0;
        for seed in 0..10 {
            let score = |noise: f64| {
                let out = apply_degradation(&img, &params(0.5, 1.0, noise, 100, seed), &QuantizeOnly).unwrap();
                psnr(&out, &img).unwrap().db
            };
            if score(5.0) > score(15.0) && score(15.0) > score(25.0) {
                wins += 1;
            }
        }
        assert!(wins > 5);
    }

    #[test]
    fn degenerate_ranges_force_the_tuple() {
        let r = ParamRanges {
            blur_sigma: Interval::point(1.5),
            down_rate: Interval::point(3.0),
            noise_std: Interval::point(7.0),
            jpeg_quality: (42, 42),
        };
        let p = sample_params(&r, 5).unwrap();
        assert_eq!((p.blur_sigma, p.down_rate, p.noise_std, p.jpeg_quality), (1.5, 3.0, 7.0, 42));
    }

    #[test]
    fn sampling_is_deterministic() {
        let r = ParamRanges::default();
        assert_eq!(sample_params(&r, 11).unwrap(), sample_params(&r, 11).unwrap());
        assert_ne!(sample_params(&r, 11).unwrap(), sample_params(&r, 12).unwrap());
    }

    #[test]
    fn quality_draws_are_uniform() {
        let r = ParamRanges::default();
        let n = 10_000;
        let mean = (0..n).map(|s| f64::from(sample_params(&r, s).unwrap().jpeg_quality)).sum::<f64>() / n as f64;
        assert!((mean - 27.5).abs() < 3.0, "mean {mean}");
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let r = ParamRanges::default();
        for s in 0..500 {
            let p = sample_params(&r, s).unwrap();
            p.validate().unwrap();
            assert!(p.blur_sigma >= 0.2 && p.blur_sigma <= 6.0);
            assert!(p.down_rate >= 1.0 && p.down_rate <= 8.0);
            assert!((5..=50).contains(&p.jpeg_quality));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut r = ParamRanges::default();
        r.noise_std = Interval::new(5.0, 1.0);
        assert!(sample_params(&r, 0).is_err());
        let mut r = ParamRanges::default();
        r.jpeg_quality = (0, 10);
        assert!(sample_params(&r, 0).is_err());
    }

    #[test]
    fn positive_pair_shares_degradation() {
        let a = test_image(16);
        let b = a.map(|v| 255.0 - v);
        let p = params(1.0, 2.0, 0.0, 80, 3);
        let pair = make_positive_pair(&a, &b, &p, &QuantizeOnly).unwrap();
        assert!(!pair.same_content);
        assert_eq!(pair.query, apply_degradation(&a, &p, &QuantizeOnly).unwrap());
        assert_eq!(pair.key, apply_degradation(&b, &p, &QuantizeOnly).unwrap());
        let same = make_positive_pair(&a, &a, &p, &QuantizeOnly).unwrap();
        assert!(same.same_content);
        assert!(make_positive_pair(&a, &test_image(8), &p, &QuantizeOnly).is_err());
    }

    #[test]
    fn key_noise_is_independent() {
        let a = test_image(16);
        let p = params(1.0, 1.0, 10.0, 100, 3);
        let pair = make_positive_pair(&a, &a, &p, &QuantizeOnly).unwrap();
        assert_ne!(pair.query, pair.key);
    }

    #[test]
    fn class_sampler_reports_index() {
        let classes = vec![params(1.0, 1.0, 0.0, 90, 0), params(3.0, 1.0, 0.0, 90, 0)];
        let s = ParamSampler::Classes(classes.clone());
        for seed in 0..20 {
            let (p, idx) = s.sample(seed).unwrap();
            let idx = idx.unwrap();
            assert_eq!(p.blur_sigma, classes[idx].blur_sigma);
        }
    }
}
