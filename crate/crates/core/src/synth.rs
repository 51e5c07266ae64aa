//! Procedural face-like images and toy datasets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, stream};
use crate::tensor::FeatureMap;

/// Generation parameters of one synthetic face. Geometry is in units of the
/// image side, colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub res: usize,
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub eye: [f64; 3],
    pub mouth: [f64; 3],
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub tilt: f64,
    pub hair_line: f64,
    pub eye_gap: f64,
    pub eye_height: f64,
    pub eye_size: f64,
    pub mouth_height: f64,
    pub mouth_width: f64,
    pub smile: f64,
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub texture_phase: f64,
    pub grain_seed: u64,
}

fn color(r: &mut crate::rng::Rng, lo: f64, hi: f64) -> [f64; 3] {
    [r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)]
}

impl FaceParams {
    /// Parameters of image `index` in the dataset generated from `seed`.
    pub fn sample(seed: u64, index: u64, res: usize) -> Self {
        let mut r = rng(derive_seed(derive_seed(seed, stream::DATA), index));
        let tone: f64 = r.random_range(0.35..0.9);
        let skin = [
            (tone + r.random_range(0.0..0.1)).min(1.0),
            tone * r.random_range(0.7..0.85),
            tone * r.random_range(0.55..0.75),
        ];
        Self {
            res,
            background: color(&mut r, 0.0, 1.0),
            skin,
            hair: color(&mut r, 0.0, 0.5),
            eye: color(&mut r, 0.0, 0.35),
            mouth: [r.random_range(0.5..0.9), r.random_range(0.1..0.35), r.random_range(0.1..0.35)],
            center: [r.random_range(0.44..0.56), r.random_range(0.46..0.56)],
            radii: [r.random_range(0.26..0.36), r.random_range(0.33..0.43)],
            tilt: r.random_range(-0.25..0.25),
            hair_line: r.random_range(-0.75..-0.35),
            eye_gap: r.random_range(0.28..0.42),
            eye_height: r.random_range(-0.3..-0.1),
            eye_size: r.random_range(0.07..0.13),
            mouth_height: r.random_range(0.35..0.55),
            mouth_width: r.random_range(0.25..0.45),
            smile: r.random_range(-0.15..0.25),
            texture_freq: r.random_range(6.0..20.0),
            texture_amp: r.random_range(0.0..0.08),
            texture_phase: r.random_range(0.0..core::f64::consts::TAU),
            grain_seed: r.random(),
        }
    }

    pub fn to_line(&self) -> String {
        let c = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        format!(
            "res={} background={} skin={} hair={} eye={} mouth={} center={} radii={} tilt={} hair_line={} eye_gap={} \
             eye_height={} eye_size={} mouth_height={} mouth_width={} smile={} texture_freq={} texture_amp={} \
             texture_phase={} grain_seed={}",
            self.res,
            c(&self.background),
            c(&self.skin),
            c(&self.hair),
            c(&self.eye),
            c(&self.mouth),
            c(&self.center),
            c(&self.radii),
            self.tilt,
            self.hair_line,
            self.eye_gap,
            self.eye_height,
            self.eye_size,
            self.mouth_height,
            self.mouth_width,
            self.smile,
            self.texture_freq,
            self.texture_amp,
            self.texture_phase,
            self.grain_seed
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut fields = alloc::collections::BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("manifest token `{tok}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::InvalidArgument(format!("manifest misses `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::InvalidArgument(format!("manifest `{k}` is not a number")))
        };
        fn arr<const N: usize>(k: &str, s: &str) -> Result<[f64; N]> {
            let v: Vec<f64> = s
                .split(',')
                .map(|x| x.parse())
                .collect::<core::result::Result<_, _>>()
                .map_err(|_| Error::InvalidArgument(format!("manifest `{k}` is not a number list")))?;
            v.try_into().map_err(|_| Error::InvalidArgument(format!("manifest `{k}` needs {N} values")))
        }
        let p = Self {
            res: get("res")?.parse().map_err(|_| Error::InvalidArgument("manifest `res`".into()))?,
            background: arr("background", get("background")?)?,
            skin: arr("skin", get("skin")?)?,
            hair: arr("hair", get("hair")?)?,
            eye: arr("eye", get("eye")?)?,
            mouth: arr("mouth", get("mouth")?)?,
            center: arr("center", get("center")?)?,
            radii: arr("radii", get("radii")?)?,
            tilt: num("tilt")?,
            hair_line: num("hair_line")?,
            eye_gap: num("eye_gap")?,
            eye_height: num("eye_height")?,
            eye_size: num("eye_size")?,
            mouth_height: num("mouth_height")?,
            mouth_width: num("mouth_width")?,
            smile: num("smile")?,
            texture_freq: num("texture_freq")?,
            texture_amp: num("texture_amp")?,
            texture_phase: num("texture_phase")?,
            grain_seed: get("grain_seed")?.parse().map_err(|_| Error::InvalidArgument("manifest `grain_seed`".into()))?,
        };
        if p.res == 0 {
            return Err(Error::InvalidArgument("manifest `res` must be positive".into()));
        }
        Ok(p)
    }
}

/// Soft inside-indicator from a signed distance (negative inside).
fn cover(d: f64, px: f64) -> f64 {
    (0.5 - d / px).clamp(0.0, 1.0)
}

fn blend(acc: &mut [f64; 3], c: &[f64; 3], a: f64) {
    for k in 0..3 {
        acc[k] += a * (c[k] - acc[k]);
    }
}

fn grain(seed: u64, x: usize, y: usize) -> f64 {
    let mut h = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Renders a face as a `3 x res x res` image in pixel range with integer values.
pub fn render_face(p: &FaceParams) -> FeatureMap {
    let n = p.res;
    let px = 1.0 / n as f64;
    let (s, c) = (libm::sin(p.tilt), libm::cos(p.tilt));
    let mut out = FeatureMap::zeros(&[3, n, n]);
    let data = out.data_mut();
    for y in 0..n {
        for x in 0..n {
            let gx = (x as f64 + 0.5) * px - p.center[0];
            let gy = (y as f64 + 0.5) * px - p.center[1];
            // Face-local coordinates, unit radius on the ellipse.
            let u = (c * gx + s * gy) / p.radii[0];
            let v = (-s * gx + c * gy) / p.radii[1];
            let scale = p.radii[0].min(p.radii[1]);
            let mut col = p.background;
            let r = libm::sqrt(u * u + v * v);
            blend(&mut col, &p.hair, cover((libm::sqrt(u * u / 1.21 + v * v / 1.21) - 1.0) * scale, px) * cover((v + 0.05) * scale, px));
            let face = cover((r - 1.0) * scale, px);
            let mut skin = p.skin;
            let shade = 1.0 - 0.25 * (u * 0.6 + v * 0.4).max(-1.0).min(1.0) * 0.5;
            let tex = p.texture_amp * libm::sin(p.texture_freq * (u + 0.5 * v) + p.texture_phase);
            for k in skin.iter_mut() {
                *k = (*k * shade + tex).clamp(0.0, 1.0);
            }
            blend(&mut col, &skin, face);
            blend(&mut col, &p.hair, face * cover((v - p.hair_line) * scale, px));
            for side in [-1.0, 1.0] {
                let ex = u - side * p.eye_gap;
                let ey = v - p.eye_height;
                let d = libm::sqrt(ex * ex + 1.8 * ey * ey) - p.eye_size;
                blend(&mut col, &[0.95, 0.95, 0.95], face * cover(d * scale, px));
                let di = libm::sqrt(ex * ex + ey * ey) - 0.55 * p.eye_size;
                blend(&mut col, &p.eye, face * cover(di * scale, px));
            }
            let mx = u / p.mouth_width;
            let curve = p.mouth_height + p.smile * (1.0 - mx * mx) * p.mouth_width;
            let md = ((v - curve).abs() - 0.035).max((mx.abs() - 1.0) * p.mouth_width);
            blend(&mut col, &p.mouth, face * cover(md * scale, px));
            let nd = (u.abs() - 0.04).max((v - 0.12).abs() - 0.14);
            blend(&mut col, &[p.skin[0] * 0.7, p.skin[1] * 0.6, p.skin[2] * 0.6], face * 0.6 * cover(nd * scale, px));
            let g = 0.04 * grain(p.grain_seed, x, y);
            for k in 0..3 {
                data[(k * n + y) * n + x] = libm::round(((col[k] + g) * 255.0).clamp(0.0, 255.0));
            }
        }
    }
    out
}

pub fn face_dataset(n: usize, res: usize, seed: u64) -> Result<Vec<(FaceParams, FeatureMap)>> {
    if n == 0 || res == 0 {
        return Err(Error::InvalidArgument("dataset needs n >= 1 and res >= 1".into()));
    }
    Ok((0..n as u64)
        .map(|i| {
            let p = FaceParams::sample(seed, i, res);
            let img = render_face(&p);
            (p, img)
        })
        .collect())
}

pub const GAUSSIAN_MODES: usize = 4;

/// Mean image of one mode of the toy mixture.
pub fn gaussian_mode_mean(mode: usize, res: usize) -> FeatureMap {
    let mut t = FeatureMap::zeros(&[3, res, res]);
    let base = [[200.0, 60.0, 60.0], [60.0, 180.0, 70.0], [60.0, 80.0, 200.0], [190.0, 190.0, 80.0]][mode % GAUSSIAN_MODES];
    let d = t.data_mut();
    for k in 0..3 {
        for y in 0..res {
            for x in 0..res {
                let ramp = if mode % 2 == 0 { y } else { x } as f64 / res.max(2) as f64 - 0.5;
                d[(k * res + y) * res + x] = base[k] + 40.0 * ramp;
            }
        }
    }
    t
}

/// Images drawn from a 4-mode mixture: a mode mean plus i.i.d. pixel noise.
pub fn gaussian_mode_images(n: usize, res: usize, noise_std: f64, seed: u64) -> Vec<(usize, FeatureMap)> {
    let mut r = rng(derive_seed(seed, stream::DATA));
    let normal = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    (0..n)
        .map(|_| {
            let mode = r.random_range(0..GAUSSIAN_MODES);
            let mut img = gaussian_mode_mean(mode, res);
            for v in img.data_mut() {
                *v = libm::round((*v + normal.sample(&mut r)).clamp(0.0, 255.0));
            }
            (mode, img)
        })
        .collect()
}
