//! Degradation-aware feature interpolation: channel-wise convex blending of
//! prior features and image features, weighted by masks predicted from the
//! degradation representation. Also the concatenate-then-convolve baseline.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{invalid_arg, Result};
use crate::graph::{pair_softmax_first, Graph, Var};
use crate::nn::{Bound, Conv2d, Linear, ParamStore, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Tensor};

/// Clamp margin applied by mask editing.
pub const MASK_EPS: f64 = 1e-6;

/// Per-channel prior weights of one fusion level; the image side gets `1 - w`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationMask {
    pub level: usize,
    weights: Vec<f64>,
}

impl InterpolationMask {
    pub fn new(level: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid_arg!("mask must have at least one channel"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && **w < 1.0)) {
            return Err(invalid_arg!("mask weight {} outside (0, 1)", w));
        }
        Ok(Self { level, weights })
    }

    /// Uniform mask, mostly for tests and untrained heads.
    pub fn uniform(level: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(level, alloc::vec![value; channels])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn complement(&self) -> Vec<f64> {
        self.weights.iter().map(|w| 1.0 - w).collect()
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }
}

/// Per-level MLP mapping a representation to `2C` logits: columns `0..C`
/// score the prior side, `C..2C` the image side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionHead {
    pub channels: usize,
    layers: Vec<Linear>,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: &[usize], channels: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::new();
        let mut d = in_dim;
        for (j, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.fc{j}"), d, h, true, rng));
            d = h;
        }
        layers.push(Linear::new(store, &format!("{name}.out"), d, 2 * channels, true, rng));
        Self { channels, layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(Linear::num_scalars).sum()
    }

    /// Logits `B x 2C` for representations `B x D`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        let (_, d) = g.value(v).dims2();
        if d != self.layers[0].inp {
            return Err(invalid_arg!("fusion head expects width {}, got {}", self.layers[0].inp, d));
        }
        let mut h = v;
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if j < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// Prior-side weights `B x C`.
    pub fn mask(&self, g: &mut Graph, p: &Bound, v: Var) -> Result<Var> {
        let l = self.logits(g, p, v)?;
        g.pair_softmax(l)
    }
}

/// Mask for a single representation vector.
pub fn make_mask(head: &FusionHead, store: &ParamStore, level: usize, v: &[f64]) -> Result<InterpolationMask> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let vv = g.constant(Tensor::from_vec(&[1, v.len()], v.to_vec())?);
    let logits = head.logits(&mut g, &p, vv)?;
    mask_from_logits(level, g.value(logits).data())
}

/// Pairwise softmax of `[prior logits | image logits]`.
pub fn mask_from_logits(level: usize, logits: &[f64]) -> Result<InterpolationMask> {
    if logits.len() % 2 != 0 {
        return Err(invalid_arg!("logit count {} is odd", logits.len()));
    }
    let c = logits.len() / 2;
    let w = (0..c).map(|i| pair_softmax_first(logits[i], logits[c + i])).collect::<Vec<_>>();
    // Saturated logits can round to exactly 0 or 1; keep the open interval.
    let w = w.into_iter().map(|x| x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)).collect();
    InterpolationMask::new(level, w)
}

fn check_mask_shape(f: &FeatureMap, mask: &InterpolationMask) -> Result<usize> {
    if f.rank() != 3 || f.shape()[0] != mask.channels() {
        return Err(invalid_arg!("features {:?} do not match a {}-channel mask", f.shape(), mask.channels()));
    }
    Ok(f.shape()[1] * f.shape()[2])
}

/// `mask[c] * gpb + (1 - mask[c]) * ife` per channel, evaluated as
/// `ife + mask[c] * (gpb - ife)` so equal inputs pass through exactly.
pub fn interpolate(f_gpb: &FeatureMap, f_ife: &FeatureMap, mask: &InterpolationMask) -> Result<FeatureMap> {
    f_gpb.expect_same_shape(f_ife)?;
    let hw = check_mask_shape(f_gpb, mask)?;
    let mut out = f_gpb.clone();
    for (c, (o, i)) in out.data_mut().chunks_mut(hw).zip(f_ife.data().chunks(hw)).enumerate() {
        let m = mask.weights[c];
        o.iter_mut().zip(i).for_each(|(a, b)| *a = b + m * (*a - b));
    }
    Ok(out)
}

/// Graph form over batches: `gpb, ife: B x C x H x W`, `mask: B x C`.
pub fn interpolate_var(g: &mut Graph, gpb: Var, ife: Var, mask: Var) -> Result<Var> {
    if g.value(gpb).shape() != g.value(ife).shape() {
        return Err(invalid_arg!("interpolate: {:?} vs {:?}", g.value(gpb).shape(), g.value(ife).shape()));
    }
    let a = g.scale_channels(gpb, mask)?;
    let inv = g.affine(mask, -1.0, 1.0);
    let b = g.scale_channels(ife, inv)?;
    g.add(a, b)
}

/// Mean prior weight of a mask.
pub fn usage_ratio(mask: &InterpolationMask) -> f64 {
    mask.weights.iter().sum::<f64>() / mask.weights.len() as f64
}

/// Which side of the interpolation a single-source pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Gpb,
    Ife,
}

impl FromStr for Source {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpb" => Ok(Source::Gpb),
            "ife" => Ok(Source::Ife),
            other => Err(invalid_arg!("unknown source `{}` (expected gpb or ife)", other)),
        }
    }
}

/// `mask * f` for the prior side, `(1 - mask) * f` for the image side.
pub fn masked_single_source(f: &FeatureMap, mask: &InterpolationMask, source: Source) -> Result<FeatureMap> {
    let hw = check_mask_shape(f, mask)?;
    let mut out = f.clone();
    for (c, o) in out.data_mut().chunks_mut(hw).enumerate() {
        let m = match source {
            Source::Gpb => mask.weights[c],
            Source::Ife => 1.0 - mask.weights[c],
        };
        o.iter_mut().for_each(|a| *a *= m);
    }
    Ok(out)
}

pub fn masked_single_source_var(g: &mut Graph, f: Var, mask: Var, source: Source) -> Result<Var> {
    match source {
        Source::Gpb => g.scale_channels(f, mask),
        Source::Ife => {
            let inv = g.affine(mask, -1.0, 1.0);
            g.scale_channels(f, inv)
        }
    }
}

/// Shifts every weight by `bias`, clamped to `[eps, 1 - eps]`.
pub fn bias_mask(mask: &InterpolationMask, bias: f64) -> Result<InterpolationMask> {
    if !bias.is_finite() {
        return Err(invalid_arg!("mask bias must be finite, got {}", bias));
    }
    if bias == 0.0 {
        return Ok(mask.clone());
    }
    let w = mask.weights.iter().map(|w| (w + bias).clamp(MASK_EPS, 1.0 - MASK_EPS)).collect();
    InterpolationMask::new(mask.level, w)
}

/// Concatenate-then-convolve fusion head, `2C -> C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatConv {
    pub conv: Conv2d,
}

impl CatConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut Rng) -> Self {
        Self { conv: Conv2d::new(store, name, 2 * channels, channels, k, 1, true, rng) }
    }

    pub fn fuse(&self, g: &mut Graph, p: &Bound, gpb: Var, ife: Var) -> Result<Var> {
        if g.value(gpb).shape() != g.value(ife).shape() || g.value(gpb).shape().get(1) != Some(&self.conv.cout) {
            return Err(invalid_arg!(
                "cat-conv: {:?} and {:?} for {} channels",
                g.value(gpb).shape(),
                g.value(ife).shape(),
                self.conv.cout
            ));
        }
        let cat = g.concat_axis1(&[gpb, ife])?;
        self.conv.forward(g, p, cat)
    }
}

/// Standalone concatenate-then-convolve on single feature maps.
pub fn cat_conv_fuse(f_gpb: &FeatureMap, f_ife: &FeatureMap, weight: &Tensor, bias: &Tensor) -> Result<FeatureMap> {
    f_gpb.expect_same_shape(f_ife)?;
    if f_gpb.rank() != 3 {
        return Err(invalid_arg!("cat-conv expects C x H x W features"));
    }
    let (c, h, w) = f_gpb.dims3();
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != c || ws[1] != 2 * c || ws[2] != ws[3] || bias.len() != c {
        return Err(invalid_arg!("cat-conv weight {:?} does not map {} -> {} channels", ws, 2 * c, c));
    }
    let mut data = f_gpb.data().to_vec();
    data.extend_from_slice(f_ife.data());
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 2 * c, h, w], data)?);
    let wv = g.constant(weight.clone());
    let bv = g.constant(bias.clone());
    let y = g.conv2d(x, wv, Some(bv), 1, ws[2] / 2)?;
    g.value(y).clone().reshape(&[c, h, w])
}

/// Scalars in an MLP fusion head `in_dim -> hidden.. -> 2C`.
pub fn dafi_head_param_count(in_dim: usize, hidden: &[usize], channels: usize) -> usize {
    let mut d = in_dim;
    let mut n = 0;
    for &h in hidden.iter().chain(core::iter::once(&(2 * channels))) {
        n += d * h + h;
        d = h;
    }
    n
}

/// Scalars in a `2C -> C`, `k x k` fusion convolution with bias.
pub fn cat_conv_param_count(channels: usize, k: usize) -> usize {
    2 * channels * channels * k * k + channels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use alloc::vec;
    use proptest::prelude::*;

    fn rand_mask(c: usize, seed: u64) -> InterpolationMask {
        let logits = Tensor::randn(&[2 * c], 2.0, &mut rng(seed));
        mask_from_logits(1, logits.data()).unwrap()
    }

    #[test]
    fn zero_head_gives_half_mask() {
        let mut store = ParamStore::new();
        let head = FusionHead::new(&mut store, "h", 4, &[3], 5, &mut rng(1));
        let out = head.layers().last().unwrap();
        *store.get_mut(out.w) = Tensor::zeros(&[10, 3]);
        *store.get_mut(out.b.unwrap()) = Tensor::zeros(&[10]);
        let m = make_mask(&head, &store, 2, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(m.weights().iter().all(|&w| w == 0.5));
        assert_eq!(usage_ratio(&m), 0.5);
        assert!(make_mask(&head, &store, 2, &[1.0]).is_err());
    }

    #[test]
    fn saturated_logits() {
        let m = mask_from_logits(1, &[20.0, 0.0]).unwrap();
        assert!(m.weights()[0] > 1.0 - 1e-8);
        let m = mask_from_logits(1, &[800.0, -800.0]).unwrap();
        assert!(m.weights()[0] < 1.0 && m.weights()[0] > 1.0 - 1e-15);
    }

    #[test]
    fn make_mask_matches_brute_force_softmax() {
        let mut store = ParamStore::new();
        let head = FusionHead::new(&mut store, "h", 6, &[4, 4], 3, &mut rng(2));
        let v = Tensor::randn(&[6], 1.0, &mut rng(3));
        let m = make_mask(&head, &store, 1, v.data()).unwrap();
        // Scalar forward through the same weights.
        let mut h = v.data().to_vec();
        let last = head.layers().len() - 1;
        for (j, l) in head.layers().iter().enumerate() {
            let w = store.get(l.w);
            let b = store.get(l.b.unwrap());
            let mut o = vec![0.0; l.out];
            for r in 0..l.out {
                o[r] = b.data()[r] + (0..l.inp).map(|i| w.data()[r * l.inp + i] * h[i]).sum::<f64>();
                if j < last && o[r] < 0.0 {
                    o[r] *= LEAKY_SLOPE;
                }
            }
            h = o;
        }
        for c in 0..3 {
            let (a, b) = (h[c], h[3 + c]);
            let want = libm::exp(a) / (libm::exp(a) + libm::exp(b));
            assert!((m.weights()[c] - want).abs() < 1e-12);
            assert!((m.weights()[c] + m.complement()[c] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolation_fixed_point_and_limits() {
        let f = Tensor::randn(&[3, 2, 2], 1.0, &mut rng(4));
        let g2 = Tensor::randn(&[3, 2, 2], 1.0, &mut rng(5));
        let m = rand_mask(3, 6);
        assert_eq!(interpolate(&f, &f, &m).unwrap().max_abs_diff(&f), 0.0);
        let hi = mask_from_logits(1, &[40.0, 40.0, 40.0, 0.0, 0.0, 0.0]).unwrap();
        let out = interpolate(&f, &g2, &hi).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15 * 10.0 + 1e-16);
        assert!(interpolate(&f, &Tensor::zeros(&[3, 2, 3]), &m).is_err());
        assert!(interpolate(&f, &f, &rand_mask(2, 1)).is_err());
    }

    #[test]
    fn source_tags() {
        assert_eq!("gpb".parse::<Source>().unwrap(), Source::Gpb);
        assert_eq!("ife".parse::<Source>().unwrap(), Source::Ife);
        assert!("both".parse::<Source>().is_err());
    }

    #[test]
    fn single_source_zero_input() {
        let m = rand_mask(2, 7);
        let z = Tensor::zeros(&[2, 3, 3]);
        for s in [Source::Gpb, Source::Ife] {
            assert!(masked_single_source(&z, &m, s).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bias_mask_cases() {
        let m = InterpolationMask::uniform(5, 4, 0.5).unwrap();
        assert_eq!(bias_mask(&m, 0.0).unwrap(), m);
        assert!(bias_mask(&m, 1.0).unwrap().weights().iter().all(|&w| w == 1.0 - MASK_EPS));
        let down = bias_mask(&m, -0.2).unwrap();
        assert!(down.weights().iter().all(|&w| (w - 0.3).abs() < 1e-15));
        assert!((usage_ratio(&m) - usage_ratio(&down) - 0.2).abs() < 1e-15);
        assert!(bias_mask(&m, f64::NAN).is_err());
    }

    #[test]
    fn cat_conv_shapes_and_identity() {
        let c = 3;
        let f = Tensor::randn(&[c, 4, 4], 1.0, &mut rng(8));
        let mut w = Tensor::zeros(&[c, 2 * c, 1, 1]);
        for o in 0..c {
            w.data_mut()[o * 2 * c + o] = 0.5;
            w.data_mut()[o * 2 * c + c + o] = 0.5;
        }
        let out = cat_conv_fuse(&f, &f, &w, &Tensor::zeros(&[c])).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15);
        let mut store = ParamStore::new();
        let head = CatConv::new(&mut store, "cc", c, 3, &mut rng(9));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let a = g.constant(Tensor::randn(&[2, c, 4, 4], 1.0, &mut rng(10)));
        let y = head.fuse(&mut g, &p, a, a).unwrap();
        assert_eq!(g.value(y).shape(), [2, c, 4, 4]);
        assert_eq!(head.conv.num_scalars(), cat_conv_param_count(c, 3));
    }

    #[test]
    fn parameter_counts() {
        let mut store = ParamStore::new();
        let head = FusionHead::new(&mut store, "h", 256, &[256], 512, &mut rng(1));
        assert_eq!(head.num_scalars(), dafi_head_param_count(256, &[256], 512));
        assert_eq!(store.num_scalars(), 256 * 256 + 256 + 256 * 1024 + 1024);
        assert_eq!(cat_conv_param_count(512, 3), 1024 * 512 * 9 + 512);
        assert!(dafi_head_param_count(256, &[256, 256], 512) < cat_conv_param_count(512, 3));
    }

    #[test]
    fn interpolation_gradient_through_logits() {
        let (b, c) = (2, 3);
        let gpb = Tensor::randn(&[b, c, 2, 2], 1.0, &mut rng(11));
        let ife = Tensor::randn(&[b, c, 2, 2], 1.0, &mut rng(12));
        let target = Tensor::randn(&[b, c, 2, 2], 1.0, &mut rng(13));
        let logits = Tensor::randn(&[b, 2 * c], 1.0, &mut rng(14));
        let f = |l: &Tensor| {
            let mut g = Graph::new();
            let lv = g.leaf(l.clone());
            let m = g.pair_softmax(lv).unwrap();
            let a = g.constant(gpb.clone());
            let i = g.constant(ife.clone());
            let t = g.constant(target.clone());
            let y = interpolate_var(&mut g, a, i, m).unwrap();
            let d = g.sub(y, t).unwrap();
            let d = g.square(d);
            let loss = g.sum(d);
            (g.value(loss).item(), g.backward(loss).unwrap().get(lv).unwrap().clone())
        };
        let (_, grad) = f(&logits);
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut lp = logits.clone();
            lp.data_mut()[k] += h;
            let mut lm = logits.clone();
            lm.data_mut()[k] -= h;
            let fd = (f(&lp).0 - f(&lm).0) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-6), "{k}: {fd} vs {an}");
        }
    }

    fn feats(c: usize, seed: u64) -> Tensor {
        Tensor::randn(&[c, 3, 3], 3.0, &mut rng(seed))
    }

    proptest! {
        #[test]
        fn pair_sum_is_one(c in 1usize..8, seed in any::<u64>()) {
            let m = rand_mask(c, seed);
            for (w, k) in m.weights().iter().zip(m.complement()) {
                prop_assert!((w + k - 1.0).abs() <= 1e-7);
                prop_assert!(*w > 0.0 && *w < 1.0);
            }
        }

        #[test]
        fn interpolation_is_convex(c in 1usize..6, seed in any::<u64>()) {
            let a = feats(c, seed);
            let b = feats(c, seed ^ 1);
            let m = rand_mask(c, seed ^ 2);
            let y = interpolate(&a, &b, &m).unwrap();
            for ((y, a), b) in y.data().iter().zip(a.data()).zip(b.data()) {
                prop_assert!(*y >= a.min(*b) - 1e-12 && *y <= a.max(*b) + 1e-12);
            }
        }

        #[test]
        fn decomposition_identity(c in 1usize..6, seed in any::<u64>()) {
            let a = feats(c, seed);
            let b = feats(c, seed ^ 3);
            let m = rand_mask(c, seed ^ 4);
            let sum = masked_single_source(&a, &m, Source::Gpb).unwrap()
                .zip_map(&masked_single_source(&b, &m, Source::Ife).unwrap(), |x, y| x + y).unwrap();
            prop_assert!(sum.max_abs_diff(&interpolate(&a, &b, &m).unwrap()) <= 1e-7);
        }

        #[test]
        fn biased_masks_stay_in_range(c in 1usize..6, seed in any::<u64>(), bias in -2.0f64..2.0) {
            let m = bias_mask(&rand_mask(c, seed), bias).unwrap();
            prop_assert!(m.weights().iter().all(|&w| (MASK_EPS..=1.0 - MASK_EPS).contains(&w)));
        }
    }
}
