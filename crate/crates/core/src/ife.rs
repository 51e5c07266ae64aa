//! Image feature extraction: a progressive feature pyramid over the degraded
//! input, per-level branch convolutions feeding the fusion blocks, and the
//! latent-code encoder producing the generator's per-layer codes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Result};
use crate::graph::{Graph, Var};
use crate::kv::Kv;
use crate::nn::{Bound, Conv2d, Linear, ParamStore, LEAKY_SLOPE};
use crate::rng::{self, derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct IfeConfig {
    pub input_res: usize,
    /// Resolution of fused level 1; level `i` sits at `base_res * 2^(i-1)`.
    pub base_res: usize,
    /// Channels of fused levels `1..=n_fused`, matching the generator blocks.
    pub level_channels: Vec<usize>,
    pub top_channels: usize,
    pub dense_layers: usize,
    pub growth: usize,
    pub latent_conv_channels: usize,
    pub n_latents: usize,
    pub latent_dim: usize,
}

impl IfeConfig {
    pub fn n_fused(&self) -> usize {
        self.level_channels.len()
    }

    /// Spatial size of pyramid level `i` (`1..=n_fused + 1`).
    pub fn level_res(&self, i: usize) -> usize {
        if i == self.n_fused() + 1 {
            self.input_res
        } else {
            self.base_res << (i - 1)
        }
    }

    pub fn level_shape(&self, i: usize) -> [usize; 3] {
        let c = if i == self.n_fused() + 1 { self.top_channels } else { self.level_channels[i - 1] };
        let r = self.level_res(i);
        [c, r, r]
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() || self.level_channels.contains(&0) {
            return Err(invalid_arg!("ife: level channels must be non-empty and positive"));
        }
        let pow2 = |r: usize| r > 0 && r.is_power_of_two();
        if !pow2(self.input_res) || !pow2(self.base_res) {
            return Err(invalid_arg!("ife: resolutions must be powers of two"));
        }
        if self.top_channels == 0 || self.dense_layers == 0 || self.growth == 0 || self.latent_conv_channels == 0 {
            return Err(invalid_arg!("ife: widths must be positive"));
        }
        if self.n_latents == 0 || self.latent_dim == 0 {
            return Err(invalid_arg!("ife: latent shape must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut Kv, prefix: &str) {
        kv.set(&format!("{prefix}input_res"), self.input_res);
        kv.set(&format!("{prefix}base_res"), self.base_res);
        kv.set_list(&format!("{prefix}level_channels"), &self.level_channels);
        kv.set(&format!("{prefix}top_channels"), self.top_channels);
        kv.set(&format!("{prefix}dense_layers"), self.dense_layers);
        kv.set(&format!("{prefix}growth"), self.growth);
        kv.set(&format!("{prefix}latent_conv_channels"), self.latent_conv_channels);
        kv.set(&format!("{prefix}n_latents"), self.n_latents);
        kv.set(&format!("{prefix}latent_dim"), self.latent_dim);
    }

    pub fn from_kv(kv: &Kv, prefix: &str) -> Result<Self> {
        let req = |k: &str| -> Result<usize> {
            kv.get(&format!("{prefix}{k}"))?.ok_or_else(|| invalid_arg!("missing key `{}{}`", prefix, k))
        };
        let c = Self {
            input_res: req("input_res")?,
            base_res: req("base_res")?,
            level_channels: kv
                .get_list(&format!("{prefix}level_channels"))?
                .ok_or_else(|| invalid_arg!("missing key `{}level_channels`", prefix))?,
            top_channels: req("top_channels")?,
            dense_layers: req("dense_layers")?,
            growth: req("growth")?,
            latent_conv_channels: req("latent_conv_channels")?,
            n_latents: req("n_latents")?,
            latent_dim: req("latent_dim")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Upsample,
    Conv(Conv2d),
}

/// Pyramid levels ordered deepest first: `tilde[0]` is level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub tilde: Vec<Var>,
    pub branch: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ife {
    config: IfeConfig,
    params: ParamStore,
    dense: Vec<Conv2d>,
    dense_out: Conv2d,
    /// `transitions[i - 1]` maps level `i + 1` to level `i`.
    transitions: Vec<Vec<Step>>,
    branches: Vec<Conv2d>,
    latent_conv: Conv2d,
    latent_fc: Linear,
}

impl Ife {
    pub fn new(config: IfeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(derive_seed(seed, stream::INIT));
        let mut params = ParamStore::new();
        let mut dense = Vec::new();
        for j in 0..config.dense_layers {
            let cin = 3 + j * config.growth;
            dense.push(Conv2d::new(&mut params, &format!("dense{j}"), cin, config.growth, 3, 1, true, &mut r));
        }
        let dense_width = 3 + config.dense_layers * config.growth;
        let dense_out = Conv2d::new(&mut params, "dense_out", dense_width, config.top_channels, 1, 1, true, &mut r);

        let n = config.n_fused();
        let mut transitions = vec![Vec::new(); n];
        for i in (1..=n).rev() {
            let [cin, mut res, _] = config.level_shape(i + 1);
            let [cout, target, _] = config.level_shape(i);
            let mut steps = Vec::new();
            let mut c = cin;
            let mut j = 0;
            while res > 2 * target {
                steps.push(Step::Conv(Conv2d::new(&mut params, &format!("down{i}.{j}"), c, cout, 3, 2, true, &mut r)));
                c = cout;
                res /= 2;
                j += 1;
            }
            while res < target {
                steps.push(Step::Upsample);
                res *= 2;
            }
            let stride = res / target;
            steps.push(Step::Conv(Conv2d::new(&mut params, &format!("down{i}.{j}"), c, cout, 3, stride, true, &mut r)));
            transitions[i - 1] = steps;
        }
        let branches = (1..=n)
            .map(|i| {
                let c = config.level_channels[i - 1];
                Conv2d::new(&mut params, &format!("branch{i}"), c, c, 3, 1, true, &mut r)
            })
            .collect();
        let c1 = config.level_channels[0];
        let latent_conv = Conv2d::new(&mut params, "latent.conv", c1, config.latent_conv_channels, 3, 1, true, &mut r);
        let flat = config.latent_conv_channels * config.base_res * config.base_res;
        let latent_fc = Linear::new(&mut params, "latent.fc", flat, config.n_latents * config.latent_dim, true, &mut r);
        Ok(Self { config, params, dense, dense_out, transitions, branches, latent_conv, latent_fc })
    }

    pub fn config(&self) -> &IfeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Branch convolution of fused level `i`, for test rigs.
    pub fn branch_conv(&self, i: usize) -> Result<Conv2d> {
        self.branches.get(i.wrapping_sub(1)).copied().ok_or_else(|| invalid_arg!("no branch at level {}", i))
    }

    /// Pyramid over `x: B x 3 x R x R`; returns levels `1..=n_fused + 1`, deepest first.
    pub fn extract_pyramid(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let s = g.value(x).shape();
        let r = self.config.input_res;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(invalid_arg!("ife expects B x 3 x {} x {}, got {:?}", r, r, s));
        }
        let mut feats = vec![x];
        for conv in &self.dense {
            let inp = g.concat_axis1(&feats)?;
            let h = conv.forward(g, p, inp)?;
            feats.push(g.leaky_relu(h, LEAKY_SLOPE));
        }
        let cat = g.concat_axis1(&feats)?;
        let top = self.dense_out.forward(g, p, cat)?;
        let top = g.leaky_relu(top, LEAKY_SLOPE);

        let n = self.config.n_fused();
        let mut levels = vec![top; n + 1];
        let mut h = top;
        for i in (1..=n).rev() {
            for step in &self.transitions[i - 1] {
                h = match step {
                    Step::Upsample => g.upsample_nearest2x(h),
                    Step::Conv(c) => {
                        let y = c.forward(g, p, h)?;
                        g.leaky_relu(y, LEAKY_SLOPE)
                    }
                };
            }
            levels[i - 1] = h;
        }
        Ok(levels)
    }

    /// Shape-preserving branch conv on pyramid level `i`.
    pub fn branch_features(&self, g: &mut Graph, p: &Bound, tilde: Var, i: usize) -> Result<Var> {
        let conv = self.branch_conv(i)?;
        let c = g.value(tilde).shape().get(1).copied();
        if c != Some(conv.cin) {
            return Err(invalid_arg!("branch {} expects {} channels, got {:?}", i, conv.cin, c));
        }
        conv.forward(g, p, tilde)
    }

    /// Conv, flatten, fully connected, reshape to `B x n_latents x latent_dim`.
    pub fn encode_latents(&self, g: &mut Graph, p: &Bound, tilde_1: Var) -> Result<Var> {
        let expect = self.config.level_shape(1);
        let s = g.value(tilde_1).shape().to_vec();
        if s.len() != 4 || s[1..] != expect {
            return Err(invalid_arg!("latent encoder expects B x {:?}, got {:?}", expect, s));
        }
        let h = self.latent_conv.forward(g, p, tilde_1)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let flat = self.latent_fc.inp;
        let h = g.reshape(h, &[s[0], flat])?;
        let h = self.latent_fc.forward(g, p, h)?;
        g.reshape(h, &[s[0], self.config.n_latents, self.config.latent_dim])
    }

    /// Full pass: pyramid, branch features for fused levels, latent codes.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(FeaturePyramid, Var)> {
        let tilde = self.extract_pyramid(g, p, x)?;
        let mut branch = Vec::with_capacity(self.config.n_fused());
        for i in 1..=self.config.n_fused() {
            branch.push(self.branch_features(g, p, tilde[i - 1], i)?);
        }
        let w_plus = self.encode_latents(g, p, tilde[0])?;
        Ok((FeaturePyramid { tilde, branch }, w_plus))
    }

    /// Inference-only convenience: pyramid values and latent codes.
    pub fn run(&self, x: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (pyr, w) = self.forward(&mut g, &p, xv)?;
        let tilde = pyr.tilde.iter().map(|&v| g.value(v).clone()).collect();
        let branch = pyr.branch.iter().map(|&v| g.value(v).clone()).collect();
        Ok((tilde, branch, g.value(w).clone()))
    }

    /// Input-pixel extent `[0, e]` of level 1 features affected by a change at
    /// input pixel `(0, 0)`, along one axis.
    pub fn corner_influence(&self) -> (usize, usize) {
        let mut e = self.dense.len();
        for i in (1..=self.config.n_fused()).rev() {
            for step in &self.transitions[i - 1] {
                e = match step {
                    Step::Upsample => 2 * e + 1,
                    Step::Conv(c) => (e + c.pad) / c.stride,
                };
            }
        }
        (e, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> IfeConfig {
        IfeConfig {
            input_res: 16,
            base_res: 4,
            level_channels: vec![6, 5, 4],
            top_channels: 4,
            dense_layers: 2,
            growth: 3,
            latent_conv_channels: 2,
            n_latents: 8,
            latent_dim: 5,
        }
    }

    fn input(seed: u64, res: usize) -> Tensor {
        Tensor::randn(&[2, 3, res, res], 0.5, &mut rng::rng(seed))
    }

    #[test]
    fn pyramid_shapes_follow_schedule() {
        for input_res in [8, 16, 32] {
            let cfg = IfeConfig { input_res, ..toy() };
            let ife = Ife::new(cfg.clone(), 1).unwrap();
            let (tilde, branch, w) = ife.run(&input(2, input_res)).unwrap();
            assert_eq!(tilde.len(), 4);
            for (i, t) in tilde.iter().enumerate() {
                let s = cfg.level_shape(i + 1);
                assert_eq!(t.shape(), [2, s[0], s[1], s[2]]);
            }
            for (t, b) in tilde.iter().zip(&branch) {
                assert_eq!(t.shape(), b.shape());
            }
            assert_eq!(w.shape(), [2, 8, 5]);
        }
        let ife = Ife::new(toy(), 1).unwrap();
        assert!(ife.run(&input(1, 8)).is_err());
    }

    #[test]
    fn toy_default_latent_shape() {
        let cfg = IfeConfig {
            input_res: 32,
            base_res: 4,
            level_channels: vec![8, 8, 4],
            top_channels: 4,
            dense_layers: 1,
            growth: 2,
            latent_conv_channels: 2,
            n_latents: 10,
            latent_dim: 128,
        };
        let ife = Ife::new(cfg, 0).unwrap();
        let (_, _, w) = ife.run(&input(0, 32)).unwrap();
        assert_eq!(&w.shape()[1..], [10, 128]);
    }

    fn zero_biases(ife: &mut Ife) {
        let names: Vec<_> = ife.params().names().to_vec();
        for (n, t) in names.iter().zip(ife.params_mut().tensors_mut()) {
            if n.ends_with(".bias") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_features_and_codes() {
        let mut ife = Ife::new(toy(), 4).unwrap();
        zero_biases(&mut ife);
        let (tilde, branch, w) = ife.run(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(tilde.iter().chain(&branch).all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_perturbation_stays_in_receptive_field() {
        let mut ife = Ife::new(toy(), 5).unwrap();
        zero_biases(&mut ife);
        let x = input(6, 16);
        let mut y = x.clone();
        y.data_mut()[0] += 1.0;
        let (a, ..) = ife.run(&x).unwrap();
        let (b, ..) = ife.run(&y).unwrap();
        let (ey, ex) = ife.corner_influence();
        // Independent trace: dense 3x3 layers each spread one pixel; then
        // 16 -> 16 (stride 1), 16 -> 8, 8 -> 4 stride-2 convs with pad 1.
        let mut e = 2usize;
        for s in [1usize, 2, 2] {
            e = (e + 1) / s;
        }
        assert_eq!((ey, ex), (e, e));
        let (_, c, h, w) = a[0].dims4();
        let mut changed_inside = false;
        for bc in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let idx = (bc * h + yy) * w + xx;
                    let d = (a[0].data()[idx] - b[0].data()[idx]).abs();
                    if yy > e || xx > e {
                        assert_eq!(d, 0.0, "change outside field at {yy},{xx}");
                    } else if d > 0.0 {
                        changed_inside = true;
                    }
                }
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn identity_branch_is_passthrough() {
        let mut ife = Ife::new(toy(), 7).unwrap();
        let conv = ife.branch_conv(2).unwrap();
        let c = conv.cin;
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for o in 0..c {
            k.data_mut()[(o * c + o) * 9 + 4] = 1.0;
        }
        *ife.params_mut().get_mut(conv.w) = k;
        *ife.params_mut().get_mut(conv.b.unwrap()) = Tensor::zeros(&[c]);
        let (tilde, branch, _) = ife.run(&input(8, 16)).unwrap();
        assert_eq!(tilde[1], branch[1]);
        let mut g = Graph::new();
        let p = ife.params().bind(&mut g, false);
        let t = g.constant(tilde[1].clone());
        assert!(ife.branch_features(&mut g, &p, t, 9).is_err());
    }

    #[test]
    fn branch_weight_gradient_matches_finite_differences() {
        let ife = Ife::new(toy(), 9).unwrap();
        let conv = ife.branch_conv(1).unwrap();
        let x = Tensor::randn(&[1, 6, 4, 4], 1.0, &mut rng::rng(10));
        let loss_at = |w: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(w.clone());
            let b = g.constant(ife.params().get(conv.b.unwrap()).clone());
            let y = g.conv2d(xv, wv, Some(b), 1, 1).unwrap();
            let y = g.square(y);
            let l = g.sum(y);
            (g.value(l).item(), g.backward(l).unwrap().get(wv).unwrap().clone())
        };
        let w0 = ife.params().get(conv.w).clone();
        let (_, grad) = loss_at(&w0);
        let h = 1e-5;
        for idx in [0, 17, 100, w0.len() - 1] {
            let mut wp = w0.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w0.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss_at(&wp).0 - loss_at(&wm).0) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn noise_changes_codes() {
        let ife = Ife::new(toy(), 11).unwrap();
        let x = input(12, 16);
        let noisy = x.zip_map(&Tensor::randn(x.shape(), 25.0 / 127.5, &mut rng::rng(13)), |a, b| a + b).unwrap();
        let (_, _, a) = ife.run(&x).unwrap();
        let (_, _, b) = ife.run(&noisy).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut kv = Kv::new();
        toy().to_kv(&mut kv, "ife.");
        assert_eq!(IfeConfig::from_kv(&kv, "ife.").unwrap(), toy());
    }
}
