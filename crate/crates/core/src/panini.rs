//! Full restoration model: degradation representation, image features and
//! latent codes, the GAN prior with fused early blocks, plus fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::dafi::{self, CatConv, FusionHead, InterpolationMask, Source, MASK_EPS};
use crate::degrade::{self, Codec, ParamSampler};
use crate::drep::{Dre, EpochCursor, ImageSource, TrainLog, DR_DIM};
use crate::error::{invalid_arg, Error, Result};
use crate::gpm::{adversarial_loss_vars, Discriminator, Generator, GeneratorConfig};
use crate::graph::{Graph, Var};
use crate::ife::{Ife, IfeConfig};
use crate::imaging;
use crate::kv::Kv;
use crate::nn::{cosine_lr, Adam, Bound, Conv2d, ParamId, ParamStore, LEAKY_SLOPE};
use crate::rng::{self, derive_seed, stream};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Blind restoration conditioned on the frozen representation encoder.
    Restoration,
    /// Fixed-factor super-resolution with a learned constant condition.
    Sr,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restoration" => Ok(Mode::Restoration),
            "sr" => Ok(Mode::Sr),
            o => Err(invalid_arg!("unknown mode `{}` (restoration or sr)", o)),
        }
    }
}

impl core::fmt::Display for Mode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Mode::Restoration => "restoration",
            Mode::Sr => "sr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Dafi,
    CatConv,
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dafi" => Ok(FusionKind::Dafi),
            "cat-conv" => Ok(FusionKind::CatConv),
            o => Err(invalid_arg!("unknown fusion `{}` (dafi or cat-conv)", o)),
        }
    }
}

impl core::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            FusionKind::Dafi => "dafi",
            FusionKind::CatConv => "cat-conv",
        })
    }
}

/// Which fused features feed the following block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dissect {
    Full,
    GpbOnly,
    IfeOnly,
}

impl FromStr for Dissect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Dissect::Full),
            "gpb" | "gpb_only" => Ok(Dissect::GpbOnly),
            "ife" | "ife_only" => Ok(Dissect::IfeOnly),
            o => Err(invalid_arg!("unknown dissection mode `{}` (full, gpb_only, ife_only)", o)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, perceptual: 1.0, adversarial: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.l1, self.perceptual, self.adversarial];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|v| *v == 0.0) {
            return Err(invalid_arg!("loss weights must be nonnegative with at least one positive: {:?}", self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaniniConfig {
    pub mode: Mode,
    pub fusion: FusionKind,
    pub generator: GeneratorConfig,
    pub ife: IfeConfig,
    /// Hidden widths of each fusion MLP.
    pub dafi_hidden: Vec<usize>,
    pub cat_conv_kernel: usize,
}

impl PaniniConfig {
    /// Builds a consistent configuration around a generator.
    pub fn new(mode: Mode, fusion: FusionKind, generator: GeneratorConfig, input_res: usize) -> Self {
        let n = generator.n_fused;
        let ife = IfeConfig {
            input_res,
            base_res: generator.base_res,
            level_channels: generator.channels[..n].to_vec(),
            top_channels: generator.channels[n - 1],
            dense_layers: 4,
            growth: 16,
            latent_conv_channels: generator.channels[0].min(32),
            n_latents: generator.n_latents(),
            latent_dim: generator.latent_dim,
        };
        Self { mode, fusion, generator, ife, dafi_hidden: vec![64, 64], cat_conv_kernel: 3 }
    }

    /// The toy restoration default: 32 px in, 64 px out.
    pub fn toy() -> Self {
        Self::new(Mode::Restoration, FusionKind::Dafi, GeneratorConfig::default(), 32)
    }

    pub fn input_res(&self) -> usize {
        self.ife.input_res
    }

    pub fn output_res(&self) -> usize {
        self.generator.output_res()
    }

    /// Checks that every fused image-feature level lines up with its block.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.ife.validate()?;
        let gen = &self.generator;
        if self.ife.n_fused() != gen.n_fused {
            return Err(invalid_arg!("ife has {} fused levels, generator {}", self.ife.n_fused(), gen.n_fused));
        }
        for i in 1..=gen.n_fused {
            if self.ife.level_shape(i) != gen.block_shape(i) {
                return Err(invalid_arg!(
                    "level {} shape {:?} does not match generator block {:?}",
                    i,
                    self.ife.level_shape(i),
                    gen.block_shape(i)
                ));
            }
        }
        if self.ife.n_latents != gen.n_latents() || self.ife.latent_dim != gen.latent_dim {
            return Err(invalid_arg!("latent encoder shape does not match the generator"));
        }
        if self.cat_conv_kernel % 2 == 0 {
            return Err(invalid_arg!("cat-conv kernel must be odd"));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut Kv) {
        kv.set("model.mode", self.mode);
        kv.set("model.fusion", self.fusion);
        kv.set_list("model.dafi_hidden", &self.dafi_hidden);
        kv.set("model.cat_conv_kernel", self.cat_conv_kernel);
        self.generator.to_kv(kv, "generator.");
        self.ife.to_kv(kv, "ife.");
    }

    pub fn from_kv(kv: &Kv) -> Result<Self> {
        let c = Self {
            mode: kv.get_or("model.mode", Mode::Restoration)?,
            fusion: kv.get_or("model.fusion", FusionKind::Dafi)?,
            dafi_hidden: kv.get_list_or("model.dafi_hidden", vec![64, 64])?,
            cat_conv_kernel: kv.get_or("model.cat_conv_kernel", 3)?,
            generator: GeneratorConfig::from_kv(kv, "generator.")?,
            ife: IfeConfig::from_kv(kv, "ife.")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Scalars of the fusion head at fused level `i`.
    pub fn fusion_head_params(&self, i: usize) -> usize {
        let c = self.generator.channels[i - 1];
        match self.fusion {
            FusionKind::Dafi => dafi::dafi_head_param_count(DR_DIM, &self.dafi_hidden, c),
            FusionKind::CatConv => dafi::cat_conv_param_count(c, self.cat_conv_kernel),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FusionHeads {
    Dafi(Vec<FusionHead>),
    CatConv(Vec<CatConv>),
}

/// What the block after fused level `i` consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Fused,
    Raw,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub dissect: Option<Dissect>,
    /// `(level, bias)` edits applied to the masks.
    pub mask_bias: Vec<(usize, f64)>,
    /// Replaces every mask with a constant, bypassing the heads.
    pub mask_override: Option<f64>,
    pub noise_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn dissect(mode: Dissect) -> Self {
        Self { dissect: Some(mode), ..Self::default() }
    }

    pub fn with_bias(levels: &[usize], bias: f64) -> Self {
        Self { mask_bias: levels.iter().map(|&l| (l, bias)).collect(), ..Self::default() }
    }
}

pub struct ForwardOutput {
    pub image: Var,
    /// Prior-side masks `B x C` per fused level (DAFI only).
    pub masks: Vec<Var>,
    /// One entry per block transition `i -> i + 1`.
    pub routing: Vec<Route>,
}

pub struct Bindings {
    pub generator: Bound,
    pub ife: Bound,
    pub fusion: Bound,
}

/// Network output for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    /// `B x 3 x R x R` in `[-1, 1]`.
    pub image: Tensor,
    pub masks: Vec<Tensor>,
    pub routing: Vec<Route>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaniniModel {
    config: PaniniConfig,
    generator: Generator,
    ife: Ife,
    fusion_params: ParamStore,
    fusion: FusionHeads,
    sr_vector: Option<ParamId>,
    dre: Option<Dre>,
}

impl PaniniModel {
    /// Fresh model; restoration mode needs the (pretrained) encoder.
    pub fn new(config: PaniniConfig, generator: Generator, dre: Option<Dre>, seed: u64) -> Result<Self> {
        config.validate()?;
        if generator.config() != &config.generator {
            return Err(Error::Incompatible("generator checkpoint does not match the model configuration".into()));
        }
        match (config.mode, &dre) {
            (Mode::Restoration, None) => return Err(invalid_arg!("restoration mode needs a representation encoder")),
            (Mode::Sr, Some(_)) => return Err(invalid_arg!("sr mode does not use a representation encoder")),
            (Mode::Restoration, Some(d)) if d.config().input_res != config.input_res() => {
                return Err(Error::Incompatible(format!(
                    "encoder resolution {} differs from model input {}",
                    d.config().input_res,
                    config.input_res()
                )))
            }
            _ => {}
        }
        let ife = Ife::new(config.ife.clone(), derive_seed(seed, 1))?;
        let mut r = rng::rng(derive_seed(seed, stream::INIT));
        let mut fusion_params = ParamStore::new();
        let n = config.generator.n_fused;
        let fusion = match config.fusion {
            FusionKind::Dafi => FusionHeads::Dafi(
                (1..=n)
                    .map(|i| {
                        let c = config.generator.channels[i - 1];
                        FusionHead::new(&mut fusion_params, &format!("dafi{i}"), DR_DIM, &config.dafi_hidden, c, &mut r)
                    })
                    .collect(),
            ),
            FusionKind::CatConv => FusionHeads::CatConv(
                (1..=n)
                    .map(|i| {
                        let c = config.generator.channels[i - 1];
                        CatConv::new(&mut fusion_params, &format!("catconv{i}"), c, config.cat_conv_kernel, &mut r)
                    })
                    .collect(),
            ),
        };
        let sr_vector = (config.mode == Mode::Sr).then(|| {
            let v = Tensor::randn(&[1, DR_DIM], 1.0, &mut r);
            let n = v.l2_norm();
            fusion_params.add("sr_condition", v.scale(1.0 / n))
        });
        Ok(Self { config, generator, ife, fusion_params, fusion, sr_vector, dre })
    }

    pub fn config(&self) -> &PaniniConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn ife(&self) -> &Ife {
        &self.ife
    }

    pub fn ife_mut(&mut self) -> &mut Ife {
        &mut self.ife
    }

    pub fn fusion_params(&self) -> &ParamStore {
        &self.fusion_params
    }

    pub fn fusion_params_mut(&mut self) -> &mut ParamStore {
        &mut self.fusion_params
    }

    pub fn dre(&self) -> Option<&Dre> {
        self.dre.as_ref()
    }

    /// DAFI heads, or `None` for the concatenation baseline.
    pub fn fusion_heads(&self) -> Option<&[FusionHead]> {
        match &self.fusion {
            FusionHeads::Dafi(h) => Some(h),
            FusionHeads::CatConv(_) => None,
        }
    }

    pub fn sr_vector(&self) -> Option<ParamId> {
        self.sr_vector
    }

    /// Scalars in the per-level fusion heads (excluding the sr condition).
    pub fn fusion_head_scalars(&self) -> usize {
        match &self.fusion {
            FusionHeads::Dafi(h) => h.iter().map(FusionHead::num_scalars).sum(),
            FusionHeads::CatConv(h) => h.iter().map(|c| c.conv.num_scalars()).sum(),
        }
    }

    pub fn bind(&self, g: &mut Graph, train_generator: bool, train_rest: bool) -> Bindings {
        Bindings {
            generator: self.generator.params().bind(g, train_generator),
            ife: self.ife.params().bind(g, train_rest),
            fusion: self.fusion_params.bind(g, train_rest),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let r = self.config.input_res();
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(invalid_arg!("model expects B x 3 x {} x {} inputs, got {:?}", r, r, s));
        }
        Ok(s[0])
    }

    /// Condition vectors `B x 256` for inputs in `[-1, 1]`.
    fn condition(&self, g: &mut Graph, b: &Bindings, x: &Tensor) -> Result<Var> {
        let batch = x.shape()[0];
        match (self.config.mode, &self.dre, self.sr_vector) {
            (Mode::Restoration, Some(dre), _) => {
                let v = dre.encode_batch(x)?;
                Ok(g.constant(v))
            }
            (Mode::Sr, _, Some(id)) => g.broadcast_batch(b.fusion.var(id), batch),
            _ => Err(Error::InvalidState("model mode and condition source disagree".into())),
        }
    }

    /// Full graph: `x: B x 3 x R_in x R_in` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let batch = self.check_input(x)?;
        let dafi_only = opts.dissect.is_some_and(|d| d != Dissect::Full) || !opts.mask_bias.is_empty() || opts.mask_override.is_some();
        if dafi_only && matches!(self.fusion, FusionHeads::CatConv(_)) {
            return Err(invalid_arg!("mask dissection and editing need dafi fusion"));
        }
        let n_fused = self.config.generator.n_fused;
        if let Some((l, _)) = opts.mask_bias.iter().find(|(l, _)| *l == 0 || *l > n_fused) {
            return Err(invalid_arg!("mask edit level {} outside 1..={}", l, n_fused));
        }
        if let Some(m) = opts.mask_override {
            if !(0.0..=1.0).contains(&m) {
                return Err(invalid_arg!("mask override {} outside [0, 1]", m));
            }
        }
        let xv = g.constant(x.clone());
        let (pyramid, w_plus) = self.ife.forward(g, &b.ife, xv)?;
        let cond = match self.fusion {
            FusionHeads::Dafi(_) if opts.mask_override.is_none() => Some(self.condition(g, b, x)?),
            _ => None,
        };
        let mut masks = Vec::new();
        let mut routing = Vec::new();
        let dissect = opts.dissect.unwrap_or(Dissect::Full);
        let image = self.generator.forward_with(g, &b.generator, w_plus, opts.noise_seed, |g, i, gpb| {
            if i > n_fused {
                routing.push(Route::Raw);
                return Ok(gpb);
            }
            routing.push(Route::Fused);
            let ife = pyramid.branch[i - 1];
            match &self.fusion {
                FusionHeads::CatConv(heads) => heads[i - 1].fuse(g, &b.fusion, gpb, ife),
                FusionHeads::Dafi(heads) => {
                    let mut m = match (opts.mask_override, cond) {
                        (Some(v), _) => g.constant(Tensor::full(&[batch, heads[i - 1].channels], v)),
                        (None, Some(c)) => heads[i - 1].mask(g, &b.fusion, c)?,
                        (None, None) => unreachable!("condition computed whenever heads are used"),
                    };
                    for &(_, bias) in opts.mask_bias.iter().filter(|(l, _)| *l == i) {
                        if bias != 0.0 {
                            m = g.bias_clamp(m, bias, MASK_EPS);
                        }
                    }
                    masks.push(m);
                    match dissect {
                        Dissect::Full => dafi::interpolate_var(g, gpb, ife, m),
                        Dissect::GpbOnly => dafi::masked_single_source_var(g, gpb, m, Source::Gpb),
                        Dissect::IfeOnly => dafi::masked_single_source_var(g, ife, m, Source::Ife),
                    }
                }
            }
        })?;
        Ok(ForwardOutput { image, masks, routing })
    }

    pub fn run(&self, x: &Tensor, opts: &ForwardOptions) -> Result<Restoration> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false);
        let out = self.forward(&mut g, &b, x, opts)?;
        Ok(Restoration {
            image: g.value(out.image).clone(),
            masks: out.masks.iter().map(|&m| g.value(m).clone()).collect(),
            routing: out.routing,
        })
    }

    /// Restores network-scale inputs `B x 3 x R_in x R_in`.
    pub fn restore(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, &ForwardOptions::default())?.image)
    }

    pub fn restore_dissected(&self, x: &Tensor, mode: Dissect) -> Result<Tensor> {
        Ok(self.run(x, &ForwardOptions::dissect(mode))?.image)
    }

    /// Restores one `[0, 255]` image of any size (resized to the input resolution).
    pub fn restore_image(&self, lq: &FeatureMap, opts: &ForwardOptions) -> Result<(FeatureMap, Vec<InterpolationMask>)> {
        let x = Tensor::stack(&[imaging::network_input(lq, self.config.input_res())])?;
        let out = self.run(&x, opts)?;
        let img = imaging::to_pixel_range(&out.image.batch_item(0));
        let masks = out
            .masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let w: Vec<f64> = m.row(0).iter().map(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)).collect();
                InterpolationMask::new(i + 1, w)
            })
            .collect::<Result<_>>()?;
        Ok((img, masks))
    }
}

/// Fixed random convolutional feature stack for the perceptual loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    params: ParamStore,
    convs: Vec<Conv2d>,
    /// 1-based conv indices whose activations enter the loss.
    taps: Vec<usize>,
}

pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl PerceptualExtractor {
    /// Five 3x3 convs (16, 16, 32, 32, 64 wide; the 3rd and 5th stride 2).
    pub fn new(seed: u64) -> Self {
        let mut r = rng::rng(derive_seed(seed, stream::EXTRACTOR));
        let mut params = ParamStore::new();
        let spec = [(3, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(j, &(i, o, s))| Conv2d::new(&mut params, &format!("feat{j}"), i, o, 3, s, true, &mut r))
            .collect();
        Self { params, convs, taps: vec![2, 4, 5] }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Activations at each tap.
    pub fn features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        let mut h = x;
        for (j, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if self.taps.contains(&(j + 1)) {
                out.push(h);
            }
        }
        Ok(out)
    }

    /// Sum over taps of the mean squared feature difference.
    pub fn loss(&self, g: &mut Graph, p: &Bound, y: Var, target: Var) -> Result<Var> {
        let fy = self.features(g, p, y)?;
        let ft = self.features(g, p, target)?;
        let mut total: Option<Var> = None;
        for (a, b) in fy.into_iter().zip(ft) {
            let d = g.sub(a, b)?;
            let d = g.square(d);
            let m = g.mean(d);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
        total.ok_or_else(|| invalid_arg!("extractor has no taps"))
    }
}

/// Perceptual distance between two image batches.
pub fn perceptual_loss(y: &Tensor, hq: &Tensor, extractor: &PerceptualExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let p = extractor.params.bind(&mut g, false);
    let yv = g.constant(y.clone());
    let hv = g.constant(hq.clone());
    let l = extractor.loss(&mut g, &p, yv, hv)?;
    Ok(g.value(l).item())
}

/// `(g_loss, d_loss)` batch means from discriminator logits.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> (f64, f64) {
    let mut g = Graph::new();
    let r = g.constant(d_real.clone());
    let f = g.constant(d_fake.clone());
    let (gl, dl) = adversarial_loss_vars(&mut g, Some(r), f);
    (g.value(gl).item(), g.value(dl.expect("requested")).item())
}

pub fn l1_var(g: &mut Graph, y: Var, target: Var) -> Result<Var> {
    let d = g.sub(y, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// One low/high-quality training pair at network scale.
pub fn make_pair(
    hq: &FeatureMap,
    mode: Mode,
    params: &degrade::DegradationParams,
    codec: &dyn Codec,
    input_res: usize,
    output_res: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    let hq = imaging::quantize(&imaging::resize_bilinear(hq, output_res, output_res));
    let lq = match mode {
        Mode::Restoration => degrade::degrade_to_input(&hq, params, codec, input_res)?,
        Mode::Sr => imaging::resize_bilinear(&hq, input_res, input_res),
    };
    Ok((imaging::to_unit_range(&imaging::quantize(&lq)), imaging::to_unit_range(&hq)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    pub sampler: ParamSampler,
    pub freeze_gpm: bool,
    pub drift: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            lr_min: 1e-5,
            lr_d: 2e-3,
            weights: LossWeights::default(),
            sampler: ParamSampler::Ranges(degrade::ParamRanges::default()),
            freeze_gpm: false,
            drift: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    pub discriminator: f64,
}

/// Loss terms and per-store gradients (generator, ife, fusion) of one batch.
pub struct LossEval {
    pub losses: StepLosses,
    pub grads: [Vec<Tensor>; 3],
    pub output: Tensor,
}

/// Evaluates the weighted generator-side loss and its gradients.
pub fn generator_loss(
    model: &PaniniModel,
    lq: &Tensor,
    hq: &Tensor,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
    disc: Option<&Discriminator>,
    train_generator: bool,
) -> Result<LossEval> {
    weights.validate()?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, train_generator, true);
    let out = model.forward(&mut g, &b, lq, &ForwardOptions::default())?;
    let y = out.image;
    let target = g.constant(hq.clone());
    let mut losses = StepLosses::default();
    let mut terms = Vec::new();
    if weights.l1 > 0.0 {
        let l = l1_var(&mut g, y, target)?;
        losses.l1 = g.value(l).item();
        terms.push(g.affine(l, weights.l1, 0.0));
    }
    if weights.perceptual > 0.0 {
        let ep = extractor.params.bind(&mut g, false);
        let l = extractor.loss(&mut g, &ep, y, target)?;
        losses.perceptual = g.value(l).item();
        terms.push(g.affine(l, weights.perceptual, 0.0));
    }
    if weights.adversarial > 0.0 {
        let d = disc.ok_or_else(|| invalid_arg!("adversarial weight set but no discriminator"))?;
        let dp = d.params().bind(&mut g, false);
        let logits = d.forward(&mut g, &dp, y)?;
        let (l, _) = adversarial_loss_vars(&mut g, None, logits);
        losses.adversarial = g.value(l).item();
        terms.push(g.affine(l, weights.adversarial, 0.0));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    losses.total = g.value(total).item();
    if !losses.total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {:?}", losses)));
    }
    let grads = g.backward(total)?;
    Ok(LossEval {
        losses,
        grads: [
            model.generator.params().collect_grads(&grads, &b.generator),
            model.ife.params().collect_grads(&grads, &b.ife),
            model.fusion_params.collect_grads(&grads, &b.fusion),
        ],
        output: g.value(y).clone(),
    })
}

/// Per-term loss history of a fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FineTuneLog {
    pub total: TrainLog,
    pub l1: TrainLog,
    pub perceptual: TrainLog,
    pub adversarial: TrainLog,
    pub discriminator: TrainLog,
}

pub struct PaniniTrainer {
    pub config: TrainConfig,
    pub model: PaniniModel,
    pub discriminator: Discriminator,
    pub extractor: PerceptualExtractor,
    opts: [Adam; 3],
    opt_d: Adam,
    cursor: EpochCursor,
    step: usize,
    pub log: FineTuneLog,
}

impl PaniniTrainer {
    pub fn new(
        config: TrainConfig,
        model: PaniniModel,
        discriminator: Discriminator,
        extractor: PerceptualExtractor,
        dataset_len: usize,
    ) -> Result<Self> {
        config.weights.validate()?;
        if config.batch == 0 {
            return Err(invalid_arg!("batch must be positive"));
        }
        if discriminator.config().res != model.config().output_res() {
            return Err(Error::Incompatible("discriminator resolution differs from model output".into()));
        }
        let opts = [
            Adam::new(model.generator.params(), 0.9, 0.99),
            Adam::new(model.ife.params(), 0.9, 0.99),
            Adam::new(&model.fusion_params, 0.9, 0.99),
        ];
        let opt_d = Adam::new(discriminator.params(), 0.0, 0.99);
        let cursor = EpochCursor::new(dataset_len, derive_seed(config.seed, stream::DATA))?;
        Ok(Self { config, model, discriminator, extractor, opts, opt_d, cursor, step: 0, log: FineTuneLog::default() })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Next `(lq, hq)` batch at network scale.
    pub fn batch(&mut self, data: &dyn ImageSource, codec: &dyn Codec) -> Result<(Tensor, Tensor)> {
        let cfg = self.model.config();
        let (ri, ro, mode) = (cfg.input_res(), cfg.output_res(), cfg.mode);
        let mut lqs = Vec::with_capacity(self.config.batch);
        let mut hqs = Vec::with_capacity(self.config.batch);
        for k in 0..self.config.batch {
            let img = data.image(self.cursor.next_index())?;
            let seed = derive_seed(self.config.seed, (stream::PARAMS << 32) ^ ((self.step as u64) << 12) ^ k as u64);
            let (p, _) = self.config.sampler.sample(seed)?;
            let (lq, hq) = make_pair(&img, mode, &p, codec, ri, ro)?;
            lqs.push(lq);
            hqs.push(hq);
        }
        Ok((Tensor::stack(&lqs)?, Tensor::stack(&hqs)?))
    }

    pub fn step(&mut self, data: &dyn ImageSource, codec: &dyn Codec) -> Result<StepLosses> {
        let (lq, hq) = self.batch(data, codec)?;
        self.step_on(&lq, &hq)
    }

    /// One generator-side update followed by one discriminator update.
    pub fn step_on(&mut self, lq: &Tensor, hq: &Tensor) -> Result<StepLosses> {
        let w = self.config.weights;
        let eval = generator_loss(
            &self.model,
            lq,
            hq,
            &w,
            &self.extractor,
            Some(&self.discriminator),
            !self.config.freeze_gpm,
        )
        .map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("{} at step {}", m, self.step)),
            e => e,
        })?;
        let mut losses = eval.losses;
        let lr = cosine_lr(self.config.lr, self.config.lr_min, self.step, self.config.steps);
        let [gg, gi, gf] = eval.grads;
        if !self.config.freeze_gpm {
            self.opts[0].step(self.model.generator.params_mut(), &gg, lr)?;
        }
        self.opts[1].step(self.model.ife.params_mut(), &gi, lr)?;
        self.opts[2].step(&mut self.model.fusion_params, &gf, lr)?;

        if w.adversarial > 0.0 {
            let mut g = Graph::new();
            let dp = self.discriminator.params().bind(&mut g, true);
            let real = g.constant(hq.clone());
            let fake = g.constant(eval.output);
            let dr = self.discriminator.forward(&mut g, &dp, real)?;
            let df = self.discriminator.forward(&mut g, &dp, fake)?;
            let (_, dl) = adversarial_loss_vars(&mut g, Some(dr), df);
            let sq = g.square(dr);
            let drift = g.mean(sq);
            let drift = g.affine(drift, self.config.drift, 0.0);
            let dl = g.add(dl.expect("requested"), drift)?;
            losses.discriminator = g.value(dl).item();
            if !losses.discriminator.is_finite() {
                return Err(Error::Divergence(format!("discriminator loss at step {}", self.step)));
            }
            let grads = g.backward(dl)?;
            let gd = self.discriminator.params().collect_grads(&grads, &dp);
            let lr_d = cosine_lr(self.config.lr_d, self.config.lr_min, self.step, self.config.steps);
            self.opt_d.step(self.discriminator.params_mut(), &gd, lr_d)?;
        }
        let s = self.step;
        self.log.total.entries.push((s, losses.total));
        self.log.l1.entries.push((s, losses.l1));
        self.log.perceptual.entries.push((s, losses.perceptual));
        self.log.adversarial.entries.push((s, losses.adversarial));
        self.log.discriminator.entries.push((s, losses.discriminator));
        self.step += 1;
        Ok(losses)
    }
}

/// Mean L1 (network scale) of restorations over `(lq, hq)` pairs.
pub fn validation_l1(model: &PaniniModel, lq: &Tensor, hq: &Tensor) -> Result<f64> {
    let y = model.restore(lq)?;
    Ok(y.zip_map(hq, |a, b| (a - b).abs())?.mean())
}

/// Usage ratio (mean prior weight) of each row of a `B x C` mask batch.
pub fn usage_ratios(mask: &Tensor) -> Vec<f64> {
    let (_, c) = mask.dims2();
    mask.data().chunks(c).map(|r| r.iter().sum::<f64>() / c as f64).collect()
}

/// Short description for logs.
pub fn describe(config: &PaniniConfig) -> String {
    format!(
        "{} mode, {} fusion, {} -> {} px, {} blocks ({} fused)",
        config.mode,
        config.fusion,
        config.input_res(),
        config.output_res(),
        config.generator.n_blocks,
        config.generator.n_fused
    )
}
