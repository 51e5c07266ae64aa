//! GAN prior: a small progressive style-modulated generator with a learned
//! constant input, its discriminator, and adversarial pretraining.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::drep::{EpochCursor, ImageSource, TrainLog};
use crate::error::{invalid_arg, Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging;
use crate::kv::Kv;
use crate::nn::{cosine_lr, Adam, Bound, Conv2d, Linear, ModulatedConv, ParamId, ParamStore, LEAKY_SLOPE};
use crate::rng::{self, derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_blocks: usize,
    pub n_fused: usize,
    pub base_res: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub rows_per_block: usize,
    pub mapping_layers: usize,
    /// Per-pixel noise injection with learned per-channel strengths.
    pub noise: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 5,
            n_fused: 3,
            base_res: 4,
            channels: vec![128, 128, 64, 64, 32],
            latent_dim: 128,
            rows_per_block: 2,
            mapping_layers: 2,
            noise: false,
        }
    }
}

impl GeneratorConfig {
    pub fn n_latents(&self) -> usize {
        self.n_blocks * self.rows_per_block
    }

    pub fn output_res(&self) -> usize {
        self.base_res << (self.n_blocks - 1)
    }

    /// `C x H x W` of block `i` (1-based).
    pub fn block_shape(&self, i: usize) -> [usize; 3] {
        let r = self.base_res << (i - 1);
        [self.channels[i - 1], r, r]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.channels.len() != self.n_blocks || self.channels.contains(&0) {
            return Err(invalid_arg!("generator: need one positive channel count per block"));
        }
        if self.n_fused == 0 || self.n_fused >= self.n_blocks {
            return Err(invalid_arg!("generator: n_fused {} must lie in 1..{}", self.n_fused, self.n_blocks));
        }
        if self.base_res == 0 || self.latent_dim == 0 || self.rows_per_block == 0 {
            return Err(invalid_arg!("generator: degenerate configuration"));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut Kv, prefix: &str) {
        kv.set(&format!("{prefix}n_blocks"), self.n_blocks);
        kv.set(&format!("{prefix}n_fused"), self.n_fused);
        kv.set(&format!("{prefix}base_res"), self.base_res);
        kv.set_list(&format!("{prefix}channels"), &self.channels);
        kv.set(&format!("{prefix}latent_dim"), self.latent_dim);
        kv.set(&format!("{prefix}rows_per_block"), self.rows_per_block);
        kv.set(&format!("{prefix}mapping_layers"), self.mapping_layers);
        kv.set(&format!("{prefix}noise"), self.noise);
    }

    pub fn from_kv(kv: &Kv, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let k = |s: &str| format!("{prefix}{s}");
        let c = Self {
            n_blocks: kv.get_or(&k("n_blocks"), d.n_blocks)?,
            n_fused: kv.get_or(&k("n_fused"), d.n_fused)?,
            base_res: kv.get_or(&k("base_res"), d.base_res)?,
            channels: kv.get_list_or(&k("channels"), d.channels)?,
            latent_dim: kv.get_or(&k("latent_dim"), d.latent_dim)?,
            rows_per_block: kv.get_or(&k("rows_per_block"), d.rows_per_block)?,
            mapping_layers: kv.get_or(&k("mapping_layers"), d.mapping_layers)?,
            noise: kv.get_or(&k("noise"), d.noise)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    convs: [ModulatedConv; 2],
    noise_strength: Option<[ParamId; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    constant: ParamId,
    blocks: Vec<Block>,
    to_rgb: Vec<Conv2d>,
    mapping: Vec<Linear>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(derive_seed(seed, stream::INIT));
        let mut params = ParamStore::new();
        let b = config.base_res;
        let c1 = config.channels[0];
        let constant = params.add("const", Tensor::randn(&[1, c1, b, b], 1.0, &mut r));
        let mut blocks = Vec::new();
        let mut to_rgb = Vec::new();
        let mut cin = c1;
        for (i, &c) in config.channels.iter().enumerate() {
            let a = ModulatedConv::new(&mut params, &format!("block{}.conv0", i + 1), cin, c, 3, config.latent_dim, &mut r);
            let bconv = ModulatedConv::new(&mut params, &format!("block{}.conv1", i + 1), c, c, 3, config.latent_dim, &mut r);
            let noise_strength = config.noise.then(|| {
                [
                    params.add(&format!("block{}.noise0", i + 1), Tensor::zeros(&[1, c])),
                    params.add(&format!("block{}.noise1", i + 1), Tensor::zeros(&[1, c])),
                ]
            });
            blocks.push(Block { convs: [a, bconv], noise_strength });
            to_rgb.push(Conv2d::new(&mut params, &format!("block{}.to_rgb", i + 1), c, 3, 1, 1, true, &mut r));
            cin = c;
        }
        let mapping = (0..config.mapping_layers)
            .map(|j| Linear::new(&mut params, &format!("mapping{j}"), config.latent_dim, config.latent_dim, true, &mut r))
            .collect();
        Ok(Self { config, params, constant, blocks, to_rgb, mapping })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The learned constant input `1 x C1 x base x base`.
    pub fn constant_id(&self) -> ParamId {
        self.constant
    }

    /// Modulated convolutions of block `i`, for test rigs.
    pub fn block_convs(&self, i: usize) -> Result<[ModulatedConv; 2]> {
        self.blocks.get(i.wrapping_sub(1)).map(|b| b.convs).ok_or_else(|| invalid_arg!("no block {}", i))
    }

    fn latent_row(&self, g: &mut Graph, w_plus: Var, row: usize) -> Result<Var> {
        let s = g.value(w_plus).shape().to_vec();
        let d = self.config.latent_dim;
        let flat = g.reshape(w_plus, &[s[0], s[1] * d])?;
        g.slice_cols(flat, row * d, d)
    }

    fn check_latents(&self, g: &Graph, w_plus: Var) -> Result<usize> {
        let s = g.value(w_plus).shape();
        if s.len() != 3 || s[1] != self.config.n_latents() || s[2] != self.config.latent_dim {
            return Err(invalid_arg!(
                "latent codes must be B x {} x {}, got {:?}",
                self.config.n_latents(),
                self.config.latent_dim,
                s
            ));
        }
        Ok(s[0])
    }

    /// Block `i` (1-based). Block 1 ignores `input` and starts from the learned
    /// constant; later blocks upsample `input` 2x first.
    pub fn forward_block(
        &self,
        g: &mut Graph,
        p: &Bound,
        i: usize,
        input: Option<Var>,
        w_plus: Var,
        noise_seed: Option<u64>,
    ) -> Result<Var> {
        if i == 0 || i > self.config.n_blocks {
            return Err(invalid_arg!("block index {} out of 1..={}", i, self.config.n_blocks));
        }
        let batch = self.check_latents(g, w_plus)?;
        let block = &self.blocks[i - 1];
        let mut h = if i == 1 {
            g.broadcast_batch(p.var(self.constant), batch)?
        } else {
            let x = input.ok_or_else(|| invalid_arg!("block {} needs an input", i))?;
            let expect = self.config.block_shape(i - 1);
            let s = g.value(x).shape();
            if s.len() != 4 || s[0] != batch || s[1..] != expect {
                return Err(invalid_arg!("block {} expects B x {:?}, got {:?}", i, expect, s));
            }
            g.upsample_nearest2x(x)
        };
        for (j, conv) in block.convs.iter().enumerate() {
            let row = self.latent_row(g, w_plus, (i - 1) * self.config.rows_per_block + j.min(self.config.rows_per_block - 1))?;
            h = conv.forward(g, p, h, row)?;
            if let (Some(ids), Some(seed)) = (block.noise_strength, noise_seed) {
                h = self.inject_noise(g, p, h, ids[j], derive_seed(seed, (i * 2 + j) as u64))?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    fn inject_noise(&self, g: &mut Graph, p: &Bound, h: Var, strength: ParamId, seed: u64) -> Result<Var> {
        let (b, c, hh, ww) = g.value(h).dims4();
        let plane = Tensor::randn(&[b, hh * ww], 1.0, &mut rng::rng(seed));
        let mut data = Vec::with_capacity(b * c * hh * ww);
        for bi in 0..b {
            for _ in 0..c {
                data.extend_from_slice(plane.row(bi));
            }
        }
        let noise = g.constant(Tensor::from_vec(&[b, c, hh, ww], data)?);
        let s = g.broadcast_batch(p.var(strength), b)?;
        let scaled = g.scale_channels(noise, s)?;
        g.add(h, scaled)
    }

    /// Runs every block. After each block except the last, `hook(g, i, out)`
    /// returns the features the next block consumes. Every block adds its
    /// RGB projection to the bilinearly upsampled image of the blocks below.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        w_plus: Var,
        noise_seed: Option<u64>,
        mut hook: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut h = None;
        let mut image: Option<Var> = None;
        for i in 1..=self.config.n_blocks {
            let out = self.forward_block(g, p, i, h, w_plus, noise_seed)?;
            let out = if i < self.config.n_blocks { hook(g, i, out)? } else { out };
            let rgb = self.to_rgb[i - 1].forward(g, p, out)?;
            image = Some(match image {
                None => rgb,
                Some(below) => {
                    let up = g.upsample_bilinear2x(below);
                    g.add(up, rgb)?
                }
            });
            h = Some(out);
        }
        Ok(g.tanh(image.expect("at least one block")))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, w_plus: Var, noise_seed: Option<u64>) -> Result<Var> {
        self.forward_with(g, p, w_plus, noise_seed, |_, _, x| Ok(x))
    }

    /// Image `B x 3 x R x R` for latent codes `B x n_latents x latent_dim`.
    pub fn generate(&self, w_plus: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let w = g.constant(w_plus.clone());
        let y = self.forward(&mut g, &p, w, None)?;
        Ok(g.value(y).clone())
    }

    /// Mapping network `z -> w`, repeated into every latent row.
    pub fn map_latents(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let (b, d) = g.value(z).dims2();
        let mut h = z;
        for layer in &self.mapping {
            h = layer.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = g.reshape(h, &[b, 1, d])?;
        let rows = vec![h; self.config.n_latents()];
        g.concat_axis1(&rows)
    }

    /// Standard normal `B x latent_dim` draws.
    pub fn sample_z(&self, batch: usize, seed: u64) -> Tensor {
        Tensor::randn(&[batch, self.config.latent_dim], 1.0, &mut rng::rng(derive_seed(seed, stream::LATENT)))
    }

    /// Random samples through the mapping network.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(self.sample_z(batch, seed));
        let w = self.map_latents(&mut g, &p, z)?;
        let y = self.forward(&mut g, &p, w, None)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub res: usize,
    /// Widths of the stem conv and each 2x-downsampling conv down to 4 x 4.
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    /// Default widths for an input resolution: doubling towards the 4 x 4 head.
    pub fn for_resolution(res: usize, base: usize) -> Self {
        let mut channels = vec![base];
        let mut r = res;
        while r > 4 {
            r /= 2;
            let last = *channels.last().unwrap();
            channels.push((last * 2).min(base * 8));
        }
        Self { res, channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.res < 4 || !self.res.is_power_of_two() {
            return Err(invalid_arg!("discriminator resolution must be a power of two >= 4"));
        }
        let downs = (self.res / 4).trailing_zeros() as usize;
        if self.channels.len() != downs + 1 || self.channels.contains(&0) {
            return Err(invalid_arg!("discriminator needs {} positive widths", downs + 1));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut Kv, prefix: &str) {
        kv.set(&format!("{prefix}res"), self.res);
        kv.set_list(&format!("{prefix}channels"), &self.channels);
    }

    pub fn from_kv(kv: &Kv, prefix: &str) -> Result<Self> {
        let res: usize = kv.get(&format!("{prefix}res"))?.ok_or_else(|| invalid_arg!("missing `{}res`", prefix))?;
        let channels = kv
            .get_list(&format!("{prefix}channels"))?
            .ok_or_else(|| invalid_arg!("missing `{}channels`", prefix))?;
        let c = Self { res, channels };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(derive_seed(seed, stream::INIT ^ 0xd15c));
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (j, &c) in config.channels.iter().enumerate() {
            let stride = if j == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(&mut params, &format!("conv{j}"), cin, c, 3, stride, true, &mut r));
            cin = c;
        }
        let head = Linear::new(&mut params, "head", cin * 16, 1, true, &mut r);
        Ok(Self { config, params, convs, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Realness logits `B x 1` for images `B x 3 x R x R`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        let r = self.config.res;
        if s.len() != 4 || s[1..] != [3, r, r] {
            return Err(invalid_arg!("discriminator expects B x 3 x {} x {}, got {:?}", r, r, s));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = g.reshape(h, &[s[0], self.head.inp])?;
        self.head.forward(g, p, h)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Non-saturating generator loss and logistic discriminator loss, batch means.
pub fn adversarial_loss_vars(g: &mut Graph, d_real: Option<Var>, d_fake: Var) -> (Var, Option<Var>) {
    let neg = g.affine(d_fake, -1.0, 0.0);
    let gl = g.softplus(neg);
    let g_loss = g.mean(gl);
    let d_loss = d_real.map(|dr| {
        let nr = g.affine(dr, -1.0, 0.0);
        let a = g.softplus(nr);
        let a = g.mean(a);
        let b = g.softplus(d_fake);
        let b = g.mean(b);
        g.add(a, b).expect("scalars")
    });
    (g_loss, d_loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpmPretrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_min: f64,
    /// Weight of the `D(real)^2` drift penalty stabilizing the discriminator.
    pub drift: f64,
    pub seed: u64,
}

impl GpmPretrainConfig {
    pub fn new(generator: GeneratorConfig) -> Self {
        let res = generator.output_res();
        Self {
            generator,
            discriminator: DiscriminatorConfig::for_resolution(res, 16),
            steps: 2000,
            batch: 8,
            lr_g: 2e-3,
            lr_d: 2e-3,
            lr_min: 1e-4,
            drift: 1e-3,
            seed: 0,
        }
    }
}

/// Per-step generator and discriminator losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GanLog {
    pub generator: TrainLog,
    pub discriminator: TrainLog,
}

pub struct GpmTrainer {
    pub config: GpmPretrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    cursor: EpochCursor,
    step: usize,
    pub log: GanLog,
}

impl GpmTrainer {
    pub fn new(config: GpmPretrainConfig, dataset_len: usize) -> Result<Self> {
        if config.batch == 0 {
            return Err(invalid_arg!("batch must be positive"));
        }
        if config.discriminator.res != config.generator.output_res() {
            return Err(invalid_arg!(
                "discriminator resolution {} differs from generator output {}",
                config.discriminator.res,
                config.generator.output_res()
            ));
        }
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), config.seed)?;
        let opt_g = Adam::new(generator.params(), 0.0, 0.99);
        let opt_d = Adam::new(discriminator.params(), 0.0, 0.99);
        let cursor = EpochCursor::new(dataset_len, derive_seed(config.seed, stream::DATA))?;
        Ok(Self { config, generator, discriminator, opt_g, opt_d, cursor, step: 0, log: GanLog::default() })
    }

    pub fn real_batch(&mut self, data: &dyn ImageSource) -> Result<Tensor> {
        let res = self.config.generator.output_res();
        let imgs = (0..self.config.batch)
            .map(|_| data.image(self.cursor.next_index()).map(|im| imaging::network_input(&im, res)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&imgs)
    }

    /// One simultaneous generator/discriminator update; returns `(g_loss, d_loss)`.
    pub fn step(&mut self, data: &dyn ImageSource) -> Result<(f64, f64)> {
        let real = self.real_batch(data)?;
        let z = self.generator.sample_z(self.config.batch, derive_seed(self.config.seed, self.step as u64));
        let mut g = Graph::new();
        let gp = self.generator.params.bind(&mut g, true);
        let dp = self.discriminator.params.bind(&mut g, true);
        let zv = g.constant(z);
        let w = self.generator.map_latents(&mut g, &gp, zv)?;
        let fake = self.generator.forward(&mut g, &gp, w, None)?;
        let d_fake_g = self.discriminator.forward(&mut g, &dp, fake)?;
        let (g_loss, _) = adversarial_loss_vars(&mut g, None, d_fake_g);

        let fake_const = g.constant(g.value(fake).clone());
        let real_v = g.constant(real);
        let d_fake = self.discriminator.forward(&mut g, &dp, fake_const)?;
        let d_real = self.discriminator.forward(&mut g, &dp, real_v)?;
        let (_, d_loss) = adversarial_loss_vars(&mut g, Some(d_real), d_fake);
        let sq = g.square(d_real);
        let drift = g.mean(sq);
        let drift = g.affine(drift, self.config.drift, 0.0);
        let d_loss = g.add(d_loss.expect("discriminator loss"), drift)?;

        let (gl, dl) = (g.value(g_loss).item(), g.value(d_loss).item());
        if !gl.is_finite() || !dl.is_finite() {
            return Err(Error::Divergence(format!("gan losses g={} d={} at step {}", gl, dl, self.step)));
        }
        let grads_g = g.backward(g_loss)?;
        let grads_d = g.backward(d_loss)?;
        let gg = self.generator.params.collect_grads(&grads_g, &gp);
        let gd = self.discriminator.params.collect_grads(&grads_d, &dp);
        let total = self.config.steps;
        self.opt_g
            .step(&mut self.generator.params, &gg, cosine_lr(self.config.lr_g, self.config.lr_min, self.step, total))?;
        self.opt_d
            .step(&mut self.discriminator.params, &gd, cosine_lr(self.config.lr_d, self.config.lr_min, self.step, total))?;
        self.log.generator.entries.push((self.step, gl));
        self.log.discriminator.entries.push((self.step, dl));
        self.step += 1;
        Ok((gl, dl))
    }
}

pub struct GpmPretrainOutput {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: GanLog,
}

pub fn pretrain_gpm(data: &dyn ImageSource, config: GpmPretrainConfig) -> Result<GpmPretrainOutput> {
    if data.is_empty() {
        return Err(invalid_arg!("dataset is empty"));
    }
    let steps = config.steps;
    let mut t = GpmTrainer::new(config, data.len())?;
    for _ in 0..steps {
        t.step(data)?;
    }
    Ok(GpmPretrainOutput { generator: t.generator, discriminator: t.discriminator, log: t.log })
}

/// Fraction of held-out real and generated images the discriminator labels correctly.
pub fn discriminator_accuracy(gen: &Generator, disc: &Discriminator, real: &Tensor, seed: u64) -> Result<f64> {
    let n = real.shape()[0];
    let fake = gen.sample(n, seed)?;
    let lr = disc.logits(real)?;
    let lf = disc.logits(&fake)?;
    let correct = lr.data().iter().filter(|&&v| v > 0.0).count() + lf.data().iter().filter(|&&v| v < 0.0).count();
    Ok(correct as f64 / (2 * n) as f64)
}

/// Mean pairwise RMS distance between samples of a `B x ...` batch.
pub fn pairwise_spread(samples: &Tensor) -> f64 {
    let items = samples.unstack();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let d = items[i].zip_map(&items[j], |a, b| (a - b) * (a - b)).expect("same shape");
            total += libm::sqrt(d.mean());
            pairs += 1;
        }
    }
    total / pairs.max(1) as f64
}
