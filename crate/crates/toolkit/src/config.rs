//! Experiment configuration files.
//!
//! A config is a list of `key = value` lines; `#` starts a comment. The line
//! `include = other.cfg` splices in another file (relative to the including
//! file) at that point, so keys after the include override it. Later keys win.
//! The global seed lives in `seed`; setting `PANINI_SEED` overrides it.

use std::path::{Path, PathBuf};

use panini_core::degrade::{DegradationParams, Interval, ParamRanges, ParamSampler};
use panini_core::drep::{DreConfig, DrePretrainConfig, NceDenominator};
use panini_core::gpm::{DiscriminatorConfig, GeneratorConfig, GpmPretrainConfig};
use panini_core::ife::IfeConfig;
use panini_core::kv::Kv;
use panini_core::panini::{FusionKind, LossWeights, Mode, PaniniConfig, TrainConfig};

use crate::error::{config_err, Result, ToolError};
use crate::io;

pub const SEED_ENV: &str = "PANINI_SEED";
const MAX_INCLUDE_DEPTH: usize = 16;

pub fn load(path: &Path) -> Result<Kv> {
    let mut kv = Kv::new();
    load_into(path, &mut kv, &mut Vec::new())?;
    Ok(kv)
}

fn load_into(path: &Path, kv: &mut Kv, stack: &mut Vec<PathBuf>) -> Result<()> {
    let canon = path.canonicalize().map_err(|e| ToolError::io(path, e))?;
    if stack.contains(&canon) {
        return Err(config_err!("include cycle through {}", path.display()));
    }
    if stack.len() >= MAX_INCLUDE_DEPTH {
        return Err(config_err!("includes nested deeper than {MAX_INCLUDE_DEPTH}"));
    }
    stack.push(canon);
    let text = io::read_text(path)?;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("{}:{}: expected `key = value`", path.display(), n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config_err!("{}:{}: empty key", path.display(), n + 1));
        }
        if k == "include" {
            let base = path.parent().unwrap_or(Path::new("."));
            load_into(&base.join(v), kv, stack)?;
        } else {
            kv.set(k, v);
        }
    }
    stack.pop();
    Ok(())
}

/// Applies `key=value` overrides given on the command line.
pub fn apply_overrides(kv: &mut Kv, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| config_err!("override `{s}` is not `key=value`"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(())
}

pub fn apply_seed_env(kv: &mut Kv) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed: u64 = v.trim().parse().map_err(|_| config_err!("{SEED_ENV}=`{v}` is not an unsigned integer"))?;
        kv.set("seed", seed);
    }
    Ok(())
}

pub fn seed(kv: &Kv) -> Result<u64> {
    Ok(kv.get_or("seed", 0)?)
}

/// Keys of `user` under `prefix` laid over the serialized defaults.
fn overlay(defaults: Kv, user: &Kv, prefix: &str) -> Kv {
    let mut out = defaults;
    for (k, v) in user.iter() {
        if k.starts_with(prefix) {
            out.set(k, v);
        }
    }
    out
}

fn interval(kv: &Kv, key: &str, default: Interval) -> Result<Interval> {
    let Some(s) = kv.get_str(key) else { return Ok(default) };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| config_err!("`{key}`: cannot parse `{t}`"));
    Ok(match s.split_once(':') {
        Some((a, b)) => Interval::new(num(a)?, num(b)?),
        None => Interval::point(num(s)?),
    })
}

fn interval_text(i: &Interval) -> String {
    if i.lo == i.hi {
        format!("{}", i.lo)
    } else {
        format!("{}:{}", i.lo, i.hi)
    }
}

/// `sigma,rate,noise,quality`; the noise seed is left at 0.
pub fn parse_params(s: &str) -> Result<DegradationParams> {
    let f: Vec<&str> = s.split(',').map(str::trim).collect();
    if f.len() != 4 {
        return Err(config_err!("degradation `{s}` must be `sigma,rate,noise,quality`"));
    }
    let num = |t: &str| t.parse::<f64>().map_err(|_| config_err!("degradation `{s}`: cannot parse `{t}`"));
    let p = DegradationParams {
        blur_sigma: num(f[0])?,
        down_rate: num(f[1])?,
        noise_std: num(f[2])?,
        jpeg_quality: f[3].parse().map_err(|_| config_err!("degradation `{s}`: bad quality `{}`", f[3]))?,
        seed: 0,
    };
    p.validate()?;
    Ok(p)
}

pub fn params_text(p: &DegradationParams) -> String {
    format!("{},{},{},{}", p.blur_sigma, p.down_rate, p.noise_std, p.jpeg_quality)
}

pub fn parse_params_list(s: &str) -> Result<Vec<DegradationParams>> {
    s.split(';').filter(|t| !t.trim().is_empty()).map(parse_params).collect()
}

pub fn params_list_text(ps: &[DegradationParams]) -> String {
    ps.iter().map(params_text).collect::<Vec<_>>().join("; ")
}

/// Degradation sampler under `degrade.*`.
pub fn sampler_from_kv(kv: &Kv) -> Result<ParamSampler> {
    match kv.get_str("degrade.sampler").unwrap_or("ranges") {
        "ranges" => {
            let d = ParamRanges::default();
            let q = match kv.get_str("degrade.quality") {
                None => d.jpeg_quality,
                Some(s) => {
                    let (a, b) = s.split_once(':').unwrap_or((s, s));
                    let p = |t: &str| t.trim().parse::<u8>().map_err(|_| config_err!("`degrade.quality`: bad value `{t}`"));
                    (p(a)?, p(b)?)
                }
            };
            let r = ParamRanges {
                blur_sigma: interval(kv, "degrade.sigma", d.blur_sigma)?,
                down_rate: interval(kv, "degrade.rate", d.down_rate)?,
                noise_std: interval(kv, "degrade.noise", d.noise_std)?,
                jpeg_quality: q,
            };
            r.validate()?;
            Ok(ParamSampler::Ranges(r))
        }
        "classes" => {
            let s = kv.get_str("degrade.classes").ok_or_else(|| config_err!("`degrade.sampler = classes` needs `degrade.classes`"))?;
            let c = parse_params_list(s)?;
            if c.is_empty() {
                return Err(config_err!("`degrade.classes` is empty"));
            }
            Ok(ParamSampler::Classes(c))
        }
        other => Err(config_err!("unknown `degrade.sampler` `{other}` (expected ranges or classes)")),
    }
}

pub fn sampler_to_kv(s: &ParamSampler, kv: &mut Kv) {
    match s {
        ParamSampler::Ranges(r) => {
            kv.set("degrade.sampler", "ranges");
            kv.set("degrade.sigma", interval_text(&r.blur_sigma));
            kv.set("degrade.rate", interval_text(&r.down_rate));
            kv.set("degrade.noise", interval_text(&r.noise_std));
            kv.set("degrade.quality", format!("{}:{}", r.jpeg_quality.0, r.jpeg_quality.1));
        }
        ParamSampler::Classes(c) => {
            kv.set("degrade.sampler", "classes");
            kv.set("degrade.classes", params_list_text(c));
        }
    }
}

fn parse_enum<T: std::str::FromStr>(kv: &Kv, key: &str, default: T) -> Result<T> {
    match kv.get_str(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| config_err!("`{key}`: unknown value `{v}`")),
    }
}

/// Encoder (`dre.*`) and contrastive training (`dre_train.*`) settings.
pub fn dre_train_from_kv(kv: &Kv) -> Result<DrePretrainConfig> {
    let d = DrePretrainConfig::default();
    let mut enc = Kv::new();
    d.encoder.to_kv(&mut enc, "dre.");
    let encoder = DreConfig::from_kv(&overlay(enc, kv, "dre."), "dre.")?;
    let denominator = match kv.get_str("dre_train.denominator").unwrap_or("with-positive") {
        "with-positive" => NceDenominator::WithPositive,
        "negatives-only" => NceDenominator::NegativesOnly,
        o => return Err(config_err!("`dre_train.denominator`: unknown value `{o}`")),
    };
    Ok(DrePretrainConfig {
        encoder,
        steps: kv.get_or("dre_train.steps", d.steps)?,
        batch: kv.get_or("dre_train.batch", d.batch)?,
        lr: kv.get_or("dre_train.lr", d.lr)?,
        lr_min: kv.get_or("dre_train.lr_min", d.lr_min)?,
        tau: kv.get_or("dre_train.tau", d.tau)?,
        queue_capacity: kv.get_or("dre_train.queue", d.queue_capacity)?,
        momentum: kv.get_or("dre_train.momentum", d.momentum)?,
        denominator,
        sampler: sampler_from_kv(kv)?,
        seed: seed(kv)?,
        allow_same_content: kv.get_or("dre_train.allow_same_content", false)?,
    })
}

pub fn dre_train_to_kv(c: &DrePretrainConfig, kv: &mut Kv) {
    c.encoder.to_kv(kv, "dre.");
    kv.set("dre_train.steps", c.steps);
    kv.set("dre_train.batch", c.batch);
    kv.set("dre_train.lr", c.lr);
    kv.set("dre_train.lr_min", c.lr_min);
    kv.set("dre_train.tau", c.tau);
    kv.set("dre_train.queue", c.queue_capacity);
    kv.set("dre_train.momentum", c.momentum);
    kv.set(
        "dre_train.denominator",
        match c.denominator {
            NceDenominator::WithPositive => "with-positive",
            NceDenominator::NegativesOnly => "negatives-only",
        },
    );
    kv.set("dre_train.allow_same_content", c.allow_same_content);
    sampler_to_kv(&c.sampler, kv);
    kv.set("seed", c.seed);
}

pub fn generator_from_kv(kv: &Kv) -> Result<GeneratorConfig> {
    let mut d = Kv::new();
    GeneratorConfig::default().to_kv(&mut d, "generator.");
    Ok(GeneratorConfig::from_kv(&overlay(d, kv, "generator."), "generator.")?)
}

/// Generator (`generator.*`), discriminator and adversarial training (`gpm_train.*`).
pub fn gpm_train_from_kv(kv: &Kv) -> Result<GpmPretrainConfig> {
    let d = GpmPretrainConfig::new(generator_from_kv(kv)?);
    let mut dk = Kv::new();
    d.discriminator.to_kv(&mut dk, "discriminator.");
    let discriminator = DiscriminatorConfig::from_kv(&overlay(dk, kv, "discriminator."), "discriminator.")?;
    Ok(GpmPretrainConfig {
        discriminator,
        steps: kv.get_or("gpm_train.steps", d.steps)?,
        batch: kv.get_or("gpm_train.batch", d.batch)?,
        lr_g: kv.get_or("gpm_train.lr_g", d.lr_g)?,
        lr_d: kv.get_or("gpm_train.lr_d", d.lr_d)?,
        lr_min: kv.get_or("gpm_train.lr_min", d.lr_min)?,
        drift: kv.get_or("gpm_train.drift", d.drift)?,
        seed: seed(kv)?,
        ..d
    })
}

pub fn gpm_train_to_kv(c: &GpmPretrainConfig, kv: &mut Kv) {
    c.generator.to_kv(kv, "generator.");
    c.discriminator.to_kv(kv, "discriminator.");
    kv.set("gpm_train.steps", c.steps);
    kv.set("gpm_train.batch", c.batch);
    kv.set("gpm_train.lr_g", c.lr_g);
    kv.set("gpm_train.lr_d", c.lr_d);
    kv.set("gpm_train.lr_min", c.lr_min);
    kv.set("gpm_train.drift", c.drift);
    kv.set("seed", c.seed);
}

/// Restoration model (`model.*`, `ife.*`) around a generator configuration.
pub fn model_from_kv(kv: &Kv, generator: GeneratorConfig) -> Result<PaniniConfig> {
    let mode: Mode = parse_enum(kv, "model.mode", Mode::Restoration)?;
    let fusion: FusionKind = parse_enum(kv, "model.fusion", FusionKind::Dafi)?;
    let out = generator.output_res();
    let input_res = kv.get_or("model.input_res", out / 2)?;
    let base = PaniniConfig::new(mode, fusion, generator, input_res);
    let mut ik = Kv::new();
    base.ife.to_kv(&mut ik, "ife.");
    let c = PaniniConfig {
        ife: IfeConfig::from_kv(&overlay(ik, kv, "ife."), "ife.")?,
        dafi_hidden: kv.get_list_or("model.dafi_hidden", base.dafi_hidden.clone())?,
        cat_conv_kernel: kv.get_or("model.cat_conv_kernel", base.cat_conv_kernel)?,
        ..base
    };
    c.validate()?;
    Ok(c)
}

pub fn model_to_kv(c: &PaniniConfig, kv: &mut Kv) {
    c.to_kv(kv);
    kv.set("model.input_res", c.input_res());
}

/// Fine-tuning settings under `train.*`.
pub fn train_from_kv(kv: &Kv) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let w = LossWeights {
        l1: kv.get_or("train.l1", d.weights.l1)?,
        perceptual: kv.get_or("train.perceptual", d.weights.perceptual)?,
        adversarial: kv.get_or("train.adversarial", d.weights.adversarial)?,
    };
    w.validate()?;
    Ok(TrainConfig {
        steps: kv.get_or("train.steps", d.steps)?,
        batch: kv.get_or("train.batch", d.batch)?,
        lr: kv.get_or("train.lr", d.lr)?,
        lr_min: kv.get_or("train.lr_min", d.lr_min)?,
        lr_d: kv.get_or("train.lr_d", d.lr_d)?,
        weights: w,
        sampler: sampler_from_kv(kv)?,
        freeze_gpm: kv.get_or("train.freeze_gpm", d.freeze_gpm)?,
        drift: kv.get_or("train.drift", d.drift)?,
        seed: seed(kv)?,
    })
}

pub fn train_to_kv(c: &TrainConfig, kv: &mut Kv) {
    kv.set("train.steps", c.steps);
    kv.set("train.batch", c.batch);
    kv.set("train.lr", c.lr);
    kv.set("train.lr_min", c.lr_min);
    kv.set("train.lr_d", c.lr_d);
    kv.set("train.l1", c.weights.l1);
    kv.set("train.perceptual", c.weights.perceptual);
    kv.set("train.adversarial", c.weights.adversarial);
    kv.set("train.freeze_gpm", c.freeze_gpm);
    kv.set("train.drift", c.drift);
    sampler_to_kv(&c.sampler, kv);
    kv.set("seed", c.seed);
}
