//! Config-driven training, evaluation and ablation runs.
//!
//! Each run returns [`Artifacts`]: named files whose bytes depend only on the
//! config, the referenced checkpoints and the data. Wall-clock time is kept
//! out of them so reruns compare byte for byte.

use std::path::Path;

use panini_core::checkpoint;
use panini_core::dafi::{self, InterpolationMask};
use panini_core::degrade::{Codec, DegradationParams, QuantizeOnly};
use panini_core::drep::{self, DR_DIM};
use panini_core::gpm::{self, Discriminator};
use panini_core::kv::Kv;
use panini_core::metrics::psnr;
use panini_core::panini::{
    self, Dissect, FineTuneLog, ForwardOptions, FusionKind, Mode, PaniniModel, PaniniTrainer, PerceptualExtractor,
    TrainConfig, EXTRACTOR_SEED,
};
use panini_core::rng::derive_seed;
use panini_core::{imaging, FeatureMap, Tensor};

use crate::codec::JpegCodec;
use crate::config;
use crate::dataset::Dataset;
use crate::error::{config_err, Result};
use crate::io;
use crate::report::{self, num, Csv};

/// Stream tags for evaluation-side randomness.
const EVAL_STREAM: u64 = 0xe7a1;
const VAL_STREAM: u64 = 0x7a1d;
const SAMPLE_STREAM: u64 = 0x5a3b;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    /// Notes for stderr; not written to disk.
    pub warnings: Vec<String>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_text(&mut self, name: &str, text: &str) {
        self.add(name, text.as_bytes().to_vec());
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn text(&self, name: &str) -> Option<String> {
        self.get(name).map(|b| String::from_utf8_lossy(b).into_owned())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in &self.files {
            io::write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

pub fn codec_from_kv(kv: &Kv) -> Result<Box<dyn Codec>> {
    match kv.get_str("degrade.codec").unwrap_or("jpeg") {
        "jpeg" => Ok(Box::new(JpegCodec)),
        "none" => Ok(Box::new(QuantizeOnly)),
        o => Err(config_err!("unknown `degrade.codec` `{o}` (expected jpeg or none)")),
    }
}

/// Config keys copied verbatim into every echo.
fn passthrough(kv: &Kv, echo: &mut Kv) {
    for (k, v) in kv.iter() {
        if ["data.", "val.", "checkpoint.", "eval.", "ablation_a.", "ablation_b."].iter().any(|p| k.starts_with(p)) {
            echo.set(k, v);
        }
    }
    echo.set("degrade.codec", kv.get_str("degrade.codec").unwrap_or("jpeg"));
}

/// HQ resolution of the data: `data.res`, else the generator output size.
pub fn data_res(kv: &Kv) -> Result<usize> {
    match kv.get("data.res")? {
        Some(r) => Ok(r),
        None => Ok(config::generator_from_kv(kv)?.output_res()),
    }
}

fn checkpoint_path<'a>(kv: &'a Kv, key: &str) -> Result<&'a str> {
    kv.get_str(key).ok_or_else(|| config_err!("missing `{key}`"))
}

fn finish(mut a: Artifacts, title: &str, lines: Vec<(String, String)>, echo: &Kv) -> Artifacts {
    a.add_text("summary.txt", &report::summary(title, &lines, echo));
    a.add_text("config.txt", &echo.to_text());
    a
}

fn line(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn run_pretrain_dre(kv: &Kv) -> Result<Artifacts> {
    let cfg = config::dre_train_from_kv(kv)?;
    let res = data_res(kv)?;
    let data = Dataset::from_kv(kv, res)?;
    let codec = codec_from_kv(kv)?;
    let out = drep::pretrain_dre(&data, codec.as_ref(), cfg.clone())?;
    let mut echo = Kv::new();
    passthrough(kv, &mut echo);
    echo.set("data.res", res);
    config::dre_train_to_kv(&cfg, &mut echo);
    let mut meta = echo.clone();
    meta.set("trained_steps", cfg.steps);
    let mut a = Artifacts::default();
    a.add("dre.ckpt", checkpoint::dre_checkpoint(&out.pair, &out.queue, meta).to_bytes());
    a.add_text("train_log.csv", &report::train_log_csv(&out.log.entries).to_text());
    let (first, last) = out.log.window_means(0.1);
    let lines = vec![
        line("images", data.images.len()),
        line("steps", cfg.steps),
        line("loss (first 10%)", num(first)),
        line("loss (last 10%)", num(last)),
    ];
    Ok(finish(a, "degradation encoder pretraining", lines, &echo))
}

pub fn run_pretrain_gpm(kv: &Kv) -> Result<Artifacts> {
    let cfg = config::gpm_train_from_kv(kv)?;
    let res = cfg.generator.output_res();
    let data = Dataset::from_kv(kv, res)?;
    let out = gpm::pretrain_gpm(&data, cfg.clone())?;
    let n = data.images.len().min(16);
    let real = Tensor::stack(&data.images[..n].iter().map(imaging::to_unit_range).collect::<Vec<_>>())?;
    let acc = gpm::discriminator_accuracy(&out.generator, &out.discriminator, &real, derive_seed(cfg.seed, SAMPLE_STREAM))?;
    let samples = out.generator.sample(n.max(2), derive_seed(cfg.seed, SAMPLE_STREAM + 1))?;
    let spread = gpm::pairwise_spread(&samples);
    let mut echo = Kv::new();
    passthrough(kv, &mut echo);
    config::gpm_train_to_kv(&cfg, &mut echo);
    let mut meta = echo.clone();
    meta.set("trained_steps", cfg.steps);
    let mut a = Artifacts::default();
    a.add("gpm.ckpt", checkpoint::gpm_checkpoint(&out.generator, &out.discriminator, meta).to_bytes());
    a.add_text("train_log.csv", &report::train_log_csv(&out.log.generator.entries).to_text());
    a.add_text("train_log_discriminator.csv", &report::train_log_csv(&out.log.discriminator.entries).to_text());
    let sample_grid = report::grid(&[samples.unstack().into_iter().map(|s| imaging::to_pixel_range(&s)).collect()], res)?;
    a.add("samples.png", io::encode_png(&sample_grid)?);
    let lines = vec![
        line("images", data.images.len()),
        line("steps", cfg.steps),
        line("discriminator accuracy (held-in batch)", num(acc)),
        line("sample spread (mean pairwise L2)", num(spread)),
        line("sample pixel mean", num(imaging::to_pixel_range(&samples).mean())),
        line("data pixel mean", num(data.images.iter().map(|i| i.mean()).sum::<f64>() / data.images.len() as f64)),
    ];
    Ok(finish(a, "generative prior pretraining", lines, &echo))
}

/// Fixed validation pairs: one draw of the training sampler per image.
pub fn validation_pairs(
    model: &PaniniModel,
    data: &Dataset,
    sampler: &panini_core::degrade::ParamSampler,
    codec: &dyn Codec,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let cfg = model.config();
    let mut lq = Vec::new();
    let mut hq = Vec::new();
    for (i, img) in data.images.iter().enumerate() {
        let (p, _) = sampler.sample(derive_seed(seed, (VAL_STREAM << 32) ^ i as u64))?;
        let (l, h) = panini::make_pair(img, cfg.mode, &p, codec, cfg.input_res(), cfg.output_res())?;
        lq.push(l);
        hq.push(h);
    }
    Ok((Tensor::stack(&lq)?, Tensor::stack(&hq)?))
}

pub struct Trained {
    pub model: PaniniModel,
    pub discriminator: Discriminator,
    pub log: FineTuneLog,
    /// Validation L1 before and after training, when a validation set is given.
    pub val_l1: Option<(f64, f64)>,
}

/// Fine-tunes `model` and tracks validation L1 on `val`.
pub fn fine_tune(
    model: PaniniModel,
    disc: Discriminator,
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    codec: &dyn Codec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Trained> {
    let pairs = match val {
        Some(v) => Some(validation_pairs(&model, v, &cfg.sampler, codec, cfg.seed)?),
        None => None,
    };
    let start = match &pairs {
        Some((l, h)) => Some(panini::validation_l1(&model, l, h)?),
        None => None,
    };
    let mut t = PaniniTrainer::new(cfg.clone(), model, disc, PerceptualExtractor::new(EXTRACTOR_SEED), data.images.len())?;
    for s in 0..cfg.steps {
        let l = t.step(data, codec)?;
        on_step(s, l.total);
    }
    let end = match &pairs {
        Some((l, h)) => Some(panini::validation_l1(&t.model, l, h)?),
        None => None,
    };
    Ok(Trained { model: t.model, discriminator: t.discriminator, log: t.log, val_l1: start.zip(end) })
}

/// Builds an untrained restoration model from the checkpoints named in `kv`.
pub fn initial_model(kv: &Kv) -> Result<(PaniniModel, Discriminator)> {
    let gpm_ckpt = io::read_checkpoint(Path::new(checkpoint_path(kv, "checkpoint.gpm")?))?;
    let generator = checkpoint::load_generator(&gpm_ckpt, None)?;
    let disc = checkpoint::load_discriminator(&gpm_ckpt)?;
    let cfg = config::model_from_kv(kv, generator.config().clone())?;
    let dre = match cfg.mode {
        Mode::Restoration => {
            let c = io::read_checkpoint(Path::new(checkpoint_path(kv, "checkpoint.dre")?))?;
            Some(checkpoint::load_dre(&c)?)
        }
        Mode::Sr => None,
    };
    Ok((PaniniModel::new(cfg, generator, dre, config::seed(kv)?)?, disc))
}

fn val_set(kv: &Kv, res: usize) -> Result<Option<Dataset>> {
    match kv.get::<usize>("val.count")? {
        None | Some(0) => Ok(None),
        Some(count) => {
            let mut v = kv.clone();
            v.set("data.start", kv.get_or::<usize>("val.start", 0)?);
            v.set("data.count", count);
            Ok(Some(Dataset::from_kv(&v, res)?))
        }
    }
}

pub fn run_train(kv: &Kv) -> Result<Artifacts> {
    let (model, disc) = initial_model(kv)?;
    let cfg = config::train_from_kv(kv)?;
    let res = model.config().output_res();
    let data = Dataset::from_kv(kv, res)?;
    let val = val_set(kv, res)?;
    let codec = codec_from_kv(kv)?;
    let t = fine_tune(model, disc, &cfg, &data, val.as_ref(), codec.as_ref(), |_, _| {})?;
    let mut echo = Kv::new();
    passthrough(kv, &mut echo);
    config::model_to_kv(t.model.config(), &mut echo);
    config::train_to_kv(&cfg, &mut echo);
    let mut meta = echo.clone();
    meta.set("trained_steps", cfg.steps);
    let mut a = Artifacts::default();
    a.add("panini.ckpt", checkpoint::panini_checkpoint(&t.model, Some(&t.discriminator), meta).to_bytes());
    a.add_text("train_log.csv", &report::train_log_csv(&t.log.total.entries).to_text());
    let (first, last) = t.log.total.window_means(0.1);
    let mut lines = vec![
        line("model", panini::describe(t.model.config())),
        line("images", data.images.len()),
        line("steps", cfg.steps),
        line("loss (first 10%)", num(first)),
        line("loss (last 10%)", num(last)),
    ];
    if let Some((s, e)) = t.val_l1 {
        lines.push(line("validation L1 start", num(s)));
        lines.push(line("validation L1 end", num(e)));
    }
    Ok(finish(a, "restoration fine-tuning", lines, &echo))
}

pub fn load_model(path: &Path) -> Result<(PaniniModel, Kv)> {
    let c = io::read_checkpoint(path)?;
    let (m, _) = checkpoint::load_panini(&c)?;
    Ok((m, checkpoint::meta(&c)))
}

fn untrained_warning(meta: &Kv) -> Result<Option<String>> {
    Ok(match meta.get::<usize>("trained_steps")? {
        Some(n) if n > 0 => None,
        _ => Some("model checkpoint has not been fine-tuned; results reflect initial weights".to_string()),
    })
}

fn to_pixels(unit: &Tensor) -> FeatureMap {
    imaging::quantize(&imaging::to_pixel_range(unit))
}

/// One evaluated image at one degradation tier.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub tier: usize,
    pub psnr: f64,
    pub psnr_bilinear: f64,
    /// Usage ratio per fused level (empty without DAFI masks).
    pub theta: Vec<f64>,
}

/// Restores every image at every tier; rows are ordered by image, then tier.
pub fn evaluate(model: &PaniniModel, data: &Dataset, tiers: &[DegradationParams], codec: &dyn Codec, seed: u64) -> Result<Vec<EvalRow>> {
    let cfg = model.config();
    let (ri, ro) = (cfg.input_res(), cfg.output_res());
    let mut rows = Vec::new();
    for (i, img) in data.images.iter().enumerate() {
        for (t, p) in tiers.iter().enumerate() {
            let p = p.with_seed(derive_seed(seed, (EVAL_STREAM << 40) ^ ((i as u64) << 8) ^ t as u64));
            let (lq, hq) = panini::make_pair(img, cfg.mode, &p, codec, ri, ro)?;
            let out = model.run(&Tensor::stack(&[lq.clone()])?, &ForwardOptions::default())?;
            let gt = to_pixels(&hq);
            let restored = to_pixels(&out.image.batch_item(0));
            let bilinear = imaging::quantize(&imaging::resize_bilinear(&imaging::to_pixel_range(&lq), ro, ro));
            rows.push(EvalRow {
                image: data.names[i].clone(),
                tier: t,
                psnr: psnr(&restored, &gt)?.db,
                psnr_bilinear: psnr(&bilinear, &gt)?.db,
                theta: out.masks.iter().map(|m| panini::usage_ratios(m)[0]).collect(),
            });
        }
    }
    Ok(rows)
}

pub const DEFAULT_TIERS: &str = "0.5,1,0,95; 1.5,2,5,60; 3,4,15,25";

fn tiers_from_kv(kv: &Kv, mode: Mode) -> Result<Vec<DegradationParams>> {
    match mode {
        Mode::Sr => Ok(vec![config::parse_params("1,1,0,100")?]),
        Mode::Restoration => config::parse_params_list(kv.get_str("eval.tiers").unwrap_or(DEFAULT_TIERS)),
    }
}

pub fn run_eval(kv: &Kv) -> Result<Artifacts> {
    let (model, meta) = load_model(Path::new(checkpoint_path(kv, "checkpoint.model")?))?;
    let cfg = model.config();
    let data = Dataset::from_kv(kv, cfg.output_res())?;
    let tiers = tiers_from_kv(kv, cfg.mode)?;
    let codec = codec_from_kv(kv)?;
    let seed = config::seed(kv)?;
    let rows = evaluate(&model, &data, &tiers, codec.as_ref(), seed)?;
    let n_levels = cfg.generator.n_fused;
    let theta_cols: Vec<String> = (1..=n_levels).map(|l| format!("theta_level{l}")).collect();
    let mut header = vec!["image", "tier", "psnr", "psnr_bilinear"];
    header.extend(theta_cols.iter().map(String::as_str));
    let mut csv = Csv::new(&header);
    for r in &rows {
        let mut row = vec![r.image.clone(), r.tier.to_string(), num(r.psnr), num(r.psnr_bilinear)];
        row.extend((0..n_levels).map(|l| r.theta.get(l).map_or(String::new(), |&t| num(t))));
        csv.push(row);
    }
    let mut th = vec!["tier", "degradation", "psnr_mean", "psnr_std", "psnr_bilinear_mean", "gain_db"];
    th.extend(theta_cols.iter().map(String::as_str));
    let mut tier_csv = Csv::new(&th);
    let mut lines = vec![line("model", panini::describe(cfg)), line("images", data.images.len())];
    for (t, p) in tiers.iter().enumerate() {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.tier == t).collect();
        let (m, s) = report::mean_std(&sel.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (b, _) = report::mean_std(&sel.iter().map(|r| r.psnr_bilinear).collect::<Vec<_>>());
        let mut row = vec![t.to_string(), config::params_text(p), num(m), num(s), num(b), num(m - b)];
        for l in 0..n_levels {
            let v: Vec<f64> = sel.iter().filter_map(|r| r.theta.get(l).copied()).collect();
            row.push(if v.is_empty() { String::new() } else { num(report::mean_std(&v).0) });
        }
        tier_csv.push(row);
        lines.push(line(&format!("tier {t} ({})", config::params_text(p)), format!("{} dB vs bilinear {} dB", num(m), num(b))));
    }
    let mut echo = Kv::new();
    passthrough(kv, &mut echo);
    echo.set("seed", seed);
    if cfg.mode == Mode::Restoration {
        echo.set("eval.tiers", config::params_list_text(&tiers));
    }
    let mut a = Artifacts::default();
    a.warnings.extend(untrained_warning(&meta)?);
    a.add_text("report.csv", &csv.to_text());
    a.add_text("tiers.csv", &tier_csv.to_text());
    Ok(finish(a, "evaluation", lines, &echo))
}

/// Full, prior-only and image-only restorations of one image, in pixel range.
pub fn dissect(model: &PaniniModel, lq: &FeatureMap) -> Result<[FeatureMap; 3]> {
    let run = |d: Option<Dissect>| -> Result<FeatureMap> {
        let opts = ForwardOptions { dissect: d, ..ForwardOptions::default() };
        Ok(imaging::quantize(&model.restore_image(lq, &opts)?.0))
    };
    Ok([run(None)?, run(Some(Dissect::GpbOnly))?, run(Some(Dissect::IfeOnly))?])
}

pub fn restore(model: &PaniniModel, lq: &FeatureMap) -> Result<(FeatureMap, Vec<InterpolationMask>)> {
    let (img, masks) = model.restore_image(lq, &ForwardOptions::default())?;
    Ok((imaging::quantize(&img), masks))
}

/// One column per bias; bias 0 is the plain restoration.
pub fn edit_sweep(model: &PaniniModel, lq: &FeatureMap, biases: &[f64], levels: &[usize]) -> Result<(FeatureMap, Csv)> {
    if biases.is_empty() {
        return Err(config_err!("edit sweep needs at least one bias"));
    }
    let n = model.config().generator.n_fused;
    if let Some(l) = levels.iter().find(|&&l| l == 0 || l > n) {
        return Err(config_err!("edit level {l} outside 1..={n}"));
    }
    let base = restore(model, lq)?.0;
    let mut tiles = Vec::new();
    let mut csv = Csv::new(&["column", "bias", "levels", "mean_abs_change"]);
    let lv = levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ");
    for (c, &b) in biases.iter().enumerate() {
        let (img, _) = model.restore_image(lq, &ForwardOptions::with_bias(levels, b))?;
        let img = imaging::quantize(&img);
        csv.push(vec![c.to_string(), num(b), lv.clone(), num(img.zip_map(&base, |x, y| (x - y).abs())?.mean())]);
        tiles.push(img);
    }
    Ok((report::grid(&[tiles], model.config().output_res())?, csv))
}

/// Mean usage ratio at the last fused level for each down-sampling rate.
pub fn usage_by_rate(
    model: &PaniniModel,
    data: &Dataset,
    base: &DegradationParams,
    rates: &[f64],
    codec: &dyn Codec,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let tiers: Vec<DegradationParams> = rates.iter().map(|&r| DegradationParams { down_rate: r, ..*base }).collect();
    let rows = evaluate(model, data, &tiers, codec, seed)?;
    let last = model.config().generator.n_fused - 1;
    (0..rates.len())
        .map(|t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.tier == t).map(|r| r.theta[last]).collect();
            let (m, s) = report::mean_std(&v);
            Ok((m, s))
        })
        .collect()
}

/// Adjacent comparisons where the sequence does not decrease.
pub fn nondecreasing_steps(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] >= w[0]).count()
}

pub const DEFAULT_RATES: &str = "1,2,3,4,6";
pub const DEFAULT_BASE: &str = "1,1,5,60";

pub fn run_ablation_b(kv: &Kv) -> Result<Artifacts> {
    let (model, meta) = load_model(Path::new(checkpoint_path(kv, "checkpoint.model")?))?;
    let cfg = model.config();
    if cfg.fusion != FusionKind::Dafi {
        return Err(config_err!("ablation B needs a DAFI model"));
    }
    let data = Dataset::from_kv(kv, cfg.output_res())?;
    let rates: Vec<f64> = kv.get_list_or("ablation_b.rates", Vec::new())?;
    let rates = if rates.is_empty() { DEFAULT_RATES.split(',').map(|r| r.parse().expect("static")).collect() } else { rates };
    let base = config::parse_params(kv.get_str("ablation_b.base").unwrap_or(DEFAULT_BASE))?;
    let codec = codec_from_kv(kv)?;
    let seed = config::seed(kv)?;
    let theta = usage_by_rate(&model, &data, &base, &rates, codec.as_ref(), seed)?;
    let mut csv = Csv::new(&["rate", "theta_mean", "theta_std", "images"]);
    for (r, (m, s)) in rates.iter().zip(&theta) {
        csv.push(vec![num(*r), num(*m), num(*s), data.images.len().to_string()]);
    }
    let (ri, ro) = (cfg.input_res(), cfg.output_res());
    let mut rows = vec![Vec::new(), Vec::new(), Vec::new()];
    for &r in &rates {
        let p = DegradationParams { down_rate: r, ..base }.with_seed(derive_seed(seed, EVAL_STREAM));
        let (lq, _) = panini::make_pair(&data.images[0], cfg.mode, &p, codec.as_ref(), ri, ro)?;
        for (row, img) in rows.iter_mut().zip(dissect(&model, &imaging::to_pixel_range(&lq))?) {
            row.push(img);
        }
    }
    let means: Vec<f64> = theta.iter().map(|t| t.0).collect();
    let steps = nondecreasing_steps(&means);
    let mut echo = Kv::new();
    passthrough(kv, &mut echo);
    echo.set("seed", seed);
    echo.set_list("ablation_b.rates", &rates);
    echo.set("ablation_b.base", config::params_text(&base));
    let mut a = Artifacts::default();
    a.warnings.extend(untrained_warning(&meta)?);
    a.add_text("report.csv", &csv.to_text());
    a.add("grid.png", io::encode_png(&report::grid(&rows, ro)?)?);
    let lines = vec![
        line("model", panini::describe(cfg)),
        line("images", data.images.len()),
        line("level", cfg.generator.n_fused),
        line("theta by rate", means.iter().map(|m| num(*m)).collect::<Vec<_>>().join(" ")),
        line("nondecreasing steps", format!("{steps} of {}", means.len().saturating_sub(1))),
        line("grid rows", "full, prior only, image only"),
    ];
    Ok(finish(a, "usage ratio versus down-sampling rate", lines, &echo))
}

/// Fusion head parameter counts: `(width, dafi, cat_conv)`.
pub fn head_param_table(widths: &[usize], hidden: &[usize], kernel: usize) -> Vec<(usize, usize, usize)> {
    widths
        .iter()
        .map(|&c| (c, dafi::dafi_head_param_count(DR_DIM, hidden, c), dafi::cat_conv_param_count(c, kernel)))
        .collect()
}

pub const REFERENCE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const REFERENCE_HIDDEN: [usize; 1] = [256];

pub fn run_ablation_a(kv: &Kv) -> Result<Artifacts> {
    let cfg = config::train_from_kv(kv)?;
    let steps_dafi = kv.get_or("ablation_a.steps_dafi", cfg.steps)?;
    let steps_cat = kv.get_or("ablation_a.steps_cat_conv", cfg.steps)?;
    if steps_dafi != steps_cat {
        return Err(config_err!("ablation arms need equal budgets, got {steps_dafi} and {steps_cat} steps"));
    }
    let codec = codec_from_kv(kv)?;
    let mut report_csv = Csv::new(&["arm", "head_params", "psnr_mean", "psnr_std", "val_l1_start", "val_l1_end"]);
    let mut lines = Vec::new();
    let mut echo = Kv::new();
    passthrough(kv, &mut echo);
    let mut params_csv = Csv::new(&["source", "width", "dafi_params", "cat_conv_params", "dafi_below"]);
    for fusion in [FusionKind::Dafi, FusionKind::CatConv] {
        let mut arm = kv.clone();
        arm.set("model.mode", Mode::Sr);
        arm.set("model.fusion", fusion);
        let (model, disc) = initial_model(&arm)?;
        let res = model.config().output_res();
        let data = Dataset::from_kv(&arm, res)?;
        let val = val_set(&arm, res)?.ok_or_else(|| config_err!("ablation A needs `val.count`"))?;
        let t = fine_tune(model, disc, &TrainConfig { steps: steps_dafi, ..cfg.clone() }, &data, Some(&val), codec.as_ref(), |_, _| {})?;
        let rows = evaluate(&t.model, &val, &tiers_from_kv(&arm, Mode::Sr)?, codec.as_ref(), cfg.seed)?;
        let (m, s) = report::mean_std(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (l0, l1) = t.val_l1.expect("validation set given");
        let heads = t.model.fusion_head_scalars();
        report_csv.push(vec![fusion.to_string(), heads.to_string(), num(m), num(s), num(l0), num(l1)]);
        lines.push(line(&format!("{fusion} head parameters"), heads));
        lines.push(line(&format!("{fusion} PSNR"), format!("{} dB", num(m))));
        if fusion == FusionKind::Dafi {
            let mc = t.model.config();
            let widths: Vec<usize> = mc.generator.channels[..mc.generator.n_fused].to_vec();
            for (c, d, k) in head_param_table(&widths, &mc.dafi_hidden, mc.cat_conv_kernel) {
                params_csv.push(vec!["model".into(), c.to_string(), d.to_string(), k.to_string(), (d < k).to_string()]);
            }
            for (c, d, k) in head_param_table(&REFERENCE_WIDTHS, &REFERENCE_HIDDEN, 3) {
                params_csv.push(vec!["reference".into(), c.to_string(), d.to_string(), k.to_string(), (d < k).to_string()]);
            }
            config::model_to_kv(mc, &mut echo);
            echo.remove("model.fusion");
        }
    }
    config::train_to_kv(&TrainConfig { steps: steps_dafi, ..cfg }, &mut echo);
    let mut a = Artifacts::default();
    a.add_text("report.csv", &report_csv.to_text());
    a.add_text("params.csv", &params_csv.to_text());
    Ok(finish(a, "fusion ablation: DAFI versus concatenate-and-convolve", lines, &echo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_counter() {
        assert_eq!(nondecreasing_steps(&[0.1, 0.2, 0.2, 0.1, 0.3]), 3);
        assert_eq!(nondecreasing_steps(&[1.0]), 0);
    }

    #[test]
    fn reference_widths_favor_dafi() {
        let t = head_param_table(&[512], &REFERENCE_HIDDEN, 3);
        assert_eq!(t[0], (512, 256 * 256 + 256 + 256 * 1024 + 1024, 2 * 512 * 512 * 9 + 512));
    }

    #[test]
    fn codec_selection() {
        assert!(codec_from_kv(&Kv::parse("degrade.codec = none").unwrap()).is_ok());
        assert_eq!(codec_from_kv(&Kv::parse("degrade.codec = png").unwrap()).err().unwrap().class(), "invalid-argument");
    }
}
