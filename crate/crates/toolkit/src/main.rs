use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use panini_core::degrade::{apply_degradation, DegradationParams};
use panini_core::kv::Kv;
use panini_toolkit::codec::JpegCodec;
use panini_toolkit::config;
use panini_toolkit::dataset;
use panini_toolkit::error::{Result, ToolError};
use panini_toolkit::pipeline::{self, Artifacts};
use panini_toolkit::{io, report};

/// Degradation-aware face restoration with a generative prior.
#[derive(Parser)]
#[command(name = "panini", version, after_help = "Failures print `error[<class>]: <message>` to stderr and exit nonzero.\nThe PANINI_SEED environment variable overrides every seed.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines, `include = file` supported).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedurally generated faces and their manifest.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the blur, downsample, noise and JPEG pipeline to one image.
    Degrade {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        quality: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the degradation encoder.
    PretrainDre {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Image folder (sets `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adversarial pretraining of the generator used as prior.
    PretrainGpm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune the restoration model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Encoder checkpoint (sets `checkpoint.dre`).
        #[arg(long)]
        dre: Option<PathBuf>,
        /// Generator checkpoint (sets `checkpoint.gpm`).
        #[arg(long)]
        gpm: Option<PathBuf>,
    },
    /// Restore one image; optionally dump the fusion masks.
    Restore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for `mask_level<i>.csv` files.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Full, prior-only and image-only restorations of one image.
    Dissect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shift the fusion masks by each bias and tile the results.
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.3,0,0.3")]
        biases: Vec<f64>,
        /// Fused levels to edit (default: all).
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and usage ratios over a dataset at several degradation tiers.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint (sets `checkpoint.model`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train DAFI and concatenate-and-convolve fusion at equal budget.
    AblationA {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        gpm: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Usage ratio at the last fused level across down-sampling rates.
    AblationB {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn seed_override(seed: u64) -> Result<u64> {
    let mut kv = Kv::new();
    kv.set("seed", seed);
    config::apply_seed_env(&mut kv)?;
    config::seed(&kv).map_err(Into::into)
}

/// Config file, then `--set`, then path flags, then the seed variable.
fn load_config(a: &ConfigArgs, paths: &[(&str, &Option<PathBuf>)]) -> Result<Kv> {
    let mut kv = match &a.config {
        Some(p) => config::load(p)?,
        None => Kv::new(),
    };
    config::apply_overrides(&mut kv, &a.sets)?;
    for (key, p) in paths {
        if let Some(p) = p {
            kv.set(key, p.display());
        }
    }
    config::apply_seed_env(&mut kv)?;
    Ok(kv)
}

fn emit(out: &Path, run: impl FnOnce() -> Result<Artifacts>) -> Result<()> {
    let t = Instant::now();
    let a = run()?;
    for w in &a.warnings {
        eprintln!("warning: {w}");
    }
    a.write_to(out)?;
    io::write_atomic(&out.join("runtime.txt"), format!("seconds = {:.3}\n", t.elapsed().as_secs_f64()).as_bytes())?;
    if let Some(s) = a.text("summary.txt") {
        print!("{s}");
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { n, res, seed, out } => {
            let seed = seed_override(seed)?;
            dataset::synth_dataset(&out, n, res, seed)?;
            println!("{} images written to {} (hash {})", n, out.display(), dataset::folder_hash(&out)?);
            Ok(())
        }
        Command::Degrade { sigma, rate, noise, quality, seed, input, out } => {
            let p = DegradationParams { blur_sigma: sigma, down_rate: rate, noise_std: noise, jpeg_quality: quality, seed: seed_override(seed)? };
            let img = io::read_image(&input)?;
            io::write_png(&out, &apply_degradation(&img, &p, &JpegCodec)?)
        }
        Command::PretrainDre { cfg, data } => {
            let kv = load_config(&cfg, &[("data.dir", &data)])?;
            emit(&cfg.out, || pipeline::run_pretrain_dre(&kv))
        }
        Command::PretrainGpm { cfg, data } => {
            let kv = load_config(&cfg, &[("data.dir", &data)])?;
            emit(&cfg.out, || pipeline::run_pretrain_gpm(&kv))
        }
        Command::Train { cfg, data, dre, gpm } => {
            let kv = load_config(&cfg, &[("data.dir", &data), ("checkpoint.dre", &dre), ("checkpoint.gpm", &gpm)])?;
            emit(&cfg.out, || pipeline::run_train(&kv))
        }
        Command::Restore { model, input, out, masks } => {
            let (m, _) = pipeline::load_model(&model)?;
            let (img, ms) = pipeline::restore(&m, &io::read_image(&input)?)?;
            io::write_png(&out, &img)?;
            if let Some(dir) = masks {
                report::write_mask_csvs(&dir, &ms)?;
            }
            Ok(())
        }
        Command::Dissect { model, input, out } => {
            let (m, _) = pipeline::load_model(&model)?;
            let lq = io::read_image(&input)?;
            let parts = pipeline::dissect(&m, &lq)?;
            for (name, img) in ["full", "prior_only", "image_only"].iter().zip(&parts) {
                io::write_png(&out.join(format!("{name}.png")), img)?;
            }
            let res = m.config().output_res();
            let input_tile = panini_core::imaging::resize_bilinear(&lq, res, res);
            let [a, b, c] = parts;
            io::write_png(&out.join("grid.png"), &report::grid(&[vec![input_tile, a, b, c]], res)?)
        }
        Command::Edit { model, input, biases, levels, out } => {
            let (m, _) = pipeline::load_model(&model)?;
            let levels = if levels.is_empty() { (1..=m.config().generator.n_fused).collect() } else { levels };
            let (grid, csv) = pipeline::edit_sweep(&m, &io::read_image(&input)?, &biases, &levels)?;
            io::write_png(&out.join("grid.png"), &grid)?;
            csv.write(&out.join("columns.csv"))
        }
        Command::Eval { cfg, model, data } => {
            let kv = load_config(&cfg, &[("checkpoint.model", &model), ("data.dir", &data)])?;
            emit(&cfg.out, || pipeline::run_eval(&kv))
        }
        Command::AblationA { cfg, gpm, data } => {
            let kv = load_config(&cfg, &[("checkpoint.gpm", &gpm), ("data.dir", &data)])?;
            emit(&cfg.out, || pipeline::run_ablation_a(&kv))
        }
        Command::AblationB { cfg, model, data } => {
            let kv = load_config(&cfg, &[("checkpoint.model", &model), ("data.dir", &data)])?;
            emit(&cfg.out, || pipeline::run_ablation_b(&kv))
        }
    }
}

fn fail(class: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("error[{class}]: {message}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("invalid-argument", e.to_string().lines().next().unwrap_or("bad arguments"), 2),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string(), ToolError::exit_code(&e)),
    }
}
