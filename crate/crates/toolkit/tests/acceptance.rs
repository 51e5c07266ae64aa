//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=1,2,3` runs a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use panini_core::checkpoint::{self, Checkpoint};
use panini_core::dafi::{self, FusionHead, InterpolationMask, Source, MASK_EPS};
use panini_core::degrade::{self, DegradationParams, ParamSampler};
use panini_core::drep::{self, NceDenominator, NegativeQueue};
use panini_core::gpm::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use panini_core::graph::{pair_softmax_first, Graph, Var};
use panini_core::kv::Kv;
use panini_core::metrics::{psnr, PSNR_CAP_DB};
use panini_core::nn::ParamStore;
use panini_core::panini::{
    l1_var, FusionKind, Mode, PaniniConfig, PaniniModel, PaniniTrainer, PerceptualExtractor, TrainConfig, EXTRACTOR_SEED,
};
use panini_core::rng::{rng, Rng};
use panini_core::{imaging, Tensor};
use panini_toolkit::codec::JpegCodec;
use panini_toolkit::config;
use panini_toolkit::dataset::Dataset;
use panini_toolkit::pipeline::{self, Artifacts};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn unit_rows(r: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::randn(&[n, d], 1.0, r);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn random_mask(r: &mut Rng, level: usize, c: usize) -> InterpolationMask {
    InterpolationMask::new(level, (0..c).map(|_| r.random_range(0.001..0.999)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn scalar_mlp(store: &ParamStore, head: &FusionHead, v: &[f64]) -> Vec<f64> {
    let mut h = v.to_vec();
    let n = head.layers().len();
    for (j, l) in head.layers().iter().enumerate() {
        let w = store.get(l.w).data();
        let b = l.b.map(|b| store.get(b).data().to_vec());
        let mut out = vec![0.0; l.out];
        for o in 0..l.out {
            let mut s = b.as_ref().map_or(0.0, |b| b[o]);
            for i in 0..l.inp {
                s += w[o * l.inp + i] * h[i];
            }
            out[o] = if j + 1 < n && s < 0.0 { 0.2 * s } else { s };
        }
        h = out;
    }
    h
}

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let trials = 120;
    let mut worst = [0.0f64; 8];
    for t in 0..trials {
        // make_mask
        let c = r.random_range(1..6);
        let d = r.random_range(1..9);
        let hidden = vec![r.random_range(1..6); r.random_range(0..3)];
        let mut store = ParamStore::new();
        let head = FusionHead::new(&mut store, "h", d, &hidden, c, &mut r);
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let m = dafi::make_mask(&head, &store, 1, &v).map_err(e2s)?;
        let logits = scalar_mlp(&store, &head, &v);
        for k in 0..c {
            let want = 1.0 / (1.0 + (logits[c + k] - logits[k]).exp());
            worst[0] = worst[0].max((m.weights()[k] - want).abs());
        }
        // interpolate, masked_single_source, usage_ratio, bias_mask
        let (ch, h, w) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = uniform(&mut r, &[ch, h, w], -3.0, 3.0);
        let b = uniform(&mut r, &[ch, h, w], -3.0, 3.0);
        let mask = random_mask(&mut r, 1, ch);
        let out = dafi::interpolate(&a, &b, &mask).map_err(e2s)?;
        let gpb = dafi::masked_single_source(&a, &mask, Source::Gpb).map_err(e2s)?;
        let ife = dafi::masked_single_source(&b, &mask, Source::Ife).map_err(e2s)?;
        for k in 0..ch {
            let mw = mask.weights()[k];
            for i in 0..h * w {
                let idx = k * h * w + i;
                worst[1] = worst[1].max((out.data()[idx] - (mw * a.data()[idx] + (1.0 - mw) * b.data()[idx])).abs());
                worst[3] = worst[3].max((gpb.data()[idx] - mw * a.data()[idx]).abs());
                worst[3] = worst[3].max((ife.data()[idx] - (1.0 - mw) * b.data()[idx]).abs());
            }
        }
        let mut sum = 0.0;
        for &x in mask.weights() {
            sum += x;
        }
        worst[2] = worst[2].max((dafi::usage_ratio(&mask) - sum / ch as f64).abs());
        let bias = r.random_range(-1.5..1.5);
        let biased = dafi::bias_mask(&mask, bias).map_err(e2s)?;
        for (x, y) in mask.weights().iter().zip(biased.weights()) {
            let want = if x + bias < MASK_EPS { MASK_EPS } else if x + bias > 1.0 - MASK_EPS { 1.0 - MASK_EPS } else { x + bias };
            worst[4] = worst[4].max((y - want).abs());
        }
        // info_nce
        let (bq, dim, nq) = (r.random_range(1..4), 256, r.random_range(1..12));
        let q = unit_rows(&mut r, bq, dim);
        let k0 = unit_rows(&mut r, bq, dim);
        let negs = unit_rows(&mut r, nq, dim);
        let mut queue = NegativeQueue::new(nq + r.random_range(0..3), dim).map_err(e2s)?;
        queue.enqueue(&negs).map_err(e2s)?;
        let tau = r.random_range(0.05..1.0);
        let denom = if t % 2 == 0 { NceDenominator::WithPositive } else { NceDenominator::NegativesOnly };
        let got = drep::info_nce(&q, &k0, &queue, tau, denom).map_err(e2s)?;
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let mut want = 0.0;
        for i in 0..bq {
            let pos = (dot(q.row(i), k0.row(i)) / tau).exp();
            let mut den = if denom == NceDenominator::WithPositive { pos } else { 0.0 };
            for j in 0..nq {
                den += (dot(q.row(i), negs.row(j)) / tau).exp();
            }
            want += -(pos / den).ln();
        }
        worst[5] = worst[5].max((got - want).abs() / want.abs().max(1.0));
        // psnr
        let (pc, ph, pw) = (r.random_range(1..4), r.random_range(1..9), r.random_range(1..9));
        let x = uniform(&mut r, &[pc, ph, pw], 0.0, 255.0);
        let y = uniform(&mut r, &[pc, ph, pw], 0.0, 255.0);
        let mut se = 0.0;
        for i in 0..x.len() {
            se += (x.data()[i] - y.data()[i]).powi(2);
        }
        let want = 10.0 * (255.0f64 * 255.0 / (se / x.len() as f64)).log10();
        worst[6] = worst[6].max((psnr(&x, &y).map_err(e2s)?.db - want).abs());
        // gaussian_kernel
        let size = 2 * r.random_range(0..5) + 1;
        let sigma = r.random_range(0.2..4.0);
        let k = degrade::gaussian_kernel(sigma, size).map_err(e2s)?;
        let half = (size / 2) as f64;
        let mut raw = vec![0.0; size * size];
        let mut z = 0.0;
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = (i as f64 - half, j as f64 - half);
                raw[i * size + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                z += raw[i * size + j];
            }
        }
        for (g, w) in k.data().iter().zip(&raw) {
            worst[7] = worst[7].max((g - w / z).abs());
        }
    }
    let names = ["make_mask", "interpolate", "usage_ratio", "masked_single_source", "bias_mask", "info_nce", "psnr", "gaussian_kernel"];
    let tol = [1e-7, 1e-7, 1e-7, 1e-7, 1e-7, 1e-7, 1e-6, 1e-7];
    for i in 0..8 {
        ensure(worst[i] <= tol[i], || format!("{} deviates by {:e}", names[i], worst[i]))?;
    }
    let same = Tensor::full(&[3, 4, 4], 7.0);
    let capped = psnr(&same, &same).map_err(e2s)?;
    ensure(capped.db == PSNR_CAP_DB && capped.capped, || "identical images not capped".into())?;
    Ok(format!("{trials} instances per operation, worst deviation {:.1e}", worst.iter().cloned().fold(0.0, f64::max)))
}

// ---------------------------------------------------------------- 2

fn micro_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_blocks: 3,
        n_fused: 2,
        base_res: 4,
        channels: vec![8, 8, 4],
        latent_dim: 8,
        rows_per_block: 2,
        mapping_layers: 1,
        noise: false,
    }
}

fn micro_model(mode: Mode) -> (PaniniModel, Discriminator) {
    let gen = micro_generator();
    let mut cfg = PaniniConfig::new(mode, FusionKind::Dafi, gen.clone(), 8);
    cfg.ife.dense_layers = 2;
    cfg.ife.growth = 4;
    cfg.dafi_hidden = vec![8];
    let dre = match mode {
        Mode::Restoration => Some(
            drep::Dre::new(drep::DreConfig { input_res: 8, channels: vec![4, 8], strides: vec![2, 2], hidden: 16 }, 5).unwrap(),
        ),
        Mode::Sr => None,
    };
    let model = PaniniModel::new(cfg, Generator::new(gen, 3).unwrap(), dre, 4).unwrap();
    (model, Discriminator::new(DiscriminatorConfig::for_resolution(16, 4), 6).unwrap())
}

fn criterion_2() -> Outcome {
    let mut r = rng(202);
    let mut worst_sum = 0.0f64;
    let mut worst_decomp = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..200 {
        let (a, b) = (r.random_range(-40.0..40.0), r.random_range(-40.0..40.0));
        worst_sum = worst_sum.max((pair_softmax_first(a, b) + pair_softmax_first(b, a) - 1.0).abs());
        let c = r.random_range(1..6);
        let logits: Vec<f64> = (0..2 * c).map(|_| r.random_range(-30.0..30.0)).collect();
        let m = dafi::mask_from_logits(1, &logits).map_err(e2s)?;
        for (w, cw) in m.weights().iter().zip(m.complement()) {
            ensure(*w > 0.0 && *w < 1.0, || format!("mask weight {w} outside (0, 1)"))?;
            worst_sum = worst_sum.max((w + cw - 1.0).abs());
        }
        let fa = uniform(&mut r, &[c, 3, 3], -5.0, 5.0);
        let fb = uniform(&mut r, &[c, 3, 3], -5.0, 5.0);
        let y = dafi::interpolate(&fa, &fb, &m).map_err(e2s)?;
        for i in 0..y.len() {
            let (lo, hi) = (fa.data()[i].min(fb.data()[i]), fa.data()[i].max(fb.data()[i]));
            ensure(y.data()[i] >= lo - 1e-12 && y.data()[i] <= hi + 1e-12, || "interpolation left the segment".into())?;
        }
        let parts = dafi::masked_single_source(&fa, &m, Source::Gpb)
            .map_err(e2s)?
            .zip_map(&dafi::masked_single_source(&fb, &m, Source::Ife).map_err(e2s)?, |p, q| p + q)
            .map_err(e2s)?;
        worst_decomp = worst_decomp.max(parts.max_abs_diff(&y));
        let sigma = r.random_range(0.1..6.0);
        let k = degrade::gaussian_kernel(sigma, degrade::kernel_size_for(sigma)).map_err(e2s)?;
        worst_norm = worst_norm.max((k.sum() - 1.0).abs());
    }
    ensure(worst_sum <= 1e-7, || format!("pair sum off by {worst_sum:e}"))?;
    ensure(worst_decomp <= 1e-7, || format!("decomposition off by {worst_decomp:e}"))?;
    ensure(worst_norm <= 1e-12, || format!("kernel sum off by {worst_norm:e}"))?;
    let img = panini_core::synth::face_dataset(1, 32, 9).map_err(e2s)?.remove(0).1;
    for _ in 0..5 {
        let p = DegradationParams {
            blur_sigma: r.random_range(0.2..4.0),
            down_rate: r.random_range(1.0..6.0),
            noise_std: r.random_range(0.0..20.0),
            jpeg_quality: r.random_range(5..95),
            seed: r.random(),
        };
        let a = degrade::apply_degradation(&img, &p, &JpegCodec).map_err(e2s)?;
        let b = degrade::apply_degradation(&img, &p, &JpegCodec).map_err(e2s)?;
        ensure(a == b, || "degradation not bit-exact on repeat".into())?;
    }
    let (model, disc) = micro_model(Mode::Restoration);
    let before = model.dre().expect("restoration model").params().digest();
    let data = Dataset::synthetic(8, 16, 2).map_err(e2s)?;
    let cfg = TrainConfig { steps: 100, batch: 2, ..TrainConfig::default() };
    let mut t = PaniniTrainer::new(cfg, model, disc, PerceptualExtractor::new(EXTRACTOR_SEED), 8).map_err(e2s)?;
    for _ in 0..100 {
        t.step(&data, &JpegCodec).map_err(e2s)?;
    }
    ensure(t.model.dre().expect("kept").params().digest() == before, || "encoder weights changed during fine-tuning".into())?;
    Ok(format!("pair sum {worst_sum:.1e}, decomposition {worst_decomp:.1e}, kernel sum {worst_norm:.1e}, encoder hash stable over 100 steps"))
}

// ---------------------------------------------------------------- 3

/// Norm-wise relative error of the analytic gradient of `f` at leaf `x`.
fn grad_error(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let loss = build(&mut g, v);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let l = build(&mut g, v);
        g.value(l).item()
    };
    let h = 1e-6;
    let mut num = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        num.data_mut()[i] = (eval(&p) - eval(&m)) / (2.0 * h);
    }
    let diff = analytic.zip_map(&num, |a, b| a - b).unwrap().l2_norm();
    diff / analytic.l2_norm().max(num.l2_norm()).max(1e-12)
}

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let mut worst = [0.0f64; 4];
    for _ in 0..5 {
        let (b, d, n) = (2, 6, 5);
        let q = unit_rows(&mut r, b, d);
        let k0 = unit_rows(&mut r, b, d);
        let negs = unit_rows(&mut r, n, d);
        for include in [true, false] {
            let (k0c, nc) = (k0.clone(), negs.clone());
            worst[0] = worst[0].max(grad_error(&q, &move |g, v| {
                let k = g.constant(k0c.clone());
                g.info_nce(v, k, &nc, 0.2, include).unwrap()
            }));
            let (qc, nc) = (q.clone(), negs.clone());
            worst[0] = worst[0].max(grad_error(&k0, &move |g, v| {
                let qv = g.constant(qc.clone());
                g.info_nce(qv, v, &nc, 0.2, include).unwrap()
            }));
        }
        let c = 3;
        let logits = uniform(&mut r, &[2, 2 * c], -2.0, 2.0);
        let fa = uniform(&mut r, &[2, c, 3, 3], -1.0, 1.0);
        let fb = uniform(&mut r, &[2, c, 3, 3], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, c, 3, 3], -1.0, 1.0);
        let weighted = |g: &mut Graph, y: Var, probe: &Tensor| {
            let pv = g.constant(probe.clone());
            let prod = g.mul(y, pv).unwrap();
            g.sum(prod)
        };
        let (a2, b2, p2) = (fa.clone(), fb.clone(), probe.clone());
        worst[1] = worst[1].max(grad_error(&logits, &move |g, v| {
            let m = g.pair_softmax(v).unwrap();
            let (av, bv) = (g.constant(a2.clone()), g.constant(b2.clone()));
            let y = dafi::interpolate_var(g, av, bv, m).unwrap();
            weighted(g, y, &p2)
        }));
        let (l2, b2, p2) = (logits.clone(), fb.clone(), probe.clone());
        worst[1] = worst[1].max(grad_error(&fa, &move |g, v| {
            let lv = g.constant(l2.clone());
            let m = g.pair_softmax(lv).unwrap();
            let bv = g.constant(b2.clone());
            let y = dafi::interpolate_var(g, v, bv, m).unwrap();
            weighted(g, y, &p2)
        }));
        let y = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        let target = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        let t2 = target.clone();
        worst[2] = worst[2].max(grad_error(&y, &move |g, v| {
            let tv = g.constant(t2.clone());
            l1_var(g, v, tv).unwrap()
        }));
    }
    let extractor = PerceptualExtractor::new(EXTRACTOR_SEED);
    for _ in 0..2 {
        let y = uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0);
        let target = uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0);
        let e = &extractor;
        worst[3] = worst[3].max(grad_error(&y, &|g, v| {
            let p = e.params().bind(g, false);
            let tv = g.constant(target.clone());
            e.loss(g, &p, v, tv).unwrap()
        }));
    }
    let names = ["info_nce", "interpolate via mask logits", "L1", "perceptual"];
    for i in 0..4 {
        ensure(worst[i] <= 1e-4, || format!("{} gradient relative error {:e}", names[i], worst[i]))?;
    }
    Ok(format!(
        "relative errors: info_nce {:.1e}, interpolate {:.1e}, L1 {:.1e}, perceptual {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------- shared training runs

fn smoke_config() -> Kv {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    config::load(&path).expect("configs/smoke.cfg")
}

struct Workspace {
    dir: tempfile::TempDir,
    model: Option<PathBuf>,
    gpm: Option<PathBuf>,
    eval: Option<Artifacts>,
    eval_config: Option<Kv>,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Encoder, prior and fine-tuned model of the smoke configuration.
    fn ensure_trained(&mut self) -> Result<PathBuf, String> {
        if let Some(p) = &self.model {
            return Ok(p.clone());
        }
        let kv = smoke_config();
        let t = Instant::now();
        let dre = pipeline::run_pretrain_dre(&kv).map_err(e2s)?;
        dre.write_to(&self.path("dre")).map_err(e2s)?;
        let gpm = pipeline::run_pretrain_gpm(&kv).map_err(e2s)?;
        gpm.write_to(&self.path("gpm")).map_err(e2s)?;
        let mut tk = kv.clone();
        tk.set("checkpoint.dre", self.path("dre/dre.ckpt").display());
        tk.set("checkpoint.gpm", self.path("gpm/gpm.ckpt").display());
        let train = pipeline::run_train(&tk).map_err(e2s)?;
        train.write_to(&self.path("train")).map_err(e2s)?;
        eprintln!("    (pretraining and fine-tuning took {:.0} s)", t.elapsed().as_secs_f64());
        self.gpm = Some(self.path("gpm/gpm.ckpt"));
        self.model = Some(self.path("train/panini.ckpt"));
        Ok(self.path("train/panini.ckpt"))
    }

    fn held_out(&mut self) -> Result<Kv, String> {
        let model = self.ensure_trained()?;
        let mut kv = smoke_config();
        let (start, count): (usize, usize) = (kv.get_or("val.start", 0).map_err(e2s)?, kv.get_or("val.count", 0).map_err(e2s)?);
        kv.set("data.start", start);
        kv.set("data.count", count);
        kv.set("checkpoint.model", model.display());
        Ok(kv)
    }
}

// ---------------------------------------------------------------- 4

fn criterion_4(_: &mut Workspace) -> Outcome {
    let mut kv = smoke_config();
    let classes = "0.3,1,0,95; 2.5,1,0,95; 0.3,1,20,95; 0.3,1,0,10";
    kv.set("degrade.sampler", "classes");
    kv.set("degrade.classes", classes);
    kv.set("dre_train.steps", 1000);
    kv.set("dre.input_res", pipeline::data_res(&kv).map_err(e2s)?);
    let cfg = config::dre_train_from_kv(&kv).map_err(e2s)?;
    let res = pipeline::data_res(&kv).map_err(e2s)?;
    let train = Dataset::from_kv(&kv, res).map_err(e2s)?;
    let out = drep::pretrain_dre(&train, &JpegCodec, cfg.clone()).map_err(e2s)?;
    let ParamSampler::Classes(templates) = &cfg.sampler else { return Err("expected class sampler".into()) };
    let mut vk = kv.clone();
    vk.set("data.start", kv.get_or::<usize>("val.start", 0).map_err(e2s)?);
    vk.set("data.count", kv.get_or::<usize>("val.count", 0).map_err(e2s)?);
    let held = Dataset::from_kv(&vk, res).map_err(e2s)?;
    let half = held.images.len() / 2;
    let (mut fit, mut fit_y, mut test, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, img) in held.images.iter().enumerate() {
        for (c, p) in templates.iter().enumerate() {
            let p = p.with_seed(0x9e00 + (i * 8 + c) as u64);
            let x = imaging::network_input(&degrade::apply_degradation(img, &p, &JpegCodec).map_err(e2s)?, cfg.encoder.input_res);
            if i < half {
                fit.push(x);
                fit_y.push(c);
            } else {
                test.push(x);
                test_y.push(c);
            }
        }
    }
    let enc = &out.pair.query;
    let ef = enc.encode_batch(&Tensor::stack(&fit).map_err(e2s)?).map_err(e2s)?;
    let et = enc.encode_batch(&Tensor::stack(&test).map_err(e2s)?).map_err(e2s)?;
    let acc = drep::nearest_centroid_accuracy(&ef, &fit_y, &et, &test_y).map_err(e2s)?;
    ensure(acc >= 0.70, || format!("probe accuracy {:.1}% < 70%", acc * 100.0))?;
    Ok(format!("probe accuracy {:.1}% on {} held-out embeddings (chance 25%)", acc * 100.0, test.len()))
}

// ---------------------------------------------------------------- 5

fn criterion_5(ws: &mut Workspace) -> Outcome {
    ws.ensure_trained()?;
    let summary = std::fs::read_to_string(ws.path("train/summary.txt")).map_err(e2s)?;
    let grab = |label: &str| -> Result<f64, String> {
        summary
            .lines()
            .find(|l| l.starts_with(label))
            .and_then(|l| l.split_whitespace().last())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("`{label}` missing from training summary"))
    };
    let (l1_start, l1_end) = (grab("validation L1 start")?, grab("validation L1 end")?);
    let kv = ws.held_out()?;
    let eval = pipeline::run_eval(&kv).map_err(e2s)?;
    let tiers = eval.text("tiers.csv").ok_or("no tiers.csv")?;
    let mild: Vec<&str> = tiers.lines().nth(1).ok_or("empty tiers.csv")?.split(',').collect();
    // tier,"sigma,rate,noise,quality",psnr_mean,psnr_std,psnr_bilinear_mean,gain_db,...
    let fields: Vec<String> = split_csv(&mild.join(","));
    let (restored, bilinear): (f64, f64) = (fields[2].parse().map_err(e2s)?, fields[4].parse().map_err(e2s)?);
    ws.eval_config = Some(kv);
    ws.eval = Some(eval);
    ensure(l1_end < l1_start, || format!("validation L1 rose from {l1_start} to {l1_end}"))?;
    ensure(restored - bilinear >= 1.0, || format!("mildest tier gain {:.2} dB < 1 dB ({restored:.2} vs {bilinear:.2})", restored - bilinear))?;
    Ok(format!(
        "mildest tier {restored:.2} dB vs bilinear {bilinear:.2} dB (+{:.2}), validation L1 {l1_start:.4} -> {l1_end:.4}",
        restored - bilinear
    ))
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(String::new()),
            c => out.last_mut().unwrap().push(c),
        }
    }
    out
}

// ---------------------------------------------------------------- 6

fn criterion_6(ws: &mut Workspace) -> Outcome {
    let kv = ws.held_out()?;
    let a = pipeline::run_ablation_b(&kv).map_err(e2s)?;
    let report = a.text("report.csv").ok_or("no report.csv")?;
    let theta: Vec<f64> = report.lines().skip(1).map(|l| split_csv(l)[1].parse::<f64>().unwrap_or(f64::NAN)).collect();
    ensure(theta.len() == 5, || format!("expected 5 rates, got {}", theta.len()))?;
    ensure(theta.iter().all(|t| *t > 0.0 && *t < 1.0), || format!("theta outside (0, 1): {theta:?}"))?;
    let steps = pipeline::nondecreasing_steps(&theta);
    let shown = theta.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(" ");
    ensure(steps >= 3, || format!("only {steps} of 4 comparisons nondecreasing: {shown}"))?;
    Ok(format!("theta by rate {shown} ({steps} of 4 nondecreasing)"))
}

// ---------------------------------------------------------------- 7

fn criterion_7(ws: &mut Workspace) -> Outcome {
    let kv = smoke_config();
    let gen = config::generator_from_kv(&kv).map_err(e2s)?;
    let model = config::model_from_kv(&kv, gen.clone()).map_err(e2s)?;
    let widths: Vec<usize> = gen.channels[..gen.n_fused].to_vec();
    for (c, d, k) in pipeline::head_param_table(&widths, &model.dafi_hidden, model.cat_conv_kernel) {
        ensure(d < k, || format!("width {c}: DAFI head {d} >= Cat-Conv head {k}"))?;
    }
    let mut cat = model.clone();
    cat.fusion = FusionKind::CatConv;
    for i in 1..=gen.n_fused {
        ensure(model.fusion_head_params(i) < cat.fusion_head_params(i), || format!("level {i} counts out of order"))?;
    }
    let reference = pipeline::head_param_table(&[512], &pipeline::REFERENCE_HIDDEN, 3)[0];
    ws.ensure_trained()?;
    let mut ak = kv.clone();
    ak.set("checkpoint.gpm", ws.gpm.as_ref().expect("trained").display());
    ak.set("train.steps", 100);
    let a = pipeline::run_ablation_a(&ak).map_err(e2s)?;
    let report = a.text("report.csv").ok_or("no report.csv")?;
    let rows: Vec<Vec<String>> = report.lines().map(split_csv).collect();
    ensure(rows.len() == 3 && rows.iter().all(|r| r.len() == rows[0].len()), || format!("malformed report:\n{report}"))?;
    ensure(rows[1][0] == "dafi" && rows[2][0] == "cat-conv", || "arms missing from report".into())?;
    let (hd, hc): (usize, usize) = (rows[1][1].parse().map_err(e2s)?, rows[2][1].parse().map_err(e2s)?);
    ensure(hd < hc, || format!("trained DAFI heads {hd} >= Cat-Conv heads {hc}"))?;
    let mut bad = ak.clone();
    bad.set("ablation_a.steps_cat_conv", 50);
    let err = pipeline::run_ablation_a(&bad).err().ok_or("budget mismatch accepted")?;
    ensure(err.class() == "invalid-argument", || format!("budget mismatch gave {}", err.class()))?;
    Ok(format!(
        "widths {widths:?}: DAFI < Cat-Conv; heads {hd} vs {hc}; at C=512 {} vs {}; report well-formed",
        reference.1, reference.2
    ))
}

// ---------------------------------------------------------------- 8

fn rerun_matches(first: &Artifacts, rerun: impl Fn(&Kv) -> panini_toolkit::Result<Artifacts>) -> Result<(), String> {
    let embedded = Kv::parse(&first.text("config.txt").ok_or("no config.txt")?).map_err(e2s)?;
    let second = rerun(&embedded).map_err(e2s)?;
    for (name, bytes) in &first.files {
        ensure(second.get(name) == Some(bytes.as_slice()), || format!("{name} differs on rerun"))?;
    }
    ensure(first.files.len() == second.files.len(), || "rerun produced different files".into())
}

fn criterion_8(ws: &mut Workspace) -> Outcome {
    let model_path = ws.ensure_trained()?;
    let eval = match ws.eval.take() {
        Some(e) => e,
        None => pipeline::run_eval(&ws.held_out()?).map_err(e2s)?,
    };
    rerun_matches(&eval, pipeline::run_eval)?;
    let b = pipeline::run_ablation_b(&ws.held_out()?).map_err(e2s)?;
    rerun_matches(&b, pipeline::run_ablation_b)?;
    let mut small = smoke_config();
    small.set("dre_train.steps", 3);
    small.set("gpm_train.steps", 2);
    let dre = pipeline::run_pretrain_dre(&small).map_err(e2s)?;
    rerun_matches(&dre, pipeline::run_pretrain_dre)?;
    let gpm = pipeline::run_pretrain_gpm(&small).map_err(e2s)?;
    rerun_matches(&gpm, pipeline::run_pretrain_gpm)?;
    for path in [model_path.clone(), ws.path("gpm/gpm.ckpt"), ws.path("dre/dre.ckpt")] {
        let bytes = std::fs::read(&path).map_err(e2s)?;
        let c = Checkpoint::from_bytes(&bytes).map_err(e2s)?;
        ensure(c.to_bytes() == bytes, || format!("{} does not round-trip", path.display()))?;
    }
    let bytes = std::fs::read(&model_path).map_err(e2s)?;
    let (m, d) = checkpoint::load_panini(&Checkpoint::from_bytes(&bytes).map_err(e2s)?).map_err(e2s)?;
    let again = checkpoint::panini_checkpoint(&m, d.as_ref(), checkpoint::meta(&Checkpoint::from_bytes(&bytes).map_err(e2s)?));
    ensure(again.to_bytes() == bytes, || "model parameters changed through load and save".into())?;
    Ok("eval, ablation B and both pretraining reports rerun byte-identically; checkpoints round-trip bit-exactly".into())
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut ws = Workspace { dir: tempfile::tempdir().expect("temp dir"), model: None, gpm: None, eval: None, eval_config: None };
    let criteria: Vec<(usize, &str, Box<dyn Fn(&mut Workspace) -> Outcome>)> = vec![
        (1, "fusion-math oracles", Box::new(|_| criterion_1())),
        (2, "invariants", Box::new(|_| criterion_2())),
        (3, "gradient checks", Box::new(|_| criterion_3())),
        (4, "degradation representation probe", Box::new(criterion_4)),
        (5, "end-to-end toy training", Box::new(criterion_5)),
        (6, "usage ratio trend", Box::new(criterion_6)),
        (7, "fusion ablation", Box::new(criterion_7)),
        (8, "reproducibility", Box::new(criterion_8)),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| run(&mut ws)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL {name}: {why} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
