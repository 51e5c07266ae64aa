//! Unsupervised degradation representation learning.
//!
//! A query encoder and a momentum (key) encoder are trained contrastively:
//! positives are two *different* images degraded by the same function, and
//! negatives are past keys held in a FIFO queue. The trained query encoder is
//! the degradation representation encoder (DRE) whose unit-norm 256-d output
//! conditions the fusion masks.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::degrade::{self, Codec, ParamSampler};
use crate::error::{invalid_arg, Error, Result};
use crate::graph::{column_moments, Graph, Var};
use crate::imaging;
use crate::kv::Kv;
use crate::nn::{cosine_lr, Adam, Bound, Conv2d, Linear, ParamId, ParamStore, LEAKY_SLOPE};
use crate::rng::{self, derive_seed, stream};
use crate::tensor::{FeatureMap, Tensor};

/// Width of a degradation representation.
pub const DR_DIM: usize = 256;

/// Unit-norm embedding of an image's degradation.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationRepresentation(Vec<f64>);

impl DegradationRepresentation {
    /// Wraps `values`, rejecting anything that is not a unit vector of width 256.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != DR_DIM {
            return Err(invalid_arg!("representation must have {} entries, got {}", DR_DIM, values.len()));
        }
        let norm = libm::sqrt(values.iter().map(|v| v * v).sum::<f64>());
        if (norm - 1.0).abs() > 1e-5 {
            return Err(invalid_arg!("representation norm {} is not 1", norm));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, DR_DIM], self.0.clone()).expect("shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DreConfig {
    pub input_res: usize,
    /// Output channels of the six convolutions.
    pub channels: Vec<usize>,
    /// Strides of the six convolutions.
    pub strides: Vec<usize>,
    pub hidden: usize,
}

impl Default for DreConfig {
    fn default() -> Self {
        Self {
            input_res: 32,
            channels: vec![16, 32, 32, 64, 64, 128],
            strides: vec![1, 2, 1, 2, 1, 2],
            hidden: 256,
        }
    }
}

impl DreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(invalid_arg!("dre: channels and strides must be non-empty and aligned"));
        }
        let mut res = self.input_res;
        for &s in &self.strides {
            if s == 0 || res % s != 0 {
                return Err(invalid_arg!("dre: stride {} does not divide resolution {}", s, res));
            }
            res /= s;
        }
        if res == 0 || self.hidden == 0 {
            return Err(invalid_arg!("dre: degenerate configuration"));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut Kv, prefix: &str) {
        kv.set(&alloc::format!("{prefix}input_res"), self.input_res);
        kv.set_list(&alloc::format!("{prefix}channels"), &self.channels);
        kv.set_list(&alloc::format!("{prefix}strides"), &self.strides);
        kv.set(&alloc::format!("{prefix}hidden"), self.hidden);
    }

    pub fn from_kv(kv: &Kv, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            input_res: kv.get_or(&alloc::format!("{prefix}input_res"), d.input_res)?,
            channels: kv.get_list_or(&alloc::format!("{prefix}channels"), d.channels)?,
            strides: kv.get_list_or(&alloc::format!("{prefix}strides"), d.strides)?,
            hidden: kv.get_or(&alloc::format!("{prefix}hidden"), d.hidden)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Per-channel spatial mean and standard deviation, `B x 2C`. The spread
/// tracks high-frequency energy, where blur, noise and compression differ
/// most; plain mean pooling leaves the embeddings nearly identical.
fn moment_pool(g: &mut Graph, h: Var) -> Result<Var> {
    let mean = g.global_avg_pool(h);
    let sq = g.square(h);
    let mean_sq = g.global_avg_pool(sq);
    let mean2 = g.square(mean);
    let var = g.sub(mean_sq, mean2)?;
    let inv = g.rsqrt(var, 1e-8);
    let std = g.mul(var, inv)?;
    g.concat_axis1(&[mean, std])
}

/// Weight of the newest batch in the running normalization statistics.
const NORM_STAT_RATE: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

/// Per-feature batch mean and variance at every normalization site.
pub type NormStats = Vec<(Vec<f64>, Vec<f64>)>;

/// Strided conv stack, mean and spread pooling, two-layer projection, L2
/// norm. The pooled features, the hidden layer and the output are each
/// standardized per feature.
///
/// Training standardizes with batch statistics (with gradient); inference
/// uses running statistics kept in the parameter store.
/// Without this all embeddings start out nearly parallel and contrastive
/// training collapses them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dre {
    config: DreConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<(ParamId, ParamId)>,
    fc1: Linear,
    fc2: Linear,
}

impl Dre {
    pub fn new(config: DreConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(derive_seed(seed, stream::INIT));
        let mut params = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            convs.push(Conv2d::new(&mut params, &alloc::format!("conv{i}"), cin, c, 3, s, true, &mut r));
            cin = c;
        }
        let fc1 = Linear::new(&mut params, "proj1", 2 * cin, config.hidden, false, &mut r);
        let fc2 = Linear::new(&mut params, "proj2", config.hidden, DR_DIM, false, &mut r);
        let norms = [2 * cin, config.hidden, DR_DIM]
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mean = params.add(&alloc::format!("norm{i}.mean"), Tensor::zeros(&[1, w]));
                let var = params.add(&alloc::format!("norm{i}.var"), Tensor::full(&[1, w], 1.0));
                (mean, var)
            })
            .collect();
        Ok(Self { config, params, convs, norms, fc1, fc2 })
    }

    pub fn config(&self) -> &DreConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `x: B x 3 x R x R` in `[-1, 1]`; returns unit rows `B x 256`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.run(g, p, x, None)
    }

    /// Training forward pass standardized on batch statistics; also returns
    /// those statistics for [`Dre::track_norm_stats`].
    pub fn forward_train(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, NormStats)> {
        if g.value(x).shape().first().copied().unwrap_or(0) < 2 {
            return Err(invalid_arg!("batch-standardized training needs at least two images per batch"));
        }
        let mut stats = Vec::with_capacity(self.norms.len());
        let out = self.run(g, p, x, Some(&mut stats))?;
        Ok((out, stats))
    }

    /// Folds batch statistics into the running values used at inference.
    pub fn track_norm_stats(&mut self, stats: &NormStats) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(invalid_arg!("{} norm statistics for {} sites", stats.len(), self.norms.len()));
        }
        for (&(mean_id, var_id), (mean, var)) in self.norms.iter().zip(stats) {
            for (id, batch) in [(mean_id, mean), (var_id, var)] {
                let m = self.params.get_mut(id);
                if m.len() != batch.len() {
                    return Err(invalid_arg!("norm statistics width {} vs {}", m.len(), batch.len()));
                }
                for (r, &b) in m.data_mut().iter_mut().zip(batch) {
                    *r += NORM_STAT_RATE * (b - *r);
                }
            }
        }
        Ok(())
    }

    fn run(&self, g: &mut Graph, p: &Bound, x: Var, mut stats: Option<&mut NormStats>) -> Result<Var> {
        let s = g.value(x).shape();
        let r = self.config.input_res;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(invalid_arg!("dre expects B x 3 x {} x {}, got {:?}", r, r, s));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = moment_pool(g, h)?;
        let h = self.norm(g, h, 0, stats.as_deref_mut())?;
        let h = self.fc1.forward(g, p, h)?;
        let h = self.norm(g, h, 1, stats.as_deref_mut())?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.fc2.forward(g, p, h)?;
        let h = self.norm(g, h, 2, stats)?;
        Ok(g.l2_normalize_rows(h))
    }

    fn norm(&self, g: &mut Graph, h: Var, site: usize, stats: Option<&mut NormStats>) -> Result<Var> {
        if let Some(stats) = stats {
            stats.push(column_moments(g.value(h)));
            return Ok(g.standardize_batch(h, NORM_EPS));
        }
        let (mean_id, var_id) = self.norms[site];
        let batch = g.value(h).shape()[0];
        let mean = g.constant(self.params.get(mean_id).clone());
        let mean = g.broadcast_batch(mean, batch)?;
        let inv: Vec<f64> = self.params.get(var_id).data().iter().map(|v| 1.0 / libm::sqrt(v + NORM_EPS)).collect();
        let inv = g.constant(Tensor::from_vec(&[1, inv.len()], inv)?);
        let inv = g.broadcast_batch(inv, batch)?;
        let h = g.sub(h, mean)?;
        g.mul(h, inv)
    }

    /// Embeds a batch `B x 3 x R x R`, returning `B x 256`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }

    /// Embeds one image `3 x R x R` in `[-1, 1]`.
    pub fn encode(&self, x: &FeatureMap) -> Result<DegradationRepresentation> {
        let batch = Tensor::stack(core::slice::from_ref(x))?;
        let out = self.encode_batch(&batch)?;
        DegradationRepresentation::new(out.into_data())
    }
}

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    buffer: Tensor,
    len: usize,
    write_cursor: usize,
}

const UNIT_TOL: f64 = 1e-6;

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let (_, d) = t.dims2();
    for (i, row) in t.data().chunks(d).enumerate() {
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(invalid_arg!("{} row {} has norm {}", what, i, n));
        }
    }
    Ok(())
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid_arg!("queue capacity and dim must be positive"));
        }
        Ok(Self { capacity, dim, buffer: Tensor::zeros(&[capacity, dim]), len: 0, write_cursor: 0 })
    }

    /// Full queue of random unit vectors, the usual warm start.
    pub fn random(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        let mut r = rng::rng(derive_seed(seed, stream::QUEUE));
        let mut t = Tensor::randn(&[capacity, dim], 1.0, &mut r);
        for row in t.data_mut().chunks_mut(dim) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            row.iter_mut().for_each(|v| *v /= n);
        }
        q.enqueue(&t)?;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    /// Appends rows, overwriting the oldest entries once full.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        if keys.rank() != 2 || keys.shape()[1] != self.dim {
            return Err(invalid_arg!("enqueue: expected n x {}, got {:?}", self.dim, keys.shape()));
        }
        check_unit_rows(keys, "enqueued key")?;
        for row in keys.data().chunks(self.dim) {
            let start = self.write_cursor * self.dim;
            self.buffer.data_mut()[start..start + self.dim].copy_from_slice(row);
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored entries, oldest first.
    pub fn ordered(&self) -> Tensor {
        let start = if self.len < self.capacity { 0 } else { self.write_cursor };
        let mut data = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            data.extend_from_slice(&self.buffer.data()[slot * self.dim..(slot + 1) * self.dim]);
        }
        Tensor::from_vec(&[self.len, self.dim], data).expect("shape")
    }

    /// Raw ring buffer and cursor, for checkpointing.
    pub fn raw_parts(&self) -> (&Tensor, usize, usize) {
        (&self.buffer, self.len, self.write_cursor)
    }

    pub fn from_raw_parts(buffer: Tensor, len: usize, write_cursor: usize) -> Result<Self> {
        let (capacity, dim) = buffer.dims2();
        if len > capacity || write_cursor >= capacity.max(1) {
            return Err(Error::Corrupt(alloc::format!(
                "queue len {} / cursor {} exceed capacity {}",
                len,
                write_cursor,
                capacity
            )));
        }
        Ok(Self { capacity, dim, buffer, len, write_cursor })
    }
}

/// Which terms make up the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NceDenominator {
    /// Positive plus negatives (standard InfoNCE).
    WithPositive,
    /// Negatives only, as the loss is sometimes written; has a degenerate optimum.
    NegativesOnly,
}

impl NceDenominator {
    fn include_positive(self) -> bool {
        matches!(self, NceDenominator::WithPositive)
    }
}

/// Summed InfoNCE loss of query rows against their positive keys and the queue.
pub fn info_nce(q: &Tensor, k0: &Tensor, queue: &NegativeQueue, tau: f64, denom: NceDenominator) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(invalid_arg!("tau must be > 0, got {}", tau));
    }
    if queue.is_empty() {
        return Err(invalid_arg!("negative queue is empty"));
    }
    if q.rank() != 2 || q.shape() != k0.shape() {
        return Err(invalid_arg!("q {:?} and k0 {:?} must be equal B x D", q.shape(), k0.shape()));
    }
    check_unit_rows(q, "query")?;
    check_unit_rows(k0, "key")?;
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k0.clone());
    let loss = g.info_nce(qv, kv, &queue.ordered(), tau, denom.include_positive())?;
    Ok(g.value(loss).item())
}

/// Query encoder plus its momentum-averaged key twin.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: Dre,
    pub key: Dre,
    pub momentum: f64,
}

impl EncoderPair {
    pub fn new(config: DreConfig, seed: u64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid_arg!("momentum must lie in [0, 1), got {}", momentum));
        }
        let query = Dre::new(config, seed)?;
        Ok(Self { key: query.clone(), query, momentum })
    }

    /// `key <- m * key + (1 - m) * query`, elementwise.
    pub fn momentum_update(&mut self) -> Result<()> {
        let m = self.momentum;
        let q = self.query.params.tensors();
        let k = self.key.params.tensors_mut();
        if q.len() != k.len() || q.iter().zip(k.iter()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::InvalidState("query and key encoders differ in shape".into()));
        }
        for (kt, qt) in k.iter_mut().zip(q) {
            for (kv, &qv) in kt.data_mut().iter_mut().zip(qt.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }
}

/// Read access to a collection of high-quality images (`3 x R x R`, 0-255).
pub trait ImageSource {
    fn len(&self) -> usize;
    fn image(&self, index: usize) -> Result<FeatureMap>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for [FeatureMap] {
    fn len(&self) -> usize {
        <[FeatureMap]>::len(self)
    }
    fn image(&self, index: usize) -> Result<FeatureMap> {
        self.get(index).cloned().ok_or_else(|| invalid_arg!("image index {} out of range", index))
    }
}

impl ImageSource for Vec<FeatureMap> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn image(&self, index: usize) -> Result<FeatureMap> {
        self.as_slice().image(index)
    }
}

/// Walks shuffled epochs over a dataset, wrapping around when exhausted.
#[derive(Debug, Clone)]
pub struct EpochCursor {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochCursor {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(invalid_arg!("dataset is empty"));
        }
        let mut c = Self { n, seed, epoch: 0, order: Vec::new(), pos: 0 };
        c.reshuffle();
        Ok(c)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut r = rng::rng(derive_seed(self.seed, self.epoch));
        self.order.shuffle(&mut r);
        self.pos = 0;
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    /// Two indices; distinct unless the dataset has a single image.
    pub fn next_pair(&mut self) -> (usize, usize) {
        let a = self.next_index();
        let mut b = self.next_index();
        if self.n > 1 && a == b {
            b = self.next_index();
        }
        (a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrePretrainConfig {
    pub encoder: DreConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub tau: f64,
    pub queue_capacity: usize,
    pub momentum: f64,
    pub denominator: NceDenominator,
    pub sampler: ParamSampler,
    pub seed: u64,
    /// Permit pairing an image with itself (disabled by default).
    pub allow_same_content: bool,
}

impl Default for DrePretrainConfig {
    fn default() -> Self {
        Self {
            encoder: DreConfig::default(),
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            tau: 0.07,
            queue_capacity: 1024,
            momentum: 0.999,
            denominator: NceDenominator::WithPositive,
            sampler: ParamSampler::Ranges(degrade::ParamRanges::default()),
            seed: 0,
            allow_same_content: false,
        }
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<(usize, f64)>,
}

impl TrainLog {
    /// Mean loss over the first and last `frac` of the run.
    pub fn window_means(&self, frac: f64) -> (f64, f64) {
        let n = self.entries.len();
        let w = ((n as f64 * frac) as usize).max(1).min(n.max(1));
        let mean = |s: &[(usize, f64)]| s.iter().map(|e| e.1).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.entries[..w.min(n)]), mean(&self.entries[n.saturating_sub(w)..]))
    }
}

/// Stateful UDRL trainer; [`pretrain_dre`] drives it to completion.
pub struct DreTrainer {
    pub config: DrePretrainConfig,
    pub pair: EncoderPair,
    pub queue: NegativeQueue,
    optimizer: Adam,
    cursor: EpochCursor,
    step: usize,
    pub log: TrainLog,
}

impl DreTrainer {
    pub fn new(config: DrePretrainConfig, dataset_len: usize) -> Result<Self> {
        if config.batch < 2 {
            return Err(invalid_arg!("batch must hold at least two pairs, got {}", config.batch));
        }
        if dataset_len < 2 && !config.allow_same_content {
            return Err(invalid_arg!("positive pairs need at least two distinct images, dataset has {}", dataset_len));
        }
        let pair = EncoderPair::new(config.encoder.clone(), config.seed, config.momentum)?;
        let queue = NegativeQueue::random(config.queue_capacity, DR_DIM, config.seed)?;
        let optimizer = Adam::new(pair.query.params(), 0.9, 0.999);
        let cursor = EpochCursor::new(dataset_len, derive_seed(config.seed, stream::DATA))?;
        Ok(Self { config, pair, queue, optimizer, cursor, step: 0, log: TrainLog::default() })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Builds one batch of (query, key) inputs in `[-1, 1]`.
    fn batch(&mut self, data: &dyn ImageSource, codec: &dyn Codec) -> Result<(Tensor, Tensor)> {
        let res = self.config.encoder.input_res;
        let mut qs = Vec::with_capacity(self.config.batch);
        let mut ks = Vec::with_capacity(self.config.batch);
        for b in 0..self.config.batch {
            let (ia, ib) = self.cursor.next_pair();
            if ia == ib && !self.config.allow_same_content {
                return Err(Error::InvalidState("sampler produced a self-pair".into()));
            }
            let seed = derive_seed(self.config.seed, (stream::PARAMS << 32) ^ ((self.step as u64) << 12) ^ b as u64);
            let (p, _) = self.config.sampler.sample(seed)?;
            let pair = degrade::make_positive_pair(&data.image(ia)?, &data.image(ib)?, &p, codec)?;
            qs.push(imaging::network_input(&pair.query, res));
            ks.push(imaging::network_input(&pair.key, res));
        }
        Ok((Tensor::stack(&qs)?, Tensor::stack(&ks)?))
    }

    /// One contrastive step; returns the loss.
    pub fn step(&mut self, data: &dyn ImageSource, codec: &dyn Codec) -> Result<f64> {
        let (xq, xk) = self.batch(data, codec)?;
        let mut g = Graph::new();
        let qp = self.pair.query.params.bind(&mut g, true);
        let kp = self.pair.key.params.bind(&mut g, false);
        let xq = g.constant(xq);
        let xk = g.constant(xk);
        let (q, stats) = self.pair.query.forward_train(&mut g, &qp, xq)?;
        let (k0, _) = self.pair.key.forward_train(&mut g, &kp, xk)?;
        let negatives = self.queue.ordered();
        let loss = g.info_nce(q, k0, &negatives, self.config.tau, self.config.denominator.include_positive())?;
        let loss_value = g.value(loss).item() / self.config.batch as f64;
        if !loss_value.is_finite() {
            return Err(Error::Divergence(alloc::format!("infonce loss {} at step {}", loss_value, self.step)));
        }
        let grads = g.backward(loss)?;
        let mut gq = self.pair.query.params.collect_grads(&grads, &qp);
        let inv_b = 1.0 / self.config.batch as f64;
        gq.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv_b));
        let lr = cosine_lr(self.config.lr, self.config.lr_min, self.step, self.config.steps);
        self.optimizer.step(&mut self.pair.query.params, &gq, lr)?;
        self.pair.query.track_norm_stats(&stats)?;
        self.pair.momentum_update()?;
        let keys = g.value(k0).clone();
        self.queue.enqueue(&keys)?;
        self.log.entries.push((self.step, loss_value));
        self.step += 1;
        Ok(loss_value)
    }
}

/// Output of [`pretrain_dre`].
pub struct DrePretrainOutput {
    pub pair: EncoderPair,
    pub queue: NegativeQueue,
    pub log: TrainLog,
}

/// Runs the full UDRL schedule. The per-step loss is the batch mean.
pub fn pretrain_dre(data: &dyn ImageSource, codec: &dyn Codec, config: DrePretrainConfig) -> Result<DrePretrainOutput> {
    if data.is_empty() {
        return Err(invalid_arg!("dataset is empty"));
    }
    let steps = config.steps;
    let mut t = DreTrainer::new(config, data.len())?;
    for _ in 0..steps {
        t.step(data, codec)?;
    }
    Ok(DrePretrainOutput { pair: t.pair, queue: t.queue, log: t.log })
}

/// Accuracy of nearest-centroid classification (dot-product similarity on
/// the unit sphere) of `test` embeddings, centroids fitted on `fit`.
pub fn nearest_centroid_accuracy(fit: &Tensor, fit_labels: &[usize], test: &Tensor, test_labels: &[usize]) -> Result<f64> {
    let (nf, d) = fit.dims2();
    if nf != fit_labels.len() || test.shape()[0] != test_labels.len() || test.shape()[1] != d {
        return Err(invalid_arg!("probe: embeddings and labels disagree"));
    }
    let classes = fit_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in fit.data().chunks(d).zip(fit_labels) {
        centroids[l].iter_mut().zip(row).for_each(|(c, v)| *c += v);
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        let norm = libm::sqrt(c.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut correct = 0;
    for (row, &l) in test.data().chunks(d).zip(test_labels) {
        let best = centroids
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[*i] > 0)
            .map(|(i, c)| (i, c.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best.0 == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}
