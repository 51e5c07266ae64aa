//! Parameter storage, layers and the optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Leaky-ReLU slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter tensors for one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every tensor of a [`ParamStore`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the graph; `trainable` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Gradients aligned with the store; zeros where no gradient flowed.
    pub fn collect_grads(&self, grads: &Grads, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars()
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Replaces all tensors, checking names and shapes pairwise.
    pub fn load_from(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names.len() != self.names.len() {
            let first = self
                .names
                .iter()
                .zip(names)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone())
                .or_else(|| self.names.get(names.len()).cloned())
                .or_else(|| names.get(self.names.len()).cloned())
                .unwrap_or_default();
            return Err(Error::Incompatible(alloc::format!(
                "expected {} tensors, found {}; first offending tensor `{}`",
                self.names.len(),
                names.len(),
                first
            )));
        }
        for ((own, t), (name, new)) in self.names.iter().zip(&self.tensors).zip(names.iter().zip(&tensors)) {
            if own != name || t.shape() != new.shape() {
                return Err(Error::Incompatible(alloc::format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    name,
                    new.shape(),
                    own,
                    t.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

fn he_std(fan_in: usize) -> f64 {
    libm::sqrt(2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized convolution with `pad = k / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            Tensor::randn(&[cout, cin, k, k], he_std(cin * k * k), rng),
        );
        let b = bias.then(|| store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { w, b, cin, cout, k, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.pad)
    }

    pub fn num_scalars(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.b.is_some() { self.cout } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            Tensor::randn(&[out, inp], he_std(inp), rng),
        );
        let b = bias.then(|| store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[out])));
        Self { w, b, inp, out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }

    pub fn num_scalars(&self) -> usize {
        self.out * self.inp + if self.b.is_some() { self.out } else { 0 }
    }
}

/// Style-modulated convolution with weight demodulation.
///
/// Computed as `demod(conv(x * s, w))` where `s = affine(w_row)` scales input
/// channels and `demod[b,o] = 1/sqrt(sum_{i,k} (s[b,i] w[o,i,k])^2 + 1e-8)`,
/// which equals convolving with the per-sample modulated-and-normalized kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModulatedConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub style: Linear,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub const DEMOD_EPS: f64 = 1e-8;

impl ModulatedConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, latent_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            Tensor::randn(&[cout, cin, k, k], 1.0, rng),
        );
        let style_w = store.add(
            &alloc::format!("{name}.style.weight"),
            Tensor::randn(&[cin, latent_dim], 1.0 / libm::sqrt(latent_dim as f64), rng),
        );
        let style_b = store.add(&alloc::format!("{name}.style.bias"), Tensor::full(&[cin], 1.0));
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            style: Linear { w: style_w, b: Some(style_b), inp: latent_dim, out: cin },
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, w_row: Var) -> Result<Var> {
        let s = self.style.forward(g, p, w_row)?;
        let xs = g.scale_channels(x, s)?;
        let w = p.var(self.weight);
        let y = g.conv2d(xs, w, None, 1, self.k / 2)?;
        let wsq = g.square(w);
        let wsq = g.reshape(wsq, &[self.cout, self.cin, self.k * self.k])?;
        let wsq = g.sum_last_axis(wsq)?;
        let s2 = g.square(s);
        let energy = g.matmul_nt(s2, wsq)?;
        let demod = g.rsqrt(energy, DEMOD_EPS);
        let y = g.scale_channels(y, demod)?;
        g.bias_channels(y, p.var(self.bias))
    }
}

/// Cosine-annealed learning rate from `base` down to `min` over `total` steps.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + libm::cos(PI * t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1, beta2, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; a zero learning rate leaves parameters bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(invalid_arg!("adam: {} grads for {} params", grads.len(), store.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                if lr != 0.0 {
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (libm::sqrt(vhat) + self.eps);
                }
            }
        }
        Ok(())
    }
}
