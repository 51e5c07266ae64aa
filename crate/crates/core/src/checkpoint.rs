//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `PNNICKPT`, `u32` version, `u32` section
//! count, then per section its name, its `key = value` config text and its
//! tensors (name, `u32` rank, `u64` dims, `f64` values). A SHA-256 of all
//! preceding bytes closes the file. Strings are `u32` length plus UTF-8.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::drep::{Dre, DreConfig, EncoderPair, NegativeQueue};
use crate::error::{Error, Result};
use crate::gpm::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::kv::Kv;
use crate::nn::ParamStore;
use crate::panini::{PaniniConfig, PaniniModel};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"PNNICKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub config: Kv,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(name: &str, config: Kv) -> Self {
        Self { name: name.to_string(), config, tensors: Vec::new() }
    }

    pub fn from_store(name: &str, config: Kv, store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { name: name.to_string(), config, tensors }
    }

    /// Copies tensors into `store`, which must have the same names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = self.tensors.iter().map(|(n, _)| n.clone()).collect();
        let tensors = self.tensors.iter().map(|(_, t)| t.clone()).collect();
        store
            .load_from(&names, tensors)
            .map_err(|e| Error::Incompatible(format!("section `{}`: {}", self.name, e)))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Incompatible(format!("section `{}` has no tensor `{}`", self.name, name)))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8 string".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no `{}` section", name)))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_str(&mut out, &s.config.to_text());
            out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Incompatible(format!("checkpoint version {} (supported: {})", version, VERSION)));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let want: [u8; 32] = Sha256::digest(body).into();
        if want[..] != digest[..] {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let config = Kv::parse(&r.string()?).map_err(|e| Error::Corrupt(format!("section `{}` config: {}", name, e)))?;
            let n_tensors = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n_tensors {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank.min(8));
                for _ in 0..rank {
                    shape.push(r.u64()? as usize);
                }
                let n = numel(&shape);
                let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                tensors.push((tname, Tensor::from_vec(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))?));
            }
            sections.push(Section { name, config, tensors });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { sections })
    }
}

fn kv_with(f: impl FnOnce(&mut Kv)) -> Kv {
    let mut kv = Kv::new();
    f(&mut kv);
    kv
}

pub fn dre_section(name: &str, dre: &Dre) -> Section {
    Section::from_store(name, kv_with(|kv| dre.config().to_kv(kv, "")), dre.params())
}

pub fn load_dre_section(s: &Section) -> Result<Dre> {
    let mut dre = Dre::new(DreConfig::from_kv(&s.config, "")?, 0)?;
    s.load_into(dre.params_mut())?;
    Ok(dre)
}

pub fn queue_section(q: &NegativeQueue) -> Section {
    let (buffer, len, cursor) = q.raw_parts();
    let mut s = Section::new(
        "queue",
        kv_with(|kv| {
            kv.set("len", len);
            kv.set("cursor", cursor);
        }),
    );
    s.tensors.push(("buffer".to_string(), buffer.clone()));
    s
}

pub fn load_queue_section(s: &Section) -> Result<NegativeQueue> {
    let buffer = s.tensor("buffer")?.clone();
    if buffer.rank() != 2 {
        return Err(Error::Corrupt("queue buffer must be a matrix".into()));
    }
    let len = s.config.get("len")?.ok_or_else(|| Error::Corrupt("queue without len".into()))?;
    let cursor = s.config.get("cursor")?.ok_or_else(|| Error::Corrupt("queue without cursor".into()))?;
    NegativeQueue::from_raw_parts(buffer, len, cursor)
}

/// Query encoder, momentum encoder and negative queue.
pub fn dre_checkpoint(pair: &EncoderPair, queue: &NegativeQueue, meta: Kv) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.push(Section::new("meta", meta));
    let mut q = dre_section("dre", &pair.query);
    q.config.set("momentum", pair.momentum);
    c.push(q);
    c.push(dre_section("dre_key", &pair.key));
    c.push(queue_section(queue));
    c
}

pub fn load_dre(c: &Checkpoint) -> Result<Dre> {
    load_dre_section(c.section("dre")?)
}

pub fn load_dre_training(c: &Checkpoint) -> Result<(EncoderPair, NegativeQueue)> {
    let s = c.section("dre")?;
    let query = load_dre_section(s)?;
    let key = load_dre_section(c.section("dre_key")?)?;
    let momentum = s.config.get_or("momentum", 0.999)?;
    Ok((EncoderPair { query, key, momentum }, load_queue_section(c.section("queue")?)?))
}

pub fn generator_section(g: &Generator) -> Section {
    Section::from_store("generator", kv_with(|kv| g.config().to_kv(kv, "")), g.params())
}

pub fn discriminator_section(d: &Discriminator) -> Section {
    Section::from_store("discriminator", kv_with(|kv| d.config().to_kv(kv, "")), d.params())
}

pub fn gpm_checkpoint(g: &Generator, d: &Discriminator, meta: Kv) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.push(Section::new("meta", meta));
    c.push(generator_section(g));
    c.push(discriminator_section(d));
    c
}

/// Loads the generator, optionally requiring a specific configuration.
pub fn load_generator(c: &Checkpoint, expect: Option<&GeneratorConfig>) -> Result<Generator> {
    let s = c.section("generator")?;
    let cfg = GeneratorConfig::from_kv(&s.config, "")?;
    if let Some(e) = expect {
        if e != &cfg {
            let mut a = Kv::new();
            e.to_kv(&mut a, "");
            let mut b = Kv::new();
            cfg.to_kv(&mut b, "");
            let keys: Vec<&str> = a.iter().filter(|(k, v)| b.get_str(k) != Some(v)).map(|(k, _)| k).collect();
            return Err(Error::Incompatible(format!("generator config differs at `{}`", keys.join("`, `"))));
        }
    }
    let mut g = Generator::new(cfg, 0)?;
    s.load_into(g.params_mut())?;
    Ok(g)
}

pub fn load_discriminator(c: &Checkpoint) -> Result<Discriminator> {
    let s = c.section("discriminator")?;
    let mut d = Discriminator::new(DiscriminatorConfig::from_kv(&s.config, "")?, 0)?;
    s.load_into(d.params_mut())?;
    Ok(d)
}

pub fn panini_checkpoint(m: &PaniniModel, d: Option<&Discriminator>, meta: Kv) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.push(Section::new("meta", meta));
    c.push(Section::new("model", kv_with(|kv| m.config().to_kv(kv))));
    c.push(generator_section(m.generator()));
    c.push(Section::from_store("ife", Kv::new(), m.ife().params()));
    c.push(Section::from_store("fusion", Kv::new(), m.fusion_params()));
    if let Some(dre) = m.dre() {
        c.push(dre_section("dre", dre));
    }
    if let Some(d) = d {
        c.push(discriminator_section(d));
    }
    c
}

pub fn load_panini(c: &Checkpoint) -> Result<(PaniniModel, Option<Discriminator>)> {
    let cfg = PaniniConfig::from_kv(&c.section("model")?.config)?;
    let gen = load_generator(c, Some(&cfg.generator))?;
    let dre = if c.has_section("dre") { Some(load_dre(c)?) } else { None };
    let mut m = PaniniModel::new(cfg, gen, dre, 0)?;
    c.section("ife")?.load_into(m.ife_mut().params_mut())?;
    c.section("fusion")?.load_into(m.fusion_params_mut())?;
    let d = if c.has_section("discriminator") { Some(load_discriminator(c)?) } else { None };
    Ok((m, d))
}

pub fn meta(c: &Checkpoint) -> Kv {
    c.section("meta").map(|s| s.config.clone()).unwrap_or_default()
}
