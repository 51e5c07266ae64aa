//! Image folders and synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};

use panini_core::drep::ImageSource;
use panini_core::imaging;
use panini_core::kv::Kv;
use panini_core::synth::{self, FaceParams};
use panini_core::FeatureMap;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result, ToolError};
use crate::io;

pub const MANIFEST: &str = "manifest.txt";

fn image_name(i: usize) -> String {
    format!("face_{i:06}.png")
}

/// Writes `n` synthetic faces plus a manifest with one line of generation
/// parameters per image.
pub fn synth_dataset(dir: &Path, n: usize, res: usize, seed: u64) -> Result<()> {
    let faces = synth::face_dataset(n, res, seed)?;
    let mut manifest = format!("# synthetic faces: n = {n}, res = {res}, seed = {seed}\n");
    for (i, (p, img)) in faces.iter().enumerate() {
        io::write_png(&dir.join(image_name(i)), img)?;
        manifest.push_str(&format!("file={} index={} {}\n", image_name(i), i, p.to_line()));
    }
    io::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Parameters of every manifest entry, keyed by file name.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, FaceParams)>> {
    let text = io::read_text(&dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let file = l
                .split_whitespace()
                .find_map(|t| t.strip_prefix("file="))
                .ok_or_else(|| config_err!("manifest line without `file=`"))?;
            Ok((file.to_string(), FaceParams::from_line(l)?))
        })
        .collect()
}

/// SHA-256 over the sorted file names and contents of a folder.
pub fn folder_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in list_files(dir, |_| true)? {
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = fs::read(&p).map_err(|e| ToolError::io(&p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn list_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| ToolError::io(dir, e))? {
        let p = e.map_err(|e| ToolError::io(dir, e))?.path();
        if p.is_file() && keep(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Images held in memory, all resized to one square resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<FeatureMap>,
}

impl Dataset {
    /// Loads every PNG/JPEG of a folder in name order.
    pub fn from_dir(dir: &Path, res: usize) -> Result<Self> {
        let files = list_files(dir, is_image)?;
        if files.is_empty() {
            return Err(config_err!("no images in {}", dir.display()));
        }
        let mut names = Vec::new();
        let mut images = Vec::new();
        for f in files {
            names.push(f.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            images.push(fit(&io::read_image(&f)?, res));
        }
        Ok(Self { names, images })
    }

    pub fn synthetic(n: usize, res: usize, seed: u64) -> Result<Self> {
        let faces = synth::face_dataset(n, res, seed)?;
        Ok(Self {
            names: (0..n).map(image_name).collect(),
            images: faces.into_iter().map(|(_, img)| img).collect(),
        })
    }

    /// Contiguous sub-range `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> Result<Self> {
        let end = start.checked_add(count).filter(|&e| e <= self.images.len() && count > 0);
        let end = end.ok_or_else(|| config_err!("range {start}+{count} outside a dataset of {}", self.images.len()))?;
        Ok(Self { names: self.names[start..end].to_vec(), images: self.images[start..end].to_vec() })
    }

    /// From `data.dir` or `data.synth.{n,seed}` at `res`, restricted to
    /// `data.start` / `data.count` when given.
    pub fn from_kv(kv: &Kv, res: usize) -> Result<Self> {
        let all = match kv.get_str("data.dir") {
            Some(d) => Self::from_dir(Path::new(d), res)?,
            None => {
                let n = kv.get::<usize>("data.synth.n")?.ok_or_else(|| config_err!("need `data.dir` or `data.synth.n`"))?;
                Self::synthetic(n, res, kv.get_or("data.synth.seed", 0)?)?
            }
        };
        let start = kv.get_or("data.start", 0)?;
        let count = kv.get_or("data.count", all.len().saturating_sub(start))?;
        all.slice(start, count)
    }
}

/// Square crop from the center, then bilinear resize.
fn fit(img: &FeatureMap, res: usize) -> FeatureMap {
    let (c, h, w) = img.dims3();
    let s = h.min(w);
    let cropped = if h == w {
        img.clone()
    } else {
        let (y0, x0) = ((h - s) / 2, (w - s) / 2);
        let mut out = FeatureMap::zeros(&[c, s, s]);
        let src = img.data();
        for k in 0..c {
            for y in 0..s {
                let row = &src[(k * h + y + y0) * w + x0..][..s];
                out.data_mut()[(k * s + y) * s..][..s].copy_from_slice(row);
            }
        }
        out
    };
    if s == res {
        cropped
    } else {
        imaging::resize_bilinear(&cropped, res, res)
    }
}

impl ImageSource for Dataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, idx: usize) -> panini_core::Result<FeatureMap> {
        self.images.image(idx)
    }
}
