//! Image, checkpoint and text file IO. Every write goes through a temporary
//! file in the destination directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use panini_core::checkpoint::Checkpoint;
use panini_core::imaging;
use panini_core::FeatureMap;

use crate::error::{Result, ToolError};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| ToolError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ToolError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| ToolError::io(path, e))?;
    tmp.persist(path).map_err(|e| ToolError::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ToolError::io(path, e))
}

/// Loads any supported image as a `3 x H x W` tensor in `[0, 255]`.
pub fn read_image(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| ToolError::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| ToolError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(imaging::from_interleaved_u8(img.as_raw(), 3, h as usize, w as usize))
}

pub fn encode_png(img: &FeatureMap) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(panini_core::Error::InvalidArgument(format!("cannot write a {c}-channel image")).into()),
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &imaging::to_interleaved_u8(img),
        w as u32,
        h as u32,
        color,
    )
    .map_err(|e| panini_core::Error::Codec(e.to_string()))?;
    Ok(out)
}

pub fn write_png(path: &Path, img: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ToolError::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &c.to_bytes())
}
