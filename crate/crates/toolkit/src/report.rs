//! CSV tables, text summaries and image grids.

use std::fmt::Write as _;
use std::path::Path;

use panini_core::dafi::InterpolationMask;
use panini_core::kv::Kv;
use panini_core::{FeatureMap, Tensor};

use crate::error::Result;
use crate::io;

#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for line in std::iter::once(&self.header).chain(&self.rows) {
            let fields: Vec<String> = line.iter().map(|f| escape(f)).collect();
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_text().as_bytes())
    }
}

/// Fixed-precision float for reports, so reruns print identical text.
pub fn num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn train_log_csv(entries: &[(usize, f64)]) -> Csv {
    let mut c = Csv::new(&["step", "loss"]);
    for (s, l) in entries {
        c.push(vec![s.to_string(), format!("{l:e}")]);
    }
    c
}

/// One `mask_level<i>.csv` per fused level with the prior-side weights.
pub fn write_mask_csvs(dir: &Path, masks: &[InterpolationMask]) -> Result<()> {
    for m in masks {
        let mut c = Csv::new(&["channel", "weight"]);
        for (k, w) in m.weights().iter().enumerate() {
            c.push(vec![k.to_string(), format!("{w:e}")]);
        }
        c.write(&dir.join(format!("mask_level{}.csv", m.level)))?;
    }
    Ok(())
}

/// Human summary: a title, `label: value` lines and the full config echo.
pub fn summary(title: &str, lines: &[(String, String)], config: &Kv) -> String {
    let mut s = format!("{title}\n\n");
    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in lines {
        let _ = writeln!(s, "{k:<width$}  {v}");
    }
    s.push_str("\nconfig:\n");
    for l in config.to_text().lines() {
        let _ = writeln!(s, "  {l}");
    }
    s
}

/// Tiles images (already `tile` pixels square) into a `rows x cols` mosaic
/// without gaps.
pub fn grid(rows: &[Vec<FeatureMap>], tile: usize) -> Result<FeatureMap> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(panini_core::Error::InvalidArgument("grid rows must be non-empty and equally long".into()).into());
    }
    let (h, w) = (nr * tile, nc * tile);
    let mut out = Tensor::zeros(&[3, h, w]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let t = if img.shape() == [3, tile, tile] {
                img.clone()
            } else {
                panini_core::imaging::resize_bilinear(img, tile, tile)
            };
            for k in 0..3 {
                for y in 0..tile {
                    let src = &t.data()[(k * tile + y) * tile..][..tile];
                    out.data_mut()[(k * h + r * tile + y) * w + c * tile..][..tile].copy_from_slice(src);
                }
            }
        }
    }
    Ok(panini_core::imaging::quantize(&out))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_when_needed() {
        let mut c = Csv::new(&["a", "b"]);
        c.push(vec!["x,y".into(), "q\"".into()]);
        assert_eq!(c.to_text(), "a,b\n\"x,y\",\"q\"\"\"\n");
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::full(&[3, 4, 4], 10.0);
        let b = Tensor::full(&[3, 4, 4], 200.0);
        let g = grid(&[vec![a.clone(), b.clone(), a.clone()], vec![b, a.clone(), a]], 4).unwrap();
        assert_eq!(g.shape(), &[3, 8, 12]);
        assert_eq!(g.data()[4], 200.0);
        assert_eq!(g.data()[4 * 12], 200.0);
        assert!(grid(&[vec![], vec![]], 4).is_err());
    }

    #[test]
    fn mask_dump_has_channel_weight_columns() {
        let dir = tempfile::tempdir().unwrap();
        let m = InterpolationMask::new(2, vec![0.25, 0.75]).unwrap();
        write_mask_csvs(dir.path(), &[m]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("mask_level2.csv")).unwrap();
        assert_eq!(text, "channel,weight\n0,2.5e-1\n1,7.5e-1\n");
    }

    #[test]
    fn moments() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
