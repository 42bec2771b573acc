//! Bit-exact dataset directory format.
//!
//! A dataset directory holds `meta.json` plus, per sample, `<id>.img.raw`
//! (row-major 32-bit little-endian floats) and `<id>.cls<k>.mask.raw` (one
//! byte per pixel, 0 or 1). Optional `<id>.pgm` previews are derived output
//! only and never read back.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    height: usize,
    width: usize,
    num_classes: usize,
    samples: Vec<MetaSample>,
}

#[derive(Serialize, Deserialize)]
struct MetaSample {
    id: String,
    classes: Vec<usize>,
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Writes a dataset directory (creating it if needed).
pub fn save_dataset(samples: &[ImageSample], dir: &Path) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("cannot save an empty dataset".into()))?;
    let (h, w, _) = first.image.dims3()?;
    let num_classes = samples.iter().flat_map(|s| s.masks.keys()).max().map_or(0, |&k| k + 1);
    fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;

    let mut meta = Meta { version: 1, height: h, width: w, num_classes, samples: Vec::new() };
    for sample in samples {
        let (sh, sw, sc) = sample.image.dims3()?;
        if (sh, sw, sc) != (h, w, 1) {
            return Err(Error::shape(format!(
                "sample {} has shape {sh}×{sw}×{sc}, expected {h}×{w}×1",
                sample.sample_id
            )));
        }
        let img_path = dir.join(format!("{}.img.raw", sample.sample_id));
        let bytes: Vec<u8> =
            sample.image.values().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&img_path, bytes).map_err(|e| io_context(&img_path, e))?;

        for (&class, mask) in &sample.masks {
            if mask.shape() != sample.image.shape() {
                return Err(Error::shape(format!(
                    "sample {} class {class}: mask shape differs from image",
                    sample.sample_id
                )));
            }
            let mask_path = dir.join(format!("{}.cls{class}.mask.raw", sample.sample_id));
            let bytes: Vec<u8> =
                mask.values().iter().map(|&v| if v > 0.5 { 1u8 } else { 0u8 }).collect();
            fs::write(&mask_path, bytes).map_err(|e| io_context(&mask_path, e))?;
        }
        meta.samples.push(MetaSample {
            id: sample.sample_id.clone(),
            classes: sample.masks.keys().copied().collect(),
        });
    }

    let meta_path = dir.join("meta.json");
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    fs::write(&meta_path, json).map_err(|e| io_context(&meta_path, e))?;
    Ok(())
}

/// Reads a dataset directory back; the round trip through
/// [`save_dataset`] is bitwise lossless.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| io_context(&meta_path, e))?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    if meta.version != 1 {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected 1)",
            meta.version
        )));
    }
    let (h, w) = (meta.height, meta.width);
    let n = h * w;

    let mut samples = Vec::with_capacity(meta.samples.len());
    for entry in &meta.samples {
        let img_path = dir.join(format!("{}.img.raw", entry.id));
        let bytes = fs::read(&img_path).map_err(|e| io_context(&img_path, e))?;
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "{}: {} bytes, expected {}×{}×4 = {}",
                img_path.display(),
                bytes.len(),
                h,
                w,
                n * 4
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let image = Tensor::new(vec![h, w, 1], values)?;

        let mut masks = BTreeMap::new();
        let mut coverage = vec![false; n];
        for &class in &entry.classes {
            let mask_path = dir.join(format!("{}.cls{class}.mask.raw", entry.id));
            let bytes = fs::read(&mask_path).map_err(|e| io_context(&mask_path, e))?;
            if bytes.len() != n {
                return Err(Error::Format(format!(
                    "{}: {} bytes, expected {n}",
                    mask_path.display(),
                    bytes.len()
                )));
            }
            let mut any = false;
            let mut values = Vec::with_capacity(n);
            for (i, &b) in bytes.iter().enumerate() {
                match b {
                    0 => values.push(0.0f32),
                    1 => {
                        if coverage[i] {
                            return Err(Error::Format(format!(
                                "{}: overlaps another class mask at pixel {i}",
                                mask_path.display()
                            )));
                        }
                        coverage[i] = true;
                        any = true;
                        values.push(1.0);
                    }
                    other => {
                        return Err(Error::Format(format!(
                            "{}: byte {other} at pixel {i} is not a 0/1 mask value",
                            mask_path.display()
                        )))
                    }
                }
            }
            if !any {
                return Err(Error::Format(format!(
                    "{}: class {class} is listed but its mask is empty",
                    mask_path.display()
                )));
            }
            masks.insert(class, Tensor::new(vec![h, w, 1], values)?);
        }
        samples.push(ImageSample { sample_id: entry.id.clone(), image, masks });
    }
    Ok(samples)
}

/// Writes a grayscale tensor as a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("PGM export expects one channel, got {c}")));
    }
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n255\n").expect("writing to a Vec cannot fail");
    out.extend(image.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| io_context(path, e))
}

/// Writes one `<id>.pgm` preview per sample alongside the raw files.
pub fn export_pgms(samples: &[ImageSample], dir: &Path) -> Result<()> {
    for sample in samples {
        write_pgm(&dir.join(format!("{}.pgm", sample.sample_id)), &sample.image)?;
    }
    Ok(())
}
