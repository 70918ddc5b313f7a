//! Artifact persistence: raw little-endian f32 tensor archives with JSON
//! manifests, PNG grid exports, per-epoch loss traces as CSV, and labelled
//! image-set archives. All writes are atomic (temp file + rename) and all
//! formats are deterministic byte for byte given the same inputs.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization, Provenance};
use crate::engine::{SynthBatch, SynthMode};
use crate::losses::LossReport;
use crate::util::{atomic_write, decode_f32_le, encode_f32_le, sha256_hex};
use crate::{Error, Result};

/// Manifest written next to each synthesized batch archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub schema: String,
    pub shape: [usize; 4],
    pub labels: Vec<usize>,
    pub alpha: Vec<[f64; 3]>,
    pub episode_seed: u64,
    pub mode: SynthMode,
    pub config_digest: String,
    pub images_file: String,
    pub images_digest: String,
    pub loss_trace_file: String,
}

/// Manifest for a labelled image-set archive (real or synthesized).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSetManifest {
    pub schema: String,
    pub shape: [usize; 4],
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
    pub normalization: Normalization,
    pub images_file: String,
    pub images_digest: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Writes a 4-D tensor as raw f32 little-endian bytes; returns the digest.
pub fn write_tensor_archive(path: &Path, tensor: &Array4<f64>) -> Result<String> {
    let bytes = encode_f32_le(tensor);
    let digest = sha256_hex(&bytes);
    atomic_write(path, &bytes)?;
    Ok(digest)
}

/// Reads a raw f32 archive into the given shape.
pub fn read_tensor_archive(path: &Path, shape: [usize; 4]) -> Result<Array4<f64>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let data = decode_f32_le(&bytes)?;
    let expect: usize = shape.iter().product();
    if data.len() != expect {
        return Err(Error::shape("tensor archive", expect, data.len()));
    }
    Array4::from_shape_vec(shape, data).map_err(|e| Error::Io(e.to_string()))
}

/// Writes a loss trace as `epoch,total,ce,r_bn,r_tv,r_l2` rows.
pub fn write_loss_csv(path: &Path, trace: &[LossReport]) -> Result<()> {
    let mut out = String::from("epoch,total,ce,r_bn,r_tv,r_l2\n");
    for (e, r) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{e},{},{},{},{},{}\n",
            r.total, r.ce, r.r_bn, r.r_tv, r.r_l2
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// De-normalizes images with the teacher constants, clamps to [0,1], and
/// writes an RGB grid PNG.
pub fn save_png_grid(path: &Path, images: &Array4<f64>, norm: &Normalization) -> Result<()> {
    let (b, c, h, w) = images.dim();
    if c != 3 {
        return Err(Error::shape("png grid channels", 3usize, c));
    }
    let cols = (b as f64).sqrt().ceil() as usize;
    let rows = b.div_ceil(cols);
    let pad = 2usize;
    let grid_w = cols * w + (cols + 1) * pad;
    let grid_h = rows * h + (rows + 1) * pad;
    let mut img = image::RgbImage::new(grid_w as u32, grid_h as u32);
    for n in 0..b {
        let (row, col) = (n / cols, n % cols);
        let oy = pad + row * (h + pad);
        let ox = pad + col * (w + pad);
        for y in 0..h {
            for x in 0..w {
                let px: Vec<u8> = (0..3)
                    .map(|ch| {
                        let v = norm.denormalize(ch, images[[n, ch, y, x]]).clamp(0.0, 1.0);
                        (v * 255.0).round() as u8
                    })
                    .collect();
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px[0], px[1], px[2]]));
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Io(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Persists one synthesized batch: tensor archive, manifest, loss CSV and a
/// PNG grid. Returns the manifest path.
pub fn save_synth_batch(
    dir: &Path,
    index: usize,
    batch: &SynthBatch,
    mode: SynthMode,
    config_digest: &str,
    norm: &Normalization,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("batch_{index:04}");
    let images_file = format!("{stem}.bin");
    let loss_file = format!("{stem}_loss.csv");
    let images_digest = write_tensor_archive(&dir.join(&images_file), &batch.images)?;
    write_loss_csv(&dir.join(&loss_file), &batch.trace)?;
    save_png_grid(&dir.join(format!("{stem}.png")), &batch.images, norm)?;
    let (b, c, h, w) = batch.images.dim();
    let alpha = batch
        .alpha
        .outer_iter()
        .map(|row| [row[0], row[1], row[2]])
        .collect();
    let manifest = SynthManifest {
        schema: "synth-batch/v1".into(),
        shape: [b, c, h, w],
        labels: batch.labels.clone(),
        alpha,
        episode_seed: batch.episode_seed,
        mode,
        config_digest: config_digest.to_string(),
        images_file,
        images_digest,
        loss_trace_file: loss_file,
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Loads every `batch_*.json` manifest under `dir` (sorted by name) back
/// into synthesized batches. Loss traces are not reloaded.
pub fn load_synth_dir(dir: &Path) -> Result<Vec<SynthBatch>> {
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("batch_"))
        })
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(Error::Io(format!(
            "no batch manifests under {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(manifests.len());
    for path in manifests {
        let bytes = std::fs::read(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let manifest: SynthManifest = serde_json::from_slice(&bytes)?;
        if manifest.schema != "synth-batch/v1" {
            return Err(Error::Io(format!("unknown manifest schema {}", manifest.schema)));
        }
        let images = read_tensor_archive(
            &dir.join(&manifest.images_file),
            manifest.shape,
        )?;
        let b = manifest.shape[0];
        let mut alpha = ndarray::Array2::ones((b, 3));
        for (n, row) in manifest.alpha.iter().enumerate() {
            for c in 0..3 {
                alpha[[n, c]] = row[c];
            }
        }
        out.push(SynthBatch {
            images,
            labels: manifest.labels,
            alpha,
            trace: Vec::new(),
            episode_seed: manifest.episode_seed,
        });
    }
    Ok(out)
}

/// Loads a synth directory's images as one concatenated tensor.
pub fn load_synth_images(dir: &Path) -> Result<Array4<f64>> {
    let batches = load_synth_dir(dir)?;
    let (_, c, h, w) = batches[0].images.dim();
    let total: usize = batches.iter().map(|b| b.images.dim().0).sum();
    let mut images = Array4::zeros((total, c, h, w));
    let mut at = 0;
    for b in &batches {
        let n = b.images.dim().0;
        images
            .slice_mut(ndarray::s![at..at + n, .., .., ..])
            .assign(&b.images);
        at += n;
    }
    Ok(images)
}

/// Persists a labelled image set; returns the manifest path.
pub fn save_dataset(dir: &Path, name: &str, data: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let images_file = format!("{name}.bin");
    let images_digest = write_tensor_archive(&dir.join(&images_file), &data.images)?;
    let (b, c, h, w) = data.images.dim();
    let manifest = ImageSetManifest {
        schema: "image-set/v1".into(),
        shape: [b, c, h, w],
        labels: data.labels.clone(),
        num_classes: data.num_classes,
        provenance: data.provenance,
        normalization: data.normalization,
        images_file,
        images_digest,
    };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads an image-set archive from its manifest path.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(manifest_path)
        .map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: ImageSetManifest = serde_json::from_slice(&bytes)?;
    if manifest.schema != "image-set/v1" {
        return Err(Error::Io(format!("unknown image-set schema {}", manifest.schema)));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let images = read_tensor_archive(&dir.join(&manifest.images_file), manifest.shape)?;
    Ok(Dataset {
        images,
        labels: manifest.labels,
        num_classes: manifest.num_classes,
        provenance: manifest.provenance,
        normalization: manifest.normalization,
    })
}
