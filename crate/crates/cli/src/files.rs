//! On-disk formats: PNG images, dataset directories, curve files,
//! checkpoints, external-pair manifests, and decoded-feature dumps.

use std::fs;
use std::path::{Path, PathBuf};

use cdre_core::codec::{pair_from_entry, ExternalPairEntry, ExternalPairManifest, ImagePair};
use cdre_core::data::{gen_dataset, SyntheticSample, IMAGE_SIDE};
use cdre_core::distortion::DecodedDistortionFeature;
use cdre_core::eval::RateTaskCurve;
use cdre_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Environment variable naming the dataset cache root.
pub const DATA_DIR_ENV: &str = "CDRE_DATA_DIR";

// ---- images -------------------------------------------------------------

/// Writes a `[3, H, W]` tensor in `[0,1]` as an 8-bit RGB PNG.
pub fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(CliError::Data(format!(
            "expected [3, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[c * h * w + y * w + x];
                buf[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    img.save(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Loads an RGB PNG as a `[3, H, W]` tensor in `[0,1]`.
pub fn load_image_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| CliError::Data(e.to_string()))
}

// ---- dataset directory ----------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub config_hash: String,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct DatasetEntry {
    pub index: u64,
    pub label: usize,
    pub file: String,
}

/// Materializes a dataset as PNGs plus a manifest. Byte-identical for
/// identical `(seed, n)`.
pub fn write_dataset(dir: &Path, seed: u64, n: usize) -> Result<DatasetManifest> {
    let samples = gen_dataset(seed, n)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    for s in &samples {
        let file = format!("sample_{:05}.png", s.index);
        save_image_png(&dir.join(&file), &s.to_tensor())?;
        entries.push(DatasetEntry {
            index: s.index,
            label: s.label,
            file,
        });
    }
    let manifest = DatasetManifest {
        seed,
        n,
        config_hash: format!("{:016x}", cdre_core::rng::fnv1a64(
            format!("gen-data seed={seed} n={n}").as_bytes(),
        )),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Regenerates evaluation samples, preferring nothing on disk: rendering
/// is cheap and bit-exact, so the cache directory is only a convenience
/// for inspection and external tools.
pub fn eval_samples(seed: u64, n: usize) -> Result<Vec<SyntheticSample>> {
    Ok(gen_dataset(seed, n)?)
}

// ---- curve files ----------------------------------------------------------

/// Writes a rate-task curve as CSV with provenance headers.
pub fn write_curve(path: &Path, curve: &RateTaskCurve, config_hash: u64) -> Result<()> {
    let mut text = String::new();
    text.push_str("# cdre-curve v1\n");
    text.push_str(&format!("# label = {}\n", curve.label));
    text.push_str(&format!("# config_hash = {config_hash:016x}\n"));
    text.push_str("bpp,metric\n");
    for (b, m) in &curve.points {
        text.push_str(&format!("{b},{m}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parses a curve file written by [`write_curve`].
pub fn read_curve(path: &Path) -> Result<RateTaskCurve> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "curve".into());
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "bpp,metric" {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                if k.trim() == "label" {
                    label = v.trim().to_string();
                }
            }
            continue;
        }
        let (b, m) = line.split_once(',').ok_or_else(|| {
            CliError::Data(format!("{}:{}: expected `bpp,metric`", path.display(), lineno + 1))
        })?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                CliError::Data(format!("{}:{}: bad number `{s}`", path.display(), lineno + 1))
            })
        };
        points.push((parse(b)?, parse(m)?));
    }
    if points.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no curve points",
            path.display()
        )));
    }
    Ok(RateTaskCurve { label, points })
}

// ---- checkpoints ------------------------------------------------------------

pub fn write_checkpoint(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

// ---- external pair manifests -------------------------------------------------

/// Reads a JSON manifest of externally coded image pairs.
pub fn read_pair_manifest(path: &Path) -> Result<ExternalPairManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    #[derive(Deserialize)]
    struct Entry {
        original_path: String,
        compressed_path: String,
        base_bpp: f64,
    }
    let entries: Vec<Entry> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let manifest = ExternalPairManifest {
        entries: entries
            .into_iter()
            .map(|e| ExternalPairEntry {
                original_path: e.original_path,
                compressed_path: e.compressed_path,
                base_bpp: e.base_bpp,
            })
            .collect(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Loads every pair of a manifest, resolving paths relative to the
/// manifest location.
pub fn load_external_pairs(path: &Path) -> Result<Vec<ImagePair>> {
    let manifest = read_pair_manifest(path)?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let orig = load_image_png(&base.join(&e.original_path))?;
        let comp = load_image_png(&base.join(&e.compressed_path))?;
        let label = format!("entry {i} ({})", e.original_path);
        pairs.push(pair_from_entry(&label, orig, comp, e.base_bpp)?);
    }
    Ok(pairs)
}

// ---- decoded feature dumps -----------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"CDFT";

/// Binary dump of a decoded distortion feature.
pub fn write_feature(path: &Path, feature: &DecodedDistortionFeature) -> Result<()> {
    let (variant, tensor) = match feature {
        DecodedDistortionFeature::Spatial(t) => (0u8, t),
        DecodedDistortionFeature::Tokens(t) => (1u8, t),
    };
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(1); // version
    out.push(variant);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_feature(path: &Path) -> Result<DecodedDistortionFeature> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let bad = |what: &str| CliError::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 7 || &bytes[0..4] != FEATURE_MAGIC || bytes[4] != 1 {
        return Err(bad("not a decoded-feature file"));
    }
    let variant = bytes[5];
    let rank = bytes[6] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if pos + 4 > bytes.len() {
            return Err(bad("truncated header"));
        }
        shape.push(u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    if bytes.len() != pos + 8 * n {
        return Err(bad("payload size mismatch"));
    }
    let data = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tensor = Tensor::new(&shape, data).map_err(|e| CliError::Data(e.to_string()))?;
    match variant {
        0 => Ok(DecodedDistortionFeature::Spatial(tensor)),
        1 => Ok(DecodedDistortionFeature::Tokens(tensor)),
        _ => Err(bad("unknown feature variant")),
    }
}

/// Validates that an image has the dataset's native geometry.
pub fn check_native_size(t: &Tensor) -> Result<()> {
    if t.dim(1) != IMAGE_SIDE || t.dim(2) != IMAGE_SIDE {
        return Err(CliError::Data(format!(
            "expected {IMAGE_SIDE}x{IMAGE_SIDE} input, got {}x{}",
            t.dim(1),
            t.dim(2)
        )));
    }
    Ok(())
}
