//! Multi-modal samples, the binary image container and the manifest loader.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmdg_autodiff::Tensor;

use crate::error::{io_err, MmdgError, Result};
use crate::losses::{DomainSet, LIVE, SPOOF};
use crate::modality::{Modality, PerModality};

/// One capture: three `[H, W, 3]` images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub images: PerModality<Tensor>,
    /// 0 live, 1 spoof.
    pub label: usize,
    /// Name of the dataset (domain) the sample comes from.
    pub dataset: String,
    pub subject: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.samples.extend(other.samples);
    }

    pub fn count_label(&self, label: usize) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

/// Stacked samples ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, H, W, 3]` per modality.
    pub images: PerModality<Tensor>,
    pub labels: Vec<usize>,
    /// Prototype domain per sample; empty when built without a domain set.
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks `samples`. With `sources`, every sample's dataset must appear in
    /// it and its prototype domain is recorded.
    pub fn from_samples(
        samples: &[&Sample],
        sources: Option<(&[String], DomainSet)>,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| MmdgError::Data("empty batch".into()))?;
        let shape = first.images[0].shape().to_vec();
        let mut images: PerModality<Vec<f64>> = Default::default();
        let mut labels = Vec::with_capacity(samples.len());
        let mut domains = Vec::new();
        for s in samples {
            for (m, img) in s.images.iter().enumerate() {
                if img.shape() != shape.as_slice() {
                    return Err(MmdgError::Data(format!(
                        "image shape {:?} differs from {shape:?}",
                        img.shape()
                    )));
                }
                images[m].extend_from_slice(img.data());
            }
            if s.label != LIVE && s.label != SPOOF {
                return Err(MmdgError::Data(format!("label {} is not binary", s.label)));
            }
            labels.push(s.label);
            if let Some((names, set)) = sources {
                let k = names.iter().position(|n| *n == s.dataset).ok_or_else(|| {
                    MmdgError::Data(format!("dataset {} is not a training source", s.dataset))
                })?;
                domains.push(set.domain_of(s.label, k)?);
            }
        }
        let mut full = vec![samples.len()];
        full.extend_from_slice(&shape);
        let mut out = Vec::with_capacity(3);
        for data in images {
            out.push(Tensor::new(full.clone(), data)?);
        }
        Ok(Self {
            images: out.try_into().unwrap(),
            labels,
            domains,
        })
    }
}

/// Writes `[H, W, C]` as three little-endian `u64` dimensions followed by the
/// `f64` payload.
pub fn write_bin_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(MmdgError::Data(format!(
            "image must be [H, W, C], got {s:?}"
        )));
    }
    let mut buf = Vec::with_capacity(24 + 8 * image.len());
    for &d in s {
        buf.write_all(&(d as u64).to_le_bytes())
            .map_err(io_err(path))?;
    }
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_bin_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = || MmdgError::Data(format!("{} is not a valid image container", path.display()));
    if bytes.len() < 24 {
        return Err(bad());
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(bad)?;
    if n == 0 || bytes.len() != 24 + 8 * n {
        return Err(bad());
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Bilinear resize of `[H, W, C]` with aligned corners.
pub fn resize(image: &Tensor, size: usize) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if h == size && w == size {
        return image.clone();
    }
    let src = image.data();
    let coord = |i: usize, n: usize| {
        if size == 1 || n == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (size - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(size * size * c);
    for y in 0..size {
        let fy = coord(y, h);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..size {
            let fx = coord(x, w);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Tensor::new(vec![size, size, c], out).expect("positive size")
}

/// Repeats a single channel three times; three-channel input is returned as is.
pub fn to_three_channels(image: Tensor) -> Result<Tensor> {
    let s = image.shape().to_vec();
    match s[2] {
        3 => Ok(image),
        1 => {
            let data = image.data().iter().flat_map(|&v| [v, v, v]).collect();
            Ok(Tensor::new(vec![s[0], s[1], 3], data)?)
        }
        c => Err(MmdgError::Data(format!("unsupported channel count {c}"))),
    }
}

/// Loads one image as `[size, size, 3]` in `[0, 1]`. `.bin` files use the
/// native container; anything else is decoded by extension.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    if !path.exists() {
        return Err(MmdgError::MissingFile(path.to_path_buf()));
    }
    let raw = if path.extension().is_some_and(|e| e == "bin") {
        read_bin_image(path)?
    } else {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (data, c) = match img.color().channel_count() {
            1 | 2 => (img.to_luma8().into_raw(), 1),
            _ => (img.to_rgb8().into_raw(), 3),
        };
        let data = data.into_iter().map(|v| f64::from(v) / 255.0).collect();
        Tensor::new(vec![h, w, c], data)?
    };
    to_three_channels(resize(&raw, size))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub paths: PerModality<PathBuf>,
    pub label: usize,
    pub dataset: String,
    pub subject: String,
}

/// Parsed manifest; images are read on demand.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub fn parse_label(s: &str) -> Option<usize> {
    match s {
        "live" => Some(LIVE),
        "spoof" => Some(SPOOF),
        _ => None,
    }
}

pub fn label_name(label: usize) -> &'static str {
    if label == LIVE {
        "live"
    } else {
        "spoof"
    }
}

/// Reads a tab-separated manifest: rgb, depth, ir paths (relative to the
/// manifest's directory unless absolute), label, dataset, subject. Blank
/// lines and lines starting with `#` are skipped.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(MmdgError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| MmdgError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(err(format!(
                "expected 6 tab-separated fields, found {}",
                f.len()
            )));
        }
        let label = parse_label(f[3])
            .ok_or_else(|| err(format!("label {:?} must be live or spoof", f[3])))?;
        if f[4].is_empty() {
            return Err(err("empty dataset id".into()));
        }
        let paths = [f[0], f[1], f[2]].map(|p| base.join(p));
        records.push(ManifestRecord {
            paths,
            label,
            dataset: f[4].to_string(),
            subject: f[5].to_string(),
        });
    }
    Ok(Manifest { records })
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample(&self, i: usize, image_size: usize) -> Result<Sample> {
        let r = &self.records[i];
        let mut images = Vec::with_capacity(3);
        for m in Modality::ALL {
            images.push(load_image(&r.paths[m.index()], image_size)?);
        }
        Ok(Sample {
            images: images.try_into().unwrap(),
            label: r.label,
            dataset: r.dataset.clone(),
            subject: r.subject.clone(),
        })
    }

    pub fn load_all(&self, image_size: usize) -> Result<Dataset> {
        let samples = (0..self.len())
            .map(|i| self.sample(i, image_size))
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }
}
