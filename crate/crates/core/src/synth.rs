//! Procedural multi-modal captures with per-domain appearance shift, spoof
//! textures that each live in a single modality, and optional noisy patches
//! stamped into depth and infrared.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmdg_autodiff::{CounterRng, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{label_name, to_three_channels, write_bin_image, Dataset, Sample};
use crate::error::{io_err, MmdgError, Result};
use crate::losses::{LIVE, SPOOF};
use crate::modality::{Modality, PerModality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Chance that a depth or infrared image receives one noisy patch.
    pub probability: f64,
    pub patch_size: usize,
    /// Half-width of the uniform noise around mid-gray.
    pub amplitude: f64,
}

/// Horizontal sinusoidal grating added to spoofs in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureSpec {
    /// Whole cycles across the image width, per modality.
    pub cycles: PerModality<usize>,
    pub amplitude: PerModality<f64>,
    /// Half-width of the uniform random phase offset, in radians.
    pub phase_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub image_size: usize,
    /// Base skin color.
    pub palette: [f64; 3],
    /// Brightness gain per modality.
    pub gain: PerModality<f64>,
    /// Standard deviation of pixel noise per modality.
    pub noise: PerModality<f64>,
    pub signature: SignatureSpec,
    pub corruption: CorruptionSpec,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(MmdgError::Config(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        if self.noise.iter().any(|&n| !(n >= 0.0)) {
            return Err(MmdgError::Config(format!(
                "noise levels {:?} must be nonnegative",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption.probability) {
            return Err(MmdgError::Config(format!(
                "corruption probability {} outside [0, 1]",
                self.corruption.probability
            )));
        }
        if self.corruption.patch_size > self.image_size {
            return Err(MmdgError::Config(
                "corruption patch larger than the image".into(),
            ));
        }
        Ok(())
    }

    pub fn with_corruption_probability(mut self, p: f64) -> Self {
        self.corruption.probability = p;
        self
    }
}

pub const PRESET_NAMES: [&str; 4] = ["c", "p", "s", "w"];

/// Built-in domains `c`, `p`, `s` and `w`.
pub fn preset(name: &str, image_size: usize) -> Result<DomainSpec> {
    let (palette, gain, noise, corruption) = match name {
        "c" => (
            [0.62, 0.46, 0.38],
            [1.00, 0.90, 1.05],
            [0.020, 0.020, 0.025],
            0.15,
        ),
        "p" => (
            [0.48, 0.40, 0.42],
            [0.85, 1.10, 0.90],
            [0.030, 0.015, 0.020],
            0.10,
        ),
        "s" => (
            [0.70, 0.58, 0.46],
            [1.10, 1.00, 0.80],
            [0.015, 0.030, 0.030],
            0.20,
        ),
        "w" => (
            [0.42, 0.36, 0.30],
            [0.95, 0.80, 1.15],
            [0.025, 0.025, 0.015],
            0.10,
        ),
        _ => return Err(MmdgError::Config(format!("unknown domain preset {name:?}"))),
    };
    let cycles = (image_size / 4).max(1);
    Ok(DomainSpec {
        id: name.to_string(),
        image_size,
        palette,
        gain,
        noise,
        signature: SignatureSpec {
            cycles: [cycles, cycles / 2 + 1, cycles],
            amplitude: [0.08, 0.10, 0.10],
            phase_jitter: 0.0,
        },
        corruption: CorruptionSpec {
            probability: corruption,
            patch_size: (image_size / 4).max(1),
            amplitude: 0.5,
        },
    })
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Independent generator for stream `stream` of sample `index`.
fn sample_rng(spec: &DomainSpec, seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let key = CounterRng::new(seed).derive(fnv1a(&spec.id));
    ChaCha8Rng::seed_from_u64(key.bits(stream, index as u64))
}

/// Spoof samples cycle through the modality that carries their texture.
pub fn spoof_modality(spoof_index: usize) -> Modality {
    Modality::from_index(spoof_index % 3)
}

/// A noisy square in one modality: `(modality, top, left, size)`.
pub type Stamp = (Modality, usize, usize, usize);

/// Positions of the noisy patches stamped into sample `index`.
pub fn corruption_stamps(spec: &DomainSpec, seed: u64, index: usize) -> Vec<Stamp> {
    let mut rng = sample_rng(spec, seed, index, 1);
    let c = &spec.corruption;
    let room = spec.image_size - c.patch_size + 1;
    let mut out = Vec::new();
    for m in [Modality::Depth, Modality::Infrared] {
        let hit = rng.gen::<f64>() < c.probability;
        let top = rng.gen_range(0..room);
        let left = rng.gen_range(0..room);
        if hit && c.patch_size > 0 {
            out.push((m, top, left, c.patch_size));
        }
    }
    out
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    1.0 / (1.0 + (-x / edge).exp())
}

/// Clean rendering of sample `index` as single-plane images (`[H, W]`, RGB as
/// `[H, W, 3]`).
fn render(
    spec: &DomainSpec,
    seed: u64,
    index: usize,
    spoof: Option<Modality>,
) -> PerModality<Vec<f64>> {
    let n = spec.image_size;
    let nf = n as f64;
    let mut rng = sample_rng(spec, seed, index, 0);
    let cy = nf * (0.5 + rng.gen_range(-0.06..0.06));
    let cx = nf * (0.5 + rng.gen_range(-0.06..0.06));
    let ry = nf * rng.gen_range(0.30..0.38);
    let rx = nf * rng.gen_range(0.22..0.30);
    let eye_dy = ry * 0.25;
    let eye_dx = rx * 0.45;
    let eye_r = nf * 0.05;
    let tint: f64 = rng.gen_range(-0.05..0.05);
    let phase = spec.signature.phase_jitter * rng.gen_range(-1.0..=1.0);
    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut depth = Vec::with_capacity(n * n);
    let mut ir = Vec::with_capacity(n * n);
    let mut noise = |sd: f64| sd * 3f64.sqrt() * rng.gen_range(-1.0..1.0);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let r2 = ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2);
            let face = smoothstep(0.08, 1.0 - r2);
            let eyes = [-1.0, 1.0]
                .iter()
                .map(|s| {
                    let d2 = (fy - (cy - eye_dy)).powi(2) + (fx - (cx + s * eye_dx)).powi(2);
                    (-d2 / (2.0 * eye_r * eye_r)).exp()
                })
                .sum::<f64>();
            let grating = |m: Modality| match spoof {
                Some(s) if s == m => {
                    let k = spec.signature.cycles[m.index()] as f64;
                    spec.signature.amplitude[m.index()]
                        * (std::f64::consts::TAU * k * x as f64 / nf + phase).sin()
                }
                _ => 0.0,
            };
            let g = spec.gain;
            for ch in 0..3 {
                let skin = spec.palette[ch] + tint;
                let bg = 0.5 * spec.palette[2 - ch] + 0.1;
                let v = g[0] * (bg + face * (skin - bg) - 0.25 * face * eyes);
                rgb.push((v + grating(Modality::Rgb) + noise(spec.noise[0])).clamp(0.0, 1.0));
            }
            let dome = (1.0 - r2).max(0.0).sqrt();
            let d = g[1] * (0.2 + 0.5 * face * (0.4 + 0.6 * dome));
            depth.push((d + grating(Modality::Depth) + noise(spec.noise[1])).clamp(0.0, 1.0));
            let t = g[2] * (0.22 + 0.45 * face - 0.15 * face * eyes);
            ir.push((t + grating(Modality::Infrared) + noise(spec.noise[2])).clamp(0.0, 1.0));
        }
    }
    [rgb, depth, ir]
}

fn stamp(spec: &DomainSpec, seed: u64, index: usize, planes: &mut PerModality<Vec<f64>>) {
    let mut rng = sample_rng(spec, seed, index, 2);
    let n = spec.image_size;
    let a = spec.corruption.amplitude;
    for (m, top, left, size) in corruption_stamps(spec, seed, index) {
        let plane = &mut planes[m.index()];
        for y in top..top + size {
            for x in left..left + size {
                plane[y * n + x] = (0.5 + a * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
            }
        }
    }
}

/// `n_live` live captures followed by `n_spoof` spoofs, reproducible from
/// `(spec, seed)`.
pub fn generate_domain(
    spec: &DomainSpec,
    n_live: usize,
    n_spoof: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if n_live == 0 || n_spoof == 0 {
        return Err(MmdgError::Config(
            "both live and spoof counts must be positive".into(),
        ));
    }
    let n = spec.image_size;
    let mut samples = Vec::with_capacity(n_live + n_spoof);
    for index in 0..n_live + n_spoof {
        let (label, spoof) = if index < n_live {
            (LIVE, None)
        } else {
            (SPOOF, Some(spoof_modality(index - n_live)))
        };
        let mut planes = render(spec, seed, index, spoof);
        stamp(spec, seed, index, &mut planes);
        let [rgb, depth, ir] = planes;
        let gray =
            |p: Vec<f64>| -> Result<Tensor> { to_three_channels(Tensor::new(vec![n, n, 1], p)?) };
        samples.push(Sample {
            images: [Tensor::new(vec![n, n, 3], rgb)?, gray(depth)?, gray(ir)?],
            label,
            dataset: spec.id.clone(),
            subject: format!("{}{index:05}", spec.id),
        });
    }
    Ok(Dataset { samples })
}

/// Amplitude of the grating at `cycles` along the width of one channel of
/// `[H, W, C]`, from its projection on the matching sine and cosine.
pub fn band_amplitude(image: &Tensor, channel: usize, cycles: usize) -> f64 {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (mut sc, mut ss) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = image.data()[(y * w + x) * c + channel];
            let arg = std::f64::consts::TAU * cycles as f64 * x as f64 / w as f64;
            sc += v * arg.cos();
            ss += v * arg.sin();
        }
    }
    2.0 * (sc * sc + ss * ss).sqrt() / (h * w) as f64
}

/// Writes every sample as `.bin` images (depth and infrared as one channel)
/// under `dir` and returns the path of a manifest listing them.
pub fn export_dataset(ds: &Dataset, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(manifest_name);
    let mut lines = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let sub = dir.join(&s.dataset);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut rel = Vec::with_capacity(3);
        for m in Modality::ALL {
            let img = &s.images[m.index()];
            let img = if m == Modality::Rgb {
                img.clone()
            } else {
                first_channel(img)?
            };
            let name = format!(
                "{}/{i:05}_{}.bin",
                s.dataset,
                m.short().to_ascii_lowercase()
            );
            write_bin_image(&dir.join(&name), &img)?;
            rel.push(name);
        }
        lines.push(format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            rel[0],
            rel[1],
            rel[2],
            label_name(s.label),
            s.dataset,
            s.subject
        ));
    }
    let mut f = fs::File::create(&manifest).map_err(io_err(&manifest))?;
    for l in lines {
        writeln!(f, "{l}").map_err(io_err(&manifest))?;
    }
    Ok(manifest)
}

fn first_channel(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    let data = img.data().chunks_exact(s[2]).map(|p| p[0]).collect();
    Ok(Tensor::new(vec![s[0], s[1], 1], data)?)
}
