//! Dataset ingestion, patch cropping, and a procedural distortion generator
//! for desk-scale quality-assessment experiments.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Side length of generated images.
pub const SYNTH_SIZE: usize = 64;
pub const MAX_LEVEL: u8 = 5;
pub const SYNTH_DOMAIN: &str = "synthetic";

/// One labelled image. `image` is `[H×W×3]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct IqaSample {
    pub id: String,
    pub image: Tensor,
    pub mos: Scalar,
    pub domain: String,
    pub distortion: Option<DistortionSpec>,
}

impl IqaSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionKind {
    GaussianBlur,
    WhiteNoise,
    BlockArtifact,
    ColorShift,
    ContrastCrush,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::GaussianBlur,
        DistortionKind::WhiteNoise,
        DistortionKind::BlockArtifact,
        DistortionKind::ColorShift,
        DistortionKind::ContrastCrush,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian-blur",
            DistortionKind::WhiteNoise => "white-noise",
            DistortionKind::BlockArtifact => "block-artifact",
            DistortionKind::ColorShift => "color-shift",
            DistortionKind::ContrastCrush => "contrast-crush",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion kind {s:?}")))
    }
}

/// Parses a comma-separated list such as `gaussian-blur,white-noise`.
pub fn parse_kinds(s: &str) -> Result<Vec<DistortionKind>> {
    let kinds: Vec<_> =
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(DistortionKind::from_str).collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("empty distortion kind list".into()));
    }
    Ok(kinds)
}

/// A distortion instance. Level 0 is the identity; 1..=5 degrade
/// progressively.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: u8,
    pub seed: u64,
}

// Per-level strengths, tuned so that distortion PSNR drops at a similar
// rate for every kind (see the calibration test below).
const BLUR_SIGMA: [Scalar; 6] = [0.0, 0.6, 1.0, 1.5, 2.2, 3.2];
const NOISE_STD: [Scalar; 6] = [0.0, 0.02, 0.035, 0.056, 0.08, 0.11];
const BLOCK_ALPHA: [Scalar; 6] = [0.0, 0.3, 0.5, 0.7, 0.85, 0.95];
const SHIFT_RMS: [Scalar; 6] = [0.0, 0.03, 0.05, 0.075, 0.105, 0.14];
const CONTRAST_GAIN: [Scalar; 6] = [1.0, 0.85, 0.72, 0.6, 0.48, 0.36];
const BLOCK: usize = 8;

impl DistortionSpec {
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        check_image(img)?;
        if self.level > MAX_LEVEL {
            return Err(Error::Precondition(format!("distortion level {} exceeds {MAX_LEVEL}", self.level)));
        }
        if self.level == 0 {
            return Ok(img.clone());
        }
        let l = self.level as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let out = match self.kind {
            DistortionKind::GaussianBlur => gaussian_blur(img, BLUR_SIGMA[l]),
            DistortionKind::WhiteNoise => {
                let n = Normal::new(0.0, NOISE_STD[l]).expect("positive std");
                let mut out = img.clone();
                out.data_mut().iter_mut().for_each(|v| *v += n.sample(&mut rng));
                out
            }
            DistortionKind::BlockArtifact => block_artifact(img, BLOCK_ALPHA[l]),
            DistortionKind::ColorShift => {
                // random direction on the sphere, scaled to the target RMS
                let n = Normal::new(0.0, 1.0).expect("unit normal");
                let mut dir: [Scalar; 3] = std::array::from_fn(|_| n.sample(&mut rng));
                let norm = dir.iter().map(|v| v * v).sum::<Scalar>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|v| *v *= SHIFT_RMS[l] * 3f64.sqrt() / norm);
                let mut out = img.clone();
                out.data_mut().chunks_mut(3).for_each(|px| px.iter_mut().zip(&dir).for_each(|(p, d)| *p += d));
                out
            }
            DistortionKind::ContrastCrush => {
                let mean = img.sum() / img.len() as Scalar;
                img.map(|v| mean + (v - mean) * CONTRAST_GAIN[l])
            }
        };
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }
}

fn check_image(img: &Tensor) -> Result<()> {
    if img.ndim() != 3 || img.shape()[2] != 3 {
        return Err(Error::Precondition(format!("expected an H×W×3 image, got {:?}", img.shape())));
    }
    Ok(())
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Tensor, sigma: Scalar) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<Scalar> = (-r..=r).map(|i| (-(i * i) as Scalar / (2.0 * sigma * sigma)).exp()).collect();
    let ks: Scalar = k.iter().sum();
    let k: Vec<Scalar> = k.into_iter().map(|v| v / ks).collect();
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let pass = |src: &[Scalar], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (t, kv) in k.iter().enumerate() {
                        let o = t as isize - r;
                        let (ii, jj) = if horizontal {
                            (i, (j as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((i as isize + o).clamp(0, h as isize - 1) as usize, j)
                        };
                        acc += kv * src[(ii * w + jj) * 3 + c];
                    }
                    dst[(i * w + j) * 3 + c] = acc;
                }
            }
        }
        dst
    };
    let tmp = pass(img.data(), true);
    Tensor::new(img.shape(), pass(&tmp, false)).expect("same shape")
}

/// Blends every 8×8 block towards its mean colour, producing visible
/// block edges as `alpha` approaches 1.
fn block_artifact(img: &Tensor, alpha: Scalar) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = img.clone();
    let src = img.data();
    let dst = out.data_mut();
    for bi in (0..h).step_by(BLOCK) {
        for bj in (0..w).step_by(BLOCK) {
            let rows = bi..(bi + BLOCK).min(h);
            let cols = bj..(bj + BLOCK).min(w);
            let n = (rows.len() * cols.len()) as Scalar;
            for c in 0..3 {
                let mut mean = 0.0;
                for i in rows.clone() {
                    for j in cols.clone() {
                        mean += src[(i * w + j) * 3 + c];
                    }
                }
                mean /= n;
                for i in rows.clone() {
                    for j in cols.clone() {
                        let p = (i * w + j) * 3 + c;
                        dst[p] = (1.0 - alpha) * src[p] + alpha * mean;
                    }
                }
            }
        }
    }
    out
}

/// SplitMix64 step, used to derive independent per-sample seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Spread of the smooth luminance structure layer.
const STRUCTURE_STD: Scalar = 0.18;
/// Spread of the low-saturation chroma tint carried by the structure.
const CHROMA_STD: Scalar = 0.025;
/// Spread of the shared fine-texture layer.
const TEXTURE_STD: Scalar = 0.06;

fn standardize(v: &mut [Scalar], mean_to: Scalar, std_to: Scalar) {
    let n = v.len() as Scalar;
    let mean = v.iter().sum::<Scalar>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<Scalar>() / n;
    let scale = std_to / var.sqrt().max(1e-9);
    v.iter_mut().for_each(|x| *x = mean_to + (*x - mean) * scale);
}

/// Zero-sum RGB offset, i.e. a pure chroma direction.
fn chroma<R: Rng>(rng: &mut R) -> [Scalar; 3] {
    let v: [Scalar; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let m = (v[0] + v[1] + v[2]) / 3.0;
    v.map(|x| x - m)
}

/// Procedural base image built from three layers with fixed spreads:
/// smooth luminance structure (gradient plus flat shapes, mean 0.5), a
/// faint chroma tint on the same structure, and fine grey sinusoidal
/// texture. Keeping every layer's spread fixed, and saturation low, makes
/// sharpness, noise, contrast and colour casts judgeable from a crop
/// without a reference.
pub fn base_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as Scalar;
    let px = size * size;
    let mut lum = vec![0.0; px];
    let mut tint = vec![[0.0; 3]; px];
    let (gy, gx) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let gc = chroma(&mut rng);
    for i in 0..size {
        for j in 0..size {
            let r = gx * j as Scalar / s + gy * i as Scalar / s;
            lum[i * size + j] = r;
            tint[i * size + j] = gc.map(|c| c * r);
        }
    }
    let shapes = rng.gen_range(3..7);
    for _ in 0..shapes {
        let level = rng.gen_range(-1.5..1.5);
        let tone = chroma(&mut rng);
        let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (ry, rx) = (rng.gen_range(0.08 * s..0.3 * s), rng.gen_range(0.08 * s..0.3 * s));
        let disc = rng.gen_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = ((i as Scalar - cy) / ry, (j as Scalar - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    lum[i * size + j] = level;
                    tint[i * size + j] = tone;
                }
            }
        }
    }
    standardize(&mut lum, 0.5, STRUCTURE_STD);
    let mut flat: Vec<Scalar> = tint.iter().flatten().copied().collect();
    standardize(&mut flat, 0.0, CHROMA_STD);

    let waves: Vec<(Scalar, Scalar, Scalar, Scalar)> = (0..4)
        .map(|_| {
            let f = rng.gen_range(0.35..1.2);
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            (f * th.cos(), f * th.sin(), rng.gen_range(0.0..6.3), rng.gen_range(0.5..1.0))
        })
        .collect();
    let mut texture: Vec<Scalar> = (0..px)
        .map(|k| {
            let (i, j) = ((k / size) as Scalar, (k % size) as Scalar);
            waves.iter().map(|(fy, fx, ph, a)| a * (fy * i + fx * j + ph).sin()).sum()
        })
        .collect();
    standardize(&mut texture, 0.0, TEXTURE_STD);

    let data = (0..px)
        .flat_map(|k| {
            let base = lum[k] + texture[k];
            let t = &flat[k * 3..k * 3 + 3];
            [0, 1, 2].map(|c| (base + t[c]).clamp(0.0, 1.0))
        })
        .collect();
    Tensor::new(&[size, size, 3], data).expect("consistent size")
}

/// Maps a level and jitter to a score in `[0, 1]`: `5 - level + jitter`
/// rescaled from `[-0.2, 4.2]`.
pub fn synth_mos(level: u8, jitter: Scalar) -> Scalar {
    (5.0 - level as Scalar + jitter + 0.2) / 4.4
}

/// Generates `count` distorted images. Sample `i` depends only on
/// `(base_seed, i, kinds)`, so regenerating is bit-identical.
pub fn synth_dataset(count: usize, base_seed: u64, kinds: &[DistortionKind]) -> Result<Vec<IqaSample>> {
    if count == 0 {
        return Err(Error::Precondition("sample count must be at least 1".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Precondition("at least one distortion kind is required".into()));
    }
    (0..count)
        .map(|i| {
            let seed = derive_seed(base_seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = kinds[rng.gen_range(0..kinds.len())];
            let level = rng.gen_range(1..=MAX_LEVEL);
            let jitter = rng.gen_range(-0.2..=0.2);
            let spec = DistortionSpec { kind, level, seed: rng.gen() };
            let base = base_image(SYNTH_SIZE, rng.gen());
            Ok(IqaSample {
                id: format!("s{base_seed}-{i:05}"),
                image: spec.apply(&base)?,
                mos: synth_mos(level, jitter),
                domain: SYNTH_DOMAIN.to_string(),
                distortion: Some(spec),
            })
        })
        .collect()
}

/// Undistorted base image of synthetic sample `index`, for reference metrics.
pub fn synth_reference(base_seed: u64, index: usize, kinds: &[DistortionKind]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, index as u64));
    let _ = rng.gen_range(0..kinds.len().max(1));
    let _ = rng.gen_range(1..=MAX_LEVEL);
    let _ = rng.gen_range(-0.2..=0.2);
    let _: u64 = rng.gen();
    base_image(SYNTH_SIZE, rng.gen())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Scalar> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<Scalar>() / a.len() as Scalar;
    Ok(if mse == 0.0 { Scalar::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 70/10/20 assignment from the SHA-256 of the sample id.
pub fn split_of(id: &str) -> Split {
    let d = Sha256::digest(id.as_bytes());
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 100;
    match v {
        0..=69 => Split::Train,
        70..=79 => Split::Val,
        _ => Split::Test,
    }
}

pub fn split_dataset(samples: &[IqaSample]) -> (Vec<IqaSample>, Vec<IqaSample>, Vec<IqaSample>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        match split_of(&s.id) {
            Split::Train => out.0.push(s.clone()),
            Split::Val => out.1.push(s.clone()),
            Split::Test => out.2.push(s.clone()),
        }
    }
    out
}

/// Top-left corners of `n` uniformly random `size×size` crops of an image
/// padded (if needed) to at least `size` in each extent.
pub fn crop_coords(height: usize, width: usize, size: usize, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let (h, w) = (height.max(size), width.max(size));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size))).collect()
}

/// Random square crops; images smaller than `size` are edge-replicated first.
pub fn crop_patches(img: &Tensor, n: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    check_image(img)?;
    if size == 0 {
        return Err(Error::Precondition("patch size must be positive".into()));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let src = img.data();
    Ok(crop_coords(h, w, size, n, seed)
        .into_iter()
        .map(|(y, x)| {
            let mut data = Vec::with_capacity(size * size * 3);
            for i in 0..size {
                let si = (y + i).min(h - 1);
                for j in 0..size {
                    let sj = (x + j).min(w - 1);
                    data.extend_from_slice(&src[(si * w + sj) * 3..][..3]);
                }
            }
            Tensor::new(&[size, size, 3], data).expect("crop shape")
        })
        .collect())
}

/// One of the eight symmetries of the square applied to an `H×W×3` image:
/// bit 2 transposes, bit 0 flips rows, bit 1 flips columns.
pub fn dihedral(img: &Tensor, k: u8) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (oh, ow) = if k & 4 != 0 { (w, h) } else { (h, w) };
    let src = img.data();
    let mut data = Vec::with_capacity(src.len());
    for i in 0..oh {
        for j in 0..ow {
            let (mut y, mut x) = if k & 4 != 0 { (j, i) } else { (i, j) };
            if k & 1 != 0 {
                y = h - 1 - y;
            }
            if k & 2 != 0 {
                x = w - 1 - x;
            }
            data.extend_from_slice(&src[(y * w + x) * 3..][..3]);
        }
    }
    Tensor::new(&[oh, ow, 3], data).expect("permuted shape")
}

/// Affine map of a dataset's scores onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosScale {
    pub min: Scalar,
    pub max: Scalar,
}

impl MosScale {
    pub fn fit(samples: &[IqaSample]) -> Result<Self> {
        let min = samples.iter().map(|s| s.mos).fold(Scalar::INFINITY, Scalar::min);
        let max = samples.iter().map(|s| s.mos).fold(Scalar::NEG_INFINITY, Scalar::max);
        if max.is_nan() || min.is_nan() || max <= min {
            return Err(Error::Precondition("scores must take at least two distinct values".into()));
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, mos: Scalar) -> Scalar {
        (mos - self.min) / (self.max - self.min)
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let err = |msg: String| Error::Image { path: path.to_path_buf(), msg };
    let img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(err("empty image".into()));
    }
    let data = img.into_raw().into_iter().map(|v| v as Scalar / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    check_image(img)?;
    let (h, w) = (img.shape()[0] as u32, img.shape()[1] as u32);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w, h, bytes).expect("buffer matches extents");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}

/// Reads a `path,score[,domain]` manifest. Relative image paths resolve
/// against the manifest's directory; a leading `path,score` header is
/// skipped. Rows are numbered from 1 in errors.
pub fn load_dataset(manifest: &Path) -> Result<Vec<IqaSample>> {
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(manifest).map_err(|e| Error::Manifest {
        path: manifest.to_path_buf(),
        row: 0,
        msg: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let bad = |msg: String| Error::Manifest { path: manifest.to_path_buf(), row, msg };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if row == 1 && rec.get(0) == Some("path") && rec.get(1) == Some("score") {
            continue;
        }
        if rec.len() < 2 || rec.len() > 3 {
            return Err(bad(format!("expected 2 or 3 fields, found {}", rec.len())));
        }
        let score: Scalar = rec[1].parse().map_err(|_| bad(format!("score {:?} is not a number", &rec[1])))?;
        if !score.is_finite() {
            return Err(bad(format!("score {score} is not finite")));
        }
        let rel = PathBuf::from(&rec[0]);
        let path = if rel.is_absolute() { rel.clone() } else { root.join(&rel) };
        if !path.is_file() {
            return Err(bad(format!("image {} not found", path.display())));
        }
        let image = load_image(&path).map_err(|e| bad(e.to_string()))?;
        out.push(IqaSample {
            // Extension dropped so a written synthetic set keeps its ids (and splits).
            id: rel.with_extension("").to_string_lossy().into_owned(),
            image,
            mos: score,
            domain: rec.get(2).filter(|d| !d.is_empty()).unwrap_or(SYNTH_DOMAIN).to_string(),
            distortion: None,
        });
    }
    Ok(out)
}

/// Writes every sample as `<id>.png` plus `manifest.csv` into `dir`.
/// Returns the manifest path.
pub fn write_dataset(samples: &[IqaSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("path,score,domain\n");
    for s in samples {
        let name = format!("{}.png", s.id);
        save_png(&s.image, &dir.join(&name))?;
        manifest.push_str(&format!("{name},{},{}\n", s.mos, s.domain));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::srcc;

    #[test]
    fn level_zero_is_identity() {
        let img = base_image(16, 3);
        for kind in DistortionKind::ALL {
            let out = DistortionSpec { kind, level: 0, seed: 1 }.apply(&img).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn distortion_error_grows_with_level() {
        let img = base_image(SYNTH_SIZE, 11);
        for kind in DistortionKind::ALL {
            let mut last = Scalar::INFINITY;
            for level in 1..=MAX_LEVEL {
                let p = psnr(&img, &DistortionSpec { kind, level, seed: 4 }.apply(&img).unwrap()).unwrap();
                assert!(p < last, "{kind} level {level}: {p} >= {last}");
                last = p;
            }
        }
    }

    #[test]
    fn mos_orders_levels() {
        assert!(synth_mos(1, -0.2) > synth_mos(5, 0.2));
        assert!(synth_mos(4, -0.2) > synth_mos(5, 0.2));
        assert_eq!(synth_mos(5, -0.2), 0.0);
        assert_eq!(synth_mos(1, 0.2), 1.0);
    }

    #[test]
    fn synth_is_deterministic_and_calibrated() {
        let a = synth_dataset(200, 7, &DistortionKind::ALL).unwrap();
        let b = synth_dataset(200, 7, &DistortionKind::ALL).unwrap();
        assert_eq!(a.len(), 200);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.mos == y.mos));
        assert!(a.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let psnrs: Vec<Scalar> = a
            .iter()
            .enumerate()
            .map(|(i, s)| psnr(&synth_reference(7, i, &DistortionKind::ALL), &s.image).unwrap())
            .collect();
        let mos: Vec<Scalar> = a.iter().map(|s| s.mos).collect();
        let rho = srcc(&psnrs, &mos).unwrap();
        assert!(rho >= 0.7, "psnr/mos srcc {rho}");
    }

    #[test]
    fn count_zero_rejected() {
        assert!(synth_dataset(0, 1, &DistortionKind::ALL).is_err());
    }

    #[test]
    fn crops() {
        let img = base_image(32, 1);
        let same = crop_patches(&img, 5, 32, 9).unwrap();
        assert!(same.iter().all(|p| *p == img));
        assert_eq!(crop_coords(64, 64, 32, 10, 3), crop_coords(64, 64, 32, 10, 3));
        let small = Tensor::new(&[2, 2, 3], (0..12).map(|v| v as Scalar).collect()).unwrap();
        let p = &crop_patches(&small, 1, 3, 0).unwrap()[0];
        // bottom-right pixel replicated into the padded border
        assert_eq!(&p.data()[(2 * 3 + 2) * 3..][..3], &[9.0, 10.0, 11.0]);
    }

    #[test]
    fn split_is_stable_and_roughly_proportional() {
        let ids: Vec<String> = (0..2000).map(|i| format!("x{i}")).collect();
        let train = ids.iter().filter(|i| split_of(i) == Split::Train).count();
        assert!((1300..1500).contains(&train), "{train}");
        assert!(ids.iter().all(|i| split_of(i) == split_of(i)));
    }
}
