//! Dataset loading, the fixed-seed train/val/test split, the split manifest
//! and a synthetic-shapes generator.
//!
//! Shuffling is a Fisher–Yates pass driven by ChaCha8. Bounded draws take a
//! raw `u64` and reject values in the biased tail, so the permutation only
//! depends on the seed and never on the platform's `usize` width.

use std::cell::Cell;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{validate_pair, Dataset, ImageTensor, MaskTensor, Sample};
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Uniform integer in `0..n` from a raw 64-bit stream.
pub fn uniform_below<R: RngCore>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "empty range");
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn permutation<R: RngCore>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::new(0)
    }
}

/// Fractions are handled as integer parts per million so `floor(f * N)`
/// is exact for decimal fractions.
const PPM: u64 = 1_000_000;

fn to_ppm(f: f64) -> u64 {
    (f * PPM as f64).round() as u64
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_frac: 0.70,
            val_frac: 0.15,
            test_frac: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig(format!("split fractions {fr:?}")));
        }
        if fr.iter().map(|&f| to_ppm(f)).sum::<u64>() != PPM {
            return Err(Error::InvalidConfig(format!("split fractions {fr:?} do not sum to 1")));
        }
        Ok(())
    }

    /// `(floor(train * N), floor(val * N), remainder)`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n64 = n as u64;
        let tr = (n64 * to_ppm(self.train_frac) / PPM) as usize;
        let va = (n64 * to_ppm(self.val_frac) / PPM) as usize;
        (tr, va, n - tr - va)
    }

    /// Index lists for a dataset of `n` samples.
    pub fn indices(&self, n: usize) -> Result<SplitIndices> {
        self.validate()?;
        if n < 3 {
            return Err(Error::DatasetTooSmall(n));
        }
        let perm = permutation(n, &mut ChaCha8Rng::seed_from_u64(self.seed));
        let (tr, va, _) = self.counts(n);
        Ok(SplitIndices {
            train: perm[..tr].to_vec(),
            val: perm[tr..tr + va].to_vec(),
            test: perm[tr + va..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// The three partitions. The test partition is only reachable through
/// [`Splits::test`], which logs every access.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    test: Dataset,
    pub manifest: SplitManifest,
    test_accesses: Cell<usize>,
}

impl Splits {
    pub fn test(&self) -> &Dataset {
        self.test_accesses.set(self.test_accesses.get() + 1);
        log::info!("test split of {} accessed ({} samples)", self.test.name, self.test.len());
        &self.test
    }

    /// Number of [`Splits::test`] calls so far.
    pub fn test_accesses(&self) -> usize {
        self.test_accesses.get()
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

pub fn split_dataset(d: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let idx = spec.indices(d.len())?;
    let name = &d.name;
    let train = d.select(format!("{name}/train"), &idx.train);
    let val = d.select(format!("{name}/val"), &idx.val);
    let test = d.select(format!("{name}/test"), &idx.test);
    let manifest = SplitManifest::from_parts(&train, &val, &test);
    Ok(Splits {
        train,
        val,
        test,
        manifest,
        test_accesses: Cell::new(0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// `(stem, split)` pairs sorted by stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub entries: Vec<(String, SplitName)>,
}

impl SplitManifest {
    pub fn from_parts(train: &Dataset, val: &Dataset, test: &Dataset) -> Self {
        let mut entries: Vec<(String, SplitName)> = [(train, SplitName::Train), (val, SplitName::Val), (test, SplitName::Test)]
            .into_iter()
            .flat_map(|(d, s)| d.ids().map(move |id| (id.to_string(), s)))
            .collect();
        entries.sort();
        Self { entries }
    }

    fn body(&self) -> String {
        self.entries.iter().map(|(stem, s)| format!("{stem}\t{s}\n")).collect()
    }

    /// Hex SHA-256 of the tab-separated listing.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }

    pub fn to_text(&self) -> String {
        format!("# sha256 {}\n{}", self.digest(), self.body())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let claimed = header
            .strip_prefix("# sha256 ")
            .ok_or_else(|| Error::parse("split manifest", "missing digest header"))?;
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let (stem, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse("split manifest", format!("bad line {line:?}")))?;
            let split = match split {
                "train" => SplitName::Train,
                "val" => SplitName::Val,
                "test" => SplitName::Test,
                other => return Err(Error::parse("split manifest", format!("split {other:?}"))),
            };
            entries.push((stem.to_string(), split));
        }
        let m = Self { entries };
        if m.digest() != claimed {
            return Err(Error::parse("split manifest", "digest does not match contents"));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Writes the manifest if `path` is absent, otherwise checks that the
    /// stored one is identical.
    pub fn write_or_verify(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return self.write(path);
        }
        if Self::read(path)? != *self {
            return Err(Error::ManifestMismatch(path.to_path_buf()));
        }
        Ok(())
    }
}

/// Image and mask directories paired by file stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
}

impl DatasetLayout {
    /// `root/images` + `root/masks`, falling back to `root/Original` +
    /// `root/Ground Truth`.
    pub fn detect(root: &Path) -> Result<Self> {
        for (i, m) in [("images", "masks"), ("Original", "Ground Truth")] {
            let (images_dir, masks_dir) = (root.join(i), root.join(m));
            if images_dir.is_dir() && masks_dir.is_dir() {
                return Ok(Self { images_dir, masks_dir });
            }
        }
        Err(Error::InvalidConfig(format!(
            "{} has neither images/ + masks/ nor Original/ + Ground Truth/",
            root.display()
        )))
    }
}

fn list_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_image(path: &Path, (h, w): (usize, usize)) -> Result<ImageTensor> {
    let rgb = open(path)?.to_rgb8();
    let resized = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in resized.enumerate_pixels() {
        let o = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + o] = f32::from(px.0[c]) / 255.0;
        }
    }
    ImageTensor::new(h, w, data)
}

fn load_mask(path: &Path, (h, w): (usize, usize)) -> Result<MaskTensor> {
    let luma = open(path)?.to_luma8();
    let resized = image::imageops::resize(&luma, w as u32, h as u32, FilterType::Nearest);
    let bits: Vec<bool> = resized.pixels().map(|p| p.0[0] >= 128).collect();
    MaskTensor::from_bits(h, w, &bits)
}

/// Loads every stem-paired image/mask, resized to `target` `(H, W)`.
pub fn load_dataset(name: &str, layout: &DatasetLayout, target: (usize, usize)) -> Result<Dataset> {
    let images = list_stems(&layout.images_dir)?;
    let masks = list_stems(&layout.masks_dir)?;
    let mask_of = |stem: &str| {
        masks
            .binary_search_by(|(s, _)| s.as_str().cmp(stem))
            .ok()
            .map(|i| &masks[i].1)
    };
    for (stem, _) in &masks {
        if images.binary_search_by(|(s, _)| s.cmp(stem)).is_err() {
            return Err(Error::UnpairedStem(stem.clone()));
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(layout.images_dir.clone()));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let mask_path = mask_of(stem).ok_or_else(|| Error::UnpairedStem(stem.clone()))?;
        let s = Sample::new(stem.clone(), load_image(img_path, target)?, load_mask(mask_path, target)?);
        validate_pair(&s)?;
        samples.push(s);
    }
    Dataset::new(name, samples)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.60;

fn synth_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<Ellipse>, Vec<bool>) {
    let side = h.min(w) as f64;
    loop {
        let count = rng.gen_range(1..=3);
        let shapes: Vec<Ellipse> = (0..count)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: rng.gen_range(0.15..0.85) * h as f64,
                    cx: rng.gen_range(0.15..0.85) * w as f64,
                    ry: rng.gen_range(0.08..0.3) * side,
                    rx: rng.gen_range(0.08..0.3) * side,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();
        let bits: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                shapes.iter().any(|e| e.contains(y, x))
            })
            .collect();
        let frac = bits.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            return (shapes, bits);
        }
    }
}

fn synth_sample(rng: &mut ChaCha8Rng, id: String, h: usize, w: usize) -> Result<Sample> {
    let (_, bits) = synth_mask(rng, h, w);
    let bg: [f64; 3] = [rng.gen_range(0.45..0.75), rng.gen_range(0.2..0.4), rng.gen_range(0.15..0.35)];
    let fg: [f64; 3] = [rng.gen_range(0.6..0.95), rng.gen_range(0.35..0.6), rng.gen_range(0.25..0.45)];
    let (fy, fx, phase) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.3));
    let (ty, tx) = (rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8));
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let (base, texture) = if bits[i] {
            (fg, 0.06 * (ty * y).sin() * (tx * x).cos())
        } else {
            (bg, 0.08 * (fy * y + fx * x + phase).sin())
        };
        for c in 0..3 {
            let noise = rng.gen_range(-0.05..0.05);
            data[c * h * w + i] = (base[c] + texture + noise).clamp(0.0, 1.0) as f32;
        }
    }
    let sample = Sample::new(id, ImageTensor::new(h, w, data)?, MaskTensor::from_bits(h, w, &bits)?);
    validate_pair(&sample)?;
    Ok(sample)
}

/// `n` images of 1–3 filled ellipses on a textured, noisy background; each
/// mask is the exact union of the ellipses and covers 1–60% of the image.
pub fn synth_shapes(n: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    let (h, w) = size;
    if n == 0 {
        return Err(Error::EmptyInput("synthetic dataset"));
    }
    if h < 32 || w < 32 {
        return Err(Error::ImageTooSmall { height: h, width: w });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(4);
    let samples = (0..n)
        .map(|i| synth_sample(&mut rng, format!("synth_{i:0width$}"), h, w))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("synth", samples)
}

/// Writes a dataset as `images/` + `masks/` PNGs loadable by [`load_dataset`].
pub fn write_dataset(d: &Dataset, root: &Path) -> Result<DatasetLayout> {
    let layout = DatasetLayout {
        images_dir: root.join("images"),
        masks_dir: root.join("masks"),
    };
    for dir in [&layout.images_dir, &layout.masks_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in d.samples() {
        let (h, w) = s.size();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let o = y as usize * w + x as usize;
            image::Rgb(std::array::from_fn(|c| (s.image.data()[c * h * w + o] * 255.0).round() as u8))
        });
        let mask = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if s.mask.is_set(y as usize * w + x as usize) { 255 } else { 0 }])
        });
        let ip = layout.images_dir.join(format!("{}.png", s.id));
        let mp = layout.masks_dir.join(format!("{}.png", s.id));
        img.save(&ip).map_err(|source| Error::Image { path: ip, source })?;
        mask.save(&mp).map_err(|source| Error::Image { path: mp, source })?;
    }
    Ok(layout)
}
