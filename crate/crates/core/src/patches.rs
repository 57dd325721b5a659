//! Patch tiling, train/validation split, on-the-fly augmentation and the
//! dataset manifest.
//!
//! Patches are never written to disk. The manifest addresses each one by
//! `(image id, row, col)` in the patch grid of its source pair, and
//! [`PatchSource`] cuts them from the in-memory sources on demand.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{read_json, write_json, BinaryImage, Gray};
use crate::seed;

pub const PATCH_SIZE: usize = 64;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// Intensities on the 0..=255 scale.
    pub input: Gray,
    /// Values in {0, 1}.
    pub label: Array2<u8>,
    pub origin: PatchOrigin,
}

fn check_tiling(w: usize, h: usize, patch: usize) -> Result<()> {
    if patch == 0 || w % patch != 0 || h % patch != 0 || w == 0 || h == 0 {
        return Err(Error::NotDivisible {
            what: "image",
            width: w,
            height: h,
            multiple: patch,
        });
    }
    Ok(())
}

/// Non-overlapping raster-order tiling. Dimensions must divide exactly.
pub fn cut_patches(image_id: &str, image: &Gray, label: &BinaryImage, patch: usize) -> Result<Vec<PatchPair>> {
    let (h, w) = image.dim();
    if label.dims() != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h} vs label {}x{}",
            label.width(),
            label.height()
        )));
    }
    check_tiling(w, h, patch)?;
    let mut out = Vec::with_capacity((w / patch) * (h / patch));
    for row in 0..h / patch {
        for col in 0..w / patch {
            out.push(cut_one(image_id, image, label.as_array(), patch, row, col));
        }
    }
    Ok(out)
}

fn cut_one(image_id: &str, image: &Gray, label: &Array2<u8>, patch: usize, row: usize, col: usize) -> PatchPair {
    let win = s![row * patch..(row + 1) * patch, col * patch..(col + 1) * patch];
    PatchPair {
        input: image.slice(win).to_owned(),
        label: label.slice(win).to_owned(),
        origin: PatchOrigin {
            image: image_id.to_string(),
            row,
            col,
        },
    }
}

/// Reassembles a full raster from its tiling (inverse of [`cut_patches`]).
pub fn stitch(patches: &[PatchPair], width: usize, height: usize) -> (Gray, Array2<u8>) {
    let mut img = Gray::zeros((height, width));
    let mut lab = Array2::zeros((height, width));
    for p in patches {
        let n = p.input.nrows();
        let win = s![p.origin.row * n..(p.origin.row + 1) * n, p.origin.col * n..(p.origin.col + 1) * n];
        img.slice_mut(win).assign(&p.input);
        lab.slice_mut(win).assign(&p.label);
    }
    (img, lab)
}

/// Number of validation items, `floor(val_fraction · n)`.
pub fn val_count(n: usize, val_fraction: f64) -> usize {
    // The epsilon keeps products like 0.29 · 100 from flooring to 28.
    (val_fraction * n as f64 + 1e-9).floor() as usize
}

/// Uniform random split without replacement. The first
/// `floor(val_fraction · n)` items of a seeded shuffle go to validation; both
/// halves keep their original relative order.
pub fn split_dataset<T>(items: Vec<T>, val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("patch list"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(invalid(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..val_count(n, val_fraction)] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in items.into_iter().zip(is_val) {
        if v {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, val))
}

/// Random transforms applied at sample time. Geometric transforms act on
/// input and label alike; photometric ones touch the input only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub id: String,
    pub flips: bool,
    pub rot90: bool,
    /// Max additive brightness shift, in gray levels.
    pub brightness: f32,
    /// Max relative contrast change around mid-gray.
    pub contrast: f32,
    /// Std of additive Gaussian noise, in gray levels.
    pub noise_sigma: f32,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            id: "identity".into(),
            flips: false,
            rot90: false,
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn geometric() -> Self {
        Self {
            id: "geometric".into(),
            flips: true,
            rot90: true,
            ..Self::identity()
        }
    }

    pub fn photometric() -> Self {
        Self {
            id: "photometric".into(),
            brightness: 25.0,
            contrast: 0.25,
            noise_sigma: 4.0,
            ..Self::identity()
        }
    }

    pub fn full() -> Self {
        Self {
            id: "full".into(),
            ..Self::photometric()
        }
        .with_geometry()
    }

    fn with_geometry(mut self) -> Self {
        self.flips = true;
        self.rot90 = true;
        self
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "identity" => Some(Self::identity()),
            "geometric" => Some(Self::geometric()),
            "photometric" => Some(Self::photometric()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }
}

pub fn hflip<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(s![.., ..;-1]).to_owned()
}

pub fn vflip<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(s![..;-1, ..]).to_owned()
}

/// Counter-clockwise quarter turns.
pub fn rot90<T: Clone>(a: &Array2<T>, quarter_turns: u32) -> Array2<T> {
    match quarter_turns % 4 {
        0 => a.clone(),
        1 => a.t().slice(s![..;-1, ..]).to_owned(),
        2 => a.slice(s![..;-1, ..;-1]).to_owned(),
        _ => a.t().slice(s![.., ..;-1]).to_owned(),
    }
}

/// Draws every random number up front in a fixed order, so the policy flags
/// only decide which draws are used.
pub fn augment(pair: &PatchPair, policy: &AugmentPolicy, seed: u64) -> PatchPair {
    let mut rng = seed::rng(seed);
    let do_h: bool = rng.random();
    let do_v: bool = rng.random();
    let turns: u32 = rng.random_range(0..4);
    let bright: f32 = rng.random_range(-1.0..=1.0);
    let contr: f32 = rng.random_range(-1.0..=1.0);

    let mut input = pair.input.clone();
    let mut label = pair.label.clone();
    if policy.flips && do_h {
        input = hflip(&input);
        label = hflip(&label);
    }
    if policy.flips && do_v {
        input = vflip(&input);
        label = vflip(&label);
    }
    if policy.rot90 && turns != 0 {
        input = rot90(&input, turns);
        label = rot90(&label, turns);
    }
    if policy.contrast > 0.0 || policy.brightness > 0.0 {
        let c = 1.0 + policy.contrast * contr;
        let b = policy.brightness * bright;
        input.mapv_inplace(|v| ((v - 127.5) * c + 127.5 + b).clamp(0.0, 255.0));
    }
    if policy.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, policy.noise_sigma).expect("sigma checked positive");
        input.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 255.0));
    }
    PatchPair {
        input,
        label,
        origin: pair.origin.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    /// Input image path, relative to the manifest's directory.
    pub image: String,
    /// Label image path, relative to the manifest's directory.
    pub label: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<PatchOrigin>,
    pub val: Vec<PatchOrigin>,
}

/// Persisted dataset index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub version: u32,
    pub sources: Vec<SourceEntry>,
    pub patch_size: usize,
    pub val_fraction: f64,
    pub splits: Splits,
    pub policy: AugmentPolicy,
    pub seed: u64,
}

impl PatchManifest {
    /// Tiles every source and splits the pooled patches.
    pub fn build(sources: Vec<SourceEntry>, patch_size: usize, val_fraction: f64, policy: AugmentPolicy, seed: u64) -> Result<Self> {
        let mut all = Vec::new();
        for src in &sources {
            check_tiling(src.width, src.height, patch_size)?;
            for row in 0..src.height / patch_size {
                for col in 0..src.width / patch_size {
                    all.push(PatchOrigin {
                        image: src.id.clone(),
                        row,
                        col,
                    });
                }
            }
        }
        let (train, val) = split_dataset(all, val_fraction, seed)?;
        Ok(Self {
            version: MANIFEST_VERSION,
            sources,
            patch_size,
            val_fraction,
            splits: Splits { train, val },
            policy,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: PatchManifest = read_json(path.as_ref())?;
        if m.version != MANIFEST_VERSION {
            return Err(invalid(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.splits.train.len() + self.splits.val.len()
    }
}

/// Manifest plus the source rasters it refers to.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub manifest: PatchManifest,
    images: BTreeMap<String, (Gray, Array2<u8>)>,
}

impl PatchSource {
    pub fn new(manifest: PatchManifest, images: BTreeMap<String, (Gray, BinaryImage)>) -> Result<Self> {
        let mut held = BTreeMap::new();
        for src in &manifest.sources {
            let (img, lab) = images
                .get(&src.id)
                .ok_or_else(|| invalid(format!("no raster supplied for source {}", src.id)))?;
            if img.dim() != (src.height, src.width) || lab.dims() != (src.width, src.height) {
                return Err(Error::DimensionMismatch(format!("source {} does not match manifest size", src.id)));
            }
            held.insert(src.id.clone(), (img.clone(), lab.as_array().clone()));
        }
        Ok(Self { manifest, images: held })
    }

    /// Loads every source relative to `base`.
    pub fn load(manifest: PatchManifest, base: impl AsRef<Path>) -> Result<Self> {
        let base = base.as_ref();
        let mut images = BTreeMap::new();
        for src in &manifest.sources {
            let img = crate::image::load_gray_png(base.join(&src.image))?;
            let lab = BinaryImage::load_png(base.join(&src.label))?;
            images.insert(src.id.clone(), (img, lab));
        }
        Self::new(manifest, images)
    }

    pub fn patch_size(&self) -> usize {
        self.manifest.patch_size
    }

    pub fn pair(&self, origin: &PatchOrigin) -> Result<PatchPair> {
        let (img, lab) = self
            .images
            .get(&origin.image)
            .ok_or_else(|| invalid(format!("unknown source {}", origin.image)))?;
        let n = self.manifest.patch_size;
        if (origin.row + 1) * n > img.nrows() || (origin.col + 1) * n > img.ncols() {
            return Err(invalid(format!("patch {origin:?} outside its source")));
        }
        Ok(cut_one(&origin.image, img, lab, n, origin.row, origin.col))
    }

    pub fn train_pairs(&self) -> Result<Vec<PatchPair>> {
        self.manifest.splits.train.iter().map(|o| self.pair(o)).collect()
    }

    pub fn val_pairs(&self) -> Result<Vec<PatchPair>> {
        self.manifest.splits.val.iter().map(|o| self.pair(o)).collect()
    }
}
