//! Raster types shared by every stage, plus the small set of filters and
//! PNG helpers they need.
//!
//! Coordinates follow the pixel-center convention: pixel `(x, y)` is the
//! unit square centered on integer coordinates `(x, y)`, so the image domain
//! of a `w × h` raster is `[-0.5, w - 0.5] × [-0.5, h - 0.5]`. Arrays are
//! indexed `[[row, col]] = [[y, x]]`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale raster with intensities on the 0..=255 scale, stored as `f32`.
pub type Gray = Array2<f32>;

/// Sub-pixel image coordinate. Serialized as a two-element array `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Lexicographic order by `(y, x)`.
    pub fn cmp_yx(&self, other: &Point) -> std::cmp::Ordering {
        self.y
            .total_cmp(&other.y)
            .then_with(|| self.x.total_cmp(&other.x))
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Binary raster whose pixels are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    px: Array2<u8>,
}

/// 8-neighborhood offsets in the order P2..P9 used by thinning:
/// N, NE, E, SE, S, SW, W, NW.
pub const NEIGHBORS8: [(i64, i64); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            px: Array2::zeros((height, width)),
        }
    }

    /// Wraps an array, mapping every nonzero value to 1.
    pub fn from_array(a: Array2<u8>) -> Self {
        Self {
            px: a.mapv(|v| u8::from(v != 0)),
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            px: Array2::from_shape_fn((height, width), |(y, x)| u8::from(f(x, y))),
        }
    }

    pub fn width(&self) -> usize {
        self.px.ncols()
    }

    pub fn height(&self) -> usize {
        self.px.nrows()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.px
    }

    pub fn into_array(self) -> Array2<u8> {
        self.px
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.px[[y, x]] != 0
    }

    /// Signed lookup; anything outside the raster reads as background.
    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width()
            && (y as usize) < self.height()
            && self.px[[y as usize, x as usize]] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.px[[y, x]] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.px.iter().filter(|&&v| v != 0).count()
    }

    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.px
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|((y, x), _)| (x, y))
    }

    /// Neighbor bits P2..P9 of `(x, y)`.
    #[inline]
    pub fn neighbors(&self, x: usize, y: usize) -> [bool; 8] {
        let (x, y) = (x as i64, y as i64);
        let mut n = [false; 8];
        for (slot, (dx, dy)) in n.iter_mut().zip(NEIGHBORS8) {
            *slot = self.get(x + dx, y + dy);
        }
        n
    }

    /// True if some 2×2 window is entirely foreground.
    pub fn has_full_2x2(&self) -> bool {
        let (w, h) = self.dims();
        (1..h).any(|y| {
            (1..w).any(|x| self.at(x, y) && self.at(x - 1, y) && self.at(x, y - 1) && self.at(x - 1, y - 1))
        })
    }

    pub fn or(&self, other: &BinaryImage) -> Result<BinaryImage> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width(),
                self.height(),
                other.width(),
                other.height()
            )));
        }
        let mut px = self.px.clone();
        px.zip_mut_with(&other.px, |a, &b| *a |= b);
        Ok(Self { px })
    }

    pub fn to_gray(&self) -> Gray {
        self.px.mapv(|v| f32::from(v) * 255.0)
    }

    /// Persists as an 8-bit PNG with values {0, 255}.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray_png(&self.to_gray(), path)
    }

    /// Loads an 8-bit PNG; pixels above 127 become foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let g = load_gray_png(path)?;
        Ok(Self {
            px: g.mapv(|v| u8::from(v > 127.0)),
        })
    }
}

/// 8-connected components of the foreground, each as a list of `(x, y)`
/// pixels in discovery order. Components are returned in raster order of
/// their first pixel.
pub fn components8(img: &BinaryImage) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = img.dims();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !img.at(x, y) || seen[[y, x]] {
                continue;
            }
            let mut comp = Vec::new();
            seen[[y, x]] = true;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                comp.push((cx, cy));
                for (dx, dy) in NEIGHBORS8 {
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if img.get(nx, ny) && !seen[[ny as usize, nx as usize]] {
                        seen[[ny as usize, nx as usize]] = true;
                        stack.push((nx as usize, ny as usize));
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with clamped (replicated) borders. `sigma <= 0`
/// returns a copy.
pub fn gaussian_blur(img: &Gray, sigma: f64) -> Gray {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = img.dim();
    let mut tmp = Gray::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Gray::zeros((h, w));
    for y in 0..h {
        for (i, &kv) in k.iter().enumerate() {
            let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
            let src = tmp.row(sy);
            let mut dst = out.row_mut(y);
            dst.zip_mut_with(&src, |d, &s| *d += kv * s);
        }
    }
    out
}

/// 3×3 median filter with replicated borders.
pub fn median3x3(img: &Gray) -> Gray {
    let (h, w) = img.dim();
    let mut out = Gray::zeros((h, w));
    let mut win = [0.0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut i = 0;
            for dy in -1i64..=1 {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    win[i] = img[[sy, sx]];
                    i += 1;
                }
            }
            win.sort_unstable_by(f32::total_cmp);
            out[[y, x]] = win[4];
        }
    }
    out
}

/// Saves as 8-bit grayscale PNG, rounding and clamping to 0..=255.
pub fn save_gray_png(img: &Gray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let out = ::image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims");
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads any image the decoder understands as 8-bit luma.
pub fn load_gray_png(path: impl AsRef<Path>) -> Result<Gray> {
    let path = path.as_ref();
    let img = ::image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("luma buffer matches dims")
        .mapv(f32::from))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
