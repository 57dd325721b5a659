//! Groundtruth labels from the two-shot pair: denoise, binarize, thin each
//! single-axis capture, then fuse the two skeletons.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{gaussian_blur, median3x3, BinaryImage, Gray};

/// Median 3×3, Gaussian blur, then stretch to the full 0..=255 range.
/// A constant input comes back unchanged; a result whose range is below
/// 1e-3 gray levels is returned without stretching.
pub fn preprocess(image: &Gray, blur_sigma: f64) -> Result<Gray> {
    if image.is_empty() {
        return Err(Error::Empty("image"));
    }
    let first = image[[0, 0]];
    if image.iter().all(|&v| v == first) {
        return Ok(image.clone());
    }
    let out = gaussian_blur(&median3x3(image), blur_sigma);
    let (lo, hi) = out.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-3 {
        return Ok(out);
    }
    let scale = 255.0 / (hi - lo);
    Ok(out.mapv(|v| (v - lo) * scale))
}

/// Value channel (max over R, G, B) of an RGB raster, for color captures.
pub fn value_channel(rgb: &::image::RgbImage) -> Gray {
    let (w, h) = rgb.dimensions();
    Gray::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let p = rgb.get_pixel(x as u32, y as u32).0;
        f32::from(p[0].max(p[1]).max(p[2]))
    })
}

/// Adaptive mean threshold: foreground iff the pixel exceeds the mean of its
/// `window × window` neighborhood (clipped at the borders) by more than
/// `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveThreshold {
    pub window: usize,
    pub offset: f32,
}

impl AdaptiveThreshold {
    /// Window spans two slit pitches plus one, offset of 5 gray levels.
    pub fn for_spacing(spacing: f64) -> Self {
        Self {
            window: 2 * spacing.round() as usize + 1,
            offset: 5.0,
        }
    }
}

pub fn binarize(image: &Gray, params: AdaptiveThreshold) -> Result<BinaryImage> {
    if params.window == 0 || params.window % 2 == 0 {
        return Err(invalid(format!("threshold window must be odd, got {}", params.window)));
    }
    let (h, w) = image.dim();
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += image[[y, x]] as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let r = params.window / 2;
    Ok(BinaryImage::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
        let mean = sum / ((x1 - x0) * (y1 - y0)) as f64;
        image[[y, x]] as f64 > mean + params.offset as f64
    }))
}

/// Number of 0→1 transitions in the circular sequence P2..P9.
#[inline]
pub fn crossing_number(n: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count()
}

/// Yokoi connectivity number for 8-connected foreground; a pixel with value 1
/// can be removed without changing topology.
fn yokoi8(n: &[bool; 8]) -> i32 {
    // Counter-clockwise from E: E, NE, N, NW, W, SW, S, SE.
    let ring = [n[2], n[1], n[0], n[7], n[6], n[5], n[4], n[3]];
    let c = |i: usize| i32::from(!ring[i % 8]);
    (0..4).map(|k| 2 * k).map(|k| c(k) - c(k) * c(k + 1) * c(k + 2)).sum()
}

fn zs_pass(img: &mut BinaryImage, fg: &mut Vec<(usize, usize)>, first: bool) -> bool {
    let mut remove = Vec::new();
    for &(x, y) in fg.iter() {
        let n = img.neighbors(x, y);
        let b = n.iter().filter(|&&v| v).count();
        if !(2..=6).contains(&b) || crossing_number(&n) != 1 {
            continue;
        }
        let [p2, _, p4, _, p6, _, p8, _] = n;
        let ok = if first {
            !(p2 && p4 && p6) && !(p4 && p6 && p8)
        } else {
            !(p2 && p4 && p8) && !(p2 && p6 && p8)
        };
        if ok {
            remove.push((x, y));
        }
    }
    for &(x, y) in &remove {
        img.set(x, y, false);
    }
    if !remove.is_empty() {
        fg.retain(|&(x, y)| img.at(x, y));
    }
    !remove.is_empty()
}

/// Breaks remaining all-foreground 2×2 blocks by removing a simple pixel.
fn break_blocks(img: &mut BinaryImage) -> bool {
    let (w, h) = img.dims();
    let mut changed = false;
    for y in 1..h {
        for x in 1..w {
            let block = [(x - 1, y - 1), (x, y - 1), (x - 1, y), (x, y)];
            if !block.iter().all(|&(bx, by)| img.at(bx, by)) {
                continue;
            }
            if let Some(&(bx, by)) = block.iter().find(|&&(bx, by)| yokoi8(&img.neighbors(bx, by)) == 1) {
                img.set(bx, by, false);
                changed = true;
            }
        }
    }
    changed
}

/// Zhang–Suen thinning to a one-pixel-wide 8-connected skeleton. Any 2×2
/// block Zhang–Suen leaves behind is broken at a simple pixel and thinning
/// resumes, so the result is a fixed point of both steps and contains no
/// all-foreground 2×2 block.
pub fn skeletonize(binary: &BinaryImage) -> BinaryImage {
    let mut img = binary.clone();
    let mut fg: Vec<(usize, usize)> = img.ones().collect();
    loop {
        loop {
            let a = zs_pass(&mut img, &mut fg, true);
            let b = zs_pass(&mut img, &mut fg, false);
            if !a && !b {
                break;
            }
        }
        if !break_blocks(&mut img) {
            break;
        }
        fg = img.ones().collect();
    }
    img
}

/// Pixelwise OR of the two single-axis skeletons, re-thinned where they cross.
pub fn fuse_labels(skel_h: &BinaryImage, skel_v: &BinaryImage) -> Result<BinaryImage> {
    Ok(skeletonize(&skel_h.or(skel_v)?))
}

/// Settings for turning one two-shot capture into a skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelParams {
    pub blur_sigma: f64,
    pub threshold: AdaptiveThreshold,
}

/// Full labeling path for one single-axis capture.
pub fn skeleton_of(image: &Gray, params: &LabelParams) -> Result<BinaryImage> {
    Ok(skeletonize(&binarize(&preprocess(image, params.blur_sigma)?, params.threshold)?))
}

/// Label image from the vertical-only and horizontal-only captures.
pub fn label_from_pair(image_v: &Gray, image_h: &Gray, params: &LabelParams) -> Result<BinaryImage> {
    fuse_labels(&skeleton_of(image_h, params)?, &skeleton_of(image_v, params)?)
}
