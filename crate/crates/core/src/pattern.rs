//! De Bruijn coded grid patterns.
//!
//! A [`GridSpec`] fixes slit geometry in pattern space. Slit symbols come
//! from a De Bruijn sequence and ride along as metadata only; nothing
//! downstream decodes them.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{read_json, write_json, Gray, Point};
use crate::seed;

pub const FOREGROUND: f32 = 255.0;
pub const BACKGROUND: f32 = 0.0;

const MAX_DEBRUIJN_LEN: u64 = 1_000_000;

/// Cyclic sequence over `k` symbols in which every length-`n` window occurs
/// exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeBruijnSeq {
    pub k: u32,
    pub n: u32,
    pub symbols: Vec<u32>,
}

impl DeBruijnSeq {
    /// Checks length and cyclic window uniqueness by enumeration.
    pub fn is_valid(&self) -> bool {
        let len = (self.k as u64).checked_pow(self.n);
        if len != Some(self.symbols.len() as u64) || self.symbols.iter().any(|&s| s >= self.k) {
            return false;
        }
        let len = self.symbols.len();
        let mut seen = vec![false; len];
        for start in 0..len {
            let code = (0..self.n as usize).fold(0usize, |acc, j| {
                acc * self.k as usize + self.symbols[(start + j) % len] as usize
            });
            if std::mem::replace(&mut seen[code], true) {
                return false;
            }
        }
        true
    }
}

/// Builds B(k, n) by Lyndon-word concatenation (FKM), then relabels the
/// alphabet with a seeded permutation. Relabeling preserves the window
/// property, so the seed only changes which symbol plays which role.
pub fn debruijn_sequence(k: u32, n: u32, seed: u64) -> Result<DeBruijnSeq> {
    if k < 2 || n < 1 {
        return Err(invalid(format!("De Bruijn needs k >= 2 and n >= 1, got k={k}, n={n}")));
    }
    match (k as u64).checked_pow(n) {
        Some(len) if len <= MAX_DEBRUIJN_LEN => {}
        _ => return Err(invalid(format!("De Bruijn length {k}^{n} exceeds {MAX_DEBRUIJN_LEN}"))),
    }

    fn fkm(t: usize, p: usize, k: u32, n: usize, a: &mut [u32], out: &mut Vec<u32>) {
        if t > n {
            if n % p == 0 {
                out.extend_from_slice(&a[1..=p]);
            }
        } else {
            a[t] = a[t - p];
            fkm(t + 1, p, k, n, a, out);
            for j in (a[t - p] + 1)..k {
                a[t] = j;
                fkm(t + 1, t, k, n, a, out);
            }
        }
    }

    let n_us = n as usize;
    let mut a = vec![0u32; n_us + 1];
    let mut symbols = Vec::with_capacity((k as usize).pow(n));
    fkm(1, 1, k, n_us, &mut a, &mut symbols);

    let mut perm: Vec<u32> = (0..k).collect();
    perm.shuffle(&mut seed::rng(seed));
    symbols.iter_mut().for_each(|s| *s = perm[*s as usize]);
    Ok(DeBruijnSeq { k, n, symbols })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

/// Slit geometry of a grid pattern. Coordinates are slit centerlines in
/// pattern-space pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub vertical_slits: Vec<f64>,
    pub horizontal_slits: Vec<f64>,
    pub slit_width: f64,
    pub canvas: Canvas,
    pub vseq: DeBruijnSeq,
    pub hseq: DeBruijnSeq,
}

/// Parameters for [`make_grid_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub n_vertical: usize,
    pub n_horizontal: usize,
    /// Centerline pitch of the vertical slits (along x).
    pub spacing_x: f64,
    /// Centerline pitch of the horizontal slits (along y).
    pub spacing_y: f64,
    pub slit_width: f64,
    pub canvas: Canvas,
    #[serde(default = "default_k")]
    pub debruijn_k: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> u32 {
    3
}

impl GridLayout {
    /// Same pitch on both axes.
    pub fn uniform(n_vertical: usize, n_horizontal: usize, spacing: f64, slit_width: f64, canvas: Canvas) -> Self {
        Self {
            n_vertical,
            n_horizontal,
            spacing_x: spacing,
            spacing_y: spacing,
            slit_width,
            canvas,
            debruijn_k: default_k(),
            seed: 0,
        }
    }
}

/// Evenly spaced slits, centered on the canvas with the first centerline
/// floored to a whole pixel. Each axis gets a De Bruijn sequence long enough
/// to label every slit.
pub fn make_grid_spec(layout: &GridLayout) -> Result<GridSpec> {
    let GridLayout {
        n_vertical,
        n_horizontal,
        spacing_x,
        spacing_y,
        slit_width,
        canvas,
        debruijn_k,
        seed,
    } = *layout;
    if n_vertical == 0 || n_horizontal == 0 {
        return Err(invalid("slit counts must be positive"));
    }
    if !(slit_width > 0.0) {
        return Err(invalid(format!("slit width must be positive, got {slit_width}")));
    }
    for (axis, spacing, n) in [("x", spacing_x, n_vertical), ("y", spacing_y, n_horizontal)] {
        // The gap left between neighbouring slits must exceed the slit width.
        if n > 1 && !(spacing - slit_width > slit_width) {
            return Err(invalid(format!(
                "spacing_{axis} {spacing} leaves a gap of {} which is not wider than the slit width {slit_width}",
                spacing - slit_width
            )));
        }
    }
    let vertical_slits = place_slits(n_vertical, spacing_x, slit_width, canvas.width, "vertical")?;
    let horizontal_slits = place_slits(n_horizontal, spacing_y, slit_width, canvas.height, "horizontal")?;

    let seq_for = |count: usize, salt: u64| -> Result<DeBruijnSeq> {
        let mut n = 1u32;
        while (debruijn_k as u64).pow(n) < count as u64 {
            n += 1;
        }
        debruijn_sequence(debruijn_k, n, seed::derive(seed, &[salt]))
    };
    let spec = GridSpec {
        vertical_slits,
        horizontal_slits,
        slit_width,
        canvas,
        vseq: seq_for(n_vertical, 0)?,
        hseq: seq_for(n_horizontal, 1)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn place_slits(n: usize, spacing: f64, width: f64, extent: usize, what: &str) -> Result<Vec<f64>> {
    let span = (n - 1) as f64 * spacing;
    let first = ((extent as f64 - 1.0 - span) / 2.0).floor();
    let half = width / 2.0;
    if first - half < -0.5 || first + span + half > extent as f64 - 0.5 {
        return Err(invalid(format!(
            "{n} {what} slits at pitch {spacing} and width {width} do not fit in {extent} px"
        )));
    }
    Ok((0..n).map(|i| first + i as f64 * spacing).collect())
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("vertical", &self.vertical_slits, self.canvas.width),
            ("horizontal", &self.horizontal_slits, self.canvas.height),
        ];
        for (what, slits, extent) in axes {
            if slits.is_empty() {
                return Err(invalid(format!("no {what} slits")));
            }
            for w in slits.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(invalid(format!("{what} slits not strictly increasing")));
                }
                if !(w[1] - w[0] - self.slit_width > self.slit_width) {
                    return Err(invalid(format!(
                        "{what} slits at {} and {} leave a gap not wider than the slit width",
                        w[0], w[1]
                    )));
                }
            }
            let half = self.slit_width / 2.0;
            if slits[0] - half < -0.5 || slits[slits.len() - 1] + half > extent as f64 - 0.5 {
                return Err(invalid(format!("{what} slits leave the canvas")));
            }
        }
        for (name, seq) in [("vseq", &self.vseq), ("hseq", &self.hseq)] {
            if !seq.is_valid() {
                return Err(invalid(format!("{name} is not a De Bruijn sequence")));
            }
        }
        Ok(())
    }

    /// Smallest distance between facing edges of neighbouring slits.
    pub fn min_edge_gap(&self) -> f64 {
        self.vertical_slits
            .windows(2)
            .chain(self.horizontal_slits.windows(2))
            .map(|w| w[1] - w[0] - self.slit_width)
            .fold(f64::INFINITY, f64::min)
    }

    /// Short content hash used to tie scenes back to the pattern.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("GridSpec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let spec: GridSpec = read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMode {
    Grid,
    VerticalOnly,
    HorizontalOnly,
}

/// Fraction of pixel `[i - 0.5, i + 0.5]` covered by slits centered at `centers`.
fn coverage_profile(centers: &[f64], width: f64, len: usize) -> Vec<f32> {
    let half = width / 2.0;
    let mut prof = vec![0.0f64; len];
    for &c in centers {
        let lo = ((c - half - 0.5).floor().max(0.0)) as usize;
        let hi = ((c + half + 0.5).ceil() as usize).min(len.saturating_sub(1));
        for (i, v) in prof.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let p = i as f64;
            let cov = ((p + 0.5).min(c + half) - (p - 0.5).max(c - half)).max(0.0);
            *v = v.max(cov.min(1.0));
        }
    }
    prof.into_iter()
        .map(|c| BACKGROUND + (FOREGROUND - BACKGROUND) * c as f32)
        .collect()
}

/// Pattern intensity along one axis: `v` varies with x only, `h` with y only.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternProfiles {
    pub v: Vec<f32>,
    pub h: Vec<f32>,
}

impl PatternProfiles {
    pub fn new(spec: &GridSpec) -> Self {
        Self {
            v: coverage_profile(&spec.vertical_slits, spec.slit_width, spec.canvas.width),
            h: coverage_profile(&spec.horizontal_slits, spec.slit_width, spec.canvas.height),
        }
    }

    /// Intensity at pattern coordinate `(u, row)`: linear interpolation along
    /// x, exact row lookup along y, background outside the canvas (both axes,
    /// since nothing is projected there). The grid mode is the max of the two
    /// single-axis values.
    pub fn sample(&self, mode: PatternMode, u: f64, row: usize) -> f32 {
        let vert = || {
            let at = |i: i64| {
                usize::try_from(i)
                    .ok()
                    .and_then(|i| self.v.get(i).copied())
                    .unwrap_or(BACKGROUND)
            };
            let f = u.floor();
            let t = (u - f) as f32;
            let i0 = f as i64;
            at(i0) * (1.0 - t) + at(i0 + 1) * t
        };
        let on_canvas = u >= -0.5 && u <= self.v.len() as f64 - 0.5;
        let horiz = || match on_canvas {
            true => self.h.get(row).copied().unwrap_or(BACKGROUND),
            false => BACKGROUND,
        };
        match mode {
            PatternMode::VerticalOnly => vert(),
            PatternMode::HorizontalOnly => horiz(),
            PatternMode::Grid => vert().max(horiz()),
        }
    }
}

/// Renders the pattern on its canvas. Slit pixels get [`FOREGROUND`] weighted
/// by how much of the pixel the slit covers; the grid mode is the pixelwise
/// max of the two single-axis renders.
pub fn render_pattern(spec: &GridSpec, mode: PatternMode) -> Gray {
    let prof = PatternProfiles::new(spec);
    Gray::from_shape_fn((spec.canvas.height, spec.canvas.width), |(y, x)| match mode {
        PatternMode::VerticalOnly => prof.v[x],
        PatternMode::HorizontalOnly => prof.h[y],
        PatternMode::Grid => prof.v[x].max(prof.h[y]),
    })
}

/// Slit centerline crossings, row-major (all crossings of the first
/// horizontal slit, then the next).
pub fn grid_intersections(spec: &GridSpec) -> Vec<Point> {
    spec.horizontal_slits
        .iter()
        .flat_map(|&y| spec.vertical_slits.iter().map(move |&x| Point::new(x, y)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows_unique(seq: &DeBruijnSeq) -> bool {
        let len = seq.symbols.len();
        let n = seq.n as usize;
        let mut all: Vec<Vec<u32>> = (0..len)
            .map(|s| (0..n).map(|j| seq.symbols[(s + j) % len]).collect())
            .collect();
        all.sort();
        all.dedup();
        all.len() == len
    }

    #[test]
    fn debruijn_k2_n1_is_permutation() {
        let s = debruijn_sequence(2, 1, 9).unwrap();
        let mut sym = s.symbols.clone();
        sym.sort();
        assert_eq!(sym, vec![0, 1]);
    }

    #[test]
    fn debruijn_small_cases_have_unique_windows() {
        for (k, n) in [(2, 2), (2, 3), (3, 2), (4, 3)] {
            for seed in 0..4 {
                let s = debruijn_sequence(k, n, seed).unwrap();
                assert_eq!(s.symbols.len(), (k as usize).pow(n));
                assert!(windows_unique(&s), "k={k} n={n} seed={seed}");
                assert!(s.is_valid());
            }
        }
    }

    #[test]
    fn debruijn_unseeded_order_matches_lyndon_construction() {
        // With the identity relabeling the FKM order for B(2,3) is 00010111.
        let s = debruijn_sequence(2, 3, 0).unwrap();
        let canon: Vec<u32> = if s.symbols[0] == 0 {
            s.symbols.clone()
        } else {
            s.symbols.iter().map(|v| 1 - v).collect()
        };
        assert_eq!(canon, vec![0, 0, 0, 1, 0, 1, 1, 1]);
    }

    #[test]
    fn debruijn_rejects_bad_parameters() {
        assert!(debruijn_sequence(1, 3, 0).is_err());
        assert!(debruijn_sequence(2, 0, 0).is_err());
        assert!(debruijn_sequence(10, 7, 0).is_err());
        assert!(debruijn_sequence(10, 6, 0).is_ok());
    }

    #[test]
    fn paper_scale_grid() {
        let layout = GridLayout {
            n_vertical: 127,
            n_horizontal: 66,
            spacing_x: 11.0,
            spacing_y: 15.0,
            slit_width: 3.0,
            canvas: Canvas::new(1400, 1050),
            debruijn_k: 3,
            seed: 0,
        };
        let spec = make_grid_spec(&layout).unwrap();
        assert_eq!(spec.vertical_slits.len(), 127);
        assert_eq!(spec.horizontal_slits.len(), 66);
        assert_eq!(grid_intersections(&spec).len(), 127 * 66);
        assert_eq!(127 * 66, 8382);
        assert!(spec.vseq.symbols.len() >= 127 && spec.hseq.symbols.len() >= 66);
    }

    #[test]
    fn single_slit_pair() {
        let spec = make_grid_spec(&GridLayout::uniform(1, 1, 32.0, 3.0, Canvas::new(64, 64))).unwrap();
        assert_eq!(spec.vertical_slits, vec![31.0]);
        assert_eq!(spec.horizontal_slits, vec![31.0]);
        let pts = grid_intersections(&spec);
        assert_eq!(pts, vec![Point::new(31.0, 31.0)]);
        let img = render_pattern(&spec, PatternMode::Grid);
        for ((y, x), &v) in img.indexed_iter() {
            let on_band = (30..=32).contains(&x) || (30..=32).contains(&y);
            assert_eq!(v, if on_band { FOREGROUND } else { BACKGROUND }, "({x},{y})");
        }
    }

    #[test]
    fn three_by_two_coordinates_by_hand() {
        // first = floor((63 - 32) / 2) = 15 → 15, 31, 47; rows: floor((47 - 16) / 2) = 15 → 15, 31.
        let spec = make_grid_spec(&GridLayout::uniform(3, 2, 16.0, 3.0, Canvas::new(64, 48))).unwrap();
        assert_eq!(spec.vertical_slits, vec![15.0, 31.0, 47.0]);
        assert_eq!(spec.horizontal_slits, vec![15.0, 31.0]);
        assert_eq!(spec.min_edge_gap(), 13.0);
        assert_eq!(grid_intersections(&spec).len(), 6);
    }

    #[test]
    fn vertical_only_profile_has_one_plateau_per_slit() {
        let spec = make_grid_spec(&GridLayout::uniform(3, 2, 16.0, 3.0, Canvas::new(64, 48))).unwrap();
        let img = render_pattern(&spec, PatternMode::VerticalOnly);
        let row: Vec<bool> = img.row(7).iter().map(|&v| v == FOREGROUND).collect();
        let mut plateaus = Vec::new();
        let mut run = 0;
        for &on in row.iter().chain(std::iter::once(&false)) {
            if on {
                run += 1;
            } else if run > 0 {
                plateaus.push(run);
                run = 0;
            }
        }
        assert_eq!(plateaus, vec![3, 3, 3]);
    }

    #[test]
    fn grid_is_pixelwise_max() {
        let spec = make_grid_spec(&GridLayout::uniform(4, 3, 12.5, 3.0, Canvas::new(64, 48))).unwrap();
        let v = render_pattern(&spec, PatternMode::VerticalOnly);
        let h = render_pattern(&spec, PatternMode::HorizontalOnly);
        let g = render_pattern(&spec, PatternMode::Grid);
        let mut m = v.clone();
        m.zip_mut_with(&h, |a, &b| *a = a.max(b));
        assert_eq!(m, g);
    }

    #[test]
    fn rejects_adhesive_spacing_and_overflow() {
        assert!(make_grid_spec(&GridLayout::uniform(3, 3, 6.0, 3.0, Canvas::new(64, 64))).is_err());
        assert!(make_grid_spec(&GridLayout::uniform(10, 3, 16.0, 3.0, Canvas::new(64, 64))).is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_grid_spec(&GridLayout::uniform(3, 2, 16.0, 3.0, Canvas::new(64, 48))).unwrap();
        let p = dir.path().join("grid.json");
        spec.save_json(&p).unwrap();
        assert_eq!(GridSpec::load_json(&p).unwrap(), spec);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn intersections_and_gaps(nv in 1usize..12, nh in 1usize..12, sp in 7.0f64..20.0, w in 1.0f64..3.4) {
                let canvas = Canvas::new(256, 256);
                if let Ok(spec) = make_grid_spec(&GridLayout::uniform(nv, nh, sp, w, canvas)) {
                    prop_assert_eq!(grid_intersections(&spec).len(), nv * nh);
                    prop_assert!(spec.min_edge_gap() > 0.0);
                }
            }
        }
    }
}
