//! Synthetic projector/camera captures.
//!
//! The camera and projector are rectified with a horizontal baseline, so a
//! surface of height `z(x, y)` shows up as a horizontal disparity
//! `d(x, y) = gain · z(x, y) + offset`. Camera pixel `(x, y)` sees pattern
//! coordinate `(x + d(x, y), y)`. Keeping `|gain · ∂z/∂x| < 0.9` makes
//! `x ↦ x + d(x, y)` strictly increasing, so every pattern intersection has
//! a unique camera-space preimage that bisection finds to any tolerance.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{gaussian_blur, load_gray_png, read_json, save_gray_png, write_json, Gray, Point};
use crate::pattern::{grid_intersections, GridSpec, PatternMode, PatternProfiles};
use crate::seed;

/// Bound on `|gain · ∂z/∂x|`.
pub const MAX_WARP_SLOPE: f64 = 0.9;
/// Residual tolerance of the groundtruth solver, in pixels.
pub const TRUTH_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceShape {
    /// `z = base + tilt_x · x + tilt_y · y`
    Plane {
        #[serde(default)]
        base: f64,
        #[serde(default)]
        tilt_x: f64,
        #[serde(default)]
        tilt_y: f64,
    },
    /// Spherical cap of the given height cut from a sphere of `radius`,
    /// resting on `z = 0`.
    SphereCap {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
    /// `z = amplitude · sin(2π (x cos θ + y sin θ) / wavelength + phase)`
    Ripple {
        amplitude: f64,
        wavelength: f64,
        #[serde(default)]
        angle_deg: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl SurfaceShape {
    pub fn kind(&self) -> &'static str {
        match self {
            SurfaceShape::Plane { .. } => "plane",
            SurfaceShape::SphereCap { .. } => "sphere_cap",
            SurfaceShape::Ripple { .. } => "ripple",
        }
    }

    fn check(&self) -> Result<()> {
        let finite = |v: f64, name: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{} parameter {name} is not finite", self.kind())))
            }
        };
        match *self {
            SurfaceShape::Plane { base, tilt_x, tilt_y } => {
                finite(base, "base")?;
                finite(tilt_x, "tilt_x")?;
                finite(tilt_y, "tilt_y")
            }
            SurfaceShape::SphereCap { center, radius, height } => {
                finite(center[0], "center.x")?;
                finite(center[1], "center.y")?;
                if !(radius > 0.0) || !(height > 0.0) || !(height < radius) {
                    return Err(invalid(format!(
                        "sphere_cap needs 0 < height < radius, got height {height}, radius {radius}"
                    )));
                }
                Ok(())
            }
            SurfaceShape::Ripple { amplitude, wavelength, angle_deg, phase } => {
                finite(amplitude, "amplitude")?;
                finite(angle_deg, "angle_deg")?;
                finite(phase, "phase")?;
                if !(wavelength > 0.0) {
                    return Err(invalid(format!("ripple wavelength must be positive, got {wavelength}")));
                }
                Ok(())
            }
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            SurfaceShape::Plane { base, tilt_x, tilt_y } => base + tilt_x * x + tilt_y * y,
            SurfaceShape::SphereCap { center, radius, height } => {
                let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                ((radius * radius - r2).max(0.0).sqrt() - (radius - height)).max(0.0)
            }
            SurfaceShape::Ripple { amplitude, wavelength, angle_deg, phase } => {
                let th = angle_deg.to_radians();
                amplitude * (2.0 * PI * (x * th.cos() + y * th.sin()) / wavelength + phase).sin()
            }
        }
    }

    /// Supremum of `|∂z/∂x|` over the plane.
    pub fn max_slope_x(&self) -> f64 {
        match *self {
            SurfaceShape::Plane { tilt_x, .. } => tilt_x.abs(),
            SurfaceShape::SphereCap { radius, height, .. } => {
                // Steepest at the rim, where the cap footprint radius is a.
                let base = radius - height;
                (radius * radius - base * base).sqrt() / base
            }
            SurfaceShape::Ripple { amplitude, wavelength, angle_deg, .. } => {
                amplitude.abs() * 2.0 * PI * angle_deg.to_radians().cos().abs() / wavelength
            }
        }
    }
}

/// Disparity model `d = gain · z + offset`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub shape: SurfaceShape,
    pub domain: Dims,
    pub warp: Warp,
}

/// Validates the shape and the invertibility bound.
pub fn make_surface(shape: SurfaceShape, domain: Dims, warp: Warp) -> Result<Surface> {
    shape.check()?;
    if domain.width == 0 || domain.height == 0 {
        return Err(Error::Empty("surface domain"));
    }
    if !warp.gain.is_finite() || !warp.offset.is_finite() {
        return Err(invalid("warp gain and offset must be finite"));
    }
    let max_gradient = shape.max_slope_x();
    let product = warp.gain.abs() * max_gradient;
    if !(product < MAX_WARP_SLOPE) {
        return Err(Error::NonInvertibleWarp {
            gain: warp.gain,
            max_gradient,
            product,
        });
    }
    Ok(Surface { shape, domain, warp })
}

impl Surface {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.shape.height(x, y)
    }

    pub fn disparity(&self, x: f64, y: f64) -> f64 {
        self.warp.gain * self.shape.height(x, y) + self.warp.offset
    }

    /// Checks `x ↦ x + d(x, y)` is strictly increasing on the 1-px grid.
    pub fn warp_is_monotone(&self) -> bool {
        (0..self.domain.height).all(|y| {
            let y = y as f64;
            (1..self.domain.width).all(|x| {
                let (a, b) = ((x - 1) as f64, x as f64);
                b + self.disparity(b, y) > a + self.disparity(a, y)
            })
        })
    }
}

/// Named surfaces scaled to the image size. `compression` squeezes vertical
/// slits to about half their pitch on its steep flanks, which is where
/// blurred stripes run into each other.
pub fn surface_preset(name: &str, domain: Dims) -> Option<(SurfaceShape, Warp)> {
    let (w, h) = (domain.width as f64, domain.height as f64);
    let m = w.min(h);
    let center = [w / 2.0, h / 2.0];
    Some(match name {
        "plane" => (SurfaceShape::Plane { base: 0.0, tilt_x: 0.0, tilt_y: 0.0 }, Warp { gain: 1.0, offset: 3.0 }),
        "tilted_plane" => (
            SurfaceShape::Plane { base: 0.0, tilt_x: 0.2, tilt_y: 0.05 },
            Warp { gain: 1.0, offset: -0.1 * w },
        ),
        "sphere_cap" => (
            SurfaceShape::SphereCap { center, radius: 0.75 * m, height: 0.1 * m },
            Warp { gain: 0.5, offset: 0.0 },
        ),
        "ripple" => (
            SurfaceShape::Ripple { amplitude: 0.02 * m, wavelength: 0.25 * m, angle_deg: 20.0, phase: 0.0 },
            Warp { gain: 1.0, offset: 0.0 },
        ),
        "compression" => (
            // 2π · 0.85 / 2π = 0.85 peak compression slope.
            SurfaceShape::Ripple { amplitude: 0.85 * 0.15 * m / (2.0 * PI), wavelength: 0.15 * m, angle_deg: 0.0, phase: 0.0 },
            Warp { gain: 1.0, offset: 0.0 },
        ),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Constant { value: f64 },
    /// `mean + amplitude · sin(2πx/period) · cos(2πy/period)`
    Sinusoid { mean: f64, amplitude: f64, period: f64 },
}

impl Albedo {
    pub fn at(&self, x: f64, y: f64) -> f64 {
        match *self {
            Albedo::Constant { value } => value,
            Albedo::Sinusoid { mean, amplitude, period } => {
                mean + amplitude * (2.0 * PI * x / period).sin() * (2.0 * PI * y / period).cos()
            }
        }
    }

    fn range(&self) -> (f64, f64) {
        match *self {
            Albedo::Constant { value } => (value, value),
            Albedo::Sinusoid { mean, amplitude, .. } => (mean - amplitude.abs(), mean + amplitude.abs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Photometry {
    pub albedo: Albedo,
    #[serde(default)]
    pub ambient: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub psf_sigma: f64,
}

impl Photometry {
    /// Unit albedo, no ambient light, no noise, no blur.
    pub fn ideal() -> Self {
        Self {
            albedo: Albedo::Constant { value: 1.0 },
            ambient: 0.0,
            noise_sigma: 0.0,
            psf_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.albedo.range();
        if !(lo >= 0.2 && hi <= 1.2) {
            return Err(invalid(format!("albedo range [{lo}, {hi}] leaves [0.2, 1.2]")));
        }
        if let Albedo::Sinusoid { period, .. } = self.albedo {
            if !(period > 0.0) {
                return Err(invalid("albedo period must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.psf_sigma >= 0.0) || !self.ambient.is_finite() {
            return Err(invalid("noise_sigma and psf_sigma must be >= 0 and ambient finite"));
        }
        Ok(())
    }
}

/// Renders one camera image:
/// `I = round(clamp(albedo · blur(P(x + d(x, y), y)) + ambient + noise, 0, 255))`.
pub fn render_scene(
    spec: &GridSpec,
    mode: PatternMode,
    surface: &Surface,
    photometry: &Photometry,
    seed: u64,
) -> Result<Gray> {
    photometry.validate()?;
    let Dims { width, height } = surface.domain;
    let prof = PatternProfiles::new(spec);
    let warped = Gray::from_shape_fn((height, width), |(y, x)| {
        let (xf, yf) = (x as f64, y as f64);
        prof.sample(mode, xf + surface.disparity(xf, yf), y)
    });
    let mut img = gaussian_blur(&warped, photometry.psf_sigma);
    for ((y, x), v) in img.indexed_iter_mut() {
        let a = photometry.albedo.at(x as f64, y as f64) as f32;
        *v = a * *v + photometry.ambient as f32;
    }
    if photometry.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, photometry.noise_sigma as f32).map_err(|e| invalid(e.to_string()))?;
        let mut rng = seed::rng(seed);
        img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    img.mapv_inplace(|v| v.clamp(0.0, 255.0).round());
    Ok(img)
}

/// Analytic groundtruth in camera space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub points: Vec<Point>,
    /// Pattern intersections with no preimage inside the image.
    pub dropped: usize,
}

/// Solves `x + d(x, v) = u` for every pattern intersection `(u, v)` by
/// bisection over `[0, width - 1]`. Intersections whose row lies outside the
/// image, or whose root is not bracketed inside it, are dropped and counted.
pub fn groundtruth_points(spec: &GridSpec, surface: &Surface) -> Result<GroundTruth> {
    let product = surface.warp.gain.abs() * surface.shape.max_slope_x();
    if !(product < MAX_WARP_SLOPE) {
        return Err(Error::NonInvertibleWarp {
            gain: surface.warp.gain,
            max_gradient: surface.shape.max_slope_x(),
            product,
        });
    }
    let xmax = (surface.domain.width - 1) as f64;
    let ymax = (surface.domain.height - 1) as f64;
    let mut points = Vec::new();
    let mut dropped = 0;
    for p in grid_intersections(spec) {
        let (u, v) = (p.x, p.y);
        if !(0.0..=ymax).contains(&v) {
            dropped += 1;
            continue;
        }
        let f = |x: f64| x + surface.disparity(x, v) - u;
        let (mut lo, mut hi) = (0.0, xmax);
        if f(lo) > 0.0 || f(hi) < 0.0 {
            dropped += 1;
            continue;
        }
        while hi - lo > 1e-7 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        debug_assert!(f(x).abs() <= TRUTH_TOLERANCE);
        points.push(Point::new(x, v));
    }
    Ok(GroundTruth { points, dropped })
}

/// One-shot capture plus the two-shot pair at the same pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image_grid: Gray,
    pub image_v: Gray,
    pub image_h: Gray,
    pub surface: Surface,
    pub photometry: Photometry,
    pub seed: u64,
    pub truth: GroundTruth,
    pub spec_ref: String,
}

/// Renders the grid, vertical-only and horizontal-only captures with the same
/// surface and photometry. Noise seeds differ per capture.
pub fn render_trio(spec: &GridSpec, surface: &Surface, photometry: &Photometry, seed: u64) -> Result<SceneSample> {
    Ok(SceneSample {
        image_grid: render_scene(spec, PatternMode::Grid, surface, photometry, seed)?,
        image_v: render_scene(spec, PatternMode::VerticalOnly, surface, photometry, seed::derive(seed, &[1]))?,
        image_h: render_scene(spec, PatternMode::HorizontalOnly, surface, photometry, seed::derive(seed, &[2]))?,
        surface: surface.clone(),
        photometry: photometry.clone(),
        seed,
        truth: groundtruth_points(spec, surface)?,
        spec_ref: spec.id(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneMeta {
    surface: Surface,
    photometry: Photometry,
    seed: u64,
    spec_ref: String,
    dropped: usize,
}

pub const GRID_PNG: &str = "grid.png";
pub const VERTICAL_PNG: &str = "vertical.png";
pub const HORIZONTAL_PNG: &str = "horizontal.png";
pub const TRUTH_JSON: &str = "truth.json";
pub const META_JSON: &str = "meta.json";

impl SceneSample {
    /// Writes the three PNGs, `truth.json` (array of `[x, y]`) and
    /// `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_gray_png(&self.image_grid, dir.join(GRID_PNG))?;
        save_gray_png(&self.image_v, dir.join(VERTICAL_PNG))?;
        save_gray_png(&self.image_h, dir.join(HORIZONTAL_PNG))?;
        write_json(&self.truth.points, &dir.join(TRUTH_JSON))?;
        let meta = SceneMeta {
            surface: self.surface.clone(),
            photometry: self.photometry.clone(),
            seed: self.seed,
            spec_ref: self.spec_ref.clone(),
            dropped: self.truth.dropped,
        };
        write_json(&meta, &dir.join(META_JSON))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: SceneMeta = read_json(&dir.join(META_JSON))?;
        let points: Vec<Point> = read_json(&dir.join(TRUTH_JSON))?;
        let s = SceneSample {
            image_grid: load_gray_png(dir.join(GRID_PNG))?,
            image_v: load_gray_png(dir.join(VERTICAL_PNG))?,
            image_h: load_gray_png(dir.join(HORIZONTAL_PNG))?,
            surface: meta.surface,
            photometry: meta.photometry,
            seed: meta.seed,
            truth: GroundTruth { points, dropped: meta.dropped },
            spec_ref: meta.spec_ref,
        };
        if s.image_grid.dim() != s.image_v.dim() || s.image_grid.dim() != s.image_h.dim() {
            return Err(Error::DimensionMismatch(format!("scene images in {} differ in size", dir.display())));
        }
        Ok(s)
    }
}

/// Loads just the truth points of a saved scene.
pub fn load_truth(dir: impl AsRef<Path>) -> Result<Vec<Point>> {
    read_json(&dir.as_ref().join(TRUTH_JSON))
}

/// Mean absolute per-pixel difference between two images of equal size.
pub fn mean_abs_diff(a: &Gray, b: &Gray) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n
}

/// Random surface within the invertibility bound, for property tests and
/// dataset diversity.
pub fn random_surface(rng: &mut impl Rng, domain: Dims) -> Surface {
    let m = domain.width.min(domain.height) as f64;
    let shape = match rng.random_range(0..3) {
        0 => SurfaceShape::Plane {
            base: rng.random_range(-5.0..5.0),
            tilt_x: rng.random_range(-0.4..0.4),
            tilt_y: rng.random_range(-0.2..0.2),
        },
        1 => {
            let radius = rng.random_range(0.5..1.0) * m;
            SurfaceShape::SphereCap {
                center: [rng.random_range(0.3..0.7) * domain.width as f64, rng.random_range(0.3..0.7) * domain.height as f64],
                radius,
                height: rng.random_range(0.05..0.2) * radius,
            }
        }
        _ => SurfaceShape::Ripple {
            amplitude: rng.random_range(0.005..0.03) * m,
            wavelength: rng.random_range(0.2..0.6) * m,
            angle_deg: rng.random_range(0.0..180.0),
            phase: rng.random_range(0.0..6.28),
        },
    };
    let slope = shape.max_slope_x().max(1e-9);
    let gain = (rng.random_range(0.2..0.8) / slope).min(1.5);
    make_surface(shape, domain, Warp { gain, offset: rng.random_range(-4.0..4.0) }).expect("gain chosen inside the bound")
}
