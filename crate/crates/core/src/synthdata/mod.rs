//! Procedural toy traffic signs: canonical pictograms and posed, lit scenes.
//!
//! Signs live in canonical coordinates `(u, v)` inside the unit disk. A
//! scene maps them into an 80x80 frame through a homography, so the object
//! circle of every scene is the image of the unit circle plus one pixel.

mod dataset;
mod image;

pub use dataset::{
    generate_dataset, load_training_set, pictogram_at, DatasetConfig, DatasetManifest, ManifestRecord, MANIFEST_NAME,
};
pub use image::{load_image, rgb8_to_tensor, save_image, tensor_to_rgb8};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::Circle;

pub const SCENE_SIZE: usize = 80;
/// Glyph slots per category; class ids are `category * GLYPH_COUNT + glyph`.
pub const GLYPH_COUNT: u32 = 8;
pub const GLYPH_NAMES: [&str; GLYPH_COUNT as usize] =
    ["bar", "dot", "chevron", "cross", "pillar", "ring", "pair", "plus"];

const SUPERSAMPLE: usize = 4;
/// Canonical sign radius as a fraction of the pictogram size.
const PICTOGRAM_RADIUS: f64 = 0.4;
const NEUTRAL: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    WhiteTriangle,
    WhiteCircle,
    BlueRectangle,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::WhiteTriangle, Category::WhiteCircle, Category::BlueRectangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::WhiteTriangle => "white_triangle",
            Category::WhiteCircle => "white_circle",
            Category::BlueRectangle => "blue_rectangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn default_palette(self) -> Palette {
        const RED: [f64; 3] = [0.8, 0.08, 0.1];
        const WHITE: [f64; 3] = [0.96, 0.96, 0.94];
        const BLACK: [f64; 3] = [0.06, 0.06, 0.08];
        match self {
            Category::WhiteTriangle | Category::WhiteCircle => Palette {
                border: RED,
                fill: WHITE,
                glyph: BLACK,
            },
            Category::BlueRectangle => Palette {
                border: WHITE,
                fill: [0.08, 0.28, 0.75],
                glyph: WHITE,
            },
        }
    }
}

/// Colors in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub border: [f64; 3],
    pub fill: [f64; 3],
    pub glyph: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySignSpec {
    pub category: Category,
    pub glyph_id: u32,
    pub palette: Palette,
}

impl ToySignSpec {
    pub fn new(category: Category, glyph_id: u32) -> Result<Self> {
        if glyph_id >= GLYPH_COUNT {
            return Err(Error::invalid("ToySignSpec", format!("unknown glyph id {glyph_id}")));
        }
        Ok(Self {
            category,
            glyph_id,
            palette: category.default_palette(),
        })
    }

    pub fn from_class_id(class_id: u32) -> Result<Self> {
        let cat = Category::ALL
            .get((class_id / GLYPH_COUNT) as usize)
            .ok_or_else(|| Error::invalid("ToySignSpec", format!("unknown class id {class_id}")))?;
        Self::new(*cat, class_id % GLYPH_COUNT)
    }

    pub fn class_id(&self) -> u32 {
        self.category.index() as u32 * GLYPH_COUNT + self.glyph_id
    }

    /// Sign color at canonical point `(u, v)`, or `None` off the sign. The
    /// sign always lies inside the unit disk.
    fn color_at(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let p = &self.palette;
        let (border, glyph_uv) = match self.category {
            Category::WhiteCircle => {
                let d = (u * u + v * v).sqrt();
                if d > 1.0 {
                    return None;
                }
                (d > 0.78, (u / 0.9, v / 0.9))
            }
            Category::WhiteTriangle => {
                // upward equilateral triangle with vertices on the unit circle;
                // `depth` is the distance inside the nearest edge
                let s3 = 3f64.sqrt();
                let depth = [0.5 - v, (s3 * u + v + 1.0) / 2.0, (-s3 * u + v + 1.0) / 2.0]
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                if depth < 0.0 {
                    return None;
                }
                (depth < 0.2, (u / 0.55, (v - 0.14) / 0.55))
            }
            Category::BlueRectangle => {
                let m = u.abs().max(v.abs());
                if m > 0.7 {
                    return None;
                }
                (m > 0.62, (u / 0.85, v / 0.85))
            }
        };
        Some(if border {
            p.border
        } else if glyph_hit(self.glyph_id, glyph_uv.0, glyph_uv.1) {
            p.glyph
        } else {
            p.fill
        })
    }
}

fn glyph_hit(glyph: u32, u: f64, v: f64) -> bool {
    let box_ = |w: f64, h: f64| u.abs() < w && v.abs() < h;
    match glyph {
        0 => box_(0.6, 0.17),
        1 => u * u + v * v < 0.34 * 0.34,
        2 => u.abs() < 0.6 && (v - (u.abs() * 0.9 - 0.3)).abs() < 0.17,
        3 => u.abs() < 0.52 && v.abs() < 0.52 && ((u - v).abs() < 0.2 || (u + v).abs() < 0.2),
        4 => box_(0.17, 0.6),
        5 => {
            let r = (u * u + v * v).sqrt();
            (0.3..0.52).contains(&r)
        }
        6 => (u.abs() - 0.32).powi(2) + v * v < 0.2 * 0.2,
        7 => box_(0.14, 0.58) || box_(0.58, 0.14),
        _ => false,
    }
}

/// Procedural background behind the sign.
#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    /// Vertical gradient from `top` to `bottom`.
    Sky { top: [f64; 3], bottom: [f64; 3] },
    /// Bilinear value noise on a coarse `grid x grid` lattice.
    Noise { grid: usize, lattice: Vec<[f64; 3]> },
    /// Two-color stripes at `angle` radians with `period` pixels.
    Stripes { a: [f64; 3], b: [f64; 3], angle: f64, period: f64 },
    Flat([f64; 3]),
}

impl Background {
    pub fn id(&self) -> usize {
        match self {
            Background::Sky { .. } => 0,
            Background::Noise { .. } => 1,
            Background::Stripes { .. } => 2,
            Background::Flat(_) => 3,
        }
    }

    fn random(rng: &mut Rng) -> Self {
        let color = |rng: &mut Rng, lo: f64, hi: f64| [rng.range(lo, hi), rng.range(lo, hi), rng.range(lo, hi)];
        match rng.below(3) {
            0 => {
                let top = color(rng, 0.4, 0.95);
                let bottom = color(rng, 0.15, 0.7);
                Background::Sky { top, bottom }
            }
            1 => {
                let grid = 4 + rng.below(5);
                let base = [rng.range(0.2, 0.8), rng.range(0.2, 0.8), rng.range(0.2, 0.8)];
                let lattice = (0..grid * grid)
                    .map(|_| {
                        let d = rng.range(-0.2, 0.2);
                        [base[0] + d, base[1] + d + rng.range(-0.05, 0.05), base[2] + d]
                    })
                    .collect();
                Background::Noise { grid, lattice }
            }
            _ => {
                let a = color(rng, 0.1, 0.9);
                let b = color(rng, 0.1, 0.9);
                Background::Stripes {
                    a,
                    b,
                    angle: rng.range(0.0, std::f64::consts::PI),
                    period: rng.range(6.0, 20.0),
                }
            }
        }
    }

    fn color_at(&self, x: f64, y: f64, size: usize) -> [f64; 3] {
        let s = size as f64;
        match self {
            Background::Sky { top, bottom } => {
                let t = (y / s).clamp(0.0, 1.0);
                std::array::from_fn(|c| top[c] + (bottom[c] - top[c]) * t)
            }
            Background::Noise { grid, lattice } => {
                let g = *grid;
                let gx = (x / s * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
                let gy = (y / s * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(g - 1), (y0 + 1).min(g - 1));
                let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                std::array::from_fn(|c| {
                    let top = lattice[y0 * g + x0][c] * (1.0 - fx) + lattice[y0 * g + x1][c] * fx;
                    let bot = lattice[y1 * g + x0][c] * (1.0 - fx) + lattice[y1 * g + x1][c] * fx;
                    top * (1.0 - fy) + bot * fy
                })
            }
            Background::Stripes { a, b, angle, period } => {
                let t = x * angle.cos() + y * angle.sin();
                if (t / period).rem_euclid(1.0) < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            Background::Flat(c) => *c,
        }
    }
}

/// Pose, lighting and background of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// Canonical sign coordinates to scene pixel coordinates.
    pub homography: Matrix3<f64>,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub background: Background,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

/// Homography of a sign of pixel radius `radius` centered at `(cx, cy)`,
/// rotated by `roll` in plane and tilted by `yaw`/`pitch` out of plane
/// (radians), seen by a pinhole camera.
pub fn pose_homography(cx: f64, cy: f64, radius: f64, roll: f64, yaw: f64, pitch: f64) -> Matrix3<f64> {
    const DEPTH: f64 = 4.0;
    let r = Rotation3::from_euler_angles(pitch, yaw, roll);
    let m = r.matrix();
    let f = radius * DEPTH;
    let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
    let rt = Matrix3::from_columns(&[m.column(0).into(), m.column(1).into(), Vector3::new(0.0, 0.0, DEPTH)]);
    k * rt
}

/// Front-facing placement used by pictograms of side `size`.
pub fn canonical_homography(size: usize) -> Matrix3<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = PICTOGRAM_RADIUS * size as f64;
    Matrix3::new(r, 0.0, c, 0.0, r, c, 0.0, 0.0, 1.0)
}

impl SceneParams {
    /// Identity pose and lighting over a flat background, noise free.
    pub fn canonical(background: [f64; 3]) -> Self {
        Self {
            homography: canonical_homography(SCENE_SIZE),
            gain: [1.0; 3],
            bias: [0.0; 3],
            background: Background::Flat(background),
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Random pose within the skew limit (20 degrees, 50 with `high_skew`),
    /// lighting and background. The sign is framed like a detection crop,
    /// within 6 px of the center, and always fits inside the frame.
    pub fn random(rng: &mut Rng, high_skew: bool) -> Self {
        let max_tilt = if high_skew { 50f64 } else { 20f64 }.to_radians();
        let s = SCENE_SIZE as f64;
        let homography = loop {
            let radius = rng.range(20.0, 30.0);
            let roll = rng.range(-10f64, 10f64).to_radians();
            let yaw = rng.range(-max_tilt, max_tilt);
            let pitch = rng.range(-max_tilt, max_tilt) * 0.5;
            // detector-style crop: the sign sits near the middle
            let cx = s / 2.0 + rng.range(-6.0, 6.0);
            let cy = s / 2.0 + rng.range(-6.0, 6.0);
            let h = pose_homography(cx, cy, radius, roll, yaw, pitch);
            if object_circle(&h).is_ok() {
                break h;
            }
        };
        let mut triple = |lo: f64, hi: f64| [rng.range(lo, hi), rng.range(lo, hi), rng.range(lo, hi)];
        let gain = triple(0.6, 1.4);
        let bias = triple(-0.15, 0.15);
        let background = Background::random(rng);
        Self {
            homography,
            gain,
            bias,
            background,
            noise_sigma: rng.range(0.0, 0.03),
            noise_seed: rng.next_u64(),
        }
    }
}

fn project(h: &Matrix3<f64>, u: f64, v: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(u, v, 1.0);
    (p.z > 1e-9).then(|| (p.x / p.z, p.y / p.z))
}

/// Circle bounding the warped unit disk in scene pixels: centered on the
/// image of the canonical center, radius one pixel past the farthest
/// boundary point. Rejects poses leaving the frame or with radius below 8.
pub fn object_circle(h: &Matrix3<f64>) -> Result<Circle> {
    let bad = |m: String| Err(Error::invalid("render_scene", m));
    let Some((cx, cy)) = project(h, 0.0, 0.0) else {
        return bad("sign center behind the camera".into());
    };
    let limit = SCENE_SIZE as f64 - 1.0;
    let mut r: f64 = 0.0;
    for k in 0..720 {
        let t = k as f64 / 720.0 * std::f64::consts::TAU;
        let Some((x, y)) = project(h, t.cos(), t.sin()) else {
            return bad("sign crosses the camera plane".into());
        };
        if !(0.5..=limit - 0.5).contains(&x) || !(0.5..=limit - 0.5).contains(&y) {
            return bad(format!("sign leaves the frame at ({x:.1}, {y:.1})"));
        }
        r = r.max(((x - cx).powi(2) + (y - cy).powi(2)).sqrt());
    }
    let circle = Circle {
        cx: (cx * 1000.0).round() / 1000.0,
        cy: (cy * 1000.0).round() / 1000.0,
        r: ((r + 1.0) * 1000.0).ceil() / 1000.0,
    };
    if circle.r < 8.0 {
        return bad(format!("sign radius {:.2} below 8 pixels", circle.r));
    }
    Ok(circle)
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    /// `[3, 80, 80]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub circle: Circle,
    /// Fraction of each pixel covered by the sign, row-major.
    pub coverage: Vec<f64>,
}

/// Renders a `size x size` view. Returns colors in `[0, 1]` per channel
/// plane and the per-pixel sign coverage.
fn rasterize(spec: &ToySignSpec, inv: &Matrix3<f64>, size: usize, scene: Option<&SceneParams>) -> (Vec<f64>, Vec<f64>) {
    let plane = size * size;
    let mut rgb = vec![0.0; 3 * plane];
    let mut coverage = vec![0.0; plane];
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for i in 0..size {
        for j in 0..size {
            let mut acc = [0.0; 3];
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = j as f64 - 0.5 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = i as f64 - 0.5 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let sign = project(inv, x, y).and_then(|(u, v)| spec.color_at(u, v));
                    let c = match (sign, scene) {
                        (Some(c), Some(sc)) => {
                            hits += 1;
                            std::array::from_fn(|k| (sc.gain[k] * c[k] + sc.bias[k]).clamp(0.0, 1.0))
                        }
                        (Some(c), None) => {
                            hits += 1;
                            c
                        }
                        (None, Some(sc)) => sc.background.color_at(x, y, size),
                        (None, None) => NEUTRAL,
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                rgb[k * plane + i * size + j] = acc[k] / n;
            }
            coverage[i * size + j] = hits as f64 / n;
        }
    }
    (rgb, coverage)
}

fn to_signed(rgb: &[f64], size: usize) -> Tensor<f32> {
    Tensor::new(&[3, size, size], rgb.iter().map(|&v| (v * 2.0 - 1.0) as f32).collect()).expect("sized buffer")
}

/// Front-facing sign on a neutral gray background, `[3, size, size]` in
/// `[-1, 1]`. Deterministic.
pub fn render_pictogram(spec: &ToySignSpec, size: usize) -> Result<Tensor<f32>> {
    if spec.glyph_id >= GLYPH_COUNT {
        return Err(Error::invalid("render_pictogram", format!("unknown glyph id {}", spec.glyph_id)));
    }
    if size == 0 {
        return Err(Error::invalid("render_pictogram", "size must be positive"));
    }
    let inv = canonical_homography(size).try_inverse().expect("invertible");
    let (rgb, _) = rasterize(spec, &inv, size, None);
    Ok(to_signed(&rgb, size))
}

/// Warps, lights and composites the sign over the background, then adds
/// Gaussian noise. Lighting and noise act in `[0, 1]` color space.
pub fn render_scene(spec: &ToySignSpec, scene: &SceneParams) -> Result<RenderedScene> {
    if spec.glyph_id >= GLYPH_COUNT {
        return Err(Error::invalid("render_scene", format!("unknown glyph id {}", spec.glyph_id)));
    }
    let circle = object_circle(&scene.homography)?;
    let inv = scene
        .homography
        .try_inverse()
        .ok_or_else(|| Error::invalid("render_scene", "singular homography"))?;
    let (mut rgb, coverage) = rasterize(spec, &inv, SCENE_SIZE, Some(scene));
    if scene.noise_sigma > 0.0 {
        let mut rng = Rng::new(scene.noise_seed);
        for v in &mut rgb {
            *v = (*v + scene.noise_sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(RenderedScene {
        image: to_signed(&rgb, SCENE_SIZE),
        circle,
        coverage,
    })
}
