//! Atmospheric scattering model `I = J·t + A·(1 − t)`.
//!
//! Used in two roles: a generator of synthetic hazy/clean pairs for
//! desk-scale experiments, and an analytic oracle (via [`invert_haze`]) for
//! round-trip tests.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Default lower bound on `t` accepted by [`invert_haze`].
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// A single-channel `H×W` field of non-negative values (depth in metres,
/// or transmission in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel transmission `t ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionField(Plane);

impl TransmissionField {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some((i, v)) = plane.data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "transmission must lie in [0,1], found {v} at ({}, {})",
                i / plane.width,
                i % plane.width
            )));
        }
        Ok(Self(plane))
    }

    pub fn constant(height: usize, width: usize, t: f64) -> Result<Self> {
        Self::new(Plane::constant(height, width, t)?)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    pub fn min(&self) -> f64 {
        self.0.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Global atmospheric light, one value per channel in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight([f64; CHANNELS]);

impl AtmosphericLight {
    pub fn new(rgb: [f64; CHANNELS]) -> Result<Self> {
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "atmospheric light must lie in [0,1] per channel, got {rgb:?}"
            )));
        }
        Ok(Self(rgb))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; CHANNELS])
    }

    pub fn rgb(&self) -> [f64; CHANNELS] {
        self.0
    }
}

fn check_aligned(image: &Image, t: &TransmissionField) -> Result<()> {
    if image.dims() != t.dims() {
        let (h, w) = image.dims();
        let (th, tw) = t.dims();
        return Err(Error::Dimension(format!(
            "image is {h}x{w} but transmission is {th}x{tw}"
        )));
    }
    Ok(())
}

/// `I = J·t + A·(1 − t)` per pixel and channel.
pub fn synthesize_haze(clean: &Image, t: &TransmissionField, a: &AtmosphericLight) -> Result<Image> {
    check_aligned(clean, t)?;
    let (h, w) = clean.dims();
    Image::from_fn(h, w, |y, x, c| {
        let tv = t.get(y, x);
        (clean.get(y, x, c) * tv + a.0[c] * (1.0 - tv)).clamp(0.0, 1.0)
    })
}

/// `t = exp(−β·d)` elementwise.
pub fn transmission_from_depth(depth: &Plane, beta: f64) -> Result<TransmissionField> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be finite and >= 0, got {beta}")));
    }
    if let Some(d) = depth.data.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Domain(format!("depth must be >= 0, found {d}")));
    }
    let (h, w) = depth.dims();
    let data = depth.data.iter().map(|d| (-beta * d).exp()).collect();
    TransmissionField::new(Plane::new(h, w, data)?)
}

/// Analytic inverse `J = (I − A·(1 − t)) / t`, clamped to `[0, 1]`.
pub fn invert_haze(hazy: &Image, t: &TransmissionField, a: &AtmosphericLight, epsilon: f64) -> Result<Image> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    check_aligned(hazy, t)?;
    let (h, w) = hazy.dims();
    for y in 0..h {
        for x in 0..w {
            let value = t.get(y, x);
            if value < epsilon {
                return Err(Error::Singularity {
                    row: y,
                    col: x,
                    value,
                    epsilon,
                });
            }
        }
    }
    Image::from_fn(h, w, |y, x, c| {
        let tv = t.get(y, x);
        ((hazy.get(y, x, c) - a.0[c] * (1.0 - tv)) / tv).clamp(0.0, 1.0)
    })
}

/// How the depth field of a synthetic pair is laid out. Ramp and radial
/// fields span `[0, 1]` depth units, so `β` directly sets the densest haze:
/// `t_min = exp(−β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthMode {
    /// Uniform depth everywhere.
    Constant(f64),
    /// Depth grows linearly from 0 on the top row to 1 on the bottom row.
    LinearRamp,
    /// Depth is 1 at a randomly drawn centre and falls linearly to 0 at the
    /// farthest image corner, producing a dense haze patch.
    Radial,
}

impl fmt::Display for DepthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthMode::Constant(d) => write!(f, "constant:{d}"),
            DepthMode::LinearRamp => f.write_str("linear-ramp"),
            DepthMode::Radial => f.write_str("radial"),
        }
    }
}

impl FromStr for DepthMode {
    type Err = Error;

    /// Accepts `constant`, `constant:<depth>`, `linear-ramp` and `radial`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(DepthMode::Constant(1.0)),
            "linear-ramp" | "ramp" => Ok(DepthMode::LinearRamp),
            "radial" => Ok(DepthMode::Radial),
            other => match other.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(d)) if d >= 0.0 => Ok(DepthMode::Constant(d)),
                _ => Err(Error::Config(format!(
                    "unknown depth mode `{other}` (expected constant[:d], linear-ramp or radial)"
                ))),
            },
        }
    }
}

/// Generates the depth field for `mode`; only `Radial` consumes randomness.
pub fn depth_field<R: Rng + ?Sized>(mode: DepthMode, height: usize, width: usize, rng: &mut R) -> Result<Plane> {
    match mode {
        DepthMode::Constant(d) => Plane::constant(height, width, d),
        DepthMode::LinearRamp => {
            let denom = (height.max(2) - 1) as f64;
            Plane::from_fn(height, width, |y, _| y as f64 / denom)
        }
        DepthMode::Radial => {
            let cy = rng.random::<f64>() * (height - 1) as f64;
            let cx = rng.random::<f64>() * (width - 1) as f64;
            let corners = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
            let rmax = corners
                .iter()
                .map(|(fy, fx)| {
                    let dy = fy * (height - 1) as f64 - cy;
                    let dx = fx * (width - 1) as f64 - cx;
                    dy.hypot(dx)
                })
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE);
            Plane::from_fn(height, width, |y, x| {
                let r = (y as f64 - cy).hypot(x as f64 - cx);
                (1.0 - r / rmax).max(0.0)
            })
        }
    }
}

/// Hazes `clean` with a depth field laid out by `mode`; returns `(hazy, clean)`.
pub fn make_synthetic_pair<R: Rng + ?Sized>(
    clean: &Image,
    beta: f64,
    a: &AtmosphericLight,
    mode: DepthMode,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let (h, w) = clean.dims();
    let depth = depth_field(mode, h, w, rng)?;
    let t = transmission_from_depth(&depth, beta)?;
    Ok((synthesize_haze(clean, &t, a)?, clean.clone()))
}

/// A procedural "scene": a smooth two-colour gradient overlaid with a few
/// flat rectangles and a sinusoidal texture, so that synthetic pairs carry
/// edges, flat regions and fine detail.
pub fn random_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<Image> {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.6));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.95));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            let y0 = rng.random_range(0..height);
            let x0 = rng.random_range(0..width);
            let rh = rng.random_range(1..=height.div_ceil(3).max(1));
            let rw = rng.random_range(1..=width.div_ceil(3).max(1));
            (y0, x0, rh, rw, std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        })
        .collect();
    let freq = rng.random_range(0.1..0.6);
    let amp = rng.random_range(0.02..0.08);
    let diag = ((height * height + width * width) as f64).sqrt().max(1.0);
    let mut img = Image::from_fn(height, width, |y, x, c| {
        let s = ((y as f64 * dy + x as f64 * dx) / diag + 1.0) / 2.0;
        let base = c0[c] * (1.0 - s) + c1[c] * s;
        base + amp * (freq * x as f64).sin() * (freq * y as f64).cos()
    })?;
    for (y0, x0, rh, rw, col) in rects {
        for y in y0..(y0 + rh).min(height) {
            for x in x0..(x0 + rw).min(width) {
                for (c, v) in col.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
    Ok(img.clamp01())
}
