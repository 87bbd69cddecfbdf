//! Synthetic degradations, PNG I/O, cropping and augmentation, padding and
//! dataset manifests.
//!
//! Images are `(3, H, W)` tensors with values in `[0, 1]`. Every degradation
//! is a pure function of its parameters and seed, and clamps to `[0, 1]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Noise,
    Haze,
    Rain,
    Blur,
    Lowlight,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        Self::Noise,
        Self::Haze,
        Self::Rain,
        Self::Blur,
        Self::Lowlight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Haze => "haze",
            Self::Rain => "rain",
            Self::Blur => "blur",
            Self::Lowlight => "lowlight",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|k| k.as_str()).join(", ")
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown degradation kind '{s}'; valid kinds: {}",
                    Self::valid_names()
                ))
            })
    }
}

/// Oriented bright streaks blended toward white.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainParams {
    pub streaks: usize,
    /// Streak length in pixels.
    pub length: f64,
    /// Degrees from vertical.
    pub angle: f64,
    /// Blend weight of a streak pixel, in `[0, 1]`.
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streaks: 120,
            length: 12.0,
            angle: 10.0,
            intensity: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Standard deviation in 8-bit units.
    Noise { sigma: f64 },
    Haze { beta: f64, airlight: f64 },
    Rain(RainParams),
    Blur { sigma: f64 },
    Lowlight { gamma: f64, gain: f64 },
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Self::Noise { .. } => DegradationKind::Noise,
            Self::Haze { .. } => DegradationKind::Haze,
            Self::Rain(_) => DegradationKind::Rain,
            Self::Blur { .. } => DegradationKind::Blur,
            Self::Lowlight { .. } => DegradationKind::Lowlight,
        }
    }

    pub fn default_for(kind: DegradationKind) -> Self {
        match kind {
            DegradationKind::Noise => Self::Noise { sigma: 25.0 },
            DegradationKind::Haze => Self::Haze { beta: 1.2, airlight: 0.8 },
            DegradationKind::Rain => Self::Rain(RainParams::default()),
            DegradationKind::Blur => Self::Blur { sigma: 1.5 },
            DegradationKind::Lowlight => Self::Lowlight { gamma: 2.2, gain: 0.5 },
        }
    }

    /// Parses `param=value` pairs separated by commas; omitted parameters
    /// keep their defaults and unknown ones are rejected.
    pub fn parse(kind: DegradationKind, params: &str) -> Result<Self> {
        let mut d = Self::default_for(kind);
        for item in params.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "-") {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("{kind}: expected param=value, got '{item}'")))?;
            let num: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("{kind}: cannot parse {k}='{v}'")))?;
            let slot: &mut f64 = match (&mut d, k.trim()) {
                (Self::Noise { sigma }, "sigma") => sigma,
                (Self::Haze { beta, .. }, "beta") => beta,
                (Self::Haze { airlight, .. }, "airlight") => airlight,
                (Self::Rain(r), "length") => &mut r.length,
                (Self::Rain(r), "angle") => &mut r.angle,
                (Self::Rain(r), "intensity") => &mut r.intensity,
                (Self::Rain(r), "streaks") => {
                    if num < 0.0 || num.fract() != 0.0 {
                        return Err(Error::Parameter(format!("rain: streaks must be a non-negative integer, got {v}")));
                    }
                    r.streaks = num as usize;
                    continue;
                }
                (Self::Blur { sigma }, "sigma") => sigma,
                (Self::Lowlight { gamma, .. }, "gamma") => gamma,
                (Self::Lowlight { gain, .. }, "gain") => gain,
                (_, other) => {
                    return Err(Error::Parameter(format!("{kind}: unknown parameter '{other}'")))
                }
            };
            *slot = num;
        }
        d.validate()?;
        Ok(d)
    }

    /// Canonical `param=value,...` form, parseable by [`Degradation::parse`].
    pub fn params_string(&self) -> String {
        match self {
            Self::Noise { sigma } => format!("sigma={sigma}"),
            Self::Haze { beta, airlight } => format!("beta={beta},airlight={airlight}"),
            Self::Rain(r) => format!(
                "streaks={},length={},angle={},intensity={}",
                r.streaks, r.length, r.angle, r.intensity
            ),
            Self::Blur { sigma } => format!("sigma={sigma}"),
            Self::Lowlight { gamma, gain } => format!("gamma={gamma},gain={gain}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        match *self {
            Self::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("noise: sigma must be >= 0, got {sigma}"))
            }
            Self::Haze { beta, .. } if !(beta > 0.0 && beta.is_finite()) => {
                bad(format!("haze: beta must be > 0, got {beta}"))
            }
            Self::Haze { airlight, .. } if !(0.0..=1.0).contains(&airlight) => {
                bad(format!("haze: airlight must be in [0, 1], got {airlight}"))
            }
            Self::Rain(r) if !(r.length > 0.0 && r.length.is_finite()) => {
                bad(format!("rain: length must be > 0, got {}", r.length))
            }
            Self::Rain(r) if !(-90.0..=90.0).contains(&r.angle) => {
                bad(format!("rain: angle must be in [-90, 90] degrees, got {}", r.angle))
            }
            Self::Rain(r) if !(0.0..=1.0).contains(&r.intensity) => {
                bad(format!("rain: intensity must be in [0, 1], got {}", r.intensity))
            }
            Self::Blur { sigma } if !(0.0..=32.0).contains(&sigma) => {
                bad(format!("blur: sigma must be in [0, 32], got {sigma}"))
            }
            Self::Lowlight { gamma, .. } if !(gamma >= 1.0 && gamma.is_finite()) => {
                bad(format!("lowlight: gamma must be >= 1, got {gamma}"))
            }
            Self::Lowlight { gain, .. } if !(gain > 0.0 && gain <= 1.0) => {
                bad(format!("lowlight: gain must be in (0, 1], got {gain}"))
            }
            _ => Ok(()),
        }
    }

    /// Short label grouping evaluation results, e.g. `noise_s25`.
    pub fn task_label(&self) -> String {
        match self {
            Self::Noise { sigma } => format!("noise_s{sigma}"),
            other => other.kind().to_string(),
        }
    }
}

/// A degradation with the seed that fixes its randomness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Result<Self> {
        degradation.validate()?;
        Ok(Self { degradation, seed })
    }

    pub fn kind(&self) -> DegradationKind {
        self.degradation.kind()
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image(x)?;
        match self.degradation {
            Degradation::Noise { sigma } => add_gaussian_noise(x, sigma, self.seed),
            Degradation::Haze { beta, airlight } => synth_haze(x, beta, airlight, self.seed),
            Degradation::Rain(r) => synth_rain(x, &r, self.seed),
            Degradation::Blur { sigma } => synth_blur(x, sigma),
            Degradation::Lowlight { gamma, gain } => synth_lowlight(x, gamma, gain),
        }
    }
}

/// Parses `kind` or `kind:param=value,...`.
pub fn parse_degradation(text: &str) -> Result<Degradation> {
    let (kind, params) = text.split_once(':').unwrap_or((text, ""));
    Degradation::parse(kind.trim().parse()?, params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub spec: Option<DegradationSpec>,
}

impl ImagePair {
    pub fn new(clean: Tensor<f32>, degraded: Tensor<f32>, spec: Option<DegradationSpec>) -> Result<Self> {
        check_image(&clean)?;
        clean.check_same_shape(&degraded)?;
        Ok(Self { clean, degraded, spec })
    }

    pub fn synthesize(clean: Tensor<f32>, spec: DegradationSpec) -> Result<Self> {
        let degraded = spec.apply(&clean)?;
        Self::new(clean, degraded, Some(spec))
    }

    pub fn task_label(&self) -> String {
        self.spec
            .map(|s| s.degradation.task_label())
            .unwrap_or_else(|| "paired".into())
    }
}

fn check_image(x: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image (3, H, W), got {}", fmt_shape(x.shape()))));
    }
    Ok((c, h, w))
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// `y = clamp(x + n / 255)`, `n ~ N(0, sigma^2)` per value.
pub fn add_gaussian_noise(x: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    Degradation::Noise { sigma }.validate()?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = clamp01((*v as f64 + normal.sample(&mut rng)) as f32);
    }
    Ok(out)
}

/// Smooth depth map in `[0.1, 1]`: a seeded linear ramp with a gentle
/// bump, min-max normalized.
pub fn haze_depth(h: usize, w: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (cy, cx): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let bump: f64 = rng.random_range(0.0..0.5);
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = y as f64 / h.max(2) as f64;
            let u = x as f64 / w.max(2) as f64;
            let r2 = (u - cx).powi(2) + (v - cy).powi(2);
            d.push(theta.cos() * u + theta.sin() * v + bump * (-4.0 * r2).exp());
        }
    }
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    d.into_iter()
        .map(|v| if span > 0.0 { (0.1 + 0.9 * (v - lo) / span) as f32 } else { 1.0 })
        .collect()
}

/// Atmospheric scattering `y = x t + A (1 - t)`, `t = exp(-beta d)`.
pub fn synth_haze_with_depth(x: &Tensor<f32>, depth: &[f32], beta: f64, airlight: f64) -> Result<Tensor<f32>> {
    Degradation::Haze { beta, airlight }.validate()?;
    let (_, h, w) = check_image(x)?;
    if depth.len() != h * w {
        return Err(Error::Shape(format!("depth map has {} values, image has {h}x{w}", depth.len())));
    }
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &d) in plane.iter_mut().zip(depth) {
            let t = (-beta * d as f64).exp();
            *v = clamp01((*v as f64 * t + airlight * (1.0 - t)) as f32);
        }
    }
    Ok(out)
}

pub fn synth_haze(x: &Tensor<f32>, beta: f64, airlight: f64, seed: u64) -> Result<Tensor<f32>> {
    let (_, h, w) = check_image(x)?;
    synth_haze_with_depth(x, &haze_depth(h, w, seed), beta, airlight)
}

/// Streak mask in `[0, 1]` for an `h x w` image.
pub fn rain_mask(h: usize, w: usize, p: &RainParams, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0f32; h * w];
    let a = p.angle.to_radians();
    let (dx, dy) = (a.sin(), a.cos());
    for _ in 0..p.streaks {
        let x0: f64 = rng.random_range(0.0..w as f64);
        let y0: f64 = rng.random_range(0.0..h as f64);
        let len = p.length * rng.random_range(0.6..1.4);
        let strength: f32 = rng.random_range(0.5..1.0);
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let (x, y) = (x0 + dx * t, y0 + dy * t);
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (xi, yi) = (x as usize, y as usize);
            if xi < w && yi < h {
                let m = &mut mask[yi * w + xi];
                *m = m.max(strength);
            }
        }
    }
    mask
}

pub fn synth_rain(x: &Tensor<f32>, p: &RainParams, seed: u64) -> Result<Tensor<f32>> {
    Degradation::Rain(*p).validate()?;
    let (_, h, w) = check_image(x)?;
    let mask = rain_mask(h, w, p, seed);
    let alpha = p.intensity as f32;
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &m) in plane.iter_mut().zip(&mask) {
            let a = alpha * m;
            *v = clamp01(*v * (1.0 - a) + a);
        }
    }
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect padding. `sigma` below `1e-6` is the
/// identity.
pub fn synth_blur(x: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    Degradation::Blur { sigma }.validate()?;
    let (_, h, w) = check_image(x)?;
    if sigma < 1e-6 {
        return Ok(x.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = x.clone();
    let mut tmp = vec![0f32; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        // accumulate deviations from the centre so constant regions stay exact
        for y in 0..h {
            for xx in 0..w {
                let c = plane[y * w + xx] as f64;
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xi = reflect(xx as isize + j as isize - r, w);
                    acc += kv * (plane[y * w + xi] as f64 - c);
                }
                tmp[y * w + xx] = (c + acc) as f32;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let c = tmp[y * w + xx] as f64;
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yi = reflect(y as isize + j as isize - r, h);
                    acc += kv * (tmp[yi * w + xx] as f64 - c);
                }
                plane[y * w + xx] = clamp01((c + acc) as f32);
            }
        }
    }
    Ok(out)
}

/// `y = gain * x^gamma`.
pub fn synth_lowlight(x: &Tensor<f32>, gamma: f64, gain: f64) -> Result<Tensor<f32>> {
    Degradation::Lowlight { gamma, gain }.validate()?;
    check_image(x)?;
    if gamma == 1.0 && gain == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.map(|v| clamp01((gain * (v as f64).powf(gamma)) as f32)))
}

fn window(x: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (c, _, w) = x.dims3().expect("image");
    let h_total = x.shape()[1];
    let src = x.data();
    Tensor::from_fn(vec![c, ch, cw], |i| {
        let ci = i / (ch * cw);
        let y = (i / cw) % ch;
        let xx = i % cw;
        src[(ci * h_total + top + y) * w + left + xx]
    })
}

/// Crops both images of the pair with one random `size x size` window.
pub fn random_crop_pair(pair: &ImagePair, size: usize, seed: u64) -> Result<ImagePair> {
    let (_, h, w) = check_image(&pair.clean)?;
    if size == 0 || h < size || w < size {
        return Err(Error::Shape(format!("image {h}x{w} is smaller than the {size}x{size} crop")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(ImagePair {
        clean: window(&pair.clean, top, left, size, size),
        degraded: window(&pair.degraded, top, left, size, size),
        spec: pair.spec,
    })
}

pub fn flip_horizontal(x: &Tensor<f32>) -> Tensor<f32> {
    let w = x.shape()[2];
    let src = x.data();
    Tensor::from_fn(x.shape().to_vec(), |i| src[(i / w) * w + (w - 1 - i % w)])
}

pub fn flip_vertical(x: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = x.dims3().expect("image");
    let src = x.data();
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let plane = i / (h * w);
        let y = (i / w) % h;
        src[(plane * h + h - 1 - y) * w + i % w]
    })
}

/// Flips both images horizontally and vertically, each with probability 1/2.
pub fn random_flips(pair: &ImagePair, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, vf): (bool, bool) = (rng.random(), rng.random());
    let apply = |x: &Tensor<f32>| {
        let mut t = x.clone();
        if hf {
            t = flip_horizontal(&t);
        }
        if vf {
            t = flip_vertical(&t);
        }
        t
    };
    ImagePair {
        clean: apply(&pair.clean),
        degraded: apply(&pair.degraded),
        spec: pair.spec,
    }
}

/// Reflect-pads the bottom and right edges up to multiples of `m`.
/// Returns the padded image and the original `(H, W)`.
pub fn pad_to_multiple(x: &Tensor<f32>, m: usize) -> Result<(Tensor<f32>, (usize, usize))> {
    if m == 0 || !m.is_power_of_two() {
        return Err(Error::Parameter(format!("pad multiple must be a power of two, got {m}")));
    }
    let (c, h, w) = x.dims3()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok((x.clone(), (h, w)));
    }
    let src = x.data();
    let t = Tensor::from_fn(vec![c, ph, pw], |i| {
        let ci = i / (ph * pw);
        let y = reflect(((i / pw) % ph) as isize, h);
        let xx = reflect((i % pw) as isize, w);
        src[(ci * h + y) * w + xx]
    });
    Ok((t, (h, w)))
}

/// Undoes [`pad_to_multiple`].
pub fn crop_back(x: &Tensor<f32>, original: (usize, usize)) -> Result<Tensor<f32>> {
    let (_, h, w) = x.dims3()?;
    let (oh, ow) = original;
    if oh > h || ow > w || oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot crop {h}x{w} back to {oh}x{ow}")));
    }
    Ok(window(x, 0, 0, oh, ow))
}

/// Reads an 8-bit PNG as an RGB tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0
    }).collect())
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB tensor as an 8-bit PNG (values clamped and rounded).
pub fn save_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = check_image(x)?;
    let d = x.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            raw.push(to_u8(d[c * h * w + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    write_image(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

/// Writes an `h x w` plane with values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, plane: &[f32], h: usize, w: usize) -> Result<()> {
    if plane.len() != h * w {
        return Err(Error::Shape(format!("plane has {} values, expected {h}x{w}", plane.len())));
    }
    let raw = plane.iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    write_image(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

fn write_image(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Deterministic per-sample seed: a SplitMix64 mix of the global seed and
/// the sample index.
pub fn sample_seed(global: u64, index: u64) -> u64 {
    let mut z = global ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Thread pool for data generation, capped by `SYMUNET_THREADS` if set.
pub fn data_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SYMUNET_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("SYMUNET_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config("SYMUNET_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One manifest line: `<clean>\t<kind>\t<params>\t<seed>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub spec: DegradationSpec,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.clean.display(),
            self.spec.kind(),
            self.spec.degradation.params_string(),
            self.spec.seed
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line needs 4 tab-separated fields, got {}: '{line}'",
                fields.len()
            )));
        }
        let kind: DegradationKind = fields[1].trim().parse()?;
        let seed = fields[3]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("manifest seed '{}' is not an integer", fields[3])))?;
        Ok(Self {
            clean: PathBuf::from(fields[0]),
            spec: DegradationSpec::new(Degradation::parse(kind, fields[2])?, seed)?,
        })
    }

    /// `<dir>/degraded/<stem>__<kind>__<seed>.png`.
    pub fn degraded_path(&self, manifest_dir: &Path) -> PathBuf {
        let stem = self.clean.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        manifest_dir
            .join("degraded")
            .join(format!("{stem}__{}__{}.png", self.spec.kind(), self.spec.seed))
    }

    pub fn clean_path(&self, manifest_dir: &Path) -> PathBuf {
        if self.clean.is_absolute() {
            self.clean.clone()
        } else {
            manifest_dir.join(&self.clean)
        }
    }

    /// Loads the pair, synthesizing the degraded image when its PNG is absent.
    pub fn load(&self, manifest_dir: &Path) -> Result<ImagePair> {
        let clean = load_png(&self.clean_path(manifest_dir))?;
        let dp = self.degraded_path(manifest_dir);
        let degraded = if dp.exists() { load_png(&dp)? } else { self.spec.apply(&clean)? };
        ImagePair::new(clean, degraded, Some(self.spec))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(ManifestEntry::parse_line)
            .collect::<Result<Vec<_>>>()?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        let pool = data_pool()?;
        pool.install(|| self.entries.par_iter().map(|e| e.load(&self.dir)).collect())
    }
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

/// Degrades every clean image with every degradation, writing PNGs under
/// `out_dir/degraded/` and `out_dir/manifest.txt`. Sample `k` (image-major
/// order) gets seed `sample_seed(seed, k)`.
pub fn synthesize_dataset(
    clean: &[PathBuf],
    degradations: &[Degradation],
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if degradations.is_empty() {
        return Err(Error::Parameter(format!(
            "no degradation kinds given; valid kinds: {}",
            DegradationKind::valid_names()
        )));
    }
    if clean.is_empty() {
        return Err(Error::Parameter("no clean images given".into()));
    }
    fs::create_dir_all(out_dir.join("degraded")).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(clean.len() * degradations.len());
    for (i, path) in clean.iter().enumerate() {
        let abs = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        for (j, d) in degradations.iter().enumerate() {
            let k = (i * degradations.len() + j) as u64;
            entries.push(ManifestEntry {
                clean: abs.clone(),
                spec: DegradationSpec::new(*d, sample_seed(seed, k))?,
            });
        }
    }
    let manifest = Manifest { dir: out_dir.to_path_buf(), entries };
    let pool = data_pool()?;
    pool.install(|| {
        clean.par_iter().enumerate().try_for_each(|(i, path)| -> Result<()> {
            let img = load_png(path)?;
            for e in &manifest.entries[i * degradations.len()..(i + 1) * degradations.len()] {
                save_png(&e.degraded_path(out_dir), &e.spec.apply(&img)?)?;
            }
            Ok(())
        })
    })?;
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Pairs `root/clean/<name>.png` with `root/degraded/<name>.png`.
pub fn load_paired_folder(root: &Path) -> Result<Vec<ImagePair>> {
    let clean_dir = root.join("clean");
    let deg_dir = root.join("degraded");
    let mut pairs = Vec::new();
    for c in list_pngs(&clean_dir)? {
        let name = c.file_name().expect("file");
        let d = deg_dir.join(name);
        if !d.exists() {
            return Err(Error::Format(format!("{} has no degraded counterpart {}", c.display(), d.display())));
        }
        pairs.push(ImagePair::new(load_png(&c)?, load_png(&d)?, None)?);
    }
    if pairs.is_empty() {
        return Err(Error::Format(format!("no PNG pairs under {}", root.display())));
    }
    Ok(pairs)
}

/// Draws training samples with tasks mixed uniformly: a task label first,
/// then a pair carrying that label.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    groups: Vec<(String, Vec<usize>)>,
}

impl TaskSampler {
    pub fn new(pairs: &[ImagePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Training("training set is empty".into()));
        }
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            let label = p.task_label();
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, v)) => v.push(i),
                None => groups.push((label, vec![i])),
            }
        }
        Ok(Self { groups })
    }

    pub fn pick(&self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &self.groups[rng.random_range(0..self.groups.len())].1;
        g[rng.random_range(0..g.len())]
    }

    pub fn tasks(&self) -> Vec<&str> {
        self.groups.iter().map(|(l, _)| l.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![3, h, w], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn reflect_index() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn parse_round_trip() {
        for k in DegradationKind::ALL {
            let d = Degradation::default_for(k);
            assert_eq!(Degradation::parse(k, &d.params_string()).unwrap(), d);
        }
        assert!(Degradation::parse(DegradationKind::Noise, "beta=1").is_err());
        assert!(parse_degradation("snow").unwrap_err().to_string().contains("lowlight"));
        assert_eq!(parse_degradation("noise:sigma=15").unwrap(), Degradation::Noise { sigma: 15.0 });
    }

    #[test]
    fn flips_are_involutions() {
        let x = ramp(5, 7);
        assert!(flip_horizontal(&flip_horizontal(&x)).bit_eq(&x));
        assert!(flip_vertical(&flip_vertical(&x)).bit_eq(&x));
        assert!(!flip_vertical(&x).bit_eq(&x));
    }

    #[test]
    fn manifest_line_round_trip() {
        let e = ManifestEntry {
            clean: PathBuf::from("a/b.png"),
            spec: DegradationSpec::new(Degradation::default_for(DegradationKind::Rain), 7).unwrap(),
        };
        assert_eq!(ManifestEntry::parse_line(&e.to_line()).unwrap(), e);
        assert!(ManifestEntry::parse_line("x\tnoise\tsigma=1").is_err());
    }

    #[test]
    fn sampler_mixes_tasks_uniformly() {
        let x = ramp(4, 4);
        let mk = |d| ImagePair::synthesize(x.clone(), DegradationSpec::new(d, 1).unwrap()).unwrap();
        let mut pairs = vec![mk(Degradation::Noise { sigma: 25.0 }); 9];
        pairs.push(mk(Degradation::Blur { sigma: 1.0 }));
        let s = TaskSampler::new(&pairs).unwrap();
        let blur = (0..2000).filter(|&i| s.pick(sample_seed(3, i)) == 9).count();
        assert!((800..1200).contains(&blur), "{blur}");
    }
}
