//! Image containers and the differentiable film/camera degradation model.
//!
//! The degradation applied to a modern render before it is compared with an
//! antique photograph is `blur(crf(grayscale(img)))`:
//!
//! * grayscale conversion emulating the emulsion's spectral sensitivity,
//! * a parametric camera response `a + b * v^gamma`,
//! * a separable Gaussian blur with reflected borders.
//!
//! Each step exists twice: as a plain function on [`Image`] and as a graph
//! builder that keeps gradients with respect to the image and the response
//! parameters.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{AxisMap, Graph, Var};
use crate::tensor::Tensor;

/// Planar image with values nominally in `[0, 1]`, stored as `[C, H, W]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Image({}x{}x{})",
            self.width(),
            self.height(),
            self.channels()
        )
    }
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidResolution { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ChannelCount {
                expected: 3,
                found: channels,
            });
        }
        if data.len() != channels * width * height {
            return Err(Error::ShapeMismatch {
                what: "image data".into(),
                expected: format!("{}", channels * width * height),
                found: format!("{}", data.len()),
            });
        }
        Ok(Self {
            tensor: Tensor::new(&[channels, height, width], data),
        })
    }

    pub fn filled(channels: usize, width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(
            channels,
            width,
            height,
            vec![value; channels * width * height],
        )
    }

    /// Wraps a `[C, H, W]` tensor with one or three channels.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                what: "image tensor".into(),
                expected: "[C, H, W]".into(),
                found: format!("{:?}", tensor.shape()),
            });
        }
        let (c, h, w) = tensor.chw();
        Self::new(c, w, h, tensor.into_data())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width() * self.height();
        &self.data()[c * n..(c + 1) * n]
    }

    pub fn clamped(&self) -> Self {
        Self {
            tensor: self.tensor.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Repeats a single channel three times; RGB images are returned as-is.
    pub fn to_rgb(&self) -> Self {
        if self.channels() == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data().len());
        for _ in 0..3 {
            data.extend_from_slice(self.data());
        }
        Self {
            tensor: Tensor::new(&[3, self.height(), self.width()], data),
        }
    }
}

/// Spectral sensitivity of the negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilmModel {
    /// Sensitive to blue (and UV) light only.
    BlueSensitive,
    /// Sensitive to blue and green.
    Orthochromatic,
    /// Sensitive across the visible spectrum.
    Panchromatic,
}

impl FilmModel {
    pub const ALL: [FilmModel; 3] = [
        FilmModel::BlueSensitive,
        FilmModel::Orthochromatic,
        FilmModel::Panchromatic,
    ];

    /// RGB weights of the grayscale response.
    pub fn weights(self) -> [f64; 3] {
        match self {
            FilmModel::BlueSensitive => [0.0, 0.0, 1.0],
            FilmModel::Orthochromatic => [0.0, 0.5, 0.5],
            FilmModel::Panchromatic => [0.299, 0.587, 0.114],
        }
    }

    /// Short tag used on the command line and in checkpoint metadata.
    pub fn tag(self) -> &'static str {
        match self {
            FilmModel::BlueSensitive => "blue",
            FilmModel::Orthochromatic => "ortho",
            FilmModel::Panchromatic => "pan",
        }
    }
}

impl fmt::Display for FilmModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseFilmError;

impl fmt::Display for ParseFilmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("film model must be one of blue, ortho, pan")
    }
}

impl FromStr for FilmModel {
    type Err = ParseFilmError;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blue" | "blue-sensitive" | "bluesensitive" => Ok(FilmModel::BlueSensitive),
            "ortho" | "orthochromatic" => Ok(FilmModel::Orthochromatic),
            "pan" | "panchromatic" => Ok(FilmModel::Panchromatic),
            _ => Err(ParseFilmError),
        }
    }
}

/// Parametric camera response `a + b * v^gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    pub bias: f64,
    pub gain: f64,
    pub gamma: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl CrfParams {
    pub const IDENTITY: CrfParams = CrfParams {
        bias: 0.0,
        gain: 1.0,
        gamma: 1.0,
    };

    pub fn new(bias: f64, gain: f64, gamma: f64) -> Result<Self> {
        let crf = Self { bias, gain, gamma };
        crf.validate()?;
        Ok(crf)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(Error::InvalidParameter {
                name: "crf gain",
                value: self.gain,
                reason: "must be positive",
            });
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter {
                name: "crf gamma",
                value: self.gamma,
                reason: "must be positive",
            });
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidParameter {
                name: "crf bias",
                value: self.bias,
                reason: "must be finite",
            });
        }
        Ok(())
    }

    pub fn respond(&self, v: f64) -> f64 {
        let p = if v > 0.0 { v.powf(self.gamma) } else { 0.0 };
        self.bias + self.gain * p
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.bias, self.gain, self.gamma]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationConfig {
    pub film: FilmModel,
    /// Blur standard deviation in pixels of the render.
    pub sigma: f64,
    pub crf: CrfParams,
    /// Side length the perceptual comparison downsamples to.
    pub target_resolution: usize,
}

impl DegradationConfig {
    pub fn new(film: FilmModel, sigma: f64) -> Self {
        Self {
            film,
            sigma,
            crf: CrfParams::IDENTITY,
            target_resolution: 256,
        }
    }
}

fn require_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: img.channels(),
        });
    }
    Ok(())
}

fn require_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter {
            name: "blur sigma",
            value: sigma,
            reason: "must be finite and non-negative",
        });
    }
    Ok(())
}

pub fn to_grayscale(img: &Image, film: FilmModel) -> Result<Image> {
    require_rgb(img)?;
    let [wr, wg, wb] = film.weights();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..r.len())
        .map(|i| wr * r[i] + wg * g[i] + wb * b[i])
        .collect();
    Image::new(1, img.width(), img.height(), data)
}

/// Applies the camera response per pixel. The result is not clamped.
pub fn apply_crf(gray: &Image, crf: &CrfParams) -> Result<Image> {
    crf.validate()?;
    Ok(Image {
        tensor: gray.tensor.map(|v| crf.respond(v)),
    })
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Gaussian blur along one axis of length `n` with reflected borders.
pub fn blur_axis(n: usize, sigma: f64) -> AxisMap {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let taps = (0..n as isize)
        .map(|o| {
            let mut t: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
            for (k, w) in kernel.iter().enumerate() {
                let src = reflect_index(o + k as isize - r, n);
                match t.iter_mut().find(|(i, _)| *i == src) {
                    Some(e) => e.1 += w,
                    None => t.push((src, *w)),
                }
            }
            t
        })
        .collect();
    AxisMap::new(n, taps)
}

/// Resampling along one axis: box averaging for integer downsampling
/// factors, bilinear with half-pixel centres otherwise.
pub fn resample_axis(in_len: usize, out_len: usize) -> AxisMap {
    if in_len == out_len {
        return AxisMap::identity(in_len);
    }
    if in_len > out_len && in_len.is_multiple_of(out_len) {
        let f = in_len / out_len;
        let w = 1.0 / f as f64;
        return AxisMap::new(
            in_len,
            (0..out_len)
                .map(|o| (o * f..(o + 1) * f).map(|i| (i, w)).collect())
                .collect(),
        );
    }
    let scale = in_len as f64 / out_len as f64;
    let taps = (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let t = src - i0 as f64;
            if i0 + 1 < in_len && t > 0.0 {
                vec![(i0, 1.0 - t), (i0 + 1, t)]
            } else {
                vec![(i0, 1.0)]
            }
        })
        .collect();
    AxisMap::new(in_len, taps)
}

fn apply_maps(img: &Image, rows: &AxisMap, cols: &AxisMap) -> Image {
    let mut g = Graph::new();
    let x = g.constant_ref(img.tensor());
    let y = g.resample(x, Cow::Borrowed(rows), Cow::Borrowed(cols));
    let out = g.value(y).clone();
    Image { tensor: out }
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    require_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    Ok(apply_maps(
        img,
        &blur_axis(img.height(), sigma),
        &blur_axis(img.width(), sigma),
    ))
}

pub fn resample(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidResolution { width, height });
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    Ok(apply_maps(
        img,
        &resample_axis(img.height(), height),
        &resample_axis(img.width(), width),
    ))
}

/// Crops `[x0, x1) x [y0, y1)`.
pub fn crop(img: &Image, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
    if x1 <= x0 || y1 <= y0 || x1 > img.width() || y1 > img.height() {
        return Err(Error::InvalidResolution {
            width: x1.saturating_sub(x0),
            height: y1.saturating_sub(y0),
        });
    }
    Ok(apply_maps(
        img,
        &AxisMap::crop(img.height(), y0, y1 - y0),
        &AxisMap::crop(img.width(), x0, x1 - x0),
    ))
}

/// `blur(crf(grayscale(img)))`.
pub fn degrade(img: &Image, cfg: &DegradationConfig) -> Result<Image> {
    require_sigma(cfg.sigma)?;
    let gray = to_grayscale(img, cfg.film)?;
    let response = apply_crf(&gray, &cfg.crf)?;
    gaussian_blur(&response, cfg.sigma)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(
        a.tensor.shape(),
        b.tensor.shape(),
        "psnr needs equally sized images"
    );
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Camera response parameters living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CrfVars {
    pub bias: Var,
    pub gain: Var,
    pub gamma: Var,
}

impl CrfVars {
    pub fn new(g: &mut Graph<'_>, crf: &CrfParams, trainable: bool) -> Self {
        let mut leaf = |v: f64| {
            if trainable {
                g.param(Tensor::scalar(v))
            } else {
                g.constant(Tensor::scalar(v))
            }
        };
        Self {
            bias: leaf(crf.bias),
            gain: leaf(crf.gain),
            gamma: leaf(crf.gamma),
        }
    }
}

/// Film grayscale of a `[3, H, W]` node.
pub fn grayscale_var(g: &mut Graph<'_>, rgb: Var, film: FilmModel) -> Var {
    g.channel_mix(rgb, &film.weights(), 1)
}

pub fn crf_var(g: &mut Graph<'_>, gray: Var, crf: &CrfVars) -> Var {
    let p = g.scalar_pow(gray, crf.gamma);
    let s = g.scalar_mul(p, crf.gain);
    g.scalar_add(s, crf.bias)
}

pub fn blur_var(g: &mut Graph<'_>, x: Var, sigma: f64) -> Result<Var> {
    require_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(x);
    }
    let (_, h, w) = g.value(x).chw();
    Ok(g.resample(
        x,
        Cow::Owned(blur_axis(h, sigma)),
        Cow::Owned(blur_axis(w, sigma)),
    ))
}

pub fn resample_var(g: &mut Graph<'_>, x: Var, width: usize, height: usize) -> Var {
    let (_, h, w) = g.value(x).chw();
    if h == height && w == width {
        return x;
    }
    g.resample(
        x,
        Cow::Owned(resample_axis(h, height)),
        Cow::Owned(resample_axis(w, width)),
    )
}

pub fn crop_var(g: &mut Graph<'_>, x: Var, x0: usize, y0: usize, x1: usize, y1: usize) -> Var {
    let (_, h, w) = g.value(x).chw();
    g.resample(
        x,
        Cow::Owned(AxisMap::crop(h, y0, y1 - y0)),
        Cow::Owned(AxisMap::crop(w, x0, x1 - x0)),
    )
}

/// Differentiable degradation of an RGB render in `[0, 1]`.
pub fn degrade_var(
    g: &mut Graph<'_>,
    rgb: Var,
    film: FilmModel,
    crf: &CrfVars,
    sigma: f64,
) -> Result<Var> {
    let channels = g.value(rgb).shape()[0];
    if channels != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: channels,
        });
    }
    let gray = grayscale_var(g, rgb, film);
    let response = crf_var(g, gray, crf);
    blur_var(g, response, sigma)
}
