//! Style-based synthesis network with extended (per-layer) latent codes.
//!
//! The architecture mirrors the skip-connection generator: a learned 4x4
//! constant, one modulated/demodulated 3x3 convolution at 4x4 and two at
//! every following resolution, and a 1x1 modulated ToRGB at each resolution
//! whose outputs are upsampled and summed into the image. Layer `k` of an
//! extended code drives synthesis resolution `4 * 2^(k / 2)`:
//!
//! | level | resolution | conv codes        | ToRGB code |
//! |-------|------------|-------------------|------------|
//! | 0     | 4          | `w0`              | `w1`       |
//! | i > 0 | 4 * 2^i    | `w(2i-1)`, `w(2i)`| `w(2i+1)`  |
//!
//! The ToRGB outputs before their constant bias are exposed as taps.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imagecore::{resample_axis, Image};
use crate::rng;
use crate::tensor::{NamedTensors, Tensor};

pub const ARCHITECTURE: &str = "style-skip-v1";

/// A point in the style space W.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("latent code"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "latent value",
                value: *v,
                reason: "must be finite",
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(width: usize) -> Self {
        Self(vec![0.0; width])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.0)
    }

    pub fn mean_abs_diff(&self, other: &LatentCode) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.0.len() as f64
    }
}

/// One latent code per synthesis layer (W+).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLatentCode {
    layers: Vec<LatentCode>,
}

impl ExtendedLatentCode {
    pub fn new(layers: Vec<LatentCode>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::EmptyInput("extended latent code"));
        };
        let width = first.width();
        if let Some(bad) = layers.iter().find(|l| l.width() != width) {
            return Err(Error::ShapeMismatch {
                what: "latent layer width".into(),
                expected: width.to_string(),
                found: bad.width().to_string(),
            });
        }
        Ok(Self { layers })
    }

    /// Copies of one code for every layer.
    pub fn broadcast(code: &LatentCode, num_layers: usize) -> Self {
        Self {
            layers: vec![code.clone(); num_layers],
        }
    }

    pub fn layers(&self) -> &[LatentCode] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &LatentCode {
        &self.layers[k]
    }

    pub fn set_layer(&mut self, k: usize, code: LatentCode) {
        assert_eq!(code.width(), self.code_width());
        self.layers[k] = code;
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn code_width(&self) -> usize {
        self.layers[0].width()
    }
}

/// Number of extended-code layers for an output resolution.
pub fn layer_count(resolution: usize) -> usize {
    2 * resolution.trailing_zeros() as usize - 2
}

/// Synthesis resolution driven by extended-code layer `k`.
pub fn layer_resolution(k: usize) -> usize {
    4 << (k / 2)
}

/// Split of the extended-code layers into optimized and frozen sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPartition {
    pub optimizable: Vec<usize>,
    pub frozen: Vec<usize>,
}

impl LayerPartition {
    pub fn is_optimizable(&self, k: usize) -> bool {
        self.optimizable.contains(&k)
    }
}

fn check_cutoff(cutoff: usize, output_resolution: usize) -> Result<()> {
    if !cutoff.is_power_of_two() || cutoff < 4 || cutoff > output_resolution {
        return Err(Error::InvalidCutoff {
            cutoff,
            output_resolution,
        });
    }
    Ok(())
}

/// Layers whose resolution is at most `cutoff` become optimizable.
pub fn partition(num_layers: usize, cutoff: usize) -> Result<LayerPartition> {
    let output_resolution = layer_resolution(num_layers.saturating_sub(1));
    check_cutoff(cutoff, output_resolution)?;
    let (optimizable, frozen) = (0..num_layers).partition(|&k| layer_resolution(k) <= cutoff);
    Ok(LayerPartition {
        optimizable,
        frozen,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub code_width: usize,
    pub mapping_layers: usize,
    /// Feature channels at each resolution level, coarse to fine.
    pub channels: Vec<usize>,
}

impl GeneratorConfig {
    /// The 64x64, 10-layer test generator.
    pub fn toy() -> Self {
        Self {
            resolution: 64,
            code_width: 512,
            mapping_layers: 2,
            channels: vec![32, 32, 32, 16, 8],
        }
    }

    /// Layout of the 1024x1024 FFHQ generator (18 layers).
    pub fn ffhq_1024() -> Self {
        Self {
            resolution: 1024,
            code_width: 512,
            mapping_layers: 8,
            channels: vec![512, 512, 512, 512, 512, 256, 128, 64, 32],
        }
    }

    pub fn levels(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    pub fn num_layers(&self) -> usize {
        layer_count(self.resolution)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::InvalidResolution {
                width: self.resolution,
                height: self.resolution,
            });
        }
        if self.channels.len() != self.levels() {
            return Err(Error::ShapeMismatch {
                what: "generator channel list".into(),
                expected: self.levels().to_string(),
                found: self.channels.len().to_string(),
            });
        }
        if self.code_width == 0 || self.channels.contains(&0) {
            return Err(Error::EmptyInput("generator widths"));
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("architecture".into(), ARCHITECTURE.into());
        m.insert("resolution".into(), self.resolution.to_string());
        m.insert("code_width".into(), self.code_width.to_string());
        m.insert("mapping_layers".into(), self.mapping_layers.to_string());
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        m.insert("channels".into(), ch.join(","));
        m
    }

    pub fn from_metadata(m: &BTreeMap<String, String>) -> Result<Self> {
        let problem = |p: String| Error::Checkpoint {
            architecture: ARCHITECTURE.into(),
            problems: vec![p],
        };
        match m.get("architecture") {
            Some(a) if a == ARCHITECTURE => {}
            other => return Err(problem(format!("architecture tag {other:?}"))),
        }
        let num = |key: &str| -> Result<usize> {
            m.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| problem(format!("metadata field {key}")))
        };
        let channels = m
            .get("channels")
            .map(|s| {
                s.split(',')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<core::result::Result<Vec<_>, _>>()
            })
            .and_then(|r| r.ok())
            .ok_or_else(|| problem("metadata field channels".into()))?;
        let cfg = Self {
            resolution: num("resolution")?,
            code_width: num("code_width")?,
            mapping_layers: num("mapping_layers")?,
            channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug)]
struct StyledConv {
    affine: Dense,
    weight: Tensor,
    bias: Tensor,
    noise_strength: Tensor,
    noise: Tensor,
    // Derived: per-(out, in) squared kernel energy, and the scaled noise map.
    demod: Tensor,
    noise_full: Tensor,
}

#[derive(Clone, Debug)]
struct ToRgb {
    affine: Dense,
    weight: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug)]
struct Level {
    convs: Vec<StyledConv>,
    torgb: ToRgb,
    upsample: Option<(crate::graph::AxisMap, crate::graph::AxisMap)>,
}

/// Output of one synthesis pass.
#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    /// RGB render mapped to `[0, 1]` (not clamped).
    pub image: Image,
    /// ToRGB outputs before their constant bias, coarse to fine, in the
    /// generator's native `[-1, 1]` units.
    pub torgb: Vec<Tensor>,
}

/// Graph handles of one synthesis pass.
#[derive(Clone, Debug)]
pub struct SynthesisVars {
    pub image: Var,
    pub torgb: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    mapping: Vec<Dense>,
    w_avg: Tensor,
    constant: Tensor,
    levels: Vec<Level>,
}

const LRELU_SLOPE: f64 = 0.2;
/// Shared colour direction of the random ToRGB weights; keeps toy renders
/// near a one-dimensional skin-tone family, as real portraits are.
const PALETTE: [f64; 3] = [1.2, 0.95, 0.75];
const PALETTE_JITTER: f64 = 0.15;
/// In-domain coarse taps are negligible; the finest tap carries the image.
const COARSE_TORGB_GAIN: f64 = 1e-2;
const FINE_TORGB_GAIN: f64 = 1.5;
const AFFINE_STD: f64 = 1.0;
const DEMOD_EPS: f64 = 1e-8;

fn gaussian(r: &mut rng::Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        rng::normal_vec(r, n).into_iter().map(|v| v * std).collect(),
    )
    .round_to_f32()
}

impl Generator {
    /// Deterministic random-weight generator with the toy layout.
    pub fn toy(seed: u64) -> Self {
        Self::random(GeneratorConfig::toy(), seed).expect("toy config is valid")
    }

    /// Random weights for any valid layout. All but the finest ToRGB layer
    /// start with negligible gain, and all share one colour direction up to a
    /// small jitter.
    pub fn random(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let cw = config.code_width;
        let mapping = (0..config.mapping_layers)
            .map(|_| Dense {
                weight: gaussian(&mut r, &[cw, cw], (1.0 / cw as f64).sqrt()),
                bias: Tensor::zeros(&[cw]),
            })
            .collect();
        let c0 = config.channels[0];
        let constant = gaussian(&mut r, &[c0, 4, 4], 1.0);
        let levels_n = config.levels();
        let mut tensors = NamedTensors::new();
        let mut prev = c0;
        for (i, &ch) in config.channels.iter().enumerate() {
            let res = 4usize << i;
            let n_convs = if i == 0 { 1 } else { 2 };
            for j in 0..n_convs {
                let cin = if j == 0 { prev } else { ch };
                let p = format!("synthesis.l{i}.conv{j}");
                tensors.insert(
                    format!("{p}.affine.weight"),
                    gaussian(&mut r, &[cin, cw], AFFINE_STD / (cw as f64).sqrt()),
                );
                tensors.insert(format!("{p}.affine.bias"), Tensor::full(&[cin], 1.0));
                tensors.insert(
                    format!("{p}.weight"),
                    gaussian(&mut r, &[ch, cin, 3, 3], 1.0),
                );
                tensors.insert(format!("{p}.bias"), gaussian(&mut r, &[ch], 0.1));
                tensors.insert(format!("{p}.noise_strength"), Tensor::scalar(0.05));
                tensors.insert(format!("{p}.noise"), gaussian(&mut r, &[1, res, res], 1.0));
            }
            let gain = if i + 1 == levels_n {
                FINE_TORGB_GAIN
            } else {
                COARSE_TORGB_GAIN / (1u64 << (levels_n - 2 - i)) as f64
            };
            let p = format!("synthesis.l{i}.torgb");
            tensors.insert(
                format!("{p}.affine.weight"),
                gaussian(&mut r, &[ch, cw], AFFINE_STD / (cw as f64).sqrt()),
            );
            tensors.insert(format!("{p}.affine.bias"), Tensor::full(&[ch], 1.0));
            let shared = rng::normal_vec(&mut r, ch);
            let jitter = rng::normal_vec(&mut r, 3 * ch);
            let w = (0..3 * ch)
                .map(|i| {
                    gain / (ch as f64).sqrt()
                        * (PALETTE[i / ch] * shared[i % ch] + PALETTE_JITTER * jitter[i])
                })
                .collect();
            tensors.insert(
                format!("{p}.weight"),
                Tensor::new(&[3, ch, 1, 1], w).round_to_f32(),
            );
            tensors.insert(format!("{p}.bias"), gaussian(&mut r, &[3], 0.02));
            prev = ch;
        }
        let mut gen = Self {
            config: config.clone(),
            mapping,
            w_avg: Tensor::zeros(&[cw]),
            constant,
            levels: Vec::new(),
        };
        gen.levels = Self::build_levels(&config, &tensors)?;
        // Empirical mean of the mapped prior.
        let n = 256;
        let mut avg = vec![0.0; cw];
        for s in 0..n {
            let w = gen.map_noise(&rng::normal_vec(&mut rng::derived(seed, 1 + s), cw));
            avg.iter_mut().zip(&w).for_each(|(a, v)| *a += v / n as f64);
        }
        gen.w_avg = Tensor::from_slice(&avg).round_to_f32();
        Ok(gen)
    }

    fn build_levels(config: &GeneratorConfig, t: &NamedTensors) -> Result<Vec<Level>> {
        let mut problems = Vec::new();
        let cw = config.code_width;
        let mut get = |name: String, shape: &[usize]| -> Tensor {
            match t.get(&name) {
                Some(v) if v.shape() == shape => v.clone(),
                Some(v) => {
                    problems.push(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        v.shape()
                    ));
                    Tensor::zeros(shape)
                }
                None => {
                    problems.push(format!("{name}: missing"));
                    Tensor::zeros(shape)
                }
            }
        };
        let mut levels = Vec::new();
        let mut prev = config.channels[0];
        for (i, &ch) in config.channels.iter().enumerate() {
            let res = 4usize << i;
            let n_convs = if i == 0 { 1 } else { 2 };
            let mut convs = Vec::new();
            for j in 0..n_convs {
                let cin = if j == 0 { prev } else { ch };
                let p = format!("synthesis.l{i}.conv{j}");
                let affine = Dense {
                    weight: get(format!("{p}.affine.weight"), &[cin, cw]),
                    bias: get(format!("{p}.affine.bias"), &[cin]),
                };
                let weight = get(format!("{p}.weight"), &[ch, cin, 3, 3]);
                let bias = get(format!("{p}.bias"), &[ch]);
                let noise_strength = get(format!("{p}.noise_strength"), &[1]);
                let noise = get(format!("{p}.noise"), &[1, res, res]);
                convs.push(StyledConv::new(affine, weight, bias, noise_strength, noise));
            }
            let p = format!("synthesis.l{i}.torgb");
            let torgb = ToRgb {
                affine: Dense {
                    weight: get(format!("{p}.affine.weight"), &[ch, cw]),
                    bias: get(format!("{p}.affine.bias"), &[ch]),
                },
                weight: get(format!("{p}.weight"), &[3, ch, 1, 1]),
                bias: get(format!("{p}.bias"), &[3]),
            };
            let upsample =
                (i > 0).then(|| (resample_axis(res / 2, res), resample_axis(res / 2, res)));
            levels.push(Level {
                convs,
                torgb,
                upsample,
            });
            prev = ch;
        }
        if problems.is_empty() {
            Ok(levels)
        } else {
            Err(Error::Checkpoint {
                architecture: ARCHITECTURE.into(),
                problems,
            })
        }
    }

    /// Rebuilds a generator from named tensors, reporting every missing or
    /// mis-shaped tensor by name.
    pub fn from_tensors(config: GeneratorConfig, t: &NamedTensors) -> Result<Self> {
        config.validate()?;
        let cw = config.code_width;
        let mut problems = Vec::new();
        let mut fetch = |name: String, shape: &[usize]| match t.get(&name) {
            Some(v) if v.shape() == shape => Some(v.clone()),
            Some(v) => {
                problems.push(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    v.shape()
                ));
                None
            }
            None => {
                problems.push(format!("{name}: missing"));
                None
            }
        };
        let mapping: Vec<Option<Dense>> = (0..config.mapping_layers)
            .map(|i| {
                let w = fetch(format!("mapping.fc{i}.weight"), &[cw, cw]);
                let b = fetch(format!("mapping.fc{i}.bias"), &[cw]);
                Some(Dense {
                    weight: w?,
                    bias: b?,
                })
            })
            .collect();
        let w_avg = fetch("mapping.w_avg".into(), &[cw]);
        let constant = fetch("synthesis.const".into(), &[config.channels[0], 4, 4]);
        let levels = Self::build_levels(&config, t);
        if let Err(Error::Checkpoint { problems: more, .. }) = &levels {
            problems.extend(more.iter().cloned());
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint {
                architecture: ARCHITECTURE.into(),
                problems,
            });
        }
        Ok(Self {
            config,
            mapping: mapping.into_iter().map(Option::unwrap).collect(),
            w_avg: w_avg.unwrap(),
            constant: constant.unwrap(),
            levels: levels?,
        })
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::new();
        for (i, d) in self.mapping.iter().enumerate() {
            t.insert(format!("mapping.fc{i}.weight"), d.weight.clone());
            t.insert(format!("mapping.fc{i}.bias"), d.bias.clone());
        }
        t.insert("mapping.w_avg".into(), self.w_avg.clone());
        t.insert("synthesis.const".into(), self.constant.clone());
        for (i, level) in self.levels.iter().enumerate() {
            for (j, c) in level.convs.iter().enumerate() {
                let p = format!("synthesis.l{i}.conv{j}");
                t.insert(format!("{p}.affine.weight"), c.affine.weight.clone());
                t.insert(format!("{p}.affine.bias"), c.affine.bias.clone());
                t.insert(format!("{p}.weight"), c.weight.clone());
                t.insert(format!("{p}.bias"), c.bias.clone());
                t.insert(format!("{p}.noise_strength"), c.noise_strength.clone());
                t.insert(format!("{p}.noise"), c.noise.clone());
            }
            let p = format!("synthesis.l{i}.torgb");
            t.insert(
                format!("{p}.affine.weight"),
                level.torgb.affine.weight.clone(),
            );
            t.insert(format!("{p}.affine.bias"), level.torgb.affine.bias.clone());
            t.insert(format!("{p}.weight"), level.torgb.weight.clone());
            t.insert(format!("{p}.bias"), level.torgb.bias.clone());
        }
        t
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    pub fn code_width(&self) -> usize {
        self.config.code_width
    }

    /// Mean of the mapped prior.
    pub fn mean_latent(&self) -> LatentCode {
        LatentCode(self.w_avg.data().to_vec())
    }

    /// Constant biases added to each ToRGB tap.
    pub fn torgb_biases(&self) -> Vec<[f64; 3]> {
        self.levels
            .iter()
            .map(|l| {
                [
                    l.torgb.bias.data()[0],
                    l.torgb.bias.data()[1],
                    l.torgb.bias.data()[2],
                ]
            })
            .collect()
    }

    /// Resolution of each ToRGB tap, coarse to fine.
    pub fn tap_resolutions(&self) -> Vec<usize> {
        (0..self.levels.len()).map(|i| 4 << i).collect()
    }

    /// Mapping network applied to a prior sample `z`.
    pub fn map_noise(&self, z: &[f64]) -> Vec<f64> {
        let ms = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        let mut x: Vec<f64> = z.iter().map(|v| v / (ms + 1e-8).sqrt()).collect();
        let gain = 2f64.sqrt();
        for d in &self.mapping {
            let n = d.bias.len();
            let w = d.weight.data();
            x = (0..n)
                .map(|o| {
                    let v: f64 = w[o * x.len()..(o + 1) * x.len()]
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + d.bias.data()[o];
                    gain * if v > 0.0 { v } else { LRELU_SLOPE * v }
                })
                .collect();
        }
        x
    }

    /// Deterministic draw from the generator's prior over W.
    pub fn sample_latent(&self, seed: u64) -> LatentCode {
        let z = rng::normal_vec(&mut rng::seeded(seed), self.config.code_width);
        LatentCode(self.map_noise(&z))
    }

    pub fn broadcast(&self, code: &LatentCode) -> ExtendedLatentCode {
        ExtendedLatentCode::broadcast(code, self.num_layers())
    }

    pub fn partition(&self, cutoff: usize) -> Result<LayerPartition> {
        check_cutoff(cutoff, self.resolution())?;
        partition(self.num_layers(), cutoff)
    }

    /// Checks an extended code's layer count and width.
    pub fn check_code(&self, code: &ExtendedLatentCode) -> Result<()> {
        if code.num_layers() != self.num_layers() {
            return Err(Error::LayerCount {
                expected: self.num_layers(),
                found: code.num_layers(),
            });
        }
        if code.code_width() != self.code_width() {
            return Err(Error::ShapeMismatch {
                what: "latent code width".into(),
                expected: self.code_width().to_string(),
                found: code.code_width().to_string(),
            });
        }
        Ok(())
    }

    /// Records one synthesis pass on `g`. `codes` holds one `[code_width]`
    /// node per layer.
    pub fn synthesize_var<'a>(&'a self, g: &mut Graph<'a>, codes: &[Var]) -> Result<SynthesisVars> {
        if codes.len() != self.num_layers() {
            return Err(Error::LayerCount {
                expected: self.num_layers(),
                found: codes.len(),
            });
        }
        let mut x = g.constant_ref(&self.constant);
        let mut image: Option<Var> = None;
        let mut taps = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            if let Some((rows, cols)) = &level.upsample {
                x = g.resample(x, Cow::Borrowed(rows), Cow::Borrowed(cols));
            }
            let first_code = if i == 0 { 0 } else { 2 * i - 1 };
            for (j, conv) in level.convs.iter().enumerate() {
                x = conv.forward(g, x, codes[first_code + j]);
            }
            let psi = level.torgb.forward(g, x, codes[2 * i + 1]);
            taps.push(psi);
            let bias = g.constant_ref(&level.torgb.bias);
            let rgb = g.channel_bias(psi, bias);
            image = Some(match (image, &level.upsample) {
                (Some(prev), Some((rows, cols))) => {
                    let up = g.resample(prev, Cow::Borrowed(rows), Cow::Borrowed(cols));
                    g.add(up, rgb)
                }
                _ => rgb,
            });
        }
        let native = image.expect("at least one level");
        let image = g.affine(native, 0.5, 0.5);
        Ok(SynthesisVars { image, torgb: taps })
    }

    /// Synthesizes an image. A non-zero `latent_noise_scale` adds zero-mean
    /// Gaussian noise of that standard deviation to every code entry, drawn
    /// from `noise_seed`.
    pub fn synthesize(
        &self,
        code: &ExtendedLatentCode,
        latent_noise_scale: f64,
        noise_seed: u64,
    ) -> Result<SynthesisOutput> {
        self.check_code(code)?;
        let mut g = Graph::new();
        let mut r = rng::seeded(noise_seed);
        let vars: Vec<Var> = code
            .layers()
            .iter()
            .map(|l| {
                let mut t = l.to_tensor();
                if latent_noise_scale != 0.0 {
                    let n = rng::normal_vec(&mut r, t.len());
                    t.data_mut()
                        .iter_mut()
                        .zip(n)
                        .for_each(|(v, e)| *v += latent_noise_scale * e);
                }
                g.constant(t)
            })
            .collect();
        let out = self.synthesize_var(&mut g, &vars)?;
        Ok(SynthesisOutput {
            image: Image::from_tensor(g.value(out.image).clone())?,
            torgb: out.torgb.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

impl StyledConv {
    fn new(
        affine: Dense,
        weight: Tensor,
        bias: Tensor,
        noise_strength: Tensor,
        noise: Tensor,
    ) -> Self {
        let s = weight.shape();
        let (cout, cin, k) = (s[0], s[1], s[2] * s[3]);
        let demod = Tensor::new(
            &[cout, cin],
            (0..cout * cin)
                .map(|oi| {
                    weight.data()[oi * k..(oi + 1) * k]
                        .iter()
                        .map(|v| v * v)
                        .sum()
                })
                .collect(),
        );
        let strength = noise_strength.data()[0];
        let (_, h, w) = noise.chw();
        let mut full = Vec::with_capacity(cout * h * w);
        for _ in 0..cout {
            full.extend(noise.data().iter().map(|v| v * strength));
        }
        Self {
            affine,
            weight,
            bias,
            noise_strength,
            noise,
            demod,
            noise_full: Tensor::new(&[cout, h, w], full),
        }
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, code: Var) -> Var {
        let aw = g.constant_ref(&self.affine.weight);
        let ab = g.constant_ref(&self.affine.bias);
        let style = g.linear(aw, code, Some(ab));
        let modulated = g.channel_scale(x, style);
        let w = g.constant_ref(&self.weight);
        let y = g.conv2d(modulated, w, None, 1, 1);
        let s2 = g.mul(style, style);
        let energy = g.constant_ref(&self.demod);
        let e = g.linear(energy, s2, None);
        let e = g.affine(e, 1.0, DEMOD_EPS);
        let d = g.powf(e, -0.5);
        let y = g.channel_scale(y, d);
        let noise = g.constant_ref(&self.noise_full);
        let y = g.add(y, noise);
        let b = g.constant_ref(&self.bias);
        let y = g.channel_bias(y, b);
        g.leaky_relu(y, LRELU_SLOPE, 2f64.sqrt())
    }
}

impl ToRgb {
    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, code: Var) -> Var {
        let aw = g.constant_ref(&self.affine.weight);
        let ab = g.constant_ref(&self.affine.bias);
        let style = g.linear(aw, code, Some(ab));
        let modulated = g.channel_scale(x, style);
        let w = g.constant_ref(&self.weight);
        g.conv2d(modulated, w, None, 1, 0)
    }
}
