//! VGG-style perceptual backbones behind one interface.
//!
//! A backbone is a chain of 3x3 convolutions, ReLUs and 2x2 max pools with
//! the conventional `convB_K` / `reluB_K` / `poolB` layer names. The same
//! type serves the general-purpose network, the face-identity network and
//! the seeded random-weight toy networks used in tests.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imagecore::Image;
use crate::rng;
use crate::tensor::{NamedTensors, Tensor};

pub const ARCHITECTURE: &str = "vgg-v1";

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Architecture and input normalisation of a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub id: String,
    /// Conv widths in order; `None` marks a max pool.
    pub layout: Vec<Option<usize>>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn layout(spec: &str) -> Vec<Option<usize>> {
    spec.split(',').map(|t| t.trim().parse().ok()).collect()
}

impl BackboneConfig {
    pub fn vgg16() -> Self {
        Self {
            id: "vgg16".into(),
            layout: layout("64,64,M,128,128,M,256,256,256,M,512,512,512,M,512,512,512"),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn vgg19() -> Self {
        Self {
            id: "vgg19".into(),
            layout: layout("64,64,M,128,128,M,256,256,256,256,M,512,512,512,512,M,512,512,512,512"),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// VGG-Face shares the VGG16 layout; its weights expect raw `[0, 1]`
    /// pixels shifted by the face-dataset mean.
    pub fn vgg_face() -> Self {
        Self {
            id: "vgg-face".into(),
            layout: layout("64,64,M,128,128,M,256,256,256,M,512,512,512,M,512,512,512"),
            mean: [0.5068, 0.4042, 0.3510],
            std: [1.0 / 255.0; 3],
        }
    }

    /// Narrow variant of `full` that keeps its input normalization.
    fn toy(full: Self, id: &str, spec: &str) -> Self {
        Self {
            id: id.into(),
            layout: layout(spec),
            ..full
        }
    }

    pub fn toy_vgg16() -> Self {
        Self::toy(
            Self::vgg16(),
            "toy-vgg16",
            "8,8,M,12,12,M,16,16,16,M,16,16,16",
        )
    }

    pub fn toy_vgg19() -> Self {
        Self::toy(Self::vgg19(), "toy-vgg19", "8,8,M,12,12,M,16,16,16,16")
    }

    pub fn toy_vgg_face() -> Self {
        Self::toy(
            Self::vgg_face(),
            "toy-vgg-face",
            "8,8,M,12,12,M,16,16,16,M,16,16,16",
        )
    }

    /// Expanded layer list with conventional names.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let (mut block, mut k, mut cin) = (1, 0, 3);
        for entry in &self.layout {
            match entry {
                Some(cout) => {
                    k += 1;
                    out.push(LayerSpec {
                        name: format!("conv{block}_{k}"),
                        kind: LayerKind::Conv {
                            in_channels: cin,
                            out_channels: *cout,
                        },
                    });
                    out.push(LayerSpec {
                        name: format!("relu{block}_{k}"),
                        kind: LayerKind::Relu,
                    });
                    cin = *cout;
                }
                None => {
                    out.push(LayerSpec {
                        name: format!("pool{block}"),
                        kind: LayerKind::MaxPool,
                    });
                    block += 1;
                    k = 0;
                }
            }
        }
        out
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers().into_iter().map(|l| l.name).collect()
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("architecture".into(), ARCHITECTURE.into());
        m.insert("id".into(), self.id.clone());
        let spec: Vec<String> = self
            .layout
            .iter()
            .map(|e| e.map_or("M".to_string(), |c| c.to_string()))
            .collect();
        m.insert("layout".into(), spec.join(","));
        let join = |v: &[f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        m.insert("mean".into(), join(&self.mean));
        m.insert("std".into(), join(&self.std));
        m
    }

    pub fn from_metadata(m: &BTreeMap<String, String>) -> Result<Self> {
        let problem = |p: &str| Error::Checkpoint {
            architecture: ARCHITECTURE.into(),
            problems: vec![p.into()],
        };
        if m.get("architecture").map(String::as_str) != Some(ARCHITECTURE) {
            return Err(problem("architecture tag"));
        }
        let triple = |key: &str| -> Result<[f64; 3]> {
            let v: Vec<f64> = m
                .get(key)
                .ok_or_else(|| problem(key))?
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<core::result::Result<_, _>>()
                .map_err(|_| problem(key))?;
            v.try_into().map_err(|_| problem(key))
        };
        Ok(Self {
            id: m.get("id").cloned().ok_or_else(|| problem("id"))?,
            layout: layout(m.get("layout").ok_or_else(|| problem("layout"))?),
            mean: triple("mean")?,
            std: triple("std")?,
        })
    }
}

/// Named activations from one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub backbone: String,
    pub layers: Vec<(String, Tensor)>,
}

impl FeatureSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `backbone:layer,layer,...`, used to check that two sets are comparable.
    pub fn signature(&self) -> String {
        let names: Vec<&str> = self.layers.iter().map(|(n, _)| n.as_str()).collect();
        format!("{}:{}", self.backbone, names.join(","))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<LayerSpec>,
    params: Vec<Option<(Tensor, Tensor)>>,
    norm_scale: Tensor,
    norm_shift: Tensor,
}

impl Backbone {
    fn assemble(config: BackboneConfig, params: Vec<Option<(Tensor, Tensor)>>) -> Self {
        let layers = config.layers();
        let norm_scale = Tensor::new(&[3], config.std.iter().map(|s| 1.0 / s).collect());
        let norm_shift = Tensor::new(
            &[3],
            config
                .mean
                .iter()
                .zip(&config.std)
                .map(|(m, s)| -m / s)
                .collect(),
        );
        Self {
            config,
            layers,
            params,
            norm_scale,
            norm_shift,
        }
    }

    /// He-initialised random weights; biases are small and non-zero so that
    /// a blank input still produces a distinctive response.
    pub fn random(config: BackboneConfig, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let params = config
            .layers()
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                } => {
                    let fan_in = (in_channels * 9) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let n = out_channels * in_channels * 9;
                    let w: Vec<f64> = rng::normal_vec(&mut r, n)
                        .into_iter()
                        .map(|v| v * std)
                        .collect();
                    let b: Vec<f64> = rng::normal_vec(&mut r, out_channels)
                        .into_iter()
                        .map(|v| 0.05 * v)
                        .collect();
                    Some((
                        Tensor::new(&[out_channels, in_channels, 3, 3], w).round_to_f32(),
                        Tensor::new(&[out_channels], b).round_to_f32(),
                    ))
                }
                _ => None,
            })
            .collect();
        Self::assemble(config, params)
    }

    pub fn toy_vgg16(seed: u64) -> Self {
        Self::random(BackboneConfig::toy_vgg16(), seed)
    }

    pub fn toy_vgg19(seed: u64) -> Self {
        Self::random(BackboneConfig::toy_vgg19(), seed)
    }

    pub fn toy_vgg_face(seed: u64) -> Self {
        Self::random(BackboneConfig::toy_vgg_face(), seed)
    }

    pub fn from_tensors(config: BackboneConfig, t: &NamedTensors) -> Result<Self> {
        let mut problems = Vec::new();
        let mut params = Vec::new();
        for l in config.layers() {
            let LayerKind::Conv {
                in_channels,
                out_channels,
            } = l.kind
            else {
                params.push(None);
                continue;
            };
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
            let w = fetch(
                format!("{}.weight", l.name),
                &[out_channels, in_channels, 3, 3],
            );
            let b = fetch(format!("{}.bias", l.name), &[out_channels]);
            params.push(w.zip(b));
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint {
                architecture: format!("{ARCHITECTURE}/{}", config.id),
                problems,
            });
        }
        Ok(Self::assemble(config, params))
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::new();
        for (l, p) in self.layers.iter().zip(&self.params) {
            if let Some((w, b)) = p {
                t.insert(format!("{}.weight", l.name), w.clone());
                t.insert(format!("{}.bias", l.name), b.clone());
            }
        }
        t
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer {
                backbone: self.config.id.clone(),
                layer: name.into(),
            })
    }

    /// Smallest input side for which every requested layer is non-empty.
    pub fn min_input_size(&self, layers: &[&str]) -> Result<usize> {
        let mut deepest = 0;
        for name in layers {
            deepest = deepest.max(self.layer_index(name)?);
        }
        let pools = self.layers[..=deepest]
            .iter()
            .filter(|l| l.kind == LayerKind::MaxPool)
            .count();
        Ok(1 << pools)
    }

    /// Records the forward pass on `g` and returns the requested layers in
    /// order. One-channel inputs are replicated to RGB.
    pub fn extract_var<'a>(
        &'a self,
        g: &mut Graph<'a>,
        img: Var,
        layers: &[&str],
    ) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(img).chw();
        let min = self.min_input_size(layers)?;
        if h < min || w < min {
            return Err(Error::InvalidResolution {
                width: w,
                height: h,
            });
        }
        let indices: Vec<usize> = layers
            .iter()
            .map(|n| self.layer_index(n))
            .collect::<Result<_>>()?;
        let last = indices.iter().copied().max().unwrap_or(0);
        let mut x = match c {
            3 => img,
            1 => g.channel_mix(img, &[1.0, 1.0, 1.0], 3),
            other => {
                return Err(Error::ChannelCount {
                    expected: 3,
                    found: other,
                })
            }
        };
        let scale = g.constant_ref(&self.norm_scale);
        let shift = g.constant_ref(&self.norm_shift);
        x = g.channel_scale(x, scale);
        x = g.channel_bias(x, shift);
        let mut taps = vec![None; self.layers.len()];
        for (i, (l, p)) in self
            .layers
            .iter()
            .zip(&self.params)
            .enumerate()
            .take(last + 1)
        {
            x = match (&l.kind, p) {
                (LayerKind::Conv { .. }, Some((wt, b))) => {
                    let wv = g.constant_ref(wt);
                    let bv = g.constant_ref(b);
                    g.conv2d(x, wv, Some(bv), 1, 1)
                }
                (LayerKind::Relu, _) => g.relu(x),
                (LayerKind::MaxPool, _) => g.max_pool2(x),
                (LayerKind::Conv { .. }, None) => unreachable!("conv layers always carry weights"),
            };
            taps[i] = Some(x);
        }
        Ok(indices
            .into_iter()
            .map(|i| taps[i].expect("layer visited"))
            .collect())
    }

    pub fn extract(&self, img: &Image, layers: &[&str]) -> Result<FeatureSet> {
        let mut g = Graph::new();
        let x = g.constant_ref(img.tensor());
        let vars = self.extract_var(&mut g, x, layers)?;
        Ok(FeatureSet {
            backbone: self.config.id.clone(),
            layers: layers
                .iter()
                .zip(vars)
                .map(|(n, v)| (n.to_string(), g.value(v).clone()))
                .collect(),
        })
    }
}
