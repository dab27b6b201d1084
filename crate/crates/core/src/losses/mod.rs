//! The composite objective: film-aware reconstruction, ToRGB colour
//! transfer and contextual detail transfer.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::{Backbone, FeatureSet};
use crate::graph::{channel_covariance, contextual_forward, huber, Graph, Var};
use crate::imagecore::{crop_var, resample_var, Image};
use crate::tensor::Tensor;

/// Huber threshold for covariance differences, in ToRGB units.
pub const HUBER_DELTA: f64 = 1.0;
/// Bandwidth of the contextual affinity kernel.
pub const CONTEXTUAL_BANDWIDTH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub vgg: f64,
    pub face: f64,
    pub eye: f64,
    pub ctx: f64,
    pub color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vgg: 1.0,
            face: 0.3,
            eye: 0.1,
            ctx: 0.1,
            color: 1e10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vgg weight", self.vgg),
            ("face weight", self.face),
            ("eye weight", self.eye),
            ("ctx weight", self.ctx),
            ("color weight", self.color),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    value: v,
                    reason: "loss weights must be finite and non-negative",
                });
            }
        }
        Ok(())
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EyeBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl EyeBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0 && self.x1 <= width && self.y1 <= height
    }
}

/// Eye boxes in input-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EyeRegions {
    pub left: EyeBox,
    pub right: EyeBox,
}

impl EyeRegions {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !self.left.fits(width, height) {
            return Err(Error::EyeRegionOutOfBounds {
                region: "left",
                width,
                height,
            });
        }
        if !self.right.fits(width, height) {
            return Err(Error::EyeRegionOutOfBounds {
                region: "right",
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn boxes(&self) -> [EyeBox; 2] {
        [self.left, self.right]
    }
}

/// Layers each backbone contributes to the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayers {
    pub vgg: Vec<String>,
    pub face: Vec<String>,
    pub context: Vec<String>,
}

impl Default for FeatureLayers {
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            vgg: names(&["relu1_2", "relu2_2", "relu3_3", "relu4_3"]),
            face: names(&["conv1_1", "conv2_1", "conv3_1", "conv4_1"]),
            context: names(&["relu1_2", "relu2_2", "relu3_4"]),
        }
    }
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// The three perceptual networks the objective uses.
#[derive(Clone, Debug)]
pub struct LossNetworks {
    /// General perceptual network (VGG16 layout) for the reconstruction and eye terms.
    pub vgg: Backbone,
    /// Face-identity network for the reconstruction term.
    pub face: Backbone,
    /// Network for the contextual term (VGG19 layout).
    pub context: Backbone,
    pub layers: FeatureLayers,
}

impl LossNetworks {
    pub fn toy(seed: u64) -> Self {
        Self {
            vgg: Backbone::toy_vgg16(seed),
            face: Backbone::toy_vgg_face(seed.wrapping_add(1)),
            context: Backbone::toy_vgg19(seed.wrapping_add(2)),
            layers: FeatureLayers::default(),
        }
    }

    pub fn vgg_layers(&self) -> Vec<&str> {
        as_strs(&self.layers.vgg)
    }

    pub fn face_layers(&self) -> Vec<&str> {
        as_strs(&self.layers.face)
    }

    pub fn context_layers(&self) -> Vec<&str> {
        as_strs(&self.layers.context)
    }
}

fn check_comparable(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.signature() != b.signature() {
        return Err(Error::BackboneMismatch {
            left: a.signature(),
            right: b.signature(),
        });
    }
    for ((name, x), (_, y)) in a.layers.iter().zip(&b.layers) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                what: format!("feature layer {name}"),
                expected: format!("{:?}", x.shape()),
                found: format!("{:?}", y.shape()),
            });
        }
    }
    Ok(())
}

/// Mean squared feature difference per layer, averaged over layers.
pub fn perceptual_loss(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_comparable(a, b)?;
    if a.layers.is_empty() {
        return Err(Error::EmptyInput("feature set"));
    }
    let total: f64 = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                / x.len() as f64
        })
        .sum();
    Ok(total / a.layers.len() as f64)
}

pub fn perceptual_loss_var(g: &mut Graph<'_>, a: &[Var], b: &[Var]) -> Var {
    assert_eq!(a.len(), b.len(), "perceptual loss needs aligned layers");
    let terms: Vec<Var> = a.iter().zip(b).map(|(&x, &y)| g.mse(x, y)).collect();
    let s = g.add_all(&terms);
    g.affine(s, 1.0 / terms.len() as f64, 0.0)
}

/// Graph handles of the reconstruction terms, unweighted, plus their
/// weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct ReconTerms {
    pub vgg: Var,
    pub face: Var,
    pub eye: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconValues {
    pub vgg: f64,
    pub face: f64,
    pub eye: f64,
    pub total: f64,
}

/// Reconstruction loss against one antique input, with the input-side
/// features computed once.
///
/// Both images are resampled to `perceptual_size` squared for the general
/// and face terms. For the eye term the degraded render is resampled to the
/// input's own resolution, both are cropped to each eye box, and the general
/// perceptual loss is averaged over the two eyes.
#[derive(Debug)]
pub struct ReconstructionTarget<'n> {
    nets: &'n LossNetworks,
    weights: LossWeights,
    perceptual_size: usize,
    input_size: (usize, usize),
    eyes: EyeRegions,
    input_vgg: Vec<Tensor>,
    input_face: Vec<Tensor>,
    input_eyes: [Vec<Tensor>; 2],
}

impl<'n> ReconstructionTarget<'n> {
    pub fn new(
        nets: &'n LossNetworks,
        input: &Image,
        eyes: EyeRegions,
        weights: LossWeights,
        perceptual_size: usize,
    ) -> Result<Self> {
        weights.validate()?;
        eyes.validate(input.width(), input.height())?;
        if perceptual_size == 0 {
            return Err(Error::InvalidResolution {
                width: 0,
                height: 0,
            });
        }
        let mut g = Graph::new();
        let x = g.constant_ref(input.tensor());
        let f = resample_var(&mut g, x, perceptual_size, perceptual_size);
        let vgg = nets.vgg.extract_var(&mut g, f, &nets.vgg_layers())?;
        let face = nets.face.extract_var(&mut g, f, &nets.face_layers())?;
        let mut input_eyes: [Vec<Tensor>; 2] = [Vec::new(), Vec::new()];
        for (slot, b) in input_eyes.iter_mut().zip(eyes.boxes()) {
            let c = crop_var(&mut g, x, b.x0, b.y0, b.x1, b.y1);
            let feats = nets.vgg.extract_var(&mut g, c, &nets.vgg_layers())?;
            *slot = feats.iter().map(|&v| g.value(v).clone()).collect();
        }
        Ok(Self {
            nets,
            weights,
            perceptual_size,
            input_size: (input.width(), input.height()),
            eyes,
            input_vgg: vgg.iter().map(|&v| g.value(v).clone()).collect(),
            input_face: face.iter().map(|&v| g.value(v).clone()).collect(),
            input_eyes,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    fn const_refs<'a>(g: &mut Graph<'a>, ts: &'a [Tensor]) -> Vec<Var> {
        ts.iter().map(|t| g.constant_ref(t)).collect()
    }

    /// Records the three terms for a degraded render node.
    pub fn terms_var<'a>(&'a self, g: &mut Graph<'a>, degraded: Var) -> Result<ReconTerms>
    where
        'n: 'a,
    {
        let zero = || Tensor::scalar(0.0);
        let f = resample_var(g, degraded, self.perceptual_size, self.perceptual_size);
        let vgg = if self.weights.vgg > 0.0 {
            let feats = self.nets.vgg.extract_var(g, f, &self.nets.vgg_layers())?;
            let target = Self::const_refs(g, &self.input_vgg);
            perceptual_loss_var(g, &feats, &target)
        } else {
            g.constant(zero())
        };
        let face = if self.weights.face > 0.0 {
            let feats = self.nets.face.extract_var(g, f, &self.nets.face_layers())?;
            let target = Self::const_refs(g, &self.input_face);
            perceptual_loss_var(g, &feats, &target)
        } else {
            g.constant(zero())
        };
        let eye = if self.weights.eye > 0.0 {
            let (w, h) = self.input_size;
            let at_input = resample_var(g, degraded, w, h);
            let mut per_eye = Vec::new();
            for (b, target) in self.eyes.boxes().iter().zip(&self.input_eyes) {
                let c = crop_var(g, at_input, b.x0, b.y0, b.x1, b.y1);
                let feats = self.nets.vgg.extract_var(g, c, &self.nets.vgg_layers())?;
                let target = Self::const_refs(g, target);
                per_eye.push(perceptual_loss_var(g, &feats, &target));
            }
            let s = g.add_all(&per_eye);
            g.affine(s, 0.5, 0.0)
        } else {
            g.constant(zero())
        };
        let wv = g.affine(vgg, self.weights.vgg, 0.0);
        let wf = g.affine(face, self.weights.face, 0.0);
        let we = g.affine(eye, self.weights.eye, 0.0);
        let total = g.add_all(&[wv, wf, we]);
        Ok(ReconTerms {
            vgg,
            face,
            eye,
            total,
        })
    }

    pub fn evaluate(&self, degraded: &Image) -> Result<ReconValues> {
        let mut g = Graph::new();
        let x = g.constant_ref(degraded.tensor());
        let t = self.terms_var(&mut g, x)?;
        Ok(ReconValues {
            vgg: g.scalar(t.vgg),
            face: g.scalar(t.face),
            eye: g.scalar(t.eye),
            total: g.scalar(t.total),
        })
    }
}

/// Weighted reconstruction loss between an antique input and a degraded render.
pub fn reconstruction_loss(
    nets: &LossNetworks,
    input: &Image,
    degraded: &Image,
    eyes: EyeRegions,
    weights: LossWeights,
    perceptual_size: usize,
) -> Result<f64> {
    Ok(
        ReconstructionTarget::new(nets, input, eyes, weights, perceptual_size)?
            .evaluate(degraded)?
            .total,
    )
}

/// Mean-centred channel covariance of one ToRGB tap, row-major `C x C`.
pub fn tap_covariance(tap: &Tensor) -> Vec<f64> {
    channel_covariance(tap).1
}

fn check_active(active: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = active.iter().find(|&&l| l >= n) {
        return Err(Error::ShapeMismatch {
            what: "active ToRGB layer".into(),
            expected: format!("< {n}"),
            found: bad.to_string(),
        });
    }
    Ok(())
}

/// Huber penalty between ToRGB covariances of the output and the sibling,
/// summed over matrix elements and active layers.
pub fn color_transfer_loss(
    out_taps: &[Tensor],
    sib_taps: &[Tensor],
    active: &[usize],
) -> Result<f64> {
    if out_taps.len() != sib_taps.len() {
        return Err(Error::LayerCount {
            expected: sib_taps.len(),
            found: out_taps.len(),
        });
    }
    check_active(active, out_taps.len())?;
    let mut total = 0.0;
    for &l in active {
        if out_taps[l].shape()[0] != sib_taps[l].shape()[0] {
            return Err(Error::ShapeMismatch {
                what: format!("ToRGB tap {l} channels"),
                expected: sib_taps[l].shape()[0].to_string(),
                found: out_taps[l].shape()[0].to_string(),
            });
        }
        let a = tap_covariance(&out_taps[l]);
        let b = tap_covariance(&sib_taps[l]);
        total += a
            .iter()
            .zip(&b)
            .map(|(x, y)| huber(x - y, HUBER_DELTA))
            .sum::<f64>();
    }
    Ok(total)
}

/// Graph form of [`color_transfer_loss`]; the reference is given as the
/// sibling's per-layer covariances.
pub fn color_transfer_var(
    g: &mut Graph<'_>,
    out_taps: &[Var],
    reference: &[Vec<f64>],
    active: &[usize],
) -> Result<Var> {
    if out_taps.len() != reference.len() {
        return Err(Error::LayerCount {
            expected: reference.len(),
            found: out_taps.len(),
        });
    }
    check_active(active, out_taps.len())?;
    let terms: Vec<Var> = active
        .iter()
        .map(|&l| g.covariance_huber(out_taps[l], &reference[l], HUBER_DELTA))
        .collect();
    Ok(g.add_all(&terms))
}

/// Contextual loss averaged over layers; `sib` is the target.
pub fn contextual_loss(out: &FeatureSet, sib: &FeatureSet) -> Result<f64> {
    if out.signature() != sib.signature() {
        return Err(Error::BackboneMismatch {
            left: out.signature(),
            right: sib.signature(),
        });
    }
    if out.layers.is_empty() {
        return Err(Error::EmptyInput("feature set"));
    }
    let total: f64 = out
        .layers
        .iter()
        .zip(&sib.layers)
        .map(|((_, x), (_, y))| contextual_forward(x, y, CONTEXTUAL_BANDWIDTH))
        .sum();
    Ok(total / out.layers.len() as f64)
}

/// Graph form of [`contextual_loss`] against borrowed sibling features.
pub fn contextual_var<'a>(g: &mut Graph<'a>, out: &[Var], sib: &'a FeatureSet) -> Result<Var> {
    if out.len() != sib.layers.len() || out.is_empty() {
        return Err(Error::LayerCount {
            expected: sib.layers.len(),
            found: out.len(),
        });
    }
    let terms: Vec<Var> = out
        .iter()
        .zip(&sib.layers)
        .map(|(&x, (_, t))| g.contextual(x, Cow::Borrowed(t), CONTEXTUAL_BANDWIDTH))
        .collect();
    let s = g.add_all(&terms);
    Ok(g.affine(s, 1.0 / terms.len() as f64, 0.0))
}

#[cfg(test)]
mod tests;
