//! Sibling encoder: a residual convolutional regressor from a degraded
//! grayscale portrait to a single style code, with its synthetic training data.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::generator::{Generator, LatentCode};
use crate::graph::{Graph, Var};
use crate::imagecore::{resample, to_grayscale, FilmModel, Image};
use crate::optim::{Betas, Optimizer};
use crate::tensor::NamedTensors;
use crate::{rng, Error, Result, Tensor};

pub const ARCHITECTURE: &str = "resnet18-style-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrainConfig {
    pub sample_count: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub hue: (f64, f64),
    /// Side length of the square encoder input.
    pub input_resolution: usize,
    /// Seed for the per-epoch sample order.
    pub shuffle_seed: u64,
}

impl EncoderTrainConfig {
    pub fn for_film(film: FilmModel) -> Self {
        Self {
            sample_count: 16128,
            batch_size: 4,
            learning_rate: 5e-4,
            epochs: match film {
                FilmModel::Panchromatic => 70,
                _ => 100,
            },
            brightness: (0.8, 1.8),
            contrast: (0.8, 1.2),
            hue: (-0.03, 0.03),
            input_resolution: 256,
            shuffle_seed: 0,
        }
    }

    /// Desk-scale settings for the toy generator.
    pub fn toy(film: FilmModel) -> Self {
        Self {
            sample_count: 512,
            epochs: 5,
            input_resolution: 64,
            ..Self::for_film(film)
        }
    }

    /// All augmentation ranges collapsed to the identity.
    pub fn without_augmentation(self) -> Self {
        Self {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            hue: (0.0, 0.0),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_count", self.sample_count as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("epochs", self.epochs as f64),
            ("input_resolution", self.input_resolution as f64),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "must be positive",
                });
            }
        }
        let ranges = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("hue", self.hue),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    value: lo,
                    reason: "range must satisfy lo <= hi",
                });
            }
        }
        if self.brightness.0 < 0.0 || self.contrast.0 < 0.0 {
            return Err(Error::InvalidParameter {
                name: "brightness/contrast",
                value: self.brightness.0.min(self.contrast.0),
                reason: "factors must be non-negative",
            });
        }
        if self.hue.0 < -0.5 || self.hue.1 > 0.5 {
            return Err(Error::InvalidParameter {
                name: "hue",
                value: self.hue.0,
                reason: "must lie in [-0.5, 0.5]",
            });
        }
        Ok(())
    }
}

/// Photometric jitter applied to an RGB render, in order brightness, contrast, hue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        brightness: 1.0,
        contrast: 1.0,
        hue: 0.0,
    };

    pub fn sample(cfg: &EncoderTrainConfig, r: &mut rng::Rng) -> Self {
        Augmentation {
            brightness: rng::uniform(r, cfg.brightness.0, cfg.brightness.1),
            contrast: rng::uniform(r, cfg.contrast.0, cfg.contrast.1),
            hue: rng::uniform(r, cfg.hue.0, cfg.hue.1),
        }
    }

    /// Applies the jitter; results are clamped to `[0, 1]`. Identity factors are skipped.
    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clamped();
        if self.brightness != 1.0 {
            adjust_brightness(&mut out, self.brightness);
        }
        if self.contrast != 1.0 {
            adjust_contrast(&mut out, self.contrast);
        }
        if self.hue != 0.0 && out.channels() == 3 {
            adjust_hue(&mut out, self.hue);
        }
        out
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
}

/// Blends towards the mean luma of the image.
pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let mean = if img.channels() == 3 {
        to_grayscale(img, FilmModel::Panchromatic)
            .expect("rgb input")
            .tensor()
            .mean()
    } else {
        img.tensor().mean()
    };
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0));
}

/// Rotates hue by `shift` turns in HSV space.
pub fn adjust_hue(img: &mut Image, shift: f64) {
    let n = img.width() * img.height();
    let d = img.data_mut();
    for p in 0..n {
        let (h, s, v) = rgb_to_hsv(d[p], d[n + p], d[2 * n + p]);
        let h = (h + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        d[p] = r;
        d[n + p] = g;
        d[2 * n + p] = b;
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        (g - b) / delta
    } else if max == g {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// Single-channel encoder input.
    pub input: Image,
    pub target: LatentCode,
    pub augmentation: Augmentation,
}

/// Indexed access to training pairs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn pair(&self, index: usize) -> Result<TrainingPair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [TrainingPair] {
    fn len(&self) -> usize {
        <[TrainingPair]>::len(self)
    }

    fn pair(&self, index: usize) -> Result<TrainingPair> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<TrainingPair> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn pair(&self, index: usize) -> Result<TrainingPair> {
        Ok(self[index].clone())
    }
}

/// Lazily synthesized, reproducible training pairs. Pair `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct TrainingSet<'g> {
    generator: &'g Generator,
    film: FilmModel,
    cfg: EncoderTrainConfig,
    seed: u64,
}

pub fn generate_training_set<'g>(
    generator: &'g Generator,
    film: FilmModel,
    cfg: &EncoderTrainConfig,
    seed: u64,
) -> TrainingSet<'g> {
    TrainingSet {
        generator,
        film,
        cfg: cfg.clone(),
        seed,
    }
}

impl TrainingSet<'_> {
    pub fn film(&self) -> FilmModel {
        self.film
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<TrainingPair>> + '_ {
        (0..self.cfg.sample_count).map(move |i| self.pair(i))
    }

    /// Materializes every pair.
    pub fn collect(&self) -> Result<Vec<TrainingPair>> {
        self.iter().collect()
    }
}

impl PairSource for TrainingSet<'_> {
    fn len(&self) -> usize {
        self.cfg.sample_count
    }

    fn pair(&self, index: usize) -> Result<TrainingPair> {
        let mut r = rng::derived(self.seed, index as u64);
        let z = rng::normal_vec(&mut r, self.generator.code_width());
        let target = LatentCode::new(self.generator.map_noise(&z))?;
        let augmentation = Augmentation::sample(&self.cfg, &mut r);
        let render = self
            .generator
            .synthesize(&self.generator.broadcast(&target), 0.0, 0)?
            .image;
        let input = encoder_input(
            &augmentation.apply(&render),
            self.film,
            self.cfg.input_resolution,
        )?;
        Ok(TrainingPair {
            input,
            target,
            augmentation,
        })
    }
}

/// Film-model grayscale conversion followed by resampling to the encoder size.
pub fn encoder_input(img: &Image, film: FilmModel, resolution: usize) -> Result<Image> {
    let gray = if img.channels() == 3 {
        to_grayscale(img, film)?
    } else {
        img.clone()
    };
    if gray.width() == resolution && gray.height() == resolution {
        Ok(gray)
    } else {
        resample(&gray, resolution, resolution)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    /// Channel widths of the four residual stages.
    pub widths: [usize; 4],
    pub code_width: usize,
    pub film: FilmModel,
}

impl EncoderConfig {
    pub fn standard(film: FilmModel) -> Self {
        Self {
            input_resolution: 256,
            widths: [64, 128, 256, 512],
            code_width: 512,
            film,
        }
    }

    pub fn toy(film: FilmModel) -> Self {
        Self {
            input_resolution: 64,
            widths: [8, 16, 32, 64],
            code_width: 512,
            film,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 32 || !self.input_resolution.is_multiple_of(32) {
            return Err(Error::InvalidParameter {
                name: "input_resolution",
                value: self.input_resolution as f64,
                reason: "must be a positive multiple of 32",
            });
        }
        if self.widths.contains(&0) || self.code_width == 0 {
            return Err(Error::InvalidParameter {
                name: "widths",
                value: 0.0,
                reason: "must be positive",
            });
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("architecture".into(), ARCHITECTURE.into());
        m.insert("film".into(), self.film.tag().into());
        m.insert("input_resolution".into(), self.input_resolution.to_string());
        m.insert(
            "widths".into(),
            self.widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("code_width".into(), self.code_width.to_string());
        m
    }

    pub fn from_metadata(m: &BTreeMap<String, String>) -> Result<Self> {
        let bad = |p: String| Error::Checkpoint {
            architecture: ARCHITECTURE.into(),
            problems: vec![p],
        };
        match m.get("architecture") {
            Some(a) if a == ARCHITECTURE => {}
            other => return Err(bad(format!("architecture tag {other:?}"))),
        }
        let field = |k: &str| {
            m.get(k)
                .ok_or_else(|| bad(format!("missing metadata field {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| bad(format!("bad metadata field {k}")))
        };
        let film = field("film")?
            .parse()
            .map_err(|_| bad("bad film tag".into()))?;
        let widths: Vec<usize> = field("widths")?
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<core::result::Result<_, _>>()
            .map_err(|_| bad("bad widths".into()))?;
        let widths: [usize; 4] = widths
            .try_into()
            .map_err(|_| bad("expected four stage widths".into()))?;
        let cfg = Self {
            input_resolution: num("input_resolution")?,
            widths,
            code_width: num("code_width")?,
            film,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        conv("stem", self.widths[0], 1, 7);
        let mut cin = self.widths[0];
        for (s, &w) in self.widths.iter().enumerate() {
            for b in 0..2 {
                let inner = if b == 0 { cin } else { w };
                conv(&format!("s{s}.b{b}.conv1"), w, inner, 3);
                conv(&format!("s{s}.b{b}.conv2"), w, w, 3);
                if b == 0 && (s > 0 || cin != w) {
                    conv(&format!("s{s}.b{b}.skip"), w, inner, 1);
                }
            }
            cin = w;
        }
        specs.push(("fc.weight".into(), vec![self.code_width, cin]));
        specs.push(("fc.bias".into(), vec![self.code_width]));
        specs
    }
}

/// Residual encoder without normalization layers. The second convolution of
/// each block starts small so that the untrained network stays well scaled.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

const RESIDUAL_INIT_SCALE: f64 = 0.1;

impl Encoder {
    /// Random initialization; the output bias starts at `mean_code`.
    pub fn random(config: EncoderConfig, mean_code: &LatentCode, seed: u64) -> Result<Self> {
        config.validate()?;
        if mean_code.width() != config.code_width {
            return Err(Error::ShapeMismatch {
                what: "mean code width".into(),
                expected: config.code_width.to_string(),
                found: mean_code.width().to_string(),
            });
        }
        let mut r = rng::seeded(seed);
        let specs = config.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let t = if name == "fc.bias" {
                mean_code.to_tensor()
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.contains("conv2") {
                    std *= RESIDUAL_INIT_SCALE;
                }
                if name == "fc.weight" {
                    std = (1.0 / fan_in as f64).sqrt();
                }
                Tensor::new(
                    &shape,
                    rng::normal_vec(&mut r, n)
                        .into_iter()
                        .map(|v| v * std)
                        .collect(),
                )
            };
            names.push(name);
            params.push(t.round_to_f32());
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn from_tensors(config: EncoderConfig, t: &NamedTensors) -> Result<Self> {
        config.validate()?;
        let mut problems = Vec::new();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_specs() {
            match t.get(&name) {
                None => problems.push(format!("missing tensor {name}")),
                Some(v) if v.shape() != shape.as_slice() => problems.push(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    shape
                )),
                Some(v) => params.push(v.clone()),
            }
            names.push(name);
        }
        for k in t.keys() {
            if !names.contains(k) {
                problems.push(format!("unexpected tensor {k}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint {
                architecture: ARCHITECTURE.into(),
                problems,
            });
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn to_tensors(&self) -> NamedTensors {
        self.names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect()
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn film(&self) -> FilmModel {
        self.config.film
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g`, in checkpoint order.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                if trainable {
                    g.param_ref(t)
                } else {
                    g.constant_ref(t)
                }
            })
            .collect()
    }

    /// Records the forward pass of a `[1, R, R]` input and returns the `[code_width]` output.
    pub fn forward_var(&self, g: &mut Graph<'_>, p: &[Var], input: Var) -> Var {
        let mut cursor = 0;
        let mut next = || {
            let pair = (p[cursor], p[cursor + 1]);
            cursor += 2;
            pair
        };
        let x = g.affine(input, 2.0, -1.0);
        let (w, b) = next();
        let x = g.conv2d(x, w, Some(b), 2, 3);
        let x = g.relu(x);
        let mut x = g.max_pool2(x);
        let mut cin = self.config.widths[0];
        for (s, &width) in self.config.widths.iter().enumerate() {
            for blk in 0..2 {
                let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                let (w1, b1) = next();
                let (w2, b2) = next();
                let y = g.conv2d(x, w1, Some(b1), stride, 1);
                let y = g.relu(y);
                let y = g.conv2d(y, w2, Some(b2), 1, 1);
                let skip = if blk == 0 && (s > 0 || cin != width) {
                    let (ws, bs) = next();
                    g.conv2d(x, ws, Some(bs), stride, 0)
                } else {
                    x
                };
                let sum = g.add(y, skip);
                x = g.relu(sum);
            }
            cin = width;
        }
        let pooled = g.global_avg_pool(x);
        let (w, b) = next();
        g.linear(w, pooled, Some(b))
    }

    /// Predicts a code for any grayscale or RGB image.
    pub fn predict(&self, img: &Image) -> Result<LatentCode> {
        let input = encoder_input(img, self.config.film, self.config.input_resolution)?;
        let mut g = Graph::new();
        let p = self.register(&mut g, false);
        let x = g.constant(input.into_tensor());
        let out = self.forward_var(&mut g, &p, x);
        LatentCode::new(g.value(out).data().to_vec())
    }
}

/// Predicts the sibling code and renders it at full resolution.
pub fn predict_sibling(
    encoder: &Encoder,
    generator: &Generator,
    input: &Image,
) -> Result<(LatentCode, Image)> {
    let code = encoder.predict(input)?;
    if code.width() != generator.code_width() {
        return Err(Error::ShapeMismatch {
            what: "encoder output width".into(),
            expected: generator.code_width().to_string(),
            found: code.width().to_string(),
        });
    }
    let image = generator
        .synthesize(&generator.broadcast(&code), 0.0, 0)?
        .image;
    Ok((code, image))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step index, starting at 0.
    pub step: usize,
    pub l1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l1: f64,
    pub steps: usize,
}

/// Receives progress during training; the encoder passed to `on_epoch` is the end-of-epoch checkpoint.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _encoder: &Encoder) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every record in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainObserver for TrainLog {
    fn on_step(&mut self, record: &StepRecord) {
        self.steps.push(*record);
    }

    fn on_epoch(&mut self, record: &EpochRecord, _encoder: &Encoder) -> Result<()> {
        self.epochs.push(*record);
        Ok(())
    }
}

/// Gradients of the batch-mean L1 loss.
pub fn batch_gradients(encoder: &Encoder, batch: &[TrainingPair]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let mut g = Graph::new();
    let params = encoder.register(&mut g, true);
    let mut terms = Vec::with_capacity(batch.len());
    for pair in batch {
        let expected = [
            1,
            encoder.config.input_resolution,
            encoder.config.input_resolution,
        ];
        if pair.input.tensor().shape() != expected {
            return Err(Error::ShapeMismatch {
                what: "encoder input".into(),
                expected: format!("{expected:?}"),
                found: format!("{:?}", pair.input.tensor().shape()),
            });
        }
        let x = g.constant_ref(pair.input.tensor());
        let out = encoder.forward_var(&mut g, &params, x);
        let target = g.constant(pair.target.to_tensor());
        terms.push(g.mae(out, target));
    }
    let total = g.add_all(&terms);
    let loss = g.affine(total, 1.0 / batch.len() as f64, 0.0);
    let value = g.scalar(loss);
    let mut grads = g.backward(loss);
    let grads = params
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Trains with Adam on the batch-mean L1 between predicted and target codes.
pub fn train_encoder(
    source: &dyn PairSource,
    mut encoder: Encoder,
    cfg: &EncoderTrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Encoder> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    let mut opt = Optimizer::adam(Betas::default());
    let mut step = 0;
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..cfg.epochs {
        rng::shuffle(
            &mut rng::derived(cfg.shuffle_seed, epoch as u64),
            &mut order,
        );
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| source.pair(i))
                .collect::<Result<Vec<_>>>()?;
            let (l1, grads) = batch_gradients(&encoder, &batch)?;
            if !l1.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: l1,
                });
            }
            opt.begin_step();
            for (slot, (p, gr)) in encoder.params.iter_mut().zip(&grads).enumerate() {
                opt.update(slot, cfg.learning_rate, p.data_mut(), gr.data());
            }
            observer.on_step(&StepRecord { epoch, step, l1 });
            sum += l1;
            steps += 1;
            step += 1;
        }
        observer.on_epoch(
            &EpochRecord {
                epoch,
                mean_l1: sum / steps as f64,
                steps,
            },
            &encoder,
        )?;
    }
    Ok(encoder)
}

/// Mean L1 of the encoder's predictions over `pairs`.
pub fn evaluate_l1(encoder: &Encoder, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation pairs"));
    }
    let mut total = 0.0;
    for p in pairs {
        total += encoder.predict(&p.input)?.mean_abs_diff(&p.target);
    }
    Ok(total / pairs.len() as f64)
}
