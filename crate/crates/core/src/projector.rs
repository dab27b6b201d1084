//! Two-stage latent optimization of an antique portrait into the generator's
//! extended style space.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::encoder::{predict_sibling, Encoder};
use crate::features::FeatureSet;
use crate::generator::{ExtendedLatentCode, Generator, LatentCode, LayerPartition};
use crate::graph::{Graph, Var};
use crate::imagecore::{degrade_var, resample, resample_var, CrfParams, CrfVars, FilmModel, Image};
use crate::losses::{
    color_transfer_var, contextual_var, tap_covariance, EyeRegions, LossNetworks, LossWeights,
    ReconstructionTarget,
};
use crate::optim::{Betas, Optimizer};
use crate::{rng, Error, Result, Tensor};

/// Latent perturbation schedule: `initial * max(0, 1 - t / (fraction * total))^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRamp {
    pub initial: f64,
    pub ramp_fraction: f64,
}

impl Default for NoiseRamp {
    fn default() -> Self {
        NoiseRamp {
            initial: 0.05,
            ramp_fraction: 0.75,
        }
    }
}

impl NoiseRamp {
    pub const OFF: NoiseRamp = NoiseRamp {
        initial: 0.0,
        ramp_fraction: 0.75,
    };

    pub fn scale(&self, t: usize, total: usize) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let r = (1.0 - t as f64 / (self.ramp_fraction * total as f64)).max(0.0);
        self.initial * r * r
    }
}

pub fn noise_ramp(t: usize, total: usize) -> f64 {
    NoiseRamp::default().scale(t, total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub cutoff_resolution: usize,
    pub iterations: usize,
    pub style_lr: f64,
    pub crf_lr: f64,
    pub noise: NoiseRamp,
}

impl StageConfig {
    pub fn coarse() -> Self {
        StageConfig {
            cutoff_resolution: 32,
            iterations: 250,
            style_lr: 0.1,
            crf_lr: 0.01,
            noise: NoiseRamp::default(),
        }
    }

    pub fn fine() -> Self {
        StageConfig {
            cutoff_resolution: 64,
            iterations: 750,
            ..Self::coarse()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorConfig {
    pub film: FilmModel,
    /// Blur of the degradation model; fixed for the run.
    pub sigma: f64,
    pub eyes: EyeRegions,
    pub weights: LossWeights,
    pub stages: Vec<StageConfig>,
    /// Side of the square images fed to the perceptual networks.
    pub perceptual_size: usize,
    /// Side of the square image fed to the contextual network.
    pub context_size: usize,
    /// Seed of the latent perturbations.
    pub seed: u64,
    /// Length of the window used for stagnation warnings.
    pub stall_window: usize,
}

impl ProjectorConfig {
    pub fn new(film: FilmModel, sigma: f64, eyes: EyeRegions) -> Self {
        Self {
            film,
            sigma,
            eyes,
            weights: LossWeights::default(),
            stages: alloc::vec![StageConfig::coarse(), StageConfig::fine()],
            perceptual_size: 256,
            context_size: 64,
            seed: 0,
            stall_window: 100,
        }
    }

    /// Overrides the iteration counts of the two stages.
    pub fn with_iterations(mut self, stage1: usize, stage2: usize) -> Self {
        self.stages[0].iterations = stage1;
        self.stages[1].iterations = stage2;
        self
    }

    pub fn validate(&self, generator: &Generator) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=16.0).contains(&self.sigma) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                value: self.sigma,
                reason: "must lie in [0, 16]",
            });
        }
        if self.perceptual_size == 0 || self.context_size == 0 {
            return Err(Error::InvalidResolution {
                width: 0,
                height: 0,
            });
        }
        for s in &self.stages {
            generator.partition(s.cutoff_resolution)?;
            for (name, v) in [("style_lr", s.style_lr), ("crf_lr", s.crf_lr)] {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter {
                        name,
                        value: v,
                        reason: "must be finite and non-negative",
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    pub vgg: f64,
    pub face: f64,
    pub eye: f64,
    pub color: f64,
    pub ctx: f64,
    /// Weighted objective.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub stage: usize,
    pub iteration: usize,
    pub terms: TermValues,
    pub noise_scale: f64,
    pub crf: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StallWarning {
    pub stage: usize,
    pub from_iteration: usize,
    pub to_iteration: usize,
    pub start_total: f64,
    pub end_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSummary {
    pub initial_objective: f64,
    pub best_objective: f64,
    /// Number of updates applied before the best state (0 = initial state).
    pub best_after: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionState {
    pub code: ExtendedLatentCode,
    pub crf: CrfParams,
    /// Updates applied over all stages.
    pub iteration: usize,
    pub trace: Vec<IterationRecord>,
    pub warnings: Vec<StallWarning>,
    pub stages: Vec<StageSummary>,
}

impl ProjectionState {
    pub fn new(code: ExtendedLatentCode) -> Self {
        Self {
            code,
            crf: CrfParams::IDENTITY,
            iteration: 0,
            trace: Vec::new(),
            warnings: Vec::new(),
            stages: Vec::new(),
        }
    }
}

/// Colour and detail reference for a stage.
#[derive(Clone, Debug)]
pub struct Reference {
    /// Covariance of each ToRGB tap.
    pub tap_covariances: Vec<Vec<f64>>,
    pub context: FeatureSet,
}

impl Reference {
    pub fn from_render(
        generator: &Generator,
        nets: &LossNetworks,
        code: &ExtendedLatentCode,
        size: usize,
    ) -> Result<Self> {
        let out = generator.synthesize(code, 0.0, 0)?;
        let img = resample(&out.image, size, size)?;
        Ok(Self {
            tap_covariances: out.torgb.iter().map(tap_covariance).collect(),
            context: nets.context.extract(&img, &nets.context_layers())?,
        })
    }
}

/// Everything fixed during one stage.
#[derive(Debug)]
pub struct Objective<'a> {
    pub generator: &'a Generator,
    pub nets: &'a LossNetworks,
    pub recon: ReconstructionTarget<'a>,
    pub reference: Reference,
    pub partition: LayerPartition,
    /// ToRGB taps whose resolution lies within the stage cutoff.
    pub active_taps: Vec<usize>,
    pub film: FilmModel,
    pub sigma: f64,
    pub weights: LossWeights,
    pub context_size: usize,
}

/// Objective value and gradients at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub terms: TermValues,
    /// One entry per layer; frozen layers carry `None`.
    pub code_grads: Vec<Option<Tensor>>,
    pub crf_grad: [f64; 3],
}

impl<'a> Objective<'a> {
    pub fn new(
        generator: &'a Generator,
        nets: &'a LossNetworks,
        input: &Image,
        reference: Reference,
        cfg: &ProjectorConfig,
        cutoff: usize,
    ) -> Result<Self> {
        let recon =
            ReconstructionTarget::new(nets, input, cfg.eyes, cfg.weights, cfg.perceptual_size)?;
        let active_taps = generator
            .tap_resolutions()
            .iter()
            .enumerate()
            .filter(|(_, &r)| r <= cutoff)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            generator,
            nets,
            recon,
            reference,
            partition: generator.partition(cutoff)?,
            active_taps,
            film: cfg.film,
            sigma: cfg.sigma,
            weights: cfg.weights,
            context_size: cfg.context_size,
        })
    }

    /// Objective at `code + perturbation` (perturbation on optimizable layers only), with gradients
    /// with respect to `code` and the CRF.
    pub fn evaluate(
        &self,
        code: &ExtendedLatentCode,
        crf: &CrfParams,
        perturbation: Option<&[Tensor]>,
        with_grads: bool,
    ) -> Result<Evaluation> {
        self.generator.check_code(code)?;
        let mut g = Graph::new();
        let leaves: Vec<Option<Var>> = code
            .layers()
            .iter()
            .enumerate()
            .map(|(k, c)| {
                self.partition
                    .is_optimizable(k)
                    .then(|| g.param(c.to_tensor()))
            })
            .collect();
        let inputs: Vec<Var> = leaves
            .iter()
            .zip(code.layers())
            .enumerate()
            .map(|(k, (leaf, c))| match leaf {
                Some(v) => match perturbation {
                    Some(p) => {
                        let n = g.constant_ref(&p[k]);
                        g.add(*v, n)
                    }
                    None => *v,
                },
                None => g.constant(c.to_tensor()),
            })
            .collect();
        let crf_vars = CrfVars::new(&mut g, crf, true);
        let synth = self.generator.synthesize_var(&mut g, &inputs)?;
        let degraded = degrade_var(&mut g, synth.image, self.film, &crf_vars, self.sigma)?;
        let recon = self.recon.terms_var(&mut g, degraded)?;
        let w = self.weights;
        let color = if w.color > 0.0 {
            color_transfer_var(
                &mut g,
                &synth.torgb,
                &self.reference.tap_covariances,
                &self.active_taps,
            )?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let ctx = if w.ctx > 0.0 {
            let img = resample_var(&mut g, synth.image, self.context_size, self.context_size);
            let feats = self
                .nets
                .context
                .extract_var(&mut g, img, &self.nets.context_layers())?;
            contextual_var(&mut g, &feats, &self.reference.context)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let wc = g.affine(color, w.color, 0.0);
        let wx = g.affine(ctx, w.ctx, 0.0);
        let total = g.add_all(&[recon.total, wc, wx]);
        let terms = TermValues {
            vgg: g.scalar(recon.vgg),
            face: g.scalar(recon.face),
            eye: g.scalar(recon.eye),
            color: g.scalar(color),
            ctx: g.scalar(ctx),
            total: g.scalar(total),
        };
        if !with_grads {
            return Ok(Evaluation {
                terms,
                code_grads: Vec::new(),
                crf_grad: [0.0; 3],
            });
        }
        let mut grads = g.backward(total);
        let code_grads = leaves
            .iter()
            .map(|leaf| {
                leaf.map(|v| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
                })
            })
            .collect();
        let mut scalar = |v: Var| grads.take(v).map(|t| t.data()[0]).unwrap_or(0.0);
        let crf_grad = [
            scalar(crf_vars.bias),
            scalar(crf_vars.gain),
            scalar(crf_vars.gamma),
        ];
        Ok(Evaluation {
            terms,
            code_grads,
            crf_grad,
        })
    }
}

fn breakdown(t: &TermValues) -> String {
    format!(
        "total={} vgg={} face={} eye={} color={} ctx={}",
        t.total, t.vgg, t.face, t.eye, t.color, t.ctx
    )
}

fn check_finite(iteration: usize, e: &Evaluation) -> Result<()> {
    let t = &e.terms;
    let finite = [t.total, t.vgg, t.face, t.eye, t.color, t.ctx]
        .iter()
        .all(|v| v.is_finite())
        && e.code_grads.iter().flatten().all(Tensor::all_finite)
        && e.crf_grad.iter().all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            detail: breakdown(t),
        })
    }
}

const CRF_FLOOR: f64 = 1e-4;

/// Runs one stage of rectified-Adam updates on the optimizable layers and the CRF, returning the
/// best state seen. Only noise-free evaluations compete for the best state.
pub fn optimize_stage(
    mut state: ProjectionState,
    objective: &Objective<'_>,
    stage: &StageConfig,
    stage_index: usize,
    cfg: &ProjectorConfig,
) -> Result<ProjectionState> {
    let num_layers = state.code.num_layers();
    let mut opt = Optimizer::radam(Betas::default());
    let mut noise_rng = rng::derived(cfg.seed, stage_index as u64);
    let initial = objective.evaluate(&state.code, &state.crf, None, false)?;
    check_finite(state.iteration, &initial)?;
    let mut best = (initial.terms.total, state.code.clone(), state.crf, 0usize);
    let mut window_start = initial.terms.total;
    let mut code = state.code.clone();
    let mut crf = state.crf;

    for t in 0..stage.iterations {
        let scale = stage.noise.scale(t, stage.iterations);
        let perturbation: Option<Vec<Tensor>> = (scale > 0.0).then(|| {
            (0..num_layers)
                .map(|k| {
                    let w = code.code_width();
                    if objective.partition.is_optimizable(k) {
                        let n = rng::normal_vec(&mut noise_rng, w);
                        Tensor::new(&[w], n.into_iter().map(|v| v * scale).collect())
                    } else {
                        Tensor::zeros(&[w])
                    }
                })
                .collect()
        });
        let eval = objective.evaluate(&code, &crf, perturbation.as_deref(), true)?;
        check_finite(state.iteration + t, &eval)?;
        state.trace.push(IterationRecord {
            stage: stage_index,
            iteration: state.iteration + t,
            terms: eval.terms,
            noise_scale: scale,
            crf: crf.as_array(),
        });
        if scale == 0.0 && eval.terms.total < best.0 {
            best = (eval.terms.total, code.clone(), crf, t);
        }
        if cfg.stall_window > 0 && (t + 1) % cfg.stall_window == 0 {
            if eval.terms.total >= window_start {
                state.warnings.push(StallWarning {
                    stage: stage_index,
                    from_iteration: state.iteration + t + 1 - cfg.stall_window,
                    to_iteration: state.iteration + t,
                    start_total: window_start,
                    end_total: eval.terms.total,
                });
            }
            window_start = eval.terms.total;
        }

        opt.begin_step();
        for (k, grad) in eval.code_grads.iter().enumerate() {
            if let Some(grad) = grad {
                let mut values = code.layer(k).values().to_vec();
                opt.update(k, stage.style_lr, &mut values, grad.data());
                code.set_layer(
                    k,
                    LatentCode::new(values).map_err(|_| Error::NonFinite {
                        iteration: state.iteration + t,
                        detail: format!(
                            "latent layer {k} after update; {}",
                            breakdown(&eval.terms)
                        ),
                    })?,
                );
            }
        }
        let mut p = crf.as_array();
        for (i, (v, gr)) in p.iter_mut().zip(eval.crf_grad).enumerate() {
            let mut one = [*v];
            opt.update(num_layers + i, stage.crf_lr, &mut one, &[gr]);
            *v = one[0];
        }
        crf = CrfParams {
            bias: p[0],
            gain: p[1].max(CRF_FLOOR),
            gamma: p[2].max(CRF_FLOOR),
        };
    }

    if stage.iterations > 0 {
        let last = objective.evaluate(&code, &crf, None, false)?;
        check_finite(state.iteration + stage.iterations, &last)?;
        if last.terms.total < best.0 {
            best = (last.terms.total, code, crf, stage.iterations);
        }
    }
    state.stages.push(StageSummary {
        initial_objective: initial.terms.total,
        best_objective: best.0,
        best_after: best.3,
    });
    state.code = best.1;
    state.crf = best.2;
    state.iteration += stage.iterations;
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub image: Image,
    pub torgb: Vec<Tensor>,
    pub sibling_code: LatentCode,
    pub sibling_image: Image,
    pub sibling_torgb: Vec<Tensor>,
    pub state: ProjectionState,
}

/// Projects starting from a known sibling code. The first stage's colour/detail reference is the
/// sibling render; every later stage uses the render of the previous stage's result, while the
/// frozen fine layers keep the sibling's codes.
pub fn project_with_sibling(
    input: &Image,
    generator: &Generator,
    nets: &LossNetworks,
    sibling_code: &LatentCode,
    cfg: &ProjectorConfig,
) -> Result<ProjectionResult> {
    cfg.validate(generator)?;
    let sibling = generator.broadcast(sibling_code);
    generator.check_code(&sibling)?;
    let sib_out = generator.synthesize(&sibling, 0.0, 0)?;
    let mut state = ProjectionState::new(sibling.clone());
    let mut reference_code = sibling.clone();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let reference = Reference::from_render(generator, nets, &reference_code, cfg.context_size)?;
        let objective = Objective::new(
            generator,
            nets,
            input,
            reference,
            cfg,
            stage.cutoff_resolution,
        )?;
        state = optimize_stage(state, &objective, stage, i, cfg)?;
        reference_code = state.code.clone();
    }
    let out = generator.synthesize(&state.code, 0.0, 0)?;
    Ok(ProjectionResult {
        image: out.image,
        torgb: out.torgb,
        sibling_code: sibling_code.clone(),
        sibling_image: sib_out.image,
        sibling_torgb: sib_out.torgb,
        state,
    })
}

/// Predicts the sibling with `encoder` and projects from it.
pub fn project(
    input: &Image,
    generator: &Generator,
    encoder: &Encoder,
    nets: &LossNetworks,
    cfg: &ProjectorConfig,
) -> Result<ProjectionResult> {
    if encoder.film() != cfg.film {
        return Err(Error::InvalidParameter {
            name: "encoder film",
            value: 0.0,
            reason: "encoder checkpoint does not match the configured film model",
        });
    }
    let (code, _) = predict_sibling(encoder, generator, input)?;
    project_with_sibling(input, generator, nets, &code, cfg)
}

/// Per-layer magnitude (Frobenius norm) of each ToRGB tap's channel covariance.
pub fn covariance_magnitudes(taps: &[Tensor]) -> Vec<f64> {
    taps.iter()
        .map(|t| tap_covariance(t).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
