//! End-to-end projection runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rephoto_core::generator::ExtendedLatentCode;
use rephoto_core::imagecore::{to_grayscale, CrfParams, FilmModel, Image};
use rephoto_core::projector::{project, ProjectionResult, ProjectorConfig};

use crate::assets::{
    toy_eyes, AssetSource, Assets, FULL_ITERATIONS, FULL_PERCEPTUAL_SIZE, TOY_ITERATIONS,
    TOY_PERCEPTUAL_SIZE,
};
use crate::checkpoint::file_sha256;
use crate::codes::CodeFile;
use crate::diagnostic::{dump_torgb_diagnostic, TorgbState};
use crate::eyes::{acquire_eye_regions, EyeSpec, LandmarkProvider};
use crate::film::parse_film;
use crate::io::{read_image, write_png, BitDepth};
use crate::manifest::{ProjectorSettings, RunManifest, RUN_MANIFEST_VERSION};
use crate::trace::{write_jsonl, write_trace, WarningLine};
use crate::RunError;

pub const RESULT_IMAGE: &str = "result.png";
pub const SIBLING_IMAGE: &str = "sibling.png";
pub const RESULT_CODES: &str = "result_codes.bin";
pub const SIBLING_CODES: &str = "sibling_codes.bin";
pub const TRACE: &str = "trace.jsonl";
pub const WARNINGS: &str = "warnings.jsonl";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const DIAGNOSTIC_DIR: &str = "torgb";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub film: FilmModel,
    pub sigma: f64,
    /// `None` is only allowed with the toy assets, which have a fixed layout.
    pub eyes: Option<EyeSpec>,
    pub assets: AssetSource,
    pub stage1_iters: Option<usize>,
    pub stage2_iters: Option<usize>,
    pub seed: u64,
    pub diagnostic: bool,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, film: FilmModel) -> Self {
        Self {
            input: input.into(),
            output_dir: output_dir.into(),
            film,
            sigma: 0.0,
            eyes: None,
            assets: AssetSource::Toy,
            stage1_iters: None,
            stage2_iters: None,
            seed: 0,
            diagnostic: false,
        }
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
    pub result: ProjectionResult,
}

/// Converts colour scans to a single channel with panchromatic weights.
pub fn as_grayscale(img: Image) -> Result<Image, RunError> {
    match img.channels() {
        1 => Ok(img),
        3 => Ok(to_grayscale(&img, FilmModel::Panchromatic)?),
        c => Err(RunError::Config(format!("input has {c} channels"))),
    }
}

fn projector_config(
    cfg: &RunConfig,
    assets: &Assets,
    input: &Image,
    provider: &dyn LandmarkProvider,
) -> Result<ProjectorConfig, RunError> {
    let eyes = match (&cfg.eyes, assets.toy) {
        (Some(spec), _) => {
            acquire_eye_regions(input, spec, provider).map_err(RunError::InvalidEyes)?
        }
        (None, true) => toy_eyes(input.width(), input.height()),
        (None, false) => {
            return Err(RunError::InvalidEyes(
                "eye boxes are required (--eyes)".into(),
            ))
        }
    };
    let (iters, size) = if assets.toy {
        (TOY_ITERATIONS, TOY_PERCEPTUAL_SIZE)
    } else {
        (FULL_ITERATIONS, FULL_PERCEPTUAL_SIZE)
    };
    let mut p = ProjectorConfig::new(cfg.film, cfg.sigma, eyes).with_iterations(
        cfg.stage1_iters.unwrap_or(iters.0),
        cfg.stage2_iters.unwrap_or(iters.1),
    );
    p.perceptual_size = size;
    if assets.toy {
        p.context_size = TOY_PERCEPTUAL_SIZE;
    }
    p.seed = cfg.seed;
    p.validate(&assets.generator)
        .map_err(|e| RunError::Config(e.to_string()))?;
    Ok(p)
}

fn sha(path: &Path) -> Result<String, RunError> {
    file_sha256(path).map_err(RunError::output(path))
}

/// Projects one input and writes the result image, sibling image, both code
/// files, the loss trace, stall warnings, the run manifest and optionally
/// the ToRGB diagnostic into `cfg.output_dir`.
pub fn run(cfg: &RunConfig, provider: &dyn LandmarkProvider) -> Result<RunSummary, RunError> {
    let unreadable = |reason: String| RunError::UnreadableInput {
        path: cfg.input.clone(),
        reason,
    };
    let input = as_grayscale(read_image(&cfg.input).map_err(unreadable)?)?;
    let input_sha256 = file_sha256(&cfg.input).map_err(|e| unreadable(e.to_string()))?;
    let assets = Assets::load(&cfg.assets, cfg.film)?;
    let pcfg = projector_config(cfg, &assets, &input, provider)?;
    let result = project(
        &input,
        &assets.generator,
        &assets.encoder,
        &assets.nets,
        &pcfg,
    )?;
    write_outputs(cfg, &assets, &pcfg, input_sha256, result)
}

fn write_outputs(
    cfg: &RunConfig,
    assets: &Assets,
    pcfg: &ProjectorConfig,
    input_sha256: String,
    result: ProjectionResult,
) -> Result<RunSummary, RunError> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(RunError::output(dir))?;
    let path = |name: &str| dir.join(name);
    write_png(&path(RESULT_IMAGE), &result.image, BitDepth::Sixteen)
        .map_err(RunError::output(path(RESULT_IMAGE)))?;
    write_png(
        &path(SIBLING_IMAGE),
        &result.sibling_image,
        BitDepth::Sixteen,
    )
    .map_err(RunError::output(path(SIBLING_IMAGE)))?;
    let codes = CodeFile {
        code: result.state.code.clone(),
        crf: result.state.crf,
    };
    std::fs::write(path(RESULT_CODES), codes.to_bytes())
        .map_err(RunError::output(path(RESULT_CODES)))?;
    let sibling = CodeFile {
        code: ExtendedLatentCode::broadcast(&result.sibling_code, assets.generator.num_layers()),
        crf: CrfParams::IDENTITY,
    };
    std::fs::write(path(SIBLING_CODES), sibling.to_bytes())
        .map_err(RunError::output(path(SIBLING_CODES)))?;
    let file = |name: &str| std::fs::File::create(path(name)).map(std::io::BufWriter::new);
    file(TRACE)
        .and_then(|f| write_trace(f, &result.state.trace))
        .map_err(RunError::output(path(TRACE)))?;
    file(WARNINGS)
        .and_then(|f| write_jsonl(f, result.state.warnings.iter().map(WarningLine::from)))
        .map_err(RunError::output(path(WARNINGS)))?;
    if cfg.diagnostic {
        dump_torgb_diagnostic(&TorgbState::from(&result), &path(DIAGNOSTIC_DIR))?;
    }
    let mut outputs = BTreeMap::new();
    for name in [
        RESULT_IMAGE,
        SIBLING_IMAGE,
        RESULT_CODES,
        SIBLING_CODES,
        TRACE,
    ] {
        outputs.insert(name.to_string(), sha(&path(name))?);
    }
    let manifest = RunManifest {
        version: RUN_MANIFEST_VERSION,
        input: std::path::absolute(&cfg.input).unwrap_or_else(|_| cfg.input.clone()),
        input_sha256,
        film: cfg.film.tag().into(),
        sigma: cfg.sigma,
        eyes: EyeSpec::Explicit(pcfg.eyes).to_string(),
        seed: cfg.seed,
        asset_source: cfg.assets.clone(),
        assets: assets.records.clone(),
        projector: ProjectorSettings::from(pcfg),
        outputs,
    };
    manifest
        .save(&path(RUN_MANIFEST))
        .map_err(RunError::output(path(RUN_MANIFEST)))?;
    Ok(RunSummary {
        output_dir: dir.clone(),
        manifest,
        result,
    })
}

/// Reruns a recorded run into `output_dir` and checks that the input,
/// assets, settings and every output hash match the manifest.
pub fn replay(manifest_path: &Path, output_dir: &Path) -> Result<RunSummary, RunError> {
    let m = RunManifest::load(manifest_path).map_err(RunError::Config)?;
    if m.version != RUN_MANIFEST_VERSION {
        return Err(RunError::Config(format!(
            "unsupported run manifest version {}",
            m.version
        )));
    }
    let film = parse_film(&m.film).map_err(RunError::Config)?;
    let eyes: EyeSpec = m.eyes.parse().map_err(RunError::Config)?;
    let cfg = RunConfig {
        input: m.input.clone(),
        output_dir: output_dir.to_path_buf(),
        film,
        sigma: m.sigma,
        eyes: Some(eyes),
        assets: m.asset_source.clone(),
        stage1_iters: None,
        stage2_iters: None,
        seed: m.seed,
        diagnostic: false,
    };
    let unreadable = |reason: String| RunError::UnreadableInput {
        path: cfg.input.clone(),
        reason,
    };
    let input_sha256 = file_sha256(&cfg.input).map_err(|e| unreadable(e.to_string()))?;
    if input_sha256 != m.input_sha256 {
        return Err(RunError::Replay(format!(
            "input {} changed since the recorded run",
            cfg.input.display()
        )));
    }
    let input = as_grayscale(read_image(&cfg.input).map_err(unreadable)?)?;
    let assets = Assets::load(&cfg.assets, film)?;
    if assets.records != m.assets {
        return Err(RunError::Replay(
            "assets differ from the recorded run".into(),
        ));
    }
    let mut pcfg = ProjectorConfig::new(
        film,
        m.sigma,
        acquire_eye_regions(&input, &eyes, &crate::eyes::NoDetector)
            .map_err(RunError::InvalidEyes)?,
    );
    m.projector.apply(&mut pcfg);
    pcfg.seed = m.seed;
    pcfg.validate(&assets.generator)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let result = project(
        &input,
        &assets.generator,
        &assets.encoder,
        &assets.nets,
        &pcfg,
    )?;
    let summary = write_outputs(&cfg, &assets, &pcfg, input_sha256, result)?;
    if summary.manifest.outputs != m.outputs {
        let differing: Vec<&String> = m
            .outputs
            .iter()
            .filter(|(k, v)| summary.manifest.outputs.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(RunError::Replay(format!(
            "outputs differ from the recorded run: {differing:?}"
        )));
    }
    Ok(summary)
}

/// Runs every config on its own thread, at most `workers` at a time.
/// Results come back in input order.
pub fn run_batch(
    configs: &[RunConfig],
    provider: &(dyn LandmarkProvider + Sync),
    workers: usize,
) -> Vec<Result<RunSummary, RunError>> {
    let workers = workers.max(1);
    let mut out: Vec<Option<Result<RunSummary, RunError>>> =
        (0..configs.len()).map(|_| None).collect();
    for (chunk_cfgs, chunk_out) in configs.chunks(workers).zip(out.chunks_mut(workers)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_cfgs
                .iter()
                .map(|c| s.spawn(move || run(c, provider)))
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(
                    h.join()
                        .unwrap_or_else(|_| Err(RunError::Config("run panicked".into()))),
                );
            }
        });
    }
    out.into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}
