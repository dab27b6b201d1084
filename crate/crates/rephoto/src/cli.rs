//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rephoto_core::encoder::{
    generate_training_set, train_encoder, Encoder, EncoderConfig, EncoderTrainConfig,
};
use rephoto_core::imagecore::FilmModel;
use serde::Serialize;

use crate::assets::{export_toy, load_generator, AssetRecord, AssetSource};
use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::eyes::{EyeSpec, NoDetector};
use crate::film::{choose_film, parse_film};
use crate::run::{replay, run, run_batch, RunConfig};
use crate::trace::JsonlTrainLog;
use crate::RunError;

/// Keys accepted in `--config` files; each mirrors the long flag of the same name.
pub const CONFIG_KEYS: &[&str] = &[
    "input",
    "output-dir",
    "film",
    "year",
    "sigma",
    "eyes",
    "toy",
    "seed",
    "stage1-iters",
    "stage2-iters",
    "weights-manifest",
    "batch",
    "workers",
    "diagnostic",
];

#[derive(Debug, Parser)]
#[command(
    name = "rephoto",
    version,
    about = "Reconstruct a modern colour portrait from an antique photograph"
)]
#[command(args_conflicts_with_subcommands = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub project: ProjectArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a sibling encoder for one film model.
    Train(TrainArgs),
    /// Write the bundled toy assets as checkpoint files with a weights manifest.
    ExportToy {
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Rerun a recorded run and verify that every output is bit-identical.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(Debug, Default, Args)]
pub struct ProjectArgs {
    /// Key-value file mirroring these flags; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Antique photograph (8- or 16-bit PNG, pre-aligned crop).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// blue, ortho or pan.
    #[arg(long, value_parser = parse_film)]
    pub film: Option<FilmModel>,
    /// Year the photograph was taken; picks or checks the film model.
    #[arg(long)]
    pub year: Option<i32>,
    /// Gaussian blur sigma of the degradation model, in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// "x0,y0,x1,y1;x0,y0,x1,y1" (left; right) or "detect".
    #[arg(long)]
    pub eyes: Option<EyeSpec>,
    /// Use the bundled toy generator, encoder and backbones.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_iters: Option<usize>,
    #[arg(long)]
    pub stage2_iters: Option<usize>,
    #[arg(long)]
    pub weights_manifest: Option<PathBuf>,
    /// File listing one input path per line; each gets its own subdirectory of the output directory.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// Parallel runs in batch mode.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also write the ToRGB diagnostic.
    #[arg(long)]
    pub diagnostic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_film)]
    pub film: FilmModel,
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub weights_manifest: Option<PathBuf>,
    /// Encoder checkpoint to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn config_err(e: String) -> RunError {
    RunError::Config(e)
}

fn asset_source(toy: bool, manifest: Option<PathBuf>) -> Result<AssetSource, RunError> {
    match (toy, manifest) {
        (true, None) => Ok(AssetSource::Toy),
        (false, Some(m)) => Ok(AssetSource::Manifest(m)),
        (true, Some(_)) => Err(config_err(
            "--toy and --weights-manifest are mutually exclusive".into(),
        )),
        (false, None) => Err(config_err("pass --toy or --weights-manifest".into())),
    }
}

fn read_batch(path: &Path) -> Result<Vec<PathBuf>, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("batch file {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let inputs: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if inputs.is_empty() {
        return Err(config_err(format!(
            "batch file {} lists no inputs",
            path.display()
        )));
    }
    Ok(inputs)
}

/// Merges flags over the config file and expands batch mode. Returns the
/// run configurations and the number of parallel workers.
pub fn resolve(args: &ProjectArgs) -> Result<(Vec<RunConfig>, usize), RunError> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            ConfigFile::parse(&text, CONFIG_KEYS)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let base = args
        .config
        .as_deref()
        .and_then(Path::parent)
        .unwrap_or(Path::new("."));
    let path = |flag: &Option<PathBuf>, key: &str| {
        flag.clone().or_else(|| file.get(key).map(|v| base.join(v)))
    };
    let film = match &args.film {
        Some(f) => Some(*f),
        None => file
            .get("film")
            .map(parse_film)
            .transpose()
            .map_err(config_err)?,
    };
    let year = args.year.or(file.parsed("year").map_err(config_err)?);
    let film = choose_film(year, film).map_err(config_err)?;
    let eyes = match args.eyes {
        Some(e) => Some(e),
        None => file
            .get("eyes")
            .map(str::parse)
            .transpose()
            .map_err(RunError::InvalidEyes)?,
    };
    let toy = args.toy || file.flag("toy").map_err(config_err)?;
    let assets = asset_source(toy, path(&args.weights_manifest, "weights-manifest"))?;
    let output_dir = path(&args.output_dir, "output-dir")
        .ok_or_else(|| config_err("--output-dir is required".into()))?;
    let template = RunConfig {
        input: PathBuf::new(),
        output_dir: output_dir.clone(),
        film,
        sigma: match args.sigma {
            Some(s) => s,
            None => file.parsed("sigma").map_err(config_err)?.unwrap_or(0.0),
        },
        eyes,
        assets,
        stage1_iters: args
            .stage1_iters
            .or(file.parsed("stage1-iters").map_err(config_err)?),
        stage2_iters: args
            .stage2_iters
            .or(file.parsed("stage2-iters").map_err(config_err)?),
        seed: args
            .seed
            .or(file.parsed("seed").map_err(config_err)?)
            .unwrap_or(0),
        diagnostic: args.diagnostic || file.flag("diagnostic").map_err(config_err)?,
    };
    let workers = args
        .workers
        .or(file.parsed("workers").map_err(config_err)?)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    let configs = match (path(&args.batch, "batch"), path(&args.input, "input")) {
        (Some(_), Some(_)) => {
            return Err(config_err(
                "--batch and --input are mutually exclusive".into(),
            ))
        }
        (None, None) => return Err(config_err("--input is required".into())),
        (None, Some(input)) => vec![RunConfig { input, ..template }],
        (Some(batch), None) => read_batch(&batch)?
            .into_iter()
            .enumerate()
            .map(|(i, input)| {
                let stem = input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                RunConfig {
                    output_dir: output_dir.join(format!("{i:03}_{stem}")),
                    input,
                    ..template.clone()
                }
            })
            .collect(),
    };
    Ok((configs, workers))
}

#[derive(Debug, Serialize)]
struct DatasetManifest<'a> {
    film: &'a str,
    sample_count: usize,
    seed: u64,
    latent_prior: &'a str,
    brightness: (f64, f64),
    contrast: (f64, f64),
    hue: (f64, f64),
    input_resolution: usize,
    generator: AssetRecord,
}

/// Trains an encoder and writes the checkpoint, a dataset manifest next to
/// it (`<output>.dataset.json`) and optionally a JSON-lines log.
pub fn train(args: &TrainArgs) -> Result<Vec<f64>, RunError> {
    let source = asset_source(args.toy, args.weights_manifest.clone())?;
    let (generator, record) = load_generator(&source)?;
    let (enc_cfg, defaults) = if args.toy {
        (
            EncoderConfig::toy(args.film),
            EncoderTrainConfig::toy(args.film),
        )
    } else {
        (
            EncoderConfig {
                code_width: generator.code_width(),
                ..EncoderConfig::standard(args.film)
            },
            EncoderTrainConfig::for_film(args.film),
        )
    };
    let cfg = EncoderTrainConfig {
        sample_count: args.samples.unwrap_or(defaults.sample_count),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        shuffle_seed: args.seed,
        ..defaults
    };
    cfg.validate()?;
    let set = generate_training_set(&generator, args.film, &cfg, args.seed);
    let init = Encoder::random(enc_cfg, &generator.mean_latent(), args.seed)?;
    let log_file: Box<dyn std::io::Write> = match &args.log {
        Some(p) => Box::new(
            std::fs::File::create(p)
                .map(std::io::BufWriter::new)
                .map_err(RunError::output(p))?,
        ),
        None => Box::new(std::io::sink()),
    };
    let mut log = JsonlTrainLog::new(log_file);
    let mut epochs = Vec::new();
    struct Both<'a, W: std::io::Write>(&'a mut JsonlTrainLog<W>, &'a mut Vec<f64>);
    impl<W: std::io::Write> rephoto_core::encoder::TrainObserver for Both<'_, W> {
        fn on_step(&mut self, r: &rephoto_core::encoder::StepRecord) {
            self.0.on_step(r);
        }
        fn on_epoch(
            &mut self,
            r: &rephoto_core::encoder::EpochRecord,
            e: &Encoder,
        ) -> rephoto_core::Result<()> {
            self.1.push(r.mean_l1);
            self.0.on_epoch(r, e)
        }
    }
    let encoder = train_encoder(&set, init, &cfg, &mut Both(&mut log, &mut epochs))?;
    if let Some(p) = &args.log {
        log.finish().map_err(RunError::output(p))?;
    }
    Checkpoint::from(&encoder)
        .save(&args.output)
        .map_err(RunError::output(&args.output))?;
    let dataset = DatasetManifest {
        film: args.film.tag(),
        sample_count: cfg.sample_count,
        seed: args.seed,
        latent_prior: "mapping network applied to standard normal noise, no truncation",
        brightness: cfg.brightness,
        contrast: cfg.contrast,
        hue: cfg.hue,
        input_resolution: cfg.input_resolution,
        generator: record,
    };
    let mut dpath = args.output.clone().into_os_string();
    dpath.push(".dataset.json");
    let dpath = PathBuf::from(dpath);
    let text = serde_json::to_string_pretty(&dataset).map_err(|e| RunError::Output {
        path: dpath.clone(),
        source: e.into(),
    })?;
    std::fs::write(&dpath, text + "\n").map_err(RunError::output(&dpath))?;
    Ok(epochs)
}

/// Runs the parsed command line and returns the process exit code.
pub fn main_with(cli: Cli) -> u8 {
    let outcome: Result<(), RunError> = match cli.command {
        Some(Command::Train(args)) => train(&args).map(|epochs| {
            for (i, l1) in epochs.iter().enumerate() {
                println!("epoch {i}: mean latent L1 {l1:.6}");
            }
        }),
        Some(Command::ExportToy { output_dir }) => {
            export_toy(&output_dir).map(|m| println!("{}", m.display()))
        }
        Some(Command::Replay {
            manifest,
            output_dir,
        }) => replay(&manifest, &output_dir)
            .map(|s| println!("replay matches: {}", s.output_dir.display())),
        None => match resolve(&cli.project) {
            Err(e) => Err(e),
            Ok((configs, _)) if configs.len() == 1 => run(&configs[0], &NoDetector).map(|s| {
                println!("{}", s.output_dir.display());
            }),
            Ok((configs, workers)) => {
                let results = run_batch(&configs, &NoDetector, workers);
                let mut first = None;
                for (c, r) in configs.iter().zip(results) {
                    match r {
                        Ok(s) => println!("ok {} -> {}", c.input.display(), s.output_dir.display()),
                        Err(e) => {
                            eprintln!("failed {}: {e}", c.input.display());
                            first.get_or_insert(e);
                        }
                    }
                }
                first.map_or(Ok(()), Err)
            }
        },
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
