//! Model assets: the bundled toy stack and manifest-listed checkpoint files.

use std::path::{Path, PathBuf};

use rephoto_core::encoder::{Encoder, EncoderConfig};
use rephoto_core::features::Backbone;
use rephoto_core::generator::Generator;
use rephoto_core::imagecore::FilmModel;
use rephoto_core::losses::{EyeBox, EyeRegions, FeatureLayers, LossNetworks};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_sha256, Checkpoint};
use crate::film::parse_film;
use crate::RunError;

pub const TOY_GENERATOR_SEED: u64 = 1;
pub const TOY_NETWORK_SEED: u64 = 2;
pub const TOY_ENCODER_SEED: u64 = 3;
pub const TOY_PERCEPTUAL_SIZE: usize = 32;
pub const TOY_ITERATIONS: (usize, usize) = (50, 150);
pub const FULL_PERCEPTUAL_SIZE: usize = 256;
pub const FULL_ITERATIONS: (usize, usize) = (250, 750);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Encoder,
    Vgg,
    Face,
    Context,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub id: String,
    pub role: Role,
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub film: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetManifest {
    pub assets: Vec<AssetEntry>,
}

impl AssetManifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::MissingAsset {
            id: "weights manifest".into(),
            detail: format!("{}: {e}", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| RunError::InvalidAsset {
            id: "weights manifest".into(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
    }

    fn find(&self, role: Role, film: Option<FilmModel>) -> Option<&AssetEntry> {
        self.assets.iter().find(|a| {
            a.role == role
                && film
                    .is_none_or(|f| a.film.as_deref().and_then(|t| parse_film(t).ok()) == Some(f))
        })
    }
}

/// Identity and content hash of one loaded asset, as recorded in run manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub id: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetSource {
    Toy,
    Manifest(PathBuf),
}

#[derive(Debug)]
pub struct Assets {
    pub generator: Generator,
    pub encoder: Encoder,
    pub nets: LossNetworks,
    pub records: Vec<AssetRecord>,
    pub toy: bool,
}

fn record(id: String, c: &Checkpoint) -> AssetRecord {
    AssetRecord {
        id,
        sha256: c.digest(),
    }
}

impl Assets {
    pub fn load(source: &AssetSource, film: FilmModel) -> Result<Self, RunError> {
        match source {
            AssetSource::Toy => Ok(Self::toy(film)),
            AssetSource::Manifest(p) => Self::from_manifest(p, film),
        }
    }

    /// The bundled toy stack, built from fixed seeds. The encoder is
    /// untrained, so its sibling sits at the generator's mean latent.
    pub fn toy(film: FilmModel) -> Self {
        let generator = Generator::toy(TOY_GENERATOR_SEED);
        let encoder = toy_encoder(&generator, film);
        let nets = LossNetworks::toy(TOY_NETWORK_SEED);
        let records = vec![
            record("toy-generator".into(), &Checkpoint::from(&generator)),
            record(
                format!("toy-encoder-{}", film.tag()),
                &Checkpoint::from(&encoder),
            ),
            record("toy-vgg16".into(), &Checkpoint::from(&nets.vgg)),
            record("toy-vgg-face".into(), &Checkpoint::from(&nets.face)),
            record("toy-vgg19".into(), &Checkpoint::from(&nets.context)),
        ];
        Self {
            generator,
            encoder,
            nets,
            records,
            toy: true,
        }
    }

    pub fn from_manifest(path: &Path, film: FilmModel) -> Result<Self, RunError> {
        let manifest = AssetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        let layers = FeatureLayers::default();
        let mut open = |role: Role,
                        film: Option<FilmModel>,
                        wanted: &str|
         -> Result<(AssetEntry, Checkpoint), RunError> {
            let entry = manifest
                .find(role, film)
                .ok_or_else(|| RunError::MissingAsset {
                    id: wanted.into(),
                    detail: format!("no {wanted} entry in {}", path.display()),
                })?;
            let c = load_entry(base, entry)?;
            records.push(AssetRecord {
                id: entry.id.clone(),
                sha256: entry.sha256.clone(),
            });
            Ok((entry.clone(), c))
        };
        let (gid, gc) = open(Role::Generator, None, "generator")?;
        let generator = Generator::try_from(&gc)
            .map_err(|detail| RunError::InvalidAsset { id: gid.id, detail })?;
        let (eid, ec) = open(
            Role::Encoder,
            Some(film),
            &format!("encoder for {} film", film.tag()),
        )?;
        let encoder = Encoder::try_from(&ec).map_err(|detail| RunError::InvalidAsset {
            id: eid.id.clone(),
            detail,
        })?;
        if encoder.film() != film || encoder.config().code_width != generator.code_width() {
            return Err(RunError::InvalidAsset {
                id: eid.id,
                detail: "encoder film tag or code width does not match".into(),
            });
        }
        let mut backbone = |role: Role, wanted: &[String]| -> Result<Backbone, RunError> {
            let (entry, c) = open(role, None, &format!("{role:?} backbone").to_lowercase())?;
            let b = Backbone::try_from(&c).map_err(|detail| RunError::InvalidAsset {
                id: entry.id.clone(),
                detail,
            })?;
            if !entry.layers.is_empty() && entry.layers != b.config().layer_names() {
                return Err(RunError::InvalidAsset {
                    id: entry.id,
                    detail: "layer list differs from the checkpoint".into(),
                });
            }
            if let Some(l) = wanted
                .iter()
                .find(|l| !b.config().layer_names().contains(l))
            {
                return Err(RunError::InvalidAsset {
                    id: entry.id,
                    detail: format!("backbone has no layer {l}"),
                });
            }
            Ok(b)
        };
        let vgg = backbone(Role::Vgg, &layers.vgg)?;
        let face = backbone(Role::Face, &layers.face)?;
        let context = backbone(Role::Context, &layers.context)?;
        Ok(Self {
            generator,
            encoder,
            nets: LossNetworks {
                vgg,
                face,
                context,
                layers,
            },
            records,
            toy: false,
        })
    }
}

/// Only the generator, for encoder training.
pub fn load_generator(source: &AssetSource) -> Result<(Generator, AssetRecord), RunError> {
    match source {
        AssetSource::Toy => {
            let g = Generator::toy(TOY_GENERATOR_SEED);
            let r = record("toy-generator".into(), &Checkpoint::from(&g));
            Ok((g, r))
        }
        AssetSource::Manifest(path) => {
            let manifest = AssetManifest::load(path)?;
            let entry =
                manifest
                    .find(Role::Generator, None)
                    .ok_or_else(|| RunError::MissingAsset {
                        id: "generator".into(),
                        detail: format!("no generator entry in {}", path.display()),
                    })?;
            let c = load_entry(path.parent().unwrap_or(Path::new(".")), entry)?;
            let g = Generator::try_from(&c).map_err(|detail| RunError::InvalidAsset {
                id: entry.id.clone(),
                detail,
            })?;
            Ok((
                g,
                AssetRecord {
                    id: entry.id.clone(),
                    sha256: entry.sha256.clone(),
                },
            ))
        }
    }
}

pub fn toy_encoder(generator: &Generator, film: FilmModel) -> Encoder {
    Encoder::random(
        EncoderConfig::toy(film),
        &generator.mean_latent(),
        TOY_ENCODER_SEED,
    )
    .expect("toy encoder configuration is valid")
}

fn load_entry(base: &Path, entry: &AssetEntry) -> Result<Checkpoint, RunError> {
    let path = base.join(&entry.path);
    if !path.is_file() {
        return Err(RunError::MissingAsset {
            id: entry.id.clone(),
            detail: format!("{} does not exist", path.display()),
        });
    }
    let hash = file_sha256(&path).map_err(|e| RunError::MissingAsset {
        id: entry.id.clone(),
        detail: e.to_string(),
    })?;
    if !hash.eq_ignore_ascii_case(&entry.sha256) {
        return Err(RunError::InvalidAsset {
            id: entry.id.clone(),
            detail: format!(
                "sha256 {hash} does not match the manifest's {}",
                entry.sha256
            ),
        });
    }
    Checkpoint::load(&path).map_err(|detail| RunError::InvalidAsset {
        id: entry.id.clone(),
        detail,
    })
}

/// Writes the toy stack (with encoders for all three films) as checkpoint
/// files plus a `manifest.json` listing them. Returns the manifest path.
pub fn export_toy(dir: &Path) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(dir).map_err(RunError::output(dir))?;
    let generator = Generator::toy(TOY_GENERATOR_SEED);
    let nets = LossNetworks::toy(TOY_NETWORK_SEED);
    type Entry = (String, Role, Option<FilmModel>, Checkpoint, Vec<String>);
    let mut files: Vec<Entry> = vec![(
        "toy-generator".into(),
        Role::Generator,
        None,
        Checkpoint::from(&generator),
        vec![],
    )];
    for film in FilmModel::ALL {
        let e = toy_encoder(&generator, film);
        files.push((
            format!("toy-encoder-{}", film.tag()),
            Role::Encoder,
            Some(film),
            Checkpoint::from(&e),
            vec![],
        ));
    }
    for (id, role, b) in [
        ("toy-vgg16", Role::Vgg, &nets.vgg),
        ("toy-vgg-face", Role::Face, &nets.face),
        ("toy-vgg19", Role::Context, &nets.context),
    ] {
        files.push((
            id.into(),
            role,
            None,
            Checkpoint::from(b),
            b.config().layer_names(),
        ));
    }
    let mut manifest = AssetManifest::default();
    for (id, role, film, c, layers) in files {
        let name = PathBuf::from(format!("{id}.safetensors"));
        let path = dir.join(&name);
        c.save(&path).map_err(RunError::output(&path))?;
        let sha256 = file_sha256(&path).map_err(RunError::output(&path))?;
        manifest.assets.push(AssetEntry {
            id,
            role,
            path: name,
            sha256,
            layers,
            film: film.map(|f| f.tag().into()),
        });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path).map_err(RunError::output(&path))?;
    Ok(path)
}

/// Default eye boxes for toy renders, scaled from a 64×64 layout.
pub fn toy_eyes(width: usize, height: usize) -> EyeRegions {
    let s = |v: usize, n: usize| v * n / 64;
    let b = |x0, y0, x1, y1| EyeBox::new(s(x0, width), s(y0, height), s(x1, width), s(y1, height));
    EyeRegions {
        left: b(12, 20, 30, 32),
        right: b(34, 20, 52, 32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exported_toy_assets_load_and_match_the_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_toy(dir.path()).unwrap();
        let a = Assets::from_manifest(&m, FilmModel::Orthochromatic).unwrap();
        let t = Assets::toy(FilmModel::Orthochromatic);
        assert_eq!(a.generator.to_tensors(), t.generator.to_tensors());
        assert_eq!(a.encoder.to_tensors(), t.encoder.to_tensors());
        assert_eq!(a.nets.face.to_tensors(), t.nets.face.to_tensors());
        assert_eq!(a.records.len(), 5);
        assert!(!a.toy);
    }

    #[test]
    fn missing_encoder_file_is_a_missing_asset() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_toy(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("toy-encoder-blue.safetensors")).unwrap();
        let e = Assets::from_manifest(&m, FilmModel::BlueSensitive).unwrap_err();
        assert_eq!(e.exit_code(), RunError::MISSING_ASSET);
        assert!(e.to_string().contains("toy-encoder-blue"));
        assert!(Assets::from_manifest(&m, FilmModel::Panchromatic).is_ok());
    }

    #[test]
    fn absent_encoder_entry_is_a_missing_asset() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_toy(dir.path()).unwrap();
        let mut manifest = AssetManifest::load(&m).unwrap();
        manifest.assets.retain(|a| a.film.as_deref() != Some("pan"));
        manifest.save(&m).unwrap();
        let e = Assets::from_manifest(&m, FilmModel::Panchromatic).unwrap_err();
        assert_eq!(e.exit_code(), RunError::MISSING_ASSET);
        assert!(e.to_string().contains("encoder for pan film"));
    }

    #[test]
    fn tampered_files_and_layer_lists_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_toy(dir.path()).unwrap();
        let mut manifest = AssetManifest::load(&m).unwrap();
        manifest
            .assets
            .iter_mut()
            .find(|a| a.role == Role::Face)
            .unwrap()
            .layers
            .pop();
        manifest.save(&m).unwrap();
        let e = Assets::from_manifest(&m, FilmModel::Orthochromatic).unwrap_err();
        assert_eq!(e.exit_code(), RunError::INVALID_ASSET);

        let m = export_toy(dir.path()).unwrap();
        std::fs::write(dir.path().join("toy-generator.safetensors"), b"junk").unwrap();
        let e = Assets::from_manifest(&m, FilmModel::Orthochromatic).unwrap_err();
        assert_eq!(e.exit_code(), RunError::INVALID_ASSET);
        assert!(e.to_string().contains("sha256"));
    }

    #[test]
    fn missing_manifest() {
        let e = Assets::from_manifest(
            Path::new("/nonexistent/manifest.json"),
            FilmModel::Panchromatic,
        )
        .unwrap_err();
        assert_eq!(e.exit_code(), RunError::MISSING_ASSET);
    }

    #[test]
    fn toy_eye_layout_scales() {
        assert_eq!(toy_eyes(64, 64).left, EyeBox::new(12, 20, 30, 32));
        assert_eq!(toy_eyes(128, 64).right, EyeBox::new(68, 20, 104, 32));
    }
}
