//! Safetensors checkpoints for the generator, encoders and backbones.
//!
//! Tensors are stored as little-endian `F64` (or read from `F32`), with the
//! model configuration in the string metadata block alongside a `kind` tag
//! and a format version.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rephoto_core::encoder::{Encoder, EncoderConfig};
use rephoto_core::features::{Backbone, BackboneConfig};
use rephoto_core::generator::{Generator, GeneratorConfig};
use rephoto_core::tensor::{NamedTensors, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Generator,
    Encoder,
    Backbone,
}

impl Kind {
    pub fn tag(self) -> &'static str {
        match self {
            Kind::Generator => "generator",
            Kind::Encoder => "encoder",
            Kind::Backbone => "backbone",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: NamedTensors,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: Kind, tensors: NamedTensors, mut metadata: BTreeMap<String, String>) -> Self {
        metadata.insert("kind".into(), kind.tag().into());
        metadata.insert("format_version".into(), FORMAT_VERSION.into());
        Self { tensors, metadata }
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }

    fn expect_kind(&self, kind: Kind) -> Result<(), String> {
        match self.kind() {
            Some(k) if k == kind.tag() => {}
            other => {
                return Err(format!(
                    "expected a {} checkpoint, found kind {other:?}",
                    kind.tag()
                ))
            }
        }
        match self.metadata.get("format_version").map(String::as_str) {
            Some(FORMAT_VERSION) => Ok(()),
            other => Err(format!("unsupported checkpoint format version {other:?}")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, String> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    t.shape().to_vec(),
                    t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                )
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, shape, bytes)| {
                Ok((
                    name.as_str(),
                    TensorView::new(Dtype::F64, shape.clone(), bytes)?,
                ))
            })
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| e.to_string())?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| e.to_string())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| e.to_string())?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let st = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
        let mut tensors = NamedTensors::new();
        for (name, view) in st.tensors() {
            let data: Vec<f64> = match view.dtype() {
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(format!("tensor {name} has unsupported dtype {other:?}")),
            };
            tensors.insert(name, Tensor::new(view.shape(), data));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes().map_err(std::io::Error::other)?)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        Self::from_bytes(&bytes)
    }

    /// Content hash independent of file layout: names, shapes and values in
    /// name order, then metadata in key order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for (k, v) in &self.metadata {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((v.len() as u64).to_le_bytes());
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl From<&Generator> for Checkpoint {
    fn from(g: &Generator) -> Self {
        Checkpoint::new(Kind::Generator, g.to_tensors(), g.config().to_metadata())
    }
}

impl From<&Encoder> for Checkpoint {
    fn from(e: &Encoder) -> Self {
        Checkpoint::new(Kind::Encoder, e.to_tensors(), e.config().to_metadata())
    }
}

impl From<&Backbone> for Checkpoint {
    fn from(b: &Backbone) -> Self {
        Checkpoint::new(Kind::Backbone, b.to_tensors(), b.config().to_metadata())
    }
}

impl TryFrom<&Checkpoint> for Generator {
    type Error = String;

    fn try_from(c: &Checkpoint) -> Result<Self, String> {
        c.expect_kind(Kind::Generator)?;
        let cfg = GeneratorConfig::from_metadata(&c.metadata).map_err(|e| e.to_string())?;
        Generator::from_tensors(cfg, &c.tensors).map_err(|e| e.to_string())
    }
}

impl TryFrom<&Checkpoint> for Encoder {
    type Error = String;

    fn try_from(c: &Checkpoint) -> Result<Self, String> {
        c.expect_kind(Kind::Encoder)?;
        let cfg = EncoderConfig::from_metadata(&c.metadata).map_err(|e| e.to_string())?;
        Encoder::from_tensors(cfg, &c.tensors).map_err(|e| e.to_string())
    }
}

impl TryFrom<&Checkpoint> for Backbone {
    type Error = String;

    fn try_from(c: &Checkpoint) -> Result<Self, String> {
        c.expect_kind(Kind::Backbone)?;
        let cfg = BackboneConfig::from_metadata(&c.metadata).map_err(|e| e.to_string())?;
        Backbone::from_tensors(cfg, &c.tensors).map_err(|e| e.to_string())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            return Ok(hex::encode(h.finalize()));
        }
        h.update(&buf[..n]);
    }
}
