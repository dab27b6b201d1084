use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An image had the wrong number of channels for the operation.
    ChannelCount {
        expected: usize,
        found: usize,
    },
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },
    /// A scalar parameter was outside its legal range.
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    InvalidResolution {
        width: usize,
        height: usize,
    },
    /// A cutoff that is not one of the generator's synthesis resolutions.
    InvalidCutoff {
        cutoff: usize,
        output_resolution: usize,
    },
    LayerCount {
        expected: usize,
        found: usize,
    },
    UnknownLayer {
        backbone: String,
        layer: String,
    },
    BackboneMismatch {
        left: String,
        right: String,
    },
    EyeRegionOutOfBounds {
        region: &'static str,
        width: usize,
        height: usize,
    },
    /// Named tensors missing or shaped differently from the declared architecture.
    Checkpoint {
        architecture: String,
        problems: alloc::vec::Vec<String>,
    },
    /// A loss or parameter became non-finite during optimization.
    NonFinite {
        iteration: usize,
        detail: String,
    },
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    EmptyInput(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ChannelCount { expected, found } => {
                write!(
                    f,
                    "expected a {expected}-channel image, got {found} channels"
                )
            }
            Error::ShapeMismatch {
                what,
                expected,
                found,
            } => {
                write!(
                    f,
                    "shape mismatch for {what}: expected {expected}, found {found}"
                )
            }
            Error::InvalidParameter {
                name,
                value,
                reason,
            } => {
                write!(f, "invalid {name} = {value}: {reason}")
            }
            Error::InvalidResolution { width, height } => {
                write!(f, "invalid resolution {width}x{height}")
            }
            Error::InvalidCutoff {
                cutoff,
                output_resolution,
            } => write!(
                f,
                "cutoff {cutoff} is not a synthesis resolution between 4 and {output_resolution}"
            ),
            Error::LayerCount { expected, found } => {
                write!(f, "expected {expected} latent layers, found {found}")
            }
            Error::UnknownLayer { backbone, layer } => {
                write!(f, "backbone {backbone} has no layer named {layer}")
            }
            Error::BackboneMismatch { left, right } => {
                write!(
                    f,
                    "feature sets come from different backbones or layers: {left} vs {right}"
                )
            }
            Error::EyeRegionOutOfBounds {
                region,
                width,
                height,
            } => {
                write!(
                    f,
                    "{region} eye box is empty or outside the {width}x{height} image"
                )
            }
            Error::Checkpoint {
                architecture,
                problems,
            } => {
                write!(f, "checkpoint does not match architecture {architecture}: ")?;
                for (i, p) in problems.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    f.write_str(p)?;
                }
                Ok(())
            }
            Error::NonFinite { iteration, detail } => {
                write!(f, "non-finite value at iteration {iteration}: {detail}")
            }
            Error::Diverged { epoch, step, loss } => {
                write!(
                    f,
                    "training diverged at epoch {epoch}, step {step} (loss {loss})"
                )
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
