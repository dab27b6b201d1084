//! Eye-region acquisition: explicit boxes or a pluggable landmark provider.

use std::fmt;
use std::str::FromStr;

use rephoto_core::imagecore::Image;
use rephoto_core::losses::{EyeBox, EyeRegions};

/// Fraction of the landmark box added on every side.
pub const PADDING: f64 = 0.25;

/// Landmark points of both eyes, in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeLandmarks {
    pub left: Vec<(f64, f64)>,
    pub right: Vec<(f64, f64)>,
}

pub trait LandmarkProvider {
    fn eye_landmarks(&self, img: &Image) -> Result<EyeLandmarks, String>;
}

/// The default: no detector. Asking it for landmarks is an error, so eye
/// boxes must be given explicitly.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoDetector;

impl LandmarkProvider for NoDetector {
    fn eye_landmarks(&self, _: &Image) -> Result<EyeLandmarks, String> {
        Err("no landmark detector is configured; pass explicit eye boxes".into())
    }
}

/// Returns the same landmarks for every image.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedLandmarks(pub EyeLandmarks);

impl LandmarkProvider for FixedLandmarks {
    fn eye_landmarks(&self, _: &Image) -> Result<EyeLandmarks, String> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EyeSpec {
    Explicit(EyeRegions),
    Detect,
}

impl FromStr for EyeSpec {
    type Err = String;

    /// `x0,y0,x1,y1;x0,y0,x1,y1` (left then right, half-open) or `detect`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("detect") {
            return Ok(EyeSpec::Detect);
        }
        let boxes: Vec<EyeBox> = s
            .split(';')
            .map(|b| {
                let v: Vec<usize> = b
                    .split(',')
                    .map(|n| {
                        n.trim()
                            .parse::<usize>()
                            .map_err(|_| format!("bad eye box coordinate {n:?}"))
                    })
                    .collect::<Result<_, _>>()?;
                match v[..] {
                    [x0, y0, x1, y1] => Ok(EyeBox::new(x0, y0, x1, y1)),
                    _ => Err(format!("eye box {b:?} needs four coordinates")),
                }
            })
            .collect::<Result<_, String>>()?;
        match boxes[..] {
            [left, right] => Ok(EyeSpec::Explicit(EyeRegions { left, right })),
            _ => Err(format!(
                "expected two eye boxes separated by ';', got {}",
                boxes.len()
            )),
        }
    }
}

impl fmt::Display for EyeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EyeSpec::Detect => f.write_str("detect"),
            EyeSpec::Explicit(r) => {
                let b = |b: &EyeBox| format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1);
                write!(f, "{};{}", b(&r.left), b(&r.right))
            }
        }
    }
}

/// Bounding box of `points`, padded by [`PADDING`] of its size on each side
/// and clipped to the image.
pub fn padded_box(points: &[(f64, f64)], width: usize, height: usize) -> Result<EyeBox, String> {
    if points.is_empty() || points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err("landmarks must be a non-empty set of finite points".into());
    }
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (px, py) = ((x1 - x0) * PADDING, (y1 - y0) * PADDING);
    let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64);
    let b = EyeBox::new(
        clip((x0 - px).floor(), width) as usize,
        clip((y0 - py).floor(), height) as usize,
        clip((x1 + px).ceil(), width) as usize,
        clip((y1 + py).ceil(), height) as usize,
    );
    if b.width() == 0 || b.height() == 0 {
        return Err(format!("landmarks give an empty box after clipping: {b:?}"));
    }
    Ok(b)
}

pub fn acquire_eye_regions(
    img: &Image,
    spec: &EyeSpec,
    provider: &dyn LandmarkProvider,
) -> Result<EyeRegions, String> {
    let (w, h) = (img.width(), img.height());
    let regions = match spec {
        EyeSpec::Explicit(r) => *r,
        EyeSpec::Detect => {
            let l = provider.eye_landmarks(img)?;
            EyeRegions {
                left: padded_box(&l.left, w, h)?,
                right: padded_box(&l.right, w, h)?,
            }
        }
    };
    regions.validate(w, h).map_err(|e| e.to_string())?;
    Ok(regions)
}
