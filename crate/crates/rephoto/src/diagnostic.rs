//! ToRGB tap visualizations and covariance tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rephoto_core::imagecore::Image;
use rephoto_core::projector::{covariance_magnitudes, ProjectionResult};
use rephoto_core::tensor::Tensor;

use crate::io::{write_png, BitDepth};
use crate::RunError;

/// ToRGB taps of the sibling and the result, coarse to fine.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TorgbState {
    pub sibling: Vec<Tensor>,
    pub result: Vec<Tensor>,
}

impl From<&ProjectionResult> for TorgbState {
    fn from(r: &ProjectionResult) -> Self {
        Self {
            sibling: r.sibling_torgb.clone(),
            result: r.torgb.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceRow {
    pub layer: usize,
    pub resolution: usize,
    pub sibling: f64,
    pub result: f64,
}

pub fn covariance_table(state: &TorgbState) -> Vec<CovarianceRow> {
    let (s, r) = (
        covariance_magnitudes(&state.sibling),
        covariance_magnitudes(&state.result),
    );
    state
        .result
        .iter()
        .enumerate()
        .map(|(l, t)| CovarianceRow {
            layer: l,
            resolution: t.chw().1,
            sibling: s[l],
            result: r[l],
        })
        .collect()
}

/// Grid with one row per source (sibling, result) and one column per layer,
/// each tap upscaled by pixel replication to the finest resolution.
/// `amplified` rescales every tap by its own largest magnitude.
fn grid(state: &TorgbState, amplified: bool) -> Result<Image, String> {
    let cell = state.result.iter().map(|t| t.chw().1).max().unwrap_or(0);
    let cols = state.result.len();
    let mut img = Image::filled(3, cell * cols, cell * 2, 0.0).map_err(|e| e.to_string())?;
    for (row, taps) in [&state.sibling, &state.result].into_iter().enumerate() {
        for (col, t) in taps.iter().enumerate() {
            let (c, h, w) = t.chw();
            if c != 3 {
                return Err(format!("tap {col} has {c} channels"));
            }
            let peak = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if amplified && peak > 0.0 {
                1.0 / peak
            } else {
                1.0
            };
            for y in 0..cell {
                for x in 0..cell {
                    let (sx, sy) = (x * w / cell, y * h / cell);
                    for ch in 0..3 {
                        let v = t.data()[ch * h * w + sy * w + sx] * scale;
                        img.set(ch, col * cell + x, row * cell + y, 0.5 * v + 0.5);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Writes `torgb_native.png`, `torgb_amplified.png` and
/// `torgb_covariance.tsv` into `dir`. Fails without writing anything when
/// the state holds no taps or the two tap lists disagree.
pub fn dump_torgb_diagnostic(state: &TorgbState, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    if state.result.is_empty() || state.sibling.len() != state.result.len() {
        return Err(RunError::Config(
            "ToRGB diagnostic needs sibling and result taps for every layer".into(),
        ));
    }
    if state
        .sibling
        .iter()
        .zip(&state.result)
        .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(RunError::Config(
            "sibling and result taps differ in shape".into(),
        ));
    }
    let native = grid(state, false).map_err(RunError::Config)?;
    let amplified = grid(state, true).map_err(RunError::Config)?;
    let mut table = String::from("layer\tresolution\tsibling\tresult\n");
    for r in covariance_table(state) {
        writeln!(
            table,
            "{}\t{}\t{:e}\t{:e}",
            r.layer, r.resolution, r.sibling, r.result
        )
        .unwrap();
    }
    std::fs::create_dir_all(dir).map_err(RunError::output(dir))?;
    let paths = [
        dir.join("torgb_native.png"),
        dir.join("torgb_amplified.png"),
        dir.join("torgb_covariance.tsv"),
    ];
    write_png(&paths[0], &native, BitDepth::Sixteen).map_err(RunError::output(&paths[0]))?;
    write_png(&paths[1], &amplified, BitDepth::Sixteen).map_err(RunError::output(&paths[1]))?;
    std::fs::write(&paths[2], table).map_err(RunError::output(&paths[2]))?;
    Ok(paths.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rephoto_core::generator::Generator;

    #[test]
    fn empty_state_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("diag");
        assert!(dump_torgb_diagnostic(&TorgbState::default(), &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn writes_grids_and_table() {
        let g = Generator::toy(1);
        let s = g
            .synthesize(&g.broadcast(&g.mean_latent()), 0.0, 0)
            .unwrap();
        let r = g
            .synthesize(&g.broadcast(&g.sample_latent(4)), 0.0, 0)
            .unwrap();
        let state = TorgbState {
            sibling: s.torgb,
            result: r.torgb,
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_torgb_diagnostic(&state, dir.path()).unwrap();
        let grid = crate::io::read_image(&paths[0]).unwrap();
        assert_eq!((grid.width(), grid.height()), (64 * 5, 128));
        let table = std::fs::read_to_string(&paths[2]).unwrap();
        assert_eq!(table.lines().count(), 6);
        assert!(table.lines().nth(1).unwrap().starts_with("0\t4\t"));
        let rows = covariance_table(&state);
        assert!(rows[..4].iter().all(|r| r.sibling < rows[4].sibling));
    }
}
