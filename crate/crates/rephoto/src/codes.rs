//! Binary W+ code files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `RPWC`                              |
//! | 4     | format version (`u32`, currently 1)       |
//! | 4     | layer count (`u32`)                       |
//! | 4     | code width (`u32`)                        |
//! | 4·L·W | codes as `f32`, layer-major               |
//! | 12    | CRF bias, gain, gamma as `f32`            |

use rephoto_core::generator::{ExtendedLatentCode, LatentCode};
use rephoto_core::imagecore::CrfParams;

pub const MAGIC: [u8; 4] = *b"RPWC";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CodeFile {
    pub code: ExtendedLatentCode,
    pub crf: CrfParams,
}

impl CodeFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (layers, width) = (self.code.num_layers(), self.code.code_width());
        let mut out = Vec::with_capacity(HEADER + 4 * (layers * width + 3));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(layers as u32).to_le_bytes());
        out.extend_from_slice(&(width as u32).to_le_bytes());
        for l in self.code.layers() {
            for v in l.values() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for v in self.crf.as_array() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER || bytes[..4] != MAGIC {
            return Err("not a latent code file".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(format!("unsupported code file version {}", word(4)));
        }
        let (layers, width) = (word(8) as usize, word(12) as usize);
        let expected = layers
            .checked_mul(width)
            .and_then(|n| n.checked_add(3))
            .map(|n| HEADER + 4 * n);
        if expected != Some(bytes.len()) {
            return Err(format!(
                "code file is {} bytes, header promises {layers}x{width}",
                bytes.len()
            ));
        }
        let floats: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let code = ExtendedLatentCode::new(
            floats[..layers * width]
                .chunks(width.max(1))
                .map(|c| LatentCode::new(c.to_vec()))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let t = &floats[layers * width..];
        let crf = CrfParams::new(t[0], t[1], t[2]).map_err(|e| e.to_string())?;
        Ok(Self { code, crf })
    }
}
