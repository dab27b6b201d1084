//! Film-model selection from the photograph's era.

use rephoto_core::imagecore::FilmModel;

pub const ORTHOCHROMATIC_INTRODUCED: i32 = 1873;
pub const PANCHROMATIC_INTRODUCED: i32 = 1907;

pub fn parse_film(s: &str) -> Result<FilmModel, String> {
    FilmModel::ALL
        .into_iter()
        .find(|f| f.tag() == s.trim())
        .ok_or_else(|| format!("unknown film model {s:?} (expected blue, ortho or pan)"))
}

/// Film models plausible for a photograph taken in `year`.
pub fn allowed_films(year: i32) -> &'static [FilmModel] {
    use FilmModel::*;
    if year < ORTHOCHROMATIC_INTRODUCED {
        &[BlueSensitive]
    } else if year <= PANCHROMATIC_INTRODUCED {
        &[BlueSensitive, Orthochromatic]
    } else {
        &[BlueSensitive, Orthochromatic, Panchromatic]
    }
}

/// Picks the film model. An explicit choice wins but must be plausible for
/// the year when one is known. Without a choice: blue-sensitive before
/// 1873, orthochromatic up to 1907, panchromatic afterwards or when the
/// year is unknown.
pub fn choose_film(year: Option<i32>, requested: Option<FilmModel>) -> Result<FilmModel, String> {
    match (year, requested) {
        (None, Some(f)) => Ok(f),
        (None, None) => Ok(FilmModel::Panchromatic),
        (Some(y), Some(f)) if allowed_films(y).contains(&f) => Ok(f),
        (Some(y), Some(f)) => Err(format!("{} film did not exist in {y}", f.tag())),
        (Some(y), None) => Ok(*allowed_films(y).last().unwrap()),
    }
}
