//! Cases bundled with the library.

use crate::grid::{Grid, GridError};

const TOY14: &str = include_str!("../cases/toy14.json");

/// Names accepted by [`builtin`].
pub const BUILTIN: &[&str] = &["toy14"];

/// 14-bus toy network (IEEE 14-bus topology and reactances) with five
/// generators, eleven loads and flow limits tight enough to congest at
/// high load.
pub fn toy14() -> Grid {
    Grid::from_json(TOY14).expect("bundled toy14 case is valid")
}

pub fn builtin(name: &str) -> Option<Grid> {
    match name {
        "toy14" => Some(toy14()),
        _ => None,
    }
}

/// Resolve a `--case` argument: a bundled case name or a path to a case file.
pub fn load(name_or_path: &str) -> Result<Grid, GridError> {
    match builtin(name_or_path) {
        Some(grid) => Ok(grid),
        None => crate::grid::parse_case(name_or_path),
    }
}
