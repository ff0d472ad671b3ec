//! Adapter for Breaking-Bad-style fracture data. Not implemented.
//!
//! The expected field mapping onto [`ShapeRecord`]:
//!
//! | source                                   | record field                       |
//! |------------------------------------------|------------------------------------|
//! | object directory name                    | `shape_id`                         |
//! | category directory (e.g. `BeerBottle`)   | `category`                         |
//! | `fractured_k/piece_*.obj`                | one part each, mesh surface sampled to `n_pc` points |
//! | piece vertices (already assembled)       | world frame; canonicalize as the generator does and store the inverse as `gt_poses` |
//! | shared faces / vertices within a radius  | `contacts`, mutually nearest pairs in canonical frames |
//!
//! Shapes with more than 20 pieces are skipped, matching the generator cap.

use std::path::Path;

use super::ShapeRecord;
use crate::error::{Error, Result};

pub fn import_breaking_bad(dir: &Path) -> Result<Vec<ShapeRecord>> {
    Err(Error::Unsupported(format!(
        "importing {} requires a mesh reader; only the field mapping is documented",
        dir.display()
    )))
}
