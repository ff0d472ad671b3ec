//! Fractured-shape records: synthetic generation, storage and splitting.

mod generate;
mod grid;
pub mod import;
mod io;

pub use generate::{generate_dataset, generate_shape, GenConfig, Primitive};
pub use io::{load_dataset, save_dataset, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::geometry::{dist2, PointCloud, Pose, Vec3};
use crate::nn::Rng;

/// A ground-truth contact: `on_i` on part `i` and `on_j` on part `j`, each in
/// its part's canonical frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    pub i: usize,
    pub j: usize,
    pub on_i: Vec3,
    pub on_j: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub category: String,
    /// Canonical (zero-centroid, randomly rotated) part clouds.
    pub parts: Vec<PointCloud>,
    /// Poses moving each canonical part back into the assembled shape.
    pub gt_poses: Vec<Pose>,
    pub contacts: Vec<Contact>,
}

impl ShapeRecord {
    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn n_pc(&self) -> usize {
        self.parts.first().map_or(0, PointCloud::len)
    }

    /// Checks the record invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.parts.len();
        let fail = |m: String| Err(Error::Contract(format!("{}: {m}", self.shape_id)));
        if !(2..=20).contains(&n) {
            return fail(format!("{n} parts"));
        }
        if self.gt_poses.len() != n {
            return fail(format!("{} poses for {n} parts", self.gt_poses.len()));
        }
        if self.parts.iter().any(|p| p.len() != self.n_pc()) {
            return fail("ragged part sizes".into());
        }
        for (i, p) in self.parts.iter().enumerate() {
            let c = p.centroid();
            if dist2(c, [0.0; 3]).sqrt() >= 1e-9 {
                return fail(format!("part {i} centroid {c:?}"));
            }
        }
        for (i, p) in self.gt_poses.iter().enumerate() {
            if (p.rotation.norm() - 1.0).abs() > 1e-9 {
                return fail(format!("pose {i} rotation not unit"));
            }
        }
        for c in &self.contacts {
            if c.i >= n || c.j >= n || c.i == c.j {
                return fail(format!("contact between {} and {}", c.i, c.j));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Seeded shuffle into train/val/test. Train and val sizes are rounded from
/// their fractions; test takes the remainder.
pub fn split(
    records: &[ShapeRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<ShapeRecord>, Vec<ShapeRecord>, Vec<ShapeRecord>)> {
    check_fractions(&fractions)?;
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |r: &[usize]| r.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&idx[..n_train]),
        take(&idx[n_train..n_train + n_val]),
        take(&idx[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<ShapeRecord> {
        (0..n)
            .map(|i| ShapeRecord {
                shape_id: format!("s{i}"),
                category: "box".into(),
                parts: vec![],
                gt_poses: vec![],
                contacts: vec![],
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let recs = dummy(100);
        let (a, b, c) = split(&recs, [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut ids: Vec<_> = a.iter().chain(&b).chain(&c).map(|r| r.shape_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        let (a2, _, _) = split(&recs, [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!(a, a2);
        let (a3, _, _) = split(&recs, [0.8, 0.1, 0.1], 5).unwrap();
        assert_ne!(a, a3);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split(&dummy(3), [0.5, 0.5, 0.5], 0).is_err());
    }
}
