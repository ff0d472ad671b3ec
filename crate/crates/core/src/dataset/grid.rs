use std::collections::HashMap;

use crate::geometry::{dist2, Vec3};

/// Uniform hash grid for fixed-radius neighbor queries.
pub(crate) struct SpatialGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> SpatialGrid<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: Vec3, cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Indices within `radius` (≤ cell size) of `p`, in ascending order.
    pub fn within(&self, p: Vec3, radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell);
        let k = Self::key(p, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(ids.iter().copied().filter(|&j| dist2(self.points[j], p) <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
