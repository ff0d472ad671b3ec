//! Evaluation metrics and min-matching sample selection.
//!
//! SCD is the Chamfer distance between assembled shapes divided by the total
//! point count of both shapes. Part accuracy uses the same mean form per
//! part. Rotation RMSE compares intrinsic X-Y-Z Euler angles in degrees.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Contact, ShapeRecord};
use crate::error::{Error, Result};
use crate::geometry::{assemble_shape, chamfer_mean, dist2, wrap_deg, PointCloud, Pose, EULER_CONVENTION};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Part accuracy: per-part mean-form Chamfer must be below this.
    pub pa_tau: f64,
    /// Connectivity accuracy: squared contact gap must be below this.
    pub ca_tau: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            pa_tau: 0.01,
            ca_tau: 0.01,
        }
    }
}

pub const SCD_NORMALIZATION: &str = "chamfer-sum/(|pred|+|gt|)";

fn check_len(pred: &[Pose], gt: &[Pose]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!("{} predicted vs {} true poses", pred.len(), gt.len())));
    }
    Ok(())
}

pub fn shape_cd(pred: &[Pose], gt: &[Pose], parts: &[PointCloud]) -> Result<f64> {
    check_len(pred, gt)?;
    chamfer_mean(&assemble_shape(pred, parts)?, &assemble_shape(gt, parts)?)
}

pub fn part_accuracy(pred: &[Pose], gt: &[Pose], parts: &[PointCloud], tau: f64) -> Result<f64> {
    check_len(pred, gt)?;
    let mut correct = 0;
    for ((p, g), c) in pred.iter().zip(gt).zip(parts) {
        if chamfer_mean(&p.apply(c), &g.apply(c))? < tau {
            correct += 1;
        }
    }
    Ok(correct as f64 / pred.len() as f64)
}

/// Fraction of contacts whose two points land within `sqrt(tau)` of each
/// other. An empty contact list scores 1.0 and logs a warning.
pub fn connectivity_accuracy(pred: &[Pose], contacts: &[Contact], tau: f64) -> Result<f64> {
    if contacts.is_empty() {
        log::warn!("connectivity accuracy on a shape without contacts; reporting 1.0");
        return Ok(1.0);
    }
    let mut correct = 0;
    for c in contacts {
        let (Some(zi), Some(zj)) = (pred.get(c.i), pred.get(c.j)) else {
            return Err(Error::Contract(format!("contact ({}, {}) outside {} parts", c.i, c.j, pred.len())));
        };
        if dist2(zi.apply_point(c.on_i), zj.apply_point(c.on_j)) < tau {
            correct += 1;
        }
    }
    Ok(correct as f64 / contacts.len() as f64)
}

/// RMSE over all `3N` wrapped Euler-angle differences, in degrees.
pub fn rmse_rotation(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    check_len(pred, gt)?;
    let mut sq = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (p.rotation.to_euler_deg(), g.rotation.to_euler_deg());
        for k in 0..3 {
            sq += wrap_deg(a[k] - b[k]).powi(2);
        }
    }
    Ok((sq / (3 * pred.len()) as f64).sqrt())
}

/// RMSE of per-part geodesic angles, in degrees.
pub fn rmse_geodesic(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    check_len(pred, gt)?;
    let sq: f64 = pred.iter().zip(gt).map(|(p, g)| p.rotation.angle_to_deg(g.rotation).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// RMSE over all `3N` translation components.
pub fn rmse_translation(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    check_len(pred, gt)?;
    let sq: f64 = pred.iter().zip(gt).map(|(p, g)| dist2(p.translation, g.translation)).sum();
    Ok((sq / (3 * pred.len()) as f64).sqrt())
}

/// Index of the smallest SCD; the lowest index wins ties.
pub fn min_matching_select(scds: &[f64]) -> Result<usize> {
    if scds.is_empty() {
        return Err(Error::Param("min matching over no samples".into()));
    }
    let mut best = 0;
    for (i, &s) in scds.iter().enumerate() {
        if s < scds[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub shape_id: String,
    pub n_parts: usize,
    /// Sample chosen by min matching.
    pub selected: usize,
    pub scd: f64,
    pub pa: f64,
    pub ca: f64,
    pub rmse_r: f64,
    pub rmse_r_geodesic: f64,
    pub rmse_t: f64,
}

/// Scores every candidate pose set by SCD and reports all metrics of the
/// best one.
pub fn evaluate_shape(candidates: &[Vec<Pose>], record: &ShapeRecord, th: &Thresholds) -> Result<ShapeMetrics> {
    let scds = candidates
        .iter()
        .map(|c| shape_cd(c, &record.gt_poses, &record.parts))
        .collect::<Result<Vec<_>>>()?;
    let selected = min_matching_select(&scds)?;
    let pred = &candidates[selected];
    Ok(ShapeMetrics {
        shape_id: record.shape_id.clone(),
        n_parts: record.n_parts(),
        selected,
        scd: scds[selected],
        pa: part_accuracy(pred, &record.gt_poses, &record.parts, th.pa_tau)?,
        ca: connectivity_accuracy(pred, &record.contacts, th.ca_tau)?,
        rmse_r: rmse_rotation(pred, &record.gt_poses)?,
        rmse_r_geodesic: rmse_geodesic(pred, &record.gt_poses)?,
        rmse_t: rmse_translation(pred, &record.gt_poses)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Thresholds,
    pub per_shape: Vec<ShapeMetrics>,
}

/// Means over shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scd: f64,
    pub pa: f64,
    pub ca: f64,
    pub rmse_r: f64,
    pub rmse_r_geodesic: f64,
    pub rmse_t: f64,
}

const CSV_HEADER: &str = "shape_id,n_parts,selected,scd,pa,ca,rmse_r_deg,rmse_r_geodesic_deg,rmse_t";

impl MetricsReport {
    pub fn aggregate(&self) -> Aggregate {
        let n = self.per_shape.len().max(1) as f64;
        let mean = |f: fn(&ShapeMetrics) -> f64| self.per_shape.iter().map(f).sum::<f64>() / n;
        Aggregate {
            scd: mean(|m| m.scd),
            pa: mean(|m| m.pa),
            ca: mean(|m| m.ca),
            rmse_r: mean(|m| m.rmse_r),
            rmse_r_geodesic: mean(|m| m.rmse_r_geodesic),
            rmse_t: mean(|m| m.rmse_t),
        }
    }

    fn metadata(&self) -> String {
        format!(
            "# pa_tau={} ca_tau={} scd={} euler={}\n",
            self.thresholds.pa_tau, self.thresholds.ca_tau, SCD_NORMALIZATION, EULER_CONVENTION
        )
    }

    /// One row per shape plus a final `mean` row, after a `#` metadata line.
    pub fn to_csv(&self) -> String {
        let mut s = self.metadata();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for m in &self.per_shape {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                m.shape_id, m.n_parts, m.selected, m.scd, m.pa, m.ca, m.rmse_r, m.rmse_r_geodesic, m.rmse_t
            );
        }
        let a = self.aggregate();
        let _ = writeln!(
            s,
            "mean,,,{},{},{},{},{},{}",
            a.scd, a.pa, a.ca, a.rmse_r, a.rmse_r_geodesic, a.rmse_t
        );
        s
    }

    /// Aggregate table with SCD scaled by 1e3.
    pub fn to_table(&self) -> String {
        let a = self.aggregate();
        let mut s = self.metadata();
        let _ = writeln!(
            s,
            "{:>8} {:>12} {:>8} {:>8} {:>12} {:>12} {:>10}",
            "shapes", "SCD(x1e-3)", "PA", "CA", "RMSE(R)", "geodesic", "RMSE(T)"
        );
        let _ = writeln!(
            s,
            "{:>8} {:>12.4} {:>8.4} {:>8.4} {:>12.4} {:>12.4} {:>10.4}",
            self.per_shape.len(),
            a.scd * 1e3,
            a.pa,
            a.ca,
            a.rmse_r,
            a.rmse_r_geodesic,
            a.rmse_t
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;

    fn pose(deg_z: f64, t: [f64; 3]) -> Pose {
        Pose::new(Quaternion::from_euler_deg([0.0, 0.0, deg_z]), t)
    }

    fn two_parts() -> Vec<PointCloud> {
        vec![
            PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]).unwrap(),
            PointCloud::new(vec![[0.0, 0.1, 0.0], [0.0, 0.0, 0.1]]).unwrap(),
        ]
    }

    #[test]
    fn selection_rules() {
        assert_eq!(min_matching_select(&[5.0]).unwrap(), 0);
        assert_eq!(min_matching_select(&[3.0, 1.0, 2.0]).unwrap(), 1);
        assert_eq!(min_matching_select(&[2.0, 1.0, 1.0]).unwrap(), 1);
    }

    #[test]
    fn scd_ignores_density() {
        let a = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let b = PointCloud::new(vec![[0.0, 0.5, 0.0], [1.0, 0.5, 0.0]]).unwrap();
        let doubled = |c: &PointCloud| PointCloud::new([c.points(), c.points()].concat()).unwrap();
        let id = [Pose::IDENTITY];
        let one = shape_cd(&id, &id, std::slice::from_ref(&a)).unwrap();
        assert_eq!(one, 0.0);
        let s1 = chamfer_mean(&a, &b).unwrap();
        let s2 = chamfer_mean(&doubled(&a), &doubled(&b)).unwrap();
        assert!((s1 - 0.25).abs() < 1e-15 && (s1 - s2).abs() < 1e-15);
    }

    #[test]
    fn pa_counts_displaced_parts() {
        let parts = two_parts();
        let gt = [Pose::IDENTITY, Pose::IDENTITY];
        assert_eq!(part_accuracy(&gt, &gt, &parts, 0.01).unwrap(), 1.0);
        let far = [Pose::IDENTITY, pose(0.0, [5.0, 0.0, 0.0])];
        assert_eq!(part_accuracy(&far, &gt, &parts, 0.01).unwrap(), 0.5);
    }

    #[test]
    fn pa_threshold_edge() {
        // A one-point part moved by d has mean-form Chamfer 2d²/2 = d².
        let parts = vec![PointCloud::new(vec![[0.0; 3]]).unwrap()];
        let gt = [Pose::IDENTITY];
        let tau: f64 = 0.01;
        let at = [pose(0.0, [(2.0 * tau).sqrt(), 0.0, 0.0])];
        assert_eq!(part_accuracy(&at, &gt, &parts, tau).unwrap(), 0.0);
        assert_eq!(part_accuracy(&at, &gt, &parts, 2.0 * tau + 1e-12).unwrap(), 1.0);
    }

    #[test]
    fn ca_cases() {
        let contacts = [Contact {
            i: 0,
            j: 1,
            on_i: [0.5, 0.0, 0.0],
            on_j: [-0.5, 0.0, 0.0],
        }];
        let gt = [pose(0.0, [0.0; 3]), pose(0.0, [1.0, 0.0, 0.0])];
        assert_eq!(connectivity_accuracy(&gt, &contacts, 0.01).unwrap(), 1.0);
        let off = [pose(0.0, [0.0; 3]), pose(0.0, [1.2, 0.0, 0.0])];
        // Gap 0.2, squared 0.04.
        assert_eq!(connectivity_accuracy(&off, &contacts, 0.01).unwrap(), 0.0);
        assert_eq!(connectivity_accuracy(&off, &contacts, 0.05).unwrap(), 1.0);
        assert_eq!(connectivity_accuracy(&off, &[], 0.01).unwrap(), 1.0);
    }

    #[test]
    fn rmse_cases() {
        let gt = [pose(0.0, [0.0; 3])];
        let z90 = [pose(90.0, [0.0; 3])];
        assert!((rmse_rotation(&z90, &gt).unwrap() - 90.0 / 3f64.sqrt()).abs() < 1e-9);
        assert_eq!(rmse_rotation(&gt, &gt).unwrap(), 0.0);
        let a = [pose(179.0, [0.0; 3])];
        let b = [pose(-179.0, [0.0; 3])];
        assert!((rmse_rotation(&a, &b).unwrap() - 2.0 / 3f64.sqrt()).abs() < 1e-9);
        let t = [pose(0.0, [1.0, 2.0, 2.0])];
        assert!((rmse_translation(&t, &gt).unwrap() - 3f64.sqrt()).abs() < 1e-12);
    }
}
