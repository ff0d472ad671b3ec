//! Training objectives: collision, translation, rotation and shape terms,
//! their weighted sum, and the min-of-N wrapper.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::diff::{chamfer, floored_distance, rotate_points, transform_points};
use crate::geometry::{PointCloud, Pose};
use crate::model::PosePrediction;
use crate::nn::{ops, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_t: f64,
    pub w_r: f64,
    pub w_s: f64,
    /// Scale inside the collision log.
    pub c: f64,
    /// Distance floor for the collision term.
    pub epsilon_d: f64,
    /// Replace each collision term by `max(0, term)`.
    pub clamp_collision: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_c: 0.1,
            w_t: 1.0,
            w_r: 10.0,
            w_s: 10.0,
            c: 30.0,
            epsilon_d: 1e-6,
            clamp_collision: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_c, self.w_t, self.w_r, self.w_s].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Param("loss weights must be non-negative".into()));
        }
        if !(self.c > 0.0) || !(self.epsilon_d > 0.0) {
            return Err(Error::Param(format!("C={} and epsilon_d={} must be positive", self.c, self.epsilon_d)));
        }
        Ok(())
    }
}

/// Graph-attached loss terms of one prediction.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub collision: Tensor,
    pub translation: Tensor,
    pub rotation: Tensor,
    pub shape: Tensor,
    pub total: Tensor,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub collision: f64,
    pub translation: f64,
    pub rotation: f64,
    pub shape: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self) -> LossValues {
        LossValues {
            collision: self.collision.data()[0],
            translation: self.translation.data()[0],
            rotation: self.rotation.data()[0],
            shape: self.shape.data()[0],
            total: self.total.data()[0],
        }
    }
}

/// `2/(N(N-1)) · Σ_{j<i} (1 − ln(C·d_ij))` where `d_ij` is the floored
/// distance between the centroids of transformed parts `i` and `j`.
pub fn collision_loss(pred_clouds: &[Tensor], c: f64, epsilon_d: f64, clamp: bool) -> Result<Tensor> {
    let n = pred_clouds.len();
    if n < 2 {
        return Err(Error::Contract(format!("collision loss needs at least 2 parts, got {n}")));
    }
    let centroids = pred_clouds.iter().map(ops::mean_rows).collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let d = floored_distance(&centroids[i], &centroids[j], epsilon_d)?;
            let l = ops::add_scalar(&ops::scale(&ops::ln(&ops::scale(&d, c))?, -1.0), 1.0);
            terms.push(if clamp { ops::relu(&l) } else { l });
        }
    }
    Ok(ops::scale(&ops::add_scalars(&terms)?, 2.0 / (n * (n - 1)) as f64))
}

/// `Σ_i ‖T_i − T*_i‖²`.
pub fn translation_loss(pred_t: &Tensor, gt_t: &Tensor) -> Result<Tensor> {
    let d = ops::sub(pred_t, gt_t)?;
    Ok(ops::sum(&ops::mul(&d, &d)?))
}

fn check_counts(n: usize, parts: &[PointCloud], gt: &[Pose]) -> Result<()> {
    if parts.len() != n || gt.len() != n {
        return Err(Error::Contract(format!(
            "{n} predictions, {} parts, {} ground-truth poses",
            parts.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn cloud_tensor(c: &PointCloud) -> Tensor {
    Tensor::new(c.flat(), &[c.len(), 3]).expect("n×3 cloud")
}

/// `Σ_i chamfer(R_i p_i, R*_i p_i)`, rotations only.
pub fn rotation_chamfer_loss(pred_q: &Tensor, gt: &[Pose], parts: &[PointCloud]) -> Result<Tensor> {
    let (n, _) = pred_q.dims2()?;
    check_counts(n, parts, gt)?;
    let terms = (0..n)
        .map(|i| {
            let p = cloud_tensor(&parts[i]);
            let q = ops::slice_rows(pred_q, i, i + 1)?;
            let target = Pose::new(gt[i].rotation, [0.0; 3]).apply(&parts[i]);
            chamfer(&rotate_points(&p, &q)?, &cloud_tensor(&target))
        })
        .collect::<Result<Vec<_>>>()?;
    ops::add_scalars(&terms)
}

/// Every canonical part moved by its predicted pose, as `n_pc×3` tensors.
pub fn transformed_parts(pred_q: &Tensor, pred_t: &Tensor, parts: &[PointCloud]) -> Result<Vec<Tensor>> {
    (0..parts.len())
        .map(|i| {
            transform_points(
                &cloud_tensor(&parts[i]),
                &ops::slice_rows(pred_q, i, i + 1)?,
                &ops::slice_rows(pred_t, i, i + 1)?,
            )
        })
        .collect()
}

/// Chamfer distance between the predicted and the true assembly.
pub fn shape_chamfer_loss(pred_parts: &[Tensor], gt: &[Pose], parts: &[PointCloud]) -> Result<Tensor> {
    check_counts(pred_parts.len(), parts, gt)?;
    let target = crate::geometry::assemble_shape(gt, parts)?;
    chamfer(&ops::concat_rows(pred_parts)?, &cloud_tensor(&target))
}

pub fn total_loss(pred: &PosePrediction, parts: &[PointCloud], gt: &[Pose], w: &LossWeights) -> Result<LossBreakdown> {
    let n = pred.poses.len();
    check_counts(n, parts, gt)?;
    let moved = transformed_parts(&pred.quats, &pred.translations, parts)?;
    let gt_t = Tensor::new(gt.iter().flat_map(|p| p.translation).collect(), &[n, 3])?;
    let collision = collision_loss(&moved, w.c, w.epsilon_d, w.clamp_collision)?;
    let translation = translation_loss(&pred.translations, &gt_t)?;
    let rotation = rotation_chamfer_loss(&pred.quats, gt, parts)?;
    let shape = shape_chamfer_loss(&moved, gt, parts)?;
    let total = ops::add_scalars(&[
        ops::scale(&collision, w.w_c),
        ops::scale(&translation, w.w_t),
        ops::scale(&rotation, w.w_r),
        ops::scale(&shape, w.w_s),
    ])?;
    Ok(LossBreakdown {
        collision,
        translation,
        rotation,
        shape,
        total,
    })
}

pub struct MonOutput {
    /// Breakdown of the selected sample; only its graph carries gradient.
    pub best: LossBreakdown,
    pub index: usize,
    pub prediction: PosePrediction,
    /// Total loss of every sample, in seed order.
    pub totals: Vec<f64>,
}

/// Runs one forward per seed and keeps the sample with the lowest total
/// loss (lowest index on ties). Samples are evaluated concurrently.
pub fn mon_loss<F>(forward: F, seeds: &[u64], parts: &[PointCloud], gt: &[Pose], w: &LossWeights) -> Result<MonOutput>
where
    F: Fn(u64) -> Result<PosePrediction> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Param("min-of-N needs at least one sample".into()));
    }
    let samples = seeds
        .par_iter()
        .map(|&s| {
            let pred = forward(s)?;
            let loss = total_loss(&pred, parts, gt, w)?;
            Ok((pred, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = samples.iter().map(|(_, l)| l.total.data()[0]).collect();
    let mut index = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t < totals[index] {
            index = i;
        }
    }
    let (prediction, best) = samples.into_iter().nth(index).expect("index in range");
    Ok(MonOutput {
        best,
        index,
        prediction,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;

    fn point(p: [f64; 3]) -> Tensor {
        Tensor::new(p.to_vec(), &[1, 3]).unwrap()
    }

    fn collide(cs: &[[f64; 3]]) -> f64 {
        let clouds: Vec<Tensor> = cs.iter().map(|c| point(*c)).collect();
        collision_loss(&clouds, 30.0, 1e-6, false).unwrap().item().unwrap()
    }

    #[test]
    fn collision_hand_values() {
        let e = std::f64::consts::E;
        assert!(collide(&[[0.0; 3], [e / 30.0, 0.0, 0.0]]).abs() < 1e-12);
        assert!((collide(&[[0.0; 3], [1.0 / 30.0, 0.0, 0.0]]) - 1.0).abs() < 1e-12);
        let three = collide(&[[0.0; 3], [1.0 / 30.0, 0.0, 0.0], [2.0 / 30.0, 0.0, 0.0]]);
        assert!((three - (3.0 - 2f64.ln()) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn collision_is_negative_far_apart_unless_clamped() {
        let clouds = [point([0.0; 3]), point([1.0, 0.0, 0.0])];
        assert!(collision_loss(&clouds, 30.0, 1e-6, false).unwrap().item().unwrap() < 0.0);
        assert_eq!(collision_loss(&clouds, 30.0, 1e-6, true).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn collision_needs_two_parts() {
        assert!(matches!(collision_loss(&[point([0.0; 3])], 30.0, 1e-6, false), Err(Error::Contract(_))));
    }

    #[test]
    fn coincident_centroids_hit_the_floor() {
        let v = collide(&[[0.0; 3], [0.0; 3]]);
        assert!((v - (1.0 - (30.0 * 1e-6f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn translation_examples() {
        let gt = Tensor::zeros(&[2, 3]);
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        assert_eq!(translation_loss(&p, &gt).unwrap().item().unwrap(), 5.0);
        assert_eq!(translation_loss(&gt, &gt).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn rotation_examples() {
        let part = vec![PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap()];
        let half_turn = Quaternion::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::PI).unwrap();
        let gt = [Pose::new(half_turn, [0.0; 3])];
        let id = Tensor::new(vec![1.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
        let v = rotation_chamfer_loss(&id, &gt, &part).unwrap().item().unwrap();
        assert!((v - 8.0).abs() < 1e-12);

        // Points on the z-axis do not see rotations about z.
        let axis = vec![PointCloud::new(vec![[0.0, 0.0, 1.0], [0.0, 0.0, -0.5]]).unwrap()];
        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.7).unwrap();
        let qt = Tensor::new(q.to_array().to_vec(), &[1, 4]).unwrap();
        let gt = [Pose::new(Quaternion::IDENTITY, [0.0; 3])];
        assert!(rotation_chamfer_loss(&qt, &gt, &axis).unwrap().item().unwrap() < 1e-24);
    }

    #[test]
    fn shape_loss_hand_case() {
        // Two parts with two points each; predictions shift part 1 by +1 in x.
        let parts = vec![
            PointCloud::new(vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap(),
            PointCloud::new(vec![[0.0, 0.0, 1.0], [0.0, 1.0, 1.0]]).unwrap(),
        ];
        let gt = [Pose::IDENTITY, Pose::IDENTITY];
        let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![0.0; 3], vec![1.0, 0.0, 0.0]]).unwrap();
        let moved = transformed_parts(&q, &t, &parts).unwrap();
        let v = shape_chamfer_loss(&moved, &gt, &parts).unwrap().item().unwrap();
        // Predicted (1,0,1),(1,1,1) each have nearest true point at squared
        // distance 1, and vice versa for the true (0,0,1),(0,1,1).
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_identical_parts_cost_nothing() {
        let cloud = PointCloud::new(vec![[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.3]]).unwrap();
        let parts = vec![cloud.clone(), cloud];
        let a = Pose::new(Quaternion::from_axis_angle([1.0, 1.0, 0.0], 0.4).unwrap(), [0.5, 0.0, 0.0]);
        let b = Pose::new(Quaternion::from_axis_angle([0.0, 1.0, 1.0], -1.1).unwrap(), [0.0, -0.3, 0.2]);
        let gt = [a, b];
        let q = Tensor::from_rows(&[b.rotation.to_array().to_vec(), a.rotation.to_array().to_vec()]).unwrap();
        let t = Tensor::from_rows(&[b.translation.to_vec(), a.translation.to_vec()]).unwrap();
        let moved = transformed_parts(&q, &t, &parts).unwrap();
        assert!(shape_chamfer_loss(&moved, &gt, &parts).unwrap().item().unwrap() < 1e-24);
        assert!(rotation_chamfer_loss(&q, &gt, &parts).unwrap().item().unwrap() > 0.0);
    }
}
