//! Differentiable counterparts of the geometric operations.

use crate::error::{Error, Result};
use crate::geometry::{dist2, nearest_neighbors, Vec3};
use crate::nn::ops;
use crate::nn::Tensor;

fn as_points(t: &Tensor, op: &'static str) -> Result<Vec<Vec3>> {
    let (_, c) = t.dims2()?;
    if c != 3 || t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 3]));
    }
    Ok(t.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
}

fn quat4(t: &Tensor, op: &'static str) -> Result<[f64; 4]> {
    if t.numel() != 4 {
        return Err(Error::shape(op, t.shape(), &[4]));
    }
    let d = t.data();
    Ok([d[0], d[1], d[2], d[3]])
}

/// Normalizes each row of an `n×4` tensor to unit length with `w >= 0`.
pub fn normalize_quat_rows(q: &Tensor) -> Result<Tensor> {
    let (n, c) = q.dims2()?;
    if c != 4 {
        return Err(Error::shape("normalize_quat_rows", q.shape(), &[n, 4]));
    }
    let mut out = Vec::with_capacity(n * 4);
    let mut scales = Vec::with_capacity(n);
    for r in q.data().chunks_exact(4) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Numeric(format!("quaternion head output has norm {norm}")));
        }
        let s = if r[0] < 0.0 { -1.0 } else { 1.0 };
        out.extend(r.iter().map(|v| s * v / norm));
        scales.push((s, norm));
    }
    Ok(Tensor::from_op(
        "normalize_quat_rows",
        out,
        q.shape().to_vec(),
        vec![q.clone()],
        Box::new(move |g, y| {
            let mut gq = vec![0.0; n * 4];
            for i in 0..n {
                let (s, norm) = scales[i];
                let yr = &y[i * 4..i * 4 + 4];
                let gr = &g[i * 4..i * 4 + 4];
                // y = s·q/|q|  →  dL/dq = s·(g − y (y·g)) / |q|
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for k in 0..4 {
                    gq[i * 4 + k] = s * (gr[k] - yr[k] * dot) / norm;
                }
            }
            vec![Some(gq)]
        }),
    ))
}

/// Rotation matrix entries from quaternion components (unit-norm formula).
fn rot(q: [f64; 4]) -> [[f64; 3]; 3] {
    crate::geometry::Quaternion::from_array(q).to_matrix()
}

/// `∂R/∂q_k` for `k = w, x, y, z`.
fn rot_partials(q: [f64; 4]) -> [[[f64; 3]; 3]; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        [[0.0, -t * z, t * y], [t * z, 0.0, -t * x], [-t * y, t * x, 0.0]],
        [[0.0, t * y, t * z], [t * y, -2.0 * t * x, -t * w], [t * z, t * w, -2.0 * t * x]],
        [[-2.0 * t * y, t * x, t * w], [t * x, 0.0, t * z], [-t * w, t * z, -2.0 * t * y]],
        [[-2.0 * t * z, -t * w, t * x], [t * w, -2.0 * t * z, t * y], [t * x, t * y, 0.0]],
    ]
}

/// Rotates every row of an `n×3` point tensor by the quaternion `q` (4
/// elements, assumed unit-norm).
pub fn rotate_points(points: &Tensor, q: &Tensor) -> Result<Tensor> {
    let pts = as_points(points, "rotate_points")?;
    let qa = quat4(q, "rotate_points")?;
    let m = rot(qa);
    let out: Vec<f64> = pts
        .iter()
        .flat_map(|p| crate::geometry::mat_vec(&m, *p))
        .collect();
    let n = pts.len();
    Ok(Tensor::from_op(
        "rotate_points",
        out,
        vec![n, 3],
        vec![points.clone(), q.clone()],
        Box::new(move |g, _| {
            // out_i = R p_i  →  dp_i = Rᵀ g_i,  dR = Σ_i g_i p_iᵀ
            let mut gp = vec![0.0; n * 3];
            let mut gr = [[0.0; 3]; 3];
            for i in 0..n {
                let gi = &g[i * 3..i * 3 + 3];
                for a in 0..3 {
                    for b in 0..3 {
                        gp[i * 3 + b] += m[a][b] * gi[a];
                        gr[a][b] += gi[a] * pts[i][b];
                    }
                }
            }
            let parts = rot_partials(qa);
            let gq = (0..4)
                .map(|k| {
                    (0..3)
                        .flat_map(|a| (0..3).map(move |b| (a, b)))
                        .map(|(a, b)| parts[k][a][b] * gr[a][b])
                        .sum()
                })
                .collect();
            vec![Some(gp), Some(gq)]
        }),
    ))
}

/// `R(q) p + t` for every row of `points`.
pub fn transform_points(points: &Tensor, q: &Tensor, t: &Tensor) -> Result<Tensor> {
    ops::add_row(&rotate_points(points, q)?, t)
}

/// Hamilton product of two 4-element tensors, shaped `[1×4]`.
pub fn quat_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let qa = quat4(a, "quat_mul")?;
    let qb = quat4(b, "quat_mul")?;
    let left = |q: [f64; 4]| {
        let [w, x, y, z] = q;
        [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
    };
    let right = |q: [f64; 4]| {
        let [w, x, y, z] = q;
        [[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]]
    };
    let la = left(qa);
    let rb = right(qb);
    let out: Vec<f64> = (0..4).map(|i| (0..4).map(|j| la[i][j] * qb[j]).sum()).collect();
    Ok(Tensor::from_op(
        "quat_mul",
        out,
        vec![1, 4],
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let ga = (0..4).map(|j| (0..4).map(|i| rb[i][j] * g[i]).sum()).collect();
            let gb = (0..4).map(|j| (0..4).map(|i| la[i][j] * g[i]).sum()).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Differentiable Chamfer distance between two `n×3` point tensors:
/// the sum of squared nearest-neighbor distances in both directions.
pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let pa = as_points(a, "chamfer")?;
    let pb = as_points(b, "chamfer")?;
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Contract("chamfer distance of an empty cloud".into()));
    }
    let ab = nearest_neighbors(&pa, &pb);
    let ba = nearest_neighbors(&pb, &pa);
    let value = ab.iter().map(|x| x.1).sum::<f64>() + ba.iter().map(|x| x.1).sum::<f64>();
    Ok(Tensor::from_op(
        "chamfer",
        vec![value],
        Vec::new(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let g = g[0];
            let mut ga = vec![0.0; pa.len() * 3];
            let mut gb = vec![0.0; pb.len() * 3];
            for (i, &(j, _)) in ab.iter().enumerate() {
                for k in 0..3 {
                    let d = 2.0 * g * (pa[i][k] - pb[j][k]);
                    ga[i * 3 + k] += d;
                    gb[j * 3 + k] -= d;
                }
            }
            for (j, &(i, _)) in ba.iter().enumerate() {
                for k in 0..3 {
                    let d = 2.0 * g * (pb[j][k] - pa[i][k]);
                    gb[j * 3 + k] += d;
                    ga[i * 3 + k] -= d;
                }
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// `max(‖a − b‖₂, floor)` for two 3-element tensors. The gradient is zero
/// while the floor is active.
pub fn floored_distance(a: &Tensor, b: &Tensor, floor: f64) -> Result<Tensor> {
    if a.numel() != 3 || b.numel() != 3 {
        return Err(Error::shape("floored_distance", a.shape(), b.shape()));
    }
    let pa = [a.data()[0], a.data()[1], a.data()[2]];
    let pb = [b.data()[0], b.data()[1], b.data()[2]];
    let d = dist2(pa, pb).sqrt();
    let active = d > floor;
    Ok(Tensor::from_op(
        "floored_distance",
        vec![if active { d } else { floor }],
        Vec::new(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            if !active {
                return vec![Some(vec![0.0; 3]), Some(vec![0.0; 3])];
            }
            let ga: Vec<f64> = (0..3).map(|k| g[0] * (pa[k] - pb[k]) / d).collect();
            let gb = ga.iter().map(|v| -v).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}
