//! Point clouds, unit-quaternion poses and Chamfer distance.

pub mod diff;
pub mod ply;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;

pub type Vec3 = [f64; 3];

/// Euler convention used for rotation error reporting.
pub const EULER_CONVENTION: &str = "intrinsic-XYZ-degrees";

fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite point coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `n×3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(Error::shape("point cloud", &[data.len()], &[3]));
        }
        Self::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    pub fn translated(&self, t: Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect(),
        }
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Rotation quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit norm with `w >= 0`.
    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 1e-12) {
            return Err(Error::Numeric(format!("cannot normalize quaternion of norm {n}")));
        }
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(Self::new(self.w * s, self.x * s, self.y * s, self.z * s))
    }

    pub fn from_axis_angle(axis: Vec3, radians: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > 0.0) {
            return Err(Error::Numeric("zero rotation axis".into()));
        }
        let (s, c) = (radians / 2.0).sin_cos();
        Ok(Self::new(c, axis[0] / n * s, axis[1] / n * s, axis[2] / n * s))
    }

    /// Uniformly distributed rotation.
    pub fn random(rng: &mut Rng) -> Self {
        loop {
            let q = Self::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            if let Ok(q) = q.normalize() {
                return q;
            }
        }
    }

    /// Hamilton product `self ⊗ rhs`: rotating by `rhs` first, then `self`.
    pub fn mul(self, r: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * r.w - a.x * r.x - a.y * r.y - a.z * r.z,
            a.w * r.x + a.x * r.w + a.y * r.z - a.z * r.y,
            a.w * r.y - a.x * r.z + a.y * r.w + a.z * r.x,
            a.w * r.z + a.x * r.y - a.y * r.x + a.z * r.w,
        )
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        mat_vec(&self.to_matrix(), v)
    }

    /// Intrinsic X-Y-Z angles `(roll, pitch, yaw)` in degrees, each in
    /// `(-180, 180]`, such that `R = Rx(roll) · Ry(pitch) · Rz(yaw)`.
    /// Within 1e-6° of gimbal lock the roll is set to zero.
    pub fn to_euler_deg(self) -> Vec3 {
        let m = self.to_matrix();
        let pitch = m[0][2].clamp(-1.0, 1.0).asin();
        let (roll, yaw) = if (90.0 - pitch.to_degrees().abs()) < 1e-6 {
            (0.0, m[1][0].atan2(m[1][1]))
        } else {
            ((-m[1][2]).atan2(m[2][2]), (-m[0][1]).atan2(m[0][0]))
        };
        [roll, pitch, yaw].map(|a| wrap_deg(a.to_degrees()))
    }

    pub fn from_euler_deg(e: Vec3) -> Quaternion {
        let [a, b, c] = e.map(f64::to_radians);
        let qx = Quaternion::new((a / 2.0).cos(), (a / 2.0).sin(), 0.0, 0.0);
        let qy = Quaternion::new((b / 2.0).cos(), 0.0, (b / 2.0).sin(), 0.0);
        let qz = Quaternion::new((c / 2.0).cos(), 0.0, 0.0, (c / 2.0).sin());
        qx.mul(qy).mul(qz)
    }

    /// Geodesic angle between two rotations, in degrees.
    pub fn angle_to_deg(self, other: Quaternion) -> f64 {
        let d = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z).abs();
        (2.0 * d.min(1.0).acos()).to_degrees()
    }
}

/// Maps an angle in degrees into `(-180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rigid transform: rotate, then translate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Quaternion::IDENTITY,
        translation: [0.0; 3],
    };

    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let r = self.rotation.rotate(p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let m = self.rotation.to_matrix();
        let t = self.translation;
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| {
                    let r = mat_vec(&m, *p);
                    [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
                })
                .collect(),
        }
    }

    /// The pose equivalent to applying `self` first and `next` second.
    pub fn then(&self, next: &Pose) -> Pose {
        let t = next.apply_point(self.translation);
        Pose::new(next.rotation.mul(self.rotation), t)
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.conjugate();
        let t = inv.rotate(self.translation);
        Pose::new(inv, [-t[0], -t[1], -t[2]])
    }

    /// `w x y z tx ty tz` in shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let q = self.rotation;
        let t = self.translation;
        format!("{} {} {} {} {} {} {}", q.w, q.x, q.y, q.z, t[0], t[1], t[2])
    }

    pub fn from_text(s: &str) -> std::result::Result<Pose, String> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 7 {
            return Err(format!("expected 7 numbers, found {}", v.len()));
        }
        Ok(Pose::new(Quaternion::new(v[0], v[1], v[2], v[3]), [v[4], v[5], v[6]]))
    }
}

/// For every point of `from`, the index of and squared distance to its
/// nearest point in `to` (first index on ties). Brute force.
pub fn nearest_neighbors(from: &[Vec3], to: &[Vec3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = dist2(*p, *q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Sum of squared nearest-neighbor distances in both directions.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(&a.points, &b.points)
}

pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("chamfer distance of an empty cloud".into()));
    }
    let ab: f64 = nearest_neighbors(a, b).iter().map(|(_, d)| d).sum();
    let ba: f64 = nearest_neighbors(b, a).iter().map(|(_, d)| d).sum();
    Ok(ab + ba)
}

/// Chamfer distance divided by the total number of points in both clouds.
pub fn chamfer_mean(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(chamfer_distance(a, b)? / (a.len() + b.len()) as f64)
}

/// Union of every cloud moved by its pose, in part order.
pub fn assemble_shape(poses: &[Pose], clouds: &[PointCloud]) -> Result<PointCloud> {
    if poses.len() != clouds.len() {
        return Err(Error::Contract(format!(
            "{} poses for {} clouds",
            poses.len(),
            clouds.len()
        )));
    }
    let points = poses
        .iter()
        .zip(clouds)
        .flat_map(|(p, c)| p.apply(c).points)
        .collect();
    PointCloud::new(points)
}
