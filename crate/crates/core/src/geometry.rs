//! Small geometric vocabulary shared by every stage: points, rigid poses,
//! pinhole intrinsics and axis-aligned boxes.

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Pose = Isometry3<f64>;

/// Pinhole intrinsics in pixels. Pixel `(u, v)` maps to the camera ray
/// `((u - cx) / fx, (v - cy) / fy, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center and the
    /// given horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Unnormalized camera-frame direction with unit z.
    #[inline]
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i] < self.max[i]) && self.min.iter().chain(self.max.iter()).all(|v| v.is_finite())
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn padded(&self, margin: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::repeat(margin),
            max: self.max + Vec3::repeat(margin),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    /// Maps a point into box-local `[-1, 1]^3`.
    #[inline]
    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        let c = self.center();
        let h = self.extent() * 0.5;
        Vec3::new((p.x - c.x) / h.x, (p.y - c.y) / h.y, (p.z - c.z) / h.z)
    }

    /// Index of the cell holding `p` in a `k x k x k` grid over the box,
    /// x fastest. Points outside are clamped to the border cells.
    pub fn cell(&self, p: &Vec3, k: usize) -> usize {
        let q = self.normalize(p);
        let idx = |v: f64| (((v + 1.0) * 0.5 * k as f64).floor() as isize).clamp(0, k as isize - 1) as usize;
        idx(q.x) + k * (idx(q.y) + k * idx(q.z))
    }

    /// Slab test. Returns the parametric entry/exit distances along a unit
    /// direction, clamped to `t >= 0`.
    pub fn intersect_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-12 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 >= t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }
}

/// Camera-to-world pose looking from `eye` at `target`, with camera +y
/// pointing as close to world `-up` as possible (OpenCV convention:
/// x right, y down, z forward).
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
    let z = (target - eye).normalize();
    let mut x = z.cross(&up);
    if x.norm() < 1e-9 {
        x = z.cross(&Vec3::new(1.0, 0.0, 0.0));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rot = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let q = UnitQuaternion::from_matrix(&rot);
    Isometry3::from_parts(Translation3::from(eye), q)
}

#[inline]
pub fn transform(pose: &Pose, p: &Vec3) -> Vec3 {
    (pose * Point3::from(*p)).coords
}

#[inline]
pub fn rotate(pose: &Pose, v: &Vec3) -> Vec3 {
    pose.rotation * v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_z_toward_target() {
        let pose = look_at(Vec3::new(0.0, -3.0, 0.0), Vec3::zeros(), Vec3::z());
        let fwd = rotate(&pose, &Vec3::z());
        assert!((fwd - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        // camera y (down) maps to world -z
        let down = rotate(&pose, &Vec3::y());
        assert!((down - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn slab_test() {
        let b = Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let (t0, t1) = b.intersect_ray(&Vec3::new(0.0, 0.0, -3.0), &Vec3::z()).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        assert!(b.intersect_ray(&Vec3::new(0.0, 2.0, -3.0), &Vec3::z()).is_none());
        assert!(b.intersect_ray(&Vec3::new(0.0, 0.0, 3.0), &Vec3::z()).is_none());
    }

    #[test]
    fn cells_index_the_grid() {
        let b = Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        assert_eq!(b.cell(&Vec3::repeat(-1.0), 4), 0);
        assert_eq!(b.cell(&Vec3::repeat(1.0), 4), 63);
        assert_eq!(b.cell(&Vec3::new(0.6, -0.9, 0.1), 4), 3 + 4 * (0 + 4 * 2));
        assert_eq!(b.cell(&Vec3::new(5.0, 0.0, -5.0), 4), 3 + 4 * 2);
        let mut seen = [false; 8];
        for c in b.corners() {
            seen[b.cell(&c, 2)] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }
}
