use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotate, transform, Aabb, Pose, Vec3};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Half extents along the local axes.
    Box { half_extents: [f64; 3] },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn is_valid(&self) -> bool {
        match *self {
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
            Shape::Cylinder { radius, half_height } => {
                radius > 0.0 && half_height > 0.0 && radius.is_finite() && half_height.is_finite()
            }
        }
    }

    fn local_half_extents(&self) -> Vec3 {
        match *self {
            Shape::Sphere { radius } => Vec3::repeat(radius),
            Shape::Box { half_extents } => Vec3::from(half_extents),
            Shape::Cylinder { radius, half_height } => Vec3::new(radius, radius, half_height),
        }
    }

    /// Point-in-solid test in local coordinates (boundary inclusive).
    pub fn contains_local(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Sphere { radius } => p.norm_squared() <= radius * radius,
            Shape::Box { half_extents } => (0..3).all(|i| p[i].abs() <= half_extents[i]),
            Shape::Cylinder { radius, half_height } => {
                p.z.abs() <= half_height && p.x * p.x + p.y * p.y <= radius * radius
            }
        }
    }

    /// First positive ray parameter where the local ray enters the solid.
    /// `dir` must be unit length.
    pub fn intersect_local(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match *self {
            Shape::Sphere { radius } => {
                let b = o.dot(d);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = -b - s;
                let t1 = -b + s;
                if t0 > HIT_EPS {
                    Some(t0)
                } else if t1 > HIT_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Box { half_extents } => {
                let b = Aabb::new(-Vec3::from(half_extents), Vec3::from(half_extents));
                let (t0, t1) = b.intersect_ray(o, d)?;
                if t0 > HIT_EPS {
                    Some(t0)
                } else if t1 > HIT_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best = f64::INFINITY;
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-14 {
                    let b = o.x * d.x + o.y * d.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            if t > HIT_EPS && (o.z + t * d.z).abs() <= half_height {
                                best = best.min(t);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-14 {
                    for zc in [-half_height, half_height] {
                        let t = (zc - o.z) / d.z;
                        if t > HIT_EPS {
                            let x = o.x + t * d.x;
                            let y = o.y + t * d.y;
                            if x * x + y * y <= radius * radius {
                                best = best.min(t);
                            }
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half_extents: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
            Shape::Cylinder { radius, half_height } => {
                2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius
            }
        }
    }

    /// Area-uniform random surface point in local coordinates.
    pub fn sample_surface_local<R: Rng>(&self, rng: &mut R) -> Vec3 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => {
                let v = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                v.normalize() * radius
            }
            Shape::Box { half_extents: [a, b, c] } => {
                // face pairs with normals x, y, z
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, ar) in areas.iter().enumerate() {
                    if pick < *ar {
                        axis = i;
                        break;
                    }
                    pick -= ar;
                }
                let h = [a, b, c];
                let mut p = Vec3::zeros();
                for i in 0..3 {
                    p[i] = if i == axis {
                        if rng.random::<bool>() { h[i] } else { -h[i] }
                    } else {
                        (rng.random::<f64>() * 2.0 - 1.0) * h[i]
                    };
                }
                p
            }
            Shape::Cylinder { radius, half_height } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                let phi = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (side + caps) < side {
                    let z = (rng.random::<f64>() * 2.0 - 1.0) * half_height;
                    Vec3::new(radius * phi.cos(), radius * phi.sin(), z)
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if rng.random::<bool>() { half_height } else { -half_height };
                    Vec3::new(r * phi.cos(), r * phi.sin(), z)
                }
            }
        }
    }

    /// Distance from a local point to the surface (exact for sphere and
    /// cylinder side/caps, exact for boxes).
    pub fn surface_distance_local(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => (p.norm() - radius).abs(),
            Shape::Box { half_extents } => {
                let h = Vec3::from(half_extents);
                let q = p.abs() - h;
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            Shape::Cylinder { radius, half_height } => {
                let r = (p.x * p.x + p.y * p.y).sqrt();
                let dx = r - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                let inside = dx.max(dz).min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

/// One object instance of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    /// 1-based instance id; 0 is reserved for "no instance" in masks.
    pub instance_id: u32,
    pub shape: Shape,
    /// Object-to-world transform.
    pub pose: Pose,
    pub albedo: [f64; 3],
    pub class_id: u32,
    pub gt_clip_feature: Vec<f64>,
    pub gt_caption_feature: Vec<f64>,
}

impl Primitive {
    pub fn world_aabb(&self) -> Aabb {
        let h = self.shape.local_half_extents();
        let local = Aabb::new(-h, h);
        Aabb::from_points(local.corners().iter().map(|c| transform(&self.pose, c)).collect::<Vec<_>>().iter())
    }

    /// World-space ray hit distance; `dir` must be unit length.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let inv = self.pose.inverse();
        let o = transform(&inv, origin);
        let d = rotate(&inv, dir);
        self.shape.intersect_local(&o, &d)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.shape.contains_local(&transform(&self.pose.inverse(), p))
    }

    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        self.shape.surface_distance_local(&transform(&self.pose.inverse(), p))
    }

    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        transform(&self.pose, &self.shape.sample_surface_local(rng))
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation.vector
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_hit_from_outside() {
        let s = Shape::Sphere { radius: 1.0 };
        let t = s.intersect_local(&Vec3::new(0.0, 0.0, -3.0), &Vec3::z()).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cylinder_hits_cap_and_side() {
        let c = Shape::Cylinder { radius: 0.5, half_height: 1.0 };
        let t = c.intersect_local(&Vec3::new(0.0, 0.0, 3.0), &-Vec3::z()).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        let t = c.intersect_local(&Vec3::new(-2.0, 0.0, 0.3), &Vec3::x()).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
        assert!(c.intersect_local(&Vec3::new(-2.0, 0.0, 1.5), &Vec3::x()).is_none());
    }

    #[test]
    fn surface_samples_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [
            Shape::Sphere { radius: 0.3 },
            Shape::Box { half_extents: [0.1, 0.2, 0.3] },
            Shape::Cylinder { radius: 0.2, half_height: 0.4 },
        ] {
            for _ in 0..500 {
                let p = s.sample_surface_local(&mut rng);
                assert!(s.surface_distance_local(&p) < 1e-9, "{s:?} {p:?}");
            }
        }
    }
}
