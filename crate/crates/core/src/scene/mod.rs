//! Synthetic world generation: analytic primitives, per-agent RGB-D frames
//! and segmentation corruption.

pub mod config;
pub mod corrupt;
pub mod primitive;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::random_unit;
use crate::geometry::{rotate, Aabb, Intrinsics, Pose, Vec3};

pub use config::{AgentConfig, CameraConfig, PrimitiveConfig, SceneConfig, Trajectory};
pub use corrupt::{corrupt_masks, Codebook, CodebookEntry, CorruptionKind, CorruptionLog, CorruptionRecord, CorruptionSpec, Injection};
pub use primitive::{Primitive, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatures {
    pub clip: Vec<f64>,
    pub caption: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub instances: Vec<Primitive>,
    pub bounds: Aabb,
    pub feature_dim: usize,
    pub classes: BTreeMap<u32, ClassFeatures>,
}

impl Scene {
    pub fn instance(&self, instance_id: u32) -> Option<&Primitive> {
        self.instances.get((instance_id as usize).checked_sub(1)?)
    }

    /// Classifies a feature pair against the scene's class table with the
    /// given clip/caption weights. Ties go to the lower class id.
    pub fn classify(&self, clip: &[f64], caption: &[f64], weights: (f64, f64)) -> u32 {
        let mut best = (f64::NEG_INFINITY, 0u32);
        for (id, cf) in &self.classes {
            let s = weights.0 * crate::features::cosine(clip, &cf.clip)
                + weights.1 * crate::features::cosine(caption, &cf.caption);
            if s > best.0 {
                best = (s, *id);
            }
        }
        best.1
    }
}

/// Builds the world from a config. Deterministic in `cfg.seed`.
pub fn build_scene(cfg: &SceneConfig) -> Result<Scene> {
    if cfg.feature_dim < 8 {
        return Err(Error::Scene(format!("feature_dim {} < 8", cfg.feature_dim)));
    }
    if cfg.primitives.is_empty() {
        return Err(Error::Scene("scene needs at least one primitive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_ids: std::collections::BTreeSet<u32> = cfg.primitives.iter().map(|p| p.class_id).collect();
    let classes: BTreeMap<u32, ClassFeatures> = class_ids
        .into_iter()
        .map(|id| {
            let clip = random_unit(&mut rng, cfg.feature_dim);
            let caption = random_unit(&mut rng, cfg.feature_dim);
            (id, ClassFeatures { clip, caption })
        })
        .collect();

    let mut instances = Vec::with_capacity(cfg.primitives.len());
    for (i, pc) in cfg.primitives.iter().enumerate() {
        if !pc.shape.is_valid() {
            return Err(Error::Scene(format!("primitive {i}: invalid shape dimensions")));
        }
        if pc.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Scene(format!("primitive {i}: albedo outside [0,1]")));
        }
        let cf = &classes[&pc.class_id];
        instances.push(Primitive {
            instance_id: i as u32 + 1,
            shape: pc.shape,
            pose: pc.pose(),
            albedo: pc.albedo,
            class_id: pc.class_id,
            gt_clip_feature: cf.clip.clone(),
            gt_caption_feature: cf.caption.clone(),
        });
    }

    let hull = instances
        .iter()
        .map(Primitive::world_aabb)
        .fold(Aabb::empty(), |a, b| a.union(&b));
    let bounds = match cfg.bounds {
        Some(b) => {
            let b = Aabb::new(Vec3::from(b.min), Vec3::from(b.max));
            if !b.is_valid() {
                return Err(Error::Scene("bounds are degenerate".into()));
            }
            for p in &instances {
                if !b.contains_box(&p.world_aabb()) {
                    return Err(Error::Scene(format!(
                        "primitive {} lies outside the scene bounds",
                        p.instance_id - 1
                    )));
                }
            }
            b
        }
        None => hull.padded(0.1),
    };

    Ok(Scene {
        instances,
        bounds,
        feature_dim: cfg.feature_dim,
        classes,
    })
}

/// One RGB-D observation. Images are row-major, index `v * width + u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBundle {
    pub agent_id: u32,
    pub t: usize,
    /// Camera-to-world.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    /// z-depth in meters, 0 where the ray hits nothing.
    pub depth: Vec<f64>,
    /// Ground-truth instance ids, 0 for background.
    pub gt_mask: Vec<u32>,
    /// Segmenter output after corruption; values are codebook ids.
    pub corrupted_mask: Vec<u32>,
}

impl FrameBundle {
    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World-space origin and unit direction of the ray through pixel
    /// `(u, v)`, plus the ratio between ray distance and z-depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vec3, Vec3, f64) {
        let cam = self.intrinsics.pixel_ray(u, v);
        let scale = cam.norm();
        let dir = rotate(&self.pose, &(cam / scale));
        (self.pose.translation.vector, dir, scale)
    }

    /// World-space point seen at pixel `idx`, if it has depth.
    pub fn backproject_pixel(&self, idx: usize) -> Option<Vec3> {
        let d = self.depth[idx];
        if d <= 0.0 {
            return None;
        }
        let (u, v) = self.pixel(idx);
        let cam = self.intrinsics.pixel_ray(u as f64, v as f64) * d;
        Some(crate::geometry::transform(&self.pose, &cam))
    }
}

/// Casts one ray per pixel against every primitive. Flat albedo shading.
pub fn render_frame(
    scene: &Scene,
    pose: &Pose,
    intrinsics: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<FrameBundle> {
    if width < 16 || height < 16 {
        return Err(Error::Precondition(format!("resolution {width}x{height} below 16x16")));
    }
    if !pose.translation.vector.iter().all(|v| v.is_finite()) {
        return Err(Error::Precondition("pose is not finite".into()));
    }
    let n = width * height;
    let mut frame = FrameBundle {
        agent_id: 0,
        t: 0,
        pose: *pose,
        intrinsics: *intrinsics,
        width,
        height,
        rgb: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        gt_mask: vec![0; n],
        corrupted_mask: Vec::new(),
    };
    for v in 0..height {
        for u in 0..width {
            let (o, d, scale) = frame.pixel_ray(u as f64, v as f64);
            let mut best: Option<(f64, &Primitive)> = None;
            for p in &scene.instances {
                if let Some(t) = p.intersect(&o, &d) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, p));
                    }
                }
            }
            if let Some((t, p)) = best {
                let idx = v * width + u;
                frame.depth[idx] = t / scale;
                frame.gt_mask[idx] = p.instance_id;
                frame.rgb[idx] = p.albedo;
            }
        }
    }
    Ok(frame)
}

/// Renders every agent's trajectory. Frames of agent `k` carry
/// `agent_id = k` and consecutive `t`. Depth noise, when configured, is
/// drawn from a per-agent stream derived from the scene seed.
pub fn render_agents(scene: &Scene, cfg: &SceneConfig) -> Result<Vec<Vec<FrameBundle>>> {
    cfg.validate_camera()?;
    let intr = cfg.camera.intrinsics();
    cfg.agents
        .iter()
        .enumerate()
        .map(|(k, agent)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5EED_0000 + k as u64));
            let noise = (cfg.camera.depth_noise_std > 0.0)
                .then(|| Normal::new(0.0, cfg.camera.depth_noise_std).expect("valid std"));
            agent
                .trajectory
                .poses()
                .iter()
                .enumerate()
                .map(|(t, pose)| {
                    let mut f = render_frame(scene, pose, &intr, cfg.camera.width, cfg.camera.height)?;
                    f.agent_id = k as u32;
                    f.t = t;
                    if let Some(noise) = &noise {
                        for d in f.depth.iter_mut().filter(|d| **d > 0.0) {
                            *d = (*d + noise.sample(&mut rng)).max(1e-3);
                        }
                    }
                    Ok(f)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;

    pub(crate) fn sphere_cfg() -> SceneConfig {
        SceneConfig::from_toml_str(
            r#"
            seed = 1
            [[primitive]]
            shape = { kind = "sphere", radius = 1.0 }
            position = [0.0, 0.0, 0.0]
            albedo = [0.5, 0.5, 0.5]
            class_id = 1
            "#,
        )
        .unwrap()
    }

    #[test]
    fn unit_sphere_scene() {
        let s = build_scene(&sphere_cfg()).unwrap();
        assert_eq!(s.instances.len(), 1);
        assert!(s.bounds.contains_box(&s.instances[0].world_aabb()));
    }

    #[test]
    fn deterministic() {
        let a = build_scene(&sphere_cfg()).unwrap();
        let b = build_scene(&sphere_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_small_dim_and_out_of_bounds() {
        let mut c = sphere_cfg();
        c.feature_dim = 4;
        assert!(build_scene(&c).is_err());
        let mut c = sphere_cfg();
        c.bounds = Some(config::BoundsConfig { min: [-0.5; 3], max: [0.5; 3] });
        assert!(build_scene(&c).is_err());
    }

    #[test]
    fn same_class_same_features() {
        let mut c = sphere_cfg();
        let mut p = c.primitives[0];
        p.position = [3.0, 0.0, 0.0];
        c.primitives.push(p);
        let s = build_scene(&c).unwrap();
        assert_eq!(s.instances[0].gt_clip_feature, s.instances[1].gt_clip_feature);
        assert_eq!(s.instances[0].gt_caption_feature, s.instances[1].gt_caption_feature);
        assert!((crate::features::norm(&s.instances[0].gt_clip_feature) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn center_pixel_depth() {
        let s = build_scene(&sphere_cfg()).unwrap();
        let pose = look_at(Vec3::new(0.0, -3.0, 0.0), Vec3::zeros(), Vec3::z());
        let intr = Intrinsics::from_fov(32, 32, 60.0);
        let f = render_frame(&s, &pose, &intr, 32, 32).unwrap();
        let idx = f.index(16, 16);
        assert!((f.depth[idx] - 2.0).abs() < 1e-12);
        assert_eq!(f.gt_mask[idx], 1);
    }

    #[test]
    fn empty_half_space() {
        let s = build_scene(&sphere_cfg()).unwrap();
        let pose = look_at(Vec3::new(0.0, -3.0, 0.0), Vec3::new(0.0, -6.0, 0.0), Vec3::z());
        let intr = Intrinsics::from_fov(32, 32, 60.0);
        let f = render_frame(&s, &pose, &intr, 32, 32).unwrap();
        assert!(f.depth.iter().all(|d| *d == 0.0));
        assert!(f.gt_mask.iter().all(|m| *m == 0));
    }

    #[test]
    fn rejects_tiny_resolution() {
        let s = build_scene(&sphere_cfg()).unwrap();
        let pose = look_at(Vec3::new(0.0, -3.0, 0.0), Vec3::zeros(), Vec3::z());
        let intr = Intrinsics::from_fov(8, 8, 60.0);
        assert!(render_frame(&s, &pose, &intr, 8, 8).is_err());
    }
}
