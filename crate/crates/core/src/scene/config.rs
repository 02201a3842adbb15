//! TOML scene description.
//!
//! ```toml
//! seed = 7
//! feature_dim = 32
//! bounds = { min = [-1.0, -1.0, -0.5], max = [1.0, 1.0, 1.0] }   # optional
//!
//! [camera]
//! width = 96
//! height = 96
//! hfov_deg = 60.0
//! depth_noise_std = 0.0
//!
//! [[primitive]]
//! shape = { kind = "sphere", radius = 0.2 }
//! position = [0.0, 0.0, 0.2]
//! rotation_deg = [0.0, 0.0, 0.0]   # XYZ Euler, optional
//! albedo = [0.8, 0.2, 0.2]
//! class_id = 1
//!
//! [[agent]]
//! trajectory = { kind = "orbit", center = [0, 0, 0.2], radius = 1.5, height = 0.6, start_deg = 0, end_deg = 90, frames = 12 }
//!
//! [[agent]]
//! trajectory = { kind = "poses", poses = [{ eye = [2, 0, 1], target = [0, 0, 0] }] }
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{look_at, Intrinsics, Pose, Vec3};

use super::primitive::Shape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<PrimitiveConfig>,
    #[serde(rename = "agent", default)]
    pub agents: Vec<AgentConfig>,
}

fn default_feature_dim() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    #[serde(default)]
    pub depth_noise_std: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 96,
            height: 96,
            hfov_deg: 60.0,
            depth_noise_std: 0.0,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveConfig {
    pub shape: Shape,
    pub position: [f64; 3],
    #[serde(default)]
    pub rotation_deg: [f64; 3],
    pub albedo: [f64; 3],
    pub class_id: u32,
}

impl PrimitiveConfig {
    pub fn pose(&self) -> Pose {
        let [rx, ry, rz] = self.rotation_deg;
        Pose::from_parts(
            nalgebra::Translation3::new(self.position[0], self.position[1], self.position[2]),
            nalgebra::UnitQuaternion::from_euler_angles(rx.to_radians(), ry.to_radians(), rz.to_radians()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Circular arc around `center` at `radius` in the xy plane, `height`
    /// above the center, looking at the center. World z is up.
    Orbit {
        center: [f64; 3],
        radius: f64,
        height: f64,
        start_deg: f64,
        end_deg: f64,
        frames: usize,
    },
    Poses { poses: Vec<LookAt> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookAt {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

impl Trajectory {
    pub fn poses(&self) -> Vec<Pose> {
        match self {
            Trajectory::Orbit {
                center,
                radius,
                height,
                start_deg,
                end_deg,
                frames,
            } => {
                let c = Vec3::from(*center);
                (0..*frames)
                    .map(|i| {
                        let s = if *frames > 1 { i as f64 / (*frames - 1) as f64 } else { 0.0 };
                        let a = (start_deg + s * (end_deg - start_deg)).to_radians();
                        let eye = c + Vec3::new(radius * a.cos(), radius * a.sin(), *height);
                        look_at(eye, c, Vec3::z())
                    })
                    .collect()
            }
            Trajectory::Poses { poses } => poses
                .iter()
                .map(|p| look_at(Vec3::from(p.eye), Vec3::from(p.target), Vec3::z()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Trajectory::Orbit { frames, .. } => *frames,
            Trajectory::Poses { poses } => poses.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    /// Orbit-quadrant trajectories: agent `k` of `n` covers the arc
    /// `[k, k+1) * 360/n` degrees.
    pub fn quadrant_orbits(n: usize, center: [f64; 3], radius: f64, height: f64, frames: usize) -> Vec<AgentConfig> {
        let span = 360.0 / n as f64;
        (0..n)
            .map(|k| AgentConfig {
                trajectory: Trajectory::Orbit {
                    center,
                    radius,
                    height,
                    start_deg: k as f64 * span,
                    end_deg: (k as f64 + 0.75) * span,
                    frames,
                },
            })
            .collect()
    }

    pub(crate) fn validate_camera(&self) -> Result<()> {
        let c = &self.camera;
        if c.width < 16 || c.height < 16 {
            return Err(Error::Config(format!(
                "camera resolution {}x{} below 16x16",
                c.width, c.height
            )));
        }
        if !(c.hfov_deg > 0.0 && c.hfov_deg < 179.0) {
            return Err(Error::Config(format!("camera.hfov_deg {} out of range", c.hfov_deg)));
        }
        if c.depth_noise_std < 0.0 {
            return Err(Error::Config("camera.depth_noise_std must be >= 0".into()));
        }
        Ok(())
    }
}
