//! Ready-made scenes shared by tests, the bundled examples and the
//! experiment runner.

use crate::distopt::AgentView;
use crate::error::Result;
use crate::scene::{build_scene, render_agents, CorruptionKind, Injection, Scene, SceneConfig};

/// Five objects on a desk, two agents viewing the same side. Agent 1 aims
/// off-centre so the two leftmost objects sit at its image border.
pub const FIVE_OBJECTS: &str = r#"
seed = 11
feature_dim = 32

[camera]
width = 96
height = 96
hfov_deg = 60.0

[[primitive]]
shape = { kind = "box", half_extents = [0.1, 0.1, 0.1] }
position = [-0.5, -0.15, 0.0]
albedo = [0.8, 0.3, 0.2]
class_id = 1

[[primitive]]
shape = { kind = "sphere", radius = 0.1 }
position = [-0.5, 0.2, 0.0]
albedo = [0.2, 0.7, 0.3]
class_id = 2

[[primitive]]
shape = { kind = "cylinder", radius = 0.08, half_height = 0.12 }
position = [0.0, 0.0, 0.02]
albedo = [0.2, 0.3, 0.8]
class_id = 3

[[primitive]]
shape = { kind = "box", half_extents = [0.08, 0.08, 0.1] }
position = [0.4, -0.09, 0.0]
albedo = [0.9, 0.8, 0.2]
class_id = 4

[[primitive]]
shape = { kind = "sphere", radius = 0.09 }
position = [0.4, 0.1, 0.0]
albedo = [0.6, 0.2, 0.7]
class_id = 5

[[agent]]
trajectory = { kind = "orbit", center = [0.0, 0.0, 0.0], radius = 1.8, height = 1.0, start_deg = -120.0, end_deg = -60.0, frames = 8 }

[[agent]]
trajectory = { kind = "poses", poses = [
  { eye = [0.9, -1.6, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.1, -1.5, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.3, -1.3, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.5, -1.1, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.6, -0.9, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.7, -0.6, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.75, -0.3, 1.0], target = [0.55, 0.0, 0.0] },
  { eye = [1.8, 0.0, 1.0], target = [0.55, 0.0, 0.0] },
] }
"#;

pub fn five_objects() -> SceneConfig {
    SceneConfig::from_toml_str(FIVE_OBJECTS).expect("bundled scene parses")
}

/// One error of each kind, all on agent 1.
pub fn one_of_each_error() -> Vec<Injection> {
    vec![
        Injection { kind: CorruptionKind::SemanticError, agent: 1, instances: vec![1] },
        Injection { kind: CorruptionKind::ViewpointLoss, agent: 1, instances: vec![2] },
        Injection { kind: CorruptionKind::OverSegmentation, agent: 1, instances: vec![3] },
        Injection { kind: CorruptionKind::UnderSegmentation, agent: 1, instances: vec![4, 5] },
    ]
}

/// One sphere seen by two agents from opposite quarters.
pub const ONE_SPHERE: &str = r#"
seed = 3
feature_dim = 16

[camera]
width = 48
height = 48
hfov_deg = 50.0

[[primitive]]
shape = { kind = "sphere", radius = 0.2 }
position = [0.0, 0.0, 0.2]
albedo = [0.7, 0.4, 0.2]
class_id = 1

[[agent]]
trajectory = { kind = "orbit", center = [0.0, 0.0, 0.2], radius = 1.2, height = 0.5, start_deg = 0.0, end_deg = 90.0, frames = 6 }

[[agent]]
trajectory = { kind = "orbit", center = [0.0, 0.0, 0.2], radius = 1.2, height = 0.5, start_deg = 180.0, end_deg = 270.0, frames = 6 }
"#;

pub fn one_sphere() -> SceneConfig {
    SceneConfig::from_toml_str(ONE_SPHERE).expect("bundled scene parses")
}

/// Renders every agent and uses the ground-truth instance ids as the
/// aligned masks.
pub fn gt_views(cfg: &SceneConfig) -> Result<(Scene, Vec<AgentView>)> {
    let scene = build_scene(cfg)?;
    let views = render_agents(&scene, cfg)?
        .into_iter()
        .enumerate()
        .map(|(k, frames)| {
            let masks = frames.iter().map(|f| f.gt_mask.clone()).collect();
            AgentView::new(k as u32, frames, masks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, views))
}
