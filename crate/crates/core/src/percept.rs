//! Per-agent cross-frame fusion of segment observations into agent-level
//! instances.
//!
//! Coarse phase: each observation `(t, m)` joins the running group whose
//! cloud covers it best (IoB of the observation against the group cloud),
//! provided the group has no other observation from frame `t`. Fine phase:
//! groups that never share a frame, overlap spatially and agree
//! semantically are merged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::align::cloud::{overlap_indexed, VoxelGrid};
use crate::align::AgentPerception;
use crate::error::Result;
use crate::features::{cosine, mean_direction};
use crate::geometry::Vec3;
use crate::scene::{corrupt_masks, Codebook, CorruptionLog, CorruptionSpec, FrameBundle, Scene};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptConfig {
    pub voxel: f64,
    /// Match distance for fusion-time overlap tests.
    pub match_dist: f64,
    pub theta_coarse: f64,
    pub theta_fine: f64,
}

impl Default for PerceptConfig {
    fn default() -> Self {
        PerceptConfig {
            voxel: 0.05,
            match_dist: 0.05,
            theta_coarse: 0.3,
            theta_fine: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub agent_id: u32,
    pub local_id: u32,
    /// `(frame index, codebook id)` observations, sorted.
    pub frame_masks: Vec<(usize, u32)>,
    pub clip: Vec<f64>,
    pub caption: Vec<f64>,
    pub confidence: f64,
    pub global_id: Option<u32>,
}

struct Group {
    obs: Vec<(usize, u32)>,
    frames: BTreeSet<usize>,
    grid: VoxelGrid,
    tree: KdTree,
}

impl Group {
    fn refresh(&mut self) {
        self.tree = KdTree::new(&self.grid.centroids());
    }
}

/// Pixel indices of segment `m` in a frame.
pub fn segment_pixels(frame: &FrameBundle, m: u32) -> impl Iterator<Item = usize> + '_ {
    frame
        .corrupted_mask
        .iter()
        .enumerate()
        .filter(move |(_, c)| **c == m)
        .map(|(i, _)| i)
}

fn observation_grid(frame: &FrameBundle, m: u32, voxel: f64) -> VoxelGrid {
    let mut g = VoxelGrid::new(voxel);
    for idx in segment_pixels(frame, m) {
        if let Some(p) = frame.backproject_pixel(idx) {
            g.add(&p);
        }
    }
    g
}

fn mean_features(obs: &[(usize, u32)], codebook: &Codebook, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let entries: Vec<_> = obs.iter().filter_map(|(_, m)| codebook.get(*m)).collect();
    (
        mean_direction(entries.iter().map(|e| e.clip.as_slice()), dim),
        mean_direction(entries.iter().map(|e| e.caption.as_slice()), dim),
    )
}

/// Fuses one agent's time-ordered frames into instance records. Local ids
/// are assigned 1.. in order of each record's first observation.
pub fn fuse_frames(frames: &[FrameBundle], codebook: &Codebook, cfg: &PerceptConfig) -> Vec<InstanceRecord> {
    let agent_id = frames.first().map(|f| f.agent_id).unwrap_or(0);
    let dim = codebook.entries.values().next().map(|e| e.clip.len()).unwrap_or(0);
    let mut groups: Vec<Group> = Vec::new();

    for f in frames {
        let ids: BTreeSet<u32> = f.corrupted_mask.iter().copied().filter(|m| *m != 0).collect();
        for m in ids {
            let grid = observation_grid(f, m, cfg.voxel);
            let mut best: Option<(f64, usize)> = None;
            if !grid.is_empty() {
                let obs_tree = KdTree::new(&grid.centroids());
                for (gi, g) in groups.iter().enumerate() {
                    if g.frames.contains(&f.t) || g.tree.is_empty() {
                        continue;
                    }
                    let o = overlap_indexed(&obs_tree, &g.tree, cfg.match_dist);
                    if o.iob_12 >= cfg.theta_coarse && best.is_none_or(|(b, _)| o.iob_12 > b) {
                        best = Some((o.iob_12, gi));
                    }
                }
            }
            match best {
                Some((_, gi)) => {
                    let g = &mut groups[gi];
                    g.obs.push((f.t, m));
                    g.frames.insert(f.t);
                    g.grid.merge(&grid);
                    g.refresh();
                }
                None => {
                    let tree = KdTree::new(&grid.centroids());
                    groups.push(Group {
                        obs: vec![(f.t, m)],
                        frames: BTreeSet::from([f.t]),
                        grid,
                        tree,
                    });
                }
            }
        }
    }

    // fine phase
    loop {
        let mut merged = false;
        'outer: for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                if !groups[i].frames.is_disjoint(&groups[j].frames) {
                    continue;
                }
                if groups[i].tree.is_empty() || groups[j].tree.is_empty() {
                    continue;
                }
                let (ci, pi) = mean_features(&groups[i].obs, codebook, dim);
                let (cj, pj) = mean_features(&groups[j].obs, codebook, dim);
                let sim = 0.5 * (cosine(&ci, &cj) + cosine(&pi, &pj));
                if sim < cfg.theta_fine {
                    continue;
                }
                let o = overlap_indexed(&groups[i].tree, &groups[j].tree, cfg.match_dist);
                if o.max_iob() < cfg.theta_coarse {
                    continue;
                }
                let g = groups.remove(j);
                let target = &mut groups[i];
                target.obs.extend(g.obs);
                target.frames.extend(g.frames);
                target.grid.merge(&g.grid);
                target.refresh();
                merged = true;
                break 'outer;
            }
        }
        if !merged {
            break;
        }
    }

    groups.sort_by_key(|g| g.obs.iter().min().copied());
    groups
        .into_iter()
        .enumerate()
        .map(|(i, mut g)| {
            g.obs.sort_unstable();
            let (clip, caption) = mean_features(&g.obs, codebook, dim);
            InstanceRecord {
                agent_id,
                local_id: i as u32 + 1,
                frame_masks: g.obs,
                clip,
                caption,
                confidence: 0.0,
                global_id: None,
            }
        })
        .collect()
}

/// Corrupts one agent's frames and fuses them into instance records.
pub fn perceive_agent(
    scene: &Scene,
    mut frames: Vec<FrameBundle>,
    spec: &CorruptionSpec,
    cfg: &PerceptConfig,
) -> Result<(AgentPerception, CorruptionLog)> {
    let agent_id = frames.first().map(|f| f.agent_id).unwrap_or(0);
    let (codebook, log) = corrupt_masks(scene, &mut frames, spec)?;
    let records = fuse_frames(&frames, &codebook, cfg);
    Ok((AgentPerception { agent_id, frames, codebook, records }, log))
}

/// World-space centroid of a record's observations; used for diagnostics.
pub fn record_centroid(record: &InstanceRecord, frames: &[FrameBundle]) -> Option<Vec3> {
    let by_t: BTreeMap<usize, &FrameBundle> = frames.iter().map(|f| (f.t, f)).collect();
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for (t, m) in &record.frame_masks {
        if let Some(f) = by_t.get(t) {
            for idx in segment_pixels(f, *m) {
                if let Some(p) = f.backproject_pixel(idx) {
                    sum += p;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Intrinsics};
    use crate::scene::{build_scene, corrupt_masks, render_frame, CorruptionSpec, Scene, SceneConfig};
    use proptest::prelude::*;

    fn scene(toml: &str) -> Scene {
        build_scene(&SceneConfig::from_toml_str(toml).unwrap()).unwrap()
    }

    fn orbit(scene: &Scene, n: usize, radius: f64, target: Vec3) -> Vec<FrameBundle> {
        let intr = Intrinsics::from_fov(48, 48, 60.0);
        (0..n)
            .map(|t| {
                let a = t as f64 / n as f64 * std::f64::consts::PI;
                let eye = target + Vec3::new(radius * a.cos(), radius * a.sin(), 0.6);
                let mut f = render_frame(scene, &look_at(eye, target, Vec3::z()), &intr, 48, 48).unwrap();
                f.t = t;
                f
            })
            .collect()
    }

    fn corrupt(scene: &Scene, frames: &mut [FrameBundle], spec: CorruptionSpec) -> Codebook {
        corrupt_masks(scene, frames, &spec).unwrap().0
    }

    const ONE_BOX: &str = r#"
        seed = 5
        [[primitive]]
        shape = { kind = "box", half_extents = [0.15, 0.1, 0.1] }
        position = [0.0, 0.0, 0.0]
        albedo = [0.5, 0.5, 0.5]
        class_id = 1
    "#;

    const FAR_APART: &str = r#"
        seed = 6
        [[primitive]]
        shape = { kind = "sphere", radius = 0.3 }
        position = [-2.5, 0.0, 0.0]
        albedo = [0.5, 0.5, 0.5]
        class_id = 1
        [[primitive]]
        shape = { kind = "sphere", radius = 0.3 }
        position = [2.5, 0.0, 0.0]
        albedo = [0.5, 0.5, 0.5]
        class_id = 1
    "#;

    const THREE: &str = r#"
        seed = 7
        [[primitive]]
        shape = { kind = "box", half_extents = [0.1, 0.1, 0.1] }
        position = [-0.35, 0.0, 0.0]
        albedo = [0.8, 0.2, 0.2]
        class_id = 1
        [[primitive]]
        shape = { kind = "sphere", radius = 0.12 }
        position = [0.0, 0.1, 0.0]
        albedo = [0.2, 0.8, 0.2]
        class_id = 2
        [[primitive]]
        shape = { kind = "cylinder", radius = 0.08, half_height = 0.15 }
        position = [0.35, 0.0, 0.0]
        albedo = [0.2, 0.2, 0.8]
        class_id = 3
    "#;

    /// Observation sets keyed by the majority ground-truth instance.
    fn gt_partition(frames: &[FrameBundle]) -> BTreeSet<Vec<(usize, u32)>> {
        let mut by_gt: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
        for f in frames {
            let mut votes: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
            for (m, g) in f.corrupted_mask.iter().zip(&f.gt_mask) {
                if *m != 0 {
                    *votes.entry(*m).or_default().entry(*g).or_default() += 1;
                }
            }
            for (m, v) in votes {
                let g = v.into_iter().max_by_key(|(g, c)| (*c, std::cmp::Reverse(*g))).unwrap().0;
                by_gt.entry(g).or_default().push((f.t, m));
            }
        }
        by_gt.into_values().map(|mut v| {
            v.sort_unstable();
            v
        }).collect()
    }

    fn partition(records: &[InstanceRecord]) -> BTreeSet<Vec<(usize, u32)>> {
        records.iter().map(|r| r.frame_masks.clone()).collect()
    }

    #[test]
    fn one_object_ten_frames_gives_one_record() {
        let s = scene(ONE_BOX);
        let mut frames = orbit(&s, 10, 1.2, Vec3::zeros());
        let cb = corrupt(&s, &mut frames, CorruptionSpec::default());
        let recs = fuse_frames(&frames, &cb, &PerceptConfig::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].frame_masks.len(), 10);
        assert_eq!(recs[0].local_id, 1);
    }

    #[test]
    fn distant_objects_stay_separate() {
        let s = scene(FAR_APART);
        let intr = Intrinsics::from_fov(64, 64, 70.0);
        let mut frames: Vec<FrameBundle> = (0..5)
            .map(|t| {
                let eye = Vec3::new(0.2 * t as f64 - 0.4, -4.5, 1.0);
                let mut f = render_frame(&s, &look_at(eye, Vec3::zeros(), Vec3::z()), &intr, 64, 64).unwrap();
                f.t = t;
                f
            })
            .collect();
        let cb = corrupt(&s, &mut frames, CorruptionSpec::default());
        let recs = fuse_frames(&frames, &cb, &PerceptConfig::default());
        assert_eq!(recs.len(), 2, "{recs:?}");
        assert!(recs.iter().all(|r| r.frame_masks.len() == 5));
        assert_eq!(partition(&recs), gt_partition(&frames));
    }

    #[test]
    fn five_degree_feature_jitter_matches_oracle_grouping() {
        let s = scene(THREE);
        let mut frames = orbit(&s, 8, 1.5, Vec3::zeros());
        let spec = CorruptionSpec { feature_noise_deg: 5.0, ..Default::default() };
        let cb = corrupt(&s, &mut frames, spec);
        let recs = fuse_frames(&frames, &cb, &PerceptConfig::default());
        assert_eq!(partition(&recs), gt_partition(&frames));
        for r in &recs {
            for (_, m) in &r.frame_masks {
                assert!(cosine(&r.clip, &cb.get(*m).unwrap().clip) > (6f64).to_radians().cos());
            }
        }
    }

    #[test]
    fn reversed_frame_order_gives_same_partition() {
        let s = scene(THREE);
        let mut frames = orbit(&s, 6, 1.5, Vec3::zeros());
        let cb = corrupt(&s, &mut frames, CorruptionSpec::default());
        let fwd = fuse_frames(&frames, &cb, &PerceptConfig::default());
        let rev: Vec<FrameBundle> = frames.iter().rev().cloned().collect();
        let back = fuse_frames(&rev, &cb, &PerceptConfig::default());
        assert_eq!(partition(&fwd), partition(&back));
    }

    #[test]
    fn centroid_of_record_near_object() {
        let s = scene(ONE_BOX);
        let mut frames = orbit(&s, 4, 1.2, Vec3::zeros());
        let cb = corrupt(&s, &mut frames, CorruptionSpec::default());
        let recs = fuse_frames(&frames, &cb, &PerceptConfig::default());
        let c = record_centroid(&recs[0], &frames).unwrap();
        assert!(c.norm() < 0.15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn every_observation_lands_in_exactly_one_record(
            seed in 0u64..1000,
            sem in 0.0f64..0.5,
            over in 0.0f64..0.5,
            under in 0.0f64..0.5,
        ) {
            let s = scene(THREE);
            let mut frames = orbit(&s, 4, 1.5, Vec3::zeros());
            let spec = CorruptionSpec {
                semantic_error_rate: sem,
                overseg_rate: over,
                underseg_rate: under,
                rng_seed: seed,
                ..Default::default()
            };
            let cb = corrupt(&s, &mut frames, spec);
            let recs = fuse_frames(&frames, &cb, &PerceptConfig::default());
            let mut seen = BTreeSet::new();
            for r in &recs {
                prop_assert!(!r.frame_masks.is_empty());
                for o in &r.frame_masks {
                    prop_assert!(seen.insert(*o));
                }
                let frames_of: BTreeSet<usize> = r.frame_masks.iter().map(|(t, _)| *t).collect();
                prop_assert_eq!(frames_of.len(), r.frame_masks.len());
            }
            let all: BTreeSet<(usize, u32)> = frames
                .iter()
                .flat_map(|f| f.corrupted_mask.iter().filter(|m| **m != 0).map(move |m| (f.t, *m)))
                .collect();
            prop_assert_eq!(seen, all);
            let ids: Vec<u32> = recs.iter().map(|r| r.local_id).collect();
            prop_assert_eq!(ids, (1..=recs.len() as u32).collect::<Vec<_>>());
        }
    }
}
