//! Cross-agent instance alignment.
//!
//! Every agent-level instance becomes a vertex of a collaborative graph;
//! edges join instances of different agents whose downsampled clouds
//! overlap. Each connected cluster is repaired in three passes:
//!
//! 1. under-segmentation: a vertex that contains two or more semantically
//!    distinct vertices of one other agent is split by projecting those
//!    vertices' clouds into its frames;
//! 2. over-segmentation: same-agent vertices that are each contained in
//!    another agent's vertex and agree semantically are merged;
//! 3. the most confident vertex becomes the reference and every other
//!    member adopts its features and global id.

pub mod cloud;
pub mod confidence;
pub mod graph;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::cosine;
use crate::geometry::{transform, Vec3};
use crate::percept::InstanceRecord;
use crate::scene::{Codebook, FrameBundle};
use crate::spatial::{dist2, KdTree};

use cloud::{overlap_indexed, InstanceCloud, Overlap, VoxelGrid};
use confidence::{frame_confidence, instance_confidence};
use graph::{build_graph, components, CollabGraph, GraphThresholds, VertexKey, Violation};

pub use graph::verify_injective;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub voxel: f64,
    /// Nearest-neighbour match distance for overlap counting.
    pub tau: f64,
    pub theta_iou: f64,
    pub theta_iob: f64,
    /// Cosine above which two instances count as semantically similar.
    pub feature_gate: f64,
    /// Border band removed on each side to form the central region.
    pub center_margin: f64,
    pub min_split_pixels: usize,
    /// Depth agreement required between a projected reference point and the
    /// pixel it labels.
    pub split_depth_tol: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            voxel: 0.05,
            tau: 0.05,
            theta_iou: 0.25,
            theta_iob: 0.5,
            feature_gate: 0.8,
            center_margin: 0.1,
            min_split_pixels: 20,
            split_depth_tol: 0.1,
        }
    }
}

impl AlignConfig {
    pub fn thresholds(&self) -> GraphThresholds {
        GraphThresholds { tau: self.tau, theta_iou: self.theta_iou, theta_iob: self.theta_iob }
    }
}

/// One agent's private perception output, input to alignment.
#[derive(Debug, Clone)]
pub struct AgentPerception {
    pub agent_id: u32,
    pub frames: Vec<FrameBundle>,
    pub codebook: Codebook,
    pub records: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Features and id replaced by the reference's; masks untouched.
    AdoptReference,
    MergeOverSegmented,
    SplitUnderSegmented,
    /// A split was attempted but produced too few pixels per piece.
    Unresolvable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAction {
    pub rule: Rule,
    pub agent: u32,
    pub source: Vec<u32>,
    pub reference: Vec<VertexKey>,
    pub global_id: Option<u32>,
    pub frames: Vec<usize>,
    /// For adoption: whether the features actually changed.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedAgent {
    pub agent_id: u32,
    pub records: Vec<InstanceRecord>,
    /// Corrected masks: global instance id per pixel, 0 for background.
    pub masks: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub agents: Vec<AlignedAgent>,
    pub actions: Vec<CorrectionAction>,
    /// Clouds of the fused instances before correction (what agents share).
    pub initial_clouds: Vec<InstanceCloud>,
    pub initial_graph: Option<CollabGraph>,
    pub final_graph: Option<CollabGraph>,
    pub injective: bool,
    pub violations: Vec<Violation>,
}

impl AlignmentOutcome {
    /// Correction log as JSON lines, one action per line.
    pub fn actions_jsonl(&self) -> String {
        self.actions
            .iter()
            .map(|a| serde_json::to_string(a).expect("action serializes") + "\n")
            .collect()
    }
}

struct WorkRecord {
    frame_masks: Vec<(usize, u32)>,
    clip: Vec<f64>,
    caption: Vec<f64>,
    confidence: f64,
    tree: KdTree,
    global_id: Option<u32>,
}

struct WorkAgent<'a> {
    agent_id: u32,
    frames: &'a [FrameBundle],
    /// Local record id per pixel, 0 for background.
    labels: Vec<Vec<u32>>,
    records: BTreeMap<u32, WorkRecord>,
    next_id: u32,
}

impl WorkAgent<'_> {
    fn pixels_of(&self, id: u32) -> Vec<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| l.iter().enumerate().filter(|(_, x)| **x == id).map(|(i, _)| i).collect())
            .collect()
    }

    fn measure(&self, id: u32, cfg: &AlignConfig) -> (f64, KdTree) {
        let per_frame = self.pixels_of(id);
        let mut grid = VoxelGrid::new(cfg.voxel);
        let mut conf = Vec::with_capacity(per_frame.len());
        for (f, pix) in self.frames.iter().zip(&per_frame) {
            let uv: Vec<(usize, usize)> = pix.iter().map(|i| f.pixel(*i)).collect();
            conf.push(frame_confidence(&uv, f.width, f.height, cfg.center_margin));
            for &i in pix {
                if let Some(p) = f.backproject_pixel(i) {
                    grid.add(&p);
                }
            }
        }
        let c = instance_confidence(&conf).unwrap_or(0.0);
        (c, KdTree::new(&grid.centroids()))
    }

    fn refresh(&mut self, id: u32, cfg: &AlignConfig) {
        let (c, tree) = self.measure(id, cfg);
        let r = self.records.get_mut(&id).expect("record exists");
        r.confidence = c;
        r.tree = tree;
    }

    fn frames_with(&self, id: u32) -> Vec<usize> {
        self.frames
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| l.contains(&id))
            .map(|(f, _)| f.t)
            .collect()
    }
}

struct State<'a> {
    agents: Vec<WorkAgent<'a>>,
    index: BTreeMap<u32, usize>,
    cfg: AlignConfig,
    actions: Vec<CorrectionAction>,
    next_gid: u32,
}

impl<'a> State<'a> {
    fn agent(&self, a: u32) -> &WorkAgent<'a> {
        &self.agents[self.index[&a]]
    }

    fn agent_mut(&mut self, a: u32) -> &mut WorkAgent<'a> {
        let i = self.index[&a];
        &mut self.agents[i]
    }

    fn rec(&self, v: VertexKey) -> &WorkRecord {
        &self.agent(v.agent).records[&v.instance]
    }

    fn overlap(&self, a: VertexKey, b: VertexKey) -> Overlap {
        overlap_indexed(&self.rec(a).tree, &self.rec(b).tree, self.cfg.tau)
    }

    fn similarity(&self, a: VertexKey, b: VertexKey) -> f64 {
        let (ra, rb) = (self.rec(a), self.rec(b));
        0.5 * (cosine(&ra.clip, &rb.clip) + cosine(&ra.caption, &rb.caption))
    }

    fn usable(&self, v: VertexKey) -> bool {
        !self.rec(v).tree.is_empty()
    }

    fn align_cluster(&mut self, cluster: Vec<VertexKey>) {
        let mut verts = cluster;
        self.split_pass(&mut verts);

        let th = self.cfg.thresholds();
        let usable: Vec<VertexKey> = verts.iter().copied().filter(|v| self.usable(*v)).collect();
        let mut edges = Vec::new();
        for i in 0..usable.len() {
            for j in i + 1..usable.len() {
                if usable[i].agent != usable[j].agent && th.is_edge(&self.overlap(usable[i], usable[j])) {
                    edges.push((i, j));
                }
            }
        }
        let mut subs: Vec<Vec<VertexKey>> = components(usable.len(), edges)
            .into_iter()
            .map(|c| c.into_iter().map(|i| usable[i]).collect())
            .collect();
        // vertices without any point (no depth) still need an id
        for v in verts.iter().filter(|v| !self.usable(**v)) {
            subs.push(vec![*v]);
        }
        for sub in subs {
            let sub = self.merge_pass(sub);
            self.adopt_reference(&sub);
        }
    }

    /// Rule for under-segmentation. Mutates `verts` in place.
    fn split_pass(&mut self, verts: &mut Vec<VertexKey>) {
        let mut tried = BTreeSet::new();
        let mut guard = 4 * verts.len() + 4;
        'again: while guard > 0 {
            guard -= 1;
            let snapshot = verts.clone();
            for &v in &snapshot {
                if tried.contains(&v) || !self.usable(v) {
                    continue;
                }
                let mut by_agent: BTreeMap<u32, Vec<VertexKey>> = BTreeMap::new();
                for &u in &snapshot {
                    if u.agent != v.agent && self.usable(u) && self.overlap(u, v).iob_12 >= self.cfg.theta_iob {
                        by_agent.entry(u.agent).or_default().push(u);
                    }
                }
                let mut best: Option<(f64, Vec<VertexKey>)> = None;
                for pieces in by_agent.into_values() {
                    if pieces.len() < 2 {
                        continue;
                    }
                    let distinct = (0..pieces.len()).any(|i| {
                        (i + 1..pieces.len()).any(|j| self.similarity(pieces[i], pieces[j]) < self.cfg.feature_gate)
                    });
                    if !distinct {
                        continue;
                    }
                    let score: f64 = pieces.iter().map(|p| self.rec(*p).confidence).sum();
                    if best.as_ref().is_none_or(|(s, _)| score > *s) {
                        best = Some((score, pieces));
                    }
                }
                tried.insert(v);
                if let Some((_, pieces)) = best {
                    if let Some(new) = self.split(v, &pieces) {
                        verts.retain(|x| *x != v);
                        verts.extend(new);
                        continue 'again;
                    }
                }
            }
            break;
        }
    }

    /// Labels each pixel of `v` with the nearest projected reference point.
    fn assign(&self, v: VertexKey, refs: &[VertexKey]) -> Vec<Vec<(usize, usize)>> {
        let agent = self.agent(v.agent);
        let ref_pts: Vec<(usize, &Vec3)> = refs
            .iter()
            .enumerate()
            .flat_map(|(k, r)| self.rec(*r).tree.points().iter().map(move |p| (k, p)))
            .collect();
        let mut out = Vec::with_capacity(agent.frames.len());
        for (f, labels) in agent.frames.iter().zip(&agent.labels) {
            let inv = f.pose.inverse();
            let projected: Vec<(usize, f64, f64, f64)> = ref_pts
                .iter()
                .filter_map(|(k, p)| {
                    let c = transform(&inv, p);
                    let (pu, pv) = f.intrinsics.project(&c)?;
                    Some((*k, pu, pv, c.z))
                })
                .collect();
            let mut assigned = Vec::new();
            for (idx, l) in labels.iter().enumerate() {
                if *l != v.instance {
                    continue;
                }
                let (u, vv) = f.pixel(idx);
                let z = f.depth[idx];
                let mut best: Option<(f64, usize)> = None;
                for &(k, pu, pv, pz) in &projected {
                    if (pz - z).abs() > self.cfg.split_depth_tol {
                        continue;
                    }
                    let d = (pu - u as f64).powi(2) + (pv - vv as f64).powi(2);
                    if best.is_none_or(|(b, _)| d < b) {
                        best = Some((d, k));
                    }
                }
                let k = match best {
                    Some((_, k)) => k,
                    None => match f.backproject_pixel(idx) {
                        Some(p) => {
                            ref_pts
                                .iter()
                                .map(|(k, q)| (dist2(&p, q), *k))
                                .min_by(|a, b| a.0.total_cmp(&b.0))
                                .map(|(_, k)| k)
                                .unwrap_or(0)
                        }
                        None => 0,
                    },
                };
                assigned.push((idx, k));
            }
            out.push(assigned);
        }
        out
    }

    fn split(&mut self, v: VertexKey, pieces: &[VertexKey]) -> Option<Vec<VertexKey>> {
        let mut refs = pieces.to_vec();
        let mut assignment = self.assign(v, &refs);
        let counts = |asg: &Vec<Vec<(usize, usize)>>, n: usize| {
            let mut c = vec![0usize; n];
            asg.iter().flatten().for_each(|(_, k)| c[*k] += 1);
            c
        };
        let c = counts(&assignment, refs.len());
        let keep: Vec<VertexKey> = refs
            .iter()
            .zip(&c)
            .filter(|(_, n)| **n >= self.cfg.min_split_pixels)
            .map(|(r, _)| *r)
            .collect();
        if keep.len() < 2 {
            log::warn!(
                "agent {} instance {}: split into {:?} unresolvable at this resolution",
                v.agent,
                v.instance,
                c
            );
            let frames = self.agent(v.agent).frames_with(v.instance);
            self.actions.push(CorrectionAction {
                rule: Rule::Unresolvable,
                agent: v.agent,
                source: vec![v.instance],
                reference: pieces.to_vec(),
                global_id: None,
                frames,
                changed: false,
            });
            return None;
        }
        if keep.len() != refs.len() {
            refs = keep;
            assignment = self.assign(v, &refs);
        }

        let ref_features: Vec<(Vec<f64>, Vec<f64>)> =
            refs.iter().map(|r| (self.rec(*r).clip.clone(), self.rec(*r).caption.clone())).collect();
        let cfg = self.cfg;
        let agent = self.agent_mut(v.agent);
        let parent = agent.records.remove(&v.instance).expect("split vertex exists");
        let new_ids: Vec<u32> = (0..refs.len())
            .map(|_| {
                agent.next_id += 1;
                agent.next_id
            })
            .collect();
        for (labels, asg) in agent.labels.iter_mut().zip(&assignment) {
            for &(idx, k) in asg {
                labels[idx] = new_ids[k];
            }
        }
        let mut touched = BTreeSet::new();
        for (k, id) in new_ids.iter().enumerate() {
            let frames: BTreeSet<usize> = agent.frames_with(*id).into_iter().collect();
            touched.extend(frames.iter().copied());
            agent.records.insert(
                *id,
                WorkRecord {
                    frame_masks: parent.frame_masks.iter().copied().filter(|(t, _)| frames.contains(t)).collect(),
                    clip: ref_features[k].0.clone(),
                    caption: ref_features[k].1.clone(),
                    confidence: 0.0,
                    tree: KdTree::new(&[]),
                    global_id: None,
                },
            );
            agent.refresh(*id, &cfg);
        }
        let out: Vec<VertexKey> = new_ids.iter().map(|id| VertexKey { agent: v.agent, instance: *id }).collect();
        self.actions.push(CorrectionAction {
            rule: Rule::SplitUnderSegmented,
            agent: v.agent,
            source: vec![v.instance],
            reference: refs,
            global_id: None,
            frames: touched.into_iter().collect(),
            changed: true,
        });
        Some(out)
    }

    /// Rule for over-segmentation; returns the sub-cluster after merging.
    fn merge_pass(&mut self, sub: Vec<VertexKey>) -> Vec<VertexKey> {
        let mut by_agent: BTreeMap<u32, Vec<VertexKey>> = BTreeMap::new();
        for v in &sub {
            by_agent.entry(v.agent).or_default().push(*v);
        }
        let mut out = Vec::new();
        for (agent_id, vs) in by_agent {
            if vs.len() < 2 {
                out.extend(vs);
                continue;
            }
            let container = |s: &Self, x: VertexKey| -> Option<VertexKey> {
                sub.iter()
                    .copied()
                    .filter(|y| y.agent != agent_id && s.overlap(x, *y).iob_12 >= s.cfg.theta_iob)
                    .max_by(|a, b| {
                        s.rec(*a).confidence.total_cmp(&s.rec(*b).confidence).then_with(|| b.cmp(a))
                    })
            };
            let contained: Vec<(VertexKey, VertexKey)> =
                vs.iter().filter_map(|x| container(self, *x).map(|c| (*x, c))).collect();
            let mut parent: Vec<usize> = (0..contained.len()).collect();
            fn find(p: &mut [usize], i: usize) -> usize {
                if p[i] != i {
                    let r = find(p, p[i]);
                    p[i] = r;
                }
                p[i]
            }
            for i in 0..contained.len() {
                for j in i + 1..contained.len() {
                    if self.similarity(contained[i].0, contained[j].0) >= self.cfg.feature_gate {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        if ri != rj {
                            parent[ri.max(rj)] = ri.min(rj);
                        }
                    }
                }
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in 0..contained.len() {
                let r = find(&mut parent, i);
                groups.entry(r).or_default().push(i);
            }
            let mut consumed = BTreeSet::new();
            for members in groups.values().filter(|m| m.len() >= 2) {
                let keys: Vec<VertexKey> = members.iter().map(|i| contained[*i].0).collect();
                let reference = members.iter().map(|i| contained[*i].1).collect::<BTreeSet<_>>();
                let target = keys[0];
                let cfg = self.cfg;
                let agent = self.agent_mut(agent_id);
                let ids: BTreeSet<u32> = keys[1..].iter().map(|k| k.instance).collect();
                for labels in agent.labels.iter_mut() {
                    for l in labels.iter_mut() {
                        if ids.contains(l) {
                            *l = target.instance;
                        }
                    }
                }
                let mut obs = Vec::new();
                for id in &ids {
                    let r = agent.records.remove(id).expect("merged record exists");
                    obs.extend(r.frame_masks);
                }
                let t = agent.records.get_mut(&target.instance).expect("target exists");
                t.frame_masks.extend(obs);
                t.frame_masks.sort_unstable();
                agent.refresh(target.instance, &cfg);
                let frames = agent.frames_with(target.instance);
                consumed.extend(keys.iter().copied());
                out.push(target);
                self.actions.push(CorrectionAction {
                    rule: Rule::MergeOverSegmented,
                    agent: agent_id,
                    source: keys.iter().map(|k| k.instance).collect(),
                    reference: reference.into_iter().collect(),
                    global_id: None,
                    frames,
                    changed: true,
                });
            }
            out.extend(vs.into_iter().filter(|v| !consumed.contains(v)));
        }
        out.sort();
        out
    }

    fn adopt_reference(&mut self, sub: &[VertexKey]) {
        let Some(&reference) = sub.iter().max_by(|a, b| {
            self.rec(**a).confidence.total_cmp(&self.rec(**b).confidence).then_with(|| b.cmp(a))
        }) else {
            return;
        };
        self.next_gid += 1;
        let gid = self.next_gid;
        let (clip, caption) = (self.rec(reference).clip.clone(), self.rec(reference).caption.clone());
        for &v in sub {
            let frames = self.agent(v.agent).frames_with(v.instance);
            let r = self.agent_mut(v.agent).records.get_mut(&v.instance).expect("vertex exists");
            r.global_id = Some(gid);
            if v == reference {
                continue;
            }
            let changed = cosine(&r.clip, &clip) < 0.999 || cosine(&r.caption, &caption) < 0.999;
            r.clip = clip.clone();
            r.caption = caption.clone();
            self.actions.push(CorrectionAction {
                rule: Rule::AdoptReference,
                agent: v.agent,
                source: vec![v.instance],
                reference: vec![reference],
                global_id: Some(gid),
                frames,
                changed,
            });
        }
    }
}

fn clouds_of(state: &State) -> Vec<InstanceCloud> {
    state
        .agents
        .iter()
        .flat_map(|a| {
            a.records.iter().filter(|(_, r)| !r.tree.is_empty()).map(move |(id, r)| InstanceCloud {
                agent_id: a.agent_id,
                instance_id: *id,
                global_id: r.global_id,
                points: r.tree.points().to_vec(),
            })
        })
        .collect()
}

/// Runs the whole alignment phase over every agent's fused instances.
pub fn align_agents(agents: &[AgentPerception], cfg: &AlignConfig) -> Result<AlignmentOutcome> {
    let mut work = Vec::with_capacity(agents.len());
    for a in agents {
        let by_t: BTreeMap<(usize, u32), u32> = a
            .records
            .iter()
            .flat_map(|r| r.frame_masks.iter().map(move |tm| (*tm, r.local_id)))
            .collect();
        let labels: Vec<Vec<u32>> = a
            .frames
            .iter()
            .map(|f| {
                f.corrupted_mask
                    .iter()
                    .map(|m| if *m == 0 { 0 } else { by_t.get(&(f.t, *m)).copied().unwrap_or(0) })
                    .collect()
            })
            .collect();
        let mut wa = WorkAgent {
            agent_id: a.agent_id,
            frames: &a.frames,
            labels,
            records: BTreeMap::new(),
            next_id: a.records.iter().map(|r| r.local_id).max().unwrap_or(0),
        };
        for r in &a.records {
            wa.records.insert(
                r.local_id,
                WorkRecord {
                    frame_masks: r.frame_masks.clone(),
                    clip: r.clip.clone(),
                    caption: r.caption.clone(),
                    confidence: 0.0,
                    tree: KdTree::new(&[]),
                    global_id: None,
                },
            );
            wa.refresh(r.local_id, cfg);
        }
        work.push(wa);
    }
    let index = work.iter().enumerate().map(|(i, a)| (a.agent_id, i)).collect();
    let mut state = State { agents: work, index, cfg: *cfg, actions: Vec::new(), next_gid: 0 };

    let initial_clouds = clouds_of(&state);
    let multi = agents.len() >= 2 && initial_clouds.iter().map(|c| c.agent_id).collect::<BTreeSet<_>>().len() >= 2;
    let initial_graph = if multi { Some(build_graph(&initial_clouds, &cfg.thresholds())?) } else { None };

    let mut clusters: Vec<Vec<VertexKey>> = match &initial_graph {
        Some(g) => g
            .clusters
            .iter()
            .map(|c| c.iter().map(|i| g.vertices[*i].key).collect())
            .collect(),
        None => initial_clouds
            .iter()
            .map(|c| vec![VertexKey { agent: c.agent_id, instance: c.instance_id }])
            .collect(),
    };
    // records with no depth never made it into the graph
    for a in &state.agents {
        for (id, r) in &a.records {
            if r.tree.is_empty() {
                clusters.push(vec![VertexKey { agent: a.agent_id, instance: *id }]);
            }
        }
    }
    for cluster in clusters {
        state.align_cluster(cluster);
    }

    let final_clouds = clouds_of(&state);
    let final_graph = if multi { Some(build_graph(&final_clouds, &cfg.thresholds())?) } else { None };
    let (injective, violations) = final_graph.as_ref().map(verify_injective).unwrap_or((true, Vec::new()));

    let out_agents = state
        .agents
        .iter()
        .map(|a| {
            let gid_of: BTreeMap<u32, u32> =
                a.records.iter().filter_map(|(id, r)| r.global_id.map(|g| (*id, g))).collect();
            AlignedAgent {
                agent_id: a.agent_id,
                records: a
                    .records
                    .iter()
                    .map(|(id, r)| InstanceRecord {
                        agent_id: a.agent_id,
                        local_id: *id,
                        frame_masks: r.frame_masks.clone(),
                        clip: r.clip.clone(),
                        caption: r.caption.clone(),
                        confidence: r.confidence,
                        global_id: r.global_id,
                    })
                    .collect(),
                masks: a
                    .labels
                    .iter()
                    .map(|l| l.iter().map(|x| gid_of.get(x).copied().unwrap_or(0)).collect())
                    .collect(),
            }
        })
        .collect();

    Ok(AlignmentOutcome {
        agents: out_agents,
        actions: state.actions,
        initial_clouds,
        initial_graph,
        final_graph,
        injective,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::{perceive_agent, PerceptConfig};
    use crate::scenarios::{five_objects, one_of_each_error};
    use crate::scene::{build_scene, render_agents, CorruptionSpec, Scene};

    fn perceive(spec: &CorruptionSpec) -> (Scene, Vec<AgentPerception>) {
        let cfg = five_objects();
        let scene = build_scene(&cfg).unwrap();
        let agents = render_agents(&scene, &cfg)
            .unwrap()
            .into_iter()
            .map(|f| perceive_agent(&scene, f, spec, &PerceptConfig::default()).unwrap().0)
            .collect();
        (scene, agents)
    }

    #[test]
    fn clean_agents_share_global_ids() {
        let (scene, agents) = perceive(&CorruptionSpec::default());
        let out = align_agents(&agents, &AlignConfig::default()).unwrap();
        assert!(out.injective);
        for a in &out.agents {
            assert_eq!(a.records.len(), 5);
            for r in &a.records {
                let gid = r.global_id.unwrap();
                assert_eq!(scene.classify(&r.clip, &r.caption, (0.5, 0.5)), scene.instance(gid).unwrap().class_id);
            }
        }
        assert!(out.actions.iter().all(|a| a.rule == Rule::AdoptReference));
    }

    #[test]
    fn repairs_one_error_of_each_kind() {
        let spec = CorruptionSpec { injections: one_of_each_error(), ..Default::default() };
        let (scene, agents) = perceive(&spec);
        let out = align_agents(&agents, &AlignConfig::default()).unwrap();
        assert!(out.injective, "{:?}", out.violations);
        let rules: BTreeSet<Rule> = out.actions.iter().map(|a| a.rule).collect();
        assert!(rules.contains(&Rule::SplitUnderSegmented));
        assert!(rules.contains(&Rule::MergeOverSegmented));
        let a1 = &out.agents[1];
        assert_eq!(a1.records.len(), 5);
        for (masks, f) in a1.masks.iter().zip(&agents[1].frames) {
            for (m, g) in masks.iter().zip(&f.gt_mask) {
                if *g != 0 {
                    assert_ne!(*m, 0);
                }
            }
        }
        let classes: BTreeSet<u32> =
            a1.records.iter().map(|r| scene.classify(&r.clip, &r.caption, (0.5, 0.5))).collect();
        assert_eq!(classes, (1..=5).collect());
        assert!(!out.actions_jsonl().is_empty());
    }

    #[test]
    fn single_agent_gets_sequential_ids() {
        let (_, agents) = perceive(&CorruptionSpec::default());
        let out = align_agents(&agents[..1], &AlignConfig::default()).unwrap();
        assert!(out.initial_graph.is_none());
        let ids: Vec<u32> = out.agents[0].records.iter().map(|r| r.global_id.unwrap()).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn confidence_tie_prefers_lower_agent() {
        let (_, agents) = perceive(&CorruptionSpec::default());
        let swapped: Vec<AgentPerception> = agents
            .iter()
            .cloned()
            .map(|mut a| {
                a.agent_id = 1 - a.agent_id;
                a
            })
            .collect();
        let out = align_agents(&swapped, &AlignConfig::default()).unwrap();
        let conf = |k: &VertexKey| {
            out.agents.iter().find(|a| a.agent_id == k.agent).unwrap().records.iter().find(|r| r.local_id == k.instance).unwrap().confidence
        };
        let mut ties = 0;
        for act in out.actions.iter().filter(|a| a.rule == Rule::AdoptReference) {
            let src = VertexKey { agent: act.agent, instance: act.source[0] };
            let (cr, cs) = (conf(&act.reference[0]), conf(&src));
            assert!(cr >= cs);
            if cr == cs {
                ties += 1;
                assert!(act.reference[0] < src);
            }
        }
        assert!(ties > 0);
    }
}
