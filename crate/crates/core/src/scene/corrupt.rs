//! Segmenter simulation: turns ground-truth instance masks into per-frame
//! segment ids with codebook features, injecting the four failure modes the
//! alignment stage repairs.
//!
//! Corruptions are decided per (agent, instance) and applied to every frame
//! of that agent in which the instance is visible, so they survive
//! cross-frame fusion the way systematic segmenter errors do.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{perturb, random_unit};
use crate::geometry::Vec3;

use super::{FrameBundle, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    SemanticError,
    OverSegmentation,
    UnderSegmentation,
    ViewpointLoss,
}

/// Forces a specific corruption regardless of the sampled rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub kind: CorruptionKind,
    pub agent: u32,
    /// One instance id, or two for under-segmentation.
    pub instances: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    #[serde(default)]
    pub semantic_error_rate: f64,
    #[serde(default)]
    pub overseg_rate: f64,
    #[serde(default)]
    pub underseg_rate: f64,
    #[serde(default)]
    pub viewpoint_loss_rate: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Angular jitter applied to every per-frame feature observation.
    #[serde(default = "default_noise")]
    pub feature_noise_deg: f64,
    /// Width of the image border band, as a fraction of each side.
    #[serde(default = "default_border")]
    pub border_fraction: f64,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

fn default_noise() -> f64 {
    2.0
}

fn default_border() -> f64 {
    0.1
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            semantic_error_rate: 0.0,
            overseg_rate: 0.0,
            underseg_rate: 0.0,
            viewpoint_loss_rate: 0.0,
            rng_seed: 0,
            feature_noise_deg: default_noise(),
            border_fraction: default_border(),
            injections: Vec::new(),
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("semantic_error_rate", self.semantic_error_rate),
            ("overseg_rate", self.overseg_rate),
            ("underseg_rate", self.underseg_rate),
            ("viewpoint_loss_rate", self.viewpoint_loss_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("corruption.{name} = {r} outside [0,1]")));
            }
        }
        if !(0.0..0.5).contains(&self.border_fraction) {
            return Err(Error::Config("corruption.border_fraction outside [0,0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub clip: Vec<f64>,
    pub caption: Vec<f64>,
}

/// Per-agent feature store; ids are dense starting at 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: BTreeMap<u32, CodebookEntry>,
}

impl Codebook {
    pub fn get(&self, id: u32) -> Option<&CodebookEntry> {
        self.entries.get(&id)
    }

    fn push(&mut self, e: CodebookEntry) -> u32 {
        let id = self.entries.len() as u32 + 1;
        self.entries.insert(id, e);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub kind: CorruptionKind,
    pub agent: u32,
    pub instances: Vec<u32>,
    pub frames: Vec<usize>,
    pub codebook_ids: Vec<u32>,
    /// Class whose features were substituted, for semantic errors.
    pub wrong_class: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLog {
    pub records: Vec<CorruptionRecord>,
}

impl CorruptionLog {
    pub fn extend(&mut self, other: CorruptionLog) {
        self.records.extend(other.records);
    }

    pub fn of_kind(&self, kind: CorruptionKind) -> impl Iterator<Item = &CorruptionRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }
}

#[derive(Debug, Clone)]
enum Plan {
    Clean,
    Semantic { clip: Vec<f64>, caption: Vec<f64> },
    Viewpoint { clip: Vec<f64>, caption: Vec<f64> },
    Over { normal: Vec3, center: Vec3 },
    /// Absorbed into the segment of `head`.
    Under { head: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct SegmentKey {
    instance: u32,
    part: u8,
}

/// Instance ids whose mask centroid lies in the border band in every frame
/// where they are visible.
pub fn border_only_instances(frames: &[FrameBundle], border_fraction: f64) -> BTreeSet<u32> {
    let mut stats: BTreeMap<u32, bool> = BTreeMap::new();
    for f in frames {
        let mut acc: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
        for (idx, &g) in f.gt_mask.iter().enumerate() {
            if g != 0 {
                let (u, v) = f.pixel(idx);
                let e = acc.entry(g).or_default();
                e.0 += u as f64;
                e.1 += v as f64;
                e.2 += 1;
            }
        }
        for (g, (su, sv, n)) in acc {
            let cu = su / n as f64;
            let cv = sv / n as f64;
            let bw = border_fraction * f.width as f64;
            let bh = border_fraction * f.height as f64;
            let in_band = cu < bw || cu >= f.width as f64 - bw || cv < bh || cv >= f.height as f64 - bh;
            let e = stats.entry(g).or_insert(true);
            *e &= in_band;
        }
    }
    stats.into_iter().filter(|(_, b)| *b).map(|(g, _)| g).collect()
}

/// Instance pairs whose gt masks share a 4-neighbour boundary in some frame.
pub fn adjacent_pairs(frames: &[FrameBundle]) -> BTreeSet<(u32, u32)> {
    let mut out = BTreeSet::new();
    for f in frames {
        for v in 0..f.height {
            for u in 0..f.width {
                let a = f.gt_mask[f.index(u, v)];
                if a == 0 {
                    continue;
                }
                for (du, dv) in [(1usize, 0usize), (0, 1)] {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < f.width && nv < f.height {
                        let b = f.gt_mask[f.index(nu, nv)];
                        if b != 0 && b != a {
                            out.insert((a.min(b), a.max(b)));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fills `corrupted_mask` of one agent's frames and returns its codebook and
/// the list of injected errors.
pub fn corrupt_masks(
    scene: &Scene,
    frames: &mut [FrameBundle],
    spec: &CorruptionSpec,
) -> Result<(Codebook, CorruptionLog)> {
    spec.validate()?;
    let agent = frames.first().map(|f| f.agent_id).unwrap_or(0);
    if spec.underseg_rate > 0.0 && scene.instances.len() < 2 {
        return Err(Error::Precondition("under-segmentation needs at least 2 instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ (agent as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let visible: BTreeSet<u32> = frames.iter().flat_map(|f| f.gt_mask.iter().copied()).filter(|g| *g != 0).collect();

    let mut plans: BTreeMap<u32, Plan> = visible.iter().map(|g| (*g, Plan::Clean)).collect();
    let mut kinds: BTreeMap<u32, (CorruptionKind, Vec<u32>, Option<u32>)> = BTreeMap::new();

    let wrong_features = |rng: &mut ChaCha8Rng, own: u32| -> (Vec<f64>, Vec<f64>, Option<u32>) {
        let others: Vec<u32> = scene.classes.keys().copied().filter(|c| *c != own).collect();
        if others.is_empty() {
            (random_unit(rng, scene.feature_dim), random_unit(rng, scene.feature_dim), None)
        } else {
            let c = others[rng.random_range(0..others.len())];
            let cf = &scene.classes[&c];
            (cf.clip.clone(), cf.caption.clone(), Some(c))
        }
    };

    let apply = |rng: &mut ChaCha8Rng,
                     plans: &mut BTreeMap<u32, Plan>,
                     kinds: &mut BTreeMap<u32, (CorruptionKind, Vec<u32>, Option<u32>)>,
                     kind: CorruptionKind,
                     ids: &[u32]|
     -> Result<()> {
        for id in ids {
            if scene.instance(*id).is_none() {
                return Err(Error::Precondition(format!("unknown instance {id}")));
            }
        }
        let g = ids[0];
        let prim = scene.instance(g).expect("checked");
        match kind {
            CorruptionKind::SemanticError => {
                let (clip, caption, class) = wrong_features(rng, prim.class_id);
                plans.insert(g, Plan::Semantic { clip, caption });
                kinds.insert(g, (kind, vec![g], class));
            }
            CorruptionKind::ViewpointLoss => {
                let clip = random_unit(rng, scene.feature_dim);
                let caption = random_unit(rng, scene.feature_dim);
                plans.insert(g, Plan::Viewpoint { clip, caption });
                kinds.insert(g, (kind, vec![g], None));
            }
            CorruptionKind::OverSegmentation => {
                let a: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                let normal = Vec3::new(a.cos(), a.sin(), 0.0);
                plans.insert(g, Plan::Over { normal, center: prim.center() });
                kinds.insert(g, (kind, vec![g], None));
            }
            CorruptionKind::UnderSegmentation => {
                if ids.len() != 2 || ids[0] == ids[1] {
                    return Err(Error::Precondition("under-segmentation merges exactly two instances".into()));
                }
                plans.insert(ids[1], Plan::Under { head: g });
                kinds.insert(g, (kind, ids.to_vec(), None));
            }
        }
        Ok(())
    };

    for inj in spec.injections.iter().filter(|i| i.agent == agent) {
        if inj.kind == CorruptionKind::UnderSegmentation && scene.instances.len() < 2 {
            return Err(Error::Precondition("under-segmentation needs at least 2 instances".into()));
        }
        if inj.instances.is_empty() {
            return Err(Error::Precondition("injection lists no instance".into()));
        }
        apply(&mut rng, &mut plans, &mut kinds, inj.kind, &inj.instances)?;
    }

    let any_rate = spec.semantic_error_rate + spec.overseg_rate + spec.underseg_rate + spec.viewpoint_loss_rate > 0.0;
    if any_rate {
        let border = border_only_instances(frames, spec.border_fraction);
        let adjacent = adjacent_pairs(frames);
        for &g in &visible {
            if !matches!(plans[&g], Plan::Clean) {
                continue;
            }
            if rng.random::<f64>() < spec.underseg_rate {
                let partner = adjacent
                    .iter()
                    .filter_map(|&(a, b)| if a == g { Some(b) } else if b == g { Some(a) } else { None })
                    .find(|p| matches!(plans.get(p), Some(Plan::Clean)));
                if let Some(p) = partner {
                    apply(&mut rng, &mut plans, &mut kinds, CorruptionKind::UnderSegmentation, &[g, p])?;
                    continue;
                }
            }
            if rng.random::<f64>() < spec.overseg_rate {
                apply(&mut rng, &mut plans, &mut kinds, CorruptionKind::OverSegmentation, &[g])?;
                continue;
            }
            if rng.random::<f64>() < spec.semantic_error_rate {
                apply(&mut rng, &mut plans, &mut kinds, CorruptionKind::SemanticError, &[g])?;
                continue;
            }
            if rng.random::<f64>() < spec.viewpoint_loss_rate && border.contains(&g) {
                apply(&mut rng, &mut plans, &mut kinds, CorruptionKind::ViewpointLoss, &[g])?;
            }
        }
    }

    let noise = spec.feature_noise_deg.to_radians();
    let mut codebook = Codebook::default();
    let mut touched: BTreeMap<u32, (BTreeSet<usize>, Vec<u32>)> = BTreeMap::new();
    for f in frames.iter_mut() {
        let mut keys = vec![None; f.len()];
        for idx in 0..f.len() {
            let g = f.gt_mask[idx];
            if g == 0 {
                continue;
            }
            let key = match plans.get(&g).unwrap_or(&Plan::Clean) {
                Plan::Under { head } => SegmentKey { instance: *head, part: 0 },
                Plan::Over { normal, center } => {
                    let p = f.backproject_pixel(idx).unwrap_or(*center);
                    let side = ((p - center).dot(normal) >= 0.0) as u8;
                    SegmentKey { instance: g, part: side }
                }
                _ => SegmentKey { instance: g, part: 0 },
            };
            keys[idx] = Some(key);
        }
        let present: BTreeSet<SegmentKey> = keys.iter().flatten().copied().collect();
        let mut ids: BTreeMap<SegmentKey, u32> = BTreeMap::new();
        for key in present {
            let prim = scene.instance(key.instance).expect("visible instance");
            let (clip, caption) = match &plans[&key.instance] {
                Plan::Semantic { clip, caption, .. } | Plan::Viewpoint { clip, caption } => (clip.clone(), caption.clone()),
                _ => (prim.gt_clip_feature.clone(), prim.gt_caption_feature.clone()),
            };
            let id = codebook.push(CodebookEntry {
                clip: perturb(&mut rng, &clip, noise),
                caption: perturb(&mut rng, &caption, noise),
            });
            ids.insert(key, id);
            if kinds.contains_key(&key.instance) {
                let e = touched.entry(key.instance).or_default();
                e.0.insert(f.t);
                e.1.push(id);
            }
        }
        f.corrupted_mask = keys.iter().map(|k| k.map(|k| ids[&k]).unwrap_or(0)).collect();
    }

    let mut log = CorruptionLog::default();
    for (g, (kind, instances, wrong_class)) in kinds {
        let (frames_touched, codebook_ids) = touched.remove(&g).unwrap_or_default();
        log.records.push(CorruptionRecord {
            kind,
            agent,
            instances,
            frames: frames_touched.into_iter().collect(),
            codebook_ids,
            wrong_class,
        });
    }
    Ok((codebook, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Intrinsics};
    use crate::scene::{build_scene, render_frame, SceneConfig};

    fn two_box_scene() -> Scene {
        build_scene(
            &SceneConfig::from_toml_str(
                r#"
                seed = 3
                [[primitive]]
                shape = { kind = "box", half_extents = [0.2, 0.2, 0.2] }
                position = [-0.2, 0.0, 0.0]
                albedo = [0.9, 0.1, 0.1]
                class_id = 1
                [[primitive]]
                shape = { kind = "box", half_extents = [0.2, 0.2, 0.2] }
                position = [0.2, 0.0, 0.0]
                albedo = [0.1, 0.9, 0.1]
                class_id = 2
                "#,
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn frames(scene: &Scene) -> Vec<FrameBundle> {
        let intr = Intrinsics::from_fov(48, 48, 60.0);
        (0..3)
            .map(|t| {
                let eye = Vec3::new(0.3 * t as f64 - 0.3, -2.0, 0.5);
                let mut f = render_frame(scene, &look_at(eye, Vec3::zeros(), Vec3::z()), &intr, 48, 48).unwrap();
                f.t = t;
                f
            })
            .collect()
    }

    #[test]
    fn zero_rates_reproduce_gt_partition() {
        let s = two_box_scene();
        let mut fr = frames(&s);
        let (cb, log) = corrupt_masks(&s, &mut fr, &CorruptionSpec::default()).unwrap();
        assert!(log.records.is_empty());
        for f in &fr {
            // segment ids are a relabeling of gt ids within the frame
            let mut map = BTreeMap::new();
            for (g, c) in f.gt_mask.iter().zip(&f.corrupted_mask) {
                assert_eq!(*g == 0, *c == 0);
                if *g != 0 {
                    assert_eq!(*map.entry(*c).or_insert(*g), *g);
                }
            }
        }
        assert_eq!(cb.len(), 6);
    }

    #[test]
    fn underseg_covers_union() {
        let s = two_box_scene();
        let mut fr = frames(&s);
        let spec = CorruptionSpec {
            injections: vec![Injection { kind: CorruptionKind::UnderSegmentation, agent: 0, instances: vec![1, 2] }],
            ..Default::default()
        };
        let (_, log) = corrupt_masks(&s, &mut fr, &spec).unwrap();
        assert_eq!(log.records.len(), 1);
        for f in &fr {
            let ids: BTreeSet<u32> = f.corrupted_mask.iter().copied().filter(|c| *c != 0).collect();
            assert_eq!(ids.len(), 1);
            let union = f.gt_mask.iter().filter(|g| **g != 0).count();
            assert_eq!(f.corrupted_mask.iter().filter(|c| **c != 0).count(), union);
        }
    }

    #[test]
    fn overseg_partitions_mask() {
        let s = two_box_scene();
        let mut fr = frames(&s);
        let spec = CorruptionSpec {
            injections: vec![Injection { kind: CorruptionKind::OverSegmentation, agent: 0, instances: vec![1] }],
            ..Default::default()
        };
        corrupt_masks(&s, &mut fr, &spec).unwrap();
        let f = &fr[1];
        let ids: BTreeSet<u32> = f
            .gt_mask
            .iter()
            .zip(&f.corrupted_mask)
            .filter(|(g, _)| **g == 1)
            .map(|(_, c)| *c)
            .collect();
        assert_eq!(ids.len(), 2);
        for (g, c) in f.gt_mask.iter().zip(&f.corrupted_mask) {
            assert_eq!(*g == 1, ids.contains(c));
        }
    }

    #[test]
    fn underseg_needs_two_instances() {
        let s = build_scene(
            &SceneConfig::from_toml_str(
                r#"
                seed = 1
                [[primitive]]
                shape = { kind = "sphere", radius = 0.3 }
                position = [0.0, 0.0, 0.0]
                albedo = [0.5, 0.5, 0.5]
                class_id = 1
                "#,
            )
            .unwrap(),
        )
        .unwrap();
        let mut fr = frames(&s);
        let spec = CorruptionSpec { underseg_rate: 0.5, ..Default::default() };
        assert!(corrupt_masks(&s, &mut fr, &spec).is_err());
    }

    #[test]
    fn rates_out_of_range_rejected() {
        let s = two_box_scene();
        let mut fr = frames(&s);
        let spec = CorruptionSpec { overseg_rate: 1.5, ..Default::default() };
        assert!(corrupt_masks(&s, &mut fr, &spec).is_err());
    }
}
