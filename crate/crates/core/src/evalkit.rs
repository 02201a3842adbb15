//! Surface extraction from trained fields, geometric and semantic metrics
//! against analytic ground truth, and feature-based instance retrieval.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::cosine;
use crate::field::InstanceField;
use crate::geometry::{Aabb, Vec3};
use crate::scene::Scene;
use crate::spatial::KdTree;

pub const ISO_LEVEL: f64 = 0.5;
/// Default matching threshold for completion ratio and labels, in meters.
pub const MATCH_THRESHOLD: f64 = 0.05;
/// Ground-truth surface sampling density in points per square meter.
pub const GT_DENSITY: f64 = 1e4;
/// Below this spread of σ over the grid a field has no usable surface.
pub const MIN_SIGMA_RANGE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSource {
    Reconstruction,
    GroundTruth,
}

/// Points with per-point global instance id and class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCloud {
    pub source: CloudSource,
    pub points: Vec<Vec3>,
    pub instance_ids: Vec<u32>,
    pub class_ids: Vec<u32>,
}

impl SurfaceCloud {
    pub fn new(source: CloudSource) -> Self {
        SurfaceCloud { source, points: Vec::new(), instance_ids: Vec::new(), class_ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vec3, instance: u32, class: u32) {
        self.points.push(p);
        self.instance_ids.push(instance);
        self.class_ids.push(class);
    }

    pub fn extend(&mut self, other: &SurfaceCloud) {
        self.points.extend_from_slice(&other.points);
        self.instance_ids.extend_from_slice(&other.instance_ids);
        self.class_ids.extend_from_slice(&other.class_ids);
    }

    /// Points for which `keep` holds.
    pub fn filter(&self, keep: impl Fn(&Vec3, u32, u32) -> bool) -> SurfaceCloud {
        let mut out = SurfaceCloud::new(self.source);
        for i in 0..self.len() {
            if keep(&self.points[i], self.instance_ids[i], self.class_ids[i]) {
                out.push(self.points[i], self.instance_ids[i], self.class_ids[i]);
            }
        }
        out
    }
}

/// Samples every primitive's surface uniformly at `density` points per m².
pub fn sample_ground_truth(scene: &Scene, density: f64, seed: u64) -> Result<SurfaceCloud> {
    if !(density > 0.0) {
        return Err(Error::Precondition(format!("density {density} must be positive")));
    }
    let mut out = SurfaceCloud::new(CloudSource::GroundTruth);
    for p in &scene.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(p.instance_id).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = (p.shape.surface_area() * density).ceil() as usize;
        for _ in 0..n {
            out.push(p.sample_surface(&mut rng), p.instance_id, p.class_id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Extraction {
    pub cloud: Option<SurfaceCloud>,
    /// Fields that produced no surface: no iso-crossing or a flat σ grid.
    pub degenerate: Vec<u32>,
}

/// Iso-level crossings of a scalar field on a regular grid: the vertex set
/// marching cubes would emit, one per sign-changing grid edge, placed by
/// linear interpolation. Returns the vertices and the value range seen.
pub fn isosurface_vertices(
    aabb: &Aabb,
    cells: usize,
    level: f64,
    eval: impl Fn(&[Vec3]) -> Result<Vec<f64>>,
) -> Result<(Vec<Vec3>, (f64, f64))> {
    if cells < 16 {
        return Err(Error::Precondition(format!("grid resolution {cells} below 16")));
    }
    let m = cells + 1;
    let step = aabb.extent() / cells as f64;
    let at = |i: usize, j: usize, k: usize| aabb.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z);
    let mut grid = Vec::with_capacity(m * m * m);
    for k in 0..m {
        for j in 0..m {
            for i in 0..m {
                grid.push(at(i, j, k));
            }
        }
    }
    let vals = eval(&grid)?;
    if vals.len() != grid.len() {
        return Err(Error::Shape { expected: grid.len(), got: vals.len() });
    }
    let range = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let idx = |i: usize, j: usize, k: usize| (k * m + j) * m + i;
    let mut out = Vec::new();
    for k in 0..m {
        for j in 0..m {
            for i in 0..m {
                let a = idx(i, j, k);
                for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (ii, jj, kk) = (i + di, j + dj, k + dk);
                    if ii >= m || jj >= m || kk >= m {
                        continue;
                    }
                    let b = idx(ii, jj, kk);
                    let (va, vb) = (vals[a], vals[b]);
                    if (va >= level) != (vb >= level) {
                        let t = (level - va) / (vb - va);
                        out.push(grid[a] + (grid[b] - grid[a]) * t);
                    }
                }
            }
        }
    }
    Ok((out, range))
}

/// Extracts the σ = 0.5 surface of each field over its own box. Vertices
/// carry the field's global id and the class from `classes` (0 if absent).
pub fn extract_surface<'a>(
    fields: impl IntoIterator<Item = &'a InstanceField>,
    cells: usize,
    classes: &BTreeMap<u32, u32>,
) -> Result<Extraction> {
    let mut cloud = SurfaceCloud::new(CloudSource::Reconstruction);
    let mut degenerate = Vec::new();
    for f in fields {
        let (verts, (lo, hi)) =
            isosurface_vertices(f.aabb(), cells, ISO_LEVEL, |pts| Ok(f.eval(pts)?.iter().map(|o| o.sigma).collect()))?;
        if verts.is_empty() || hi - lo < MIN_SIGMA_RANGE {
            log::warn!("field {} has no usable surface (σ in [{lo:.3}, {hi:.3}])", f.global_id());
            degenerate.push(f.global_id());
            continue;
        }
        let class = classes.get(&f.global_id()).copied().unwrap_or(0);
        for v in verts {
            cloud.push(v, f.global_id(), class);
        }
    }
    Ok(Extraction { cloud: (!cloud.is_empty()).then_some(cloud), degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricMetrics {
    /// Mean recon→gt distance in cm; `None` when the reconstruction is empty.
    pub accuracy_cm: Option<f64>,
    /// Mean gt→recon distance in cm; infinite when the reconstruction is empty.
    pub completion_cm: f64,
    pub completion_ratio_pct: f64,
}

fn nn_distances(from: &[Vec3], to: &KdTree) -> Vec<f64> {
    from.iter().map(|p| to.nearest(p).map_or(f64::INFINITY, |(_, d2)| d2.sqrt())).collect()
}

/// Accuracy, completion and completion ratio at `threshold` meters.
pub fn geometric_metrics(recon: Option<&SurfaceCloud>, gt: &SurfaceCloud, threshold: f64) -> Result<GeometricMetrics> {
    if gt.is_empty() {
        return Err(Error::Precondition("ground-truth cloud is empty".into()));
    }
    let recon = match recon {
        Some(r) if !r.is_empty() => r,
        _ => return Ok(GeometricMetrics { accuracy_cm: None, completion_cm: f64::INFINITY, completion_ratio_pct: 0.0 }),
    };
    let gt_tree = KdTree::new(&gt.points);
    let rc_tree = KdTree::new(&recon.points);
    let acc = nn_distances(&recon.points, &gt_tree);
    let comp = nn_distances(&gt.points, &rc_tree);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within = comp.iter().filter(|d| **d < threshold).count();
    Ok(GeometricMetrics {
        accuracy_cm: Some(100.0 * mean(&acc)),
        completion_cm: 100.0 * mean(&comp),
        completion_ratio_pct: 100.0 * within as f64 / comp.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    pub f_miou: f64,
    pub f_macc: f64,
}

/// Frequency-weighted IoU and accuracy over gt points matched to their
/// nearest reconstructed point within `threshold`. Weights are gt class
/// point counts; a class with no matched point scores 0.
pub fn semantic_metrics(recon: Option<&SurfaceCloud>, gt: &SurfaceCloud, threshold: f64) -> Result<SemanticMetrics> {
    if gt.is_empty() {
        return Err(Error::Precondition("ground-truth cloud is empty".into()));
    }
    let mut gt_count: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &gt.class_ids {
        *gt_count.entry(*c).or_default() += 1;
    }
    let mut tp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fneg: BTreeMap<u32, usize> = BTreeMap::new();
    if let Some(r) = recon.filter(|r| !r.is_empty()) {
        let tree = KdTree::new(&r.points);
        for (p, g) in gt.points.iter().zip(&gt.class_ids) {
            let Some((i, d2)) = tree.nearest(p) else { continue };
            if d2.sqrt() >= threshold {
                continue;
            }
            let pred = r.class_ids[i];
            if pred == *g {
                *tp.entry(*g).or_default() += 1;
            } else {
                *fneg.entry(*g).or_default() += 1;
                *fp.entry(pred).or_default() += 1;
            }
        }
    }
    let total: usize = gt_count.values().sum();
    let (mut miou, mut macc) = (0.0, 0.0);
    for (c, n) in &gt_count {
        let t = tp.get(c).copied().unwrap_or(0) as f64;
        let f_p = fp.get(c).copied().unwrap_or(0) as f64;
        let f_n = fneg.get(c).copied().unwrap_or(0) as f64;
        let iou = if t + f_p + f_n > 0.0 { t / (t + f_p + f_n) } else { 0.0 };
        let acc = if t + f_n > 0.0 { t / (t + f_n) } else { 0.0 };
        let w = *n as f64 / total as f64;
        miou += w * iou;
        macc += w * acc;
    }
    Ok(SemanticMetrics { f_miou: 100.0 * miou, f_macc: 100.0 * macc })
}

/// An instance available for retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub global_id: u32,
    pub clip: Vec<f64>,
    pub caption: Vec<f64>,
}

/// Ranks instances by `w1·cos(q_clip, clip) + w2·cos(q_caption, caption)`,
/// descending, ties broken by ascending global id.
pub fn retrieve(q_clip: &[f64], q_caption: &[f64], entries: &[RetrievalEntry], weights: (f64, f64)) -> Result<Vec<(u32, f64)>> {
    if entries.is_empty() {
        return Err(Error::Precondition("no instances to retrieve from".into()));
    }
    let (w1, w2) = weights;
    if !(w1 >= 0.0 && w2 >= 0.0 && ((w1 + w2) - 1.0).abs() < 1e-9) {
        return Err(Error::Precondition(format!("retrieval weights ({w1}, {w2}) must be non-negative and sum to 1")));
    }
    let mut scored: Vec<(u32, f64)> = entries
        .iter()
        .map(|e| (e.global_id, w1 * cosine(q_clip, &e.clip) + w2 * cosine(q_caption, &e.caption)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}
