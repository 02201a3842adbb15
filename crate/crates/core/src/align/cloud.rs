use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::FrameBundle;
use crate::spatial::KdTree;

/// Downsampled point cloud of one agent-level instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCloud {
    pub agent_id: u32,
    pub instance_id: u32,
    pub global_id: Option<u32>,
    pub points: Vec<Vec3>,
}

/// Back-projects mask pixels into world space. Pixels without depth are
/// skipped; the second value counts them.
pub fn backproject(frame: &FrameBundle, pixels: impl IntoIterator<Item = usize>) -> (Vec<Vec3>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for idx in pixels {
        match frame.backproject_pixel(idx) {
            Some(p) => out.push(p),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::debug!("backproject: skipped {skipped} zero-depth pixels in frame {}", frame.t);
    }
    (out, skipped)
}

type VoxelKey = (i64, i64, i64);

/// Running voxel-centroid accumulator; equivalent to downsampling the union
/// of everything added so far.
#[derive(Debug, Clone, Default)]
pub struct VoxelGrid {
    voxel: f64,
    cells: BTreeMap<VoxelKey, (Vec3, usize)>,
}

impl VoxelGrid {
    pub fn new(voxel: f64) -> Self {
        VoxelGrid { voxel, cells: BTreeMap::new() }
    }

    fn key(&self, p: &Vec3) -> VoxelKey {
        (
            (p.x / self.voxel).floor() as i64,
            (p.y / self.voxel).floor() as i64,
            (p.z / self.voxel).floor() as i64,
        )
    }

    pub fn add(&mut self, p: &Vec3) {
        let k = self.key(p);
        let e = self.cells.entry(k).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }

    pub fn extend<'a>(&mut self, pts: impl IntoIterator<Item = &'a Vec3>) {
        for p in pts {
            self.add(p);
        }
    }

    pub fn merge(&mut self, other: &VoxelGrid) {
        for (k, (s, n)) in &other.cells {
            let e = self.cells.entry(*k).or_insert((Vec3::zeros(), 0));
            e.0 += s;
            e.1 += n;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn centroids(&self) -> Vec<Vec3> {
        self.cells.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// One centroid per occupied voxel, in voxel-key order.
pub fn downsample(points: &[Vec3], voxel: f64) -> Result<Vec<Vec3>> {
    if !(voxel > 0.0) {
        return Err(Error::Precondition(format!("voxel size {voxel} must be > 0")));
    }
    let mut g = VoxelGrid::new(voxel);
    g.extend(points);
    Ok(g.centroids())
}

/// Overlap ratios between two clouds at match distance `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// Points of the first cloud with a neighbour of the second within tau.
    pub matched_12: usize,
    pub matched_21: usize,
    pub iou: f64,
    pub iob_12: f64,
    pub iob_21: f64,
}

impl Overlap {
    pub fn max_iob(&self) -> f64 {
        self.iob_12.max(self.iob_21)
    }
}

fn ratios(n1: usize, n2: usize, m12: usize, m21: usize) -> Overlap {
    let inter = (m12 + m21) as f64 / 2.0;
    let union = n1 as f64 + n2 as f64 - inter;
    Overlap {
        matched_12: m12,
        matched_21: m21,
        iou: if union > 0.0 { inter / union } else { 0.0 },
        iob_12: m12 as f64 / n1 as f64,
        iob_21: m21 as f64 / n2 as f64,
    }
}

/// Counts threshold matches in both directions using kd-trees.
pub fn overlap(p1: &[Vec3], p2: &[Vec3], tau: f64) -> Result<Overlap> {
    if p1.is_empty() || p2.is_empty() {
        return Err(Error::Precondition("overlap of an empty cloud".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!("tau {tau} must be > 0")));
    }
    let t1 = KdTree::new(p1);
    let t2 = KdTree::new(p2);
    Ok(overlap_indexed(&t1, &t2, tau))
}

/// Same as [`overlap`] with prebuilt trees.
pub fn overlap_indexed(t1: &KdTree, t2: &KdTree, tau: f64) -> Overlap {
    let m12 = t1.points().iter().filter(|p| t2.any_within(p, tau)).count();
    let m21 = t2.points().iter().filter(|p| t1.any_within(p, tau)).count();
    ratios(t1.len(), t2.len(), m12, m21)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Intrinsics};
    use crate::scene::{build_scene, render_frame, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn principal_point_backprojects_on_axis() {
        let intr = Intrinsics { fx: 50.0, fy: 50.0, cx: 8.0, cy: 8.0 };
        let mut f = FrameBundle {
            agent_id: 0,
            t: 0,
            pose: crate::geometry::Pose::identity(),
            intrinsics: intr,
            width: 16,
            height: 16,
            rgb: vec![[0.0; 3]; 256],
            depth: vec![0.0; 256],
            gt_mask: vec![0; 256],
            corrupted_mask: vec![0; 256],
        };
        let idx = f.index(8, 8);
        f.depth[idx] = 2.0;
        let (pts, skipped) = backproject(&f, [idx, 0]);
        assert_eq!(skipped, 1);
        assert_eq!(pts, vec![Vec3::new(0.0, 0.0, 2.0)]);

        f.pose = crate::geometry::Pose::translation(1.0, -2.0, 0.5);
        let (moved, _) = backproject(&f, [idx]);
        assert!((moved[0] - Vec3::new(1.0, -2.0, 2.5)).norm() < 1e-12);
    }

    #[test]
    fn sphere_frame_lands_on_surface() {
        let scene = build_scene(
            &SceneConfig::from_toml_str(
                r#"
                seed = 2
                [[primitive]]
                shape = { kind = "sphere", radius = 0.5 }
                position = [0.1, 0.2, 0.3]
                albedo = [0.5, 0.5, 0.5]
                class_id = 1
                "#,
            )
            .unwrap(),
        )
        .unwrap();
        let pose = look_at(Vec3::new(1.5, -1.0, 1.0), Vec3::new(0.1, 0.2, 0.3), Vec3::z());
        let f = render_frame(&scene, &pose, &Intrinsics::from_fov(64, 64, 60.0), 64, 64).unwrap();
        let pix: Vec<usize> = (0..f.len()).filter(|i| f.gt_mask[*i] == 1).collect();
        assert!(pix.len() > 100);
        let (pts, _) = backproject(&f, pix);
        let c = Vec3::new(0.1, 0.2, 0.3);
        for p in pts {
            assert!(((p - c).norm() - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn downsample_examples() {
        let same = vec![Vec3::new(0.3, 0.3, 0.3); 1000];
        assert_eq!(downsample(&same, 0.05).unwrap().len(), 1);

        let mut grid = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    grid.push(Vec3::new(i as f64 * 0.1 + 0.01, j as f64 * 0.1 + 0.01, k as f64 * 0.1 + 0.01));
                }
            }
        }
        assert_eq!(downsample(&grid, 0.05).unwrap().len(), grid.len());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cube: Vec<Vec3> = (0..10_000).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        assert!(downsample(&cube, 0.25).unwrap().len() <= 64);
        assert!(downsample(&cube, 0.0).is_err());
    }

    #[test]
    fn overlap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Vec3> = (0..10).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let o = overlap(&a, &a, 0.01).unwrap();
        assert_eq!((o.iou, o.iob_12, o.iob_21), (1.0, 1.0, 1.0));

        let far: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(10.0, 0.0, 0.0)).collect();
        let o = overlap(&a, &far, 0.01).unwrap();
        assert_eq!((o.iou, o.iob_12, o.iob_21), (0.0, 0.0, 0.0));

        let mut b = a.clone();
        b.extend(far);
        let o = overlap(&a, &b, 0.01).unwrap();
        assert_eq!((o.matched_12, o.matched_21), (10, 10));
        assert_eq!(o.iou, 0.5);
        assert_eq!(o.iob_12, 1.0);
        assert_eq!(o.iob_21, 0.5);

        assert!(overlap(&[], &a, 0.01).is_err());
    }

    #[test]
    fn voxel_grid_merge_equals_downsample_of_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let b: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let mut ga = VoxelGrid::new(0.2);
        ga.extend(&a);
        let mut gb = VoxelGrid::new(0.2);
        gb.extend(&b);
        ga.merge(&gb);
        let mut all = a.clone();
        all.extend(b);
        let want = downsample(&all, 0.2).unwrap();
        let got = ga.centroids();
        assert_eq!(want.len(), got.len());
        for (w, g) in want.iter().zip(&got) {
            assert!((w - g).norm() < 1e-12);
        }
    }
}
