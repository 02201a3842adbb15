//! Local data, parameter-consistency and cross-rendering losses with exact
//! gradients. Data and rendering terms are averaged over the rays used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_backward, render_ray, sample_ray, InstanceField, Ray, RaySamples, RenderGrad, SampleStrategy};
use crate::netsim::SharedRay;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_occ: f64,
    pub lambda_depth: f64,
    pub lambda_color: f64,
    pub rho_con: f64,
    pub rho_rend: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_occ: 1.0, lambda_depth: 1.0, lambda_color: 1.0, rho_con: 0.1, rho_rend: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_occ, self.lambda_depth, self.lambda_color, self.rho_con, self.rho_rend];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// A training ray with the pixel it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayTarget {
    pub ray: Ray,
    /// Post-alignment instance mask at the pixel: 1 inside, 0 outside.
    pub mask: f64,
    /// Distance along the ray to the observed surface.
    pub depth: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DataLoss {
    pub occ: f64,
    pub depth: f64,
    pub color: f64,
    pub total: f64,
    pub rays: usize,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Batch {
    samples: Vec<RaySamples>,
    /// Index of the source ray for each kept sample set.
    kept: Vec<usize>,
    points: Vec<crate::geometry::Vec3>,
}

/// Samples every ray (seeded by the ray itself) and evaluates the field
/// once over all points. Rays missing the field's box are dropped.
fn evaluate(field: &InstanceField, rays: impl Iterator<Item = Ray>, n: usize) -> Result<(Batch, crate::field::Tape)> {
    let mut depth_sets = Vec::new();
    let mut kept = Vec::new();
    let mut points = Vec::new();
    let mut offsets = vec![0];
    for (i, ray) in rays.enumerate() {
        let mut rng = ray.rng();
        let d = sample_ray(&ray, field.aabb(), n, SampleStrategy::Stratified, &mut rng)?;
        if d.is_empty() {
            continue;
        }
        points.extend(d.iter().map(|t| ray.at(*t)));
        offsets.push(points.len());
        kept.push(i);
        depth_sets.push((ray, d));
    }
    let tape = field.forward(&points)?;
    let outs = tape.outputs();
    let samples = depth_sets
        .into_iter()
        .enumerate()
        .map(|(k, (ray, d))| RaySamples::from_outputs(&ray, d, &outs[offsets[k]..offsets[k + 1]]))
        .collect();
    Ok((Batch { samples, kept, points }, tape))
}

fn backprop(field: &InstanceField, batch: &Batch, tape: &crate::field::Tape, grads: &[RenderGrad]) -> Result<Vec<f64>> {
    let mut ds = Vec::with_capacity(batch.points.len());
    let mut dc = Vec::with_capacity(batch.points.len());
    for (s, g) in batch.samples.iter().zip(grads) {
        let (a, b) = render_backward(s, g);
        ds.extend(a);
        dc.extend(b);
    }
    let mut grad = vec![0.0; field.theta().len()];
    field.backward(tape, &ds, &dc, &mut grad)?;
    Ok(grad)
}

/// `λ1·L^occ + λ2·L^depth + λ3·L^color` over the batch.
pub fn data_loss(field: &InstanceField, batch: &[RayTarget], w: &LossWeights, n_samples: usize) -> Result<(DataLoss, Vec<f64>)> {
    let (b, tape) = evaluate(field, batch.iter().map(|t| t.ray), n_samples)?;
    let mut loss = DataLoss { rays: b.samples.len(), ..Default::default() };
    if b.samples.is_empty() {
        return Ok((loss, vec![0.0; field.theta().len()]));
    }
    let inv = 1.0 / b.samples.len() as f64;
    let mut grads = Vec::with_capacity(b.samples.len());
    for (s, &i) in b.samples.iter().zip(&b.kept) {
        let t = &batch[i];
        let r = render_ray(s)?;
        let e_occ = r.occupancy - t.mask;
        let e_depth = r.depth - t.depth;
        let e_color = [r.color[0] - t.color[0], r.color[1] - t.color[1], r.color[2] - t.color[2]];
        loss.occ += e_occ.abs() * inv;
        loss.depth += t.mask * e_depth.abs() * inv;
        loss.color += t.mask * e_color.iter().map(|e| e.abs()).sum::<f64>() * inv;
        grads.push(RenderGrad {
            occupancy: w.lambda_occ * sign(e_occ) * inv,
            depth: w.lambda_depth * t.mask * sign(e_depth) * inv,
            color: e_color.map(|e| w.lambda_color * t.mask * sign(e) * inv),
        });
    }
    loss.total = w.lambda_occ * loss.occ + w.lambda_depth * loss.depth + w.lambda_color * loss.color;
    let grad = backprop(field, &b, &tape, &grads)?;
    Ok((loss, grad))
}

/// `Σ ‖θ − θ̄‖²` over peer copies of the same instance, with gradient
/// `2 Σ (θ − θ̄)`.
pub fn param_consistency_loss(own: &InstanceField, peers: &[&InstanceField]) -> Result<(f64, Vec<f64>)> {
    let theta = own.theta();
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for p in peers {
        if p.arch() != own.arch() || p.theta().len() != theta.len() {
            return Err(Error::ArchMismatch);
        }
        if p.global_id() != own.global_id() {
            return Err(Error::Precondition(format!(
                "consistency between instances {} and {}",
                own.global_id(),
                p.global_id()
            )));
        }
        for ((g, a), b) in grad.iter_mut().zip(theta).zip(p.theta()) {
            let d = a - b;
            loss += d * d;
            *g += 2.0 * d;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderConsistency {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub used: usize,
    /// Rays that miss this field's box.
    pub skipped: usize,
}

pub fn shared_to_ray(s: &SharedRay) -> Result<Ray> {
    Ok(Ray::new(s.origin, s.dir, s.t_near, s.t_far)?.with_seed(s.seed))
}

/// Mean `|D̂_own(r) − D̂_peer(r)|` over shared rays; the peer depth is a
/// constant.
pub fn render_consistency_loss(field: &InstanceField, shared: &[SharedRay], n_samples: usize) -> Result<RenderConsistency> {
    let rays = shared.iter().map(shared_to_ray).collect::<Result<Vec<_>>>()?;
    let (b, tape) = evaluate(field, rays.into_iter(), n_samples)?;
    let used = b.samples.len();
    let mut out = RenderConsistency { used, skipped: shared.len() - used, ..Default::default() };
    if used == 0 {
        out.grad = vec![0.0; field.theta().len()];
        return Ok(out);
    }
    let inv = 1.0 / used as f64;
    let mut grads = Vec::with_capacity(used);
    for (s, &i) in b.samples.iter().zip(&b.kept) {
        let e = render_ray(s)?.depth - shared[i].depth;
        out.loss += e.abs() * inv;
        grads.push(RenderGrad { depth: sign(e) * inv, ..Default::default() });
    }
    out.grad = backprop(field, &b, &tape, &grads)?;
    Ok(out)
}

/// Rendered depth of `field` along a ray, sampled with the ray's own seed.
pub fn render_depth(field: &InstanceField, ray: &Ray, n_samples: usize) -> Result<Option<f64>> {
    Ok(render_depths(field, std::slice::from_ref(ray), n_samples)?[0])
}

/// Rendered depths for a batch of rays; `None` where a ray misses the box.
pub fn render_depths(field: &InstanceField, rays: &[Ray], n_samples: usize) -> Result<Vec<Option<f64>>> {
    let (b, _) = evaluate(field, rays.iter().copied(), n_samples)?;
    let mut out = vec![None; rays.len()];
    for (s, &i) in b.samples.iter().zip(&b.kept) {
        out[i] = Some(render_ray(s)?.depth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Arch;
    use crate::geometry::{Aabb, Vec3};

    fn field(seed: u64, bias: f64) -> InstanceField {
        InstanceField::new(Arch::default(), Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)), 1, seed, bias)
            .unwrap()
    }

    fn ray(y: f64, seed: u64) -> Ray {
        Ray::new(Vec3::new(0.0, y, -3.0), Vec3::z(), 0.0, 10.0).unwrap().with_seed(seed)
    }

    #[test]
    fn matching_targets_give_zero_loss() {
        let f = field(1, 0.0);
        let r = ray(0.1, 5);
        let s = {
            let mut rng = r.rng();
            let d = sample_ray(&r, f.aabb(), 32, SampleStrategy::Stratified, &mut rng).unwrap();
            RaySamples::from_outputs(&r, d.clone(), &f.eval(&d.iter().map(|t| r.at(*t)).collect::<Vec<_>>()).unwrap())
        };
        let out = render_ray(&s).unwrap();
        let t = RayTarget { ray: r, mask: out.occupancy, depth: out.depth, color: out.color };
        let (l, _) = data_loss(&f, &[t], &LossWeights::default(), 32).unwrap();
        assert!(l.total.abs() < 1e-15);
        // outside the mask only occupancy counts
        let t = RayTarget { ray: r, mask: 0.0, depth: 100.0, color: [5.0; 3] };
        let (l, _) = data_loss(&f, &[t], &LossWeights::default(), 32).unwrap();
        assert_eq!(l.depth, 0.0);
        assert_eq!(l.color, 0.0);
        assert!((l.occ - out.occupancy).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_zero() {
        let f = field(1, 0.0);
        let (l, g) = data_loss(&f, &[], &LossWeights::default(), 32).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let miss = RayTarget { ray: ray(5.0, 0), mask: 1.0, depth: 1.0, color: [0.0; 3] };
        let (l, _) = data_loss(&f, &[miss], &LossWeights::default(), 32).unwrap();
        assert_eq!(l.rays, 0);
    }

    #[test]
    fn consistency_examples() {
        let a = field(1, 0.0);
        let (l, g) = param_consistency_loss(&a, &[&a.clone()]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let mut b = a.clone();
        b.update(|t| t[3] -= 0.5);
        let (l, g) = param_consistency_loss(&a, &[&b]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert_eq!(g[3], 1.0);
        let (l3, _) = param_consistency_loss(&a, &[&b, &b, &b]).unwrap();
        assert!((l3 - 0.75).abs() < 1e-15);
        let other = InstanceField::new(Arch { width: 16, ..Arch::default() }, *a.aabb(), 1, 0, 0.0).unwrap();
        assert!(matches!(param_consistency_loss(&a, &[&other]), Err(Error::ArchMismatch)));
    }

    #[test]
    fn empty_field_against_peer_depth() {
        let f = field(2, -60.0);
        let s = SharedRay { origin: Vec3::new(0.0, 0.0, -3.0), dir: Vec3::z(), t_near: 0.0, t_far: 10.0, seed: 1, depth: 2.0 };
        let rc = render_consistency_loss(&f, &[s], 32).unwrap();
        assert!((rc.loss - 2.0).abs() < 1e-9);
        assert_eq!(rc.used, 1);
        let miss = SharedRay { origin: Vec3::new(5.0, 5.0, -3.0), ..s };
        assert_eq!(render_consistency_loss(&f, &[miss], 32).unwrap().skipped, 1);
    }

    #[test]
    fn identical_fields_agree_on_shared_rays() {
        let f = field(3, 0.0);
        let r = ray(0.2, 77);
        let d = render_depth(&f, &r, 32).unwrap().unwrap();
        let s = SharedRay { origin: r.origin, dir: r.dir, t_near: r.t_near, t_far: r.t_far, seed: r.seed, depth: d };
        assert_eq!(render_consistency_loss(&f.clone(), &[s], 32).unwrap().loss, 0.0);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { rho_con: -1.0, ..Default::default() }.validate().is_err());
    }
}
