//! Ray sampling, termination probabilities and per-ray rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

use super::{FieldOutput, InstanceField, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: Option<(u32, u32)>,
    pub source: u32,
    /// Seeds the stratified jitter so two agents draw the same depths.
    pub seed: u64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let n = dir.norm();
        if !n.is_finite() || n == 0.0 || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ray"));
        }
        if !(t_near < t_far) {
            return Err(Error::Precondition(format!("ray interval [{t_near}, {t_far}] is empty")));
        }
        Ok(Ray { origin, dir: dir / n, t_near, t_far, pixel: None, source: 0, seed: 0 })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    /// Ray interval clipped to `aabb`, if non-empty.
    pub fn clip(&self, aabb: &Aabb) -> Option<(f64, f64)> {
        let (a, b) = aabb.intersect_ray(&self.origin, &self.dir)?;
        let (lo, hi) = (a.max(self.t_near), b.min(self.t_far));
        (lo < hi).then_some((lo, hi))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStrategy {
    /// One uniform draw per bin.
    Stratified,
    /// Bin midpoints; deterministic.
    Midpoint,
}

/// `n` ascending depths over the part of `ray` inside `aabb`; empty when
/// the ray misses the box.
pub fn sample_ray<R: Rng>(ray: &Ray, aabb: &Aabb, n: usize, strategy: SampleStrategy, rng: &mut R) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Precondition("need at least 2 samples per ray".into()));
    }
    let Some((lo, hi)) = ray.clip(aabb) else {
        return Ok(Vec::new());
    };
    Ok(stratify(lo, hi, n, strategy, rng))
}

pub(crate) fn stratify<R: Rng>(lo: f64, hi: f64, n: usize, strategy: SampleStrategy, rng: &mut R) -> Vec<f64> {
    let w = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let j = match strategy {
                SampleStrategy::Stratified => rng.random::<f64>(),
                SampleStrategy::Midpoint => 0.5,
            };
            lo + w * (i as f64 + j)
        })
        .collect()
}

/// Samples of one field along one ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub points: Vec<Vec3>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn from_outputs(ray: &Ray, depths: Vec<f64>, outputs: &[FieldOutput]) -> Self {
        RaySamples {
            points: depths.iter().map(|t| ray.at(*t)).collect(),
            sigma: outputs.iter().map(|o| o.sigma).collect(),
            color: outputs.iter().map(|o| o.color).collect(),
            depths,
        }
    }

    /// Evaluates `field` at the given depths along `ray`.
    pub fn evaluate(field: &InstanceField, ray: &Ray, depths: Vec<f64>) -> Result<(Self, Tape)> {
        let points: Vec<Vec3> = depths.iter().map(|t| ray.at(*t)).collect();
        let tape = field.forward(&points)?;
        let s = RaySamples {
            sigma: tape.outputs().iter().map(|o| o.sigma).collect(),
            color: tape.outputs().iter().map(|o| o.color).collect(),
            depths,
            points,
        };
        Ok((s, tape))
    }
}

/// `T_p = σ_p · Π_{q<p} (1 − σ_q)`.
pub fn termination_probs(sigma: &[f64]) -> Result<Vec<f64>> {
    if let Some(s) = sigma.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Precondition(format!("occupancy {s} outside [0,1]")));
    }
    let mut alive = 1.0;
    Ok(sigma
        .iter()
        .map(|s| {
            let t = s * alive;
            alive *= 1.0 - s;
            t
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rendered {
    pub occupancy: f64,
    pub depth: f64,
    pub color: [f64; 3],
}

fn accumulate(t: &[f64], depths: &[f64], colors: &[[f64; 3]]) -> Rendered {
    let mut r = Rendered::default();
    for ((tp, d), c) in t.iter().zip(depths).zip(colors) {
        r.occupancy += tp;
        r.depth += tp * d;
        for k in 0..3 {
            r.color[k] += tp * c[k];
        }
    }
    r
}

/// `Ô = Σ T_p`, `D̂ = Σ T_p d_p`, `Ĉ = Σ T_p c_p`.
pub fn render_ray(samples: &RaySamples) -> Result<Rendered> {
    let t = termination_probs(&samples.sigma)?;
    Ok(accumulate(&t, &samples.depths, &samples.color))
}

/// Upstream gradients on the rendered quantities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderGrad {
    pub occupancy: f64,
    pub depth: f64,
    pub color: [f64; 3],
}

/// Gradients of a linear functional of `(Ô, D̂, Ĉ)` with respect to each
/// sample's σ and colour.
pub fn render_backward(samples: &RaySamples, g: &RenderGrad) -> (Vec<f64>, Vec<[f64; 3]>) {
    backward_seq(&samples.sigma, &samples.depths, &samples.color, g)
}

fn backward_seq(sigma: &[f64], depths: &[f64], colors: &[[f64; 3]], g: &RenderGrad) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = sigma.len();
    let w: Vec<f64> = (0..n)
        .map(|p| g.occupancy + g.depth * depths[p] + (0..3).map(|k| g.color[k] * colors[p][k]).sum::<f64>())
        .collect();
    // suffix[j] = Σ_{p>j} σ_p Π_{j<q<p}(1−σ_q) w_p
    let mut suffix = vec![0.0; n];
    for j in (0..n.saturating_sub(1)).rev() {
        suffix[j] = sigma[j + 1] * w[j + 1] + (1.0 - sigma[j + 1]) * suffix[j + 1];
    }
    let mut alive = 1.0;
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    for p in 0..n {
        d_sigma[p] = alive * (w[p] - suffix[p]);
        let t = sigma[p] * alive;
        d_color[p] = [t * g.color[0], t * g.color[1], t * g.color[2]];
        alive *= 1.0 - sigma[p];
    }
    (d_sigma, d_color)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Composite {
    pub rendered: Rendered,
    /// Each instance's share of the total occupancy.
    pub per_instance: Vec<f64>,
    /// `(instance, sample)` in merged depth order.
    pub order: Vec<(usize, usize)>,
    pub termination: Vec<f64>,
}

/// Depth-ranked compositing of several instances' samples along one pixel
/// ray. Ties in depth keep instance order.
pub fn composite_pixel(instances: &[RaySamples]) -> Result<Composite> {
    let mut order: Vec<(usize, usize)> =
        instances.iter().enumerate().flat_map(|(i, s)| (0..s.len()).map(move |p| (i, p))).collect();
    order.sort_by(|a, b| instances[a.0].depths[a.1].total_cmp(&instances[b.0].depths[b.1]));
    let sigma: Vec<f64> = order.iter().map(|(i, p)| instances[*i].sigma[*p]).collect();
    let depths: Vec<f64> = order.iter().map(|(i, p)| instances[*i].depths[*p]).collect();
    let colors: Vec<[f64; 3]> = order.iter().map(|(i, p)| instances[*i].color[*p]).collect();
    let t = termination_probs(&sigma)?;
    let mut per_instance = vec![0.0; instances.len()];
    for ((i, _), tp) in order.iter().zip(&t) {
        per_instance[*i] += tp;
    }
    Ok(Composite { rendered: accumulate(&t, &depths, &colors), per_instance, order, termination: t })
}

/// Per-instance σ and colour gradients of a composite rendering.
pub fn composite_backward(instances: &[RaySamples], comp: &Composite, g: &RenderGrad) -> Vec<(Vec<f64>, Vec<[f64; 3]>)> {
    let sigma: Vec<f64> = comp.order.iter().map(|(i, p)| instances[*i].sigma[*p]).collect();
    let depths: Vec<f64> = comp.order.iter().map(|(i, p)| instances[*i].depths[*p]).collect();
    let colors: Vec<[f64; 3]> = comp.order.iter().map(|(i, p)| instances[*i].color[*p]).collect();
    let (ds, dc) = backward_seq(&sigma, &depths, &colors, g);
    let mut out: Vec<(Vec<f64>, Vec<[f64; 3]>)> =
        instances.iter().map(|s| (vec![0.0; s.len()], vec![[0.0; 3]; s.len()])).collect();
    for (k, (i, p)) in comp.order.iter().enumerate() {
        out[*i].0[*p] = ds[k];
        out[*i].1[*p] = dc[k];
    }
    out
}
