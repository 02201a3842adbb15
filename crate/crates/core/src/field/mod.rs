//! Per-instance implicit fields: a small MLP over positionally encoded,
//! box-normalized coordinates, returning occupancy σ ∈ (0,1) and colour
//! c ∈ (0,1)³.

pub mod render;
pub(crate) mod wire;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

pub use render::{
    composite_backward, composite_pixel, render_backward, render_ray, sample_ray, termination_probs, Composite, Ray,
    RaySamples, RenderGrad, Rendered, SampleStrategy,
};
pub use wire::{FIELD_HEADER_LEN, FIELD_MAGIC, FIELD_WIRE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    /// Positional-encoding frequencies per axis.
    pub pe_freqs: u16,
    pub layers: u16,
    pub width: u16,
}

impl Default for Arch {
    fn default() -> Self {
        Arch { pe_freqs: 6, layers: 2, width: 32 }
    }
}

const OUTPUTS: usize = 4;

impl Arch {
    pub fn input_dim(&self) -> usize {
        3 + 6 * self.pe_freqs as usize
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let w = self.width as usize;
        let mut s = Vec::with_capacity(self.layers as usize + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.layers {
            s.push((fan_in, w));
            fan_in = w;
        }
        s.push((fan_in, OUTPUTS));
        s
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::Config("field arch needs at least one hidden layer of non-zero width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceField {
    arch: Arch,
    theta: Vec<f64>,
    aabb: Aabb,
    global_id: u32,
    version: u64,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_and_sigmoid(z: f64) -> (f64, f64) {
    if z > 30.0 {
        (z, 1.0)
    } else {
        let e = z.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

/// Forward activations kept for the backward pass. Matrices hold one
/// point per column.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input of each layer: the encoding, then each hidden activation.
    acts: Vec<DMatrix<f64>>,
    /// Softplus derivative at each hidden pre-activation.
    gates: Vec<DMatrix<f64>>,
    outputs: Vec<FieldOutput>,
}

impl Tape {
    pub fn outputs(&self) -> &[FieldOutput] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl InstanceField {
    /// Xavier-uniform weights, zero biases except the occupancy output,
    /// which starts at `sigma_bias`.
    pub fn new(arch: Arch, aabb: Aabb, global_id: u32, seed: u64, sigma_bias: f64) -> Result<Self> {
        arch.validate()?;
        if !aabb.is_valid() || aabb.extent().iter().any(|e| *e <= 0.0) {
            return Err(Error::Precondition("field bounds are degenerate".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(arch.param_count());
        let shapes = arch.shapes();
        for (li, &(fi, fo)) in shapes.iter().enumerate() {
            let a = (6.0 / (fi + fo) as f64).sqrt();
            theta.extend((0..fi * fo).map(|_| rng.random_range(-a..a)));
            let last = li + 1 == shapes.len();
            theta.extend((0..fo).map(|o| if last && o == 0 { sigma_bias } else { 0.0 }));
        }
        Ok(InstanceField { arch, theta, aabb, global_id, version: 0 })
    }

    pub fn from_parts(arch: Arch, theta: Vec<f64>, aabb: Aabb, global_id: u32, version: u64) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::Shape { expected: arch.param_count(), got: theta.len() });
        }
        if !aabb.is_valid() {
            return Err(Error::Precondition("field bounds are degenerate".into()));
        }
        Ok(InstanceField { arch, theta, aabb, global_id, version })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn global_id(&self) -> u32 {
        self.global_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutates θ in place and bumps the version.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.theta);
        self.version += 1;
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Shape { expected: self.theta.len(), got: theta.len() });
        }
        self.update(|t| t.copy_from_slice(theta));
        Ok(())
    }

    /// Zeroes the output layer so every point evaluates to σ = c = 0.5.
    pub fn zero_output_layer(&mut self) {
        let (fi, fo) = *self.arch.shapes().last().expect("output layer");
        let n = self.theta.len();
        self.update(|t| t[n - (fi * fo + fo)..].fill(0.0));
    }

    fn encode(&self, p: &Vec3, out: &mut Vec<f64>) {
        let x = self.aabb.normalize(p);
        out.extend_from_slice(&[x.x, x.y, x.z]);
        let mut sc = [(std::f64::consts::PI * x.x).sin_cos(), (std::f64::consts::PI * x.y).sin_cos(), (std::f64::consts::PI * x.z).sin_cos()];
        for l in 0..self.arch.pe_freqs {
            if l > 0 {
                // Double-angle step to the next octave.
                for v in sc.iter_mut() {
                    *v = (2.0 * v.0 * v.1, (v.1 - v.0) * (v.1 + v.0));
                }
            }
            for (s, c) in sc {
                out.push(s);
                out.push(c);
            }
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        self.arch
            .shapes()
            .iter()
            .scan(0usize, |acc, (fi, fo)| {
                let o = *acc;
                *acc += fi * fo + fo;
                Some(o)
            })
            .collect()
    }

    /// Forward pass keeping every activation for a later backward pass.
    pub fn forward(&self, points: &[Vec3]) -> Result<Tape> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("field input point"));
        }
        let shapes = self.arch.shapes();
        let offsets = self.layer_offsets();
        let n = points.len();
        let din = self.arch.input_dim();
        let mut inputs = Vec::with_capacity(n * din);
        for p in points {
            self.encode(p, &mut inputs);
        }
        let mut acts = vec![DMatrix::from_vec(din, n, inputs)];
        let mut gates = Vec::with_capacity(shapes.len() - 1);
        let mut raw = DMatrix::zeros(0, 0);
        for (li, &(fi, fo)) in shapes.iter().enumerate() {
            let off = offsets[li];
            let w = DMatrix::from_row_slice(fo, fi, &self.theta[off..off + fi * fo]);
            let b = &self.theta[off + fi * fo..off + fi * fo + fo];
            let mut z = &w * &acts[li];
            for col in z.as_mut_slice().chunks_exact_mut(fo) {
                col.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
            }
            if li + 1 == shapes.len() {
                raw = z;
            } else {
                let mut g = DMatrix::zeros(fo, n);
                for (zv, gv) in z.as_mut_slice().iter_mut().zip(g.as_mut_slice()) {
                    let (sp, sg) = softplus_and_sigmoid(*zv);
                    *zv = sp;
                    *gv = sg;
                }
                acts.push(z);
                gates.push(g);
            }
        }
        let outputs = raw
            .as_slice()
            .chunks_exact(OUTPUTS)
            .map(|o| FieldOutput { sigma: sigmoid(o[0]), color: [sigmoid(o[1]), sigmoid(o[2]), sigmoid(o[3])] })
            .collect();
        Ok(Tape { acts, gates, outputs })
    }

    /// Accumulates ∂loss/∂θ into `grad` given upstream gradients on σ and c.
    pub fn backward(&self, tape: &Tape, d_sigma: &[f64], d_color: &[[f64; 3]], grad: &mut [f64]) -> Result<()> {
        let n = tape.len();
        if d_sigma.len() != n {
            return Err(Error::Shape { expected: n, got: d_sigma.len() });
        }
        if d_color.len() != n {
            return Err(Error::Shape { expected: n, got: d_color.len() });
        }
        if grad.len() != self.theta.len() {
            return Err(Error::Shape { expected: self.theta.len(), got: grad.len() });
        }
        if n == 0 {
            return Ok(());
        }
        let shapes = self.arch.shapes();
        let offsets = self.layer_offsets();
        let mut delta = DMatrix::zeros(OUTPUTS, n);
        for (i, col) in delta.as_mut_slice().chunks_exact_mut(OUTPUTS).enumerate() {
            let out = &tape.outputs[i];
            col[0] = d_sigma[i] * out.sigma * (1.0 - out.sigma);
            for k in 0..3 {
                col[k + 1] = d_color[i][k] * out.color[k] * (1.0 - out.color[k]);
            }
        }
        for li in (0..shapes.len()).rev() {
            let (fi, fo) = shapes[li];
            let off = offsets[li];
            // fi × fo column-major is the row-major fo × fi weight layout.
            let gw = &tape.acts[li] * delta.transpose();
            grad[off..off + fi * fo].iter_mut().zip(gw.as_slice()).for_each(|(g, v)| *g += v);
            let gb = delta.column_sum();
            grad[off + fi * fo..off + fi * fo + fo].iter_mut().zip(gb.iter()).for_each(|(g, v)| *g += v);
            if li > 0 {
                let wt = DMatrix::from_column_slice(fi, fo, &self.theta[off..off + fi * fo]);
                let mut prev = &wt * &delta;
                prev.component_mul_assign(&tape.gates[li - 1]);
                delta = prev;
            }
        }
        Ok(())
    }

    /// σ and colour at each point.
    pub fn eval(&self, points: &[Vec3]) -> Result<Vec<FieldOutput>> {
        Ok(self.forward(points)?.outputs)
    }

    /// ∂loss/∂θ for upstream gradients on σ and c at `points`.
    pub fn grad(&self, points: &[Vec3], d_sigma: &[f64], d_color: &[[f64; 3]]) -> Result<Vec<f64>> {
        let tape = self.forward(points)?;
        let mut g = vec![0.0; self.theta.len()];
        self.backward(&tape, d_sigma, d_color, &mut g)?;
        Ok(g)
    }
}

#[inline]
/// Free-function forms of [`InstanceField::eval`] and [`InstanceField::grad`].
pub fn field_eval(field: &InstanceField, points: &[Vec3]) -> Result<Vec<FieldOutput>> {
    field.eval(points)
}

pub fn field_grad(field: &InstanceField, points: &[Vec3], d_sigma: &[f64], d_color: &[[f64; 3]]) -> Result<Vec<f64>> {
    field.grad(points, d_sigma, d_color)
}
