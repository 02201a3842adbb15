//! Helpers for unit-norm semantic feature vectors.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

/// Rotates a unit vector by exactly `angle_rad` toward a random orthogonal
/// direction.
pub fn perturb<R: Rng>(rng: &mut R, f: &[f64], angle_rad: f64) -> Vec<f64> {
    if angle_rad == 0.0 {
        return f.to_vec();
    }
    let mut u = random_unit(rng, f.len());
    let p = dot(&u, f);
    u.iter_mut().zip(f).for_each(|(x, y)| *x -= p * y);
    normalize(&mut u);
    let (s, c) = angle_rad.sin_cos();
    let mut out: Vec<f64> = f.iter().zip(&u).map(|(a, b)| c * a + s * b).collect();
    normalize(&mut out);
    out
}

/// Normalized arithmetic mean of unit vectors.
pub fn mean_direction<'a>(vs: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for v in vs {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    normalize(&mut acc);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perturb_hits_exact_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_unit(&mut rng, 32);
        let g = perturb(&mut rng, &f, 10f64.to_radians());
        assert!((cosine(&f, &g) - 10f64.to_radians().cos()).abs() < 1e-12);
        assert!((norm(&g) - 1.0).abs() < 1e-12);
    }
}
