#![allow(dead_code)]

use rand::Rng;
use whittle_core::markov_belief::{ChannelClass, ClassMix};

/// Grid of `(p, r)` pairs with `r = f * p`.
pub fn grid(fractions: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for p in [0.6, 0.7, 0.8, 0.9, 0.95] {
        for f in fractions {
            out.push((p, f * p));
        }
    }
    out
}

pub fn grid25() -> Vec<(f64, f64)> {
    grid(&[0.1, 0.3, 0.5, 0.7, 0.9])
}

pub fn grid20() -> Vec<(f64, f64)> {
    grid(&[0.1, 0.3, 0.5, 0.7])
}

pub fn single() -> ClassMix {
    ClassMix::single(ChannelClass::new(0.8, 0.2, 16).unwrap(), 0.75).unwrap()
}

pub fn two_class() -> ClassMix {
    let c1 = ChannelClass::new(0.9, 0.45, 16).unwrap();
    let c2 = ChannelClass::new(0.8, 0.3, 16).unwrap();
    ClassMix::new(vec![c1, c2], vec![0.45, 0.55], 0.6).unwrap()
}

/// Uniform-ish random point with class blocks summing to `gamma_k`.
pub fn random_simplex<R: Rng>(mix: &ClassMix, rng: &mut R) -> Vec<f64> {
    let block = mix.block_len();
    let mut z: Vec<f64> = (0..mix.dim()).map(|_| -rng.gen::<f64>().ln()).collect();
    for k in 0..mix.num_classes() {
        let s: f64 = z[k * block..(k + 1) * block].iter().sum();
        for x in &mut z[k * block..(k + 1) * block] {
            *x *= mix.gamma[k] / s;
        }
    }
    z
}

/// `zeta + v` with `||v|| = radius`, class sums preserved and coordinates
/// kept nonnegative: mass is added on random coordinates and removed from
/// the support of `zeta` proportionally.
pub fn perturb<R: Rng>(mix: &ClassMix, zeta: &[f64], radius: f64, rng: &mut R) -> Vec<f64> {
    let block = mix.block_len();
    let mut v = vec![0.0; zeta.len()];
    for k in 0..mix.num_classes() {
        let range = k * block..(k + 1) * block;
        let add: Vec<f64> = range.clone().map(|_| rng.gen::<f64>()).collect();
        let total: f64 = add.iter().sum();
        for (j, i) in range.enumerate() {
            v[i] = add[j] / total - zeta[i] / mix.gamma[k];
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    zeta.iter().zip(&v).map(|(z, d)| z + radius * d / norm).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
