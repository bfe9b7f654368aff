#![allow(dead_code)]

use std::sync::Arc;

use lcfed::dataset::LabeledSet;
use lcfed::model::ModelArch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn arch(sizes: &[usize]) -> Arc<ModelArch> {
    Arc::new(ModelArch::with_head_split(sizes.to_vec()).unwrap())
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn random_set(input_dim: usize, classes: usize, n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = random_vec(&mut rng, n * input_dim, 1.0);
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    LabeledSet::new(input_dim, classes, features, labels).unwrap()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest component-wise relative error; components where both values are
/// below `floor` in magnitude are compared against `floor` instead.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
