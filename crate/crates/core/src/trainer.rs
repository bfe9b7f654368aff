//! Local update: mini-batch SGD on the supervised loss plus a proximal pull
//! toward the cluster center (whole model) and toward the global embedding
//! (embedding block only).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ParamVec};
use crate::vecops::{all_finite, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub eta: f64,
    /// Strength of the pull toward the cluster center.
    pub mu: f64,
    /// Strength of the pull toward the global embedding.
    pub lambda: f64,
    pub batch_size: usize,
    /// Mini-batch steps per call to [`local_update`].
    pub local_steps: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            eta: 0.01,
            mu: 0.1,
            lambda: 0.1,
            batch_size: 32,
            local_steps: 5,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("train.eta", "must be a finite non-negative number"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("train.mu", "must be >= 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("train.local_steps", "must be positive"));
        }
        Ok(())
    }

    /// Same hyperparameters with both proximal terms switched off.
    pub fn plain(self) -> Self {
        Self {
            mu: 0.0,
            lambda: 0.0,
            ..self
        }
    }
}

/// Draws batches without replacement from a reshuffled index order; a new
/// shuffle starts once fewer than `batch` unused rows remain.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl EpochSampler {
    fn new(n: usize, batch: usize) -> Self {
        let batch = batch.min(n);
        Self {
            order: (0..n).collect(),
            cursor: n,
            batch,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

fn check_dims(w: &ParamVec, center: &ParamVec, global_phi: &[f64]) -> Result<()> {
    if !w.same_arch(center) {
        return Err(Error::DimensionMismatch {
            context: "model vs cluster center",
            expected: w.len(),
            found: center.len(),
        });
    }
    let phi_dim = w.arch().phi_dim();
    if global_phi.len() != phi_dim {
        return Err(Error::DimensionMismatch {
            context: "global embedding",
            expected: phi_dim,
            found: global_phi.len(),
        });
    }
    Ok(())
}

/// Gradient of `(mu/2)|w - center|^2 + (lambda/2)|phi(w) - global_phi|^2`.
pub fn prox_gradient(w: &ParamVec, center: &ParamVec, global_phi: &[f64], mu: f64, lambda: f64) -> Result<ParamVec> {
    check_dims(w, center, global_phi)?;
    let phi_dim = w.arch().phi_dim();
    let values = w
        .values()
        .iter()
        .zip(center.values())
        .enumerate()
        .map(|(k, (wk, ck))| {
            let g = mu * (wk - ck);
            if k < phi_dim {
                g + lambda * (wk - global_phi[k])
            } else {
                g
            }
        })
        .collect();
    ParamVec::from_values(Arc::clone(w.arch()), values)
}

/// Value and gradient of the full local objective on `rows`: mean
/// cross-entropy plus both proximal penalties.
pub fn regularized_loss_and_grad(
    w: &ParamVec,
    center: &ParamVec,
    global_phi: &[f64],
    mu: f64,
    lambda: f64,
    data: &LabeledSet,
    rows: &[usize],
) -> Result<(f64, ParamVec)> {
    let (sup, mut grad) = loss_and_grad(w, data, rows)?;
    let prox = prox_gradient(w, center, global_phi, mu, lambda)?;
    grad.values_mut()
        .iter_mut()
        .zip(prox.values())
        .for_each(|(g, p)| *g += p);
    let phi_dim = w.arch().phi_dim();
    let value = sup
        + 0.5 * mu * sq_dist(w.values(), center.values())
        + 0.5 * lambda * sq_dist(&w.values()[..phi_dim], global_phi);
    Ok((value, grad))
}

/// Runs `hyper.local_steps` mini-batch steps of
/// `w <- w - eta*grad - eta*mu*(w - center) - eta*lambda*(phi - global_phi)`,
/// the last term touching only the embedding block.
pub fn local_update<R: Rng>(
    w: &ParamVec,
    center: &ParamVec,
    global_phi: &[f64],
    train: &LabeledSet,
    hyper: &TrainHyper,
    rng: &mut R,
) -> Result<ParamVec> {
    check_dims(w, center, global_phi)?;
    if train.is_empty() {
        return Err(Error::input("cannot train on an empty shard"));
    }
    let TrainHyper { eta, mu, lambda, .. } = *hyper;
    let phi_dim = w.arch().phi_dim();
    let mut sampler = EpochSampler::new(train.len(), hyper.batch_size);
    let mut current = w.clone();

    for step in 0..hyper.local_steps {
        let batch = sampler.next(rng);
        let (_, grad) = loss_and_grad(&current, train, batch)?;
        let c = center.values();
        for (k, (wk, gk)) in current.values_mut().iter_mut().zip(grad.values()).enumerate() {
            let mut next = *wk - eta * gk - eta * mu * (*wk - c[k]);
            if k < phi_dim {
                next -= eta * lambda * (*wk - global_phi[k]);
            }
            *wk = next;
        }
        if !all_finite(current.values()) {
            return Err(Error::Divergence {
                step,
                device: None,
                round: None,
            });
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Arc<ModelArch>, LabeledSet) {
        let arch = Arc::new(ModelArch::with_head_split(vec![3, 5, 3]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = LabeledSet::empty(3, 3);
        for i in 0..40 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set.push(&x, i % 3);
        }
        (arch, set)
    }

    #[test]
    fn prox_gradient_zero_at_anchor() {
        let (arch, _) = setup();
        let w = init_model(&arch, 2);
        let g = prox_gradient(&w, &w, w.phi(), 0.7, 0.3).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn prox_gradient_unit_offset() {
        let (arch, _) = setup();
        let center = init_model(&arch, 2);
        let j = arch.total_dim() - 1;
        let mut w = center.clone();
        w.values_mut()[j] += 1.0;
        let g = prox_gradient(&w, &center, center.phi(), 2.0, 0.0).unwrap();
        for (k, v) in g.values().iter().enumerate() {
            assert_eq!(*v, if k == j { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn prox_gradient_lambda_only_touches_phi() {
        let (arch, _) = setup();
        let w = init_model(&arch, 3);
        let zero_phi = vec![0.0; arch.phi_dim()];
        let g = prox_gradient(&w, &w, &zero_phi, 0.0, 1.0).unwrap();
        assert_eq!(&g.values()[..arch.phi_dim()], w.phi());
        assert!(g.h().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (arch, set) = setup();
        let w = init_model(&arch, 4);
        let center = init_model(&arch, 5);
        let hyper = TrainHyper {
            eta: 0.0,
            ..TrainHyper::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = local_update(&w, &center, center.phi(), &set, &hyper, &mut rng).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn divergence_reports_step() {
        let (arch, set) = setup();
        let w = init_model(&arch, 4);
        let mut center = w.clone();
        center.values_mut()[0] = 1e308;
        let hyper = TrainHyper {
            eta: 1e10,
            ..TrainHyper::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = local_update(&w, &center, w.phi(), &set, &hyper, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }

    #[test]
    fn mismatched_global_phi_rejected() {
        let (arch, set) = setup();
        let w = init_model(&arch, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = local_update(&w, &w, &[0.0], &set, &TrainHyper::default(), &mut rng);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut s = EpochSampler::new(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next(&mut rng).to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        let mut big = EpochSampler::new(4, 32);
        assert_eq!(big.next(&mut rng).len(), 4);
    }
}
