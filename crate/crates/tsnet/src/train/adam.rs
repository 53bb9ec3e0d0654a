//! Adam with bias correction over named parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One update. `params` and `grads` must pair up by position with equal
/// names and shapes. Any non-finite gradient aborts before mutating
/// anything; moments are computed in f64 and stored back at F precision.
pub fn adam_step<F: Scalar>(
    params: &mut [(String, &mut Tensor<F>)],
    grads: &[(String, Tensor<F>)],
    state: &mut AdamState<F>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Optim(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in params.iter().zip(grads.iter()) {
        if pn != gn {
            return Err(Error::Optim(format!("parameter {pn} paired with gradient {gn}")));
        }
        if p.shape() != g.shape() {
            return Err(Error::Optim(format!(
                "{pn}: shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if g.data().iter().any(|x| !Scalar::to_f64(*x).is_finite()) {
            return Err(Error::Optim(format!("non-finite gradient for {pn}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd_at(g, i);
            let mi = b1 * Scalar::to_f64(md[i]) + (1.0 - b1) * gi;
            let vi = b2 * Scalar::to_f64(vd[i]) + (1.0 - b2) * gi * gi;
            md[i] = F::from_f64(mi);
            vd[i] = F::from_f64(vi);
            let update = config.lr * (mi / bc1) / ((vi / bc2).sqrt() + config.eps);
            pd[i] = F::from_f64(Scalar::to_f64(pd[i]) - update);
        }
    }
    Ok(())
}

fn gd_at<F: Scalar>(g: &Tensor<F>, i: usize) -> f64 {
    Scalar::to_f64(g.data()[i])
}

/// Global L2 norm across all gradient tensors.
pub fn grad_norm<F: Scalar>(grads: &[(String, Tensor<F>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| {
            let v = Scalar::to_f64(*x);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so the global norm is at most `max_norm`.
pub fn clip_grads<F: Scalar>(grads: &mut [(String, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
