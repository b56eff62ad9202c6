//! Central finite-difference gradient verification.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use ndarray::ArrayD;
use rand::Rng;

use super::{Graph, NodeId};
use crate::error::Result;

/// Default step for central differences on 64-bit values.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare the tape gradient of `f` against central finite differences at
/// `inputs`. Returns the worst relative error over all input elements.
///
/// `f` must record a scalar output using only the provided leaf nodes as
/// trainable tensors.
pub fn max_rel_error<F>(f: F, inputs: &[ArrayD<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let grads = g.backward(out)?;
        ids.iter()
            .map(|&id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(id).raw_dim()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |tensors: &[ArrayD<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).iter().next().copied().unwrap())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].len() {
            let orig = work[ti].as_slice().unwrap()[j];
            work[ti].as_slice_mut().unwrap()[j] = orig + h;
            let plus = eval(&work)?;
            work[ti].as_slice_mut().unwrap()[j] = orig - h;
            let minus = eval(&work)?;
            work[ti].as_slice_mut().unwrap()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].as_slice().unwrap()[j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-6 {
                // Both effectively zero; demand absolute agreement instead.
                if (a - numeric).abs() < 1e-7 {
                    0.0
                } else {
                    1.0
                }
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Random tensor with entries in `[lo, hi]`.
pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R, lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(lo..hi))
}
