//! RMSprop parameter updates.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// RMSprop with a running mean-square accumulator per parameter:
///
/// ```text
/// acc <- alpha * acc + (1 - alpha) * g^2
/// p   <- p - lr * g / (sqrt(acc) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    acc: BTreeMap<String, ArrayD<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            acc: BTreeMap::new(),
        }
    }

    pub fn with_config(lr: f64, alpha: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            alpha,
            eps,
            acc: BTreeMap::new(),
        }
    }

    /// Apply one update. Gradients are looked up by parameter name; a
    /// parameter without a gradient is left unchanged. Non-finite gradients
    /// abort with the offending parameter's name.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            let param = params.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}': value {:?} vs gradient {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let acc = self
                .acc
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let one_minus = 1.0 - self.alpha;
            azip(acc, grad, |a, &g| *a = self.alpha * *a + one_minus * g * g);
            let lr = self.lr;
            let eps = self.eps;
            let acc = &*acc;
            let mut gi = grad.iter();
            let mut ai = acc.iter();
            for p in param.iter_mut() {
                let g = *gi.next().expect("same shape");
                let a = *ai.next().expect("same shape");
                *p -= lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn azip(a: &mut ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(&mut f64, &f64)) {
    a.zip_mut_with(b, f);
}
