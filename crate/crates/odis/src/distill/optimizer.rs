//! AdamW with decoupled weight decay, applied to the student only.

use crate::error::{OdisError, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::ModelParams;

#[derive(Clone, Debug)]
pub struct AdamW<E: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    t: u64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(params: &ModelParams<E>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<E>], &[Tensor<E>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Tensor<E>>, v: Vec<Tensor<E>>, t: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(OdisError::invalid("optimizer moment count mismatch"));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// One update over all parameters. `grads` is index-aligned with the
    /// parameter set; decay applies only to parameters flagged for it.
    pub fn step(&mut self, params: &mut ModelParams<E>, grads: &[Tensor<E>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(OdisError::invalid(format!(
                "expected {} gradients, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::ONE;
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_e = E::from_f64(lr);
        let eps = E::from_f64(self.eps);
        let wd = E::from_f64(lr * self.weight_decay);

        for (i, grad) in grads.iter().enumerate() {
            let param = params.at_mut(i);
            if grad.shape() != param.value.shape() {
                return Err(OdisError::ShapeMismatch {
                    op: "adamw",
                    lhs: grad.shape().to_vec(),
                    rhs: param.value.shape().to_vec(),
                });
            }
            let decay = param.decay;
            let pdata = param.value.data_mut();
            let mdata = self.m[i].data_mut();
            let vdata = self.v[i].data_mut();
            for j in 0..pdata.len() {
                let g = grad.data()[j];
                mdata[j] = b1 * mdata[j] + (one - b1) * g;
                vdata[j] = b2 * vdata[j] + (one - b2) * g * g;
                let mhat = mdata[j] / bc1;
                let vhat = vdata[j] / bc2;
                let mut p = pdata[j];
                if decay {
                    p -= wd * p;
                }
                pdata[j] = p - lr_e * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<E: Scalar>(grads: &mut [Tensor<E>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            let v = x.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
