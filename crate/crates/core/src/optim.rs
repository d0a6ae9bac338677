//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_eps() -> f64 {
    1e-8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_wd() -> f64 {
    0.05
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            eps: default_eps(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: default_wd(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    first: Matrix<T>,
    second: Matrix<T>,
    steps: u64,
}

/// Per-parameter first/second moments. A parameter without a gradient in a
/// step is left untouched, decay included, and its step count does not
/// advance.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: vec![None; num_params],
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &Gradients<T>, lr: f64) -> Result<()> {
        if params.len() != self.state.len() || grads.grads.len() != params.len() {
            return Err(Error::contract("optimizer, parameter and gradient counts differ"));
        }
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        for ((p, g), st) in params.iter_mut().zip(&grads.grads).zip(&mut self.state) {
            let Some(g) = g else { continue };
            let st = st.get_or_insert_with(|| Moments {
                first: Matrix::zeros(g.rows(), g.cols()),
                second: Matrix::zeros(g.rows(), g.cols()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let step_size = T::of(lr / bc1);
            let bc2_sqrt = T::of(bc2.sqrt());
            let eps = T::of(c.eps);
            let decay = T::of(1.0 - lr * c.weight_decay);
            let w = p.value.data_mut();
            let m = st.first.data_mut();
            let v = st.second.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}
