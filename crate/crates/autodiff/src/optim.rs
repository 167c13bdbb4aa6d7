use crate::error::{AutodiffError, Result};
use crate::param::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
///
/// The optimizer spans one or more parameter groups; callers must pass the
/// groups in the same order on every step. Moment buffers are created lazily
/// on the first step and zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != v.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "adam",
                msg: "first and second moment counts differ".into(),
            });
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update over `groups`, each paired with its gradients (`None` skips
    /// that parameter). A non-finite gradient rejects the whole step before any
    /// parameter is touched.
    pub fn step(&mut self, groups: &mut [(&mut ParamSet<T>, &[Option<Tensor<T>>])]) -> Result<()> {
        let mut total = 0;
        for (params, grads) in groups.iter() {
            if params.len() != grads.len() {
                return Err(AutodiffError::InvalidArgument {
                    op: "adam",
                    msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
                });
            }
            for (i, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    params.get(i).expect_same_shape("adam", g)?;
                    if !g.all_finite() {
                        return Err(AutodiffError::NonFinite {
                            what: format!("gradient of {}", params.name(i)),
                        });
                    }
                }
            }
            total += params.len();
        }
        if self.m.is_empty() {
            for (params, _) in groups.iter() {
                for t in params.tensors() {
                    self.m.push(Tensor::zeros(t.shape()));
                    self.v.push(Tensor::zeros(t.shape()));
                }
            }
        } else if self.m.len() != total {
            return Err(AutodiffError::InvalidArgument {
                op: "adam",
                msg: format!("optimizer tracks {} parameters, got {total}", self.m.len()),
            });
        }

        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);

        let mut slot = 0;
        for (params, grads) in groups.iter_mut() {
            for (i, g) in grads.iter().enumerate() {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                slot += 1;
                let Some(g) = g else { continue };
                let p = params.get_mut(i).data_mut();
                for (((p, m), v), &g) in p
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data())
                {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
