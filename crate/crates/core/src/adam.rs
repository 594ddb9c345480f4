//! Adam optimizer with bias-corrected first and second moment estimates.

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self, TensorError> {
        if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
            return Err(TensorError::Hyper("learning rate must be finite and positive"));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(TensorError::Hyper("betas must lie in [0, 1)"));
        }
        if !cfg.eps.is_finite() || cfg.eps <= 0.0 {
            return Err(TensorError::Hyper("epsilon must be finite and positive"));
        }
        Ok(Self {
            lr: T::from_config(cfg.lr),
            beta1: T::from_config(cfg.beta1),
            beta2: T::from_config(cfg.beta2),
            eps: T::from_config(cfg.eps),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter. The step counter advances once
    /// per call. A non-finite gradient anywhere rejects the whole step before
    /// any state is touched.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::Dim {
                op: "adam_step",
                detail: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::Dim {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(TensorError::NanGradient);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
