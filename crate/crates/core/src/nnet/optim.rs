use ndarray::Zip;

use super::{DenseNet, GradientSet};
use crate::error::{Error, Result};

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    Ok(())
}

/// Plain gradient step `p <- p - lr * g`. Refuses non-finite gradients and
/// leaves the network untouched in that case.
pub fn sgd_step(net: &mut DenseNet, grads: &GradientSet, lr: f64) -> Result<()> {
    check_lr(lr)?;
    net.check_grads(grads)?;
    if !grads.is_finite() {
        log::warn!("sgd step refused: non-finite gradient (max |g| = {})", grads.max_abs());
        return Err(Error::NonFinite("gradient passed to sgd_step".into()));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
        layer.weights.scaled_add(-lr, &g.weights);
        layer.biases.scaled_add(-lr, &g.biases);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: GradientSet,
    v: GradientSet,
    t: u64,
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        Self {
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update.
    pub fn step(&mut self, net: &mut DenseNet, grads: &GradientSet, cfg: &AdamConfig) -> Result<()> {
        check_lr(cfg.lr)?;
        net.check_grads(grads)?;
        if !self.m.congruent_with(net) {
            return Err(Error::InvalidArgument("adam state does not match network shape".into()));
        }
        if !grads.is_finite() {
            log::warn!("adam step refused: non-finite gradient");
            return Err(Error::NonFinite("gradient passed to adam step".into()));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.lr, cfg.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.biases)
                .and(&mut m.biases)
                .and(&mut v.biases)
                .and(&g.biases)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}
