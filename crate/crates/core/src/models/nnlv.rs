//! Offline fit of the call-price network `C(K, T)` to quoted call prices.
//!
//! The network sees `(K / scale, T)` and is trained on `C / scale` by
//! full-batch gradient descent on the mean squared error.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Mlp;
use crate::optim::{LrSchedule, OptState, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnlvConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Stop once the best loss has not improved for this many epochs.
    pub patience: usize,
    /// Normalization applied to strikes and prices.
    pub scale: f64,
}

impl Default for NnlvConfig {
    fn default() -> Self {
        NnlvConfig {
            hidden: vec![200, 200],
            epochs: 2000,
            lr: LrSchedule::constant(1e-3),
            optimizer: Optimizer::default(),
            seed: 0,
            patience: 50,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NnlvFit {
    pub net: Mlp,
    pub params: Vec<f64>,
    /// Normalized training MSE per epoch.
    pub history: Vec<f64>,
    pub best_loss: f64,
}

/// Fits `C(K, T)` to `(strike, maturity, call price)` targets.
///
/// Returns the best parameters seen; zero epochs returns the initialization.
pub fn nnlv_fit(targets: &[(f64, f64, f64)], config: &NnlvConfig) -> Result<NnlvFit> {
    if targets.is_empty() {
        return Err(Error::Argument("call-surface fit needs at least one target".into()));
    }
    if !(config.scale > 0.0) {
        return Err(Error::Config("call-surface scale must be positive".into()));
    }
    config.lr.validate()?;
    let mut dims = vec![2];
    dims.extend(&config.hidden);
    dims.push(1);
    let net = Mlp::new(dims)?;
    let n = targets.len();
    let mut x = Array2::zeros((n, 2));
    let mut y = Array1::zeros(n);
    for (i, &(k, t, c)) in targets.iter().enumerate() {
        if !(k.is_finite() && t.is_finite() && c.is_finite()) {
            return Err(Error::Argument(format!("target {i} is not finite")));
        }
        x[[i, 0]] = k / config.scale;
        x[[i, 1]] = t;
        y[i] = c / config.scale;
    }
    let mut params = net.init_params(config.seed);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut opt = OptState::new(config.optimizer, params.len());
    for epoch in 0..config.epochs {
        let (loss, grad) = net.mse_and_grad(&params, x.view(), y.view())?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: epoch,
                reason: "call-surface loss is not finite".into(),
            });
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
        opt.step(&mut params, &grad, config.lr.at(epoch));
    }
    if config.epochs == 0 {
        best_loss = net.mse_and_grad(&params, x.view(), y.view())?.0;
        best = params;
    }
    Ok(NnlvFit {
        net,
        params: best,
        history,
        best_loss,
    })
}
