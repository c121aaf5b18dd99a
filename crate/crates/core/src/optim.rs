//! First-order parameter updates shared by the Monte Carlo and PDE
//! calibrators and by the offline call-surface fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    PlainSgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate as a function of the iteration index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `lr · decay^(k / every)`, floored at `min_lr`.
    Exponential {
        lr: f64,
        decay: f64,
        every: usize,
        min_lr: f64,
    },
    /// `lr / (1 + k / half_life)`.
    InverseTime {
        lr: f64,
        half_life: f64,
    },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::Constant { lr }
    }

    pub fn at(&self, k: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Exponential {
                lr,
                decay,
                every,
                min_lr,
            } => (lr * decay.powf(k as f64 / every.max(1) as f64)).max(min_lr),
            LrSchedule::InverseTime { lr, half_life } => lr / (1.0 + k as f64 / half_life),
        }
    }

    /// A zero rate is allowed (it freezes the parameters); negative or
    /// non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr >= 0.0 && lr.is_finite(),
            LrSchedule::Exponential { lr, decay, min_lr, .. } => {
                lr >= 0.0 && lr.is_finite() && decay > 0.0 && decay <= 1.0 && min_lr >= 0.0
            }
            LrSchedule::InverseTime { lr, half_life } => lr >= 0.0 && lr.is_finite() && half_life > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Optimizer with its running moment estimates.
#[derive(Clone, Debug)]
pub struct OptState {
    opt: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    pub fn new(opt: Optimizer, n: usize) -> Self {
        OptState {
            opt,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `θ ← θ − lr · step(g)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        match self.opt {
            Optimizer::PlainSgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Stops when the exponentially smoothed loss has not improved by a relative
/// `rel_tol` over the last `window` iterations.
#[derive(Clone, Debug)]
pub struct Plateau {
    window: usize,
    rel_tol: f64,
    smooth: Option<f64>,
    history: Vec<f64>,
}

impl Plateau {
    pub fn new(window: usize, rel_tol: f64) -> Self {
        Plateau {
            window: window.max(1),
            rel_tol,
            smooth: None,
            history: Vec::new(),
        }
    }

    /// Records a loss; returns `true` once the plateau is reached.
    pub fn update(&mut self, loss: f64) -> bool {
        let a = 2.0 / (self.window as f64 / 4.0 + 1.0);
        let s = match self.smooth {
            None => loss,
            Some(prev) => prev + a.min(1.0) * (loss - prev),
        };
        self.smooth = Some(s);
        self.history.push(s);
        let n = self.history.len();
        if n <= self.window {
            return false;
        }
        let best_before = self.history[..n - self.window]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let recent_best = self.history[n - self.window..]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        recent_best > best_before * (1.0 - self.rel_tol) || best_before == 0.0
    }
}

/// One row of a calibration history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub train_mse: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The smoothed objective stopped improving.
    Converged,
    MaxIters,
}

/// Writes `iter,train_mse,grad_norm,lr` rows.
pub fn write_history(path: &std::path::Path, history: &[IterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["iter", "train_mse", "grad_norm", "lr"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut st = OptState::new(Optimizer::PlainSgd, 2);
        let mut p = [1.0, -1.0];
        st.step(&mut p, &[0.5, 2.0], 0.1);
        assert_eq!(p, [0.95, -1.2]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut st = OptState::new(Optimizer::default(), 2);
        let mut p = [0.0, 0.0];
        st.step(&mut p, &[3.0, -0.01], 1e-3);
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_freezes_parameters() {
        let mut st = OptState::new(Optimizer::default(), 1);
        let mut p = [0.7];
        st.step(&mut p, &[5.0], 0.0);
        assert_eq!(p, [0.7]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut st = OptState::new(Optimizer::default(), 1);
        let mut p = [3.0];
        for _ in 0..5000 {
            let g = [2.0 * (p[0] - 1.0)];
            st.step(&mut p, &g, 1e-2);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::constant(0.1).at(100), 0.1);
        let e = LrSchedule::Exponential {
            lr: 1.0,
            decay: 0.5,
            every: 10,
            min_lr: 0.2,
        };
        assert_eq!(e.at(10), 0.5);
        assert_eq!(e.at(100), 0.2);
        assert!(LrSchedule::constant(-1.0).validate().is_err());
    }

    #[test]
    fn plateau_detects_flat_loss() {
        let mut p = Plateau::new(20, 1e-5);
        let stopped = (0..100).position(|_| p.update(1.0));
        assert_eq!(stopped, Some(20));
        let mut p = Plateau::new(20, 1e-5);
        assert!((0..100).all(|k| !p.update(1.0 / (k + 1) as f64)));
    }
}
