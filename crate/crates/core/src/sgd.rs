//! Stochastic gradient calibration of SDE models against option prices.
//!
//! The objective is `J(θ) = (1/N) Σ_i ((P_i^market − P_i(θ)) / scale)²`.
//! The unbiased estimator multiplies a residual priced on batch A by the
//! pathwise price gradient of an independent batch B; the biased estimator
//! uses a single batch for both factors.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketSnapshot;
use crate::mc::{mc_prices, mix_seed, price_vjp, Claim, TimeGrid};
use crate::models::Sde;
use crate::optim::{l2_norm, IterRecord, LrSchedule, OptState, Optimizer, Plateau, StopReason};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Unbiased,
    Biased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    /// Paths per half-batch (`L`).
    pub half_batch: usize,
    pub lr: LrSchedule,
    pub max_iters: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub estimator: Estimator,
    /// Paths of the fixed held-out batch used for the history MSE.
    pub eval_paths: usize,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            half_batch: 4096,
            lr: LrSchedule::constant(1e-3),
            max_iters: 2000,
            seed: 0,
            optimizer: Optimizer::default(),
            estimator: Estimator::Unbiased,
            eval_paths: 4096,
            plateau_window: 200,
            plateau_rel_tol: 1e-5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.half_batch == 0 || self.eval_paths == 0 {
            return Err(Error::Config("half_batch and eval_paths must be positive".into()));
        }
        Ok(())
    }
}

/// RNG keys consumed by one gradient estimate: all draws are
/// `(seed, path)` streams with `path` in the listed ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyAudit {
    pub seed: u64,
    pub residual_paths: Range<u64>,
    pub gradient_paths: Range<u64>,
}

impl KeyAudit {
    /// Distinct simulated paths.
    pub fn path_simulations(&self) -> u64 {
        let len = |r: &Range<u64>| r.end - r.start;
        let a = &self.residual_paths;
        let b = &self.gradient_paths;
        let overlap = a.end.min(b.end).saturating_sub(a.start.max(b.start));
        len(a) + len(b) - overlap
    }

    pub fn disjoint(&self) -> bool {
        let a = &self.residual_paths;
        let b = &self.gradient_paths;
        a.end <= b.start || b.end <= a.start
    }
}

#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub vector: Vec<f64>,
    /// Model prices of batch A (residual factor).
    pub prices_a: Vec<f64>,
    /// Model prices of batch B (differentiated factor); equal to `prices_a`
    /// for the biased estimator.
    pub prices_b: Vec<f64>,
    pub kind: Estimator,
    pub audit: KeyAudit,
}

/// Unbiased two-batch estimate for a generic claim set.
pub fn grad_unbiased_claims<M: Sde, C: Claim>(
    model: &M,
    grid: &TimeGrid,
    claims: &[C],
    half_batch: usize,
    seed: u64,
) -> Result<GradEstimate> {
    estimate(model, grid, claims, half_batch, seed, Estimator::Unbiased)
}

/// Single-batch estimate for a generic claim set.
pub fn grad_biased_claims<M: Sde, C: Claim>(
    model: &M,
    grid: &TimeGrid,
    claims: &[C],
    half_batch: usize,
    seed: u64,
) -> Result<GradEstimate> {
    estimate(model, grid, claims, half_batch, seed, Estimator::Biased)
}

pub fn grad_unbiased<M: Sde>(
    model: &M,
    grid: &TimeGrid,
    config: &SgdConfig,
    snapshot: &MarketSnapshot,
) -> Result<GradEstimate> {
    non_empty(snapshot)?;
    grad_unbiased_claims(model, grid, &snapshot.contracts, config.half_batch, config.seed)
}

pub fn grad_biased<M: Sde>(
    model: &M,
    grid: &TimeGrid,
    config: &SgdConfig,
    snapshot: &MarketSnapshot,
) -> Result<GradEstimate> {
    non_empty(snapshot)?;
    grad_biased_claims(model, grid, &snapshot.contracts, config.half_batch, config.seed)
}

fn non_empty(snapshot: &MarketSnapshot) -> Result<()> {
    if snapshot.is_empty() {
        Err(Error::EmptySnapshot)
    } else {
        Ok(())
    }
}

fn estimate<M: Sde, C: Claim>(
    model: &M,
    grid: &TimeGrid,
    claims: &[C],
    l: usize,
    seed: u64,
    kind: Estimator,
) -> Result<GradEstimate> {
    if claims.is_empty() {
        return Err(Error::EmptySnapshot);
    }
    if l == 0 {
        return Err(Error::Argument("half batch must hold at least one path".into()));
    }
    let l = l as u64;
    let a = 0..l;
    let b = match kind {
        Estimator::Unbiased => l..2 * l,
        Estimator::Biased => 0..l,
    };
    let scale = model.env().scale;
    let n = claims.len() as f64;
    let weights_of = |prices: &[f64]| -> Vec<f64> {
        claims
            .iter()
            .zip(prices)
            .map(|(c, p)| -2.0 * (c.market_price() - p) / (n * scale * scale))
            .collect()
    };
    let (vector, prices_a, prices_b) = match kind {
        Estimator::Unbiased => {
            let pa: Vec<f64> = mc_prices(model, grid, claims, a.clone(), seed)?
                .iter()
                .map(|p| p.price)
                .collect();
            let g = price_vjp(model, grid, claims, b.clone(), seed, &weights_of(&pa))?;
            (g.vjp, pa, g.prices.iter().map(|p| p.price).collect())
        }
        Estimator::Biased => {
            let pa: Vec<f64> = mc_prices(model, grid, claims, a.clone(), seed)?
                .iter()
                .map(|p| p.price)
                .collect();
            let g = price_vjp(model, grid, claims, a.clone(), seed, &weights_of(&pa))?;
            (g.vjp, pa.clone(), pa)
        }
    };
    if vector.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "gradient estimate is not finite".into(),
        });
    }
    Ok(GradEstimate {
        vector,
        prices_a,
        prices_b,
        kind,
        audit: KeyAudit {
            seed,
            residual_paths: a,
            gradient_paths: b,
        },
    })
}

/// Normalized pricing MSE of `model` on `paths` paths of stream `seed`.
pub fn normalized_mse<M: Sde, C: Claim>(
    model: &M,
    grid: &TimeGrid,
    claims: &[C],
    paths: usize,
    seed: u64,
) -> Result<f64> {
    let scale = model.env().scale;
    let prices = mc_prices(model, grid, claims, 0..paths as u64, seed)?;
    let n = claims.len() as f64;
    Ok(claims
        .iter()
        .zip(&prices)
        .map(|(c, p)| ((c.market_price() - p.price) / scale).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub params: Vec<f64>,
    pub history: Vec<IterRecord>,
    pub stop: StopReason,
}

impl Calibration {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

/// Calibrates `model` in place. Iteration `k` draws its paths from seed
/// `mix_seed(config.seed, k + 1)`; the history MSE uses the fixed stream
/// `mix_seed(config.seed, 0)`.
pub fn calibrate<M: Sde>(
    model: &mut M,
    grid: &TimeGrid,
    config: &SgdConfig,
    snapshot: &MarketSnapshot,
) -> Result<Calibration> {
    calibrate_with(model, grid, config, &snapshot.contracts, |_| {})
}

/// As [`calibrate`], on arbitrary claims, calling `on_iter` after every update.
pub fn calibrate_with<M: Sde, C: Claim>(
    model: &mut M,
    grid: &TimeGrid,
    config: &SgdConfig,
    claims: &[C],
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<Calibration> {
    config.validate()?;
    if claims.is_empty() {
        return Err(Error::EmptySnapshot);
    }
    let mut params = model.params().to_vec();
    let mut opt = OptState::new(config.optimizer, params.len());
    let mut plateau = Plateau::new(config.plateau_window, config.plateau_rel_tol);
    let eval_seed = mix_seed(config.seed, 0);
    let mut history = Vec::new();
    let mut stop = StopReason::MaxIters;
    for k in 0..config.max_iters {
        let seed = mix_seed(config.seed, k as u64 + 1);
        let g = estimate(model, grid, claims, config.half_batch, seed, config.estimator).map_err(|e| at_iter(e, k))?;
        let lr = config.lr.at(k);
        opt.step(&mut params, &g.vector, lr);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                iteration: k,
                reason: "parameter update is not finite".into(),
            });
        }
        model.set_params(&params)?;
        let mse = normalized_mse(model, grid, claims, config.eval_paths, eval_seed).map_err(|e| at_iter(e, k))?;
        if !mse.is_finite() {
            return Err(Error::Divergence {
                iteration: k,
                reason: "training MSE is not finite".into(),
            });
        }
        let rec = IterRecord {
            iter: k + 1,
            train_mse: mse,
            grad_norm: l2_norm(&g.vector),
            lr,
        };
        on_iter(&rec);
        history.push(rec);
        if plateau.update(mse) {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(Calibration { params, history, stop })
}

fn at_iter(e: Error, k: usize) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { iteration: k, reason },
        Error::Simulation { path, step } => Error::Divergence {
            iteration: k,
            reason: format!("simulation produced a non-finite state (path {path}, step {step})"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Contract, Payoff};
    use crate::models::{bs_price, BsInputs, MarketEnv, SdeModel};

    fn snapshot(sigma: f64) -> (SdeModel, TimeGrid, MarketSnapshot) {
        let env = MarketEnv::new(100.0, 0.0, 0.0);
        let t = 30.0 / 365.0;
        let contracts = [90.0, 100.0, 110.0]
            .iter()
            .map(|&k| {
                let p = bs_price(
                    &BsInputs::new(100.0, k, t, 0.0, 0.0),
                    sigma,
                    crate::market::OptionKind::Call,
                )
                .unwrap();
                Contract::european(Payoff::call(k), t, p)
            })
            .collect();
        let snap = MarketSnapshot::new(chrono::NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(), 100.0, 0.0, 0.0)
            .with_contracts(contracts);
        let grid = TimeGrid::daily(&snap.contracts).unwrap();
        (SdeModel::black_scholes(env, 0.3).unwrap(), grid, snap)
    }

    #[test]
    fn batches_are_disjoint_and_shared() {
        let (m, g, s) = snapshot(0.2);
        let cfg = SgdConfig {
            half_batch: 64,
            ..Default::default()
        };
        let e = grad_unbiased(&m, &g, &cfg, &s).unwrap();
        assert!(e.audit.disjoint());
        assert_eq!(e.audit.path_simulations(), 128);
        let b = grad_biased(&m, &g, &cfg, &s).unwrap();
        assert_eq!(b.audit.path_simulations(), 64);
        assert_eq!(b.prices_a, b.prices_b);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (m, g, mut s) = snapshot(0.2);
        let cfg = SgdConfig {
            half_batch: 32,
            seed: 5,
            ..Default::default()
        };
        let pa: Vec<f64> = mc_prices(&m, &g, &s.contracts, 0..32, 5)
            .unwrap()
            .iter()
            .map(|p| p.price)
            .collect();
        for (c, p) in s.contracts.iter_mut().zip(&pa) {
            c.market_price = *p;
        }
        assert!(grad_unbiased(&m, &g, &cfg, &s)
            .unwrap()
            .vector
            .iter()
            .all(|&v| v == 0.0));
        assert!(grad_biased(&m, &g, &cfg, &s).unwrap().vector.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut m, g, s) = snapshot(0.2);
        let cfg = SgdConfig {
            half_batch: 16,
            eval_paths: 16,
            max_iters: 3,
            lr: LrSchedule::constant(0.0),
            ..Default::default()
        };
        let out = calibrate(&mut m, &g, &cfg, &s).unwrap();
        assert_eq!(out.params, vec![0.3]);
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.stop, StopReason::MaxIters);
    }

    #[test]
    fn gradient_points_toward_the_target() {
        let (m, g, s) = snapshot(0.2);
        let cfg = SgdConfig {
            half_batch: 2000,
            ..Default::default()
        };
        // sigma 0.3 overprices, so the gradient is positive
        assert!(grad_unbiased(&m, &g, &cfg, &s).unwrap().vector[0] > 0.0);
    }

    #[test]
    fn calibration_moves_sigma_toward_target() {
        let (mut m, g, s) = snapshot(0.2);
        let cfg = SgdConfig {
            half_batch: 512,
            eval_paths: 512,
            max_iters: 150,
            lr: LrSchedule::constant(2e-3),
            ..Default::default()
        };
        let out = calibrate(&mut m, &g, &cfg, &s).unwrap();
        assert!((out.params[0] - 0.2).abs() < 0.03, "{:?}", out.params);
    }

    #[test]
    fn key_audit_counts_overlap_once() {
        let a = KeyAudit {
            seed: 0,
            residual_paths: 0..10,
            gradient_paths: 5..15,
        };
        assert_eq!(a.path_simulations(), 15);
        assert!(!a.disjoint());
    }
}
