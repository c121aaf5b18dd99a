//! Explicit finite-difference solver for the backward pricing equation
//!
//! ```text
//! ∂v/∂t + μ_S v_s + ½σ_S² v_ss + μ_Y v_y + ½σ_Y² v_yy + ρ σ_S σ_Y v_sy − r v = 0
//! ```
//!
//! on an `(S, Y)` grid, all contracts advanced together. Each interior node
//! carries a nine-point stencil; one-dimensional models use a single `Y`
//! node. Early exercise is the node-wise `max` with the payoff at exercise
//! steps.
//!
//! Gradients use the discrete adjoint of the scheme: the adjoint state is
//! swept back through the transposed stencils, intermediate states are
//! recomputed from `√N_t` checkpoints, and stencil-weight adjoints are mapped
//! to parameters through a tape over the coefficient evaluations.

use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Contract, ExerciseStyle, MarketSnapshot, Payoff};
use crate::models::Sde;
use crate::net::{Real, Tape, Var};
use crate::optim::{l2_norm, IterRecord, LrSchedule, OptState, Optimizer, Plateau, StopReason};
use crate::sgd::Calibration;

/// Stability constant of the explicit scheme.
pub const C_STAB: f64 = 0.45;
/// Largest tolerated growth of `‖v‖∞` over one step.
pub const GROWTH_LIMIT: f64 = 10.0;
const MAX_STEPS: usize = 5_000_000;
const TAPE_EDGE_BUDGET: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSteps {
    /// Largest step allowed by the stability bound, capped at `max_dt`.
    Auto { max_dt: f64 },
    /// Exactly `steps` steps; a step above the stability bound is an error.
    Fixed { steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdeConfig {
    pub n_s: usize,
    pub n_y: usize,
    /// Upper end of the `S` axis; `s_max_factor · max(s0, max strike)` when unset.
    pub s_max: Option<f64>,
    pub s_max_factor: f64,
    /// `Y` domain; the model default when unset.
    pub y_range: Option<(f64, f64)>,
    pub time: TimeSteps,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig {
            n_s: 200,
            n_y: 50,
            s_max: None,
            s_max_factor: 4.0,
            y_range: None,
            time: TimeSteps::Auto {
                max_dt: 1.0 / crate::market::DAYS_PER_YEAR,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub s: Vec<f64>,
    /// `Y` nodes; a single node at `y0` for one-dimensional models.
    pub y: Vec<f64>,
    pub ds: f64,
    pub dy: f64,
    pub dt: f64,
    pub n_t: usize,
    pub horizon: f64,
    /// Index of `s0` on the `S` axis.
    pub i0: usize,
    pub y0: f64,
    pub two_d: bool,
}

impl PdeGrid {
    /// Grid covering every contract maturity, with `s0` on a node and the
    /// time step chosen or checked against the stability bound
    /// `Δt ≤ C_STAB · min(Δ_S²/σ_S², Δ_Y²/σ_Y²)` over a coefficient sweep.
    pub fn build<M: Sde>(model: &M, contracts: &[Contract], cfg: &PdeConfig) -> Result<Self> {
        let env = model.env();
        let s0 = env.spot;
        if !(s0 > 0.0) {
            return Err(Error::GridConfig("the PDE grid needs s0 > 0".into()));
        }
        if cfg.n_s < 4 {
            return Err(Error::GridConfig(format!(
                "n_s = {} leaves fewer than 3 interior nodes",
                cfg.n_s
            )));
        }
        let horizon = contracts.iter().map(|c| c.maturity).fold(0.0, f64::max);
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::GridConfig("contracts need positive maturities".into()));
        }
        let max_strike = contracts.iter().map(|c| c.strike()).fold(0.0, f64::max);
        let s_max_target = cfg.s_max.unwrap_or(cfg.s_max_factor * s0.max(max_strike));
        if !(s_max_target > s0) {
            return Err(Error::GridConfig(format!(
                "S_max = {s_max_target} must exceed s0 = {s0}"
            )));
        }
        let i0 = ((s0 * cfg.n_s as f64 / s_max_target).round() as usize).clamp(1, cfg.n_s - 2);
        let ds = s0 / i0 as f64;
        let s: Vec<f64> = (0..=cfg.n_s).map(|i| i as f64 * ds).collect();
        let y0 = model.y0(model.params());
        let two_d = model.dim() == 2;
        let (y, dy) = if two_d {
            if cfg.n_y < 4 {
                return Err(Error::GridConfig(format!(
                    "n_y = {} leaves fewer than 3 interior nodes",
                    cfg.n_y
                )));
            }
            let (lo, hi) = cfg.y_range.unwrap_or_else(|| model.y_domain());
            if !(hi > lo) || !(y0 >= lo && y0 <= hi) {
                return Err(Error::GridConfig(format!(
                    "y0 = {y0} outside the Y domain [{lo}, {hi}]"
                )));
            }
            let dy = (hi - lo) / cfg.n_y as f64;
            ((0..=cfg.n_y).map(|j| lo + j as f64 * dy).collect(), dy)
        } else {
            (vec![y0], 1.0)
        };
        let mut grid = PdeGrid {
            s,
            y,
            ds,
            dy,
            dt: horizon,
            n_t: 1,
            horizon,
            i0,
            y0,
            two_d,
        };
        let dt_max = grid.stable_dt(model)?;
        let n_t = match cfg.time {
            TimeSteps::Auto { max_dt } => {
                let cap = if max_dt > 0.0 { max_dt } else { f64::INFINITY };
                let n = (horizon / dt_max.min(cap)).ceil();
                if !(n <= MAX_STEPS as f64) {
                    return Err(Error::GridConfig(format!(
                        "stable time step {dt_max:.3e} needs more than {MAX_STEPS} steps"
                    )));
                }
                (n as usize).max(1)
            }
            TimeSteps::Fixed { steps } => {
                if steps == 0 {
                    return Err(Error::GridConfig("need at least one time step".into()));
                }
                let dt = horizon / steps as f64;
                if dt > dt_max * (1.0 + 1e-12) {
                    return Err(Error::GridConfig(format!(
                        "time step {dt:.3e} exceeds the stability bound {dt_max:.3e}"
                    )));
                }
                steps
            }
        };
        grid.n_t = n_t;
        grid.dt = horizon / n_t as f64;
        Ok(grid)
    }

    pub fn n_s(&self) -> usize {
        self.s.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.y.len()
    }

    /// Values per contract.
    pub fn nodes(&self) -> usize {
        self.s.len() * self.y.len()
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn step_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_t)
    }

    /// Largest stable step over interior nodes at a few sample times.
    pub fn stable_dt<M: Sde>(&self, model: &M) -> Result<f64> {
        let th = model.params();
        let times: Vec<f64> = if model.time_homogeneous() {
            vec![0.0]
        } else {
            (0..5).map(|k| self.horizon * k as f64 / 4.0).collect()
        };
        let (mut vs, mut vy) = (0.0f64, 0.0f64);
        for &t in &times {
            for &s in &self.s[1..self.n_s()] {
                for &y in &self.y {
                    let c = model.coeffs(th, s, y, t)?;
                    check_coeffs(&c.value(), s, y, t)?;
                    vs = vs.max(c.sigma_s * c.sigma_s);
                    vy = vy.max(c.sigma_y * c.sigma_y);
                }
            }
        }
        let bs = if vs > 0.0 {
            self.ds * self.ds / vs
        } else {
            f64::INFINITY
        };
        let by = if self.two_d && vy > 0.0 {
            self.dy * self.dy / vy
        } else {
            f64::INFINITY
        };
        Ok(C_STAB * bs.min(by))
    }

    /// Bracket `(j, a)` with `y0 = (1 − a)·y[j] + a·y[j + 1]`.
    fn y_weights(&self) -> (usize, f64) {
        if !self.two_d {
            return (0, 0.0);
        }
        let x = (self.y0 - self.y[0]) / self.dy;
        let j = (x.floor().max(0.0) as usize).min(self.ny() - 2);
        (j, x - j as f64)
    }
}

fn check_coeffs(c: &crate::models::Coeffs<f64>, s: f64, y: f64, t: f64) -> Result<()> {
    if c.mu_s.is_finite() && c.sigma_s.is_finite() && c.mu_y.is_finite() && c.sigma_y.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            s,
            y,
            t,
            message: "coefficient is not finite".into(),
        })
    }
}

/// Times at which the holder may exercise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dates", rename_all = "snake_case")]
pub enum ExerciseSchedule {
    /// Year fractions, snapped to the nearest time node.
    Dates(Vec<f64>),
    /// Every time node including `t = 0`.
    EveryStep,
}

impl ExerciseSchedule {
    pub fn none() -> Self {
        ExerciseSchedule::Dates(Vec::new())
    }

    /// `{Δ, 2Δ, …}` up to `maturity`.
    pub fn bermudan(interval: f64, maturity: f64) -> Result<Self> {
        if !(interval > 0.0) {
            return Err(Error::Argument(format!(
                "exercise interval must be positive, got {interval}"
            )));
        }
        let m = (maturity / interval + 1e-9).floor() as usize;
        Ok(ExerciseSchedule::Dates((1..=m).map(|k| k as f64 * interval).collect()))
    }

    pub fn for_contract(c: &Contract) -> Result<Self> {
        match c.style {
            ExerciseStyle::European => Ok(Self::none()),
            ExerciseStyle::Bermudan { interval } => Self::bermudan(interval, c.maturity),
            ExerciseStyle::American => Ok(ExerciseSchedule::EveryStep),
        }
    }

    fn steps(&self, grid: &PdeGrid, maturity_step: usize) -> Exercise {
        match self {
            ExerciseSchedule::EveryStep => Exercise::All,
            ExerciseSchedule::Dates(d) => {
                let mut mask = vec![false; grid.n_t + 1];
                let mut any = false;
                for &t in d {
                    let n = grid.step_of(t);
                    if n <= maturity_step {
                        mask[n] = true;
                        any = true;
                    }
                }
                if any {
                    Exercise::Mask(mask)
                } else {
                    Exercise::Never
                }
            }
        }
    }
}

enum Exercise {
    Never,
    All,
    Mask(Vec<bool>),
}

impl Exercise {
    fn at(&self, n: usize) -> bool {
        match self {
            Exercise::Never => false,
            Exercise::All => true,
            Exercise::Mask(m) => m[n],
        }
    }
}

/// Values of every contract on the grid at `t = 0` and at retained times.
#[derive(Clone, Debug)]
pub struct PdeSolution {
    pub grid: PdeGrid,
    pub ids: Vec<String>,
    /// `v_i(0, s0, y0)`.
    pub prices: Vec<f64>,
    /// Contract-major `[contract][S][Y]` values at `t = 0`.
    pub values: Vec<f64>,
    pub slices: Vec<PdeSlice>,
}

#[derive(Clone, Debug)]
pub struct PdeSlice {
    pub step: usize,
    pub t: f64,
    /// Same layout as [`PdeSolution::values`]; rows of contracts that have
    /// already matured are zero.
    pub values: Vec<f64>,
    /// Contracts alive at this time.
    pub active: Vec<bool>,
}

impl PdeSolution {
    pub fn value(&self, contract: usize, i: usize, j: usize) -> f64 {
        self.values[contract * self.grid.nodes() + i * self.grid.ny() + j]
    }

    /// `t = 0` values of one contract along `S` at the `Y` node `j`.
    pub fn s_slice(&self, contract: usize, j: usize) -> Vec<f64> {
        (0..self.grid.s.len()).map(|i| self.value(contract, i, j)).collect()
    }

    /// Central difference of the `t = 0` solution in `S` at `s0`.
    pub fn delta(&self, contract: usize) -> f64 {
        let g = &self.grid;
        let (j, a) = g.y_weights();
        let at = |i: usize| {
            if g.two_d {
                (1.0 - a) * self.value(contract, i, j) + a * self.value(contract, i, j + 1)
            } else {
                self.value(contract, i, 0)
            }
        };
        (at(g.i0 + 1) - at(g.i0 - 1)) / (2.0 * g.ds)
    }

    /// Writes `contract_id,t,S,Y,value` rows for the `t = 0` solution and
    /// every retained slice.
    pub fn dump_slices(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["contract_id", "t", "S", "Y", "value"])?;
        let g = &self.grid;
        let nn = g.nodes();
        let all = vec![true; self.ids.len()];
        let zero = [(0.0, &self.values, &all)];
        let rest = self.slices.iter().map(|s| (s.t, &s.values, &s.active));
        for (t, vals, active) in zero.into_iter().chain(rest) {
            for (c, id) in self.ids.iter().enumerate() {
                if !active[c] {
                    continue;
                }
                for (i, s) in g.s.iter().enumerate() {
                    for (j, y) in g.y.iter().enumerate() {
                        let v = vals[c * nn + i * g.ny() + j];
                        w.write_record([id.clone(), t.to_string(), s.to_string(), y.to_string(), v.to_string()])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

// stencil index of the neighbour (i + di, j + dj)
const fn k(di: i32, dj: i32) -> usize {
    ((di + 1) * 3 + (dj + 1)) as usize
}

/// Difference operators `[D_s, D_ss, D_y, D_yy, D_sy]` per node kind:
/// 0 one-dimensional, 1 interior `Y`, 2 lower `Y` edge, 3 upper `Y` edge.
type Ops = [[[f64; 9]; 5]; 4];

fn operators(ds: f64, dy: f64) -> Ops {
    let mut ops = [[[0.0; 9]; 5]; 4];
    for kind in ops.iter_mut() {
        kind[0][k(1, 0)] = 0.5 / ds;
        kind[0][k(-1, 0)] = -0.5 / ds;
        kind[1][k(1, 0)] = 1.0 / (ds * ds);
        kind[1][k(-1, 0)] = 1.0 / (ds * ds);
        kind[1][k(0, 0)] = -2.0 / (ds * ds);
    }
    let i = &mut ops[1];
    i[2][k(0, 1)] = 0.5 / dy;
    i[2][k(0, -1)] = -0.5 / dy;
    i[3][k(0, 1)] = 1.0 / (dy * dy);
    i[3][k(0, -1)] = 1.0 / (dy * dy);
    i[3][k(0, 0)] = -2.0 / (dy * dy);
    let q = 0.25 / (ds * dy);
    i[4][k(1, 1)] = q;
    i[4][k(-1, -1)] = q;
    i[4][k(1, -1)] = -q;
    i[4][k(-1, 1)] = -q;
    // edges: one-sided in Y, no second Y derivative
    let h = 0.5 / (ds * dy);
    let lo = &mut ops[2];
    lo[2][k(0, 1)] = 1.0 / dy;
    lo[2][k(0, 0)] = -1.0 / dy;
    lo[4][k(1, 1)] = h;
    lo[4][k(-1, 1)] = -h;
    lo[4][k(1, 0)] = -h;
    lo[4][k(-1, 0)] = h;
    let hi = &mut ops[3];
    hi[2][k(0, 0)] = 1.0 / dy;
    hi[2][k(0, -1)] = -1.0 / dy;
    hi[4][k(1, 0)] = h;
    hi[4][k(-1, 0)] = -h;
    hi[4][k(1, -1)] = -h;
    hi[4][k(-1, -1)] = h;
    ops
}

/// Coefficients `(μ_S, σ_S, μ_Y, σ_Y)` and stencil weights of every interior
/// node for one step.
#[derive(Clone)]
struct StepCoeffs {
    coef: Vec<[f64; 4]>,
    w: Vec<[f64; 9]>,
}

struct Problem<'a, M: Sde> {
    model: &'a M,
    grid: &'a PdeGrid,
    payoffs: Vec<Payoff>,
    /// Maturity step per contract.
    mats: Vec<usize>,
    exercise: Vec<Exercise>,
    /// Payoff on the `S` axis per contract.
    gvals: Vec<Vec<f64>>,
    ops: Ops,
    rho: f64,
    rate: f64,
    cached: Option<StepCoeffs>,
}

impl<'a, M: Sde> Problem<'a, M> {
    fn new(model: &'a M, grid: &'a PdeGrid, contracts: &[Contract], schedules: &[ExerciseSchedule]) -> Result<Self> {
        if schedules.len() != contracts.len() {
            return Err(Error::InputShape {
                expected: contracts.len(),
                got: schedules.len(),
            });
        }
        let mut mats = Vec::with_capacity(contracts.len());
        for c in contracts {
            let n = (c.maturity / grid.dt).round();
            if !(n >= 1.0) || n > grid.n_t as f64 {
                return Err(Error::ContractGrid {
                    id: c.id.clone(),
                    maturity: c.maturity,
                    reason: format!("nearest step {n} outside 1..={}", grid.n_t),
                });
            }
            mats.push(n as usize);
        }
        let exercise = schedules.iter().zip(&mats).map(|(s, &m)| s.steps(grid, m)).collect();
        let gvals = contracts
            .iter()
            .map(|c| grid.s.iter().map(|&s| c.payoff.eval(s)).collect())
            .collect();
        let mut p = Problem {
            model,
            grid,
            payoffs: contracts.iter().map(|c| c.payoff).collect(),
            mats,
            exercise,
            gvals,
            ops: operators(grid.ds, grid.dy),
            rho: model.rho(model.params()),
            rate: model.env().rate,
            cached: None,
        };
        if model.time_homogeneous() {
            p.cached = Some(p.compute_coeffs(0.0)?);
        }
        Ok(p)
    }

    fn nc(&self) -> usize {
        self.payoffs.len()
    }

    fn kind(&self, j: usize) -> usize {
        if !self.grid.two_d {
            0
        } else if j == 0 {
            2
        } else if j + 1 == self.grid.ny() {
            3
        } else {
            1
        }
    }

    fn compute_coeffs(&self, t: f64) -> Result<StepCoeffs> {
        let g = self.grid;
        let ny = g.ny();
        let th = self.model.params();
        let dt = g.dt;
        let mut coef = Vec::with_capacity((g.n_s() - 1) * ny);
        let mut w = Vec::with_capacity((g.n_s() - 1) * ny);
        for &s in &g.s[1..g.n_s()] {
            for (j, &y) in g.y.iter().enumerate() {
                let c = self.model.coeffs(th, s, y, t)?;
                check_coeffs(&c, s, y, t)?;
                let cv = [
                    c.mu_s,
                    0.5 * c.sigma_s * c.sigma_s,
                    c.mu_y,
                    0.5 * c.sigma_y * c.sigma_y,
                    self.rho * c.sigma_s * c.sigma_y,
                ];
                let ops = &self.ops[self.kind(j)];
                let mut wk = [0.0; 9];
                for (m, op) in ops.iter().enumerate() {
                    if cv[m] != 0.0 {
                        for (x, o) in wk.iter_mut().zip(op) {
                            *x += dt * cv[m] * o;
                        }
                    }
                }
                wk[k(0, 0)] += 1.0 - self.rate * dt;
                coef.push([c.mu_s, c.sigma_s, c.mu_y, c.sigma_y]);
                w.push(wk);
            }
        }
        Ok(StepCoeffs { coef, w })
    }

    /// Coefficients of the step from level `n + 1` to `n`, taken at `t_{n+1}`.
    fn coeffs(&self, n: usize) -> Result<Cow<'_, StepCoeffs>> {
        match &self.cached {
            Some(c) => Ok(Cow::Borrowed(c)),
            None => Ok(Cow::Owned(self.compute_coeffs(self.grid.time(n + 1))?)),
        }
    }

    fn init(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.nc() * self.grid.nodes()];
        self.finish(self.grid.n_t, &mut v);
        v
    }

    /// Stencil and boundary rows of level `n` for contracts alive below
    /// their maturity; other rows are zero.
    fn stencil(&self, n: usize, prev: &[f64], sc: &StepCoeffs, out: &mut [f64]) {
        let g = self.grid;
        let nn = g.nodes();
        let ny = g.ny();
        let n_s = g.n_s();
        let t = g.time(n);
        out.par_chunks_mut(nn)
            .zip(prev.par_chunks(nn))
            .enumerate()
            .for_each(|(c, (o, p))| {
                if n >= self.mats[c] {
                    o.fill(0.0);
                    return;
                }
                apply_stencil(o, p, &sc.w, n_s, ny);
                let tau = g.time(self.mats[c]) - t;
                let lower = self.payoffs[c].eval(0.0) * (-self.rate * tau).exp();
                for j in 0..ny {
                    o[j] = lower;
                    o[n_s * ny + j] = 2.0 * o[(n_s - 1) * ny + j] - o[(n_s - 2) * ny + j];
                }
            });
    }

    /// Exercise and activation at level `n`.
    fn finish(&self, n: usize, v: &mut [f64]) {
        let nn = self.grid.nodes();
        let ny = self.grid.ny();
        v.par_chunks_mut(nn).enumerate().for_each(|(c, o)| {
            let gv = &self.gvals[c];
            if n == self.mats[c] {
                for (i, &x) in gv.iter().enumerate() {
                    o[i * ny..(i + 1) * ny].fill(x);
                }
            } else if n < self.mats[c] && self.exercise[c].at(n) {
                for (i, &x) in gv.iter().enumerate() {
                    for v in &mut o[i * ny..(i + 1) * ny] {
                        if x > *v {
                            *v = x;
                        }
                    }
                }
            }
        });
    }

    /// Level `n` from level `n + 1`.
    fn advance(&self, n: usize, prev: &[f64]) -> Result<Vec<f64>> {
        let sc = self.coeffs(n)?;
        let mut out = vec![0.0; prev.len()];
        self.stencil(n, prev, &sc, &mut out);
        let before = norm_inf(prev);
        let after = norm_inf(&out);
        if !after.is_finite() || after > GROWTH_LIMIT * before.max(f64::MIN_POSITIVE) && after > 1e-300 {
            return Err(Error::Unstable { step: n });
        }
        self.finish(n, &mut out);
        Ok(out)
    }

    fn prices(&self, v: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let (j, a) = g.y_weights();
        let nn = g.nodes();
        (0..self.nc())
            .map(|c| {
                let base = c * nn + g.i0 * g.ny();
                if g.two_d {
                    (1.0 - a) * v[base + j] + a * v[base + j + 1]
                } else {
                    v[base]
                }
            })
            .collect()
    }

    /// Adjoint of the step from level `n + 1` to `n`: returns `λ^{n+1}` and
    /// adds the coefficient adjoints `(μ̄_S, σ̄_S, μ̄_Y, σ̄_Y)` per interior
    /// node to `cbar`, and `ρ̄` to `rho_bar`.
    fn reverse(
        &self,
        n: usize,
        next: &[f64],
        lam: &mut [f64],
        cbar: &mut [[f64; 4]],
        rho_bar: &mut f64,
    ) -> Result<Vec<f64>> {
        let g = self.grid;
        let nn = g.nodes();
        let ny = g.ny();
        let n_s = g.n_s();
        let sc = self.coeffs(n)?;
        let needs_cont = (0..self.nc()).any(|c| n < self.mats[c] && self.exercise[c].at(n));
        let cont = if needs_cont {
            let mut u = vec![0.0; next.len()];
            self.stencil(n, next, &sc, &mut u);
            Some(u)
        } else {
            None
        };
        let mut out = vec![0.0; next.len()];
        let mut wbar = vec![[0.0; 9]; (n_s - 1) * ny];
        for c in 0..self.nc() {
            let l = &mut lam[c * nn..(c + 1) * nn];
            if n >= self.mats[c] {
                continue;
            }
            if self.exercise[c].at(n) {
                let u = &cont.as_ref().expect("continuation")[c * nn..(c + 1) * nn];
                for (i, &x) in self.gvals[c].iter().enumerate() {
                    for j in 0..ny {
                        // ties go to the continuation value
                        if x > u[i * ny + j] {
                            l[i * ny + j] = 0.0;
                        }
                    }
                }
            }
            for j in 0..ny {
                let top = l[n_s * ny + j];
                l[(n_s - 1) * ny + j] += 2.0 * top;
                l[(n_s - 2) * ny + j] -= top;
                l[n_s * ny + j] = 0.0;
                l[j] = 0.0;
            }
            let p = &next[c * nn..(c + 1) * nn];
            let o = &mut out[c * nn..(c + 1) * nn];
            reverse_stencil(l, p, &sc.w, o, &mut wbar, n_s, ny);
        }
        let dt = g.dt;
        for (idx, wb) in wbar.iter().enumerate() {
            if wb.iter().all(|&x| x == 0.0) {
                continue;
            }
            let ops = &self.ops[self.kind(idx % ny)];
            let mut cb = [0.0; 5];
            for (m, op) in ops.iter().enumerate() {
                cb[m] = dt * op.iter().zip(wb).map(|(o, x)| o * x).sum::<f64>();
            }
            let [_, ss, _, sy] = sc.coef[idx];
            let a = &mut cbar[idx];
            a[0] += cb[0];
            a[1] += cb[1] * ss + cb[4] * self.rho * sy;
            a[2] += cb[2];
            a[3] += cb[3] * sy + cb[4] * self.rho * ss;
            *rho_bar += cb[4] * ss * sy;
        }
        Ok(out)
    }

    /// `Σ_nodes cbar · ∂coeffs/∂θ` at time `t`, recorded in node chunks.
    fn coeff_vjp(&self, t: f64, cbar: &[[f64; 4]], out: &mut [f64]) -> Result<()> {
        let g = self.grid;
        let ny = g.ny();
        let nodes: Vec<usize> = (0..cbar.len()).filter(|&i| cbar[i].iter().any(|&x| x != 0.0)).collect();
        if nodes.is_empty() {
            return Ok(());
        }
        let chunk = self.vjp_chunk()?;
        for part in nodes.chunks(chunk) {
            let tape = Tape::new();
            let th = tape.vars(self.model.params());
            let mut seeds: Vec<(Var<'_>, f64)> = Vec::with_capacity(4 * part.len());
            for &idx in part {
                let s = g.s[1 + idx / ny];
                let y = g.y[idx % ny];
                let c = self.model.coeffs(&th, Var::cst(s), Var::cst(y), t)?;
                for (v, b) in [c.mu_s, c.sigma_s, c.mu_y, c.sigma_y].into_iter().zip(cbar[idx]) {
                    if b != 0.0 && !v.is_constant() {
                        seeds.push((v, b));
                    }
                }
            }
            let adj = tape.adjoints(&seeds);
            for (o, v) in out.iter_mut().zip(&th) {
                *o += v.node().map_or(0.0, |k| adj[k]);
            }
        }
        Ok(())
    }

    fn vjp_chunk(&self) -> Result<usize> {
        let tape = Tape::new();
        let th = tape.vars(self.model.params());
        let before = tape.edge_count();
        let g = self.grid;
        self.model.coeffs(&th, Var::cst(g.s[g.i0]), Var::cst(g.y0), 0.0)?;
        let per = (tape.edge_count() - before).max(1);
        Ok((TAPE_EDGE_BUDGET / per).max(1))
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter()
        .fold(0.0f64, |m, x| if x.abs() > m || x.is_nan() { x.abs() } else { m })
}

fn apply_stencil(o: &mut [f64], p: &[f64], w: &[[f64; 9]], n_s: usize, ny: usize) {
    if ny == 1 {
        for i in 1..n_s {
            let w = &w[i - 1];
            o[i] = w[k(-1, 0)] * p[i - 1] + w[k(0, 0)] * p[i] + w[k(1, 0)] * p[i + 1];
        }
        return;
    }
    for i in 1..n_s {
        let (r0, r1, r2) = ((i - 1) * ny, i * ny, (i + 1) * ny);
        for j in 0..ny {
            let w = &w[(i - 1) * ny + j];
            let jm = j.saturating_sub(1);
            let jp = (j + 1).min(ny - 1);
            o[r1 + j] = w[0] * p[r0 + jm]
                + w[1] * p[r0 + j]
                + w[2] * p[r0 + jp]
                + w[3] * p[r1 + jm]
                + w[4] * p[r1 + j]
                + w[5] * p[r1 + jp]
                + w[6] * p[r2 + jm]
                + w[7] * p[r2 + j]
                + w[8] * p[r2 + jp];
        }
    }
}

/// Transpose of [`apply_stencil`]: scatters `l` into `out` and accumulates
/// weight adjoints `wbar += l · p[neighbour]`.
fn reverse_stencil(
    l: &[f64],
    p: &[f64],
    w: &[[f64; 9]],
    out: &mut [f64],
    wbar: &mut [[f64; 9]],
    n_s: usize,
    ny: usize,
) {
    for i in 1..n_s {
        for j in 0..ny {
            let lv = l[i * ny + j];
            if lv == 0.0 {
                continue;
            }
            let idx = (i - 1) * ny + j;
            let w = &w[idx];
            let wb = &mut wbar[idx];
            if ny == 1 {
                for di in [-1i32, 0, 1] {
                    let kk = k(di, 0);
                    let at = (i as i32 + di) as usize;
                    out[at] += w[kk] * lv;
                    wb[kk] += lv * p[at];
                }
                continue;
            }
            let jm = j.saturating_sub(1);
            let jp = (j + 1).min(ny - 1);
            for di in [-1i32, 0, 1] {
                let row = (i as i32 + di) as usize * ny;
                for (dj, jj) in [(-1, jm), (0, j), (1, jp)] {
                    let kk = k(di, dj);
                    out[row + jj] += w[kk] * lv;
                    wb[kk] += lv * p[row + jj];
                }
            }
        }
    }
}

fn check_grid_contracts(contracts: &[Contract]) -> Result<()> {
    for c in contracts {
        if !(c.maturity > 0.0 && c.maturity.is_finite()) {
            return Err(Error::Contract(format!(
                "contract `{}` has maturity {}",
                c.id, c.maturity
            )));
        }
    }
    Ok(())
}

/// Solves with explicit schedules (one per contract) and keeps the listed
/// times (snapped to steps) as slices.
pub fn solve_with<M: Sde>(
    model: &M,
    grid: &PdeGrid,
    contracts: &[Contract],
    schedules: &[ExerciseSchedule],
    keep: &[f64],
) -> Result<PdeSolution> {
    check_grid_contracts(contracts)?;
    let prob = Problem::new(model, grid, contracts, schedules)?;
    let mut keep_steps: Vec<usize> = keep.iter().map(|&t| grid.step_of(t)).filter(|&n| n > 0).collect();
    keep_steps.sort_unstable_by(|a, b| b.cmp(a));
    keep_steps.dedup();
    let mut slices = Vec::new();
    let mut v = prob.init();
    let record = |n: usize, v: &[f64], slices: &mut Vec<PdeSlice>| {
        if keep_steps.contains(&n) {
            slices.push(PdeSlice {
                step: n,
                t: grid.time(n),
                values: v.to_vec(),
                active: prob.mats.iter().map(|&m| n <= m).collect(),
            });
        }
    };
    record(grid.n_t, &v, &mut slices);
    for n in (0..grid.n_t).rev() {
        v = prob.advance(n, &v)?;
        record(n, &v, &mut slices);
    }
    Ok(PdeSolution {
        grid: grid.clone(),
        ids: contracts.iter().map(|c| c.id.clone()).collect(),
        prices: prob.prices(&v),
        values: v,
        slices,
    })
}

/// European prices (exercise styles are ignored).
pub fn solve_european<M: Sde>(model: &M, grid: &PdeGrid, contracts: &[Contract]) -> Result<PdeSolution> {
    let sched = vec![ExerciseSchedule::none(); contracts.len()];
    solve_with(model, grid, contracts, &sched, &[])
}

/// Every contract under the same exercise schedule.
pub fn solve_bermudan<M: Sde>(
    model: &M,
    grid: &PdeGrid,
    contracts: &[Contract],
    schedule: &ExerciseSchedule,
) -> Result<PdeSolution> {
    let sched = vec![schedule.clone(); contracts.len()];
    solve_with(model, grid, contracts, &sched, &[])
}

/// Each contract under the schedule implied by its own exercise style.
pub fn solve<M: Sde>(model: &M, grid: &PdeGrid, contracts: &[Contract]) -> Result<PdeSolution> {
    let sched = contracts
        .iter()
        .map(ExerciseSchedule::for_contract)
        .collect::<Result<Vec<_>>>()?;
    solve_with(model, grid, contracts, &sched, &[])
}

/// Prices and `Σ_i weights[i] · ∇_θ P_i` by the discrete adjoint.
#[derive(Clone, Debug)]
pub struct PdeVjp {
    pub prices: Vec<f64>,
    pub vjp: Vec<f64>,
}

pub fn price_vjp<M: Sde>(
    model: &M,
    grid: &PdeGrid,
    contracts: &[Contract],
    schedules: &[ExerciseSchedule],
    weights: &[f64],
) -> Result<PdeVjp> {
    if weights.len() != contracts.len() {
        return Err(Error::InputShape {
            expected: contracts.len(),
            got: weights.len(),
        });
    }
    check_grid_contracts(contracts)?;
    let prob = Problem::new(model, grid, contracts, schedules)?;
    let nt = grid.n_t;
    let stride = ((nt as f64).sqrt().ceil() as usize).max(1);
    let mut ckpt: Vec<Option<Vec<f64>>> = vec![None; nt / stride + 1];
    let mut v = prob.init();
    for n in (0..nt).rev() {
        v = prob.advance(n, &v)?;
        if n % stride == 0 {
            ckpt[n / stride] = Some(v.clone());
        }
    }
    let prices = prob.prices(&v);
    let nn = grid.nodes();
    let ny = grid.ny();
    let (j0, a) = grid.y_weights();
    let mut lam = vec![0.0; v.len()];
    let mut y0_bar = 0.0;
    for (c, &wc) in weights.iter().enumerate() {
        let base = c * nn + grid.i0 * ny;
        if grid.two_d {
            lam[base + j0] += wc * (1.0 - a);
            lam[base + j0 + 1] += wc * a;
            y0_bar += wc * (v[base + j0 + 1] - v[base + j0]) / grid.dy;
        } else {
            lam[base] += wc;
        }
    }
    let np = model.params().len();
    let mut grad = vec![0.0; np];
    let n_int = (grid.n_s() - 1) * ny;
    let homogeneous = prob.cached.is_some();
    let mut cbar = vec![[0.0; 4]; n_int];
    let mut rho_bar = 0.0;
    let mut a0 = 0;
    while a0 < nt {
        let b = (a0 + stride).min(nt);
        let top = if b == nt {
            prob.init()
        } else {
            ckpt[b / stride].clone().expect("checkpoint")
        };
        // seg[b - level] holds the state at `level`
        let mut seg = vec![top];
        for n in ((a0 + 1)..b).rev() {
            let nv = prob.advance(n, seg.last().expect("segment"))?;
            seg.push(nv);
        }
        for n in a0..b {
            let next = &seg[b - (n + 1)];
            lam = prob.reverse(n, next, &mut lam, &mut cbar, &mut rho_bar)?;
            if !homogeneous {
                prob.coeff_vjp(grid.time(n + 1), &cbar, &mut grad)?;
                cbar.iter_mut().for_each(|x| *x = [0.0; 4]);
            }
        }
        a0 = b;
    }
    if homogeneous {
        prob.coeff_vjp(0.0, &cbar, &mut grad)?;
    }
    if rho_bar != 0.0 || y0_bar != 0.0 {
        let tape = Tape::new();
        let th = tape.vars(model.params());
        let mut seeds = Vec::new();
        for (x, b) in [(model.rho(&th), rho_bar), (model.y0(&th), y0_bar)] {
            if b != 0.0 && !x.is_constant() {
                seeds.push((x, b));
            }
        }
        let adj = tape.adjoints(&seeds);
        for (o, v) in grad.iter_mut().zip(&th) {
            *o += v.node().map_or(0.0, |k| adj[k]);
        }
    }
    Ok(PdeVjp { prices, vjp: grad })
}

/// Per-contract loss `ℓ(P^market, P)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `((P − P^m) / scale)²`.
    Mse,
    /// Huber function of `(P − P^m) / scale`.
    Huber { delta: f64 },
    /// `((P − P^m) / P^m)²`.
    RelativeMse,
    /// Identically zero.
    Zero,
}

impl Loss {
    /// `(ℓ, ∂ℓ/∂P)`.
    pub fn eval(&self, market: f64, model: f64, scale: f64) -> Result<(f64, f64)> {
        let d = model - market;
        Ok(match *self {
            Loss::Mse => ((d / scale).powi(2), 2.0 * d / (scale * scale)),
            Loss::Huber { delta } => {
                let z = d / scale;
                if z.abs() <= delta {
                    (0.5 * z * z, z / scale)
                } else {
                    (delta * (z.abs() - 0.5 * delta), delta * z.signum() / scale)
                }
            }
            Loss::RelativeMse => {
                if !(market > 0.0) {
                    return Err(Error::Argument(format!(
                        "relative loss needs a positive market price, got {market}"
                    )));
                }
                ((d / market).powi(2), 2.0 * d / (market * market))
            }
            Loss::Zero => (0.0, 0.0),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PdeObjective {
    pub value: f64,
    pub prices: Vec<f64>,
    pub grad: Vec<f64>,
}

/// `(1/N) Σ_i ℓ(P_i^market, P_i(θ))` and its gradient.
pub fn objective_gradient<M: Sde>(
    model: &M,
    grid: &PdeGrid,
    contracts: &[Contract],
    schedules: &[ExerciseSchedule],
    loss: Loss,
) -> Result<PdeObjective> {
    if contracts.is_empty() {
        return Err(Error::EmptySnapshot);
    }
    // the adjoint weights depend on the prices, so solve once first
    let sol = solve_with(model, grid, contracts, schedules, &[])?;
    let (value, weights) = loss_terms(model, contracts, &sol.prices, loss)?;
    let g = price_vjp(model, grid, contracts, schedules, &weights)?;
    Ok(PdeObjective {
        value,
        prices: g.prices,
        grad: g.vjp,
    })
}

/// Objective value only.
pub fn objective<M: Sde>(
    model: &M,
    grid: &PdeGrid,
    contracts: &[Contract],
    schedules: &[ExerciseSchedule],
    loss: Loss,
) -> Result<f64> {
    let sol = solve_with(model, grid, contracts, schedules, &[])?;
    Ok(loss_terms(model, contracts, &sol.prices, loss)?.0)
}

fn loss_terms<M: Sde>(model: &M, contracts: &[Contract], prices: &[f64], loss: Loss) -> Result<(f64, Vec<f64>)> {
    let n = contracts.len() as f64;
    let scale = model.env().scale;
    let mut value = 0.0;
    let mut w = Vec::with_capacity(contracts.len());
    for (c, &p) in contracts.iter().zip(prices) {
        let (l, dl) = loss.eval(c.market_price, p, scale)?;
        value += l / n;
        w.push(dl / n);
    }
    Ok((value, w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdeCalibConfig {
    pub grid: PdeConfig,
    pub loss: Loss,
    pub lr: LrSchedule,
    pub max_iters: usize,
    pub optimizer: Optimizer,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    /// Exercise schedule applied to every contract; contract styles when unset.
    pub schedule: Option<ExerciseSchedule>,
}

impl Default for PdeCalibConfig {
    fn default() -> Self {
        PdeCalibConfig {
            grid: PdeConfig::default(),
            loss: Loss::Mse,
            lr: LrSchedule::constant(1e-2),
            max_iters: 500,
            optimizer: Optimizer::default(),
            plateau_window: 200,
            plateau_rel_tol: 1e-5,
            schedule: None,
        }
    }
}

/// Gradient descent on the PDE objective. The grid is rebuilt from the
/// current parameters every iteration so the stability bound keeps holding.
pub fn calibrate_pde<M: Sde>(model: &mut M, snapshot: &MarketSnapshot, config: &PdeCalibConfig) -> Result<Calibration> {
    calibrate_pde_with(model, &snapshot.contracts, config, |_| {})
}

pub fn calibrate_pde_with<M: Sde>(
    model: &mut M,
    contracts: &[Contract],
    config: &PdeCalibConfig,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<Calibration> {
    config.lr.validate()?;
    if contracts.is_empty() {
        return Err(Error::EmptySnapshot);
    }
    let schedules: Vec<ExerciseSchedule> = match &config.schedule {
        Some(s) => vec![s.clone(); contracts.len()],
        None => contracts
            .iter()
            .map(ExerciseSchedule::for_contract)
            .collect::<Result<_>>()?,
    };
    let mut params = model.params().to_vec();
    let mut opt = OptState::new(config.optimizer, params.len());
    let mut plateau = Plateau::new(config.plateau_window, config.plateau_rel_tol);
    let mut history = Vec::new();
    let mut stop = StopReason::MaxIters;
    for k in 0..config.max_iters {
        let diverged = |reason: String| Error::Divergence { iteration: k, reason };
        let grid = PdeGrid::build(model, contracts, &config.grid)?;
        let obj = objective_gradient(model, &grid, contracts, &schedules, config.loss).map_err(|e| match e {
            Error::Unstable { step } => diverged(format!("solver unstable at step {step}")),
            other => other,
        })?;
        if !obj.value.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged("objective is not finite".into()));
        }
        let lr = config.lr.at(k);
        let rec = IterRecord {
            iter: k,
            train_mse: obj.value,
            grad_norm: l2_norm(&obj.grad),
            lr,
        };
        on_iter(&rec);
        history.push(rec);
        if plateau.update(obj.value) {
            stop = StopReason::Converged;
            break;
        }
        opt.step(&mut params, &obj.grad, lr);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged("parameter update is not finite".into()));
        }
        model.set_params(&params)?;
    }
    Ok(Calibration { params, history, stop })
}

/// Writes `contract_id,t,S,Y,value` slices of a fresh solve.
pub fn dump_solution<M: Sde>(
    model: &M,
    grid: &PdeGrid,
    contracts: &[Contract],
    times: &[f64],
    path: &Path,
) -> Result<PdeSolution> {
    let sched = contracts
        .iter()
        .map(ExerciseSchedule::for_contract)
        .collect::<Result<Vec<_>>>()?;
    let sol = solve_with(model, grid, contracts, &sched, times)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    sol.dump_slices(path)?;
    Ok(sol)
}

/// Writes the `t = 0` prices as `id,price` rows.
pub fn write_prices(sol: &PdeSolution, mut out: impl Write) -> Result<()> {
    writeln!(out, "id,price").map_err(|e| Error::io("<prices>", e))?;
    for (id, p) in sol.ids.iter().zip(&sol.prices) {
        writeln!(out, "{id},{p}").map_err(|e| Error::io("<prices>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::OptionKind;
    use crate::models::{bs_price, BsInputs, Coeffs, MarketEnv, SdeModel};

    fn bs_model(sigma: f64, r: f64) -> SdeModel {
        SdeModel::black_scholes(MarketEnv::new(100.0, r, 0.0), sigma).unwrap()
    }

    fn grid_for(m: &SdeModel, cs: &[Contract], n_s: usize) -> PdeGrid {
        let cfg = PdeConfig {
            n_s,
            s_max: Some(400.0),
            ..Default::default()
        };
        PdeGrid::build(m, cs, &cfg).unwrap()
    }

    #[test]
    fn s0_is_on_a_node() {
        let m = bs_model(0.2, 0.0);
        let cs = [Contract::european(Payoff::call(100.0), 1.0, 0.0)];
        let g = PdeGrid::build(
            &m,
            &cs,
            &PdeConfig {
                n_s: 37,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((g.s[g.i0] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_payoff_gives_zero_solution() {
        let m = bs_model(0.2, 0.05);
        let cs = [Contract::european(Payoff::call(1e9), 0.5, 0.0)];
        let g = grid_for(&m, &cs, 50);
        let sol = solve_european(&m, &g, &cs).unwrap();
        assert!(sol.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bs_call_matches_closed_form() {
        let m = bs_model(0.2, 0.05);
        let cs = [Contract::european(Payoff::call(100.0), 1.0, 0.0)];
        let g = grid_for(&m, &cs, 200);
        let p = solve_european(&m, &g, &cs).unwrap().prices[0];
        let exact = bs_price(&BsInputs::new(100.0, 100.0, 1.0, 0.05, 0.0), 0.2, OptionKind::Call).unwrap();
        assert!((p / exact - 1.0).abs() < 5e-3, "{p} vs {exact}");
    }

    #[test]
    fn boundary_rows() {
        let m = bs_model(0.2, 0.05);
        let cs = [
            Contract::european(Payoff::call(100.0), 1.0, 0.0),
            Contract::european(Payoff::put(100.0), 1.0, 0.0),
        ];
        let g = grid_for(&m, &cs, 100);
        let sol = solve_european(&m, &g, &cs).unwrap();
        assert_eq!(sol.value(0, 0, 0), 0.0);
        let disc = 100.0 * (-0.05f64 * g.time(g.n_t)).exp();
        assert!((sol.value(1, 0, 0) - disc).abs() < 1e-12);
        let far = g.s[g.n_s()] - 100.0 * (-0.05f64).exp();
        assert!((sol.value(0, g.n_s(), 0) / far - 1.0).abs() < 5e-3);
    }

    #[test]
    fn batched_equals_single() {
        let m = bs_model(0.25, 0.03);
        let cs = vec![
            Contract::european(Payoff::call(90.0), 0.5, 0.0),
            Contract::european(Payoff::put(110.0), 1.0, 0.0),
            Contract::new(Payoff::put(100.0), 1.0, ExerciseStyle::American, 0.0),
        ];
        let g = grid_for(&m, &cs, 80);
        let all = solve(&m, &g, &cs).unwrap();
        for (i, c) in cs.iter().enumerate() {
            let one = solve(&m, &g, std::slice::from_ref(c)).unwrap();
            assert_eq!(one.prices[0].to_bits(), all.prices[i].to_bits());
        }
    }

    #[test]
    fn american_dominates_european_dominates_intrinsic() {
        let m = bs_model(0.2, 0.05);
        let e = Contract::european(Payoff::put(100.0), 1.0, 0.0);
        let g = grid_for(&m, std::slice::from_ref(&e), 100);
        let eu = solve_european(&m, &g, std::slice::from_ref(&e)).unwrap();
        let am = solve_bermudan(&m, &g, std::slice::from_ref(&e), &ExerciseSchedule::EveryStep).unwrap();
        let none = solve_bermudan(&m, &g, std::slice::from_ref(&e), &ExerciseSchedule::none()).unwrap();
        assert_eq!(none.values, eu.values);
        for i in 0..g.s.len() {
            let intrinsic = (100.0 - g.s[i]).max(0.0);
            assert!(am.value(0, i, 0) >= eu.value(0, i, 0) - 1e-12);
            assert!(am.value(0, i, 0) >= intrinsic - 1e-12);
        }
    }

    #[test]
    fn fixed_steps_above_bound_are_rejected() {
        let m = bs_model(0.2, 0.05);
        let cs = [Contract::european(Payoff::call(100.0), 1.0, 0.0)];
        let cfg = PdeConfig {
            n_s: 400,
            s_max: Some(400.0),
            time: TimeSteps::Fixed { steps: 365 },
            ..Default::default()
        };
        assert!(matches!(PdeGrid::build(&m, &cs, &cfg), Err(Error::GridConfig(_))));
    }

    #[test]
    fn loss_derivatives() {
        for loss in [Loss::Mse, Loss::Huber { delta: 0.01 }, Loss::RelativeMse] {
            for p in [9.0, 10.5, 12.0] {
                let h = 1e-6;
                let (_, d) = loss.eval(10.0, p, 100.0).unwrap();
                let fd =
                    (loss.eval(10.0, p + h, 100.0).unwrap().0 - loss.eval(10.0, p - h, 100.0).unwrap().0) / (2.0 * h);
                assert!((d - fd).abs() <= 1e-6 * fd.abs().max(1e-6), "{loss:?} {d} {fd}");
            }
        }
    }

    /// Smooth 1-D local volatility with three parameters.
    struct Poly {
        env: MarketEnv,
        th: Vec<f64>,
    }

    impl Sde for Poly {
        fn dim(&self) -> usize {
            1
        }
        fn env(&self) -> &MarketEnv {
            &self.env
        }
        fn params(&self) -> &[f64] {
            &self.th
        }
        fn set_params(&mut self, v: &[f64]) -> Result<()> {
            self.th = v.to_vec();
            Ok(())
        }
        fn coeffs<R: Real>(&self, th: &[R], s: R, _y: R, t: f64) -> Result<Coeffs<R>> {
            let x = s * (1.0 / self.env.scale) - 1.0;
            let vol = th[0] + th[1] * x + th[2] * x * x + th[0] * t * 0.1;
            Ok(Coeffs::one_dim(s * self.env.rate, vol * s))
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let m = Poly {
            env: MarketEnv::new(100.0, 0.02, 0.0),
            th: vec![0.2, -0.05, 0.04],
        };
        let cs = vec![
            Contract::european(Payoff::call(95.0), 0.1, 9.0),
            Contract::new(Payoff::put(105.0), 0.2, ExerciseStyle::American, 7.0),
        ];
        let cfg = PdeConfig {
            n_s: 40,
            s_max: Some(300.0),
            time: TimeSteps::Fixed { steps: 100 },
            ..Default::default()
        };
        let g = PdeGrid::build(&m, &cs, &cfg).unwrap();
        let sched: Vec<_> = cs.iter().map(|c| ExerciseSchedule::for_contract(c).unwrap()).collect();
        let obj = objective_gradient(&m, &g, &cs, &sched, Loss::Mse).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut up = Poly {
                env: m.env,
                th: m.th.clone(),
            };
            up.th[i] += h;
            let mut dn = Poly {
                env: m.env,
                th: m.th.clone(),
            };
            dn.th[i] -= h;
            let fd = (objective(&up, &g, &cs, &sched, Loss::Mse).unwrap()
                - objective(&dn, &g, &cs, &sched, Loss::Mse).unwrap())
                / (2.0 * h);
            assert!(
                (obj.grad[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-8),
                "{i}: {} vs {fd}",
                obj.grad[i]
            );
        }
    }

    #[test]
    fn zero_loss_leaves_parameters() {
        let mut m = bs_model(0.3, 0.0);
        let cs = vec![Contract::european(Payoff::call(100.0), 0.25, 5.0)];
        let snap = MarketSnapshot::new(chrono::NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(), 100.0, 0.0, 0.0)
            .with_contracts(cs);
        let cfg = PdeCalibConfig {
            loss: Loss::Zero,
            max_iters: 3,
            grid: PdeConfig {
                n_s: 40,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = calibrate_pde(&mut m, &snap, &cfg).unwrap();
        assert_eq!(out.params, vec![0.3]);
    }

    #[test]
    fn slices_are_dumped() {
        let m = bs_model(0.2, 0.0);
        let cs = vec![Contract::european(Payoff::call(100.0), 0.5, 0.0)];
        let g = grid_for(&m, &cs, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slices.csv");
        dump_solution(&m, &g, &cs, &[0.25], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("contract_id,t,S,Y,value\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 21);
    }
}
