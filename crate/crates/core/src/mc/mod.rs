//! Euler-Maruyama simulation and Monte Carlo pricing of European claims.
//!
//! All contracts of a request are priced on the same set of paths. Sums over
//! paths are formed per fixed-size chunk and then combined in a pairwise
//! tree, so results do not depend on the number of worker threads.

pub mod rng;

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Contract, ExerciseStyle, MarketSnapshot, OptionKind};
use crate::models::{Coeffs, Sde};
use crate::net::{Real, Tape, Var};
pub use rng::{mix_seed, path_draws, PathRng};

/// Paths per chunk for plain simulation; also the unit of the deterministic
/// reduction tree.
pub const SIM_CHUNK: usize = 1024;

/// Tape edges one gradient chunk may record before it is swept.
pub const TAPE_EDGE_BUDGET: usize = 4_000_000;

/// A European claim priced by simulation.
pub trait Claim: Sync {
    fn maturity(&self) -> f64;
    fn payoff(&self, s: f64) -> f64;
    /// Derivative of the payoff in `s` (right-continuous choice at kinks).
    fn payoff_slope(&self, s: f64) -> f64;
    fn market_price(&self) -> f64;
    fn is_european(&self) -> bool {
        true
    }
    fn label(&self) -> String {
        String::new()
    }
}

impl Claim for Contract {
    fn maturity(&self) -> f64 {
        self.maturity
    }

    fn payoff(&self, s: f64) -> f64 {
        self.payoff.eval(s)
    }

    fn payoff_slope(&self, s: f64) -> f64 {
        let k = self.payoff.strike;
        match self.payoff.kind {
            OptionKind::Call => (s > k) as u8 as f64,
            OptionKind::Put => -((s < k) as u8 as f64),
        }
    }

    fn market_price(&self) -> f64 {
        self.market_price
    }

    fn is_european(&self) -> bool {
        self.style == ExerciseStyle::European
    }

    fn label(&self) -> String {
        self.id.clone()
    }
}

/// Uniform time grid `0, Δt, …, MΔt = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::Argument(format!(
                "time grid needs T > 0 and M >= 1, got T={horizon}, M={steps}"
            )));
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Grid with step `1/steps_per_year` reaching the latest maturity; every
    /// maturity then snaps to its nearest node.
    pub fn for_claims<C: Claim>(claims: &[C], steps_per_year: f64) -> Result<Self> {
        let t_max = claims.iter().map(|c| c.maturity()).fold(0.0, f64::max);
        if !(steps_per_year > 0.0) || !(t_max > 0.0) {
            return Err(Error::Argument("grid needs positive maturities and step rate".into()));
        }
        let steps = ((t_max * steps_per_year).round() as usize).max(1);
        Self::new(steps as f64 / steps_per_year, steps)
    }

    /// Daily steps (Δt = 1/365).
    pub fn daily<C: Claim>(claims: &[C]) -> Result<Self> {
        Self::for_claims(claims, crate::market::DAYS_PER_YEAR)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// Node nearest to `maturity`.
    pub fn step_of(&self, maturity: f64) -> Result<usize> {
        let n = (maturity / self.dt()).round();
        if !(n >= 1.0) || n > self.steps as f64 {
            return Err(Error::ContractGrid {
                id: String::new(),
                maturity,
                reason: format!("nearest node {n} outside 1..={}", self.steps),
            });
        }
        Ok(n as usize)
    }

    fn claim_steps<C: Claim>(&self, claims: &[C]) -> Result<Vec<usize>> {
        claims
            .iter()
            .map(|c| {
                if !c.is_european() {
                    return Err(Error::Contract(format!(
                        "Monte Carlo pricing handles European claims only (`{}`)",
                        c.label()
                    )));
                }
                self.step_of(c.maturity()).map_err(|e| match e {
                    Error::ContractGrid { maturity, reason, .. } => Error::ContractGrid {
                        id: c.label(),
                        maturity,
                        reason,
                    },
                    other => other,
                })
            })
            .collect()
    }
}

/// Sum in a fixed pairwise tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Element-wise pairwise-tree sum of equally long vectors.
pub fn pairwise_sum_vecs(mut vs: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if vs.is_empty() {
        return vec![0.0; len];
    }
    while vs.len() > 1 {
        let mut next = Vec::with_capacity(vs.len().div_ceil(2));
        let mut it = vs.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        vs = next;
    }
    vs.pop().unwrap()
}

/// Correlation factors `(ρ, √(1 − ρ²))`.
fn corr_factors<R: Real>(rho: R) -> (R, R) {
    let c = R::cst(1.0) - rho * rho;
    let b = if c.value() > 0.0 { c.sqrt() } else { R::cst(0.0) };
    (rho, b)
}

#[inline]
fn euler<R: Real>(s: R, y: R, c: &Coeffs<R>, ab: (R, R), dt: f64, w: f64, zp: f64, two_d: bool) -> (R, R) {
    let sq = dt.sqrt();
    let s_val = s.value() + c.mu_s.value() * dt + c.sigma_s.value() * (sq * w);
    let s_new = R::custom(s_val, &[(s, 1.0), (c.mu_s, dt), (c.sigma_s, sq * w)]);
    if !two_d {
        return (s_new, y);
    }
    let (a, b) = ab;
    let z = a.value() * w + b.value() * zp;
    let sy = c.sigma_y.value() * sq;
    let y_val = y.value() + c.mu_y.value() * dt + sy * z;
    let y_new = R::custom(
        y_val,
        &[(y, 1.0), (c.mu_y, dt), (c.sigma_y, sq * z), (a, sy * w), (b, sy * zp)],
    );
    (s_new, y_new)
}

/// Simulates one path, calling `visit(step, s, y)` at every node.
#[allow(clippy::too_many_arguments)]
fn run_path<R: Real, M: Sde>(
    model: &M,
    th: &[R],
    ab: (R, R),
    y0: R,
    grid: &TimeGrid,
    path: u64,
    rng: &mut PathRng,
    mut visit: impl FnMut(usize, R, R),
) -> Result<()> {
    let dt = grid.dt();
    let two_d = model.dim() == 2;
    let absorbing = model.absorbing_at_zero();
    let mut s = R::cst(model.env().spot);
    let mut y = y0;
    let mut dead = false;
    visit(0, s, y);
    for n in 0..grid.steps {
        let (w, zp) = rng.pair();
        if !dead {
            let c = model.coeffs(th, s, y, grid.time(n))?;
            let (s1, y1) = euler(s, y, &c, ab, dt, w, zp, two_d);
            if !(s1.value().is_finite() && y1.value().is_finite()) {
                return Err(Error::Simulation {
                    path: path as usize,
                    step: n + 1,
                });
            }
            if absorbing && s1.value() <= 0.0 {
                s = R::cst(0.0);
                dead = true;
            } else {
                s = s1;
            }
            y = y1;
        }
        visit(n + 1, s, y);
    }
    Ok(())
}

/// Simulated paths with the state recorded at selected steps.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub seed: u64,
    /// Global path indices (RNG stream ids) of the rows.
    pub paths: Range<u64>,
    /// Recorded step indices, ascending; column `j` of `s`/`y` is step `steps[j]`.
    pub steps: Vec<usize>,
    pub s: Array2<f64>,
    pub y: Option<Array2<f64>>,
    pub rho: f64,
}

impl PathBatch {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }

    pub fn column(&self, step: usize) -> Option<ArrayView1<'_, f64>> {
        self.steps.binary_search(&step).ok().map(|j| self.s.column(j))
    }

    pub fn y_column(&self, step: usize) -> Option<ArrayView1<'_, f64>> {
        let j = self.steps.binary_search(&step).ok()?;
        self.y.as_ref().map(|y| y.column(j))
    }

    /// Driver draws `(W, Z)` of row `row`, regenerated from the key, with
    /// `Z = ρW + √(1 − ρ²) Z⊥`.
    pub fn increments(&self, row: usize) -> Vec<(f64, f64)> {
        let (a, b) = corr_factors(self.rho);
        path_draws(self.seed, self.paths.start + row as u64, self.grid.steps)
            .into_iter()
            .map(|(w, zp)| (w, a * w + b * zp))
            .collect()
    }

    /// Raw binary dump (row-major `(path, recorded step)` f64, little endian)
    /// plus a JSON sidecar `<path>.json`.
    pub fn dump(&self, path: &Path, model_hash: &str) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.s.len() * 8);
        for v in self.s.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = PathDumpMeta {
            grid: self.grid,
            seed: self.seed,
            first_path: self.paths.start,
            paths: self.len(),
            steps: self.steps.clone(),
            model_hash: model_hash.to_string(),
        };
        let side_path = path.with_extension("json");
        let mut f = fs::File::create(&side_path).map_err(|e| Error::io(&side_path, e))?;
        serde_json::to_writer_pretty(&mut f, &side)?;
        f.write_all(b"\n").map_err(|e| Error::io(&side_path, e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathDumpMeta {
    pub grid: TimeGrid,
    pub seed: u64,
    pub first_path: u64,
    pub paths: usize,
    pub steps: Vec<usize>,
    pub model_hash: String,
}

/// Simulates `paths` (global stream ids) and records the listed steps
/// (all steps when `record` is `None`).
pub fn simulate<M: Sde>(
    model: &M,
    grid: &TimeGrid,
    paths: Range<u64>,
    seed: u64,
    record: Option<&[usize]>,
) -> Result<PathBatch> {
    let mut steps: Vec<usize> = match record {
        Some(r) => r.to_vec(),
        None => (0..=grid.steps).collect(),
    };
    steps.sort_unstable();
    steps.dedup();
    if steps.last().is_some_and(|&s| s > grid.steps) {
        return Err(Error::Argument("recorded step beyond the grid".into()));
    }
    let n = (paths.end.saturating_sub(paths.start)) as usize;
    let two_d = model.dim() == 2;
    let th = model.params();
    let ab = corr_factors(model.rho(th));
    let y0 = model.y0(th);
    let ns = steps.len();
    let chunks: Vec<Range<u64>> = chunk_ranges(paths.clone(), SIM_CHUNK);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut srow = Vec::with_capacity(r.clone().count() * ns);
            let mut yrow = Vec::new();
            for p in r.clone() {
                let mut rng = PathRng::new(seed, p);
                let mut j = 0;
                run_path(model, th, ab, y0, grid, p, &mut rng, |k, s, y| {
                    if j < ns && steps[j] == k {
                        srow.push(s);
                        if two_d {
                            yrow.push(y);
                        }
                        j += 1;
                    }
                })?;
            }
            Ok((srow, yrow))
        })
        .collect::<Result<_>>()?;
    let mut s = Vec::with_capacity(n * ns);
    let mut y = Vec::new();
    for (a, b) in rows {
        s.extend(a);
        y.extend(b);
    }
    let s = Array2::from_shape_vec((n, ns), s).expect("row lengths");
    let y = two_d.then(|| Array2::from_shape_vec((n, ns), y).expect("row lengths"));
    Ok(PathBatch {
        grid: *grid,
        seed,
        paths,
        steps,
        s,
        y,
        rho: ab.0,
    })
}

fn chunk_ranges(r: Range<u64>, size: usize) -> Vec<Range<u64>> {
    let mut out = Vec::new();
    let mut a = r.start;
    while a < r.end {
        let b = (a + size as u64).min(r.end);
        out.push(a..b);
        a = b;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McPrice {
    pub price: f64,
    pub stderr: f64,
}

fn finish_prices(sums: &[f64], sq: &[f64], disc: &[f64], n: usize) -> Vec<McPrice> {
    let nf = n as f64;
    sums.iter()
        .zip(sq)
        .zip(disc)
        .map(|((s, q), d)| {
            let mean = s / nf;
            let var = if n > 1 {
                ((q / nf - mean * mean) * nf / (nf - 1.0)).max(0.0)
            } else {
                0.0
            };
            McPrice {
                price: d * mean,
                stderr: d * (var / nf).sqrt(),
            }
        })
        .collect()
}

fn discounts<C: Claim>(claims: &[C], grid: &TimeGrid, steps: &[usize], rate: f64) -> Vec<f64> {
    let _ = claims;
    steps.iter().map(|&n| (-rate * grid.time(n)).exp()).collect()
}

/// Discounted payoff means of every claim on one batch.
pub fn price_european<C: Claim>(batch: &PathBatch, claims: &[C], rate: f64) -> Result<Vec<McPrice>> {
    if batch.is_empty() {
        return Err(Error::Argument("empty path batch".into()));
    }
    let steps = batch.grid.claim_steps(claims)?;
    let cols = steps
        .iter()
        .zip(claims)
        .map(|(&n, c)| {
            batch.column(n).ok_or_else(|| Error::ContractGrid {
                id: c.label(),
                maturity: c.maturity(),
                reason: format!("step {n} was not recorded"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len();
    let mut sums = Vec::with_capacity(claims.len());
    let mut sq = Vec::with_capacity(claims.len());
    for (c, col) in claims.iter().zip(&cols) {
        let (a, b) = chunked_moments(n, |i| c.payoff(col[i]));
        sums.push(a);
        sq.push(b);
    }
    Ok(finish_prices(
        &sums,
        &sq,
        &discounts(claims, &batch.grid, &steps, rate),
        n,
    ))
}

fn chunked_moments(n: usize, f: impl Fn(usize) -> f64) -> (f64, f64) {
    let mut s = Vec::with_capacity(n.div_ceil(SIM_CHUNK));
    let mut q = Vec::with_capacity(n.div_ceil(SIM_CHUNK));
    for a in (0..n).step_by(SIM_CHUNK) {
        let (mut x, mut y) = (0.0, 0.0);
        for i in a..(a + SIM_CHUNK).min(n) {
            let v = f(i);
            x += v;
            y += v * v;
        }
        s.push(x);
        q.push(y);
    }
    (pairwise_sum(&s), pairwise_sum(&q))
}

/// Streams paths and prices every claim without storing the paths.
pub fn mc_prices<M: Sde, C: Claim>(
    model: &M,
    grid: &TimeGrid,
    claims: &[C],
    paths: Range<u64>,
    seed: u64,
) -> Result<Vec<McPrice>> {
    let steps = grid.claim_steps(claims)?;
    let n = (paths.end.saturating_sub(paths.start)) as usize;
    if n == 0 {
        return Err(Error::Argument("need at least one path".into()));
    }
    let nc = claims.len();
    let th = model.params();
    let ab = corr_factors(model.rho(th));
    let y0 = model.y0(th);
    let parts: Vec<Vec<f64>> = chunk_ranges(paths, SIM_CHUNK)
        .par_iter()
        .map(|r| -> Result<Vec<f64>> {
            // [sums..., squares...]
            let mut acc = vec![0.0; 2 * nc];
            let mut at_step = vec![0.0; grid.steps + 1];
            for p in r.clone() {
                let mut rng = PathRng::new(seed, p);
                run_path(model, th, ab, y0, grid, p, &mut rng, |k, s, _| at_step[k] = s)?;
                for (i, c) in claims.iter().enumerate() {
                    let v = c.payoff(at_step[steps[i]]);
                    acc[i] += v;
                    acc[nc + i] += v * v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let acc = pairwise_sum_vecs(parts, 2 * nc);
    let disc = discounts(claims, grid, &steps, model.env().rate);
    Ok(finish_prices(&acc[..nc], &acc[nc..], &disc, n))
}

/// Mean squared pricing error over the snapshot on one simulated batch.
pub fn objective_mse<M: Sde>(
    model: &M,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    snapshot: &MarketSnapshot,
) -> Result<f64> {
    if snapshot.is_empty() {
        return Err(Error::EmptySnapshot);
    }
    let prices = mc_prices(model, grid, &snapshot.contracts, 0..paths as u64, seed)?;
    let errs: Vec<f64> = snapshot
        .contracts
        .iter()
        .zip(&prices)
        .map(|(c, p)| (c.market_price - p.price).powi(2))
        .collect();
    Ok(pairwise_sum(&errs) / errs.len() as f64)
}

/// Simulates paths on a tape; returns the price state at every step of
/// every path. Intended for small batches and cross-checks.
pub fn simulate_taped<'t, M: Sde>(
    model: &M,
    th: &[Var<'t>],
    grid: &TimeGrid,
    paths: Range<u64>,
    seed: u64,
) -> Result<Vec<Vec<Var<'t>>>> {
    let ab = corr_factors(model.rho(th));
    let y0 = model.y0(th);
    paths
        .map(|p| {
            let mut rng = PathRng::new(seed, p);
            let mut out = Vec::with_capacity(grid.steps + 1);
            run_path(model, th, ab, y0, grid, p, &mut rng, |_, s, _| out.push(s))?;
            Ok(out)
        })
        .collect()
}

/// Prices and the weighted parameter gradient `Σ_i w_i ∇_θ P_i` on one batch.
#[derive(Clone, Debug)]
pub struct PricedGradient {
    pub prices: Vec<McPrice>,
    pub vjp: Vec<f64>,
}

/// Reverse-mode gradient of `Σ_i weights[i]·P_i(θ)` through the Euler
/// scheme. Paths are processed in chunks, each recorded on its own tape and
/// swept once; chunk results are combined pairwise.
pub fn price_vjp<M: Sde, C: Claim>(
    model: &M,
    grid: &TimeGrid,
    claims: &[C],
    paths: Range<u64>,
    seed: u64,
    weights: &[f64],
) -> Result<PricedGradient> {
    if weights.len() != claims.len() {
        return Err(Error::InputShape {
            expected: claims.len(),
            got: weights.len(),
        });
    }
    let steps = grid.claim_steps(claims)?;
    let n = (paths.end.saturating_sub(paths.start)) as usize;
    if n == 0 {
        return Err(Error::Argument("need at least one path".into()));
    }
    let nc = claims.len();
    let np = model.params().len();
    let disc = discounts(claims, grid, &steps, model.env().rate);
    // claims maturing at each step
    let mut by_step: Vec<Vec<usize>> = vec![Vec::new(); grid.steps + 1];
    for (i, &k) in steps.iter().enumerate() {
        by_step[k].push(i);
    }
    let chunk = gradient_chunk(model, grid)?;
    let parts: Vec<Vec<f64>> = chunk_ranges(paths, chunk)
        .par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let tape = Tape::new();
            let th = tape.vars(model.params());
            let ab = corr_factors(model.rho(&th));
            let y0 = model.y0(&th);
            // [vjp (np), sums (nc), squares (nc)]
            let mut acc = vec![0.0; np + 2 * nc];
            let mut seeds: Vec<(Var<'_>, f64)> = Vec::new();
            for p in r.clone() {
                let mut rng = PathRng::new(seed, p);
                run_path(model, &th, ab, y0, grid, p, &mut rng, |k, s, _| {
                    let mut wsum = 0.0;
                    for &i in &by_step[k] {
                        let sv = s.value();
                        let v = claims[i].payoff(sv);
                        acc[np + i] += v;
                        acc[np + nc + i] += v * v;
                        wsum += weights[i] * disc[i] * claims[i].payoff_slope(sv);
                    }
                    if wsum != 0.0 && !s.is_constant() {
                        seeds.push((s, wsum / n as f64));
                    }
                })?;
            }
            let adj = tape.adjoints(&seeds);
            for (g, v) in acc[..np].iter_mut().zip(&th) {
                *g = v.node().map_or(0.0, |k| adj[k]);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let acc = pairwise_sum_vecs(parts, np + 2 * nc);
    Ok(PricedGradient {
        prices: finish_prices(&acc[np..np + nc], &acc[np + nc..], &disc, n),
        vjp: acc[..np].to_vec(),
    })
}

/// Paths per gradient chunk so that one chunk's tape stays within
/// [`TAPE_EDGE_BUDGET`]. A taped coefficient evaluation records about two
/// edges per parameter (each weight enters one product and one sum) plus a
/// fixed overhead for the state update.
fn gradient_chunk<M: Sde>(model: &M, grid: &TimeGrid) -> Result<usize> {
    let per_step = 2 * model.params().len() + 64;
    let per_path = per_step * grid.steps.max(1);
    Ok((TAPE_EDGE_BUDGET / per_path).clamp(1, 256))
}
