//! Experiment harness: the six train/test protocols, per-contract error
//! reports with grouped aggregates, and synthetic market generators.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{
    filter_strikes, split_pairs, Contract, ExerciseStyle, MarketSnapshot, OptionKind, Payoff, StrikeSide, DAYS_PER_YEAR,
};
use crate::mc::{mc_prices, mix_seed, PathRng, TimeGrid};
use crate::models::dupire::monotone_cubic;
use crate::models::{
    bs_implied_vol, bs_price, inv_softplus, nnlv_fit, BsInputs, HestonParams, MarketEnv, NnlvConfig, Sde, SdeModel,
    VolSurface,
};
use crate::net::Mlp;
use crate::optim::StopReason;
use crate::pde::{calibrate_pde, solve, PdeCalibConfig, PdeConfig, PdeGrid};
use crate::sgd::{calibrate, Calibration, SgdConfig};

pub const REPORT_FORMAT: &str = "nsde-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Random call/put-pair split of the first day.
    IntradaySplit { train_fraction: f64 },
    /// Train on the first day, test on the second.
    NextDay,
    /// Train on calls, test on puts of the first day.
    CrossPayoff,
    /// Train on strikes at or below `threshold`, test above it.
    StrikeExtrapolation { threshold: f64 },
    /// Warm-started daily recalibration over `window` days against a model
    /// frozen after the first day.
    Recalibration { window: usize },
    /// Train on European contracts, test on American ones.
    EuropeanToAmerican,
}

impl ExperimentKind {
    pub fn slug(&self) -> &'static str {
        match self {
            ExperimentKind::IntradaySplit { .. } => "intraday_split",
            ExperimentKind::NextDay => "next_day",
            ExperimentKind::CrossPayoff => "cross_payoff",
            ExperimentKind::StrikeExtrapolation { .. } => "strike_extrapolation",
            ExperimentKind::Recalibration { .. } => "recalibration",
            ExperimentKind::EuropeanToAmerican => "european_to_american",
        }
    }
}

/// Model family plus whatever its initialization needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelChoice {
    Bs {
        sigma: f64,
    },
    /// Local vol from the training contracts' implied vols; not trained further.
    DupireLv,
    Heston {
        params: HestonParams,
    },
    /// Call-surface network fit; not trained further.
    Nnlv {
        fit: NnlvConfig,
    },
    /// Call-surface fit as initialization, then trained by the engine.
    Sdenn {
        fit: NnlvConfig,
    },
    SdennDrift {
        fit: NnlvConfig,
        drift_hidden: Vec<usize>,
    },
    TwoDnn {
        hidden: Vec<usize>,
        rho: f64,
        y0: f64,
        /// Volatility the output layer starts at.
        init_vol: f64,
    },
    TwoDnnHeston {
        hidden: Vec<usize>,
        heston: HestonParams,
        init_vol: f64,
    },
}

impl ModelChoice {
    /// Whether the engine calibrates the model after construction.
    pub fn trainable(&self) -> bool {
        !matches!(self, ModelChoice::DupireLv | ModelChoice::Nnlv { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    MonteCarloSgd {
        #[serde(default)]
        sgd: SgdConfig,
        #[serde(default = "daily")]
        steps_per_year: f64,
        /// Paths used to price the evaluation contracts.
        #[serde(default = "default_eval_paths")]
        eval_paths: u64,
    },
    Pde {
        #[serde(default)]
        calib: PdeCalibConfig,
    },
}

fn daily() -> f64 {
    DAYS_PER_YEAR
}

fn default_eval_paths() -> u64 {
    100_000
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::MonteCarloSgd { .. } => "monte_carlo_sgd",
            Engine::Pde { .. } => "pde",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Mae,
    RelMae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub kind: ExperimentKind,
    pub model: ModelChoice,
    pub engine: Engine,
    pub seed: u64,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
}

pub fn all_metrics() -> Vec<Metric> {
    vec![Metric::Mse, Metric::Mae, Metric::RelMae]
}

/// Error of one contract under one fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub split: String,
    pub day: NaiveDate,
    pub kind: OptionKind,
    pub style: ExerciseStyle,
    pub strike: f64,
    pub maturity: f64,
    pub market: f64,
    pub model: f64,
    pub abs_err: f64,
    pub sq_err: f64,
    /// `100·|model − market|/market`; absent when the market price is not positive.
    pub rel_err: Option<f64>,
    /// Engine error scale of `model`: 3 MC standard errors, or the gap to a
    /// half-resolution PDE solve.
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Split,
    Kind,
    Day,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `None` means all values of that field were pooled.
    pub split: Option<String>,
    pub kind: Option<OptionKind>,
    pub day: Option<NaiveDate>,
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    /// Over the rows with a relative error; `None` if there are none.
    pub rel_mae: Option<f64>,
    /// Mean squared noise of the group's rows.
    pub noise_floor_mse: f64,
}

/// Simple average of per-day aggregates, per (split, kind).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayAverage {
    pub split: String,
    pub kind: Option<OptionKind>,
    pub days: usize,
    pub mse: f64,
    pub mae: f64,
    pub rel_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamHash {
    pub role: String,
    pub day: NaiveDate,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub role: String,
    pub day: NaiveDate,
    pub contracts: usize,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub final_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub experiment: Experiment,
    pub model_name: String,
    pub engine: String,
    pub days: Vec<NaiveDate>,
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<AggregateRow>,
    pub day_averages: Vec<DayAverage>,
    pub training: Vec<TrainRecord>,
    /// Parameter fingerprint of the model used for every evaluated (role, day).
    pub param_hashes: Vec<ParamHash>,
}

impl EvalReport {
    pub fn rows_of<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a EvalRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Aggregate of one split over every kind and day.
    pub fn split_summary(&self, split: &str) -> Option<AggregateRow> {
        let rows: Vec<&EvalRow> = self.rows_of(split).collect();
        summarize(&rows).map(|mut a| {
            a.split = Some(split.to_string());
            a
        })
    }

    /// Base name `{kind}_{first date}_{seed}` of the output files.
    pub fn stem(&self) -> String {
        let date = self
            .days
            .first()
            .map(|d| d.format("%Y-%m-%d").to_string())
            .unwrap_or_default();
        format!("{}_{}_{}", self.experiment.kind.slug(), date, self.experiment.seed)
    }
}

fn summarize(rows: &[&EvalRow]) -> Option<AggregateRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let rel: Vec<f64> = rows.iter().filter_map(|r| r.rel_err).collect();
    Some(AggregateRow {
        split: None,
        kind: None,
        day: None,
        n: rows.len(),
        mse: rows.iter().map(|r| r.sq_err).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.abs_err).sum::<f64>() / n,
        rel_mae: (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64),
        noise_floor_mse: rows.iter().map(|r| r.noise * r.noise).sum::<f64>() / n,
    })
}

/// Grouped means of the three metrics, one row per group present in the
/// rows, followed by an overall row. Groups with no rows are omitted.
pub fn aggregate(rows: &[EvalRow], group_by: &[GroupBy]) -> Vec<AggregateRow> {
    type Key = (Option<String>, Option<OptionKind>, Option<NaiveDate>);
    let key = |r: &EvalRow| -> Key {
        (
            group_by.contains(&GroupBy::Split).then(|| r.split.clone()),
            group_by.contains(&GroupBy::Kind).then_some(r.kind),
            group_by.contains(&GroupBy::Day).then_some(r.day),
        )
    };
    let mut groups: BTreeMap<Key, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    let mut out = Vec::new();
    if !group_by.is_empty() {
        for ((split, kind, day), members) in groups {
            let mut a = summarize(&members).expect("groups are built from rows");
            a.split = split;
            a.kind = kind;
            a.day = day;
            out.push(a);
        }
    }
    match summarize(&rows.iter().collect::<Vec<_>>()) {
        Some(all) => out.push(all),
        None => log::warn!("no evaluation rows to aggregate"),
    }
    out
}

/// Per-day aggregates of each (split, kind), averaged with equal day weights.
pub fn day_averages(rows: &[EvalRow]) -> Vec<DayAverage> {
    let per_day = aggregate(rows, &[GroupBy::Split, GroupBy::Kind, GroupBy::Day]);
    let per_day_pooled = aggregate(rows, &[GroupBy::Split, GroupBy::Day]);
    let mut acc: BTreeMap<(String, Option<OptionKind>), Vec<&AggregateRow>> = BTreeMap::new();
    for a in per_day.iter().chain(&per_day_pooled) {
        if let (Some(s), Some(_)) = (&a.split, a.day) {
            acc.entry((s.clone(), a.kind)).or_default().push(a);
        }
    }
    acc.into_iter()
        .map(|((split, kind), days)| {
            let n = days.len() as f64;
            let rel: Vec<f64> = days.iter().filter_map(|d| d.rel_mae).collect();
            DayAverage {
                split,
                kind,
                days: days.len(),
                mse: days.iter().map(|d| d.mse).sum::<f64>() / n,
                mae: days.iter().map(|d| d.mae).sum::<f64>() / n,
                rel_mae: (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64),
            }
        })
        .collect()
}

/// Call targets `(K, T, C)` from European calls and parity-converted puts.
pub fn call_targets(snap: &MarketSnapshot) -> Vec<(f64, f64, f64)> {
    snap.contracts
        .iter()
        .filter(|c| c.style == ExerciseStyle::European)
        .map(|c| {
            let (k, t) = (c.strike(), c.maturity);
            let p = match c.kind() {
                OptionKind::Call => c.market_price,
                OptionKind::Put => c.market_price + snap.spot * (-snap.dividend * t).exp() - k * (-snap.rate * t).exp(),
            };
            (k, t, p)
        })
        .collect()
}

/// Implied-vol surface of the European contracts. Maturities quoted at fewer
/// than two strikes are dropped; each row is interpolated onto the union of
/// strikes; a call and a put at the same node are averaged.
pub fn implied_surface(snap: &MarketSnapshot) -> Result<VolSurface> {
    let mut by_t: BTreeMap<i64, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for c in snap.contracts.iter().filter(|c| c.style == ExerciseStyle::European) {
        let x = BsInputs::new(snap.spot, c.strike(), c.maturity, snap.rate, snap.dividend);
        match bs_implied_vol(c.market_price, &x, c.kind()) {
            Ok(v) => by_t
                .entry(c.maturity_days())
                .or_default()
                .entry(c.strike().to_bits())
                .or_default()
                .push(v),
            Err(e) => log::warn!("`{}` skipped in the implied-vol surface: {e}", c.id),
        }
    }
    by_t.retain(|_, row| row.len() >= 2);
    if by_t.is_empty() {
        return Err(Error::Experiment(
            "no maturity has implied vols at two or more strikes".into(),
        ));
    }
    let mut strikes: Vec<f64> = by_t
        .values()
        .flat_map(|r| r.keys().map(|b| f64::from_bits(*b)))
        .collect();
    strikes.sort_by(f64::total_cmp);
    strikes.dedup();
    let maturities: Vec<f64> = by_t.keys().map(|d| *d as f64 / DAYS_PER_YEAR).collect();
    let vols = by_t
        .values()
        .map(|row| {
            let mut pts: Vec<(f64, f64)> = row
                .iter()
                .map(|(k, v)| (f64::from_bits(*k), v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (ks, vs): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            strikes.iter().map(|&k| monotone_cubic(&ks, &vs, k)).collect()
        })
        .collect();
    VolSurface::new(snap.spot, snap.rate, snap.dividend, strikes, maturities, vols)
}

/// Scales the output weights by 0.1 and sets the output biases.
fn shrink_output(net: &Mlp, params: &mut [f64], biases: &[f64]) {
    let (w, b) = net.layer_ranges(net.n_layers() - 1);
    for v in &mut params[w] {
        *v *= 0.1;
    }
    params[b].copy_from_slice(biases);
}

fn net_dims(input: usize, hidden: &[usize], output: usize) -> Result<Mlp> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    Mlp::new(dims)
}

/// Builds the initial model for `choice` on the training snapshot.
pub fn build_model(choice: &ModelChoice, train: &MarketSnapshot, seed: u64) -> Result<SdeModel> {
    let env = MarketEnv::from_snapshot(train);
    let call_fit = |fit: &NnlvConfig| {
        let targets = call_targets(train);
        if targets.is_empty() {
            return Err(Error::Experiment(
                "the call-surface fit needs European training contracts".into(),
            ));
        }
        let cfg = NnlvConfig {
            scale: env.scale,
            ..fit.clone()
        };
        nnlv_fit(&targets, &cfg)
    };
    match choice {
        ModelChoice::Bs { sigma } => SdeModel::black_scholes(env, *sigma),
        ModelChoice::DupireLv => SdeModel::dupire_lv(env, implied_surface(train)?),
        ModelChoice::Heston { params } => SdeModel::heston(env, *params),
        ModelChoice::Nnlv { fit } => {
            let f = call_fit(fit)?;
            SdeModel::nnlv(env, f.net, &f.params)
        }
        ModelChoice::Sdenn { fit } => {
            let f = call_fit(fit)?;
            SdeModel::sdenn(env, f.net, &f.params)
        }
        ModelChoice::SdennDrift { fit, drift_hidden } => {
            let f = call_fit(fit)?;
            let drift = net_dims(2, drift_hidden, 1)?;
            let mut dv = drift.init_params(mix_seed(seed, 1));
            shrink_output(&drift, &mut dv, &[env.rate - env.dividend]);
            SdeModel::sdenn_drift(env, drift, &dv, f.net, &f.params)
        }
        ModelChoice::TwoDnn {
            hidden,
            rho,
            y0,
            init_vol,
        } => {
            let net = net_dims(3, hidden, 4)?;
            let mut v = net.init_params(mix_seed(seed, 2));
            shrink_output(&net, &mut v, &[0.0, inv_softplus(*init_vol), 0.0, inv_softplus(0.3)]);
            SdeModel::two_dnn(env, net, &v, *rho, *y0)
        }
        ModelChoice::TwoDnnHeston {
            hidden,
            heston,
            init_vol,
        } => {
            let net = net_dims(3, hidden, 2)?;
            let mut v = net.init_params(mix_seed(seed, 3));
            shrink_output(&net, &mut v, &[env.rate - env.dividend, inv_softplus(*init_vol)]);
            SdeModel::two_dnn_heston(env, net, &v, *heston)
        }
    }
}

/// The model's environment moved to another day's spot and rates; the
/// network normalizations stay those of the training day.
pub fn move_to(model: SdeModel, snap: &MarketSnapshot) -> Result<SdeModel> {
    let env = MarketEnv {
        spot: snap.spot,
        rate: snap.rate,
        dividend: snap.dividend,
        ..*model.env()
    };
    model.with_env(env)
}

struct Fitted {
    model: SdeModel,
    record: TrainRecord,
}

/// Moves `model` to the snapshot's market and calibrates it with `engine`
/// (a no-op for models that are not trained). `seed` keys the Monte Carlo
/// streams.
pub fn fit_model(
    choice: &ModelChoice,
    engine: &Engine,
    model: SdeModel,
    snap: &MarketSnapshot,
    seed: u64,
) -> Result<(SdeModel, Option<Calibration>)> {
    let mut model = move_to(model, snap)?;
    if !choice.trainable() || model.param_vector().is_empty() {
        return Ok((model, None));
    }
    let cal = match engine {
        Engine::MonteCarloSgd {
            sgd, steps_per_year, ..
        } => {
            let grid = TimeGrid::for_claims(&snap.contracts, *steps_per_year)?;
            let cfg = SgdConfig { seed, ..sgd.clone() };
            calibrate(&mut model, &grid, &cfg, snap)?
        }
        Engine::Pde { calib } => calibrate_pde(&mut model, snap, calib)?,
    };
    Ok((model, Some(cal)))
}

fn train(exp: &Experiment, model: SdeModel, snap: &MarketSnapshot, role: &str, tag: u64) -> Result<Fitted> {
    let seed = match &exp.engine {
        Engine::MonteCarloSgd { sgd, .. } => mix_seed(sgd.seed ^ exp.seed, tag),
        Engine::Pde { .. } => 0,
    };
    let (model, cal) = fit_model(&exp.model, &exp.engine, model, snap, seed)?;
    let record = TrainRecord {
        role: role.to_string(),
        day: snap.date,
        contracts: snap.len(),
        iterations: cal.as_ref().map_or(0, |c| c.iterations()),
        stop: cal.as_ref().map(|c| c.stop),
        final_objective: cal.as_ref().and_then(|c| c.history.last()).map(|h| h.train_mse),
    };
    Ok(Fitted { model, record })
}

/// Model prices of `contracts` with the Monte Carlo standard error or the
/// PDE discretization estimate (gap to a half-resolution solve).
pub fn engine_prices(engine: &Engine, model: &SdeModel, contracts: &[Contract], seed: u64) -> Result<Vec<(f64, f64)>> {
    if contracts.is_empty() {
        return Ok(Vec::new());
    }
    match engine {
        Engine::MonteCarloSgd {
            steps_per_year,
            eval_paths,
            ..
        } => {
            if let Some(c) = contracts.iter().find(|c| c.style.is_early_exercise()) {
                return Err(Error::Experiment(format!(
                    "`{}` has early exercise; the PDE engine is required",
                    c.id
                )));
            }
            let grid = TimeGrid::for_claims(contracts, *steps_per_year)?;
            let p = mc_prices(model, &grid, contracts, 0..*eval_paths, seed)?;
            Ok(p.iter().map(|m| (m.price, m.stderr)).collect())
        }
        Engine::Pde { calib } => {
            let fine = PdeGrid::build(model, contracts, &calib.grid)?;
            let sol = solve(model, &fine, contracts)?;
            let half = PdeConfig {
                n_s: (calib.grid.n_s / 2).max(4),
                n_y: (calib.grid.n_y / 2).max(4),
                ..calib.grid
            };
            let coarse = solve(model, &PdeGrid::build(model, contracts, &half)?, contracts)?;
            Ok(sol
                .prices
                .iter()
                .zip(&coarse.prices)
                .map(|(f, c)| (*f, (f - c).abs()))
                .collect())
        }
    }
}

fn evaluate(
    exp: &Experiment,
    model: &SdeModel,
    snap: &MarketSnapshot,
    split: &str,
    tag: u64,
) -> Result<(Vec<EvalRow>, ParamHash)> {
    let model = move_to(model.clone(), snap)?;
    let prices = engine_prices(&exp.engine, &model, &snap.contracts, mix_seed(exp.seed, tag))?;
    let widen = match exp.engine {
        Engine::MonteCarloSgd { .. } => 3.0,
        Engine::Pde { .. } => 1.0,
    };
    let rows = snap
        .contracts
        .iter()
        .zip(prices)
        .map(|(c, (p, noise))| {
            let e = p - c.market_price;
            EvalRow {
                id: c.id.clone(),
                split: split.to_string(),
                day: snap.date,
                kind: c.kind(),
                style: c.style,
                strike: c.strike(),
                maturity: c.maturity,
                market: c.market_price,
                model: p,
                abs_err: e.abs(),
                sq_err: e * e,
                rel_err: (c.market_price > 0.0).then(|| 100.0 * e.abs() / c.market_price),
                noise: widen * noise,
            }
        })
        .collect();
    let hash = ParamHash {
        role: split.to_string(),
        day: snap.date,
        hash: model.param_vector().fingerprint(),
    };
    Ok((rows, hash))
}

fn nonempty(snap: MarketSnapshot, what: &str) -> Result<MarketSnapshot> {
    if snap.is_empty() {
        Err(Error::Experiment(format!(
            "the protocol needs {what}, but the data has none"
        )))
    } else {
        Ok(snap)
    }
}

/// Protocol slices as (train day, evaluation list of (split, snapshot)).
fn slices(
    kind: &ExperimentKind,
    days: &[MarketSnapshot],
    seed: u64,
) -> Result<(MarketSnapshot, Vec<(String, MarketSnapshot)>)> {
    let day0 = days.first().ok_or(Error::EmptySnapshot)?;
    let need_days = |n: usize| {
        if days.len() < n {
            Err(Error::Experiment(format!(
                "the protocol needs {n} days of data, got {}",
                days.len()
            )))
        } else {
            Ok(())
        }
    };
    let european = |s: &MarketSnapshot| s.filter(|c| c.style == ExerciseStyle::European);
    Ok(match kind {
        ExperimentKind::IntradaySplit { train_fraction } => {
            let split = split_pairs(&european(day0), *train_fraction, mix_seed(seed, 7))?;
            let test = nonempty(split.test, "test pairs")?;
            let train = nonempty(split.train, "training pairs")?;
            (train.clone(), vec![("train".into(), train), ("test".into(), test)])
        }
        ExperimentKind::NextDay => {
            need_days(2)?;
            let train = nonempty(european(day0), "European contracts on day 0")?;
            let test = nonempty(european(&days[1]), "European contracts on day 1")?;
            (train.clone(), vec![("train".into(), train), ("test".into(), test)])
        }
        ExperimentKind::CrossPayoff => {
            let e = european(day0);
            let train = nonempty(e.calls(), "calls")?;
            let test = nonempty(e.puts(), "puts")?;
            (train.clone(), vec![("train".into(), train), ("test".into(), test)])
        }
        ExperimentKind::StrikeExtrapolation { threshold } => {
            let e = european(day0);
            let train = nonempty(
                filter_strikes(&e, *threshold, StrikeSide::AtOrBelow),
                "strikes at or below the threshold",
            )?;
            let test = nonempty(
                filter_strikes(&e, *threshold, StrikeSide::Above),
                "strikes above the threshold",
            )?;
            (train.clone(), vec![("train".into(), train), ("test".into(), test)])
        }
        ExperimentKind::EuropeanToAmerican => {
            let train = nonempty(european(day0), "European contracts")?;
            let test = nonempty(
                day0.filter(|c| c.style == ExerciseStyle::American),
                "American contracts",
            )?;
            (train.clone(), vec![("train".into(), train), ("test".into(), test)])
        }
        ExperimentKind::Recalibration { .. } => unreachable!("handled by the chain runner"),
    })
}

fn check_engine(exp: &Experiment, snaps: &[&MarketSnapshot]) -> Result<()> {
    let early = snaps
        .iter()
        .flat_map(|s| &s.contracts)
        .find(|c| c.style.is_early_exercise());
    if let (Some(c), Engine::MonteCarloSgd { .. }) = (early, &exp.engine) {
        return Err(Error::Experiment(format!(
            "`{}` has early exercise; the PDE engine is required",
            c.id
        )));
    }
    Ok(())
}

/// Runs one experiment on days of data (the first day is day 0).
pub fn run(exp: &Experiment, days: &[MarketSnapshot]) -> Result<EvalReport> {
    if exp.metrics.is_empty() {
        return Err(Error::Config("request at least one metric".into()));
    }
    if let Engine::MonteCarloSgd {
        sgd,
        steps_per_year,
        eval_paths,
    } = &exp.engine
    {
        sgd.validate()?;
        if !(*steps_per_year > 0.0) || *eval_paths < 2 {
            return Err(Error::Config(
                "Monte Carlo engine needs steps_per_year > 0 and eval_paths >= 2".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    let mut training = Vec::new();
    let mut hashes = Vec::new();
    let used_days: Vec<NaiveDate>;
    let model_name;
    if let ExperimentKind::Recalibration { window } = exp.kind {
        if window < 2 || days.len() < window {
            return Err(Error::Experiment(format!(
                "recalibration over {window} days needs window >= 2 and that many days of data, got {}",
                days.len()
            )));
        }
        let chain: Vec<MarketSnapshot> = days[..window]
            .iter()
            .map(|d| {
                nonempty(
                    d.filter(|c| c.style == ExerciseStyle::European),
                    "European contracts on every day",
                )
            })
            .collect::<Result<_>>()?;
        let init = build_model(&exp.model, &chain[0], exp.seed)?;
        model_name = init.name().to_string();
        let first = train(exp, init, &chain[0], "day0", 100)?;
        training.push(first.record);
        let frozen = first.model;
        let mut live = frozen.clone();
        for t in 1..window {
            let (r, h) = evaluate(exp, &frozen, &chain[t], "frozen", 200 + t as u64)?;
            rows.extend(r);
            hashes.push(h);
            let (r, h) = evaluate(exp, &live, &chain[t], "recalibrated", 300 + t as u64)?;
            rows.extend(r);
            hashes.push(h);
            if t + 1 < window {
                let warm = if exp.model.trainable() {
                    live
                } else {
                    build_model(&exp.model, &chain[t], exp.seed)?
                };
                let next = train(exp, warm, &chain[t], "recalibrated", 100 + t as u64)?;
                training.push(next.record);
                live = next.model;
            }
        }
        used_days = chain.iter().map(|d| d.date).collect();
    } else {
        let (train_snap, evals) = slices(&exp.kind, days, exp.seed)?;
        let mut all: Vec<&MarketSnapshot> = vec![&train_snap];
        all.extend(evals.iter().map(|(_, s)| s));
        check_engine(exp, &all)?;
        let init = build_model(&exp.model, &train_snap, exp.seed)?;
        model_name = init.name().to_string();
        let fitted = train(exp, init, &train_snap, "train", 100)?;
        training.push(fitted.record);
        for (i, (split, snap)) in evals.iter().enumerate() {
            let (r, h) = evaluate(exp, &fitted.model, snap, split, 200 + i as u64)?;
            rows.extend(r);
            hashes.push(h);
        }
        let mut d: Vec<NaiveDate> = all.iter().map(|s| s.date).collect();
        d.sort();
        d.dedup();
        used_days = d;
    }
    let mut aggregates = aggregate(&rows, &[GroupBy::Split, GroupBy::Kind]);
    let multi_day = used_days.len() > 1;
    if multi_day {
        aggregates.extend(
            aggregate(&rows, &[GroupBy::Split, GroupBy::Kind, GroupBy::Day])
                .into_iter()
                .filter(|a| a.day.is_some()),
        );
    }
    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        experiment: exp.clone(),
        model_name,
        engine: exp.engine.name().to_string(),
        days: used_days,
        day_averages: if multi_day { day_averages(&rows) } else { Vec::new() },
        rows,
        aggregates,
        training,
        param_hashes: hashes,
    })
}

/// Independent experiments on the same data, in parallel.
pub fn run_many(experiments: &[Experiment], days: &[MarketSnapshot]) -> Vec<Result<EvalReport>> {
    experiments.par_iter().map(|e| run(e, days)).collect()
}

/// Whether the frozen-baseline fingerprint is the same on every day.
pub fn frozen_hash_constant(report: &EvalReport) -> bool {
    let mut h = report
        .param_hashes
        .iter()
        .filter(|p| p.role == "frozen")
        .map(|p| &p.hash);
    match h.next() {
        Some(first) => h.all(|x| x == first),
        None => false,
    }
}

/// Serialized report (pretty JSON, trailing newline).
pub fn report_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Aggregate rows as CSV with the requested metric columns.
pub fn aggregates_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split".to_string(), "kind".into(), "day".into(), "n".into()];
    for m in &report.experiment.metrics {
        header.push(metric_name(*m).into());
    }
    header.push("noise_floor_mse".into());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for a in &report.aggregates {
        let mut rec = vec![
            a.split.clone().unwrap_or_else(|| "all".into()),
            a.kind.map(kind_name).unwrap_or("all").to_string(),
            a.day
                .map(|d| d.format("%Y-%m-%d").to_string())
                .unwrap_or_else(|| "all".into()),
            a.n.to_string(),
        ];
        for m in &report.experiment.metrics {
            rec.push(match m {
                Metric::Mse => a.mse.to_string(),
                Metric::Mae => a.mae.to_string(),
                Metric::RelMae => opt(a.rel_mae),
            });
        }
        rec.push(a.noise_floor_mse.to_string());
        w.write_record(&rec)?;
    }
    for d in &report.day_averages {
        let mut rec = vec![
            d.split.clone(),
            d.kind.map(kind_name).unwrap_or("all").to_string(),
            "mean_of_days".into(),
            d.days.to_string(),
        ];
        for m in &report.experiment.metrics {
            rec.push(match m {
                Metric::Mse => d.mse.to_string(),
                Metric::Mae => d.mae.to_string(),
                Metric::RelMae => opt(d.rel_mae),
            });
        }
        rec.push(String::new());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Experiment(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Experiment(e.to_string()))
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Mse => "mse",
        Metric::Mae => "mae",
        Metric::RelMae => "rel_mae",
    }
}

fn kind_name(k: OptionKind) -> &'static str {
    match k {
        OptionKind::Call => "call",
        OptionKind::Put => "put",
    }
}

/// Writes `{stem}.json` and `{stem}.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{}.json", report.stem()));
    let csv = dir.join(format!("{}.csv", report.stem()));
    fs::write(&json, report_json(report)?).map_err(|e| Error::io(&json, e))?;
    fs::write(&csv, aggregates_csv(report)?).map_err(|e| Error::io(&csv, e))?;
    Ok((json, csv))
}

/// Checks the structural invariants of a report: known format, finite
/// metrics, consistent per-row errors, and aggregates that recompute from
/// the rows.
pub fn validate_report(report: &EvalReport) -> Result<()> {
    let bad = |m: String| Err(Error::Experiment(format!("invalid report: {m}")));
    if report.format != REPORT_FORMAT {
        return bad(format!("format `{}`", report.format));
    }
    if report.rows.is_empty() {
        return bad("no rows".into());
    }
    for r in &report.rows {
        let e = r.model - r.market;
        if !(r.model.is_finite() && r.market.is_finite() && r.noise >= 0.0) {
            return bad(format!("row `{}` is not finite", r.id));
        }
        if r.abs_err != e.abs() || r.sq_err != e * e {
            return bad(format!("row `{}` errors do not match its prices", r.id));
        }
    }
    let mut expect = aggregate(&report.rows, &[GroupBy::Split, GroupBy::Kind]);
    if report.days.len() > 1 {
        expect.extend(
            aggregate(&report.rows, &[GroupBy::Split, GroupBy::Kind, GroupBy::Day])
                .into_iter()
                .filter(|a| a.day.is_some()),
        );
    }
    if expect != report.aggregates {
        return bad("aggregates do not recompute from the rows".into());
    }
    Ok(())
}

/// Price generator of a synthetic market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Closed form for European contracts, PDE for American ones.
    Bs {
        sigma: f64,
    },
    Heston {
        params: HestonParams,
        grid: PdeConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub generator: Generator,
    pub spot: f64,
    pub rate: f64,
    pub dividend: f64,
    /// Strikes as fractions of the first day's spot.
    pub moneyness: Vec<f64>,
    /// Maturities in days as seen from the first day.
    pub maturity_days: Vec<i64>,
    pub days: usize,
    pub start: NaiveDate,
    /// Uniform relative noise on every price, in basis points of the price.
    pub noise_bps: f64,
    /// Also quote American calls and puts.
    pub american: bool,
    /// Spot volatility of the day-to-day GBM path.
    pub path_vol: f64,
    /// Grid for the American BS prices.
    pub american_grid: PdeConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            generator: Generator::Bs { sigma: 0.2 },
            spot: 100.0,
            rate: 0.02,
            dividend: 0.0,
            moneyness: vec![0.9, 0.95, 1.0, 1.05, 1.1],
            maturity_days: vec![30, 60, 91],
            days: 1,
            start: NaiveDate::from_ymd_opt(2024, 1, 2).expect("date"),
            noise_bps: 0.0,
            american: false,
            path_vol: 0.2,
            american_grid: PdeConfig {
                n_s: 400,
                ..PdeConfig::default()
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let last = self.maturity_days.iter().copied().min().unwrap_or(0);
        if !(self.spot > 0.0) || self.moneyness.is_empty() || self.maturity_days.is_empty() || self.days == 0 {
            return Err(Error::Config(
                "synthetic market needs spot > 0, strikes, maturities and days".into(),
            ));
        }
        if last <= self.days as i64 {
            return Err(Error::Config(format!(
                "the shortest maturity ({last} days) must outlast the {} generated days",
                self.days
            )));
        }
        if !(self.noise_bps >= 0.0 && self.noise_bps < 1e4) {
            return Err(Error::Config("noise_bps must lie in [0, 10000)".into()));
        }
        Ok(())
    }
}

/// Daily snapshots of a synthetic market (calendar days). Strikes stay fixed
/// while maturities run down; the spot follows a GBM path with `path_vol`.
pub fn synth_days(cfg: &SynthConfig) -> Result<Vec<MarketSnapshot>> {
    cfg.validate()?;
    let mut path = PathRng::new(mix_seed(cfg.seed, 11), 0);
    let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 13));
    let dt = 1.0 / DAYS_PER_YEAR;
    let mut s = cfg.spot;
    let mut out = Vec::with_capacity(cfg.days);
    for d in 0..cfg.days {
        if d > 0 {
            let z = path.pair().0;
            s *= ((cfg.rate - cfg.dividend - 0.5 * cfg.path_vol * cfg.path_vol) * dt + cfg.path_vol * dt.sqrt() * z)
                .exp();
        }
        let mut contracts = Vec::new();
        for &md in &cfg.maturity_days {
            let t = (md - d as i64) as f64 / DAYS_PER_YEAR;
            for &m in &cfg.moneyness {
                let k = m * cfg.spot;
                contracts.push(Contract::european(Payoff::call(k), t, 0.0));
                contracts.push(Contract::european(Payoff::put(k), t, 0.0));
                if cfg.american {
                    contracts.push(Contract::new(Payoff::call(k), t, ExerciseStyle::American, 0.0));
                    contracts.push(Contract::new(Payoff::put(k), t, ExerciseStyle::American, 0.0));
                }
            }
        }
        let snap = MarketSnapshot::new(cfg.start + chrono::Days::new(d as u64), s, cfg.rate, cfg.dividend);
        let prices = generate(cfg, &snap, &contracts)?;
        for (c, p) in contracts.iter_mut().zip(prices) {
            let u: f64 = if cfg.noise_bps > 0.0 {
                noise.gen_range(-1.0..1.0)
            } else {
                0.0
            };
            c.market_price = p * (1.0 + u * cfg.noise_bps * 1e-4);
        }
        out.push(snap.with_contracts(contracts));
    }
    Ok(out)
}

fn generate(cfg: &SynthConfig, snap: &MarketSnapshot, contracts: &[Contract]) -> Result<Vec<f64>> {
    let env = MarketEnv::from_snapshot(&snap.with_contracts(contracts.to_vec()));
    match &cfg.generator {
        Generator::Bs { sigma } => {
            let mut prices = vec![0.0; contracts.len()];
            let american: Vec<usize> = (0..contracts.len())
                .filter(|&i| contracts[i].style.is_early_exercise())
                .collect();
            for (i, c) in contracts.iter().enumerate() {
                if !c.style.is_early_exercise() {
                    let x = BsInputs::new(snap.spot, c.strike(), c.maturity, snap.rate, snap.dividend);
                    prices[i] = bs_price(&x, *sigma, c.kind())?;
                }
            }
            if !american.is_empty() {
                let model = SdeModel::black_scholes(env, *sigma)?;
                let am: Vec<Contract> = american.iter().map(|&i| contracts[i].clone()).collect();
                let grid = PdeGrid::build(&model, &am, &cfg.american_grid)?;
                let sol = solve(&model, &grid, &am)?;
                for (&i, p) in american.iter().zip(sol.prices) {
                    prices[i] = p;
                }
            }
            Ok(prices)
        }
        Generator::Heston { params, grid } => {
            let model = SdeModel::heston(env, *params)?;
            let g = PdeGrid::build(&model, contracts, grid)?;
            Ok(solve(&model, &g, contracts)?.prices)
        }
    }
}
