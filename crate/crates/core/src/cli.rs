//! Command-line front end: `calibrate`, `price`, `experiment`, `hedge`,
//! `synth` and `export-plots`.
//!
//! Settings come from an optional TOML file; flags override it. Exit codes:
//! 0 on success (and on calibration convergence), 2 when calibration stops
//! at its iteration cap, 1 on any error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{
    self, build_model, engine_prices, fit_model, move_to, Engine, Experiment, ExperimentKind, Generator, Metric,
    ModelChoice, SynthConfig,
};
use crate::error::{Error, Result};
use crate::hedge::{self, DeltaMethod, GbmWorld, HedgeMetrics, HedgeRecord};
use crate::market::{load_days, pair_contracts, ExerciseStyle, MarketSnapshot, OptionKind};
use crate::mc::{simulate, TimeGrid};
use crate::models::{bs_implied_vol, BsInputs, HestonParams, NnlvConfig, SdeModel};
use crate::net::PAPER_HIDDEN_WIDTH;
use crate::optim::{write_history, LrSchedule, StopReason};
use crate::pde::{dump_solution, PdeCalibConfig, PdeConfig, PdeGrid};
use crate::sgd::SgdConfig;

#[derive(Debug, Parser)]
#[command(
    name = "nsde",
    version,
    about = "Neural SDE option-model calibration, pricing and experiments"
)]
pub struct Cli {
    /// Worker threads (default: logical cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Global seed, used when the config does not set one.
    #[arg(long, global = true, env = "NSDE_SEED")]
    pub seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate a model to the first day of a market file; writes
    /// `model.json` and `history.csv` to `--out`.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Price every contract of a file with a saved model.
    Price {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Contracts in the market CSV schema (the spot and rates of the
        /// file set the pricing market).
        #[arg(long)]
        contracts: PathBuf,
        #[arg(long, value_enum, default_value_t = EngineFlag::Pde)]
        engine: EngineFlag,
        /// Monte Carlo paths.
        #[arg(long, default_value_t = 100_000)]
        paths: u64,
        /// Output CSV (`id,price,stderr_or_disc_est`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one evaluation protocol and write its report.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        experiment: Option<ExperimentFlag>,
        /// Train fraction of `intraday-split`.
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        /// Strike threshold of `strike-extrapolation` (default: first-day spot).
        #[arg(long)]
        threshold: Option<f64>,
        /// Days of `recalibration`.
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
    /// Daily delta-hedging errors on a multi-day market file or on a
    /// simulated Black-Scholes world.
    Hedge {
        #[arg(long, conflicts_with = "gbm_world")]
        data: Option<PathBuf>,
        /// Use the built-in GBM world instead of a data file.
        #[arg(long)]
        gbm_world: bool,
        /// Days of the GBM world.
        #[arg(long, default_value_t = 252)]
        days: usize,
        #[arg(long, value_enum, default_value_t = HedgeFlag::Bs)]
        delta: HedgeFlag,
        /// Model for `--delta mc` or `--delta pde`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic market snapshots.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        generator: Option<GeneratorFlag>,
        /// Black-Scholes volatility of the `bs` generator.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        noise_bps: Option<f64>,
        /// Also quote American calls and puts.
        #[arg(long)]
        american: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot-ready CSVs from a report, and optionally PDE value slices and
    /// sample paths of a saved model.
    ExportPlots {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, requires = "contracts")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        contracts: Option<PathBuf>,
        /// Sample paths to export with `--checkpoint`.
        #[arg(long, default_value_t = 50)]
        paths: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings shared by `calibrate` and `experiment`.
#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelFlag>,
    #[arg(long, value_enum)]
    pub engine: Option<EngineFlag>,
    /// Market CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Constant learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initial volatility of `bs` and of the network models' output layer.
    #[arg(long)]
    pub sigma0: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelFlag {
    Bs,
    Dupire,
    Heston,
    Nnlv,
    Sdenn,
    SdennDrift,
    #[value(name = "2dnn")]
    TwoDnn,
    #[value(name = "2dnn-heston")]
    TwoDnnHeston,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EngineFlag {
    Mc,
    Pde,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentFlag {
    IntradaySplit,
    NextDay,
    CrossPayoff,
    StrikeExtrapolation,
    Recalibration,
    EuropeanToAmerican,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HedgeFlag {
    /// Black-Scholes delta at the pair-implied volatility.
    Bs,
    /// No hedge.
    Zero,
    /// Model delta by common-random-number Monte Carlo.
    Mc,
    /// Model delta from the PDE grid.
    Pde,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GeneratorFlag {
    Bs,
    Heston,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelChoice>,
    pub engine: Option<Engine>,
    pub experiment: Option<ExperimentKind>,
    pub metrics: Option<Vec<Metric>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn apply(&mut self, run: &RunArgs) {
        if let Some(m) = run.model {
            self.model = Some(model_choice(m, run.sigma0.unwrap_or(0.3)));
        } else if let (Some(ModelChoice::Bs { sigma }), Some(s)) = (self.model.as_mut(), run.sigma0) {
            *sigma = s;
        }
        if let Some(e) = run.engine {
            self.engine = Some(match e {
                EngineFlag::Mc => Engine::MonteCarloSgd {
                    sgd: SgdConfig::default(),
                    steps_per_year: crate::market::DAYS_PER_YEAR,
                    eval_paths: 100_000,
                },
                EngineFlag::Pde => Engine::Pde {
                    calib: PdeCalibConfig::default(),
                },
            });
        }
        if let Some(d) = &run.data {
            self.data = Some(d.clone());
        }
        if let Some(o) = &run.out {
            self.out = Some(o.clone());
        }
        if let Some(engine) = self.engine.as_mut() {
            let (iters, lr) = match engine {
                Engine::MonteCarloSgd { sgd, .. } => (&mut sgd.max_iters, &mut sgd.lr),
                Engine::Pde { calib } => (&mut calib.max_iters, &mut calib.lr),
            };
            if let Some(n) = run.max_iters {
                *iters = n;
            }
            if let Some(r) = run.lr {
                *lr = LrSchedule::constant(r);
            }
        }
    }

    fn model(&self) -> Result<&ModelChoice> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("no model given (`--model` or [model])".into()))
    }

    fn engine(&self) -> Result<&Engine> {
        self.engine
            .as_ref()
            .ok_or_else(|| Error::Config("no engine given (`--engine` or [engine])".into()))
    }

    fn data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no data file given (`--data` or data = ...)".into()))
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (`--out` or out = ...)".into()))
    }

    /// Early-exercise contracts need the PDE engine.
    pub fn validate(&self, days: &[MarketSnapshot]) -> Result<()> {
        let engine = self.engine()?;
        self.model()?;
        if let Engine::MonteCarloSgd { sgd, .. } = engine {
            sgd.validate()?;
            let early = days
                .iter()
                .flat_map(|d| &d.contracts)
                .find(|c| c.style.is_early_exercise());
            if let Some(c) = early {
                return Err(Error::Config(format!(
                    "`{}` has early exercise; use the PDE engine",
                    c.id
                )));
            }
        }
        Ok(())
    }
}

fn model_choice(flag: ModelFlag, sigma0: f64) -> ModelChoice {
    let fit = NnlvConfig::default();
    let hidden = vec![PAPER_HIDDEN_WIDTH; 2];
    let heston = HestonParams {
        y0: sigma0 * sigma0,
        alpha: 2.0,
        m: sigma0 * sigma0,
        k: 0.3,
        rho: -0.5,
    };
    match flag {
        ModelFlag::Bs => ModelChoice::Bs { sigma: sigma0 },
        ModelFlag::Dupire => ModelChoice::DupireLv,
        ModelFlag::Heston => ModelChoice::Heston { params: heston },
        ModelFlag::Nnlv => ModelChoice::Nnlv { fit },
        ModelFlag::Sdenn => ModelChoice::Sdenn { fit },
        ModelFlag::SdennDrift => ModelChoice::SdennDrift {
            fit,
            drift_hidden: hidden,
        },
        ModelFlag::TwoDnn => ModelChoice::TwoDnn {
            hidden,
            rho: 0.0,
            y0: 0.0,
            init_vol: sigma0,
        },
        ModelFlag::TwoDnnHeston => ModelChoice::TwoDnnHeston {
            hidden,
            heston,
            init_vol: sigma0,
        },
    }
}

fn run_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(run);
    Ok(cfg)
}

fn read_days(path: &Path) -> Result<Vec<MarketSnapshot>> {
    let (days, report) = load_days(path)?;
    if !report.rejected.is_empty() {
        log::warn!("{}: {} rows rejected", path.display(), report.rejected.len());
    }
    Ok(days)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Exit code of a finished command.
pub enum Outcome {
    Done,
    MaxIters,
}

pub fn cmd_calibrate(run: &RunArgs, seed: u64) -> Result<Outcome> {
    let cfg = run_config(run)?;
    let days = read_days(cfg.data()?)?;
    cfg.validate(&days)?;
    let seed = cfg.seed.unwrap_or(seed);
    let day = &days[0];
    let choice = cfg.model()?;
    let init = build_model(choice, day, seed)?;
    let (model, cal) = fit_model(choice, cfg.engine()?, init, day, seed)?;
    let out = cfg.out()?;
    mkdir(out)?;
    model.save(&out.join("model.json"))?;
    let history = cal.as_ref().map(|c| c.history.as_slice()).unwrap_or(&[]);
    write_history(&out.join("history.csv"), history)?;
    log::info!(
        "{}: {} iterations, parameters {}",
        model.name(),
        history.len(),
        model.param_vector().fingerprint()
    );
    Ok(match cal.map(|c| c.stop) {
        Some(StopReason::MaxIters) => Outcome::MaxIters,
        _ => Outcome::Done,
    })
}

pub fn cmd_price(
    checkpoint: &Path,
    contracts: &Path,
    engine: EngineFlag,
    paths: u64,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let model = SdeModel::load(checkpoint)?;
    let text = fs::read_to_string(contracts).map_err(|e| Error::io(contracts, e))?;
    let mut csv = String::from("id,price,stderr_or_disc_est\n");
    if text.lines().skip(1).any(|l| !l.trim().is_empty()) {
        let days = read_days(contracts)?;
        if days.len() > 1 {
            return Err(Error::Argument(format!(
                "{}: expected a single date",
                contracts.display()
            )));
        }
        let snap = &days[0];
        let engine = match engine {
            EngineFlag::Mc => Engine::MonteCarloSgd {
                sgd: SgdConfig::default(),
                steps_per_year: crate::market::DAYS_PER_YEAR,
                eval_paths: paths,
            },
            EngineFlag::Pde => Engine::Pde {
                calib: PdeCalibConfig::default(),
            },
        };
        let model = move_to(model, snap)?;
        let prices = engine_prices(&engine, &model, &snap.contracts, seed)?;
        for (c, (p, e)) in snap.contracts.iter().zip(prices) {
            csv.push_str(&format!("{},{p},{e}\n", c.id));
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    fs::write(out, csv).map_err(|e| Error::io(out, e))
}

pub fn cmd_experiment(
    run: &RunArgs,
    flag: Option<ExperimentFlag>,
    train_fraction: f64,
    threshold: Option<f64>,
    window: usize,
    seed: u64,
) -> Result<PathBuf> {
    let mut cfg = run_config(run)?;
    let days = read_days(cfg.data()?)?;
    if let Some(f) = flag {
        cfg.experiment = Some(match f {
            ExperimentFlag::IntradaySplit => ExperimentKind::IntradaySplit { train_fraction },
            ExperimentFlag::NextDay => ExperimentKind::NextDay,
            ExperimentFlag::CrossPayoff => ExperimentKind::CrossPayoff,
            ExperimentFlag::StrikeExtrapolation => ExperimentKind::StrikeExtrapolation {
                threshold: threshold.unwrap_or(days[0].spot),
            },
            ExperimentFlag::Recalibration => ExperimentKind::Recalibration { window },
            ExperimentFlag::EuropeanToAmerican => ExperimentKind::EuropeanToAmerican,
        });
    }
    let kind = cfg
        .experiment
        .clone()
        .ok_or_else(|| Error::Config("no experiment given (`--experiment` or [experiment])".into()))?;
    let exp = Experiment {
        kind,
        model: cfg.model()?.clone(),
        engine: cfg.engine()?.clone(),
        seed: cfg.seed.unwrap_or(seed),
        metrics: cfg.metrics.clone().unwrap_or_else(bench::all_metrics),
    };
    let report = bench::run(&exp, &days)?;
    let (json, _) = bench::write_report(&report, cfg.out()?)?;
    Ok(json)
}

#[derive(Serialize)]
struct HedgeSummary {
    delta: String,
    days: usize,
    metrics: HedgeMetrics,
    no_hedge: HedgeMetrics,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_hedge(
    data: Option<&Path>,
    gbm_days: Option<usize>,
    flag: HedgeFlag,
    checkpoint: Option<&Path>,
    paths: usize,
    out: &Path,
    seed: u64,
) -> Result<PathBuf> {
    let days = match (data, gbm_days) {
        (Some(p), _) => read_days(p)?,
        (None, Some(n)) => GbmWorld {
            days: n,
            expiry_days: (n as i64 + 1).max(365),
            ..GbmWorld::default()
        }
        .snapshots(seed)?,
        (None, None) => return Err(Error::Config("give `--data` or `--gbm-world`".into())),
    };
    let model = match (flag, checkpoint) {
        (HedgeFlag::Mc | HedgeFlag::Pde, Some(p)) => Some(SdeModel::load(p)?),
        (HedgeFlag::Mc | HedgeFlag::Pde, None) => return Err(Error::Config("model deltas need `--checkpoint`".into())),
        _ => None,
    };
    let records = hedge::hedge_days(&days, |snap, c| match flag {
        HedgeFlag::Zero => Ok(0.0),
        HedgeFlag::Bs => pair_delta(snap, c),
        HedgeFlag::Mc | HedgeFlag::Pde => {
            let m = move_to(model.clone().expect("checked above"), snap)?;
            let method = if flag == HedgeFlag::Mc {
                DeltaMethod::McCommonRandom {
                    paths,
                    steps_per_year: crate::market::DAYS_PER_YEAR,
                }
            } else {
                DeltaMethod::PdeGridSlope {
                    grid: PdeConfig::default(),
                }
            };
            hedge::delta(&m, c, snap.spot, hedge::DEFAULT_BUMP * snap.spot, &method, seed)
        }
    })?;
    let zero: Vec<HedgeRecord> = records
        .iter()
        .map(|r| HedgeRecord {
            delta: 0.0,
            ..r.clone()
        })
        .collect();
    let summary = HedgeSummary {
        delta: format!("{flag:?}").to_lowercase(),
        days: days.len(),
        metrics: hedge::hedge_errors(&records)?,
        no_hedge: hedge::hedge_errors(&zero)?,
    };
    mkdir(out)?;
    let stem = format!("hedge_{}_{}_{seed}", summary.delta, days[0].date.format("%Y-%m-%d"));
    hedge::export_hedge_csv(&records, &out.join(format!("{stem}.csv")))?;
    let json = out.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

fn pair_delta(snap: &MarketSnapshot, c: &crate::market::Contract) -> Result<f64> {
    let (pairs, _) = pair_contracts(snap);
    let pair = pairs
        .iter()
        .find(|p| p.call.strike() == c.strike() && p.call.maturity_days() == c.maturity_days())
        .ok_or_else(|| Error::Argument(format!("`{}` has no call/put pair for an implied vol", c.id)))?;
    hedge::bs_pair_delta(pair, snap.spot, snap.rate, snap.dividend, c.kind())
}

pub fn cmd_synth(
    config: Option<&Path>,
    generator: Option<GeneratorFlag>,
    sigma: Option<f64>,
    days: Option<usize>,
    noise_bps: Option<f64>,
    american: bool,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    match generator {
        Some(GeneratorFlag::Bs) => {
            cfg.generator = Generator::Bs {
                sigma: sigma.unwrap_or(0.2),
            }
        }
        Some(GeneratorFlag::Heston) => {
            cfg.generator = Generator::Heston {
                params: HestonParams {
                    y0: 0.04,
                    alpha: 2.0,
                    m: 0.04,
                    k: 0.3,
                    rho: -0.6,
                },
                grid: PdeConfig {
                    n_s: 150,
                    s_max_factor: 2.5,
                    ..PdeConfig::default()
                },
            }
        }
        None => {
            if let (Generator::Bs { sigma: s }, Some(v)) = (&mut cfg.generator, sigma) {
                *s = v;
            }
        }
    }
    if let Some(d) = days {
        cfg.days = d;
    }
    if let Some(n) = noise_bps {
        cfg.noise_bps = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.american |= american;
    let snaps = bench::synth_days(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    crate::market::export_days(&snaps, out)
}

#[derive(Serialize)]
struct SmileRow {
    split: String,
    day: chrono::NaiveDate,
    kind: OptionKind,
    strike: f64,
    maturity: f64,
    market_price: f64,
    model_price: f64,
    market_vol: Option<f64>,
    model_vol: Option<f64>,
}

pub fn cmd_export_plots(
    report: Option<&Path>,
    checkpoint: Option<&Path>,
    contracts: Option<&Path>,
    paths: u64,
    out: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    mkdir(out)?;
    let mut written = Vec::new();
    if let Some(p) = report {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let rep: bench::EvalReport = serde_json::from_str(&text)?;
        bench::validate_report(&rep)?;
        let stem = rep.stem();
        let rows = out.join(format!("{stem}_rows.csv"));
        let mut w = csv::Writer::from_path(&rows)?;
        w.write_record([
            "id", "split", "day", "kind", "strike", "maturity", "market", "model", "abs_err", "sq_err", "rel_err",
            "noise",
        ])?;
        for r in &rep.rows {
            w.write_record([
                r.id.clone(),
                r.split.clone(),
                r.day.to_string(),
                format!("{:?}", r.kind).to_lowercase(),
                r.strike.to_string(),
                r.maturity.to_string(),
                r.market.to_string(),
                r.model.to_string(),
                r.abs_err.to_string(),
                r.sq_err.to_string(),
                r.rel_err.map(|v| v.to_string()).unwrap_or_default(),
                r.noise.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&rows, e))?;
        written.push(rows);

        // Implied vols need the day's market; spots are not in the report,
        // so they are read back from the data file named by the caller.
        if let Some(c) = contracts {
            let days = read_days(c)?;
            let smile = out.join(format!("{stem}_smile.csv"));
            let mut w = csv::Writer::from_path(&smile)?;
            for r in rep.rows.iter().filter(|r| r.style == ExerciseStyle::European) {
                let Some(day) = days.iter().find(|d| d.date == r.day) else {
                    continue;
                };
                let x = BsInputs::new(day.spot, r.strike, r.maturity, day.rate, day.dividend);
                w.serialize(SmileRow {
                    split: r.split.clone(),
                    day: r.day,
                    kind: r.kind,
                    strike: r.strike,
                    maturity: r.maturity,
                    market_price: r.market,
                    model_price: r.model,
                    market_vol: bs_implied_vol(r.market, &x, r.kind).ok(),
                    model_vol: bs_implied_vol(r.model, &x, r.kind).ok(),
                })?;
            }
            w.flush().map_err(|e| Error::io(&smile, e))?;
            written.push(smile);
        }
        let agg = out.join(format!("{stem}_aggregates.csv"));
        fs::write(&agg, bench::aggregates_csv(&rep)?).map_err(|e| Error::io(&agg, e))?;
        written.push(agg);
    }
    if let (Some(ck), Some(c)) = (checkpoint, contracts) {
        let days = read_days(c)?;
        let snap = &days[0];
        let model = move_to(SdeModel::load(ck)?, snap)?;
        let grid = PdeGrid::build(&model, &snap.contracts, &PdeConfig::default())?;
        let t_max = grid.horizon;
        let slices = out.join("pde_slices.csv");
        let times: Vec<f64> = (0..=4).map(|k| k as f64 * t_max / 4.0).collect();
        dump_solution(&model, &grid, &snap.contracts, &times, &slices)?;
        written.push(slices);
        let euro: Vec<_> = snap
            .contracts
            .iter()
            .filter(|c| !c.style.is_early_exercise())
            .cloned()
            .collect();
        if !euro.is_empty() && paths > 0 {
            let tg = TimeGrid::daily(&euro)?;
            let batch = simulate(&model, &tg, 0..paths, seed, None)?;
            let p = out.join("paths.csv");
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(["path", "t", "S"])?;
            for n in 0..=tg.steps {
                let col = batch.column(n).expect("all steps recorded");
                for (i, s) in col.iter().enumerate() {
                    w.write_record([i.to_string(), tg.time(n).to_string(), s.to_string()])?;
                }
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
    }
    if written.is_empty() {
        return Err(Error::Config(
            "nothing to export: give `--report` and/or `--checkpoint` with `--contracts`".into(),
        ));
    }
    Ok(written)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::MaxIters) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Calibrate { run } => cmd_calibrate(run, seed),
        Command::Price {
            checkpoint,
            contracts,
            engine,
            paths,
            out,
        } => cmd_price(checkpoint, contracts, *engine, *paths, out, seed).map(|_| Outcome::Done),
        Command::Experiment {
            run,
            experiment,
            train_fraction,
            threshold,
            window,
        } => {
            let json = cmd_experiment(run, *experiment, *train_fraction, *threshold, *window, seed)?;
            println!("{}", json.display());
            Ok(Outcome::Done)
        }
        Command::Hedge {
            data,
            gbm_world,
            days,
            delta,
            checkpoint,
            paths,
            out,
        } => {
            let gbm = gbm_world.then_some(*days);
            let json = cmd_hedge(data.as_deref(), gbm, *delta, checkpoint.as_deref(), *paths, out, seed)?;
            println!("{}", json.display());
            Ok(Outcome::Done)
        }
        Command::Synth {
            config,
            generator,
            sigma,
            days,
            noise_bps,
            american,
            out,
        } => cmd_synth(
            config.as_deref(),
            *generator,
            *sigma,
            *days,
            *noise_bps,
            *american,
            out,
            cli.seed,
        )
        .map(|_| Outcome::Done),
        Command::ExportPlots {
            report,
            checkpoint,
            contracts,
            paths,
            out,
        } => {
            for p in cmd_export_plots(
                report.as_deref(),
                checkpoint.as_deref(),
                contracts.as_deref(),
                *paths,
                out,
                seed,
            )? {
                println!("{}", p.display());
            }
            Ok(Outcome::Done)
        }
    }
}
