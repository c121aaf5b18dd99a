//! Model-implied deltas and daily delta-hedging errors.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Contract, ContractPair, MarketSnapshot, OptionKind, DAYS_PER_YEAR};
use crate::mc::{mc_prices, PathRng, TimeGrid};
use crate::models::{bs_delta, bs_implied_vol, bs_price, BsInputs, SdeModel};
use crate::pde::{solve, PdeConfig, PdeGrid};

/// Default bump as a fraction of the spot.
pub const DEFAULT_BUMP: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaMethod {
    /// `(P(s0 + h) − P(s0 − h)) / 2h` on identical driver draws.
    McCommonRandom { paths: usize, steps_per_year: f64 },
    /// Central difference of the `t = 0` PDE slice at `s0`.
    PdeGridSlope { grid: PdeConfig },
    /// Black-Scholes delta at the paired call's implied volatility.
    BsClosedForm,
}

/// Model delta of `contract` at spot `s0`. `h` is the bump of the Monte
/// Carlo method; the other methods ignore it.
pub fn delta(model: &SdeModel, contract: &Contract, s0: f64, h: f64, method: &DeltaMethod, seed: u64) -> Result<f64> {
    if !(h > 0.0) || s0 - h <= 0.0 {
        return Err(Error::Argument(format!(
            "bump h = {h} must be positive and below s0 = {s0}"
        )));
    }
    if h >= s0 / 10.0 {
        return Err(Error::Argument(format!("bump h = {h} must stay below s0/10")));
    }
    let env = *crate::models::Sde::env(model);
    match method {
        DeltaMethod::McCommonRandom { paths, steps_per_year } => {
            let grid = TimeGrid::for_claims(std::slice::from_ref(contract), *steps_per_year)?;
            let price_at = |s: f64| -> Result<f64> {
                let m = model.clone().with_env(env.with_spot(s))?;
                Ok(mc_prices(&m, &grid, std::slice::from_ref(contract), 0..*paths as u64, seed)?[0].price)
            };
            Ok((price_at(s0 + h)? - price_at(s0 - h)?) / (2.0 * h))
        }
        DeltaMethod::PdeGridSlope { grid } => {
            let m = model.clone().with_env(env.with_spot(s0))?;
            let g = PdeGrid::build(&m, std::slice::from_ref(contract), grid)?;
            Ok(solve(&m, &g, std::slice::from_ref(contract))?.delta(0))
        }
        DeltaMethod::BsClosedForm => Err(Error::Argument(
            "closed-form delta needs a call/put pair; use `bs_pair_delta`".into(),
        )),
    }
}

/// Black-Scholes delta of one leg of `pair`, at the volatility implied by
/// the call's market price.
pub fn bs_pair_delta(pair: &ContractPair, spot: f64, rate: f64, dividend: f64, leg: OptionKind) -> Result<f64> {
    let c = &pair.call;
    let x = BsInputs::new(spot, c.strike(), c.maturity, rate, dividend);
    let vol = bs_implied_vol(c.market_price, &x, OptionKind::Call)?;
    bs_delta(&x, vol, leg)
}

/// One contract over one day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgeRecord {
    pub date: NaiveDate,
    pub contract_id: String,
    pub p_t: f64,
    pub p_next: f64,
    pub s_t: f64,
    pub s_next: f64,
    pub delta: f64,
}

impl HedgeRecord {
    pub fn d_p(&self) -> f64 {
        self.p_next - self.p_t
    }

    pub fn d_s(&self) -> f64 {
        self.s_next - self.s_t
    }

    /// `|ΔP − Δ·ΔS|`.
    pub fn abs_err(&self) -> f64 {
        (self.d_p() - self.delta * self.d_s()).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgeMetrics {
    pub mae: f64,
    pub mse: f64,
    /// Percent.
    pub rel_mae: f64,
    pub records: usize,
    /// Records left out of `rel_mae` because `P_t ≤ 0`.
    pub skipped: usize,
}

pub fn hedge_errors(records: &[HedgeRecord]) -> Result<HedgeMetrics> {
    if records.is_empty() {
        return Err(Error::Argument("hedge errors need at least one record".into()));
    }
    let n = records.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut kept = 0usize;
    for r in records {
        let e = r.abs_err();
        abs += e;
        sq += e * e;
        if r.p_t > 0.0 {
            rel += e / r.p_t;
            kept += 1;
        } else {
            log::warn!(
                "record {} on {} has P_t = {}; left out of relMAE",
                r.contract_id,
                r.date,
                r.p_t
            );
        }
    }
    Ok(HedgeMetrics {
        mae: abs / n,
        mse: sq / n,
        rel_mae: if kept > 0 { 100.0 * rel / kept as f64 } else { f64::NAN },
        records: records.len(),
        skipped: records.len() - kept,
    })
}

/// Writes `date,contract_id,delta,dP,dS,abs_err` rows.
pub fn write_hedge_csv(records: &[HedgeRecord], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<hedge report>", e);
    writeln!(out, "date,contract_id,delta,dP,dS,abs_err").map_err(io)?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.date,
            r.contract_id,
            r.delta,
            r.d_p(),
            r.d_s(),
            r.abs_err()
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn export_hedge_csv(records: &[HedgeRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_hedge_csv(records, std::io::BufWriter::new(f))
}

/// Matches each contract of day `t` with the same contract (kind, strike,
/// expiry date, style) on day `t + 1` and records the move, with deltas from
/// `delta_of(day, contract)`.
pub fn hedge_days(
    days: &[MarketSnapshot],
    mut delta_of: impl FnMut(&MarketSnapshot, &Contract) -> Result<f64>,
) -> Result<Vec<HedgeRecord>> {
    let mut out = Vec::new();
    for w in days.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.date <= a.date {
            return Err(Error::Argument(format!(
                "hedge days must be increasing, got {} then {}",
                a.date, b.date
            )));
        }
        for c in &a.contracts {
            let expiry = a.date + chrono::Days::new(c.maturity_days().max(0) as u64);
            let next = b.contracts.iter().find(|d| {
                d.kind() == c.kind()
                    && d.strike() == c.strike()
                    && d.style == c.style
                    && b.date + chrono::Days::new(d.maturity_days().max(0) as u64) == expiry
            });
            if let Some(d) = next {
                out.push(HedgeRecord {
                    date: a.date,
                    contract_id: c.id.clone(),
                    p_t: c.market_price,
                    p_next: d.market_price,
                    s_t: a.spot,
                    s_next: b.spot,
                    delta: delta_of(a, c)?,
                });
            }
        }
    }
    Ok(out)
}

/// Daily snapshots of a Black-Scholes world: a GBM spot path and the
/// closed-form prices of calls and puts with fixed expiry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmWorld {
    pub spot: f64,
    pub sigma: f64,
    pub rate: f64,
    pub dividend: f64,
    pub days: usize,
    /// Strikes as fractions of the initial spot.
    pub moneyness: Vec<f64>,
    /// Days from the first date to expiry.
    pub expiry_days: i64,
    pub start: NaiveDate,
}

impl Default for GbmWorld {
    fn default() -> Self {
        GbmWorld {
            spot: 100.0,
            sigma: 0.2,
            rate: 0.0,
            dividend: 0.0,
            days: 252,
            moneyness: vec![0.9, 1.0, 1.1],
            expiry_days: 365,
            start: NaiveDate::from_ymd_opt(2024, 1, 2).expect("date"),
        }
    }
}

impl GbmWorld {
    /// `days + 1` daily snapshots (calendar days, Δt = 1/365).
    pub fn snapshots(&self, seed: u64) -> Result<Vec<MarketSnapshot>> {
        if self.days as i64 >= self.expiry_days {
            return Err(Error::Argument("the world must end before expiry".into()));
        }
        let mut rng = PathRng::new(seed, 0);
        let dt = 1.0 / DAYS_PER_YEAR;
        let mut s = self.spot;
        let mut out = Vec::with_capacity(self.days + 1);
        for d in 0..=self.days {
            if d > 0 {
                let z = rng.pair().0;
                s *= ((self.rate - self.dividend - 0.5 * self.sigma * self.sigma) * dt + self.sigma * dt.sqrt() * z)
                    .exp();
            }
            let date = self.start + chrono::Days::new(d as u64);
            let tau_days = self.expiry_days - d as i64;
            let tau = tau_days as f64 / DAYS_PER_YEAR;
            let mut contracts = Vec::new();
            for &m in &self.moneyness {
                let k = m * self.spot;
                let x = BsInputs::new(s, k, tau, self.rate, self.dividend);
                for kind in [OptionKind::Call, OptionKind::Put] {
                    let p = bs_price(&x, self.sigma, kind)?;
                    let payoff = match kind {
                        OptionKind::Call => crate::market::Payoff::call(k),
                        OptionKind::Put => crate::market::Payoff::put(k),
                    };
                    contracts.push(Contract::european(payoff, tau, p));
                }
            }
            out.push(MarketSnapshot::new(date, s, self.rate, self.dividend).with_contracts(contracts));
        }
        Ok(out)
    }
}

/// Hedge-error metrics of closed-form pair-implied deltas and of the
/// no-hedge strategy (`Δ ≡ 0`) on the same days.
pub fn bs_vs_no_hedge(days: &[MarketSnapshot]) -> Result<(HedgeMetrics, HedgeMetrics)> {
    let bs = hedge_days(days, |snap, c| {
        let (pairs, _) = crate::market::pair_contracts(snap);
        let pair = pairs
            .iter()
            .find(|p| p.call.strike() == c.strike() && p.call.maturity_days() == c.maturity_days())
            .ok_or_else(|| Error::Argument(format!("`{}` has no paired call", c.id)))?;
        bs_pair_delta(pair, snap.spot, snap.rate, snap.dividend, c.kind())
    })?;
    let zero = hedge_days(days, |_, _| Ok(0.0))?;
    Ok((hedge_errors(&bs)?, hedge_errors(&zero)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Payoff;
    use crate::models::MarketEnv;

    fn rec(p_t: f64, p_next: f64, s_t: f64, s_next: f64, delta: f64) -> HedgeRecord {
        HedgeRecord {
            date: NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(),
            contract_id: "c".into(),
            p_t,
            p_next,
            s_t,
            s_next,
            delta,
        }
    }

    #[test]
    fn single_record_arithmetic() {
        let m = hedge_errors(&[rec(10.0, 12.0, 100.0, 101.0, 1.0)]).unwrap();
        assert_eq!((m.mae, m.mse, m.rel_mae), (1.0, 1.0, 10.0));
    }

    #[test]
    fn perfect_hedge_has_zero_error() {
        let rs = [rec(10.0, 12.0, 100.0, 104.0, 0.5), rec(5.0, 4.0, 104.0, 102.0, 0.5)];
        let m = hedge_errors(&rs).unwrap();
        assert_eq!((m.mae, m.mse, m.rel_mae), (0.0, 0.0, 0.0));
    }

    #[test]
    fn non_positive_price_is_skipped_in_rel_mae() {
        let m = hedge_errors(&[rec(0.0, 1.0, 100.0, 100.0, 0.0), rec(10.0, 11.0, 100.0, 100.0, 0.0)]).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.rel_mae, 10.0);
        assert_eq!(m.mae, 1.0);
    }

    #[test]
    fn empty_records_are_rejected() {
        assert!(hedge_errors(&[]).is_err());
    }

    #[test]
    fn closed_form_parity_of_deltas() {
        let x = BsInputs::new(100.0, 95.0, 0.5, 0.01, 0.02);
        let call = Contract::european(Payoff::call(95.0), 0.5, bs_price(&x, 0.25, OptionKind::Call).unwrap());
        let put = Contract::european(Payoff::put(95.0), 0.5, bs_price(&x, 0.25, OptionKind::Put).unwrap());
        let pair = ContractPair::new(call, put).unwrap();
        let dc = bs_pair_delta(&pair, 100.0, 0.01, 0.02, OptionKind::Call).unwrap();
        let dp = bs_pair_delta(&pair, 100.0, 0.01, 0.02, OptionKind::Put).unwrap();
        assert!((dc - dp - (-0.02f64 * 0.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn deep_itm_call_delta_is_one() {
        let m = SdeModel::black_scholes(MarketEnv::new(100.0, 0.0, 0.0), 0.2).unwrap();
        let c = Contract::european(Payoff::call(1.0), 1.0, 0.0);
        let method = DeltaMethod::PdeGridSlope {
            grid: PdeConfig {
                n_s: 100,
                ..Default::default()
            },
        };
        let d = delta(&m, &c, 100.0, 0.5, &method, 0).unwrap();
        assert!((d - 1.0).abs() < 1e-3, "{d}");
        let x = BsInputs::new(100.0, 1.0, 1.0, 0.0, 0.0);
        assert!((bs_delta(&x, 0.2, OptionKind::Call).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bump_must_stay_inside_the_spot() {
        let m = SdeModel::black_scholes(MarketEnv::new(100.0, 0.0, 0.0), 0.2).unwrap();
        let c = Contract::european(Payoff::call(100.0), 1.0, 0.0);
        let mc = DeltaMethod::McCommonRandom {
            paths: 10,
            steps_per_year: 12.0,
        };
        assert!(delta(&m, &c, 1.0, 2.0, &mc, 0).is_err());
        assert!(delta(&m, &c, 100.0, 20.0, &mc, 0).is_err());
    }

    #[test]
    fn pde_delta_matches_closed_form() {
        let m = SdeModel::black_scholes(MarketEnv::new(100.0, 0.0, 0.0), 0.2).unwrap();
        let c = Contract::european(Payoff::call(100.0), 1.0, 0.0);
        let method = DeltaMethod::PdeGridSlope {
            grid: PdeConfig {
                n_s: 200,
                ..Default::default()
            },
        };
        let d = delta(&m, &c, 100.0, 0.5, &method, 0).unwrap();
        assert!((d - 0.539828).abs() < 2e-3, "{d}");
    }

    #[test]
    fn records_pair_across_days() {
        let world = GbmWorld {
            days: 3,
            ..Default::default()
        };
        let days = world.snapshots(1).unwrap();
        let recs = hedge_days(&days, |_, _| Ok(0.0)).unwrap();
        assert_eq!(recs.len(), 3 * 6);
        let mut buf = Vec::new();
        write_hedge_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,contract_id,delta,dP,dS,abs_err\n"));
    }
}
