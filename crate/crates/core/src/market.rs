//! Option contracts, market snapshots, CSV ingestion/export and the
//! train/test slicing used by the experiment protocols.
//!
//! CSV schema (header required, UTF-8, LF line endings):
//!
//! ```text
//! date,style,payoff,strike,maturity_days,bid,ask,mid,spot,rate,dividend
//! ```
//!
//! `style` is `E` or `A`, `payoff` is `C` or `P`. The market price of a row is
//! the bid/ask mid when both are quoted, otherwise the `mid` column.
//! Maturities are calendar days on a 365-day year.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Months, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Real;

pub const DAYS_PER_YEAR: f64 = 365.0;

/// Dividend yield used for index options instead of trailing estimation.
pub const INDEX_DIVIDEND_RATE: f64 = 0.0191;

pub const CSV_HEADER: &str = "date,style,payoff,strike,maturity_days,bid,ask,mid,spot,rate,dividend";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionKind {
    Call,
    Put,
}

impl OptionKind {
    pub fn code(self) -> char {
        match self {
            OptionKind::Call => 'C',
            OptionKind::Put => 'P',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payoff {
    pub kind: OptionKind,
    pub strike: f64,
}

impl Payoff {
    pub fn call(strike: f64) -> Self {
        Payoff {
            kind: OptionKind::Call,
            strike,
        }
    }

    pub fn put(strike: f64) -> Self {
        Payoff {
            kind: OptionKind::Put,
            strike,
        }
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match self.kind {
            OptionKind::Call => (s - self.strike).max(0.0),
            OptionKind::Put => (self.strike - s).max(0.0),
        }
    }

    pub fn eval_real<R: Real>(&self, s: R) -> R {
        let zero = R::cst(0.0);
        match self.kind {
            OptionKind::Call => (s - self.strike).max(zero),
            OptionKind::Put => (-s + self.strike).max(zero),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExerciseStyle {
    European,
    /// Exercisable every `interval` years up to maturity.
    Bermudan {
        interval: f64,
    },
    /// Bermudan in the limit of exercise at every solver time step.
    American,
}

impl ExerciseStyle {
    pub fn is_early_exercise(&self) -> bool {
        !matches!(self, ExerciseStyle::European)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub id: String,
    pub payoff: Payoff,
    /// Year fraction.
    pub maturity: f64,
    pub style: ExerciseStyle,
    pub market_price: f64,
}

impl Contract {
    pub fn new(payoff: Payoff, maturity: f64, style: ExerciseStyle, market_price: f64) -> Self {
        let days = (maturity * DAYS_PER_YEAR).round() as i64;
        let style_code = match style {
            ExerciseStyle::European => "E",
            ExerciseStyle::American => "A",
            ExerciseStyle::Bermudan { .. } => "B",
        };
        Contract {
            id: format!("{}{}-{}d-{}", payoff.kind.code(), payoff.strike, days, style_code),
            payoff,
            maturity,
            style,
            market_price,
        }
    }

    pub fn european(payoff: Payoff, maturity: f64, market_price: f64) -> Self {
        Self::new(payoff, maturity, ExerciseStyle::European, market_price)
    }

    pub fn strike(&self) -> f64 {
        self.payoff.strike
    }

    pub fn kind(&self) -> OptionKind {
        self.payoff.kind
    }

    pub fn maturity_days(&self) -> i64 {
        (self.maturity * DAYS_PER_YEAR).round() as i64
    }

    fn key(&self) -> (OptionKind, u64, i64, bool) {
        (
            self.kind(),
            self.strike().to_bits(),
            self.maturity_days(),
            self.style.is_early_exercise(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSnapshot {
    pub date: NaiveDate,
    pub spot: f64,
    pub rate: f64,
    pub dividend: f64,
    pub contracts: Vec<Contract>,
}

impl MarketSnapshot {
    pub fn new(date: NaiveDate, spot: f64, rate: f64, dividend: f64) -> Self {
        MarketSnapshot {
            date,
            spot,
            rate,
            dividend,
            contracts: Vec::new(),
        }
    }

    pub fn with_contracts(&self, contracts: Vec<Contract>) -> Self {
        MarketSnapshot {
            contracts,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    pub fn calls(&self) -> Self {
        self.filter(|c| c.kind() == OptionKind::Call)
    }

    pub fn puts(&self) -> Self {
        self.filter(|c| c.kind() == OptionKind::Put)
    }

    pub fn filter(&self, keep: impl Fn(&Contract) -> bool) -> Self {
        self.with_contracts(self.contracts.iter().filter(|c| keep(c)).cloned().collect())
    }

    pub fn max_maturity(&self) -> f64 {
        self.contracts.iter().map(|c| c.maturity).fold(0.0, f64::max)
    }

    pub fn max_strike(&self) -> f64 {
        self.contracts.iter().map(|c| c.strike()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractPair {
    pub call: Contract,
    pub put: Contract,
}

impl ContractPair {
    pub fn new(call: Contract, put: Contract) -> Result<Self> {
        if call.kind() != OptionKind::Call
            || put.kind() != OptionKind::Put
            || call.strike() != put.strike()
            || call.maturity_days() != put.maturity_days()
        {
            return Err(Error::Argument(format!(
                "`{}` and `{}` do not form a call/put pair",
                call.id, put.id
            )));
        }
        Ok(ContractPair { call, put })
    }
}

/// Groups calls and puts with equal strike, maturity and style.
pub fn pair_contracts(snapshot: &MarketSnapshot) -> (Vec<ContractPair>, usize) {
    let mut calls = BTreeMap::new();
    let mut puts = BTreeMap::new();
    for c in &snapshot.contracts {
        let (_, k, d, s) = c.key();
        match c.kind() {
            OptionKind::Call => calls.insert((d, k, s), c.clone()),
            OptionKind::Put => puts.insert((d, k, s), c.clone()),
        };
    }
    let mut pairs = Vec::new();
    let mut unpaired = 0;
    for (key, call) in &calls {
        match puts.get(key) {
            Some(put) => pairs.push(ContractPair {
                call: call.clone(),
                put: put.clone(),
            }),
            None => unpaired += 1,
        }
    }
    unpaired += puts.keys().filter(|k| !calls.contains_key(k)).count();
    // sort by (maturity, strike) numerically; BTreeMap ordered by bit pattern
    pairs.sort_by(|a, b| {
        (a.call.maturity_days(), a.call.strike())
            .partial_cmp(&(b.call.maturity_days(), b.call.strike()))
            .unwrap()
    });
    (pairs, unpaired)
}

#[derive(Clone, Debug)]
pub struct PairSplit {
    pub train: MarketSnapshot,
    pub test: MarketSnapshot,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Contracts without a matching leg; assigned to neither side.
    pub unpaired: usize,
}

impl PairSplit {
    pub fn test_is_empty(&self) -> bool {
        self.test_pairs == 0
    }
}

/// Random split of call/put pairs; both legs of a pair land on the same side.
pub fn split_pairs(snapshot: &MarketSnapshot, train_fraction: f64, seed: u64) -> Result<PairSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let (mut pairs, unpaired) = pair_contracts(snapshot);
    if pairs.is_empty() {
        return Err(Error::EmptyPairing);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let n_train = (train_fraction * pairs.len() as f64).round() as usize;
    let legs = |ps: &[ContractPair]| {
        ps.iter()
            .flat_map(|p| [p.call.clone(), p.put.clone()])
            .collect::<Vec<_>>()
    };
    let split = PairSplit {
        train: snapshot.with_contracts(legs(&pairs[..n_train])),
        test: snapshot.with_contracts(legs(&pairs[n_train..])),
        train_pairs: n_train,
        test_pairs: pairs.len() - n_train,
        unpaired,
    };
    if split.test_is_empty() {
        log::warn!("pair split assigned every pair to the training set");
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrikeSide {
    AtOrBelow,
    Above,
}

pub fn filter_strikes(snapshot: &MarketSnapshot, max_strike: f64, side: StrikeSide) -> MarketSnapshot {
    snapshot.filter(|c| match side {
        StrikeSide::AtOrBelow => c.strike() <= max_strike,
        StrikeSide::Above => c.strike() > max_strike,
    })
}

pub fn filter_atm_window(
    snapshot: &MarketSnapshot,
    strike_lo: f64,
    strike_hi: f64,
    maturity_lo: f64,
    maturity_hi: f64,
) -> Result<MarketSnapshot> {
    if !(strike_lo < strike_hi) || !(maturity_lo < maturity_hi) {
        return Err(Error::Argument(format!(
            "inverted window [{strike_lo}, {strike_hi}] x [{maturity_lo}, {maturity_hi}]"
        )));
    }
    Ok(snapshot
        .filter(|c| (strike_lo..=strike_hi).contains(&c.strike()) && (maturity_lo..=maturity_hi).contains(&c.maturity)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DividendPolicy {
    Constant(f64),
    TrailingYear,
}

/// Trailing one-year dividend sum over the closing price.
///
/// Dividends dated in `(as_of - 1 year, as_of]` are counted.
pub fn estimate_dividend_rate(dividends: &[(NaiveDate, f64)], close: f64, as_of: NaiveDate) -> Result<f64> {
    if !(close > 0.0) {
        return Err(Error::Argument(format!("closing price must be positive, got {close}")));
    }
    let from = as_of
        .checked_sub_months(Months::new(12))
        .ok_or_else(|| Error::Argument("date out of range".into()))?;
    let total: f64 = dividends
        .iter()
        .filter(|(d, _)| *d > from && *d <= as_of)
        .map(|(_, a)| a)
        .sum();
    Ok(total / close)
}

pub fn dividend_rate(
    policy: DividendPolicy,
    dividends: &[(NaiveDate, f64)],
    close: f64,
    as_of: NaiveDate,
) -> Result<f64> {
    match policy {
        DividendPolicy::Constant(d) => Ok(d),
        DividendPolicy::TrailingYear => estimate_dividend_rate(dividends, close, as_of),
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    date: String,
    style: String,
    payoff: String,
    strike: String,
    maturity_days: String,
    bid: String,
    ask: String,
    mid: String,
    spot: String,
    rate: String,
    dividend: String,
}

fn parse_num(row: usize, column: &str, s: &str) -> Result<Option<f64>> {
    let t = s.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|e| Error::Parse {
        row,
        column: column.into(),
        message: format!("`{t}`: {e}"),
    })
}

fn required(row: usize, column: &str, s: &str) -> Result<f64> {
    parse_num(row, column, s)?.ok_or_else(|| Error::Parse {
        row,
        column: column.into(),
        message: "missing value".into(),
    })
}

/// Rejected rows with their diagnostics.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub rejected: Vec<(usize, String)>,
    pub duplicates: usize,
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<(MarketSnapshot, LoadReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(file)
}

/// Parses a single-date snapshot; row numbers in diagnostics are 1-based
/// data rows.
pub fn read_snapshot(reader: impl Read) -> Result<(MarketSnapshot, LoadReport)> {
    let (mut days, report) = read_days(reader)?;
    if days.len() != 1 {
        return Err(Error::Parse {
            row: 0,
            column: "date".into(),
            message: format!("expected one snapshot date, found {}", days.len()),
        });
    }
    Ok((days.pop().expect("one day"), report))
}

pub fn load_days(path: impl AsRef<Path>) -> Result<(Vec<MarketSnapshot>, LoadReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_days(file)
}

type DayAcc = (MarketSnapshot, BTreeMap<(OptionKind, u64, i64, bool), usize>);

/// Parses a file holding one or more dates into snapshots ordered by date.
pub fn read_days(reader: impl Read) -> Result<(Vec<MarketSnapshot>, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    if header != expected {
        return Err(Error::Parse {
            row: 0,
            column: "header".into(),
            message: format!("expected `{CSV_HEADER}`, got `{}`", header.join(",")),
        });
    }
    let mut report = LoadReport::default();
    let mut by_date: BTreeMap<NaiveDate, DayAcc> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let row = i + 1;
        let r: Row = rec?;
        let date = NaiveDate::parse_from_str(r.date.trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
            row,
            column: "date".into(),
            message: e.to_string(),
        })?;
        let style = match r.style.trim() {
            "E" => ExerciseStyle::European,
            "A" => ExerciseStyle::American,
            other => {
                return Err(Error::Parse {
                    row,
                    column: "style".into(),
                    message: format!("expected E or A, got `{other}`"),
                })
            }
        };
        let kind = match r.payoff.trim() {
            "C" => OptionKind::Call,
            "P" => OptionKind::Put,
            other => {
                return Err(Error::Parse {
                    row,
                    column: "payoff".into(),
                    message: format!("expected C or P, got `{other}`"),
                })
            }
        };
        let strike = required(row, "strike", &r.strike)?;
        let days = required(row, "maturity_days", &r.maturity_days)?;
        let bid = parse_num(row, "bid", &r.bid)?;
        let ask = parse_num(row, "ask", &r.ask)?;
        let mid = parse_num(row, "mid", &r.mid)?;
        let spot = required(row, "spot", &r.spot)?;
        let rate = required(row, "rate", &r.rate)?;
        let dividend = required(row, "dividend", &r.dividend)?;
        let price = match (bid, ask, mid) {
            (Some(b), Some(a), _) => 0.5 * (b + a),
            (_, _, Some(m)) => m,
            (Some(p), None, None) | (None, Some(p), None) => p,
            (None, None, None) => {
                return Err(Error::Parse {
                    row,
                    column: "mid".into(),
                    message: "no price quoted".into(),
                })
            }
        };
        let (snap, by_key) = by_date
            .entry(date)
            .or_insert_with(|| (MarketSnapshot::new(date, spot, rate, dividend), BTreeMap::new()));
        if snap.spot != spot || snap.rate != rate || snap.dividend != dividend {
            return Err(Error::Parse {
                row,
                column: "spot".into(),
                message: "rows of one date must share spot, rate and dividend".into(),
            });
        }
        if !(strike > 0.0) || !(days > 0.0) || !(price > 0.0) || days.fract() != 0.0 {
            let msg = format!(
                "rejected: strike={strike}, maturity_days={days}, price={price} must be positive (days integral)"
            );
            log::warn!("row {row}: {msg}");
            report.rejected.push((row, msg));
            continue;
        }
        let contract = Contract::new(Payoff { kind, strike }, days / DAYS_PER_YEAR, style, price);
        match by_key.get(&contract.key()) {
            Some(&idx) => {
                log::warn!("row {row}: duplicate of `{}`; keeping the later row", contract.id);
                report.duplicates += 1;
                snap.contracts[idx] = contract;
            }
            None => {
                by_key.insert(contract.key(), snap.contracts.len());
                snap.contracts.push(contract);
            }
        }
    }
    let days: Vec<MarketSnapshot> = by_date
        .into_values()
        .map(|(s, _)| s)
        .filter(|s| !s.is_empty())
        .collect();
    if days.is_empty() {
        return Err(Error::EmptySnapshot);
    }
    Ok((days, report))
}

/// Writes the snapshot in the ingestion schema (bid/ask left empty).
pub fn write_snapshot(snapshot: &MarketSnapshot, mut out: impl Write) -> Result<()> {
    let mut text = String::new();
    text.push_str(CSV_HEADER);
    text.push('\n');
    for c in &snapshot.contracts {
        let style = match c.style {
            ExerciseStyle::European => "E",
            ExerciseStyle::American => "A",
            ExerciseStyle::Bermudan { .. } => {
                return Err(Error::Argument(format!(
                    "`{}`: Bermudan contracts have no CSV representation",
                    c.id
                )))
            }
        };
        text.push_str(&format!(
            "{},{},{},{},{},,,{},{},{},{}\n",
            snapshot.date.format("%Y-%m-%d"),
            style,
            c.kind().code(),
            c.strike(),
            c.maturity_days(),
            c.market_price,
            snapshot.spot,
            snapshot.rate,
            snapshot.dividend
        ));
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<snapshot writer>", e))
}

/// Writes several dates into one file, sharing a single header.
pub fn write_days(days: &[MarketSnapshot], mut out: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    for (i, d) in days.iter().enumerate() {
        let mut one = Vec::new();
        write_snapshot(d, &mut one)?;
        let skip = if i == 0 { 0 } else { CSV_HEADER.len() + 1 };
        buf.extend_from_slice(&one[skip..]);
    }
    if days.is_empty() {
        buf.extend_from_slice(format!("{CSV_HEADER}\n").as_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io("<snapshot writer>", e))
}

pub fn export_days(days: &[MarketSnapshot], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_days(days, std::io::BufWriter::new(file))
}

pub fn export_snapshot(snapshot: &MarketSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(snapshot, std::io::BufWriter::new(file))
}
