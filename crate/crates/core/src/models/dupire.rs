//! Dupire's local variance from a call-price surface.
//!
//! σ²(K, T) = 2 (C_T + (r − d) K C_K + d C) / (K² C_KK)
//!
//! The quotient is clamped to [`VAR_MIN`, `VAR_MAX`]. A dimensionless strike
//! convexity `K·C_KK` at or below `CONVEXITY_EPS` is treated as a clamp to
//! `VAR_MIN`.

use serde::{Deserialize, Serialize};

use super::bs::{bs_call_jet, bs_price, BsInputs};
use crate::error::{Error, Result};
use crate::market::OptionKind;
use crate::net::Real;

pub const VAR_MIN: f64 = 1e-6;
pub const VAR_MAX: f64 = 4.0;
pub const CONVEXITY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clamp {
    None,
    Floor,
    Cap,
    Convexity,
}

#[derive(Clone, Copy, Debug)]
pub struct LocalVariance<R> {
    pub var: R,
    pub clamp: Clamp,
}

/// Dupire quotient on normalized inputs: `k = K/scale`, `c = C/scale` and its
/// derivatives in `(k, T)`. The formula is invariant under this scaling.
pub fn dupire_variance<R: Real>(c: R, c_t: R, c_k: R, c_kk: R, k: R, rate: f64, dividend: f64) -> LocalVariance<R> {
    if !((k * c_kk).value() > CONVEXITY_EPS) {
        return LocalVariance {
            var: R::cst(VAR_MIN),
            clamp: Clamp::Convexity,
        };
    }
    let num = c_t + k * c_k * (rate - dividend) + c * dividend;
    let var = num * 2.0 / (k * k * c_kk);
    let v = var.value();
    if !(v >= VAR_MIN) {
        LocalVariance {
            var: R::cst(VAR_MIN),
            clamp: Clamp::Floor,
        }
    } else if v > VAR_MAX {
        LocalVariance {
            var: R::cst(VAR_MAX),
            clamp: Clamp::Cap,
        }
    } else {
        LocalVariance {
            var,
            clamp: Clamp::None,
        }
    }
}

/// A call-price surface that can report `(C, C_T, C_K, C_KK)`.
pub trait CallSurface {
    fn call_jet(&self, strike: f64, maturity: f64) -> Result<[f64; 4]>;
}

/// Dupire local variance at `(K, T)` of any call surface.
pub fn dupire_local_vol(
    surface: &dyn CallSurface,
    strike: f64,
    maturity: f64,
    rate: f64,
    dividend: f64,
) -> Result<LocalVariance<f64>> {
    if !(strike > 0.0 && maturity > 0.0) {
        return Err(Error::Argument(format!(
            "Dupire needs positive strike and maturity, got K={strike}, T={maturity}"
        )));
    }
    let [c, ct, ck, ckk] = surface.call_jet(strike, maturity)?;
    Ok(dupire_variance(
        c / strike,
        ct / strike,
        ck,
        ckk * strike,
        1.0,
        rate,
        dividend,
    ))
}

/// Analytic Black-Scholes call surface at constant volatility.
#[derive(Clone, Copy, Debug)]
pub struct BsSurface {
    pub spot: f64,
    pub rate: f64,
    pub dividend: f64,
    pub sigma: f64,
}

impl CallSurface for BsSurface {
    fn call_jet(&self, strike: f64, maturity: f64) -> Result<[f64; 4]> {
        bs_call_jet(
            &BsInputs::new(self.spot, strike, maturity, self.rate, self.dividend),
            self.sigma,
        )
    }
}

/// Call prices on a rectangular (strike, maturity) grid; derivatives by
/// central differences at interior nodes.
#[derive(Clone, Debug)]
pub struct TabulatedSurface {
    strikes: Vec<f64>,
    maturities: Vec<f64>,
    // prices[j][i] at maturity j, strike i
    prices: Vec<Vec<f64>>,
}

impl TabulatedSurface {
    pub fn new(strikes: Vec<f64>, maturities: Vec<f64>, prices: Vec<Vec<f64>>) -> Result<Self> {
        check_axis("strikes", &strikes, 3)?;
        check_axis("maturities", &maturities, 3)?;
        if prices.len() != maturities.len() || prices.iter().any(|r| r.len() != strikes.len()) {
            return Err(Error::Argument("price table does not match the axes".into()));
        }
        if prices.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Argument("price table has non-finite entries".into()));
        }
        Ok(TabulatedSurface {
            strikes,
            maturities,
            prices,
        })
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    /// Derivatives at node `(i, j)`; requires an interior node.
    pub fn node_jet(&self, i: usize, j: usize) -> Result<[f64; 4]> {
        let (ns, nt) = (self.strikes.len(), self.maturities.len());
        if i == 0 || j == 0 || i + 1 >= ns || j + 1 >= nt {
            return Err(Error::Argument(format!("node ({i}, {j}) is not interior")));
        }
        let p = &self.prices;
        let k = &self.strikes;
        let t = &self.maturities;
        let (hl, hr) = (k[i] - k[i - 1], k[i + 1] - k[i]);
        let c_k = (p[j][i + 1] - p[j][i - 1]) / (hl + hr);
        let c_kk = 2.0 * (p[j][i + 1] * hl - p[j][i] * (hl + hr) + p[j][i - 1] * hr) / (hl * hr * (hl + hr));
        let c_t = (p[j + 1][i] - p[j - 1][i]) / (t[j + 1] - t[j - 1]);
        Ok([p[j][i], c_t, c_k, c_kk])
    }
}

impl CallSurface for TabulatedSurface {
    /// Exact node lookup; off-node queries are an argument error.
    fn call_jet(&self, strike: f64, maturity: f64) -> Result<[f64; 4]> {
        let find = |axis: &[f64], v: f64| axis.iter().position(|&a| (a - v).abs() <= 1e-12 * a.abs().max(1.0));
        match (find(&self.strikes, strike), find(&self.maturities, maturity)) {
            (Some(i), Some(j)) => self.node_jet(i, j),
            _ => Err(Error::Argument(format!(
                "({strike}, {maturity}) is not a node of the tabulated surface"
            ))),
        }
    }
}

fn check_axis(name: &str, axis: &[f64], min: usize) -> Result<()> {
    if axis.len() < min {
        return Err(Error::Argument(format!("{name} needs at least {min} points")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument(format!(
            "{name} must be finite and strictly increasing"
        )));
    }
    Ok(())
}

/// Implied volatility quotes on a (strike, maturity) grid.
///
/// Strike interpolation is a monotone (Fritsch-Carlson) cubic per maturity,
/// flat beyond the quoted strikes; maturities are interpolated linearly in
/// total variance σ²T, with constant volatility before the first maturity
/// and flat total-variance growth after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolSurface {
    pub spot: f64,
    pub rate: f64,
    pub dividend: f64,
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    /// `vols[j][i]` at maturity j, strike i.
    pub vols: Vec<Vec<f64>>,
}

impl VolSurface {
    pub fn new(
        spot: f64,
        rate: f64,
        dividend: f64,
        strikes: Vec<f64>,
        maturities: Vec<f64>,
        vols: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let s = VolSurface {
            spot,
            rate,
            dividend,
            strikes,
            maturities,
            vols,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("strikes", &self.strikes, 2)?;
        check_axis("maturities", &self.maturities, 1)?;
        if self.maturities[0] <= 0.0 || !(self.spot > 0.0) {
            return Err(Error::Argument("maturities and spot must be positive".into()));
        }
        if self.vols.len() != self.maturities.len() || self.vols.iter().any(|r| r.len() != self.strikes.len()) {
            return Err(Error::Argument("vol table does not match the axes".into()));
        }
        if self.vols.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Argument("implied vols must be finite and positive".into()));
        }
        Ok(())
    }

    /// Flat surface at one volatility.
    pub fn flat(
        spot: f64,
        rate: f64,
        dividend: f64,
        sigma: f64,
        strikes: Vec<f64>,
        maturities: Vec<f64>,
    ) -> Result<Self> {
        let vols = vec![vec![sigma; strikes.len()]; maturities.len()];
        Self::new(spot, rate, dividend, strikes, maturities, vols)
    }

    pub fn implied_vol(&self, strike: f64, maturity: f64) -> f64 {
        let row = |j: usize| monotone_cubic(&self.strikes, &self.vols[j], strike);
        let t = &self.maturities;
        if maturity <= t[0] {
            return row(0);
        }
        let n = t.len();
        if maturity >= t[n - 1] {
            return row(n - 1);
        }
        let j = t.partition_point(|&x| x <= maturity) - 1;
        let (w0, w1) = (row(j).powi(2) * t[j], row(j + 1).powi(2) * t[j + 1]);
        let a = (maturity - t[j]) / (t[j + 1] - t[j]);
        ((w0 + a * (w1 - w0)) / maturity).sqrt()
    }

    pub fn call_price(&self, strike: f64, maturity: f64) -> Result<f64> {
        bs_price(
            &BsInputs::new(self.spot, strike, maturity, self.rate, self.dividend),
            self.implied_vol(strike, maturity),
            OptionKind::Call,
        )
    }
}

impl CallSurface for VolSurface {
    fn call_jet(&self, strike: f64, maturity: f64) -> Result<[f64; 4]> {
        let hk = 1e-3 * strike;
        let ht = 1e-4_f64.min(0.5 * maturity);
        let c = self.call_price(strike, maturity)?;
        let cp = self.call_price(strike + hk, maturity)?;
        let cm = self.call_price(strike - hk, maturity)?;
        let tp = self.call_price(strike, maturity + ht)?;
        let tm = self.call_price(strike, maturity - ht)?;
        Ok([
            c,
            (tp - tm) / (2.0 * ht),
            (cp - cm) / (2.0 * hk),
            (cp - 2.0 * c + cm) / (hk * hk),
        ])
    }
}

/// Fritsch-Carlson monotone cubic Hermite interpolation, flat outside.
pub fn monotone_cubic(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let slope = |i: usize| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
    let tangent = |i: usize| -> f64 {
        if i == 0 {
            return slope(0);
        }
        if i == n - 1 {
            return slope(n - 2);
        }
        let (a, b) = (slope(i - 1), slope(i));
        if a * b <= 0.0 {
            0.0
        } else {
            // weighted harmonic mean keeps the interpolant monotone
            let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
            let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
            (w1 + w2) / (w1 / a + w2 / b)
        }
    };
    let i = xs.partition_point(|&v| v <= x) - 1;
    let h = xs[i + 1] - xs[i];
    let u = (x - xs[i]) / h;
    let (m0, m1) = (tangent(i), tangent(i + 1));
    let (u2, u3) = (u * u, u * u * u);
    (2.0 * u3 - 3.0 * u2 + 1.0) * ys[i]
        + (u3 - 2.0 * u2 + u) * h * m0
        + (-2.0 * u3 + 3.0 * u2) * ys[i + 1]
        + (u3 - u2) * h * m1
}

/// Local volatility precomputed on a (spot, time) grid, read back by
/// bilinear interpolation with flat extrapolation.
#[derive(Clone, Debug)]
pub struct LocalVolTable {
    spots: Vec<f64>,
    times: Vec<f64>,
    // vols[j * spots.len() + i]
    vols: Vec<f64>,
    clamped: usize,
}

impl LocalVolTable {
    pub fn build(
        surface: &dyn CallSurface,
        spots: Vec<f64>,
        times: Vec<f64>,
        rate: f64,
        dividend: f64,
    ) -> Result<Self> {
        check_axis("spots", &spots, 2)?;
        check_axis("times", &times, 2)?;
        if spots[0] <= 0.0 || times[0] <= 0.0 {
            return Err(Error::Argument("local vol table needs positive axes".into()));
        }
        let mut vols = Vec::with_capacity(spots.len() * times.len());
        let mut clamped = 0;
        for &t in &times {
            for &s in &spots {
                let lv = dupire_local_vol(surface, s, t, rate, dividend)?;
                if lv.clamp != Clamp::None {
                    clamped += 1;
                }
                vols.push(lv.var.sqrt());
            }
        }
        if clamped > 0 {
            log::warn!("local vol table: {clamped} of {} nodes clamped", vols.len());
        }
        Ok(LocalVolTable {
            spots,
            times,
            vols,
            clamped,
        })
    }

    /// Table on a log-spaced spot axis around `spot` and a uniform time axis.
    pub fn for_surface(surface: &VolSurface, horizon: f64) -> Result<Self> {
        let spots: Vec<f64> = (0..=120)
            .map(|i| surface.spot * (0.2f64.ln() + (5.0f64.ln() - 0.2f64.ln()) * i as f64 / 120.0).exp())
            .collect();
        let nt = 60;
        let times: Vec<f64> = (1..=nt).map(|j| horizon * j as f64 / nt as f64).collect();
        Self::build(surface, spots, times, surface.rate, surface.dividend)
    }

    pub fn clamped_nodes(&self) -> usize {
        self.clamped
    }

    pub fn vol(&self, s: f64, t: f64) -> f64 {
        let (ia, wa) = bracket(&self.spots, s);
        let (ja, wb) = bracket(&self.times, t);
        let n = self.spots.len();
        let at = |i: usize, j: usize| self.vols[j * n + i];
        let (ib, jb) = ((ia + 1).min(n - 1), (ja + 1).min(self.times.len() - 1));
        let lo = at(ia, ja) * (1.0 - wa) + at(ib, ja) * wa;
        let hi = at(ia, jb) * (1.0 - wa) + at(ib, jb) * wa;
        lo * (1.0 - wb) + hi * wb
    }
}

fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 1, 0.0);
    }
    let i = axis.partition_point(|&v| v <= x) - 1;
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}
