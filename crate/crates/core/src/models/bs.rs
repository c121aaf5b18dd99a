//! Black-Scholes closed forms: prices, deltas, maturity/strike derivatives
//! and implied volatility.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::market::OptionKind;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsInputs {
    pub spot: f64,
    pub strike: f64,
    pub maturity: f64,
    pub rate: f64,
    pub dividend: f64,
}

impl BsInputs {
    pub fn new(spot: f64, strike: f64, maturity: f64, rate: f64, dividend: f64) -> Self {
        BsInputs {
            spot,
            strike,
            maturity,
            rate,
            dividend,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.spot > 0.0 && self.strike > 0.0 && self.maturity > 0.0) {
            return Err(Error::Argument(format!(
                "Black-Scholes needs positive spot, strike and maturity, got {self:?}"
            )));
        }
        Ok(())
    }

    fn forward_discounted(&self) -> (f64, f64) {
        (
            self.spot * (-self.dividend * self.maturity).exp(),
            self.strike * (-self.rate * self.maturity).exp(),
        )
    }

    fn d1_d2(&self, sigma: f64) -> (f64, f64) {
        let sd = sigma * self.maturity.sqrt();
        let d1 =
            ((self.spot / self.strike).ln() + (self.rate - self.dividend + 0.5 * sigma * sigma) * self.maturity) / sd;
        (d1, d1 - sd)
    }
}

pub fn bs_price(x: &BsInputs, sigma: f64, kind: OptionKind) -> Result<f64> {
    x.check()?;
    let (fs, dk) = x.forward_discounted();
    let sigma = sigma.abs();
    if sigma == 0.0 {
        return Ok(match kind {
            OptionKind::Call => (fs - dk).max(0.0),
            OptionKind::Put => (dk - fs).max(0.0),
        });
    }
    let (d1, d2) = x.d1_d2(sigma);
    Ok(match kind {
        OptionKind::Call => fs * norm_cdf(d1) - dk * norm_cdf(d2),
        OptionKind::Put => dk * norm_cdf(-d2) - fs * norm_cdf(-d1),
    })
}

/// ∂P/∂S.
pub fn bs_delta(x: &BsInputs, sigma: f64, kind: OptionKind) -> Result<f64> {
    x.check()?;
    let q = (-x.dividend * x.maturity).exp();
    let sigma = sigma.abs();
    let n1 = if sigma == 0.0 {
        let (fs, dk) = x.forward_discounted();
        if fs > dk {
            1.0
        } else {
            0.0
        }
    } else {
        norm_cdf(x.d1_d2(sigma).0)
    };
    Ok(match kind {
        OptionKind::Call => q * n1,
        OptionKind::Put => q * (n1 - 1.0),
    })
}

/// ∂P/∂σ.
pub fn bs_vega(x: &BsInputs, sigma: f64) -> Result<f64> {
    x.check()?;
    let (fs, _) = x.forward_discounted();
    let (d1, _) = x.d1_d2(sigma.abs().max(1e-300));
    Ok(fs * norm_pdf(d1) * x.maturity.sqrt())
}

/// Call price with its maturity and strike derivatives `(C, C_T, C_K, C_KK)`.
pub fn bs_call_jet(x: &BsInputs, sigma: f64) -> Result<[f64; 4]> {
    x.check()?;
    let (fs, dk) = x.forward_discounted();
    let (d1, d2) = x.d1_d2(sigma);
    let sqrt_t = x.maturity.sqrt();
    let c = fs * norm_cdf(d1) - dk * norm_cdf(d2);
    let c_t = -x.dividend * fs * norm_cdf(d1) + x.rate * dk * norm_cdf(d2) + fs * norm_pdf(d1) * sigma / (2.0 * sqrt_t);
    let c_k = -(-x.rate * x.maturity).exp() * norm_cdf(d2);
    let c_kk = (-x.rate * x.maturity).exp() * norm_pdf(d2) / (x.strike * sigma * sqrt_t);
    Ok([c, c_t, c_k, c_kk])
}

/// Volatility reproducing `price`, by safeguarded Newton inside a bisection
/// bracket on [1e-6, 10].
pub fn bs_implied_vol(price: f64, x: &BsInputs, kind: OptionKind) -> Result<f64> {
    x.check()?;
    let (fs, dk) = x.forward_discounted();
    let (lower, upper) = match kind {
        OptionKind::Call => ((fs - dk).max(0.0), fs),
        OptionKind::Put => ((dk - fs).max(0.0), dk),
    };
    if !price.is_finite() || price <= lower || price >= upper {
        return Err(Error::NoSolution {
            price,
            reason: format!("outside the no-arbitrage interval ({lower}, {upper})"),
        });
    }
    let f = |s: f64| bs_price(x, s, kind).map(|p| p - price);
    let (mut lo, mut hi) = (1e-6, 10.0);
    if f(lo)? > 0.0 || f(hi)? < 0.0 {
        return Err(Error::NoSolution {
            price,
            reason: "volatility outside [1e-6, 10]".into(),
        });
    }
    let tol = 1e-12 * x.spot;
    let mut sigma = 0.2;
    for _ in 0..200 {
        let g = f(sigma)?;
        if g.abs() <= tol {
            return Ok(sigma);
        }
        if g > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        let vega = bs_vega(x, sigma)?;
        let newton = sigma - g / vega;
        sigma = if vega > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(sigma)
}
