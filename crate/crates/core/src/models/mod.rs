//! Classical and neural SDE specifications.
//!
//! Every model exposes drift and diffusion coefficients of `(s, y, t; θ)`
//! through the [`Sde`] trait, generic over [`Real`] so the same code runs on
//! plain floats and on tape variables. One-dimensional models report
//! `μ_Y = σ_Y = 0`.
//!
//! Neural coefficients are evaluated on normalized inputs: prices are divided
//! by `MarketEnv::scale`, and the 2-D networks see `t / horizon`. The call
//! network of the Dupire-based models sees `(K / scale, T)` and returns
//! `C / scale`.

pub mod bs;
pub mod dupire;
pub mod nnlv;

use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketSnapshot;
use crate::net::{softplus, Checkpoint, Mlp, ParamVector, Real};

pub use bs::{bs_call_jet, bs_delta, bs_implied_vol, bs_price, bs_vega, norm_cdf, norm_pdf, BsInputs};
pub use dupire::{
    dupire_local_vol, dupire_variance, BsSurface, CallSurface, Clamp, LocalVariance, LocalVolTable, TabulatedSurface,
    VolSurface,
};
pub use nnlv::{nnlv_fit, NnlvConfig, NnlvFit};

pub const MODEL_FORMAT: &str = "nsde-model/1";

/// Market constants a model is simulated under.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketEnv {
    /// Simulation start `s0`.
    pub spot: f64,
    pub rate: f64,
    pub dividend: f64,
    /// Price normalization for network inputs and objectives.
    pub scale: f64,
    /// Time normalization for the 2-D networks.
    pub horizon: f64,
}

impl MarketEnv {
    pub fn new(spot: f64, rate: f64, dividend: f64) -> Self {
        MarketEnv {
            spot,
            rate,
            dividend,
            scale: if spot > 0.0 { spot } else { 1.0 },
            horizon: 1.0,
        }
    }

    pub fn from_snapshot(snap: &MarketSnapshot) -> Self {
        let h = snap.max_maturity();
        MarketEnv::new(snap.spot, snap.rate, snap.dividend).with_horizon(if h > 0.0 { h } else { 1.0 })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_spot(mut self, spot: f64) -> Self {
        self.spot = spot;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.spot.is_finite()
            && self.spot >= 0.0
            && self.rate.is_finite()
            && self.dividend.is_finite()
            && self.scale > 0.0
            && self.scale.is_finite()
            && self.horizon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid market environment {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coeffs<R> {
    pub mu_s: R,
    pub sigma_s: R,
    pub mu_y: R,
    pub sigma_y: R,
}

impl<R: Real> Coeffs<R> {
    pub fn one_dim(mu_s: R, sigma_s: R) -> Self {
        Coeffs {
            mu_s,
            sigma_s,
            mu_y: R::cst(0.0),
            sigma_y: R::cst(0.0),
        }
    }

    pub fn value(&self) -> Coeffs<f64> {
        Coeffs {
            mu_s: self.mu_s.value(),
            sigma_s: self.sigma_s.value(),
            mu_y: self.mu_y.value(),
            sigma_y: self.sigma_y.value(),
        }
    }

    fn is_finite(&self) -> bool {
        self.mu_s.value().is_finite()
            && self.sigma_s.value().is_finite()
            && self.mu_y.value().is_finite()
            && self.sigma_y.value().is_finite()
    }
}

/// Interface the simulators and solvers need from a model.
pub trait Sde: Sync {
    /// 1 for price-only models, 2 with a latent state.
    fn dim(&self) -> usize;
    fn env(&self) -> &MarketEnv;
    fn params(&self) -> &[f64];
    fn set_params(&mut self, values: &[f64]) -> Result<()>;
    fn coeffs<R: Real>(&self, theta: &[R], s: R, y: R, t: f64) -> Result<Coeffs<R>>;

    fn rho<R: Real>(&self, _theta: &[R]) -> R {
        R::cst(0.0)
    }

    fn y0<R: Real>(&self, _theta: &[R]) -> R {
        R::cst(0.0)
    }

    /// Whether a price path that reaches 0 stays there.
    fn absorbing_at_zero(&self) -> bool {
        true
    }

    /// Default latent-state domain for grid solvers.
    fn y_domain(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    /// Whether the coefficients ignore `t`; lets grid solvers evaluate them
    /// once instead of at every time step.
    fn time_homogeneous(&self) -> bool {
        false
    }
}

/// Natural Heston parameters (the parameter vector stores unconstrained
/// pre-images: softplus for `y0, alpha, m, k` and tanh for `rho`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub y0: f64,
    pub alpha: f64,
    pub m: f64,
    pub k: f64,
    pub rho: f64,
}

impl HestonParams {
    pub fn feller(&self) -> bool {
        2.0 * self.alpha * self.m > self.k * self.k
    }

    fn validate(&self) -> Result<()> {
        if [self.y0, self.alpha, self.m, self.k]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
            && self.rho > -1.0
            && self.rho < 1.0
        {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "Heston parameters need positive y0, alpha, m, k and |rho| < 1, got {self:?}"
            )))
        }
    }
}

/// Structural description of a model, without parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    BlackScholes,
    DupireLv { surface: VolSurface },
    Nnlv { call: Mlp },
    Sdenn { call: Mlp },
    SdennDrift { drift: Mlp, call: Mlp },
    Heston,
    TwoDnn { net: Mlp },
    TwoDnnHeston { net: Mlp },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::BlackScholes => "bs",
            ModelSpec::DupireLv { .. } => "dupire-lv",
            ModelSpec::Nnlv { .. } => "nnlv",
            ModelSpec::Sdenn { .. } => "sdenn",
            ModelSpec::SdennDrift { .. } => "sdenn-drift",
            ModelSpec::Heston => "heston",
            ModelSpec::TwoDnn { .. } => "2d-nn",
            ModelSpec::TwoDnnHeston { .. } => "2d-nn-heston",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Heston | ModelSpec::TwoDnn { .. } | ModelSpec::TwoDnnHeston { .. } => 2,
            _ => 1,
        }
    }

    fn check_nets(&self) -> Result<()> {
        let want = |net: &Mlp, i: usize, o: usize, what: &str| {
            if net.input_dim() == i && net.output_dim() == o {
                Ok(())
            } else {
                Err(Error::Argument(format!(
                    "{what} network must map {i} inputs to {o} outputs, got {:?}",
                    net.dims()
                )))
            }
        };
        match self {
            ModelSpec::Nnlv { call } | ModelSpec::Sdenn { call } => want(call, 2, 1, "call"),
            ModelSpec::SdennDrift { drift, call } => {
                want(drift, 2, 1, "drift")?;
                want(call, 2, 1, "call")
            }
            ModelSpec::TwoDnn { net } => want(net, 3, 4, "2d-nn"),
            ModelSpec::TwoDnnHeston { net } => want(net, 3, 2, "2d-nn-heston"),
            _ => Ok(()),
        }
    }
}

// cached parameter offsets, so coefficient evaluation never searches the layout
#[derive(Clone, Debug, Default)]
struct Offsets {
    a: Range<usize>,
    b: Range<usize>,
    // sigma | rho_raw | y0
    s: [usize; 2],
    // y0, alpha, m, k, rho (raw)
    heston: [usize; 5],
}

const HESTON_NAMES: [&str; 5] = ["y0_raw", "alpha_raw", "m_raw", "k_raw", "rho_raw"];

/// A concrete model: structure, market environment and parameters.
#[derive(Clone, Debug)]
pub struct SdeModel {
    spec: ModelSpec,
    env: MarketEnv,
    params: ParamVector,
    off: Offsets,
    local_vol: Option<Arc<LocalVolTable>>,
    clamps: Arc<AtomicU64>,
}

pub fn inv_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp_m1().ln()
    }
}

fn sqrt_pos<R: Real>(y: R) -> R {
    if y.value() > 0.0 {
        y.sqrt()
    } else {
        R::cst(0.0)
    }
}

fn push_heston(pv: &mut ParamVector, h: &HestonParams) {
    pv.push_scalar(HESTON_NAMES[0], inv_softplus(h.y0));
    pv.push_scalar(HESTON_NAMES[1], inv_softplus(h.alpha));
    pv.push_scalar(HESTON_NAMES[2], inv_softplus(h.m));
    pv.push_scalar(HESTON_NAMES[3], inv_softplus(h.k));
    pv.push_scalar(HESTON_NAMES[4], h.rho.atanh());
}

impl SdeModel {
    /// Assembles a model from a spec and a parameter vector whose layout
    /// must match the spec.
    pub fn from_parts(spec: ModelSpec, env: MarketEnv, params: ParamVector) -> Result<Self> {
        env.validate()?;
        spec.check_nets()?;
        let find_net = |name: &str, net: &Mlp| -> Result<Range<usize>> {
            let r = params
                .net_range(name)
                .ok_or_else(|| Error::Config(format!("parameter vector lacks network `{name}`")))?;
            if r.len() != net.n_params() {
                return Err(Error::InputShape {
                    expected: net.n_params(),
                    got: r.len(),
                });
            }
            Ok(r)
        };
        let find = |name: &str| {
            params
                .scalar_index(name)
                .ok_or_else(|| Error::Config(format!("parameter vector lacks scalar `{name}`")))
        };
        let heston = || -> Result<[usize; 5]> {
            let mut out = [0; 5];
            for (o, n) in out.iter_mut().zip(HESTON_NAMES) {
                *o = find(n)?;
            }
            Ok(out)
        };
        let mut off = Offsets::default();
        let mut local_vol = None;
        match &spec {
            ModelSpec::BlackScholes => off.s[0] = find("sigma")?,
            ModelSpec::DupireLv { surface } => {
                surface.validate()?;
                local_vol = Some(Arc::new(LocalVolTable::for_surface(
                    surface,
                    env.horizon.max(1.0 / 365.0),
                )?));
            }
            ModelSpec::Nnlv { call } | ModelSpec::Sdenn { call } => off.a = find_net("call", call)?,
            ModelSpec::SdennDrift { drift, call } => {
                off.a = find_net("call", call)?;
                off.b = find_net("drift", drift)?;
            }
            ModelSpec::Heston => off.heston = heston()?,
            ModelSpec::TwoDnn { net } => {
                off.a = find_net("f", net)?;
                off.s = [find("rho_raw")?, find("y0")?];
            }
            ModelSpec::TwoDnnHeston { net } => {
                off.a = find_net("g", net)?;
                off.heston = heston()?;
            }
        }
        Ok(SdeModel {
            spec,
            env,
            params,
            off,
            local_vol,
            clamps: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn black_scholes(env: MarketEnv, sigma: f64) -> Result<Self> {
        let mut pv = ParamVector::new();
        pv.push_scalar("sigma", sigma);
        Self::from_parts(ModelSpec::BlackScholes, env, pv)
    }

    pub fn dupire_lv(env: MarketEnv, surface: VolSurface) -> Result<Self> {
        Self::from_parts(ModelSpec::DupireLv { surface }, env, ParamVector::new())
    }

    pub fn nnlv(env: MarketEnv, call: Mlp, values: &[f64]) -> Result<Self> {
        let mut pv = ParamVector::new();
        pv.push_net("call", &call, values)?;
        Self::from_parts(ModelSpec::Nnlv { call }, env, pv)
    }

    pub fn sdenn(env: MarketEnv, call: Mlp, values: &[f64]) -> Result<Self> {
        let mut pv = ParamVector::new();
        pv.push_net("call", &call, values)?;
        Self::from_parts(ModelSpec::Sdenn { call }, env, pv)
    }

    pub fn sdenn_drift(
        env: MarketEnv,
        drift: Mlp,
        drift_values: &[f64],
        call: Mlp,
        call_values: &[f64],
    ) -> Result<Self> {
        let mut pv = ParamVector::new();
        pv.push_net("call", &call, call_values)?;
        pv.push_net("drift", &drift, drift_values)?;
        Self::from_parts(ModelSpec::SdennDrift { drift, call }, env, pv)
    }

    pub fn heston(env: MarketEnv, h: HestonParams) -> Result<Self> {
        h.validate()?;
        let mut pv = ParamVector::new();
        push_heston(&mut pv, &h);
        Self::from_parts(ModelSpec::Heston, env, pv)
    }

    pub fn two_dnn(env: MarketEnv, net: Mlp, values: &[f64], rho: f64, y0: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0 && y0.is_finite()) {
            return Err(Error::Argument(format!(
                "need |rho| < 1 and finite y0, got {rho}, {y0}"
            )));
        }
        let mut pv = ParamVector::new();
        pv.push_net("f", &net, values)?;
        pv.push_scalar("rho_raw", rho.atanh());
        pv.push_scalar("y0", y0);
        Self::from_parts(ModelSpec::TwoDnn { net }, env, pv)
    }

    pub fn two_dnn_heston(env: MarketEnv, net: Mlp, values: &[f64], h: HestonParams) -> Result<Self> {
        h.validate()?;
        let mut pv = ParamVector::new();
        pv.push_net("g", &net, values)?;
        push_heston(&mut pv, &h);
        Self::from_parts(ModelSpec::TwoDnnHeston { net }, env, pv)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    pub fn param_vector(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_env(mut self, env: MarketEnv) -> Result<Self> {
        env.validate()?;
        let rebuild = matches!(self.spec, ModelSpec::DupireLv { .. }) && env.horizon != self.env.horizon;
        self.env = env;
        if rebuild {
            return Self::from_parts(self.spec, self.env, self.params);
        }
        Ok(self)
    }

    /// Number of Dupire evaluations clamped since construction.
    pub fn dupire_clamps(&self) -> u64 {
        self.clamps.load(Ordering::Relaxed)
    }

    pub fn heston_params(&self) -> Option<HestonParams> {
        match self.spec {
            ModelSpec::Heston | ModelSpec::TwoDnnHeston { .. } => {
                let v = self.params.values();
                let h = &self.off.heston;
                Some(HestonParams {
                    y0: softplus(v[h[0]]),
                    alpha: softplus(v[h[1]]),
                    m: softplus(v[h[2]]),
                    k: softplus(v[h[3]]),
                    rho: v[h[4]].tanh(),
                })
            }
            _ => None,
        }
    }

    /// Heston Feller diagnostic `2αm > k²`.
    pub fn feller(&self) -> Option<bool> {
        self.heston_params().map(|h| h.feller())
    }

    /// Coefficients and correlation at the current parameters.
    pub fn coeffs_at(&self, s: f64, y: f64, t: f64) -> Result<(Coeffs<f64>, f64)> {
        let th = self.params.values();
        Ok((self.coeffs(th, s, y, t)?, self.rho(th)))
    }

    fn dupire_sigma<R: Real>(&self, call: &Mlp, th: &[R], s: R, t: f64) -> Result<R> {
        if s.value() <= 0.0 {
            return Ok(R::cst(0.0));
        }
        let k = s / self.env.scale;
        let jet = call.forward_jet(th, &[k, R::cst(t)], 0, 1, 0)?;
        let lv = dupire_variance(jet.value, jet.db, jet.da, jet.daa, k, self.env.rate, self.env.dividend);
        if lv.clamp != Clamp::None {
            self.clamps.fetch_add(1, Ordering::Relaxed);
        }
        Ok(lv.var.sqrt())
    }

    fn heston_y<R: Real>(&self, th: &[R], y: R) -> (R, R) {
        let h = &self.off.heston;
        let alpha = th[h[1]].softplus();
        let m = th[h[2]].softplus();
        let k = th[h[3]].softplus();
        (alpha * (m - y), k * sqrt_pos(y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = ModelCheckpoint {
            format: MODEL_FORMAT.to_string(),
            model: self.spec.clone(),
            env: self.env,
            rho: self.rho(self.params.values()),
            y0: self.y0(self.params.values()),
            params: self.params.to_checkpoint()?,
        };
        let json = serde_json::to_string_pretty(&ck)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: ModelCheckpoint = serde_json::from_str(&text)?;
        if ck.format != MODEL_FORMAT {
            return Err(Error::Config(format!("unsupported model format `{}`", ck.format)));
        }
        let params = ParamVector::from_checkpoint(&ck.params)?;
        Self::from_parts(ck.model, ck.env, params)
    }
}

/// On-disk model: header plus the parameter checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub model: ModelSpec,
    pub env: MarketEnv,
    /// Informational; the authoritative values live in `params`.
    pub rho: f64,
    pub y0: f64,
    pub params: Checkpoint,
}

impl Sde for SdeModel {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn env(&self) -> &MarketEnv {
        &self.env
    }

    fn params(&self) -> &[f64] {
        self.params.values()
    }

    fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.params.set_values(values)
    }

    fn coeffs<R: Real>(&self, th: &[R], s: R, y: R, t: f64) -> Result<Coeffs<R>> {
        let e = &self.env;
        let carry = e.rate - e.dividend;
        let c = match &self.spec {
            ModelSpec::BlackScholes => {
                let sig = th[self.off.s[0]];
                Coeffs::one_dim(s * carry, sig.max(-sig) * s)
            }
            ModelSpec::DupireLv { .. } => {
                let table = self.local_vol.as_ref().expect("built with the model");
                let v = table.vol(s.value(), t);
                Coeffs::one_dim(s * carry, s * v)
            }
            ModelSpec::Nnlv { call } | ModelSpec::Sdenn { call } => {
                let sig = self.dupire_sigma(call, &th[self.off.a.clone()], s, t)?;
                Coeffs::one_dim(s * carry, sig * s)
            }
            ModelSpec::SdennDrift { drift, call } => {
                let sig = self.dupire_sigma(call, &th[self.off.a.clone()], s, t)?;
                let x = [s / e.scale, R::cst(t / e.horizon)];
                let mu = drift.forward(&th[self.off.b.clone()], &x)?[0];
                Coeffs::one_dim(mu * s, sig * s)
            }
            ModelSpec::Heston => Coeffs {
                mu_s: s * carry,
                sigma_s: sqrt_pos(y) * s,
                mu_y: self.heston_y(th, y).0,
                sigma_y: self.heston_y(th, y).1,
            },
            ModelSpec::TwoDnn { net } => {
                let x = [s / e.scale, y, R::cst(t / e.horizon)];
                let f = net.forward(&th[self.off.a.clone()], &x)?;
                Coeffs {
                    mu_s: f[0] * e.scale,
                    sigma_s: f[1].softplus() * e.scale,
                    mu_y: f[2],
                    sigma_y: f[3].softplus(),
                }
            }
            ModelSpec::TwoDnnHeston { net } => {
                let x = [s / e.scale, y, R::cst(t / e.horizon)];
                let g = net.forward(&th[self.off.a.clone()], &x)?;
                let (mu_y, sigma_y) = self.heston_y(th, y);
                Coeffs {
                    mu_s: g[0] * s,
                    sigma_s: g[1].softplus() * s,
                    mu_y,
                    sigma_y,
                }
            }
        };
        if !c.is_finite() {
            return Err(Error::Numeric {
                s: s.value(),
                y: y.value(),
                t,
                message: format!("non-finite {} coefficient", self.name()),
            });
        }
        Ok(c)
    }

    fn rho<R: Real>(&self, th: &[R]) -> R {
        match self.spec {
            ModelSpec::Heston | ModelSpec::TwoDnnHeston { .. } => th[self.off.heston[4]].tanh(),
            ModelSpec::TwoDnn { .. } => th[self.off.s[0]].tanh(),
            _ => R::cst(0.0),
        }
    }

    fn y0<R: Real>(&self, th: &[R]) -> R {
        match self.spec {
            ModelSpec::Heston | ModelSpec::TwoDnnHeston { .. } => th[self.off.heston[0]].softplus(),
            ModelSpec::TwoDnn { .. } => th[self.off.s[1]],
            _ => R::cst(0.0),
        }
    }

    fn y_domain(&self) -> (f64, f64) {
        match self.spec {
            ModelSpec::TwoDnn { .. } => (-3.0, 3.0),
            ModelSpec::Heston | ModelSpec::TwoDnnHeston { .. } => {
                let h = self.heston_params().expect("Heston parameters");
                (0.0, (6.0 * h.y0.max(h.m)).clamp(0.1, 1.0))
            }
            _ => (0.0, 1.0),
        }
    }

    fn time_homogeneous(&self) -> bool {
        matches!(self.spec, ModelSpec::BlackScholes | ModelSpec::Heston)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tape;

    fn env() -> MarketEnv {
        MarketEnv::new(100.0, 0.0, 0.0)
    }

    #[test]
    fn black_scholes_coefficients() {
        let m = SdeModel::black_scholes(env(), 0.2).unwrap();
        let (c, rho) = m.coeffs_at(100.0, 0.0, 0.3).unwrap();
        assert_eq!((c.mu_s, c.sigma_s, c.mu_y, c.sigma_y, rho), (0.0, 20.0, 0.0, 0.0, 0.0));
        let m = SdeModel::black_scholes(MarketEnv::new(100.0, 0.05, 0.02), -0.2).unwrap();
        let (c, _) = m.coeffs_at(50.0, 0.0, 0.0).unwrap();
        assert!((c.mu_s - 1.5).abs() < 1e-12);
        assert_eq!(c.sigma_s, 10.0);
    }

    #[test]
    fn zero_two_dnn_gives_softplus_of_zero() {
        let net = Mlp::new(vec![3, 5, 4]).unwrap();
        let m = SdeModel::two_dnn(
            MarketEnv::new(1.0, 0.0, 0.0),
            net.clone(),
            &vec![0.0; net.n_params()],
            0.3,
            0.1,
        )
        .unwrap();
        let (c, rho) = m.coeffs_at(1.3, 0.2, 0.5).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(c.mu_s, 0.0);
        assert!((c.sigma_s - ln2).abs() < 1e-15);
        assert_eq!(c.mu_y, 0.0);
        assert!((c.sigma_y - ln2).abs() < 1e-15);
        assert!((rho - 0.3).abs() < 1e-15);
        assert_eq!(m.y0(m.params()), 0.1);
    }

    #[test]
    fn heston_coefficients_and_feller() {
        let h = HestonParams {
            y0: 0.04,
            alpha: 1.5,
            m: 0.05,
            k: 0.3,
            rho: -0.7,
        };
        let m = SdeModel::heston(MarketEnv::new(100.0, 0.01, 0.0), h).unwrap();
        let back = m.heston_params().unwrap();
        for (a, b) in [
            (back.y0, h.y0),
            (back.alpha, h.alpha),
            (back.m, h.m),
            (back.k, h.k),
            (back.rho, h.rho),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
        let (c, rho) = m.coeffs_at(100.0, 0.09, 0.0).unwrap();
        assert!((c.sigma_s - 30.0).abs() < 1e-10);
        assert!((c.mu_y - 1.5 * (0.05 - 0.09)).abs() < 1e-12);
        assert!((c.sigma_y - 0.09).abs() < 1e-12);
        assert!((rho + 0.7).abs() < 1e-12);
        assert_eq!(m.feller(), Some(true));
        // negative variance is truncated, not propagated as NaN
        let (c, _) = m.coeffs_at(100.0, -0.01, 0.0).unwrap();
        assert_eq!((c.sigma_s, c.sigma_y), (0.0, 0.0));
    }

    #[test]
    fn one_dim_models_have_no_latent_dynamics() {
        let call = Mlp::new(vec![2, 6, 1]).unwrap();
        let p = call.init_params(3);
        for m in [
            SdeModel::black_scholes(env(), 0.3).unwrap(),
            SdeModel::sdenn(env(), call.clone(), &p).unwrap(),
            SdeModel::sdenn_drift(env(), call.clone(), &p, call.clone(), &p).unwrap(),
        ] {
            let (c, _) = m.coeffs_at(95.0, 0.7, 0.2).unwrap();
            assert_eq!((c.mu_y, c.sigma_y), (0.0, 0.0));
            assert!(c.sigma_s >= 0.0);
        }
    }

    #[test]
    fn sdenn_on_bs_surface_recovers_flat_vol() {
        // network replaced by the analytic surface through the same quotient
        let surf = BsSurface {
            spot: 100.0,
            rate: 0.0,
            dividend: 0.0,
            sigma: 0.2,
        };
        for (s, t) in [(90.0, 0.3), (100.0, 0.5), (115.0, 0.9)] {
            let [c, ct, ck, ckk] = surf.call_jet(s, t).unwrap();
            let lv = dupire_variance(c / 100.0, ct / 100.0, ck, ckk * 100.0, s / 100.0, 0.0, 0.0);
            assert!((lv.var.sqrt() - 0.2).abs() < 1e-3);
        }
    }

    #[test]
    fn coefficients_differentiate_through_the_tape() {
        let net = Mlp::new(vec![3, 4, 4]).unwrap();
        let m = SdeModel::two_dnn(env(), net.clone(), &net.init_params(5), -0.2, 0.3).unwrap();
        let th0 = m.params().to_vec();
        let tape = Tape::new();
        let th = tape.vars(&th0);
        let c = m.coeffs(&th, tape.var(104.0), tape.var(0.3), 0.4).unwrap();
        let g = tape.gradient(c.sigma_s, &th);
        let h = 1e-6;
        for i in [0, 7, 20, net.n_params() - 1] {
            let mut p = th0.clone();
            p[i] += h;
            let up = m.coeffs(&p, 104.0, 0.3, 0.4).unwrap().sigma_s;
            p[i] -= 2.0 * h;
            let dn = m.coeffs(&p, 104.0, 0.3, 0.4).unwrap().sigma_s;
            let fd = (up - dn) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn convexity_violation_is_counted() {
        // a call network linear in K has zero convexity everywhere
        let call = Mlp::new(vec![2, 1]).unwrap();
        let m = SdeModel::sdenn(env(), call, &[-1.0, 0.0, 1.0]).unwrap();
        let (c, _) = m.coeffs_at(100.0, 0.0, 0.5).unwrap();
        assert_eq!(c.sigma_s, dupire::VAR_MIN.sqrt() * 100.0);
        assert_eq!(m.dupire_clamps(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let net = Mlp::new(vec![3, 4, 2]).unwrap();
        let h = HestonParams {
            y0: 0.04,
            alpha: 2.0,
            m: 0.04,
            k: 0.5,
            rho: -0.5,
        };
        let m = SdeModel::two_dnn_heston(env(), net.clone(), &net.init_params(9), h).unwrap();
        m.save(&path).unwrap();
        let back = SdeModel::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.env(), m.env());
    }

    #[test]
    fn wrong_network_shape_is_rejected() {
        let net = Mlp::new(vec![2, 4, 4]).unwrap();
        assert!(SdeModel::two_dnn(env(), net.clone(), &net.init_params(1), 0.0, 0.0).is_err());
    }

    #[test]
    fn dupire_lv_model_uses_flat_table() {
        let vs = VolSurface::flat(
            100.0,
            0.0,
            0.0,
            0.25,
            (0..=20).map(|i| 50.0 + 5.0 * i as f64).collect(),
            vec![0.1, 0.5, 1.0],
        )
        .unwrap();
        let m = SdeModel::dupire_lv(env(), vs).unwrap();
        let (c, _) = m.coeffs_at(100.0, 0.0, 0.4).unwrap();
        assert!((c.sigma_s / 100.0 - 0.25).abs() < 1e-3);
    }
}
