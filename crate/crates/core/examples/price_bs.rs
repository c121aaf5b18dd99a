//! One Black-Scholes call priced three ways: closed form, finite-difference
//! PDE and Euler Monte Carlo.
//!
//! `cargo run --release --example price_bs`

use nsde::market::{Contract, OptionKind, Payoff};
use nsde::mc::{mc_prices, TimeGrid};
use nsde::models::{bs_price, BsInputs, MarketEnv, SdeModel};
use nsde::pde::{solve, PdeConfig, PdeGrid};

fn main() -> nsde::Result<()> {
    let (spot, strike, t, r, sigma) = (100.0, 100.0, 1.0, 0.05, 0.2);
    let model = SdeModel::black_scholes(MarketEnv::new(spot, r, 0.0), sigma)?;
    let call = [Contract::european(Payoff::call(strike), t, 0.0)];

    let exact = bs_price(&BsInputs::new(spot, strike, t, r, 0.0), sigma, OptionKind::Call)?;
    println!("closed form        {exact:.4}");

    for n_s in [100, 200, 400] {
        let cfg = PdeConfig {
            n_s,
            ..PdeConfig::default()
        };
        let grid = PdeGrid::build(&model, &call, &cfg)?;
        let p = solve(&model, &grid, &call)?.prices[0];
        println!("pde n_s={n_s:<4}       {p:.4}  (err {:+.1e})", p - exact);
    }

    let grid = TimeGrid::for_claims(&call, 365.0)?;
    for paths in [10_000u64, 100_000, 1_000_000] {
        let m = mc_prices(&model, &grid, &call, 0..paths, 42)?[0];
        println!("mc {paths:>9} paths {:.4} ± {:.4}", m.price, m.stderr);
    }
    Ok(())
}
