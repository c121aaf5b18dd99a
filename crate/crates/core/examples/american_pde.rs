//! American and Bermudan puts on the PDE grid, with the early-exercise
//! premium over the European price.
//!
//! `cargo run --release --example american_pde`

use nsde::market::{Contract, ExerciseStyle, Payoff};
use nsde::models::{HestonParams, MarketEnv, SdeModel};
use nsde::pde::{solve, PdeConfig, PdeGrid};

fn main() -> nsde::Result<()> {
    let env = MarketEnv::new(100.0, 0.05, 0.0);
    let put = Payoff::put(100.0);
    let contracts = [
        Contract::european(put, 1.0, 0.0),
        Contract::new(put, 1.0, ExerciseStyle::Bermudan { interval: 0.25 }, 0.0),
        Contract::new(put, 1.0, ExerciseStyle::American, 0.0),
    ];

    let bs = SdeModel::black_scholes(env, 0.2)?;
    let heston = SdeModel::heston(
        env,
        HestonParams {
            y0: 0.04,
            alpha: 2.0,
            m: 0.04,
            k: 0.3,
            rho: -0.6,
        },
    )?;
    for (name, model, cfg) in [
        (
            "black-scholes",
            &bs,
            PdeConfig {
                n_s: 400,
                ..PdeConfig::default()
            },
        ),
        (
            "heston",
            &heston,
            PdeConfig {
                n_s: 120,
                n_y: 30,
                s_max_factor: 2.5,
                ..PdeConfig::default()
            },
        ),
    ] {
        let grid = PdeGrid::build(model, &contracts, &cfg)?;
        let p = solve(model, &grid, &contracts)?.prices;
        println!(
            "{name:<14} european {:.4}  bermudan {:.4}  american {:.4}  premium {:.4}",
            p[0],
            p[1],
            p[2],
            p[2] - p[0]
        );
    }
    Ok(())
}
