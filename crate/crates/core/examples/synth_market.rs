//! Synthetic quote files from Black-Scholes and Heston generators.
//!
//! `cargo run --release --example synth_market -- [out_dir]`

use std::fs::File;
use std::path::PathBuf;

use nsde::bench::{synth_days, Generator, SynthConfig};
use nsde::market::write_days;
use nsde::models::HestonParams;
use nsde::pde::PdeConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| ".".into()).into();
    std::fs::create_dir_all(&out)?;

    let bs = synth_days(&SynthConfig {
        days: 5,
        noise_bps: 10.0,
        american: true,
        seed: 4,
        ..SynthConfig::default()
    })?;
    write_days(&bs, File::create(out.join("bs_5d.csv"))?)?;

    let heston = synth_days(&SynthConfig {
        generator: Generator::Heston {
            params: HestonParams {
                y0: 0.04,
                alpha: 2.0,
                m: 0.04,
                k: 0.3,
                rho: -0.6,
            },
            grid: PdeConfig {
                n_s: 100,
                n_y: 30,
                s_max_factor: 2.5,
                ..PdeConfig::default()
            },
        },
        ..SynthConfig::default()
    })?;
    write_days(&heston, File::create(out.join("heston_1d.csv"))?)?;

    for d in bs.iter().chain(&heston) {
        let atm: Vec<String> = d
            .contracts
            .iter()
            .filter(|c| (c.strike() - 100.0).abs() < 1e-9)
            .take(2)
            .map(|c| format!("{:.4}", c.market_price))
            .collect();
        println!(
            "{} spot {:.2}  {} quotes  ATM 30d call/put {}",
            d.date,
            d.spot,
            d.contracts.len(),
            atm.join("/")
        );
    }
    Ok(())
}
