//! Adjoint-PDE calibration of Heston to synthetic Heston quotes, starting
//! from perturbed parameters.
//!
//! `cargo run --release --example calibrate_pde`

use std::path::Path;

use nsde::market::{load_days, ExerciseStyle};
use nsde::models::{HestonParams, MarketEnv, SdeModel};
use nsde::optim::LrSchedule;
use nsde::pde::{calibrate_pde_with, PdeCalibConfig, PdeConfig};

fn main() -> nsde::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synth_heston.csv");
    let (days, _) = load_days(&path)?;
    let snap = days[0].filter(|c| c.style == ExerciseStyle::European);
    let start = HestonParams {
        y0: 0.06,
        alpha: 1.5,
        m: 0.06,
        k: 0.4,
        rho: -0.3,
    };
    let mut model = SdeModel::heston(MarketEnv::from_snapshot(&snap), start)?;
    let cfg = PdeCalibConfig {
        grid: PdeConfig {
            n_s: 80,
            n_y: 20,
            s_max_factor: 2.5,
            ..PdeConfig::default()
        },
        lr: LrSchedule::constant(0.02),
        max_iters: 40,
        ..PdeCalibConfig::default()
    };
    let cal = calibrate_pde_with(&mut model, &snap.contracts, &cfg, |r| {
        if r.iter % 5 == 0 {
            println!("iter {:>3}  mse {:.3e}  |g| {:.2e}", r.iter, r.train_mse, r.grad_norm);
        }
    })?;
    println!("stop: {:?}", cal.stop);
    println!("start  {start:?}");
    println!("fitted {:?}", model.heston_params().expect("heston"));
    println!("truth  y0 0.04, alpha 2, m 0.04, k 0.3, rho -0.6");
    Ok(())
}
