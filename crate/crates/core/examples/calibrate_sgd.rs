//! Monte Carlo SGD calibration of Black-Scholes and of a 2-D neural SDE to a
//! synthetic smile-free market.
//!
//! `cargo run --release --example calibrate_sgd`

use nsde::bench::{build_model, synth_days, ModelChoice, SynthConfig};
use nsde::mc::TimeGrid;
use nsde::models::{MarketEnv, Sde, SdeModel};
use nsde::optim::LrSchedule;
use nsde::sgd::{calibrate, SgdConfig};

fn main() -> nsde::Result<()> {
    let snap = synth_days(&SynthConfig::default())?.remove(0);
    let grid = TimeGrid::for_claims(&snap.contracts, 365.0)?;
    let cfg = SgdConfig {
        half_batch: 1024,
        lr: LrSchedule::Exponential {
            lr: 0.01,
            decay: 0.5,
            every: 50,
            min_lr: 1e-4,
        },
        max_iters: 150,
        seed: 3,
        eval_paths: 2048,
        ..SgdConfig::default()
    };

    let mut bs = SdeModel::black_scholes(MarketEnv::from_snapshot(&snap), 0.3)?;
    let cal = calibrate(&mut bs, &grid, &cfg, &snap)?;
    let last = cal.history.last().expect("iterations");
    println!(
        "black-scholes: σ̂ = {:.4} after {} iterations ({:?}), train mse {:.2e}",
        bs.params()[0].abs(),
        cal.iterations(),
        cal.stop,
        last.train_mse
    );

    let choice = ModelChoice::TwoDnn {
        hidden: vec![16, 16],
        rho: -0.3,
        y0: 0.0,
        init_vol: 0.3,
    };
    let mut net = build_model(&choice, &snap, 5)?;
    let cal = calibrate(&mut net, &grid, &SgdConfig { max_iters: 60, ..cfg }, &snap)?;
    for r in cal.history.iter().step_by(10) {
        println!(
            "2d-nn iter {:>3}  mse {:.3e}  |g| {:.2e}  lr {:.1e}",
            r.iter, r.train_mse, r.grad_norm, r.lr
        );
    }
    println!("2d-nn fingerprint {}", net.param_vector().fingerprint());
    Ok(())
}
