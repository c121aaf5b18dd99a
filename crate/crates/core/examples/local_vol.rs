//! Local volatility two ways: Dupire on an implied-vol surface, and the
//! derivatives of a neural call-price fit.
//!
//! `cargo run --release --example local_vol`

use nsde::bench::{call_targets, implied_surface, synth_days, SynthConfig};
use nsde::models::{nnlv_fit, MarketEnv, NnlvConfig, SdeModel};
use nsde::optim::LrSchedule;

fn main() -> nsde::Result<()> {
    let cfg = SynthConfig {
        moneyness: (0..=16).map(|i| 0.8 + 0.025 * i as f64).collect(),
        maturity_days: vec![30, 60, 91, 182, 273, 365],
        ..SynthConfig::default()
    };
    let snap = synth_days(&cfg)?.remove(0);
    let env = MarketEnv::from_snapshot(&snap);

    let dupire = SdeModel::dupire_lv(env, implied_surface(&snap)?)?;

    let targets = call_targets(&snap);
    let fit = nnlv_fit(
        &targets,
        &NnlvConfig {
            hidden: vec![32, 32],
            epochs: 20_000,
            lr: LrSchedule::Exponential {
                lr: 3e-3,
                decay: 0.5,
                every: 2500,
                min_lr: 1e-5,
            },
            patience: 20_000,
            scale: env.scale,
            seed: 1,
            ..NnlvConfig::default()
        },
    )?;
    println!("call-surface fit: best normalized mse {:.2e}", fit.best_loss);
    let nnlv = SdeModel::nnlv(env, fit.net, &fit.params)?;

    println!("   S      t    dupire σ   nnlv σ   (generator 0.2)");
    for s in [90.0, 100.0, 110.0] {
        for t in [0.25, 0.5] {
            let d = dupire.coeffs_at(s, 0.0, t)?.0.sigma_s / s;
            let n = nnlv.coeffs_at(s, 0.0, t)?.0.sigma_s / s;
            println!("{s:>5} {t:>6}   {d:.4}     {n:.4}");
        }
    }
    println!("dupire clamped nodes: {}", dupire.dupire_clamps());
    Ok(())
}
