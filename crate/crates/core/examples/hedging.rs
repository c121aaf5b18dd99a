//! Daily delta hedging in a simulated Black-Scholes world: closed-form
//! deltas, Monte Carlo bump deltas and no hedge.
//!
//! `cargo run --release --example hedging`

use nsde::hedge::{self, DeltaMethod, GbmWorld};
use nsde::models::{MarketEnv, SdeModel};

fn main() -> nsde::Result<()> {
    let world = GbmWorld {
        days: 20,
        ..GbmWorld::default()
    };
    let days = world.snapshots(11)?;
    let (bs, none) = hedge::bs_vs_no_hedge(&days)?;
    println!("closed form   relMAE {:>7.3}%  mse {:.4}", bs.rel_mae, bs.mse);
    println!("no hedge      relMAE {:>7.3}%  mse {:.4}", none.rel_mae, none.mse);

    let method = DeltaMethod::McCommonRandom {
        paths: 5_000,
        steps_per_year: 365.0,
    };
    let records = hedge::hedge_days(&days, |snap, c| {
        let model = SdeModel::black_scholes(MarketEnv::from_snapshot(snap), world.sigma)?;
        hedge::delta(&model, c, snap.spot, hedge::DEFAULT_BUMP * snap.spot, &method, 7)
    })?;
    let mc = hedge::hedge_errors(&records)?;
    println!(
        "mc bump delta relMAE {:>7.3}%  mse {:.4}  ({} records)",
        mc.rel_mae, mc.mse, mc.records
    );
    Ok(())
}
