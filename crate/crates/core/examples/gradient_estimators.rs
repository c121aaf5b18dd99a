//! Unbiased two-batch and biased single-batch gradients of the squared
//! pricing error, and their spread over seeds.
//!
//! `cargo run --release --example gradient_estimators`

use nsde::market::{Contract, Payoff};
use nsde::mc::TimeGrid;
use nsde::models::{MarketEnv, SdeModel};
use nsde::sgd::{grad_biased_claims, grad_unbiased_claims};

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn main() -> nsde::Result<()> {
    let model = SdeModel::black_scholes(MarketEnv::new(100.0, 0.0, 0.0), 0.25)?;
    // Market quotes from σ = 0.2, so the gradient points towards smaller σ.
    let claims = [
        Contract::european(Payoff::call(95.0), 0.25, 5.4595),
        Contract::european(Payoff::call(100.0), 0.25, 3.9878),
        Contract::european(Payoff::call(105.0), 0.25, 1.9094),
    ];
    let grid = TimeGrid::for_claims(&claims, 365.0)?;

    for l in [16usize, 256, 4096] {
        let mut unbiased = Vec::new();
        let mut biased = Vec::new();
        for seed in 0..40 {
            let u = grad_unbiased_claims(&model, &grid, &claims, l, seed)?;
            assert!(u.audit.disjoint());
            unbiased.push(u.vector[0]);
            biased.push(grad_biased_claims(&model, &grid, &claims, l, seed)?.vector[0]);
        }
        let (mu, su) = mean_sd(&unbiased);
        let (mb, sb) = mean_sd(&biased);
        println!("L={l:<5} unbiased {mu:+.4} (sd {su:.4})   biased {mb:+.4} (sd {sb:.4})");
    }
    Ok(())
}
