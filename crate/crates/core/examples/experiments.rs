//! The evaluation protocols on a noisy multi-day synthetic market, run in
//! parallel and written as JSON/CSV reports.
//!
//! `cargo run --release --example experiments -- [out_dir]`

use std::path::PathBuf;

use nsde::bench::{
    all_metrics, run_many, synth_days, write_report, Engine, Experiment, ExperimentKind, ModelChoice, SynthConfig,
};
use nsde::optim::LrSchedule;
use nsde::pde::{PdeCalibConfig, PdeConfig};

fn main() -> nsde::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "reports".into()).into();
    let days = synth_days(&SynthConfig {
        days: 4,
        noise_bps: 20.0,
        american: true,
        seed: 2,
        ..SynthConfig::default()
    })?;
    let engine = Engine::Pde {
        calib: PdeCalibConfig {
            grid: PdeConfig {
                n_s: 120,
                ..PdeConfig::default()
            },
            lr: LrSchedule::Exponential {
                lr: 0.01,
                decay: 0.5,
                every: 25,
                min_lr: 1e-4,
            },
            max_iters: 100,
            ..PdeCalibConfig::default()
        },
    };
    let kinds = [
        ExperimentKind::IntradaySplit { train_fraction: 0.7 },
        ExperimentKind::NextDay,
        ExperimentKind::CrossPayoff,
        ExperimentKind::StrikeExtrapolation { threshold: 100.0 },
        ExperimentKind::Recalibration { window: 3 },
        ExperimentKind::EuropeanToAmerican,
    ];
    let experiments: Vec<Experiment> = kinds
        .into_iter()
        .map(|kind| Experiment {
            kind,
            model: ModelChoice::Bs { sigma: 0.3 },
            engine: engine.clone(),
            seed: 1,
            metrics: all_metrics(),
        })
        .collect();

    for report in run_many(&experiments, &days) {
        let report = report?;
        let (json, _) = write_report(&report, &out)?;
        for split in ["test", "recalibrated", "frozen"] {
            if let Some(a) = report.split_summary(split) {
                println!(
                    "{:<22} {split:<12} n {:>3}  mse {:.2e}  mae {:.4}  relMAE {:.2}%",
                    report.experiment.kind.slug(),
                    a.n,
                    a.mse,
                    a.mae,
                    a.rel_mae.unwrap_or(f64::NAN)
                );
            }
        }
        println!("  -> {}", json.display());
    }
    Ok(())
}
