use chrono::NaiveDate;
use proptest::prelude::*;

use nsde::bench::{aggregate, EvalRow, GroupBy};
use nsde::hedge::{hedge_errors, HedgeRecord};
use nsde::market::{Contract, ExerciseStyle, OptionKind, Payoff};
use nsde::mc::{mc_prices, TimeGrid};
use nsde::models::{MarketEnv, SdeModel};
use nsde::pde::{solve, PdeConfig, PdeGrid};

fn row(day: u32, kind: OptionKind, market: f64, model: f64) -> EvalRow {
    let e = model - market;
    EvalRow {
        id: format!("c{day}"),
        split: "test".into(),
        day: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(day as u64),
        kind,
        style: ExerciseStyle::European,
        strike: 100.0,
        maturity: 0.25,
        market,
        model,
        abs_err: e.abs(),
        sq_err: e * e,
        rel_err: (market > 0.0).then(|| 100.0 * e.abs() / market),
        noise: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn singleton_day_groups_average_to_global_mae(
        prices in prop::collection::vec((0.1f64..20.0, -1.0f64..1.0, any::<bool>()), 1..30)
    ) {
        let rows: Vec<EvalRow> = prices
            .iter()
            .enumerate()
            .map(|(d, &(m, e, call))| {
                let kind = if call { OptionKind::Call } else { OptionKind::Put };
                row(d as u32, kind, m, m + e)
            })
            .collect();
        let agg = aggregate(&rows, &[GroupBy::Day]);
        let (groups, overall): (Vec<_>, Vec<_>) = agg.iter().partition(|a| a.day.is_some());
        prop_assert_eq!(groups.len(), rows.len());
        prop_assert_eq!(overall.len(), 1);
        let mean_mae = groups.iter().map(|a| a.mae).sum::<f64>() / groups.len() as f64;
        let mean_mse = groups.iter().map(|a| a.mse).sum::<f64>() / groups.len() as f64;
        prop_assert!((mean_mae - overall[0].mae).abs() <= 1e-12 * (1.0 + mean_mae));
        prop_assert!((mean_mse - overall[0].mse).abs() <= 1e-12 * (1.0 + mean_mse));
        prop_assert_eq!(overall[0].n, rows.len());
    }

    #[test]
    fn aggregate_group_sizes_partition_the_rows(
        prices in prop::collection::vec((0.1f64..20.0, -1.0f64..1.0, any::<bool>(), 0u32..3), 1..40)
    ) {
        let rows: Vec<EvalRow> = prices
            .iter()
            .map(|&(m, e, call, d)| {
                let kind = if call { OptionKind::Call } else { OptionKind::Put };
                row(d, kind, m, m + e)
            })
            .collect();
        let agg = aggregate(&rows, &[GroupBy::Kind, GroupBy::Day]);
        let total: usize = agg.iter().filter(|a| a.kind.is_some()).map(|a| a.n).sum();
        prop_assert_eq!(total, rows.len());
        for a in &agg {
            prop_assert!(a.mae * a.mae <= a.mse * (1.0 + 1e-12));
        }
    }

    #[test]
    fn hedge_metrics_are_consistent(
        recs in prop::collection::vec((0.5f64..20.0, -2.0f64..2.0, 90.0f64..110.0, -3.0f64..3.0, 0.0f64..1.0), 1..50)
    ) {
        let records: Vec<HedgeRecord> = recs
            .iter()
            .enumerate()
            .map(|(i, &(p, dp, s, ds, delta))| HedgeRecord {
                date: NaiveDate::from_ymd_opt(2024, 1, 2).unwrap(),
                contract_id: format!("c{i}"),
                p_t: p,
                p_next: p + dp,
                s_t: s,
                s_next: s + ds,
                delta,
            })
            .collect();
        let m = hedge_errors(&records).unwrap();
        prop_assert!(m.mae >= 0.0 && m.mse >= 0.0);
        prop_assert!(m.mae * m.mae <= m.mse * (1.0 + 1e-12));
        let direct = records.iter().map(|r| (r.d_p() - r.delta * r.d_s()).abs()).sum::<f64>() / records.len() as f64;
        prop_assert!((m.mae - direct).abs() <= 1e-12 * (1.0 + direct));
        prop_assert_eq!(m.records, records.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pde_call_prices_fall_with_strike_and_respect_parity(
        sigma in 0.1f64..0.5,
        rate in 0.0f64..0.06,
        t in 0.1f64..1.0,
    ) {
        let model = SdeModel::black_scholes(MarketEnv::new(100.0, rate, 0.0), sigma).unwrap();
        let strikes = [80.0, 90.0, 100.0, 110.0, 120.0];
        let mut contracts = Vec::new();
        for &k in &strikes {
            contracts.push(Contract::european(Payoff::call(k), t, 0.0));
            contracts.push(Contract::european(Payoff::put(k), t, 0.0));
        }
        let cfg = PdeConfig { n_s: 120, ..PdeConfig::default() };
        let grid = PdeGrid::build(&model, &contracts, &cfg).unwrap();
        let sol = solve(&model, &grid, &contracts).unwrap();
        let disc = (-rate * t).exp();
        for (i, &k) in strikes.iter().enumerate() {
            let (c, p) = (sol.prices[2 * i], sol.prices[2 * i + 1]);
            prop_assert!(c >= -1e-9 && p >= -1e-9);
            prop_assert!((c - p - (100.0 - k * disc)).abs() < 0.02, "K {}: {} - {}", k, c, p);
            if i > 0 {
                prop_assert!(c <= sol.prices[2 * (i - 1)] + 1e-9);
            }
        }
    }

    #[test]
    fn american_put_dominates_european(sigma in 0.1f64..0.5, rate in 0.01f64..0.08) {
        let model = SdeModel::black_scholes(MarketEnv::new(100.0, rate, 0.0), sigma).unwrap();
        let contracts = [
            Contract::european(Payoff::put(105.0), 0.5, 0.0),
            Contract::new(Payoff::put(105.0), 0.5, ExerciseStyle::American, 0.0),
        ];
        let cfg = PdeConfig { n_s: 120, ..PdeConfig::default() };
        let grid = PdeGrid::build(&model, &contracts, &cfg).unwrap();
        let sol = solve(&model, &grid, &contracts).unwrap();
        prop_assert!(sol.prices[1] >= sol.prices[0] - 1e-9);
        prop_assert!(sol.prices[1] >= 5.0 - 1e-9);
    }

    #[test]
    fn mc_price_is_additive_over_path_ranges(seed in any::<u64>(), n in 2u64..400) {
        let model = SdeModel::black_scholes(MarketEnv::new(100.0, 0.02, 0.0), 0.2).unwrap();
        let claims = [Contract::european(Payoff::call(100.0), 30.0 / 365.0, 0.0)];
        let grid = TimeGrid::for_claims(&claims, 365.0).unwrap();
        let all = mc_prices(&model, &grid, &claims, 0..2 * n, seed).unwrap()[0].price;
        let a = mc_prices(&model, &grid, &claims, 0..n, seed).unwrap()[0].price;
        let b = mc_prices(&model, &grid, &claims, n..2 * n, seed).unwrap()[0].price;
        prop_assert!((all - 0.5 * (a + b)).abs() <= 1e-10 * (1.0 + all.abs()));
    }
}
