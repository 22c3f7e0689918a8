use nalgebra::DVector;
use proptest::prelude::*;

use wh_core::duration::{aggregate, read_aggregates, write_aggregates, AggregatedExposure};
use wh_core::experiments::Scenario;
use wh_core::extrapolation::{extrapolate_constrained, ExtrapolationInput, GridEmbedding};
use wh_core::generalized::{select_lambda_outer, select_lambda_performance, MarginalReference, SelectionOptions};
use wh_core::simulator::{simulate, total_time_in_window};
use wh_core::Grid;

#[test]
fn simulate_select_extrapolate() {
    let scenario = Scenario::one_d("1d", 20_000);
    let data = scenario.data(11).unwrap();
    let t = scenario.template().unwrap();
    let opts = SelectionOptions::default();
    let outer = select_lambda_outer(&data, &t, &opts).unwrap();
    let perf = select_lambda_performance(&data, &t, &opts).unwrap();
    let reference = MarginalReference::from_fit(&outer.fit, &opts.newton).unwrap();
    assert!(reference.delta(&perf.lambda).unwrap() < 0.01);

    // smoothed hazards track the generating law
    let truth = scenario.law.true_log_hazard(&scenario.grid);
    let rmse = ((&outer.fit.theta_hat - &truth).norm_squared() / truth.len() as f64).sqrt();
    assert!(rmse < 0.1, "rmse = {rmse}");

    let emb = GridEmbedding::new(&scenario.grid, &Grid::one(45, 110).unwrap()).unwrap();
    let ext = extrapolate_constrained(&ExtrapolationInput::from_generalized(&outer.fit), &emb).unwrap();
    assert_eq!(emb.gather(&ext.y_plus), outer.fit.theta_hat);
    let (lo, hi) = ext.credible_intervals(0.05).unwrap();
    // bands widen away from the data
    let width = &hi - &lo;
    assert!(width[0] > width[5] && width[65] > width[54]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_exposure_is_conserved(seed in any::<u64>(), m in 1usize..400) {
        let scenario = Scenario::two_d("2d", m);
        let mut cfg = scenario.sim.clone();
        cfg.seed = seed;
        let records = simulate(&cfg, &scenario.law).unwrap();
        let agg = aggregate(&records, scenario.grid).unwrap();
        let inside = total_time_in_window(&records, &scenario.grid);
        prop_assert!((agg.total_exposure() - inside).abs() <= 1e-9 * (1.0 + inside));
        prop_assert!(agg.total_events() <= records.iter().filter(|r| r.event).count() as f64);
    }

    #[test]
    fn aggregate_tables_round_trip_bitwise(
        ec in proptest::collection::vec(0.0f64..1e6, 12),
        d in proptest::collection::vec(0u32..500, 12),
    ) {
        let grid = Grid::two((60, 63), (0, 2)).unwrap();
        let agg = AggregatedExposure {
            grid,
            d: d.iter().zip(&ec).map(|(d, e)| if *e > 0.0 { *d as f64 } else { 0.0 }).collect(),
            ec,
        };
        let mut buf = Vec::new();
        write_aggregates(&agg, &mut buf).unwrap();
        let back = read_aggregates(buf.as_slice()).unwrap();
        prop_assert_eq!(back.grid, agg.grid);
        for (a, b) in back.ec.iter().zip(&agg.ec) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(DVector::from_vec(back.d), DVector::from_vec(agg.d));
    }
}
