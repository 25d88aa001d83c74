use deepo::adaptive::{events, run, AdaptiveConfig};
use deepo::baselines::{
    indirect_adaptive_run, pairs_to_targets, rollout_cost, write_complexity_csv,
    zeroth_order_po_run, ComplexityRow, ZoConfig,
};
use deepo::data::NoiseModel;
use deepo::model::{four_state_benchmark, lqr_cost};
use deepo::scenarios::{complexity_initial_gain, complexity_system, laplacian_noise};

#[test]
fn zeroth_order_reaches_loose_target_and_counts_trajectories() {
    let sys = complexity_system();
    let mut zo = ZoConfig::benchmark(laplacian_noise(2), 2);
    zo.max_iters = 200;
    let res = zeroth_order_po_run(&sys, &complexity_initial_gain(), &zo, &[1.0]).unwrap();
    let hit = res.targets[0].1.expect("target 1.0 within 200 iterations");
    assert_eq!(hit % (2 * zo.minibatch), 0);
    assert_eq!(hit / (2 * zo.minibatch), res.iterations);
    assert!(res.gaps[res.iterations] <= 1.0);
}

#[test]
fn zeroth_order_rejects_destabilizing_start() {
    let sys = complexity_system();
    let k0 = complexity_initial_gain() * -20.0;
    assert!(!lqr_cost(&sys, &k0).is_finite());
    let zo = ZoConfig::benchmark(laplacian_noise(0), 0);
    assert!(zeroth_order_po_run(&sys, &k0, &zo, &[1.0]).is_err());
}

#[test]
fn noise_free_rollout_from_origin_costs_nothing() {
    let sys = four_state_benchmark();
    let k = complexity_initial_gain().view((0, 0), (2, 3)).into_owned();
    let k = k.insert_column(3, 0.0);
    assert_eq!(
        rollout_cost(&sys, &k, 50, &NoiseModel::none()).unwrap(),
        0.0
    );
}

#[test]
fn indirect_and_deepo_share_the_offline_phase() {
    let sys = four_state_benchmark();
    let cfg = AdaptiveConfig::new(60, NoiseModel::uniform(0.05, 8), 8);
    let d = run(&sys, &cfg).unwrap();
    let i = indirect_adaptive_run(&sys, &cfg).unwrap();
    assert_eq!(d.records.len(), i.records.len());
    assert_eq!(d.cstar, i.cstar);
    assert!(i
        .records
        .iter()
        .all(|r| r.event_flags & events::SKIPPED_INFEASIBLE == 0));
}

#[test]
fn complexity_csv_leaves_missing_counts_blank() {
    let sys = complexity_system();
    let trace = run(&sys, &deepo::scenarios::complexity_deepo_config(30, 1)).unwrap();
    let pairs = pairs_to_targets(&trace, &[1e-12]);
    assert_eq!(pairs[0].1, None);
    let rows = [ComplexityRow {
        target_eps: 1e-12,
        trajectories: Some(60),
        pairs: pairs[0].1,
        seed: 1,
    }];
    let mut buf = Vec::new();
    write_complexity_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[0].parse::<f64>().unwrap(), 1e-12);
    assert_eq!(fields[1..], ["60", "", "1"]);
}
