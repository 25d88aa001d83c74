use deepo::adaptive::{
    collect_offline, initialize, run, run_schedule, AdaptiveConfig, InitialGain, PlantSchedule,
    TRACE_COLUMNS,
};
use deepo::data::{build_covariances, DataBatch, NoiseModel, Plant};
use deepo::model::{four_state_benchmark, random_system, LinearSystem};
use deepo::numerics::{max_abs, Mat, Vector};

fn switched(seed: u64) -> PlantSchedule {
    let s1 = random_system(4, 2, seed).unwrap();
    let a2 = random_system(4, 2, seed + 100).unwrap().a;
    let s2 = LinearSystem::new(a2, s1.b.clone(), s1.q.clone(), s1.r.clone()).unwrap();
    PlantSchedule::switching(vec![(0, s1), (200, s2)]).unwrap()
}

fn tail_mean(v: &[f64], k: usize) -> f64 {
    v[v.len() - k..].iter().sum::<f64>() / k as f64
}

#[test]
fn forgetting_recovers_after_plant_switch() {
    for seed in 1..=6 {
        let sched = switched(seed);
        let mut tails = Vec::new();
        for beta in [1.0, 0.99] {
            let mut cfg = AdaptiveConfig::new(800, NoiseModel::uniform(0.01, seed), seed);
            cfg.forgetting = beta;
            tails.push(tail_mean(
                &run_schedule(&sched, &cfg).unwrap().relative_gaps(),
                100,
            ));
        }
        assert!(tails[1] < tails[0], "seed {seed}: {tails:?}");
    }
}

#[test]
fn recursive_covariances_match_rebuild_along_closed_loop() {
    let sys = four_state_benchmark();
    let cfg = AdaptiveConfig::new(500, NoiseModel::uniform(0.1, 3), 3);
    let offline = {
        let mut replay = Plant::new(sys.clone(), Vector::zeros(4), &cfg.noise);
        collect_offline(&mut replay, &cfg).unwrap()
    };
    let mut plant = Plant::new(sys, Vector::zeros(4), &cfg.noise);
    let mut state = initialize(&mut plant, &cfg).unwrap();
    let mut xs: Vec<Vector> = offline.x0.column_iter().map(|c| c.into_owned()).collect();
    let mut us: Vec<Vector> = offline.u0.column_iter().map(|c| c.into_owned()).collect();
    let mut xn: Vec<Vector> = offline.x1.column_iter().map(|c| c.into_owned()).collect();
    for _ in 0..500 {
        xs.push(state.x.clone());
        let out = state.step(&mut plant).unwrap();
        us.push(out.u);
        xn.push(state.x.clone());
    }
    let full = DataBatch::new(
        Mat::from_columns(&xs),
        Mat::from_columns(&us),
        Mat::from_columns(&xn),
        None,
    )
    .unwrap();
    let direct = build_covariances(&full).unwrap();
    let cov = &state.learner.cov;
    assert_eq!(cov.t, full.t());
    for (a, b) in [
        (&cov.phi, &direct.phi),
        (&cov.phi_inv, &direct.phi_inv),
        (&cov.ubar, &direct.ubar),
        (&cov.xbar0, &direct.xbar0),
        (&cov.xbar1, &direct.xbar1),
    ] {
        assert!(max_abs(&(a - b)) <= 1e-10 * (1.0 + max_abs(b)));
    }
}

#[test]
fn trace_has_one_record_per_step_and_finite_costs() {
    let sys = four_state_benchmark();
    let mut cfg = AdaptiveConfig::new(100, NoiseModel::uniform(0.01, 5), 5);
    cfg.initial_gain = InitialGain::Given(Mat::zeros(2, 4));
    let trace = run(&sys, &cfg).unwrap();
    assert_eq!(trace.records.len(), 100);
    assert!(trace
        .records
        .iter()
        .all(|r| r.cost_true.is_finite() && r.gap() >= -1e-9));
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let header = String::from_utf8(buf)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, TRACE_COLUMNS.join(","));
}

#[test]
fn runs_reproduce_bit_for_bit() {
    let sys = four_state_benchmark();
    let cfg = AdaptiveConfig::new(150, NoiseModel::gaussian(0.05, 11), 11);
    let a = run(&sys, &cfg).unwrap();
    let b = run(&sys, &cfg).unwrap();
    let costs = |t: &deepo::adaptive::RegretTrace| {
        t.records
            .iter()
            .map(|r| r.cost_true.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(costs(&a), costs(&b));
}
