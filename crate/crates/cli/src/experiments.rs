//! The six experiments. Seeds fan out through `deepo::par`; every file is
//! written after the fan-out so outputs do not depend on scheduling.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use deepo::adaptive::{read_trace_csv, run, RegretTrace};
use deepo::baselines::{
    indirect_adaptive_run, pairs_to_targets, write_complexity_csv, zeroth_order_po_run,
    ComplexityRow,
};
use deepo::data::{build_covariances, iid_batch};
use deepo::numerics::Mat;
use deepo::par;
use deepo::policy::{equivalence_check, k_to_v, offline_deepo, Weights};
use deepo::scenarios::{self, rescale_noise_to_snr};
use deepo::stats::{loglog_slope, mean, median, summarize_series, SeriesSummary};
use deepo::timing::time_steps;
use serde_json::json;

use crate::config::{Experiment, Settings, SystemSpec};
use crate::output::{Check, Report, RunDir};
use crate::CliError;

/// Fit window start for regret slopes.
pub const SLOPE_FROM: usize = 10;

pub fn run_experiment(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    match s.experiment {
        Experiment::OfflineConvergence => offline(s, dir),
        Experiment::AdaptiveRegret => adaptive(s, dir),
        Experiment::CompareIndirect => compare_indirect(s, dir),
        Experiment::FiniteHorizonCost => finite_cost(s, dir),
        Experiment::Timing => timing(s, dir),
        Experiment::ZoSampleComplexity => zo_complexity(s, dir),
    }
}

/// Runs `f` on every seed, concurrently when enabled, keeping seed order.
fn per_seed<R, F>(seeds: &[u64], f: F) -> Result<Vec<R>, CliError>
where
    R: Send,
    F: Fn(u64) -> deepo::Result<R> + Sync + Send,
{
    par::map(seeds, |&seed| f(seed).map_err(CliError::numerical(seed)))
        .into_iter()
        .collect()
}

fn e(x: f64) -> String {
    format!("{x:e}")
}

fn offline(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    let runs = per_seed(&s.seeds, |seed| {
        let sys = s.system.build(seed)?;
        let batch = match (&s.system, s.noise) {
            (SystemSpec::FourState, None) => rescale_noise_to_snr(
                &sys,
                &iid_batch(&sys, s.t0, 1.0, seed),
                scenarios::OFFLINE_SNR_DB,
            )?,
            (_, noise) => iid_batch(&sys, s.t0, noise.map_or(0.0, |n| n.scale()), seed),
        };
        let cov = build_covariances(&batch)?;
        let w = Weights::of(&sys);
        let v0 = k_to_v(&cov, &Mat::zeros(sys.m(), sys.n()));
        let j_star = equivalence_check(&cov, &w, &batch)?.j_star;
        let res = offline_deepo(&cov, &w, &v0, s.eta, s.iterations, 0.0)?;
        Ok((res, j_star))
    })?;

    let slack = 1.0 + 8.0 * f64::EPSILON;
    let mut rows = Vec::new();
    for (&seed, (res, j_star)) in s.seeds.iter().zip(&runs) {
        dir.write(&format!("seed{seed}_trace.csv"), |w| Ok(res.write_csv(w)?))?;
        let costs = res.costs();
        let monotone = costs.windows(2).all(|p| p[1] <= p[0] * slack);
        let gap = (res.final_cost() - j_star) / j_star;
        rows.push((
            seed,
            costs.len() - 1,
            res.final_cost(),
            *j_star,
            gap,
            res.backtracks,
            monotone,
        ));
    }
    dir.write("summary.csv", |w| {
        writeln!(
            w,
            "seed,iterations,final_J,J_star,final_gap,backtracks,monotone"
        )?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.0,
                r.1,
                e(r.2),
                e(r.3),
                e(r.4),
                r.5,
                r.6
            )?;
        }
        Ok(())
    })?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.4).collect();
    let worst = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let monotone = rows.iter().filter(|r| r.6).count();
    Ok(Report {
        checks: vec![
            Check::new(
                "final relative gap",
                worst <= 1e-6,
                format!("worst over {} seeds {worst:.2e} (<= 1e-6)", rows.len()),
            ),
            Check::new(
                "monotone cost",
                monotone == rows.len(),
                format!("{monotone}/{} traces non-increasing", rows.len()),
            ),
        ],
        summary: json!({ "final_gap_median": median(&gaps), "final_gap_worst": worst }),
    })
}

/// Per-index statistics and the fitted slope of the median, read back from
/// regret-trace CSVs only.
pub fn summarize(paths: &[PathBuf]) -> Result<(SeriesSummary, f64), CliError> {
    let series = paths
        .iter()
        .map(|p| {
            let rows = read_trace_csv(BufReader::new(File::open(p)?))?;
            Ok(rows.into_iter().map(|r| r.regret_avg).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, CliError>>()?;
    let summary = summarize_series(&series)?;
    let slope = loglog_slope(&summary.median, SLOPE_FROM).unwrap_or(f64::NAN);
    Ok((summary, slope))
}

fn adaptive(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    let base = s.noise.expect("adaptive defaults carry a noise kind");
    let mut per_sigma = Vec::new();
    for &sigma in &s.sigmas {
        let noise = base.with_scale(sigma);
        let traces = per_seed(&s.seeds, |seed| {
            let sys = s.system.build(seed)?;
            run(&sys, &s.adaptive_config(&sys, noise.model(seed), seed))
        })?;
        let mut paths = Vec::new();
        let mut slopes = Vec::new();
        for (&seed, trace) in s.seeds.iter().zip(&traces) {
            let name = format!("sigma{sigma}_seed{seed}.csv");
            dir.write(&name, |w| Ok(trace.write_csv(w)?))?;
            paths.push(dir.path(&name));
            slopes.push(loglog_slope(&trace.avg_regret(), SLOPE_FROM).unwrap_or(f64::NAN));
        }
        let (summary, slope) = summarize(&paths)?;
        per_sigma.push((sigma, summary, slope, slopes));
    }
    dir.write("summary.csv", |w| {
        writeln!(w, "sigma,T,regret_mean,regret_median,regret_iqr")?;
        for (sigma, sm, _, _) in &per_sigma {
            for i in 0..sm.mean.len() {
                writeln!(
                    w,
                    "{sigma},{},{},{},{}",
                    i + 1,
                    e(sm.mean[i]),
                    e(sm.median[i]),
                    e(sm.iqr[i])
                )?;
            }
        }
        Ok(())
    })?;

    let mut by_sigma: Vec<(f64, f64)> = per_sigma
        .iter()
        .map(|(sigma, sm, _, _)| (*sigma, *sm.median.last().unwrap_or(&f64::NAN)))
        .collect();
    by_sigma.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ordered = by_sigma.windows(2).all(|p| p[0].1 <= p[1].1);
    let mut checks = vec![Check::new(
        "regret floors ordered by noise",
        ordered,
        format!("final median regret by sigma {by_sigma:?}"),
    )];
    if let Some((_, _, _, slopes)) = per_sigma.iter().find(|p| p.0 == 0.0) {
        let worst = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        checks.push(Check::new(
            "noise-free regret slope",
            worst <= -0.5,
            format!("worst per-seed log-log slope {worst:.3} (<= -0.5)"),
        ));
    }
    let summary = per_sigma
        .iter()
        .map(|(sigma, sm, slope, slopes)| {
            json!({
                "sigma": sigma,
                "final_regret_median": sm.median.last(),
                "median_curve_slope": slope,
                "per_seed_slopes": slopes,
            })
        })
        .collect::<Vec<_>>();
    Ok(Report {
        checks,
        summary: json!({ "slope_fit_from_T": SLOPE_FROM, "per_sigma": summary }),
    })
}

fn both_methods(s: &Settings) -> Result<Vec<(RegretTrace, RegretTrace)>, CliError> {
    per_seed(&s.seeds, |seed| {
        let sys = s.system.build(seed)?;
        let cfg = s.adaptive_config(&sys, s.noise_model(seed), seed);
        Ok((run(&sys, &cfg)?, indirect_adaptive_run(&sys, &cfg)?))
    })
}

fn opt_median(v: &[Option<usize>]) -> Option<f64> {
    let hits: Vec<f64> = v
        .iter()
        .map(|x| x.map_or(f64::INFINITY, |t| t as f64))
        .collect();
    Some(median(&hits)).filter(|m| m.is_finite())
}

fn compare_indirect(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    let runs = both_methods(s)?;
    for (&seed, (d, i)) in s.seeds.iter().zip(&runs) {
        dir.write(&format!("seed{seed}_deepo.csv"), |w| Ok(d.write_csv(w)?))?;
        dir.write(&format!("seed{seed}_indirect.csv"), |w| Ok(i.write_csv(w)?))?;
    }
    let gaps_d: Vec<Vec<f64>> = runs.iter().map(|r| r.0.relative_gaps()).collect();
    let gaps_i: Vec<Vec<f64>> = runs.iter().map(|r| r.1.relative_gaps()).collect();
    let (sd, si) = (summarize_series(&gaps_d)?, summarize_series(&gaps_i)?);
    let t0 = runs[0].0.t0;
    dir.write("summary.csv", |w| {
        writeln!(
            w,
            "t,deepo_gap_mean,deepo_gap_median,indirect_gap_mean,indirect_gap_median"
        )?;
        for k in 0..sd.mean.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                t0 + k,
                e(sd.mean[k]),
                e(sd.median[k]),
                e(si.mean[k]),
                e(si.median[k])
            )?;
        }
        Ok(())
    })?;
    let hit_d: Vec<Option<usize>> = runs.iter().map(|r| r.0.first_time_below(1e-3)).collect();
    let hit_i: Vec<Option<usize>> = runs.iter().map(|r| r.1.first_time_below(1e-3)).collect();
    let from = t0 + 20;
    let smooth_d: Vec<f64> = runs
        .iter()
        .map(|r| r.0.mean_gain_change_after(from))
        .collect();
    let smooth_i: Vec<f64> = runs
        .iter()
        .map(|r| r.1.mean_gain_change_after(from))
        .collect();
    let reached = hit_d.iter().chain(&hit_i).all(Option::is_some);
    let smoother = smooth_d
        .iter()
        .zip(&smooth_i)
        .filter(|(a, b)| a < b)
        .count();
    Ok(Report {
        checks: vec![
            Check::new(
                "both reach gap 1e-3",
                reached,
                format!("first t per seed: DeePO {hit_d:?}, indirect {hit_i:?}"),
            ),
            Check::new(
                "DeePO gain smoother",
                smoother == runs.len(),
                format!(
                    "mean |dK| after t = {from}: DeePO {:.3e}, indirect {:.3e}; smoother on {smoother}/{}",
                    mean(&smooth_d),
                    mean(&smooth_i),
                    runs.len()
                ),
            ),
        ],
        summary: json!({
            "first_t_gap_1e-3_median": { "deepo": opt_median(&hit_d), "indirect": opt_median(&hit_i) },
            "mean_gain_change": { "deepo": mean(&smooth_d), "indirect": mean(&smooth_i) },
        }),
    })
}

fn finite_cost(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    let runs = both_methods(s)?;
    let cum: Vec<(Vec<f64>, Vec<f64>)> = runs
        .iter()
        .map(|(d, i)| (d.cumulative_stage_cost(), i.cumulative_stage_cost()))
        .collect();
    for (&seed, (d, i)) in s.seeds.iter().zip(&cum) {
        dir.write(&format!("seed{seed}.csv"), |w| {
            writeln!(w, "t,deepo_cost,indirect_cost")?;
            for k in 0..d.len() {
                writeln!(w, "{},{},{}", k + 1, e(d[k]), e(i[k]))?;
            }
            Ok(())
        })?;
    }
    let md = summarize_series(&cum.iter().map(|c| c.0.clone()).collect::<Vec<_>>())?.mean;
    let mi = summarize_series(&cum.iter().map(|c| c.1.clone()).collect::<Vec<_>>())?.mean;
    let rel: Vec<f64> = md.iter().zip(&mi).map(|(d, i)| (d - i) / i).collect();
    dir.write("summary.csv", |w| {
        writeln!(w, "t,deepo_mean,indirect_mean,relative_difference")?;
        for k in 0..md.len() {
            writeln!(w, "{},{},{},{}", k + 1, e(md[k]), e(mi[k]), e(rel[k]))?;
        }
        Ok(())
    })?;
    let end = *rel.last().unwrap_or(&f64::NAN);
    let worst = rel.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    Ok(Report {
        checks: vec![Check::new(
            "finite-horizon costs close",
            end.abs() <= 0.05,
            format!(
                "relative difference at t = {}: {end:.3e} (|.| <= 0.05); worst over the run {worst:.3e}",
                md.len()
            ),
        )],
        summary: json!({ "relative_difference_end": end, "relative_difference_worst": worst }),
    })
}

fn timing(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    // Timed sequentially: concurrent trials would share cores and skew each other.
    let mut rows = Vec::new();
    for &n in &s.dims {
        for &seed in &s.seeds {
            let t = time_steps(n, s.horizon, seed).map_err(CliError::numerical(seed))?;
            dir.write(&format!("n{n}_seed{seed}.csv"), |w| {
                writeln!(w, "step,deepo_us,indirect_us")?;
                for (k, (d, i)) in t.deepo.iter().zip(&t.indirect).enumerate() {
                    writeln!(
                        w,
                        "{k},{:.3},{:.3}",
                        d.as_secs_f64() * 1e6,
                        i.as_secs_f64() * 1e6
                    )?;
                }
                Ok(())
            })?;
            rows.push((
                n,
                seed,
                t.deepo_median().as_secs_f64() * 1e6,
                t.indirect_median().as_secs_f64() * 1e6,
            ));
        }
    }
    dir.write("summary.csv", |w| {
        writeln!(w, "n,seed,deepo_median_us,indirect_median_us")?;
        for r in &rows {
            writeln!(w, "{},{},{:.3},{:.3}", r.0, r.1, r.2, r.3)?;
        }
        Ok(())
    })?;
    let faster = rows.iter().filter(|r| r.2 < r.3).count();
    Ok(Report {
        checks: vec![Check::new(
            "DeePO step cheaper",
            faster == rows.len(),
            format!(
                "DeePO median below indirect median on {faster}/{} (n, seed) pairs",
                rows.len()
            ),
        )],
        summary: json!({
            "medians_us": rows.iter().map(|r| json!({"n": r.0, "seed": r.1, "deepo": r.2, "indirect": r.3})).collect::<Vec<_>>(),
        }),
    })
}

fn zo_complexity(s: &Settings, dir: &RunDir) -> Result<Report, CliError> {
    let runs = per_seed(&s.seeds, |seed| {
        let sys = s.system.build(seed)?;
        let k0 = match s.initial_gain(sys.m(), sys.n()) {
            deepo::adaptive::InitialGain::Given(k) => k,
            deepo::adaptive::InitialGain::OfflineOptimum => Mat::zeros(sys.m(), sys.n()),
        };
        let zo = zeroth_order_po_run(&sys, &k0, &s.zo_config(seed), &s.targets)?;
        let trace = run(&sys, &s.adaptive_config(&sys, s.noise_model(seed), seed))?;
        Ok((zo, trace))
    })?;
    let mut rows = Vec::new();
    for (&seed, (zo, trace)) in s.seeds.iter().zip(&runs) {
        let per_iter = 2 * s.zo_config(seed).minibatch;
        dir.write(&format!("seed{seed}_zo.csv"), |w| {
            writeln!(w, "iteration,trajectories,relative_gap")?;
            for (k, g) in zo.gaps.iter().enumerate() {
                writeln!(w, "{k},{},{}", k * per_iter, e(*g))?;
            }
            Ok(())
        })?;
        dir.write(
            &format!("seed{seed}_deepo.csv"),
            |w| Ok(trace.write_csv(w)?),
        )?;
        let pairs = pairs_to_targets(trace, &s.targets);
        for (z, p) in zo.targets.iter().zip(pairs) {
            rows.push(ComplexityRow {
                target_eps: z.0,
                trajectories: z.1,
                pairs: p.1,
                seed,
            });
        }
    }
    dir.write("summary.csv", |w| Ok(write_complexity_csv(&rows, w)?))?;
    let mut checks = Vec::new();
    let mut medians = Vec::new();
    for &eps in &s.targets {
        let of = |f: fn(&ComplexityRow) -> Option<usize>| {
            let v: Vec<Option<usize>> =
                rows.iter().filter(|r| r.target_eps == eps).map(f).collect();
            opt_median(&v)
        };
        let (traj, pairs) = (of(|r| r.trajectories), of(|r| r.pairs));
        let ratio = match (traj, pairs) {
            (Some(t), Some(p)) => t / p,
            _ => f64::NAN,
        };
        checks.push(Check::new(
            &format!("sample ratio at gap {eps}"),
            ratio >= 100.0,
            format!(
                "median trajectories {traj:?}, median pairs {pairs:?}, ratio {ratio:.0} (>= 100)"
            ),
        ));
        medians
            .push(json!({ "target": eps, "trajectories": traj, "pairs": pairs, "ratio": ratio }));
    }
    Ok(Report {
        checks,
        summary: json!({ "medians": medians }),
    })
}
