//! Wall-clock comparison of one DeePO update against one indirect update
//! (least-squares refresh plus a full Riccati solve) on the same samples.

use std::time::{Duration, Instant};

use crate::adaptive::{AdaptiveLearner, DeepoLearner};
use crate::baselines::IndirectLearner;
use crate::data::{build_covariances, iid_batch, DataBatch};
use crate::error::Result;
use crate::model::{optimal_gain, random_stable_identity_input, LinearSystem};
use crate::policy::Weights;

/// Per-step timings for one system size.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTimings {
    pub n: usize,
    pub m: usize,
    pub deepo: Vec<Duration>,
    pub indirect: Vec<Duration>,
}

impl StepTimings {
    pub fn deepo_median(&self) -> Duration {
        median(&self.deepo)
    }

    pub fn indirect_median(&self) -> Duration {
        median(&self.indirect)
    }
}

pub fn median(samples: &[Duration]) -> Duration {
    let mut s = samples.to_vec();
    s.sort();
    s.get(s.len() / 2).copied().unwrap_or_default()
}

/// Data for `steps` timed updates after an offline prefix of `2(n+m)`.
fn timing_batch(sys: &LinearSystem, steps: usize, seed: u64) -> (DataBatch, DataBatch) {
    let t0 = 2 * (sys.n() + sys.m());
    let batch = iid_batch(sys, t0 + steps, 0.01, seed);
    (batch.prefix(t0), batch)
}

/// Times `steps` updates of each method on a random stable plant with
/// `n` states and identity input matrix, both started from the optimal gain.
pub fn time_steps(n: usize, steps: usize, seed: u64) -> Result<StepTimings> {
    let sys = random_stable_identity_input(n, seed)?;
    let (offline, all) = timing_batch(&sys, steps, seed);
    let m = n;
    let w = Weights::of(&sys);
    let k0 = optimal_gain(&sys)?.gain.k;
    let mut deepo = DeepoLearner::new(build_covariances(&offline)?, w.clone(), k0.clone(), 0.01)?;
    let mut indirect = IndirectLearner::new(&offline, w, k0)?;
    let t0 = offline.t();
    let mut out = StepTimings {
        n,
        m,
        deepo: Vec::with_capacity(steps),
        indirect: Vec::with_capacity(steps),
    };
    for k in t0..t0 + steps {
        let (x, u, xn) = all.column(k);
        let start = Instant::now();
        deepo.observe(&x, &u, &xn)?;
        out.deepo.push(start.elapsed());
        let start = Instant::now();
        indirect.observe(&x, &u, &xn)?;
        out.indirect.push(start.elapsed());
    }
    Ok(out)
}
