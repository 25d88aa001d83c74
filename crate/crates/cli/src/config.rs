//! Experiment configuration: TOML file, command-line overrides and the
//! per-experiment defaults they are layered on.

use std::path::{Path, PathBuf};

use deepo::adaptive::{AdaptiveConfig, InitialGain};
use deepo::baselines::ZoConfig;
use deepo::data::{AdversarialStrategy, NoiseModel};
use deepo::model::{
    benchmark_laplacian, four_state_benchmark, load_system, random_system, LinearSystem,
};
use deepo::numerics::Mat;
use deepo::scenarios;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    OfflineConvergence,
    AdaptiveRegret,
    CompareIndirect,
    FiniteHorizonCost,
    Timing,
    ZoSampleComplexity,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::OfflineConvergence,
        Experiment::AdaptiveRegret,
        Experiment::CompareIndirect,
        Experiment::FiniteHorizonCost,
        Experiment::Timing,
        Experiment::ZoSampleComplexity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::OfflineConvergence => "offline-convergence",
            Experiment::AdaptiveRegret => "adaptive-regret",
            Experiment::CompareIndirect => "compare-indirect",
            Experiment::FiniteHorizonCost => "finite-horizon-cost",
            Experiment::Timing => "timing",
            Experiment::ZoSampleComplexity => "zo-sample-complexity",
        }
    }

    pub fn subcommand(self) -> &'static str {
        match self {
            Experiment::OfflineConvergence => "offline",
            Experiment::AdaptiveRegret => "adaptive",
            Experiment::CompareIndirect => "compare-indirect",
            Experiment::FiniteHorizonCost => "finite-cost",
            Experiment::Timing => "timing",
            Experiment::ZoSampleComplexity => "zo-complexity",
        }
    }

    /// The claim each experiment checks.
    pub fn claim(self) -> &'static str {
        match self {
            Experiment::OfflineConvergence => {
                "offline DeePO on the 4-state plant reaches relative gap 1e-6 with a monotone cost"
            }
            Experiment::AdaptiveRegret => {
                "average regret decays and its floor grows with the noise level"
            }
            Experiment::CompareIndirect => {
                "on the Laplacian plant both methods reach gap 1e-3; DeePO's gain moves more smoothly"
            }
            Experiment::FiniteHorizonCost => {
                "mean finite-horizon costs of DeePO and the indirect method stay within 5%"
            }
            Experiment::Timing => "one DeePO update is cheaper than one Riccati-based update",
            Experiment::ZoSampleComplexity => {
                "zeroth-order PO needs at least 100x more samples than DeePO per gap target"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    FourState,
    Laplacian,
    /// Laplacian plant with `Q = 10 I`.
    LaplacianQ10,
    Random {
        n: usize,
        m: usize,
    },
    File {
        path: PathBuf,
    },
}

impl SystemSpec {
    /// Random plants are drawn per seed; the others ignore it.
    pub fn build(&self, seed: u64) -> deepo::Result<LinearSystem> {
        match self {
            SystemSpec::FourState => Ok(four_state_benchmark()),
            SystemSpec::Laplacian => Ok(benchmark_laplacian()),
            SystemSpec::LaplacianQ10 => Ok(scenarios::complexity_system()),
            SystemSpec::Random { n, m } => random_system(*n, *m, seed),
            SystemSpec::File { path } => load_system(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategySpec {
    Constant,
    AlignedWithState,
    RandomSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    None,
    Uniform { sigma: f64 },
    Gaussian { sigma: f64 },
    Adversarial { delta: f64, strategy: StrategySpec },
}

impl NoiseSpec {
    pub fn model(self, seed: u64) -> NoiseModel {
        match self {
            NoiseSpec::None => NoiseModel::none(),
            NoiseSpec::Uniform { sigma } => NoiseModel::uniform(sigma, seed),
            NoiseSpec::Gaussian { sigma } => NoiseModel::gaussian(sigma, seed),
            NoiseSpec::Adversarial { delta, strategy } => {
                let s = match strategy {
                    StrategySpec::Constant => AdversarialStrategy::Constant,
                    StrategySpec::AlignedWithState => AdversarialStrategy::AlignedWithState,
                    StrategySpec::RandomSign => AdversarialStrategy::RandomSign,
                };
                NoiseModel::adversarial(delta, s, seed)
            }
        }
    }

    /// Same kind with its scale replaced.
    pub fn with_scale(self, scale: f64) -> Self {
        match self {
            NoiseSpec::None | NoiseSpec::Uniform { .. } => NoiseSpec::Uniform { sigma: scale },
            NoiseSpec::Gaussian { .. } => NoiseSpec::Gaussian { sigma: scale },
            NoiseSpec::Adversarial { strategy, .. } => NoiseSpec::Adversarial {
                delta: scale,
                strategy,
            },
        }
    }

    pub fn scale(self) -> f64 {
        match self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Uniform { sigma } | NoiseSpec::Gaussian { sigma } => sigma,
            NoiseSpec::Adversarial { delta, .. } => delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainSpec {
    OfflineOptimum,
    Zero,
    /// `-0.15 I`; square systems only.
    ComplexityStart,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ZoSpec {
    pub r: Option<f64>,
    pub eta: Option<f64>,
    pub rollout_len: Option<usize>,
    pub minibatch: Option<usize>,
    pub max_iters: Option<usize>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub experiment: Option<Experiment>,
    pub system: Option<SystemSpec>,
    pub noise: Option<NoiseSpec>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub eta: Option<f64>,
    pub t0: Option<usize>,
    pub horizon: Option<usize>,
    pub forgetting: Option<f64>,
    pub probe_scale: Option<f64>,
    pub initial_gain: Option<GainSpec>,
    /// Offline iterations.
    pub iterations: Option<usize>,
    /// Noise scales swept by `adaptive`.
    pub sigmas: Option<Vec<f64>>,
    /// State dimensions timed by `timing`.
    pub dims: Option<Vec<usize>>,
    /// Relative-gap targets of `zo-complexity`.
    pub targets: Option<Vec<f64>>,
    pub zo: Option<ZoSpec>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Fully resolved settings of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub experiment: Experiment,
    pub system: SystemSpec,
    /// `None` on the offline fixture, whose noise is set by its SNR.
    pub noise: Option<NoiseSpec>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eta: f64,
    pub t0: usize,
    pub horizon: usize,
    pub forgetting: f64,
    pub probe_scale: f64,
    pub initial_gain: GainSpec,
    pub iterations: usize,
    pub sigmas: Vec<f64>,
    pub dims: Vec<usize>,
    pub targets: Vec<f64>,
    pub zo: ZoSpec,
}

impl Settings {
    fn defaults(experiment: Experiment) -> Self {
        let mut s = Settings {
            experiment,
            system: SystemSpec::Laplacian,
            noise: Some(NoiseSpec::Gaussian { sigma: 0.1 }),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs").join(experiment.name()),
            eta: 0.01,
            t0: 8,
            horizon: 200,
            forgetting: 1.0,
            probe_scale: 1.0,
            initial_gain: GainSpec::OfflineOptimum,
            iterations: 500,
            sigmas: Vec::new(),
            dims: Vec::new(),
            targets: Vec::new(),
            zo: ZoSpec::default(),
        };
        match experiment {
            Experiment::OfflineConvergence => {
                s.system = SystemSpec::FourState;
                s.noise = None;
                s.seeds = vec![scenarios::OFFLINE_SEED];
                s.eta = scenarios::OFFLINE_ETA;
                s.t0 = scenarios::OFFLINE_T;
            }
            Experiment::AdaptiveRegret => {
                s.system = SystemSpec::Random { n: 4, m: 2 };
                s.noise = Some(NoiseSpec::Uniform { sigma: 0.01 });
                s.seeds = (0..20).collect();
                s.horizon = 1000;
                s.sigmas = vec![0.1, 0.01, 0.001];
            }
            Experiment::CompareIndirect => {}
            Experiment::FiniteHorizonCost => s.seeds = (0..50).collect(),
            Experiment::Timing => {
                s.seeds = vec![0];
                s.horizon = 50;
                s.dims = vec![10, 20, 30];
            }
            Experiment::ZoSampleComplexity => {
                s.system = SystemSpec::LaplacianQ10;
                s.horizon = 400;
                s.initial_gain = GainSpec::ComplexityStart;
                s.targets = scenarios::COMPLEXITY_TARGETS.to_vec();
            }
        }
        s
    }

    /// Layers `file` and the command-line overrides on the defaults of
    /// `experiment` and validates the result.
    pub fn resolve(
        experiment: Experiment,
        file: FileConfig,
        seeds: Option<Vec<u64>>,
        out: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        if let Some(e) = file.experiment {
            if e != experiment {
                return Err(CliError::Config(format!(
                    "config is for experiment `{}` but `{}` was requested",
                    e.name(),
                    experiment.name()
                )));
            }
        }
        let mut s = Self::defaults(experiment);
        if let Some(v) = file.system {
            if experiment == Experiment::OfflineConvergence && s.noise.is_none() {
                s.noise = Some(NoiseSpec::Gaussian { sigma: 0.1 });
            }
            s.system = v;
        }
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = file.$field { s.$field = v; })* };
        }
        take!(
            seeds,
            output_dir,
            eta,
            t0,
            horizon,
            forgetting,
            probe_scale,
            initial_gain,
            iterations,
            sigmas,
            dims,
            targets,
            zo
        );
        if let Some(n) = file.noise {
            s.noise = Some(n);
        }
        if let Some(v) = seeds {
            s.seeds = v;
        }
        if let Some(v) = out {
            s.output_dir = v;
        }
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return bad(format!(
                "forgetting must lie in (0, 1], got {}",
                self.forgetting
            ));
        }
        if !(self.probe_scale >= 0.0 && self.probe_scale.is_finite()) {
            return bad("probe-scale must be >= 0".into());
        }
        if self.horizon == 0 || self.iterations == 0 {
            return bad("horizon and iterations must be positive".into());
        }
        if let Some(n) = self.noise {
            if !(n.scale() >= 0.0 && n.scale().is_finite()) {
                return bad("noise scale must be >= 0".into());
            }
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigmas must be >= 0".into());
        }
        if self.targets.iter().any(|t| !(*t > 0.0)) {
            return bad("targets must be positive".into());
        }
        if self.dims.contains(&0) {
            return bad("dims must be positive".into());
        }
        if let SystemSpec::Random { n, m } = self.system {
            if n == 0 || m == 0 || m > n {
                return bad(format!(
                    "random system needs 1 <= m <= n, got n = {n}, m = {m}"
                ));
            }
        }
        let (n, m) = self
            .dimensions()
            .map_err(|e| CliError::Config(format!("system: {e}")))?;
        let needs_data = !matches!(self.experiment, Experiment::Timing);
        if needs_data && self.t0 < n + m {
            return bad(format!("t0 = {} is below n + m = {}", self.t0, n + m));
        }
        if self.initial_gain == GainSpec::ComplexityStart && n != m {
            return bad("complexity-start gain needs a square input matrix".into());
        }
        if self.experiment == Experiment::ZoSampleComplexity {
            self.zo_config(0)
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn dimensions(&self) -> deepo::Result<(usize, usize)> {
        let sys = self.system.build(self.seeds[0])?;
        Ok((sys.n(), sys.m()))
    }

    pub fn noise_model(&self, seed: u64) -> NoiseModel {
        self.noise.map_or(NoiseModel::none(), |n| n.model(seed))
    }

    pub fn initial_gain(&self, m: usize, n: usize) -> InitialGain {
        match self.initial_gain {
            GainSpec::OfflineOptimum => InitialGain::OfflineOptimum,
            GainSpec::Zero => InitialGain::Given(Mat::zeros(m, n)),
            GainSpec::ComplexityStart => InitialGain::Given(Mat::identity(m, n) * -0.15),
        }
    }

    pub fn adaptive_config(
        &self,
        sys: &LinearSystem,
        noise: NoiseModel,
        seed: u64,
    ) -> AdaptiveConfig {
        let mut cfg = AdaptiveConfig::new(self.horizon, noise, seed);
        cfg.t0 = self.t0;
        cfg.eta = self.eta;
        cfg.forgetting = self.forgetting;
        cfg.probe_scale = self.probe_scale;
        cfg.initial_gain = self.initial_gain(sys.m(), sys.n());
        cfg
    }

    pub fn zo_config(&self, seed: u64) -> ZoConfig {
        let mut zo = ZoConfig::benchmark(self.noise_model(seed), seed);
        let spec = &self.zo;
        zo.r = spec.r.unwrap_or(zo.r);
        zo.eta = spec.eta.unwrap_or(zo.eta);
        zo.rollout_len = spec.rollout_len.unwrap_or(zo.rollout_len);
        zo.minibatch = spec.minibatch.unwrap_or(zo.minibatch);
        zo.max_iters = spec.max_iters.unwrap_or(zo.max_iters);
        zo
    }
}

/// Parses `--seed`: a single integer, a comma list, or a half-open range `a..b`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("{s:?}: {e}"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a >= b {
            return Err(format!("empty seed range {text}"));
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(num).collect()
}
