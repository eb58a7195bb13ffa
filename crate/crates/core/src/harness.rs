//! Experiment orchestration: configs, seeded multi-run execution,
//! aggregation, CSV/JSON/SVG output and the checker suites.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{check_bellman_dominance, check_dominating_average, CouplingFunction, OperatingPolicy};
use crate::error::{OperaError, Result};
use crate::estimation::{
    check_decomposability, make_knr_def, DecompositionProbe, DecompositionReport, DiscriminatorClass,
    EstimationFunction, ExpectationMode,
};
use crate::fe_dimension::{fe_dimension, verify_bilinear_le_effdim, verify_fe_le_be, DEFAULT_CAP};
use crate::hypothesis::{check_realizability, GreedyPolicy, HypothesisSet};
use crate::instances::{
    BellmanCompleteParams, KnrInstance, KnrParams, LinearMixtureInstance, LinearMixtureParams, TabularInstance,
    ValueTable, WitnessInstance, WitnessParams,
};
use crate::mdp::{Environment, TabularMdp, Transition};
use crate::opera::{
    knr_confidence, linear_mixture_confidence, log_covering_of_losses, opera_run, BetaContext, ConfidenceSet,
    DefConfidence, OperaConfig, RunLog,
};

/// Where an instance comes from: the shipped fixture when neither a fixture
/// path nor generator parameters are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum InstanceSpec {
    LinearMixture {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        params: Option<LinearMixtureParams>,
    },
    Witness {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        params: Option<WitnessParams>,
    },
    Tabular {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        params: Option<BellmanCompleteParams>,
    },
    Knr {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        params: Option<KnrParams>,
        /// Overrides the noise level of the loaded instance.
        #[serde(default)]
        sigma: Option<f64>,
    },
}

/// A constructed instance of any family.
#[derive(Debug, Clone)]
pub enum Instance {
    LinearMixture(LinearMixtureInstance),
    Witness(WitnessInstance),
    Tabular(TabularInstance),
    Knr(KnrInstance),
}

fn read_fixture(path: &Path, base: &Path) -> Result<String> {
    let p = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    std::fs::read_to_string(&p).map_err(|e| OperaError::Config(format!("cannot read {}: {e}", p.display())))
}

impl InstanceSpec {
    /// Builds the instance; relative fixture paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Instance> {
        Ok(match self {
            InstanceSpec::LinearMixture { fixture, params } => Instance::LinearMixture(match (fixture, params) {
                (Some(p), _) => LinearMixtureInstance::from_json(&read_fixture(p, base)?)?,
                (None, Some(p)) => LinearMixtureInstance::generate(p)?,
                (None, None) => LinearMixtureInstance::canonical(),
            }),
            InstanceSpec::Witness { fixture, params } => Instance::Witness(match (fixture, params) {
                (Some(p), _) => WitnessInstance::from_json(&read_fixture(p, base)?)?,
                (None, Some(p)) => WitnessInstance::generate(p)?,
                (None, None) => WitnessInstance::canonical(),
            }),
            InstanceSpec::Tabular { fixture, params } => Instance::Tabular(match (fixture, params) {
                (Some(p), _) => TabularInstance::from_json(&read_fixture(p, base)?)?,
                (None, Some(p)) => TabularInstance::generate(p)?,
                (None, None) => TabularInstance::canonical(),
            }),
            InstanceSpec::Knr { fixture, params, sigma } => {
                let inst = match (fixture, params) {
                    (Some(p), _) => KnrInstance::from_json(&read_fixture(p, base)?)?,
                    (None, Some(p)) => KnrInstance::generate(p)?,
                    (None, None) => KnrInstance::canonical(),
                };
                Instance::Knr(match sigma {
                    Some(s) => inst.with_sigma(*s)?,
                    None => inst,
                })
            }
        })
    }
}

impl Instance {
    pub fn values(&self) -> ValueTable {
        match self {
            Instance::LinearMixture(i) => i.values(),
            Instance::Witness(i) => i.values(),
            Instance::Tabular(i) => i.values(),
            Instance::Knr(i) => i.values(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Instance::LinearMixture(_) => "linear_mixture",
            Instance::Witness(_) => "witness",
            Instance::Tabular(_) => "tabular",
            Instance::Knr(_) => "knr",
        }
    }
}

/// Which confidence set drives selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRule {
    /// Closed-form ridge sets for linear mixture and KNR, the DEF constraint
    /// otherwise.
    #[default]
    Auto,
    /// Always the generic DEF constraint.
    Def,
}

/// Checker suites toggled in a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckerToggles {
    pub decomposability: bool,
    pub abc: bool,
    pub fedim: bool,
}

impl Default for CheckerToggles {
    fn default() -> Self {
        CheckerToggles {
            decomposability: true,
            abc: true,
            fedim: true,
        }
    }
}

fn default_seeds() -> usize {
    1
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    #[serde(default)]
    pub opera: OperaConfig,
    /// Seeds `opera.seed + i` for `i < num_seeds` unless `seeds` is given.
    #[serde(default = "default_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub confidence: ConfidenceRule,
    #[serde(default)]
    pub ridge_lambda: Option<f64>,
    /// KNR DEF clipping constant.
    #[serde(default = "default_clip")]
    pub clip_constant: f64,
    /// Target of the sample-complexity estimate.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub checkers: CheckerToggles,
    /// Multiplies every coupling's `kappa` before the dominance checks.
    #[serde(default = "default_scale")]
    pub kappa_scale: f64,
    /// Scale of the functional eluder search.
    #[serde(default = "default_epsilon")]
    pub fedim_epsilon: f64,
    #[serde(default = "default_true")]
    pub svg: bool,
}

impl ExperimentConfig {
    pub fn new(instance: InstanceSpec, opera: OperaConfig) -> Self {
        ExperimentConfig {
            instance,
            opera,
            num_seeds: 1,
            seeds: None,
            output_dir: None,
            confidence: ConfidenceRule::Auto,
            ridge_lambda: None,
            clip_constant: 1.0,
            epsilon: 0.1,
            checkers: CheckerToggles::default(),
            kappa_scale: 1.0,
            fedim_epsilon: 0.1,
            svg: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| OperaError::Config(format!("bad experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.opera.validate()?;
        if self.seed_list().is_empty() {
            return Err(OperaError::Config("at least one seed is required".into()));
        }
        if !(self.kappa_scale > 0.0) {
            return Err(OperaError::Config("kappa_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.num_seeds as u64).map(|i| self.opera.seed.wrapping_add(i)).collect(),
        }
    }
}

/// Runs one seed on a constructed instance.
pub fn run_seed(instance: &Instance, values: &ValueTable, config: &ExperimentConfig, seed: u64) -> Result<RunLog> {
    let mut opera = config.opera.clone();
    opera.seed = seed;
    let ctx = |n: usize, horizon: usize, log_v: f64| BetaContext {
        episodes: opera.episodes,
        horizon,
        delta: opera.delta,
        log_covering: log_covering_of_losses((n as f64).ln(), (n as f64).ln(), log_v),
        sigma: 0.0,
        feature_dim: 0,
        state_dim: 0,
    };
    match instance {
        Instance::LinearMixture(lm) => {
            let beta = opera.beta.resolve(&ctx(lm.class.len(), lm.env.horizon(), 0.0))?;
            let def = lm.def();
            let mut conf: Box<dyn ConfidenceSet<usize> + '_> = match config.confidence {
                ConfidenceRule::Auto => Box::new(linear_mixture_confidence(lm, config.ridge_lambda)?),
                ConfidenceRule::Def => {
                    Box::new(DefConfidence::new(&def, DiscriminatorClass::trivial(), lm.env.horizon())?)
                }
            };
            opera_run(&lm.env, &lm.class, conf.as_mut(), values, Some(lm.fstar), beta, &opera)
        }
        Instance::Witness(w) => {
            let beta = opera
                .beta
                .resolve(&ctx(w.class.len(), w.env.horizon(), w.discriminators.log_cardinality()))?;
            let def = w.def();
            let mut conf = DefConfidence::new(&def, w.discriminators.clone(), w.env.horizon())?;
            opera_run(&w.env, &w.class, &mut conf, values, Some(w.fstar), beta, &opera)
        }
        Instance::Tabular(t) => {
            let beta = opera.beta.resolve(&ctx(t.class.len(), t.env.horizon(), 0.0))?;
            let def = t.def()?;
            let mut conf = DefConfidence::new(&def, DiscriminatorClass::trivial(), t.env.horizon())?;
            opera_run(&t.env, &t.class, &mut conf, values, Some(t.fstar), beta, &opera)
        }
        Instance::Knr(k) => {
            let mut c = ctx(k.hypotheses.len(), k.horizon, 0.0);
            c.sigma = k.sigma;
            c.feature_dim = k.feature_dim;
            c.state_dim = k.state_dim;
            let beta = opera.beta.resolve(&c)?;
            let def = make_knr_def(k, opera.episodes, opera.delta, config.clip_constant)?;
            let mut conf: Box<dyn ConfidenceSet<Vec<f64>> + '_> = match config.confidence {
                ConfidenceRule::Auto => Box::new(knr_confidence(k, config.ridge_lambda)?),
                ConfidenceRule::Def => Box::new(DefConfidence::new(&def, DiscriminatorClass::trivial(), k.horizon)?),
            };
            let mut log = opera_run(k, k, conf.as_mut(), values, Some(k.fstar), beta, &opera)?;
            if log.clip_events > 0 {
                log.warnings.push(format!("{} clipped KNR losses", log.clip_events));
            }
            Ok(log)
        }
    }
}

/// Per-seed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed_index: usize,
    pub seed: u64,
    pub beta: f64,
    pub cumulative_regret: f64,
    pub fstar_always_feasible: bool,
    pub optimism_violations: usize,
    pub sample_complexity: Option<usize>,
    pub final_mixture_suboptimality: f64,
    pub clip_events: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed_index: usize,
    pub seed: u64,
    pub error: String,
}

/// Cumulative regret statistics across seeds at one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    /// Fraction of runs with `f*` feasible at this episode.
    pub feasible_fraction: f64,
    pub mean_mixture_suboptimality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexity {
    pub epsilon: f64,
    /// Fraction of successful seeds whose mixture reached `epsilon`.
    pub reached_fraction: f64,
    pub median_episode: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub family: String,
    pub optimal_value: f64,
    pub seeds: Vec<SeedSummary>,
    pub failed: Vec<FailedSeed>,
    pub curve: Vec<CurvePoint>,
    /// Fraction of successful runs with `f*` feasible at every episode.
    pub feasibility_frequency: f64,
    pub sample_complexity: SampleComplexity,
    /// Aggregates recomputed from the written per-seed CSVs agree.
    pub self_check: Option<bool>,
}

impl AggregateReport {
    /// Mean cumulative regret after `t` episodes.
    pub fn mean_regret_at(&self, t: usize) -> f64 {
        if t == 0 || self.curve.is_empty() {
            return 0.0;
        }
        self.curve[t.min(self.curve.len()) - 1].mean
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Worker pool capped by `OPERA_THREADS` when set.
fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("OPERA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| OperaError::Config(format!("OPERA_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(OperaError::Config("OPERA_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| OperaError::Config(format!("thread pool: {e}")))
}

/// Runs every seed on a constructed instance and aggregates.
pub fn run_instance(instance: &Instance, config: &ExperimentConfig) -> Result<(AggregateReport, Vec<Option<RunLog>>)> {
    config.validate()?;
    let values = instance.values();
    let seeds = config.seed_list();
    let results: Vec<Result<RunLog>> =
        pool()?.install(|| seeds.par_iter().map(|&s| run_seed(instance, &values, config, s)).collect());
    let mut summaries = Vec::new();
    let mut failed = Vec::new();
    let mut logs = Vec::new();
    for (i, (seed, res)) in seeds.iter().zip(results).enumerate() {
        match res {
            Ok(log) => {
                summaries.push(SeedSummary {
                    seed_index: i,
                    seed: *seed,
                    beta: log.beta,
                    cumulative_regret: log.cumulative_regret(),
                    fstar_always_feasible: log.fstar_always_feasible(),
                    optimism_violations: log.optimism_violations,
                    sample_complexity: log.sample_complexity(config.epsilon),
                    final_mixture_suboptimality: log.records.last().map_or(0.0, |r| r.mixture_suboptimality),
                    clip_events: log.clip_events,
                    warnings: log.warnings.clone(),
                });
                logs.push(Some(log));
            }
            Err(e) => {
                failed.push(FailedSeed {
                    seed_index: i,
                    seed: *seed,
                    error: e.to_string(),
                });
                logs.push(None);
            }
        }
    }
    let ok: Vec<&RunLog> = logs.iter().flatten().collect();
    let curve = aggregate_curve(&ok);
    let m = ok.len().max(1) as f64;
    let mut reached: Vec<f64> = summaries.iter().filter_map(|s| s.sample_complexity.map(|t| t as f64)).collect();
    reached.sort_by(f64::total_cmp);
    let report = AggregateReport {
        family: instance.family().to_string(),
        optimal_value: values.optimal,
        feasibility_frequency: summaries.iter().filter(|s| s.fstar_always_feasible).count() as f64 / m,
        sample_complexity: SampleComplexity {
            epsilon: config.epsilon,
            reached_fraction: reached.len() as f64 / m,
            median_episode: (!reached.is_empty()).then(|| quantile(&reached, 0.5)),
        },
        seeds: summaries,
        failed,
        curve,
        self_check: None,
    };
    Ok((report, logs))
}

fn aggregate_curve(logs: &[&RunLog]) -> Vec<CurvePoint> {
    let len = logs.iter().map(|l| l.records.len()).min().unwrap_or(0);
    (0..len)
        .map(|t| {
            let mut cum: Vec<f64> = logs.iter().map(|l| l.records[t].cum_regret).collect();
            let m = cum.len() as f64;
            let mean = cum.iter().sum::<f64>() / m;
            cum.sort_by(f64::total_cmp);
            CurvePoint {
                episode: t + 1,
                mean,
                q10: quantile(&cum, 0.1),
                q50: quantile(&cum, 0.5),
                q90: quantile(&cum, 0.9),
                feasible_fraction: logs.iter().filter(|l| l.records[t].fstar_feasible).count() as f64 / m,
                mean_mixture_suboptimality: logs.iter().map(|l| l.records[t].mixture_suboptimality).sum::<f64>() / m,
            }
        })
        .collect()
}

/// Loads the instance, runs every seed and writes per-seed CSVs, the
/// aggregate CSV, the summary JSON and (optionally) the regret SVG.
pub fn run_experiment(config: &ExperimentConfig, base: &Path) -> Result<AggregateReport> {
    config.validate()?;
    let instance = config.instance.load(base)?;
    let (mut report, logs) = run_instance(&instance, config)?;
    if let Some(dir) = &config.output_dir {
        let dir = if dir.is_absolute() { dir.clone() } else { base.join(dir) };
        std::fs::create_dir_all(&dir)?;
        let mut paths = Vec::new();
        for (i, log) in logs.iter().enumerate() {
            if let Some(log) = log {
                let p = dir.join(format!("seed_{i:03}.csv"));
                log.write_csv(std::fs::File::create(&p)?)?;
                paths.push(p);
            }
        }
        write_aggregate_csv(&report, std::fs::File::create(dir.join("aggregate.csv"))?)?;
        report.self_check = Some(self_check(&report, &paths)?);
        let summary = serde_json::json!({
            "config": config,
            "report": report,
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        if config.svg {
            std::fs::write(dir.join("regret.svg"), regret_svg(&report.curve))?;
        }
    }
    Ok(report)
}

pub fn write_aggregate_csv<W: std::io::Write>(report: &AggregateReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "episode",
        "mean_cum_regret",
        "q10_cum_regret",
        "q50_cum_regret",
        "q90_cum_regret",
        "fstar_feasible_fraction",
        "mean_mixture_suboptimality",
    ])?;
    for p in &report.curve {
        w.write_record([
            p.episode.to_string(),
            format!("{:.12e}", p.mean),
            format!("{:.12e}", p.q10),
            format!("{:.12e}", p.q50),
            format!("{:.12e}", p.q90),
            format!("{:.12e}", p.feasible_fraction),
            format!("{:.12e}", p.mean_mixture_suboptimality),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Recomputes the mean cumulative regret curve from per-seed CSVs.
fn self_check(report: &AggregateReport, paths: &[PathBuf]) -> Result<bool> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for p in paths {
        let mut r = csv::Reader::from_path(p)?;
        let idx = r
            .headers()?
            .iter()
            .position(|h| h == "cum_regret")
            .ok_or_else(|| OperaError::Invariant("per-seed CSV lacks cum_regret".into()))?;
        let mut col = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            col.push(
                rec[idx]
                    .parse::<f64>()
                    .map_err(|e| OperaError::Invariant(format!("bad CSV number: {e}")))?,
            );
        }
        columns.push(col);
    }
    if columns.is_empty() {
        return Ok(report.curve.is_empty());
    }
    Ok(report.curve.iter().enumerate().all(|(t, p)| {
        let mean = columns.iter().map(|c| c[t]).sum::<f64>() / columns.len() as f64;
        (mean - p.mean).abs() <= 1e-9 * p.mean.abs().max(1.0)
    }))
}

/// Single-polyline plot of the mean cumulative regret.
pub fn regret_svg(curve: &[CurvePoint]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let tmax = curve.len().max(1) as f64;
    let ymax = curve.iter().map(|p| p.mean).fold(0.0, f64::max).max(1e-12);
    let mut points = String::new();
    for p in curve {
        let x = m + (w - 2.0 * m) * p.episode as f64 / tmax;
        let y = h - m - (h - 2.0 * m) * p.mean / ymax;
        let _ = write!(points, "{x:.2},{y:.2} ");
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
<text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">episode (max {tmax})</text>\n\
<text x=\"10\" y=\"{m}\">{ymax:.3}</text>\n\
<polyline fill=\"none\" stroke=\"black\" points=\"{pts}\"/>\n</svg>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        ty = h - 10.0,
        pts = points.trim_end(),
    )
}

/// Checker suite selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Decomposability,
    Abc,
    Fedim,
    All,
}

impl std::str::FromStr for Suite {
    type Err = OperaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decomposability" => Ok(Suite::Decomposability),
            "abc" => Ok(Suite::Abc),
            "fedim" => Ok(Suite::Fedim),
            "all" => Ok(Suite::All),
            _ => Err(OperaError::Config(format!("unknown suite {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub family: String,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

fn push<T: Serialize>(out: &mut Vec<CheckResult>, name: &str, passed: bool, detail: &T) -> Result<()> {
    out.push(CheckResult {
        name: name.to_string(),
        passed,
        detail: serde_json::to_value(detail)?,
    });
    Ok(())
}

/// Probes over every `(h, s, a, s')` of a tabular environment with a spread
/// of collector, next-step and evaluated hypotheses.
pub fn tabular_probes(
    env: &TabularMdp,
    n: usize,
    members: &[crate::estimation::Discriminator],
) -> Vec<DecompositionProbe<usize>> {
    let spread = |k: usize| -> Vec<usize> {
        let mut v: Vec<usize> = [0, k / 3, (2 * k) / 3, k.saturating_sub(1)].into_iter().filter(|&x| x < k).collect();
        v.dedup();
        v
    };
    let hyps = spread(n);
    let vs: Vec<usize> = spread(members.len());
    let mut probes = Vec::new();
    for h in 0..env.horizon() {
        for s in 0..env.num_states() {
            for a in 0..env.num_actions() {
                for s2 in 0..env.num_states() {
                    for &c in &hyps {
                        for &next in &hyps {
                            for &g in &hyps {
                                for &k in &vs {
                                    probes.push(DecompositionProbe {
                                        h,
                                        collector: c,
                                        obs: Transition {
                                            state: s,
                                            action: a,
                                            reward: env.reward_at(h, s, a),
                                            next_state: s2,
                                        },
                                        next,
                                        g,
                                        v: members[k].clone(),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    probes
}

/// KNR probes at the quadrature roll-in states of `pi_{f*}` with sampled
/// next states.
pub fn knr_probes(inst: &KnrInstance, seed: u64) -> Result<Vec<DecompositionProbe<Vec<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.hypotheses.len();
    let mut probes = Vec::new();
    for h in 0..inst.horizon {
        let roll = inst.roll_in(&GreedyPolicy::new(inst, inst.fstar), h)?;
        for (s, _) in roll.iter().step_by((roll.len() / 4).max(1)) {
            for a in 0..inst.features.num_actions() {
                let s2 = inst.sample_next(h, s, a, &mut rng)?;
                for g in [0, n / 2, n - 1, inst.fstar] {
                    probes.push(DecompositionProbe {
                        h,
                        collector: 0,
                        obs: Transition {
                            state: s.clone(),
                            action: a,
                            reward: inst.reward(h, s, a)?,
                            next_state: s2.clone(),
                        },
                        next: 0,
                        g,
                        v: crate::estimation::Discriminator::Constant(0.0),
                    });
                }
            }
        }
    }
    Ok(probes)
}

fn all_triples(horizon: usize, n: usize) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::with_capacity(horizon * n * n);
    for h in 0..horizon {
        for f in 0..n {
            for g in 0..n {
                v.push((h, f, g));
            }
        }
    }
    v
}

fn all_pairs(horizon: usize, n: usize) -> Vec<(usize, usize)> {
    (0..horizon).flat_map(|h| (0..n).map(move |f| (h, f))).collect()
}

fn decomposability<E: Environment + ?Sized>(
    def: &dyn EstimationFunction<E::State>,
    env: &E,
    probes: &[DecompositionProbe<E::State>],
) -> Result<DecompositionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    check_decomposability(def, env, probes, ExpectationMode::Exact, 1e-10, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn abc_suite<E, C>(
    out: &mut Vec<CheckResult>,
    def: &dyn EstimationFunction<E::State>,
    coupling: &CouplingFunction,
    class: &C,
    env: &E,
    disc: &DiscriminatorClass,
    kappa_scale: f64,
) -> Result<()>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let n = class.len();
    let da = check_dominating_average(def, coupling, class, env, disc, &all_triples(env.horizon(), n), 1e-8)?;
    push(out, "dominating_average", da.passed, &serde_json::json!({"worst_gap": da.worst_gap, "probes": da.probes.len()}))?;
    let scaled = coupling.clone().with_kappa_scale(kappa_scale);
    let bd = check_bellman_dominance(&scaled, class, env, &all_pairs(env.horizon(), n), 1e-8)?;
    push(
        out,
        "bellman_dominance",
        bd.passed,
        &serde_json::json!({"kappa": scaled.kappa, "worst_gap": bd.worst_gap, "probes": bd.probes.len()}),
    )?;
    if coupling.factors().is_some() {
        let gap = coupling.factorization_gap();
        push(out, "bilinear_factorization", gap <= 1e-9, &serde_json::json!({ "gap": gap }))?;
    }
    Ok(())
}

fn fedim_suite(out: &mut Vec<CheckResult>, coupling: &CouplingFunction, epsilon: f64) -> Result<()> {
    let mut dims = Vec::new();
    let mut exact = true;
    for h in 0..coupling.horizon() {
        let d = fe_dimension(&coupling.table(h), epsilon, DEFAULT_CAP)?;
        exact &= d.exact;
        dims.push(d.dimension);
    }
    push(out, "fe_dimension", true, &serde_json::json!({"epsilon": epsilon, "per_step": dims, "exact": exact}))?;
    if let Some(factors) = coupling.factors() {
        let mut holds = true;
        let mut detail = Vec::new();
        for fac in factors {
            let r = verify_bilinear_le_effdim(&fac.w, &fac.x, epsilon, DEFAULT_CAP)?;
            holds &= r.holds;
            detail.push(serde_json::json!({"fe": r.fe.dimension, "effective_lower": r.effective.lower, "effective_upper": r.effective.upper}));
        }
        push(out, "bilinear_fe_le_effective", holds, &detail)?;
    }
    Ok(())
}

/// Runs the selected checker suites on the configured instance.
pub fn run_checkers(config: &ExperimentConfig, suite: Suite, base: &Path) -> Result<CheckReport> {
    let instance = config.instance.load(base)?;
    check_instance(&instance, config, suite)
}

pub fn check_instance(instance: &Instance, config: &ExperimentConfig, suite: Suite) -> Result<CheckReport> {
    let want = |s: Suite, toggle: bool| toggle && (suite == s || suite == Suite::All);
    let dec = want(Suite::Decomposability, config.checkers.decomposability);
    let abc = want(Suite::Abc, config.checkers.abc);
    let fed = want(Suite::Fedim, config.checkers.fedim);
    let eps = config.fedim_epsilon;
    let mut out = Vec::new();
    match instance {
        Instance::LinearMixture(lm) => {
            let def = lm.def();
            let coupling = lm.coupling()?;
            if dec {
                let r = decomposability(&def, &lm.env, &tabular_probes(&lm.env, lm.class.len(), &[crate::estimation::Discriminator::Constant(0.0)]))?;
                push(&mut out, "decomposability", r.passed, &r)?;
            }
            if abc {
                abc_suite(&mut out, &def, &coupling, &lm.class, &lm.env, &DiscriminatorClass::trivial(), config.kappa_scale)?;
            }
            if fed {
                fedim_suite(&mut out, &coupling, eps)?;
            }
        }
        Instance::Witness(w) => {
            let def = w.def();
            if dec {
                let r = decomposability(&def, &w.env, &tabular_probes(&w.env, w.class.len(), &w.discriminators.base_members()))?;
                push(&mut out, "decomposability", r.passed, &r)?;
            }
            if abc {
                push(&mut out, "witness_certificate", true, &w.certificate)?;
                abc_suite(&mut out, &def, w.coupling(), &w.class, &w.env, &w.discriminators, config.kappa_scale)?;
            }
            if fed {
                fedim_suite(&mut out, w.coupling(), eps)?;
            }
        }
        Instance::Tabular(t) => {
            let def = t.def()?;
            let coupling = crate::coupling::bellman_coupling(&t.env, &t.class, OperatingPolicy::QType)?;
            if dec {
                let r = decomposability(&def, &t.env, &tabular_probes(&t.env, t.class.len(), &[crate::estimation::Discriminator::Constant(0.0)]))?;
                push(&mut out, "decomposability", r.passed, &r)?;
            }
            if abc {
                let real = check_realizability(&t.class, &t.env, 1e-9)?;
                push(&mut out, "realizability", real.realizable, &serde_json::json!({"deviation": real.deviation}))?;
                abc_suite(&mut out, &def, &coupling, &t.class, &t.env, &DiscriminatorClass::trivial(), config.kappa_scale)?;
            }
            if fed {
                fedim_suite(&mut out, &coupling, eps)?;
                let r = verify_fe_le_be(&t.class, &t.env, eps, DEFAULT_CAP)?;
                push(&mut out, "fe_le_be", r.holds, &serde_json::json!({"fe": r.fe, "be": r.be, "exact": r.exact}))?;
            }
        }
        Instance::Knr(k) => {
            let def = make_knr_def(k, config.opera.episodes, config.opera.delta, config.clip_constant)?;
            if dec {
                let r = decomposability(&def, k, &knr_probes(k, 0)?)?;
                push(&mut out, "decomposability", r.passed, &r)?;
            }
            if abc || fed {
                let coupling = k.coupling()?;
                if abc {
                    abc_suite(&mut out, &def, &coupling, k, k, &DiscriminatorClass::trivial(), config.kappa_scale)?;
                }
                if fed {
                    fedim_suite(&mut out, &coupling, eps)?;
                }
            }
        }
    }
    let passed = out.iter().all(|c| c.passed);
    Ok(CheckReport {
        family: instance.family().to_string(),
        checks: out,
        passed,
    })
}
