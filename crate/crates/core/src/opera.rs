//! The OPERA loop: confidence-constrained optimistic selection, Q-type and
//! V-type data collection, confidence sets and `beta` schedules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::OperatingPolicy;
use crate::error::{invalid, OperaError, Result};
use crate::estimation::{clip_to, norm_sq, Discriminator, DiscriminatorClass, EstimationFunction, Observation};
use crate::hypothesis::{GreedyPolicy, HypothesisSet};
use crate::instances::{KnrInstance, LinearMixtureInstance, ValueTable};
use crate::mdp::{argmax, Environment, Policy, StateLike, Transition, UniformPolicy};

/// How `beta` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Fixed { beta: f64 },
    /// `c (ln T + ln H + ln N_L + ln(1/delta))`.
    Covering { c: f64 },
    /// `c sigma^2 d_phi d_s ln^2(T H / delta)`.
    Knr { c: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Covering { c: 1.0 }
    }
}

/// Quantities the schedules depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaContext {
    pub episodes: usize,
    pub horizon: usize,
    pub delta: f64,
    pub log_covering: f64,
    pub sigma: f64,
    pub feature_dim: usize,
    pub state_dim: usize,
}

impl BetaSchedule {
    pub fn resolve(&self, ctx: &BetaContext) -> Result<f64> {
        let beta = match *self {
            BetaSchedule::Fixed { beta } => beta,
            BetaSchedule::Covering { c } => {
                check_c(c)?;
                beta_default(ctx.episodes, ctx.horizon, ctx.log_covering, ctx.delta, c)
            }
            BetaSchedule::Knr { c } => {
                check_c(c)?;
                beta_knr(ctx.episodes, ctx.horizon, ctx.sigma, ctx.feature_dim, ctx.state_dim, ctx.delta, c)
            }
        };
        if beta.is_nan() || beta < 0.0 {
            return Err(OperaError::Config(format!("beta must be nonnegative, got {beta}")));
        }
        Ok(beta)
    }
}

fn check_c(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(OperaError::Config(format!("schedule constant must be positive, got {c}")))
    }
}

/// `c (ln T + ln H + ln N_L + ln(1/delta))`.
pub fn beta_default(episodes: usize, horizon: usize, log_covering: f64, delta: f64, c: f64) -> f64 {
    c * ((episodes as f64).ln() + (horizon as f64).ln() + log_covering + (1.0 / delta).ln())
}

/// `c sigma^2 d_phi d_s ln^2(T H / delta)`.
pub fn beta_knr(
    episodes: usize,
    horizon: usize,
    sigma: f64,
    feature_dim: usize,
    state_dim: usize,
    delta: f64,
    c: f64,
) -> f64 {
    let l = ((episodes * horizon) as f64 / delta).ln();
    c * sigma * sigma * (feature_dim * state_dim) as f64 * l * l
}

/// `ln N_L <= 2 ln|F| + ln|G| + ln|V|` for finite classes.
pub fn log_covering_of_losses(log_f: f64, log_g: f64, log_v: f64) -> f64 {
    2.0 * log_f + log_g + log_v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperaConfig {
    pub episodes: usize,
    pub delta: f64,
    pub beta: BetaSchedule,
    pub mode: OperatingPolicy,
    pub seed: u64,
    /// Slack in the per-episode optimism assertion.
    pub optimism_tolerance: f64,
}

impl Default for OperaConfig {
    fn default() -> Self {
        OperaConfig {
            episodes: 100,
            delta: 0.1,
            beta: BetaSchedule::default(),
            mode: OperatingPolicy::QType,
            seed: 0,
            optimism_tolerance: 1e-9,
        }
    }
}

impl OperaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(OperaError::Config("episodes must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(OperaError::Config("delta must lie in (0, 1)".into()));
        }
        if let BetaSchedule::Fixed { beta } = self.beta {
            if beta.is_nan() || beta < 0.0 {
                return Err(OperaError::Config("beta must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Running confidence set: consumes observations and reports, per step,
/// the constraint value of every hypothesis.
pub trait ConfidenceSet<S>: Send {
    fn horizon(&self) -> usize;
    fn num_hypotheses(&self) -> usize;
    fn observe(&mut self, h: usize, collector: usize, obs: &Observation<S>) -> Result<()>;
    fn constraint_values(&self, h: usize) -> Vec<f64>;
    fn clip_events(&self) -> usize {
        0
    }
    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// The generic confidence constraint for a DEF over finite `G = F` and `V`,
/// maintained incrementally. Sums are kept per `(g, v, group)`, plus per
/// next-step hypothesis when the DEF reads it.
pub struct DefConfidence<'a, S> {
    def: &'a dyn EstimationFunction<S>,
    discriminators: DiscriminatorClass,
    members: Vec<Discriminator>,
    n: usize,
    horizon: usize,
    groups: usize,
    /// `sums[h][next][g][k * groups + grp]`.
    sums: Vec<Vec<Vec<Vec<f64>>>>,
    clip_events: usize,
}

impl<'a, S: StateLike> DefConfidence<'a, S> {
    pub fn new(def: &'a dyn EstimationFunction<S>, discriminators: DiscriminatorClass, horizon: usize) -> Result<Self> {
        let n = def.num_hypotheses();
        if n == 0 {
            return invalid("hypothesis class is empty");
        }
        let members = if def.uses_discriminator() {
            discriminators.base_members()
        } else {
            vec![Discriminator::Constant(0.0)]
        };
        let discriminators = if def.uses_discriminator() {
            discriminators
        } else {
            DiscriminatorClass::trivial()
        };
        let groups = discriminators.num_groups();
        let nexts = if def.uses_next() { n } else { 1 };
        let width = members.len() * groups;
        Ok(DefConfidence {
            def,
            members,
            n,
            horizon,
            groups,
            sums: vec![vec![vec![vec![0.0; width]; n]; nexts]; horizon],
            discriminators,
            clip_events: 0,
        })
    }
}

impl<S: StateLike> ConfidenceSet<S> for DefConfidence<'_, S> {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_hypotheses(&self) -> usize {
        self.n
    }

    fn observe(&mut self, h: usize, collector: usize, obs: &Observation<S>) -> Result<()> {
        let grp = self.discriminators.group(&obs.state, obs.action)?;
        let bound = self.def.norm_bound();
        for (next, table) in self.sums[h].iter_mut().enumerate() {
            for (g, row) in table.iter_mut().enumerate() {
                for (k, v) in self.members.iter().enumerate() {
                    let mut l = self.def.evaluate(h, collector, obs, next, g, v);
                    if self.def.clips() {
                        if clip_to(&mut l, bound) {
                            self.clip_events += 1;
                        }
                    } else if norm_sq(&l) > (bound + 1e-9).powi(2) {
                        return Err(OperaError::Invariant(format!(
                            "{} loss norm {} exceeds its bound {bound}",
                            self.def.name(),
                            norm_sq(&l).sqrt()
                        )));
                    }
                    row[k * self.groups + grp] += norm_sq(&l);
                }
            }
        }
        Ok(())
    }

    fn constraint_values(&self, h: usize) -> Vec<f64> {
        let k = self.members.len();
        let groups = self.groups;
        let assembled = self.discriminators.is_assembled();
        (0..self.n)
            .map(|f| {
                let table = &self.sums[h][if self.sums[h].len() > 1 { f } else { 0 }];
                let own = &table[f];
                let lhs = if assembled {
                    (0..self.n)
                        .map(|g| {
                            (0..groups)
                                .map(|grp| {
                                    (0..k)
                                        .map(|v| own[v * groups + grp] - table[g][v * groups + grp])
                                        .fold(f64::NEG_INFINITY, f64::max)
                                })
                                .sum::<f64>()
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                } else {
                    (0..k)
                        .map(|v| {
                            let total = |row: &Vec<f64>| row[v * groups..(v + 1) * groups].iter().sum::<f64>();
                            let min_g = table.iter().map(total).fold(f64::INFINITY, f64::min);
                            total(own) - min_g
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                lhs.max(0.0)
            })
            .collect()
    }

    fn clip_events(&self) -> usize {
        self.clip_events
    }
}

/// Reference evaluation of the confidence constraint by enumerating every
/// `(v, g)` over a stored history of `(collector, observation)` pairs.
pub fn constraint_lhs<S: StateLike>(
    def: &dyn EstimationFunction<S>,
    discriminators: &DiscriminatorClass,
    h: usize,
    f: usize,
    history: &[(usize, Observation<S>)],
    num_g: usize,
) -> Result<f64> {
    if num_g == 0 {
        return invalid("G is empty");
    }
    let next = if def.uses_next() { f } else { 0 };
    let sq = |g: usize, v: &Discriminator, i: usize| -> f64 {
        let (collector, obs) = &history[i];
        let mut l = def.evaluate(h, *collector, obs, next, g, v);
        if def.clips() {
            clip_to(&mut l, def.norm_bound());
        }
        norm_sq(&l)
    };
    let members = if def.uses_discriminator() {
        discriminators.base_members()
    } else {
        vec![Discriminator::Constant(0.0)]
    };
    if def.uses_discriminator() && discriminators.is_assembled() {
        // max over assembled v of (A_f(v) - min_g A_g(v)) = max_g sum over
        // pairs of the best component there.
        let groups: Vec<usize> = history
            .iter()
            .map(|(_, o)| discriminators.group(&o.state, o.action))
            .collect::<Result<_>>()?;
        let mut distinct = groups.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let mut best = f64::NEG_INFINITY;
        for g in 0..num_g {
            let mut total = 0.0;
            for &grp in &distinct {
                let mut m = f64::NEG_INFINITY;
                for v in &members {
                    let mut diff = 0.0;
                    for i in 0..history.len() {
                        if groups[i] == grp {
                            diff += sq(f, v, i) - sq(g, v, i);
                        }
                    }
                    m = m.max(diff);
                }
                total += m;
            }
            best = best.max(total);
        }
        return Ok(best.max(0.0));
    }
    let mut best = f64::NEG_INFINITY;
    for v in &members {
        let own: f64 = (0..history.len()).map(|i| sq(f, v, i)).sum();
        let mut inf = f64::INFINITY;
        for g in 0..num_g {
            inf = inf.min((0..history.len()).map(|i| sq(g, v, i)).sum());
        }
        best = best.max(own - inf);
    }
    Ok(best.max(0.0))
}

/// Among hypotheses with `lhs[h][f] <= beta` at every step, the one with the
/// largest initial value; ties go to the smallest index.
pub fn select_hypothesis(initial_values: &[f64], lhs: &[Vec<f64>], beta: f64, episode: usize) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (f, &v) in initial_values.iter().enumerate() {
        if lhs.iter().all(|row| row[f] <= beta) && best.is_none_or(|b| v > initial_values[b]) {
            best = Some(f);
        }
    }
    best.ok_or_else(|| OperaError::Infeasible {
        episode,
        beta,
        min_lhs: lhs.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
    })
}

fn inverse_or_pinv(m: &DMatrix<f64>, warnings: &mut Vec<String>, what: &str) -> DMatrix<f64> {
    match m.clone().try_inverse() {
        Some(inv) if inv.iter().all(|x| x.is_finite()) && m.rank(1e-12) == m.nrows() => inv,
        _ => {
            let msg = format!("{what}: singular Gram matrix, using the pseudo-inverse");
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
            m.clone()
                .pseudo_inverse(1e-12)
                .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
        }
    }
}

/// Ridge regression statistics of the value-targeted linear mixture
/// confidence set at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStatistics {
    pub gram: DMatrix<f64>,
    pub moment: DVector<f64>,
    pub target_sq: f64,
    pub count: usize,
}

/// `||theta_f - theta_hat||^2_Sigma <= beta` with
/// `x = psi + sum phi V_{h+1,f^i}` and `y = r + V_{h+1,f^i}(s')`.
pub struct LinearMixtureRidge<'a> {
    instance: &'a LinearMixtureInstance,
    pub lambda: f64,
    /// Use the infimum over the class instead of the unconstrained least
    /// squares fit.
    pub inf_over_class: bool,
    stats: Vec<MixtureStatistics>,
    warnings: Vec<String>,
}

impl<'a> LinearMixtureRidge<'a> {
    pub fn new(instance: &'a LinearMixtureInstance, lambda: f64, inf_over_class: bool) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return invalid("ridge parameter must be finite and nonnegative");
        }
        let d = instance.features.dim;
        let horizon = instance.env.horizon();
        Ok(LinearMixtureRidge {
            instance,
            lambda,
            inf_over_class,
            stats: vec![
                MixtureStatistics {
                    gram: DMatrix::zeros(d, d),
                    moment: DVector::zeros(d),
                    target_sq: 0.0,
                    count: 0,
                };
                horizon
            ],
            warnings: Vec::new(),
        })
    }

    pub fn statistics(&self, h: usize) -> &MixtureStatistics {
        &self.stats[h]
    }

    /// `(Sigma + lambda I)^{-1} b`.
    pub fn estimate(&self, h: usize) -> (DVector<f64>, Vec<String>) {
        let st = &self.stats[h];
        let d = st.moment.len();
        let mut warnings = Vec::new();
        let m = &st.gram + DMatrix::identity(d, d) * self.lambda;
        let inv = inverse_or_pinv(&m, &mut warnings, "linear mixture");
        (inv * &st.moment, warnings)
    }

    /// `sum_i (theta^T x_i - y_i)^2`.
    pub fn squared_loss(&self, h: usize, theta: &[f64]) -> f64 {
        let st = &self.stats[h];
        let t = DVector::from_column_slice(theta);
        (t.transpose() * &st.gram * &t)[0] - 2.0 * t.dot(&st.moment) + st.target_sq
    }

    /// `||theta - theta_hat||^2_Sigma`.
    pub fn matrix_form(&self, h: usize, theta: &[f64]) -> f64 {
        let (hat, _) = self.estimate(h);
        let diff = DVector::from_column_slice(theta) - hat;
        (diff.transpose() * &self.stats[h].gram * &diff)[0]
    }
}

impl ConfidenceSet<usize> for LinearMixtureRidge<'_> {
    fn horizon(&self) -> usize {
        self.stats.len()
    }

    fn num_hypotheses(&self) -> usize {
        self.instance.class.len()
    }

    fn observe(&mut self, h: usize, collector: usize, obs: &Observation<usize>) -> Result<()> {
        let vnext = &self.instance.class.get(collector).values()[h + 1];
        let x = DVector::from_vec(self.instance.features.regression_feature(obs.state, obs.action, vnext));
        let y = obs.reward + vnext[obs.next_state];
        let st = &mut self.stats[h];
        st.gram += &x * x.transpose();
        st.moment += &x * y;
        st.target_sq += y * y;
        st.count += 1;
        if self.lambda == 0.0 {
            let (_, w) = self.estimate(h);
            for msg in w {
                if !self.warnings.contains(&msg) {
                    self.warnings.push(msg);
                }
            }
        }
        Ok(())
    }

    fn constraint_values(&self, h: usize) -> Vec<f64> {
        let n = self.instance.class.len();
        if self.inf_over_class {
            let q: Vec<f64> = (0..n).map(|f| self.squared_loss(h, &self.instance.theta(f)[h])).collect();
            let min = q.iter().copied().fold(f64::INFINITY, f64::min);
            q.iter().map(|x| (x - min).max(0.0)).collect()
        } else {
            let (hat, _) = self.estimate(h);
            let gram = &self.stats[h].gram;
            (0..n)
                .map(|f| {
                    let diff = DVector::from_column_slice(&self.instance.theta(f)[h]) - &hat;
                    (diff.transpose() * gram * &diff)[0].max(0.0)
                })
                .collect()
        }
    }

    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

/// Row-wise ridge statistics of the KNR confidence set at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct KnrStatistics {
    /// `sum phi phi^T`.
    pub gram: DMatrix<f64>,
    /// `sum s' phi^T`.
    pub cross: DMatrix<f64>,
    /// `sum ||s'||^2`.
    pub target_sq: f64,
    pub count: usize,
}

/// `||(U_f - U_hat) Sigma^{1/2}||_F^2 <= beta`.
pub struct KnrRidge<'a> {
    instance: &'a KnrInstance,
    pub lambda: f64,
    stats: Vec<KnrStatistics>,
    warnings: Vec<String>,
}

impl<'a> KnrRidge<'a> {
    pub fn new(instance: &'a KnrInstance, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return invalid("ridge parameter must be finite and nonnegative");
        }
        let (ds, dp) = (instance.state_dim, instance.feature_dim);
        Ok(KnrRidge {
            instance,
            lambda,
            stats: vec![
                KnrStatistics {
                    gram: DMatrix::zeros(dp, dp),
                    cross: DMatrix::zeros(ds, dp),
                    target_sq: 0.0,
                    count: 0,
                };
                instance.horizon
            ],
            warnings: Vec::new(),
        })
    }

    pub fn statistics(&self, h: usize) -> &KnrStatistics {
        &self.stats[h]
    }

    /// `U_hat = C (Sigma + lambda I)^{-1}`.
    pub fn estimate(&self, h: usize) -> (DMatrix<f64>, Vec<String>) {
        let st = &self.stats[h];
        let d = st.gram.nrows();
        let mut warnings = Vec::new();
        let inv = inverse_or_pinv(&(&st.gram + DMatrix::identity(d, d) * self.lambda), &mut warnings, "KNR");
        (&st.cross * inv, warnings)
    }

    /// `||(U - U_hat) Sigma^{1/2}||_F^2` with the symmetric square root.
    pub fn matrix_form(&self, h: usize, u: &DMatrix<f64>) -> f64 {
        let (hat, _) = self.estimate(h);
        let eig = SymmetricEigen::new(self.stats[h].gram.clone());
        let sqrt_vals = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        ((u - hat) * root).norm_squared()
    }

    /// `sum_i ||U phi_i - s'_i||^2` from the sufficient statistics.
    pub fn squared_loss(&self, h: usize, u: &DMatrix<f64>) -> f64 {
        let st = &self.stats[h];
        (u * &st.gram * u.transpose()).trace() - 2.0 * (u * st.cross.transpose()).trace() + st.target_sq
    }

    /// `sum_i ||U phi_i - s'_i||^2 - sum_i ||U_hat phi_i - s'_i||^2`.
    pub fn residual_form(&self, h: usize, u: &DMatrix<f64>) -> f64 {
        let (hat, _) = self.estimate(h);
        self.squared_loss(h, u) - self.squared_loss(h, &hat)
    }
}

impl ConfidenceSet<Vec<f64>> for KnrRidge<'_> {
    fn horizon(&self) -> usize {
        self.stats.len()
    }

    fn num_hypotheses(&self) -> usize {
        self.instance.hypotheses.len()
    }

    fn observe(&mut self, h: usize, _collector: usize, obs: &Observation<Vec<f64>>) -> Result<()> {
        if obs.next_state.len() != self.instance.state_dim {
            return invalid("next state has the wrong dimension");
        }
        let phi = self.instance.feature(&obs.state, obs.action);
        let s2 = DVector::from_column_slice(&obs.next_state);
        let st = &mut self.stats[h];
        st.gram += &phi * phi.transpose();
        st.cross += &s2 * phi.transpose();
        st.target_sq += s2.norm_squared();
        st.count += 1;
        if self.lambda == 0.0 && st.count >= st.gram.nrows() {
            let (_, w) = self.estimate(h);
            for msg in w {
                if !self.warnings.contains(&msg) {
                    self.warnings.push(msg);
                }
            }
        }
        Ok(())
    }

    fn constraint_values(&self, h: usize) -> Vec<f64> {
        (0..self.instance.hypotheses.len())
            .map(|f| self.matrix_form(h, &self.instance.hypotheses[f][h]).max(0.0))
            .collect()
    }

    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

/// Linear mixture confidence set with the default ridge `1e-8 (feature scale)^2`.
pub fn linear_mixture_confidence(instance: &LinearMixtureInstance, lambda: Option<f64>) -> Result<LinearMixtureRidge<'_>> {
    let scale = instance
        .features
        .psi
        .iter()
        .flatten()
        .flatten()
        .chain(instance.features.phi.iter().flatten().flatten().flatten())
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    LinearMixtureRidge::new(instance, lambda.unwrap_or(1e-8 * scale * scale), false)
}

/// KNR confidence set with the default ridge `1e-8 B^2`.
pub fn knr_confidence(instance: &KnrInstance, lambda: Option<f64>) -> Result<KnrRidge<'_>> {
    KnrRidge::new(instance, lambda.unwrap_or(1e-8 * instance.feature_bound.powi(2)))
}

/// One OPERA episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub selected_index: usize,
    /// `V_{1,f^t}(s_1)`.
    pub value_optimistic: f64,
    /// `V_1^{pi^t}(s_1)`.
    pub value_actual: f64,
    pub regret: f64,
    pub cum_regret: f64,
    pub fstar_feasible: bool,
    /// Largest constraint value of the selected hypothesis over steps.
    pub max_constraint_lhs: f64,
    /// Constraint values of `f*` per step.
    pub fstar_lhs: Vec<f64>,
    /// Realized return of the episode's trajectory (Q-type) or of the
    /// step-0 roll-in (V-type).
    pub realized_return: f64,
    /// `V* - mean_{i <= t} V^{pi^i}`, the suboptimality of the uniform
    /// mixture of iterates.
    pub mixture_suboptimality: f64,
}

/// A full OPERA run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub beta: f64,
    pub mode: OperatingPolicy,
    pub records: Vec<EpisodeRecord>,
    /// Episodes with `f*` feasible but `V_{1,f^t} < V*`.
    pub optimism_violations: usize,
    pub clip_events: usize,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn cumulative_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Cumulative regret after `t` episodes.
    pub fn regret_at(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.records[t.min(self.records.len()) - 1].cum_regret
    }

    /// True when `f*` passed every constraint at every episode.
    pub fn fstar_always_feasible(&self) -> bool {
        self.records.iter().all(|r| r.fstar_feasible)
    }

    /// First episode at which the uniform mixture is `epsilon`-optimal.
    pub fn sample_complexity(&self, epsilon: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.mixture_suboptimality <= epsilon)
            .map(|r| r.episode)
    }

    /// Writes the fixed-column episode CSV.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "episode",
            "selected_index",
            "value_optimistic",
            "value_actual",
            "regret",
            "cum_regret",
            "fstar_feasible",
            "max_constraint_lhs",
        ])?;
        for r in &self.records {
            w.write_record([
                r.episode.to_string(),
                r.selected_index.to_string(),
                format!("{:.12e}", r.value_optimistic),
                format!("{:.12e}", r.value_actual),
                format!("{:.12e}", r.regret),
                format!("{:.12e}", r.cum_regret),
                r.fstar_feasible.to_string(),
                format!("{:.12e}", r.max_constraint_lhs),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Policy taking `pi_f` up to step `h - 1` and uniform actions from `h` on.
struct RollInThenUniform<'a, P> {
    inner: &'a P,
    switch: usize,
    uniform: UniformPolicy,
}

impl<S, P: Policy<S>> Policy<S> for RollInThenUniform<'_, P> {
    fn action_probabilities(&self, h: usize, state: &S) -> Vec<f64> {
        if h < self.switch {
            self.inner.action_probabilities(h, state)
        } else {
            <UniformPolicy as Policy<S>>::action_probabilities(&self.uniform, h, state)
        }
    }

    fn sample_action(&self, h: usize, state: &S, rng: &mut dyn RngCore) -> usize {
        if h < self.switch {
            self.inner.sample_action(h, state, rng)
        } else {
            <UniformPolicy as Policy<S>>::sample_action(&self.uniform, h, state, rng)
        }
    }
}

fn roll_to<E: Environment + ?Sized>(
    env: &E,
    policy: &dyn Policy<E::State>,
    h: usize,
    rng: &mut dyn RngCore,
) -> Result<(Transition<E::State>, f64)> {
    let mut s = env.initial_state();
    let mut ret = 0.0;
    for step in 0..h {
        let a = policy.sample_action(step, &s, rng);
        let (r, s2) = env.step(step, &s, a, rng)?;
        ret += r;
        s = s2;
    }
    let a = policy.sample_action(h, &s, rng);
    let (r, s2) = env.step(h, &s, a, rng)?;
    Ok((
        Transition {
            state: s,
            action: a,
            reward: r,
            next_state: s2,
        },
        ret + r,
    ))
}

/// Runs OPERA for `config.episodes` episodes with a precomputed `beta`.
///
/// `values` supplies the true value of every greedy policy and `V*`;
/// `fstar` (when known) enables the feasibility and optimism diagnostics.
pub fn opera_run<E: Environment + ?Sized>(
    env: &E,
    class: &dyn HypothesisSet<E::State>,
    confidence: &mut dyn ConfidenceSet<E::State>,
    values: &ValueTable,
    fstar: Option<usize>,
    beta: f64,
    config: &OperaConfig,
) -> Result<RunLog> {
    config.validate()?;
    if beta.is_nan() || beta < 0.0 {
        return Err(OperaError::Config("beta must be nonnegative".into()));
    }
    let n = class.len();
    let horizon = env.horizon();
    if n == 0 {
        return invalid("hypothesis class is empty");
    }
    if confidence.num_hypotheses() != n || confidence.horizon() != horizon || class.horizon() != horizon {
        return invalid("confidence set, class and environment disagree on sizes");
    }
    if values.per_hypothesis.len() != n {
        return invalid("value table size differs from the class");
    }
    let initial: Vec<f64> = (0..n).map(|f| class.initial_value(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.episodes);
    let mut cum = 0.0;
    let mut value_sum = 0.0;
    let mut optimism_violations = 0;
    for t in 1..=config.episodes {
        let lhs: Vec<Vec<f64>> = (0..horizon).map(|h| confidence.constraint_values(h)).collect();
        let f = select_hypothesis(&initial, &lhs, beta, t)?;
        let fstar_lhs: Vec<f64> = fstar.map_or_else(Vec::new, |s| lhs.iter().map(|row| row[s]).collect());
        let fstar_feasible = fstar.is_some() && fstar_lhs.iter().all(|x| *x <= beta);
        if fstar_feasible && initial[f] < values.optimal - config.optimism_tolerance {
            optimism_violations += 1;
        }
        let policy = GreedyPolicy::new(class, f);
        let realized = match config.mode {
            OperatingPolicy::QType => {
                let traj = crate::mdp::rollout(env, &policy, &mut rng)?;
                for (h, tr) in traj.steps.iter().enumerate() {
                    confidence.observe(h, f, tr)?;
                }
                traj.total_reward()
            }
            OperatingPolicy::VType => {
                let mut realized = 0.0;
                for h in 0..horizon {
                    let mixed = RollInThenUniform {
                        inner: &policy,
                        switch: h,
                        uniform: UniformPolicy {
                            num_actions: env.num_actions(),
                        },
                    };
                    let (tr, ret) = roll_to(env, &mixed, h, &mut rng)?;
                    if h == 0 {
                        realized = ret;
                    }
                    confidence.observe(h, f, &tr)?;
                }
                realized
            }
        };
        let actual = values.per_hypothesis[f];
        let regret = values.optimal - actual;
        cum += regret;
        value_sum += actual;
        records.push(EpisodeRecord {
            episode: t,
            selected_index: f,
            value_optimistic: initial[f],
            value_actual: actual,
            regret,
            cum_regret: cum,
            fstar_feasible,
            max_constraint_lhs: lhs.iter().map(|row| row[f]).fold(0.0, f64::max),
            fstar_lhs,
            realized_return: realized,
            mixture_suboptimality: values.optimal - value_sum / t as f64,
        });
    }
    Ok(RunLog {
        seed: config.seed,
        beta,
        mode: config.mode,
        records,
        optimism_violations,
        clip_events: confidence.clip_events(),
        warnings: confidence.warnings(),
    })
}

/// Best hypothesis by initial value, ignoring constraints.
pub fn unconstrained_argmax<S>(class: &dyn HypothesisSet<S>) -> usize {
    let v: Vec<f64> = (0..class.len()).map(|f| class.initial_value(f)).collect();
    argmax(&v)
}
