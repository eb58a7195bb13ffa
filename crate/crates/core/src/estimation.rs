//! Decomposable estimation functions, discriminator classes and the
//! decomposability, discriminator-optimality and Lipschitz checkers.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, OperaError, Result};
use crate::hypothesis::{HypothesisSet, Payload, TabularClass};
use crate::instances::KnrInstance;
use crate::mdp::{backup, require_tabular, Environment, StateLike, TabularMdp, Transition};

/// Observation `o_h = (s_h, a_h, r_h, s_{h+1})`.
pub type Observation<S> = Transition<S>;

/// Discriminator `v(s, a, s')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Discriminator {
    Constant(f64),
    /// Depends on the next state only.
    NextState(Vec<f64>),
    /// Full table `values[s][a][s']`.
    Table(Vec<Vec<Vec<f64>>>),
}

impl Discriminator {
    pub fn value(&self, s: usize, a: usize, next: usize) -> f64 {
        match self {
            Discriminator::Constant(c) => *c,
            Discriminator::NextState(v) => v[next],
            Discriminator::Table(t) => t[s][a][next],
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            Discriminator::Constant(c) => c.abs(),
            Discriminator::NextState(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Discriminator::Table(t) => t.iter().flatten().flatten().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn negated(&self) -> Discriminator {
        match self {
            Discriminator::Constant(c) => Discriminator::Constant(-c),
            Discriminator::NextState(v) => Discriminator::NextState(v.iter().map(|x| -x).collect()),
            Discriminator::Table(t) => Discriminator::Table(
                t.iter()
                    .map(|l| l.iter().map(|r| r.iter().map(|x| -x).collect()).collect())
                    .collect(),
            ),
        }
    }

    /// Same variant and entries within `tol`.
    pub fn approx_eq(&self, other: &Discriminator, tol: f64) -> bool {
        let close = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
        };
        match (self, other) {
            (Discriminator::Constant(a), Discriminator::Constant(b)) => (a - b).abs() <= tol,
            (Discriminator::NextState(a), Discriminator::NextState(b)) => close(a, b),
            (Discriminator::Table(a), Discriminator::Table(b)) => {
                let fa: Vec<f64> = a.iter().flatten().flatten().copied().collect();
                let fb: Vec<f64> = b.iter().flatten().flatten().copied().collect();
                close(&fa, &fb)
            }
            _ => false,
        }
    }

    /// Sup distance between two discriminators on a finite grid.
    pub fn distance(&self, other: &Discriminator, ns: usize, na: usize) -> f64 {
        let mut d: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    d = d.max((self.value(s, a, s2) - other.value(s, a, s2)).abs());
                }
            }
        }
        d
    }
}

/// Finite discriminator class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscriminatorClass {
    /// An explicit list of discriminators.
    Explicit { members: Vec<Discriminator> },
    /// Every table whose `(s, a)` slice is one of `components` (functions of
    /// the next state), chosen independently per pair.
    Assembled {
        components: Vec<Vec<f64>>,
        num_states: usize,
        num_actions: usize,
    },
}

impl DiscriminatorClass {
    /// The single zero discriminator, for DEFs that ignore `v`.
    pub fn trivial() -> Self {
        DiscriminatorClass::Explicit {
            members: vec![Discriminator::Constant(0.0)],
        }
    }

    /// Plus/minus `bound` times the indicator of every set of next states,
    /// closed under per-pair assembly.
    pub fn indicator_family(num_states: usize, num_actions: usize, bound: f64) -> Result<Self> {
        if num_states == 0 || num_states > 16 {
            return invalid("indicator family needs between 1 and 16 states");
        }
        let mut components: Vec<Vec<f64>> = Vec::new();
        for mask in 0u32..(1 << num_states) {
            let ind: Vec<f64> = (0..num_states)
                .map(|s| if mask & (1 << s) != 0 { bound } else { 0.0 })
                .collect();
            let neg: Vec<f64> = ind.iter().map(|x| -x).collect();
            for c in [ind, neg] {
                if !components.contains(&c) {
                    components.push(c);
                }
            }
        }
        Ok(DiscriminatorClass::Assembled {
            components,
            num_states,
            num_actions,
        })
    }

    pub fn is_assembled(&self) -> bool {
        matches!(self, DiscriminatorClass::Assembled { .. })
    }

    /// Explicit members, or the components viewed as constant-in-`(s, a)`
    /// discriminators.
    pub fn base_members(&self) -> Vec<Discriminator> {
        match self {
            DiscriminatorClass::Explicit { members } => members.clone(),
            DiscriminatorClass::Assembled { components, .. } => components
                .iter()
                .map(|c| Discriminator::NextState(c.clone()))
                .collect(),
        }
    }

    pub fn bound(&self) -> f64 {
        self.base_members().iter().fold(0.0, |m, v| m.max(v.sup_norm()))
    }

    /// `ln |V|`.
    pub fn log_cardinality(&self) -> f64 {
        match self {
            DiscriminatorClass::Explicit { members } => (members.len() as f64).ln(),
            DiscriminatorClass::Assembled {
                components,
                num_states,
                num_actions,
            } => (num_states * num_actions) as f64 * (components.len() as f64).ln(),
        }
    }

    /// Membership scan for `-v` of every base member.
    pub fn is_symmetric(&self) -> bool {
        let members = self.base_members();
        members.iter().all(|v| {
            let n = v.negated();
            members.iter().any(|u| u.approx_eq(&n, 1e-12))
        })
    }

    /// Table built by picking component `choice[s * nA + a]` at each pair.
    pub fn assemble(&self, choice: &[usize]) -> Result<Discriminator> {
        match self {
            DiscriminatorClass::Assembled {
                components,
                num_states,
                num_actions,
            } => {
                if choice.len() != num_states * num_actions {
                    return invalid("assembly choice has the wrong length");
                }
                let table = (0..*num_states)
                    .map(|s| {
                        (0..*num_actions)
                            .map(|a| components[choice[s * num_actions + a]].clone())
                            .collect()
                    })
                    .collect();
                Ok(Discriminator::Table(table))
            }
            DiscriminatorClass::Explicit { .. } => invalid("explicit classes are not assembled"),
        }
    }

    /// Number of separable groups: one per `(s, a)` when assembled.
    pub fn num_groups(&self) -> usize {
        match self {
            DiscriminatorClass::Explicit { .. } => 1,
            DiscriminatorClass::Assembled {
                num_states,
                num_actions,
                ..
            } => num_states * num_actions,
        }
    }

    /// Group of an observation at pair `(s, a)`.
    pub fn group<S: StateLike>(&self, state: &S, action: usize) -> Result<usize> {
        match self {
            DiscriminatorClass::Explicit { .. } => Ok(0),
            DiscriminatorClass::Assembled { num_actions, .. } => state
                .index()
                .map(|s| s * num_actions + action)
                .ok_or_else(|| {
                    OperaError::Unsupported("assembled discriminators need finite states".into())
                }),
        }
    }

    /// `max_v sum_groups scores[v][group]` where `v` ranges over the class:
    /// one base member for explicit classes, an independent choice per group
    /// when assembled.
    pub fn maximize(&self, scores: &[Vec<f64>]) -> f64 {
        if scores.is_empty() {
            return 0.0;
        }
        let groups = scores[0].len();
        if self.is_assembled() {
            (0..groups)
                .map(|j| scores.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
                .sum()
        } else {
            scores
                .iter()
                .map(|row| row.iter().sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

/// A decomposable estimation function `l_{h,f'}(o_h, f_{h+1}, g_h, v)`.
pub trait EstimationFunction<S>: Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// Bound `R` on the Euclidean norm of every evaluation.
    fn norm_bound(&self) -> f64;
    /// Declared Lipschitz constant, metadata only.
    fn lipschitz(&self) -> f64;
    fn num_hypotheses(&self) -> usize;

    /// `collector` is the hypothesis `f'` whose policy gathered `obs`,
    /// `next` plays the role of `f_{h+1}` and `g` of `g_h`.
    fn evaluate(
        &self,
        h: usize,
        collector: usize,
        obs: &Observation<S>,
        next: usize,
        g: usize,
        v: &Discriminator,
    ) -> Vec<f64>;

    /// Completeness operator `T(f)`, reported at step `h`.
    fn completion(&self, h: usize, f: usize) -> usize;

    fn uses_collector(&self) -> bool;
    fn uses_next(&self) -> bool;
    fn uses_discriminator(&self) -> bool;

    /// Whether evaluations beyond the norm bound are clipped rather than
    /// treated as an invariant violation.
    fn clips(&self) -> bool {
        false
    }
}

/// Squared Euclidean norm.
pub fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Rescales `x` into the ball of radius `bound`; returns whether it clipped.
pub fn clip_to(x: &mut [f64], bound: f64) -> bool {
    let n = norm_sq(x).sqrt();
    if n > bound {
        let scale = bound / n;
        x.iter_mut().for_each(|v| *v *= scale);
        true
    } else {
        false
    }
}

/// Bellman-residual DEF `Q_{h,g}(s,a) - r - V_{h+1,f}(s')` on a tabular class.
#[derive(Debug, Clone)]
pub struct BellmanDef<'a> {
    class: &'a TabularClass,
    completion: Vec<Vec<usize>>,
    pub max_completion_gap: f64,
}

/// Builds the Bellman DEF; `T(f)_h` is the class element nearest to the
/// backup of `V_{h+1,f}`, which must lie within `tol` of the backup.
pub fn make_bellman_def<'a, E: Environment + ?Sized>(
    class: &'a TabularClass,
    env: &E,
    tol: f64,
) -> Result<BellmanDef<'a>> {
    let mdp = require_tabular(env, "Bellman DEF completion")?;
    let completion_table = bellman_completion(class, mdp)?;
    let mut completion = Vec::with_capacity(completion_table.len());
    let mut worst: f64 = 0.0;
    for (h, row) in completion_table.into_iter().enumerate() {
        let mut idx = Vec::with_capacity(row.len());
        for (f, (g, gap)) in row.into_iter().enumerate() {
            if gap > tol {
                return Err(OperaError::CompletenessViolation {
                    step: h,
                    hypothesis: f,
                    gap,
                    tolerance: tol,
                });
            }
            worst = worst.max(gap);
            idx.push(g);
        }
        completion.push(idx);
    }
    Ok(BellmanDef {
        class,
        completion,
        max_completion_gap: worst,
    })
}

/// For each `(h, f)`, the nearest class element at step `h` to
/// `T_h V_{h+1,f}` and its sup distance.
pub fn bellman_completion(
    class: &TabularClass,
    mdp: &TabularMdp,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if mdp.num_states() != class.num_states()
        || mdp.num_actions() != class.num_actions()
        || mdp.horizon() != class.horizon()
    {
        return invalid("class and environment dimensions differ");
    }
    let n = class.len();
    Ok((0..class.horizon())
        .map(|h| {
            (0..n)
                .map(|f| {
                    let target = backup(mdp, h, &class.get(f).values()[h + 1]);
                    (0..n)
                        .map(|g| {
                            let gap = class.get(g).q[h]
                                .iter()
                                .flatten()
                                .zip(target.iter().flatten())
                                .map(|(x, y)| (x - y).abs())
                                .fold(0.0, f64::max);
                            (g, gap)
                        })
                        .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                })
                .collect()
        })
        .collect())
}

impl EstimationFunction<usize> for BellmanDef<'_> {
    fn name(&self) -> &str {
        "bellman"
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn norm_bound(&self) -> f64 {
        2.0
    }
    fn lipschitz(&self) -> f64 {
        1.0
    }
    fn num_hypotheses(&self) -> usize {
        self.class.len()
    }

    fn evaluate(
        &self,
        h: usize,
        _collector: usize,
        obs: &Observation<usize>,
        next: usize,
        g: usize,
        _v: &Discriminator,
    ) -> Vec<f64> {
        let q = self.class.q_value(g, h, &obs.state, obs.action);
        vec![q - obs.reward - self.class.value(next, h + 1, &obs.next_state)]
    }

    fn completion(&self, h: usize, f: usize) -> usize {
        self.completion[h][f]
    }
    fn uses_collector(&self) -> bool {
        false
    }
    fn uses_next(&self) -> bool {
        true
    }
    fn uses_discriminator(&self) -> bool {
        false
    }
}

/// Features of a linear mixture model: `phi[s][a][s'][k]` and `psi[s][a][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFeatures {
    pub dim: usize,
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
    pub psi: Vec<Vec<Vec<f64>>>,
}

impl MixtureFeatures {
    pub fn num_states(&self) -> usize {
        self.phi.len()
    }

    pub fn num_actions(&self) -> usize {
        self.phi.first().map_or(0, |x| x.len())
    }

    /// `psi(s,a) + sum_{s'} phi(s,a,s') value(s')`.
    pub fn regression_feature(&self, s: usize, a: usize, value: &[f64]) -> Vec<f64> {
        let mut x = self.psi[s][a].clone();
        for (s2, v) in value.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            for (xk, pk) in x.iter_mut().zip(&self.phi[s][a][s2]) {
                *xk += pk * v;
            }
        }
        x
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na, d) = (self.num_states(), self.num_actions(), self.dim);
        if ns == 0 || na == 0 || d == 0 {
            return invalid("empty mixture features");
        }
        let shape_ok = self.psi.len() == ns
            && self.phi.iter().all(|l| {
                l.len() == na && l.iter().all(|r| r.len() == ns && r.iter().all(|x| x.len() == d))
            })
            && self.psi.iter().all(|l| l.len() == na && l.iter().all(|x| x.len() == d));
        if !shape_ok {
            return invalid("mixture feature dimension mismatch");
        }
        Ok(())
    }
}

/// Linear mixture DEF
/// `theta_{h,g}^T [psi + sum_{s'} phi V_{h+1,f'}] - r - V_{h+1,f'}(s')`.
#[derive(Debug, Clone)]
pub struct LinearMixtureDef<'a> {
    class: &'a TabularClass,
    features: &'a MixtureFeatures,
    thetas: Vec<&'a Vec<Vec<f64>>>,
    fstar: usize,
}

pub fn make_linear_mixture_def<'a>(
    class: &'a TabularClass,
    features: &'a MixtureFeatures,
    fstar: usize,
) -> Result<LinearMixtureDef<'a>> {
    features.validate()?;
    if features.num_states() != class.num_states() || features.num_actions() != class.num_actions()
    {
        return invalid("mixture features disagree with the class state/action spaces");
    }
    if fstar >= class.len() {
        return invalid("optimal index out of range");
    }
    let mut thetas = Vec::with_capacity(class.len());
    for (i, f) in class.hypotheses().iter().enumerate() {
        match &f.payload {
            Payload::LinearMixture { theta }
                if theta.len() == class.horizon() && theta.iter().all(|t| t.len() == features.dim) =>
            {
                thetas.push(theta)
            }
            _ => return invalid(format!("hypothesis {i} lacks a theta payload of dimension {}", features.dim)),
        }
    }
    Ok(LinearMixtureDef {
        class,
        features,
        thetas,
        fstar,
    })
}

impl LinearMixtureDef<'_> {
    pub fn theta(&self, f: usize, h: usize) -> &[f64] {
        &self.thetas[f][h]
    }
}

impl EstimationFunction<usize> for LinearMixtureDef<'_> {
    fn name(&self) -> &str {
        "linear_mixture"
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn norm_bound(&self) -> f64 {
        2.0
    }
    fn lipschitz(&self) -> f64 {
        let mut l: f64 = 0.0;
        for s in 0..self.features.num_states() {
            for a in 0..self.features.num_actions() {
                let ones = vec![1.0; self.features.num_states()];
                let x = self.features.regression_feature(s, a, &ones);
                l = l.max(x.iter().map(|v| v.abs()).sum());
            }
        }
        l
    }
    fn num_hypotheses(&self) -> usize {
        self.class.len()
    }

    fn evaluate(
        &self,
        h: usize,
        collector: usize,
        obs: &Observation<usize>,
        _next: usize,
        g: usize,
        _v: &Discriminator,
    ) -> Vec<f64> {
        let vnext = &self.class.get(collector).values()[h + 1];
        let x = self.features.regression_feature(obs.state, obs.action, vnext);
        let pred: f64 = self.thetas[g][h].iter().zip(&x).map(|(t, xi)| t * xi).sum();
        vec![pred - obs.reward - vnext[obs.next_state]]
    }

    fn completion(&self, _h: usize, _f: usize) -> usize {
        self.fstar
    }
    fn uses_collector(&self) -> bool {
        true
    }
    fn uses_next(&self) -> bool {
        false
    }
    fn uses_discriminator(&self) -> bool {
        false
    }
}

/// Witness DEF `E_{x ~ g_h(.|s,a)} v(s,a,x) - v(s,a,s')` over a class of
/// tabular models.
#[derive(Debug, Clone)]
pub struct WitnessDef<'a> {
    models: Vec<&'a Vec<Vec<Vec<Vec<f64>>>>>,
    bound: f64,
    fstar: usize,
}

pub fn make_witness_def<'a>(
    class: &'a TabularClass,
    discriminators: &DiscriminatorClass,
    fstar: usize,
) -> Result<WitnessDef<'a>> {
    if fstar >= class.len() {
        return invalid("optimal index out of range");
    }
    let mut models = Vec::with_capacity(class.len());
    for (i, f) in class.hypotheses().iter().enumerate() {
        match &f.payload {
            Payload::Model { transitions, .. } => models.push(transitions),
            _ => return invalid(format!("hypothesis {i} lacks a model payload")),
        }
    }
    Ok(WitnessDef {
        models,
        bound: discriminators.bound(),
        fstar,
    })
}

impl EstimationFunction<usize> for WitnessDef<'_> {
    fn name(&self) -> &str {
        "witness"
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn norm_bound(&self) -> f64 {
        2.0 * self.bound
    }
    fn lipschitz(&self) -> f64 {
        let ns = self.models.first().map_or(0, |m| m[0].len());
        ns as f64 * self.bound
    }
    fn num_hypotheses(&self) -> usize {
        self.models.len()
    }

    fn evaluate(
        &self,
        h: usize,
        _collector: usize,
        obs: &Observation<usize>,
        _next: usize,
        g: usize,
        v: &Discriminator,
    ) -> Vec<f64> {
        let (s, a) = (obs.state, obs.action);
        let predicted: f64 = self.models[g][h][s][a]
            .iter()
            .enumerate()
            .map(|(x, p)| p * v.value(s, a, x))
            .sum();
        vec![predicted - v.value(s, a, obs.next_state)]
    }

    fn completion(&self, _h: usize, _f: usize) -> usize {
        self.fstar
    }
    fn uses_collector(&self) -> bool {
        false
    }
    fn uses_next(&self) -> bool {
        false
    }
    fn uses_discriminator(&self) -> bool {
        true
    }
}

/// KNR DEF `U_{h,g} phi(s,a) - s'`, clipped at radius `R`.
#[derive(Debug, Clone)]
pub struct KnrDef<'a> {
    model: &'a KnrInstance,
    bound: f64,
}

/// Builds the KNR DEF with clipping radius
/// `2 B_U B + c_clip sigma sqrt(ln(T H d_s / delta))`.
pub fn make_knr_def(
    model: &KnrInstance,
    episodes: usize,
    delta: f64,
    c_clip: f64,
) -> Result<KnrDef<'_>> {
    if !(delta > 0.0 && delta < 1.0) || episodes == 0 {
        return invalid("clipping radius needs episodes >= 1 and delta in (0, 1)");
    }
    let log_term = ((episodes * model.horizon * model.state_dim) as f64 / delta).ln().max(0.0);
    let bound = 2.0 * model.operator_bound() * model.feature_bound
        + c_clip * model.sigma * log_term.sqrt();
    Ok(KnrDef { model, bound })
}

impl EstimationFunction<Vec<f64>> for KnrDef<'_> {
    fn name(&self) -> &str {
        "knr"
    }
    fn output_dim(&self) -> usize {
        self.model.state_dim
    }
    fn norm_bound(&self) -> f64 {
        self.bound
    }
    fn lipschitz(&self) -> f64 {
        self.model.feature_bound * (self.model.state_dim * self.model.feature_dim) as f64
    }
    fn num_hypotheses(&self) -> usize {
        self.model.hypotheses.len()
    }

    fn evaluate(
        &self,
        h: usize,
        _collector: usize,
        obs: &Observation<Vec<f64>>,
        _next: usize,
        g: usize,
        _v: &Discriminator,
    ) -> Vec<f64> {
        let mean = self.model.mean(g, h, &obs.state, obs.action);
        mean.iter().zip(&obs.next_state).map(|(m, s)| m - s).collect()
    }

    fn completion(&self, _h: usize, _f: usize) -> usize {
        self.model.fstar
    }
    fn uses_collector(&self) -> bool {
        false
    }
    fn uses_next(&self) -> bool {
        false
    }
    fn uses_discriminator(&self) -> bool {
        false
    }
    fn clips(&self) -> bool {
        true
    }
}

/// `E_{s'}[l_{h,f'}((s, a, r, s'), next, g, v)]` by the environment's
/// next-state nodes.
#[allow(clippy::too_many_arguments)]
pub fn expected_loss<E: Environment + ?Sized>(
    def: &dyn EstimationFunction<E::State>,
    env: &E,
    h: usize,
    collector: usize,
    state: &E::State,
    action: usize,
    next: usize,
    g: usize,
    v: &Discriminator,
) -> Result<Vec<f64>> {
    let reward = env.reward(h, state, action)?;
    let mut acc = vec![0.0; def.output_dim()];
    for (s2, w) in env.next_state_nodes(h, state, action)? {
        let obs = Transition {
            state: state.clone(),
            action,
            reward,
            next_state: s2,
        };
        for (a, x) in acc.iter_mut().zip(def.evaluate(h, collector, &obs, next, g, v)) {
            *a += w * x;
        }
    }
    Ok(acc)
}

/// One probe of the decomposability identity.
#[derive(Debug, Clone)]
pub struct DecompositionProbe<S> {
    pub h: usize,
    pub collector: usize,
    pub obs: Observation<S>,
    pub next: usize,
    pub g: usize,
    pub v: Discriminator,
}

/// How conditional expectations over `s'` are taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpectationMode {
    /// Environment next-state nodes.
    Exact,
    /// Sampled next states with the given budget.
    MonteCarlo { samples: usize },
}

/// Summary of a decomposability check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub probes: usize,
    pub max_residual: f64,
    /// Largest residual divided by its standard error (Monte Carlo only).
    pub max_standardized: f64,
    pub passed: bool,
}

/// Verifies `l - E_{s'}[l] = l` with `g` replaced by `T(f)` on every probe.
///
/// Exact mode compares against `tol`; Monte Carlo mode requires every
/// component of the residual to lie within three standard errors (plus
/// `tol`).
pub fn check_decomposability<E: Environment + ?Sized>(
    def: &dyn EstimationFunction<E::State>,
    env: &E,
    probes: &[DecompositionProbe<E::State>],
    mode: ExpectationMode,
    tol: f64,
    rng: &mut dyn RngCore,
) -> Result<DecompositionReport> {
    let mut max_residual: f64 = 0.0;
    let mut max_standardized: f64 = 0.0;
    let mut passed = true;
    for p in probes {
        let direct = def.evaluate(p.h, p.collector, &p.obs, p.next, p.g, &p.v);
        let tf = def.completion(p.h, p.next);
        let completed = def.evaluate(p.h, p.collector, &p.obs, p.next, tf, &p.v);
        let (mean, se) = match mode {
            ExpectationMode::Exact => (
                expected_loss(def, env, p.h, p.collector, &p.obs.state, p.obs.action, p.next, p.g, &p.v)?,
                vec![0.0; def.output_dim()],
            ),
            ExpectationMode::MonteCarlo { samples } => {
                if samples < 2 {
                    return invalid("Monte Carlo budget must be at least 2");
                }
                let dim = def.output_dim();
                let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
                for _ in 0..samples {
                    let s2 = env.sample_next(p.h, &p.obs.state, p.obs.action, rng)?;
                    let obs = Transition {
                        next_state: s2,
                        ..p.obs.clone()
                    };
                    let l = def.evaluate(p.h, p.collector, &obs, p.next, p.g, &p.v);
                    for k in 0..dim {
                        sum[k] += l[k];
                        sq[k] += l[k] * l[k];
                    }
                }
                let n = samples as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                let se = (0..dim)
                    .map(|k| ((sq[k] / n - mean[k] * mean[k]).max(0.0) * n / (n - 1.0) / n).sqrt())
                    .collect();
                (mean, se)
            }
        };
        for k in 0..def.output_dim() {
            let r = (direct[k] - mean[k] - completed[k]).abs();
            max_residual = max_residual.max(r);
            match mode {
                ExpectationMode::Exact => passed &= r <= tol,
                ExpectationMode::MonteCarlo { .. } => {
                    if se[k] > 0.0 {
                        max_standardized = max_standardized.max(r / se[k]);
                    }
                    passed &= r <= 3.0 * se[k] + tol;
                }
            }
        }
    }
    Ok(DecompositionReport {
        probes: probes.len(),
        max_residual,
        max_standardized,
        passed,
    })
}

/// Summary of the global discriminator optimality check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscriminatorReport {
    pub probes: usize,
    /// Assembly choice (or member index) attaining the max, per probe.
    pub maximizers: Vec<Vec<usize>>,
    /// Probes `(h, collector, f)` without a uniform maximizer.
    pub violations: Vec<(usize, usize, usize)>,
    pub passed: bool,
}

/// For each probe `(h, collector, f)`, finds a single discriminator in the
/// class maximizing `||E_{s'} l(o, f, f, v)||` at every listed `(s, a)`.
pub fn check_global_discriminator_optimality<E: Environment + ?Sized>(
    def: &dyn EstimationFunction<E::State>,
    env: &E,
    discriminators: &DiscriminatorClass,
    probes: &[(usize, usize, usize)],
    pairs: &[(E::State, usize)],
    tol: f64,
) -> Result<DiscriminatorReport> {
    let members = discriminators.base_members();
    let mut maximizers = Vec::new();
    let mut violations = Vec::new();
    if !def.uses_discriminator() {
        return Ok(DiscriminatorReport {
            probes: probes.len(),
            maximizers: vec![vec![0]; probes.len()],
            violations,
            passed: true,
        });
    }
    for &(h, collector, f) in probes {
        // norms[k][pair]
        let mut norms = vec![vec![0.0; pairs.len()]; members.len()];
        for (k, v) in members.iter().enumerate() {
            for (j, (s, a)) in pairs.iter().enumerate() {
                let e = expected_loss(def, env, h, collector, s, *a, f, f, v)?;
                norms[k][j] = norm_sq(&e).sqrt();
            }
        }
        let best: Vec<f64> = (0..pairs.len())
            .map(|j| norms.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        if discriminators.is_assembled() {
            let mut choice = vec![0; discriminators.num_groups()];
            for (j, (s, a)) in pairs.iter().enumerate() {
                let grp = discriminators.group(s, *a)?;
                let k = (0..members.len())
                    .find(|&k| norms[k][j] >= best[j] - tol)
                    .unwrap_or(0);
                choice[grp] = k;
            }
            // Re-verify the assembled table attains the pointwise max.
            let table = discriminators.assemble(&choice)?;
            let ok = pairs.iter().enumerate().all(|(j, (s, a))| {
                expected_loss(def, env, h, collector, s, *a, f, f, &table)
                    .map(|e| norm_sq(&e).sqrt() >= best[j] - tol)
                    .unwrap_or(false)
            });
            if !ok {
                violations.push((h, collector, f));
            }
            maximizers.push(choice);
        } else {
            match (0..members.len())
                .find(|&k| (0..pairs.len()).all(|j| norms[k][j] >= best[j] - tol))
            {
                Some(k) => maximizers.push(vec![k]),
                None => {
                    violations.push((h, collector, f));
                    maximizers.push(Vec::new());
                }
            }
        }
    }
    let passed = violations.is_empty();
    Ok(DiscriminatorReport {
        probes: probes.len(),
        maximizers,
        violations,
        passed,
    })
}

/// Empirical Lipschitz ratios per argument slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub next: f64,
    pub g: f64,
    pub v: f64,
    pub collector: f64,
}

/// Max of `||l(x) - l(y)||_inf / rho(x, y)` over the given pairs, varying one
/// slot of each probe at a time. Zero-distance pairs are skipped.
pub fn estimate_lipschitz<S: StateLike>(
    def: &dyn EstimationFunction<S>,
    probes: &[DecompositionProbe<S>],
    hypothesis_pairs: &[(usize, usize)],
    rho: impl Fn(usize, usize) -> f64,
    discriminator_pairs: &[(Discriminator, Discriminator, f64)],
) -> LipschitzReport {
    let diff = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let mut report = LipschitzReport {
        next: 0.0,
        g: 0.0,
        v: 0.0,
        collector: 0.0,
    };
    for p in probes {
        for &(x, y) in hypothesis_pairs {
            let d = rho(x, y);
            if d <= 0.0 {
                continue;
            }
            let e = |c: usize, n: usize, g: usize| def.evaluate(p.h, c, &p.obs, n, g, &p.v);
            let r_next = diff(&e(p.collector, x, p.g), &e(p.collector, y, p.g)) / d;
            let r_g = diff(&e(p.collector, p.next, x), &e(p.collector, p.next, y)) / d;
            let r_c = diff(&e(x, p.next, p.g), &e(y, p.next, p.g)) / d;
            report.next = report.next.max(r_next);
            report.g = report.g.max(r_g);
            report.collector = report.collector.max(r_c);
        }
        for (v1, v2, d) in discriminator_pairs {
            if *d <= 0.0 {
                continue;
            }
            let a = def.evaluate(p.h, p.collector, &p.obs, p.next, p.g, v1);
            let b = def.evaluate(p.h, p.collector, &p.obs, p.next, p.g, v2);
            report.v = report.v.max(diff(&a, &b) / d);
        }
    }
    report
}
