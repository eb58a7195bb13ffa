//! Finite-horizon episodic MDPs, trajectory simulation and exact dynamic
//! programming for tabular instances.
//!
//! Steps are indexed `0..H`. Value tables carry one extra terminal row so that
//! `v[H]` is identically zero.

use std::fmt::Debug;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, OperaError, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const RETURN_TOL: f64 = 1e-12;

/// A state type the library can simulate over.
pub trait StateLike: Clone + Debug + PartialEq + Send + Sync {
    /// Dense index for finite state spaces, `None` for continuous states.
    fn index(&self) -> Option<usize>;
    /// Inverse of [`StateLike::index`] where one exists.
    fn from_index(i: usize) -> Option<Self>;
}

impl StateLike for usize {
    fn index(&self) -> Option<usize> {
        Some(*self)
    }

    fn from_index(i: usize) -> Option<Self> {
        Some(i)
    }
}

impl StateLike for Vec<f64> {
    fn index(&self) -> Option<usize> {
        None
    }

    fn from_index(_i: usize) -> Option<Self> {
        None
    }
}

/// Per-step decision rule over a finite action set.
pub trait Policy<S>: Sync {
    fn action_probabilities(&self, h: usize, state: &S) -> Vec<f64>;

    fn sample_action(&self, h: usize, state: &S, rng: &mut dyn RngCore) -> usize {
        let probs = self.action_probabilities(h, state);
        sample_index(&probs, rng)
    }
}

/// Draws an index from a discrete distribution. Falls back to the last
/// positive entry when rounding leaves the cumulative sum short of one.
pub fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Episodic environment with a finite action set.
pub trait Environment: Send + Sync {
    type State: StateLike;

    fn horizon(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn initial_state(&self) -> Self::State;

    /// Tabular view for exact oracles; `None` for continuous environments.
    fn as_tabular(&self) -> Option<&TabularMdp> {
        None
    }

    fn reward(&self, h: usize, state: &Self::State, action: usize) -> Result<f64>;
    fn sample_next(
        &self,
        h: usize,
        state: &Self::State,
        action: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self::State>;

    /// Weighted next states whose weighted sums give `E[F(s') | s, a]`.
    /// Exact support for tabular kernels, a quadrature rule for Gaussian ones.
    fn next_state_nodes(
        &self,
        h: usize,
        state: &Self::State,
        action: usize,
    ) -> Result<Vec<(Self::State, f64)>>;

    /// Samples `(r, s')` for one transition.
    fn step(
        &self,
        h: usize,
        state: &Self::State,
        action: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Self::State)> {
        let r = self.reward(h, state, action)?;
        let next = self.sample_next(h, state, action, rng)?;
        Ok((r, next))
    }

    /// Distribution of `s_h` when following `policy` from the initial state,
    /// expanded over `next_state_nodes`.
    fn roll_in(
        &self,
        policy: &dyn Policy<Self::State>,
        h: usize,
    ) -> Result<Vec<(Self::State, f64)>> {
        let mut layer = vec![(self.initial_state(), 1.0)];
        for step in 0..h {
            let mut next_layer = Vec::new();
            for (s, w) in &layer {
                let probs = policy.action_probabilities(step, s);
                for (a, &p) in probs.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    for (s2, q) in self.next_state_nodes(step, s, a)? {
                        next_layer.push((s2, w * p * q));
                    }
                }
            }
            layer = next_layer;
        }
        Ok(layer)
    }
}

/// One transition `(s_h, a_h, r_h, s_{h+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<S> {
    pub state: S,
    pub action: usize,
    pub reward: f64,
    pub next_state: S,
}

/// A full episode of exactly `H` transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub steps: Vec<Transition<S>>,
}

impl<S> Trajectory<S> {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Samples one transition.
pub fn step<E: Environment + ?Sized>(
    env: &E,
    h: usize,
    state: &E::State,
    action: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, E::State)> {
    env.step(h, state, action, rng)
}

/// Runs `policy` for a full episode from the initial state.
pub fn rollout<E: Environment + ?Sized>(
    env: &E,
    policy: &dyn Policy<E::State>,
    rng: &mut dyn RngCore,
) -> Result<Trajectory<E::State>> {
    let mut state = env.initial_state();
    let mut steps = Vec::with_capacity(env.horizon());
    for h in 0..env.horizon() {
        let action = policy.sample_action(h, &state, rng);
        let (reward, next_state) = env.step(h, &state, action, rng)?;
        steps.push(Transition {
            state: state.clone(),
            action,
            reward,
            next_state: next_state.clone(),
        });
        state = next_state;
    }
    Ok(Trajectory { steps })
}

/// Tabular episodic MDP with deterministic rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTabularMdp", into = "RawTabularMdp")]
pub struct TabularMdp {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    rewards: Vec<Vec<Vec<f64>>>,
    initial_state: usize,
}

#[derive(Serialize, Deserialize)]
struct RawTabularMdp {
    #[serde(rename = "H")]
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    #[serde(rename = "P")]
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "r")]
    rewards: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "s1")]
    initial_state: usize,
}

impl TryFrom<RawTabularMdp> for TabularMdp {
    type Error = OperaError;

    fn try_from(raw: RawTabularMdp) -> Result<Self> {
        TabularMdp::new(raw.transitions, raw.rewards, raw.initial_state)
    }
}

impl From<TabularMdp> for RawTabularMdp {
    fn from(m: TabularMdp) -> Self {
        RawTabularMdp {
            horizon: m.horizon,
            num_states: m.num_states,
            num_actions: m.num_actions,
            transitions: m.transitions,
            rewards: m.rewards,
            initial_state: m.initial_state,
        }
    }
}

impl TabularMdp {
    /// Builds and validates an MDP from `P[h][s][a][s']` and `r[h][s][a]`.
    pub fn new(
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        rewards: Vec<Vec<Vec<f64>>>,
        initial_state: usize,
    ) -> Result<Self> {
        let horizon = transitions.len();
        if horizon == 0 {
            return invalid("horizon must be positive");
        }
        if rewards.len() != horizon {
            return invalid("reward table length differs from horizon");
        }
        let num_states = transitions[0].len();
        if num_states == 0 {
            return invalid("empty state space");
        }
        let num_actions = transitions[0][0].len();
        if num_actions == 0 {
            return invalid("empty action space");
        }
        if initial_state >= num_states {
            return invalid(format!("initial state {initial_state} out of range"));
        }
        for h in 0..horizon {
            if transitions[h].len() != num_states || rewards[h].len() != num_states {
                return invalid(format!("step {h}: state dimension mismatch"));
            }
            for s in 0..num_states {
                if transitions[h][s].len() != num_actions || rewards[h][s].len() != num_actions {
                    return invalid(format!("step {h}, state {s}: action dimension mismatch"));
                }
                for a in 0..num_actions {
                    let row = &transitions[h][s][a];
                    if row.len() != num_states {
                        return invalid(format!("P[{h}][{s}][{a}] has wrong length"));
                    }
                    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                        return invalid(format!("P[{h}][{s}][{a}] has a negative entry"));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return invalid(format!("P[{h}][{s}][{a}] sums to {sum}"));
                    }
                    let r = rewards[h][s][a];
                    if !(0.0..=1.0).contains(&r) {
                        return invalid(format!("r[{h}][{s}][{a}] = {r} outside [0, 1]"));
                    }
                }
            }
        }
        let mdp = TabularMdp {
            horizon,
            num_states,
            num_actions,
            transitions,
            rewards,
            initial_state,
        };
        let best = mdp.max_reachable_return();
        if best > 1.0 + RETURN_TOL {
            return invalid(format!("a reachable trajectory collects return {best} > 1"));
        }
        Ok(mdp)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// `P_h(. | s, a)`.
    pub fn transition(&self, h: usize, s: usize, a: usize) -> &[f64] {
        &self.transitions[h][s][a]
    }

    pub fn reward_at(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[h][s][a]
    }

    pub fn transitions(&self) -> &Vec<Vec<Vec<Vec<f64>>>> {
        &self.transitions
    }

    pub fn rewards(&self) -> &Vec<Vec<Vec<f64>>> {
        &self.rewards
    }

    /// Largest return over trajectories with positive probability.
    pub fn max_reachable_return(&self) -> f64 {
        let mut next = vec![0.0; self.num_states];
        for h in (0..self.horizon).rev() {
            let cur: Vec<f64> = (0..self.num_states)
                .map(|s| {
                    (0..self.num_actions)
                        .map(|a| {
                            let tail = self.transitions[h][s][a]
                                .iter()
                                .zip(&next)
                                .filter(|(p, _)| **p > 0.0)
                                .map(|(_, v)| *v)
                                .fold(0.0, f64::max);
                            self.rewards[h][s][a] + tail
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            next = cur;
        }
        next[self.initial_state]
    }

    fn check(&self, h: usize, s: usize, a: usize) -> Result<()> {
        if h >= self.horizon {
            return invalid(format!("step {h} out of range for horizon {}", self.horizon));
        }
        if s >= self.num_states {
            return invalid(format!("state {s} out of range"));
        }
        if a >= self.num_actions {
            return invalid(format!("action {a} out of range"));
        }
        Ok(())
    }

    /// Exact distribution of `s_h` under `policy`.
    pub fn state_distribution(&self, policy: &dyn Policy<usize>, h: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.num_states];
        d[self.initial_state] = 1.0;
        for step in 0..h {
            let mut nd = vec![0.0; self.num_states];
            for s in 0..self.num_states {
                if d[s] == 0.0 {
                    continue;
                }
                let probs = policy.action_probabilities(step, &s);
                for (a, &p) in probs.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (s2, q) in self.transitions[step][s][a].iter().enumerate() {
                        nd[s2] += d[s] * p * q;
                    }
                }
            }
            d = nd;
        }
        d
    }
}

impl Environment for TabularMdp {
    type State = usize;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn initial_state(&self) -> usize {
        self.initial_state
    }

    fn as_tabular(&self) -> Option<&TabularMdp> {
        Some(self)
    }

    fn reward(&self, h: usize, state: &usize, action: usize) -> Result<f64> {
        self.check(h, *state, action)?;
        Ok(self.rewards[h][*state][action])
    }

    fn sample_next(
        &self,
        h: usize,
        state: &usize,
        action: usize,
        rng: &mut dyn RngCore,
    ) -> Result<usize> {
        self.check(h, *state, action)?;
        Ok(sample_index(&self.transitions[h][*state][action], rng))
    }

    fn next_state_nodes(&self, h: usize, state: &usize, action: usize) -> Result<Vec<(usize, f64)>> {
        self.check(h, *state, action)?;
        Ok(self.transitions[h][*state][action]
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(s, p)| (s, *p))
            .collect())
    }

    fn roll_in(&self, policy: &dyn Policy<usize>, h: usize) -> Result<Vec<(usize, f64)>> {
        if h >= self.horizon {
            return invalid(format!("step {h} out of range"));
        }
        Ok(self
            .state_distribution(policy, h)
            .into_iter()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
            .collect())
    }
}

/// Deterministic tabular policy `actions[h][s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub num_actions: usize,
    pub actions: Vec<Vec<usize>>,
}

impl Policy<usize> for DeterministicPolicy {
    fn action_probabilities(&self, h: usize, state: &usize) -> Vec<f64> {
        let mut p = vec![0.0; self.num_actions];
        p[self.actions[h][*state]] = 1.0;
        p
    }

    fn sample_action(&self, h: usize, state: &usize, _rng: &mut dyn RngCore) -> usize {
        self.actions[h][*state]
    }
}

/// Stochastic tabular policy `probs[h][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (h, layer) in probs.iter().enumerate() {
            for (s, row) in layer.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return invalid(format!("policy row ({h}, {s}) is not a distribution"));
                }
            }
        }
        Ok(TabularPolicy { probs })
    }
}

impl Policy<usize> for TabularPolicy {
    fn action_probabilities(&self, h: usize, state: &usize) -> Vec<f64> {
        self.probs[h][*state].clone()
    }
}

/// Uniform distribution over actions, for any state type.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl<S> Policy<S> for UniformPolicy {
    fn action_probabilities(&self, _h: usize, _state: &S) -> Vec<f64> {
        vec![1.0 / self.num_actions as f64; self.num_actions]
    }

    fn sample_action(&self, _h: usize, _state: &S, rng: &mut dyn RngCore) -> usize {
        rng.random_range(0..self.num_actions)
    }
}

/// Per-step value tables, `q[h][s][a]` and `v[h][s]` with `v[H] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctions {
    pub q: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<f64>>,
}

/// Optimal values together with the greedy optimal policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub q: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<f64>>,
    pub policy: DeterministicPolicy,
}

/// Index of the largest entry, ties to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// `r_h(s, a) + sum_{s'} P_h(s'|s,a) next[s']`.
pub fn backup(mdp: &TabularMdp, h: usize, next: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.num_states)
        .map(|s| {
            (0..mdp.num_actions)
                .map(|a| {
                    let ev: f64 = mdp.transitions[h][s][a]
                        .iter()
                        .zip(next)
                        .map(|(p, v)| p * v)
                        .sum();
                    mdp.rewards[h][s][a] + ev
                })
                .collect()
        })
        .collect()
}

/// Exact `Q^pi` and `V^pi` by backward induction.
pub fn exact_value(mdp: &TabularMdp, policy: &dyn Policy<usize>) -> ValueFunctions {
    let (nh, ns) = (mdp.horizon, mdp.num_states);
    let mut q = vec![Vec::new(); nh];
    let mut v = vec![vec![0.0; ns]; nh + 1];
    for h in (0..nh).rev() {
        q[h] = backup(mdp, h, &v[h + 1]);
        for s in 0..ns {
            let probs = policy.action_probabilities(h, &s);
            v[h][s] = probs.iter().zip(&q[h][s]).map(|(p, x)| p * x).sum();
        }
    }
    ValueFunctions { q, v }
}

/// `Q*`, `V*` and the greedy optimal policy.
pub fn optimal_values(mdp: &TabularMdp) -> OptimalSolution {
    let (nh, ns) = (mdp.horizon, mdp.num_states);
    let mut q = vec![Vec::new(); nh];
    let mut v = vec![vec![0.0; ns]; nh + 1];
    let mut actions = vec![vec![0; ns]; nh];
    for h in (0..nh).rev() {
        q[h] = backup(mdp, h, &v[h + 1]);
        for s in 0..ns {
            let a = argmax(&q[h][s]);
            actions[h][s] = a;
            v[h][s] = q[h][s][a];
        }
    }
    OptimalSolution {
        q,
        v,
        policy: DeterministicPolicy {
            num_actions: mdp.num_actions,
            actions,
        },
    }
}

/// Tabular view of an environment, or an unsupported-instance error.
pub fn require_tabular<'a, E: Environment + ?Sized>(env: &'a E, what: &str) -> Result<&'a TabularMdp> {
    env.as_tabular()
        .ok_or_else(|| OperaError::Unsupported(format!("{what} requires a tabular environment")))
}
