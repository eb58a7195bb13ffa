//! Finite hypothesis classes, greedy policies, realizability and covering
//! numbers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{
    argmax, optimal_values, require_tabular, DeterministicPolicy, Environment, Policy, TabularMdp,
};

/// Read access to an enumerable hypothesis class over states `S`.
///
/// `value(f, H, s)` is zero for every hypothesis.
pub trait HypothesisSet<S>: Sync {
    fn len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn q_value(&self, f: usize, h: usize, state: &S, action: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn q_row(&self, f: usize, h: usize, state: &S) -> Vec<f64> {
        (0..self.num_actions())
            .map(|a| self.q_value(f, h, state, a))
            .collect()
    }

    fn greedy_action(&self, f: usize, h: usize, state: &S) -> usize {
        argmax(&self.q_row(f, h, state))
    }

    fn value(&self, f: usize, h: usize, state: &S) -> f64 {
        if h >= self.horizon() {
            return 0.0;
        }
        let row = self.q_row(f, h, state);
        row[argmax(&row)]
    }

    /// `V_{1,f}(s_1)`.
    fn initial_value(&self, f: usize) -> f64;
}

/// Greedy policy `pi_f` of one hypothesis, borrowed from its class.
pub struct GreedyPolicy<'a, S, C: HypothesisSet<S> + ?Sized> {
    pub class: &'a C,
    pub index: usize,
    _state: std::marker::PhantomData<fn(&S)>,
}

impl<'a, S, C: HypothesisSet<S> + ?Sized> GreedyPolicy<'a, S, C> {
    pub fn new(class: &'a C, index: usize) -> Self {
        GreedyPolicy {
            class,
            index,
            _state: std::marker::PhantomData,
        }
    }
}

impl<S, C: HypothesisSet<S> + ?Sized> Policy<S> for GreedyPolicy<'_, S, C> {
    fn action_probabilities(&self, h: usize, state: &S) -> Vec<f64> {
        let mut p = vec![0.0; self.class.num_actions()];
        p[self.class.greedy_action(self.index, h, state)] = 1.0;
        p
    }

    fn sample_action(&self, h: usize, state: &S, _rng: &mut dyn rand::RngCore) -> usize {
        self.class.greedy_action(self.index, h, state)
    }
}

/// Instance-specific parameters attached to a hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    None,
    /// Mixture weights `theta[h]`.
    LinearMixture { theta: Vec<Vec<f64>> },
    /// Transition model `P[h][s][a][s']` and rewards `r[h][s][a]`.
    Model {
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        rewards: Vec<Vec<Vec<f64>>>,
    },
}

/// Tabular hypothesis with its Q table and the induced greedy values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularHypothesis {
    pub q: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    v: Vec<Vec<f64>>,
    pub payload: Payload,
}

impl TabularHypothesis {
    pub fn from_q(q: Vec<Vec<Vec<f64>>>, payload: Payload) -> Self {
        let mut v: Vec<Vec<f64>> = q
            .iter()
            .map(|layer| layer.iter().map(|row| row[argmax(row)]).collect())
            .collect();
        let ns = q.first().map_or(0, |l| l.len());
        v.push(vec![0.0; ns]);
        TabularHypothesis { q, v, payload }
    }

    /// The model-based hypothesis `Q_f = Q*_{M_f}`.
    pub fn from_model(model: &TabularMdp) -> Self {
        let sol = optimal_values(model);
        TabularHypothesis {
            q: sol.q,
            v: sol.v,
            payload: Payload::Model {
                transitions: model.transitions().clone(),
                rewards: model.rewards().clone(),
            },
        }
    }

    /// `V_{h,f}` for `h` in `0..=H`.
    pub fn values(&self) -> &Vec<Vec<f64>> {
        &self.v
    }

    pub fn model(&self, initial_state: usize) -> Result<Option<TabularMdp>> {
        match &self.payload {
            Payload::Model {
                transitions,
                rewards,
            } => Ok(Some(TabularMdp::new(
                transitions.clone(),
                rewards.clone(),
                initial_state,
            )?)),
            _ => Ok(None),
        }
    }
}

/// Finite class of tabular hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassManifest", into = "ClassManifest")]
pub struct TabularClass {
    hypotheses: Vec<TabularHypothesis>,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    optimal_index: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ClassManifest {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    optimal_index: Option<usize>,
    hypotheses: Vec<TabularHypothesis>,
}

impl TryFrom<ClassManifest> for TabularClass {
    type Error = crate::error::OperaError;

    fn try_from(m: ClassManifest) -> Result<Self> {
        let hyps = m
            .hypotheses
            .into_iter()
            .map(|h| TabularHypothesis::from_q(h.q, h.payload))
            .collect();
        let class = TabularClass::new(hyps, m.initial_state)?;
        if class.num_states != m.num_states
            || class.num_actions != m.num_actions
            || class.horizon != m.horizon
        {
            return invalid("class manifest dimensions disagree with its tables");
        }
        class.with_optimal_index(m.optimal_index)
    }
}

impl From<TabularClass> for ClassManifest {
    fn from(c: TabularClass) -> Self {
        ClassManifest {
            num_states: c.num_states,
            num_actions: c.num_actions,
            horizon: c.horizon,
            initial_state: c.initial_state,
            optimal_index: c.optimal_index,
            hypotheses: c.hypotheses,
        }
    }
}

impl TabularClass {
    pub fn new(hypotheses: Vec<TabularHypothesis>, initial_state: usize) -> Result<Self> {
        let Some(first) = hypotheses.first() else {
            return invalid("hypothesis class is empty");
        };
        let horizon = first.q.len();
        if horizon == 0 {
            return invalid("hypothesis has no steps");
        }
        let num_states = first.q[0].len();
        let num_actions = first.q[0].first().map_or(0, |r| r.len());
        if num_states == 0 || num_actions == 0 {
            return invalid("hypothesis tables are empty");
        }
        if initial_state >= num_states {
            return invalid("initial state out of range");
        }
        for (i, f) in hypotheses.iter().enumerate() {
            let shape_ok = f.q.len() == horizon
                && f.q.iter().all(|l| {
                    l.len() == num_states && l.iter().all(|r| r.len() == num_actions)
                });
            if !shape_ok {
                return invalid(format!("hypothesis {i} has mismatched table shape"));
            }
            if f.q.iter().flatten().flatten().any(|x| !x.is_finite()) {
                return invalid(format!("hypothesis {i} has non-finite values"));
            }
        }
        Ok(TabularClass {
            hypotheses,
            num_states,
            num_actions,
            horizon,
            initial_state,
            optimal_index: None,
        })
    }

    pub fn with_optimal_index(mut self, index: Option<usize>) -> Result<Self> {
        if let Some(i) = index {
            if i >= self.hypotheses.len() {
                return invalid(format!("optimal index {i} out of range"));
            }
        }
        self.optimal_index = index;
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hypotheses(&self) -> &[TabularHypothesis] {
        &self.hypotheses
    }

    pub fn get(&self, f: usize) -> &TabularHypothesis {
        &self.hypotheses[f]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Ground-truth index of `f*`, when known.
    pub fn optimal_index(&self) -> Option<usize> {
        self.optimal_index
    }

    pub fn log_cardinality(&self) -> f64 {
        (self.hypotheses.len() as f64).ln()
    }

    pub fn greedy_policy(&self, f: usize) -> DeterministicPolicy {
        let actions = self.hypotheses[f]
            .q
            .iter()
            .map(|layer| layer.iter().map(|row| argmax(row)).collect())
            .collect();
        DeterministicPolicy {
            num_actions: self.num_actions,
            actions,
        }
    }

    /// Max over steps of the sup distance between Q tables.
    pub fn value_distance(&self, f: usize, g: usize) -> f64 {
        sup_distance(
            self.hypotheses[f].q.iter().flatten().flatten(),
            self.hypotheses[g].q.iter().flatten().flatten(),
        )
    }

    /// Parameter sup distance for model payloads, value distance otherwise.
    pub fn distance(&self, f: usize, g: usize) -> f64 {
        match (&self.hypotheses[f].payload, &self.hypotheses[g].payload) {
            (Payload::LinearMixture { theta: a }, Payload::LinearMixture { theta: b }) => {
                sup_distance(a.iter().flatten(), b.iter().flatten())
            }
            (
                Payload::Model {
                    transitions: pa,
                    rewards: ra,
                },
                Payload::Model {
                    transitions: pb,
                    rewards: rb,
                },
            ) => sup_distance(
                pa.iter().flatten().flatten().flatten(),
                pb.iter().flatten().flatten().flatten(),
            )
            .max(sup_distance(
                ra.iter().flatten().flatten(),
                rb.iter().flatten().flatten(),
            )),
            _ => self.value_distance(f, g),
        }
    }

    /// Largest violation of `V = max_a Q` over the class.
    pub fn greedy_consistency_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for f in &self.hypotheses {
            for (h, layer) in f.q.iter().enumerate() {
                for (s, row) in layer.iter().enumerate() {
                    gap = gap.max((f.v[h][s] - row[argmax(row)]).abs());
                }
            }
        }
        gap
    }
}

fn sup_distance<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl HypothesisSet<usize> for TabularClass {
    fn len(&self) -> usize {
        self.hypotheses.len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn q_value(&self, f: usize, h: usize, state: &usize, action: usize) -> f64 {
        self.hypotheses[f].q[h][*state][action]
    }

    fn q_row(&self, f: usize, h: usize, state: &usize) -> Vec<f64> {
        self.hypotheses[f].q[h][*state].clone()
    }

    fn value(&self, f: usize, h: usize, state: &usize) -> f64 {
        self.hypotheses[f].v[h][*state]
    }

    fn initial_value(&self, f: usize) -> f64 {
        self.hypotheses[f].v[0][self.initial_state]
    }
}

/// Outcome of a realizability check.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizabilityReport {
    pub realizable: bool,
    /// Closest hypothesis to `Q*` in sup norm.
    pub witness: usize,
    pub deviation: f64,
}

/// Checks whether some hypothesis matches `Q*` of `env` within `tol`.
pub fn check_realizability<E: Environment + ?Sized>(
    class: &TabularClass,
    env: &E,
    tol: f64,
) -> Result<RealizabilityReport> {
    let mdp = require_tabular(env, "realizability check")?;
    if mdp.num_states() != class.num_states
        || mdp.num_actions() != class.num_actions
        || mdp.horizon() != class.horizon
    {
        return invalid("class and environment dimensions differ");
    }
    let star = optimal_values(mdp);
    let mut best = (0, f64::INFINITY);
    for (i, f) in class.hypotheses.iter().enumerate() {
        let dev = sup_distance(
            f.q.iter().flatten().flatten(),
            star.q.iter().flatten().flatten(),
        );
        if dev < best.1 {
            best = (i, dev);
        }
    }
    Ok(RealizabilityReport {
        realizable: best.1 <= tol,
        witness: best.0,
        deviation: best.1,
    })
}

/// Natural log of the size of a greedy `epsilon`-cover of `n` points under
/// `dist`.
///
/// Greedy set cover is run at every distinct threshold not exceeding
/// `epsilon` and the smallest cover kept, which makes the result monotone
/// in `epsilon`.
pub fn log_covering_number(
    n: usize,
    dist: impl Fn(usize, usize) -> f64,
    epsilon: f64,
) -> Result<f64> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return invalid(format!("covering radius must be nonnegative, got {epsilon}"));
    }
    if n == 0 {
        return invalid("cannot cover an empty class");
    }
    let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(i, j)).collect()).collect();
    let mut thresholds: Vec<f64> = d
        .iter()
        .flatten()
        .copied()
        .filter(|x| *x <= epsilon)
        .collect();
    thresholds.push(epsilon);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let best = thresholds
        .iter()
        .map(|&t| greedy_cover_size(&d, t))
        .min()
        .unwrap_or(n);
    Ok((best as f64).ln())
}

fn greedy_cover_size(d: &[Vec<f64>], radius: f64) -> usize {
    let n = d.len();
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut centers = 0;
    while remaining > 0 {
        let (center, _) = (0..n)
            .map(|c| {
                let gain = (0..n).filter(|&j| !covered[j] && d[c][j] <= radius).count();
                (c, gain)
            })
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
        for j in 0..n {
            if !covered[j] && d[center][j] <= radius {
                covered[j] = true;
                remaining -= 1;
            }
        }
        centers += 1;
    }
    centers
}

impl TabularClass {
    /// Log covering number of the class under [`TabularClass::distance`].
    pub fn log_covering_number(&self, epsilon: f64) -> Result<f64> {
        log_covering_number(self.hypotheses.len(), |f, g| self.distance(f, g), epsilon)
    }
}
