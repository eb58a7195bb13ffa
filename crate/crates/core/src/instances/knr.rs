use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ValueTable;
use crate::coupling::{CouplingFunction, Estimate, OperatingPolicy};
use crate::error::{invalid, OperaError, Result};
use crate::hypothesis::{GreedyPolicy, HypothesisSet};
use crate::mdp::{argmax, Environment};

const CANONICAL: &str = include_str!("../../fixtures/knr.json");

/// Nodes and weights of the `n`-point Gauss-Hermite rule for `N(0, 1)`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return invalid("planning budget must be positive");
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok((
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    ))
}

/// `phi(s, a) = scale * tanh(M_a s + c_a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnrFeatureMap {
    /// `matrices[a]`, rows of length `d_s`.
    pub matrices: Vec<Vec<Vec<f64>>>,
    pub offsets: Vec<Vec<f64>>,
    pub scale: f64,
}

impl KnrFeatureMap {
    pub fn num_actions(&self) -> usize {
        self.matrices.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.offsets.first().map_or(0, |c| c.len())
    }

    pub fn eval(&self, s: &[f64], a: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.feature_dim(),
            self.matrices[a].iter().zip(&self.offsets[a]).map(|(row, c)| {
                let z: f64 = row.iter().zip(s).map(|(m, x)| m * x).sum::<f64>() + c;
                self.scale * z.tanh()
            }),
        )
    }
}

/// Per-step reward, scaled by `1/H` so returns stay in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnrReward {
    /// `exp(-||s - target||^2 / (2 width^2))`, plus `action_bonus[a]`, clipped.
    Bump {
        target: Vec<f64>,
        width: f64,
        action_bonus: Vec<f64>,
    },
    /// `clip(<w, s> + offset, 0, 1)`.
    Linear { weights: Vec<f64>, offset: f64 },
}

impl KnrReward {
    fn raw(&self, s: &[f64], a: usize) -> f64 {
        match self {
            KnrReward::Bump {
                target,
                width,
                action_bonus,
            } => {
                let d2: f64 = s.iter().zip(target).map(|(x, t)| (x - t).powi(2)).sum();
                (-d2 / (2.0 * width * width)).exp() + action_bonus.get(a).copied().unwrap_or(0.0)
            }
            KnrReward::Linear { weights, offset } => {
                weights.iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + offset
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnrParams {
    pub state_dim: usize,
    pub feature_dim: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub sigma: f64,
    pub num_hypotheses: usize,
    /// Gauss-Hermite nodes per state dimension used by the planner.
    pub quadrature_nodes: usize,
    pub feature_scale: f64,
    /// Operator scale `R_U`: `U*` has spectral norm `R_U / 2`.
    pub operator_bound: f64,
    /// Range of the spectral norm of `U_f - U*` for wrong hypotheses, in
    /// units of `R_U`.
    pub min_perturbation: f64,
    pub max_perturbation: f64,
    pub seed: u64,
}

impl Default for KnrParams {
    fn default() -> Self {
        KnrParams {
            state_dim: 2,
            feature_dim: 2,
            num_actions: 2,
            horizon: 3,
            sigma: 0.1,
            num_hypotheses: 16,
            quadrature_nodes: 4,
            feature_scale: 0.7,
            operator_bound: 1.0,
            min_perturbation: 0.5,
            max_perturbation: 1.5,
            seed: 1,
        }
    }
}

/// Serialized KNR instance. Matrices are stored row-major as nested lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnrManifest {
    pub features: KnrFeatureMap,
    pub reward: KnrReward,
    /// `hypotheses[f][h]`, a `d_s x d_phi` matrix.
    pub hypotheses: Vec<Vec<Vec<Vec<f64>>>>,
    pub fstar: usize,
    pub initial_state: Vec<f64>,
    pub sigma: f64,
    pub quadrature_nodes: usize,
    pub feature_bound: f64,
}

/// Kernelized nonlinear regulator `s' = U*_h phi(s, a) + N(0, sigma^2 I)`
/// with a finite class of operators. Hypothesis values come from
/// certainty-equivalent planning with a tensor Gauss-Hermite rule.
#[derive(Debug, Clone)]
pub struct KnrInstance {
    pub horizon: usize,
    pub state_dim: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    /// Declared bound `B` on `||phi||`.
    pub feature_bound: f64,
    pub features: KnrFeatureMap,
    pub reward: KnrReward,
    pub hypotheses: Vec<Vec<DMatrix<f64>>>,
    pub fstar: usize,
    pub initial_state: Vec<f64>,
    pub quadrature_nodes: usize,
    /// Standard normal nodes in `d_s` dimensions.
    nodes: Vec<(DVector<f64>, f64)>,
    root_q: Vec<Vec<f64>>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return invalid("ragged matrix");
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl KnrInstance {
    pub fn from_manifest(m: KnrManifest) -> Result<Self> {
        let hypotheses = m
            .hypotheses
            .iter()
            .map(|f| f.iter().map(|u| to_matrix(u)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(
            m.features,
            m.reward,
            hypotheses,
            m.fstar,
            m.initial_state,
            m.sigma,
            m.quadrature_nodes,
            m.feature_bound,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        features: KnrFeatureMap,
        reward: KnrReward,
        hypotheses: Vec<Vec<DMatrix<f64>>>,
        fstar: usize,
        initial_state: Vec<f64>,
        sigma: f64,
        quadrature_nodes: usize,
        feature_bound: f64,
    ) -> Result<Self> {
        let (points, weights) = gauss_hermite(quadrature_nodes)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return invalid("sigma must be finite and nonnegative");
        }
        if hypotheses.is_empty() || fstar >= hypotheses.len() {
            return invalid("optimal index out of range");
        }
        let horizon = hypotheses[0].len();
        let state_dim = initial_state.len();
        let feature_dim = features.feature_dim();
        if horizon == 0 || state_dim == 0 || feature_dim == 0 || features.num_actions() == 0 {
            return invalid("KNR dimensions must be positive");
        }
        if features.offsets.len() != features.num_actions()
            || features.matrices.iter().any(|m| m.len() != feature_dim || m.iter().any(|r| r.len() != state_dim))
        {
            return invalid("feature map shapes are inconsistent");
        }
        for f in &hypotheses {
            if f.len() != horizon || f.iter().any(|u| u.nrows() != state_dim || u.ncols() != feature_dim) {
                return invalid("operator shapes are inconsistent");
            }
        }
        let width = match &reward {
            KnrReward::Bump { target, .. } => target.len(),
            KnrReward::Linear { weights, .. } => weights.len(),
        };
        if width != state_dim {
            return invalid("reward dimension differs from the state dimension");
        }
        // Probe grid on [-2, 2]^{d_s}.
        let grid: Vec<f64> = (0..5).map(|i| -2.0 + i as f64).collect();
        let mut probe = vec![0usize; state_dim];
        loop {
            let s: Vec<f64> = probe.iter().map(|&i| grid[i]).collect();
            for a in 0..features.num_actions() {
                let n = features.eval(&s, a).norm();
                if n > feature_bound + 1e-12 {
                    return invalid(format!("feature norm {n} exceeds the bound {feature_bound}"));
                }
            }
            let Some(pos) = probe.iter().position(|&i| i + 1 < grid.len()) else {
                break;
            };
            probe[pos] += 1;
            probe[..pos].iter_mut().for_each(|i| *i = 0);
        }
        let per_dim = if sigma == 0.0 { 1 } else { points.len() };
        let mut nodes = Vec::new();
        let mut idx = vec![0usize; state_dim];
        loop {
            let z = if sigma == 0.0 {
                DVector::zeros(state_dim)
            } else {
                DVector::from_iterator(state_dim, idx.iter().map(|&i| points[i]))
            };
            let w: f64 = if sigma == 0.0 { 1.0 } else { idx.iter().map(|&i| weights[i]).product() };
            nodes.push((z, w));
            let Some(pos) = idx.iter().position(|&i| i + 1 < per_dim) else {
                break;
            };
            idx[pos] += 1;
            idx[..pos].iter_mut().for_each(|i| *i = 0);
        }
        let mut inst = KnrInstance {
            horizon,
            state_dim,
            feature_dim,
            sigma,
            feature_bound,
            features,
            reward,
            hypotheses,
            fstar,
            initial_state,
            quadrature_nodes,
            nodes,
            root_q: Vec::new(),
        };
        let root_q = (0..inst.hypotheses.len())
            .map(|f| {
                (0..inst.features.num_actions())
                    .map(|a| inst.plan_q(f, 0, &inst.initial_state, a))
                    .collect()
            })
            .collect();
        inst.root_q = root_q;
        Ok(inst)
    }

    /// Random instance: `U*` with spectral norm `operator_bound / 2`, the
    /// other operators perturbed by random directions of varied size.
    pub fn generate(params: &KnrParams) -> Result<Self> {
        let KnrParams {
            state_dim: ds,
            feature_dim: dp,
            num_actions: na,
            horizon,
            sigma,
            num_hypotheses,
            quadrature_nodes,
            feature_scale,
            operator_bound,
            min_perturbation,
            max_perturbation,
            seed,
        } = *params;
        if ds == 0 || dp == 0 || na == 0 || horizon == 0 || num_hypotheses == 0 {
            return invalid("KNR parameters must be positive");
        }
        if !(0.0 < min_perturbation && min_perturbation <= max_perturbation) {
            return invalid("perturbation range must be positive and ordered");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let features = KnrFeatureMap {
            matrices: (0..na)
                .map(|_| (0..dp).map(|_| (0..ds).map(|_| normal(&mut rng)).collect()).collect())
                .collect(),
            offsets: (0..na)
                .map(|_| (0..dp).map(|_| 0.8 * normal(&mut rng)).collect())
                .collect(),
            scale: feature_scale,
        };
        let feature_bound = feature_scale * (dp as f64).sqrt();
        let random_op = |rng: &mut ChaCha8Rng, norm: f64| -> DMatrix<f64> {
            let m = DMatrix::from_fn(ds, dp, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = m.singular_values().max();
            if s > 0.0 {
                m * (norm / s)
            } else {
                m
            }
        };
        let ustar: Vec<DMatrix<f64>> = (0..horizon).map(|_| random_op(&mut rng, 0.5 * operator_bound)).collect();
        let fstar = rng.random_range(0..num_hypotheses);
        let mut hypotheses = Vec::with_capacity(num_hypotheses);
        for f in 0..num_hypotheses {
            if f == fstar {
                hypotheses.push(ustar.clone());
                continue;
            }
            let size = rng.random_range(min_perturbation..=max_perturbation) * operator_bound;
            hypotheses.push(ustar.iter().map(|u| u + random_op(&mut rng, size)).collect());
        }
        let target: Vec<f64> = (0..ds).map(|_| rng.random_range(-0.5..0.5)).collect();
        let reward = KnrReward::Bump {
            target,
            width: 0.5,
            action_bonus: vec![0.0; na],
        };
        Self::from_parts(
            features,
            reward,
            hypotheses,
            fstar,
            vec![0.0; ds],
            sigma,
            quadrature_nodes,
            feature_bound,
        )
    }

    /// The shipped fixture: `d_s = d_phi = 2`, `H = 3`, `sigma = 0.1`.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL).expect("shipped KNR fixture is valid")
    }

    pub fn manifest(&self) -> KnrManifest {
        KnrManifest {
            features: self.features.clone(),
            reward: self.reward.clone(),
            hypotheses: self
                .hypotheses
                .iter()
                .map(|f| f.iter().map(to_rows).collect())
                .collect(),
            fstar: self.fstar,
            initial_state: self.initial_state.clone(),
            sigma: self.sigma,
            quadrature_nodes: self.quadrature_nodes,
            feature_bound: self.feature_bound,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_manifest(serde_json::from_str(text)?)
    }

    /// The same instance with another noise level.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        let mut m = self.manifest();
        m.sigma = sigma;
        Self::from_manifest(m)
    }

    pub fn feature(&self, s: &[f64], a: usize) -> DVector<f64> {
        self.features.eval(s, a)
    }

    /// `U_{h,g} phi(s, a)`.
    pub fn mean(&self, g: usize, h: usize, s: &[f64], a: usize) -> Vec<f64> {
        (&self.hypotheses[g][h] * self.feature(s, a)).iter().copied().collect()
    }

    /// Largest spectral norm over the class.
    pub fn operator_bound(&self) -> f64 {
        self.hypotheses
            .iter()
            .flatten()
            .map(|u| u.singular_values().max())
            .fold(0.0, f64::max)
    }

    pub fn true_operator(&self, h: usize) -> &DMatrix<f64> {
        &self.hypotheses[self.fstar][h]
    }

    fn reward_value(&self, _h: usize, s: &[f64], a: usize) -> f64 {
        self.reward.raw(s, a).clamp(0.0, 1.0) / self.horizon as f64
    }

    fn successors(&self, f: usize, h: usize, s: &[f64], a: usize) -> Vec<(Vec<f64>, f64)> {
        let m = &self.hypotheses[f][h] * self.feature(s, a);
        self.nodes
            .iter()
            .map(|(z, w)| ((&m + z * self.sigma).iter().copied().collect(), *w))
            .collect()
    }

    fn plan_q(&self, f: usize, h: usize, s: &[f64], a: usize) -> f64 {
        let r = self.reward_value(h, s, a);
        if h + 1 >= self.horizon {
            return r;
        }
        r + self
            .successors(f, h, s, a)
            .iter()
            .map(|(s2, w)| w * self.plan_v(f, h + 1, s2))
            .sum::<f64>()
    }

    fn plan_row(&self, f: usize, h: usize, s: &[f64]) -> Vec<f64> {
        if h == 0 && s == self.initial_state.as_slice() {
            return self.root_q[f].clone();
        }
        (0..self.features.num_actions()).map(|a| self.plan_q(f, h, s, a)).collect()
    }

    fn plan_v(&self, f: usize, h: usize, s: &[f64]) -> f64 {
        let row = self.plan_row(f, h, s);
        row[argmax(&row)]
    }

    /// Value of `pi_f` under the true dynamics, by the planner's quadrature.
    pub fn policy_value(&self, f: usize) -> f64 {
        self.policy_value_at(f, 0, &self.initial_state)
    }

    fn policy_value_at(&self, f: usize, h: usize, s: &[f64]) -> f64 {
        if h >= self.horizon {
            return 0.0;
        }
        let a = argmax(&self.plan_row(f, h, s));
        let r = self.reward_value(h, s, a);
        if h + 1 >= self.horizon {
            return r;
        }
        r + self
            .successors(self.fstar, h, s, a)
            .iter()
            .map(|(s2, w)| w * self.policy_value_at(f, h + 1, s2))
            .sum::<f64>()
    }

    /// Monte Carlo value of `pi_f` in the environment; the same seed gives
    /// common random numbers across hypotheses.
    pub fn monte_carlo_value(&self, f: usize, rollouts: usize, seed: u64) -> Result<Estimate> {
        if rollouts < 2 {
            return invalid("Monte Carlo budget must be at least 2");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = GreedyPolicy::new(self, f);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..rollouts {
            let g = crate::mdp::rollout(self, &policy, &mut rng)?.total_reward();
            sum += g;
            sq += g * g;
        }
        let n = rollouts as f64;
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
        Ok(Estimate {
            mean,
            standard_error: (var / n).sqrt(),
        })
    }

    /// Quadrature values of every greedy policy; the optimum is the planned
    /// value of the true operator.
    pub fn values(&self) -> ValueTable {
        ValueTable {
            optimal: self.root_q[self.fstar].iter().copied().fold(f64::NEG_INFINITY, f64::max),
            per_hypothesis: (0..self.hypotheses.len()).map(|f| self.policy_value(f)).collect(),
        }
    }

    /// `G_h(f, g) = sqrt(E_{s_h ~ pi_g, a_h = pi_g(s_h)} ||(U_{h,f} - U*_h) phi||^2)`,
    /// Q-type with `kappa = sigma / (2H)`.
    pub fn coupling(&self) -> Result<CouplingFunction> {
        if self.sigma <= 0.0 {
            return invalid("the KNR dominance constant needs sigma > 0");
        }
        let n = self.hypotheses.len();
        let mut values = vec![vec![vec![0.0; n]; n]; self.horizon];
        for (h, table) in values.iter_mut().enumerate() {
            for g in 0..n {
                let roll = self.roll_in(&GreedyPolicy::new(self, g), h)?;
                let feats: Vec<(DVector<f64>, f64)> = roll
                    .iter()
                    .map(|(s, w)| (self.feature(s, self.greedy_action(g, h, s)), *w))
                    .collect();
                for (f, row) in table.iter_mut().enumerate() {
                    let diff = &self.hypotheses[f][h] - self.true_operator(h);
                    let e: f64 = feats.iter().map(|(p, w)| w * (&diff * p).norm_squared()).sum();
                    row[g] = e.sqrt();
                }
            }
        }
        let kappa = self.sigma / (2.0 * self.horizon as f64);
        CouplingFunction::new("knr", kappa.min(1.0), OperatingPolicy::QType, values)
    }
}

impl Environment for KnrInstance {
    type State = Vec<f64>;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        self.features.num_actions()
    }

    fn initial_state(&self) -> Vec<f64> {
        self.initial_state.clone()
    }

    fn reward(&self, h: usize, state: &Vec<f64>, action: usize) -> Result<f64> {
        self.check(h, state, action)?;
        Ok(self.reward_value(h, state, action))
    }

    fn sample_next(&self, h: usize, state: &Vec<f64>, action: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.check(h, state, action)?;
        let mean = self.mean(self.fstar, h, state, action);
        Ok(mean
            .into_iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + self.sigma * z
            })
            .collect())
    }

    fn next_state_nodes(&self, h: usize, state: &Vec<f64>, action: usize) -> Result<Vec<(Vec<f64>, f64)>> {
        self.check(h, state, action)?;
        Ok(self.successors(self.fstar, h, state, action))
    }
}

impl KnrInstance {
    fn check(&self, h: usize, state: &[f64], action: usize) -> Result<()> {
        if h >= self.horizon {
            return Err(OperaError::InvalidInput(format!("step {h} is past the horizon")));
        }
        if action >= self.features.num_actions() {
            return Err(OperaError::InvalidInput(format!("action {action} out of range")));
        }
        if state.len() != self.state_dim {
            return Err(OperaError::InvalidInput("state has the wrong dimension".into()));
        }
        Ok(())
    }
}

impl HypothesisSet<Vec<f64>> for KnrInstance {
    fn len(&self) -> usize {
        self.hypotheses.len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        self.features.num_actions()
    }

    fn q_value(&self, f: usize, h: usize, state: &Vec<f64>, action: usize) -> f64 {
        if h >= self.horizon {
            return 0.0;
        }
        if h == 0 && *state == self.initial_state {
            return self.root_q[f][action];
        }
        self.plan_q(f, h, state, action)
    }

    fn q_row(&self, f: usize, h: usize, state: &Vec<f64>) -> Vec<f64> {
        self.plan_row(f, h, state)
    }

    fn initial_value(&self, f: usize) -> f64 {
        self.root_q[f].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
