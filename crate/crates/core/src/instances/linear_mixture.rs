use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_distribution, ValueTable};
use crate::coupling::{BilinearFactors, CouplingFunction, OperatingPolicy};
use crate::error::{invalid, OperaError, Result};
use crate::estimation::{make_linear_mixture_def, LinearMixtureDef, MixtureFeatures};
use crate::hypothesis::{HypothesisSet, Payload, TabularClass, TabularHypothesis};
use crate::mdp::{optimal_values, Environment, TabularMdp};

const CANONICAL: &str = include_str!("../../fixtures/linear_mixture.json");

/// Parameters of a random linear mixture instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearMixtureParams {
    pub dim: usize,
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Candidates per step; the class is their Cartesian product over steps.
    pub candidates_per_step: usize,
    /// Dirichlet concentration of the feature kernels and reward weights.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for LinearMixtureParams {
    fn default() -> Self {
        LinearMixtureParams {
            dim: 2,
            horizon: 3,
            num_states: 3,
            num_actions: 2,
            candidates_per_step: 4,
            concentration: 0.3,
            seed: 7,
        }
    }
}

/// Serialized form: features, true parameters and the hypothesis grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMixtureManifest {
    pub features: MixtureFeatures,
    pub theta_star: Vec<Vec<f64>>,
    /// `grid[f][h]`.
    pub grid: Vec<Vec<Vec<f64>>>,
    pub initial_state: usize,
}

/// Linear mixture MDP with `P_h(s'|s,a) = <theta*_h, phi(s,a,s')>` and
/// `r_h(s,a) = <theta*_h, psi(s,a)>`.
#[derive(Debug, Clone)]
pub struct LinearMixtureInstance {
    pub features: MixtureFeatures,
    pub theta_star: Vec<Vec<f64>>,
    pub env: TabularMdp,
    pub class: TabularClass,
    pub fstar: usize,
    /// Grid points dropped because they induce invalid kernels.
    pub rejected: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearMixtureInstance {
    /// Kernel and rewards induced by `theta[h]`.
    pub fn induced_model(
        features: &MixtureFeatures,
        theta: &[Vec<f64>],
        initial_state: usize,
    ) -> Result<TabularMdp> {
        let (ns, na) = (features.num_states(), features.num_actions());
        if theta.iter().any(|t| t.len() != features.dim) {
            return invalid("theta dimension differs from the features");
        }
        let p = theta
            .iter()
            .map(|t| {
                (0..ns)
                    .map(|s| {
                        (0..na)
                            .map(|a| (0..ns).map(|s2| dot(t, &features.phi[s][a][s2])).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let r = theta
            .iter()
            .map(|t| {
                (0..ns)
                    .map(|s| (0..na).map(|a| dot(t, &features.psi[s][a])).collect())
                    .collect()
            })
            .collect();
        TabularMdp::new(p, r, initial_state)
    }

    /// Builds the instance; grid points inducing invalid kernels are dropped.
    pub fn from_parts(
        features: MixtureFeatures,
        theta_star: Vec<Vec<f64>>,
        grid: Vec<Vec<Vec<f64>>>,
        initial_state: usize,
    ) -> Result<Self> {
        features.validate()?;
        let env = Self::induced_model(&features, &theta_star, initial_state)
            .map_err(|e| OperaError::Construction(format!("theta* is invalid: {e}")))?;
        let mut hyps = Vec::new();
        let mut fstar = None;
        let mut rejected = 0;
        for theta in grid {
            match Self::induced_model(&features, &theta, initial_state) {
                Ok(model) => {
                    if theta == theta_star && fstar.is_none() {
                        fstar = Some(hyps.len());
                    }
                    let sol = optimal_values(&model);
                    hyps.push(TabularHypothesis::from_q(sol.q, Payload::LinearMixture { theta }));
                }
                Err(_) => rejected += 1,
            }
        }
        if hyps.is_empty() {
            return Err(OperaError::Construction("no valid theta in the grid".into()));
        }
        let Some(fstar) = fstar else {
            return Err(OperaError::Construction("theta* is not in the grid".into()));
        };
        let class = TabularClass::new(hyps, initial_state)?.with_optimal_index(Some(fstar))?;
        Ok(LinearMixtureInstance {
            features,
            theta_star,
            env,
            class,
            fstar,
            rejected,
        })
    }

    /// Random instance: Dirichlet feature kernels, rewards in `[0, 1/H]`,
    /// `theta*` and the other candidates drawn from the simplex.
    pub fn generate(params: &LinearMixtureParams) -> Result<Self> {
        let LinearMixtureParams {
            dim,
            horizon,
            num_states: ns,
            num_actions: na,
            candidates_per_step: m,
            concentration,
            seed,
        } = *params;
        if dim == 0 || horizon == 0 || ns == 0 || na == 0 || m == 0 {
            return invalid("linear mixture parameters must be positive");
        }
        if (m as f64).powi(horizon as i32) > 100_000.0 {
            return invalid("hypothesis grid too large");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = vec![vec![vec![vec![0.0; dim]; ns]; na]; ns];
        for row in phi.iter_mut() {
            for cell in row.iter_mut() {
                for k in 0..dim {
                    let p = random_distribution(ns, concentration, &mut rng);
                    for (s2, pk) in p.into_iter().enumerate() {
                        cell[s2][k] = pk;
                    }
                }
            }
        }
        let psi: Vec<Vec<Vec<f64>>> = (0..ns)
            .map(|_| {
                (0..na)
                    .map(|_| {
                        random_distribution(dim, concentration, &mut rng)
                            .into_iter()
                            .map(|x| x / horizon as f64)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let features = MixtureFeatures { dim, phi, psi };
        let theta_star: Vec<Vec<f64>> = (0..horizon)
            .map(|_| random_distribution(dim, 1.0, &mut rng))
            .collect();
        let per_step: Vec<Vec<Vec<f64>>> = theta_star
            .iter()
            .map(|ts| {
                let mut c = vec![ts.clone()];
                while c.len() < m {
                    c.push(random_distribution(dim, 1.0, &mut rng));
                }
                c.shuffle(&mut rng);
                c
            })
            .collect();
        let mut grid: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
        for cands in &per_step {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    cands.iter().map(move |c| {
                        let mut p = prefix.clone();
                        p.push(c.clone());
                        p
                    })
                })
                .collect();
        }
        Self::from_parts(features, theta_star, grid, 0)
    }

    /// The shipped fixture (`d = 2`, `H = 3`, 3 states, 2 actions, 64
    /// hypotheses).
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL).expect("shipped linear mixture fixture is valid")
    }

    pub fn manifest(&self) -> LinearMixtureManifest {
        LinearMixtureManifest {
            features: self.features.clone(),
            theta_star: self.theta_star.clone(),
            grid: self
                .class
                .hypotheses()
                .iter()
                .map(|h| match &h.payload {
                    Payload::LinearMixture { theta } => theta.clone(),
                    _ => unreachable!("linear mixture classes carry theta payloads"),
                })
                .collect(),
            initial_state: self.class.initial_state(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LinearMixtureManifest = serde_json::from_str(text)?;
        Self::from_parts(m.features, m.theta_star, m.grid, m.initial_state)
    }

    pub fn def(&self) -> LinearMixtureDef<'_> {
        make_linear_mixture_def(&self.class, &self.features, self.fstar)
            .expect("instance invariants guarantee a valid DEF")
    }

    pub fn theta(&self, f: usize) -> &Vec<Vec<f64>> {
        match &self.class.get(f).payload {
            Payload::LinearMixture { theta } => theta,
            _ => unreachable!("linear mixture classes carry theta payloads"),
        }
    }

    /// `E_{s_h ~ pi_g}[psi + sum_{s'} phi V_{h+1,g}]` at `a_h = pi_g(s_h)`.
    pub fn roll_in_feature(&self, g: usize, h: usize) -> Vec<f64> {
        let policy = self.class.greedy_policy(g);
        let d = self.env.state_distribution(&policy, h);
        let vnext = &self.class.get(g).values()[h + 1];
        let mut x = vec![0.0; self.features.dim];
        for (s, w) in d.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let a = policy.actions[h][s];
            for (xk, fk) in x.iter_mut().zip(self.features.regression_feature(s, a, vnext)) {
                *xk += w * fk;
            }
        }
        x
    }

    /// `G_h(f, g) = <theta_{h,f} - theta*_h, E_{pi_g}[psi + phi V_{h+1,g}]>`,
    /// Q-type with `kappa = 1`.
    pub fn coupling(&self) -> Result<CouplingFunction> {
        let n = self.class.len();
        let factors = (0..self.env.horizon())
            .map(|h| BilinearFactors {
                w: (0..n)
                    .map(|f| {
                        self.theta(f)[h]
                            .iter()
                            .zip(&self.theta_star[h])
                            .map(|(a, b)| a - b)
                            .collect()
                    })
                    .collect(),
                x: (0..n).map(|g| self.roll_in_feature(g, h)).collect(),
            })
            .collect();
        CouplingFunction::from_factors("linear_mixture", 1.0, OperatingPolicy::QType, factors)
    }

    pub fn values(&self) -> ValueTable {
        ValueTable::tabular(&self.env, &self.class)
    }
}
