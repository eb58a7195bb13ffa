//! Constructors for the shipped instance families. Each bundles an
//! environment, a hypothesis class and the pieces needed by the estimation
//! and coupling checkers.

mod knr;
mod linear_mixture;
mod tabular;
mod witness;

pub use knr::{gauss_hermite, KnrFeatureMap, KnrInstance, KnrManifest, KnrParams, KnrReward};
pub use linear_mixture::{LinearMixtureInstance, LinearMixtureManifest, LinearMixtureParams};
pub use tabular::{BellmanCompleteParams, TabularInstance};
pub use witness::{WitnessCertificate, WitnessInstance, WitnessManifest, WitnessParams};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::hypothesis::TabularClass;
use crate::mdp::{exact_value, optimal_values, TabularMdp};

/// True values `V_1^{pi_f}(s_1)` of every hypothesis's greedy policy and the
/// optimal value `V_1^*(s_1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub optimal: f64,
    pub per_hypothesis: Vec<f64>,
}

impl ValueTable {
    /// Exact values on a tabular environment.
    pub fn tabular(env: &TabularMdp, class: &TabularClass) -> Self {
        let s1 = crate::mdp::Environment::initial_state(env);
        let optimal = optimal_values(env).v[0][s1];
        let per_hypothesis = (0..crate::hypothesis::HypothesisSet::len(class))
            .map(|f| exact_value(env, &class.greedy_policy(f)).v[0][s1])
            .collect();
        ValueTable {
            optimal,
            per_hypothesis,
        }
    }

    /// Suboptimality of hypothesis `f`.
    pub fn gap(&self, f: usize) -> f64 {
        self.optimal - self.per_hypothesis[f]
    }
}

/// A random point of the probability simplex, Dirichlet(`alpha`) distributed.
pub(crate) fn random_distribution(n: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            let mut p: Vec<f64> = draws.iter().map(|x| x / total).collect();
            fix_sum(&mut p);
            return p;
        }
    }
}

/// Moves rounding error onto the largest entry so the row sums to one.
pub(crate) fn fix_sum(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    let i = crate::mdp::argmax(p);
    p[i] += 1.0 - total;
}
