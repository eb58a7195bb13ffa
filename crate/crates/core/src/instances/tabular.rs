use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_distribution, ValueTable};
use crate::error::{invalid, OperaError, Result};
use crate::estimation::{make_bellman_def, BellmanDef};
use crate::hypothesis::{check_realizability, Payload, TabularClass, TabularHypothesis};
use crate::mdp::{argmax, backup, Environment, TabularMdp};

const CANONICAL: &str = include_str!("../../fixtures/tabular.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BellmanCompleteParams {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Perturbed tables added at every step on top of the backups.
    pub extras_per_step: usize,
    /// Size of the uniform perturbation applied to extra tables.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for BellmanCompleteParams {
    fn default() -> Self {
        BellmanCompleteParams {
            num_states: 3,
            num_actions: 2,
            horizon: 3,
            extras_per_step: 1,
            perturbation: 0.15,
            seed: 3,
        }
    }
}

/// A tabular environment with a Bellman-complete hypothesis class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularInstance {
    pub env: TabularMdp,
    pub class: TabularClass,
    pub fstar: usize,
}

impl TabularInstance {
    pub fn new(env: TabularMdp, class: TabularClass) -> Result<Self> {
        let report = check_realizability(&class, &env, 1e-9)?;
        if !report.realizable {
            return Err(OperaError::Construction(format!(
                "class misses Q* by {:.3e}",
                report.deviation
            )));
        }
        let class = class.with_optimal_index(Some(report.witness))?;
        Ok(TabularInstance {
            env,
            class,
            fstar: report.witness,
        })
    }

    /// Random environment and a class closed under the Bellman backup:
    /// step-`h` candidates are the backups of every step-`h+1` candidate plus
    /// perturbed extras, and the class is their product over steps.
    pub fn generate(params: &BellmanCompleteParams) -> Result<Self> {
        let BellmanCompleteParams {
            num_states: ns,
            num_actions: na,
            horizon,
            extras_per_step,
            perturbation,
            seed,
        } = *params;
        if ns == 0 || na == 0 || horizon == 0 {
            return invalid("tabular parameters must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..horizon)
            .map(|_| {
                (0..ns)
                    .map(|_| (0..na).map(|_| random_distribution(ns, 0.5, &mut rng)).collect())
                    .collect()
            })
            .collect();
        let r = (0..horizon)
            .map(|_| {
                (0..ns)
                    .map(|_| (0..na).map(|_| rng.random::<f64>() / horizon as f64).collect())
                    .collect()
            })
            .collect();
        let env = TabularMdp::new(p, r, 0)?;
        let greedy = |q: &Vec<Vec<f64>>| -> Vec<f64> { q.iter().map(|row| row[argmax(row)]).collect() };
        let mut candidates: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); horizon];
        for h in (0..horizon).rev() {
            let base: Vec<Vec<Vec<f64>>> = if h + 1 == horizon {
                vec![backup(&env, h, &vec![0.0; ns])]
            } else {
                candidates[h + 1].iter().map(|q| backup(&env, h, &greedy(q))).collect()
            };
            let cap = (horizon - h) as f64 / horizon as f64;
            let mut step = base.clone();
            for _ in 0..extras_per_step {
                let src = &base[rng.random_range(0..base.len())];
                step.push(
                    src.iter()
                        .map(|row| {
                            row.iter()
                                .map(|x| (x + rng.random_range(-perturbation..=perturbation)).clamp(0.0, cap))
                                .collect()
                        })
                        .collect(),
                );
            }
            candidates[h] = step;
        }
        let mut tables: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new()];
        for step in &candidates {
            tables = tables
                .into_iter()
                .flat_map(|prefix| {
                    step.iter().map(move |q| {
                        let mut t = prefix.clone();
                        t.push(q.clone());
                        t
                    })
                })
                .collect();
        }
        if tables.len() > 100_000 {
            return invalid("hypothesis product too large");
        }
        let hyps = tables
            .into_iter()
            .map(|q| TabularHypothesis::from_q(q, Payload::None))
            .collect();
        Self::new(env.clone(), TabularClass::new(hyps, env.initial_state())?)
    }

    /// The shipped fixture: 3 states, 2 actions, `H = 3`, 24 hypotheses.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL).expect("shipped tabular fixture is valid")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: TabularInstance = serde_json::from_str(text)?;
        Self::new(inst.env, inst.class)
    }

    pub fn def(&self) -> Result<BellmanDef<'_>> {
        make_bellman_def(&self.class, &self.env, 1e-9)
    }

    pub fn values(&self) -> ValueTable {
        ValueTable::tabular(&self.env, &self.class)
    }
}
