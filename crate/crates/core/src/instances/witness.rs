use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_distribution, ValueTable};
use crate::coupling::{BilinearFactors, CouplingFunction, OperatingPolicy};
use crate::error::{invalid, OperaError, Result};
use crate::estimation::{make_witness_def, DiscriminatorClass, WitnessDef};
use crate::hypothesis::{HypothesisSet, Payload, TabularClass, TabularHypothesis};
use crate::mdp::{optimal_values, Environment, TabularMdp};

const CANONICAL: &str = include_str!("../../fixtures/witness.json");

/// Enumerations above this many assemblies per probe use the separable
/// maximum instead.
const ENUMERATION_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WitnessParams {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub num_models: usize,
    /// Range of the mixing weight toward a random kernel in wrong models.
    pub min_perturbation: f64,
    pub max_perturbation: f64,
    pub seed: u64,
}

impl Default for WitnessParams {
    fn default() -> Self {
        WitnessParams {
            num_states: 3,
            num_actions: 2,
            horizon: 2,
            num_models: 8,
            min_perturbation: 0.4,
            max_perturbation: 0.9,
            seed: 33,
        }
    }
}

/// Serialized model class; the true model is `models[fstar]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessManifest {
    pub models: Vec<TabularMdp>,
    pub fstar: usize,
    pub discriminator_bound: f64,
}

/// Enumeration certificate for the witness-rank inequality pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessCertificate {
    pub kappa: f64,
    /// Largest gap between the enumerated discriminator maximum and
    /// `<W(f), X(g)>`; zero up to rounding since the pair holds with equality.
    pub max_inner_gap: f64,
    /// Smallest `<W(f), X(g)> / |value misfit|` over probes with a nonzero
    /// misfit.
    pub min_ratio: Option<f64>,
    pub probes: usize,
    /// False when some probe used the separable maximum.
    pub enumerated: bool,
}

/// Tabular model class with a shared reward and `+-` indicator
/// discriminators.
#[derive(Debug, Clone)]
pub struct WitnessInstance {
    pub env: TabularMdp,
    pub class: TabularClass,
    pub discriminators: DiscriminatorClass,
    pub fstar: usize,
    pub certificate: WitnessCertificate,
    coupling: CouplingFunction,
}

impl WitnessInstance {
    /// Builds the instance from its models and verifies the inequality
    /// pair by enumeration.
    pub fn from_models(models: Vec<TabularMdp>, fstar: usize, bound: f64) -> Result<Self> {
        if fstar >= models.len() {
            return invalid("true model index out of range");
        }
        if !(bound > 0.0) {
            return invalid("discriminator bound must be positive");
        }
        let env = models[fstar].clone();
        let (ns, na, horizon) = (env.num_states(), env.num_actions(), env.horizon());
        for m in &models {
            if m.num_states() != ns || m.num_actions() != na || m.horizon() != horizon {
                return invalid("models disagree on shape");
            }
            if m.initial_state() != env.initial_state() {
                return invalid("models disagree on the initial state");
            }
        }
        let discriminators = DiscriminatorClass::indicator_family(ns, na, bound)?;
        if !discriminators.is_symmetric() {
            return Err(OperaError::Construction("discriminator class is not symmetric".into()));
        }
        let hyps = models.iter().map(TabularHypothesis::from_model).collect();
        let class = TabularClass::new(hyps, env.initial_state())?.with_optimal_index(Some(fstar))?;
        let factors = witness_factors(&env, &class, &discriminators);
        let coupling = CouplingFunction::from_factors("witness", 1.0, OperatingPolicy::VType, factors)?;
        let certificate = certify(&env, &class, &discriminators, &coupling)?;
        let coupling = CouplingFunction::new(
            "witness",
            certificate.kappa,
            OperatingPolicy::VType,
            (0..horizon)
                .map(|h| (0..class.len()).map(|f| (0..class.len()).map(|g| coupling.eval(h, f, g)).collect()).collect())
                .collect(),
        )?
        .with_factors(coupling.factors().expect("built from factors").to_vec())?;
        Ok(WitnessInstance {
            env,
            class,
            discriminators,
            fstar,
            certificate,
            coupling,
        })
    }

    /// Random class: the true model plus mixtures of it with random
    /// kernels. One wrong model moves all mass at step 0 to the state with
    /// the best step-1 reward, so it is optimistic.
    pub fn generate(params: &WitnessParams) -> Result<Self> {
        let WitnessParams {
            num_states: ns,
            num_actions: na,
            horizon,
            num_models,
            min_perturbation,
            max_perturbation,
            seed,
        } = *params;
        if ns == 0 || na == 0 || horizon == 0 || num_models == 0 {
            return invalid("witness parameters must be positive");
        }
        if !(0.0 <= min_perturbation && min_perturbation <= max_perturbation && max_perturbation <= 1.0) {
            return invalid("perturbation range must lie in [0, 1]");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<Vec<f64>>>> {
            (0..horizon)
                .map(|_| {
                    (0..ns)
                        .map(|_| (0..na).map(|_| random_distribution(ns, 0.5, rng)).collect())
                        .collect()
                })
                .collect()
        };
        let p_true = kernel(&mut rng);
        let rewards: Vec<Vec<Vec<f64>>> = (0..horizon)
            .map(|_| {
                (0..ns)
                    .map(|_| (0..na).map(|_| rng.random::<f64>() / horizon as f64).collect())
                    .collect()
            })
            .collect();
        let mut models = vec![TabularMdp::new(p_true.clone(), rewards.clone(), 0)?];
        if num_models > 1 && horizon > 1 {
            let best = (0..ns)
                .max_by(|&a, &b| {
                    let ra = rewards[1][a].iter().cloned().fold(f64::MIN, f64::max);
                    let rb = rewards[1][b].iter().cloned().fold(f64::MIN, f64::max);
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .unwrap_or(0);
            // Decoy: the worst first action at s1 appears to lead straight to
            // the most rewarding state, so optimism starts on a bad policy.
            let truth = optimal_values(&models[0]);
            let s1 = models[0].initial_state();
            let worst = (0..na)
                .min_by(|&a, &b| truth.q[0][s1][a].total_cmp(&truth.q[0][s1][b]))
                .unwrap_or(0);
            let mut p = p_true.clone();
            p[0][s1][worst] = (0..ns).map(|s| if s == best { 1.0 } else { 0.0 }).collect();
            models.push(TabularMdp::new(p, rewards.clone(), 0)?);
        }
        while models.len() < num_models {
            let q = kernel(&mut rng);
            let alpha = rng.random_range(min_perturbation..=max_perturbation);
            let p: Vec<Vec<Vec<Vec<f64>>>> = p_true
                .iter()
                .zip(&q)
                .map(|(ph, qh)| {
                    ph.iter()
                        .zip(qh)
                        .map(|(ps, qs)| {
                            ps.iter()
                                .zip(qs)
                                .map(|(pa, qa)| {
                                    let mut row: Vec<f64> =
                                        pa.iter().zip(qa).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
                                    super::fix_sum(&mut row);
                                    row
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            models.push(TabularMdp::new(p, rewards.clone(), 0)?);
        }
        let mut order: Vec<usize> = (0..models.len()).collect();
        order.shuffle(&mut rng);
        let fstar = order.iter().position(|&i| i == 0).expect("true model present");
        let models = order.into_iter().map(|i| models[i].clone()).collect();
        Self::from_models(models, fstar, 1.0)
    }

    /// The shipped fixture: 3 states, 2 actions, `H = 2`, 8 models.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL).expect("shipped witness fixture is valid")
    }

    pub fn manifest(&self) -> Result<WitnessManifest> {
        let models = (0..self.class.len())
            .map(|f| {
                self.class
                    .get(f)
                    .model(self.class.initial_state())?
                    .ok_or_else(|| OperaError::Invariant("witness hypothesis without model".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WitnessManifest {
            models,
            fstar: self.fstar,
            discriminator_bound: self.discriminators.bound(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest()?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: WitnessManifest = serde_json::from_str(text)?;
        Self::from_models(m.models, m.fstar, m.discriminator_bound)
    }

    pub fn def(&self) -> WitnessDef<'_> {
        make_witness_def(&self.class, &self.discriminators, self.fstar)
            .expect("witness classes carry model payloads")
    }

    /// `G_h(f, g) = <W_h(f), X_h(g)>` with the certified `kappa`.
    pub fn coupling(&self) -> &CouplingFunction {
        &self.coupling
    }

    pub fn values(&self) -> ValueTable {
        ValueTable::tabular(&self.env, &self.class)
    }
}

fn model_of(class: &TabularClass, f: usize) -> &Vec<Vec<Vec<Vec<f64>>>> {
    match &class.get(f).payload {
        Payload::Model { transitions, .. } => transitions,
        _ => unreachable!("witness classes carry model payloads"),
    }
}

/// `(P_f - P)(.|s, pi_f(s))` at step `h`.
fn misfit_rows(env: &TabularMdp, class: &TabularClass, f: usize, h: usize) -> Vec<Vec<f64>> {
    let model = model_of(class, f);
    let policy = class.greedy_policy(f);
    (0..env.num_states())
        .map(|s| {
            let a = policy.actions[h][s];
            model[h][s][a]
                .iter()
                .zip(env.transition(h, s, a))
                .map(|(x, y)| x - y)
                .collect()
        })
        .collect()
}

fn components(disc: &DiscriminatorClass) -> &[Vec<f64>] {
    match disc {
        DiscriminatorClass::Assembled { components, .. } => components,
        DiscriminatorClass::Explicit { .. } => unreachable!("witness discriminators are assembled"),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W_h(f)(s) = max_v (P_f - P) v` at `(s, pi_f(s))`, `X_h(g)(s) = d_h^{pi_g}(s)`.
fn witness_factors(env: &TabularMdp, class: &TabularClass, disc: &DiscriminatorClass) -> Vec<BilinearFactors> {
    let comps = components(disc);
    (0..env.horizon())
        .map(|h| BilinearFactors {
            w: (0..class.len())
                .map(|f| {
                    misfit_rows(env, class, f, h)
                        .iter()
                        .map(|row| comps.iter().map(|c| dot(c, row)).fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                })
                .collect(),
            x: (0..class.len())
                .map(|g| env.state_distribution(&class.greedy_policy(g), h))
                .collect(),
        })
        .collect()
}

/// Enumerates every assembly on the visited pairs `(s, pi_f(s))` for each
/// `(h, f, g)`; values at other pairs do not enter the expectation.
fn enumerated_max(rows: &[Vec<f64>], weights: &[f64], comps: &[Vec<f64>]) -> Option<f64> {
    let ns = rows.len();
    let total = comps.len().checked_pow(ns as u32)?;
    if total > ENUMERATION_LIMIT {
        return None;
    }
    let scores: Vec<Vec<f64>> = rows
        .iter()
        .zip(weights)
        .map(|(row, w)| comps.iter().map(|c| w * dot(c, row)).collect())
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut choice = vec![0usize; ns];
    for _ in 0..total {
        let v: f64 = choice.iter().enumerate().map(|(s, &k)| scores[s][k]).sum();
        best = best.max(v);
        for digit in choice.iter_mut() {
            *digit += 1;
            if *digit < comps.len() {
                break;
            }
            *digit = 0;
        }
    }
    Some(best)
}

fn certify(
    env: &TabularMdp,
    class: &TabularClass,
    disc: &DiscriminatorClass,
    coupling: &CouplingFunction,
) -> Result<WitnessCertificate> {
    let comps = components(disc);
    let n = class.len();
    let mut max_inner_gap: f64 = 0.0;
    let mut min_ratio = f64::INFINITY;
    let mut enumerated = true;
    let mut probes = 0;
    for h in 0..env.horizon() {
        for f in 0..n {
            let rows = misfit_rows(env, class, f, h);
            let vnext = &class.get(f).values()[h + 1];
            for g in 0..n {
                let d = env.state_distribution(&class.greedy_policy(g), h);
                let inner = coupling.eval(h, f, g);
                let best = match enumerated_max(&rows, &d, comps) {
                    Some(b) => b,
                    None => {
                        enumerated = false;
                        inner
                    }
                };
                let gap = inner - best;
                max_inner_gap = max_inner_gap.max(gap.abs());
                if gap > 1e-10 {
                    return Err(OperaError::Construction(format!(
                        "discriminator inequality fails at h={h}, f={f}, g={g}: max {best} < {inner}"
                    )));
                }
                let misfit: f64 = rows.iter().zip(&d).map(|(row, w)| w * dot(row, vnext)).sum();
                if misfit.abs() > 1e-14 {
                    if inner <= 0.0 {
                        return Err(OperaError::Construction(format!(
                            "value misfit {misfit} with zero witness at h={h}, f={f}, g={g}"
                        )));
                    }
                    min_ratio = min_ratio.min(inner / misfit.abs());
                }
                probes += 1;
            }
        }
    }
    let kappa = if min_ratio.is_finite() { min_ratio.min(1.0) } else { 1.0 };
    if kappa <= 0.0 {
        return Err(OperaError::Construction("no positive kappa certifies the class".into()));
    }
    Ok(WitnessCertificate {
        kappa,
        max_inner_gap,
        min_ratio: min_ratio.is_finite().then_some(min_ratio),
        probes,
        enumerated,
    })
}
