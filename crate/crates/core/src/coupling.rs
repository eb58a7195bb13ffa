//! Coupling functions `G_{h,f*}(f, g)` and numeric checks of the two
//! admissibility conditions: dominating average estimation and Bellman
//! dominance.
//!
//! `G(f, g)` measures the discrepancy of `f` under the roll-in distribution
//! of `g`. Tables are stored as `values[h][f][g]`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimation::{expected_loss, norm_sq, DiscriminatorClass, EstimationFunction};
use crate::fe_dimension::CouplingTable;
use crate::hypothesis::{GreedyPolicy, HypothesisSet};
use crate::mdp::{Environment, StateLike};

/// Which policy picks `a_h` inside the coupling's expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingPolicy {
    /// `a_h ~ pi_g`, the roll-in hypothesis.
    QType,
    /// `a_h ~ pi_f`, the evaluated hypothesis.
    VType,
}

/// Factors with `G_h(f, g) = <w[f], x[g]>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearFactors {
    pub w: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

impl BilinearFactors {
    pub fn eval(&self, f: usize, g: usize) -> f64 {
        self.w[f].iter().zip(&self.x[g]).map(|(a, b)| a * b).sum()
    }
}

/// A precomputed coupling function together with its dominance constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFunction {
    pub name: String,
    pub kappa: f64,
    pub mode: OperatingPolicy,
    values: Vec<Vec<Vec<f64>>>,
    factors: Option<Vec<BilinearFactors>>,
}

impl CouplingFunction {
    pub fn new(
        name: impl Into<String>,
        kappa: f64,
        mode: OperatingPolicy,
        values: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return invalid(format!("kappa must lie in (0, 1], got {kappa}"));
        }
        if values.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return invalid("coupling values must be finite");
        }
        let n = values.first().map_or(0, |t| t.len());
        if values.iter().any(|t| t.len() != n || t.iter().any(|r| r.len() != n)) {
            return invalid("coupling tables must be square and share one size");
        }
        Ok(CouplingFunction {
            name: name.into(),
            kappa,
            mode,
            values,
            factors: None,
        })
    }

    /// Builds the tables from bilinear factors, one per step.
    pub fn from_factors(
        name: impl Into<String>,
        kappa: f64,
        mode: OperatingPolicy,
        factors: Vec<BilinearFactors>,
    ) -> Result<Self> {
        let values = factors
            .iter()
            .map(|fac| {
                (0..fac.w.len())
                    .map(|f| (0..fac.x.len()).map(|g| fac.eval(f, g)).collect())
                    .collect()
            })
            .collect();
        let mut c = CouplingFunction::new(name, kappa, mode, values)?;
        c.factors = Some(factors);
        Ok(c)
    }

    /// Attaches factors after checking they reproduce the tables within `1e-9`.
    pub fn with_factors(mut self, factors: Vec<BilinearFactors>) -> Result<Self> {
        if factors.len() != self.values.len() {
            return invalid("one factorization per step is required");
        }
        let gap = self.factorization_gap_of(&factors);
        if gap > 1e-9 {
            return invalid(format!("bilinear factors miss the coupling by {gap:.3e}"));
        }
        self.factors = Some(factors);
        Ok(self)
    }

    fn factorization_gap_of(&self, factors: &[BilinearFactors]) -> f64 {
        let mut gap: f64 = 0.0;
        for (h, fac) in factors.iter().enumerate() {
            for f in 0..self.len() {
                for g in 0..self.len() {
                    gap = gap.max((fac.eval(f, g) - self.values[h][f][g]).abs());
                }
            }
        }
        gap
    }

    /// Largest `|<W(f), X(g)> - G(f, g)|`, zero without factors.
    pub fn factorization_gap(&self) -> f64 {
        self.factors
            .as_ref()
            .map_or(0.0, |f| self.factorization_gap_of(f))
    }

    pub fn factors(&self) -> Option<&[BilinearFactors]> {
        self.factors.as_deref()
    }

    /// The same coupling with `kappa` multiplied by `scale` (not clamped).
    pub fn with_kappa_scale(mut self, scale: f64) -> Self {
        self.kappa *= scale;
        self
    }

    pub fn eval(&self, h: usize, f: usize, g: usize) -> f64 {
        self.values[h][f][g]
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, |t| t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cap `C = max |G|`.
    pub fn cap(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Step-`h` table with rows indexed by the first argument.
    pub fn table(&self, h: usize) -> CouplingTable {
        CouplingTable {
            values: self.values[h].clone(),
        }
    }

    /// Restriction to a subset of hypotheses.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|t| keep.iter().map(|&f| keep.iter().map(|&g| t[f][g]).collect()).collect())
            .collect();
        let mut c = CouplingFunction::new(self.name.clone(), self.kappa, self.mode, values)?;
        c.factors = self.factors.as_ref().map(|fs| {
            fs.iter()
                .map(|fac| BilinearFactors {
                    w: keep.iter().map(|&f| fac.w[f].clone()).collect(),
                    x: keep.iter().map(|&g| fac.x[g].clone()).collect(),
                })
                .collect()
        });
        Ok(c)
    }
}

/// `Q_{h,f}(s,a) - r_h(s,a) - E_{s'} V_{h+1,f}(s')`.
pub fn bellman_residual<E, C>(env: &E, class: &C, f: usize, h: usize, s: &E::State, a: usize) -> Result<f64>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let r = env.reward(h, s, a)?;
    let mut ev = 0.0;
    for (s2, w) in env.next_state_nodes(h, s, a)? {
        ev += w * class.value(f, h + 1, &s2);
    }
    Ok(class.q_value(f, h, s, a) - r - ev)
}

/// `E_{s_h ~ pi_f, a_h = pi_f(s_h)}[Q_{h,f} - r_h - V_{h+1,f}(s_{h+1})]`,
/// exact on tabular environments and by quadrature otherwise.
pub fn average_bellman_error<E, C>(env: &E, class: &C, f: usize, h: usize) -> Result<f64>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let policy = GreedyPolicy::new(class, f);
    let mut total = 0.0;
    for (s, w) in env.roll_in(&policy, h)? {
        let a = class.greedy_action(f, h, &s);
        total += w * bellman_residual(env, class, f, h, &s, a)?;
    }
    Ok(total)
}

fn operating_action<S, C: HypothesisSet<S> + ?Sized>(
    class: &C,
    mode: OperatingPolicy,
    f: usize,
    g: usize,
    h: usize,
    s: &S,
) -> usize {
    match mode {
        OperatingPolicy::QType => class.greedy_action(g, h, s),
        OperatingPolicy::VType => class.greedy_action(f, h, s),
    }
}

/// Average Bellman error coupling
/// `G(f, g) = E_{s_h ~ pi_g, a_h ~ pi_op}[Q_{h,f} - r - V_{h+1,f}]` with
/// `kappa = 1`. On tabular environments the bilinear factors
/// (Bellman residuals, occupancies) are attached.
pub fn bellman_coupling<E, C>(env: &E, class: &C, mode: OperatingPolicy) -> Result<CouplingFunction>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let n = class.len();
    let horizon = class.horizon();
    let mut values = vec![vec![vec![0.0; n]; n]; horizon];
    for (h, table) in values.iter_mut().enumerate() {
        for g in 0..n {
            let roll = env.roll_in(&GreedyPolicy::new(class, g), h)?;
            for (f, row) in table.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (s, w) in &roll {
                    let a = operating_action(class, mode, f, g, h, s);
                    acc += w * bellman_residual(env, class, f, h, s, a)?;
                }
                row[g] = acc;
            }
        }
    }
    let coupling = CouplingFunction::new("bellman", 1.0, mode, values)?;
    let Some(mdp) = env.as_tabular() else {
        return Ok(coupling);
    };
    let (ns, na) = (mdp.num_states(), env.num_actions());
    let Some(states) = (0..ns).map(E::State::from_index).collect::<Option<Vec<_>>>() else {
        return Ok(coupling);
    };
    let mut factors = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut w = vec![Vec::new(); n];
        let mut x = vec![Vec::new(); n];
        for f in 0..n {
            let mut d = vec![0.0; ns];
            for (s, p) in env.roll_in(&GreedyPolicy::new(class, f), h)? {
                if let Some(i) = s.index() {
                    d[i] += p;
                }
            }
            match mode {
                OperatingPolicy::QType => {
                    let mut wf = vec![0.0; ns * na];
                    let mut xf = vec![0.0; ns * na];
                    for (i, st) in states.iter().enumerate() {
                        for a in 0..na {
                            wf[i * na + a] = bellman_residual(env, class, f, h, st, a)?;
                        }
                        xf[i * na + class.greedy_action(f, h, st)] = d[i];
                    }
                    w[f] = wf;
                    x[f] = xf;
                }
                OperatingPolicy::VType => {
                    w[f] = states
                        .iter()
                        .map(|st| bellman_residual(env, class, f, h, st, class.greedy_action(f, h, st)))
                        .collect::<Result<Vec<_>>>()?;
                    x[f] = d;
                }
            }
        }
        factors.push(BilinearFactors { w, x });
    }
    coupling.with_factors(factors)
}

/// Per-probe outcome of a condition check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionProbe {
    pub h: usize,
    pub f: usize,
    pub g: usize,
    pub lhs: f64,
    pub rhs: f64,
}

/// Summary of a condition check; `worst_gap` is the largest `rhs - lhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub probes: Vec<ConditionProbe>,
    pub worst_gap: f64,
    pub passed: bool,
}

impl ConditionReport {
    fn from_probes(probes: Vec<ConditionProbe>, tol: f64) -> Self {
        let worst_gap = probes
            .iter()
            .map(|p| p.rhs - p.lhs)
            .fold(f64::NEG_INFINITY, f64::max);
        let passed = probes.iter().all(|p| p.rhs <= p.lhs + tol);
        ConditionReport {
            probes,
            worst_gap: if worst_gap.is_finite() { worst_gap } else { 0.0 },
            passed,
        }
    }
}

/// `max_v E_{s_h ~ pi_g, a_h ~ pi_op} ||E_{s'} l_{h,g}(o, f, f, v)||^2`.
#[allow(clippy::too_many_arguments)]
pub fn dominating_average_lhs<E, C>(
    def: &dyn EstimationFunction<E::State>,
    coupling_mode: OperatingPolicy,
    class: &C,
    env: &E,
    discriminators: &DiscriminatorClass,
    h: usize,
    f: usize,
    g: usize,
) -> Result<f64>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let members = discriminators.base_members();
    let mut scores = vec![vec![0.0; discriminators.num_groups()]; members.len()];
    for (s, w) in env.roll_in(&GreedyPolicy::new(class, g), h)? {
        let a = operating_action(class, coupling_mode, f, g, h, &s);
        let grp = discriminators.group(&s, a)?;
        for (k, v) in members.iter().enumerate() {
            let e = expected_loss(def, env, h, g, &s, a, f, f, v)?;
            scores[k][grp] += w * norm_sq(&e);
        }
    }
    Ok(discriminators.maximize(&scores))
}

/// Checks `max_v E ||E_{s'} l||^2 >= G(f, g)^2 - tol` on every probe
/// `(h, f, g)`.
pub fn check_dominating_average<E, C>(
    def: &dyn EstimationFunction<E::State>,
    coupling: &CouplingFunction,
    class: &C,
    env: &E,
    discriminators: &DiscriminatorClass,
    probes: &[(usize, usize, usize)],
    tol: f64,
) -> Result<ConditionReport>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let mut out = Vec::with_capacity(probes.len());
    for &(h, f, g) in probes {
        let lhs = dominating_average_lhs(def, coupling.mode, class, env, discriminators, h, f, g)?;
        let rhs = coupling.eval(h, f, g).powi(2);
        out.push(ConditionProbe { h, f, g, lhs, rhs });
    }
    Ok(ConditionReport::from_probes(out, tol))
}

/// Checks `kappa |E_{pi_f}[Q_{h,f} - r - V_{h+1,f}]| <= |G(f, f)| + tol` on
/// every probe `(h, f)`.
pub fn check_bellman_dominance<E, C>(
    coupling: &CouplingFunction,
    class: &C,
    env: &E,
    probes: &[(usize, usize)],
    tol: f64,
) -> Result<ConditionReport>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    let mut out = Vec::with_capacity(probes.len());
    for &(h, f) in probes {
        let abe = average_bellman_error(env, class, f, h)?;
        out.push(ConditionProbe {
            h,
            f,
            g: f,
            lhs: coupling.eval(h, f, f).abs(),
            rhs: coupling.kappa * abe.abs(),
        });
    }
    Ok(ConditionReport::from_probes(out, tol))
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub standard_error: f64,
}

/// Monte Carlo estimate of the Bellman-error coupling by sampled roll-ins.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_bellman_coupling<E, C>(
    env: &E,
    class: &C,
    mode: OperatingPolicy,
    h: usize,
    f: usize,
    g: usize,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Estimate>
where
    E: Environment + ?Sized,
    C: HypothesisSet<E::State> + ?Sized,
{
    if samples < 2 {
        return invalid("Monte Carlo budget must be at least 2");
    }
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut s = env.initial_state();
        for step in 0..h {
            let a = class.greedy_action(g, step, &s);
            s = env.sample_next(step, &s, a, rng)?;
        }
        let a = operating_action(class, mode, f, g, h, &s);
        let r = env.reward(h, &s, a)?;
        let s2 = env.sample_next(h, &s, a, rng)?;
        let x = class.q_value(f, h, &s, a) - r - class.value(f, h + 1, &s2);
        sum += x;
        sq += x * x;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(Estimate {
        mean,
        standard_error: (var / n).sqrt(),
    })
}
