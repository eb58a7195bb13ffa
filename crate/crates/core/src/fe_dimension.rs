//! Exhaustive computation of functional eluder and eluder dimensions,
//! effective dimension bounds, and the comparisons between them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{bellman_coupling, OperatingPolicy};
use crate::error::{invalid, Result};
use crate::hypothesis::{GreedyPolicy, HypothesisSet, TabularClass};
use crate::mdp::{backup, require_tabular, Environment};

/// Default bound on the searched sequence length.
pub const DEFAULT_CAP: usize = 12;
const DEFAULT_NODE_LIMIT: u64 = 20_000_000;

/// Coupling values `values[g][f]`: row `g` is the first argument, column `f`
/// a sequence candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingTable {
    pub values: Vec<Vec<f64>>,
}

impl CouplingTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: CouplingTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn num_candidates(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.num_candidates();
        if self.values.iter().any(|r| r.len() != cols) {
            return invalid("coupling table rows differ in length");
        }
        if self.values.iter().flatten().any(|x| !x.is_finite()) {
            return invalid("coupling table has non-finite entries");
        }
        Ok(())
    }
}

/// Result of a dimension search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeDimension {
    pub dimension: usize,
    /// Column indices of a longest sequence found.
    pub witness: Vec<usize>,
    /// Smallest admissible `epsilon'` for the witness.
    pub epsilon_prime: f64,
    /// False when the cap or the node budget cut the search short.
    pub exact: bool,
}

/// Search limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchLimits {
    pub cap: usize,
    pub node_limit: u64,
}

impl Default for SearchLimits {
    fn default() -> Self {
        SearchLimits {
            cap: DEFAULT_CAP,
            node_limit: DEFAULT_NODE_LIMIT,
        }
    }
}

/// Finite union of disjoint half-open intervals `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
struct IntervalSet(Vec<(f64, f64)>);

impl IntervalSet {
    fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn min(&self) -> f64 {
        self.0.first().map_or(f64::NAN, |i| i.0)
    }

    fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            let (a0, a1) = self.0[i];
            let (b0, b1) = other.0[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntervalSet(out)
    }

    /// Union of arbitrary intervals, merged and sorted.
    fn union_of(mut parts: Vec<(f64, f64)>) -> IntervalSet {
        parts.retain(|(lo, hi)| lo < hi);
        parts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (lo, hi) in parts {
            match out.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => out.push((lo, hi)),
            }
        }
        IntervalSet(out)
    }
}

struct Search<'a> {
    rows: &'a [Vec<f64>],
    limits: SearchLimits,
    nodes: u64,
    truncated: bool,
    best: Vec<usize>,
    best_eps: f64,
}

impl Search<'_> {
    /// Interval of `epsilon'` admitting candidate `c` after the sums `acc`.
    fn admissible(&self, acc: &[f64], c: usize) -> IntervalSet {
        IntervalSet::union_of(
            self.rows
                .iter()
                .zip(acc)
                .map(|(row, a)| (a.sqrt(), row[c].abs()))
                .collect(),
        )
    }

    fn dfs(&mut self, seq: &mut Vec<usize>, acc: &[f64], feasible: &IntervalSet, open: &[usize]) {
        self.nodes += 1;
        if seq.len() > self.best.len() {
            self.best = seq.clone();
            self.best_eps = feasible.min();
        }
        if self.nodes >= self.limits.node_limit {
            self.truncated = true;
            return;
        }
        let extensions: Vec<(usize, IntervalSet)> = open
            .iter()
            .filter_map(|&c| {
                let next = feasible.intersect(&self.admissible(acc, c));
                (!next.is_empty()).then_some((c, next))
            })
            .collect();
        if extensions.is_empty() {
            return;
        }
        if seq.len() >= self.limits.cap {
            self.truncated = true;
            return;
        }
        if seq.len() + extensions.len() <= self.best.len() {
            return;
        }
        let still_open: Vec<usize> = extensions.iter().map(|(c, _)| *c).collect();
        for (c, next) in &extensions {
            if self.truncated && self.nodes >= self.limits.node_limit {
                return;
            }
            if seq.len() + still_open.len() <= self.best.len() {
                return;
            }
            let acc2: Vec<f64> = acc
                .iter()
                .zip(self.rows)
                .map(|(a, row)| a + row[*c] * row[*c])
                .collect();
            let rest: Vec<usize> = still_open.iter().copied().filter(|x| x != c).collect();
            seq.push(*c);
            self.dfs(seq, &acc2, next, &rest);
            seq.pop();
        }
    }
}

/// Functional eluder dimension of `table` at scale `epsilon`.
///
/// Searches for the longest sequence of distinct columns `f_1, ..., f_n`
/// such that for some `epsilon' >= epsilon` and every `t >= 2` there is a
/// row `g` with `sqrt(sum_{i<t} G(g, f_i)^2) <= epsilon' < |G(g, f_t)|`.
/// The admissible `epsilon'` set is tracked exactly as a union of intervals.
pub fn fe_dimension(table: &CouplingTable, epsilon: f64, cap: usize) -> Result<FeDimension> {
    fe_dimension_with(
        table,
        epsilon,
        SearchLimits {
            cap,
            ..SearchLimits::default()
        },
    )
}

pub fn fe_dimension_with(
    table: &CouplingTable,
    epsilon: f64,
    limits: SearchLimits,
) -> Result<FeDimension> {
    table.validate()?;
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    if limits.cap == 0 {
        return invalid("search cap must be positive");
    }
    let n = table.num_candidates();
    if n == 0 {
        return invalid("coupling table has no candidates");
    }
    let rows = &table.values;
    let start = IntervalSet(vec![(epsilon, f64::INFINITY)]);
    let branches: Vec<(Vec<usize>, f64, bool)> = (0..n)
        .into_par_iter()
        .map(|first| {
            let mut search = Search {
                rows,
                limits,
                nodes: 0,
                truncated: false,
                best: Vec::new(),
                best_eps: epsilon,
            };
            let acc: Vec<f64> = rows.iter().map(|r| r[first] * r[first]).collect();
            let open: Vec<usize> = (0..n).filter(|&c| c != first).collect();
            search.dfs(&mut vec![first], &acc, &start, &open);
            (search.best, search.best_eps, search.truncated)
        })
        .collect();
    let exact = branches.iter().all(|b| !b.2);
    // Longest wins; ties go to the earliest first element.
    let (witness, eps, _) = branches
        .into_iter()
        .fold((Vec::new(), epsilon, false), |best, cur| {
            if cur.0.len() > best.0.len() {
                cur
            } else {
                best
            }
        });
    Ok(FeDimension {
        dimension: witness.len(),
        witness,
        epsilon_prime: eps,
        exact,
    })
}

/// Eluder dimension of a finite function class on finite points, given as
/// `functions[i][x]`.
pub fn eluder_dimension(functions: &[Vec<f64>], epsilon: f64, cap: usize) -> Result<FeDimension> {
    let Some(first) = functions.first() else {
        return invalid("function class is empty");
    };
    let points = first.len();
    if functions.iter().any(|f| f.len() != points) {
        return invalid("functions disagree on the number of points");
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..functions.len() {
        for j in (i + 1)..functions.len() {
            let d: Vec<f64> = (0..points).map(|x| functions[i][x] - functions[j][x]).collect();
            if !rows.contains(&d) {
                rows.push(d);
            }
        }
    }
    if rows.is_empty() {
        rows.push(vec![0.0; points]);
    }
    fe_dimension(&CouplingTable { values: rows }, epsilon, cap)
}

/// Bounds on the effective dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDimension {
    pub lower: usize,
    pub upper: usize,
    /// `lower == upper`, certified by exhaustive enumeration.
    pub exact: bool,
}

const ENUMERATION_LIMIT: f64 = 200_000.0;

fn log_det_spd(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(ch) => 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

fn multiset_count(n: usize, k: usize) -> f64 {
    // C(n + k - 1, k - 1)
    let mut c = 1.0;
    for i in 1..k {
        c *= (n + i) as f64 / i as f64;
    }
    c
}

/// `max log det(I + sum y y^T)` over multisets of size `n` of `ys`.
fn exact_sup(ys: &[DVector<f64>], n: usize) -> f64 {
    let d = ys[0].len();
    let mut best = f64::NEG_INFINITY;
    let mut m = DMatrix::<f64>::identity(d, d);
    fn rec(ys: &[DVector<f64>], from: usize, left: usize, m: &mut DMatrix<f64>, best: &mut f64) {
        if left == 0 {
            *best = best.max(log_det_spd(m));
            return;
        }
        for i in from..ys.len() {
            let outer = &ys[i] * ys[i].transpose();
            *m += &outer;
            rec(ys, i, left - 1, m, best);
            *m -= &outer;
        }
    }
    rec(ys, 0, n, &mut m, &mut best);
    best
}

/// Smallest `n` with `n > e * sup log det(I + eps^-2 sum_{i<=n} x_i x_i^T)`,
/// the sup running over size-`n` selections with repetition.
///
/// Exact by enumeration while the number of selections stays small. Past
/// that, a greedy determinant maximizer (a lower bound on the sup) yields
/// `lower`, and the trace bound `r ln(1 + n max|x|^2 / (r eps^2))` with `r`
/// the rank of the span yields `upper`.
pub fn effective_dimension(xs: &[Vec<f64>], epsilon: f64) -> Result<EffectiveDimension> {
    if xs.is_empty() {
        return invalid("effective dimension needs at least one vector");
    }
    if !(epsilon > 0.0) {
        return invalid("epsilon must be positive");
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return invalid("vectors must share a positive dimension");
    }
    let ys: Vec<DVector<f64>> = xs
        .iter()
        .map(|x| DVector::from_iterator(d, x.iter().map(|v| v / epsilon)))
        .collect();
    let max_sq = ys.iter().map(|y| y.norm_squared()).fold(0.0, f64::max);
    let rank = if max_sq == 0.0 {
        0
    } else {
        DMatrix::from_columns(&ys).rank(1e-12 * max_sq.sqrt())
    };
    let e = std::f64::consts::E;
    if rank == 0 {
        return Ok(EffectiveDimension {
            lower: 1,
            upper: 1,
            exact: true,
        });
    }

    let upper = (1..)
        .find(|&n| {
            let r = rank as f64;
            n as f64 > e * r * (1.0 + n as f64 * max_sq / r).ln()
        })
        .unwrap_or(usize::MAX);

    let mut lower_exact = 1;
    for n in 1..=upper {
        if multiset_count(n, ys.len()) > ENUMERATION_LIMIT {
            break;
        }
        if n as f64 > e * exact_sup(&ys, n) {
            return Ok(EffectiveDimension {
                lower: n,
                upper: n,
                exact: true,
            });
        }
        lower_exact = n + 1;
    }

    let mut m = DMatrix::<f64>::identity(d, d);
    let mut greedy = 0.0;
    let mut lower_greedy = upper;
    for n in 1..=upper {
        let (best_i, gain) = ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let solved = m.clone().cholesky().map(|c| c.solve(y)).unwrap_or_else(|| y.clone());
                (i, (1.0 + y.dot(&solved)).ln())
            })
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        m += &ys[best_i] * ys[best_i].transpose();
        greedy += gain;
        if n as f64 > e * greedy {
            lower_greedy = n;
            break;
        }
    }
    let lower = lower_exact.max(lower_greedy).min(upper);
    Ok(EffectiveDimension {
        lower,
        upper,
        exact: lower == upper,
    })
}

/// Outcome of the FE versus BE comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeBeReport {
    pub fe: usize,
    pub be: usize,
    pub exact: bool,
    pub holds: bool,
}

/// FE dimension of the Q-type Bellman coupling against the Bellman eluder
/// dimension, both maximized over steps.
///
/// The BE side is computed from scratch: Bellman residual functions
/// `Q_{h,g} - T_h Q_{h+1,g}` against the distinct state-action occupancy
/// measures of the greedy policies of the class.
pub fn verify_fe_le_be<E: Environment + ?Sized>(
    class: &TabularClass,
    env: &E,
    epsilon: f64,
    cap: usize,
) -> Result<FeBeReport> {
    let mdp = require_tabular(env, "Bellman eluder dimension")?;
    let coupling = bellman_coupling(mdp, class, OperatingPolicy::QType)?;
    let (ns, na, n) = (mdp.num_states(), mdp.num_actions(), class.len());
    let mut fe = 0;
    let mut be = 0;
    let mut exact = true;
    for h in 0..class.horizon() {
        let f_dim = fe_dimension(&coupling.table(h), epsilon, cap)?;
        exact &= f_dim.exact;
        fe = fe.max(f_dim.dimension);

        let residuals: Vec<Vec<f64>> = (0..n)
            .map(|g| {
                let target = backup(mdp, h, &class.get(g).values()[h + 1]);
                (0..ns)
                    .flat_map(|s| {
                        let target = &target;
                        (0..na).map(move |a| class.get(g).q[h][s][a] - target[s][a])
                    })
                    .collect()
            })
            .collect();
        let mut measures: Vec<Vec<f64>> = Vec::new();
        for f in 0..n {
            let pol = GreedyPolicy::new(class, f);
            let d = mdp.state_distribution(&pol, h);
            let mut mu = vec![0.0; ns * na];
            for s in 0..ns {
                mu[s * na + class.greedy_action(f, h, &s)] += d[s];
            }
            if !measures.iter().any(|m| m.iter().zip(&mu).all(|(a, b)| (a - b).abs() <= 1e-15)) {
                measures.push(mu);
            }
        }
        let table = CouplingTable {
            values: residuals
                .iter()
                .map(|r| {
                    measures
                        .iter()
                        .map(|mu| r.iter().zip(mu).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect(),
        };
        let b_dim = fe_dimension(&table, epsilon, cap)?;
        exact &= b_dim.exact;
        be = be.max(b_dim.dimension);
    }
    Ok(FeBeReport {
        fe,
        be,
        exact,
        holds: fe <= be,
    })
}

/// Outcome of the bilinear FE versus effective dimension comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BilinearReport {
    pub fe: FeDimension,
    pub effective: EffectiveDimension,
    /// Common bound `B` on the squared norms of both factors.
    pub scale: f64,
    pub holds: bool,
}

/// FE dimension of `G(f, g) = <w[f], x[g]>` against the effective dimension
/// of `{x[g]}` at scale `epsilon / sqrt(B)`, where `B` bounds the squared
/// norms of both factor families.
pub fn verify_bilinear_le_effdim(
    w: &[Vec<f64>],
    x: &[Vec<f64>],
    epsilon: f64,
    cap: usize,
) -> Result<BilinearReport> {
    if w.is_empty() || x.is_empty() {
        return invalid("bilinear factors are empty");
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let table = CouplingTable {
        values: w.iter().map(|wf| x.iter().map(|xg| dot(wf, xg)).collect()).collect(),
    };
    let fe = fe_dimension(&table, epsilon, cap)?;
    let norm_sq = |v: &[f64]| dot(v, v);
    let scale = w.iter().chain(x).map(|v| norm_sq(v)).fold(0.0, f64::max);
    let effective = if scale == 0.0 {
        EffectiveDimension {
            lower: 1,
            upper: 1,
            exact: true,
        }
    } else {
        effective_dimension(x, epsilon / scale.sqrt())?
    };
    let holds = fe.dimension <= effective.lower;
    Ok(BilinearReport {
        fe,
        effective,
        scale,
        holds,
    })
}
