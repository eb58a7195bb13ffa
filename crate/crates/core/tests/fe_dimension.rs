mod common;

use common::random_mdp;
use opera_core::coupling::{bellman_coupling, OperatingPolicy};
use opera_core::fe_dimension::{
    effective_dimension, eluder_dimension, fe_dimension, verify_bilinear_le_effdim, verify_fe_le_be, CouplingTable,
    DEFAULT_CAP,
};
use opera_core::hypothesis::{Payload, TabularClass, TabularHypothesis};
use opera_core::instances::{KnrInstance, LinearMixtureInstance, TabularInstance, WitnessInstance};
use opera_core::mdp::{Environment, TabularMdp};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Whether `seq` is an eluder sequence at threshold `eps_prime`.
fn valid_at(values: &[Vec<f64>], seq: &[usize], eps_prime: f64) -> bool {
    (1..seq.len()).all(|t| {
        values.iter().any(|row| {
            let acc: f64 = seq[..t].iter().map(|&f| row[f] * row[f]).sum();
            acc.sqrt() <= eps_prime && row[seq[t]].abs() > eps_prime
        })
    })
}

/// Whether some `eps' >= eps` makes `seq` valid. The admissible set is a
/// union of half-open intervals, so its minimum is `eps` or a partial-sum
/// norm; trying those candidates is exhaustive.
fn valid(values: &[Vec<f64>], seq: &[usize], eps: f64) -> bool {
    let mut candidates = vec![eps];
    for row in values {
        let mut acc: f64 = 0.0;
        for &f in seq {
            candidates.push(acc.sqrt());
            acc += row[f] * row[f];
        }
    }
    candidates.into_iter().filter(|&c| c >= eps).any(|c| valid_at(values, seq, c))
}

/// Longest valid sequence by trying every ordered subset.
fn brute_force(values: &[Vec<f64>], eps: f64) -> usize {
    let n = values[0].len();
    fn extend(values: &[Vec<f64>], eps: f64, seq: &mut Vec<usize>, n: usize, best: &mut usize) {
        if !valid(values, seq, eps) {
            return;
        }
        *best = (*best).max(seq.len());
        for c in 0..n {
            if !seq.contains(&c) {
                seq.push(c);
                extend(values, eps, seq, n, best);
                seq.pop();
            }
        }
    }
    let mut best = 0;
    for first in 0..n {
        extend(values, eps, &mut vec![first], n, &mut best);
    }
    best
}

/// Eluder dimension straight from the definition: rows are every ordered
/// pair difference `f1 - f2`.
fn brute_eluder(functions: &[Vec<f64>], eps: f64) -> usize {
    let mut rows = Vec::new();
    for f1 in functions {
        for f2 in functions {
            rows.push(f1.iter().zip(f2).map(|(a, b)| a - b).collect());
        }
    }
    brute_force(&rows, eps)
}

fn table(values: Vec<Vec<f64>>) -> CouplingTable {
    CouplingTable { values }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

#[test]
fn zero_table_has_dimension_one() {
    let r = fe_dimension(&table(vec![vec![0.0; 4]; 3]), 0.1, DEFAULT_CAP).unwrap();
    assert_eq!(r.dimension, 1);
    assert!(r.exact);
}

#[test]
fn orthonormal_bilinear_has_dimension_three() {
    let t = table(identity(3));
    let r = fe_dimension(&t, 0.5, DEFAULT_CAP).unwrap();
    assert_eq!(r.dimension, 3);
    assert_eq!(brute_force(&t.values, 0.5), 3);
    assert!(valid(&t.values, &r.witness, 0.5));
    assert!(valid_at(&t.values, &r.witness, r.epsilon_prime));
}

#[test]
fn small_bellman_class_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let env = random_mdp(3, 2, 2, &mut rng);
    let class = random_class(&env, 2, &mut rng);
    let c = bellman_coupling(&env, &class, OperatingPolicy::QType).unwrap();
    for h in 0..2 {
        let t = c.table(h);
        let r = fe_dimension(&t, 0.05, DEFAULT_CAP).unwrap();
        assert!(r.dimension <= 2);
        assert_eq!(r.dimension, brute_force(&t.values, 0.05));
    }
}

#[test]
fn cap_truncation_is_flagged() {
    let t = table(identity(5));
    let r = fe_dimension(&t, 0.5, 3).unwrap();
    assert_eq!(r.dimension, 3);
    assert!(!r.exact);
    assert!(fe_dimension(&t, 0.0, 3).is_err());
    assert!(fe_dimension(&t, 0.5, 0).is_err());
    assert!(fe_dimension(&table(vec![vec![1.0, 2.0], vec![1.0]]), 0.5, 3).is_err());
}

#[test]
fn table_json_roundtrip() {
    let t = table(vec![vec![0.25, -1.0], vec![0.0, 0.5]]);
    let text = serde_json::to_string(&t).unwrap();
    assert_eq!(CouplingTable::from_json(&text).unwrap(), t);
    assert!(CouplingTable::from_json(r#"{"values": [[1.0], [1.0, 2.0]]}"#).is_err());
}

#[test]
fn eluder_examples() {
    // Singleton class: no pair of functions to separate points.
    assert_eq!(eluder_dimension(&[vec![0.3, 0.9, 0.1]], 0.1, DEFAULT_CAP).unwrap().dimension, 1);

    // Linear functions <theta, x> on the unit vectors of R^2.
    let thetas = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 1.0]];
    let linear = |points: &[[f64; 2]]| -> Vec<Vec<f64>> {
        thetas
            .iter()
            .map(|t| points.iter().map(|x| t[0] * x[0] + t[1] * x[1]).collect())
            .collect()
    };
    let basis = linear(&[[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(eluder_dimension(&basis, 0.5, DEFAULT_CAP).unwrap().dimension, 2);
    assert_eq!(brute_eluder(&basis, 0.5), 2);
    // A third unit point (1, 1)/sqrt(2) extends the sequence: order it first,
    // then e1 and e2 are each separated by a pair vanishing on it.
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let three = linear(&[[1.0, 0.0], [0.0, 1.0], [r, r]]);
    assert_eq!(eluder_dimension(&three, 0.5, DEFAULT_CAP).unwrap().dimension, brute_eluder(&three, 0.5));
    assert_eq!(brute_eluder(&three, 0.5), 3);

    // Thresholds 1[x >= t] on four points: every new point is separated by
    // the pair of thresholds around it, so all four points form a sequence.
    let thresholds: Vec<Vec<f64>> = (0..=4)
        .map(|t| (0..4).map(|x| if x >= t { 1.0 } else { 0.0 }).collect())
        .collect();
    assert_eq!(eluder_dimension(&thresholds, 0.5, DEFAULT_CAP).unwrap().dimension, 4);
}

/// `max log det(I + sum x x^T / eps^2)` over multisets of size `n`.
fn brute_sup(xs: &[Vec<f64>], eps: f64, n: usize) -> f64 {
    use nalgebra::DMatrix;
    let d = xs[0].len();
    let mut best = f64::NEG_INFINITY;
    let mut counts = vec![0usize; xs.len()];
    fn go(xs: &[Vec<f64>], eps: f64, i: usize, left: usize, counts: &mut [usize], d: usize, best: &mut f64) {
        if i + 1 == xs.len() {
            counts[i] = left;
            let mut m = DMatrix::<f64>::identity(d, d);
            for (x, &k) in xs.iter().zip(counts.iter()) {
                for r in 0..d {
                    for c in 0..d {
                        m[(r, c)] += k as f64 * x[r] * x[c] / (eps * eps);
                    }
                }
            }
            *best = best.max(m.determinant().ln());
            return;
        }
        for k in 0..=left {
            counts[i] = k;
            go(xs, eps, i + 1, left - k, counts, d, best);
        }
    }
    go(xs, eps, 0, n, &mut counts, d, &mut best);
    best
}

fn brute_effective(xs: &[Vec<f64>], eps: f64) -> usize {
    (1..).find(|&n| n as f64 > std::f64::consts::E * brute_sup(xs, eps, n)).unwrap()
}

#[test]
fn effective_dimension_examples() {
    let zero = effective_dimension(&[vec![0.0, 0.0]], 0.3).unwrap();
    assert_eq!((zero.lower, zero.upper), (1, 1));

    let basis = identity(3);
    let r = effective_dimension(&basis, 1.0).unwrap();
    assert!(r.exact);
    assert_eq!(r.lower, brute_effective(&basis, 1.0));
    assert_eq!(r.lower, 15);

    let xs = vec![vec![0.3, -0.2], vec![0.1, 0.4], vec![-0.5, 0.5]];
    let a = effective_dimension(&xs, 0.2).unwrap();
    let scaled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * 3.0).collect()).collect();
    let b = effective_dimension(&scaled, 0.6).unwrap();
    assert_eq!(a, b);
    assert!(a.exact);
    assert_eq!(a.lower, brute_effective(&xs, 0.2));

    assert!(effective_dimension(&[], 1.0).is_err());
    assert!(effective_dimension(&basis, 0.0).is_err());
}

#[test]
fn bilinear_examples() {
    let basis = identity(3);
    let r = verify_bilinear_le_effdim(&basis, &basis, 0.5, DEFAULT_CAP).unwrap();
    assert_eq!(r.fe.dimension, 3);
    assert!(r.holds);

    // Identical X: any second element has the same value as the first, so
    // its partial sum already reaches |G|.
    let w = vec![vec![1.0, 0.5], vec![-0.3, 0.2], vec![0.7, -0.9]];
    let same = vec![vec![1.0, 2.0]; 3];
    let r = verify_bilinear_le_effdim(&w, &same, 0.1, DEFAULT_CAP).unwrap();
    assert_eq!(r.fe.dimension, 1);
    assert!(r.holds);

    // Parallel X of different lengths is still rank one, but ordering by
    // increasing length with per-step rows gives longer sequences.
    let x = vec![vec![1.0, 2.0], vec![0.5, 1.0], vec![-0.25, -0.5]];
    let r = verify_bilinear_le_effdim(&w, &x, 0.1, DEFAULT_CAP).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let values: Vec<Vec<f64>> = w.iter().map(|wf| x.iter().map(|xg| dot(wf, xg)).collect()).collect();
    assert_eq!(r.fe.dimension, brute_force(&values, 0.1));
    assert!(r.holds);

    let zero_w = vec![vec![0.0, 0.0]; 3];
    let r = verify_bilinear_le_effdim(&zero_w, &x, 0.1, DEFAULT_CAP).unwrap();
    assert_eq!(r.fe.dimension, 1);
    assert!(r.holds);
}

fn random_class(env: &TabularMdp, n: usize, rng: &mut ChaCha8Rng) -> TabularClass {
    let (ns, na, horizon) = (env.num_states(), env.num_actions(), env.horizon());
    let hyps = (0..n)
        .map(|_| {
            let q = (0..horizon)
                .map(|_| (0..ns).map(|_| (0..na).map(|_| rng.random::<f64>()).collect()).collect())
                .collect();
            TabularHypothesis::from_q(q, Payload::None)
        })
        .collect();
    TabularClass::new(hyps, 0).unwrap()
}

#[test]
fn fe_at_most_be_examples() {
    let tab = TabularInstance::canonical();
    let lone = TabularClass::new(vec![tab.class.get(tab.fstar).clone()], 0).unwrap();
    let r = verify_fe_le_be(&lone, &tab.env, 0.1, DEFAULT_CAP).unwrap();
    assert_eq!((r.fe, r.be), (1, 1));
    assert!(r.holds);

    let pair = TabularClass::new(vec![tab.class.get(tab.fstar).clone(), tab.class.get((tab.fstar + 1) % 24).clone()], 0).unwrap();
    let r = verify_fe_le_be(&pair, &tab.env, 0.01, DEFAULT_CAP).unwrap();
    assert!(r.fe <= 2 && r.be <= 2 && r.holds);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let env = random_mdp(3, 2, 2, &mut rng);
        let class = random_class(&env, 4, &mut rng);
        let r = verify_fe_le_be(&class, &env, 0.05, DEFAULT_CAP).unwrap();
        assert!(r.exact && r.holds, "{r:?}");
    }
    let r = verify_fe_le_be(&tab.class, &tab.env, 0.1, DEFAULT_CAP).unwrap();
    assert!(r.holds, "{r:?}");
}

#[test]
fn instance_couplings_are_bounded_by_effective_dimension() {
    let lm = LinearMixtureInstance::canonical();
    for fac in lm.coupling().unwrap().factors().unwrap() {
        let r = verify_bilinear_le_effdim(&fac.w, &fac.x, 0.1, DEFAULT_CAP).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.fe.dimension <= lm.features.dim + 1);
    }
    let w = WitnessInstance::canonical();
    for fac in w.coupling().factors().unwrap() {
        let r = verify_bilinear_le_effdim(&fac.w, &fac.x, 0.1, DEFAULT_CAP).unwrap();
        assert!(r.holds, "{r:?}");
    }
    // KNR has no finite factorization; compare against enumeration on a
    // six-hypothesis restriction.
    let knr = KnrInstance::canonical();
    let c = knr.coupling().unwrap().restrict(&[0, 1, 2, 3, 4, 5]).unwrap();
    for h in 0..c.horizon() {
        let t = c.table(h);
        let r = fe_dimension(&t, 0.1, DEFAULT_CAP).unwrap();
        assert_eq!(r.dimension, brute_force(&t.values, 0.1));
    }
}

fn arb_table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4, 1usize..6).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, cols), rows)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_exhaustive_enumeration(values in arb_table(), eps in 0.05f64..0.8) {
        let t = table(values.clone());
        let r = fe_dimension(&t, eps, DEFAULT_CAP).unwrap();
        prop_assert!(r.exact);
        prop_assert_eq!(r.dimension, brute_force(&values, eps));
        prop_assert!(valid_at(&values, &r.witness, r.epsilon_prime));
        prop_assert!(r.epsilon_prime >= eps);
    }

    #[test]
    fn monotone_in_epsilon(values in arb_table(), e1 in 0.01f64..0.5, e2 in 0.01f64..0.5) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let t = table(values);
        let a = fe_dimension(&t, lo, DEFAULT_CAP).unwrap().dimension;
        let b = fe_dimension(&t, hi, DEFAULT_CAP).unwrap().dimension;
        prop_assert!(a >= b);
    }

    #[test]
    fn invariant_under_permutation(values in arb_table(), eps in 0.05f64..0.8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = values[0].len();
        let mut perm: Vec<usize> = (0..cols).collect();
        for i in (1..cols).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut rows = values.clone();
        rows.reverse();
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let a = fe_dimension(&table(values), eps, DEFAULT_CAP).unwrap().dimension;
        let b = fe_dimension(&table(permuted), eps, DEFAULT_CAP).unwrap().dimension;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn effective_dimension_is_homogeneous(
        xs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..4),
        eps in 0.2f64..1.0,
        c in 0.5f64..3.0,
    ) {
        let a = effective_dimension(&xs, eps).unwrap();
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * c).collect()).collect();
        let b = effective_dimension(&scaled, eps * c).unwrap();
        prop_assert_eq!(a.lower, b.lower);
        prop_assert_eq!(a.upper, b.upper);
    }
}
