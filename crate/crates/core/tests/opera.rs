mod common;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use opera_core::coupling::OperatingPolicy;
use opera_core::estimation::{make_bellman_def, Discriminator, DiscriminatorClass, EstimationFunction, Observation};
use opera_core::hypothesis::{HypothesisSet, TabularClass};
use opera_core::instances::{KnrInstance, LinearMixtureInstance, TabularInstance, ValueTable, WitnessInstance};
use opera_core::mdp::{rollout, Environment, TabularMdp, Transition};
use opera_core::opera::{
    beta_default, beta_knr, constraint_lhs, knr_confidence, linear_mixture_confidence, log_covering_of_losses,
    opera_run, select_hypothesis, unconstrained_argmax, BetaContext, BetaSchedule, ConfidenceSet, DefConfidence,
    KnrRidge, LinearMixtureRidge, OperaConfig,
};
use opera_core::OperaError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Collects `(collector, observation)` pairs at every step from greedy
/// rollouts of random class members.
fn tabular_history<C: HypothesisSet<usize>>(
    env: &TabularMdp,
    class: &C,
    episodes: usize,
    seed: u64,
) -> Vec<Vec<(usize, Observation<usize>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_step = vec![Vec::new(); env.horizon()];
    for _ in 0..episodes {
        let f = rng.random_range(0..class.len());
        let traj = rollout(env, &opera_core::hypothesis::GreedyPolicy::new(class, f), &mut rng).unwrap();
        for (h, tr) in traj.steps.into_iter().enumerate() {
            per_step[h].push((f, tr));
        }
    }
    per_step
}

/// `max_v sum_i ||l_f||^2 - min_g sum_i ||l_g||^2` over an explicit list of
/// discriminators.
fn brute_lhs<S>(
    def: &dyn EstimationFunction<S>,
    members: &[Discriminator],
    h: usize,
    f: usize,
    history: &[(usize, Observation<S>)],
) -> f64 {
    let n = def.num_hypotheses();
    let total = |g: usize, v: &Discriminator| -> f64 {
        history
            .iter()
            .map(|(c, o)| def.evaluate(h, *c, o, f, g, v).iter().map(|x| x * x).sum::<f64>())
            .sum()
    };
    let mut best = f64::NEG_INFINITY;
    for v in members {
        let own = total(f, v);
        let inf = (0..n).map(|g| total(g, v)).fold(f64::INFINITY, f64::min);
        best = best.max(own - inf);
    }
    best.max(0.0)
}

/// Every assembled discriminator over the groups visited by `history`;
/// unvisited groups take component 0.
fn assemblies(class: &DiscriminatorClass, history: &[(usize, Observation<usize>)]) -> Vec<Discriminator> {
    let comps = class.base_members().len();
    let mut groups: Vec<usize> = history.iter().map(|(_, o)| class.group(&o.state, o.action).unwrap()).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut out = Vec::new();
    let mut choice = vec![0usize; groups.len()];
    loop {
        let mut full = vec![0usize; class.num_groups()];
        for (g, &k) in groups.iter().zip(&choice) {
            full[*g] = k;
        }
        out.push(class.assemble(&full).unwrap());
        let mut i = 0;
        while i < choice.len() {
            choice[i] += 1;
            if choice[i] < comps {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == choice.len() {
            return out;
        }
    }
}

#[test]
fn empty_history_gives_zero_and_empty_g_errors() {
    let tab = TabularInstance::canonical();
    let def = tab.def().unwrap();
    let triv = DiscriminatorClass::trivial();
    for f in 0..tab.class.len() {
        assert_eq!(constraint_lhs(&def, &triv, 0, f, &[], tab.class.len()).unwrap(), 0.0);
    }
    assert!(constraint_lhs(&def, &triv, 0, 0, &[], 0).is_err());
    let conf = DefConfidence::new(&def, triv, 3).unwrap();
    assert!(conf.constraint_values(1).iter().all(|x| *x == 0.0));
}

#[test]
fn single_observation_hand_value() {
    let tab = TabularInstance::canonical();
    let def = tab.def().unwrap();
    let h = 1;
    let obs = Transition {
        state: 2,
        action: 1,
        reward: tab.env.reward_at(h, 2, 1),
        next_state: 0,
    };
    let triv = DiscriminatorClass::trivial();
    let zero = Discriminator::Constant(0.0);
    for f in [0, 5, 13] {
        let l = |g: usize| def.evaluate(h, 0, &obs, f, g, &zero)[0];
        let min = (0..tab.class.len()).map(|g| l(g) * l(g)).fold(f64::INFINITY, f64::min);
        let got = constraint_lhs(&def, &triv, h, f, &[(0, obs.clone())], tab.class.len()).unwrap();
        assert_abs_diff_eq!(got, l(f) * l(f) - min, epsilon = 1e-15);
    }
}

fn check_against_brute<S: Clone + opera_core::StateLike>(
    def: &dyn EstimationFunction<S>,
    disc: &DiscriminatorClass,
    members: impl Fn(&[(usize, Observation<S>)]) -> Vec<Discriminator>,
    history: &[Vec<(usize, Observation<S>)>],
) {
    let horizon = history.len();
    let mut conf = DefConfidence::new(def, disc.clone(), horizon).unwrap();
    for (h, step) in history.iter().enumerate() {
        for (c, o) in step {
            conf.observe(h, *c, o).unwrap();
        }
    }
    for (h, step) in history.iter().enumerate() {
        let incremental = conf.constraint_values(h);
        let vs = members(step);
        for f in 0..def.num_hypotheses() {
            let brute = brute_lhs(def, &vs, h, f, step);
            let reference = constraint_lhs(def, disc, h, f, step, def.num_hypotheses()).unwrap();
            assert_abs_diff_eq!(reference, brute, epsilon = 1e-10);
            assert_abs_diff_eq!(incremental[f], brute, epsilon = 1e-10);
        }
    }
}

#[test]
fn three_episode_histories_match_brute_force() {
    let triv = DiscriminatorClass::trivial();
    let zero = |_: &[(usize, Observation<usize>)]| vec![Discriminator::Constant(0.0)];

    let tab = TabularInstance::canonical();
    let def = tab.def().unwrap();
    check_against_brute(&def, &triv, zero, &tabular_history(&tab.env, &tab.class, 3, 1));

    let lm = LinearMixtureInstance::canonical();
    check_against_brute(&lm.def(), &triv, zero, &tabular_history(&lm.env, &lm.class, 3, 2));

    let w = WitnessInstance::canonical();
    let disc = w.discriminators.clone();
    check_against_brute(&w.def(), &disc, |hist| assemblies(&disc, hist), &tabular_history(&w.env, &w.class, 3, 3));

    // An explicit (non-assembled) class goes through the member loop.
    let explicit = DiscriminatorClass::Explicit {
        members: vec![
            Discriminator::NextState(vec![1.0, 0.0, -1.0]),
            Discriminator::NextState(vec![-1.0, 0.0, 1.0]),
            Discriminator::NextState(vec![0.0, 1.0, 0.0]),
        ],
    };
    let members = explicit.base_members();
    check_against_brute(&w.def(), &explicit, |_| members.clone(), &tabular_history(&w.env, &w.class, 3, 4));
}

#[test]
fn knr_history_matches_brute_force() {
    let knr = KnrInstance::canonical();
    let def = opera_core::estimation::make_knr_def(&knr, 10, 0.1, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut history = vec![Vec::new(); knr.horizon];
    for _ in 0..3 {
        let f = rng.random_range(0..knr.hypotheses.len());
        let traj = rollout(&knr, &opera_core::hypothesis::GreedyPolicy::new(&knr, f), &mut rng).unwrap();
        for (h, tr) in traj.steps.into_iter().enumerate() {
            history[h].push((f, tr));
        }
    }
    check_against_brute(&def, &DiscriminatorClass::trivial(), |_| vec![Discriminator::Constant(0.0)], &history);
}

#[test]
fn selection_examples() {
    let values = [0.4, 0.9, 0.7];
    // t = 1: nothing observed, the global argmax wins.
    let zero = vec![vec![0.0; 3]; 2];
    assert_eq!(select_hypothesis(&values, &zero, 0.0, 1).unwrap(), 1);

    // The value argmax violates at step 1; the runner-up is feasible.
    let lhs = vec![vec![0.0, 0.5, 0.1], vec![0.2, 3.0, 0.9]];
    assert_eq!(select_hypothesis(&values, &lhs, 1.0, 5).unwrap(), 2);
    // Brute force over feasibility.
    let feasible: Vec<usize> = (0..3).filter(|&f| lhs.iter().all(|r| r[f] <= 1.0)).collect();
    let best = feasible.iter().copied().max_by(|a, b| values[*a].total_cmp(&values[*b])).unwrap();
    assert_eq!(best, 2);

    // Infinite beta is the unconstrained argmax.
    assert_eq!(select_hypothesis(&values, &lhs, f64::INFINITY, 5).unwrap(), 1);

    // Ties go to the smallest index.
    assert_eq!(select_hypothesis(&[0.5, 0.5, 0.2], &zero, 0.0, 1).unwrap(), 0);

    match select_hypothesis(&values, &lhs, 0.05, 7) {
        Err(OperaError::Infeasible { episode, min_lhs, .. }) => {
            assert_eq!(episode, 7);
            assert_eq!(min_lhs, vec![0.0, 0.2]);
        }
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn infinite_beta_always_picks_the_unconstrained_argmax() {
    let lm = LinearMixtureInstance::canonical();
    let mut conf = linear_mixture_confidence(&lm, None).unwrap();
    let cfg = OperaConfig {
        episodes: 30,
        ..OperaConfig::default()
    };
    let log = opera_run(&lm.env, &lm.class, &mut conf, &lm.values(), Some(lm.fstar), f64::INFINITY, &cfg).unwrap();
    let best = unconstrained_argmax(&lm.class);
    assert!(log.records.iter().all(|r| r.selected_index == best));
}

#[test]
fn beta_arithmetic() {
    let log_n = log_covering_of_losses(5.0, 5.0, 0.0);
    assert_abs_diff_eq!(log_n, 15.0);
    let beta = beta_default(100, 3, log_n, 0.1, 1.0);
    assert_abs_diff_eq!(beta, (100.0f64 * 3.0 / 0.1).ln() + 15.0, epsilon = 1e-12);
    assert_abs_diff_eq!(beta, 23.006, epsilon = 5e-4);
    // delta -> 1 drops the confidence term.
    assert_abs_diff_eq!(beta_default(100, 3, log_n, 1.0, 2.0), 2.0 * ((300.0f64).ln() + 15.0), epsilon = 1e-12);
    // Doubling N_L adds c ln 2.
    let c = 0.7;
    let d = beta_default(50, 4, log_n + 2f64.ln(), 0.05, c) - beta_default(50, 4, log_n, 0.05, c);
    assert_abs_diff_eq!(d, c * 2f64.ln(), epsilon = 1e-12);

    let l = (400.0f64 * 3.0 / 0.1).ln();
    assert_abs_diff_eq!(beta_knr(400, 3, 0.1, 2, 2, 0.1, 1.0), 0.01 * 4.0 * l * l, epsilon = 1e-12);

    let ctx = BetaContext {
        episodes: 100,
        horizon: 3,
        delta: 0.1,
        log_covering: log_n,
        sigma: 0.1,
        feature_dim: 2,
        state_dim: 2,
    };
    assert_abs_diff_eq!(BetaSchedule::Covering { c: 1.0 }.resolve(&ctx).unwrap(), beta);
    assert_eq!(BetaSchedule::Fixed { beta: 2.5 }.resolve(&ctx).unwrap(), 2.5);
    assert!(BetaSchedule::Covering { c: 0.0 }.resolve(&ctx).is_err());
    assert!(BetaSchedule::Knr { c: -1.0 }.resolve(&ctx).is_err());
    assert!(BetaSchedule::Fixed { beta: -1.0 }.resolve(&ctx).is_err());
}

#[test]
fn config_validation() {
    let ok = OperaConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        OperaConfig { episodes: 0, ..ok.clone() },
        OperaConfig { delta: 0.0, ..ok.clone() },
        OperaConfig { delta: 1.0, ..ok.clone() },
        OperaConfig { beta: BetaSchedule::Fixed { beta: -0.1 }, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(OperaError::Config(_))));
    }
    let text = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<OperaConfig>(&text).unwrap(), ok);
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let m = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= m * a[col][c];
            }
            b[r] -= m * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Regression pairs `(x, y)` of the linear mixture set, rebuilt from raw
/// observations.
fn lm_pairs(lm: &LinearMixtureInstance, step: &[(usize, Observation<usize>)], h: usize) -> Vec<(Vec<f64>, f64)> {
    step.iter()
        .map(|(c, o)| {
            let v = &lm.class.get(*c).values()[h + 1];
            let mut x = lm.features.psi[o.state][o.action].clone();
            for s2 in 0..lm.env.num_states() {
                for k in 0..x.len() {
                    x[k] += lm.features.phi[o.state][o.action][s2][k] * v[s2];
                }
            }
            (x, o.reward + v[o.next_state])
        })
        .collect()
}

#[test]
fn linear_mixture_ridge_algebra() {
    let lm = LinearMixtureInstance::canonical();
    let d = lm.features.dim;
    let history = tabular_history(&lm.env, &lm.class, 40, 8);
    let mut conf = LinearMixtureRidge::new(&lm, 0.0, false).unwrap();
    for (h, step) in history.iter().enumerate() {
        for (c, o) in step {
            conf.observe(h, *c, o).unwrap();
        }
    }
    for (h, step) in history.iter().enumerate() {
        let pairs = lm_pairs(&lm, step, h);
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for (x, y) in &pairs {
            for i in 0..d {
                b[i] += x[i] * y;
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
            }
        }
        if DMatrix::from_fn(d, d, |i, j| a[i][j]).rank(1e-10) < d {
            continue;
        }
        let solved = gauss_solve(a, b);
        let (hat, warnings) = conf.estimate(h);
        assert!(warnings.is_empty());
        for k in 0..d {
            assert_abs_diff_eq!(hat[k], solved[k], epsilon = 1e-8);
        }
        let values = conf.constraint_values(h);
        for f in 0..lm.class.len() {
            let theta = &lm.theta(f)[h];
            let raw = |t: &[f64]| pairs.iter().map(|(x, y)| (t.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - y).powi(2)).sum::<f64>();
            // Residual-difference form against the unconstrained minimizer.
            let raw_form = raw(theta) - raw(&solved);
            assert_abs_diff_eq!(raw_form, conf.matrix_form(h, theta), epsilon = 1e-8);
            assert_abs_diff_eq!(values[f], conf.matrix_form(h, theta).max(0.0), epsilon = 1e-12);
            assert_abs_diff_eq!(conf.squared_loss(h, theta), raw(theta), epsilon = 1e-8);
        }
    }
}

#[test]
fn linear_mixture_single_datapoint() {
    let lm = LinearMixtureInstance::canonical();
    let history = tabular_history(&lm.env, &lm.class, 1, 9);
    let mut conf = LinearMixtureRidge::new(&lm, 1e-6, false).unwrap();
    let (c, o) = &history[0][0];
    conf.observe(0, *c, o).unwrap();
    let (hat, _) = conf.estimate(0);
    let (x, y) = &lm_pairs(&lm, &history[0], 0)[0];
    // The fitted value reproduces the single target.
    let fit: f64 = hat.iter().zip(x).map(|(a, b)| a * b).sum();
    assert_abs_diff_eq!(fit, *y, epsilon = 1e-4);
    assert!(conf.squared_loss(0, hat.as_slice()) < 1e-8);

    // Zero ridge on one datapoint is singular and falls back with a warning.
    let mut zero = LinearMixtureRidge::new(&lm, 0.0, false).unwrap();
    zero.observe(0, *c, o).unwrap();
    assert!(!zero.warnings().is_empty());
    let (pinv_hat, _) = zero.estimate(0);
    let fit: f64 = pinv_hat.iter().zip(x).map(|(a, b)| a * b).sum();
    assert_abs_diff_eq!(fit, *y, epsilon = 1e-8);
    assert!(LinearMixtureRidge::new(&lm, -1.0, false).is_err());
}

#[test]
fn generic_def_and_ridge_select_identically() {
    let lm = LinearMixtureInstance::canonical();
    let def = lm.def();
    let values = lm.values();
    let history = tabular_history(&lm.env, &lm.class, 25, 10);
    let mut generic = DefConfidence::new(&def, DiscriminatorClass::trivial(), lm.env.horizon()).unwrap();
    let mut special = LinearMixtureRidge::new(&lm, 0.0, true).unwrap();
    for (h, step) in history.iter().enumerate() {
        for (c, o) in step {
            generic.observe(h, *c, o).unwrap();
            special.observe(h, *c, o).unwrap();
        }
    }
    for h in 0..lm.env.horizon() {
        let a = generic.constraint_values(h);
        let b = special.constraint_values(h);
        for f in 0..a.len() {
            assert_abs_diff_eq!(a[f], b[f], epsilon = 1e-8);
        }
    }
    for mode in [OperatingPolicy::QType, OperatingPolicy::VType] {
        let cfg = OperaConfig {
            episodes: 150,
            mode,
            seed: 4,
            ..OperaConfig::default()
        };
        let mut generic = DefConfidence::new(&def, DiscriminatorClass::trivial(), lm.env.horizon()).unwrap();
        let mut special = LinearMixtureRidge::new(&lm, 0.0, true).unwrap();
        let beta = 1.0;
        let a = opera_run(&lm.env, &lm.class, &mut generic, &values, Some(lm.fstar), beta, &cfg).unwrap();
        let b = opera_run(&lm.env, &lm.class, &mut special, &values, Some(lm.fstar), beta, &cfg).unwrap();
        let sa: Vec<usize> = a.records.iter().map(|r| r.selected_index).collect();
        let sb: Vec<usize> = b.records.iter().map(|r| r.selected_index).collect();
        assert_eq!(sa, sb);
        assert!(sa.iter().collect::<std::collections::BTreeSet<_>>().len() > 1);
    }
}

fn knr_observations(knr: &KnrInstance, count: usize, seed: u64) -> Vec<Observation<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s: Vec<f64> = (0..knr.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = i % 2;
            let next_state = knr.sample_next(0, &s, a, &mut rng).unwrap();
            Transition { state: s, action: a, reward: 0.0, next_state }
        })
        .collect()
}

/// Per-row least squares `u_j = argmin sum_i (u . phi_i - s'_{i,j})^2`.
fn knr_rows(knr: &KnrInstance, obs: &[Observation<Vec<f64>>]) -> DMatrix<f64> {
    let dp = knr.feature_dim;
    let feats: Vec<DVector<f64>> = obs.iter().map(|o| knr.feature(&o.state, o.action)).collect();
    let mut a = vec![vec![0.0; dp]; dp];
    for p in &feats {
        for i in 0..dp {
            for j in 0..dp {
                a[i][j] += p[i] * p[j];
            }
        }
    }
    let mut u = DMatrix::zeros(knr.state_dim, dp);
    for row in 0..knr.state_dim {
        let b: Vec<f64> = (0..dp).map(|i| feats.iter().zip(obs).map(|(p, o)| p[i] * o.next_state[row]).sum()).collect();
        let sol = gauss_solve(a.clone(), b);
        for k in 0..dp {
            u[(row, k)] = sol[k];
        }
    }
    u
}

#[test]
fn noiseless_knr_recovers_the_operator() {
    let knr = KnrInstance::canonical().with_sigma(0.0).unwrap();
    let mut conf = KnrRidge::new(&knr, 0.0).unwrap();
    for o in knr_observations(&knr, 10, 1) {
        conf.observe(0, 0, &o).unwrap();
    }
    let (hat, warnings) = conf.estimate(0);
    assert!(warnings.is_empty());
    assert!((&hat - knr.true_operator(0)).abs().max() < 1e-10);
    let values = conf.constraint_values(0);
    assert!(values[knr.fstar] < 1e-16);
    assert_eq!(select_hypothesis(&vec![0.0; values.len()], std::slice::from_ref(&values), 1e-12, 2).unwrap(), knr.fstar);
}

#[test]
fn knr_estimate_with_noise() {
    let knr = KnrInstance::canonical();
    assert_eq!((knr.sigma, knr.feature_dim, knr.state_dim), (0.1, 2, 2));
    let obs = knr_observations(&knr, 50, 2);
    let mut conf = KnrRidge::new(&knr, 0.0).unwrap();
    for o in &obs {
        conf.observe(0, 0, o).unwrap();
    }
    let (hat, _) = conf.estimate(0);
    let independent = knr_rows(&knr, &obs);
    assert!((&hat - &independent).abs().max() < 1e-8);
    let err = (&hat - knr.true_operator(0)).singular_values().max();
    assert!(err < 0.2, "operator-norm error {err}");
}

#[test]
fn knr_matrix_and_residual_forms_agree() {
    let knr = KnrInstance::canonical();
    let mut conf = knr_confidence(&knr, Some(0.0)).unwrap();
    for (i, o) in knr_observations(&knr, 30, 3).iter().enumerate() {
        conf.observe(i % knr.horizon, 0, o).unwrap();
    }
    for h in 0..knr.horizon {
        for u in &knr.hypotheses {
            assert_abs_diff_eq!(conf.matrix_form(h, &u[h]), conf.residual_form(h, &u[h]), epsilon = 1e-8);
        }
    }
}

#[test]
fn singleton_class_has_zero_regret() {
    let tab = TabularInstance::canonical();
    let lone = TabularClass::new(vec![tab.class.get(tab.fstar).clone()], 0).unwrap();
    let def = make_bellman_def(&lone, &tab.env, 1e-9).unwrap();
    let values = ValueTable::tabular(&tab.env, &lone);
    for mode in [OperatingPolicy::QType, OperatingPolicy::VType] {
        let mut conf = DefConfidence::new(&def, DiscriminatorClass::trivial(), 3).unwrap();
        let cfg = OperaConfig { episodes: 50, mode, ..OperaConfig::default() };
        let log = opera_run(&tab.env, &lone, &mut conf, &values, Some(0), 0.0, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.regret.abs() < 1e-15));
        assert_eq!(log.cumulative_regret(), log.records.iter().map(|r| r.regret).sum::<f64>());
        assert!(log.fstar_always_feasible());
    }
}

/// Two states, two actions, `H = 2`. In truth both actions at `s_0` stay in
/// `s_0`; the wrong model sends action 1 to `s_1`, which pays 0.5 at step 1.
fn two_model_instance() -> WitnessInstance {
    let stay = vec![1.0, 0.0];
    let go = vec![0.0, 1.0];
    let rewards = vec![vec![vec![0.1, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![0.5, 0.5]]];
    let step1 = vec![vec![stay.clone(), stay.clone()], vec![go.clone(), go.clone()]];
    let truth = TabularMdp::new(
        vec![vec![vec![stay.clone(), stay.clone()], vec![go.clone(), go.clone()]], step1.clone()],
        rewards.clone(),
        0,
    )
    .unwrap();
    let wrong = TabularMdp::new(
        vec![vec![vec![stay.clone(), go.clone()], vec![go.clone(), go]], step1],
        rewards,
        0,
    )
    .unwrap();
    WitnessInstance::from_models(vec![truth, wrong], 0, 1.0).unwrap()
}

#[test]
fn wrong_hypothesis_is_eliminated_after_beta() {
    let w = two_model_instance();
    let values = w.values();
    assert_abs_diff_eq!(values.optimal, 0.1, epsilon = 1e-15);
    assert_abs_diff_eq!(w.class.initial_value(1), 0.5, epsilon = 1e-15);
    let def = w.def();
    let beta = 2.5;
    let mut conf = DefConfidence::new(&def, w.discriminators.clone(), 2).unwrap();
    let cfg = OperaConfig { episodes: 10, ..OperaConfig::default() };
    let log = opera_run(&w.env, &w.class, &mut conf, &values, Some(0), beta, &cfg).unwrap();
    // Every visit by the wrong model adds (v(s_1) - v(s_0))^2 = 1 at step 0,
    // so its constraint after k visits is k; it stays feasible while k <= beta.
    let expected: Vec<usize> = (1..=10).map(|t| if (t - 1) as f64 <= beta { 1 } else { 0 }).collect();
    let got: Vec<usize> = log.records.iter().map(|r| r.selected_index).collect();
    assert_eq!(got, expected);
    for r in &log.records {
        let visits = expected[..r.episode - 1].iter().filter(|&&f| f == 1).count() as f64;
        if r.selected_index == 1 {
            assert_abs_diff_eq!(r.max_constraint_lhs, visits, epsilon = 1e-12);
        }
        assert_eq!(r.fstar_lhs, vec![0.0, 0.0]);
    }
    assert_abs_diff_eq!(log.cumulative_regret(), 0.3, epsilon = 1e-12);
    assert_eq!(log.optimism_violations, 0);
}

#[test]
fn datasets_grow_by_one_per_step_and_episode() {
    let lm = LinearMixtureInstance::canonical();
    for mode in [OperatingPolicy::QType, OperatingPolicy::VType] {
        let mut conf = linear_mixture_confidence(&lm, None).unwrap();
        let cfg = OperaConfig { episodes: 37, mode, ..OperaConfig::default() };
        opera_run(&lm.env, &lm.class, &mut conf, &lm.values(), Some(lm.fstar), 1.0, &cfg).unwrap();
        for h in 0..lm.env.horizon() {
            assert_eq!(conf.statistics(h).count, 37);
        }
    }
}

#[test]
fn run_log_invariants_and_csv() {
    let w = WitnessInstance::canonical();
    let def = w.def();
    let mut conf = DefConfidence::new(&def, w.discriminators.clone(), w.env.horizon()).unwrap();
    let cfg = OperaConfig {
        episodes: 60,
        mode: OperatingPolicy::VType,
        seed: 3,
        ..OperaConfig::default()
    };
    let log = opera_run(&w.env, &w.class, &mut conf, &w.values(), Some(w.fstar), 5.0, &cfg).unwrap();
    assert_eq!(log.records.len(), 60);
    for pair in log.records.windows(2) {
        assert!(pair[1].cum_regret >= pair[0].cum_regret);
    }
    for r in &log.records {
        assert!(r.regret >= -1e-12);
        if r.fstar_feasible {
            assert!(r.value_optimistic >= w.values().optimal - 1e-9);
        }
    }
    assert_eq!(log.regret_at(0), 0.0);
    assert_eq!(log.regret_at(60), log.cumulative_regret());
    assert_eq!(log.regret_at(1000), log.cumulative_regret());

    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "episode,selected_index,value_optimistic,value_actual,regret,cum_regret,fstar_feasible,max_constraint_lhs"
    );
    assert_eq!(lines.count(), 60);

    // Same seed, same log.
    let mut conf2 = DefConfidence::new(&def, w.discriminators.clone(), w.env.horizon()).unwrap();
    let again = opera_run(&w.env, &w.class, &mut conf2, &w.values(), Some(w.fstar), 5.0, &cfg).unwrap();
    assert_eq!(log, again);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let tab = TabularInstance::canonical();
    let lm = LinearMixtureInstance::canonical();
    let mut conf = linear_mixture_confidence(&lm, None).unwrap();
    let cfg = OperaConfig::default();
    assert!(opera_run(&tab.env, &tab.class, &mut conf, &tab.values(), None, 1.0, &cfg).is_err());
    let mut conf = linear_mixture_confidence(&lm, None).unwrap();
    assert!(matches!(
        opera_run(&lm.env, &lm.class, &mut conf, &lm.values(), None, -1.0, &cfg),
        Err(OperaError::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constraint_is_nonnegative_and_matches_reference(seed in 0u64..10_000, episodes in 1usize..6) {
        let tab = TabularInstance::canonical();
        let def = tab.def().unwrap();
        let triv = DiscriminatorClass::trivial();
        let history = tabular_history(&tab.env, &tab.class, episodes, seed);
        let mut conf = DefConfidence::new(&def, triv.clone(), 3).unwrap();
        for (h, step) in history.iter().enumerate() {
            for (c, o) in step {
                conf.observe(h, *c, o).unwrap();
            }
        }
        for (h, step) in history.iter().enumerate() {
            let vals = conf.constraint_values(h);
            for f in 0..tab.class.len() {
                let r = constraint_lhs(&def, &triv, h, f, step, tab.class.len()).unwrap();
                prop_assert!(r >= 0.0);
                prop_assert!((vals[f] - r).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn selection_is_feasible_and_maximal(
        values in prop::collection::vec(0.0f64..1.0, 1..8),
        beta in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = values.len();
        let lhs: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(0.0..1.5)).collect()).collect();
        let feasible: Vec<usize> = (0..n).filter(|&f| lhs.iter().all(|r| r[f] <= beta)).collect();
        match select_hypothesis(&values, &lhs, beta, 1) {
            Ok(f) => {
                prop_assert!(feasible.contains(&f));
                for &g in &feasible {
                    prop_assert!(values[g] < values[f] || (values[g] == values[f] && g >= f));
                }
            }
            Err(_) => prop_assert!(feasible.is_empty()),
        }
    }
}
