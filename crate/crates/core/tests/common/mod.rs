#![allow(dead_code)]

use opera_core::mdp::TabularMdp;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let head: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - head;
    p
}

/// Random MDP with per-step rewards in `[0, 1/H]`.
pub fn random_mdp(ns: usize, na: usize, horizon: usize, rng: &mut ChaCha8Rng) -> TabularMdp {
    let p = (0..horizon)
        .map(|_| (0..ns).map(|_| (0..na).map(|_| distribution(ns, rng)).collect()).collect())
        .collect();
    let r = (0..horizon)
        .map(|_| (0..ns).map(|_| (0..na).map(|_| rng.random::<f64>() / horizon as f64).collect()).collect())
        .collect();
    TabularMdp::new(p, r, 0).unwrap()
}

/// Expected return of a stochastic policy `pi[h][s][a]` by enumerating every
/// trajectory.
pub fn enumerate_return(m: &TabularMdp, pi: &[Vec<Vec<f64>>]) -> f64 {
    fn go(m: &TabularMdp, pi: &[Vec<Vec<f64>>], h: usize, s: usize) -> f64 {
        if h == pi.len() {
            return 0.0;
        }
        let mut total = 0.0;
        for (a, &pa) in pi[h][s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let mut cont = m.reward_at(h, s, a);
            for (s2, &q) in m.transition(h, s, a).iter().enumerate() {
                if q > 0.0 {
                    cont += q * go(m, pi, h + 1, s2);
                }
            }
            total += pa * cont;
        }
        total
    }
    go(m, pi, 0, 0)
}

pub fn deterministic_as_probs(actions: &[Vec<usize>], na: usize) -> Vec<Vec<Vec<f64>>> {
    actions
        .iter()
        .map(|row| {
            row.iter()
                .map(|&a| (0..na).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect()
}
