use rand::Rng as _;

use super::forced_action;
use crate::data::{Policy, PolicyKind, Trajectory};
use crate::rng::Rng;

/// Transition tables of the two-step binary generator.
///
/// Indexing: `p_a1[l1]`, `p_l2[2*l1 + a1]`, `p_a2[4*l1 + 2*a1 + l2]`,
/// `p_y[8*l1 + 4*a1 + 2*l2 + a2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTables {
    pub p_l1: f64,
    pub p_a1: [f64; 2],
    pub p_l2: [f64; 4],
    pub p_a2: [f64; 8],
    pub p_y: [f64; 16],
}

pub const TINY_TABLES: TinyTables = TinyTables {
    p_l1: 0.45,
    p_a1: [0.35, 0.6],
    p_l2: [0.3, 0.55, 0.45, 0.7],
    p_a2: [0.3, 0.5, 0.45, 0.65, 0.4, 0.6, 0.55, 0.7],
    p_y: [
        0.2, 0.35, 0.3, 0.5, 0.3, 0.45, 0.4, 0.6, 0.25, 0.4, 0.45, 0.6, 0.4, 0.55, 0.6, 0.8,
    ],
};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl TinyTables {
    pub fn prop1(&self, l1: u8) -> f64 {
        self.p_a1[l1 as usize]
    }

    pub fn prop2(&self, l1: u8, a1: u8, l2: u8) -> f64 {
        self.p_a2[4 * l1 as usize + 2 * a1 as usize + l2 as usize]
    }

    pub fn p_l2(&self, l1: u8, a1: u8) -> f64 {
        self.p_l2[2 * l1 as usize + a1 as usize]
    }

    pub fn mean_y(&self, l1: u8, a1: u8, l2: u8, a2: u8) -> f64 {
        self.p_y[8 * l1 as usize + 4 * a1 as usize + 2 * l2 as usize + a2 as usize]
    }

    /// Behavior score: the logit of the assignment probability.
    pub fn score1(&self, l1: u8) -> f64 {
        logit(self.prop1(l1))
    }

    pub fn score2(&self, l1: u8, a1: u8, l2: u8) -> f64 {
        logit(self.prop2(l1, a1, l2))
    }
}

fn bern(p: f64) -> f64 {
    p
}

pub(super) fn score(tables: &TinyTables, traj: &Trajectory, t: usize) -> f64 {
    let l1 = traj.l(1)[0] as u8;
    if t == 1 {
        tables.score1(l1)
    } else {
        tables.score2(l1, traj.a(1), traj.l(2)[0] as u8)
    }
}

pub(super) fn score_from_parts(tables: &TinyTables, l: &[Vec<f64>], a: &[u8]) -> f64 {
    let l1 = l[0][0] as u8;
    if l.len() == 1 {
        tables.score1(l1)
    } else {
        tables.score2(l1, a[0], l[1][0] as u8)
    }
}

pub(super) fn simulate_unit(tables: &TinyTables, rng: &mut Rng, policy: Option<&Policy>, id: usize) -> Trajectory {
    let u: [f64; 5] = std::array::from_fn(|_| rng.gen::<f64>());
    let l1 = u8::from(u[0] < tables.p_l1);
    let a1 = forced_action(policy, 1, tables.score1(l1)).unwrap_or(u8::from(u[1] < tables.prop1(l1)));
    let l2 = u8::from(u[2] < tables.p_l2(l1, a1));
    let a2 = forced_action(policy, 2, tables.score2(l1, a1, l2))
        .unwrap_or(u8::from(u[3] < tables.prop2(l1, a1, l2)));
    let y = u8::from(u[4] < tables.mean_y(l1, a1, l2, a2));
    Trajectory {
        id: format!("u{id}"),
        covariates: vec![vec![l1 as f64], vec![l2 as f64]],
        actions: vec![a1, a2],
        outcome: y as f64,
    }
}

/// Distribution of the action at step `t`: `(P(a=0), P(a=1))`.
fn action_dist(policy: &Policy, t: usize, prop: f64, score: f64) -> [f64; 2] {
    match policy.kind {
        PolicyKind::BehaviorStochastic => [1.0 - prop, prop],
        _ => {
            let a = policy.decide(t, || score).expect("deterministic");
            if a == 1 {
                [0.0, 1.0]
            } else {
                [1.0, 0.0]
            }
        }
    }
}

/// `E[Y(policy)]` by enumerating all 16 full histories.
pub(super) fn exact_capo(tables: &TinyTables, policy: &Policy) -> f64 {
    let mut total = 0.0;
    for l1 in 0..2u8 {
        let pl1 = if l1 == 1 { tables.p_l1 } else { 1.0 - tables.p_l1 };
        let d1 = action_dist(policy, 1, tables.prop1(l1), tables.score1(l1));
        for a1 in 0..2u8 {
            if d1[a1 as usize] == 0.0 {
                continue;
            }
            for l2 in 0..2u8 {
                let pl2 = bern_pmf(tables.p_l2(l1, a1), l2);
                let d2 = action_dist(policy, 2, tables.prop2(l1, a1, l2), tables.score2(l1, a1, l2));
                for a2 in 0..2u8 {
                    let w = pl1 * d1[a1 as usize] * pl2 * d2[a2 as usize];
                    total += w * bern(tables.mean_y(l1, a1, l2, a2));
                }
            }
        }
    }
    total
}

fn bern_pmf(p: f64, x: u8) -> f64 {
    if x == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Exact `Q*_s(a_s, H_s)` with `policy` followed after step `s`.
pub(super) fn exact_q(tables: &TinyTables, traj: &Trajectory, s: usize, a_s: u8, policy: &Policy) -> f64 {
    let l1 = traj.l(1)[0] as u8;
    if s == 2 {
        return tables.mean_y(l1, traj.a(1), traj.l(2)[0] as u8, a_s);
    }
    let mut total = 0.0;
    for l2 in 0..2u8 {
        let d2 = action_dist(policy, 2, tables.prop2(l1, a_s, l2), tables.score2(l1, a_s, l2));
        for a2 in 0..2u8 {
            total += bern_pmf(tables.p_l2(l1, a_s), l2) * d2[a2 as usize] * tables.mean_y(l1, a_s, l2, a2);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{oracle_capo, oracle_capo_mc, DgpSpec, OracleMethod};

    #[test]
    fn sixteen_histories_sum_to_one() {
        let t = &TINY_TABLES;
        let mut mass = 0.0;
        let mut count = 0;
        for l1 in 0..2u8 {
            for a1 in 0..2u8 {
                for l2 in 0..2u8 {
                    for a2 in 0..2u8 {
                        count += 1;
                        mass += bern_pmf(t.p_l1, l1)
                            * bern_pmf(t.prop1(l1), a1)
                            * bern_pmf(t.p_l2(l1, a1), l2)
                            * bern_pmf(t.prop2(l1, a1, l2), a2);
                    }
                }
            }
        }
        assert_eq!(count, 16);
        assert!((mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exhaustive_matches_monte_carlo() {
        let spec = DgpSpec::tiny(0);
        for p in [
            Policy::fixed("one", vec![1, 1]),
            Policy::fixed("zero", vec![0, 0]),
            Policy::constant_threshold("g", 0.5, 2),
            Policy::behavior("obs"),
        ] {
            let exact = oracle_capo(&spec, &p, 0, 0).unwrap();
            assert_eq!(exact.method, OracleMethod::Exhaustive);
            assert_eq!(exact.mc_std_error, 0.0);
            let mc = oracle_capo_mc(&spec, &p, 100_000, 17).unwrap();
            assert!(
                (exact.value - mc.value).abs() < 3.0 * mc.mc_std_error,
                "{}: {} vs {} +- {}",
                p.label,
                exact.value,
                mc.value,
                mc.mc_std_error
            );
        }
    }

    #[test]
    fn always_treat_by_hand() {
        // Independent hand enumeration of E[Y(1,1)].
        let t = &TINY_TABLES;
        let mut v = 0.0;
        for l1 in 0..2u8 {
            for l2 in 0..2u8 {
                v += bern_pmf(t.p_l1, l1) * bern_pmf(t.p_l2[2 * l1 as usize + 1], l2)
                    * t.p_y[8 * l1 as usize + 4 + 2 * l2 as usize + 1];
            }
        }
        let got = oracle_capo(&DgpSpec::tiny(0), &Policy::fixed("one", vec![1, 1]), 0, 0).unwrap();
        assert_eq!(got.value, v);
    }
}
