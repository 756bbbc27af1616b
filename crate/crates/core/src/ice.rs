//! Exact ICE G-computation on the tiny two-step generator: the vanilla
//! per-policy recursion and the reparameterized recursion in
//! which one shared regression table is indexed by the policy-tail embedding.
//! Both identify the same CAPO when the embedding is
//! injective; with oracle tables the two computations must agree exactly.

use std::collections::BTreeMap;

use crate::data::Policy;
use crate::dgp::TinyTables;
use crate::embed::PolicyEmbedding;
use crate::error::{Error, Result};

fn pmf(p: f64, x: u8) -> f64 {
    if x == 1 {
        p
    } else {
        1.0 - p
    }
}

fn act1(tables: &TinyTables, policy: &Policy, l1: u8) -> Result<u8> {
    policy
        .decide(1, || tables.score1(l1))
        .ok_or_else(|| Error::Invalid(format!("policy {} is not deterministic", policy.label)))
}

fn act2(tables: &TinyTables, policy: &Policy, l1: u8, a1: u8, l2: u8) -> Result<u8> {
    policy
        .decide(2, || tables.score2(l1, a1, l2))
        .ok_or_else(|| Error::Invalid(format!("policy {} is not deterministic", policy.label)))
}

/// Vanilla ICE for one policy:
/// `Q_2(a_2, H_2) = E[Y | H_2, a_2]`,
/// `Q_1(a_1, H_1) = E[Q_2(pi_2(H_2), H_2) | H_1, a_1]`,
/// `psi = E[Q_1(pi_1(H_1), H_1)]`.
pub fn vanilla_ice_tiny(tables: &TinyTables, policy: &Policy) -> Result<f64> {
    policy.validate(2)?;
    let q1 = |l1: u8, a1: u8| -> Result<f64> {
        let mut v = 0.0;
        for l2 in 0..2u8 {
            let a2 = act2(tables, policy, l1, a1, l2)?;
            v += pmf(tables.p_l2(l1, a1), l2) * tables.mean_y(l1, a1, l2, a2);
        }
        Ok(v)
    };
    let mut psi = 0.0;
    for l1 in 0..2u8 {
        psi += pmf(tables.p_l1, l1) * q1(l1, act1(tables, policy, l1)?)?;
    }
    Ok(psi)
}

/// Exact bit pattern of an embedding row, used as a table key.
fn key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Shared regression tables `Q~_t(a_t, H_t, rho_{t+1})` for all policies.
#[derive(Debug, Clone, Default)]
pub struct SharedQTable {
    /// `(l1, a1, l2, a2)` -> `Q~_2`; the tail after step 2 is empty.
    pub q2: BTreeMap<(u8, u8, u8, u8), f64>,
    /// `(l1, a1, rho_2 bits)` -> `Q~_1`.
    pub q1: BTreeMap<(u8, u8, Vec<u64>), f64>,
}

/// Reparameterized ICE: fills one table over all policies, where each
/// policy enters only through its embedding row `rho_2^(k)`, then reads each
/// CAPO back from that shared table. Two policies with the same row must
/// produce the same regression target, otherwise the embedding is not
/// injective on the policies' behaviour and an error is returned.
pub fn reparameterized_ice_tiny(tables: &TinyTables, policies: &[Policy], emb: &PolicyEmbedding) -> Result<(Vec<f64>, SharedQTable)> {
    if emb.tau() != 2 || emb.k() != policies.len() {
        return Err(Error::Shape(format!(
            "embedding covers {} policies over {} steps; expected {} over 2",
            emb.k(),
            emb.tau(),
            policies.len()
        )));
    }
    let mut table = SharedQTable::default();
    for l1 in 0..2u8 {
        for a1 in 0..2u8 {
            for l2 in 0..2u8 {
                for a2 in 0..2u8 {
                    table.q2.insert((l1, a1, l2, a2), tables.mean_y(l1, a1, l2, a2));
                }
            }
        }
    }
    for (k, p) in policies.iter().enumerate() {
        p.validate(2)?;
        let rho2 = key(&emb.rho[1][k]);
        for l1 in 0..2u8 {
            for a1 in 0..2u8 {
                let mut target = 0.0;
                for l2 in 0..2u8 {
                    let a2 = act2(tables, p, l1, a1, l2)?;
                    target += pmf(tables.p_l2(l1, a1), l2) * table.q2[&(l1, a1, l2, a2)];
                }
                match table.q1.get(&(l1, a1, rho2.clone())) {
                    Some(&prev) if prev != target => {
                        return Err(Error::Invalid(format!(
                            "embedding row of policy {} collides with a policy of different behaviour",
                            p.label
                        )))
                    }
                    _ => {
                        table.q1.insert((l1, a1, rho2.clone()), target);
                    }
                }
            }
        }
    }
    let mut psi = Vec::with_capacity(policies.len());
    for (k, p) in policies.iter().enumerate() {
        let rho2 = key(&emb.rho[1][k]);
        let mut v = 0.0;
        for l1 in 0..2u8 {
            let a1 = act1(tables, p, l1)?;
            v += pmf(tables.p_l1, l1) * table.q1[&(l1, a1, rho2.clone())];
        }
        psi.push(v);
    }
    Ok((psi, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ActionMatrix;
    use crate::dgp::{oracle_capo, simulate, DgpSpec, TINY_TABLES};
    use crate::embed::{embed_policies, KernelConfig, SmacofOptions};

    fn family() -> Vec<Policy> {
        vec![
            Policy::fixed("11", vec![1, 1]),
            Policy::fixed("00", vec![0, 0]),
            Policy::fixed("10", vec![1, 0]),
            Policy::constant_threshold("g0.5", 0.5, 2),
            Policy::constant_threshold("g0.42", 0.42, 2),
            Policy::threshold("g.5/.62", vec![0.5, 0.62]),
            // Same behaviour as "11" on every history: shares its rows.
            Policy::constant_threshold("g0", 0.0, 2),
        ]
    }

    #[test]
    fn vanilla_matches_enumeration() {
        let spec = DgpSpec::tiny(0);
        for p in family() {
            let exact = oracle_capo(&spec, &p, 0, 0).unwrap().value;
            assert!((vanilla_ice_tiny(&TINY_TABLES, &p).unwrap() - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn lemma_two_on_tiny() {
        let spec = DgpSpec::tiny(3);
        let ds = simulate(&spec, 400).unwrap();
        let ps = family();
        let am = ActionMatrix::build(&ps, &ds, Some(&spec)).unwrap();
        let emb = embed_policies(&ds, &am, &KernelConfig::default(), 2, &SmacofOptions::default()).unwrap();
        let (re, table) = reparameterized_ice_tiny(&TINY_TABLES, &ps, &emb).unwrap();
        for (p, r) in ps.iter().zip(&re) {
            assert!((vanilla_ice_tiny(&TINY_TABLES, p).unwrap() - r).abs() < 1e-10);
        }
        // The duplicate-behaviour pair shares table entries.
        assert_eq!(emb.rho[1][0], emb.rho[1][6]);
        assert!(table.q1.len() < 4 * ps.len());
    }

    #[test]
    fn collapsed_embedding_is_rejected() {
        let ps = family();
        let emb = PolicyEmbedding {
            rho: vec![vec![vec![0.0]; ps.len()]; 2],
            d: 1,
            stress: vec![0.0; 2],
            gamma: Vec::new(),
            distances: None,
        };
        assert!(reparameterized_ice_tiny(&TINY_TABLES, &ps, &emb).is_err());
    }
}
