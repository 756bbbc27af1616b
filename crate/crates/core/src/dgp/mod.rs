//! Semi-synthetic longitudinal generators and their ground-truth oracles.
//!
//! `Limited` and `Expanded` follow the lagged treatment/outcome equations
//! with a stationary AR(1) stand-in for the clinical covariates; `Tiny` is a
//! two-step binary world whose conditional expectations are enumerable.

mod semi;
mod tiny;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, HistoryView, Policy, PolicyKind, Trajectory};
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rng;

pub use semi::{outcome_weights, SemiState, StepNoise};
pub use tiny::{TinyTables, TINY_TABLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Limited,
    Expanded,
    Tiny,
}

/// Number of synthesized feedback covariates appended in the expanded variant.
pub const D_Z: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub variant: Variant,
    pub tau: usize,
    pub d_x: usize,
    pub lag: usize,
    pub noise_sd_a: f64,
    pub noise_sd_y: f64,
    pub noise_sd_z: f64,
    pub omega: [f64; 3],
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            variant: Variant::Limited,
            tau: 15,
            d_x: 10,
            lag: 8,
            noise_sd_a: 0.5,
            noise_sd_y: 0.5,
            noise_sd_z: 0.3,
            omega: [0.37, 0.42, 0.29],
            seed: 0,
        }
    }
}

impl DgpSpec {
    pub fn limited(tau: usize, seed: u64) -> Self {
        DgpSpec {
            tau,
            seed,
            ..DgpSpec::default()
        }
    }

    pub fn expanded(tau: usize, seed: u64) -> Self {
        DgpSpec {
            variant: Variant::Expanded,
            tau,
            seed,
            ..DgpSpec::default()
        }
    }

    pub fn tiny(seed: u64) -> Self {
        DgpSpec {
            variant: Variant::Tiny,
            tau: 2,
            d_x: 1,
            seed,
            ..DgpSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 2 {
            return Err(Error::Invalid(format!("tau must be >= 2, got {}", self.tau)));
        }
        if self.variant == Variant::Tiny {
            if self.tau != 2 {
                return Err(Error::Invalid("the tiny generator has tau = 2".into()));
            }
            return Ok(());
        }
        if self.d_x < 6 {
            return Err(Error::Invalid(format!("d_x must be >= 6, got {}", self.d_x)));
        }
        if self.lag == 0 {
            return Err(Error::Invalid("lag must be positive".into()));
        }
        for (name, sd) in [
            ("noise_sd_a", self.noise_sd_a),
            ("noise_sd_y", self.noise_sd_y),
            ("noise_sd_z", self.noise_sd_z),
        ] {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {sd}")));
            }
        }
        Ok(())
    }

    /// Dimension of the generator state `X_t` (with `Z_t` in the expanded variant).
    pub fn state_dim(&self) -> usize {
        match self.variant {
            Variant::Limited => self.d_x,
            Variant::Expanded => self.d_x + D_Z,
            Variant::Tiny => 1,
        }
    }

    /// Dimension of `L_t`: state plus the previous intermediate outcome.
    pub fn d_l(&self) -> usize {
        match self.variant {
            Variant::Tiny => 1,
            _ => self.state_dim() + 1,
        }
    }
}

/// Ground-truth value of a CAPO or CATE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub mc_std_error: f64,
    pub n_mc: usize,
    pub method: OracleMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    MonteCarlo,
    Exhaustive,
}

/// Simulates `n` observational trajectories under the behavior rule.
pub fn simulate(spec: &DgpSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let trajectories = par_map(n, |i| {
        let mut rng = rng::stream(spec.seed, i as u64);
        match spec.variant {
            Variant::Tiny => tiny::simulate_unit(&TINY_TABLES, &mut rng, None, i),
            _ => semi::simulate_unit(spec, &mut rng, None, i),
        }
    });
    Dataset::new(trajectories, spec.tau, spec.d_l())
}

pub fn simulate_limited(spec: &DgpSpec, n: usize) -> Result<Dataset> {
    expect_variant(spec, Variant::Limited)?;
    simulate(spec, n)
}

pub fn simulate_expanded(spec: &DgpSpec, n: usize) -> Result<Dataset> {
    expect_variant(spec, Variant::Expanded)?;
    simulate(spec, n)
}

pub fn simulate_tiny(spec: &DgpSpec, n: usize) -> Result<Dataset> {
    expect_variant(spec, Variant::Tiny)?;
    simulate(spec, n)
}

fn expect_variant(spec: &DgpSpec, v: Variant) -> Result<()> {
    if spec.variant != v {
        return Err(Error::Invalid(format!(
            "expected a {v:?} spec, got {:?}",
            spec.variant
        )));
    }
    Ok(())
}

/// Deterministic behavior score `s(H_t)` for every `t` of an observed trajectory.
///
/// The behavior rule treats iff `s(H_t) + noise > 0`; threshold policies treat
/// iff `sigmoid(s(H_t)) > gamma_t`.
pub fn history_scores(spec: &DgpSpec, traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.tau() != spec.tau {
        return Err(Error::Shape(format!(
            "trajectory has tau={}, generator has tau={}",
            traj.tau(),
            spec.tau
        )));
    }
    match spec.variant {
        Variant::Tiny => Ok((1..=2).map(|t| tiny::score(&TINY_TABLES, traj, t)).collect()),
        _ => {
            let state = SemiState::from_observed(spec, traj, spec.tau)?;
            Ok((1..=spec.tau).map(|t| state.score(spec, t)).collect())
        }
    }
}

pub fn behavior_score(spec: &DgpSpec, h: &HistoryView<'_>) -> Result<f64> {
    let t = h.t();
    let l: Vec<Vec<f64>> = (1..=t).map(|s| h.covariate(s).map(<[f64]>::to_vec)).collect::<Result<_>>()?;
    let a: Vec<u8> = (1..t).map(|s| h.action(s)).collect::<Result<_>>()?;
    match spec.variant {
        Variant::Tiny => Ok(tiny::score_from_parts(&TINY_TABLES, &l, &a)),
        _ => {
            let state = SemiState::from_parts(spec, &l, &a)?;
            Ok(state.score(spec, t))
        }
    }
}

/// `P(A_t = 1 | H_t)` under the behavior rule.
pub fn oracle_propensity(spec: &DgpSpec, h: &HistoryView<'_>) -> Result<f64> {
    let s = behavior_score(spec, h)?;
    Ok(match spec.variant {
        Variant::Tiny => crate::data::sigmoid(s),
        _ => normal_cdf(s / spec.noise_sd_a),
    })
}

pub fn normal_cdf(x: f64) -> f64 {
    use statrs::function::erf::erfc;
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Final outcomes of `n_mc` fresh rollouts forcing `policy` at every step.
///
/// Stream `i` drives rollout `i`, so two policies evaluated with the same
/// seed share common random numbers.
pub fn rollout_outcomes(spec: &DgpSpec, policy: &Policy, n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    policy.validate(spec.tau)?;
    Ok(par_map(n_mc, |i| {
        let mut rng = rng::stream(seed, i as u64);
        match spec.variant {
            Variant::Tiny => tiny::simulate_unit(&TINY_TABLES, &mut rng, Some(policy), i).outcome,
            _ => semi::simulate_unit(spec, &mut rng, Some(policy), i).outcome,
        }
    }))
}

/// Monte-Carlo CAPO regardless of variant.
pub fn oracle_capo_mc(spec: &DgpSpec, p: &Policy, n_mc: usize, seed: u64) -> Result<OracleResult> {
    if n_mc < 2 {
        return Err(Error::Invalid("n_mc must be >= 2".into()));
    }
    let ys = rollout_outcomes(spec, p, n_mc, seed)?;
    let (mean, sd) = mean_sd(&ys);
    Ok(OracleResult {
        value: mean,
        mc_std_error: sd / (n_mc as f64).sqrt(),
        n_mc,
        method: OracleMethod::MonteCarlo,
    })
}

/// True CAPO: exhaustive on the tiny variant, Monte-Carlo otherwise.
pub fn oracle_capo(spec: &DgpSpec, p: &Policy, n_mc: usize, seed: u64) -> Result<OracleResult> {
    if spec.variant == Variant::Tiny {
        spec.validate()?;
        p.validate(2)?;
        return Ok(OracleResult {
            value: tiny::exact_capo(&TINY_TABLES, p),
            mc_std_error: 0.0,
            n_mc: 0,
            method: OracleMethod::Exhaustive,
        });
    }
    oracle_capo_mc(spec, p, n_mc, seed)
}

/// True CATE `psi(p_i) - psi(p_j)` with common random numbers.
pub fn oracle_cate(spec: &DgpSpec, p_i: &Policy, p_j: &Policy, n_mc: usize, seed: u64) -> Result<OracleResult> {
    if spec.variant == Variant::Tiny {
        let a = oracle_capo(spec, p_i, n_mc, seed)?;
        let b = oracle_capo(spec, p_j, n_mc, seed)?;
        return Ok(OracleResult {
            value: a.value - b.value,
            ..a
        });
    }
    if n_mc < 2 {
        return Err(Error::Invalid("n_mc must be >= 2".into()));
    }
    let yi = rollout_outcomes(spec, p_i, n_mc, seed)?;
    let yj = rollout_outcomes(spec, p_j, n_mc, seed)?;
    let diff: Vec<f64> = yi.iter().zip(&yj).map(|(a, b)| a - b).collect();
    let (mean, sd) = mean_sd(&diff);
    Ok(OracleResult {
        value: mean,
        mc_std_error: sd / (n_mc as f64).sqrt(),
        n_mc,
        method: OracleMethod::MonteCarlo,
    })
}

/// `Q*_s(a_s, H_s)` under `policy` from `s+1` onward: the expected final outcome
/// after taking `a_s` at the observed history `H_s` of `traj`.
///
/// Exact on the tiny variant; otherwise the mean of `n_mc` resumed rollouts on
/// streams `(seed, r)`.
pub fn oracle_q(
    spec: &DgpSpec,
    traj: &Trajectory,
    s: usize,
    a_s: u8,
    policy: &Policy,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if s == 0 || s > spec.tau {
        return Err(Error::Index(format!("s={s} outside 1..={}", spec.tau)));
    }
    if spec.variant == Variant::Tiny {
        return Ok(tiny::exact_q(&TINY_TABLES, traj, s, a_s, policy));
    }
    if n_mc == 0 {
        return Err(Error::Invalid("n_mc must be positive".into()));
    }
    let prefix = SemiState::from_observed(spec, traj, s)?;
    let mut total = 0.0;
    for r in 0..n_mc {
        let mut rng = rng::stream(seed, r as u64);
        let mut state = prefix.clone();
        total += semi::resume(spec, &mut state, s, a_s, policy, &mut rng);
    }
    Ok(total / n_mc as f64)
}

pub(crate) fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Decision of a deterministic policy, or `None` for the behavior rule.
pub(crate) fn forced_action(policy: Option<&Policy>, t: usize, score: f64) -> Option<u8> {
    match policy {
        None => None,
        Some(p) => match p.kind {
            PolicyKind::BehaviorStochastic => None,
            _ => p.decide(t, || score),
        },
    }
}
