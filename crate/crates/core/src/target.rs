//! LTMLE targeting, CAPO/CATE inference with influence-function intervals,
//! and the second-order remainder diagnostics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{apply_policy, sigmoid, Dataset, Policy, PolicyActions};
use crate::dgp::{self, DgpSpec};
use crate::embed::trajectory_mmd_with;
use crate::error::{Error, Result};
use crate::net::bce_logit;
use crate::par::par_map;
use crate::rng;

/// Margin of the outcome map to `[delta, 1 - delta]`.
pub const OUTCOME_MARGIN: f64 = 0.005;
/// Scaled Q predictions are clamped into `[Q_FLOOR, 1 - Q_FLOOR]` before taking logits.
pub const Q_FLOOR: f64 = 1e-4;
/// Bound of the fluctuation search interval `[-EPS_BOUND, EPS_BOUND]`.
pub const EPS_BOUND: f64 = 5.0;
/// Golden-section tolerance on epsilon.
pub const EPS_TOL: f64 = 1e-8;
const GRID_POINTS: usize = 21;

/// Affine map of outcomes onto `[delta, 1 - delta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScale {
    pub y_min: f64,
    pub y_max: f64,
    pub margin: f64,
}

impl OutcomeScale {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_max > y_min) || !y_min.is_finite() || !y_max.is_finite() {
            return Err(Error::DegenerateBounds(y_min));
        }
        Ok(OutcomeScale {
            y_min,
            y_max,
            margin: OUTCOME_MARGIN,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        OutcomeScale::new(ds.outcome_bounds.0, ds.outcome_bounds.1)
    }

    /// Multiplier taking scaled differences back to the original scale.
    pub fn factor(&self) -> f64 {
        (self.y_max - self.y_min) / (1.0 - 2.0 * self.margin)
    }

    pub fn scale(&self, y: f64) -> f64 {
        self.margin + (y - self.y_min) / self.factor()
    }

    pub fn unscale(&self, v: f64) -> f64 {
        self.y_min + (v - self.margin) * self.factor()
    }
}

/// Per-unit nuisance predictions for one policy on the original outcome
/// scale, indexed `[unit][t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNuisance {
    /// `Q_t(A_t, H_t)` at the observed action.
    pub q_obs: Vec<Vec<f64>>,
    /// `Q_t(a_t, H_t)` at the policy's action.
    pub q_cf: Vec<Vec<f64>>,
    /// `G_t(H_t) = P(A_t = 1 | H_t)`.
    pub g: Vec<Vec<f64>>,
}

impl PolicyNuisance {
    fn check(&self, n: usize, tau: usize) -> Result<()> {
        let ok = |v: &Vec<Vec<f64>>| v.len() == n && v.iter().all(|r| r.len() == tau);
        if ok(&self.q_obs) && ok(&self.q_cf) && ok(&self.g) {
            Ok(())
        } else {
            Err(Error::Shape(format!("nuisance predictions do not cover {n} units x {tau} steps")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    /// L1 penalty on each fluctuation coefficient.
    pub lambda: f64,
    /// Truncation bounds for the estimated propensity of the policy action.
    pub clip: (f64, f64),
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            lambda: 0.01,
            clip: (0.01, 0.99),
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clip;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Invalid(format!("weight clip must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One fluctuation step: `min_eps mean_i w_i BCE(sigmoid(offset_i + eps), y_i) + lambda |eps|`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationProblem {
    pub offset: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl FluctuationProblem {
    fn n(&self) -> f64 {
        self.offset.len() as f64
    }

    /// Smooth part of the objective (no penalty).
    pub fn loss(&self, eps: f64) -> f64 {
        let mut s = 0.0;
        for ((&o, &y), &w) in self.offset.iter().zip(&self.target).zip(&self.weight) {
            if w != 0.0 {
                s += w * bce_logit(o + eps, y);
            }
        }
        s / self.n()
    }

    pub fn objective(&self, eps: f64, lambda: f64) -> f64 {
        self.loss(eps) + lambda * eps.abs()
    }

    /// Weighted residual mean `P_n w (y - sigmoid(offset + eps))`; the negated
    /// derivative of the smooth loss.
    pub fn residual(&self, eps: f64) -> f64 {
        let mut s = 0.0;
        for ((&o, &y), &w) in self.offset.iter().zip(&self.target).zip(&self.weight) {
            if w != 0.0 {
                s += w * (y - sigmoid(o + eps));
            }
        }
        s / self.n()
    }

    fn curvature(&self, eps: f64) -> f64 {
        let mut s = 0.0;
        for (&o, &w) in self.offset.iter().zip(&self.weight) {
            if w != 0.0 {
                let p = sigmoid(o + eps);
                s += w * p * (1.0 - p);
            }
        }
        s / self.n()
    }

    /// Minimizer over `[-EPS_BOUND, EPS_BOUND]`.
    ///
    /// Zero is returned when the subgradient condition holds there. Otherwise a
    /// 21-point grid brackets the minimum, golden-section search refines it to
    /// `EPS_TOL`, and safeguarded Newton steps polish the stationarity condition
    /// (the smooth part is convex, so the polish stays inside the bracket).
    pub fn solve(&self, lambda: f64) -> f64 {
        let g0 = -self.residual(0.0);
        if g0.abs() <= lambda {
            return 0.0;
        }
        let f = |e: f64| self.objective(e, lambda);
        let step = 2.0 * EPS_BOUND / (GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..GRID_POINTS).map(|i| -EPS_BOUND + step * i as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&e| f(e)).collect();
        let mut best = 0;
        for i in 1..GRID_POINTS {
            if vals[i] < vals[best] {
                best = i;
            }
        }
        let mut lo = grid[best.saturating_sub(1)];
        let mut hi = grid[(best + 1).min(GRID_POINTS - 1)];
        let (blo, bhi) = (lo, hi);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while hi - lo > EPS_TOL {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = f(x2);
            }
        }
        let mut eps = 0.5 * (lo + hi);
        // Golden section resolves the minimizer only to about the square root
        // of the objective's rounding error; Newton on the stationarity
        // condition (convex smooth part, penalty smooth away from zero) polishes
        // it inside the grid bracket, never crossing zero when penalized.
        if eps != 0.0 {
            let sign = eps.signum();
            for _ in 0..20 {
                let grad = -self.residual(eps) + lambda * sign;
                let curv = self.curvature(eps);
                if !(curv > 0.0) {
                    break;
                }
                let next = eps - grad / curv;
                if !(next >= blo && next <= bhi) || (lambda > 0.0 && next.signum() != sign) {
                    break;
                }
                if (next - eps).abs() < 1e-15 {
                    eps = next;
                    break;
                }
                eps = next;
            }
        }
        eps.clamp(-EPS_BOUND, EPS_BOUND)
    }
}

/// Targeted estimate for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEstimate {
    pub label: String,
    /// Targeted CAPO on the original outcome scale.
    pub psi_hat: f64,
    /// Plug-in (untargeted) CAPO: mean of `Q_1(a_1, H_1)`.
    pub psi_plugin: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// `epsilon[t-1]` for `t = 1..=tau`.
    pub epsilon: Vec<f64>,
    /// Per-unit influence values on the scaled outcome.
    pub ic: Vec<f64>,
    /// Clever weights `w[unit][t-1]`.
    pub weights: Vec<Vec<f64>>,
    /// Weighted residual mean at each step after the fluctuation.
    pub score: Vec<f64>,
}

/// Contrast `psi_i - psi_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub label_i: String,
    pub label_j: String,
    pub cate: f64,
    pub cate_plugin: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub ic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub policies: Vec<PolicyEstimate>,
    /// All pairs `i < j`.
    pub pairs: Vec<PairEstimate>,
    pub scale: OutcomeScale,
    pub config: TargetConfig,
}

fn sd_of(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Clever weights `w_t = prod_{s<=t} 1(A_s = a_s) / eta_s` with the estimated
/// propensity of the policy action clipped to `clip`.
pub fn clever_weights(ds: &Dataset, actions: &PolicyActions, g: &[Vec<f64>], clip: (f64, f64)) -> Vec<Vec<f64>> {
    ds.trajectories
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut w = 1.0;
            (1..=ds.tau)
                .map(|t| {
                    let a = actions.get(i, t);
                    if w != 0.0 {
                        if tr.a(t) != a {
                            w = 0.0;
                        } else {
                            let p = g[i][t - 1];
                            let eta = if a == 1 { p } else { 1.0 - p };
                            w /= eta.clamp(clip.0, clip.1);
                        }
                    }
                    w
                })
                .collect()
        })
        .collect()
}

/// Sequential LTMLE targeting for one policy.
pub fn ltmle(
    ds: &Dataset,
    label: &str,
    actions: &PolicyActions,
    nu: &PolicyNuisance,
    scale: &OutcomeScale,
    cfg: &TargetConfig,
) -> Result<PolicyEstimate> {
    cfg.validate()?;
    let n = ds.len();
    let tau = ds.tau;
    if n == 0 {
        return Err(Error::Invalid("cannot target on an empty dataset".into()));
    }
    if actions.n != n || actions.tau != tau {
        return Err(Error::Shape("policy actions do not match the evaluation data".into()));
    }
    nu.check(n, tau)?;
    let lq = |q: f64| logit(scale.scale(q).clamp(Q_FLOOR, 1.0 - Q_FLOOR));
    let off_obs: Vec<Vec<f64>> = nu.q_obs.iter().map(|r| r.iter().map(|&q| lq(q)).collect()).collect();
    let off_cf: Vec<Vec<f64>> = nu.q_cf.iter().map(|r| r.iter().map(|&q| lq(q)).collect()).collect();
    let weights = clever_weights(ds, actions, &nu.g, cfg.clip);

    let mut epsilon = vec![0.0; tau];
    let mut score = vec![0.0; tau];
    // Targeted Q_{t+1, eps}(a_{t+1}, H_{t+1}); at tau it is the scaled outcome.
    let mut next: Vec<f64> = ds.trajectories.iter().map(|tr| scale.scale(tr.outcome)).collect();
    let mut upd_obs = vec![vec![0.0; tau]; n];
    let mut next_by_t = vec![vec![0.0; tau]; n];
    for t in (1..=tau).rev() {
        let prob = FluctuationProblem {
            offset: off_obs.iter().map(|r| r[t - 1]).collect(),
            target: next.clone(),
            weight: weights.iter().map(|w| w[t - 1]).collect(),
        };
        if prob.weight.iter().all(|&w| w == 0.0) {
            return Err(Error::DegenerateSupport { t });
        }
        let eps = prob.solve(cfg.lambda);
        epsilon[t - 1] = eps;
        score[t - 1] = prob.residual(eps);
        for i in 0..n {
            next_by_t[i][t - 1] = next[i];
            upd_obs[i][t - 1] = sigmoid(off_obs[i][t - 1] + eps);
        }
        next = (0..n).map(|i| sigmoid(off_cf[i][t - 1] + eps)).collect();
    }
    let psi_scaled = next.iter().sum::<f64>() / n as f64;
    let ic: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = next[i] - psi_scaled;
            for t in 0..tau {
                let w = weights[i][t];
                if w != 0.0 {
                    v += w * (next_by_t[i][t] - upd_obs[i][t]);
                }
            }
            v
        })
        .collect();
    let se = sd_of(&ic) / (n as f64).sqrt() * scale.factor();
    let psi_hat = scale.unscale(psi_scaled);
    let psi_plugin = nu.q_cf.iter().map(|r| r[0]).sum::<f64>() / n as f64;
    Ok(PolicyEstimate {
        label: label.to_string(),
        psi_hat,
        psi_plugin,
        se,
        ci: (psi_hat - 1.96 * se, psi_hat + 1.96 * se),
        epsilon,
        ic,
        weights,
        score,
    })
}

/// Contrast of two targeted estimates with influence values `IC_i - IC_j`.
pub fn contrast(a: &PolicyEstimate, b: &PolicyEstimate, scale: &OutcomeScale) -> PairEstimate {
    let ic: Vec<f64> = a.ic.iter().zip(&b.ic).map(|(x, y)| x - y).collect();
    let se = sd_of(&ic) / (ic.len() as f64).sqrt() * scale.factor();
    let cate = a.psi_hat - b.psi_hat;
    PairEstimate {
        label_i: a.label.clone(),
        label_j: b.label.clone(),
        cate,
        cate_plugin: a.psi_plugin - b.psi_plugin,
        se,
        ci: (cate - 1.96 * se, cate + 1.96 * se),
        ic,
    }
}

/// LTMLE per policy, then every pairwise contrast.
pub fn estimate_all(
    ds: &Dataset,
    policies: &[Policy],
    actions: &[&PolicyActions],
    nuisances: &[PolicyNuisance],
    scale: &OutcomeScale,
    cfg: &TargetConfig,
) -> Result<EstimateReport> {
    if policies.len() != actions.len() || policies.len() != nuisances.len() {
        return Err(Error::Shape(format!(
            "{} policies, {} action rows, {} nuisance sets",
            policies.len(),
            actions.len(),
            nuisances.len()
        )));
    }
    let est: Vec<Result<PolicyEstimate>> = par_map(policies.len(), |k| {
        ltmle(ds, &policies[k].label, actions[k], &nuisances[k], scale, cfg)
    });
    let est: Vec<PolicyEstimate> = est.into_iter().collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..est.len() {
        for j in i + 1..est.len() {
            pairs.push(contrast(&est[i], &est[j], scale));
        }
    }
    Ok(EstimateReport {
        policies: est,
        pairs,
        scale: *scale,
        config: *cfg,
    })
}

impl EstimateReport {
    pub fn policy(&self, label: &str) -> Option<&PolicyEstimate> {
        self.policies.iter().find(|p| p.label == label)
    }

    /// Contrast `label_i - label_j` (either order).
    pub fn cate(&self, label_i: &str, label_j: &str) -> Option<PairEstimate> {
        let a = self.policy(label_i)?;
        let b = self.policy(label_j)?;
        Some(contrast(a, b, &self.scale))
    }

    /// CSV `(label, psi_hat, se, ci_lo, ci_hi, epsilon_1..epsilon_tau)`; pair
    /// rows are labelled `i-j` and leave the epsilon columns empty.
    pub fn to_csv(&self) -> String {
        let tau = self.policies.first().map_or(0, |p| p.epsilon.len());
        let mut out = String::from("label,psi_hat,se,ci_lo,ci_hi");
        for t in 1..=tau {
            out.push_str(&format!(",epsilon_{t}"));
        }
        out.push('\n');
        for p in &self.policies {
            out.push_str(&format!("{},{},{},{},{}", p.label, p.psi_hat, p.se, p.ci.0, p.ci.1));
            for e in &p.epsilon {
                out.push_str(&format!(",{e}"));
            }
            out.push('\n');
        }
        for q in &self.pairs {
            out.push_str(&format!("{}-{},{},{},{},{}", q.label_i, q.label_j, q.cate, q.se, q.ci.0, q.ci.1));
            out.push_str(&",".repeat(tau));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Second-order remainder decomposition for one pair, per step `s = 1..tau-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderDiagnostic {
    pub label_i: String,
    pub label_j: String,
    pub term1: Vec<f64>,
    pub term2: Vec<f64>,
    pub term3: Vec<f64>,
    pub traj_mmd: f64,
}

impl RemainderDiagnostic {
    /// `Rem^{(i),(j)}`: the three terms summed over all steps.
    pub fn total(&self) -> f64 {
        self.term1.iter().chain(&self.term2).chain(&self.term3).sum()
    }
}

/// Nuisances from the generator itself: true propensities and oracle
/// `Q*_t` (exact on the tiny generator, `n_mc` rollouts otherwise), each Q
/// shifted by `q_shift` to emulate a biased outcome model.
pub fn oracle_nuisance(
    spec: &DgpSpec,
    ds: &Dataset,
    policy: &Policy,
    q_shift: f64,
    n_mc: usize,
    seed: u64,
) -> Result<(PolicyActions, PolicyNuisance)> {
    let acts = apply_policy(policy, ds, Some(spec))?;
    let tau = ds.tau;
    let rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = par_map(ds.len(), |i| {
        let tr = &ds.trajectories[i];
        let mut q_obs = Vec::with_capacity(tau);
        let mut q_cf = Vec::with_capacity(tau);
        let mut g = Vec::with_capacity(tau);
        for t in 1..=tau {
            let s = rng::derive_seed(seed, (i * tau + t) as u64);
            q_obs.push(dgp::oracle_q(spec, tr, t, tr.a(t), policy, n_mc, s)? + q_shift);
            q_cf.push(dgp::oracle_q(spec, tr, t, acts.get(i, t), policy, n_mc, s)? + q_shift);
            g.push(dgp::oracle_propensity(spec, &tr.history(t)?)?);
        }
        Ok((q_obs, q_cf, g))
    });
    let mut nu = PolicyNuisance {
        q_obs: Vec::with_capacity(ds.len()),
        q_cf: Vec::with_capacity(ds.len()),
        g: Vec::with_capacity(ds.len()),
    };
    for r in rows {
        let (a, b, c) = r?;
        nu.q_obs.push(a);
        nu.q_cf.push(b);
        nu.g.push(c);
    }
    Ok((acts, nu))
}

/// Default largest horizon the nested Monte-Carlo `Q*` oracle is run for.
pub const DIAGNOSTIC_MAX_TAU: usize = 4;

/// Budget of the remainder diagnostic's Monte-Carlo `Q*` oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticConfig {
    /// Rollouts per `(unit, step)` evaluation of `Q*`.
    pub n_mc: usize,
    /// Seed of the rollouts (shared across policies: common random numbers).
    pub seed: u64,
    /// Horizons above this are refused with `Error::OracleBudget`.
    pub max_tau: usize,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            n_mc: 200,
            seed: 0,
            max_tau: DIAGNOSTIC_MAX_TAU,
        }
    }
}

/// Oracle outcome regressions `Q*_s(A_s, H_s)` for one policy, `[unit][s-1]`
/// for `s = 1..tau-1`; only units with `needed[unit][s-1]` are evaluated.
///
/// Rollouts for `(unit, s)` use seed `derive_seed(seed, unit * tau + s)` for
/// every policy, so contrasts share common random numbers.
fn oracle_q_table(
    spec: &DgpSpec,
    ds: &Dataset,
    policy: &Policy,
    needed: &[Vec<bool>],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let tau = ds.tau;
    let rows: Vec<Result<Vec<f64>>> = par_map(ds.len(), |i| {
        let tr = &ds.trajectories[i];
        (1..tau)
            .map(|s| {
                if needed[i][s - 1] {
                    dgp::oracle_q(spec, tr, s, tr.a(s), policy, n_mc, rng::derive_seed(seed, (i * tau + s) as u64))
                } else {
                    Ok(0.0)
                }
            })
            .collect()
    });
    rows.into_iter().collect()
}

/// Inputs of one side of a remainder contrast.
pub struct DiagnosticSide<'a> {
    pub policy: &'a Policy,
    pub actions: &'a PolicyActions,
    pub nuisance: &'a PolicyNuisance,
}

/// Plug-in estimates of Terms I-III with the true propensity
/// `eta*` and Monte-Carlo `Q*`, both evaluated at the observed action.
///
/// Terms use `R_s = W_s xi_G xi_Q` as in the decomposition; propensities
/// (true and estimated) are clipped to `cfg.clip` so every weight is finite.
pub fn remainder_diagnostic(
    spec: &DgpSpec,
    ds: &Dataset,
    side_i: &DiagnosticSide<'_>,
    side_j: &DiagnosticSide<'_>,
    gammas: &[f64],
    cfg: &TargetConfig,
    diag: &DiagnosticConfig,
) -> Result<RemainderDiagnostic> {
    cfg.validate()?;
    let tau = ds.tau;
    if tau > diag.max_tau {
        return Err(Error::OracleBudget(format!(
            "remainder diagnostics need tau <= {}, got {tau}",
            diag.max_tau
        )));
    }
    if diag.n_mc == 0 && spec.variant != dgp::Variant::Tiny {
        return Err(Error::Invalid("diagnostic n_mc must be positive".into()));
    }
    let (n_mc, seed) = (diag.n_mc, diag.seed);
    let n = ds.len();
    side_i.nuisance.check(n, tau)?;
    side_j.nuisance.check(n, tau)?;
    let clip = |p: f64| p.clamp(cfg.clip.0, cfg.clip.1);
    // eta*_s and the estimated density of the observed action, [unit][s-1].
    let mut eta_star = vec![vec![0.0; tau]; n];
    for (i, tr) in ds.trajectories.iter().enumerate() {
        for t in 1..=tau {
            let p = dgp::oracle_propensity(spec, &tr.history(t)?)?;
            eta_star[i][t - 1] = clip(if tr.a(t) == 1 { p } else { 1.0 - p });
        }
    }
    let eta_hat = |nu: &PolicyNuisance| -> Vec<Vec<f64>> {
        ds.trajectories
            .iter()
            .enumerate()
            .map(|(i, tr)| {
                (1..=tau)
                    .map(|t| {
                        let p = nu.g[i][t - 1];
                        clip(if tr.a(t) == 1 { p } else { 1.0 - p })
                    })
                    .collect()
            })
            .collect()
    };
    let eh_i = eta_hat(side_i.nuisance);
    let eh_j = eta_hat(side_j.nuisance);
    let weights = |acts: &PolicyActions, eh: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut c = 1.0;
                (1..tau)
                    .map(|s| {
                        if ds.trajectories[i].a(s) != acts.get(i, s) {
                            c = 0.0;
                        }
                        if c != 0.0 {
                            c /= eh[i][s - 1];
                        }
                        c / eta_star[i][s - 1]
                    })
                    .collect()
            })
            .collect()
    };
    let w_i = weights(side_i.actions, &eh_i);
    let w_j = weights(side_j.actions, &eh_j);
    let needed: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..tau - 1).map(|s| w_i[i][s] != 0.0 || w_j[i][s] != 0.0).collect())
        .collect();
    let qs_i = oracle_q_table(spec, ds, side_i.policy, &needed, n_mc, seed)?;
    let qs_j = if side_i.actions == side_j.actions && side_i.policy.kind == side_j.policy.kind {
        qs_i.clone()
    } else {
        oracle_q_table(spec, ds, side_j.policy, &needed, n_mc, seed)?
    };
    let mut term1 = vec![0.0; tau - 1];
    let mut term2 = vec![0.0; tau - 1];
    let mut term3 = vec![0.0; tau - 1];
    for i in 0..n {
        for s in 0..tau - 1 {
            if !needed[i][s] {
                continue;
            }
            let xg_i = eh_i[i][s] - eta_star[i][s];
            let xg_j = eh_j[i][s] - eta_star[i][s];
            let xq_i = side_i.nuisance.q_obs[i][s] - qs_i[i][s];
            let xq_j = side_j.nuisance.q_obs[i][s] - qs_j[i][s];
            term1[s] += (w_i[i][s] - w_j[i][s]) * xg_i * xq_i;
            term2[s] += w_j[i][s] * xq_i * (xg_i - xg_j);
            term3[s] += w_j[i][s] * xg_j * (xq_i - xq_j);
        }
    }
    for v in term1.iter_mut().chain(term2.iter_mut()).chain(term3.iter_mut()) {
        *v /= n as f64;
    }
    let traj_mmd = trajectory_mmd_with(ds, side_i.actions, side_j.actions, gammas)?;
    Ok(RemainderDiagnostic {
        label_i: side_i.policy.label.clone(),
        label_j: side_j.policy.label.clone(),
        term1,
        term2,
        term3,
        traj_mmd,
    })
}

/// Diagnostics CSV `(pair, t, term1, term2, term3, traj_mmd)`.
pub fn diagnostics_csv(diags: &[RemainderDiagnostic]) -> String {
    let mut out = String::from("pair,t,term1,term2,term3,traj_mmd\n");
    for d in diags {
        for s in 0..d.term1.len() {
            out.push_str(&format!(
                "{}-{},{},{},{},{},{}\n",
                d.label_i,
                d.label_j,
                s + 1,
                d.term1[s],
                d.term2[s],
                d.term3[s],
                d.traj_mmd
            ));
        }
    }
    out
}
