//! Trajectories, datasets, history views and deterministic policies.
//!
//! Time indices are 1-based throughout the public API: a trajectory of
//! length `tau` has covariates `L_1..L_tau` and actions `A_1..A_tau`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgp::{self, DgpSpec};
use crate::error::{Error, Result};

/// One observed unit `(L_1, A_1, ..., L_tau, A_tau, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    #[serde(rename = "L")]
    pub covariates: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub actions: Vec<u8>,
    #[serde(rename = "Y")]
    pub outcome: f64,
}

impl Trajectory {
    pub fn tau(&self) -> usize {
        self.actions.len()
    }

    /// `L_t`, 1-based.
    pub fn l(&self, t: usize) -> &[f64] {
        &self.covariates[t - 1]
    }

    /// `A_t`, 1-based; `A_0` is defined as 0.
    pub fn a(&self, t: usize) -> u8 {
        if t == 0 {
            0
        } else {
            self.actions[t - 1]
        }
    }

    pub fn history(&self, t: usize) -> Result<HistoryView<'_>> {
        HistoryView::new(self, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub tau: usize,
    pub d_l: usize,
    /// Observed `(min Y, max Y)`; `(0, 0)` for an empty dataset.
    pub outcome_bounds: (f64, f64),
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, tau: usize, d_l: usize) -> Result<Self> {
        if tau == 0 || d_l == 0 {
            return Err(Error::Shape(format!(
                "tau and d_L must be positive (tau={tau}, d_L={d_l})"
            )));
        }
        for tr in &trajectories {
            validate_trajectory(tr, tau, d_l)?;
        }
        let outcome_bounds = bounds(&trajectories);
        Ok(Dataset {
            trajectories,
            tau,
            d_l,
            outcome_bounds,
        })
    }

    pub fn empty(tau: usize, d_l: usize) -> Result<Self> {
        Dataset::new(Vec::new(), tau, d_l)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Sub-dataset built from the given unit indices (bounds are recomputed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let trajectories: Vec<Trajectory> =
            indices.iter().map(|&i| self.trajectories[i].clone()).collect();
        let outcome_bounds = bounds(&trajectories);
        Dataset {
            trajectories,
            tau: self.tau,
            d_l: self.d_l,
            outcome_bounds,
        }
    }

    /// Same dataset with every outcome shifted by `c`.
    pub fn shifted(&self, c: f64) -> Dataset {
        let mut out = self.clone();
        for tr in &mut out.trajectories {
            tr.outcome += c;
        }
        out.outcome_bounds = (self.outcome_bounds.0 + c, self.outcome_bounds.1 + c);
        out
    }
}

fn bounds(trajectories: &[Trajectory]) -> (f64, f64) {
    if trajectories.is_empty() {
        return (0.0, 0.0);
    }
    trajectories.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), tr| {
        (lo.min(tr.outcome), hi.max(tr.outcome))
    })
}

fn validate_trajectory(tr: &Trajectory, tau: usize, d_l: usize) -> Result<()> {
    if tr.actions.len() != tau {
        return Err(Error::Shape(format!(
            "trajectory {} has {} actions, expected tau={tau}",
            tr.id,
            tr.actions.len()
        )));
    }
    if tr.covariates.len() != tau {
        return Err(Error::Shape(format!(
            "trajectory {} has {} covariate vectors, expected tau={tau}",
            tr.id,
            tr.covariates.len()
        )));
    }
    if let Some(bad) = tr.covariates.iter().position(|l| l.len() != d_l) {
        return Err(Error::Shape(format!(
            "trajectory {} has L_{} of dimension {}, expected d_L={d_l}",
            tr.id,
            bad + 1,
            tr.covariates[bad].len()
        )));
    }
    if tr.actions.iter().any(|&a| a > 1) {
        return Err(Error::Shape(format!("trajectory {} has a non-binary action", tr.id)));
    }
    if !tr.outcome.is_finite() || tr.covariates.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("trajectory {} has non-finite values", tr.id)));
    }
    Ok(())
}

/// Reads newline-delimited trajectory records.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tr: Trajectory = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        let d_l = tr.covariates.first().map_or(0, Vec::len);
        let (tau, d_l) = *shape.get_or_insert((tr.actions.len(), d_l));
        validate_trajectory(&tr, tau, d_l).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        trajectories.push(tr);
    }
    let (tau, d_l) = shape.ok_or_else(|| {
        Error::Shape(format!("{} holds no trajectories; tau is undetermined", path.display()))
    })?;
    Dataset::new(trajectories, tau, d_l)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for tr in &ds.trajectories {
        let line = serde_json::to_string(tr).expect("trajectory serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// `H_t = (L_1, A_1, ..., L_{t-1}, A_{t-1}, L_t)` over a borrowed trajectory.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    traj: &'a Trajectory,
    t: usize,
}

impl<'a> HistoryView<'a> {
    pub fn new(traj: &'a Trajectory, t: usize) -> Result<Self> {
        if t == 0 || t > traj.tau() {
            return Err(Error::Index(format!("t={t} outside 1..={}", traj.tau())));
        }
        Ok(HistoryView { traj, t })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn tau(&self) -> usize {
        self.traj.tau()
    }

    pub fn covariate(&self, s: usize) -> Result<&'a [f64]> {
        if s == 0 || s > self.t {
            return Err(Error::FutureAccess {
                t: self.t,
                what: "L",
                index: s,
            });
        }
        Ok(&self.traj.covariates[s - 1])
    }

    /// `A_s` for `s < t`; `A_0 = 0`.
    pub fn action(&self, s: usize) -> Result<u8> {
        if s >= self.t {
            return Err(Error::FutureAccess {
                t: self.t,
                what: "A",
                index: s,
            });
        }
        Ok(self.traj.a(s))
    }

    /// Flattened `(L_1..L_t, A_1..A_{t-1})`, width `t*d_L + t - 1`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(feature_width(self.t, self.traj.covariates[0].len()));
        for s in 1..=self.t {
            out.extend_from_slice(self.traj.l(s));
        }
        for s in 1..self.t {
            out.push(self.traj.a(s) as f64);
        }
        out
    }
}

pub fn feature_width(t: usize, d_l: usize) -> usize {
    t * d_l + t - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Treat iff `sigmoid(score(H_t)) > gamma_t`, score from the generator.
    Threshold { gamma: Vec<f64> },
    FixedSequence { actions: Vec<u8> },
    /// The generator's own noisy assignment rule; only usable in rollouts.
    BehaviorStochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub label: String,
    #[serde(flatten)]
    pub kind: PolicyKind,
}

impl Policy {
    pub fn threshold(label: impl Into<String>, gamma: Vec<f64>) -> Self {
        Policy {
            label: label.into(),
            kind: PolicyKind::Threshold { gamma },
        }
    }

    pub fn constant_threshold(label: impl Into<String>, gamma: f64, tau: usize) -> Self {
        Policy::threshold(label, vec![gamma; tau])
    }

    pub fn fixed(label: impl Into<String>, actions: Vec<u8>) -> Self {
        Policy {
            label: label.into(),
            kind: PolicyKind::FixedSequence { actions },
        }
    }

    pub fn behavior(label: impl Into<String>) -> Self {
        Policy {
            label: label.into(),
            kind: PolicyKind::BehaviorStochastic,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.kind, PolicyKind::BehaviorStochastic)
    }

    pub fn validate(&self, tau: usize) -> Result<()> {
        match &self.kind {
            PolicyKind::Threshold { gamma } => {
                if gamma.len() != tau {
                    return Err(Error::Shape(format!(
                        "policy {} has {} thresholds, expected {tau}",
                        self.label,
                        gamma.len()
                    )));
                }
                if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
                    return Err(Error::Invalid(format!(
                        "policy {} has a threshold outside [0, 1]",
                        self.label
                    )));
                }
            }
            PolicyKind::FixedSequence { actions } => {
                if actions.len() != tau {
                    return Err(Error::Shape(format!(
                        "policy {} has {} actions, expected {tau}",
                        self.label,
                        actions.len()
                    )));
                }
                if actions.iter().any(|&a| a > 1) {
                    return Err(Error::Invalid(format!(
                        "policy {} has a non-binary action",
                        self.label
                    )));
                }
            }
            PolicyKind::BehaviorStochastic => {}
        }
        Ok(())
    }

    /// Deterministic decision at `t` given the generator score of `H_t`.
    pub fn decide(&self, t: usize, score: impl FnOnce() -> f64) -> Option<u8> {
        match &self.kind {
            PolicyKind::Threshold { gamma } => Some(u8::from(sigmoid(score()) > gamma[t - 1])),
            PolicyKind::FixedSequence { actions } => Some(actions[t - 1]),
            PolicyKind::BehaviorStochastic => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Actions one policy assigns to every observed history: `n x tau`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyActions {
    pub n: usize,
    pub tau: usize,
    data: Vec<u8>,
}

impl PolicyActions {
    /// Builds from row-major `n x tau` actions in `{0, 1}`.
    ///
    /// # Panics
    /// If `data.len() != n * tau` or an entry is not binary.
    pub fn from_rows(n: usize, tau: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), n * tau, "action rows must be n x tau");
        assert!(data.iter().all(|&a| a <= 1), "actions must be binary");
        PolicyActions { n, tau, data }
    }

    /// `a_t` for unit `i`, 1-based `t`.
    pub fn get(&self, i: usize, t: usize) -> u8 {
        self.data[i * self.tau + t - 1]
    }

    pub fn unit(&self, i: usize) -> &[u8] {
        &self.data[i * self.tau..(i + 1) * self.tau]
    }

    /// Rows for the given unit indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> PolicyActions {
        let data = indices.iter().flat_map(|&i| self.unit(i).iter().copied()).collect();
        PolicyActions {
            n: indices.len(),
            tau: self.tau,
            data,
        }
    }

    /// Column of actions at step `t` across units.
    pub fn at_step(&self, t: usize) -> Vec<u8> {
        (0..self.n).map(|i| self.get(i, t)).collect()
    }
}

/// `K x n x tau` counterfactual actions for a policy set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMatrix {
    pub rows: Vec<PolicyActions>,
}

impl ActionMatrix {
    pub fn build(policies: &[Policy], ds: &Dataset, spec: Option<&DgpSpec>) -> Result<Self> {
        let rows = policies
            .iter()
            .map(|p| apply_policy(p, ds, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(ActionMatrix { rows })
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, i: usize, t: usize) -> u8 {
        self.rows[k].get(i, t)
    }

    pub fn subset(&self, indices: &[usize]) -> ActionMatrix {
        ActionMatrix {
            rows: self.rows.iter().map(|r| r.subset(indices)).collect(),
        }
    }
}

/// Counterfactual actions `a_t = pi_t(H_t)` on the observed histories.
pub fn apply_policy(p: &Policy, ds: &Dataset, spec: Option<&DgpSpec>) -> Result<PolicyActions> {
    p.validate(ds.tau)?;
    let tau = ds.tau;
    let mut data = Vec::with_capacity(ds.len() * tau);
    match &p.kind {
        PolicyKind::FixedSequence { actions } => {
            for _ in &ds.trajectories {
                data.extend_from_slice(actions);
            }
        }
        PolicyKind::Threshold { gamma } => {
            let spec = spec.ok_or_else(|| {
                Error::MissingContext(format!(
                    "threshold policy {} needs the generator spec to score histories",
                    p.label
                ))
            })?;
            for tr in &ds.trajectories {
                let scores = dgp::history_scores(spec, tr)?;
                for t in 1..=tau {
                    data.push(u8::from(sigmoid(scores[t - 1]) > gamma[t - 1]));
                }
            }
        }
        PolicyKind::BehaviorStochastic => {
            return Err(Error::Invalid(format!(
                "policy {} is stochastic and has no deterministic action matrix",
                p.label
            )))
        }
    }
    Ok(PolicyActions {
        n: ds.len(),
        tau,
        data,
    })
}
