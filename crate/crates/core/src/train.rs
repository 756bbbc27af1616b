//! Joint multi-policy ICE training (PEQ), the separate
//! per-policy baseline, factual-loss model selection, and nuisance prediction.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, ActionMatrix, Dataset, Policy, Trajectory};
use crate::embed::PolicyEmbedding;
use crate::error::{Error, Result};
use crate::net::{bce_logit, polyak_update, Arch, Checkpoint, ModelParams, TailTrace};
use crate::rng;
use crate::target::PolicyNuisance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub layers: usize,
    pub tail_hidden: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            hidden: 16,
            dropout: 0.0,
            layers: 1,
            tail_hidden: 8,
            beta: 0.005,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Invalid(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// The Table C.1 search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    pub layers: Vec<usize>,
    pub tail_hidden: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            batch_size: vec![128, 256],
            learning_rate: vec![5e-4, 1e-3, 5e-3],
            hidden: vec![8, 16, 32],
            dropout: vec![0.0, 0.1],
            layers: vec![1, 2, 3],
            tail_hidden: vec![8, 16],
        }
    }
}

impl HyperGrid {
    /// A grid holding exactly the values of `cfg`.
    pub fn single(cfg: &TrainConfig) -> Self {
        HyperGrid {
            batch_size: vec![cfg.batch_size],
            learning_rate: vec![cfg.learning_rate],
            hidden: vec![cfg.hidden],
            dropout: vec![cfg.dropout],
            layers: vec![cfg.layers],
            tail_hidden: vec![cfg.tail_hidden],
        }
    }

    fn is_empty(&self) -> bool {
        self.batch_size.is_empty()
            || self.learning_rate.is_empty()
            || self.hidden.is_empty()
            || self.dropout.is_empty()
            || self.layers.is_empty()
            || self.tail_hidden.is_empty()
    }

    /// Uniform draw of one grid point; epochs, beta and seed come from `base`.
    pub fn draw(&self, base: &TrainConfig, rng: &mut rng::Rng) -> TrainConfig {
        fn pick<T: Copy>(v: &[T], rng: &mut rng::Rng) -> T {
            v[rng.gen_range(0..v.len())]
        }
        TrainConfig {
            batch_size: pick(&self.batch_size, rng),
            learning_rate: pick(&self.learning_rate, rng),
            hidden: pick(&self.hidden, rng),
            dropout: pick(&self.dropout, rng),
            layers: pick(&self.layers, rng),
            tail_hidden: pick(&self.tail_hidden, rng),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    JointPeq,
    Separate,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::JointPeq => "joint_peq",
            Mode::Separate => "separate",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint_peq" | "joint" => Ok(Mode::JointPeq),
            "separate" | "separate_per_policy" => Ok(Mode::Separate),
            other => Err(Error::Invalid(format!("unknown mode {other:?}; expected joint_peq or separate"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Q,
    G,
}

/// One training-log record: epoch-mean loss component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub t: usize,
    pub policy_label: String,
    pub loss_kind: LossKind,
    pub value: f64,
}

/// Fitted nuisance models for a policy set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEstimator {
    pub mode: Mode,
    pub policies: Vec<Policy>,
    pub embedding: PolicyEmbedding,
    /// One model in joint mode; one per policy in separate mode.
    pub models: Vec<ModelParams>,
    pub log: Vec<LogRow>,
    pub config: TrainConfig,
}

/// Label used for G-loss rows of a joint model (shared by all policies).
pub const SHARED_LABEL: &str = "*";

/// One shared network for all policies, conditioned on their tails.
pub fn train_peq(
    ds: &Dataset,
    policies: &[Policy],
    actions: &ActionMatrix,
    embedding: &PolicyEmbedding,
    cfg: &TrainConfig,
) -> Result<TrainedEstimator> {
    check_inputs(ds, policies, actions, embedding)?;
    let labels: Vec<String> = policies.iter().map(|p| p.label.clone()).collect();
    let (model, log) = fit(ds, actions, embedding, cfg, &labels, SHARED_LABEL)?;
    Ok(TrainedEstimator {
        mode: Mode::JointPeq,
        policies: policies.to_vec(),
        embedding: embedding.clone(),
        models: vec![model],
        log,
        config: cfg.clone(),
    })
}

/// Separate-estimation baseline: an independent network per policy.
///
/// Each network sees only its own policy, so its tail input is the K = 1
/// zero embedding; policy `k` is initialized from `derive_seed(cfg.seed, k)`.
pub fn train_separate(
    ds: &Dataset,
    policies: &[Policy],
    actions: &ActionMatrix,
    cfg: &TrainConfig,
) -> Result<TrainedEstimator> {
    let embedding = zero_embedding(policies.len(), ds.tau);
    check_inputs(ds, policies, actions, &embedding)?;
    let mut models = Vec::with_capacity(policies.len());
    let mut log = Vec::new();
    for (k, p) in policies.iter().enumerate() {
        let one = ActionMatrix {
            rows: vec![actions.rows[k].clone()],
        };
        let c = TrainConfig {
            seed: rng::derive_seed(cfg.seed, k as u64),
            ..cfg.clone()
        };
        let (m, l) = fit(ds, &one, &zero_embedding(1, ds.tau), &c, &[p.label.clone()], &p.label)?;
        models.push(m);
        log.extend(l);
    }
    Ok(TrainedEstimator {
        mode: Mode::Separate,
        policies: policies.to_vec(),
        embedding,
        models,
        log,
        config: cfg.clone(),
    })
}

/// Convenience dispatch on `mode`.
pub fn train(
    mode: Mode,
    ds: &Dataset,
    policies: &[Policy],
    actions: &ActionMatrix,
    embedding: &PolicyEmbedding,
    cfg: &TrainConfig,
) -> Result<TrainedEstimator> {
    match mode {
        Mode::JointPeq => train_peq(ds, policies, actions, embedding, cfg),
        Mode::Separate => train_separate(ds, policies, actions, cfg),
    }
}

/// `K` policies embedded at the origin with `d = 1`.
pub fn zero_embedding(k: usize, tau: usize) -> PolicyEmbedding {
    PolicyEmbedding {
        rho: vec![vec![vec![0.0]; k]; tau],
        d: 1,
        stress: vec![0.0; tau],
        gamma: Vec::new(),
        distances: None,
    }
}

fn check_inputs(ds: &Dataset, policies: &[Policy], actions: &ActionMatrix, emb: &PolicyEmbedding) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if policies.is_empty() {
        return Err(Error::Invalid("no policies to train for".into()));
    }
    if actions.k() != policies.len() || emb.k() != policies.len() {
        return Err(Error::Shape(format!(
            "{} policies, {} action rows, {} embedded policies",
            policies.len(),
            actions.k(),
            emb.k()
        )));
    }
    if emb.tau() != ds.tau {
        return Err(Error::Shape(format!("embedding covers {} steps, data has tau={}", emb.tau(), ds.tau)));
    }
    if actions.rows.iter().any(|r| r.n != ds.len() || r.tau != ds.tau) {
        return Err(Error::Shape("action matrix does not match the dataset".into()));
    }
    Ok(())
}

fn tail_traces(m: &ModelParams, emb: &PolicyEmbedding) -> Result<Vec<TailTrace>> {
    (0..emb.k())
        .map(|k| {
            let rows: Vec<&[f64]> = emb.rho.iter().map(|step| step[k].as_slice()).collect();
            m.encode_tail_trace(&rows)
        })
        .collect()
}

fn outcome_moments(ds: &Dataset) -> (f64, f64) {
    let n = ds.len() as f64;
    let mean = ds.trajectories.iter().map(|t| t.outcome).sum::<f64>() / n;
    let var = ds.trajectories.iter().map(|t| (t.outcome - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Standardized pseudo-outcomes from the target network: `targets[k][t-1]`.
fn pseudo_outcomes(
    target: &ModelParams,
    tails: &[TailTrace],
    traj: &Trajectory,
    unit: usize,
    actions: &ActionMatrix,
) -> Vec<Vec<f64>> {
    let tau = traj.tau();
    let hist = target.encode_history(traj, tau);
    let y = target.standardize(traj.outcome);
    tails
        .iter()
        .enumerate()
        .map(|(k, tail)| {
            (1..=tau)
                .map(|t| {
                    if t == tau {
                        y
                    } else {
                        target.q_raw(hist.h(t + 1), actions.get(k, unit, t + 1), tail.e(t + 2))
                    }
                })
                .collect()
        })
        .collect()
}

fn fit(
    ds: &Dataset,
    actions: &ActionMatrix,
    emb: &PolicyEmbedding,
    cfg: &TrainConfig,
    labels: &[String],
    g_label: &str,
) -> Result<(ModelParams, Vec<LogRow>)> {
    cfg.validate()?;
    let arch = Arch {
        d_l: ds.d_l,
        d_rho: emb.d,
        hidden: cfg.hidden,
        layers: cfg.layers,
        tail_hidden: cfg.tail_hidden,
    };
    let mut model = ModelParams::init(arch, cfg.dropout, rng::derive_seed(cfg.seed, 1))?;
    let (mean, sd) = outcome_moments(ds);
    model.set_standardization(mean, sd)?;
    let mut target = model.clone();
    let mut order_rng = rng::stream(cfg.seed, 2);
    let mut drop_rng = rng::stream(cfg.seed, 3);
    let n = ds.len();
    let tau = ds.tau;
    let k = actions.k();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs * tau * (k + 1));
    let mut grad = vec![0.0; model.len()];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum_q = vec![vec![0.0; k]; tau];
        let mut sum_g = vec![0.0; tau];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let target_tails = tail_traces(&target, emb)?;
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &ds.trajectories[i]).collect();
            let targets: Vec<Vec<Vec<f64>>> = chunk
                .iter()
                .map(|&i| pseudo_outcomes(&target, &target_tails, &ds.trajectories[i], i, actions))
                .collect();
            let live_tails = tail_traces(&model, emb)?;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.batch_loss(&batch, &targets, &live_tails, Some(&mut drop_rng), Some(&mut grad));
            if !loss.total().is_finite() {
                return Err(Error::Invalid(format!(
                    "training diverged at epoch {epoch} (learning rate {})",
                    cfg.learning_rate
                )));
            }
            for (p, g) in model.theta.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            polyak_update(&mut target, &model, cfg.beta)?;
            for t in 0..tau {
                sum_g[t] += loss.g[t];
                for kk in 0..k {
                    sum_q[t][kk] += loss.q[t][kk];
                }
            }
            batches += 1;
        }
        let b = batches as f64;
        for t in 0..tau {
            log.push(LogRow {
                epoch,
                t: t + 1,
                policy_label: g_label.to_string(),
                loss_kind: LossKind::G,
                value: sum_g[t] / b,
            });
            for (kk, label) in labels.iter().enumerate() {
                log.push(LogRow {
                    epoch,
                    t: t + 1,
                    policy_label: label.clone(),
                    loss_kind: LossKind::Q,
                    value: sum_q[t][kk] / b,
                });
            }
        }
    }
    Ok((model, log))
}

/// Terminal-step MSE of `Q_tau(A_tau, H_tau)` (empty tail, original scale)
/// plus the summed G cross-entropy over all steps.
pub fn factual_loss(model: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Invalid("factual loss needs a nonempty dataset".into()));
    }
    let tau = ds.tau;
    let zero_tail = vec![0.0; model.arch.tail_hidden];
    let mut mse = 0.0;
    let mut bce = 0.0;
    for tr in &ds.trajectories {
        let hist = model.encode_history(tr, tau);
        let q = model.unstandardize(model.q_raw(hist.h(tau), tr.a(tau), &zero_tail));
        mse += (q - tr.outcome).powi(2);
        for t in 1..=tau {
            bce += bce_logit(model.g_logit(hist.h(t)), tr.a(t) as f64);
        }
    }
    let n = ds.len() as f64;
    Ok(mse / n + bce / n)
}

impl TrainedEstimator {
    /// Factual loss of the estimator (mean over its models).
    pub fn factual_loss(&self, ds: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for m in &self.models {
            total += factual_loss(m, ds)?;
        }
        Ok(total / self.models.len() as f64)
    }

    /// Q and G predictions for every policy on every unit of `ds`.
    pub fn nuisances(&self, ds: &Dataset, actions: &ActionMatrix) -> Result<Vec<PolicyNuisance>> {
        if actions.k() != self.policies.len() {
            return Err(Error::Shape(format!(
                "{} action rows for an estimator of {} policies",
                actions.k(),
                self.policies.len()
            )));
        }
        match self.mode {
            Mode::JointPeq => predict(&self.models[0], &self.embedding, ds, actions),
            Mode::Separate => {
                let mut out = Vec::with_capacity(self.policies.len());
                for (k, m) in self.models.iter().enumerate() {
                    let one = ActionMatrix {
                        rows: vec![actions.rows[k].clone()],
                    };
                    out.extend(predict(m, &self.embedding.select(k), ds, &one)?);
                }
                Ok(out)
            }
        }
    }

    /// Writes the training log as CSV `(epoch,t,policy_label,loss_kind,value)`.
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,t,policy_label,loss_kind,value\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.t,
                r.policy_label,
                match r.loss_kind {
                    LossKind::Q => "Q",
                    LossKind::G => "G",
                },
                r.value
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint(&self) -> EstimatorCheckpoint {
        EstimatorCheckpoint {
            mode: self.mode,
            policies: self.policies.clone(),
            embedding: self.embedding.clone(),
            models: self.models.iter().map(ModelParams::to_checkpoint).collect(),
            config: self.config.clone(),
        }
    }

    pub fn from_checkpoint(ck: EstimatorCheckpoint) -> Result<Self> {
        Ok(TrainedEstimator {
            mode: ck.mode,
            policies: ck.policies,
            embedding: ck.embedding,
            models: ck.models.iter().map(ModelParams::from_checkpoint).collect::<Result<_>>()?,
            log: Vec::new(),
            config: ck.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        TrainedEstimator::from_checkpoint(ck)
    }
}

/// Serialized estimator: models as named tensors plus policy metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCheckpoint {
    pub mode: Mode,
    pub policies: Vec<Policy>,
    pub embedding: PolicyEmbedding,
    pub models: Vec<Checkpoint>,
    pub config: TrainConfig,
}

fn predict(m: &ModelParams, emb: &PolicyEmbedding, ds: &Dataset, actions: &ActionMatrix) -> Result<Vec<PolicyNuisance>> {
    if emb.tau() != ds.tau || emb.k() != actions.k() {
        return Err(Error::Shape("embedding does not match the policies or horizon".into()));
    }
    let tails = tail_traces(m, emb)?;
    let tau = ds.tau;
    let n = ds.len();
    let mut out: Vec<PolicyNuisance> = (0..actions.k())
        .map(|_| PolicyNuisance {
            q_obs: Vec::with_capacity(n),
            q_cf: Vec::with_capacity(n),
            g: Vec::with_capacity(n),
        })
        .collect();
    for (i, tr) in ds.trajectories.iter().enumerate() {
        let hist = m.encode_history(tr, tau);
        let g: Vec<f64> = (1..=tau).map(|t| sigmoid(m.g_logit(hist.h(t)))).collect();
        for (k, tail) in tails.iter().enumerate() {
            let obs = (1..=tau).map(|t| m.unstandardize(m.q_raw(hist.h(t), tr.a(t), tail.e(t + 1)))).collect();
            let cf = (1..=tau)
                .map(|t| m.unstandardize(m.q_raw(hist.h(t), actions.get(k, i, t), tail.e(t + 1))))
                .collect();
            out[k].q_obs.push(obs);
            out[k].q_cf.push(cf);
            out[k].g.push(g.clone());
        }
    }
    Ok(out)
}

/// Outcome of a hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: TrainConfig,
    /// Every evaluated draw with its validation factual loss (empty when only
    /// one draw was requested and no training was needed).
    pub evaluated: Vec<(TrainConfig, f64)>,
}

/// Random search over `grid`: trains on `train`, scores the factual loss on
/// `val`, returns the argmin (first occurrence wins ties).
#[allow(clippy::too_many_arguments)]
pub fn select_hyperparams(
    mode: Mode,
    train_ds: &Dataset,
    train_actions: &ActionMatrix,
    val_ds: &Dataset,
    policies: &[Policy],
    embedding: &PolicyEmbedding,
    grid: &HyperGrid,
    base: &TrainConfig,
    n_draws: usize,
    seed: u64,
) -> Result<Selection> {
    if n_draws == 0 {
        return Err(Error::Invalid("n_draws must be >= 1".into()));
    }
    if grid.is_empty() {
        return Err(Error::Invalid("hyperparameter grid has an empty axis".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let draws: Vec<TrainConfig> = (0..n_draws).map(|_| grid.draw(base, &mut rng)).collect();
    if n_draws == 1 {
        return Ok(Selection {
            best: draws[0].clone(),
            evaluated: Vec::new(),
        });
    }
    let mut evaluated = Vec::with_capacity(n_draws);
    for cfg in draws {
        let est = train(mode, train_ds, policies, train_actions, embedding, &cfg)?;
        let loss = est.factual_loss(val_ds)?;
        log::debug!("hyperparameter draw {cfg:?}: validation factual loss {loss}");
        evaluated.push((cfg, loss));
    }
    let mut best = 0;
    for (i, (_, l)) in evaluated.iter().enumerate() {
        if *l < evaluated[best].1 {
            best = i;
        }
    }
    Ok(Selection {
        best: evaluated[best].0.clone(),
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpSpec};

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 5e-3,
            hidden: 6,
            layers: 1,
            tail_hidden: 4,
            ..TrainConfig::default()
        }
    }

    fn setup(tau: usize, n: usize, policies: &[Policy]) -> (Dataset, ActionMatrix, DgpSpec) {
        let spec = DgpSpec::limited(tau, 13);
        let ds = simulate(&spec, n).unwrap();
        let am = ActionMatrix::build(policies, &ds, Some(&spec)).unwrap();
        (ds, am, spec)
    }

    #[test]
    fn training_is_deterministic() {
        let ps = [Policy::constant_threshold("a", 0.5, 4)];
        let (ds, am, _) = setup(4, 60, &ps);
        let emb = zero_embedding(1, 4);
        let a = train_peq(&ds, &ps, &am, &emb, &small_cfg(3)).unwrap();
        let b = train_peq(&ds, &ps, &am, &emb, &small_cfg(3)).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn separate_seeds_differ_and_repeat() {
        let ps = [Policy::constant_threshold("a", 0.5, 3), Policy::constant_threshold("b", 0.5, 3)];
        let (ds, am, _) = setup(3, 40, &ps);
        let est = train_separate(&ds, &ps, &am, &small_cfg(2)).unwrap();
        assert_ne!(est.models[0].theta, est.models[1].theta);
        let again = train_separate(&ds, &ps, &am, &small_cfg(2)).unwrap();
        assert_eq!(est.models, again.models);
    }

    #[test]
    fn identical_policies_have_identical_losses_when_joint() {
        let p = Policy::constant_threshold("a", 0.5, 4);
        let mut q = p.clone();
        q.label = "b".into();
        let ps = [p, q];
        let (ds, am, _) = setup(4, 50, &ps);
        let emb = PolicyEmbedding {
            rho: vec![vec![vec![0.3, -0.2]; 2]; 4],
            d: 2,
            stress: vec![0.0; 4],
            gamma: Vec::new(),
            distances: None,
        };
        let cfg = TrainConfig {
            dropout: 0.1,
            ..small_cfg(3)
        };
        let est = train_peq(&ds, &ps, &am, &emb, &cfg).unwrap();
        let qa: Vec<f64> = est.log.iter().filter(|r| r.policy_label == "a").map(|r| r.value).collect();
        let qb: Vec<f64> = est.log.iter().filter(|r| r.policy_label == "b").map(|r| r.value).collect();
        assert_eq!(qa, qb);
        let nu = est.nuisances(&ds, &am).unwrap();
        assert_eq!(nu[0], nu[1]);
    }

    #[test]
    fn g_loss_trends_down_early() {
        let ps = [Policy::constant_threshold("a", 0.5, 15)];
        let (ds, am, _) = setup(15, 200, &ps);
        let est = train_peq(&ds, &ps, &am, &zero_embedding(1, 15), &small_cfg(10)).unwrap();
        let per_epoch: Vec<f64> = (1..=10)
            .map(|e| est.log.iter().filter(|r| r.epoch == e && r.loss_kind == LossKind::G).map(|r| r.value).sum())
            .collect();
        assert!(per_epoch.iter().all(|v| v.is_finite()));
        let first: f64 = per_epoch[..3].iter().sum();
        let last: f64 = per_epoch[7..].iter().sum();
        assert!(last < first, "{per_epoch:?}");
    }

    #[test]
    fn loss_log_decomposes_total() {
        let ps = [Policy::constant_threshold("a", 0.4, 3), Policy::constant_threshold("b", 0.6, 3)];
        let (ds, am, _) = setup(3, 30, &ps);
        let emb = zero_embedding(2, 3);
        // One full batch, one epoch: the logged components are exactly the
        // components of the single minibatch loss.
        let cfg = TrainConfig {
            batch_size: 30,
            ..small_cfg(1)
        };
        let est = train_peq(&ds, &ps, &am, &emb, &cfg).unwrap();
        let init = {
            let arch = Arch {
                d_l: ds.d_l,
                d_rho: 1,
                hidden: cfg.hidden,
                layers: cfg.layers,
                tail_hidden: cfg.tail_hidden,
            };
            let mut m = ModelParams::init(arch, 0.0, rng::derive_seed(cfg.seed, 1)).unwrap();
            let (mean, sd) = outcome_moments(&ds);
            m.set_standardization(mean, sd).unwrap();
            m
        };
        let tails = tail_traces(&init, &emb).unwrap();
        let mut order: Vec<usize> = (0..30).collect();
        order.shuffle(&mut rng::stream(cfg.seed, 2));
        let batch: Vec<&Trajectory> = order.iter().map(|&i| &ds.trajectories[i]).collect();
        let targets: Vec<_> = order.iter().map(|&i| pseudo_outcomes(&init, &tails, &ds.trajectories[i], i, &am)).collect();
        let loss = init.batch_loss(&batch, &targets, &tails, None, None);
        let logged: f64 = est.log.iter().map(|r| r.value).sum();
        assert!((logged - loss.total()).abs() < 1e-12 * loss.total().max(1.0));
    }

    #[test]
    fn single_step_targets_are_the_outcome() {
        // With tau = 1 the target network is never consulted, so beta cannot
        // change the fit, and the logged Q loss is the plain regression MSE.
        let spec = DgpSpec::limited(2, 4);
        let full = simulate(&spec, 80).unwrap();
        let trs = full
            .trajectories
            .iter()
            .map(|t| Trajectory {
                id: t.id.clone(),
                covariates: vec![t.covariates[1].clone()],
                actions: vec![t.actions[1]],
                outcome: t.outcome,
            })
            .collect();
        let ds = Dataset::new(trs, 1, full.d_l).unwrap();
        let ps = [Policy::fixed("on", vec![1])];
        let am = ActionMatrix::build(&ps, &ds, None).unwrap();
        let emb = zero_embedding(1, 1);
        let a = train_peq(&ds, &ps, &am, &emb, &small_cfg(5)).unwrap();
        let b = train_peq(&ds, &ps, &am, &emb, &TrainConfig { beta: 1.0, ..small_cfg(5) }).unwrap();
        assert_eq!(a.models, b.models);
        let m = &a.models[0];
        let mse: f64 = ds
            .trajectories
            .iter()
            .map(|tr| {
                let h = m.encode_history(tr, 1);
                (m.q_raw(h.h(1), tr.a(1), &[0.0; 4]) - m.standardize(tr.outcome)).powi(2)
            })
            .sum::<f64>()
            / ds.len() as f64;
        // The final full-data MSE and a forward pass through the model agree.
        let fl = factual_loss(m, &ds).unwrap();
        let bce: f64 = ds
            .trajectories
            .iter()
            .map(|tr| bce_logit(m.g_logit(m.encode_history(tr, 1).h(1)), tr.a(1) as f64))
            .sum::<f64>()
            / ds.len() as f64;
        assert!((fl - (mse * m.y_sd * m.y_sd + bce)).abs() < 1e-6);
    }

    #[test]
    fn selection_returns_argmin() {
        let ps = [Policy::constant_threshold("a", 0.5, 3)];
        let (ds, am, _) = setup(3, 60, &ps);
        let tr_idx: Vec<usize> = (0..45).collect();
        let va_idx: Vec<usize> = (45..60).collect();
        let tr = ds.subset(&tr_idx);
        let va = ds.subset(&va_idx);
        let emb = zero_embedding(1, 3);
        let grid = HyperGrid {
            batch_size: vec![16],
            learning_rate: vec![1e-3, 5e-3],
            hidden: vec![4, 6],
            dropout: vec![0.0],
            layers: vec![1],
            tail_hidden: vec![4],
        };
        let base = small_cfg(2);
        let sel = select_hyperparams(Mode::JointPeq, &tr, &am.subset(&tr_idx), &va, &ps, &emb, &grid, &base, 3, 1).unwrap();
        let best = sel.evaluated.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
        let winner = sel.evaluated.iter().find(|(c, _)| *c == sel.best).unwrap().1;
        assert_eq!(winner, best);
        let one = select_hyperparams(Mode::JointPeq, &tr, &am.subset(&tr_idx), &va, &ps, &emb, &HyperGrid::single(&base), &base, 1, 1).unwrap();
        assert_eq!(one.best, base);
    }
}
