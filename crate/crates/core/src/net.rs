//! The model stack: a causal tanh RNN history encoder `phi`, a backward tanh
//! RNN policy-tail encoder, a Q-head on `[h_t; a_t; e_{t+1}]` and a G-head on
//! `h_t`, with handwritten reverse-mode gradients and a Polyak target copy.
//!
//! All parameters live in one flat vector; named tensors are views into it.
//! Q outputs are on a standardized outcome scale (`(y - y_mean) / y_sd`);
//! the public `forward_q` maps them back to the original scale.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Network widths. Both recurrences are stacked `layers` deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub d_l: usize,
    /// Width of one per-step policy embedding row.
    pub d_rho: usize,
    pub hidden: usize,
    pub layers: usize,
    pub tail_hidden: usize,
}

impl Arch {
    fn validate(&self) -> Result<()> {
        if self.d_l == 0 || self.d_rho == 0 || self.hidden == 0 || self.layers == 0 || self.tail_hidden == 0 {
            return Err(Error::Invalid(format!("all network widths must be positive: {self:?}")));
        }
        Ok(())
    }

    fn q_in(&self) -> usize {
        self.hidden + 1 + self.tail_hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hist: Vec<Dense>,
    tail: Vec<Dense>,
    q1: Dense,
    q2: Dense,
    g1: Dense,
    g2: Dense,
    names: Vec<(String, Vec<usize>, usize)>,
    len: usize,
}

impl Layout {
    fn new(a: &Arch) -> Layout {
        let mut len = 0;
        let mut names = Vec::new();
        let mut dense = |name: String, out: usize, inp: usize| {
            let w = len;
            names.push((format!("{name}.w"), vec![out, inp], w));
            len += out * inp;
            let b = len;
            names.push((format!("{name}.b"), vec![out], b));
            len += out;
            Dense { w, b, out, inp }
        };
        let hist = (0..a.layers)
            .map(|j| {
                let inp = if j == 0 { a.d_l + 1 } else { a.hidden };
                dense(format!("history.{j}"), a.hidden, inp + a.hidden)
            })
            .collect();
        let tail = (0..a.layers)
            .map(|j| {
                let inp = if j == 0 { a.d_rho } else { a.tail_hidden };
                dense(format!("tail.{j}"), a.tail_hidden, inp + a.tail_hidden)
            })
            .collect();
        let q1 = dense("q_head.0".into(), a.hidden, a.q_in());
        let q2 = dense("q_head.1".into(), 1, a.hidden);
        let g1 = dense("g_head.0".into(), a.hidden, a.hidden);
        let g2 = dense("g_head.1".into(), 1, a.hidden);
        Layout {
            hist,
            tail,
            q1,
            q2,
            g1,
            g2,
            names,
            len,
        }
    }
}

/// `y = W x + b`.
fn affine(theta: &[f64], d: &Dense, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), d.inp);
    for (o, yo) in y.iter_mut().enumerate().take(d.out) {
        let row = &theta[d.w + o * d.inp..d.w + (o + 1) * d.inp];
        *yo = theta[d.b + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns `dx = W^T dy`.
fn affine_back(theta: &[f64], d: &Dense, x: &[f64], dy: &[f64], grad: &mut [f64], dx: &mut [f64]) {
    dx.iter_mut().for_each(|v| *v = 0.0);
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad[d.b + o] += g;
        let base = d.w + o * d.inp;
        for i in 0..d.inp {
            grad[base + i] += g * x[i];
            dx[i] += theta[base + i] * g;
        }
    }
}

/// Parameters `theta` plus the architecture and outcome standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub dropout: f64,
    pub y_mean: f64,
    pub y_sd: f64,
    pub theta: Vec<f64>,
    layout: Layout,
}

/// Cached activations of the history encoder on one trajectory.
#[derive(Debug, Clone)]
pub struct HistoryTrace {
    /// `inputs[j][t-1]` = `[x_t^j; h_{t-1}^j]`.
    inputs: Vec<Vec<Vec<f64>>>,
    /// `outputs[j][t-1]` = `h_t^j`.
    outputs: Vec<Vec<Vec<f64>>>,
}

impl HistoryTrace {
    /// Top-layer state `h_t`, 1-based.
    pub fn h(&self, t: usize) -> &[f64] {
        &self.outputs[self.outputs.len() - 1][t - 1]
    }

    pub fn tau(&self) -> usize {
        self.outputs[0].len()
    }
}

/// Cached activations of the tail encoder for one policy.
#[derive(Debug, Clone)]
pub struct TailTrace {
    /// `inputs[j][s-2]` = `[x_s^j; e_{s+1}^j]` for `s = 2..=tau`.
    inputs: Vec<Vec<Vec<f64>>>,
    outputs: Vec<Vec<Vec<f64>>>,
    zero: Vec<f64>,
}

impl TailTrace {
    /// `e_s` (top layer) for `s = 2..=tau+1`; `e_{tau+1} = 0`.
    pub fn e(&self, s: usize) -> &[f64] {
        let top = &self.outputs[self.outputs.len() - 1];
        if s - 2 >= top.len() {
            &self.zero
        } else {
            &top[s - 2]
        }
    }
}

impl ModelParams {
    /// Seeded initialization: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases 0.
    pub fn init(arch: Arch, dropout: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Invalid(format!("dropout must be in [0, 1), got {dropout}")));
        }
        let layout = Layout::new(&arch);
        let mut theta = vec![0.0; layout.len];
        let mut rng = rng::stream(seed, 0);
        let all: Vec<Dense> = layout
            .hist
            .iter()
            .chain(&layout.tail)
            .chain([&layout.q1, &layout.q2, &layout.g1, &layout.g2])
            .copied()
            .collect();
        for d in all {
            let bound = 1.0 / (d.inp as f64).sqrt();
            for v in &mut theta[d.w..d.w + d.out * d.inp] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(ModelParams {
            arch,
            dropout,
            y_mean: 0.0,
            y_sd: 1.0,
            theta,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// `(name, shape, offset)` for every tensor.
    pub fn tensor_names(&self) -> impl Iterator<Item = (&str, &[usize], usize)> {
        self.layout.names.iter().map(|(n, s, o)| (n.as_str(), s.as_slice(), *o))
    }

    pub fn set_standardization(&mut self, mean: f64, sd: f64) -> Result<()> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(Error::Invalid(format!("bad outcome standardization ({mean}, {sd})")));
        }
        self.y_mean = mean;
        self.y_sd = sd;
        Ok(())
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_sd
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        self.y_mean + self.y_sd * z
    }

    fn check_traj(&self, traj: &Trajectory) -> Result<()> {
        if traj.covariates.iter().any(|l| l.len() != self.arch.d_l) {
            return Err(Error::Dimension(format!(
                "trajectory {} has covariates of the wrong width for d_L={}",
                traj.id, self.arch.d_l
            )));
        }
        Ok(())
    }

    /// Runs the history encoder over `L_1..L_upto` and `A_0..A_{upto-1}`.
    pub fn encode_history(&self, traj: &Trajectory, upto: usize) -> HistoryTrace {
        let a = &self.arch;
        let lay = &self.layout;
        let mut inputs = vec![Vec::with_capacity(upto); a.layers];
        let mut outputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(upto); a.layers];
        for t in 1..=upto {
            let mut x: Vec<f64> = traj.l(t).to_vec();
            x.push(traj.a(t - 1) as f64);
            for j in 0..a.layers {
                let prev = if t == 1 { vec![0.0; a.hidden] } else { outputs[j][t - 2].clone() };
                let mut inp = x;
                inp.extend_from_slice(&prev);
                let mut h = vec![0.0; a.hidden];
                affine(&self.theta, &lay.hist[j], &inp, &mut h);
                h.iter_mut().for_each(|v| *v = v.tanh());
                inputs[j].push(inp);
                x = h.clone();
                outputs[j].push(h);
            }
        }
        HistoryTrace { inputs, outputs }
    }

    /// Runs the tail encoder backward over `rho_2..rho_tau` (`rho[s-1]`).
    pub fn encode_tail_trace(&self, rho: &[&[f64]]) -> Result<TailTrace> {
        let a = &self.arch;
        if let Some(bad) = rho.iter().find(|r| r.len() != a.d_rho) {
            return Err(Error::Dimension(format!(
                "embedding row of width {} for a network with d_rho={}",
                bad.len(),
                a.d_rho
            )));
        }
        let tau = rho.len();
        let steps = tau.saturating_sub(1);
        let mut inputs = vec![vec![Vec::new(); steps]; a.layers];
        let mut outputs = vec![vec![Vec::new(); steps]; a.layers];
        for s in (2..=tau).rev() {
            let mut x: Vec<f64> = rho[s - 1].to_vec();
            for j in 0..a.layers {
                let next = if s == tau { vec![0.0; a.tail_hidden] } else { outputs[j][s - 1].clone() };
                let mut inp = x;
                inp.extend_from_slice(&next);
                let mut e = vec![0.0; a.tail_hidden];
                affine(&self.theta, &self.layout.tail[j], &inp, &mut e);
                e.iter_mut().for_each(|v| *v = v.tanh());
                inputs[j][s - 2] = inp;
                x = e.clone();
                outputs[j][s - 2] = e;
            }
        }
        Ok(TailTrace {
            inputs,
            outputs,
            zero: vec![0.0; a.tail_hidden],
        })
    }

    /// Encoding `e_{t+1}` of the tail `rho_{t+1..tau}`; the empty tail maps to 0.
    pub fn encode_tail(&self, rho_tail: &[&[f64]]) -> Result<Vec<f64>> {
        if rho_tail.is_empty() {
            return Ok(vec![0.0; self.arch.tail_hidden]);
        }
        // Prepend a dummy step so the tail occupies steps 2..=len+1.
        let dummy = vec![0.0; self.arch.d_rho];
        let mut rho: Vec<&[f64]> = vec![&dummy];
        rho.extend_from_slice(rho_tail);
        Ok(self.encode_tail_trace(&rho)?.e(2).to_vec())
    }

    /// Bypass encoding of a fixed action tail: each row is `[a_s]` (`d_rho = 1`).
    pub fn encode_deterministic_tail(&self, a_tail: &[u8]) -> Result<Vec<f64>> {
        if self.arch.d_rho != 1 {
            return Err(Error::Dimension(format!(
                "deterministic tails need d_rho = 1, network has {}",
                self.arch.d_rho
            )));
        }
        let rows: Vec<[f64; 1]> = a_tail.iter().map(|&a| [a as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        self.encode_tail(&refs)
    }

    fn q_head(&self, u: &[f64], r: &mut [f64]) -> f64 {
        affine(&self.theta, &self.layout.q1, u, r);
        r.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = [0.0];
        affine(&self.theta, &self.layout.q2, r, &mut out);
        out[0]
    }

    fn g_head(&self, u: &[f64], r: &mut [f64]) -> f64 {
        affine(&self.theta, &self.layout.g1, u, r);
        r.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = [0.0];
        affine(&self.theta, &self.layout.g2, r, &mut out);
        out[0]
    }

    /// Standardized Q output for a given history state, action and tail encoding.
    pub fn q_raw(&self, h: &[f64], a: u8, e: &[f64]) -> f64 {
        let mut u = Vec::with_capacity(self.arch.q_in());
        u.extend_from_slice(h);
        u.push(a as f64);
        u.extend_from_slice(e);
        let mut r = vec![0.0; self.arch.hidden];
        self.q_head(&u, &mut r)
    }

    /// G-head logit for a history state.
    pub fn g_logit(&self, h: &[f64]) -> f64 {
        let mut r = vec![0.0; self.arch.hidden];
        self.g_head(h, &mut r)
    }

    /// `Q_t(a_t, H_t; rho_{t+1..tau})` on the original outcome scale.
    pub fn forward_q(&self, traj: &Trajectory, t: usize, a_t: u8, rho_tail: &[&[f64]]) -> Result<f64> {
        check_t(t, traj.tau())?;
        self.check_traj(traj)?;
        let hist = self.encode_history(traj, t);
        let e = self.encode_tail(rho_tail)?;
        Ok(self.unstandardize(self.q_raw(hist.h(t), a_t, &e)))
    }

    /// `G(H_t) = P(A_t = 1 | H_t)`.
    pub fn forward_g(&self, traj: &Trajectory, t: usize) -> Result<f64> {
        check_t(t, traj.tau())?;
        self.check_traj(traj)?;
        let hist = self.encode_history(traj, t);
        Ok(sigmoid(self.g_logit(hist.h(t))))
    }

    /// Minibatch loss `sum_t [BCE_t + sum_k MSE_{t,k}]` and, optionally, its gradient.
    ///
    /// `targets[i][k][t-1]` are standardized Q targets for unit `batch[i]`;
    /// `tails[k]` are the tail traces of the policies. With `dropout_rng`,
    /// inverted-dropout masks are drawn per unit and step (one mask shared by
    /// all policies' Q-heads); without it the network runs deterministically.
    pub fn batch_loss(
        &self,
        batch: &[&Trajectory],
        targets: &[Vec<Vec<f64>>],
        tails: &[TailTrace],
        mut dropout_rng: Option<&mut Rng>,
        mut grad: Option<&mut [f64]>,
    ) -> LossBreakdown {
        let a = &self.arch;
        let lay = &self.layout;
        let k = tails.len();
        let tau = batch.first().map_or(0, |tr| tr.tau());
        let bsz = batch.len() as f64;
        let mut losses = LossBreakdown {
            q: vec![vec![0.0; k]; tau],
            g: vec![0.0; tau],
        };
        let keep = 1.0 - self.dropout;
        let use_dropout = self.dropout > 0.0 && dropout_rng.is_some();
        let mut d_tail: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; a.tail_hidden]; tau + 1]; k];
        let qi = a.q_in();
        let mut u = vec![0.0; qi];
        let mut r = vec![0.0; a.hidden];
        let mut dr = vec![0.0; a.hidden];
        let mut du = vec![0.0; qi];
        let mut dug = vec![0.0; a.hidden];
        for (i, traj) in batch.iter().enumerate() {
            let hist = self.encode_history(traj, tau);
            let mut dh_top = vec![vec![0.0; a.hidden]; tau];
            for t in 1..=tau {
                let h = hist.h(t);
                let mut mask_q = vec![1.0; qi];
                let mut mask_g = vec![1.0; a.hidden];
                if use_dropout {
                    let rng = dropout_rng.as_deref_mut().expect("checked");
                    for m in mask_q.iter_mut().chain(mask_g.iter_mut()) {
                        *m = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                }
                // G-head on the observed action.
                let ug: Vec<f64> = h.iter().zip(&mask_g).map(|(v, m)| v * m).collect();
                let logit = self.g_head(&ug, &mut r);
                let y = traj.a(t) as f64;
                losses.g[t - 1] += bce_logit(logit, y) / bsz;
                if let Some(gr) = grad.as_deref_mut() {
                    let dlogit = (sigmoid(logit) - y) / bsz;
                    head_back(&self.theta, &lay.g1, &lay.g2, &ug, &r, dlogit, gr, &mut dr, &mut dug);
                    for c in 0..a.hidden {
                        dh_top[t - 1][c] += dug[c] * mask_g[c];
                    }
                }
                // Q-heads, one per policy, at the observed action.
                for (kk, tail) in tails.iter().enumerate() {
                    let e = tail.e(t + 1);
                    u[..a.hidden].copy_from_slice(h);
                    u[a.hidden] = traj.a(t) as f64;
                    u[a.hidden + 1..].copy_from_slice(e);
                    u.iter_mut().zip(&mask_q).for_each(|(v, m)| *v *= m);
                    let q = self.q_head(&u, &mut r);
                    let diff = q - targets[i][kk][t - 1];
                    losses.q[t - 1][kk] += diff * diff / bsz;
                    if let Some(gr) = grad.as_deref_mut() {
                        head_back(&self.theta, &lay.q1, &lay.q2, &u, &r, 2.0 * diff / bsz, gr, &mut dr, &mut du);
                        for c in 0..a.hidden {
                            dh_top[t - 1][c] += du[c] * mask_q[c];
                        }
                        if t < tau {
                            let dt = &mut d_tail[kk][t + 1];
                            for c in 0..a.tail_hidden {
                                dt[c] += du[a.hidden + 1 + c] * mask_q[a.hidden + 1 + c];
                            }
                        }
                    }
                }
            }
            if let Some(gr) = grad.as_deref_mut() {
                self.history_back(&hist, &dh_top, gr);
            }
        }
        if let Some(gr) = grad {
            for (tail, dt) in tails.iter().zip(&d_tail) {
                self.tail_back(tail, dt, gr);
            }
        }
        losses
    }

    /// BPTT through the stacked history recurrence.
    fn history_back(&self, hist: &HistoryTrace, dh_top: &[Vec<f64>], grad: &mut [f64]) {
        let a = &self.arch;
        let layers = a.layers;
        let tau = hist.tau();
        // Gradient flowing into h_{t}^j from step t+1 of the same layer.
        let mut carry = vec![vec![0.0; a.hidden]; layers];
        for t in (1..=tau).rev() {
            let mut from_above = dh_top[t - 1].clone();
            for j in (0..layers).rev() {
                let d = &self.layout.hist[j];
                let out = &hist.outputs[j][t - 1];
                let dz: Vec<f64> = (0..a.hidden)
                    .map(|c| (from_above[c] + carry[j][c]) * (1.0 - out[c] * out[c]))
                    .collect();
                let mut dx = vec![0.0; d.inp];
                affine_back(&self.theta, d, &hist.inputs[j][t - 1], &dz, grad, &mut dx);
                let split = d.inp - a.hidden;
                carry[j].copy_from_slice(&dx[split..]);
                from_above = dx[..split].to_vec();
            }
        }
    }

    /// Backprop through the tail recurrence; `d_e[s]` is the gradient on `e_s`.
    fn tail_back(&self, tail: &TailTrace, d_e: &[Vec<f64>], grad: &mut [f64]) {
        let a = &self.arch;
        let layers = a.layers;
        let steps = tail.outputs[0].len();
        // Gradient flowing into e_s^j from step s-1 of the same layer.
        let mut carry = vec![vec![0.0; a.tail_hidden]; layers];
        for s in 2..=steps + 1 {
            let mut from_above = d_e[s].clone();
            for j in (0..layers).rev() {
                let d = &self.layout.tail[j];
                let out = &tail.outputs[j][s - 2];
                let dz: Vec<f64> = (0..a.tail_hidden)
                    .map(|c| (from_above[c] + carry[j][c]) * (1.0 - out[c] * out[c]))
                    .collect();
                let mut dx = vec![0.0; d.inp];
                affine_back(&self.theta, d, &tail.inputs[j][s - 2], &dz, grad, &mut dx);
                let split = d.inp - a.tail_hidden;
                carry[j].copy_from_slice(&dx[split..]);
                from_above = dx[..split].to_vec();
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.arch,
            dropout: self.dropout,
            y_mean: self.y_mean,
            y_sd: self.y_sd,
            tensors: self
                .layout
                .names
                .iter()
                .map(|(name, shape, off)| {
                    let len: usize = shape.iter().product();
                    NamedTensor {
                        name: name.clone(),
                        shape: shape.clone(),
                        data: self.theta[*off..off + len].to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = ModelParams::init(ck.arch, ck.dropout, 0)?;
        m.set_standardization(ck.y_mean, ck.y_sd)?;
        if ck.tensors.len() != m.layout.names.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ck.tensors.len(),
                m.layout.names.len()
            )));
        }
        for (tensor, (name, shape, off)) in ck.tensors.iter().zip(&m.layout.names) {
            if &tensor.name != name || &tensor.shape != shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} {:?} does not match expected {name} {shape:?}",
                    tensor.name, tensor.shape
                )));
            }
            let len: usize = shape.iter().product();
            if tensor.data.len() != len {
                return Err(Error::Shape(format!("tensor {name} holds {} values, shape needs {len}", tensor.data.len())));
            }
            m.theta[*off..off + len].copy_from_slice(&tensor.data);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ModelParams::from_checkpoint(&ck)
    }

    /// Upper bound on the Lipschitz constant of `encode_tail` for tails of
    /// length `len`, w.r.t. `sum_s |rho_s - rho'_s|`.
    pub fn tail_lipschitz_bound(&self, len: usize) -> f64 {
        let mut bound = 1.0;
        for d in &self.layout.tail {
            let w = nalgebra::DMatrix::from_row_slice(d.out, d.inp, &self.theta[d.w..d.w + d.out * d.inp]);
            let c = w.singular_values().max().max(1.0);
            bound *= len as f64 * c.powi(len as i32);
        }
        bound
    }
}

/// Result of comparing the analytic gradient with central finite differences
/// for one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub tensor: String,
    /// `max |analytic - fd| / (|analytic| + 1e-8)` over the tensor's entries.
    pub max_rel_err: f64,
    pub entries: usize,
}

impl ModelParams {
    /// Deterministic total batch loss with tail traces rebuilt from `rho`
    /// (`rho[k][t-1]` is policy `k`'s embedding row at step `t`).
    fn loss_from_rho(&self, batch: &[&Trajectory], targets: &[Vec<Vec<f64>>], rho: &[Vec<Vec<f64>>], grad: Option<&mut [f64]>) -> Result<f64> {
        let tails = rho
            .iter()
            .map(|r| {
                let rows: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
                self.encode_tail_trace(&rows)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.batch_loss(batch, targets, &tails, None, grad).total())
    }

    /// Central-difference check of the full loss gradient (every tensor,
    /// including the tail encoder through its policy-embedding inputs).
    pub fn gradient_check(
        &self,
        batch: &[&Trajectory],
        targets: &[Vec<Vec<f64>>],
        rho: &[Vec<Vec<f64>>],
        h: f64,
    ) -> Result<Vec<GradCheck>> {
        let mut analytic = vec![0.0; self.len()];
        self.loss_from_rho(batch, targets, rho, Some(&mut analytic))?;
        let mut probe = self.clone();
        let mut out = Vec::new();
        for (name, shape, offset) in &self.layout.names {
            let size: usize = shape.iter().product();
            let mut worst = 0.0f64;
            for p in *offset..offset + size {
                let orig = probe.theta[p];
                probe.theta[p] = orig + h;
                let up = probe.loss_from_rho(batch, targets, rho, None)?;
                probe.theta[p] = orig - h;
                let down = probe.loss_from_rho(batch, targets, rho, None)?;
                probe.theta[p] = orig;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((analytic[p] - fd).abs() / (analytic[p].abs() + 1e-8));
            }
            out.push(GradCheck {
                tensor: name.clone(),
                max_rel_err: worst,
                entries: size,
            });
        }
        Ok(out)
    }
}

/// Per-step, per-policy loss components of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `q[t-1][k]`: mean squared error of policy `k`'s Q-head at step `t`.
    pub q: Vec<Vec<f64>>,
    /// `g[t-1]`: mean binary cross-entropy of the G-head at step `t`.
    pub g: Vec<f64>,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.q.iter().zip(&self.g).map(|(q, g)| g + q.iter().sum::<f64>()).sum()
    }

    pub fn total_g(&self) -> f64 {
        self.g.iter().sum()
    }
}

/// Backprop through a one-hidden-layer tanh head with scalar output.
#[allow(clippy::too_many_arguments)]
fn head_back(
    theta: &[f64],
    l1: &Dense,
    l2: &Dense,
    u: &[f64],
    r: &[f64],
    dout: f64,
    grad: &mut [f64],
    dr: &mut [f64],
    du: &mut [f64],
) {
    affine_back(theta, l2, r, &[dout], grad, dr);
    let dz: Vec<f64> = dr.iter().zip(r).map(|(g, v)| g * (1.0 - v * v)).collect();
    affine_back(theta, l1, u, &dz, grad, du);
}

/// `softplus(z) - y z`, the cross-entropy of `sigmoid(z)` against a (soft) label `y`.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_t(t: usize, tau: usize) -> Result<()> {
    if t == 0 || t > tau {
        return Err(Error::Index(format!("t={t} outside 1..={tau}")));
    }
    Ok(())
}

/// `theta' <- beta theta + (1 - beta) theta'`.
pub fn polyak_update(target: &mut ModelParams, live: &ModelParams, beta: f64) -> Result<()> {
    if target.arch != live.arch || target.theta.len() != live.theta.len() {
        return Err(Error::Shape("target and live networks differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Invalid(format!("beta must be in [0, 1], got {beta}")));
    }
    for (tp, &p) in target.theta.iter_mut().zip(&live.theta) {
        *tp = beta * p + (1.0 - beta) * *tp;
    }
    Ok(())
}

/// Serialized parameters: named tensors with shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    pub dropout: f64,
    pub y_mean: f64,
    pub y_sd: f64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpSpec};

    fn arch(layers: usize) -> Arch {
        Arch {
            d_l: 11,
            d_rho: 2,
            hidden: 5,
            layers,
            tail_hidden: 4,
        }
    }

    fn data(tau: usize, n: usize) -> crate::data::Dataset {
        simulate(&DgpSpec::limited(tau, 5), n).unwrap()
    }

    fn randomize(m: &mut ModelParams, seed: u64, scale: f64) {
        let mut r = rng::stream(seed, 9);
        m.theta.iter_mut().for_each(|v| *v = scale * r.gen_range(-1.0..1.0));
    }

    #[test]
    fn zero_weights_give_bias_and_half() {
        let ds = data(4, 2);
        let mut m = ModelParams::init(arch(2), 0.0, 1).unwrap();
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        let off = m.layout.q2.b;
        m.theta[off] = 0.75;
        let tr = &ds.trajectories[0];
        assert_eq!(m.forward_q(tr, 2, 1, &[&[0.3, 0.1]]).unwrap(), 0.75);
        assert_eq!(m.forward_g(tr, 3).unwrap(), 0.5);
    }

    #[test]
    fn empty_tail_equals_zeroed_tail_state() {
        let ds = data(3, 1);
        let m = ModelParams::init(arch(1), 0.0, 2).unwrap();
        let tr = &ds.trajectories[0];
        let e = m.encode_tail(&[]).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        let hist = m.encode_history(tr, 3);
        let direct = m.unstandardize(m.q_raw(hist.h(3), 1, &e));
        assert_eq!(m.forward_q(tr, 3, 1, &[]).unwrap(), direct);
    }

    #[test]
    fn outputs_react_to_tail_and_past_actions() {
        let ds = data(4, 1);
        let mut m = ModelParams::init(arch(2), 0.0, 3).unwrap();
        randomize(&mut m, 1, 0.8);
        let tr = &ds.trajectories[0];
        let a = m.forward_q(tr, 2, 1, &[&[0.0, 0.0], &[0.5, 0.5]]).unwrap();
        let b = m.forward_q(tr, 2, 1, &[&[0.3, -0.2], &[0.5, 0.5]]).unwrap();
        assert_ne!(a, b);
        let mut flipped = tr.clone();
        flipped.actions[1] ^= 1;
        assert_ne!(m.forward_g(tr, 3).unwrap(), m.forward_g(&flipped, 3).unwrap());
    }

    #[test]
    fn causal_masking() {
        let ds = data(5, 1);
        let mut m = ModelParams::init(arch(2), 0.0, 4).unwrap();
        randomize(&mut m, 2, 0.8);
        let tr = &ds.trajectories[0];
        let mut future = tr.clone();
        future.actions[2] ^= 1; // A_3
        future.actions[4] ^= 1;
        future.covariates[3][0] += 10.0; // L_4
        future.outcome += 5.0;
        let tail: [&[f64]; 2] = [&[0.1, 0.2], &[0.3, 0.4]];
        assert_eq!(m.forward_q(tr, 3, 1, &tail).unwrap(), m.forward_q(&future, 3, 1, &tail).unwrap());
        // A_3 itself is masked from G at t = 3.
        assert_eq!(m.forward_g(tr, 3).unwrap(), m.forward_g(&future, 3).unwrap());
    }

    #[test]
    fn deterministic_tails() {
        let mut m = ModelParams::init(
            Arch {
                d_rho: 1,
                ..arch(1)
            },
            0.0,
            5,
        )
        .unwrap();
        randomize(&mut m, 3, 0.8);
        let ones = m.encode_deterministic_tail(&[1, 1, 1]).unwrap();
        let zeros = m.encode_deterministic_tail(&[0, 0, 0]).unwrap();
        assert_ne!(ones, zeros);
        assert_eq!(ones, m.encode_deterministic_tail(&[1, 1, 1]).unwrap());
        // Suffix-equal sequences from step t share the tail rho_{t+1..}.
        let a = [0u8, 1, 0, 1];
        let b = [1u8, 1, 0, 1];
        assert_eq!(m.encode_deterministic_tail(&a[1..]).unwrap(), m.encode_deterministic_tail(&b[1..]).unwrap());
    }

    #[test]
    fn polyak_examples() {
        let mut t = ModelParams::init(arch(1), 0.0, 0).unwrap();
        let mut l = t.clone();
        t.theta.iter_mut().for_each(|v| *v = 0.0);
        l.theta.iter_mut().for_each(|v| *v = 1.0);
        polyak_update(&mut t, &l, 0.005).unwrap();
        assert!(t.theta.iter().all(|&v| v == 0.005));
        let before = t.clone();
        polyak_update(&mut t, &l, 0.0).unwrap();
        assert_eq!(t, before);
        polyak_update(&mut t, &l, 1.0).unwrap();
        assert_eq!(t.theta, l.theta);
        let other = ModelParams::init(arch(2), 0.0, 0).unwrap();
        assert!(polyak_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = ModelParams::init(arch(3), 0.1, 7).unwrap();
        randomize(&mut m, 4, 1.0 / 3.0);
        m.set_standardization(-1.234_567_890_123_4, 0.1 + 1e-13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(ModelParams::load(&p).unwrap(), m);
        let names: Vec<&str> = m.tensor_names().map(|(n, _, _)| n).collect();
        assert!(names.contains(&"history.2.w") && names.contains(&"g_head.1.b"));
    }

    #[test]
    fn perfect_fit_has_zero_q_gradient() {
        let ds = data(3, 3);
        let mut m = ModelParams::init(arch(1), 0.0, 8).unwrap();
        randomize(&mut m, 5, 0.5);
        let batch: Vec<&Trajectory> = ds.trajectories.iter().collect();
        let rho = vec![vec![0.2, -0.1]; 3];
        let refs: Vec<&[f64]> = rho.iter().map(Vec::as_slice).collect();
        let tail = m.encode_tail_trace(&refs).unwrap();
        let targets: Vec<Vec<Vec<f64>>> = batch
            .iter()
            .map(|tr| {
                let h = m.encode_history(tr, 3);
                vec![(1..=3).map(|t| m.q_raw(h.h(t), tr.a(t), tail.e(t + 1))).collect()]
            })
            .collect();
        // Zero the G-head output weights so only the (perfect) Q loss remains.
        let g2 = m.layout.g2;
        for v in &mut m.theta[g2.w..g2.b + 1] {
            *v = 0.0;
        }
        let mut grad = vec![0.0; m.len()];
        let loss = m.batch_loss(&batch, &targets, &[tail], None, Some(&mut grad));
        assert!(loss.q.iter().flatten().all(|&v| v == 0.0));
        // Only the G-head output layer can still move (BCE at p = 0.5).
        let nonzero: Vec<usize> = grad.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect();
        assert!(nonzero.iter().all(|&i| (g2.w..=g2.b).contains(&i)), "{nonzero:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ds = data(4, 5);
        for layers in [1, 2] {
            let mut m = ModelParams::init(arch(layers), 0.0, 3).unwrap();
            m.set_standardization(-2.0, 1.1).unwrap();
            let batch: Vec<&Trajectory> = ds.trajectories.iter().collect();
            let mut r = rng::stream(4, 4);
            let rho: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|_| (0..4).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect())
                .collect();
            let targets: Vec<Vec<Vec<f64>>> = batch
                .iter()
                .map(|_| (0..2).map(|_| (0..4).map(|_| r.gen_range(-1.5..1.5)).collect()).collect())
                .collect();
            let checks = m.gradient_check(&batch, &targets, &rho, 1e-5).unwrap();
            assert_eq!(checks.len(), 4 * layers + 8);
            for c in &checks {
                assert!(c.max_rel_err < 1e-4, "layers={layers} {}: {}", c.tensor, c.max_rel_err);
            }
        }
    }

    #[test]
    fn tail_encoder_is_lipschitz() {
        let mut m = ModelParams::init(arch(2), 0.0, 9).unwrap();
        randomize(&mut m, 6, 0.7);
        let len = 4;
        let bound = m.tail_lipschitz_bound(len);
        let mut r = rng::stream(77, 0);
        for _ in 0..1000 {
            let a: Vec<Vec<f64>> = (0..len).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
            let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x + r.gen_range(-0.1..0.1)).collect()).collect();
            let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
            let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
            let ea = m.encode_tail(&ra).unwrap();
            let eb = m.encode_tail(&rb).unwrap();
            let de = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dr: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
                .sum();
            assert!(de <= bound * dr, "{de} > {bound} * {dr}");
        }
    }
}
