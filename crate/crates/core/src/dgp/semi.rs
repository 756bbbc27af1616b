use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{forced_action, DgpSpec, Variant, D_Z};
use crate::data::{sigmoid, Policy, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Rng;

const AR_COEF: f64 = 0.8;
const AR_NOISE: f64 = 0.6;

/// Lag weights `w_i = (-1)^i / i`, `i = 1..=lag`.
pub fn outcome_weights(lag: usize) -> Vec<f64> {
    (1..=lag)
        .map(|i| if i % 2 == 0 { 1.0 / i as f64 } else { -1.0 / i as f64 })
        .collect()
}

/// Standard-normal draws for one time step, consumed in a fixed order so
/// that rollouts under different policies share common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub a: f64,
    pub y: f64,
}

impl StepNoise {
    pub fn draw(spec: &DgpSpec, rng: &mut Rng) -> Self {
        let x = (0..spec.d_x).map(|_| rng.sample(StandardNormal)).collect();
        let z = if spec.variant == Variant::Expanded {
            (0..D_Z).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            Vec::new()
        };
        StepNoise {
            x,
            z,
            a: rng.sample(StandardNormal),
            y: rng.sample(StandardNormal),
        }
    }

    pub fn zero(spec: &DgpSpec) -> Self {
        StepNoise {
            x: vec![0.0; spec.d_x],
            z: vec![0.0; if spec.variant == Variant::Expanded { D_Z } else { 0 }],
            a: 0.0,
            y: 0.0,
        }
    }
}

/// Latent generator state up to some step. Vectors are indexed by `t - 1`
/// except `ell`, which holds `ell_0..`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiState {
    pub x: Vec<Vec<f64>>,
    pub xbar: Vec<f64>,
    xa: Vec<f64>,
    xb: Vec<f64>,
    pub y: Vec<f64>,
    pub a: Vec<u8>,
    pub ell: Vec<f64>,
}

impl SemiState {
    pub fn new(spec: &DgpSpec) -> Self {
        SemiState {
            x: Vec::with_capacity(spec.tau),
            xbar: Vec::with_capacity(spec.tau),
            xa: Vec::with_capacity(spec.tau),
            xb: Vec::with_capacity(spec.tau),
            y: Vec::with_capacity(spec.tau),
            a: Vec::with_capacity(spec.tau),
            ell: vec![spec.tau as f64 / 2.0 - 3.0],
        }
    }

    /// Rebuilds the state behind `H_t` from observed `L_1..L_t` and `A_1..A_{t-1}`.
    pub fn from_parts(spec: &DgpSpec, l: &[Vec<f64>], a: &[u8]) -> Result<Self> {
        let dim = spec.state_dim();
        if l.is_empty() || a.len() + 1 != l.len() {
            return Err(Error::Shape(format!(
                "history needs t covariates and t-1 actions, got {} and {}",
                l.len(),
                a.len()
            )));
        }
        if let Some(bad) = l.iter().find(|v| v.len() != dim + 1) {
            return Err(Error::Dimension(format!(
                "covariate of length {} for a generator with d_L={}",
                bad.len(),
                dim + 1
            )));
        }
        let mut st = SemiState::new(spec);
        for (s, lv) in l.iter().enumerate() {
            st.push_state(lv[..dim].to_vec());
            if s + 1 < l.len() {
                let y_s = l[s + 1][dim];
                st.record_outcome(a[s], y_s);
            }
        }
        Ok(st)
    }

    pub fn from_observed(spec: &DgpSpec, traj: &Trajectory, t: usize) -> Result<Self> {
        SemiState::from_parts(spec, &traj.covariates[..t], &traj.actions[..t - 1])
    }

    fn push_state(&mut self, state: Vec<f64>) {
        let n = state.len() as f64;
        self.xbar.push(state.iter().sum::<f64>() / n);
        self.xa.push(state[..5].iter().sum::<f64>() / 5.0);
        self.xb.push(state[5..].iter().sum::<f64>() / (state.len() - 5) as f64);
        self.x.push(state);
    }

    fn record_outcome(&mut self, a_t: u8, y_t: f64) {
        let t = self.a.len() + 1;
        self.a.push(a_t);
        self.y.push(y_t);
        let prev = self.ell[t - 1];
        self.ell.push(prev + 2.0 * (a_t as f64 - 1.0) * self.xbar[t - 1] * y_t.tanh());
    }

    /// Draws `X_t` (and `Z_t`) for the next step.
    pub fn push_covariates(&mut self, spec: &DgpSpec, noise: &StepNoise) {
        let t = self.x.len() + 1;
        let d_x = spec.d_x;
        let mut state = Vec::with_capacity(spec.state_dim());
        if t == 1 {
            state.extend_from_slice(&noise.x);
        } else {
            let prev = &self.x[t - 2];
            state.extend((0..d_x).map(|j| AR_COEF * prev[j] + AR_NOISE * noise.x[j]));
        }
        if spec.variant == Variant::Expanded {
            if t == 1 {
                state.extend_from_slice(&noise.z);
            } else {
                let prev = &self.x[t - 2];
                let a_prev = self.a[t - 2] as f64;
                let xbar_prev = prev[..d_x].iter().sum::<f64>() / d_x as f64;
                let [w1, w2, w3] = spec.omega;
                state.extend((0..D_Z).map(|j| {
                    let z = prev[d_x + j];
                    w1 * z + w2 * a_prev * sigmoid(z * z) + w3 * xbar_prev + spec.noise_sd_z * noise.z[j]
                }));
            }
        }
        self.push_state(state);
    }

    /// Noise-free treatment score of `H_t`.
    pub fn score(&self, spec: &DgpSpec, t: usize) -> f64 {
        let w = outcome_weights(spec.lag);
        let mut s = 0.0;
        for (i, wi) in w.iter().enumerate() {
            let lag = i + 1;
            if lag >= t {
                break;
            }
            let u = t - lag;
            s += wi * (self.xbar[u - 1] + (self.y[u - 1] / 2.0).tanh());
        }
        s - (self.ell[t - 1] - spec.tau as f64 / 2.0).tanh()
    }

    /// Takes action `a_t`, emits the intermediate outcome `Y_t` and updates `ell_t`.
    pub fn push_outcome(&mut self, spec: &DgpSpec, a_t: u8, noise_y: f64) -> f64 {
        let t = self.a.len() + 1;
        let w = outcome_weights(spec.lag);
        let mut acc = 0.0;
        for (i, wi) in w.iter().enumerate() {
            // lag i+1 reaches back to step t - i
            if i >= t {
                break;
            }
            let u = t - i;
            let act = if u == t { a_t } else { self.a[u - 1] } as f64;
            acc += wi * ((self.xa[u - 1] * act).sin() + (self.xb[u - 1] * act).cos()).tanh();
        }
        let y_t = 5.0 * acc + spec.noise_sd_y * noise_y;
        self.record_outcome(a_t, y_t);
        y_t
    }

    fn to_trajectory(&self, id: String) -> Trajectory {
        let covariates = self
            .x
            .iter()
            .enumerate()
            .map(|(s, x)| {
                let mut l = x.clone();
                l.push(if s == 0 { 0.0 } else { self.y[s - 1] });
                l
            })
            .collect();
        Trajectory {
            id,
            covariates,
            actions: self.a.clone(),
            outcome: *self.y.last().expect("at least one step"),
        }
    }
}

fn behavior_action(spec: &DgpSpec, score: f64, noise_a: f64) -> u8 {
    // sigmoid(s + e) > 0.5 <=> s + e > 0
    u8::from(score + spec.noise_sd_a * noise_a > 0.0)
}

pub(super) fn simulate_unit(spec: &DgpSpec, rng: &mut Rng, policy: Option<&Policy>, id: usize) -> Trajectory {
    simulate_unit_with(spec, || StepNoise::draw(spec, rng), policy, id)
}

pub(crate) fn simulate_unit_with(
    spec: &DgpSpec,
    mut noise: impl FnMut() -> StepNoise,
    policy: Option<&Policy>,
    id: usize,
) -> Trajectory {
    let mut st = SemiState::new(spec);
    for t in 1..=spec.tau {
        let nz = noise();
        st.push_covariates(spec, &nz);
        let s = st.score(spec, t);
        let a = forced_action(policy, t, s).unwrap_or_else(|| behavior_action(spec, s, nz.a));
        st.push_outcome(spec, a, nz.y);
    }
    st.to_trajectory(format!("u{id}"))
}

/// Continues a state holding `H_s` after action `a_s`; returns the final outcome.
pub(super) fn resume(spec: &DgpSpec, st: &mut SemiState, s: usize, a_s: u8, policy: &Policy, rng: &mut Rng) -> f64 {
    let nz = StepNoise::draw(spec, rng);
    st.push_outcome(spec, a_s, nz.y);
    for t in s + 1..=spec.tau {
        let nz = StepNoise::draw(spec, rng);
        st.push_covariates(spec, &nz);
        let sc = st.score(spec, t);
        let a = forced_action(Some(policy), t, sc).unwrap_or_else(|| behavior_action(spec, sc, nz.a));
        st.push_outcome(spec, a, nz.y);
    }
    *st.y.last().expect("tau >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::history_scores;
    use crate::rng;

    #[test]
    fn lag_weights_alternate_and_decay() {
        let w = outcome_weights(8);
        assert_eq!(w[0], -1.0);
        assert_eq!(w[1], 0.5);
        assert!((w.iter().sum::<f64>() - (-0.634_523_809_523_809_5)).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_zero_covariates_closed_form() {
        // Oracle: every in-range lag contributes w_i * tanh(sin 0 + cos 0) = w_i * tanh(1).
        let w = outcome_weights(8);
        let tanh1 = 1f64.tanh();
        let spec = DgpSpec::limited(15, 0);
        for policy in [None, Some(Policy::fixed("on", vec![1; 15]))] {
            let tr = simulate_unit_with(&spec, || StepNoise::zero(&spec), policy.as_ref(), 0);
            for t in 1..=15 {
                let y_t = if t < 15 { tr.l(t + 1)[10] } else { tr.outcome };
                let k = t.min(8);
                let expected = 5.0 * tanh1 * w[..k].iter().sum::<f64>();
                assert!((y_t - expected).abs() < 1e-12, "t={t}: {y_t} vs {expected}");
            }
            let full = 5.0 * tanh1 * w.iter().sum::<f64>();
            assert!((tr.outcome - full).abs() < 1e-12);
            assert!((full - (-2.416_248_125_740_610_8_f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn observed_reconstruction_matches_simulation_scores() {
        for spec in [DgpSpec::limited(10, 3), DgpSpec::expanded(10, 3)] {
            let mut rng = rng::stream(5, 1);
            let mut st = SemiState::new(&spec);
            let mut scores = Vec::new();
            for t in 1..=spec.tau {
                let nz = StepNoise::draw(&spec, &mut rng);
                st.push_covariates(&spec, &nz);
                let s = st.score(&spec, t);
                scores.push(s);
                let a = behavior_action(&spec, s, nz.a);
                st.push_outcome(&spec, a, nz.y);
            }
            let tr = st.to_trajectory("x".into());
            let rebuilt = history_scores(&spec, &tr).unwrap();
            for (a, b) in scores.iter().zip(&rebuilt) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
