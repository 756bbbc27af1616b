//! Browser demo bindings: three interactive operations over the core crate,
//! each returning a JSON string for the static page in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use polyq::data::{ActionMatrix, Policy};
use polyq::dgp::{self, DgpSpec};
use polyq::embed::{embed_policies, resolve_bandwidths, trajectory_mmd_with, KernelConfig, SmacofOptions};
use polyq::target::{ltmle, oracle_nuisance, OutcomeScale, TargetConfig};

/// Largest cohort the page may request (keeps the O(n^2) kernels interactive).
pub const MAX_N: usize = 2000;

fn check_n(n: usize) -> Result<(), String> {
    if (2..=MAX_N).contains(&n) {
        Ok(())
    } else {
        Err(format!("n must be in 2..={MAX_N}, got {n}"))
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo output serializes")
}

#[derive(Serialize)]
struct MmdOut {
    gamma_a: f64,
    gamma_b: f64,
    /// Trajectory-level MMD between the two policies' counterfactual trajectories.
    mmd: f64,
    /// Fraction of units whose action sequences differ between the policies.
    differing_units: f64,
    /// Per-step kernel bandwidths used.
    bandwidths: Vec<f64>,
}

/// Trajectory MMD between constant-threshold policies `gamma_a` and `gamma_b`
/// on a simulated cohort of the limited generator.
pub fn mmd_json(gamma_a: f64, gamma_b: f64, n: usize, tau: usize, seed: u64, multiplier: f64) -> Result<String, String> {
    check_n(n)?;
    let spec = DgpSpec::limited(tau, seed);
    let ds = dgp::simulate(&spec, n).map_err(|e| e.to_string())?;
    let ps = [
        Policy::constant_threshold("a", gamma_a, tau),
        Policy::constant_threshold("b", gamma_b, tau),
    ];
    for p in &ps {
        p.validate(tau).map_err(|e| e.to_string())?;
    }
    let am = ActionMatrix::build(&ps, &ds, Some(&spec)).map_err(|e| e.to_string())?;
    let cfg = KernelConfig {
        gamma_multiplier: multiplier,
        seed,
        ..KernelConfig::default()
    };
    let gammas = resolve_bandwidths(&ds, &am, &cfg).map_err(|e| e.to_string())?;
    let mmd = trajectory_mmd_with(&ds, &am.rows[0], &am.rows[1], &gammas).map_err(|e| e.to_string())?;
    let differing = (0..n).filter(|&i| am.rows[0].unit(i) != am.rows[1].unit(i)).count();
    Ok(to_json(&MmdOut {
        gamma_a,
        gamma_b,
        mmd,
        differing_units: differing as f64 / n as f64,
        bandwidths: gammas,
    }))
}

#[derive(Serialize)]
struct EmbedOut {
    labels: Vec<String>,
    /// `points[t-1][k] = [x, y]`.
    points: Vec<Vec<Vec<f64>>>,
    stress: Vec<f64>,
}

/// Two-dimensional policy embeddings for a list of constant thresholds.
pub fn embed_json(thresholds: &[f64], n: usize, tau: usize, seed: u64) -> Result<String, String> {
    check_n(n)?;
    if thresholds.len() < 2 {
        return Err("give at least two thresholds".into());
    }
    let spec = DgpSpec::limited(tau, seed);
    let ds = dgp::simulate(&spec, n).map_err(|e| e.to_string())?;
    let ps: Vec<Policy> = thresholds
        .iter()
        .map(|&g| Policy::constant_threshold(format!("{g}"), g, tau))
        .collect();
    for p in &ps {
        p.validate(tau).map_err(|e| e.to_string())?;
    }
    let am = ActionMatrix::build(&ps, &ds, Some(&spec)).map_err(|e| e.to_string())?;
    let kernel = KernelConfig {
        seed,
        ..KernelConfig::default()
    };
    let opts = SmacofOptions {
        seed,
        ..SmacofOptions::default()
    };
    let emb = embed_policies(&ds, &am, &kernel, 2, &opts).map_err(|e| e.to_string())?;
    Ok(to_json(&EmbedOut {
        labels: ps.into_iter().map(|p| p.label).collect(),
        points: emb.rho,
        stress: emb.stress,
    }))
}

#[derive(Serialize)]
struct LtmleOut {
    truth: f64,
    plugin: f64,
    ltmle: f64,
    se: f64,
    ci: (f64, f64),
    epsilon: Vec<f64>,
}

/// Double robustness on the two-step generator: true propensities, an
/// outcome model shifted by `q_shift`, targeted with penalty `lambda`.
/// `policy` is `"11"`, `"10"`, `"01"`, `"00"` or a threshold such as `"0.5"`.
pub fn ltmle_json(policy: &str, q_shift: f64, lambda: f64, n: usize, seed: u64) -> Result<String, String> {
    check_n(n)?;
    let p = match policy {
        "11" | "10" | "01" | "00" => Policy::fixed(policy, policy.bytes().map(|b| b - b'0').collect()),
        g => Policy::constant_threshold(g, g.parse::<f64>().map_err(|_| format!("unknown policy {g:?}"))?, 2),
    };
    let spec = DgpSpec::tiny(seed);
    let ds = dgp::simulate(&spec, n).map_err(|e| e.to_string())?;
    let scale = OutcomeScale::from_dataset(&ds).map_err(|e| e.to_string())?;
    let cfg = TargetConfig {
        lambda,
        ..TargetConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let truth = dgp::oracle_capo(&spec, &p, 0, 0).map_err(|e| e.to_string())?.value;
    let (acts, nu) = oracle_nuisance(&spec, &ds, &p, q_shift, 0, 0).map_err(|e| e.to_string())?;
    let est = ltmle(&ds, &p.label, &acts, &nu, &scale, &cfg).map_err(|e| e.to_string())?;
    Ok(to_json(&LtmleOut {
        truth,
        plugin: est.psi_plugin,
        ltmle: est.psi_hat,
        se: est.se,
        ci: est.ci,
        epsilon: est.epsilon,
    }))
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trajectoryMmd)]
pub fn trajectory_mmd(gamma_a: f64, gamma_b: f64, n: usize, tau: usize, seed: u32, multiplier: f64) -> Result<String, JsError> {
    js(mmd_json(gamma_a, gamma_b, n, tau, seed as u64, multiplier))
}

#[wasm_bindgen(js_name = embedThresholds)]
pub fn embed_thresholds(thresholds: Vec<f64>, n: usize, tau: usize, seed: u32) -> Result<String, JsError> {
    js(embed_json(&thresholds, n, tau, seed as u64))
}

#[wasm_bindgen(js_name = ltmleDemo)]
pub fn ltmle_demo(policy: &str, q_shift: f64, lambda: f64, n: usize, seed: u32) -> Result<String, JsError> {
    js(ltmle_json(policy, q_shift, lambda, n, seed as u64))
}
