//! RKHS policy embeddings: Gaussian kernels with median-heuristic bandwidths,
//! per-step MMD distance matrices, SMACOF metric MDS and trajectory-level MMD.
//!
//! The point set of policy `k` at step `t` is `{(H_t^(l), a_t^(k,l))}` over the
//! observed units `l`. Every pair of points shares the squared history distance
//! `|H_t - H_t'|^2`, which is cached incrementally across `t`; only the action
//! coordinate differs between policies.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ActionMatrix, Dataset, Policy, PolicyActions, PolicyKind};
use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Explicit per-step bandwidths; the median heuristic is used when absent.
    pub gamma: Option<Vec<f64>>,
    /// Number of pooled points sampled for the median heuristic.
    pub heuristic_sample: usize,
    /// Multiplier applied to the heuristic bandwidth.
    pub gamma_multiplier: f64,
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            gamma: None,
            heuristic_sample: 500,
            gamma_multiplier: 1.0,
            seed: 0,
        }
    }
}

/// `exp(-gamma |x - y|^2)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(x, y)).exp()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `multiplier / (2 * median pairwise distance)` over at most `sample` points;
/// falls back to `1.0` when the median distance is zero.
pub fn median_heuristic(points: &[Vec<f64>], multiplier: f64, sample_size: usize, seed: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Invalid("the median heuristic needs at least two points".into()));
    }
    let idx = sample_indices(points.len(), sample_size, seed);
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            dists.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    Ok(gamma_from_median(median(&mut dists), multiplier))
}

fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    if n <= m {
        return (0..n).collect();
    }
    let mut idx = sample(&mut rng::stream(seed, 0), n, m).into_vec();
    idx.sort_unstable();
    idx
}

fn median(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    let (lower, mid, _) = xs.select_nth_unstable_by(n / 2, f64::total_cmp);
    let mid = *mid;
    if n % 2 == 1 {
        mid
    } else {
        // The largest element below the midpoint is the other middle value.
        0.5 * (lower.iter().copied().fold(f64::NEG_INFINITY, f64::max) + mid)
    }
}

fn gamma_from_median(med: f64, multiplier: f64) -> f64 {
    if med > 0.0 {
        multiplier / (2.0 * med)
    } else {
        1.0
    }
}

/// Biased (V-statistic) MMD `|mu_i - mu_j|` between two point sets.
pub fn mmd(zi: &[Vec<f64>], zj: &[Vec<f64>], gamma: f64) -> Result<f64> {
    if zi.is_empty() || zj.is_empty() {
        return Err(Error::Invalid("mmd needs nonempty point sets".into()));
    }
    let dim = zi[0].len();
    if zi.iter().chain(zj).any(|z| z.len() != dim) {
        return Err(Error::Dimension("mmd point sets have mixed dimensions".into()));
    }
    let mean_gram = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let s: f64 = a.iter().map(|x| b.iter().map(|y| gaussian_kernel(x, y, gamma)).sum::<f64>()).sum();
        s / (a.len() * b.len()) as f64
    };
    Ok(mmd_from_sums(mean_gram(zi, zi), mean_gram(zj, zj), mean_gram(zi, zj)))
}

fn mmd_from_sums(kii: f64, kjj: f64, kij: f64) -> f64 {
    (kii + kjj - 2.0 * kij).max(0.0).sqrt()
}

/// Squared Euclidean distances between observed histories `H_t`, `n x n`.
///
/// Advancing from `t` to `t+1` adds `|L_{t+1} - L'_{t+1}|^2 + (A_t - A'_t)^2`.
#[derive(Debug, Clone)]
pub struct HistoryDistances {
    n: usize,
    t: usize,
    sq: Vec<f64>,
}

impl HistoryDistances {
    /// Distances for `H_1`.
    pub fn new(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Invalid("cannot embed policies on an empty dataset".into()));
        }
        let mut hd = HistoryDistances {
            n: ds.len(),
            t: 0,
            sq: vec![0.0; ds.len() * ds.len()],
        };
        hd.advance(ds);
        Ok(hd)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Entry for units `(l, m)`.
    pub fn get(&self, l: usize, m: usize) -> f64 {
        self.sq[l * self.n + m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sq
    }

    /// Moves to `H_{t+1}`.
    pub fn advance(&mut self, ds: &Dataset) {
        let t = self.t + 1;
        let n = self.n;
        let trs = &ds.trajectories;
        // Upper triangle, mirrored: the matrix is symmetric with zero diagonal.
        let rows = par_map(n, |l| {
            let lt = trs[l].l(t);
            let al = trs[l].a(t - 1) as f64;
            (l + 1..n)
                .map(|m| sq_dist(lt, trs[m].l(t)) + (al - trs[m].a(t - 1) as f64).powi(2))
                .collect::<Vec<f64>>()
        });
        for (l, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                let m = l + 1 + off;
                self.sq[l * n + m] += v;
                self.sq[m * n + l] += v;
            }
        }
        self.t = t;
    }
}

/// Median-heuristic bandwidth for step `t` from pooled `(H_t, action)` points.
pub fn median_bandwidth(ds: &Dataset, action_rows: &[Vec<u8>], cfg: &KernelConfig, t: usize) -> Result<f64> {
    if t == 0 || t > ds.tau {
        return Err(Error::Index(format!("t={t} outside 1..={}", ds.tau)));
    }
    let mut hd = HistoryDistances::new(ds)?;
    while hd.t() < t {
        hd.advance(ds);
    }
    let rows: Vec<&[u8]> = action_rows.iter().map(Vec::as_slice).collect();
    bandwidth_from_cache(&hd, &rows, cfg)
}

fn bandwidth_from_cache(hd: &HistoryDistances, rows: &[&[u8]], cfg: &KernelConfig) -> Result<f64> {
    let n = hd.n;
    let pooled = rows.len() * n;
    if pooled < 2 {
        return Err(Error::Invalid("the median heuristic needs at least two points".into()));
    }
    let idx = sample_indices(pooled, cfg.heuristic_sample, rng::derive_seed(cfg.seed, hd.t as u64));
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (p, &u) in idx.iter().enumerate() {
        let (ku, lu) = (u / n, u % n);
        for &v in &idx[p + 1..] {
            let (kv, lv) = (v / n, v % n);
            let da = rows[ku][lu] as f64 - rows[kv][lv] as f64;
            dists.push((hd.get(lu, lv) + da * da).sqrt());
        }
    }
    Ok(gamma_from_median(median(&mut dists), cfg.gamma_multiplier))
}

/// Per-step normalized MMD distance matrices between policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrices {
    /// `d[t-1][i][j]`.
    pub d: Vec<Vec<Vec<f64>>>,
    /// Maximum raw MMD per step (the normalizer; 0 when skipped).
    pub raw_max: Vec<f64>,
    pub normalized: bool,
    /// Bandwidth used at each step.
    pub gamma: Vec<f64>,
}

impl DistanceMatrices {
    pub fn k(&self) -> usize {
        self.d.first().map_or(0, Vec::len)
    }
}

/// `exp(-gamma * sq)` for a symmetric `n x n` matrix, evaluated on one triangle.
fn kernel_matrix(sq: &[f64], n: usize, gamma: f64) -> Vec<f64> {
    let mut e = vec![1.0; n * n];
    for l in 0..n {
        for m in l + 1..n {
            let v = (-gamma * sq[l * n + m]).exp();
            e[l * n + m] = v;
            e[m * n + l] = v;
        }
    }
    e
}

/// Sum over unit pairs of `exp(-gamma (|H - H'|^2 + (a - a')^2))` for two action rows.
fn gram_sum(e0: &[f64], n: usize, off: f64, ai: &[u8], aj: &[u8]) -> f64 {
    let weight = [1.0, off];
    let mut total = 0.0;
    for l in 0..n {
        let row = &e0[l * n..(l + 1) * n];
        let al = ai[l];
        let mut s = 0.0;
        for (m, e) in row.iter().enumerate() {
            s += e * weight[(al ^ aj[m]) as usize];
        }
        total += s;
    }
    total
}

/// Raw (unnormalized) MMD matrices for every step, plus the bandwidths used.
fn raw_distances(ds: &Dataset, actions: &ActionMatrix, cfg: &KernelConfig) -> Result<(Vec<Vec<Vec<f64>>>, Vec<f64>)> {
    let k = actions.k();
    let n = ds.len();
    let tau = ds.tau;
    check_actions(ds, actions)?;
    if let Some(g) = &cfg.gamma {
        check_gamma(g, tau)?;
    }
    let mut hd = HistoryDistances::new(ds)?;
    let mut out = Vec::with_capacity(tau);
    let mut gammas = Vec::with_capacity(tau);
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    for t in 1..=tau {
        if t > 1 {
            hd.advance(ds);
        }
        let cols: Vec<Vec<u8>> = actions.rows.iter().map(|r| r.at_step(t)).collect();
        let rows: Vec<&[u8]> = cols.iter().map(Vec::as_slice).collect();
        let gamma = match &cfg.gamma {
            Some(g) => g[t - 1],
            None => bandwidth_from_cache(&hd, &rows, cfg)?,
        };
        let e0 = kernel_matrix(&hd.sq, n, gamma);
        let off = (-gamma).exp();
        let nn = (n * n) as f64;
        let selfs = par_map(k, |i| gram_sum(&e0, n, off, rows[i], rows[i]) / nn);
        let cross = par_map(pairs.len(), |p| {
            let (i, j) = pairs[p];
            gram_sum(&e0, n, off, rows[i], rows[j]) / nn
        });
        let mut d = vec![vec![0.0; k]; k];
        for (&(i, j), &kij) in pairs.iter().zip(&cross) {
            let v = mmd_from_sums(selfs[i], selfs[j], kij);
            d[i][j] = v;
            d[j][i] = v;
        }
        out.push(d);
        gammas.push(gamma);
    }
    Ok((out, gammas))
}

fn check_actions(ds: &Dataset, actions: &ActionMatrix) -> Result<()> {
    if actions.rows.iter().any(|r| r.n != ds.len() || r.tau != ds.tau) {
        return Err(Error::Shape("action matrix does not match the dataset".into()));
    }
    Ok(())
}

fn check_gamma(g: &[f64], tau: usize) -> Result<()> {
    if g.len() != tau {
        return Err(Error::Shape(format!("{} bandwidths for tau={tau}", g.len())));
    }
    if g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid("bandwidths must be positive".into()));
    }
    Ok(())
}

/// MMD distance matrices for every step, each divided by its maximum entry.
pub fn distance_matrices(ds: &Dataset, actions: &ActionMatrix, cfg: &KernelConfig) -> Result<DistanceMatrices> {
    if actions.k() < 2 {
        return Err(Error::Invalid("distance matrices need at least two policies".into()));
    }
    let (raw, gamma) = raw_distances(ds, actions, cfg)?;
    let mut raw_max = Vec::with_capacity(raw.len());
    let d = raw
        .into_iter()
        .map(|mut m| {
            let max = m.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
            if max > 0.0 {
                m.iter_mut().flatten().for_each(|v| *v /= max);
            }
            raw_max.push(max);
            m
        })
        .collect();
    Ok(DistanceMatrices {
        d,
        raw_max,
        normalized: true,
        gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmacofOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SmacofOptions {
    fn default() -> Self {
        SmacofOptions {
            max_iter: 300,
            tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdsResult {
    /// `K x d` coordinates.
    pub points: Vec<Vec<f64>>,
    /// Final raw stress `sum_{i<j} (D_ij - |x_i - x_j|)^2`.
    pub stress: f64,
    /// Stress at the start and after every Guttman transform.
    pub history: Vec<f64>,
}

/// Raw stress of a configuration.
pub fn stress(d: &[Vec<f64>], x: &[Vec<f64>]) -> f64 {
    let k = d.len();
    let mut s = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let r = d[i][j] - sq_dist(&x[i], &x[j]).sqrt();
            s += r * r;
        }
    }
    s
}

/// `sum_{i<j} D_ij^2`, the scale of the raw stress.
pub fn normalizer(d: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (i, row) in d.iter().enumerate() {
        for v in &row[..i] {
            s += v * v;
        }
    }
    s
}

fn validate_dissimilarity(d: &[Vec<f64>]) -> Result<()> {
    let k = d.len();
    for (i, row) in d.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Shape(format!("distance matrix row {i} has {} entries, expected {k}", row.len())));
        }
        if row[i] != 0.0 {
            return Err(Error::Invalid(format!("distance matrix has nonzero diagonal at {i}")));
        }
        for j in 0..i {
            if !(row[j] >= 0.0 && row[j].is_finite()) {
                return Err(Error::Invalid(format!("distance matrix entry ({i}, {j}) is not a finite nonnegative value")));
            }
            let scale = row[j].abs().max(d[j][i].abs()).max(1.0);
            if (row[j] - d[j][i]).abs() > 1e-12 * scale {
                return Err(Error::NotSymmetric { i, j });
            }
        }
    }
    Ok(())
}

/// Metric MDS by stress majorization (SMACOF) from a classical-scaling start.
pub fn smacof_mds(d: &[Vec<f64>], dim: usize, opts: &SmacofOptions) -> Result<MdsResult> {
    validate_dissimilarity(d)?;
    if dim == 0 {
        return Err(Error::Invalid("embedding dimension must be positive".into()));
    }
    let k = d.len();
    let max = d.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    if k < 2 || max == 0.0 {
        return Ok(MdsResult {
            points: vec![vec![0.0; dim]; k],
            stress: 0.0,
            history: vec![0.0],
        });
    }
    let mut x = classical_start(d, dim, max, opts.seed);
    let mut s = stress(d, &x);
    let mut history = vec![s];
    // Stress below rounding level of the squared dissimilarities is zero.
    let floor = f64::EPSILON * f64::EPSILON * normalizer(d);
    for _ in 0..opts.max_iter {
        if s <= floor {
            break;
        }
        x = guttman(d, &x);
        let next = stress(d, &x);
        history.push(next);
        let drop = s - next;
        s = next;
        if drop < opts.tol * history[history.len() - 2] {
            break;
        }
    }
    Ok(MdsResult {
        points: x,
        stress: s,
        history,
    })
}

/// Torgerson scaling of the squared distances; columns without a positive
/// eigenvalue are filled with small seeded noise so majorization can use them.
fn classical_start(d: &[Vec<f64>], dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let k = d.len();
    let d2 = DMatrix::from_fn(k, k, |i, j| d[i][j] * d[i][j]);
    let row_mean: Vec<f64> = (0..k).map(|i| d2.row(i).sum() / k as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / k as f64;
    let b = DMatrix::from_fn(k, k, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let mut rng = rng::stream(seed, 0);
    let mut x = vec![vec![0.0; dim]; k];
    for c in 0..dim {
        let lam = order.get(c).map_or(0.0, |&o| eig.eigenvalues[o]);
        if lam > 1e-10 * top {
            let o = order[c];
            for (i, row) in x.iter_mut().enumerate() {
                row[c] = eig.eigenvectors[(i, o)] * lam.sqrt();
            }
        } else {
            for row in x.iter_mut() {
                row[c] = 1e-4 * scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    x
}

/// One Guttman transform `X <- B(X) X / K` (unit weights).
fn guttman(d: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = d.len();
    let dim = x[0].len();
    let mut out = vec![vec![0.0; dim]; k];
    for i in 0..k {
        let mut diag = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let dij = sq_dist(&x[i], &x[j]).sqrt();
            if dij > 0.0 {
                let b = -d[i][j] / dij;
                diag -= b;
                for c in 0..dim {
                    out[i][c] += b * x[j][c];
                }
            }
        }
        for c in 0..dim {
            out[i][c] += diag * x[i][c];
            out[i][c] /= k as f64;
        }
    }
    out
}

/// Replaces every group of zero-distance rows by the group mean.
fn collapse_identical(d: &[Vec<f64>], x: &mut [Vec<f64>]) {
    let k = d.len();
    let mut group: Vec<usize> = (0..k).collect();
    for i in 0..k {
        if group[i] != i {
            continue;
        }
        for j in i + 1..k {
            if group[j] == j && d[i][j] == 0.0 {
                group[j] = i;
            }
        }
    }
    for g in 0..k {
        let members: Vec<usize> = (0..k).filter(|&i| group[i] == g).collect();
        if members.len() < 2 {
            continue;
        }
        let dim = x[g].len();
        let mean: Vec<f64> = (0..dim)
            .map(|c| members.iter().map(|&i| x[i][c]).sum::<f64>() / members.len() as f64)
            .collect();
        for &i in &members {
            x[i].clone_from(&mean);
        }
    }
}

/// Per-step policy embeddings `rho_t^(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEmbedding {
    /// `rho[t-1][k]`, each of length `d`.
    pub rho: Vec<Vec<Vec<f64>>>,
    pub d: usize,
    /// Final stress per step (0 for the deterministic bypass).
    pub stress: Vec<f64>,
    /// Bandwidth per step (empty for the deterministic bypass).
    pub gamma: Vec<f64>,
    pub distances: Option<DistanceMatrices>,
}

impl PolicyEmbedding {
    pub fn k(&self) -> usize {
        self.rho.first().map_or(0, Vec::len)
    }

    pub fn tau(&self) -> usize {
        self.rho.len()
    }

    /// `rho_{t+1..tau}` of policy `k`, in time order.
    pub fn tail(&self, k: usize, t: usize) -> Vec<&[f64]> {
        self.rho[t..].iter().map(|step| step[k].as_slice()).collect()
    }

    /// Long-format CSV `t,k,dim,value` (1-based `t`, 0-based `k` and `dim`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,k,dim,value\n");
        for (t, step) in self.rho.iter().enumerate() {
            for (k, row) in step.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    out.push_str(&format!("{},{k},{c},{v}\n", t + 1));
                }
            }
        }
        out
    }

    /// CSV `t,stress,gamma` of the per-step MDS fit.
    pub fn stress_csv(&self) -> String {
        let mut out = String::from("t,stress,gamma\n");
        for (t, s) in self.stress.iter().enumerate() {
            let g = self.gamma.get(t).map_or(String::new(), |g| g.to_string());
            out.push_str(&format!("{},{s},{g}\n", t + 1));
        }
        out
    }

    /// Embedding restricted to one policy.
    pub fn select(&self, k: usize) -> PolicyEmbedding {
        PolicyEmbedding {
            rho: self.rho.iter().map(|step| vec![step[k].clone()]).collect(),
            d: self.d,
            stress: self.stress.clone(),
            gamma: self.gamma.clone(),
            distances: None,
        }
    }
}

/// Policy embedding: distance matrices followed by per-step SMACOF.
pub fn embed_policies(
    ds: &Dataset,
    actions: &ActionMatrix,
    cfg: &KernelConfig,
    d: usize,
    opts: &SmacofOptions,
) -> Result<PolicyEmbedding> {
    check_actions(ds, actions)?;
    let k = actions.k();
    if k == 0 {
        return Err(Error::Invalid("no policies to embed".into()));
    }
    if k == 1 {
        return Ok(PolicyEmbedding {
            rho: vec![vec![vec![0.0; d]]; ds.tau],
            d,
            stress: vec![0.0; ds.tau],
            gamma: Vec::new(),
            distances: None,
        });
    }
    let dm = distance_matrices(ds, actions, cfg)?;
    let fits = par_map(dm.d.len(), |t| {
        let o = SmacofOptions {
            seed: rng::derive_seed(opts.seed, t as u64),
            ..*opts
        };
        smacof_mds(&dm.d[t], d, &o)
    });
    let mut rho = Vec::with_capacity(fits.len());
    let mut stresses = Vec::with_capacity(fits.len());
    for (t, fit) in fits.into_iter().enumerate() {
        let mut fit = fit?;
        collapse_identical(&dm.d[t], &mut fit.points);
        stresses.push(stress(&dm.d[t], &fit.points));
        rho.push(fit.points);
    }
    Ok(PolicyEmbedding {
        rho,
        d,
        stress: stresses,
        gamma: dm.gamma.clone(),
        distances: Some(dm),
    })
}

/// Convenience wrapper building the action matrix from policies.
pub fn embed_policy_set(
    ds: &Dataset,
    policies: &[Policy],
    spec: Option<&DgpSpec>,
    cfg: &KernelConfig,
    d: usize,
    opts: &SmacofOptions,
) -> Result<PolicyEmbedding> {
    let actions = ActionMatrix::build(policies, ds, spec)?;
    embed_policies(ds, &actions, cfg, d, opts)
}

/// Bypass for fixed sequences: `rho_t^(k) = [a_t^(k)]`, `d = 1`.
pub fn deterministic_embedding(policies: &[Policy], tau: usize) -> Result<PolicyEmbedding> {
    let seqs = policies
        .iter()
        .map(|p| match &p.kind {
            PolicyKind::FixedSequence { actions } if actions.len() == tau => Ok(actions.clone()),
            _ => Err(Error::Invalid(format!(
                "policy {} is not a fixed sequence of length {tau}; the bypass needs fixed sequences",
                p.label
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyEmbedding {
        rho: (0..tau).map(|t| seqs.iter().map(|s| vec![s[t] as f64]).collect()).collect(),
        d: 1,
        stress: vec![0.0; tau],
        gamma: Vec::new(),
        distances: None,
    })
}

/// Resolves per-step bandwidths: explicit ones, or the median heuristic over
/// the pooled points of all given policies.
pub fn resolve_bandwidths(ds: &Dataset, actions: &ActionMatrix, cfg: &KernelConfig) -> Result<Vec<f64>> {
    check_actions(ds, actions)?;
    if let Some(g) = &cfg.gamma {
        check_gamma(g, ds.tau)?;
        return Ok(g.clone());
    }
    let mut hd = HistoryDistances::new(ds)?;
    let mut out = Vec::with_capacity(ds.tau);
    for t in 1..=ds.tau {
        if t > 1 {
            hd.advance(ds);
        }
        let cols: Vec<Vec<u8>> = actions.rows.iter().map(|r| r.at_step(t)).collect();
        let rows: Vec<&[u8]> = cols.iter().map(Vec::as_slice).collect();
        out.push(bandwidth_from_cache(&hd, &rows, cfg)?);
    }
    Ok(out)
}

/// Weighted sum `sum_t gamma_t |H_t - H_t'|^2`, `n x n`.
fn weighted_history_distances(ds: &Dataset, gammas: &[f64]) -> Result<Vec<f64>> {
    let mut hd = HistoryDistances::new(ds)?;
    let mut acc: Vec<f64> = hd.sq.iter().map(|s| gammas[0] * s).collect();
    for &g in &gammas[1..] {
        hd.advance(ds);
        acc.iter_mut().zip(&hd.sq).for_each(|(a, s)| *a += g * s);
    }
    Ok(acc)
}

fn trajectory_gram_sum(wh: &[f64], n: usize, gammas: &[f64], ai: &PolicyActions, aj: &PolicyActions) -> f64 {
    let mut total = 0.0;
    for l in 0..n {
        let ul = ai.unit(l);
        let mut s = 0.0;
        for m in 0..n {
            let um = aj.unit(m);
            let mut da = 0.0;
            for (t, g) in gammas.iter().enumerate() {
                if ul[t] != um[t] {
                    da += g;
                }
            }
            s += (-(wh[l * n + m] + da)).exp();
        }
        total += s;
    }
    total
}

/// Trajectory-level MMD under the product kernel `prod_t k_t(z_t, z_t')`.
pub fn trajectory_mmd_with(ds: &Dataset, ai: &PolicyActions, aj: &PolicyActions, gammas: &[f64]) -> Result<f64> {
    let (first, second) = canonical_pair(ai, aj);
    Ok(trajectory_mmd_matrix_with(ds, &[first, second], gammas)?[0][1])
}

/// Orders a pair of action rows canonically so that pair computations
/// (sampled medians, floating-point summation order) are exactly symmetric.
fn canonical_pair<'a>(ai: &'a PolicyActions, aj: &'a PolicyActions) -> (&'a PolicyActions, &'a PolicyActions) {
    let rows = |a: &'a PolicyActions| (0..a.n).map(move |i| a.unit(i));
    if rows(ai).le(rows(aj)) {
        (ai, aj)
    } else {
        (aj, ai)
    }
}

pub fn trajectory_mmd(ds: &Dataset, ai: &PolicyActions, aj: &PolicyActions, cfg: &KernelConfig) -> Result<f64> {
    let (first, second) = canonical_pair(ai, aj);
    let both = ActionMatrix {
        rows: vec![first.clone(), second.clone()],
    };
    let gammas = resolve_bandwidths(ds, &both, cfg)?;
    trajectory_mmd_with(ds, ai, aj, &gammas)
}

/// All pairwise trajectory MMDs (unnormalized) for a set of action rows.
pub fn trajectory_mmd_matrix_with(ds: &Dataset, rows: &[&PolicyActions], gammas: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_gamma(gammas, ds.tau)?;
    if rows.iter().any(|r| r.n != ds.len() || r.tau != ds.tau) {
        return Err(Error::Shape("action rows do not match the dataset".into()));
    }
    let n = ds.len();
    let k = rows.len();
    let wh = weighted_history_distances(ds, gammas)?;
    let nn = (n * n) as f64;
    let selfs = par_map(k, |i| trajectory_gram_sum(&wh, n, gammas, rows[i], rows[i]) / nn);
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let cross = par_map(pairs.len(), |p| {
        let (i, j) = pairs[p];
        trajectory_gram_sum(&wh, n, gammas, rows[i], rows[j]) / nn
    });
    let mut out = vec![vec![0.0; k]; k];
    for (&(i, j), &kij) in pairs.iter().zip(&cross) {
        let v = mmd_from_sums(selfs[i], selfs[j], kij);
        out[i][j] = v;
        out[j][i] = v;
    }
    Ok(out)
}
