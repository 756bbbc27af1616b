//! Experiment harness for the semi-synthetic benchmarks: policy suites, a
//! disk-cached ground-truth oracle, the per-seed pipeline (simulate, tune,
//! embed, train, target), metric aggregation and report emission, plus the
//! bandwidth-sensitivity, runtime-scaling and remainder-diagnostic protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ActionMatrix, Dataset, Policy};
use crate::dgp::{self, DgpSpec, OracleResult};
use crate::embed::{
    deterministic_embedding, embed_policies, resolve_bandwidths, trajectory_mmd_with, KernelConfig, PolicyEmbedding,
    SmacofOptions,
};
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rng;
use crate::target::{
    diagnostics_csv, estimate_all, ltmle, remainder_diagnostic, write_text, DiagnosticConfig, DiagnosticSide, EstimateReport,
    OutcomeScale, RemainderDiagnostic, TargetConfig,
};
use crate::train::{select_hyperparams, train, zero_embedding, HyperGrid, Mode, TrainConfig, TrainedEstimator};

/// Named counterfactual policy sets of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Baseline always-treat; CF1a never; CF2a start at step 5; CF3a first 10 steps then stop.
    DeterministicA,
    /// Baseline gamma = 0.5; CF1b / CF2b use 0.4 / 0.6 on the first two steps only.
    DynamicB,
    /// Baseline gamma = 0.5; constant 0.4, 0.6 and the extremes 0 and 1.
    DynamicC,
    /// Baseline gamma = 0.5 and an exact duplicate of it.
    Duplicate,
    /// Baseline gamma = 0.5 against constants 0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7
    /// (the 0.5 member behaves exactly like the baseline).
    ThresholdFamily,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::DeterministicA,
        Suite::DynamicB,
        Suite::DynamicC,
        Suite::Duplicate,
        Suite::ThresholdFamily,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::DeterministicA => "deterministic_a",
            Suite::DynamicB => "dynamic_b",
            Suite::DynamicC => "dynamic_c",
            Suite::Duplicate => "duplicate",
            Suite::ThresholdFamily => "threshold_family",
        }
    }

    /// Fixed-sequence suites skip MDS and feed the action sequence directly.
    pub fn uses_bypass(self) -> bool {
        self == Suite::DeterministicA
    }

    /// The suite's policies; the baseline is always the first entry.
    pub fn policies(self, tau: usize) -> Result<Vec<Policy>> {
        let base = Policy::constant_threshold("baseline", 0.5, tau);
        let early = |label: &str, g: f64| {
            let mut gamma = vec![0.5; tau];
            for v in gamma.iter_mut().take(2) {
                *v = g;
            }
            Policy::threshold(label, gamma)
        };
        Ok(match self {
            Suite::DeterministicA => {
                if tau < 10 {
                    return Err(Error::Invalid(format!("suite deterministic_a needs tau >= 10, got {tau}")));
                }
                vec![
                    Policy::fixed("baseline", vec![1; tau]),
                    Policy::fixed("CF1a", vec![0; tau]),
                    Policy::fixed("CF2a", (1..=tau).map(|t| u8::from(t >= 5)).collect()),
                    Policy::fixed("CF3a", (1..=tau).map(|t| u8::from(t <= 10)).collect()),
                ]
            }
            Suite::DynamicB => vec![base, early("CF1b", 0.4), early("CF2b", 0.6)],
            Suite::DynamicC => vec![
                base,
                Policy::constant_threshold("CF1c", 0.4, tau),
                Policy::constant_threshold("CF2c", 0.6, tau),
                Policy::constant_threshold("CF3c", 0.0, tau),
                Policy::constant_threshold("CF4c", 1.0, tau),
            ],
            Suite::Duplicate => vec![base, Policy::constant_threshold("duplicate", 0.5, tau)],
            Suite::ThresholdFamily => {
                let mut ps = vec![base];
                for g in [0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7] {
                    ps.push(Policy::constant_threshold(format!("gamma_{g}"), g, tau));
                }
                ps
            }
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown suite {s:?}")))
    }
}

/// Embedding settings of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSettings {
    pub dim: usize,
    pub gamma_multiplier: f64,
    pub heuristic_sample: usize,
    pub smacof_max_iter: usize,
    pub smacof_tol: f64,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings {
            dim: 2,
            gamma_multiplier: 1.0,
            heuristic_sample: 500,
            smacof_max_iter: 300,
            smacof_tol: 1e-9,
        }
    }
}

impl EmbedSettings {
    pub fn kernel(&self, seed: u64) -> KernelConfig {
        KernelConfig {
            gamma: None,
            heuristic_sample: self.heuristic_sample,
            gamma_multiplier: self.gamma_multiplier,
            seed,
        }
    }

    pub fn smacof(&self, seed: u64) -> SmacofOptions {
        SmacofOptions {
            max_iter: self.smacof_max_iter,
            tol: self.smacof_tol,
            seed,
        }
    }
}

/// Which units the targeting step is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalSplit {
    /// Train and target on the same units (the benchmark protocol).
    ReuseAll,
    /// Hold out this fraction of units for targeting.
    Holdout(f64),
}

impl FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reuse-all" | "reuse_all" | "all" => Ok(EvalSplit::ReuseAll),
            other => match other.parse::<f64>() {
                Ok(f) if f > 0.0 && f < 1.0 => Ok(EvalSplit::Holdout(f)),
                _ => Err(Error::Invalid(format!(
                    "eval split must be \"reuse-all\" or a fraction in (0, 1), got {other:?}"
                ))),
            },
        }
    }
}

/// Top-level experiment configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub suite: Suite,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub grid: HyperGrid,
    /// Random-search draws over `grid`; 0 trains with `train` as given.
    pub n_draws: usize,
    /// Fraction of units used for fitting during the search (rest validates).
    pub select_fraction: f64,
    pub target: TargetConfig,
    pub embed: EmbedSettings,
    pub oracle_n_mc: usize,
    /// Seed of the oracle's Monte-Carlo rollouts, shared by all data seeds.
    pub oracle_seed: u64,
    /// `"reuse-all"` or a held-out fraction such as `"0.2"`.
    pub eval_split: String,
    pub diagnostic: DiagnosticConfig,
    pub output_dir: PathBuf,
    /// Directory for cached oracle values; no caching when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dgp: DgpSpec::default(),
            n: 1000,
            suite: Suite::DynamicB,
            modes: vec![Mode::JointPeq, Mode::Separate],
            seeds: (0..20).collect(),
            train: TrainConfig::default(),
            grid: HyperGrid::default(),
            n_draws: 5,
            select_fraction: 0.8,
            target: TargetConfig::default(),
            embed: EmbedSettings::default(),
            oracle_n_mc: 100_000,
            oracle_seed: 0,
            eval_split: "reuse-all".into(),
            diagnostic: DiagnosticConfig::default(),
            output_dir: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.train.validate()?;
        self.target.validate()?;
        if self.n < 2 {
            return Err(Error::Invalid(format!("n must be >= 2, got {}", self.n)));
        }
        if self.modes.is_empty() {
            return Err(Error::Invalid("at least one estimator mode is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Invalid("at least one seed is required".into()));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction < 1.0) {
            return Err(Error::Invalid(format!("select_fraction must be in (0, 1), got {}", self.select_fraction)));
        }
        if self.embed.dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        if !(self.embed.gamma_multiplier > 0.0) {
            return Err(Error::Invalid("gamma_multiplier must be positive".into()));
        }
        if self.dgp.variant != dgp::Variant::Tiny && self.oracle_n_mc < 2 {
            return Err(Error::Invalid("oracle_n_mc must be >= 2".into()));
        }
        self.eval_split()?;
        self.suite.policies(self.dgp.tau)?.iter().try_for_each(|p| p.validate(self.dgp.tau))
    }

    pub fn eval_split(&self) -> Result<EvalSplit> {
        self.eval_split.parse()
    }
}

/// Ground-truth CAPOs, optionally cached on disk by a content hash of
/// `(spec without its data seed, policy kind, n_mc, mc seed)`.
#[derive(Debug, Clone, Default)]
pub struct OracleCache {
    pub dir: Option<PathBuf>,
}

impl OracleCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        OracleCache { dir }
    }

    pub fn key(spec: &DgpSpec, policy: &Policy, n_mc: usize, seed: u64) -> String {
        let spec = DgpSpec { seed: 0, ..spec.clone() };
        let text = serde_json::to_string(&(&spec, &policy.kind, n_mc, seed)).expect("key serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn capo(&self, spec: &DgpSpec, policy: &Policy, n_mc: usize, seed: u64) -> Result<OracleResult> {
        let Some(dir) = &self.dir else {
            return dgp::oracle_capo(spec, policy, n_mc, seed);
        };
        let path = dir.join(format!("{}.json", OracleCache::key(spec, policy, n_mc, seed)));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return Ok(v);
            }
            log::warn!("ignoring unreadable oracle cache entry {}", path.display());
        }
        let v = dgp::oracle_capo(spec, policy, n_mc, seed)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&path, &serde_json::to_string(&v).expect("oracle serializes"))?;
        Ok(v)
    }
}

/// One contrast `CF - baseline` for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub suite: String,
    pub mode: Mode,
    pub contrast: String,
    pub seed: u64,
    pub estimate: f64,
    pub oracle: f64,
    pub abs_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub suite: String,
    pub mode: Mode,
    pub contrast: String,
    pub mean_abs_bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub suite: String,
    pub mode: Mode,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<SeedRow>,
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<FailureRow>,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

impl MetricsTable {
    /// Aggregates per (suite, mode, contrast) in first-appearance order.
    pub fn from_rows(rows: Vec<SeedRow>, failures: Vec<FailureRow>) -> Self {
        let mut order: Vec<(String, Mode, String)> = Vec::new();
        for r in &rows {
            let k = (r.suite.clone(), r.mode, r.contrast.clone());
            if !order.contains(&k) {
                order.push(k);
            }
        }
        let aggregates = order
            .into_iter()
            .map(|(suite, mode, contrast)| {
                let sel: Vec<&SeedRow> = rows
                    .iter()
                    .filter(|r| r.suite == suite && r.mode == mode && r.contrast == contrast)
                    .collect();
                let m = sel.len() as f64;
                let mean_abs_bias = sel.iter().map(|r| r.abs_bias).sum::<f64>() / m;
                let sd = if sel.len() > 1 {
                    (sel.iter().map(|r| (r.abs_bias - mean_abs_bias).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
                } else {
                    0.0
                };
                let rmse = (sel.iter().map(|r| (r.estimate - r.oracle).powi(2)).sum::<f64>() / m).sqrt();
                AggregateRow {
                    suite,
                    mode,
                    contrast,
                    mean_abs_bias,
                    sd,
                    rmse,
                    n_seeds: sel.len(),
                }
            })
            .collect();
        MetricsTable {
            rows,
            aggregates,
            failures,
        }
    }

    pub fn aggregate(&self, mode: Mode, contrast: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.mode == mode && a.contrast == contrast)
    }

    pub fn rmse(&self, mode: Mode, contrast: &str) -> Option<f64> {
        self.aggregate(mode, contrast).map(|a| a.rmse)
    }

    /// `metrics.csv`: per-seed rows then aggregate rows (`seed = all`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,mode,contrast,seed,estimate,oracle,abs_bias,mean_abs_bias,sd,rmse,n_seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},,,,",
                r.suite,
                r.mode,
                r.contrast,
                r.seed,
                fmt_f(r.estimate),
                fmt_f(r.oracle),
                fmt_f(r.abs_bias)
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},{},all,,,,{},{},{},{}",
                a.suite,
                a.mode,
                a.contrast,
                fmt_f(a.mean_abs_bias),
                fmt_f(a.sd),
                fmt_f(a.rmse),
                a.n_seeds
            );
        }
        out
    }

    /// Parses the output of [`MetricsTable::to_csv`] back (failures are not
    /// part of the CSV). Floats round-trip exactly.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty metrics csv".into()))?;
        if header != "suite,mode,contrast,seed,estimate,oracle,abs_bias,mean_abs_bias,sd,rmse,n_seeds" {
            return Err(Error::Invalid(format!("unexpected metrics header {header:?}")));
        }
        let num = |s: &str, line: usize| -> Result<f64> {
            s.parse().map_err(|_| Error::Invalid(format!("metrics line {line}: bad number {s:?}")))
        };
        let mut rows = Vec::new();
        let mut aggregates = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(Error::Invalid(format!("metrics line {line_no}: expected 11 fields")));
            }
            let mode: Mode = f[1].parse()?;
            if f[3] == "all" {
                aggregates.push(AggregateRow {
                    suite: f[0].to_string(),
                    mode,
                    contrast: f[2].to_string(),
                    mean_abs_bias: num(f[7], line_no)?,
                    sd: num(f[8], line_no)?,
                    rmse: num(f[9], line_no)?,
                    n_seeds: f[10]
                        .parse()
                        .map_err(|_| Error::Invalid(format!("metrics line {line_no}: bad n_seeds")))?,
                });
            } else {
                rows.push(SeedRow {
                    suite: f[0].to_string(),
                    mode,
                    contrast: f[2].to_string(),
                    seed: f[3]
                        .parse()
                        .map_err(|_| Error::Invalid(format!("metrics line {line_no}: bad seed")))?,
                    estimate: num(f[4], line_no)?,
                    oracle: num(f[5], line_no)?,
                    abs_bias: num(f[6], line_no)?,
                });
            }
        }
        Ok(MetricsTable {
            rows,
            aggregates,
            failures: Vec::new(),
        })
    }

    fn contrasts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in &self.aggregates {
            if !out.contains(&a.contrast) {
                out.push(a.contrast.clone());
            }
        }
        out
    }

    fn modes(&self) -> Vec<Mode> {
        let mut out = Vec::new();
        for a in &self.aggregates {
            if !out.contains(&a.mode) {
                out.push(a.mode);
            }
        }
        for f in &self.failures {
            if !out.contains(&f.mode) {
                out.push(f.mode);
            }
        }
        out
    }

    /// Markdown summary: one row per contrast, one column per estimator,
    /// cells `mean |bias| ± sd` with RMSE, mirroring Tables 1–2.
    pub fn to_markdown(&self, title: &str) -> String {
        let modes = self.modes();
        let mut out = format!("# {title}\n\nAbsolute bias (mean ± sd over seeds) and RMSE of each contrast `CF − baseline`.\n\n");
        out.push_str("| Contrast |");
        for m in &modes {
            let _ = write!(out, " {m} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(modes.len()));
        out.push('\n');
        for c in self.contrasts() {
            let _ = write!(out, "| {c} |");
            for &m in &modes {
                match self.aggregate(m, &c) {
                    Some(a) => {
                        let _ = write!(
                            out,
                            " {:.4} ± {:.4} (RMSE {:.4}, n={}) |",
                            a.mean_abs_bias, a.sd, a.rmse, a.n_seeds
                        );
                    }
                    None => out.push_str(" – |"),
                }
            }
            out.push('\n');
        }
        if !self.failures.is_empty() {
            out.push_str("\n## Failed seeds\n\n");
            for f in &self.failures {
                let _ = writeln!(out, "- {} / {} / seed {}: {}", f.suite, f.mode, f.seed, f.message);
            }
        }
        out
    }

    /// SVG bar chart of RMSE: one group per contrast, one bar per estimator.
    pub fn to_svg(&self, title: &str) -> String {
        let contrasts = self.contrasts();
        let modes = self.modes();
        let colors = ["#2b6cb0", "#dd6b20", "#38a169", "#805ad5"];
        let (w, h, left, bottom, top) = (120.0 * contrasts.len().max(1) as f64 + 140.0, 360.0, 70.0, 50.0, 40.0);
        let plot_h = h - bottom - top;
        let max = self
            .aggregates
            .iter()
            .map(|a| a.rmse)
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let ymax = if max > 0.0 { max * 1.1 } else { 1.0 };
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", w / 2.0, xml_escape(title));
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            h - bottom,
            h - bottom,
            w - 130.0,
            h - bottom
        );
        for i in 0..=4 {
            let v = ymax * i as f64 / 4.0;
            let y = h - bottom - plot_h * i as f64 / 4.0;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>",
                left - 6.0,
                y + 4.0,
                v
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">RMSE</text>",
            top + plot_h / 2.0,
            top + plot_h / 2.0
        );
        let group_w = 120.0;
        let bar_w = (group_w - 30.0) / modes.len().max(1) as f64;
        for (ci, c) in contrasts.iter().enumerate() {
            let gx = left + 15.0 + ci as f64 * group_w;
            for (mi, &m) in modes.iter().enumerate() {
                if let Some(a) = self.aggregate(m, c) {
                    let bh = if a.rmse.is_finite() { plot_h * a.rmse / ymax } else { 0.0 };
                    let _ = writeln!(
                        s,
                        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{} {}: {}</title></rect>",
                        gx + mi as f64 * bar_w,
                        h - bottom - bh,
                        bar_w - 2.0,
                        bh,
                        colors[mi % colors.len()],
                        xml_escape(c),
                        m,
                        a.rmse
                    );
                }
            }
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                gx + (group_w - 30.0) / 2.0,
                h - bottom + 18.0,
                xml_escape(c)
            );
        }
        for (mi, m) in modes.iter().enumerate() {
            let y = top + 10.0 + 18.0 * mi as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
                w - 120.0,
                y,
                colors[mi % colors.len()],
                w - 102.0,
                y + 10.0,
                m
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `metrics.csv`, `summary.md` and `rmse.svg` into `dir`.
pub fn emit_report(m: &MetricsTable, dir: impl AsRef<Path>, title: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("metrics.csv", m.to_csv()),
        ("summary.md", m.to_markdown(title)),
        ("rmse.svg", m.to_svg(title)),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        write_text(&p, &text)?;
        out.push(p);
    }
    Ok(out)
}

/// Everything produced for one seed and one estimator mode.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub mode: Mode,
    pub estimator: TrainedEstimator,
    pub report: EstimateReport,
    /// `(contrast label, estimate or targeting error)` for each non-baseline policy.
    pub contrasts: Vec<(String, std::result::Result<f64, String>)>,
}

/// Seed-specific data shared by all estimator modes.
pub struct SeedData {
    pub seed: u64,
    pub spec: DgpSpec,
    pub data: Dataset,
    pub policies: Vec<Policy>,
    pub actions: ActionMatrix,
    /// Joint-mode embedding (deterministic bypass or MDS).
    pub embedding: PolicyEmbedding,
}

/// Simulates the seed's cohort and embeds the suite's policies on it.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let spec = DgpSpec {
        seed,
        ..cfg.dgp.clone()
    };
    let data = dgp::simulate(&spec, cfg.n)?;
    prepare_with_data(cfg, seed, data)
}

/// Embeds the suite's policies on a given cohort (which must come from the
/// configured generator, whose scores drive the threshold policies).
pub fn prepare_with_data(cfg: &ExperimentConfig, seed: u64, data: Dataset) -> Result<SeedData> {
    let spec = DgpSpec {
        seed,
        ..cfg.dgp.clone()
    };
    if data.tau != spec.tau {
        return Err(Error::Shape(format!("data has tau={} but the config says {}", data.tau, spec.tau)));
    }
    let policies = cfg.suite.policies(spec.tau)?;
    let actions = ActionMatrix::build(&policies, &data, Some(&spec))?;
    let embedding = if !cfg.modes.contains(&Mode::JointPeq) {
        zero_embedding(policies.len(), spec.tau)
    } else if cfg.suite.uses_bypass() {
        deterministic_embedding(&policies, spec.tau)?
    } else {
        let e = seed_stream(seed, 4);
        embed_policies(&data, &actions, &cfg.embed.kernel(e), cfg.embed.dim, &cfg.embed.smacof(e))?
    };
    Ok(SeedData {
        seed,
        spec,
        data,
        policies,
        actions,
        embedding,
    })
}

fn seed_stream(seed: u64, purpose: u64) -> u64 {
    rng::derive_seed(seed, purpose)
}

/// Splits `0..n` into a seeded `(first, second)` partition with `frac * n` first.
fn split_indices(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, 0));
    let cut = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let (a, b) = idx.split_at(cut);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// `(training units, evaluation units)` under the configured split; the
/// evaluation set is `None` when targeting reuses the training units.
pub fn eval_indices(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    Ok(match cfg.eval_split()? {
        EvalSplit::ReuseAll => ((0..n).collect(), None),
        EvalSplit::Holdout(f) => {
            let (a, b) = split_indices(n, 1.0 - f, seed_stream(seed, 5));
            (a, Some(b))
        }
    })
}

/// Hyperparameter search (when `n_draws > 0`) on an internal split of the
/// training units, then a final fit on all training units.
pub fn fit_mode(cfg: &ExperimentConfig, sd: &SeedData, mode: Mode) -> Result<TrainedEstimator> {
    let seed = sd.seed;
    let (train_idx, eval_idx) = eval_indices(cfg, sd.data.len(), seed)?;
    let (train_ds, train_am) = match eval_idx {
        None => (sd.data.clone(), sd.actions.clone()),
        Some(_) => (sd.data.subset(&train_idx), sd.actions.subset(&train_idx)),
    };
    let mut train_cfg = TrainConfig {
        seed: seed_stream(seed, 1),
        ..cfg.train.clone()
    };
    if cfg.n_draws > 0 {
        let (fit_idx, val_idx) = split_indices(train_ds.len(), cfg.select_fraction, seed_stream(seed, 2));
        let sel = select_hyperparams(
            mode,
            &train_ds.subset(&fit_idx),
            &train_am.subset(&fit_idx),
            &train_ds.subset(&val_idx),
            &sd.policies,
            &sd.embedding,
            &cfg.grid,
            &train_cfg,
            cfg.n_draws,
            seed_stream(seed, 3),
        )?;
        train_cfg = sel.best;
    }
    train(mode, &train_ds, &sd.policies, &train_am, &sd.embedding, &train_cfg)
}

/// The units targeting runs on, with their action rows.
pub fn eval_data(cfg: &ExperimentConfig, sd: &SeedData) -> Result<(Dataset, ActionMatrix)> {
    Ok(match eval_indices(cfg, sd.data.len(), sd.seed)?.1 {
        None => (sd.data.clone(), sd.actions.clone()),
        Some(idx) => (sd.data.subset(&idx), sd.actions.subset(&idx)),
    })
}

/// Tunes (optionally), trains and targets one estimator on prepared data.
pub fn run_mode(cfg: &ExperimentConfig, sd: &SeedData, mode: Mode) -> Result<SeedOutcome> {
    let seed = sd.seed;
    let estimator = fit_mode(cfg, sd, mode)?;
    let (eval_ds, eval_am) = eval_data(cfg, sd)?;
    let (report, mut failed) = target_estimator(&estimator, &eval_ds, &eval_am, &cfg.target)?;
    if let Some(e) = failed[0].1.take() {
        return Err(e);
    }
    let base = report.policies[0].psi_hat;
    let contrasts = sd.policies[1..]
        .iter()
        .zip(&failed[1..])
        .map(|(p, (_, err))| match (report.policy(&p.label), err) {
            (Some(e), _) => (p.label.clone(), Ok(e.psi_hat - base)),
            (None, Some(err)) => (p.label.clone(), Err(err.to_string())),
            (None, None) => (p.label.clone(), Err("estimate missing".into())),
        })
        .collect();
    Ok(SeedOutcome {
        seed,
        mode,
        estimator,
        report,
        contrasts,
    })
}

/// Nuisance prediction plus LTMLE for every policy of a fitted estimator.
/// Policies whose targeting fails (e.g. no unit follows them) are left out
/// of the report; their errors are returned alongside, indexed like
/// `est.policies` (`None` for the policies that succeeded).
pub fn target_estimator(
    est: &TrainedEstimator,
    ds: &Dataset,
    am: &ActionMatrix,
    cfg: &TargetConfig,
) -> Result<(EstimateReport, Vec<(String, Option<Error>)>)> {
    let nu = est.nuisances(ds, am)?;
    let scale = OutcomeScale::from_dataset(ds)?;
    let mut ok = (Vec::new(), Vec::new(), Vec::new());
    let mut status = Vec::new();
    for (k, p) in est.policies.iter().enumerate() {
        match ltmle(ds, &p.label, &am.rows[k], &nu[k], &scale, cfg) {
            Ok(_) => {
                ok.0.push(p.clone());
                ok.1.push(&am.rows[k]);
                ok.2.push(nu[k].clone());
                status.push((p.label.clone(), None));
            }
            Err(e) => {
                log::warn!("targeting {} failed: {e}", p.label);
                status.push((p.label.clone(), Some(e)));
            }
        }
    }
    let report = estimate_all(ds, &ok.0, &ok.1, &ok.2, &scale, cfg)?;
    Ok((report, status))
}

/// Truth for every contrast `CF - baseline` of the suite.
pub fn oracle_contrasts(cfg: &ExperimentConfig, cache: &OracleCache) -> Result<Vec<(String, f64)>> {
    let ps = cfg.suite.policies(cfg.dgp.tau)?;
    let values: Vec<f64> = ps
        .iter()
        .map(|p| cache.capo(&cfg.dgp, p, cfg.oracle_n_mc, cfg.oracle_seed).map(|r| r.value))
        .collect::<Result<_>>()?;
    Ok(ps[1..]
        .iter()
        .zip(&values[1..])
        .map(|(p, v)| (p.label.clone(), v - values[0]))
        .collect())
}

/// The full protocol over all seeds and modes. A failing seed is logged and
/// recorded as a failure row; it does not abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let cache = OracleCache::new(cfg.cache_dir.clone());
    let truth = oracle_contrasts(cfg, &cache)?;
    let suite = cfg.suite.name().to_string();
    // Seeds are independent jobs; results are gathered in seed order.
    let per_seed = par_map(cfg.seeds.len(), |si| {
        let seed = cfg.seeds[si];
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        let prepared = prepare_seed(cfg, seed);
        for &mode in &cfg.modes {
            let outcome = match &prepared {
                Ok(sd) => run_mode(cfg, sd, mode),
                Err(e) => Err(Error::Invalid(format!("data preparation failed: {e}"))),
            };
            match outcome {
                Ok(o) => {
                    log::info!("{suite} {mode} seed {seed}: {:?}", o.contrasts);
                    for ((label, est), (_, truth)) in o.contrasts.iter().zip(&truth) {
                        let est = match est {
                            Ok(v) => v,
                            Err(message) => {
                                failures.push(FailureRow {
                                    suite: suite.clone(),
                                    mode,
                                    seed,
                                    message: format!("{label}: {message}"),
                                });
                                continue;
                            }
                        };
                        rows.push(SeedRow {
                            suite: suite.clone(),
                            mode,
                            contrast: label.clone(),
                            seed,
                            estimate: *est,
                            oracle: *truth,
                            abs_bias: (est - truth).abs(),
                        });
                    }
                }
                Err(e) => {
                    log::error!("{suite} {mode} seed {seed} failed: {e}");
                    failures.push(FailureRow {
                        suite: suite.clone(),
                        mode,
                        seed,
                        message: e.to_string(),
                    });
                }
            }
        }
        (rows, failures)
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_seed {
        rows.extend(r);
        failures.extend(f);
    }
    Ok(MetricsTable::from_rows(rows, failures))
}

/// One point of the bandwidth-sensitivity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub multiplier: f64,
    pub metrics: MetricsTable,
}

/// The Table C.2 multipliers.
pub const GAMMA_MULTIPLIERS: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Joint-mode runs under each bandwidth multiplier.
pub fn bandwidth_sweep(cfg: &ExperimentConfig, multipliers: &[f64]) -> Result<Vec<SweepPoint>> {
    multipliers
        .iter()
        .map(|&m| {
            let c = ExperimentConfig {
                modes: vec![Mode::JointPeq],
                embed: EmbedSettings {
                    gamma_multiplier: m,
                    ..cfg.embed.clone()
                },
                ..cfg.clone()
            };
            Ok(SweepPoint {
                multiplier: m,
                metrics: run_experiment(&c)?,
            })
        })
        .collect()
}

/// CSV `(multiplier, contrast, mean_abs_bias, sd, rmse, n_seeds)`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("multiplier,contrast,mean_abs_bias,sd,rmse,n_seeds\n");
    for p in points {
        for a in &p.metrics.aggregates {
            let _ = writeln!(out, "{},{},{},{},{},{}", p.multiplier, a.contrast, a.mean_abs_bias, a.sd, a.rmse, a.n_seeds);
        }
    }
    out
}

/// Mean RMSE over contrasts for each sweep point.
pub fn sweep_mean_rmse(points: &[SweepPoint]) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|p| {
            let a = &p.metrics.aggregates;
            (p.multiplier, a.iter().map(|r| r.rmse).sum::<f64>() / a.len().max(1) as f64)
        })
        .collect()
}

/// Runtime of the embedding step for one policy count.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePoint {
    pub k: usize,
    /// Fastest wall-clock seconds over the repetitions (least scheduler noise).
    pub seconds: f64,
}

/// `K` constant-threshold policies with thresholds evenly spaced in `[0.3, 0.9]`.
pub fn threshold_grid(k: usize, tau: usize) -> Vec<Policy> {
    (0..k)
        .map(|i| {
            let g = if k == 1 { 0.5 } else { 0.3 + 0.6 * i as f64 / (k - 1) as f64 };
            Policy::constant_threshold(format!("gamma_{g:.4}"), g, tau)
        })
        .collect()
}

/// Times `embed_policies` (distances plus SMACOF) for each `K` on one cohort.
pub fn scale_k(spec: &DgpSpec, n: usize, ks: &[usize], reps: usize, settings: &EmbedSettings) -> Result<Vec<ScalePoint>> {
    if reps == 0 {
        return Err(Error::Invalid("reps must be >= 1".into()));
    }
    let ds = dgp::simulate(spec, n)?;
    ks.iter()
        .map(|&k| {
            let ps = threshold_grid(k, spec.tau);
            let am = ActionMatrix::build(&ps, &ds, Some(spec))?;
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                let emb = embed_policies(&ds, &am, &settings.kernel(spec.seed), settings.dim, &settings.smacof(spec.seed))?;
                times.push(start.elapsed().as_secs_f64());
                std::hint::black_box(emb);
            }
            Ok(ScalePoint {
                k,
                seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
            })
        })
        .collect()
}

pub fn scale_csv(points: &[ScalePoint]) -> String {
    let mut out = String::from("k,seconds\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.k, p.seconds);
    }
    out
}

/// Remainder diagnostics of one estimator mode against the suite baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeDiagnostics {
    pub mode: Mode,
    pub diagnostics: Vec<RemainderDiagnostic>,
}

impl ModeDiagnostics {
    /// `|Rem contrast| / trajectory MMD` per pair. A pair at MMD 0 gives
    /// `+inf` when its remainder contrast is nonzero and is skipped (`None`)
    /// when both vanish.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.diagnostics
            .iter()
            .map(|d| {
                let rem = d.total().abs();
                if d.traj_mmd > 0.0 {
                    Some(rem / d.traj_mmd)
                } else if rem > 0.0 {
                    Some(f64::INFINITY)
                } else {
                    None
                }
            })
            .collect()
    }

    /// `(max ratio, median ratio)` over the defined ratios.
    pub fn max_and_median(&self) -> Option<(f64, f64)> {
        let mut r: Vec<f64> = self.ratios().into_iter().flatten().collect();
        if r.is_empty() {
            return None;
        }
        r.sort_by(f64::total_cmp);
        let m = r.len();
        let median = if m % 2 == 1 { r[m / 2] } else { 0.5 * (r[m / 2 - 1] + r[m / 2]) };
        Some((r[m - 1], median))
    }

    /// Lipschitz check: `max ratio <= factor * median ratio`.
    pub fn lipschitz_bounded(&self, factor: f64) -> bool {
        match self.max_and_median() {
            Some((max, median)) => max <= factor * median,
            None => true,
        }
    }
}

/// Trains each mode on the first seed's cohort and runs the remainder
/// remainder diagnostic for every policy against the baseline (policy 0).
pub fn diagnose_remainder(cfg: &ExperimentConfig) -> Result<Vec<ModeDiagnostics>> {
    cfg.validate()?;
    if cfg.dgp.tau > cfg.diagnostic.max_tau {
        return Err(Error::OracleBudget(format!(
            "remainder diagnostics need tau <= {}, got {}",
            cfg.diagnostic.max_tau, cfg.dgp.tau
        )));
    }
    let seed = cfg.seeds[0];
    let sd = prepare_seed(cfg, seed)?;
    let gammas = resolve_bandwidths(&sd.data, &sd.actions, &cfg.embed.kernel(seed_stream(seed, 4)))?;
    let mut out = Vec::new();
    for &mode in &cfg.modes {
        let outcome = run_mode(cfg, &sd, mode)?;
        let nu = outcome.estimator.nuisances(&sd.data, &sd.actions)?;
        let base = DiagnosticSide {
            policy: &sd.policies[0],
            actions: &sd.actions.rows[0],
            nuisance: &nu[0],
        };
        let mut diagnostics = Vec::new();
        for k in 1..sd.policies.len() {
            let side = DiagnosticSide {
                policy: &sd.policies[k],
                actions: &sd.actions.rows[k],
                nuisance: &nu[k],
            };
            diagnostics.push(remainder_diagnostic(&sd.spec, &sd.data, &side, &base, &gammas, &cfg.target, &cfg.diagnostic)?);
        }
        out.push(ModeDiagnostics { mode, diagnostics });
    }
    Ok(out)
}

/// Trajectory MMD of every suite policy against the baseline on one cohort.
pub fn baseline_distances(sd: &SeedData, kernel: &KernelConfig) -> Result<BTreeMap<String, f64>> {
    let gammas = resolve_bandwidths(&sd.data, &sd.actions, kernel)?;
    let mut out = BTreeMap::new();
    for k in 1..sd.policies.len() {
        out.insert(
            sd.policies[k].label.clone(),
            trajectory_mmd_with(&sd.data, &sd.actions.rows[k], &sd.actions.rows[0], &gammas)?,
        );
    }
    Ok(out)
}

/// Diagnostics CSV for every mode: `(mode, pair, t, term1, term2, term3, traj_mmd)`.
pub fn mode_diagnostics_csv(all: &[ModeDiagnostics]) -> String {
    let mut out = String::from("mode,pair,t,term1,term2,term3,traj_mmd\n");
    for m in all {
        for line in diagnostics_csv(&m.diagnostics).lines().skip(1) {
            let _ = writeln!(out, "{},{line}", m.mode);
        }
    }
    out
}
