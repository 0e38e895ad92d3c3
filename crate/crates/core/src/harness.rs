//! Seeded sweeps over horizon, sampling period or noise level: simulate,
//! run the whole inference chain, score every stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confit::{fit_ad_constrained, ConstrainedFitConfig};
use crate::decouple::{decouple, support, ThresholdConfig};
use crate::estimation::{infer_ad, Pattern};
use crate::inverse_lq::{build_h, recover_r, solve_care, solve_inverse_lq, trajectory_equivalence, InverseLqConfig};
use crate::linalg;
use crate::matlog::recover_ac;
use crate::sim::{simulate, uniform_initial_state, NoiseModel};
use crate::system::{
    build_laplacian, reference_network, ClosedLoop, DirectedGraph, Laplacian, NodalSystem, SystemSpec,
};

/// Noise groups as fractions of the first: `G_k = f_k · (2, 1, 0.2)`.
pub const NOISE_GROUP_FACTORS: [f64; 5] = [1.0, 0.5, 0.25, 0.05, 0.025];
pub const BASE_SIGMA: [f64; 3] = [2.0, 1.0, 0.2];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("reference matrix is zero")]
    ZeroTruth,
    #[error("system: {0}")]
    System(#[from] crate::system::SystemError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetric {
    pub er: f64,
    pub gamma: f64,
    /// `M̂ = 0` with scaling allowed: `γ` undefined, `Er = 1` by convention.
    pub degenerate: bool,
}

/// `Er = ‖γM̂ − M‖_F / ‖M‖_F`, with the least-squares `γ` when `allow_scale`.
pub fn error_metric(
    estimate: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    allow_scale: bool,
) -> Result<ErrorMetric, HarnessError> {
    if estimate.shape() != truth.shape() {
        return Err(HarnessError::Shape(estimate.shape(), truth.shape()));
    }
    if truth.norm() == 0.0 {
        return Err(HarnessError::ZeroTruth);
    }
    if !allow_scale {
        return Ok(ErrorMetric { er: linalg::rel_frobenius(estimate, truth), gamma: 1.0, degenerate: false });
    }
    Ok(match linalg::best_scale(estimate, truth) {
        Some(gamma) => ErrorMetric { er: linalg::rel_frobenius(&(estimate * gamma), truth), gamma, degenerate: false },
        None => ErrorMetric { er: 1.0, gamma: f64::NAN, degenerate: true },
    })
}

/// `G_group` scaled from `base`; group 0 is noise-free.
pub fn noise_group(base: &[f64], group: usize) -> Result<NoiseModel, HarnessError> {
    if group == 0 {
        return Ok(NoiseModel::noiseless(base.len()));
    }
    let f = NOISE_GROUP_FACTORS
        .get(group - 1)
        .ok_or_else(|| HarnessError::Config(format!("noise group {group} outside 0..=5")))?;
    NoiseModel::new(base.iter().map(|s| s * f).collect()).map_err(|e| HarnessError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSource {
    /// `"reference"`: the built-in six-node network.
    Named(String),
    Path {
        path: PathBuf,
    },
    Inline(SystemSpec),
}

impl Default for SystemSource {
    fn default() -> Self {
        SystemSource::Named("reference".into())
    }
}

impl SystemSource {
    pub fn load(&self, base_dir: Option<&Path>) -> Result<(DirectedGraph, NodalSystem), HarnessError> {
        match self {
            SystemSource::Named(name) if name == "reference" => Ok(reference_network()),
            SystemSource::Named(name) => Err(HarnessError::Config(format!("unknown system {name:?}"))),
            SystemSource::Path { path } => {
                let full = match base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                let spec: SystemSpec = serde_json::from_str(&std::fs::read_to_string(full)?)?;
                Ok((spec.graph()?, spec.nodal()?))
            }
            SystemSource::Inline(spec) => Ok((spec.graph()?, spec.nodal()?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Number of transitions `T`.
    #[serde(rename = "T", alias = "t")]
    Horizon,
    /// Sampling period; `T = horizon / τ`.
    Tau,
    /// Noise group index (0 = noise-free, 1..=5 = `G_1..G_5`).
    Noise,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::Horizon => "T",
            SweepAxis::Tau => "tau",
            SweepAxis::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    /// Closed form, falling back to the constrained fit when it is refused
    /// or leaves the unit ball around `I`.
    #[default]
    Auto,
    ClosedForm,
    Constrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSource,
    pub sweep: Sweep,
    pub seeds: Vec<u64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Transitions per run; unset means `round(horizon / τ)`.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Per-dimension noise standard deviation of `G_1`.
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
    /// Noise group used when the sweep is not over noise.
    #[serde(default = "default_group")]
    pub noise_group: usize,
    #[serde(default = "default_x0_range")]
    pub x0_range: [f64; 2],
    #[serde(default)]
    pub estimator: EstimatorChoice,
    #[serde(default)]
    pub pattern: Option<Pattern>,
    #[serde(default)]
    pub confit: ConstrainedFitConfig,
    #[serde(default)]
    pub decouple: ThresholdConfig,
    #[serde(default = "default_true")]
    pub inverse_lq: bool,
    #[serde(default)]
    pub inverse_lq_config: InverseLqConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_tau() -> f64 {
    0.05
}
fn default_horizon() -> f64 {
    50.0
}
fn default_group() -> usize {
    2
}
fn default_x0_range() -> [f64; 2] {
    [0.0, 1000.0]
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(axis: SweepAxis, values: Vec<f64>, seeds: Vec<u64>) -> Self {
        Self {
            system: SystemSource::default(),
            sweep: Sweep { axis, values },
            seeds,
            tau: default_tau(),
            steps: None,
            horizon: default_horizon(),
            sigma: None,
            noise_group: default_group(),
            x0_range: default_x0_range(),
            estimator: EstimatorChoice::Auto,
            pattern: None,
            confit: ConstrainedFitConfig::default(),
            decouple: ThresholdConfig::default(),
            inverse_lq: true,
            inverse_lq_config: InverseLqConfig::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let v = &self.sweep.values;
        if v.is_empty() || v.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("sweep values must be non-empty and strictly increasing".into());
        }
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("sweep values must be finite and non-negative".into());
        }
        match self.sweep.axis {
            SweepAxis::Horizon | SweepAxis::Noise if v.iter().any(|x| x.fract() != 0.0) => {
                return bad(format!("{} values must be integers", self.sweep.axis.label()));
            }
            SweepAxis::Tau if v.iter().any(|x| *x <= 0.0) => return bad("τ values must be positive".into()),
            _ => {}
        }
        if !(self.tau > 0.0 && self.horizon > 0.0) {
            return bad("tau and horizon must be positive".into());
        }
        if !(self.x0_range[1] >= self.x0_range[0]) {
            return bad("x0_range must be [lo, hi] with lo ≤ hi".into());
        }
        Ok(())
    }

    fn cell_setup(&self, value: f64) -> (f64, usize, usize) {
        let steps_for = |tau: f64| self.steps.unwrap_or_else(|| (self.horizon / tau).round() as usize);
        match self.sweep.axis {
            SweepAxis::Horizon => (self.tau, value as usize, self.noise_group),
            SweepAxis::Tau => (value, steps_for(value), self.noise_group),
            SweepAxis::Noise => (self.tau, steps_for(self.tau), value as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub quantity: String,
    pub er: f64,
    pub value: f64,
    pub seed: u64,
}

/// Per-cell diagnostics, written to `logs/` by [`write_outputs`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CellLog {
    pub value: f64,
    pub seed: u64,
    pub tau: f64,
    pub steps: usize,
    pub noise_group: usize,
    pub pattern: Option<Pattern>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub estimator: Option<String>,
    pub closed_form_condition: Option<f64>,
    pub closed_form_ball_norm: Option<f64>,
    pub ball_norm: Option<f64>,
    pub confit_iterations: Option<usize>,
    pub log_terms: Option<usize>,
    pub uniqueness_warning: Option<bool>,
    pub laplacian_simple: Option<bool>,
    pub support_matches: Option<bool>,
    pub decouple_notes: Vec<String>,
    pub inverse_lq_residual: Option<f64>,
    pub r_positive_definite: Option<bool>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub records: Vec<ErrorRecord>,
    pub cells: Vec<CellLog>,
}

/// Quantities scored per cell, with whether the scalar ambiguity is removed.
pub const QUANTITIES: [(&str, bool); 5] = [("Ad", false), ("Ac", false), ("A", false), ("BK", true), ("L", true)];

struct Truth {
    graph: DirectedGraph,
    sys: NodalSystem,
    laplacian: Laplacian,
    l: DMatrix<f64>,
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    run_sweep_in(cfg, None)
}

/// As [`run_sweep`], resolving a relative system path against `base_dir`.
pub fn run_sweep_in(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let (graph, sys) = cfg.system.load(base_dir)?;
    let n = sys.state_dim();
    let sigma = match &cfg.sigma {
        Some(s) => s.clone(),
        None if n == BASE_SIGMA.len() => BASE_SIGMA.to_vec(),
        None => return Err(HarnessError::Config(format!("sigma is required for state dimension {n}"))),
    };
    if sigma.len() != n {
        return Err(HarnessError::Config(format!("sigma has {} entries, state dimension is {n}", sigma.len())));
    }
    let laplacian = build_laplacian(&graph);
    let l = laplacian.matrix().clone();
    let truth = Truth { graph, sys, laplacian, l };
    let cells: Vec<(f64, u64)> =
        cfg.sweep.values.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let outcomes: Vec<(Vec<ErrorRecord>, CellLog)> =
        cells.par_iter().map(|&(value, seed)| run_cell(cfg, &truth, &sigma, value, seed)).collect();
    let mut records = Vec::new();
    let mut logs = Vec::new();
    for (r, log) in outcomes {
        records.extend(r);
        logs.push(log);
    }
    Ok(SweepResult { axis: cfg.sweep.axis, records, cells: logs })
}

fn run_cell(
    cfg: &ExperimentConfig,
    truth: &Truth,
    sigma: &[f64],
    value: f64,
    seed: u64,
) -> (Vec<ErrorRecord>, CellLog) {
    let (tau, steps, group) = cfg.cell_setup(value);
    let mut log = CellLog { value, seed, tau, steps, noise_group: group, ..Default::default() };
    let mut records = Vec::new();
    if let Err(e) = pipeline(cfg, truth, sigma, seed, &mut log, &mut records) {
        log.failure = Some(e);
    }
    for r in records.iter_mut() {
        r.value = value;
    }
    (records, log)
}

fn pipeline(
    cfg: &ExperimentConfig,
    truth: &Truth,
    sigma: &[f64],
    seed: u64,
    log: &mut CellLog,
    records: &mut Vec<ErrorRecord>,
) -> Result<(), String> {
    let (n_nodes, n, m) = (truth.graph.n_nodes(), truth.sys.state_dim(), truth.sys.input_dim());
    let stage = |name: &'static str| move |e: &dyn std::fmt::Display| format!("{name}: {e}");
    let cl = ClosedLoop::new(&truth.sys, &truth.laplacian, log.tau).map_err(|e| stage("system")(&e))?;
    let noise = noise_group(sigma, log.noise_group).map_err(|e| stage("noise")(&e))?;
    let x0 = uniform_initial_state(cl.dim(), cfg.x0_range[0], cfg.x0_range[1], seed);
    let traj = simulate(&cl, &x0, log.steps, &noise, seed).map_err(|e| stage("simulate")(&e))?;
    let gamma = noise.gamma();

    let inf = infer_ad(&traj, &gamma, cfg.pattern).map_err(|e| stage("estimate")(&e))?;
    log.pattern = Some(inf.pattern_used);
    log.eps1 = inf.label.eps1.is_finite().then_some(inf.label.eps1);
    log.eps2 = inf.label.eps2.is_finite().then_some(inf.label.eps2);
    let id = DMatrix::<f64>::identity(cl.dim(), cl.dim());
    let closed = match &inf.estimate {
        Ok(est) => {
            let ball = linalg::spectral_norm(&(&est.ad - &id));
            log.closed_form_condition = Some(est.condition);
            log.closed_form_ball_norm = Some(ball);
            Some((est.ad.clone(), ball))
        }
        Err(_) => None,
    };
    let use_closed = match cfg.estimator {
        EstimatorChoice::ClosedForm => true,
        EstimatorChoice::Constrained => false,
        EstimatorChoice::Auto => matches!(closed, Some((_, ball)) if ball < 1.0),
    };
    let ad_hat = if use_closed {
        log.estimator = Some("closed_form".into());
        match (&closed, &inf.estimate) {
            (Some((ad, ball)), _) => {
                log.ball_norm = Some(*ball);
                ad.clone()
            }
            (None, Err(e)) => return Err(stage("estimate")(e)),
            (None, Ok(_)) => unreachable!("closed-form estimate present whenever Ok"),
        }
    } else {
        log.estimator = Some("constrained".into());
        let fit = fit_ad_constrained(&inf.covariances, &gamma, inf.pattern_used, n_nodes, &cfg.confit)
            .map_err(|e| stage("confit")(&e))?;
        log.ball_norm = Some(fit.ball_norm);
        log.confit_iterations = Some(fit.iterations);
        fit.ad
    };
    let mut push = |name: &str, est: &DMatrix<f64>, tru: &DMatrix<f64>, scale: bool| -> Result<(), String> {
        let e = error_metric(est, tru, scale).map_err(|e| stage("score")(&e))?;
        records.push(ErrorRecord { quantity: name.to_string(), er: e.er, value: 0.0, seed });
        Ok(())
    };
    push("Ad", &ad_hat, cl.ad(), false)?;

    let ac = recover_ac(&ad_hat, log.tau).map_err(|e| stage("matlog")(&e))?;
    log.log_terms = Some(ac.log.terms_used);
    log.uniqueness_warning = Some(ac.uniqueness_warning);
    push("Ac", &ac.ac, cl.ac(), false)?;

    let dec = decouple(&ac.ac, n_nodes, n, m, &cfg.decouple, seed).map_err(|e| stage("decouple")(&e))?;
    push("A", &dec.a_hat, truth.sys.a(), false)?;
    push("BK", &(&dec.b_hat * &dec.k_hat), &truth.sys.bk(), true)?;
    push("L", dec.l_hat(), &truth.l, true)?;
    log.laplacian_simple = Some(dec.laplacian.simple);
    log.decouple_notes = dec.notes.clone();
    let l_hat = dec.l_hat();
    let off_max = (0..n_nodes)
        .flat_map(|i| (0..n_nodes).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| l_hat[(i, j)].abs())
        .fold(0.0, f64::max);
    let mut found = support(l_hat, 0.1 * off_max);
    let mut edges = truth.graph.edges();
    found.sort();
    edges.sort();
    log.support_matches = Some(found == edges);

    if cfg.inverse_lq {
        let h = build_h(&dec.a_hat, &dec.b_hat, l_hat, &dec.k_hat).map_err(|e| stage("inverse_lq")(&e))?;
        let sol = solve_inverse_lq(&h, true, &cfg.inverse_lq_config).map_err(|e| stage("inverse_lq")(&e))?;
        log.inverse_lq_residual = Some(sol.residual);
        records.push(ErrorRecord { quantity: "QP_residual".into(), er: sol.residual, value: 0.0, seed });
        let rec = recover_r(&h.b_tilde, &sol.p, &h.k_tilde).map_err(|e| stage("recover_r")(&e))?;
        log.r_positive_definite = Some(rec.positive_definite);
        let care = solve_care(&h.a_tilde, &h.b_tilde, &sol.q, &rec.r).map_err(|e| stage("care")(&e))?;
        let ac_new = &h.a_tilde - &h.b_tilde * &care.gain;
        let cl_new = ClosedLoop::from_ac(ac_new, log.tau, n_nodes, n).map_err(|e| stage("care")(&e))?;
        let dev = trajectory_equivalence(&cl, &cl_new, &x0, log.steps).map_err(|e| stage("trajectory")(&e))?;
        records.push(ErrorRecord { quantity: "trajectory".into(), er: dev, value: 0.0, seed });
    }
    Ok(())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    Some(if k % 2 == 1 { values[k / 2] } else { 0.5 * (values[k / 2 - 1] + values[k / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianPoint {
    pub value: f64,
    pub median: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub axis: String,
    pub quantities: BTreeMap<String, Vec<MedianPoint>>,
    pub failures: Vec<String>,
}

impl SweepResult {
    /// Medians per quantity and sweep value, in sweep order.
    pub fn summary(&self) -> Summary {
        let mut grouped: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
        for r in &self.records {
            let series = grouped.entry(r.quantity.clone()).or_default();
            match series.iter_mut().find(|(v, _)| *v == r.value) {
                Some((_, xs)) => xs.push(r.er),
                None => series.push((r.value, vec![r.er])),
            }
        }
        let quantities = grouped
            .into_iter()
            .map(|(q, series)| {
                let pts = series
                    .into_iter()
                    .map(|(value, mut xs)| MedianPoint {
                        value,
                        count: xs.len(),
                        median: median(&mut xs).unwrap_or(f64::NAN),
                    })
                    .collect();
                (q, pts)
            })
            .collect();
        let failures = self
            .cells
            .iter()
            .filter_map(|c| c.failure.as_ref().map(|f| format!("value={} seed={}: {f}", c.value, c.seed)))
            .collect();
        Summary { axis: self.axis.label().to_string(), quantities, failures }
    }

    pub fn medians(&self, quantity: &str) -> Vec<f64> {
        self.summary().quantities.get(quantity).map(|v| v.iter().map(|p| p.median).collect()).unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,seed,quantity,er\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", self.axis.label(), r.value, r.seed, r.quantity, r.er);
        }
        out
    }
}

/// Number of adjacent pairs that break the requested direction.
pub fn count_inversions(series: &[f64], increasing: bool) -> usize {
    series.windows(2).filter(|w| if increasing { !(w[1] > w[0]) } else { !(w[1] < w[0]) }).count()
}

/// `results.csv`, `summary.json` and one `logs/cell_<i>.json` per cell.
pub fn write_outputs(result: &SweepResult, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir.join("logs"))?;
    std::fs::write(dir.join("results.csv"), result.to_csv())?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result.summary())?)?;
    for (i, cell) in result.cells.iter().enumerate() {
        std::fs::write(dir.join("logs").join(format!("cell_{i:04}.json")), serde_json::to_string_pretty(cell)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn error_metric_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(error_metric(&m, &m, false).unwrap().er, 0.0);
        let e7 = error_metric(&(&m * 7.0), &m, true).unwrap();
        assert!(e7.er < 1e-15);
        assert_relative_eq!(e7.gamma, 1.0 / 7.0, epsilon = 1e-15);
        // E ⟂ M with ‖E‖ = 0.1‖M‖
        let e: DMatrix<f64> = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.0, 0.0]);
        let e = &e * (0.1 * m.norm() / e.norm());
        assert!(e.dot(&m).abs() < 1e-14);
        assert_relative_eq!(error_metric(&(&m + e), &m, false).unwrap().er, 0.1, epsilon = 1e-14);
        let zero = error_metric(&DMatrix::zeros(2, 2), &m, true).unwrap();
        assert!(zero.degenerate);
        assert_eq!(zero.er, 1.0);
        assert!(error_metric(&m, &DMatrix::zeros(2, 2), true).is_err());
        assert!(error_metric(&m, &DMatrix::zeros(2, 3), true).is_err());
    }

    #[test]
    fn noise_groups() {
        let g2 = noise_group(&BASE_SIGMA, 2).unwrap();
        assert_eq!(g2.sigma(), &[1.0, 0.5, 0.1]);
        assert_eq!(noise_group(&BASE_SIGMA, 0).unwrap().max_sigma(), 0.0);
        assert!(noise_group(&BASE_SIGMA, 6).is_err());
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"sweep": {"axis": "tau", "values": [0.01, 0.02]}, "seeds": [0, 1]}"#).unwrap();
        assert_eq!(cfg.system, SystemSource::Named("reference".into()));
        assert_eq!(cfg.cell_setup(0.02), (0.02, 2500, 2));
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.sweep.values = vec![0.02, 0.01];
        assert!(bad.validate().is_err());
        bad.sweep.values = vec![0.01];
        bad.seeds.clear();
        assert!(bad.validate().is_err());
        let t: ExperimentConfig =
            serde_json::from_str(r#"{"sweep": {"axis": "T", "values": [100, 200]}, "seeds": [3], "noise_group": 4}"#)
                .unwrap();
        assert_eq!(t.cell_setup(200.0), (0.05, 200, 4));
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"sweep": {"axis": "T", "values": [1]}, "seeds": [0], "bogus": 1}"#
        )
        .is_err());
    }

    #[test]
    fn inversion_counting() {
        assert_eq!(count_inversions(&[1.0, 2.0, 3.0], true), 0);
        assert_eq!(count_inversions(&[1.0, 3.0, 2.0, 4.0], true), 1);
        assert_eq!(count_inversions(&[3.0, 2.0, 2.0], false), 1);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let mut cfg = ExperimentConfig::new(SweepAxis::Horizon, vec![100.0], vec![0, 1]);
        cfg.inverse_lq = false;
        cfg.confit.max_iters = 200;
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.cells.len(), 2);
        for c in &a.cells {
            assert!(c.failure.is_none(), "{:?}", c.failure);
        }
        assert_eq!(a.records.len(), 2 * QUANTITIES.len());
    }
}
