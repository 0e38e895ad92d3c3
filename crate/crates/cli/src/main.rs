use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use netinfer::confit::{fit_ad_constrained, ConstrainedFitConfig};
use netinfer::decouple::{decouple, ThresholdConfig};
use netinfer::estimation::{infer_ad, Pattern};
use netinfer::harness::{run_sweep_in, write_outputs, ExperimentConfig};
use netinfer::inverse_lq::{build_h, recover_r, solve_care, solve_inverse_lq, trajectory_equivalence, InverseLqConfig};
use netinfer::io::{read_matrix, read_system, read_trajectory, rows, write_trajectory, Factors};
use netinfer::linalg;
use netinfer::matlog::{recover_ac, sampling_bound};
use netinfer::sim::{simulate, uniform_initial_state, NoiseModel};
use netinfer::{build_laplacian, check_consensus_stability, closed_loop_matrix, ClosedLoop};

#[derive(Parser)]
#[command(name = "netinfer", version, about = "Inverse inference of cooperative control in networked linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// System definition utilities.
    #[command(subcommand)]
    System(SystemCmd),
    /// Simulate a noisy trajectory.
    Simulate(SimulateArgs),
    /// Inference stages.
    #[command(subcommand)]
    Infer(InferCmd),
    /// Recover LQ weights (Q, P, R) that explain decoupled factors.
    #[command(name = "inverse-lq")]
    InverseLq(InverseLqArgs),
    /// Run a Monte-Carlo sweep from a JSON config.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum SystemCmd {
    /// Per-mode consensus report and critical sampling period.
    Check { file: PathBuf },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    /// Number of transitions.
    #[arg(long = "T")]
    steps: usize,
    /// Sampling period; defaults to the system file's `tau`.
    #[arg(long)]
    tau: Option<f64>,
    /// Per-dimension noise standard deviations, comma separated.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `.csv` writes the long CSV format, anything else the JSON envelope.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum InferCmd {
    /// Estimate A_d from a trajectory.
    Ad(InferAdArgs),
    /// Recover A_c = log(A_d)/τ.
    Ac {
        #[arg(long)]
        ad: PathBuf,
        #[arg(long)]
        tau: f64,
    },
    /// Split A_c into Â, L̂, B̂, K̂.
    Decouple {
        #[arg(long)]
        ac: PathBuf,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct InferAdArgs {
    #[arg(long)]
    traj: PathBuf,
    /// Diagonal of Γ (noise variances per state dimension), comma separated;
    /// defaults to σ² from the trajectory file.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// auto, constant, linear or other.
    #[arg(long, default_value = "auto")]
    pattern: String,
    /// Use the norm-constrained fit instead of the closed form.
    #[arg(long)]
    constrained: bool,
}

#[derive(Args)]
struct InverseLqArgs {
    /// JSON with A, B, K, L (the output of `infer decouple`).
    #[arg(long)]
    factors: PathBuf,
    /// Require P to be symmetric.
    #[arg(long)]
    symmetric: bool,
    /// System file; adds the trajectory-equivalence score against it.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Seconds simulated for the trajectory comparison.
    #[arg(long, default_value_t = 50.0)]
    horizon: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn system_check(file: &Path) -> Result<()> {
    let spec = read_system(file).with_context(|| format!("reading {}", file.display()))?;
    let (g, sys) = (spec.graph()?, spec.nodal()?);
    let l = build_laplacian(&g);
    let report = check_consensus_stability(sys.a(), sys.b(), sys.k(), &l)?;
    let ac = closed_loop_matrix(&sys, &l)?;
    let bound = sampling_bound(&ac);
    print(&json!({
        "n_nodes": g.n_nodes(),
        "state_dim": sys.state_dim(),
        "input_dim": sys.input_dim(),
        "report": report,
        "critical_sampling_period": bound,
        "tau": spec.tau,
        "tau_below_critical": spec.tau < bound,
    }))
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let mut spec = read_system(&a.system).with_context(|| format!("reading {}", a.system.display()))?;
    if let Some(tau) = a.tau {
        spec.tau = tau;
    }
    let cl = spec.closed_loop()?;
    let noise = match &a.sigma {
        Some(s) => NoiseModel::new(s.clone())?,
        None => NoiseModel::noiseless(cl.state_dim()),
    };
    let x0 = match &spec.x0 {
        Some(x) => DVector::from_vec(x.clone()),
        None => uniform_initial_state(cl.dim(), 0.0, 1000.0, a.seed),
    };
    let traj = simulate(&cl, &x0, a.steps, &noise, a.seed)?;
    write_trajectory(&traj, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn infer_ad_cmd(a: &InferAdArgs) -> Result<()> {
    let traj = read_trajectory(&a.traj).with_context(|| format!("reading {}", a.traj.display()))?;
    let gamma = match &a.gamma {
        Some(g) if g.len() != traj.state_dim => {
            bail!("--gamma has {} entries, state dimension is {}", g.len(), traj.state_dim)
        }
        Some(g) => DMatrix::from_diagonal(&DVector::from_vec(g.clone())),
        None => traj.noise.gamma(),
    };
    let forced = match a.pattern.as_str() {
        "auto" => None,
        p => Some(p.parse::<Pattern>().map_err(anyhow::Error::msg)?),
    };
    let inf = infer_ad(&traj, &gamma, forced)?;
    let id = DMatrix::<f64>::identity(traj.dim(), traj.dim());
    let mut out = json!({
        "pattern": inf.pattern_used,
        "eps1": finite_or_null(inf.label.eps1),
        "eps2": finite_or_null(inf.label.eps2),
        "threshold": inf.label.threshold,
        "n_nodes": traj.n_nodes,
        "state_dim": traj.state_dim,
        "tau": traj.tau,
    });
    match &inf.estimate {
        Ok(est) => out["closed_form_condition"] = json!(est.condition),
        Err(e) => out["closed_form_error"] = json!(e.to_string()),
    }
    if a.constrained {
        let fit = fit_ad_constrained(
            &inf.covariances,
            &gamma,
            inf.pattern_used,
            traj.n_nodes,
            &ConstrainedFitConfig::default(),
        )?;
        out["estimator"] = json!("constrained");
        out["objective"] = json!(fit.objective);
        out["iterations"] = json!(fit.iterations);
        out["converged"] = json!(fit.converged);
        out["block_spread"] = json!(fit.block_spread);
        out["ball_norm"] = json!(fit.ball_norm);
        out["Ad"] = json!(rows(&fit.ad));
    } else {
        let est = match inf.estimate {
            Ok(est) => est,
            Err(e) => bail!("{e} (rerun with --constrained)"),
        };
        out["estimator"] = json!("closed_form");
        out["ball_norm"] = json!(linalg::spectral_norm(&(&est.ad - id)));
        out["Ad"] = json!(rows(&est.ad));
    }
    print(&out)
}

fn infer_ac_cmd(ad: &Path, tau: f64) -> Result<()> {
    let ad = read_matrix(ad, &["Ad", "matrix"]).with_context(|| format!("reading {}", ad.display()))?;
    let rec = recover_ac(&ad, tau)?;
    print(&json!({
        "Ac": rows(&rec.ac),
        "tau": tau,
        "terms_used": rec.log.terms_used,
        "residual": rec.log.residual,
        "converged": rec.log.converged,
        "distance_from_identity": rec.log.distance_from_identity,
        "critical_sampling_period": rec.tau_bound,
        "uniqueness_warning": rec.uniqueness_warning,
    }))
}

fn decouple_cmd(ac: &Path, nodes: usize, dim: usize, inputs: usize, seed: u64) -> Result<()> {
    let ac = read_matrix(ac, &["Ac", "matrix"]).with_context(|| format!("reading {}", ac.display()))?;
    let res = decouple(&ac, nodes, dim, inputs, &ThresholdConfig::default(), seed)?;
    print(&json!({
        "A": rows(&res.a_hat),
        "B": rows(&res.b_hat),
        "K": rows(&res.k_hat),
        "L": rows(res.l_hat()),
        "L_tilde": rows(&res.l_tilde),
        "W": rows(&res.w),
        "Z": rows(&res.z),
        "ell_d": res.ell_d,
        "eps_z": res.eps_z,
        "laplacian_simple": res.laplacian.simple,
        "laplacian_min_gap": res.laplacian.min_gap,
        "perturbation_rounds": res.laplacian.perturbation_rounds,
        "sign_flipped": res.laplacian.sign_flipped,
        "notes": res.notes,
    }))
}

fn inverse_lq_cmd(a: &InverseLqArgs) -> Result<()> {
    let factors = Factors::read(&a.factors).with_context(|| format!("reading {}", a.factors.display()))?;
    let (am, bm, km, lm) = factors.matrices()?;
    let h = build_h(&am, &bm, &lm, &km)?;
    let sol = solve_inverse_lq(&h, a.symmetric, &InverseLqConfig::default())?;
    let rec = recover_r(&h.b_tilde, &sol.p, &h.k_tilde)?;
    let mut out = json!({
        "Q": rows(&sol.q),
        "P": rows(&sol.p),
        "R": rows(&rec.r),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "min_eig_P": sol.min_eig_p,
        "min_eig_Q": sol.min_eig_q,
        "row_sums": {
            "q_residual": sol.row_sums.q_residual,
            "p_residual": sol.row_sums.p_residual,
            "passes": sol.row_sums.passes,
        },
        "R_asymmetry": rec.asymmetry,
        "R_kernel_dim": rec.kernel_dim,
        "R_min_eig": rec.min_eig,
        "R_positive_definite": rec.positive_definite,
    });
    match solve_care(&h.a_tilde, &h.b_tilde, &sol.q, &rec.r) {
        Ok(care) => {
            out["gain"] = json!(rows(&care.gain));
            if let Some(truth) = &a.truth {
                let spec = read_system(truth).with_context(|| format!("reading {}", truth.display()))?;
                let true_cl = spec.closed_loop()?;
                if true_cl.dim() != h.dim() {
                    bail!("truth has dimension {}, factors {}", true_cl.dim(), h.dim());
                }
                let ac = &h.a_tilde - &h.b_tilde * &care.gain;
                let derived = ClosedLoop::from_ac(ac, spec.tau, h.n_nodes, h.state_dim)?;
                let x0 = match &spec.x0 {
                    Some(x) => DVector::from_vec(x.clone()),
                    None => uniform_initial_state(h.dim(), 0.0, 1000.0, 0),
                };
                let steps = (a.horizon / spec.tau).round().max(1.0) as usize;
                out["trajectory_equivalence"] = json!(trajectory_equivalence(&true_cl, &derived, &x0, steps)?);
            }
        }
        Err(e) => out["care_error"] = json!(e.to_string()),
    }
    print(&out)
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).context("parsing config")?;
    let base = a.config.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = match (&a.out, &cfg.output_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => base.map(|b| b.join(d)).unwrap_or_else(|| d.clone()),
        (None, None) => PathBuf::from("bench_out"),
    };
    let result = run_sweep_in(&cfg, base)?;
    write_outputs(&result, &dir)?;
    print(&json!({ "output_dir": dir, "summary": result.summary() }))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::System(SystemCmd::Check { file }) => system_check(file),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Infer(InferCmd::Ad(a)) => infer_ad_cmd(a),
        Command::Infer(InferCmd::Ac { ad, tau }) => infer_ac_cmd(ad, *tau),
        Command::Infer(InferCmd::Decouple { ac, nodes, dim, inputs, seed }) => {
            decouple_cmd(ac, *nodes, *dim, *inputs, *seed)
        }
        Command::InverseLq(a) => inverse_lq_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}
