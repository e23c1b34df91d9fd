//! End of the pipeline: turn snapshot batches into a rational state feedback
//! u_j = c_j(x)/a(x), then interrogate the result — closed-loop rollouts,
//! certificate sampling, and a finite-difference linearization at the origin.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{simulate, DynError, SnapshotSet, SystemModel};
use crate::edmd::{build_generator_set, fit_koopman, EdmdError, GeneratorSet, KoopmanFit};
use crate::polybasis::{build_basis, Basis, PolyVec};
use crate::sdp::{solve, SdpError, SdpSolution, SdpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::sos::{
    build_program, compile_sdp, extract_solution, sum_of_squares_form, DecisionLayout, SosError,
    SynthesisSpec, SNAP_TOLERANCE,
};

/// Smallest |a(x)| at which the division is still performed.
pub const DEFAULT_GUARD_ETA: f64 = 1e-9;
/// Convergence radius for validation rollouts.
pub const DEFAULT_EPS_NORM: f64 = 0.05;
/// Validation horizon in seconds.
pub const DEFAULT_T_FINAL: f64 = 30.0;
/// Rollouts stop once ‖x‖ passes this; such trials count as diverged.
pub const BLOW_UP_NORM: f64 = 1e6;
/// Sampled certificate values below −this count as violations.
pub const CERT_VIOLATION_TOL: f64 = 1e-6;
/// Central-difference step for the origin Jacobian.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("data stage: {0}")]
    Data(String),
    #[error("fit stage: {0}")]
    Fit(EdmdError),
    #[error("generator stage: {0}")]
    Generator(EdmdError),
    #[error("program stage: {0}")]
    Program(SosError),
    #[error("compile stage: {0}")]
    Compile(SosError),
    #[error("solve stage: {0}")]
    Solve(SdpError),
    #[error("extraction stage: {0}")]
    Extract(SosError),
    #[error("controller file: {0}")]
    File(String),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Sim(#[from] DynError),
}

impl SynthError {
    /// True when the SOS program itself was rejected by the solver, as
    /// opposed to an input or tolerance problem.
    pub fn sdp_infeasible(&self) -> bool {
        matches!(
            self,
            SynthError::Extract(SosError::Solver {
                status: SdpStatus::Infeasible | SdpStatus::Unbounded,
                ..
            })
        )
    }
}

/// |a(x)| fell below the guard. The division was not performed; the state and
/// the offending denominator value ride along for the caller to act on.
#[derive(Clone, Debug, Error)]
#[error("denominator guard: a(x) = {a_value:e} is inside the eta = {eta:e} band at x = {state:?}")]
pub struct GuardError {
    pub state: Vec<f64>,
    pub a_value: f64,
    pub eta: f64,
}

// ---- controller ----

/// Rational state feedback u_j(x) = c_j(x)/a(x) with the density data that
/// produced it. `b` and `alpha` are carried so the certificate can be
/// re-checked from the file alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Controller {
    pub a: PolyVec,
    pub c: Vec<PolyVec>,
    pub alpha: u32,
    pub b: PolyVec,
    pub guard_eta: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

/// Where a controller came from: input digests plus solver and fit summaries.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// FNV-1a over the training snapshots (labels, dt, raw matrices).
    #[serde(default)]
    pub data_digest: String,
    /// FNV-1a over the synthesis spec serialization.
    #[serde(default)]
    pub spec_digest: String,
    #[serde(default)]
    pub solver: SolverSummary,
    /// EDMD residuals ordered zero, e_1, .., e_m.
    #[serde(default)]
    pub fit_residuals: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolverSummary {
    pub status: String,
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
}

impl Controller {
    pub fn state_dim(&self) -> usize {
        self.a.basis().n()
    }

    pub fn input_dim(&self) -> usize {
        self.c.len()
    }

    /// u ≡ 0 feedthrough (a = 1, c = 0) for open-loop rollouts through the
    /// same code path as synthesized controllers.
    pub fn zero_feedback(n: usize, m: usize) -> Controller {
        let one = build_basis(n, 0);
        let lin = build_basis(n, 1);
        Controller {
            a: PolyVec::constant(&one, 1.0),
            c: (0..m).map(|_| PolyVec::zero(&lin)).collect(),
            alpha: 0,
            b: sum_of_squares_form(n),
            guard_eta: DEFAULT_GUARD_ETA,
            provenance: Provenance::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.state_dim();
        if self.c.is_empty() {
            return Err(SynthError::File("controller has no input channels".into()));
        }
        for (label, p) in [("a", &self.a), ("b", &self.b)]
            .into_iter()
            .chain(self.c.iter().map(|p| ("c", p)))
        {
            if p.basis().n() != n {
                return Err(SynthError::File(format!(
                    "{label} polynomial lives in {} variables but a has {n}",
                    p.basis().n()
                )));
            }
            if p.coeffs().iter().any(|v| !v.is_finite()) {
                return Err(SynthError::File(format!("{label} has non-finite coefficients")));
            }
        }
        if !(self.guard_eta > 0.0) || !self.guard_eta.is_finite() {
            return Err(SynthError::File(format!(
                "guard_eta must be positive and finite, got {}",
                self.guard_eta
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("controller serializes")
    }

    pub fn from_json(text: &str) -> Result<Controller, SynthError> {
        let ctrl: Controller = serde_json::from_str(text)
            .map_err(|e| SynthError::File(format!("controller JSON: {e}")))?;
        ctrl.validate()?;
        Ok(ctrl)
    }
}

/// u_j = c_j(x)/a(x). Errors instead of dividing whenever |a(x)| < guard_eta
/// (a non-finite a(x) trips the guard too).
pub fn eval_control(ctrl: &Controller, x: &[f64]) -> Result<Vec<f64>, GuardError> {
    assert_eq!(x.len(), ctrl.state_dim(), "state dimension");
    let a = ctrl.a.eval(x);
    if !(a.abs() >= ctrl.guard_eta) {
        return Err(GuardError { state: x.to_vec(), a_value: a, eta: ctrl.guard_eta });
    }
    Ok(ctrl.c.iter().map(|cj| cj.eval(x) / a).collect())
}

// ---- synthesis pipeline ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SolverParams {
    /// Tikhonov weight for the EDMD fits.
    #[serde(default)]
    pub ridge: f64,
    #[serde(default = "default_sdp_tol")]
    pub sdp_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Accept a max-iteration exit whose worst residual is at most this.
    /// Zero keeps only certified optima.
    #[serde(default)]
    pub accept_residual: f64,
    /// Extracted coefficients below this snap to exact zero.
    #[serde(default = "default_snap")]
    pub snap_tolerance: f64,
}

fn default_sdp_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_snap() -> f64 {
    SNAP_TOLERANCE
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            ridge: 0.0,
            sdp_tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            accept_residual: 0.0,
            snap_tolerance: SNAP_TOLERANCE,
        }
    }
}

/// Shape of the compiled program, for logs and sidecars.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProgramStats {
    pub decision_dim: usize,
    pub gram_sizes: Vec<usize>,
    pub equality_rows: usize,
    pub dropped_rows: usize,
    pub zeroed_origin_rows: usize,
    pub max_zeroed_magnitude: f64,
    pub dropped_div_l1: Vec<f64>,
}

#[derive(Debug)]
pub struct SynthesisOutcome {
    pub controller: Controller,
    pub generators: GeneratorSet,
    pub program: ProgramStats,
    pub solution: SdpSolution,
}

/// Fit one Koopman operator per label, difference into generators, compile
/// the density program, solve it, and package the minimizer as a controller.
///
/// Labels must cover zero and e_1..e_m. When every batch carries draw ids
/// (i.e. the labels were sampled under one seed), the batches are first cut
/// down to their common draws so per-column sampling noise cancels in the
/// generator differences.
pub fn synthesize(
    snapshots: &[SnapshotSet],
    basis: &Basis,
    spec: &SynthesisSpec,
    params: &SolverParams,
) -> Result<SynthesisOutcome, SynthError> {
    if snapshots.is_empty() {
        return Err(SynthError::Data("no snapshot sets given".into()));
    }
    let n = basis.n();
    let dt = snapshots[0].dt;
    for s in snapshots {
        if s.n() != n {
            return Err(SynthError::Data(format!(
                "label {} has state dimension {} but the basis expects {n}",
                s.label,
                s.n()
            )));
        }
        if s.dt != dt {
            return Err(SynthError::Data(format!(
                "label {} was sampled at dt = {} but label {} at dt = {dt}",
                s.label, s.dt, snapshots[0].label
            )));
        }
    }
    let m = snapshots.iter().filter_map(|s| s.label.channel()).map(|j| j + 1).max().unwrap_or(0);
    spec.validate(n, m).map_err(SynthError::Program)?;

    let aligned: Vec<SnapshotSet>;
    let sets: &[SnapshotSet] =
        if snapshots.len() > 1 && snapshots.iter().all(|s| s.draw_ids.is_some()) {
            let mut common: Vec<u64> = snapshots[0].draw_ids.clone().expect("checked above");
            common.sort_unstable();
            for s in &snapshots[1..] {
                let mut ids = s.draw_ids.clone().expect("checked above");
                ids.sort_unstable();
                common.retain(|id| ids.binary_search(id).is_ok());
            }
            if common.is_empty() {
                return Err(SynthError::Data(
                    "snapshot labels share no draw ids; sample all labels under one seed \
                     or strip the ids to skip alignment"
                        .into(),
                ));
            }
            aligned = snapshots.iter().map(|s| s.restrict_to_ids(&common)).collect();
            &aligned
        } else {
            snapshots
        };

    let fits: Vec<KoopmanFit> = sets
        .par_iter()
        .map(|s| fit_koopman(s, basis, params.ridge))
        .collect::<Result<_, _>>()
        .map_err(SynthError::Fit)?;
    let generators = build_generator_set(&fits, basis, dt).map_err(SynthError::Generator)?;

    let program = build_program(&generators, spec).map_err(SynthError::Program)?;
    let compiled = compile_sdp(&program).map_err(SynthError::Compile)?;
    let solution = solve(&compiled.sdp, params.sdp_tol, params.max_iter).map_err(SynthError::Solve)?;
    let decisions = extract_solution(&compiled, &solution, params.accept_residual, params.snap_tolerance)
        .map_err(SynthError::Extract)?;
    let (a, c) = compiled.layout.polys(&decisions).map_err(SynthError::Extract)?;

    let stats = ProgramStats {
        decision_dim: program.decision_dim(),
        gram_sizes: compiled.grams.iter().map(|g| g.size()).collect(),
        equality_rows: compiled.sdp.n_constraints(),
        dropped_rows: compiled.dropped_rows,
        zeroed_origin_rows: program.zeroed_origin_rows.len(),
        max_zeroed_magnitude: program
            .zeroed_origin_rows
            .iter()
            .map(|r| r.magnitude)
            .fold(0.0, f64::max),
        dropped_div_l1: program.dropped_div_l1.clone(),
    };
    let controller = Controller {
        a,
        c,
        alpha: spec.alpha,
        b: spec.b.clone(),
        guard_eta: DEFAULT_GUARD_ETA,
        provenance: Provenance {
            data_digest: data_digest(snapshots),
            spec_digest: spec_digest(spec),
            solver: SolverSummary {
                status: format!("{:?}", solution.status),
                iterations: solution.iterations,
                objective: solution.objective,
                primal_residual: solution.primal_residual,
                dual_residual: solution.dual_residual,
                duality_gap: solution.duality_gap,
            },
            fit_residuals: generators.residuals.clone(),
        },
    };
    Ok(SynthesisOutcome { controller, generators, program: stats, solution })
}

// ---- input digests ----

fn fnv1a(state: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *state ^= b as u64;
        *state = state.wrapping_mul(0x100000001b3);
    }
}

/// Order-insensitive digest of snapshot batches: labels are hashed in sorted
/// order together with dt and the raw column data.
pub fn data_digest(snapshots: &[SnapshotSet]) -> String {
    let mut order: Vec<usize> = (0..snapshots.len()).collect();
    order.sort_by_key(|&i| snapshots[i].label.to_string());
    let mut h = 0xcbf29ce484222325u64;
    for &i in &order {
        let s = &snapshots[i];
        fnv1a(&mut h, s.label.to_string().as_bytes());
        fnv1a(&mut h, &s.dt.to_bits().to_le_bytes());
        fnv1a(&mut h, &(s.len() as u64).to_le_bytes());
        for l in 0..s.len() {
            for v in s.x_col(l).iter().chain(s.y_col(l)) {
                fnv1a(&mut h, &v.to_bits().to_le_bytes());
            }
        }
    }
    format!("{h:016x}")
}

pub fn spec_digest(spec: &SynthesisSpec) -> String {
    let mut h = 0xcbf29ce484222325u64;
    fnv1a(&mut h, serde_json::to_string(spec).expect("spec serializes").as_bytes());
    format!("{h:016x}")
}

// ---- closed-loop validation ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ValidationConfig {
    pub n_trials: usize,
    /// Per-coordinate [lower, upper] of the initial-condition box. Degenerate
    /// coordinates (lower = upper) pin that coordinate.
    #[serde(rename = "box")]
    pub init_box: Vec<[f64; 2]>,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "default_eps_norm")]
    pub eps_norm: f64,
    pub seed: u64,
    /// Keep rolling with the last input when the guard trips instead of
    /// scoring the trial as a guard stop.
    #[serde(default)]
    pub hold_on_guard: bool,
}

fn default_t_final() -> f64 {
    DEFAULT_T_FINAL
}

fn default_eps_norm() -> f64 {
    DEFAULT_EPS_NORM
}

impl ValidationConfig {
    pub fn validate(&self, n: usize) -> Result<(), SynthError> {
        if self.n_trials < 1 {
            return Err(SynthError::Data("n_trials must be at least 1".into()));
        }
        if self.init_box.len() != n {
            return Err(SynthError::Data(format!(
                "initial box has {} coordinates but the state dimension is {n}",
                self.init_box.len()
            )));
        }
        for (k, b) in self.init_box.iter().enumerate() {
            if !(b[0] <= b[1]) || !b[0].is_finite() || !b[1].is_finite() {
                return Err(SynthError::Data(format!(
                    "box coordinate {} must satisfy lower <= upper, got [{}, {}]",
                    k + 1,
                    b[0],
                    b[1]
                )));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SynthError::Data(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(SynthError::Data(format!("t_final must be positive, got {}", self.t_final)));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm.is_finite()) {
            return Err(SynthError::Data(format!(
                "eps_norm must be positive, got {}",
                self.eps_norm
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    /// Full horizon, final norm under eps_norm.
    Converged,
    /// Full horizon, final norm at or above eps_norm.
    Missed,
    /// Hit the blow-up bound or went non-finite.
    Diverged,
    /// Denominator guard tripped mid-rollout.
    GuardStop,
}

impl TrialOutcome {
    fn as_str(self) -> &'static str {
        match self {
            TrialOutcome::Converged => "converged",
            TrialOutcome::Missed => "missed",
            TrialOutcome::Diverged => "diverged",
            TrialOutcome::GuardStop => "guard_stop",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_trials: usize,
    pub converged_count: usize,
    pub diverged_count: usize,
    pub guard_failures: usize,
    /// The convergence test, verbatim.
    pub criterion: String,
    pub eps_norm: f64,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    /// ‖x‖ at the last recorded step of each trial (the pre-stop state for
    /// diverged trials, the guard state for guard stops).
    pub final_norms: Vec<f64>,
    pub outcomes: Vec<TrialOutcome>,
    pub wall_time_s: f64,
}

impl ValidationReport {
    pub fn convergence_fraction(&self) -> f64 {
        self.converged_count as f64 / self.n_trials as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<ValidationReport, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::File(format!("report JSON: {e}")))
    }

    /// One row per trial: index, final norm, outcome.
    pub fn write_norms_csv(&self, path: &Path) -> Result<(), SynthError> {
        let mut text = String::from("trial,final_norm,outcome\n");
        for (k, (norm, outcome)) in self.final_norms.iter().zip(&self.outcomes).enumerate() {
            writeln!(text, "{k},{norm},{}", outcome.as_str()).expect("string write");
        }
        std::fs::write(path, text).map_err(|e| SynthError::File(format!("{}: {e}", path.display())))
    }
}

/// Initial state of validation trial `trial`: a uniform draw from stream
/// `trial` of the configured seed, so any consumer (scoring, trajectory
/// export) reproduces the same point regardless of thread schedule.
pub fn trial_start(cfg: &ValidationConfig, trial: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    cfg.init_box.iter().map(|b| b[0] + (b[1] - b[0]) * rng.gen::<f64>()).collect()
}

/// Roll the closed loop out of `cfg.n_trials` uniform initial points and
/// score each against ‖x(t_final)‖ < eps_norm. Deterministic for a fixed
/// seed: trial k draws from its own stream k regardless of thread schedule.
/// Guard trips are scored, not raised.
pub fn validate(
    ctrl: &Controller,
    model: &SystemModel,
    cfg: &ValidationConfig,
) -> Result<ValidationReport, SynthError> {
    ctrl.validate()?;
    if model.state_dim() != ctrl.state_dim() || model.input_dim() != ctrl.input_dim() {
        return Err(SynthError::Data(format!(
            "model is {}-state/{}-input but the controller is {}/{}",
            model.state_dim(),
            model.input_dim(),
            ctrl.state_dim(),
            ctrl.input_dim()
        )));
    }
    cfg.validate(model.state_dim())?;

    let start = Instant::now();
    let records: Vec<(f64, TrialOutcome)> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|trial| -> Result<(f64, TrialOutcome), SynthError> {
            let x0 = trial_start(cfg, trial);
            let mut last_u = vec![0.0; ctrl.input_dim()];
            let feedback = |x: &[f64]| -> Result<Vec<f64>, GuardError> {
                match eval_control(ctrl, x) {
                    Ok(u) => {
                        last_u.clone_from(&u);
                        Ok(u)
                    }
                    Err(_) if cfg.hold_on_guard => Ok(last_u.clone()),
                    Err(e) => Err(e),
                }
            };
            match simulate(model, feedback, &x0, cfg.dt, cfg.t_final, BLOW_UP_NORM) {
                Ok(traj) => {
                    let norm =
                        traj.final_state().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let outcome = if traj.blew_up {
                        TrialOutcome::Diverged
                    } else if norm < cfg.eps_norm {
                        TrialOutcome::Converged
                    } else {
                        TrialOutcome::Missed
                    };
                    Ok((norm, outcome))
                }
                Err(DynError::Controller { state, .. }) => {
                    let norm = state.iter().map(|v| v * v).sum::<f64>().sqrt();
                    Ok((norm, TrialOutcome::GuardStop))
                }
                Err(e) => Err(SynthError::Sim(e)),
            }
        })
        .collect::<Result<_, _>>()?;

    let count = |o: TrialOutcome| records.iter().filter(|r| r.1 == o).count();
    Ok(ValidationReport {
        n_trials: cfg.n_trials,
        converged_count: count(TrialOutcome::Converged),
        diverged_count: count(TrialOutcome::Diverged),
        guard_failures: count(TrialOutcome::GuardStop),
        criterion: format!("||x({})|| < {}", cfg.t_final, cfg.eps_norm),
        eps_norm: cfg.eps_norm,
        t_final: cfg.t_final,
        dt: cfg.dt,
        seed: cfg.seed,
        final_norms: records.iter().map(|r| r.0).collect(),
        outcomes: records.iter().map(|r| r.1).collect(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ---- certificate sampling ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n_samples: usize,
    pub min_value: f64,
    pub argmin: Vec<f64>,
    /// Samples below −tolerance.
    pub violations: usize,
    pub violation_fraction: f64,
    pub tolerance: f64,
}

/// Rebuild the margin-subtracted stability polynomial at the controller's
/// coefficients and sample it over `sample_box`. A solved program should
/// show a min near or above zero; anything else localizes the failure.
pub fn certificate_diagnostics(
    ctrl: &Controller,
    gen: &GeneratorSet,
    spec: &SynthesisSpec,
    sample_box: &[[f64; 2]],
    n_samples: usize,
    seed: u64,
) -> Result<CertificateReport, SynthError> {
    let n = gen.basis.n();
    if sample_box.len() != n {
        return Err(SynthError::Data(format!(
            "sample box has {} coordinates but the state dimension is {n}",
            sample_box.len()
        )));
    }
    if n_samples == 0 {
        return Err(SynthError::Data("n_samples must be at least 1".into()));
    }
    let program = build_program(gen, spec).map_err(SynthError::Program)?;
    let d = decision_from_polys(&program.layout, &ctrl.a, &ctrl.c)?;

    // Fold the affine map once; evaluation per sample is then one poly eval.
    let stability = program.stability();
    let mut poly = stability.offset.clone();
    for (col, &di) in stability.columns.iter().zip(&d) {
        let Some(col) = col else { continue };
        if di == 0.0 {
            continue;
        }
        for (o, &c) in poly.coeffs_mut().iter_mut().zip(col.coeffs()) {
            *o += di * c;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_value = f64::INFINITY;
    let mut argmin = vec![0.0; n];
    let mut violations = 0usize;
    let mut x = vec![0.0; n];
    for _ in 0..n_samples {
        for (xi, b) in x.iter_mut().zip(sample_box) {
            *xi = b[0] + (b[1] - b[0]) * rng.gen::<f64>();
        }
        let v = poly.eval(&x);
        if v < min_value {
            min_value = v;
            argmin.clone_from(&x);
        }
        if v < -CERT_VIOLATION_TOL {
            violations += 1;
        }
    }
    Ok(CertificateReport {
        n_samples,
        min_value,
        argmin,
        violations,
        violation_fraction: violations as f64 / n_samples as f64,
        tolerance: CERT_VIOLATION_TOL,
    })
}

/// Flatten (a, c) back onto the layout's decision coordinates. Coefficient
/// mass outside the layout (degrees the spec never granted) is an error:
/// sampling a trimmed-down controller would report on the wrong polynomial.
fn decision_from_polys(
    layout: &DecisionLayout,
    a: &PolyVec,
    c: &[PolyVec],
) -> Result<Vec<f64>, SynthError> {
    if c.len() != layout.c_positions().len() {
        return Err(SynthError::Data(format!(
            "controller has {} input channels but the spec has {}",
            c.len(),
            layout.c_positions().len()
        )));
    }
    let basis = layout.basis();
    let coeff_at = |p: &PolyVec, pos: usize| p.coeff(&basis.indices()[pos]);
    let mut d = Vec::with_capacity(layout.dim());
    let mut covered = 0.0f64;
    for &pos in layout.a_positions() {
        let v = coeff_at(a, pos);
        covered += v.abs();
        d.push(v);
    }
    if layout.a_positions().is_empty() {
        // a is pinned to one; the offset absorbed it.
        let leftover = a.coeffs().iter().skip(1).map(|v| v.abs()).sum::<f64>()
            + (a.coeffs()[0] - 1.0).abs();
        if leftover > 1e-12 {
            return Err(SynthError::Data(
                "spec pins a = 1 but the controller's a differs".into(),
            ));
        }
        covered += 1.0;
    }
    for (j, positions) in layout.c_positions().iter().enumerate() {
        for &pos in positions {
            let v = coeff_at(&c[j], pos);
            covered += v.abs();
            d.push(v);
        }
    }
    let total = a.l1_norm() + c.iter().map(|p| p.l1_norm()).sum::<f64>();
    if total - covered > 1e-12 * (1.0 + total) {
        return Err(SynthError::Data(
            "controller coefficients fall outside the spec's decision space; \
             check deg_c, deg_a and c_min_degree"
                .into(),
        ));
    }
    Ok(d)
}

// ---- origin linearization ----

/// Central-difference Jacobian of the closed loop F(x) + G(x)·u(x) at the
/// origin, through the same right-hand side the simulator integrates.
pub fn closed_loop_jacobian(
    model: &SystemModel,
    ctrl: &Controller,
    h: f64,
) -> Result<Mat<f64>, SynthError> {
    let n = model.state_dim();
    if ctrl.state_dim() != n || ctrl.input_dim() != model.input_dim() {
        return Err(SynthError::Data(format!(
            "model is {}-state/{}-input but the controller is {}/{}",
            n,
            model.input_dim(),
            ctrl.state_dim(),
            ctrl.input_dim()
        )));
    }
    assert!(h > 0.0, "step must be positive");
    let mut jac = Mat::<f64>::zeros(n, n);
    let mut scratch = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut x = vec![0.0; n];
    for k in 0..n {
        x[k] = h;
        let up = eval_control(ctrl, &x)?;
        model.rhs_into(&x, &up, &mut fp, &mut scratch);
        x[k] = -h;
        let um = eval_control(ctrl, &x)?;
        model.rhs_into(&x, &um, &mut fm, &mut scratch);
        x[k] = 0.0;
        for i in 0..n {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// All eigenvalue real parts strictly negative.
pub fn is_hurwitz(jac: &Mat<f64>) -> bool {
    jac.eigenvalues::<faer::complex_native::c64>().iter().all(|l| l.re < 0.0)
}
