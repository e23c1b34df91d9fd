//! Batch front end. One run directory per config: `collect` samples the
//! system, `synthesize` turns snapshots into a controller, `simulate` scores
//! the closed loop, `report` folds the directory into one summary.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use koopsyn::config::{ConfigError, RunConfig, BASIS_LEN_CAP};
use koopsyn::dynamics::{simulate, write_snapshot_csv, write_trajectory_csv, collect_snapshots};
use koopsyn::edmd::GeneratorSet;
use koopsyn::polybasis::{basis_len_capped, build_basis};
use koopsyn::synthesis::{
    certificate_diagnostics, eval_control, synthesize, trial_start, validate, Controller,
    GuardError, SynthError, ValidationReport, BLOW_UP_NORM,
};

/// Box samples drawn for the certificate artifact.
const CERT_SAMPLES: usize = 10_000;
/// Trajectory CSVs are written for the first trials only; every trial is
/// still scored in the report.
const TRAJECTORY_FILES_CAP: usize = 10;

#[derive(Parser)]
#[command(name = "koopsyn", version, about = "Density-based controller synthesis from snapshot data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the sampling and validation seeds together.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress details to stderr.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample one snapshot batch per input label into the run directory.
    Collect,
    /// Fit generators, solve the density program, write the controller.
    Synthesize,
    /// Roll out the closed loop, score convergence, export trajectories.
    Simulate {
        /// Controller JSON; defaults to <out_dir>/controller.json.
        #[arg(long)]
        controller: Option<PathBuf>,
        /// Drive u = 0 instead of a controller file.
        #[arg(long)]
        open_loop: bool,
    },
    /// Summarize a run directory (JSON + Markdown).
    Report,
}

enum CliError {
    Config(ConfigError),
    Pipeline(SynthError),
    Usage(String),
    Io(String),
    Lock(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(e) => e.exit_code(),
            CliError::Pipeline(e) => {
                if e.sdp_infeasible() {
                    return 5;
                }
                match e {
                    SynthError::Data(_)
                    | SynthError::File(_)
                    | SynthError::Sim(_)
                    | SynthError::Guard(_) => 2,
                    SynthError::Fit(_) | SynthError::Generator(_) => 3,
                    SynthError::Program(_)
                    | SynthError::Compile(_)
                    | SynthError::Solve(_)
                    | SynthError::Extract(_) => 4,
                }
            }
            CliError::Usage(_) | CliError::Io(_) | CliError::Lock(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Usage(s) | CliError::Io(s) | CliError::Lock(s) => write!(f, "{s}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Pipeline(e)
    }
}

/// Exclusive claim on a run directory for the duration of one command.
/// Dropped (and removed) on completion, including error paths.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Lock(format!(
                "{} is locked by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Io(format!("lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    if let Ok(v) = std::env::var("KOOPSYN_WORKERS") {
        match v.parse::<usize>() {
            Ok(k) if k >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => log::warn!("KOOPSYN_WORKERS={v} is not a positive integer; ignoring"),
        }
    }
    let Cli { cmd, config, out, seed, verbose: _ } = cli;
    let result = match cmd {
        Cmd::Collect => load_config(&config, &out, seed).and_then(|c| cmd_collect(&c)),
        Cmd::Synthesize => load_config(&config, &out, seed).and_then(|c| cmd_synthesize(&c)),
        Cmd::Simulate { controller, open_loop } => {
            load_config(&config, &out, seed).and_then(|c| cmd_simulate(&c, controller, open_loop))
        }
        Cmd::Report => report_dir(&config, &out).and_then(|d| cmd_report(&d)),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn load_config(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let path = config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(dir) = out {
        cfg = cfg.with_out_dir(dir.clone());
    }
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn report_dir(config: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    match (out, config) {
        (Some(dir), _) => Ok(dir.clone()),
        (None, Some(path)) => Ok(RunConfig::from_path(path)?.out_dir),
        (None, None) => Err(CliError::Usage("report needs --out <dir> or --config <path>".into())),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))
}

/// Wall-clock records live only in these sidecars; every other artifact is a
/// pure function of config and seed.
fn write_timing(dir: &Path, command: &str, t0: Instant) -> Result<(), CliError> {
    let unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let text = serde_json::to_string_pretty(&json!({
        "command": command,
        "seconds": t0.elapsed().as_secs_f64(),
        "unix_time": unix,
    }))
    .expect("timing serializes");
    write_text(&dir.join(format!("timings_{command}.json")), &text)
}

fn cmd_collect(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model()?.ok_or_else(|| {
        CliError::Usage("collect needs a bundled benchmark; external data is already collected".into())
    })?;
    let t0 = Instant::now();
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let min_pairs = build_basis(model.state_dim(), cfg.q).len();
    for label in cfg.labels() {
        let set = collect_snapshots(&model, label, &cfg.sample, min_pairs)
            .map_err(|e| CliError::Pipeline(SynthError::Sim(e)))?;
        let expect = cfg.sample.n_init * cfg.sample.horizon;
        if set.len() * 2 < expect {
            log::warn!(
                "label {label}: only {} of {expect} draws survived the sampling box",
                set.len()
            );
        }
        let path = cfg.snapshot_path(label);
        write_snapshot_csv(&set, &path)
            .map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))?;
        println!("wrote {} ({} pairs)", path.display(), set.len());
    }
    write_timing(&cfg.out_dir, "collect", t0)
}

fn cmd_synthesize(cfg: &RunConfig) -> Result<(), CliError> {
    let snapshots = cfg.load_snapshots()?;
    let n = snapshots[0].n();
    if basis_len_capped(n, cfg.q, BASIS_LEN_CAP).is_none() {
        return Err(ConfigError::Invalid(format!(
            "dictionary for n = {n}, q = {} exceeds {BASIS_LEN_CAP} monomials",
            cfg.q
        ))
        .into());
    }
    let basis = build_basis(n, cfg.q);
    let spec = cfg.spec.to_spec(n)?;
    let t0 = Instant::now();
    let _lock = DirLock::acquire(&cfg.out_dir)?;

    let outcome = synthesize(&snapshots, &basis, &spec, &cfg.solver).map_err(CliError::Pipeline)?;

    let ctrl_path = cfg.out_dir.join("controller.json");
    write_text(&ctrl_path, &outcome.controller.to_json())?;
    write_text(&cfg.out_dir.join("generators.json"), &outcome.generators.to_json())?;
    #[derive(Serialize)]
    struct SdpStats<'a> {
        program: &'a koopsyn::synthesis::ProgramStats,
        solver: &'a koopsyn::synthesis::SolverSummary,
    }
    let stats = SdpStats { program: &outcome.program, solver: &outcome.controller.provenance.solver };
    write_text(
        &cfg.out_dir.join("sdp_stats.json"),
        &serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;

    let cert = certificate_diagnostics(
        &outcome.controller,
        &outcome.generators,
        &spec,
        &cfg.sample.sample_box,
        CERT_SAMPLES,
        cfg.sample.seed,
    )
    .map_err(CliError::Pipeline)?;
    write_text(
        &cfg.out_dir.join("certificate.json"),
        &serde_json::to_string_pretty(&cert).expect("certificate serializes"),
    )?;

    println!(
        "wrote {} ({}, objective {:.6}, certificate min {:.3e})",
        ctrl_path.display(),
        outcome.controller.provenance.solver.status,
        outcome.controller.provenance.solver.objective,
        cert.min_value
    );
    write_timing(&cfg.out_dir, "synthesize", t0)
}

fn cmd_simulate(
    cfg: &RunConfig,
    controller: Option<PathBuf>,
    open_loop: bool,
) -> Result<(), CliError> {
    let model = cfg
        .model()?
        .ok_or_else(|| CliError::Usage("simulate needs a bundled benchmark".into()))?;
    let ctrl = if open_loop {
        Controller::zero_feedback(model.state_dim(), model.input_dim())
    } else {
        let path = controller.unwrap_or_else(|| cfg.out_dir.join("controller.json"));
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Io(format!("controller {}: {e}", path.display())))?;
        Controller::from_json(&text).map_err(CliError::Pipeline)?
    };
    let t0 = Instant::now();
    let _lock = DirLock::acquire(&cfg.out_dir)?;

    let report = validate(&ctrl, &model, &cfg.validation).map_err(CliError::Pipeline)?;
    // The canonical artifacts carry no wall-clock data.
    let mut stored = report.clone();
    stored.wall_time_s = 0.0;
    write_text(&cfg.out_dir.join("validation_report.json"), &stored.to_json())?;
    report
        .write_norms_csv(&cfg.out_dir.join("final_norms.csv"))
        .map_err(CliError::Pipeline)?;

    let traj_dir = cfg.out_dir.join("trajectories");
    fs::create_dir_all(&traj_dir)
        .map_err(|e| CliError::Io(format!("create {}: {e}", traj_dir.display())))?;
    for trial in 0..report.n_trials.min(TRAJECTORY_FILES_CAP) {
        let x0 = trial_start(&cfg.validation, trial);
        let mut last_u = vec![0.0; ctrl.input_dim()];
        let feedback = |x: &[f64]| -> Result<Vec<f64>, GuardError> {
            match eval_control(&ctrl, x) {
                Ok(u) => {
                    last_u.clone_from(&u);
                    Ok(u)
                }
                Err(_) if cfg.validation.hold_on_guard => Ok(last_u.clone()),
                Err(e) => Err(e),
            }
        };
        let path = traj_dir.join(format!("trial_{trial:03}.csv"));
        match simulate(&model, feedback, &x0, cfg.validation.dt, cfg.validation.t_final, BLOW_UP_NORM)
        {
            Ok(traj) => write_trajectory_csv(&traj, &path)
                .map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))?,
            // Guard stops are already scored in the report; there is no
            // trajectory to export.
            Err(e) => log::warn!("trial {trial}: {e}; no trajectory written"),
        }
    }

    println!(
        "{}/{} trials converged ({}); report in {}",
        report.converged_count,
        report.n_trials,
        report.criterion,
        cfg.out_dir.join("validation_report.json").display()
    );
    write_timing(&cfg.out_dir, "simulate", t0)
}

fn read_if_present(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok()
}

fn cmd_report(dir: &Path) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("{} is not a directory", dir.display())));
    }
    let missing = json!("missing");
    let mut md = String::from("# koopsyn run summary\n\n");

    // Stage 1: collected snapshot batches.
    let mut batches: Vec<(String, usize)> = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("snapshots_") && name.ends_with(".csv") {
                let rows = fs::read_to_string(entry.path())
                    .map(|t| t.lines().count().saturating_sub(1))
                    .unwrap_or(0);
                batches.push((name, rows));
            }
        }
    }
    batches.sort();
    let collect_stage = if batches.is_empty() {
        missing.clone()
    } else {
        json!(batches
            .iter()
            .map(|(name, rows)| json!({ "file": name, "pairs": rows }))
            .collect::<Vec<_>>())
    };
    match &batches[..] {
        [] => md.push_str("- collect: missing\n"),
        some => {
            let list: Vec<String> =
                some.iter().map(|(n, r)| format!("{n} ({r} pairs)")).collect();
            md.push_str(&format!("- collect: {}\n", list.join(", ")));
        }
    }

    // Stage 2: generator fits.
    let fit_stage = match read_if_present(&dir.join("generators.json"))
        .and_then(|t| GeneratorSet::from_json(&t).ok())
    {
        Some(gen) => {
            md.push_str(&format!(
                "- fit: residuals {:?}, gram condition {:.3e}, pairs {:?}\n",
                gen.residuals, gen.cond_a, gen.t_fit
            ));
            json!({
                "residuals": gen.residuals,
                "gram_condition": gen.cond_a,
                "pairs": gen.t_fit,
                "basis": { "n": gen.basis.n(), "q": gen.basis.q() },
                "dt": gen.dt,
            })
        }
        None => {
            md.push_str("- fit: missing\n");
            missing.clone()
        }
    };

    // Stage 3: the controller and its solve.
    let sdp_stats = read_if_present(&dir.join("sdp_stats.json"))
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok());
    let synth_stage = match read_if_present(&dir.join("controller.json"))
        .and_then(|t| Controller::from_json(&t).ok())
    {
        Some(ctrl) => {
            let channels: Vec<String> = ctrl.c.iter().map(|p| p.to_string()).collect();
            md.push_str(&format!(
                "- synthesize: {} in {} iterations, objective {}; u = [{}], a = {}\n",
                ctrl.provenance.solver.status,
                ctrl.provenance.solver.iterations,
                ctrl.provenance.solver.objective,
                channels.join("; "),
                ctrl.a
            ));
            json!({
                "alpha": ctrl.alpha,
                "guard_eta": ctrl.guard_eta,
                "a": ctrl.a.to_string(),
                "c": channels,
                "b": ctrl.b.to_string(),
                "solver": {
                    "status": ctrl.provenance.solver.status,
                    "iterations": ctrl.provenance.solver.iterations,
                    "objective": ctrl.provenance.solver.objective,
                },
                "digests": {
                    "data": ctrl.provenance.data_digest,
                    "spec": ctrl.provenance.spec_digest,
                },
                "sdp": sdp_stats.unwrap_or_else(|| missing.clone()),
            })
        }
        None => {
            md.push_str("- synthesize: missing\n");
            missing.clone()
        }
    };

    // Stage 4: sampled certificate.
    let cert_stage = match read_if_present(&dir.join("certificate.json"))
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
    {
        Some(v) => {
            md.push_str(&format!(
                "- certificate: min {} over {} samples, {} violations\n",
                v.get("min_value").unwrap_or(&missing),
                v.get("n_samples").unwrap_or(&missing),
                v.get("violations").unwrap_or(&missing)
            ));
            v
        }
        None => {
            md.push_str("- certificate: missing\n");
            missing.clone()
        }
    };

    // Stage 5: closed-loop validation.
    let validate_stage = match read_if_present(&dir.join("validation_report.json"))
        .and_then(|t| ValidationReport::from_json(&t).ok())
    {
        Some(r) => {
            md.push_str(&format!(
                "- validate: {}/{} converged ({}), {} diverged, {} guard stops\n",
                r.converged_count, r.n_trials, r.criterion, r.diverged_count, r.guard_failures
            ));
            json!({
                "n_trials": r.n_trials,
                "converged": r.converged_count,
                "diverged": r.diverged_count,
                "guard_failures": r.guard_failures,
                "fraction": r.convergence_fraction(),
                "criterion": r.criterion,
            })
        }
        None => {
            md.push_str("- validate: missing\n");
            missing.clone()
        }
    };

    let summary = json!({
        "collect": collect_stage,
        "fit": fit_stage,
        "synthesize": synth_stage,
        "certificate": cert_stage,
        "validate": validate_stage,
    });
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    write_text(&dir.join("summary.md"), &md)?;
    println!("wrote {}", dir.join("summary.json").display());
    Ok(())
}
