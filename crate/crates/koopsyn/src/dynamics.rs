//! Benchmark control-affine systems, fixed-step integration, and snapshot
//! collection. This is the only module that evaluates F and G; everything
//! downstream sees data.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("sample config: {0}")]
    Config(String),
    #[error("input label {label} out of range for a {m}-input system")]
    LabelRange { label: String, m: usize },
    #[error("{survivors} snapshot pairs survive filtering but at least {needed} are required")]
    TooFewPairs { survivors: usize, needed: usize },
    #[error("controller failed at state {state:?}: {reason}")]
    Controller { state: Vec<f64>, reason: String },
    #[error("snapshot file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Control-affine system ẋ = F(x) + Σ_j G_j(x) u_j.
pub struct SystemModel {
    name: String,
    n: usize,
    m: usize,
    drift: VectorField,
    input_maps: Vec<VectorField>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        drift: VectorField,
        input_maps: Vec<VectorField>,
    ) -> Self {
        assert_eq!(input_maps.len(), m, "one input map per channel");
        assert!(n >= 1);
        SystemModel { name: name.into(), n, m, drift, input_maps }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    pub fn input_map_into(&self, j: usize, x: &[f64], out: &mut [f64]) {
        (self.input_maps[j])(x, out);
    }

    /// out = F(x) + Σ_j G_j(x) u_j
    pub fn rhs_into(&self, x: &[f64], u: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(u.len(), self.m);
        (self.drift)(x, out);
        for (j, g) in self.input_maps.iter().enumerate() {
            if u[j] == 0.0 {
                continue;
            }
            g(x, scratch);
            for i in 0..self.n {
                out[i] += u[j] * scratch[i];
            }
        }
    }
}

/// Constant input applied while recording a snapshot pair: either u = 0 or a
/// unit step on a single channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputLabel {
    Zero,
    /// `Unit(j)` is the unit step e_j, with j 1-based as written in files.
    Unit(usize),
}

impl InputLabel {
    /// 0-based channel index, `None` for the zero label.
    pub fn channel(&self) -> Option<usize> {
        match self {
            InputLabel::Zero => None,
            InputLabel::Unit(j) => Some(j - 1),
        }
    }

    pub fn input_vector(&self, m: usize) -> Vec<f64> {
        let mut u = vec![0.0; m];
        if let Some(j) = self.channel() {
            u[j] = 1.0;
        }
        u
    }

    /// zero, e_1, .., e_m in that order.
    pub fn all(m: usize) -> Vec<InputLabel> {
        let mut v = vec![InputLabel::Zero];
        v.extend((1..=m).map(InputLabel::Unit));
        v
    }
}

impl fmt::Display for InputLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputLabel::Zero => write!(f, "zero"),
            InputLabel::Unit(j) => write!(f, "e_{j}"),
        }
    }
}

impl FromStr for InputLabel {
    type Err = DynError;

    fn from_str(s: &str) -> Result<Self, DynError> {
        let s = s.trim();
        if s == "zero" {
            return Ok(InputLabel::Zero);
        }
        if let Some(rest) = s.strip_prefix("e_") {
            let j: usize = rest
                .parse()
                .map_err(|_| DynError::Format(format!("bad input label {s:?}")))?;
            if j == 0 {
                return Err(DynError::Format("input labels are 1-based: e_1, e_2, ..".into()));
            }
            return Ok(InputLabel::Unit(j));
        }
        Err(DynError::Format(format!("bad input label {s:?} (expected zero or e_<j>)")))
    }
}

impl Serialize for InputLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InputLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a snapshot batch is drawn.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleConfig {
    /// Sampling step δt in seconds.
    pub dt: f64,
    pub n_init: usize,
    /// Per-coordinate [lower, upper] of the uniform sampling box.
    #[serde(rename = "box")]
    pub sample_box: Vec<[f64; 2]>,
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    1
}

impl SampleConfig {
    pub fn validate(&self, n: usize) -> Result<(), DynError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(DynError::Config(format!("dt must be positive and finite, got {}", self.dt)));
        }
        if self.n_init < 1 {
            return Err(DynError::Config("n_init must be at least 1".into()));
        }
        if self.horizon < 1 {
            return Err(DynError::Config("horizon must be at least 1".into()));
        }
        if self.sample_box.len() != n {
            return Err(DynError::Config(format!(
                "sampling box has {} coordinates but the state dimension is {n}",
                self.sample_box.len()
            )));
        }
        for (k, b) in self.sample_box.iter().enumerate() {
            if !(b[0] < b[1]) || !b[0].is_finite() || !b[1].is_finite() {
                return Err(DynError::Config(format!(
                    "box coordinate {} must satisfy lower < upper, got [{}, {}]",
                    k + 1,
                    b[0],
                    b[1]
                )));
            }
        }
        Ok(())
    }
}

/// Paired one-step data (X, Y) recorded under one constant input label.
/// Columns pair one-to-one: Y_l is the dt-flow of X_l.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    pub label: InputLabel,
    pub dt: f64,
    /// n x T states.
    pub x: Mat<f64>,
    /// n x T successors.
    pub y: Mat<f64>,
    /// Originating draw id of each column (trajectory * horizon + step).
    /// Lets callers intersect batches from different labels that share a seed,
    /// so per-column sampling noise cancels in finite differences of fits.
    pub draw_ids: Option<Vec<u64>>,
    pub config: Option<SampleConfig>,
}

impl SnapshotSet {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn x_col(&self, l: usize) -> &[f64] {
        self.x.col_as_slice(l)
    }

    pub fn y_col(&self, l: usize) -> &[f64] {
        self.y.col_as_slice(l)
    }

    /// Keep only columns whose draw id appears in `ids` (sorted ascending).
    pub fn restrict_to_ids(&self, ids: &[u64]) -> SnapshotSet {
        let own = self.draw_ids.as_ref().expect("restrict_to_ids needs draw ids");
        let keep: Vec<usize> = own
            .iter()
            .enumerate()
            .filter(|(_, id)| ids.binary_search(id).is_ok())
            .map(|(l, _)| l)
            .collect();
        let n = self.n();
        let x = Mat::from_fn(n, keep.len(), |i, l| self.x.read(i, keep[l]));
        let y = Mat::from_fn(n, keep.len(), |i, l| self.y.read(i, keep[l]));
        SnapshotSet {
            label: self.label,
            dt: self.dt,
            x,
            y,
            draw_ids: Some(keep.iter().map(|&l| own[l]).collect()),
            config: self.config.clone(),
        }
    }
}

/// One classical RK4 step of ẋ = F(x) + G(x)u under constant u. Non-finite
/// values propagate through the returned state; callers filter or abort.
pub fn rk4_step(model: &SystemModel, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    let n = model.state_dim();
    let mut scratch = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];

    model.rhs_into(x, u, &mut k1, &mut scratch);
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k1[i];
    }
    model.rhs_into(&stage, u, &mut k2, &mut scratch);
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k2[i];
    }
    model.rhs_into(&stage, u, &mut k3, &mut scratch);
    for i in 0..n {
        stage[i] = x[i] + dt * k3[i];
    }
    model.rhs_into(&stage, u, &mut k4, &mut scratch);

    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn in_box(x: &[f64], sample_box: &[[f64; 2]]) -> bool {
    x.iter()
        .zip(sample_box)
        .all(|(v, b)| v.is_finite() && *v >= b[0] && *v <= b[1])
}

/// Draw n_init uniform starts in the box and record (x, y) pairs under the
/// labeled constant input. Pairs whose successor leaves the box or turns
/// non-finite are dropped; a trajectory stops at its first dropped pair.
///
/// `min_pairs` is the downstream regression's row count Q; fewer survivors
/// than that is an error (pass 0 to skip the check).
pub fn collect_snapshots(
    model: &SystemModel,
    label: InputLabel,
    cfg: &SampleConfig,
    min_pairs: usize,
) -> Result<SnapshotSet, DynError> {
    cfg.validate(model.state_dim())?;
    if let Some(j) = label.channel() {
        if j >= model.input_dim() {
            return Err(DynError::LabelRange { label: label.to_string(), m: model.input_dim() });
        }
    }
    let u = label.input_vector(model.input_dim());
    let n = model.state_dim();
    let horizon = cfg.horizon as u64;

    // One ChaCha stream per trajectory: deterministic under any parallel
    // schedule, and the same draws for every label at a fixed seed.
    let per_traj: Vec<Vec<(u64, Vec<f64>, Vec<f64>)>> = (0..cfg.n_init)
        .into_par_iter()
        .map(|traj| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(traj as u64);
            let mut x: Vec<f64> = cfg
                .sample_box
                .iter()
                .map(|b| b[0] + (b[1] - b[0]) * rng.gen::<f64>())
                .collect();
            let mut pairs = Vec::with_capacity(cfg.horizon);
            for step in 0..horizon {
                let y = rk4_step(model, &x, &u, cfg.dt);
                if !in_box(&y, &cfg.sample_box) {
                    break;
                }
                pairs.push((traj as u64 * horizon + step, x.clone(), y.clone()));
                x = y;
            }
            pairs
        })
        .collect();

    let pairs: Vec<&(u64, Vec<f64>, Vec<f64>)> = per_traj.iter().flatten().collect();
    let t = pairs.len();
    if t < min_pairs.max(1) {
        return Err(DynError::TooFewPairs { survivors: t, needed: min_pairs.max(1) });
    }
    let x = Mat::from_fn(n, t, |i, l| pairs[l].1[i]);
    let y = Mat::from_fn(n, t, |i, l| pairs[l].2[i]);
    let draw_ids = pairs.iter().map(|p| p.0).collect();
    Ok(SnapshotSet {
        label,
        dt: cfg.dt,
        x,
        y,
        draw_ids: Some(draw_ids),
        config: Some(cfg.clone()),
    })
}

/// Closed-loop rollout sampled at every integration step.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub t: Vec<f64>,
    /// States, one per time stamp.
    pub states: Vec<Vec<f64>>,
    /// Inputs evaluated at the same stamps.
    pub inputs: Vec<Vec<f64>>,
    /// True if the rollout stopped early on the blow-up bound or a
    /// non-finite state.
    pub blew_up: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Roll out ẋ = F(x) + G(x) u with u = controller(x), fixed step dt, until
/// t_final. Stops early once ‖x‖ exceeds blow_up (or goes non-finite);
/// controller failures abort with the offending state.
pub fn simulate<C, E>(
    model: &SystemModel,
    mut controller: C,
    x0: &[f64],
    dt: f64,
    t_final: f64,
    blow_up: f64,
) -> Result<Trajectory, DynError>
where
    C: FnMut(&[f64]) -> Result<Vec<f64>, E>,
    E: fmt::Display,
{
    assert!(t_final > 0.0, "t_final must be positive");
    assert!(dt > 0.0, "dt must be positive");
    let steps = (t_final / dt).round() as usize;
    let mut x = x0.to_vec();
    let mut t = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut blew_up = false;

    for k in 0..=steps {
        let u = controller(&x).map_err(|e| DynError::Controller {
            state: x.clone(),
            reason: e.to_string(),
        })?;
        t.push(k as f64 * dt);
        states.push(x.clone());
        inputs.push(u.clone());
        if k == steps {
            break;
        }
        x = rk4_step(model, &x, &u, dt);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > blow_up {
            blew_up = true;
            break;
        }
    }
    Ok(Trajectory { t, states, inputs, blew_up })
}

/// u ≡ 0 controller for open-loop rollouts.
pub fn zero_controller(m: usize) -> impl FnMut(&[f64]) -> Result<Vec<f64>, std::convert::Infallible> {
    move |_| Ok(vec![0.0; m])
}

// ---- bundled benchmarks ----

/// Van der Pol with unit input on the velocity:
/// ẋ1 = x2, ẋ2 = (1 − x1²) x2 − x1 + u.
pub fn vdp() -> SystemModel {
    SystemModel::new(
        "vdp",
        2,
        1,
        Arc::new(|x, out| {
            out[0] = x[1];
            out[1] = (1.0 - x[0] * x[0]) * x[1] - x[0];
        }),
        vec![Arc::new(|_, out| {
            out[0] = 0.0;
            out[1] = 1.0;
        })],
    )
}

/// Damped pendulum: ẋ1 = x2, ẋ2 = sin(x1) − 0.5 x2 + u.
pub fn pendulum() -> SystemModel {
    SystemModel::new(
        "pendulum",
        2,
        1,
        Arc::new(|x, out| {
            out[0] = x[1];
            out[1] = x[0].sin() - 0.5 * x[1];
        }),
        vec![Arc::new(|_, out| {
            out[0] = 0.0;
            out[1] = 1.0;
        })],
    )
}

/// Lorenz with σ = 10, ρ = 28, β = 8/3 and the input on ẋ2.
pub fn lorenz() -> SystemModel {
    SystemModel::new(
        "lorenz",
        3,
        1,
        Arc::new(|x, out| {
            out[0] = 10.0 * (x[1] - x[0]);
            out[1] = x[0] * (28.0 - x[2]) - x[1];
            out[2] = x[0] * x[1] - 8.0 / 3.0 * x[2];
        }),
        vec![Arc::new(|_, out| {
            out[0] = 0.0;
            out[1] = 1.0;
            out[2] = 0.0;
        })],
    )
}

pub const RIGID_J_DEFAULT: [f64; 3] = [2.0, 1.0, 2.0 / 3.0];

/// Rigid body attitude dynamics on (ω, ψ) with torque inputs:
/// ω̇ = J⁻¹ S(ω) J ω + J⁻¹ u, ψ̇ = H(ψ) ω with
/// H(ψ) = ½ (I + S(ψ) + ψ ψᵀ) and S the cross-product matrix.
/// The inertia diag(J) is an assumption documented in the README.
pub fn rigid_body(j: [f64; 3]) -> SystemModel {
    assert!(j.iter().all(|v| *v > 0.0), "inertia entries must be positive");
    let jinv = [1.0 / j[0], 1.0 / j[1], 1.0 / j[2]];
    let drift = Arc::new(move |x: &[f64], out: &mut [f64]| {
        let (w, p) = (&x[..3], &x[3..]);
        let jw = [j[0] * w[0], j[1] * w[1], j[2] * w[2]];
        let wxjw = cross(w, &jw);
        let pxw = cross(p, w);
        let ptw = p[0] * w[0] + p[1] * w[1] + p[2] * w[2];
        for i in 0..3 {
            out[i] = jinv[i] * wxjw[i];
            out[3 + i] = 0.5 * (w[i] + pxw[i] + p[i] * ptw);
        }
    });
    let input_maps = (0..3)
        .map(|ch| {
            let g: VectorField = Arc::new(move |_: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                out[ch] = jinv[ch];
            });
            g
        })
        .collect();
    SystemModel::new("rigid_body", 6, 3, drift, input_maps)
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Look up a bundled benchmark by its configuration name.
pub fn by_name(name: &str) -> Option<SystemModel> {
    match name {
        "vdp" | "van_der_pol" => Some(vdp()),
        "pendulum" => Some(pendulum()),
        "lorenz" => Some(lorenz()),
        "rigid_body" => Some(rigid_body(RIGID_J_DEFAULT)),
        _ => None,
    }
}

// ---- snapshot files ----

/// Write `# label=.., dt=.., n=..` then one `x_1..x_n,y_1..y_n` row per pair,
/// plus a `<path>.json` sidecar with the sample config when one is attached.
/// Floats print in shortest round-trip form, so read_snapshot_csv restores
/// them bit-exactly.
pub fn write_snapshot_csv(set: &SnapshotSet, path: &Path) -> Result<(), DynError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# label={}, dt={}, n={}", set.label, set.dt, set.n())?;
    for l in 0..set.len() {
        let mut row = String::new();
        for v in set.x_col(l).iter().chain(set.y_col(l)) {
            if !row.is_empty() {
                row.push(',');
            }
            row.push_str(&format!("{v}"));
        }
        writeln!(out, "{row}")?;
    }
    out.flush()?;

    if set.config.is_some() || set.draw_ids.is_some() {
        let sidecar = Sidecar { config: set.config.clone(), draw_ids: set.draw_ids.clone() };
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        std::fs::write(p, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: Option<SampleConfig>,
    #[serde(default)]
    draw_ids: Option<Vec<u64>>,
}

pub fn read_snapshot_csv(path: &Path) -> Result<SnapshotSet, DynError> {
    let text = std::fs::read_to_string(path)?;
    let mut set = parse_snapshot_csv(&text)?;
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    let sidecar_path = Path::new(&p);
    if sidecar_path.exists() {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)
            .map_err(|e| DynError::Format(format!("sidecar: {e}")))?;
        if let Some(ids) = &sidecar.draw_ids {
            if ids.len() != set.len() {
                return Err(DynError::Format(format!(
                    "sidecar lists {} draw ids for {} rows",
                    ids.len(),
                    set.len()
                )));
            }
        }
        set.draw_ids = sidecar.draw_ids;
        set.config = sidecar.config;
    }
    Ok(set)
}

/// Parse the snapshot CSV format. Pure function of the text; the fuzz target
/// drives this directly.
pub fn parse_snapshot_csv(text: &str) -> Result<SnapshotSet, DynError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DynError::Format("empty file".into()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| DynError::Format("first line must be `# label=.., dt=.., n=..`".into()))?;

    let mut label = None;
    let mut dt = None;
    let mut n = None;
    for field in header.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| DynError::Format(format!("bad header field {field:?}")))?;
        match key.trim() {
            "label" => label = Some(InputLabel::from_str(value)?),
            "dt" => {
                let v: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| DynError::Format(format!("bad dt {value:?}")))?;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(DynError::Format(format!("dt must be positive and finite, got {v}")));
                }
                dt = Some(v);
            }
            "n" => {
                let v: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| DynError::Format(format!("bad n {value:?}")))?;
                if v == 0 || v > 64 {
                    return Err(DynError::Format(format!("state dimension {v} out of range 1..=64")));
                }
                n = Some(v);
            }
            other => return Err(DynError::Format(format!("unknown header key {other:?}"))),
        }
    }
    let label = label.ok_or_else(|| DynError::Format("header is missing label".into()))?;
    let dt = dt.ok_or_else(|| DynError::Format("header is missing dt".into()))?;
    let n = n.ok_or_else(|| DynError::Format("header is missing n".into()))?;

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = [0.0f64; 128];
        let mut count = 0;
        for tok in line.split(',') {
            if count >= 2 * n {
                return Err(DynError::Format(format!(
                    "line {}: expected {} values, found more",
                    lineno + 2,
                    2 * n
                )));
            }
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| DynError::Format(format!("line {}: bad number {tok:?}", lineno + 2)))?;
            if !v.is_finite() {
                return Err(DynError::Format(format!("line {}: non-finite value", lineno + 2)));
            }
            vals[count] = v;
            count += 1;
        }
        if count != 2 * n {
            return Err(DynError::Format(format!(
                "line {}: expected {} values, got {count}",
                lineno + 2,
                2 * n
            )));
        }
        xs.extend_from_slice(&vals[..n]);
        ys.extend_from_slice(&vals[n..2 * n]);
        t += 1;
    }

    let x = Mat::from_fn(n, t, |i, l| xs[l * n + i]);
    let y = Mat::from_fn(n, t, |i, l| ys[l * n + i]);
    Ok(SnapshotSet { label, dt, x, y, draw_ids: None, config: None })
}

/// Write a rollout as `t, x_1..x_n, u_1..u_m` rows.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<(), DynError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = traj.states.first().map_or(0, |s| s.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x_{i}"));
    }
    for j in 1..=m {
        header.push_str(&format!(",u_{j}"));
    }
    writeln!(out, "{header}")?;
    for k in 0..traj.t.len() {
        let mut row = format!("{}", traj.t[k]);
        for v in traj.states[k].iter().chain(traj.inputs[k].iter()) {
            row.push_str(&format!(",{v}"));
        }
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}
