//! One TOML file describes a full run: the system, the dictionary, how to
//! sample it, the density program, and how to score the result. Every
//! cross-field rule is checked at parse time so a bad run dies before it
//! writes anything.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{by_name, read_snapshot_csv, rigid_body, InputLabel, SampleConfig, SnapshotSet, SystemModel};
use crate::polybasis::{basis_len_capped, build_basis, MultiIndex, PolyVec};
use crate::sos::{sum_of_squares_form, SynthesisSpec};
use crate::synthesis::{SolverParams, ValidationConfig};

/// Dictionaries beyond this length are config mistakes, not experiments.
pub const BASIS_LEN_CAP: u64 = 100_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error(
        "q = {q} violates the degree rule deg(Ψ) ≥ max(deg(ab), deg(bc_j)) = {needed}; \
         raise q or lower deg_a/deg_c"
    )]
    DegreeRule { q: u32, needed: u32 },
    #[error("snapshot batch for label {label} not found at {path}")]
    MissingLabel { label: String, path: PathBuf },
    #[error("snapshot file {path}: {err}")]
    Snapshot { path: PathBuf, err: crate::dynamics::DynError },
}

impl ConfigError {
    /// Process exit code this error maps to: 4 for the degree rule (an SOS
    /// shape problem), 2 for everything else (bad or missing input data).
    pub fn exit_code(&self) -> i32 {
        match self {
            ConfigError::DegreeRule { .. } => 4,
            _ => 2,
        }
    }
}

/// One quadratic monomial c·x_i·x_j of the denominator form b (1-based,
/// i ≤ j).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct QuadTerm {
    pub i: usize,
    pub j: usize,
    pub c: f64,
}

/// The density program, in config form. `b_quad` empty means b = xᵀx.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpecConfig {
    pub alpha: u32,
    /// Max degree of c_j, one entry per input channel.
    pub deg_c: Vec<u32>,
    #[serde(default = "default_c_min")]
    pub c_min_degree: u32,
    #[serde(default = "default_true")]
    pub fix_a_to_one: bool,
    #[serde(default)]
    pub deg_a: u32,
    #[serde(default = "default_margin")]
    pub margin_eps: f64,
    #[serde(default = "default_one")]
    pub margin_power: u32,
    #[serde(default)]
    pub literal_paper_form: bool,
    #[serde(default)]
    pub b_quad: Vec<QuadTerm>,
}

fn default_c_min() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

fn default_margin() -> f64 {
    crate::sos::DEFAULT_MARGIN_EPS
}

fn default_one() -> u32 {
    1
}

impl SpecConfig {
    /// Realize the denominator form and spec for an n-dimensional state.
    pub fn to_spec(&self, n: usize) -> Result<SynthesisSpec, ConfigError> {
        let b = if self.b_quad.is_empty() {
            sum_of_squares_form(n)
        } else {
            let basis = build_basis(n, 2);
            let mut b = PolyVec::zero(&basis);
            for t in &self.b_quad {
                if t.i < 1 || t.j < t.i || t.j > n {
                    return Err(ConfigError::Invalid(format!(
                        "b_quad term ({}, {}) must satisfy 1 <= i <= j <= {n}",
                        t.i, t.j
                    )));
                }
                if !t.c.is_finite() {
                    return Err(ConfigError::Invalid("b_quad coefficients must be finite".into()));
                }
                let mut mi = vec![0u8; n];
                mi[t.i - 1] += 1;
                mi[t.j - 1] += 1;
                let pos = basis.position(&MultiIndex(mi)).expect("degree-2 monomial");
                b.coeffs_mut()[pos] += t.c;
            }
            b
        };
        let mut spec = SynthesisSpec::new(self.alpha, b, self.deg_c.clone());
        spec.deg_a = self.deg_a;
        spec.c_min_degree = self.c_min_degree;
        spec.fix_a_to_one = self.fix_a_to_one;
        spec.margin_eps = self.margin_eps;
        spec.margin_power = self.margin_power;
        spec.literal_paper_form = self.literal_paper_form;
        Ok(spec)
    }

    /// Lowest dictionary degree that carries both products a·b and b·c_j.
    pub fn degree_rule_floor(&self) -> u32 {
        let deg_b = 2;
        let deg_ab = if self.fix_a_to_one { deg_b } else { self.deg_a + deg_b };
        let deg_bc = deg_b + self.deg_c.iter().copied().max().unwrap_or(0);
        deg_ab.max(deg_bc)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    /// Bundled benchmark name, or "external" to read the snapshot files
    /// listed in `snapshots`.
    pub system: String,
    /// External snapshot CSVs (one per label) when system = "external".
    #[serde(default)]
    pub snapshots: Vec<PathBuf>,
    /// Dictionary degree q of Ψ.
    pub q: u32,
    pub out_dir: PathBuf,
    /// Inertia diagonal for the rigid-body benchmark.
    #[serde(default)]
    pub rigid_j: Option<[f64; 3]>,
    pub sample: SampleConfig,
    pub spec: SpecConfig,
    #[serde(default)]
    pub solver: SolverParams,
    pub validation: ValidationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigError::Io { path: path.to_path_buf(), err })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The bundled model, or None for external data.
    pub fn model(&self) -> Result<Option<SystemModel>, ConfigError> {
        if self.system == "external" {
            return Ok(None);
        }
        if self.system == "rigid_body" {
            if let Some(j) = self.rigid_j {
                return Ok(Some(rigid_body(j)));
            }
        }
        by_name(&self.system)
            .map(Some)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown system {:?}", self.system)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let model = self.model()?;
        if self.system == "external" && self.snapshots.is_empty() {
            return Err(ConfigError::Invalid(
                "system = \"external\" needs at least one entry in snapshots".into(),
            ));
        }
        if self.system != "external" && !self.snapshots.is_empty() {
            return Err(ConfigError::Invalid(
                "snapshots paths are only read when system = \"external\"".into(),
            ));
        }
        if self.spec.deg_c.is_empty() {
            return Err(ConfigError::Invalid("deg_c must list one degree per input".into()));
        }
        if let Some(j) = self.rigid_j {
            if self.system != "rigid_body" {
                return Err(ConfigError::Invalid("rigid_j only applies to rigid_body".into()));
            }
            if j.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(ConfigError::Invalid("rigid_j entries must be positive".into()));
            }
        }

        let needed = self.spec.degree_rule_floor();
        if self.q < needed {
            return Err(ConfigError::DegreeRule { q: self.q, needed });
        }

        let Some(model) = model else { return Ok(()) };
        // Bundled system: every dimension is known now, so check everything.
        let n = model.state_dim();
        let m = model.input_dim();
        if self.spec.deg_c.len() != m {
            return Err(ConfigError::Invalid(format!(
                "deg_c lists {} channels but {} has {m} inputs",
                self.spec.deg_c.len(),
                self.system
            )));
        }
        if basis_len_capped(n, self.q, BASIS_LEN_CAP).is_none() {
            return Err(ConfigError::Invalid(format!(
                "dictionary for n = {n}, q = {} exceeds {BASIS_LEN_CAP} monomials",
                self.q
            )));
        }
        self.sample.validate(n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.validation.validate(n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let spec = self.spec.to_spec(n)?;
        spec.validate(n, m).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Replace both seeds (sampling and validation) for a whole-run override.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.sample.seed = seed;
        self.validation.seed = seed;
        self
    }

    pub fn with_out_dir(mut self, dir: PathBuf) -> RunConfig {
        self.out_dir = dir;
        self
    }

    /// Labels a run of this config trains on: zero plus one step per channel.
    pub fn labels(&self) -> Vec<InputLabel> {
        InputLabel::all(self.spec.deg_c.len())
    }

    /// Where collect writes (and synthesize reads) the batch for `label`.
    pub fn snapshot_path(&self, label: InputLabel) -> PathBuf {
        self.out_dir.join(format!("snapshots_{label}.csv"))
    }

    /// Read the training batches: the configured external files, or the
    /// collected per-label files in the run directory. Missing files name
    /// the label they should hold.
    pub fn load_snapshots(&self) -> Result<Vec<SnapshotSet>, ConfigError> {
        let paths: Vec<PathBuf> = if self.system == "external" {
            self.snapshots.clone()
        } else {
            self.labels().iter().map(|&l| self.snapshot_path(l)).collect()
        };
        let mut sets = Vec::with_capacity(paths.len());
        for (k, path) in paths.iter().enumerate() {
            if !path.exists() {
                let label = self
                    .labels()
                    .get(k)
                    .map(|l| l.to_string())
                    .unwrap_or_else(|| format!("#{k}"));
                return Err(ConfigError::MissingLabel { label, path: path.clone() });
            }
            let set = read_snapshot_csv(path)
                .map_err(|err| ConfigError::Snapshot { path: path.clone(), err })?;
            sets.push(set);
        }
        Ok(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vdp_toml() -> String {
        r#"
            system = "vdp"
            q = 6
            out_dir = "runs/vdp"

            [sample]
            dt = 0.01
            n_init = 10000
            box = [[-5.0, 5.0], [-5.0, 5.0]]
            seed = 0

            [spec]
            alpha = 6
            deg_c = [4]

            [validation]
            n_trials = 100
            box = [[-3.0, 3.0], [-3.0, 3.0]]
            dt = 0.01
            seed = 1
        "#
        .into()
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml(&vdp_toml()).unwrap();
        let text = cfg.to_toml();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, again);

        // Defaults filled in where the file was silent.
        assert_eq!(cfg.solver, SolverParams::default());
        assert_eq!(cfg.validation.t_final, 30.0);
        assert_eq!(cfg.validation.eps_norm, 0.05);
        assert_eq!(cfg.sample.horizon, 1);
        assert_eq!(cfg.spec.c_min_degree, 1);
        assert!(cfg.spec.fix_a_to_one);
    }

    #[test]
    fn degree_rule_checked_at_parse_time() {
        let text = vdp_toml().replace("q = 6", "q = 5");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, ConfigError::DegreeRule { q: 5, needed: 6 }));
        assert!(err.to_string().contains("deg(Ψ) ≥ max(deg(ab), deg(bc_j))"));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let unknown = vdp_toml().replace("\"vdp\"", "\"rossler\"");
        assert!(RunConfig::from_toml(&unknown).is_err());

        let external = vdp_toml().replace("\"vdp\"", "\"external\"");
        let err = RunConfig::from_toml(&external).unwrap_err();
        assert!(err.to_string().contains("snapshots"));

        let twochannel = vdp_toml().replace("deg_c = [4]", "deg_c = [4, 4]");
        let err = RunConfig::from_toml(&twochannel).unwrap_err();
        assert!(err.to_string().contains("1 inputs"), "{err}");

        let nosample = vdp_toml().replace("n_init = 10000", "n_init = 0");
        assert!(RunConfig::from_toml(&nosample).is_err());

        let j = vdp_toml().replace("out_dir = \"runs/vdp\"", "out_dir = \"x\"\nrigid_j = [2.0, 1.0, 0.6]");
        assert!(RunConfig::from_toml(&j).is_err());
    }

    #[test]
    fn quadratic_form_terms_build_b() {
        let mut cfg = RunConfig::from_toml(&vdp_toml()).unwrap();
        cfg.spec.b_quad = vec![
            QuadTerm { i: 1, j: 1, c: 1.0 },
            QuadTerm { i: 1, j: 2, c: 2.0 },
            QuadTerm { i: 2, j: 2, c: 2.0 },
        ];
        let spec = cfg.spec.to_spec(2).unwrap();
        assert_eq!(spec.b.coeff(&MultiIndex(vec![2, 0])), 1.0);
        assert_eq!(spec.b.coeff(&MultiIndex(vec![1, 1])), 2.0);
        assert_eq!(spec.b.coeff(&MultiIndex(vec![0, 2])), 2.0);
        // And the whole config still validates: this b is positive definite.
        cfg.validate().unwrap();

        cfg.spec.b_quad = vec![QuadTerm { i: 2, j: 1, c: 1.0 }];
        assert!(cfg.spec.to_spec(2).is_err());
    }

    #[test]
    fn seed_override_touches_both_stages() {
        let cfg = RunConfig::from_toml(&vdp_toml()).unwrap().with_seed(99);
        assert_eq!(cfg.sample.seed, 99);
        assert_eq!(cfg.validation.seed, 99);
    }

    #[test]
    fn missing_label_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml(&vdp_toml())
            .unwrap()
            .with_out_dir(dir.path().join("run"));
        let err = cfg.load_snapshots().unwrap_err();
        assert!(matches!(&err, ConfigError::MissingLabel { label, .. } if label == "zero"));
        assert_eq!(err.exit_code(), 2);
    }
}
