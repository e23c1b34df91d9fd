//! Least-squares Koopman matrices from snapshot pairs, and the drift,
//! control, and Perron-Frobenius generator approximations derived from them.

use faer::linalg::matmul::matmul;
use faer::{Mat, Parallelism, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{InputLabel, SnapshotSet};
use crate::polybasis::{
    basis_len_capped, build_basis, divergence, embed, eval_basis, multiply, truncate_to_degree,
    Basis, PolyError, PolyVec,
};

/// Relative eigenvalue cutoff of the pseudo-inverse. Eigenvalues of the
/// sample Gram below cutoff * max are treated as zero.
pub const PINV_REL_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EdmdError {
    #[error("snapshot state dimension {data} does not match basis dimension {basis}")]
    DimMismatch { data: usize, basis: usize },
    #[error("empty snapshot set")]
    Empty,
    #[error(
        "sample Gram matrix is numerically singular (eigenvalues below {cutoff:e} of max); \
         add ridge regularization or more data"
    )]
    SingularGram { cutoff: f64 },
    #[error(
        "target degree {target} cannot hold degree-{needed} products; raise it or truncate \
         the multiplier first"
    )]
    TargetDegree { target: u32, needed: u32 },
    #[error("expected one fit per label zero, e_1..e_{m}; {found}")]
    LabelSet { m: usize, found: String },
    #[error("generator bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// One EDMD regression: K minimizing ‖B − A K‖_F over the monomial basis,
/// so that coefficient vectors evolve as z ↦ K z over one sampling step.
#[derive(Clone, Debug)]
pub struct KoopmanFit {
    pub label: InputLabel,
    /// Q x Q transfer matrix.
    pub k: Mat<f64>,
    /// ‖B − A K‖_F / ‖B‖_F.
    pub residual: f64,
    /// Eigenvalue ratio of the sample Gram A.
    pub cond_a: f64,
    /// Snapshot pairs used.
    pub t: usize,
}

/// Ψ(X) with one basis evaluation per column.
pub fn psi_matrix(basis: &Basis, x: &Mat<f64>) -> Mat<f64> {
    let mut out: Mat<f64> = Mat::zeros(basis.len(), x.ncols());
    for l in 0..x.ncols() {
        let vals = eval_basis(basis, x.col_as_slice(l));
        out.col_as_slice_mut(l).copy_from_slice(&vals);
    }
    out
}

struct PsdInverse {
    pinv: Mat<f64>,
    cond: f64,
    deficient: bool,
}

/// Eigenvalue pseudo-inverse of a symmetric PSD matrix, with optional ridge
/// shift applied before the cutoff.
fn pinv_psd(a: &Mat<f64>, rel_cutoff: f64, ridge: f64) -> PsdInverse {
    let q = a.nrows();
    let evd = a.selfadjoint_eigendecomposition(Side::Lower);
    let u = evd.u();
    let s = evd.s().column_vector();
    let w: Vec<f64> = (0..q).map(|i| s.read(i) + ridge).collect();
    let wmax = w.iter().copied().fold(f64::MIN, f64::max);
    let cut = rel_cutoff * wmax.max(0.0);
    let mut deficient = false;
    let mut winv = vec![0.0; q];
    for (i, &v) in w.iter().enumerate() {
        if v > cut && v > 0.0 {
            winv[i] = 1.0 / v;
        } else {
            deficient = true;
        }
    }
    let scaled = Mat::from_fn(q, q, |i, j| u.read(i, j) * winv[j]);
    let mut pinv = Mat::zeros(q, q);
    matmul(pinv.as_mut(), scaled.as_ref(), u.transpose(), None, 1.0, Parallelism::None);
    let wmin = w.iter().copied().fold(f64::MAX, f64::min);
    let cond = if wmin > 0.0 { wmax / wmin } else { f64::INFINITY };
    PsdInverse { pinv, cond, deficient }
}

/// Fit K = (A + ridge I)† B with A = (1/T) Σ Ψ(X_l)Ψ(X_l)ᵀ and
/// B = (1/T) Σ Ψ(X_l)Ψ(Y_l)ᵀ. The constant-function column is pinned to the
/// exact fixed point e_const afterwards; see the invariants test, the
/// unconstrained minimizer already agrees with it up to sampling noise.
pub fn fit_koopman(data: &SnapshotSet, basis: &Basis, ridge: f64) -> Result<KoopmanFit, EdmdError> {
    if data.n() != basis.n() {
        return Err(EdmdError::DimMismatch { data: data.n(), basis: basis.n() });
    }
    if data.is_empty() {
        return Err(EdmdError::Empty);
    }
    let q = basis.len();
    let t = data.len();
    if t < q {
        log::warn!("{t} snapshot pairs for {q} basis functions: fit is under-determined");
    }

    let psi_x = psi_matrix(basis, &data.x);
    let psi_y = psi_matrix(basis, &data.y);
    let inv_t = 1.0 / t as f64;
    let mut a = Mat::zeros(q, q);
    matmul(a.as_mut(), psi_x.as_ref(), psi_x.transpose(), None, inv_t, Parallelism::None);
    let mut b = Mat::zeros(q, q);
    matmul(b.as_mut(), psi_x.as_ref(), psi_y.transpose(), None, inv_t, Parallelism::None);

    let inv = pinv_psd(&a, PINV_REL_CUTOFF, ridge);
    if inv.deficient && ridge == 0.0 {
        return Err(EdmdError::SingularGram { cutoff: PINV_REL_CUTOFF });
    }
    let mut k = Mat::zeros(q, q);
    matmul(k.as_mut(), inv.pinv.as_ref(), b.as_ref(), None, 1.0, Parallelism::None);

    // Constants are fixed points of the transfer operator; A e_const equals
    // the B column exactly, so this only removes pseudo-inverse noise.
    for i in 0..q {
        k[(i, 0)] = if i == 0 { 1.0 } else { 0.0 };
    }

    let mut r = b.clone();
    matmul(r.as_mut(), a.as_ref(), k.as_ref(), Some(1.0), -1.0, Parallelism::None);
    let norm_b = b.norm_l2();
    let residual = if norm_b > 0.0 { r.norm_l2() / norm_b } else { 0.0 };
    Ok(KoopmanFit { label: data.label, k, residual, cond_a: inv.cond, t })
}

/// L0 = (K0 − I)/dt.
pub fn drift_generator(k0: &Mat<f64>, dt: f64) -> Mat<f64> {
    assert!(dt > 0.0, "dt must be positive");
    Mat::from_fn(k0.nrows(), k0.ncols(), |i, j| {
        (k0[(i, j)] - if i == j { 1.0 } else { 0.0 }) / dt
    })
}

/// Lj = (Kj − K0)/dt.
pub fn control_generator(kj: &Mat<f64>, k0: &Mat<f64>, dt: f64) -> Mat<f64> {
    assert!(dt > 0.0, "dt must be positive");
    assert!(kj.nrows() == k0.nrows() && kj.ncols() == k0.ncols(), "fits share a basis");
    Mat::from_fn(k0.nrows(), k0.ncols(), |i, j| (kj[(i, j)] - k0[(i, j)]) / dt)
}

/// Divergence of the vector field encoded by a generator matrix: component i
/// is the polynomial L acting on the coordinate function x_i, and the result
/// is the symbolic divergence of those components (degree ≤ q − 1).
pub fn divergence_estimate(l: &Mat<f64>, basis: &Basis) -> Result<PolyVec, EdmdError> {
    let n = basis.n();
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        let pos = basis
            .coordinate_position(i)
            .ok_or(PolyError::NoLinearMonomials)?;
        components.push(PolyVec::from_coeffs(basis, l.col_as_slice(pos).to_vec())?);
    }
    Ok(divergence(&components)?)
}

/// Perron-Frobenius generator record P(z) = coeffs(L-action) + coeffs(div·ψ)
/// for ψ = zᵀΨ, realized in a strictly larger target basis so the
/// multiplication term is exact.
#[derive(Clone, Debug)]
pub struct PfOperator {
    l: Mat<f64>,
    /// Multiplier, stored in the basis of its own degree.
    div: PolyVec,
    source: Basis,
    target: Basis,
}

impl PfOperator {
    pub fn source(&self) -> &Basis {
        &self.source
    }

    pub fn target(&self) -> &Basis {
        &self.target
    }

    pub fn div(&self) -> &PolyVec {
        &self.div
    }

    /// Apply to ψ given by coefficients in (a subbasis of) the source basis.
    pub fn apply(&self, psi: &PolyVec) -> Result<PolyVec, EdmdError> {
        let psi_s = if psi.basis().same_shape(&self.source) {
            psi.clone()
        } else {
            embed(psi, &self.source)?
        };
        let q = self.source.len();
        let mut lz = vec![0.0; q];
        for (j, &c) in psi_s.coeffs().iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let col = self.l.col_as_slice(j);
            for i in 0..q {
                lz[i] += col[i] * c;
            }
        }
        let l_part = embed(&PolyVec::from_coeffs(&self.source, lz)?, &self.target)?;
        let product = embed(&multiply(&self.div, &psi_s)?, &self.target)?;
        Ok(l_part.add(&product)?)
    }
}

/// Build the operator record, refusing target degrees that would truncate
/// the multiplication term.
pub fn pf_generator(
    l: &Mat<f64>,
    div: &PolyVec,
    basis: &Basis,
    target_degree: u32,
) -> Result<PfOperator, EdmdError> {
    let q = basis.len();
    if l.nrows() != q || l.ncols() != q {
        return Err(EdmdError::DimMismatch { data: l.nrows(), basis: q });
    }
    if div.basis().n() != basis.n() {
        return Err(EdmdError::DimMismatch { data: div.basis().n(), basis: basis.n() });
    }
    let needed = basis.q() + div.degree();
    if target_degree < needed {
        return Err(EdmdError::TargetDegree { target: target_degree, needed });
    }
    let (div_compact, _) = truncate_to_degree(div, div.degree());
    let target = build_basis(basis.n(), target_degree);
    Ok(PfOperator { l: l.clone(), div: div_compact, source: basis.clone(), target })
}

/// Generators for the drift and every control channel, fitted on one basis
/// at one sampling step.
#[derive(Clone, Debug)]
pub struct GeneratorSet {
    pub basis: Basis,
    pub dt: f64,
    pub l0: Mat<f64>,
    pub l: Vec<Mat<f64>>,
    pub div_f: PolyVec,
    pub div_g: Vec<PolyVec>,
    pub p0: PfOperator,
    pub p: Vec<PfOperator>,
    /// Fit residuals ordered zero, e_1, .., e_m.
    pub residuals: Vec<f64>,
    /// Gram conditioning of the zero-input fit.
    pub cond_a: f64,
    /// Pairs used per fit, same order as residuals.
    pub t_fit: Vec<usize>,
}

impl GeneratorSet {
    pub fn input_dim(&self) -> usize {
        self.l.len()
    }
}

/// Combine per-label fits into generator form: L0 = (K_zero − I)/dt and
/// Lj = (K_ej − K_zero)/dt, with divergence estimates and operator records
/// realized at their minimal exact degrees.
pub fn build_generator_set(
    fits: &[KoopmanFit],
    basis: &Basis,
    dt: f64,
) -> Result<GeneratorSet, EdmdError> {
    let m = fits.len().saturating_sub(1);
    let describe = || {
        let mut names: Vec<String> = fits.iter().map(|f| f.label.to_string()).collect();
        names.sort();
        format!("got [{}]", names.join(", "))
    };
    let zero = fits
        .iter()
        .find(|f| f.label == InputLabel::Zero)
        .ok_or_else(|| EdmdError::LabelSet { m, found: describe() })?;
    let mut units: Vec<&KoopmanFit> = Vec::with_capacity(m);
    for j in 1..=m {
        let f = fits
            .iter()
            .find(|f| f.label == InputLabel::Unit(j))
            .ok_or_else(|| EdmdError::LabelSet { m, found: describe() })?;
        units.push(f);
    }

    let q = basis.len();
    for f in fits {
        if f.k.nrows() != q || f.k.ncols() != q {
            return Err(EdmdError::DimMismatch { data: f.k.nrows(), basis: q });
        }
    }

    let l0 = drift_generator(&zero.k, dt);
    let l: Vec<Mat<f64>> = units.iter().map(|f| control_generator(&f.k, &zero.k, dt)).collect();
    let div_f = divergence_estimate(&l0, basis)?;
    let div_g = l
        .iter()
        .map(|lj| divergence_estimate(lj, basis))
        .collect::<Result<Vec<_>, _>>()?;
    let p0 = pf_generator(&l0, &div_f, basis, basis.q() + div_f.degree())?;
    let p = l
        .iter()
        .zip(&div_g)
        .map(|(lj, dj)| pf_generator(lj, dj, basis, basis.q() + dj.degree()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut residuals = vec![zero.residual];
    residuals.extend(units.iter().map(|f| f.residual));
    let mut t_fit = vec![zero.t];
    t_fit.extend(units.iter().map(|f| f.t));
    Ok(GeneratorSet {
        basis: basis.clone(),
        dt,
        l0,
        l,
        div_f,
        div_g,
        p0,
        p,
        residuals,
        cond_a: zero.cond_a,
        t_fit,
    })
}

// ---- JSON bundle ----

#[derive(Serialize, Deserialize)]
struct MatJson {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatJson {
    fn from_mat(m: &Mat<f64>) -> MatJson {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatJson { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn to_mat(&self) -> Result<Mat<f64>, EdmdError> {
        if self
            .rows
            .checked_mul(self.cols)
            .map_or(true, |len| len != self.data.len())
        {
            return Err(EdmdError::Bundle(format!(
                "matrix header says {}x{} but {} entries follow",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(EdmdError::Bundle("non-finite matrix entry".into()));
        }
        Ok(Mat::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j]))
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorSetJson {
    n: usize,
    q: u32,
    dt: f64,
    l0: MatJson,
    l: Vec<MatJson>,
    div_f: PolyVec,
    div_g: Vec<PolyVec>,
    residuals: Vec<f64>,
    cond_a: f64,
    t_fit: Vec<usize>,
}

impl GeneratorSet {
    pub fn to_json(&self) -> String {
        let bundle = GeneratorSetJson {
            n: self.basis.n(),
            q: self.basis.q(),
            dt: self.dt,
            l0: MatJson::from_mat(&self.l0),
            l: self.l.iter().map(MatJson::from_mat).collect(),
            div_f: self.div_f.clone(),
            div_g: self.div_g.clone(),
            residuals: self.residuals.clone(),
            cond_a: self.cond_a,
            t_fit: self.t_fit.clone(),
        };
        serde_json::to_string_pretty(&bundle).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<GeneratorSet, EdmdError> {
        let bundle: GeneratorSetJson =
            serde_json::from_str(text).map_err(|e| EdmdError::Bundle(e.to_string()))?;
        if bundle.n == 0 || bundle.n > 32 || bundle.q > 64 {
            return Err(EdmdError::Bundle("basis size out of supported range".into()));
        }
        let q_len = basis_len_capped(bundle.n, bundle.q, 50_000)
            .ok_or_else(|| EdmdError::Bundle("basis size out of supported range".into()))?
            as usize;
        if !(bundle.dt > 0.0) || !bundle.dt.is_finite() {
            return Err(EdmdError::Bundle(format!("dt must be positive and finite, got {}", bundle.dt)));
        }
        let m = bundle.l.len();
        if bundle.div_g.len() != m {
            return Err(EdmdError::Bundle(format!(
                "{m} channel generators but {} channel divergences",
                bundle.div_g.len()
            )));
        }
        if bundle.residuals.len() != m + 1 || bundle.t_fit.len() != m + 1 {
            return Err(EdmdError::Bundle("residuals and t_fit carry one entry per label".into()));
        }
        let basis = build_basis(bundle.n, bundle.q);
        debug_assert_eq!(basis.len(), q_len);
        let check_poly = |p: &PolyVec, what: &str| -> Result<(), EdmdError> {
            if p.basis().n() != bundle.n {
                return Err(EdmdError::Bundle(format!(
                    "{what} lives on {} variables, bundle says {}",
                    p.basis().n(),
                    bundle.n
                )));
            }
            Ok(())
        };
        check_poly(&bundle.div_f, "div_f")?;
        for d in &bundle.div_g {
            check_poly(d, "div_g entry")?;
        }
        let dim_ok = |mat: &Mat<f64>| mat.nrows() == q_len && mat.ncols() == q_len;
        let l0 = bundle.l0.to_mat()?;
        if !dim_ok(&l0) {
            return Err(EdmdError::Bundle(format!("l0 must be {q_len}x{q_len}")));
        }
        let l = bundle
            .l
            .iter()
            .map(|mj| {
                let mat = mj.to_mat()?;
                if !dim_ok(&mat) {
                    return Err(EdmdError::Bundle(format!("each l entry must be {q_len}x{q_len}")));
                }
                Ok(mat)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let p0 = pf_generator(&l0, &bundle.div_f, &basis, basis.q() + bundle.div_f.degree())?;
        let p = l
            .iter()
            .zip(&bundle.div_g)
            .map(|(lj, dj)| pf_generator(lj, dj, &basis, basis.q() + dj.degree()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GeneratorSet {
            basis,
            dt: bundle.dt,
            l0,
            l,
            div_f: bundle.div_f,
            div_g: bundle.div_g,
            p0,
            p,
            residuals: bundle.residuals,
            cond_a: bundle.cond_a,
            t_fit: bundle.t_fit,
        })
    }
}
