//! Dense standard-form semidefinite programming with no external solver:
//! minimize ⟨C, X⟩ subject to ⟨A_k, X⟩ = b_k over a product cone of PSD
//! blocks and nonnegative orthants. The solver is a Nesterov-Todd scaled
//! predictor-corrector interior-point method with dense Schur complements;
//! problems here are small (Gram blocks well under 500) so dense
//! factorizations are the right tool.

use faer::linalg::matmul::matmul;
use faer::prelude::*;
use faer::{Mat, MatRef, Parallelism, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("problem: {0}")]
    Problem(String),
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("candidate has {got} blocks, problem has {want}")]
    BlockCount { want: usize, got: usize },
    #[error("block {index}: {reason}")]
    BlockShape { index: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Psd,
    Nonneg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub size: usize,
}

/// Dense value living in one cone block: a symmetric matrix or a vector.
#[derive(Clone, Debug)]
pub enum BlockData {
    Psd(Mat<f64>),
    Nonneg(Vec<f64>),
}

impl BlockData {
    pub fn zeros(block: Block) -> BlockData {
        match block.kind {
            BlockKind::Psd => BlockData::Psd(Mat::zeros(block.size, block.size)),
            BlockKind::Nonneg => BlockData::Nonneg(vec![0.0; block.size]),
        }
    }

    fn scaled_identity(block: Block, s: f64) -> BlockData {
        match block.kind {
            BlockKind::Psd => {
                BlockData::Psd(Mat::from_fn(block.size, block.size, |i, j| {
                    if i == j {
                        s
                    } else {
                        0.0
                    }
                }))
            }
            BlockKind::Nonneg => BlockData::Nonneg(vec![s; block.size]),
        }
    }

    pub fn matches(&self, block: Block) -> bool {
        match (self, block.kind) {
            (BlockData::Psd(m), BlockKind::Psd) => {
                m.nrows() == block.size && m.ncols() == block.size
            }
            (BlockData::Nonneg(v), BlockKind::Nonneg) => v.len() == block.size,
            _ => false,
        }
    }

    /// Frobenius/euclidean inner product.
    pub fn dot(&self, other: &BlockData) -> f64 {
        match (self, other) {
            (BlockData::Psd(a), BlockData::Psd(b)) => {
                let mut s = 0.0;
                for j in 0..a.ncols() {
                    let (ca, cb) = (a.col_as_slice(j), b.col_as_slice(j));
                    for i in 0..a.nrows() {
                        s += ca[i] * cb[i];
                    }
                }
                s
            }
            (BlockData::Nonneg(a), BlockData::Nonneg(b)) => {
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            }
            _ => panic!("block kind mismatch"),
        }
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, alpha: f64, other: &BlockData) {
        match (self, other) {
            (BlockData::Psd(a), BlockData::Psd(b)) => {
                for j in 0..b.ncols() {
                    let cb = b.col_as_slice(j);
                    let ca = a.col_as_slice_mut(j);
                    for i in 0..cb.len() {
                        ca[i] += alpha * cb[i];
                    }
                }
            }
            (BlockData::Nonneg(a), BlockData::Nonneg(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += alpha * y;
                }
            }
            _ => panic!("block kind mismatch"),
        }
    }

    fn scale_mut(&mut self, alpha: f64) {
        match self {
            BlockData::Psd(m) => {
                for j in 0..m.ncols() {
                    for v in m.col_as_slice_mut(j) {
                        *v *= alpha;
                    }
                }
            }
            BlockData::Nonneg(v) => {
                for x in v {
                    *x *= alpha;
                }
            }
        }
    }

    fn symmetrize(&mut self) {
        if let BlockData::Psd(m) = self {
            for i in 0..m.nrows() {
                for j in 0..i {
                    let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
    }

    /// Minimum eigenvalue (PSD block) or minimum entry (nonneg block).
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            BlockData::Psd(m) => {
                let (_, w) = eigh(m);
                w.iter().copied().fold(f64::INFINITY, f64::min)
            }
            BlockData::Nonneg(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn as_psd(&self) -> Option<&Mat<f64>> {
        match self {
            BlockData::Psd(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_nonneg(&self) -> Option<&[f64]> {
        match self {
            BlockData::Nonneg(v) => Some(v),
            _ => None,
        }
    }
}

/// Sparse coefficients of one constraint on one PSD block: lower-triangle
/// triplets (rows[i] ≥ cols[i]); off-diagonal entries act symmetrically.
#[derive(Clone, Debug, Default)]
pub struct PsdCoeffs {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl PsdCoeffs {
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        self.rows.push(r.max(c));
        self.cols.push(r.min(c));
        self.vals.push(v);
    }
}

#[derive(Clone, Debug, Default)]
pub struct VecCoeffs {
    pub idxs: Vec<usize>,
    pub vals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum BlockCoeffs {
    Psd(PsdCoeffs),
    Nonneg(VecCoeffs),
}

impl BlockCoeffs {
    pub fn empty_for(kind: BlockKind) -> BlockCoeffs {
        match kind {
            BlockKind::Psd => BlockCoeffs::Psd(PsdCoeffs::default()),
            BlockKind::Nonneg => BlockCoeffs::Nonneg(VecCoeffs::default()),
        }
    }

    /// ⟨A, X⟩ against a dense block value, with the symmetric off-diagonal
    /// doubling folded in.
    fn dot(&self, x: &BlockData) -> f64 {
        match (self, x) {
            (BlockCoeffs::Psd(t), BlockData::Psd(m)) => {
                let mut s = 0.0;
                for ((&r, &c), &v) in t.rows.iter().zip(&t.cols).zip(&t.vals) {
                    s += v * m[(r, c)] * if r == c { 1.0 } else { 2.0 };
                }
                s
            }
            (BlockCoeffs::Nonneg(t), BlockData::Nonneg(xv)) => {
                t.idxs.iter().zip(&t.vals).map(|(&i, &v)| v * xv[i]).sum()
            }
            _ => panic!("block kind mismatch"),
        }
    }

    /// out += y * A as a dense symmetric block.
    fn add_scaled_into(&self, y: f64, out: &mut BlockData) {
        match (self, out) {
            (BlockCoeffs::Psd(t), BlockData::Psd(m)) => {
                for ((&r, &c), &v) in t.rows.iter().zip(&t.cols).zip(&t.vals) {
                    m[(r, c)] += y * v;
                    if r != c {
                        m[(c, r)] += y * v;
                    }
                }
            }
            (BlockCoeffs::Nonneg(t), BlockData::Nonneg(o)) => {
                for (&i, &v) in t.idxs.iter().zip(&t.vals) {
                    o[i] += y * v;
                }
            }
            _ => panic!("block kind mismatch"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub blocks: Vec<Block>,
    /// Dense objective, one entry per block.
    pub objective: Vec<BlockData>,
    /// constraints[k][ib]: coefficients of equality k on block ib.
    pub constraints: Vec<Vec<BlockCoeffs>>,
    pub rhs: Vec<f64>,
}

impl SdpProblem {
    pub fn new(blocks: Vec<Block>, objective: Vec<BlockData>) -> SdpProblem {
        assert_eq!(blocks.len(), objective.len(), "one objective entry per block");
        for (ib, (bl, c)) in blocks.iter().zip(&objective).enumerate() {
            assert!(c.matches(*bl), "objective block {ib} has the wrong shape");
        }
        SdpProblem { blocks, objective, constraints: Vec::new(), rhs: Vec::new() }
    }

    pub fn add_constraint(&mut self, coeffs: Vec<BlockCoeffs>, rhs: f64) {
        assert_eq!(coeffs.len(), self.blocks.len(), "one coefficient entry per block");
        self.constraints.push(coeffs);
        self.rhs.push(rhs);
    }

    pub fn n_constraints(&self) -> usize {
        self.rhs.len()
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        let fail = |msg: String| Err(SdpError::Problem(msg));
        if self.blocks.is_empty() {
            return fail("at least one cone block is required".into());
        }
        if self.rhs.is_empty() {
            return fail("at least one equality constraint is required".into());
        }
        if self.constraints.len() != self.rhs.len() {
            return fail(format!(
                "{} constraint rows but {} right-hand sides",
                self.constraints.len(),
                self.rhs.len()
            ));
        }
        for (ib, bl) in self.blocks.iter().enumerate() {
            if bl.size == 0 {
                return fail(format!("block {ib} has size 0"));
            }
        }
        if self.objective.len() != self.blocks.len() {
            return fail("objective must carry one entry per block".into());
        }
        for (ib, (bl, c)) in self.blocks.iter().zip(&self.objective).enumerate() {
            if !c.matches(*bl) {
                return fail(format!("objective block {ib} has the wrong shape"));
            }
            let finite = match c {
                BlockData::Psd(m) => (0..m.ncols()).all(|j| m.col_as_slice(j).iter().all(|v| v.is_finite())),
                BlockData::Nonneg(v) => v.iter().all(|v| v.is_finite()),
            };
            if !finite {
                return fail(format!("objective block {ib} has non-finite entries"));
            }
        }
        for (k, row) in self.constraints.iter().enumerate() {
            if !self.rhs[k].is_finite() {
                return fail(format!("rhs of constraint {k} is non-finite"));
            }
            if row.len() != self.blocks.len() {
                return fail(format!(
                    "constraint {k} has {} block entries, expected {}",
                    row.len(),
                    self.blocks.len()
                ));
            }
            for (ib, (bl, co)) in self.blocks.iter().zip(row).enumerate() {
                match (co, bl.kind) {
                    (BlockCoeffs::Psd(t), BlockKind::Psd) => {
                        if t.rows.len() != t.cols.len() || t.rows.len() != t.vals.len() {
                            return fail(format!("constraint {k} block {ib}: ragged triplets"));
                        }
                        for ((&r, &c), &v) in t.rows.iter().zip(&t.cols).zip(&t.vals) {
                            if r >= bl.size || c >= bl.size {
                                return fail(format!(
                                    "constraint {k} block {ib}: index ({r},{c}) out of range for size {}",
                                    bl.size
                                ));
                            }
                            if r < c {
                                return fail(format!(
                                    "constraint {k} block {ib}: triplets must be lower-triangle (row ≥ col)"
                                ));
                            }
                            if !v.is_finite() {
                                return fail(format!("constraint {k} block {ib}: non-finite value"));
                            }
                        }
                    }
                    (BlockCoeffs::Nonneg(t), BlockKind::Nonneg) => {
                        if t.idxs.len() != t.vals.len() {
                            return fail(format!("constraint {k} block {ib}: ragged index list"));
                        }
                        for (&i, &v) in t.idxs.iter().zip(&t.vals) {
                            if i >= bl.size {
                                return fail(format!(
                                    "constraint {k} block {ib}: index {i} out of range for size {}",
                                    bl.size
                                ));
                            }
                            if !v.is_finite() {
                                return fail(format!("constraint {k} block {ib}: non-finite value"));
                            }
                        }
                    }
                    _ => {
                        return fail(format!(
                            "constraint {k} block {ib}: coefficient kind does not match block kind"
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    fn a_dot(&self, k: usize, xs: &[BlockData]) -> f64 {
        self.constraints[k].iter().zip(xs).map(|(co, x)| co.dot(x)).sum()
    }

    fn a_op(&self, xs: &[BlockData]) -> Vec<f64> {
        (0..self.n_constraints()).map(|k| self.a_dot(k, xs)).collect()
    }

    fn at_op(&self, y: &[f64]) -> Vec<BlockData> {
        let mut out: Vec<BlockData> = self.blocks.iter().map(|b| BlockData::zeros(*b)).collect();
        for (k, row) in self.constraints.iter().enumerate() {
            if y[k] == 0.0 {
                continue;
            }
            for (co, o) in row.iter().zip(&mut out) {
                co.add_scaled_into(y[k], o);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<BlockData>,
    pub y: Vec<f64>,
    pub s: Vec<BlockData>,
    pub objective: f64,
    pub dual_objective: f64,
    /// Residuals of the reported iterate, relative to the solver's internal
    /// normalization; status Optimal guarantees all three ≤ tol.
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
    pub iterations: usize,
}

// ---- dense symmetric helpers ----

fn mm(a: MatRef<f64>, b: MatRef<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), a, b, None, 1.0, Parallelism::None);
    out
}

fn eigh(m: &Mat<f64>) -> (Mat<f64>, Vec<f64>) {
    let evd = m.selfadjoint_eigendecomposition(Side::Lower);
    let u = evd.u().to_owned();
    let s = evd.s().column_vector();
    let w = (0..m.nrows()).map(|i| s.read(i)).collect();
    (u, w)
}

/// V f(w) Vᵀ for a spectral function f.
fn spectral_map(u: &Mat<f64>, w: &[f64], f: impl Fn(f64) -> f64) -> Mat<f64> {
    let n = u.nrows();
    let scaled = Mat::from_fn(n, n, |i, j| u[(i, j)] * f(w[j]));
    mm(scaled.as_ref(), u.transpose())
}

fn sym_sqrt(m: &Mat<f64>) -> Mat<f64> {
    let (u, w) = eigh(m);
    spectral_map(&u, &w, |v| v.max(0.0).sqrt())
}

/// W solving W S W = X on the PSD cone:
/// W = X^{1/2} (X^{1/2} S X^{1/2})^{-1/2} X^{1/2}.
fn nt_scaling(x: &Mat<f64>, s: &Mat<f64>) -> Mat<f64> {
    let xh = sym_sqrt(x);
    let mid = mm(mm(xh.as_ref(), s.as_ref()).as_ref(), xh.as_ref());
    let (u, w) = eigh(&mid);
    let mih = spectral_map(&u, &w, |v| v.max(1e-300).powf(-0.5));
    let full = mm(mm(xh.as_ref(), mih.as_ref()).as_ref(), xh.as_ref());
    let n = full.nrows();
    Mat::from_fn(n, n, |i, j| 0.5 * (full[(i, j)] + full[(j, i)]))
}

/// Plain lower Cholesky; `None` when a pivot is not strictly positive.
fn cholesky_lower(a: &Mat<f64>) -> Option<Mat<f64>> {
    let n = a.nrows();
    let mut l = a.clone();
    for j in 0..n {
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                for i in j..n {
                    l[(i, j)] -= ljk * l[(i, k)];
                }
            }
        }
        let d = l[(j, j)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let inv = 1.0 / d.sqrt();
        for i in j..n {
            l[(i, j)] *= inv;
        }
    }
    for j in 0..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Some(l)
}

/// Solve L X = B in place of B (forward substitution, L lower).
fn solve_lower(l: &Mat<f64>, b: &mut Mat<f64>) {
    let n = l.nrows();
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut v = b[(i, col)];
            for k in 0..i {
                v -= l[(i, k)] * b[(k, col)];
            }
            b[(i, col)] = v / l[(i, i)];
        }
    }
}

/// Largest α with Z + α dZ ⪰ 0 (PSD block), via λmin(L⁻¹ dZ L⁻ᵀ).
fn max_step_psd(z: &Mat<f64>, dz: &Mat<f64>) -> f64 {
    let n = z.nrows();
    let l = match cholesky_lower(z) {
        Some(l) => l,
        None => {
            let tr: f64 = (0..n).map(|i| z[(i, i)]).sum();
            let jit = 1e-12 * tr / n as f64;
            let zj = Mat::from_fn(n, n, |i, j| z[(i, j)] + if i == j { jit } else { 0.0 });
            match cholesky_lower(&zj) {
                Some(l) => l,
                None => return 0.0,
            }
        }
    };
    let mut t = dz.clone();
    solve_lower(&l, &mut t);
    let mut tt = t.transpose().to_owned();
    solve_lower(&l, &mut tt);
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (tt[(i, j)] + tt[(j, i)]));
    let (_, w) = eigh(&sym);
    let lam = w.iter().copied().fold(f64::INFINITY, f64::min);
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

fn max_step_vec(z: &[f64], dz: &[f64]) -> f64 {
    let mut r = f64::INFINITY;
    for (&zi, &di) in z.iter().zip(dz) {
        if di < 0.0 {
            r = r.min(-zi / di);
        }
    }
    r
}

fn frob_norm(xs: &[BlockData]) -> f64 {
    xs.iter().map(|x| x.dot(x)).sum::<f64>().sqrt()
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Interior-point solve. Deterministic: identical problems and parameters
/// produce identical iterate sequences. Max-iteration exhaustion and
/// progress stalls return the best iterate with status MaxIter so the
/// caller can decide; residual stalls with a large primal residual are
/// reported as Infeasible.
pub fn solve(problem: &SdpProblem, tol: f64, max_iter: usize) -> Result<SdpSolution, SdpError> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(SdpError::Tolerance(tol));
    }
    problem.validate()?;
    faer::set_global_parallelism(Parallelism::None);

    let blocks = &problem.blocks;
    let nb = blocks.len();
    let m = problem.n_constraints();
    let tau = 0.98;

    // Normalize so tolerances are relative and the argmin is scale-invariant.
    let bs = vec_norm(&problem.rhs).max(1.0);
    let cs = frob_norm(&problem.objective).max(1.0);
    let b: Vec<f64> = problem.rhs.iter().map(|v| v / bs).collect();
    let c: Vec<BlockData> = problem
        .objective
        .iter()
        .map(|cb| {
            let mut s = cb.clone();
            s.scale_mut(1.0 / cs);
            s
        })
        .collect();
    let normb = 1.0 + vec_norm(&b);
    let normc = 1.0 + frob_norm(&c);

    let nu: usize = blocks.iter().map(|bl| bl.size).sum();
    let scale0 = vec_norm(&b).sqrt().max(1.0);
    let scale1 = normc.sqrt().max(1.0);
    let mut x: Vec<BlockData> = blocks.iter().map(|bl| BlockData::scaled_identity(*bl, scale0)).collect();
    let mut s: Vec<BlockData> = blocks.iter().map(|bl| BlockData::scaled_identity(*bl, scale1)).collect();
    let mut y = vec![0.0; m];

    struct Best {
        err: f64,
        rp: f64,
        rd: f64,
        gap: f64,
        x: Vec<BlockData>,
        y: Vec<f64>,
        s: Vec<BlockData>,
        cx: f64,
        by: f64,
    }
    let mut best: Option<Best> = None;
    let mut hist: Vec<f64> = Vec::with_capacity(max_iter);
    let mut status = SdpStatus::MaxIter;
    let mut iterations = 0;

    for it in 0..max_iter {
        iterations = it + 1;
        let ax = problem.a_op(&x);
        let rp: Vec<f64> = b.iter().zip(&ax).map(|(bb, aa)| bb - aa).collect();
        let aty = problem.at_op(&y);
        let rd: Vec<BlockData> = (0..nb)
            .map(|ib| {
                let mut r = c[ib].clone();
                r.axpy(-1.0, &s[ib]);
                r.axpy(-1.0, &aty[ib]);
                r
            })
            .collect();
        let mu: f64 = (0..nb).map(|ib| x[ib].dot(&s[ib])).sum::<f64>() / nu as f64;
        let cx: f64 = (0..nb).map(|ib| c[ib].dot(&x[ib])).sum();
        let by: f64 = b.iter().zip(&y).map(|(bb, yy)| bb * yy).sum();
        let rp_rel = vec_norm(&rp) / normb;
        let rd_rel = frob_norm(&rd) / normc;
        let gap_rel = (cx - by).abs() / (1.0 + cx.abs() + by.abs());
        let err = rp_rel.max(rd_rel).max(gap_rel);
        hist.push(err);
        log::debug!("it {it:3} mu {mu:9.2e} rp {rp_rel:9.2e} rd {rd_rel:9.2e} gap {gap_rel:9.2e}");

        if !err.is_finite() {
            log::warn!("iterate became non-finite at iteration {it}; returning best iterate");
            break;
        }
        if best.as_ref().map_or(true, |bst| err < bst.err) {
            best = Some(Best {
                err,
                rp: rp_rel,
                rd: rd_rel,
                gap: gap_rel,
                x: x.clone(),
                y: y.clone(),
                s: s.clone(),
                cx,
                by,
            });
        }
        if err <= tol {
            status = SdpStatus::Optimal;
            break;
        }
        // Improving-ray certificates: y with Aᵀy + S ≈ 0, bᵀy > 0 proves
        // primal infeasibility; X in the cone with A(X) ≈ 0, ⟨C,X⟩ < 0
        // proves dual infeasibility (primal unboundedness).
        let aty_s = (0..nb)
            .map(|ib| {
                let mut t = aty[ib].clone();
                t.axpy(1.0, &s[ib]);
                t.dot(&t)
            })
            .sum::<f64>()
            .sqrt();
        if by > 0.0 && aty_s <= 1e-9 * by * normc {
            status = SdpStatus::Infeasible;
            break;
        }
        let ax_n = vec_norm(&ax);
        let xnorm = frob_norm(&x);
        if cx < 0.0 && ax_n <= 1e-9 * (-cx) * normb && xnorm > 0.0 {
            status = SdpStatus::Unbounded;
            break;
        }
        if it >= 50 && err > 1e3 * tol && err > 0.9 * hist[it - 50] {
            // No order-of-magnitude progress in 50 iterations. A stuck
            // primal residual means there is nothing feasible to find;
            // otherwise the problem is solved to reduced accuracy and the
            // caller decides whether the best iterate is usable.
            status = if rp_rel > 1e3 * tol { SdpStatus::Infeasible } else { SdpStatus::MaxIter };
            break;
        }

        // NT scaling per block.
        let w: Vec<BlockData> = (0..nb)
            .map(|ib| match (&x[ib], &s[ib]) {
                (BlockData::Psd(xm), BlockData::Psd(sm)) => BlockData::Psd(nt_scaling(xm, sm)),
                (BlockData::Nonneg(xv), BlockData::Nonneg(sv)) => BlockData::Nonneg(
                    xv.iter().zip(sv).map(|(a, d)| (a / d).sqrt()).collect(),
                ),
                _ => unreachable!(),
            })
            .collect();

        // Schur complement H_kl = Σ_blocks tr(A_k W A_l W) (+ w² terms),
        // assembled one row at a time: the scaled image W A_k W is built
        // dense (lower triangle only), then dotted against the sparse A_l.
        let mut h = Mat::<f64>::zeros(m, m);
        let mut img: Vec<BlockData> = blocks.iter().map(|bl| BlockData::zeros(*bl)).collect();
        for k in 0..m {
            for (ib, bl) in blocks.iter().enumerate() {
                match (&problem.constraints[k][ib], &w[ib], &mut img[ib]) {
                    (BlockCoeffs::Psd(t), BlockData::Psd(wm), BlockData::Psd(out)) => {
                        let p = bl.size;
                        for j in 0..p {
                            out.col_as_slice_mut(j)[j..].fill(0.0);
                        }
                        for ((&r, &cc), &v) in t.rows.iter().zip(&t.cols).zip(&t.vals) {
                            let wr = wm.col_as_slice(r);
                            let wc = wm.col_as_slice(cc);
                            if r == cc {
                                for j in 0..p {
                                    let ca = v * wr[j];
                                    let out_j = out.col_as_slice_mut(j);
                                    for i in j..p {
                                        out_j[i] += ca * wr[i];
                                    }
                                }
                            } else {
                                for j in 0..p {
                                    let ca = v * wc[j];
                                    let cb = v * wr[j];
                                    let out_j = out.col_as_slice_mut(j);
                                    for i in j..p {
                                        out_j[i] += ca * wr[i] + cb * wc[i];
                                    }
                                }
                            }
                        }
                    }
                    (BlockCoeffs::Nonneg(t), BlockData::Nonneg(wv), BlockData::Nonneg(out)) => {
                        out.fill(0.0);
                        for (&i, &v) in t.idxs.iter().zip(&t.vals) {
                            out[i] += v * wv[i] * wv[i];
                        }
                    }
                    _ => unreachable!(),
                }
            }
            for l in k..m {
                let v: f64 = problem.constraints[l]
                    .iter()
                    .zip(&img)
                    .map(|(co, im)| co.dot(im))
                    .sum();
                h[(k, l)] = v;
                h[(l, k)] = v;
            }
        }

        // Cholesky with escalating jitter.
        let mut chol = None;
        let mut jit = 0.0;
        let tr_h: f64 = (0..m).map(|i| h[(i, i)]).sum();
        for _ in 0..4 {
            let hj = if jit == 0.0 {
                h.clone()
            } else {
                Mat::from_fn(m, m, |i, j| h[(i, j)] + if i == j { jit } else { 0.0 })
            };
            match hj.cholesky(Side::Lower) {
                Ok(f) => {
                    chol = Some(f);
                    break;
                }
                Err(_) => {
                    let base = 1e-12 * tr_h / m as f64;
                    jit = if jit == 0.0 { base } else { jit * 10.0 };
                    jit = jit.max(base);
                }
            }
        }
        let chol = match chol {
            Some(f) => f,
            None => {
                log::warn!("Schur factorization failed at iteration {it}; returning best iterate");
                break;
            }
        };

        // S⁻¹ per PSD block, shared by predictor and corrector.
        let sinv: Vec<Option<Mat<f64>>> = s
            .iter()
            .map(|sb| match sb {
                BlockData::Psd(sm) => {
                    let (u, wv) = eigh(sm);
                    Some(spectral_map(&u, &wv, |v| 1.0 / v))
                }
                BlockData::Nonneg(_) => None,
            })
            .collect();

        let newton = |sigma_mu: f64| -> (Vec<BlockData>, Vec<f64>, Vec<BlockData>) {
            // R = σμ S⁻¹ − X; T = R − W rd W; solve H dy = rp − A(T);
            // dS = rd − Aᵀdy; dX = R − W dS W.
            let r: Vec<BlockData> = (0..nb)
                .map(|ib| match (&x[ib], &s[ib]) {
                    (BlockData::Psd(xm), BlockData::Psd(_)) => {
                        let si = sinv[ib].as_ref().expect("psd block has S inverse");
                        BlockData::Psd(Mat::from_fn(xm.nrows(), xm.ncols(), |i, j| {
                            sigma_mu * si[(i, j)] - xm[(i, j)]
                        }))
                    }
                    (BlockData::Nonneg(xv), BlockData::Nonneg(sv)) => BlockData::Nonneg(
                        xv.iter().zip(sv).map(|(a, d)| sigma_mu / d - a).collect(),
                    ),
                    _ => unreachable!(),
                })
                .collect();
            let sandwich = |v: &BlockData, ib: usize| -> BlockData {
                match (v, &w[ib]) {
                    (BlockData::Psd(vm), BlockData::Psd(wm)) => {
                        BlockData::Psd(mm(mm(wm.as_ref(), vm.as_ref()).as_ref(), wm.as_ref()))
                    }
                    (BlockData::Nonneg(vv), BlockData::Nonneg(wv)) => BlockData::Nonneg(
                        vv.iter().zip(wv).map(|(a, ww)| a * ww * ww).collect(),
                    ),
                    _ => unreachable!(),
                }
            };
            let t: Vec<BlockData> = (0..nb)
                .map(|ib| {
                    let mut ti = r[ib].clone();
                    ti.axpy(-1.0, &sandwich(&rd[ib], ib));
                    ti
                })
                .collect();
            let at = problem.a_op(&t);
            let rhs = Mat::from_fn(m, 1, |i, _| rp[i] - at[i]);
            let dy_mat = chol.solve(&rhs);
            let dy: Vec<f64> = (0..m).map(|i| dy_mat[(i, 0)]).collect();
            let atdy = problem.at_op(&dy);
            let ds: Vec<BlockData> = (0..nb)
                .map(|ib| {
                    let mut d = rd[ib].clone();
                    d.axpy(-1.0, &atdy[ib]);
                    d
                })
                .collect();
            let dx: Vec<BlockData> = (0..nb)
                .map(|ib| {
                    let mut d = r[ib].clone();
                    d.axpy(-1.0, &sandwich(&ds[ib], ib));
                    d
                })
                .collect();
            (dx, dy, ds)
        };

        let steps = |dx: &[BlockData], ds: &[BlockData]| -> (f64, f64) {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for ib in 0..nb {
                match (&x[ib], &dx[ib], &s[ib], &ds[ib]) {
                    (BlockData::Psd(xm), BlockData::Psd(dxm), BlockData::Psd(sm), BlockData::Psd(dsm)) => {
                        ap = ap.min(max_step_psd(xm, dxm));
                        ad = ad.min(max_step_psd(sm, dsm));
                    }
                    (
                        BlockData::Nonneg(xv),
                        BlockData::Nonneg(dxv),
                        BlockData::Nonneg(sv),
                        BlockData::Nonneg(dsv),
                    ) => {
                        ap = ap.min(max_step_vec(xv, dxv));
                        ad = ad.min(max_step_vec(sv, dsv));
                    }
                    _ => unreachable!(),
                }
            }
            ((tau * ap).min(1.0), (tau * ad).min(1.0))
        };

        // Mehrotra: affine predictor sets the centering weight.
        let (dxa, _dya, dsa) = newton(0.0);
        let (apa, ada) = steps(&dxa, &dsa);
        let mua: f64 = (0..nb)
            .map(|ib| {
                let mut xa = x[ib].clone();
                xa.axpy(apa, &dxa[ib]);
                let mut sa = s[ib].clone();
                sa.axpy(ada, &dsa[ib]);
                xa.dot(&sa)
            })
            .sum::<f64>()
            / nu as f64;
        let sigma = (mua.max(0.0) / mu).powi(3).clamp(1e-6, 0.99);
        let (dx, dy, ds) = newton(sigma * mu);
        let (ap, ad) = steps(&dx, &ds);
        for ib in 0..nb {
            x[ib].axpy(ap, &dx[ib]);
            s[ib].axpy(ad, &ds[ib]);
            x[ib].symmetrize();
            s[ib].symmetrize();
        }
        for (yi, di) in y.iter_mut().zip(&dy) {
            *yi += ad * di;
        }
    }

    let best = best.unwrap_or(Best {
        err: f64::INFINITY,
        rp: f64::INFINITY,
        rd: f64::INFINITY,
        gap: f64::INFINITY,
        x,
        y,
        s,
        cx: 0.0,
        by: 0.0,
    });
    // Undo the normalization on the reported point.
    let mut x_out = best.x;
    for xb in &mut x_out {
        xb.scale_mut(bs);
    }
    let mut s_out = best.s;
    for sb in &mut s_out {
        sb.scale_mut(cs);
    }
    let y_out: Vec<f64> = best.y.iter().map(|v| v * cs).collect();
    Ok(SdpSolution {
        status,
        x: x_out,
        y: y_out,
        s: s_out,
        objective: best.cx * bs * cs,
        dual_objective: best.by * bs * cs,
        primal_residual: best.rp,
        dual_residual: best.rd,
        duality_gap: best.gap,
        iterations,
    })
}

/// Independent recomputation of constraint residuals, block eigenvalue
/// floors, and the objective; trusts nothing from solve().
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub equality_residuals: Vec<f64>,
    pub max_equality_violation: f64,
    pub min_eigenvalues: Vec<f64>,
    pub objective: f64,
}

pub fn check_solution(problem: &SdpProblem, x: &[BlockData]) -> Result<CheckReport, SdpError> {
    if x.len() != problem.blocks.len() {
        return Err(SdpError::BlockCount { want: problem.blocks.len(), got: x.len() });
    }
    for (ib, (bl, xb)) in problem.blocks.iter().zip(x).enumerate() {
        if !xb.matches(*bl) {
            return Err(SdpError::BlockShape {
                index: ib,
                reason: format!("expected {:?} of size {}", bl.kind, bl.size),
            });
        }
    }
    let equality_residuals: Vec<f64> = (0..problem.n_constraints())
        .map(|k| problem.a_dot(k, x) - problem.rhs[k])
        .collect();
    let max_equality_violation = equality_residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let min_eigenvalues = x.iter().map(|xb| xb.min_eigenvalue()).collect();
    let objective = problem.objective.iter().zip(x).map(|(cb, xb)| cb.dot(xb)).sum();
    Ok(CheckReport { equality_residuals, max_equality_violation, min_eigenvalues, objective })
}

// ---- JSON schema ----
//
// Problem:
// {
//   "blocks": [{"kind":"psd","size":2}, {"kind":"nonneg","size":3}],
//   "objective": [[...], [...]],   psd blocks: lower-triangle row-major,
//                                  length s(s+1)/2; nonneg blocks: length s
//   "rhs": [...],
//   "constraints": [[{"kind":"psd","rows":[1],"cols":[0],"vals":[2.0]},
//                    {"kind":"nonneg","idxs":[0],"vals":[1.0]}], ...]
// }
// PSD triplets are lower-triangle (row ≥ col); off-diagonal entries act
// symmetrically. Solutions carry x/s blocks in the same packed encoding.

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum CoeffJson {
    Psd { rows: Vec<usize>, cols: Vec<usize>, vals: Vec<f64> },
    Nonneg { idxs: Vec<usize>, vals: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct ProblemJson {
    blocks: Vec<Block>,
    objective: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    constraints: Vec<Vec<CoeffJson>>,
}

/// Lower-triangle row-major packing of a symmetric matrix.
pub fn pack_lower(m: &Mat<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unpack_lower(v: &[f64], n: usize) -> Option<Mat<f64>> {
    if v.len() != n * (n + 1) / 2 {
        return None;
    }
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Some(m)
}

fn block_to_vec(b: &BlockData) -> Vec<f64> {
    match b {
        BlockData::Psd(m) => pack_lower(m),
        BlockData::Nonneg(v) => v.clone(),
    }
}

fn block_from_vec(block: Block, v: &[f64]) -> Option<BlockData> {
    match block.kind {
        BlockKind::Psd => unpack_lower(v, block.size).map(BlockData::Psd),
        BlockKind::Nonneg => (v.len() == block.size).then(|| BlockData::Nonneg(v.to_vec())),
    }
}

const MAX_PSD_SIZE: usize = 1024;
const MAX_VEC_SIZE: usize = 1 << 20;
const MAX_CONSTRAINTS: usize = 100_000;

impl SdpProblem {
    pub fn to_json(&self) -> String {
        let raw = ProblemJson {
            blocks: self.blocks.clone(),
            objective: self.objective.iter().map(block_to_vec).collect(),
            rhs: self.rhs.clone(),
            constraints: self
                .constraints
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|co| match co {
                            BlockCoeffs::Psd(t) => CoeffJson::Psd {
                                rows: t.rows.clone(),
                                cols: t.cols.clone(),
                                vals: t.vals.clone(),
                            },
                            BlockCoeffs::Nonneg(t) => CoeffJson::Nonneg {
                                idxs: t.idxs.clone(),
                                vals: t.vals.clone(),
                            },
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("problem serializes")
    }

    pub fn from_json(text: &str) -> Result<SdpProblem, SdpError> {
        let raw: ProblemJson =
            serde_json::from_str(text).map_err(|e| SdpError::Problem(e.to_string()))?;
        if raw.blocks.is_empty() {
            return Err(SdpError::Problem("no cone blocks".into()));
        }
        for bl in &raw.blocks {
            let cap = match bl.kind {
                BlockKind::Psd => MAX_PSD_SIZE,
                BlockKind::Nonneg => MAX_VEC_SIZE,
            };
            if bl.size == 0 || bl.size > cap {
                return Err(SdpError::Problem(format!("block size {} out of range", bl.size)));
            }
        }
        if raw.rhs.len() > MAX_CONSTRAINTS {
            return Err(SdpError::Problem("too many constraints".into()));
        }
        if raw.objective.len() != raw.blocks.len() {
            return Err(SdpError::Problem("objective must carry one entry per block".into()));
        }
        let objective = raw
            .blocks
            .iter()
            .zip(&raw.objective)
            .map(|(bl, v)| {
                block_from_vec(*bl, v)
                    .ok_or_else(|| SdpError::Problem("objective block has the wrong length".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let constraints = raw
            .constraints
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|co| match co {
                        CoeffJson::Psd { rows, cols, vals } => {
                            BlockCoeffs::Psd(PsdCoeffs { rows, cols, vals })
                        }
                        CoeffJson::Nonneg { idxs, vals } => {
                            BlockCoeffs::Nonneg(VecCoeffs { idxs, vals })
                        }
                    })
                    .collect()
            })
            .collect();
        let problem =
            SdpProblem { blocks: raw.blocks, objective, constraints, rhs: raw.rhs };
        problem.validate()?;
        Ok(problem)
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionJson {
    status: SdpStatus,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    s: Vec<Vec<f64>>,
    objective: f64,
    dual_objective: f64,
    primal_residual: f64,
    dual_residual: f64,
    duality_gap: f64,
    iterations: usize,
}

impl SdpSolution {
    pub fn to_json(&self) -> String {
        let raw = SolutionJson {
            status: self.status,
            x: self.x.iter().map(block_to_vec).collect(),
            y: self.y.clone(),
            s: self.s.iter().map(block_to_vec).collect(),
            objective: self.objective,
            dual_objective: self.dual_objective,
            primal_residual: self.primal_residual,
            dual_residual: self.dual_residual,
            duality_gap: self.duality_gap,
            iterations: self.iterations,
        };
        serde_json::to_string_pretty(&raw).expect("solution serializes")
    }

    pub fn from_json(text: &str, blocks: &[Block]) -> Result<SdpSolution, SdpError> {
        let raw: SolutionJson =
            serde_json::from_str(text).map_err(|e| SdpError::Problem(e.to_string()))?;
        let unpack_all = |vs: &[Vec<f64>]| -> Result<Vec<BlockData>, SdpError> {
            if vs.len() != blocks.len() {
                return Err(SdpError::BlockCount { want: blocks.len(), got: vs.len() });
            }
            blocks
                .iter()
                .zip(vs)
                .map(|(bl, v)| {
                    block_from_vec(*bl, v)
                        .ok_or_else(|| SdpError::Problem("solution block has the wrong length".into()))
                })
                .collect()
        };
        Ok(SdpSolution {
            status: raw.status,
            x: unpack_all(&raw.x)?,
            s: unpack_all(&raw.s)?,
            y: raw.y,
            objective: raw.objective,
            dual_objective: raw.dual_objective,
            primal_residual: raw.primal_residual,
            dual_residual: raw.dual_residual,
            duality_gap: raw.duality_gap,
            iterations: raw.iterations,
        })
    }
}
