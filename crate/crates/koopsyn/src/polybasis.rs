//! Multivariate polynomial algebra over a graded monomial basis.
//!
//! Everything downstream (operator fitting, SOS assembly, controller
//! evaluation) works with coefficient vectors relative to a shared
//! `MonomialBasis`, so the ordering here is load-bearing: it is fixed to
//! graded lexicographic (degree-major, x1 heaviest within a degree) and
//! serialized matrices are only meaningful together with that order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use faer::Mat;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("state dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cannot represent degree {have} in a degree-{target} basis")]
    DegreeTooSmall { target: u32, have: u32 },
    #[error("basis of degree 0 has no degree-1 monomials")]
    NoLinearMonomials,
    #[error("expected {expected} vector-field components, got {got}")]
    ComponentCount { expected: usize, got: usize },
    #[error("coefficient vector has length {got}, basis needs {expected}")]
    CoeffLength { expected: usize, got: usize },
}

/// Exponent vector of a single monomial. Degrees stay tiny (≤ 16 in
/// practice), so `u8` exponents are plenty.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MultiIndex(pub Vec<u8>);

impl MultiIndex {
    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Graded lex: lower total degree first; within a degree, x1-heavy
/// monomials first (x1² before x1x2 before x2²).
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.degree() == 0 {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// All monomials of total degree ≤ q in n variables, in graded lex order.
/// The constant monomial is always index 0 and |indices| = C(n+q, q).
#[derive(Debug)]
pub struct MonomialBasis {
    n: usize,
    q: u32,
    indices: Vec<MultiIndex>,
    pos: HashMap<MultiIndex, usize>,
}

pub type Basis = Arc<MonomialBasis>;

impl MonomialBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always contains the constant monomial
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn index(&self, k: usize) -> &MultiIndex {
        &self.indices[k]
    }

    pub fn position(&self, m: &MultiIndex) -> Option<usize> {
        self.pos.get(m).copied()
    }

    /// Position of the degree-1 monomial x_i (0-based coordinate).
    pub fn coordinate_position(&self, i: usize) -> Option<usize> {
        let mut e = vec![0u8; self.n];
        e[i] = 1;
        self.position(&MultiIndex(e))
    }

    pub fn same_shape(&self, other: &MonomialBasis) -> bool {
        self.n == other.n && self.q == other.q
    }
}

pub fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    u64::try_from(acc).expect("binomial overflows u64")
}

/// binomial(n+q, q) without building the basis, `None` if it exceeds `cap`.
/// Size gate for deserializers, which must reject absurd headers before
/// allocating.
pub fn basis_len_capped(n: usize, q: u32, cap: u64) -> Option<u64> {
    let mut acc: u128 = 1;
    let k = (q as u128).min(n as u128);
    let total = n as u128 + q as u128;
    for i in 0..k {
        acc = acc * (total - i) / (i + 1);
        if acc > cap as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

fn compositions_desc(rem: u8, slots: usize, prefix: &mut Vec<u8>, out: &mut Vec<MultiIndex>) {
    if slots == 1 {
        prefix.push(rem);
        out.push(MultiIndex(prefix.clone()));
        prefix.pop();
        return;
    }
    for e in (0..=rem).rev() {
        prefix.push(e);
        compositions_desc(rem - e, slots - 1, prefix, out);
        prefix.pop();
    }
}

fn basis_cache() -> &'static Mutex<HashMap<(usize, u32), Basis>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u32), Basis>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// All multi-indices of degree ≤ q in graded lex order. Results are
/// memoized per (n, q); bases are immutable and shared via `Arc`.
pub fn build_basis(n: usize, q: u32) -> Basis {
    assert!(n >= 1, "state dimension must be at least 1");
    if let Some(b) = basis_cache().lock().unwrap().get(&(n, q)) {
        return b.clone();
    }
    let mut indices = Vec::with_capacity(binomial((n as u32 + q) as u64, q as u64) as usize);
    let mut prefix = Vec::with_capacity(n);
    for d in 0..=q {
        compositions_desc(d as u8, n, &mut prefix, &mut indices);
    }
    let pos = indices
        .iter()
        .enumerate()
        .map(|(k, m)| (m.clone(), k))
        .collect();
    let basis = Arc::new(MonomialBasis { n, q, indices, pos });
    basis_cache()
        .lock()
        .unwrap()
        .insert((n, q), basis.clone());
    basis
}

/// Ψ(x): evaluate every basis monomial at one point.
pub fn eval_basis(basis: &MonomialBasis, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), basis.n, "state dimension mismatch");
    // Precompute x_i^k for k ≤ q, then each monomial is a short product.
    let q = basis.q as usize;
    let mut powers = vec![1.0f64; basis.n * (q + 1)];
    for i in 0..basis.n {
        for k in 1..=q {
            powers[i * (q + 1) + k] = powers[i * (q + 1) + k - 1] * x[i];
        }
    }
    basis
        .indices
        .iter()
        .map(|m| {
            let mut v = 1.0;
            for (i, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    v *= powers[i * (q + 1) + e as usize];
                }
            }
            v
        })
        .collect()
}

/// A polynomial as a dense coefficient vector over its basis.
#[derive(Clone, Debug)]
pub struct PolyVec {
    basis: Basis,
    coeffs: Vec<f64>,
}

impl PolyVec {
    pub fn zero(basis: &Basis) -> Self {
        PolyVec {
            basis: basis.clone(),
            coeffs: vec![0.0; basis.len()],
        }
    }

    pub fn from_coeffs(basis: &Basis, coeffs: Vec<f64>) -> Result<Self, PolyError> {
        if coeffs.len() != basis.len() {
            return Err(PolyError::CoeffLength {
                expected: basis.len(),
                got: coeffs.len(),
            });
        }
        Ok(PolyVec {
            basis: basis.clone(),
            coeffs,
        })
    }

    /// Single monomial c·x^m, mostly a test/bootstrap helper.
    pub fn monomial(basis: &Basis, m: &MultiIndex, c: f64) -> Self {
        let mut p = Self::zero(basis);
        let k = basis
            .position(m)
            .unwrap_or_else(|| panic!("monomial {m} not representable at degree {}", basis.q()));
        p.coeffs[k] = c;
        p
    }

    pub fn constant(basis: &Basis, c: f64) -> Self {
        let mut p = Self::zero(basis);
        p.coeffs[0] = c;
        p
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn coeff(&self, m: &MultiIndex) -> f64 {
        self.basis.position(m).map_or(0.0, |k| self.coeffs[k])
    }

    pub fn set_coeff(&mut self, m: &MultiIndex, c: f64) {
        let k = self
            .basis
            .position(m)
            .unwrap_or_else(|| panic!("monomial {m} not representable at degree {}", self.basis.q()));
        self.coeffs[k] = c;
    }

    /// Max total degree carried by a nonzero coefficient (0 for the zero
    /// polynomial).
    pub fn degree(&self) -> u32 {
        self.basis
            .indices
            .iter()
            .zip(&self.coeffs)
            .filter(|(_, &c)| c != 0.0)
            .map(|(m, _)| m.degree())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let psi = eval_basis(&self.basis, x);
        self.coeffs.iter().zip(&psi).map(|(c, v)| c * v).sum()
    }

    pub fn scale(&self, s: f64) -> PolyVec {
        PolyVec {
            basis: self.basis.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Coefficient-wise sum; bases must have identical shape.
    pub fn add(&self, other: &PolyVec) -> Result<PolyVec, PolyError> {
        if !self.basis.same_shape(&other.basis) {
            return Err(PolyError::DegreeTooSmall {
                target: self.basis.q(),
                have: other.basis.q(),
            });
        }
        Ok(PolyVec {
            basis: self.basis.clone(),
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }
}

/// Exact convolution product; the result lives in the degree q1+q2 basis.
pub fn multiply(p: &PolyVec, r: &PolyVec) -> Result<PolyVec, PolyError> {
    let n = p.basis.n();
    if n != r.basis.n() {
        return Err(PolyError::DimMismatch(n, r.basis.n()));
    }
    let target = build_basis(n, p.basis.q() + r.basis.q());
    let mut out = PolyVec::zero(&target);
    for (k1, &c1) in p.coeffs.iter().enumerate() {
        if c1 == 0.0 {
            continue;
        }
        let m1 = &p.basis.indices[k1];
        for (k2, &c2) in r.coeffs.iter().enumerate() {
            if c2 == 0.0 {
                continue;
            }
            let m2 = &r.basis.indices[k2];
            let sum = MultiIndex(m1.0.iter().zip(&m2.0).map(|(a, b)| a + b).collect());
            let pos = target.position(&sum).expect("product degree fits target basis");
            out.coeffs[pos] += c1 * c2;
        }
    }
    Ok(out)
}

/// Linear map M_b with M_b · coeffs(p) = coeffs(b·p) for any p of the
/// source degree. Needed because decision coefficients multiply a fixed b
/// inside the SOS constraints.
pub fn multiplication_matrix(b: &PolyVec, source: &Basis) -> Mat<f64> {
    assert_eq!(b.basis.n(), source.n(), "state dimension mismatch");
    let target = build_basis(source.n(), source.q() + b.basis.q());
    let mut m = Mat::<f64>::zeros(target.len(), source.len());
    for (j, mj) in source.indices.iter().enumerate() {
        for (k, &c) in b.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let mk = &b.basis.indices[k];
            let sum = MultiIndex(mj.0.iter().zip(&mk.0).map(|(a, b)| a + b).collect());
            let pos = target.position(&sum).expect("product fits target");
            m[(pos, j)] += c;
        }
    }
    m
}

/// ∂p/∂x_i in the same basis (differentiation never raises degree).
pub fn partial_derivative(p: &PolyVec, i: usize) -> PolyVec {
    assert!(i < p.basis.n(), "coordinate out of range");
    let mut out = PolyVec::zero(&p.basis);
    for (k, &c) in p.coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let m = &p.basis.indices[k];
        let e = m.0[i];
        if e == 0 {
            continue;
        }
        let mut d = m.0.clone();
        d[i] -= 1;
        let pos = p
            .basis
            .position(&MultiIndex(d))
            .expect("derivative stays in basis");
        out.coeffs[pos] += c * e as f64;
    }
    out
}

/// Σ_i ∂(components_i)/∂x_i.
pub fn divergence(components: &[PolyVec]) -> Result<PolyVec, PolyError> {
    if components.is_empty() {
        return Err(PolyError::ComponentCount {
            expected: 1,
            got: 0,
        });
    }
    let n = components[0].basis.n();
    if components.len() != n {
        return Err(PolyError::ComponentCount {
            expected: n,
            got: components.len(),
        });
    }
    let mut out = PolyVec::zero(&components[0].basis);
    for (i, comp) in components.iter().enumerate() {
        if !comp.basis.same_shape(&components[0].basis) {
            return Err(PolyError::DimMismatch(n, comp.basis.n()));
        }
        let d = partial_derivative(comp, i);
        for (o, v) in out.coeffs.iter_mut().zip(&d.coeffs) {
            *o += v;
        }
    }
    Ok(out)
}

/// 𝒞_x with x = 𝒞_x^T Ψ(x): one unit entry per column at the matching
/// degree-1 monomial row.
pub fn state_extraction(basis: &Basis) -> Result<Mat<f64>, PolyError> {
    if basis.q() < 1 {
        return Err(PolyError::NoLinearMonomials);
    }
    let mut cx = Mat::<f64>::zeros(basis.len(), basis.n());
    for i in 0..basis.n() {
        let row = basis.coordinate_position(i).expect("degree-1 monomial");
        cx[(row, i)] = 1.0;
    }
    Ok(cx)
}

/// Same polynomial, zero-padded into a larger basis.
pub fn embed(p: &PolyVec, target: &Basis) -> Result<PolyVec, PolyError> {
    if target.n() != p.basis.n() {
        return Err(PolyError::DimMismatch(p.basis.n(), target.n()));
    }
    if target.q() < p.basis.q() {
        return Err(PolyError::DegreeTooSmall {
            target: target.q(),
            have: p.basis.q(),
        });
    }
    let mut out = PolyVec::zero(target);
    // Graded order is shared, so the source coefficients are a prefix.
    out.coeffs[..p.coeffs.len()].copy_from_slice(&p.coeffs);
    Ok(out)
}

/// Keep coefficients of degree ≤ deg, returning the truncated polynomial
/// (in the degree-`deg` basis) and the l1 mass that was dropped.
pub fn truncate_to_degree(p: &PolyVec, deg: u32) -> (PolyVec, f64) {
    let target = build_basis(p.basis.n(), deg.min(p.basis.q()));
    let mut out = PolyVec::zero(&target);
    let mut dropped = 0.0;
    for (k, &c) in p.coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let m = &p.basis.indices[k];
        if m.degree() <= deg {
            out.coeffs[target.position(m).expect("prefix")] = c;
        } else {
            dropped += c.abs();
        }
    }
    (out, dropped)
}

// Report-friendly form: "2.000000*x1 - 3.000000*x2^2", basis order.
impl fmt::Display for PolyVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let m = &self.basis.indices[k];
            if first {
                write!(f, "{c:.6}")?;
                first = false;
            } else if c < 0.0 {
                write!(f, " - {:.6}", -c)?;
            } else {
                write!(f, " + {c:.6}")?;
            }
            if m.degree() > 0 {
                write!(f, "*{m}")?;
            }
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PolyJson {
    n: usize,
    q: u32,
    coeffs: Vec<f64>,
    ordering: String,
}

impl Serialize for PolyVec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolyJson {
            n: self.basis.n(),
            q: self.basis.q(),
            coeffs: self.coeffs.clone(),
            ordering: "grlex".to_owned(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolyVec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = PolyJson::deserialize(d)?;
        if raw.ordering != "grlex" {
            return Err(D::Error::custom(format!(
                "unsupported monomial ordering {:?}",
                raw.ordering
            )));
        }
        if raw.n == 0 {
            return Err(D::Error::custom("state dimension must be at least 1"));
        }
        if raw.n > 32 || raw.q > 64 {
            return Err(D::Error::custom("basis size out of supported range"));
        }
        let expected = basis_len_capped(raw.n, raw.q, 1_000_000)
            .ok_or_else(|| D::Error::custom("basis size out of supported range"))?;
        if raw.coeffs.len() as u64 != expected {
            return Err(D::Error::custom(format!(
                "expected {expected} coefficients for n={}, q={}, got {}",
                raw.n,
                raw.q,
                raw.coeffs.len()
            )));
        }
        let basis = build_basis(raw.n, raw.q);
        PolyVec::from_coeffs(&basis, raw.coeffs).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mi(e: &[u8]) -> MultiIndex {
        MultiIndex(e.to_vec())
    }

    #[test]
    fn basis_sizes_match_binomial() {
        for (n, q) in [(2, 2), (2, 4), (6, 3), (1, 0), (3, 6), (6, 8)] {
            let b = build_basis(n, q);
            assert_eq!(
                b.len() as u64,
                binomial((n as u32 + q) as u64, q as u64),
                "size for n={n} q={q}"
            );
        }
    }

    #[test]
    fn grlex_order_is_degree_major_x1_heavy() {
        let b = build_basis(2, 2);
        let order: Vec<_> = b.indices().iter().map(|m| m.0.clone()).collect();
        assert_eq!(
            order,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
        // Ord agrees with the listing.
        let mut sorted = b.indices().to_vec();
        sorted.sort();
        assert_eq!(sorted, b.indices());
    }

    #[test]
    fn eval_basis_graded_example() {
        let b = build_basis(2, 2);
        assert_eq!(eval_basis(&b, &[0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(eval_basis(&b, &[2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn multiply_difference_of_squares() {
        let b = build_basis(2, 1);
        let mut p = PolyVec::zero(&b);
        p.set_coeff(&mi(&[1, 0]), 1.0);
        p.set_coeff(&mi(&[0, 1]), 1.0);
        let mut r = PolyVec::zero(&b);
        r.set_coeff(&mi(&[1, 0]), 1.0);
        r.set_coeff(&mi(&[0, 1]), -1.0);
        let prod = multiply(&p, &r).unwrap();
        assert_eq!(prod.coeff(&mi(&[2, 0])), 1.0);
        assert_eq!(prod.coeff(&mi(&[0, 2])), -1.0);
        assert_eq!(prod.coeff(&mi(&[1, 1])), 0.0);
    }

    #[test]
    fn multiply_xtx_by_x2_cubed() {
        let b2 = build_basis(2, 2);
        let mut xtx = PolyVec::zero(&b2);
        xtx.set_coeff(&mi(&[2, 0]), 1.0);
        xtx.set_coeff(&mi(&[0, 2]), 1.0);
        let b3 = build_basis(2, 3);
        let x2c = PolyVec::monomial(&b3, &mi(&[0, 3]), 1.0);
        let prod = multiply(&xtx, &x2c).unwrap();
        assert_eq!(prod.coeff(&mi(&[2, 3])), 1.0);
        assert_eq!(prod.coeff(&mi(&[0, 5])), 1.0);
        assert_eq!(prod.l1_norm(), 2.0);
    }

    #[test]
    fn multiplication_matrix_matches_multiply() {
        let b = build_basis(2, 2);
        let mut bp = PolyVec::zero(&b);
        bp.set_coeff(&mi(&[2, 0]), 1.0);
        bp.set_coeff(&mi(&[0, 2]), 1.0);
        let src = build_basis(2, 1);
        let m = multiplication_matrix(&bp, &src);
        let p = PolyVec::monomial(&src, &mi(&[0, 1]), 1.0);
        let direct = multiply(&bp, &p).unwrap();
        for (row, &c) in direct.coeffs().iter().enumerate() {
            let via: f64 = (0..src.len()).map(|j| m[(row, j)] * p.coeffs()[j]).sum();
            assert_eq!(via, c);
        }
    }

    #[test]
    fn derivative_power_rule() {
        let b = build_basis(2, 3);
        let p = PolyVec::monomial(&b, &mi(&[2, 1]), 1.0);
        let d = partial_derivative(&p, 0);
        assert_eq!(d.coeff(&mi(&[1, 1])), 2.0);
        assert_eq!(d.l1_norm(), 2.0);
        let dc = partial_derivative(&PolyVec::constant(&b, 5.0), 1);
        assert_eq!(dc.l1_norm(), 0.0);
    }

    #[test]
    fn divergence_of_rotation_vanishes() {
        let b = build_basis(2, 1);
        let f1 = PolyVec::monomial(&b, &mi(&[0, 1]), 1.0);
        let f2 = PolyVec::monomial(&b, &mi(&[1, 0]), -1.0);
        let div = divergence(&[f1, f2]).unwrap();
        assert_eq!(div.l1_norm(), 0.0);
        let g1 = PolyVec::monomial(&b, &mi(&[1, 0]), 1.0);
        let g2 = PolyVec::monomial(&b, &mi(&[0, 1]), 1.0);
        let div2 = divergence(&[g1, g2]).unwrap();
        assert_eq!(div2.coeff(&mi(&[0, 0])), 2.0);
    }

    #[test]
    fn state_extraction_recovers_x() {
        let b = build_basis(6, 3);
        let cx = state_extraction(&b).unwrap();
        assert_eq!(cx.nrows(), 84);
        let x = [2.0, -1.0, 0.5, 3.0, -2.5, 1.0];
        let psi = eval_basis(&b, &x);
        for i in 0..6 {
            let xi: f64 = (0..b.len()).map(|k| cx[(k, i)] * psi[k]).sum();
            assert!((xi - x[i]).abs() < 1e-15);
        }
        assert!(state_extraction(&build_basis(2, 0)).is_err());
    }

    #[test]
    fn embed_round_trip() {
        let b = build_basis(2, 2);
        let mut p = PolyVec::zero(&b);
        p.set_coeff(&mi(&[1, 0]), 2.0);
        p.set_coeff(&mi(&[0, 2]), -3.0);
        let big = build_basis(2, 5);
        let e = embed(&p, &big).unwrap();
        assert_eq!(e.eval(&[1.5, -0.5]), p.eval(&[1.5, -0.5]));
        let (back, dropped) = truncate_to_degree(&e, 2);
        assert_eq!(dropped, 0.0);
        assert_eq!(back.coeffs(), p.coeffs());
        assert!(embed(&e, &b).is_err());
    }

    #[test]
    fn json_round_trip() {
        let b = build_basis(3, 2);
        let mut p = PolyVec::zero(&b);
        p.set_coeff(&mi(&[0, 1, 1]), 0.25);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"ordering\":\"grlex\""));
        let back: PolyVec = serde_json::from_str(&s).unwrap();
        assert_eq!(back.coeffs(), p.coeffs());
        assert!(serde_json::from_str::<PolyVec>("{\"n\":2,\"q\":1,\"coeffs\":[0,0,0],\"ordering\":\"lex\"}").is_err());
        assert!(serde_json::from_str::<PolyVec>("{\"n\":2,\"q\":1,\"coeffs\":[0,0],\"ordering\":\"grlex\"}").is_err());
    }
}
