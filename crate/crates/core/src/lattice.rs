//! Full-rank lattices acting by deck transformations, and short generating
//! systems for them.
//!
//! A lattice is stored via a row-generator matrix `B`: the element with
//! integer coordinates `v` is the vector `B^T v`. The greedy short basis
//! repeatedly takes the shortest lattice vector outside the sublattice
//! generated so far; sublattice membership is decided exactly with integer
//! row-echelon (Hermite) reduction, never with floating-point rank guesses.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Hard caps for vector enumeration.
const ENUM_BUDGET: usize = 4_000_000;
const DOUBLING_LIMIT: u32 = 12;

#[derive(Debug, Clone)]
pub struct DeckLattice {
    /// Rows are the generators.
    basis: DMatrix<f64>,
    gram: DMatrix<f64>,
    /// Rows of (B^T)^{-1}; bounds integer coordinates during enumeration.
    inv_t_rows: Vec<DVector<f64>>,
}

impl DeckLattice {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInputs(
                "lattice basis must be a square matrix".into(),
            ));
        }
        let basis = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        let bt = basis.transpose();
        let inv_t = bt.clone().try_inverse().ok_or_else(|| {
            Error::InvalidInputs("lattice basis is singular".into())
        })?;
        let gram = &basis * &bt;
        let inv_t_rows = (0..n).map(|i| inv_t.row(i).transpose()).collect();
        Ok(Self {
            basis,
            gram,
            inv_t_rows,
        })
    }

    pub fn identity(n: usize) -> Self {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(&rows).expect("identity basis is invertible")
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Ambient vector of the element with integer coordinates `v`.
    pub fn vector_of(&self, v: &[i64]) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for (i, &c) in v.iter().enumerate() {
            for j in 0..n {
                out[j] += c as f64 * self.basis[(i, j)];
            }
        }
        out
    }

    /// Length of the loop with integer coordinates `v`.
    pub fn loop_length(&self, v: &[i64]) -> f64 {
        self.vector_of(v).norm()
    }

    /// Ambient vector for real lattice coordinates (used by torus charts).
    pub fn embed_real(&self, u: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * u
    }

    /// All nonzero integer vectors with `loop_length <= radius`, sorted by
    /// (length, lexicographic coordinates), one representative per +/- pair
    /// (first nonzero coordinate positive).
    pub fn enumerate_up_to(&self, radius: f64) -> Result<Vec<(Vec<i64>, f64)>> {
        let n = self.dim();
        let mut bounds = Vec::with_capacity(n);
        let mut count: usize = 1;
        for row in &self.inv_t_rows {
            let m = (row.norm() * radius).floor() as i64 + 1;
            count = count.saturating_mul((2 * m + 1) as usize);
            bounds.push(m);
        }
        if count > ENUM_BUDGET {
            return Err(Error::EnumerationBudgetExceeded(format!(
                "{count} candidate vectors at radius {radius:.3}"
            )));
        }
        let mut out = Vec::new();
        let mut v = vec![0i64; n];
        self.enumerate_rec(0, &mut v, &bounds, radius, &mut out);
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        i: usize,
        v: &mut Vec<i64>,
        bounds: &[i64],
        radius: f64,
        out: &mut Vec<(Vec<i64>, f64)>,
    ) {
        if i == v.len() {
            if v.iter().all(|&c| c == 0) {
                return;
            }
            // Canonical sign: first nonzero coordinate positive.
            if v.iter().find(|&&c| c != 0).is_some_and(|&c| c < 0) {
                return;
            }
            let len = self.loop_length(v);
            if len <= radius {
                out.push((v.clone(), len));
            }
            return;
        }
        for c in -bounds[i]..=bounds[i] {
            v[i] = c;
            self.enumerate_rec(i + 1, v, bounds, radius, out);
        }
        v[i] = 0;
    }

    /// Length of the shortest nonzero lattice vector.
    pub fn shortest_length(&self) -> Result<f64> {
        let mut radius = self
            .basis
            .row_iter()
            .map(|r| r.norm())
            .fold(f64::INFINITY, f64::min);
        for _ in 0..DOUBLING_LIMIT {
            let found = self.enumerate_up_to(radius)?;
            if let Some(first) = found.first() {
                return Ok(first.1);
            }
            radius *= 2.0;
        }
        Err(Error::EnumerationBudgetExceeded(
            "no nonzero vector found within the doubling limit".into(),
        ))
    }

    /// Translates `k` minimizing `|B^T (delta + k)|`, with every translate
    /// within `(1 + tol_extra)` of the minimum. Sorted by (length, lex).
    pub fn minimal_translates(
        &self,
        delta: &DVector<f64>,
        tol_extra: f64,
    ) -> Vec<(Vec<i64>, f64)> {
        let n = self.dim();
        // Rounded translate gives an upper bound for the minimal length.
        let center: Vec<i64> = (0..n).map(|i| (-delta[i]).round() as i64).collect();
        let shifted = DVector::from_fn(n, |i, _| delta[i] + center[i] as f64);
        let d_ub = self.embed_real(&shifted).norm();
        let reach = d_ub * (1.0 + tol_extra) + 1e-9;
        let mut out: Vec<(Vec<i64>, f64)> = Vec::new();
        let mut best = f64::INFINITY;
        let bounds: Vec<i64> = self
            .inv_t_rows
            .iter()
            .map(|row| (row.norm() * reach).floor() as i64 + 1)
            .collect();
        let mut k = vec![0i64; n];
        self.translate_rec(0, &mut k, &center, &bounds, delta, &mut best, &mut out);
        let keep = best * (1.0 + tol_extra) + 1e-12;
        out.retain(|(_, l)| *l <= keep);
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn translate_rec(
        &self,
        i: usize,
        k: &mut Vec<i64>,
        center: &[i64],
        bounds: &[i64],
        delta: &DVector<f64>,
        best: &mut f64,
        out: &mut Vec<(Vec<i64>, f64)>,
    ) {
        if i == k.len() {
            let shifted = DVector::from_fn(k.len(), |j, _| delta[j] + k[j] as f64);
            let len = self.embed_real(&shifted).norm();
            if len < *best {
                *best = len;
            }
            out.push((k.clone(), len));
            return;
        }
        for c in (center[i] - bounds[i])..=(center[i] + bounds[i]) {
            k[i] = c;
            self.translate_rec(i + 1, k, center, bounds, delta, best, out);
        }
        k[i] = center[i];
    }
}

/// Greedy short generating system.
#[derive(Debug, Clone, Serialize)]
pub struct ShortBasis {
    /// Integer coordinates of the chosen elements, in pick order.
    pub elements: Vec<Vec<i64>>,
    pub lengths: Vec<f64>,
    /// Whether the elements generate the full lattice.
    pub generates: bool,
    pub length_cap: Option<f64>,
}

/// Integer row echelon form (Hermite-style) over the integers.
/// Rows generate the same sublattice of Z^n as the input rows.
#[derive(Debug, Clone, Default)]
struct IntEchelon {
    rows: Vec<Vec<i128>>,
    pivots: Vec<usize>,
}

impl IntEchelon {
    fn insert(&mut self, v: &[i64]) {
        let mut v: Vec<i128> = v.iter().map(|&c| i128::from(c)).collect();
        let n = v.len();
        let mut col = 0;
        let mut row = 0;
        while col < n {
            if row < self.rows.len() && self.pivots[row] == col {
                let p = self.rows[row][col];
                if v[col] != 0 {
                    // Euclidean reduction of v against the pivot row.
                    let (mut a, mut b) = (p, v[col]);
                    // Extended gcd on the pair of rows.
                    while b != 0 {
                        let q = a.div_euclid(b);
                        for j in 0..n {
                            let t = self.rows[row][j] - q * v[j];
                            self.rows[row][j] = v[j];
                            v[j] = t;
                        }
                        let t = a - q * b;
                        a = b;
                        b = t;
                    }
                    if self.rows[row][col] < 0 {
                        for x in self.rows[row].iter_mut() {
                            *x = -*x;
                        }
                    }
                }
                row += 1;
                col += 1;
                continue;
            }
            if v[col] != 0 {
                if v.iter().find(|&&c| c != 0).is_some_and(|&c| c < 0) {
                    for x in v.iter_mut() {
                        *x = -*x;
                    }
                }
                self.rows.insert(row, v);
                self.pivots.insert(row, col);
                return;
            }
            col += 1;
        }
    }

    fn contains(&self, v: &[i64]) -> bool {
        let mut v: Vec<i128> = v.iter().map(|&c| i128::from(c)).collect();
        let n = v.len();
        for (row, &p) in self.rows.iter().zip(self.pivots.iter()) {
            if v[..p].iter().any(|&c| c != 0) {
                return false;
            }
            if v[p] != 0 {
                if v[p] % row[p] != 0 {
                    return false;
                }
                let q = v[p] / row[p];
                for j in p..n {
                    v[j] -= q * row[j];
                }
            }
        }
        v.iter().all(|&c| c == 0)
    }

    fn is_full(&self, n: usize) -> bool {
        self.rows.len() == n && self.rows.iter().zip(&self.pivots).all(|(r, &p)| r[p] == 1)
    }
}

/// Greedy short basis: repeatedly append the shortest lattice vector outside
/// the sublattice generated so far (ties broken lexicographically on integer
/// coordinates), until the elements generate the lattice or the next candidate
/// reaches `length_cap`.
pub fn short_basis(lattice: &DeckLattice, length_cap: Option<f64>) -> Result<ShortBasis> {
    let n = lattice.dim();
    let mut chosen = ShortBasis {
        elements: Vec::new(),
        lengths: Vec::new(),
        generates: false,
        length_cap,
    };
    let mut echelon = IntEchelon::default();
    let base_radius = 2.0 * lattice.shortest_length()?;
    loop {
        if echelon.is_full(n) {
            chosen.generates = true;
            return Ok(chosen);
        }
        let mut radius = base_radius;
        let mut next: Option<(Vec<i64>, f64)> = None;
        for _ in 0..DOUBLING_LIMIT {
            let candidates = lattice.enumerate_up_to(radius)?;
            next = candidates
                .into_iter()
                .find(|(v, _)| !echelon.contains(v));
            if next.is_some() {
                break;
            }
            radius *= 2.0;
        }
        let (v, len) = next.ok_or_else(|| {
            Error::EnumerationBudgetExceeded(
                "no candidate outside the sublattice within the doubling limit".into(),
            )
        })?;
        if let Some(cap) = length_cap {
            if len >= cap {
                return Ok(chosen);
            }
        }
        echelon.insert(&v);
        chosen.elements.push(v);
        chosen.lengths.push(len);
        if chosen.elements.len() > 8 * n + 16 {
            return Err(Error::EnumerationBudgetExceeded(
                "short basis grew past the sanity cap".into(),
            ));
        }
    }
}

/// Which structural property a basis fails, with the witnessing pair.
#[derive(Debug, Clone, Serialize)]
pub enum BasisViolation {
    /// Lengths are not nondecreasing in pick order.
    LengthOrder { i: usize, j: usize },
    /// Some difference is shorter than the longer of the pair:
    /// |a_i - a_j| < max(|a_i|, |a_j|) - tol.
    DifferenceTooShort {
        i: usize,
        j: usize,
        diff_len: f64,
        max_len: f64,
    },
    /// An element reached the declared length cap: |a_i| >= cap.
    CapExceeded { i: usize, len: f64, cap: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct BasisReport {
    pub ok: bool,
    pub violation: Option<BasisViolation>,
}

/// Check the structural properties of a short basis: nondecreasing lengths,
/// no difference of two elements shorter than the longer one (tolerance
/// 1e-9), and every length strictly below the cap when one is declared. An
/// empty basis passes vacuously.
pub fn verify_basis_properties(lattice: &DeckLattice, basis: &ShortBasis) -> BasisReport {
    const TOL: f64 = 1e-9;
    for i in 1..basis.elements.len() {
        if basis.lengths[i] + TOL < basis.lengths[i - 1] {
            return BasisReport {
                ok: false,
                violation: Some(BasisViolation::LengthOrder { i: i - 1, j: i }),
            };
        }
    }
    for i in 0..basis.elements.len() {
        for j in 0..i {
            let diff: Vec<i64> = basis.elements[i]
                .iter()
                .zip(&basis.elements[j])
                .map(|(a, b)| a - b)
                .collect();
            let diff_len = lattice.loop_length(&diff);
            let max_len = basis.lengths[i].max(basis.lengths[j]);
            if diff_len < max_len - TOL {
                return BasisReport {
                    ok: false,
                    violation: Some(BasisViolation::DifferenceTooShort {
                        i,
                        j,
                        diff_len,
                        max_len,
                    }),
                };
            }
        }
    }
    if let Some(cap) = basis.length_cap {
        for (i, &len) in basis.lengths.iter().enumerate() {
            if len >= cap {
                return BasisReport {
                    ok: false,
                    violation: Some(BasisViolation::CapExceeded { i, len, cap }),
                };
            }
        }
    }
    BasisReport {
        ok: true,
        violation: None,
    }
}

/// Smallest pairwise angle (radians) between basis elements, by ambient inner
/// products. Returns `None` for fewer than two elements.
pub fn min_pairwise_angle(lattice: &DeckLattice, basis: &ShortBasis) -> Option<f64> {
    let m = basis.elements.len();
    if m < 2 {
        return None;
    }
    let vectors: Vec<DVector<f64>> = basis
        .elements
        .iter()
        .map(|v| lattice.vector_of(v))
        .collect();
    let mut min_angle = f64::INFINITY;
    for i in 0..m {
        for j in 0..i {
            let c = vectors[i].dot(&vectors[j]) / (vectors[i].norm() * vectors[j].norm());
            let angle = c.clamp(-1.0, 1.0).acos();
            if angle < min_angle {
                min_angle = angle;
            }
        }
    }
    Some(min_angle)
}
