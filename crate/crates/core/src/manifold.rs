//! Manifold catalog: charts, metrics, connection coefficients, curvature.
//!
//! Every manifold is presented through a single global chart with explicit
//! wrap-around rules and exclusion bands around coordinate singularities:
//!
//! * `euclidean(n)`: identity chart on a large box.
//! * `sphere(n, K)`: hyperspherical colatitudes/longitude on the round sphere
//!   of curvature `K > 0`; colatitudes keep a band of width 1e-3 away from
//!   the poles, the longitude wraps mod 2 pi.
//! * `hyperbolic(n, K)`: Poincare ball of curvature `K < 0`.
//! * `flat_torus(L)`: lattice coordinates mod 1 for a full-rank lattice `L`.
//! * `perturbed_torus(L, a)`: same chart with conformal factor
//!   `1 + a sin(2 pi u_0)`.
//! * `ellipsoid(a, b, c)`: colatitude/longitude chart on the embedded surface.
//! * `revolution(R, r)`: torus of revolution with both angles wrapping.
//!
//! Uniform metric scaling `g -> c^2 g` is a wrapper available on every kind;
//! it multiplies distances by `c` exactly and leaves chart coordinates and
//! tangent angles untouched.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::DeckLattice;

const POLE_BAND: f64 = 1e-3;
const BALL_BAND: f64 = 1e-6;
const EUCLIDEAN_BOX: f64 = 1e6;

/// A point in a manifold's chart. The catalog uses one chart per manifold,
/// so `chart` is always 0; it is kept so that atlases remain representable.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub chart: u8,
    pub x: DVector<f64>,
}

impl ChartPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self {
            chart: 0,
            x: DVector::from_vec(coords),
        }
    }

    pub fn from_vector(x: DVector<f64>) -> Self {
        Self { chart: 0, x }
    }

    pub fn coords(&self) -> &[f64] {
        self.x.as_slice()
    }
}

/// A tangent vector in chart components at a base point.
#[derive(Debug, Clone)]
pub struct TangentVector {
    pub base: ChartPoint,
    pub v: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldKind {
    Euclidean,
    Sphere,
    Hyperbolic,
    FlatTorus,
    PerturbedTorus,
    Ellipsoid,
    Revolution,
}

/// Connection coefficients at a point: `gamma[k][(i, j)]` is the coefficient
/// of the k-th coordinate acceleration for velocity components i, j.
#[derive(Debug, Clone)]
pub struct Christoffels {
    pub gamma: Vec<DMatrix<f64>>,
}

impl Christoffels {
    fn zeros(n: usize) -> Self {
        Self {
            gamma: vec![DMatrix::zeros(n, n); n],
        }
    }

    /// Acceleration `-Gamma^k_{ij} u^i w^j` for each k.
    pub fn acceleration(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.gamma.len();
        DVector::from_fn(n, |k, _| -(u.transpose() * &self.gamma[k] * w)[(0, 0)])
    }
}

/// Curvature tensor with one index up: `get(i, j, k, l)` is the l-th component
/// of `R(e_i, e_j) e_k`.
#[derive(Debug, Clone)]
pub struct Riemann {
    n: usize,
    data: Vec<f64>,
}

impl Riemann {
    fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n * n],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.n + j) * self.n + k) * self.n + l
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.idx(i, j, k, l)]
    }

    fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let at = self.idx(i, j, k, l);
        self.data[at] = v;
    }

    /// Components of `R(u, v) w`.
    pub fn apply(&self, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |l, _| {
            let mut s = 0.0;
            for i in 0..n {
                if u[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    for k in 0..n {
                        s += self.get(i, j, k, l) * u[i] * v[j] * w[k];
                    }
                }
            }
            s
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifoldSpec {
    kind: ManifoldKind,
    dim: usize,
    curvature_param: f64,
    lattice: Option<DeckLattice>,
    shape_params: Vec<f64>,
    scale: f64,
    /// Period of each wrapped coordinate; `None` for unwrapped ones.
    periods: Vec<Option<f64>>,
    /// Admissible interval per coordinate (ignored for wrapped coordinates).
    intervals: Vec<(f64, f64)>,
    /// Chart is additionally restricted to `|x| < ball` when set.
    ball: Option<f64>,
}

impl ManifoldSpec {
    pub fn euclidean(n: usize) -> Result<Self> {
        check_dim(n)?;
        Ok(Self {
            kind: ManifoldKind::Euclidean,
            dim: n,
            curvature_param: 0.0,
            lattice: None,
            shape_params: vec![],
            scale: 1.0,
            periods: vec![None; n],
            intervals: vec![(-EUCLIDEAN_BOX, EUCLIDEAN_BOX); n],
            ball: None,
        })
    }

    pub fn sphere(n: usize, k: f64) -> Result<Self> {
        check_dim(n)?;
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::InvalidInputs(format!(
                "sphere needs curvature K > 0, got {k}"
            )));
        }
        let mut periods = vec![None; n];
        periods[n - 1] = Some(std::f64::consts::TAU);
        let mut intervals = vec![(POLE_BAND, std::f64::consts::PI - POLE_BAND); n];
        intervals[n - 1] = (0.0, std::f64::consts::TAU);
        Ok(Self {
            kind: ManifoldKind::Sphere,
            dim: n,
            curvature_param: k,
            lattice: None,
            shape_params: vec![],
            scale: 1.0,
            periods,
            intervals,
            ball: None,
        })
    }

    pub fn hyperbolic(n: usize, k: f64) -> Result<Self> {
        check_dim(n)?;
        if !(k < 0.0) || !k.is_finite() {
            return Err(Error::InvalidInputs(format!(
                "hyperbolic needs curvature K < 0, got {k}"
            )));
        }
        Ok(Self {
            kind: ManifoldKind::Hyperbolic,
            dim: n,
            curvature_param: k,
            lattice: None,
            shape_params: vec![],
            scale: 1.0,
            periods: vec![None; n],
            intervals: vec![(-1.0, 1.0); n],
            ball: Some(1.0 - BALL_BAND),
        })
    }

    pub fn flat_torus(lattice: DeckLattice) -> Result<Self> {
        let n = lattice.dim();
        check_dim(n)?;
        Ok(Self {
            kind: ManifoldKind::FlatTorus,
            dim: n,
            curvature_param: 0.0,
            lattice: Some(lattice),
            shape_params: vec![],
            scale: 1.0,
            periods: vec![Some(1.0); n],
            intervals: vec![(0.0, 1.0); n],
            ball: None,
        })
    }

    pub fn perturbed_torus(lattice: DeckLattice, amplitude: f64) -> Result<Self> {
        let n = lattice.dim();
        check_dim(n)?;
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::InvalidInputs(format!(
                "perturbation amplitude must lie in [0, 1), got {amplitude}"
            )));
        }
        Ok(Self {
            kind: ManifoldKind::PerturbedTorus,
            dim: n,
            curvature_param: 0.0,
            lattice: Some(lattice),
            shape_params: vec![amplitude],
            scale: 1.0,
            periods: vec![Some(1.0); n],
            intervals: vec![(0.0, 1.0); n],
            ball: None,
        })
    }

    pub fn ellipsoid(a: f64, b: f64, c: f64) -> Result<Self> {
        for (name, v) in [("a", a), ("b", b), ("c", c)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInputs(format!(
                    "ellipsoid semi-axis {name} must be positive, got {v}"
                )));
            }
        }
        Ok(Self {
            kind: ManifoldKind::Ellipsoid,
            dim: 2,
            curvature_param: 0.0,
            lattice: None,
            shape_params: vec![a, b, c],
            scale: 1.0,
            periods: vec![None, Some(std::f64::consts::TAU)],
            intervals: vec![
                (POLE_BAND, std::f64::consts::PI - POLE_BAND),
                (0.0, std::f64::consts::TAU),
            ],
            ball: None,
        })
    }

    pub fn revolution(big_r: f64, small_r: f64) -> Result<Self> {
        if !(big_r > small_r) || !(small_r > 0.0) {
            return Err(Error::InvalidInputs(format!(
                "revolution torus needs R > r > 0, got R={big_r}, r={small_r}"
            )));
        }
        Ok(Self {
            kind: ManifoldKind::Revolution,
            dim: 2,
            curvature_param: 0.0,
            lattice: None,
            shape_params: vec![big_r, small_r],
            scale: 1.0,
            periods: vec![Some(std::f64::consts::TAU), Some(std::f64::consts::TAU)],
            intervals: vec![(0.0, std::f64::consts::TAU), (0.0, std::f64::consts::TAU)],
            ball: None,
        })
    }

    /// Replace the metric g by `c^2 g`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidInputs(format!(
                "metric scale must be positive, got {c}"
            )));
        }
        let mut m = self.clone();
        m.scale *= c;
        Ok(m)
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn curvature_param(&self) -> f64 {
        self.curvature_param
    }

    pub fn shape_params(&self) -> &[f64] {
        &self.shape_params
    }

    pub fn lattice(&self) -> Option<&DeckLattice> {
        self.lattice.as_ref()
    }

    // ------------------------------------------------------------------
    // Chart domain handling
    // ------------------------------------------------------------------

    /// Normalize wrapped coordinates into their fundamental interval.
    pub fn wrap(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        for i in 0..self.dim {
            if let Some(p) = self.periods[i] {
                out[i] = out[i].rem_euclid(p);
            }
        }
        out
    }

    /// Coordinate difference `b - a` with each wrapped coordinate reduced to
    /// its shortest representative.
    pub fn chart_diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = b - a;
        for i in 0..self.dim {
            if let Some(p) = self.periods[i] {
                d[i] -= p * (d[i] / p).round();
            }
        }
        d
    }

    /// Check that `x` is inside the chart domain (wrapped coordinates are
    /// normalized first).
    pub fn check_domain(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InvalidInputs(format!(
                "point has {} coordinates, manifold has dimension {}",
                x.len(),
                self.dim
            )));
        }
        for i in 0..self.dim {
            if self.periods[i].is_some() {
                continue;
            }
            let (lo, hi) = self.intervals[i];
            let v = x[i];
            if !v.is_finite() || v < lo || v > hi {
                let singular = matches!(
                    self.kind,
                    ManifoldKind::Sphere | ManifoldKind::Ellipsoid
                );
                return Err(if singular {
                    Error::CoordinateSingularity(format!(
                        "coordinate {i} = {v:.6} outside [{lo:.6}, {hi:.6}]"
                    ))
                } else {
                    Error::PointOutsideChart(format!(
                        "coordinate {i} = {v:.6} outside [{lo:.6}, {hi:.6}]"
                    ))
                });
            }
        }
        if let Some(r) = self.ball {
            let norm = x.norm();
            if norm >= r {
                return Err(Error::CoordinateSingularity(format!(
                    "|x| = {norm:.8} reaches the chart ball boundary {r:.8}"
                )));
            }
        }
        Ok(())
    }

    pub fn point(&self, coords: Vec<f64>) -> Result<ChartPoint> {
        let x = self.wrap(&DVector::from_vec(coords));
        self.check_domain(&x)?;
        Ok(ChartPoint::from_vector(x))
    }

    // ------------------------------------------------------------------
    // Metric, connection, curvature
    // ------------------------------------------------------------------

    /// Metric matrix at `p`, including the global scale factor.
    pub fn metric_at(&self, p: &ChartPoint) -> Result<DMatrix<f64>> {
        self.check_domain(&p.x)?;
        let s2 = self.scale * self.scale;
        let n = self.dim;
        let g = match self.kind {
            ManifoldKind::Euclidean => DMatrix::identity(n, n),
            ManifoldKind::Sphere => {
                let r2 = 1.0 / self.curvature_param;
                let mut g = DMatrix::zeros(n, n);
                let mut prod = 1.0;
                for i in 0..n {
                    g[(i, i)] = r2 * prod;
                    if i < n - 1 {
                        let s = p.x[i].sin();
                        prod *= s * s;
                    }
                }
                g
            }
            ManifoldKind::Hyperbolic => {
                let a2 = -self.curvature_param;
                let f = 2.0 / (a2.sqrt() * (1.0 - p.x.norm_squared()));
                DMatrix::identity(n, n) * (f * f)
            }
            ManifoldKind::FlatTorus => self.lattice.as_ref().unwrap().gram().clone(),
            ManifoldKind::PerturbedTorus => {
                let lambda = self.conformal_factor(&p.x);
                self.lattice.as_ref().unwrap().gram() * lambda
            }
            ManifoldKind::Ellipsoid | ManifoldKind::Revolution => {
                let (_, dx, _) = self.embedding_jet2(&p.x);
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        g[(i, j)] = dx[i].dot(&dx[j]);
                    }
                }
                g
            }
        };
        Ok(g * s2)
    }

    fn conformal_factor(&self, x: &DVector<f64>) -> f64 {
        let a = self.shape_params[0];
        1.0 + a * (std::f64::consts::TAU * x[0]).sin()
    }

    /// Embedding value plus first and second derivatives for the embedded
    /// surfaces. Everything is closed form; the metric derivatives follow
    /// exactly from these, so no numerical differentiation of g is involved.
    fn embedding_jet2(&self, x: &DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>, Vec<Vec<DVector<f64>>>) {
        match self.kind {
            ManifoldKind::Ellipsoid => {
                let (a, b, c) = (
                    self.shape_params[0],
                    self.shape_params[1],
                    self.shape_params[2],
                );
                let (th, ph) = (x[0], x[1]);
                let (st, ct) = th.sin_cos();
                let (sp, cp) = ph.sin_cos();
                let val = DVector::from_vec(vec![a * st * cp, b * st * sp, c * ct]);
                let d_th = DVector::from_vec(vec![a * ct * cp, b * ct * sp, -c * st]);
                let d_ph = DVector::from_vec(vec![-a * st * sp, b * st * cp, 0.0]);
                let d_thth = DVector::from_vec(vec![-a * st * cp, -b * st * sp, -c * ct]);
                let d_thph = DVector::from_vec(vec![-a * ct * sp, b * ct * cp, 0.0]);
                let d_phph = DVector::from_vec(vec![-a * st * cp, -b * st * sp, 0.0]);
                (
                    val,
                    vec![d_th, d_ph],
                    vec![vec![d_thth, d_thph.clone()], vec![d_thph, d_phph]],
                )
            }
            ManifoldKind::Revolution => {
                let (big_r, r) = (self.shape_params[0], self.shape_params[1]);
                let (u, v) = (x[0], x[1]);
                let (su, cu) = u.sin_cos();
                let (sv, cv) = v.sin_cos();
                let w = big_r + r * cu;
                let val = DVector::from_vec(vec![w * cv, w * sv, r * su]);
                let d_u = DVector::from_vec(vec![-r * su * cv, -r * su * sv, r * cu]);
                let d_v = DVector::from_vec(vec![-w * sv, w * cv, 0.0]);
                let d_uu = DVector::from_vec(vec![-r * cu * cv, -r * cu * sv, -r * su]);
                let d_uv = DVector::from_vec(vec![r * su * sv, -r * su * cv, 0.0]);
                let d_vv = DVector::from_vec(vec![-w * cv, -w * sv, 0.0]);
                (
                    val,
                    vec![d_u, d_v],
                    vec![vec![d_uu, d_uv.clone()], vec![d_uv, d_vv]],
                )
            }
            _ => unreachable!("embedding_jet2 is only defined for embedded surfaces"),
        }
    }

    /// Analytic metric derivatives `dg[k][(i, j)] = d g_ij / d x_k`
    /// (without the global scale factor; the scale cancels in the
    /// connection coefficients anyway).
    fn metric_derivatives(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.dim;
        match self.kind {
            ManifoldKind::Euclidean | ManifoldKind::FlatTorus => {
                vec![DMatrix::zeros(n, n); n]
            }
            ManifoldKind::Sphere => {
                let r2 = 1.0 / self.curvature_param;
                let mut dg = vec![DMatrix::zeros(n, n); n];
                // g_ii = r^2 prod_{j<i} sin^2 x_j
                for i in 0..n {
                    let mut prod = r2;
                    for j in 0..i {
                        let s = x[j].sin();
                        prod *= s * s;
                    }
                    for (k, dgk) in dg.iter_mut().enumerate().take(i) {
                        // derivative w.r.t. x_k replaces sin^2 x_k by 2 sin cos
                        let s = x[k].sin();
                        if s.abs() < 1e-300 {
                            continue;
                        }
                        dgk[(i, i)] = prod * 2.0 * x[k].cos() / s;
                    }
                }
                dg
            }
            ManifoldKind::Hyperbolic => {
                let a2 = -self.curvature_param;
                let q = 1.0 - x.norm_squared();
                let f2 = 4.0 / (a2 * q * q);
                let mut dg = vec![DMatrix::zeros(n, n); n];
                for (k, dgk) in dg.iter_mut().enumerate() {
                    let factor = f2 * 4.0 * x[k] / q;
                    for i in 0..n {
                        dgk[(i, i)] = factor;
                    }
                }
                dg
            }
            ManifoldKind::PerturbedTorus => {
                let gram = self.lattice.as_ref().unwrap().gram();
                let a = self.shape_params[0];
                let dlambda = a * std::f64::consts::TAU * (std::f64::consts::TAU * x[0]).cos();
                let mut dg = vec![DMatrix::zeros(n, n); n];
                dg[0] = gram * dlambda;
                dg
            }
            ManifoldKind::Ellipsoid | ManifoldKind::Revolution => {
                let (_, dx, d2x) = self.embedding_jet2(x);
                let mut dg = vec![DMatrix::zeros(n, n); n];
                for (k, dgk) in dg.iter_mut().enumerate() {
                    for i in 0..n {
                        for j in 0..n {
                            dgk[(i, j)] = d2x[k][i].dot(&dx[j]) + dx[i].dot(&d2x[k][j]);
                        }
                    }
                }
                dg
            }
        }
    }

    /// Connection coefficients at `p` (invariant under the global scale).
    pub fn christoffel_at(&self, p: &ChartPoint) -> Result<Christoffels> {
        self.check_domain(&p.x)?;
        let n = self.dim;
        match self.kind {
            ManifoldKind::Euclidean | ManifoldKind::FlatTorus => Ok(Christoffels::zeros(n)),
            _ => {
                let dg = self.metric_derivatives(&p.x);
                let g = self.unscaled_metric(&p.x);
                let g_inv = g.clone().try_inverse().ok_or_else(|| {
                    Error::CoordinateSingularity("metric not invertible at point".into())
                })?;
                let mut ch = Christoffels::zeros(n);
                for k in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += g_inv[(k, l)]
                                    * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                            }
                            ch.gamma[k][(i, j)] = 0.5 * s;
                        }
                    }
                }
                Ok(ch)
            }
        }
    }

    fn unscaled_metric(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = ChartPoint::from_vector(x.clone());
        let g = self
            .metric_at(&p)
            .expect("caller checked the domain already");
        g / (self.scale * self.scale)
    }

    /// Finite-difference connection coefficients from the metric alone.
    /// Slower and less accurate than `christoffel_at`; kept as an
    /// independent cross-check.
    pub fn christoffel_fd(&self, p: &ChartPoint, h: f64) -> Result<Christoffels> {
        self.check_domain(&p.x)?;
        let n = self.dim;
        let mut dg = Vec::with_capacity(n);
        for k in 0..n {
            let mut xp = p.x.clone();
            let mut xm = p.x.clone();
            xp[k] += h;
            xm[k] -= h;
            let gp = self.metric_at(&ChartPoint::from_vector(self.wrap(&xp)))?;
            let gm = self.metric_at(&ChartPoint::from_vector(self.wrap(&xm)))?;
            dg.push((gp - gm) / (2.0 * h));
        }
        let g = self.metric_at(p)?;
        let g_inv = g
            .try_inverse()
            .ok_or_else(|| Error::CoordinateSingularity("metric not invertible".into()))?;
        let mut ch = Christoffels::zeros(n);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += g_inv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    ch.gamma[k][(i, j)] = 0.5 * s;
                }
            }
        }
        Ok(ch)
    }

    /// Curvature tensor at `p` with one index raised. Space forms use the
    /// constant-curvature closed form; embedded surfaces and the perturbed
    /// torus differentiate the analytic connection coefficients centrally.
    pub fn curvature_at(&self, p: &ChartPoint) -> Result<Riemann> {
        self.check_domain(&p.x)?;
        let n = self.dim;
        match self.kind {
            ManifoldKind::Euclidean | ManifoldKind::FlatTorus => Ok(Riemann::zeros(n)),
            ManifoldKind::Sphere | ManifoldKind::Hyperbolic => {
                let k_eff = self.curvature_param / (self.scale * self.scale);
                let g = self.metric_at(p)?;
                let mut r = Riemann::zeros(n);
                for i in 0..n {
                    for j in 0..n {
                        for kk in 0..n {
                            for l in 0..n {
                                let di = if l == i { 1.0 } else { 0.0 };
                                let dj = if l == j { 1.0 } else { 0.0 };
                                r.set(
                                    i,
                                    j,
                                    kk,
                                    l,
                                    k_eff * (g[(j, kk)] * di - g[(i, kk)] * dj),
                                );
                            }
                        }
                    }
                }
                Ok(r)
            }
            ManifoldKind::PerturbedTorus | ManifoldKind::Ellipsoid | ManifoldKind::Revolution => {
                let h = 1e-4;
                let mut dch = Vec::with_capacity(n);
                for k in 0..n {
                    let mut xp = p.x.clone();
                    let mut xm = p.x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let cp = self.christoffel_at(&ChartPoint::from_vector(self.wrap(&xp)))?;
                    let cm = self.christoffel_at(&ChartPoint::from_vector(self.wrap(&xm)))?;
                    let diff: Vec<DMatrix<f64>> = cp
                        .gamma
                        .iter()
                        .zip(cm.gamma.iter())
                        .map(|(a, b)| (a - b) / (2.0 * h))
                        .collect();
                    dch.push(diff);
                }
                let ch = self.christoffel_at(p)?;
                let mut r = Riemann::zeros(n);
                for i in 0..n {
                    for j in 0..n {
                        for kk in 0..n {
                            for l in 0..n {
                                // R^l_{ijk} = d_i G^l_{jk} - d_j G^l_{ik}
                                //           + G^l_{im} G^m_{jk} - G^l_{jm} G^m_{ik}
                                let mut v = dch[i][l][(j, kk)] - dch[j][l][(i, kk)];
                                for m in 0..n {
                                    v += ch.gamma[l][(i, m)] * ch.gamma[m][(j, kk)]
                                        - ch.gamma[l][(j, m)] * ch.gamma[m][(i, kk)];
                                }
                                r.set(i, j, kk, l, v);
                            }
                        }
                    }
                }
                Ok(r)
            }
        }
    }

    /// Sectional curvature of the plane spanned by `u`, `v` at `p`.
    pub fn sectional_curvature(
        &self,
        p: &ChartPoint,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<f64> {
        let g = self.metric_at(p)?;
        let r = self.curvature_at(p)?;
        let ruvv = r.apply(u, v, v);
        let num = (u.transpose() * &g * &ruvv)[(0, 0)];
        let uu = (u.transpose() * &g * u)[(0, 0)];
        let vv = (v.transpose() * &g * v)[(0, 0)];
        let uv = (u.transpose() * &g * v)[(0, 0)];
        let den = uu * vv - uv * uv;
        if den.abs() < 1e-14 {
            return Err(Error::InvalidInputs(
                "sectional curvature of a degenerate plane".into(),
            ));
        }
        Ok(num / den)
    }

    // ------------------------------------------------------------------
    // Inner products and frames
    // ------------------------------------------------------------------

    pub fn inner(&self, p: &ChartPoint, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        let g = self.metric_at(p)?;
        Ok((u.transpose() * g * v)[(0, 0)])
    }

    pub fn norm(&self, p: &ChartPoint, u: &DVector<f64>) -> Result<f64> {
        Ok(self.inner(p, u, u)?.max(0.0).sqrt())
    }

    /// Angle between tangent vectors, in [0, pi].
    pub fn angle_between(
        &self,
        p: &ChartPoint,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<f64> {
        let g = self.metric_at(p)?;
        let uu = (u.transpose() * &g * u)[(0, 0)];
        let vv = (v.transpose() * &g * v)[(0, 0)];
        let uv = (u.transpose() * &g * v)[(0, 0)];
        let den = (uu * vv).sqrt();
        if den < 1e-300 {
            return Err(Error::InvalidInputs("angle with a zero vector".into()));
        }
        Ok((uv / den).clamp(-1.0, 1.0).acos())
    }

    pub fn metric_cholesky(&self, p: &ChartPoint) -> Result<Cholesky<f64, Dyn>> {
        let g = self.metric_at(p)?;
        Cholesky::new(g).ok_or_else(|| {
            Error::CoordinateSingularity("metric is not positive definite at point".into())
        })
    }

    /// Columns form a g-orthonormal frame at `p`.
    pub fn orthonormal_frame(&self, p: &ChartPoint) -> Result<DMatrix<f64>> {
        let chol = self.metric_cholesky(p)?;
        let n = self.dim;
        // E = L^{-T}: solve L^T E = I.
        let lt = chol.l().transpose();
        let mut e = DMatrix::identity(n, n);
        if !lt.solve_upper_triangular_mut(&mut e) {
            return Err(Error::CoordinateSingularity(
                "metric factor is singular at point".into(),
            ));
        }
        Ok(e)
    }

    /// Map a tangent vector to its components in the orthonormal frame.
    pub fn to_frame(&self, p: &ChartPoint, u: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.metric_cholesky(p)?;
        Ok(chol.l().transpose() * u)
    }

    pub fn sqrt_det_metric(&self, p: &ChartPoint) -> Result<f64> {
        let chol = self.metric_cholesky(p)?;
        Ok(chol.l().diagonal().iter().product())
    }

    // ------------------------------------------------------------------
    // Model distances and embeddings
    // ------------------------------------------------------------------

    /// Unit-radius embedding of a sphere chart point.
    pub fn sphere_embedding(&self, p: &ChartPoint) -> DVector<f64> {
        let n = self.dim;
        let mut u = DVector::zeros(n + 1);
        let mut prod = 1.0;
        for i in 0..n {
            u[i] = prod * p.x[i].cos();
            prod *= p.x[i].sin();
        }
        u[n] = prod;
        u
    }

    /// Chart coordinates of a unit embedding vector (sphere only).
    pub fn sphere_chart_of(&self, u: &DVector<f64>) -> ChartPoint {
        let n = self.dim;
        let mut x = DVector::zeros(n);
        for i in 0..n - 1 {
            let tail: f64 = (i + 1..=n).map(|j| u[j] * u[j]).sum::<f64>().sqrt();
            // Colatitude with cos x_i = u_i / r_i; tail >= 0 keeps it in [0, pi].
            x[i] = tail.atan2(u[i]);
        }
        x[n - 1] = u[n].atan2(u[n - 1]).rem_euclid(std::f64::consts::TAU);
        ChartPoint::from_vector(x)
    }

    /// Closed-form distance where the model space has one. Errors with
    /// `UnsupportedManifold` for the embedded surfaces.
    pub fn model_distance(&self, p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
        self.check_domain(&p.x)?;
        self.check_domain(&q.x)?;
        let d = match self.kind {
            ManifoldKind::Euclidean => (&q.x - &p.x).norm(),
            ManifoldKind::Sphere => {
                let u = self.sphere_embedding(p);
                let v = self.sphere_embedding(q);
                let radius = 1.0 / self.curvature_param.sqrt();
                radius * u.dot(&v).clamp(-1.0, 1.0).acos()
            }
            ManifoldKind::Hyperbolic => {
                let a = (-self.curvature_param).sqrt();
                let num = 2.0 * (&q.x - &p.x).norm_squared();
                let den = (1.0 - p.x.norm_squared()) * (1.0 - q.x.norm_squared());
                (1.0 + num / den).acosh() / a
            }
            ManifoldKind::FlatTorus => {
                let delta = self.chart_diff(&p.x, &q.x);
                let lattice = self.lattice.as_ref().unwrap();
                lattice
                    .minimal_translates(&delta, 0.0)
                    .first()
                    .map(|(_, l)| *l)
                    .unwrap_or(0.0)
            }
            _ => {
                return Err(Error::UnsupportedManifold(format!(
                    "{:?} has no closed-form distance",
                    self.kind
                )))
            }
        };
        Ok(d * self.scale)
    }

    /// Fast distance estimate available on every kind: exact where a model
    /// formula exists, straight-segment quadrature elsewhere. The perturbed
    /// torus value is accurate to O(amplitude^2); the embedded surfaces get
    /// a chart-segment upper bound useful only for seeding solvers.
    pub fn quick_distance(&self, p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
        match self.kind {
            ManifoldKind::PerturbedTorus => {
                let lattice = self.lattice.as_ref().unwrap();
                let a = self.shape_params[0];
                let delta = self.chart_diff(&p.x, &q.x);
                let translates = lattice.minimal_translates(&delta, 4.0 * a + 1e-9);
                let mut best = f64::INFINITY;
                for (k, flat_len) in &translates {
                    let shifted =
                        DVector::from_fn(self.dim, |i, _| delta[i] + k[i] as f64);
                    let mut quad = 0.0;
                    // 16-node Gauss-Legendre on [0, 1] via 8-node symmetric pairs.
                    for (t, w) in gauss16() {
                        let u0 = p.x[0] + t * shifted[0];
                        let lambda = 1.0 + a * (std::f64::consts::TAU * u0).sin();
                        quad += w * lambda.max(0.0).sqrt();
                    }
                    let len = quad * flat_len;
                    if len < best {
                        best = len;
                    }
                }
                Ok(best * self.scale)
            }
            ManifoldKind::Ellipsoid | ManifoldKind::Revolution => {
                let delta = self.chart_diff(&p.x, &q.x);
                let mut quad = 0.0;
                for (t, w) in gauss16() {
                    let x = self.wrap(&(&p.x + &delta * t));
                    let g = self.metric_at(&ChartPoint::from_vector(x))?;
                    quad += w * (delta.transpose() * g * &delta)[(0, 0)].max(0.0).sqrt();
                }
                Ok(quad)
            }
            _ => self.model_distance(p, q),
        }
    }

    // ------------------------------------------------------------------
    // Sampling
    // ------------------------------------------------------------------

    /// Center of the preferred sampling region: an equator point for charts
    /// with poles, the origin or domain center otherwise.
    pub fn sampling_center(&self) -> ChartPoint {
        let n = self.dim;
        let x = match self.kind {
            ManifoldKind::Euclidean | ManifoldKind::Hyperbolic => DVector::zeros(n),
            ManifoldKind::Sphere => {
                let mut x = DVector::from_element(n, std::f64::consts::FRAC_PI_2);
                x[n - 1] = 0.0;
                x
            }
            ManifoldKind::FlatTorus | ManifoldKind::PerturbedTorus => {
                DVector::from_element(n, 0.5)
            }
            ManifoldKind::Ellipsoid => {
                DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 0.0])
            }
            ManifoldKind::Revolution => DVector::zeros(2),
        };
        ChartPoint::from_vector(x)
    }

    /// Box from which free points are drawn.
    pub fn sampling_box(&self) -> Vec<(f64, f64)> {
        match self.kind {
            ManifoldKind::Euclidean => vec![(-1.0, 1.0); self.dim],
            ManifoldKind::Hyperbolic => vec![(-0.55, 0.55); self.dim],
            ManifoldKind::Sphere | ManifoldKind::Ellipsoid => {
                let mut b = vec![(0.35, std::f64::consts::PI - 0.35); self.dim];
                b[self.dim - 1] = (0.0, std::f64::consts::TAU);
                b
            }
            ManifoldKind::FlatTorus | ManifoldKind::PerturbedTorus => {
                vec![(0.0, 1.0); self.dim]
            }
            ManifoldKind::Revolution => vec![(0.0, std::f64::consts::TAU); 2],
        }
    }

    /// Uniform draw from the sampling box (rejecting the ball boundary).
    pub fn sample_point(&self, rng: &mut ChaCha8Rng) -> ChartPoint {
        let boxes = self.sampling_box();
        loop {
            let x = DVector::from_fn(self.dim, |i, _| rng.gen_range(boxes[i].0..boxes[i].1));
            if self.check_domain(&x).is_ok() {
                return ChartPoint::from_vector(x);
            }
        }
    }

    /// Draw a point of the chart ball of radius `r` around `center`: a
    /// uniform vector of the unit ball is pushed through the orthonormal
    /// frame at the center, so the construction commutes exactly with
    /// uniform metric scaling.
    pub fn sample_chart_ball(
        &self,
        center: &ChartPoint,
        r: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ChartPoint> {
        let frame = self.orthonormal_frame(center)?;
        for _ in 0..256 {
            let delta = sample_unit_ball(self.dim, rng);
            let x = self.wrap(&(&center.x + &frame * delta * r));
            if self.check_domain(&x).is_ok() {
                return Ok(ChartPoint::from_vector(x));
            }
        }
        Err(Error::SamplingBudgetExceeded(format!(
            "chart ball of radius {r:.4} does not fit in the domain"
        )))
    }

    // ------------------------------------------------------------------
    // Identifier strings
    // ------------------------------------------------------------------

    pub fn id(&self) -> String {
        let scale_suffix = if (self.scale - 1.0).abs() > 0.0 {
            format!(",scale={}", fmt_f64(self.scale))
        } else {
            String::new()
        };
        match self.kind {
            ManifoldKind::Euclidean => format!("euclidean:n={}{}", self.dim, scale_suffix),
            ManifoldKind::Sphere => format!(
                "sphere:n={},K={}{}",
                self.dim,
                fmt_f64(self.curvature_param),
                scale_suffix
            ),
            ManifoldKind::Hyperbolic => format!(
                "hyperbolic:n={},K={}{}",
                self.dim,
                fmt_f64(self.curvature_param),
                scale_suffix
            ),
            ManifoldKind::FlatTorus => format!(
                "torus:basis={}{}",
                fmt_basis(self.lattice.as_ref().unwrap()),
                scale_suffix
            ),
            ManifoldKind::PerturbedTorus => format!(
                "ptorus:basis={},amp={}{}",
                fmt_basis(self.lattice.as_ref().unwrap()),
                fmt_f64(self.shape_params[0]),
                scale_suffix
            ),
            ManifoldKind::Ellipsoid => format!(
                "ellipsoid:a={},b={},c={}{}",
                fmt_f64(self.shape_params[0]),
                fmt_f64(self.shape_params[1]),
                fmt_f64(self.shape_params[2]),
                scale_suffix
            ),
            ManifoldKind::Revolution => format!(
                "revolution:R={},r={}{}",
                fmt_f64(self.shape_params[0]),
                fmt_f64(self.shape_params[1]),
                scale_suffix
            ),
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        let (kind, rest) = id
            .split_once(':')
            .ok_or_else(|| Error::ConfigInvalid(format!("manifold id '{id}' has no ':'")))?;
        let mut kv = std::collections::BTreeMap::new();
        for part in split_top_level(rest) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::ConfigInvalid(format!("manifold id field '{part}' is not key=value"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let scale = match kv.get("scale") {
            Some(s) => parse_f64(s)?,
            None => 1.0,
        };
        let get_f = |key: &str| -> Result<f64> {
            kv.get(key)
                .ok_or_else(|| Error::ConfigInvalid(format!("manifold id misses '{key}'")))
                .and_then(|s| parse_f64(s))
        };
        let m = match kind.trim() {
            "euclidean" => Self::euclidean(get_f("n")? as usize)?,
            "sphere" => Self::sphere(get_f("n")? as usize, get_f("K")?)?,
            "hyperbolic" => Self::hyperbolic(get_f("n")? as usize, get_f("K")?)?,
            "torus" => Self::flat_torus(parse_basis(kv.get("basis").ok_or_else(|| {
                Error::ConfigInvalid("torus id misses 'basis'".into())
            })?)?)?,
            "ptorus" => Self::perturbed_torus(
                parse_basis(kv.get("basis").ok_or_else(|| {
                    Error::ConfigInvalid("ptorus id misses 'basis'".into())
                })?)?,
                get_f("amp")?,
            )?,
            "ellipsoid" => Self::ellipsoid(get_f("a")?, get_f("b")?, get_f("c")?)?,
            "revolution" => Self::revolution(get_f("R")?, get_f("r")?)?,
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "unknown manifold kind '{other}'"
                )))
            }
        };
        m.scaled(scale)
    }
}

fn check_dim(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidInputs(format!(
            "manifold dimension must be at least 2, got {n}"
        )));
    }
    if n > 16 {
        return Err(Error::InvalidInputs(format!(
            "manifold dimension {n} is past the supported range"
        )));
    }
    Ok(())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::ConfigInvalid(format!("'{s}' is not a number")))
}

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn fmt_basis(lattice: &DeckLattice) -> String {
    let b = lattice.basis();
    let rows: Vec<String> = (0..b.nrows())
        .map(|i| {
            let cells: Vec<String> = (0..b.ncols()).map(|j| fmt_f64(b[(i, j)])).collect();
            format!("[{}]", cells.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}

fn parse_basis(s: &str) -> Result<DeckLattice> {
    let value: serde_json::Value = serde_json::from_str(s)
        .map_err(|e| Error::ConfigInvalid(format!("basis '{s}' is not a matrix: {e}")))?;
    let rows = value
        .as_array()
        .ok_or_else(|| Error::ConfigInvalid(format!("basis '{s}' is not an array")))?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let cells = row
            .as_array()
            .ok_or_else(|| Error::ConfigInvalid(format!("basis row '{row}' is not an array")))?;
        let mut r = Vec::with_capacity(cells.len());
        for c in cells {
            r.push(c.as_f64().ok_or_else(|| {
                Error::ConfigInvalid(format!("basis entry '{c}' is not a number"))
            })?);
        }
        out.push(r);
    }
    DeckLattice::from_rows(&out)
}

/// Split on commas that are not nested inside brackets.
fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' | '(' => {
                depth += 1;
                cur.push(ch);
            }
            ']' | ')' => {
                depth = depth.saturating_sub(1);
                cur.push(ch);
            }
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
            }
            _ => cur.push(ch),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Uniform sample of the unit ball via Box-Muller direction and radial CDF.
pub(crate) fn sample_unit_ball(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    let mut i = 0;
    while i < n {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (-2.0 * u1.ln()).sqrt();
        v[i] = r * u2.cos();
        i += 1;
        if i < n {
            v[i] = r * u2.sin();
            i += 1;
        }
    }
    let norm = v.norm().max(1e-300);
    let radius: f64 = rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64);
    v * (radius / norm)
}

/// 16-node Gauss-Legendre rule on [0, 1].
fn gauss16() -> [(f64, f64); 16] {
    // Abscissae/weights for [-1, 1], mapped to [0, 1].
    const X: [f64; 8] = [
        0.0950125098376374,
        0.2816035507792589,
        0.4580167776572274,
        0.6178762444026438,
        0.7554044083550030,
        0.8656312023878318,
        0.9445750230732326,
        0.9894009349916499,
    ];
    const W: [f64; 8] = [
        0.1894506104550685,
        0.1826034150449236,
        0.1691565193950025,
        0.1495959888165767,
        0.1246289712555339,
        0.0951585116824928,
        0.0622535239386479,
        0.0271524594117541,
    ];
    let mut out = [(0.0, 0.0); 16];
    for i in 0..8 {
        out[2 * i] = (0.5 * (1.0 - X[i]), 0.5 * W[i]);
        out[2 * i + 1] = (0.5 * (1.0 + X[i]), 0.5 * W[i]);
    }
    out
}
