//! Coupled nets on a pair of manifolds and the near-isometry built from
//! them: a bump embedding of the target into `R^S`, an averaged-distance
//! map of the source into the same space, nearest-point projection onto
//! the embedded image, and measurement helpers (submersion check, angle
//! transfer) for the composite map.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesic::{self, GeodesicPath};
use crate::manifold::{ChartPoint, ManifoldKind, ManifoldSpec};
use crate::rng::{derive_indexed_seed, derive_seed, rng_from_seed};

/// Monte Carlo points per quadrature ball.
pub const BALL_SAMPLES: usize = 256;

/// Density target for the coupled nets, as a multiple of the separation.
pub const DENSITY_FACTOR: f64 = 7.0;

/// Abscissas and weights of 8-node Gauss-Legendre quadrature on [0, 1].
const GL8: [(f64, f64); 8] = [
    (0.019855071751231884, 0.05061426814518813),
    (0.10166676129318664, 0.11119051722668724),
    (0.2372337950418355, 0.15685332293894364),
    (0.40828267875217505, 0.18134189168918099),
    (0.591717321247825, 0.18134189168918099),
    (0.7627662049581645, 0.15685332293894364),
    (0.8983332387068134, 0.11119051722668724),
    (0.9801449282487682, 0.05061426814518813),
];

// ---------------------------------------------------------------------------
// Cross distances
// ---------------------------------------------------------------------------

/// Distance between a point of the source manifold and a point of the
/// target, extending the two internal metrics to the disjoint union.
#[derive(Debug, Clone)]
pub enum CrossDistance {
    /// Charts are identified pointwise; the cross distance is the target
    /// distance after identification plus half the distortion allowance.
    IdentityChart { gap: f64 },
    /// Distance routed through a fixed list of anchor pairs:
    /// `min_k d_M(x, a_k) + link + d_N(b_k, y)`.
    GraphDistance {
        anchors: Vec<(ChartPoint, ChartPoint)>,
        link: f64,
    },
}

impl CrossDistance {
    pub fn identity_chart(gap: f64) -> Result<Self> {
        if !(gap >= 0.0) || !gap.is_finite() {
            return Err(Error::ArgumentOutOfRange(format!(
                "distortion allowance {gap} must be finite and nonnegative"
            )));
        }
        Ok(CrossDistance::IdentityChart { gap })
    }

    pub fn graph_distance(anchors: Vec<(ChartPoint, ChartPoint)>, link: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::ArgumentOutOfRange(
                "graph cross distance needs at least one anchor pair".into(),
            ));
        }
        if !(link >= 0.0) || !link.is_finite() {
            return Err(Error::ArgumentOutOfRange(format!(
                "link length {link} must be finite and nonnegative"
            )));
        }
        Ok(CrossDistance::GraphDistance { anchors, link })
    }

    /// Resolve a config name. `graph-distance` lays a deterministic
    /// `per_side^dim` grid of chart-identified anchors.
    pub fn from_name(
        name: &str,
        gap: f64,
        m: &ManifoldSpec,
        n: &ManifoldSpec,
        per_side: usize,
    ) -> Result<Self> {
        match name {
            "identity-chart" => Self::identity_chart(gap),
            "graph-distance" => {
                let mut anchors = Vec::new();
                let mut idx = vec![0usize; m.dim()];
                loop {
                    let coords: Vec<f64> =
                        idx.iter().map(|&i| (i as f64 + 0.5) / per_side as f64).collect();
                    let x = m.wrap(&DVector::from_vec(coords));
                    if m.check_domain(&x).is_ok() && n.check_domain(&x).is_ok() {
                        anchors.push((
                            ChartPoint::from_vector(x.clone()),
                            ChartPoint::from_vector(n.wrap(&x)),
                        ));
                    }
                    let mut k = 0;
                    while k < idx.len() {
                        idx[k] += 1;
                        if idx[k] < per_side {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                    if k == idx.len() {
                        break;
                    }
                }
                Self::graph_distance(anchors, gap)
            }
            other => Err(Error::ConfigInvalid(format!(
                "unknown cross distance {other:?}; expected identity-chart or graph-distance"
            ))),
        }
    }

    /// Cross distance between `x` in the source and `y` in the target.
    pub fn eval(
        &self,
        m: &ManifoldSpec,
        n: &ManifoldSpec,
        x: &ChartPoint,
        y: &ChartPoint,
    ) -> Result<f64> {
        match self {
            CrossDistance::IdentityChart { gap } => {
                let image = ChartPoint::from_vector(n.wrap(&x.x));
                n.check_domain(&image.x)?;
                Ok(coupling_distance(n, &image, y)? + 0.5 * gap)
            }
            CrossDistance::GraphDistance { anchors, link } => {
                let mut best = f64::INFINITY;
                for (a, b) in anchors {
                    let d = coupling_distance(m, x, a)? + link + coupling_distance(n, b, y)?;
                    best = best.min(d);
                }
                Ok(best)
            }
        }
    }

    /// Cheap candidate partner for a source point, when the coupling has one.
    fn partner_hint(&self, n: &ManifoldSpec, x: &ChartPoint) -> Option<ChartPoint> {
        match self {
            CrossDistance::IdentityChart { .. } => {
                let image = n.wrap(&x.x);
                n.check_domain(&image).ok()?;
                Some(ChartPoint::from_vector(image))
            }
            CrossDistance::GraphDistance { .. } => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Source-side distances
// ---------------------------------------------------------------------------

/// Distance on the source manifold, at coupling call volumes.
///
/// Every kind with a closed form defers to the geodesic module. The
/// perturbed torus is special-cased: its conformal factor is bounded in
/// [1-a, 1+a], so only lattice representatives within that length ratio of
/// the flat minimizer can compete, and over the short spans the coupling
/// needs (a few tenths of the unit cell) the straight representative is
/// within O((a d)^2 d) of the true geodesic. Quadrature of the conformal
/// weight along those segments is orders of magnitude cheaper than a
/// shooting solve and accurate well past the tolerances used here.
pub fn coupling_distance(m: &ManifoldSpec, x: &ChartPoint, y: &ChartPoint) -> Result<f64> {
    match m.kind() {
        // Allocation-free arm for rectangular tori; the per-coordinate
        // shortest representative is the global one when the Gram matrix
        // is diagonal.
        ManifoldKind::FlatTorus => {
            let gram = m.lattice().expect("torus carries its lattice").gram();
            let n = m.dim();
            let diagonal = (0..n)
                .all(|i| (0..n).all(|j| i == j || gram[(i, j)].abs() < 1e-12));
            if !diagonal {
                return geodesic::distance(m, x, y);
            }
            let mut d2 = 0.0;
            for i in 0..n {
                let mut di = (y.x[i] - x.x[i]).rem_euclid(1.0);
                if di > 0.5 {
                    di -= 1.0;
                }
                d2 += gram[(i, i)] * di * di;
            }
            Ok(d2.sqrt() * m.scale())
        }
        ManifoldKind::PerturbedTorus => {
            let lattice = m.lattice().expect("perturbed torus carries its lattice");
            let amp = m.shape_params()[0];
            let diff = m.chart_diff(&x.x, &y.x);
            if diff.norm() < 1e-15 {
                return Ok(0.0);
            }
            // Candidate representatives within the conformal length ratio.
            let slack = lattice.shortest_length()? * (2.0 * amp + 1e-6);
            let reps = lattice.minimal_translates(&diff, slack);
            let mut best = f64::INFINITY;
            for (k, _) in &reps {
                let rep = DVector::from_fn(diff.len(), |i, _| diff[i] + k[i] as f64);
                let flat = lattice.embed_real(&rep).norm();
                let mut len = 0.0;
                for (t, w) in GL8 {
                    let x0 = x.x[0] + t * rep[0];
                    let lambda = 1.0 + amp * (std::f64::consts::TAU * x0).sin();
                    len += w * lambda.sqrt();
                }
                best = best.min(len * flat * m.scale());
            }
            Ok(best)
        }
        _ => geodesic::distance(m, x, y),
    }
}

/// Lower bound factor: metric distance >= factor * shortest chart
/// representative norm. Zero when no such bound is available.
fn chart_norm_floor(m: &ManifoldSpec) -> f64 {
    match m.kind() {
        ManifoldKind::FlatTorus | ManifoldKind::PerturbedTorus => {
            let gram = m.lattice().expect("torus carries its lattice").gram();
            let min_eig = gram
                .symmetric_eigenvalues()
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            let amp = if matches!(m.kind(), ManifoldKind::PerturbedTorus) {
                m.shape_params()[0]
            } else {
                0.0
            };
            (min_eig.max(0.0) * (1.0 - amp)).sqrt() * m.scale()
        }
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Coupling construction
// ---------------------------------------------------------------------------

/// Sampled verification data for the net invariants.
#[derive(Debug, Clone)]
pub struct CouplingReport {
    pub net_size: usize,
    pub max_pairing: f64,
    pub min_separation_m: f64,
    pub min_separation_n: f64,
    pub density_max_m: f64,
    pub density_max_n: f64,
    pub density_target: f64,
}

/// Paired separated nets on a coupled pair of manifolds.
#[derive(Debug, Clone)]
pub struct GHCoupling {
    pub m: ManifoldSpec,
    pub n: ManifoldSpec,
    pub cross: CrossDistance,
    pub epsilon: f64,
    pub net_m: Vec<ChartPoint>,
    pub net_n: Vec<ChartPoint>,
    pub report: CouplingReport,
}

impl GHCoupling {
    pub fn size(&self) -> usize {
        self.net_m.len()
    }
}

fn nearest_in_net(
    m: &ManifoldSpec,
    net: &[ChartPoint],
    x: &ChartPoint,
    floor: f64,
    cap: f64,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for p in net {
        if floor > 0.0 && floor * m.chart_diff(&x.x, &p.x).norm() > cap.min(best) {
            continue;
        }
        best = best.min(coupling_distance(m, x, p)?);
    }
    Ok(best)
}

/// Greedy maximal separated net on the source with partners on the target.
///
/// Candidates are accepted when they stay strictly `eps`-separated on both
/// sides and admit a partner with cross distance below `eps`; a separated
/// candidate with no such partner is a hard failure (the coupling cannot
/// be refined to this scale). Density on both sides is then verified by
/// probing and reported, not asserted.
pub fn build_coupling(
    m: &ManifoldSpec,
    n: &ManifoldSpec,
    cross: CrossDistance,
    eps: f64,
    seed: u64,
) -> Result<GHCoupling> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!(
            "net separation {eps} must be positive and finite"
        )));
    }
    let pool_size = ((24.0 / (eps * eps)).ceil() as usize).clamp(2_000, 20_000);
    let mut pool_rng = rng_from_seed(derive_seed(seed, "coupling-pool"));
    let floor_m = chart_norm_floor(m);
    let floor_n = chart_norm_floor(n);
    let mut partner_pool: Vec<ChartPoint> = Vec::new();
    if matches!(cross, CrossDistance::GraphDistance { .. }) {
        let mut rng = rng_from_seed(derive_seed(seed, "coupling-partner-pool"));
        partner_pool = (0..pool_size.min(4_000)).map(|_| n.sample_point(&mut rng)).collect();
    }

    let mut net_m: Vec<ChartPoint> = Vec::new();
    let mut net_n: Vec<ChartPoint> = Vec::new();
    let mut max_pairing: f64 = 0.0;
    for _ in 0..pool_size {
        let x = m.sample_point(&mut pool_rng);
        if nearest_in_net(m, &net_m, &x, floor_m, eps)? <= eps {
            continue;
        }
        let (partner, pair_d) = match cross.partner_hint(n, &x) {
            Some(y) => {
                let d = cross.eval(m, n, &x, &y)?;
                (y, d)
            }
            None => {
                let mut best: Option<(ChartPoint, f64)> = None;
                for y in &partner_pool {
                    let d = cross.eval(m, n, &x, y)?;
                    if best.as_ref().is_none_or(|(_, bd)| d < *bd) {
                        best = Some((y.clone(), d));
                    }
                }
                best.ok_or_else(|| Error::PairingFailure("empty partner pool".into()))?
            }
        };
        if pair_d >= eps {
            return Err(Error::PairingFailure(format!(
                "no partner within {eps} of a separated net point (best cross distance {pair_d:.6}); \
                 the coupling is too coarse for this scale"
            )));
        }
        if nearest_in_net(n, &net_n, &partner, floor_n, eps)? <= eps {
            continue;
        }
        net_m.push(x);
        net_n.push(partner);
        max_pairing = max_pairing.max(pair_d);
    }

    // Separation audit over the final nets.
    let mut min_separation_m = f64::INFINITY;
    let mut min_separation_n = f64::INFINITY;
    for i in 0..net_m.len() {
        for j in (i + 1)..net_m.len() {
            if floor_m == 0.0 || floor_m * m.chart_diff(&net_m[i].x, &net_m[j].x).norm() < 3.0 * eps
            {
                min_separation_m = min_separation_m.min(coupling_distance(m, &net_m[i], &net_m[j])?);
            }
            if floor_n == 0.0 || floor_n * n.chart_diff(&net_n[i].x, &net_n[j].x).norm() < 3.0 * eps
            {
                min_separation_n = min_separation_n.min(coupling_distance(n, &net_n[i], &net_n[j])?);
            }
        }
    }

    // Density probes.
    let mut probe_rng = rng_from_seed(derive_seed(seed, "coupling-probes"));
    let mut density_max_m: f64 = 0.0;
    let mut density_max_n: f64 = 0.0;
    for _ in 0..500 {
        let x = m.sample_point(&mut probe_rng);
        density_max_m = density_max_m.max(nearest_in_net(m, &net_m, &x, floor_m, f64::INFINITY)?);
        let y = n.sample_point(&mut probe_rng);
        density_max_n = density_max_n.max(nearest_in_net(n, &net_n, &y, floor_n, f64::INFINITY)?);
    }

    let report = CouplingReport {
        net_size: net_m.len(),
        max_pairing,
        min_separation_m,
        min_separation_n,
        density_max_m,
        density_max_n,
        density_target: DENSITY_FACTOR * eps,
    };
    Ok(GHCoupling {
        m: m.clone(),
        n: n.clone(),
        cross,
        epsilon: eps,
        net_m,
        net_n,
        report,
    })
}

// ---------------------------------------------------------------------------
// Bump function
// ---------------------------------------------------------------------------

/// Quintic bump: 0 for `t >= sigma`, 1 for `t <= sigma/2`, smoothstep of
/// degree 5 with strictly negative derivative in between. The boundary
/// clauses hold exactly.
pub fn chi(t: f64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0, "bump scale must be positive");
    if t >= sigma {
        return 0.0;
    }
    if t <= 0.5 * sigma {
        return 1.0;
    }
    let s = (t - 0.5 * sigma) / (0.5 * sigma);
    1.0 - s * s * s * (10.0 + s * (6.0 * s - 15.0))
}

/// Largest slope magnitude of [`chi`]: attained at the band midpoint.
pub fn chi_lipschitz(sigma: f64) -> f64 {
    15.0 / (4.0 * sigma)
}

// ---------------------------------------------------------------------------
// The map
// ---------------------------------------------------------------------------

/// Result of projecting a vector onto the embedded image.
#[derive(Debug, Clone)]
pub struct Projection {
    pub point: ChartPoint,
    /// Euclidean distance from the target vector to the image point.
    pub residual: f64,
    /// First-order optimality measure; small means genuine nearest point.
    pub tangential_residual: f64,
    pub iters: usize,
}

/// Finite-difference differential data of the composite map at one point.
#[derive(Debug, Clone)]
pub struct SubmersionReport {
    pub singular_values: Vec<f64>,
    pub min_singular_value: f64,
}

/// The composite near-isometry: bump coordinates of the coupled nets plus
/// the data needed to evaluate and project them.
#[derive(Debug, Clone)]
pub struct FibrationMap {
    pub coupling: GHCoupling,
    pub sigma: f64,
    /// Scale cap the bump width was validated against.
    pub r_cap: f64,
    /// Estimated reach of the embedded image in `R^S`.
    pub reach: f64,
    pub seed: u64,
    /// Per net point: quadrature samples of its ball with volume weights.
    ball_samples: Vec<Vec<(ChartPoint, f64)>>,
}

impl FibrationMap {
    /// Build the map data for a coupling. `i0`, `r0` and `rac` are the
    /// injectivity, conjugate and angle-comparison radii the caller
    /// certifies for the pair; the bump scale must stay below a quarter of
    /// their minimum. The target must have closed-form distances (flat
    /// torus or round sphere) so its side of the construction is exact.
    pub fn new(
        coupling: GHCoupling,
        sigma: f64,
        i0: f64,
        r0: f64,
        rac: f64,
        seed: u64,
    ) -> Result<Self> {
        if !matches!(
            coupling.n.kind(),
            ManifoldKind::FlatTorus | ManifoldKind::Sphere
        ) {
            return Err(Error::UnsupportedManifold(format!(
                "target {} lacks certifiable curvature and injectivity bounds; use a flat torus or round sphere",
                coupling.n.id()
            )));
        }
        for (name, v) in [("i0", i0), ("r0", r0), ("rac", rac)] {
            if !(v > 0.0) {
                return Err(Error::ArgumentOutOfRange(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        let r_cap = 0.25 * i0.min(r0).min(rac);
        if !(sigma > 0.0) || sigma >= r_cap {
            return Err(Error::ConfigInvalid(format!(
                "bump scale {sigma} must lie in (0, {r_cap}) for this coupling"
            )));
        }
        let eps = coupling.epsilon;
        let ball_samples: Vec<Vec<(ChartPoint, f64)>> = coupling
            .net_m
            .par_iter()
            .enumerate()
            .map(|(i, center)| {
                let mut rng = rng_from_seed(derive_indexed_seed(seed, "fm-ball", i as u64));
                let mut samples = Vec::with_capacity(BALL_SAMPLES);
                for _ in 0..BALL_SAMPLES {
                    let y = coupling
                        .m
                        .sample_chart_ball(center, eps, &mut rng)
                        .map_err(|e| {
                            Error::QuadratureFailure(format!(
                                "ball quadrature around net point {i} failed: {e}"
                            ))
                        })?;
                    let w = coupling.m.sqrt_det_metric(&y)?;
                    samples.push((y, w));
                }
                Ok(samples)
            })
            .collect::<Result<_>>()?;
        let mut map = FibrationMap {
            coupling,
            sigma,
            r_cap,
            reach: 0.0,
            seed,
            ball_samples,
        };
        map.reach = map.estimate_reach()?;
        Ok(map)
    }

    pub fn size(&self) -> usize {
        self.coupling.size()
    }

    /// Bump coordinates of a target point: `chi` of its distance to each
    /// target net point.
    pub fn f_n(&self, y: &ChartPoint) -> Result<DVector<f64>> {
        let n = &self.coupling.n;
        let mut out = DVector::zeros(self.size());
        for (i, p) in self.coupling.net_n.iter().enumerate() {
            let d = coupling_distance(n, y, p)?;
            if d < self.sigma {
                out[i] = chi(d, self.sigma);
            }
        }
        Ok(out)
    }

    /// Bump coordinates of a source point: `chi` of the averaged distance
    /// to each net ball. Components whose net point is farther than
    /// `sigma + eps` are exactly zero because the integrand never drops
    /// below `d - eps`.
    pub fn f_m(&self, x: &ChartPoint) -> Result<DVector<f64>> {
        Ok(self.f_m_with_nearest(x)?.0)
    }

    fn f_m_with_nearest(&self, x: &ChartPoint) -> Result<(DVector<f64>, usize)> {
        let m = &self.coupling.m;
        let eps = self.coupling.epsilon;
        let support = self.sigma + eps;
        let floor = chart_norm_floor(m);
        let mut out = DVector::zeros(self.size());
        let mut nearest = None;
        for (i, center) in self.coupling.net_m.iter().enumerate() {
            if floor > 0.0 && floor * m.chart_diff(&x.x, &center.x).norm() > support {
                continue;
            }
            let d = coupling_distance(m, x, center)?;
            if nearest.is_none_or(|(_, bd)| d < bd) {
                nearest = Some((i, d));
            }
            if d > support {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for (y, w) in &self.ball_samples[i] {
                num += w * coupling_distance(m, x, y)?;
                den += w;
            }
            out[i] = chi(num / den, self.sigma);
        }
        let nearest = match nearest {
            Some((i, _)) => i,
            // Every net point was pruned; fall back to chart proximity.
            None => self
                .coupling
                .net_m
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = m.chart_diff(&x.x, &a.x).norm();
                    let db = m.chart_diff(&x.x, &b.x).norm();
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .expect("coupling nets are nonempty"),
        };
        Ok((out, nearest))
    }

    /// Bump coordinates of `x` plus the net index to start projection from.
    pub fn evaluate_maps(&self, x: &ChartPoint) -> Result<(DVector<f64>, usize)> {
        self.f_m_with_nearest(x)
    }

    /// Nearest-point projection of `target` onto the embedded image,
    /// started from the target net point with index `start`. Within the
    /// reach this coincides with projection along normal fibers.
    pub fn project_to_image(&self, target: &DVector<f64>, start: usize) -> Result<Projection> {
        let n = &self.coupling.n;
        let dim = n.dim();
        let mut y = self.coupling.net_n[start].clone();
        let mut lambda = 1e-8;
        let mut r = self.f_n(&y)? - target;
        let mut resid = r.norm();
        for iter in 0..80 {
            let h = 1e-6;
            let mut cols = Vec::with_capacity(dim);
            for k in 0..dim {
                let mut up = y.x.clone();
                up[k] += h;
                let mut dn = y.x.clone();
                dn[k] -= h;
                let fu = self.f_n(&ChartPoint::from_vector(n.wrap(&up)))?;
                let fd = self.f_n(&ChartPoint::from_vector(n.wrap(&dn)))?;
                cols.push((fu - fd) / (2.0 * h));
            }
            let jac = DMatrix::from_columns(&cols);
            let grad = jac.transpose() * &r;
            let jtj = jac.transpose() * &jac;
            let sigma_max = jtj
                .symmetric_eigenvalues()
                .iter()
                .fold(0.0_f64, |a, &b| a.max(b))
                .sqrt();
            let finish = |y: ChartPoint, resid: f64, grad_norm: f64, iters: usize| Projection {
                point: y,
                residual: resid,
                tangential_residual: grad_norm / sigma_max.max(1e-12),
                iters,
            };
            // Stationarity is judged by the undamped step, which absorbs
            // the chart scale of the jacobian; the gradient alone does not.
            let ridge = &jtj + DMatrix::identity(dim, dim) * (1e-14 * (1.0 + sigma_max * sigma_max));
            let newton_norm = ridge
                .lu()
                .solve(&grad)
                .map_or(f64::INFINITY, |s| s.norm());
            if newton_norm < 1e-9 || grad.norm() < 1e-10 * (1.0 + sigma_max) {
                return Ok(finish(y, resid, grad.norm(), iter));
            }
            let mut advanced = false;
            // Enough escalations to push the damping well past sigma_max^2
            // even from the floor, where the step turns into a short
            // gradient descent that must make progress on a smooth model.
            for _ in 0..40 {
                let damped = &jtj + DMatrix::identity(dim, dim) * lambda;
                let Some(step) = damped.lu().solve(&(-&grad)) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand = ChartPoint::from_vector(n.wrap(&(&y.x + &step)));
                if n.check_domain(&cand.x).is_err() {
                    lambda *= 10.0;
                    continue;
                }
                let rc = self.f_n(&cand)? - target;
                let rn = rc.norm();
                if rn <= resid * (1.0 + 1e-12) + 1e-15 {
                    let descent = resid - rn;
                    y = cand;
                    r = rc;
                    resid = rn;
                    lambda = (lambda / 3.0).max(1e-12);
                    advanced = true;
                    if descent < 1e-13 * (1.0 + resid) {
                        let grad = jac.transpose() * &r;
                        return Ok(finish(y, resid, grad.norm(), iter));
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !advanced {
                // No descending step within machine tolerance: accept the
                // point as stationary if the undamped step was already
                // small or the gradient sits below the descent the line
                // search could possibly detect; a rank-deficient jacobian
                // inflates the step while the gradient stays tiny.
                if newton_norm < 1e-4 || grad.norm() < 1e-6 * (1.0 + sigma_max) {
                    return Ok(finish(y, resid, grad.norm(), iter));
                }
                return Err(Error::OptimizerDivergence(format!(
                    "image projection stalled at residual {resid:.3e} after {iter} steps"
                )));
            }
        }
        Err(Error::OptimizerDivergence(
            "image projection exhausted its iteration budget".into(),
        ))
    }

    /// Largest offset radius with unique projection, probed on a few net
    /// points and random ambient directions, refined by bisection.
    fn estimate_reach(&self) -> Result<f64> {
        let s = self.size();
        let probes: Vec<usize> = (0..3).map(|k| k * s / 3).collect();
        let mut rng = rng_from_seed(derive_seed(self.seed, "reach-offsets"));
        let mut images = Vec::with_capacity(probes.len());
        let mut spacing: f64 = f64::INFINITY;
        for &p in &probes {
            let c = self.f_n(&self.coupling.net_n[p])?;
            for (i, q) in self.coupling.net_n.iter().enumerate() {
                if i == p {
                    continue;
                }
                let gap = (self.f_n(q)? - &c).norm();
                if gap > 1e-9 {
                    spacing = spacing.min(gap);
                }
            }
            // Uniqueness is probed from spatially adjacent starts; index
            // order in the net carries no locality.
            let yp = &self.coupling.net_n[p];
            let mut by_gap: Vec<(f64, usize)> = self
                .coupling
                .net_n
                .iter()
                .enumerate()
                .map(|(i, q)| (self.coupling.n.chart_diff(&yp.x, &q.x).norm(), i))
                .collect();
            by_gap.sort_by(|a, b| a.0.total_cmp(&b.0));
            let starts: Vec<usize> = by_gap.iter().take(3).map(|&(_, i)| i).collect();
            images.push((c, starts));
        }
        if !spacing.is_finite() {
            return Ok(0.0);
        }
        let dirs: Vec<DVector<f64>> = (0..2)
            .map(|_| {
                let v = DVector::from_fn(s, |_, _| {
                    use rand::Rng;
                    rng.gen_range(-1.0..1.0)
                });
                let norm = v.norm();
                v / norm
            })
            .collect();
        let unique_at = |rho: f64| -> bool {
            for (c, starts) in &images {
                for u in &dirs {
                    let target = c + u * rho;
                    let mut results: Vec<ChartPoint> = Vec::new();
                    for &st in starts {
                        match self.project_to_image(&target, st) {
                            Ok(proj) => results.push(proj.point),
                            Err(_) => return false,
                        }
                    }
                    let base = &results[0];
                    for other in &results[1..] {
                        if self.coupling.n.chart_diff(&base.x, &other.x).norm() > 1e-4 {
                            return false;
                        }
                    }
                }
            }
            true
        };
        let mut lo = 0.0;
        let mut hi = spacing;
        if !unique_at(hi) {
            for _ in 0..5 {
                let mid = 0.5 * (lo + hi);
                if unique_at(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        } else {
            lo = hi;
        }
        Ok(lo)
    }

    /// Finite-difference differential of the composite map at `x` in
    /// orthonormal frames, reported through its singular values.
    pub fn check_submersion(&self, x: &ChartPoint, fd_step: f64) -> Result<SubmersionReport> {
        if !(fd_step > 0.0) || !fd_step.is_finite() {
            return Err(Error::ArgumentOutOfRange(format!(
                "finite difference step {fd_step} must be positive"
            )));
        }
        let m = &self.coupling.m;
        let n = &self.coupling.n;
        let y0 = fibration_map(self, x)?;
        let frame = m.orthonormal_frame(x)?;
        let mut cols = Vec::with_capacity(m.dim());
        for k in 0..m.dim() {
            let dir = frame.column(k).into_owned();
            let xp = ChartPoint::from_vector(m.wrap(&(&x.x + &dir * fd_step)));
            let xm = ChartPoint::from_vector(m.wrap(&(&x.x - &dir * fd_step)));
            m.check_domain(&xp.x)?;
            m.check_domain(&xm.x)?;
            let yp = fibration_map(self, &xp)?;
            let ym = fibration_map(self, &xm)?;
            let delta = n.chart_diff(&ym.x, &yp.x) / (2.0 * fd_step);
            cols.push(n.to_frame(&y0, &delta)?);
        }
        let d = DMatrix::from_columns(&cols);
        let mut singular_values: Vec<f64> = d.svd(false, false).singular_values.iter().copied().collect();
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let min_singular_value = singular_values.last().copied().unwrap_or(0.0);
        Ok(SubmersionReport {
            singular_values,
            min_singular_value,
        })
    }
}

/// The composite map: bump coordinates of `x`, projected onto the embedded
/// image, pulled back to the target. Fails when the coordinates land
/// farther from the image than the estimated reach.
pub fn fibration_map(fm: &FibrationMap, x: &ChartPoint) -> Result<ChartPoint> {
    Ok(fibration_map_detailed(fm, x)?.point)
}

/// [`fibration_map`] with the projection diagnostics attached.
pub fn fibration_map_detailed(fm: &FibrationMap, x: &ChartPoint) -> Result<Projection> {
    let (target, start) = fm.evaluate_maps(x)?;
    let proj = fm.project_to_image(&target, start)?;
    if proj.residual > fm.reach {
        return Err(Error::OutsideReach {
            residual: proj.residual,
            reach: fm.reach,
        });
    }
    Ok(proj)
}

// ---------------------------------------------------------------------------
// Grid evaluation
// ---------------------------------------------------------------------------

/// One evaluation of the composite map on a grid point.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub x: ChartPoint,
    pub image: ChartPoint,
    pub displacement: f64,
    pub residual: f64,
    pub min_singular_value: Option<f64>,
}

impl GridRow {
    pub fn csv_header() -> &'static str {
        "x,fx,displacement,min_singular_value"
    }

    pub fn csv_row(&self) -> String {
        let sv = self
            .min_singular_value
            .map_or_else(|| "".into(), |v| format!("{v:.9}"));
        format!(
            "{},{},{:.9},{}",
            crate::critical::fmt_point(&self.x),
            crate::critical::fmt_point(&self.image),
            self.displacement,
            sv
        )
    }
}

/// Evaluate the map on a `per_side^dim` grid over the source fundamental
/// chart region, optionally with the submersion check at each point.
/// Displacements are measured in the coupled union metric.
pub fn grid_check(fm: &FibrationMap, per_side: usize, fd_step: Option<f64>) -> Result<Vec<GridRow>> {
    if per_side == 0 {
        return Err(Error::ArgumentOutOfRange("grid needs at least one cell".into()));
    }
    let m = &fm.coupling.m;
    if !matches!(
        m.kind(),
        ManifoldKind::FlatTorus | ManifoldKind::PerturbedTorus
    ) {
        return Err(Error::UnsupportedManifold(format!(
            "grid evaluation covers torus sources; got {}",
            m.id()
        )));
    }
    let dim = m.dim();
    let total = per_side.pow(dim as u32);
    (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut idx = flat;
            let coords: Vec<f64> = (0..dim)
                .map(|_| {
                    let i = idx % per_side;
                    idx /= per_side;
                    (i as f64 + 0.5) / per_side as f64
                })
                .collect();
            let x = ChartPoint::from_vector(m.wrap(&DVector::from_vec(coords)));
            let proj = fibration_map_detailed(fm, &x)?;
            let displacement = fm.coupling.cross.eval(m, &fm.coupling.n, &x, &proj.point)?;
            let min_singular_value = match fd_step {
                Some(h) => Some(fm.check_submersion(&x, h)?.min_singular_value),
                None => None,
            };
            Ok(GridRow {
                x,
                image: proj.point,
                displacement,
                residual: proj.residual,
                min_singular_value,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Angle transfer
// ---------------------------------------------------------------------------

/// Measured data for one transferred-angle configuration: two geodesics
/// from a shared source corner against two from a shared target corner.
#[derive(Debug, Clone)]
pub struct AngleTransferReport {
    pub theta: f64,
    pub theta_prime: f64,
    pub mu: f64,
    pub nu: f64,
    pub lengths: [f64; 4],
    pub max_start_gap: f64,
    pub max_end_gap: f64,
    /// `|theta - mu theta'| - (1 - mu) pi`; negative means the transfer
    /// bound held with room to spare before its vanishing moduli.
    pub defect: f64,
}

impl AngleTransferReport {
    pub fn csv_header() -> &'static str {
        "theta,theta_prime,mu,nu,l1,l2,l1p,l2p,start_gap,end_gap,defect"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.6},{:.6},{:.3e},{:.3e},{:.9}",
            self.theta,
            self.theta_prime,
            self.mu,
            self.nu,
            self.lengths[0],
            self.lengths[1],
            self.lengths[2],
            self.lengths[3],
            self.max_start_gap,
            self.max_end_gap,
            self.defect
        )
    }
}

/// Measure the angle between two source geodesics against the angle
/// between their target partners. The endpoint-proximity hypotheses are
/// checked against `nu` in the coupled union metric; the defect column is
/// reported for tabulation, never asserted, because the vanishing moduli
/// in the transfer bound are nonconstructive.
pub fn angle_transfer_report(
    coupling: &GHCoupling,
    c1: &GeodesicPath,
    c2: &GeodesicPath,
    c1p: &GeodesicPath,
    c2p: &GeodesicPath,
    mu: f64,
    nu: f64,
) -> Result<AngleTransferReport> {
    if !(0.0 < mu && mu <= 1.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "angle factor {mu} must lie in (0, 1]"
        )));
    }
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!(
            "proximity scale {nu} must be finite and nonnegative"
        )));
    }
    let m = &coupling.m;
    let n = &coupling.n;
    if m.chart_diff(&c1.start.x, &c2.start.x).norm() > 1e-9 {
        return Err(Error::HypothesisViolated(
            "source geodesics must share their starting corner".into(),
        ));
    }
    if n.chart_diff(&c1p.start.x, &c2p.start.x).norm() > 1e-9 {
        return Err(Error::HypothesisViolated(
            "target geodesics must share their starting corner".into(),
        ));
    }
    let start_gaps = [
        coupling.cross.eval(m, n, &c1.start, &c1p.start)?,
        coupling.cross.eval(m, n, &c2.start, &c2p.start)?,
    ];
    let end_gaps = [
        coupling.cross.eval(m, n, c1.endpoint(), c1p.endpoint())?,
        coupling.cross.eval(m, n, c2.endpoint(), c2p.endpoint())?,
    ];
    let max_start_gap = start_gaps[0].max(start_gaps[1]);
    let max_end_gap = end_gaps[0].max(end_gaps[1]);
    if max_start_gap > nu + 1e-12 || max_end_gap > nu + 1e-12 {
        return Err(Error::HypothesisViolated(format!(
            "endpoint proximity {:.6} exceeds nu = {nu}",
            max_start_gap.max(max_end_gap)
        )));
    }
    let theta = m.angle_between(&c1.start, &c1.initial_velocity.v, &c2.initial_velocity.v)?;
    let theta_prime =
        n.angle_between(&c1p.start, &c1p.initial_velocity.v, &c2p.initial_velocity.v)?;
    let defect = (theta - mu * theta_prime).abs() - (1.0 - mu) * PI;
    Ok(AngleTransferReport {
        theta,
        theta_prime,
        mu,
        nu,
        lengths: [c1.length, c2.length, c1p.length, c2p.length],
        max_start_gap,
        max_end_gap,
        defect,
    })
}
