//! Numerical geodesics: initial-value integration, two-point connections,
//! Jacobi fields and conjugate-point detection.
//!
//! The initial-value problem integrates the first-order system
//! `x' = v`, `v' = -Gamma(x)(v, v)` with an adaptive Dormand-Prince 4(5)
//! pair. Two-point connections come from closed forms on the model spaces
//! and from damped multi-start shooting elsewhere; every returned path is
//! unit speed. Conjugate points are found by carrying an `(n-1)`-dimensional
//! Jacobi propagator in a parallel normal frame and watching its determinant.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifold::{
    sample_unit_ball, ChartPoint, ManifoldKind, ManifoldSpec, TangentVector,
};
use crate::rng::{derive_indexed_seed, rng_from_seed};

/// Relative margin used when certifying a connection as minimal.
pub const DELTA_MIN: f64 = 1e-3;

/// Default initial/maximal integrator step.
pub const DEFAULT_STEP: f64 = 0.05;

/// Per-step error tolerance of the adaptive integrator.
const STEP_TOL: f64 = 1e-8;

/// Hard floor for the adaptive step; reaching it is an error.
const H_FLOOR: f64 = 1e-12;

/// Endpoint-miss acceptance threshold of the shooting solver, chart units.
const NEWTON_TOL: f64 = 1e-9;

const NEWTON_MAX_ITERS: usize = 40;

/// Fixed step of the Jacobi propagator.
const JACOBI_STEP: f64 = 5e-3;
/// Per-step error budget for the step-doubling refinement.
const JACOBI_REFINE_TOL: f64 = 1e-9;
/// Halving depth cap; 5e-3 / 2^12 is well below any pole passage width
/// random sampling can produce.
const JACOBI_REFINE_DEPTH: u32 = 12;

/// Width to which a conjugate-time bracket is refined.
const CONJ_LOCATE_TOL: f64 = 1e-4;

/// Embedding angles closer to pi than this are treated as antipodal.
const ANTIPODAL_EPS: f64 = 1e-7;

/// A unit-speed geodesic segment with its sampled trace.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    pub start: ChartPoint,
    /// Unit initial velocity in chart components.
    pub initial_velocity: TangentVector,
    /// Unit velocity at the endpoint.
    pub final_velocity: TangentVector,
    pub length: f64,
    /// `(time, point)` along the path; the last entry sits at `length`.
    pub samples: Vec<(f64, ChartPoint)>,
    /// Chart velocity at each sample, parallel to `samples`.
    pub sample_velocities: Vec<DVector<f64>>,
    /// Certified shortest among found connections within `min_tol`.
    pub is_minimal: bool,
    pub min_tol: f64,
}

impl GeodesicPath {
    pub fn endpoint(&self) -> &ChartPoint {
        &self.samples.last().expect("path has samples").1
    }

    /// Largest relative deviation of the sampled speeds from one.
    pub fn speed_drift(&self, m: &ManifoldSpec) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for ((_, p), v) in self.samples.iter().zip(&self.sample_velocities) {
            let s = m.norm(p, v)?;
            worst = worst.max((s - 1.0).abs());
        }
        Ok(worst)
    }
}

/// Outcome of a conjugate-point scan along one geodesic.
#[derive(Debug, Clone)]
pub struct ConjugateReport {
    pub geodesic: GeodesicPath,
    /// First time where a normal Jacobi field with `J(0) = 0` vanishes.
    pub first_conjugate_time: Option<f64>,
    pub horizon: f64,
}

/// Strategy for the two-point connection solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeodesicSolver {
    /// Closed form where one exists, shooting otherwise.
    Auto,
    /// Closed form only; errors on manifolds without one.
    ClosedForm,
    /// Multi-start shooting on every kind.
    Shooting,
}

// ---------------------------------------------------------------------------
// Initial-value integration
// ---------------------------------------------------------------------------

/// Trajectory in unwrapped working coordinates.
struct RawPath {
    /// `(t, x, v)` at the accepted steps, starting at `t = 0`.
    samples: Vec<(f64, DVector<f64>, DVector<f64>)>,
}

impl RawPath {
    fn end(&self) -> &(f64, DVector<f64>, DVector<f64>) {
        self.samples.last().expect("raw path has samples")
    }
}

fn is_domain_error(e: &Error) -> bool {
    matches!(
        e,
        Error::PointOutsideChart(_) | Error::CoordinateSingularity(_)
    )
}

fn geodesic_rhs(m: &ManifoldSpec, s: &DVector<f64>) -> Result<DVector<f64>> {
    let n = m.dim();
    let x = s.rows(0, n).into_owned();
    let v = s.rows(n, n).into_owned();
    let gamma = m.christoffel_at(&ChartPoint::from_vector(m.wrap(&x)))?;
    let acc = gamma.acceleration(&v, &v);
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&v);
    out.rows_mut(n, n).copy_from(&acc);
    Ok(out)
}

// Dormand-Prince 4(5) tableau.
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

enum StepTrial {
    /// Accepted candidate with its scaled error and the slope at the new point.
    Done {
        state: DVector<f64>,
        err: f64,
        slope_end: DVector<f64>,
    },
    /// A stage evaluation left the chart.
    DomainFail,
}

fn dp_try_step(
    m: &ManifoldSpec,
    s: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
) -> Result<StepTrial> {
    let mut stages: Vec<DVector<f64>> = Vec::with_capacity(7);
    stages.push(k1.clone());
    for row in &DP_A {
        let mut arg = s.clone();
        for (j, kj) in stages.iter().enumerate() {
            if row[j] != 0.0 {
                arg += kj * (h * row[j]);
            }
        }
        match geodesic_rhs(m, &arg) {
            Ok(k) => stages.push(k),
            Err(e) if is_domain_error(&e) => return Ok(StepTrial::DomainFail),
            Err(e) => return Err(e),
        }
    }
    // The last stage argument is the fifth-order solution itself.
    let mut y5 = s.clone();
    for (j, kj) in stages.iter().enumerate().take(6) {
        if DP_A[5][j] != 0.0 {
            y5 += kj * (h * DP_A[5][j]);
        }
    }
    let mut y4 = s.clone();
    for (j, kj) in stages.iter().enumerate() {
        if DP_B4[j] != 0.0 {
            y4 += kj * (h * DP_B4[j]);
        }
    }
    let mut err: f64 = 0.0;
    for i in 0..s.len() {
        let scale = STEP_TOL + STEP_TOL * s[i].abs().max(y5[i].abs());
        err = err.max(((y5[i] - y4[i]) / scale).abs());
    }
    let slope_end = stages.pop().expect("seven stages");
    Ok(StepTrial::Done {
        state: y5,
        err,
        slope_end,
    })
}

/// Integrate from `(x0, v0)` for time `t_end`; `step` caps the step size.
fn rk45(
    m: &ManifoldSpec,
    x0: &DVector<f64>,
    v0: &DVector<f64>,
    t_end: f64,
    step: f64,
) -> Result<RawPath> {
    let n = m.dim();
    let mut s = DVector::zeros(2 * n);
    s.rows_mut(0, n).copy_from(x0);
    s.rows_mut(n, n).copy_from(v0);
    let mut samples = vec![(0.0, x0.clone(), v0.clone())];
    let mut t = 0.0;
    let mut h = step.min(t_end);
    let mut k1 = geodesic_rhs(m, &s)?;
    let truncated = |samples: &[(f64, DVector<f64>, DVector<f64>)], t: f64| {
        Error::LeftChartDomain {
            t,
            samples: samples
                .iter()
                .map(|(ti, xi, _)| (*ti, ChartPoint::from_vector(m.wrap(xi))))
                .collect(),
        }
    };
    while t < t_end - 1e-14 {
        h = h.min(t_end - t);
        match dp_try_step(m, &s, &k1, h)? {
            StepTrial::DomainFail => {
                h *= 0.5;
                if h < H_FLOOR {
                    return Err(truncated(&samples, t));
                }
            }
            StepTrial::Done {
                state,
                err,
                slope_end,
            } => {
                if err.is_finite() && err <= 1.0 {
                    t += h;
                    s = state;
                    k1 = slope_end;
                    samples.push((
                        t,
                        s.rows(0, n).into_owned(),
                        s.rows(n, n).into_owned(),
                    ));
                    let grow = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                    h = (h * grow).min(step);
                } else {
                    let shrink = if err.is_finite() {
                        (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                    } else {
                        0.5
                    };
                    h *= shrink;
                    if h < H_FLOOR {
                        return Err(Error::StepSizeUnderflow(t));
                    }
                }
            }
        }
    }
    Ok(RawPath { samples })
}

fn path_from_raw(m: &ManifoldSpec, raw: RawPath, scale_time: f64) -> GeodesicPath {
    let samples: Vec<(f64, ChartPoint)> = raw
        .samples
        .iter()
        .map(|(t, x, _)| (t * scale_time, ChartPoint::from_vector(m.wrap(x))))
        .collect();
    let velocities: Vec<DVector<f64>> = raw
        .samples
        .iter()
        .map(|(_, _, v)| v / scale_time)
        .collect();
    let start = samples.first().expect("raw path has samples").1.clone();
    let end = samples.last().expect("raw path has samples").clone();
    GeodesicPath {
        start: start.clone(),
        initial_velocity: TangentVector {
            base: start,
            v: velocities[0].clone(),
        },
        final_velocity: TangentVector {
            base: end.1,
            v: velocities.last().expect("raw path has samples").clone(),
        },
        length: end.0,
        samples,
        sample_velocities: velocities,
        is_minimal: false,
        min_tol: 0.0,
    }
}

/// Integrate the geodesic with initial data `start` for time `t_end`,
/// reparameterized to unit speed. `step` is the initial and maximal step.
pub fn integrate_geodesic(
    m: &ManifoldSpec,
    start: &TangentVector,
    t_end: f64,
    step: f64,
) -> Result<GeodesicPath> {
    if !(t_end > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "integration time {t_end} must be positive"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "step hint {step} must be positive"
        )));
    }
    m.check_domain(&start.base.x)?;
    let speed = m.norm(&start.base, &start.v)?;
    if speed < 1e-300 {
        return Err(Error::ArgumentOutOfRange(
            "initial velocity must be nonzero".into(),
        ));
    }
    let unit = &start.v / speed;
    if matches!(m.kind(), ManifoldKind::Ellipsoid) {
        return ellipsoid_path(m, &start.base, &unit, t_end);
    }
    let raw = rk45(m, &start.base.x, &unit, t_end, step)?;
    Ok(path_from_raw(m, raw, 1.0))
}

/// Endpoint of the geodesic with initial velocity `v` run for unit time,
/// i.e. the exponential map applied to `v`.
pub fn exp_map(m: &ManifoldSpec, v: &TangentVector) -> Result<ChartPoint> {
    let speed = m.norm(&v.base, &v.v)?;
    if speed < 1e-15 {
        return Ok(v.base.clone());
    }
    let path = integrate_geodesic(m, v, speed, DEFAULT_STEP)?;
    Ok(path.endpoint().clone())
}

// ---------------------------------------------------------------------------
// Direction fans
// ---------------------------------------------------------------------------

/// Deterministic spread of `2 n^2` unit tangent directions at `p`: golden
/// angles on the circle, a Fibonacci lattice on the 2-sphere, a fixed-seed
/// draw above dimension three. Used as shooting starts and antipodal fans.
fn direction_fan(m: &ManifoldSpec, p: &ChartPoint) -> Result<Vec<DVector<f64>>> {
    let n = m.dim();
    let frame = m.orthonormal_frame(p)?;
    let count = 2 * n * n;
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(count);
    match n {
        2 => {
            let inv_phi = 0.618_033_988_749_894_9_f64;
            for j in 0..count {
                let theta = std::f64::consts::TAU * ((j as f64) * inv_phi).fract();
                dirs.push(DVector::from_vec(vec![theta.cos(), theta.sin()]));
            }
        }
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
            for j in 0..count {
                let z = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * j as f64;
                dirs.push(DVector::from_vec(vec![r * phi.cos(), r * phi.sin(), z]));
            }
        }
        _ => {
            let mut rng = rng_from_seed(0x5bd1_e995_9e37_79b9 ^ n as u64);
            while dirs.len() < count {
                let g = sample_unit_ball(n, &mut rng);
                let norm = g.norm();
                if norm > 1e-9 {
                    dirs.push(g / norm);
                }
            }
        }
    }
    Ok(dirs.into_iter().map(|d| &frame * d).collect())
}

// ---------------------------------------------------------------------------
// Closed-form connections
// ---------------------------------------------------------------------------

fn segment_samples(length: f64, step: f64) -> usize {
    ((length / step).ceil() as usize).clamp(8, 400)
}

fn assemble_path(
    samples: Vec<(f64, ChartPoint)>,
    velocities: Vec<DVector<f64>>,
) -> GeodesicPath {
    let start = samples.first().expect("assembled path has samples").1.clone();
    let (length, end) = samples.last().expect("assembled path has samples").clone();
    GeodesicPath {
        start: start.clone(),
        initial_velocity: TangentVector {
            base: start,
            v: velocities.first().expect("velocities present").clone(),
        },
        final_velocity: TangentVector {
            base: end,
            v: velocities.last().expect("velocities present").clone(),
        },
        length,
        samples,
        sample_velocities: velocities,
        is_minimal: false,
        min_tol: 0.0,
    }
}

fn euclidean_connection(m: &ManifoldSpec, p: &ChartPoint, q: &ChartPoint) -> Vec<GeodesicPath> {
    let delta = &q.x - &p.x;
    let len = m.scale() * delta.norm();
    let unit = &delta / len;
    let count = segment_samples(len, DEFAULT_STEP);
    let mut samples = Vec::with_capacity(count + 1);
    let mut velocities = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let f = k as f64 / count as f64;
        let point = if k == count {
            q.clone()
        } else {
            ChartPoint::from_vector(&p.x + &delta * f)
        };
        samples.push((len * f, point));
        velocities.push(unit.clone());
    }
    vec![assemble_path(samples, velocities)]
}

/// Jacobian of the unit-sphere embedding at chart coordinates `x`.
fn sphere_embedding_jacobian(n: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(n + 1, n);
    // Component i < n is cos(x_i) * prod_{j<i} sin(x_j); component n drops
    // the cosine. Derivatives are written with re-multiplied products so no
    // division by a small sine ever happens.
    let prod_skip = |upto: usize, skip: usize| -> f64 {
        let mut p = 1.0;
        for j in 0..upto {
            if j != skip {
                p *= x[j].sin();
            }
        }
        p
    };
    for i in 0..=n {
        for k in 0..n {
            let value = if i < n {
                if k > i {
                    0.0
                } else if k == i {
                    -x[i].sin() * prod_skip(i, n + 1)
                } else {
                    x[i].cos() * prod_skip(i, k) * x[k].cos()
                }
            } else {
                prod_skip(n, k) * x[k].cos()
            };
            jac[(i, k)] = value;
        }
    }
    jac
}

/// Chart velocity of a unit-speed spherical path whose embedding tangent is
/// `t_emb` at the chart point `x`; `rho` is the embedded radius.
fn sphere_chart_velocity(
    n: usize,
    x: &ChartPoint,
    t_emb: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    let jac = sphere_embedding_jacobian(n, &x.x);
    let gram = jac.transpose() * &jac;
    let rhs = jac.transpose() * t_emb;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::CoordinateSingularity("sphere chart degenerates".into()))?;
    Ok(chol.solve(&rhs) / rho)
}

fn sphere_arc(
    m: &ManifoldSpec,
    u: &DVector<f64>,
    e: &DVector<f64>,
    psi: f64,
    rho: f64,
    q_exact: Option<&ChartPoint>,
) -> Result<GeodesicPath> {
    let n = m.dim();
    let len = rho * psi;
    let count = segment_samples(len, DEFAULT_STEP);
    let mut samples = Vec::with_capacity(count + 1);
    let mut velocities = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let s = psi * k as f64 / count as f64;
        let point = if k == count {
            match q_exact {
                Some(q) => q.clone(),
                None => m.sphere_chart_of(&(u * s.cos() + e * s.sin())),
            }
        } else {
            m.sphere_chart_of(&(u * s.cos() + e * s.sin()))
        };
        let tangent = -u * s.sin() + e * s.cos();
        let vel = sphere_chart_velocity(n, &point, &tangent, rho)?;
        samples.push((len * k as f64 / count as f64, point));
        velocities.push(vel);
    }
    Ok(assemble_path(samples, velocities))
}

fn sphere_connections(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
) -> Result<Vec<GeodesicPath>> {
    let n = m.dim();
    let u = m.sphere_embedding(p);
    let w = m.sphere_embedding(q);
    let rho = m.scale() / m.curvature_param().sqrt();
    let cos_psi = u.dot(&w).clamp(-1.0, 1.0);
    let psi = cos_psi.acos();
    if psi < 1e-14 {
        return Ok(Vec::new());
    }
    if psi < std::f64::consts::PI - ANTIPODAL_EPS {
        let mut e = &w - &u * cos_psi;
        e /= e.norm();
        return Ok(vec![sphere_arc(m, &u, &e, psi, rho, Some(q))?]);
    }
    // Antipodal endpoints: every direction works, so return the whole
    // deterministic fan plus the chart straight line.
    let mut dirs = direction_fan(m, p)?;
    let delta = m.chart_diff(&p.x, &q.x);
    let dn = m.norm(p, &delta)?;
    if dn > 1e-12 {
        dirs.push(&delta / dn);
    }
    let jac = sphere_embedding_jacobian(n, &p.x);
    let mut out = Vec::new();
    for v0 in dirs {
        let mut e = &jac * &v0 * rho;
        let norm = e.norm();
        if norm < 1e-9 {
            continue;
        }
        e /= norm;
        let duplicate = out.iter().any(|path: &GeodesicPath| {
            (&path.initial_velocity.v - &v0).amax() < 1e-5
        });
        if duplicate {
            continue;
        }
        out.push(sphere_arc(m, &u, &e, psi, rho, None)?);
    }
    Ok(out)
}

/// Poincare-ball translation moving the origin to `u`.
fn mobius_add(u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let uv = u.dot(v);
    let u2 = u.norm_squared();
    let v2 = v.norm_squared();
    let den = 1.0 + 2.0 * uv + u2 * v2;
    (u * (1.0 + 2.0 * uv + v2) + v * (1.0 - u2)) / den
}

fn hyperbolic_connection(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
) -> Result<Vec<GeodesicPath>> {
    let a = (-m.curvature_param()).sqrt();
    let time_of_arc = m.scale() / a;
    let offset = mobius_add(&(-&p.x), &q.x);
    let r = offset.norm();
    if r < 1e-15 {
        return Ok(Vec::new());
    }
    let eta = &offset / r;
    let d1 = 2.0 * r.atanh();
    let len = time_of_arc * d1;
    let count = segment_samples(len, DEFAULT_STEP);
    let chart_at = |s: f64| mobius_add(&p.x, &(&eta * (0.5 * s).tanh()));
    let mut samples = Vec::with_capacity(count + 1);
    let mut velocities = Vec::with_capacity(count + 1);
    let fd = (d1 * 1e-6).max(1e-12);
    for k in 0..=count {
        let s = d1 * k as f64 / count as f64;
        let point = if k == count {
            q.clone()
        } else {
            ChartPoint::from_vector(chart_at(s))
        };
        let vel = if k == 0 {
            &eta * ((1.0 - p.x.norm_squared()) * 0.5 / time_of_arc)
        } else if k == count {
            let back = mobius_add(&(-&q.x), &p.x);
            let eta_back = &back / back.norm();
            -(&eta_back * ((1.0 - q.x.norm_squared()) * 0.5 / time_of_arc))
        } else {
            // Interior velocities by central differences in arclength.
            (chart_at(s + fd) - chart_at(s - fd)) / (2.0 * fd * time_of_arc)
        };
        samples.push((len * k as f64 / count as f64, point));
        velocities.push(vel);
    }
    Ok(vec![assemble_path(samples, velocities)])
}

fn torus_connections(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
) -> Vec<GeodesicPath> {
    let lattice = m.lattice().expect("torus carries a lattice");
    let delta = m.chart_diff(&p.x, &q.x);
    let mut out = Vec::new();
    for (k, flat_len) in lattice.minimal_translates(&delta, tol_extra) {
        if flat_len < 1e-15 {
            continue;
        }
        let n = m.dim();
        let w = DVector::from_fn(n, |i, _| delta[i] + k[i] as f64);
        let len = m.scale() * flat_len;
        let unit = &w / len;
        let count = segment_samples(len, DEFAULT_STEP);
        let mut samples = Vec::with_capacity(count + 1);
        let mut velocities = Vec::with_capacity(count + 1);
        for j in 0..=count {
            let f = j as f64 / count as f64;
            let point = if j == count {
                q.clone()
            } else {
                ChartPoint::from_vector(m.wrap(&(&p.x + &w * f)))
            };
            samples.push((len * f, point));
            velocities.push(unit.clone());
        }
        out.push(assemble_path(samples, velocities));
    }
    out
}

fn closed_form_connections(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
) -> Result<Vec<GeodesicPath>> {
    match m.kind() {
        ManifoldKind::Euclidean => Ok(euclidean_connection(m, p, q)),
        ManifoldKind::Sphere => sphere_connections(m, p, q),
        ManifoldKind::Hyperbolic => hyperbolic_connection(m, p, q),
        ManifoldKind::FlatTorus => Ok(torus_connections(m, p, q, tol_extra)),
        kind => Err(Error::UnsupportedManifold(format!(
            "{kind:?} has no closed-form connection"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Shooting
// ---------------------------------------------------------------------------

/// One converged shot: the solved exponential argument and its trajectory.
struct Shot {
    velocity: DVector<f64>,
    length: f64,
    raw: RawPath,
}

/// Velocity seeds for the multi-start solver: the chart straight line,
/// one start per near-minimal lattice translate, and the direction fan.
fn shooting_seeds(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
    with_fan: bool,
) -> Result<Vec<DVector<f64>>> {
    let mut seeds: Vec<DVector<f64>> = Vec::new();
    let guess = m.quick_distance(p, q)?;
    let delta = m.chart_diff(&p.x, &q.x);
    let dn = m.norm(p, &delta)?;
    if dn > 1e-14 {
        seeds.push(&delta / dn * guess);
    }
    if let Some(lattice) = m.lattice() {
        let amplitude = match m.kind() {
            ManifoldKind::PerturbedTorus => m.shape_params()[0],
            _ => 0.0,
        };
        let margin = tol_extra + 4.0 * amplitude + 1e-6;
        for (k, flat_len) in lattice.minimal_translates(&delta, margin) {
            if flat_len < 1e-15 {
                continue;
            }
            let w = DVector::from_fn(m.dim(), |i, _| delta[i] + k[i] as f64);
            let wn = m.norm(p, &w)?;
            seeds.push(&w / wn * (flat_len * m.scale()));
        }
    }
    if with_fan {
        for d in direction_fan(m, p)? {
            seeds.push(d * guess);
        }
    }
    seeds.dedup_by(|a, b| (&*a - &*b).amax() < 1e-12);
    Ok(seeds)
}

fn shoot_one(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    v0: DVector<f64>,
    speed_cap: f64,
) -> Option<Shot> {
    let n = m.dim();
    let miss = |v: &DVector<f64>| -> Option<(DVector<f64>, RawPath)> {
        let raw = rk45(m, &p.x, v, 1.0, 0.2).ok()?;
        let end_x = m.wrap(&raw.end().1);
        let f = m.chart_diff(&q.x, &end_x);
        Some((f, raw))
    };
    let mut v = v0;
    let (mut f, mut raw) = miss(&v)?;
    for _ in 0..NEWTON_MAX_ITERS {
        let residual = f.amax();
        if residual < NEWTON_TOL {
            let length = m.norm(p, &v).ok()?;
            return Some(Shot {
                velocity: v,
                length,
                raw,
            });
        }
        let h = 1e-6 * (1.0 + v.amax());
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let (fp, _) = miss(&vp)?;
            let (fm, _) = miss(&vm)?;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let update = jac.lu().solve(&(-&f))?;
        let mut accepted = false;
        let mut lambda = 1.0;
        for _ in 0..7 {
            let trial = &v + &update * lambda;
            if let Some((ft, rawt)) = miss(&trial) {
                if ft.amax() < residual {
                    v = trial;
                    f = ft;
                    raw = rawt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return None;
        }
        if m.norm(p, &v).map(|s| s > speed_cap).unwrap_or(true) {
            return None;
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Embedded ellipsoid integration
// ---------------------------------------------------------------------------
// The (theta, phi) chart excises a band around each pole, so a chart-based
// integrator can never follow geodesics that cross a pole; on an oblate
// ellipsoid those are exactly the minimizers between far pairs. The surface
// has no distinguished points in the ambient embedding, so ellipsoid
// trajectories are integrated in R^3 against the constraint
// sum x_i^2 / a_i^2 = 1 and converted back to chart data afterwards.

const ELLIPSOID_STEP: f64 = 0.003;
const ELLIPSOID_NEWTON_TOL: f64 = 1e-8;

fn ellipsoid_axes(m: &ManifoldSpec) -> [f64; 3] {
    let p = m.shape_params();
    let s = m.scale();
    [s * p[0], s * p[1], s * p[2]]
}

fn ellipsoid_embed(axes: &[f64; 3], x: &DVector<f64>) -> [f64; 3] {
    let (st, ct) = x[0].sin_cos();
    let (sp, cp) = x[1].sin_cos();
    [axes[0] * st * cp, axes[1] * st * sp, axes[2] * ct]
}

fn ellipsoid_chart_of(axes: &[f64; 3], pos: &[f64; 3]) -> DVector<f64> {
    let th = (pos[2] / axes[2]).clamp(-1.0, 1.0).acos();
    let ph = (pos[1] / axes[1])
        .atan2(pos[0] / axes[0])
        .rem_euclid(std::f64::consts::TAU);
    DVector::from_vec(vec![th, ph])
}

/// Columns d/dtheta and d/dphi of the scaled embedding.
fn ellipsoid_tangent_columns(axes: &[f64; 3], x: &DVector<f64>) -> ([f64; 3], [f64; 3]) {
    let (st, ct) = x[0].sin_cos();
    let (sp, cp) = x[1].sin_cos();
    (
        [axes[0] * ct * cp, axes[1] * ct * sp, -axes[2] * st],
        [-axes[0] * st * sp, axes[1] * st * cp, 0.0],
    )
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Chart velocity recovering `jac * u = v` by normal equations. The phi
/// column degenerates at the poles, where phi-dot is pinned to zero.
fn ellipsoid_chart_velocity(axes: &[f64; 3], chart: &DVector<f64>, v: &[f64; 3]) -> DVector<f64> {
    let (c_th, c_ph) = ellipsoid_tangent_columns(axes, chart);
    let a11 = dot3(&c_th, &c_th);
    let a12 = dot3(&c_th, &c_ph);
    let a22 = dot3(&c_ph, &c_ph);
    let b1 = dot3(&c_th, v);
    let b2 = dot3(&c_ph, v);
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-18 || a22 < 1e-18 {
        return DVector::from_vec(vec![b1 / a11, 0.0]);
    }
    DVector::from_vec(vec![(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det])
}

/// Acceleration normal to the surface: x'' = -(x'^T H x') / |grad F|^2 grad F
/// for F = sum x_i^2 / a_i^2.
fn ellipsoid_accelerate(axes: &[f64; 3], x: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
    let w = [
        1.0 / (axes[0] * axes[0]),
        1.0 / (axes[1] * axes[1]),
        1.0 / (axes[2] * axes[2]),
    ];
    let grad = [2.0 * w[0] * x[0], 2.0 * w[1] * x[1], 2.0 * w[2] * x[2]];
    let hvv = 2.0 * (w[0] * v[0] * v[0] + w[1] * v[1] * v[1] + w[2] * v[2] * v[2]);
    let k = -hvv / dot3(&grad, &grad);
    [k * grad[0], k * grad[1], k * grad[2]]
}

/// Pull the state back onto the constraint: radial rescale, tangential
/// projection, unit speed.
fn ellipsoid_renormalize(axes: &[f64; 3], x: &mut [f64; 3], v: &mut [f64; 3]) {
    let f = (x[0] * x[0] / (axes[0] * axes[0])
        + x[1] * x[1] / (axes[1] * axes[1])
        + x[2] * x[2] / (axes[2] * axes[2]))
        .sqrt();
    for c in x.iter_mut() {
        *c /= f;
    }
    let grad = [
        2.0 * x[0] / (axes[0] * axes[0]),
        2.0 * x[1] / (axes[1] * axes[1]),
        2.0 * x[2] / (axes[2] * axes[2]),
    ];
    let vn = dot3(v, &grad) / dot3(&grad, &grad);
    *v = lerp3(v, &grad, -vn);
    let s = dot3(v, v).sqrt();
    if s > 1e-300 {
        for c in v.iter_mut() {
            *c /= s;
        }
    }
}

/// Fixed-step RK4 flow of the embedded geodesic equation at unit speed.
/// Records `(t, x, v)` triples when `samples_out` is given.
fn ellipsoid_rk4(
    axes: &[f64; 3],
    x0: [f64; 3],
    v0: [f64; 3],
    t_end: f64,
    mut samples_out: Option<&mut Vec<(f64, [f64; 3], [f64; 3])>>,
) -> ([f64; 3], [f64; 3]) {
    let n_steps = ((t_end / ELLIPSOID_STEP).ceil() as usize).clamp(16, 40_000);
    let h = t_end / n_steps as f64;
    let record_every = n_steps.div_ceil(360);
    let mut x = x0;
    let mut v = v0;
    ellipsoid_renormalize(axes, &mut x, &mut v);
    if let Some(out) = samples_out.as_deref_mut() {
        out.push((0.0, x, v));
    }
    for i in 0..n_steps {
        let a1 = ellipsoid_accelerate(axes, &x, &v);
        let x2 = lerp3(&x, &v, 0.5 * h);
        let v2 = lerp3(&v, &a1, 0.5 * h);
        let a2 = ellipsoid_accelerate(axes, &x2, &v2);
        let x3 = lerp3(&x, &v2, 0.5 * h);
        let v3 = lerp3(&v, &a2, 0.5 * h);
        let a3 = ellipsoid_accelerate(axes, &x3, &v3);
        let x4 = lerp3(&x, &v3, h);
        let v4 = lerp3(&v, &a3, h);
        let a4 = ellipsoid_accelerate(axes, &x4, &v4);
        for j in 0..3 {
            x[j] += h / 6.0 * (v[j] + 2.0 * v2[j] + 2.0 * v3[j] + v4[j]);
            v[j] += h / 6.0 * (a1[j] + 2.0 * a2[j] + 2.0 * a3[j] + a4[j]);
        }
        ellipsoid_renormalize(axes, &mut x, &mut v);
        if let Some(out) = samples_out.as_deref_mut() {
            if (i + 1) % record_every == 0 || i + 1 == n_steps {
                out.push(((i + 1) as f64 * h, x, v));
            }
        }
    }
    (x, v)
}

/// Unit-speed geodesic of arc length `t_end` from `base` along the chart
/// direction `unit_chart`, as a chart-sampled path. Mid-path samples may
/// graze the pole bands; start and end data stay well conditioned.
fn ellipsoid_path(
    m: &ManifoldSpec,
    base: &ChartPoint,
    unit_chart: &DVector<f64>,
    t_end: f64,
) -> Result<GeodesicPath> {
    let axes = ellipsoid_axes(m);
    let x0 = ellipsoid_embed(&axes, &base.x);
    let (c_th, c_ph) = ellipsoid_tangent_columns(&axes, &base.x);
    let v0 = [
        c_th[0] * unit_chart[0] + c_ph[0] * unit_chart[1],
        c_th[1] * unit_chart[0] + c_ph[1] * unit_chart[1],
        c_th[2] * unit_chart[0] + c_ph[2] * unit_chart[1],
    ];
    let mut raw = Vec::new();
    ellipsoid_rk4(&axes, x0, v0, t_end, Some(&mut raw));
    let mut samples = Vec::with_capacity(raw.len());
    let mut velocities = Vec::with_capacity(raw.len());
    for (i, (t, x, v)) in raw.iter().enumerate() {
        if i == 0 {
            samples.push((0.0, base.clone()));
            velocities.push(unit_chart.clone());
            continue;
        }
        let chart = ellipsoid_chart_of(&axes, x);
        velocities.push(ellipsoid_chart_velocity(&axes, &chart, v));
        samples.push((*t, ChartPoint::from_vector(chart)));
    }
    Ok(assemble_path(samples, velocities))
}

/// Shooting on the ellipsoid over (direction angle, arc length), integrated
/// in the embedding so pole-crossing minimizers are reachable.
fn ellipsoid_connections(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
) -> Result<Vec<GeodesicPath>> {
    let axes = ellipsoid_axes(m);
    let x0 = ellipsoid_embed(&axes, &p.x);
    let x1 = ellipsoid_embed(&axes, &q.x);
    let chord = (dot3(&lerp3(&x1, &x0, -1.0), &lerp3(&x1, &x0, -1.0))).sqrt();
    let guess = m.quick_distance(p, q)?;
    // Orthonormal tangent frame at p.
    let (c_th, c_ph) = ellipsoid_tangent_columns(&axes, &p.x);
    let e1 = {
        let n = dot3(&c_th, &c_th).sqrt();
        [c_th[0] / n, c_th[1] / n, c_th[2] / n]
    };
    let e2 = {
        let proj = dot3(&c_ph, &e1);
        let r = lerp3(&c_ph, &e1, -proj);
        let n = dot3(&r, &r).sqrt();
        [r[0] / n, r[1] / n, r[2] / n]
    };
    let dir_of = |alpha: f64| -> [f64; 3] {
        let (sa, ca) = alpha.sin_cos();
        lerp3(
            &[ca * e1[0], ca * e1[1], ca * e1[2]],
            &e2,
            sa,
        )
    };
    let endpoint = |alpha: f64, t: f64| -> ([f64; 3], [f64; 3]) {
        ellipsoid_rk4(&axes, x0, dir_of(alpha), t, None)
    };
    let residual = |alpha: f64, t: f64| -> DVector<f64> {
        let (x, _) = endpoint(alpha, t);
        m.chart_diff(&q.x, &ellipsoid_chart_of(&axes, &x))
    };
    let mut seeds: Vec<f64> = Vec::new();
    let aim = m.chart_diff(&p.x, &q.x);
    let aim_v = [
        c_th[0] * aim[0] + c_ph[0] * aim[1],
        c_th[1] * aim[0] + c_ph[1] * aim[1],
        c_th[2] * aim[0] + c_ph[2] * aim[1],
    ];
    if dot3(&aim_v, &aim_v) > 1e-28 {
        seeds.push(dot3(&aim_v, &e2).atan2(dot3(&aim_v, &e1)));
    }
    let inv_phi = 0.618_033_988_749_894_9_f64;
    for j in 0..16 {
        seeds.push(std::f64::consts::TAU * ((j as f64) * inv_phi).fract());
    }
    let t0 = guess.max(chord);
    let t_min = 0.8 * chord;
    let t_max = 6.0 * guess + 1.0;
    let solve_one = |alpha0: f64| -> Option<(f64, f64)> {
        let mut alpha = alpha0;
        let mut t = t0;
        let mut f = residual(alpha, t);
        for _ in 0..NEWTON_MAX_ITERS {
            if f.amax() < ELLIPSOID_NEWTON_TOL {
                return Some((alpha, t));
            }
            let ha = 1e-5;
            let ht = 1e-5 * (1.0 + t);
            let fa = (residual(alpha + ha, t) - residual(alpha - ha, t)) / (2.0 * ha);
            let ft = (residual(alpha, t + ht) - residual(alpha, t - ht)) / (2.0 * ht);
            let jac = DMatrix::from_columns(&[fa, ft]);
            let update = jac.lu().solve(&(-&f))?;
            let mut lambda = 1.0;
            let mut advanced = false;
            for _ in 0..4 {
                let na = alpha + lambda * update[0];
                let nt = t + lambda * update[1];
                if nt.is_finite() && na.is_finite() && nt > t_min.max(1e-9) && nt < t_max {
                    let nf = residual(na, nt);
                    if nf.amax() < f.amax() || lambda < 0.2 {
                        alpha = na;
                        t = nt;
                        f = nf;
                        advanced = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !advanced {
                return None;
            }
        }
        None
    };
    let solved: Vec<(f64, f64)> = seeds
        .into_par_iter()
        .filter_map(solve_one)
        .collect();
    if solved.is_empty() {
        return Err(Error::NoSolutionFound(format!(
            "no embedded shooting start converged between {:?} and {:?}",
            p.coords(),
            q.coords()
        )));
    }
    let mut unique: Vec<(f64, f64)> = Vec::new();
    for (alpha, t) in solved {
        let dup = unique.iter().any(|(ka, kt)| {
            ((ka - alpha).sin().abs() < 1e-5 && (ka - alpha).cos() > 0.0)
                && (kt - t).abs() < 1e-6 * (1.0 + t)
        });
        if !dup {
            unique.push((alpha, t));
        }
    }
    let shortest = unique.iter().map(|(_, t)| *t).fold(f64::INFINITY, f64::min);
    unique.retain(|(_, t)| *t <= shortest * (1.0 + tol_extra) + 1e-12);
    let mut paths = Vec::with_capacity(unique.len());
    for (alpha, t) in unique {
        let unit_chart = ellipsoid_chart_velocity(&axes, &p.x, &dir_of(alpha));
        paths.push(ellipsoid_path(m, p, &unit_chart, t)?);
    }
    certify_and_sort(&mut paths);
    Ok(paths)
}

fn shooting_connections(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
    with_fan: bool,
) -> Result<Vec<GeodesicPath>> {
    if matches!(m.kind(), ManifoldKind::Ellipsoid) {
        return ellipsoid_connections(m, p, q, tol_extra);
    }
    let seeds = shooting_seeds(m, p, q, tol_extra, with_fan)?;
    let guess = m.quick_distance(p, q)?;
    let speed_cap = 50.0 * (1.0 + guess);
    let shots: Vec<Shot> = seeds
        .into_par_iter()
        .filter_map(|seed| shoot_one(m, p, q, seed, speed_cap))
        .collect();
    if shots.is_empty() {
        return Err(Error::NoSolutionFound(format!(
            "no shooting start converged between {:?} and {:?}",
            p.coords(),
            q.coords()
        )));
    }
    // Deduplicate by unit initial direction and length.
    let mut unique: Vec<Shot> = Vec::new();
    for shot in shots {
        let dir = &shot.velocity / shot.length;
        let dup = unique.iter().any(|kept| {
            let kept_dir = &kept.velocity / kept.length;
            (kept_dir - &dir).amax() < 1e-5
                && (kept.length - shot.length).abs() < 1e-6 * (1.0 + shot.length)
        });
        if !dup {
            unique.push(shot);
        }
    }
    let shortest = unique
        .iter()
        .map(|s| s.length)
        .fold(f64::INFINITY, f64::min);
    unique.retain(|s| s.length <= shortest * (1.0 + tol_extra) + 1e-12);
    let mut paths: Vec<GeodesicPath> = unique
        .into_iter()
        .map(|shot| {
            let mut path = path_from_raw(m, shot.raw, shot.length);
            path.length = shot.length;
            path
        })
        .collect();
    certify_and_sort(&mut paths);
    Ok(paths)
}

fn certify_and_sort(paths: &mut Vec<GeodesicPath>) {
    let shortest = paths
        .iter()
        .map(|p| p.length)
        .fold(f64::INFINITY, f64::min);
    for path in paths.iter_mut() {
        path.is_minimal = path.length <= shortest * (1.0 + DELTA_MIN);
        path.min_tol = DELTA_MIN;
    }
    paths.sort_by(|a, b| {
        a.length
            .partial_cmp(&b.length)
            .expect("lengths are finite")
            .then_with(|| {
                a.initial_velocity
                    .v
                    .iter()
                    .partial_cmp(b.initial_velocity.v.iter())
                    .expect("velocities are finite")
            })
    });
}

/// All found geodesics from `p` to `q` with length within `(1 + tol_extra)`
/// of the shortest found, sorted by length then initial direction. `p = q`
/// yields the empty set.
pub fn minimal_geodesics(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
) -> Result<Vec<GeodesicPath>> {
    minimal_geodesics_mode(m, p, q, tol_extra, GeodesicSolver::Auto)
}

/// [`minimal_geodesics`] with an explicit solver choice.
pub fn minimal_geodesics_mode(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
    mode: GeodesicSolver,
) -> Result<Vec<GeodesicPath>> {
    if !(tol_extra >= 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "tol_extra {tol_extra} must be nonnegative"
        )));
    }
    m.check_domain(&p.x)?;
    m.check_domain(&q.x)?;
    if m.chart_diff(&p.x, &q.x).amax() < 1e-14 {
        return Ok(Vec::new());
    }
    let has_closed_form = matches!(
        m.kind(),
        ManifoldKind::Euclidean
            | ManifoldKind::Sphere
            | ManifoldKind::Hyperbolic
            | ManifoldKind::FlatTorus
    );
    let use_closed = match mode {
        GeodesicSolver::Auto => has_closed_form,
        GeodesicSolver::ClosedForm => true,
        GeodesicSolver::Shooting => false,
    };
    if use_closed {
        let mut paths = closed_form_connections(m, p, q, tol_extra)?;
        certify_and_sort(&mut paths);
        Ok(paths)
    } else {
        shooting_connections(m, p, q, tol_extra, true)
    }
}

/// Distance as the length of the shortest found connection. Exact on the
/// model spaces; on the perturbed torus only the near-minimal lattice
/// translates are shot, falling back to the full fan if none converge.
pub fn distance(m: &ManifoldSpec, p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
    match m.kind() {
        ManifoldKind::Euclidean
        | ManifoldKind::Sphere
        | ManifoldKind::Hyperbolic
        | ManifoldKind::FlatTorus => m.model_distance(p, q),
        ManifoldKind::PerturbedTorus => {
            if m.chart_diff(&p.x, &q.x).amax() < 1e-14 {
                return Ok(0.0);
            }
            let paths = match shooting_connections(m, p, q, 0.0, false) {
                Ok(paths) => paths,
                Err(Error::NoSolutionFound(_)) => shooting_connections(m, p, q, 0.0, true)?,
                Err(e) => return Err(e),
            };
            Ok(paths[0].length)
        }
        _ => {
            if m.chart_diff(&p.x, &q.x).amax() < 1e-14 {
                return Ok(0.0);
            }
            let paths = shooting_connections(m, p, q, 0.0, true)?;
            Ok(paths[0].length)
        }
    }
}

// ---------------------------------------------------------------------------
// Jacobi fields and conjugate points
// ---------------------------------------------------------------------------

/// Packed state of the Jacobi propagator:
/// `[x | v | E (n x (n-1)) | Y | Y' ((n-1) x (n-1))]`, column-major blocks.
struct JacobiSystem<'a> {
    m: &'a ManifoldSpec,
    n: usize,
}

impl<'a> JacobiSystem<'a> {
    fn new(m: &'a ManifoldSpec) -> Self {
        Self { m, n: m.dim() }
    }

    fn d(&self) -> usize {
        self.n - 1
    }

    fn state_len(&self) -> usize {
        2 * self.n + self.n * self.d() + 2 * self.d() * self.d()
    }

    fn pack(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        e: &DMatrix<f64>,
        y: &DMatrix<f64>,
        yp: &DMatrix<f64>,
    ) -> DVector<f64> {
        let (n, d) = (self.n, self.d());
        let mut s = DVector::zeros(self.state_len());
        s.rows_mut(0, n).copy_from(x);
        s.rows_mut(n, n).copy_from(v);
        for (j, col) in e.column_iter().enumerate() {
            s.rows_mut(2 * n + j * n, n).copy_from(&col);
        }
        let base = 2 * n + n * d;
        for (j, col) in y.column_iter().enumerate() {
            s.rows_mut(base + j * d, d).copy_from(&col);
        }
        let base = base + d * d;
        for (j, col) in yp.column_iter().enumerate() {
            s.rows_mut(base + j * d, d).copy_from(&col);
        }
        s
    }

    fn unpack(
        &self,
        s: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (n, d) = (self.n, self.d());
        let x = s.rows(0, n).into_owned();
        let v = s.rows(n, n).into_owned();
        let e = DMatrix::from_column_slice(n, d, s.rows(2 * n, n * d).as_slice());
        let base = 2 * n + n * d;
        let y = DMatrix::from_column_slice(d, d, s.rows(base, d * d).as_slice());
        let yp = DMatrix::from_column_slice(d, d, s.rows(base + d * d, d * d).as_slice());
        (x, v, e, y, yp)
    }

    fn det_y(&self, s: &DVector<f64>) -> f64 {
        let (_, _, _, y, _) = self.unpack(s);
        y.determinant()
    }

    fn rhs(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        let (x, v, e, y, yp) = self.unpack(s);
        let point = ChartPoint::from_vector(self.m.wrap(&x));
        let gamma = self.m.christoffel_at(&point)?;
        let riemann = self.m.curvature_at(&point)?;
        let g = self.m.metric_at(&point)?;
        let d = self.d();
        let dv = gamma.acceleration(&v, &v);
        let mut de = DMatrix::zeros(self.n, d);
        let mut rt = DMatrix::zeros(d, d);
        for a in 0..d {
            let ea = e.column(a).into_owned();
            de.set_column(a, &gamma.acceleration(&v, &ea));
            let ra = riemann.apply(&ea, &v, &v);
            let gra = &g * ra;
            for b in 0..d {
                rt[(b, a)] = e.column(b).dot(&gra);
            }
        }
        let dyp = -&rt * &y;
        Ok(self.pack(&v, &dv, &de, &yp, &dyp))
    }

    fn rk4_step(&self, s: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        let k1 = self.rhs(s)?;
        let k2 = self.rhs(&(s + &k1 * (0.5 * h)))?;
        let k3 = self.rhs(&(s + &k2 * (0.5 * h)))?;
        let k4 = self.rhs(&(s + &k3 * h))?;
        Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }

    /// One RK4 step with step-doubling error control. A geodesic passing
    /// near a chart pole makes the Christoffel terms spike; comparing a full
    /// step against two half steps catches exactly those stretches and
    /// subdivides them, while smooth stretches keep the coarse step.
    fn rk4_refined(&self, s: &DVector<f64>, h: f64, depth: u32) -> Result<DVector<f64>> {
        let coarse = self.rk4_step(s, h)?;
        let half = self.rk4_step(s, 0.5 * h)?;
        let fine = self.rk4_step(&half, 0.5 * h)?;
        let err = (&coarse - &fine).amax();
        if err <= JACOBI_REFINE_TOL * (1.0 + fine.amax()) || depth >= JACOBI_REFINE_DEPTH {
            return Ok(fine);
        }
        let mid = self.rk4_refined(s, 0.5 * h, depth + 1)?;
        self.rk4_refined(&mid, 0.5 * h, depth + 1)
    }

    /// Determinant after integrating a partial step `delta` from `s`.
    fn det_after(&self, s: &DVector<f64>, delta: f64) -> Result<f64> {
        if delta <= 0.0 {
            return Ok(self.det_y(s));
        }
        Ok(self.det_y(&self.rk4_refined(s, delta, 0)?))
    }
}

/// Orthonormal basis of the normal space of `v_unit` at `p`.
fn normal_frame(
    m: &ManifoldSpec,
    p: &ChartPoint,
    v_unit: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = m.dim();
    let g = m.metric_at(p)?;
    let frame = m.orthonormal_frame(p)?;
    let mut basis: Vec<DVector<f64>> = vec![v_unit.clone()];
    for col in frame.column_iter() {
        if basis.len() == n {
            break;
        }
        let mut w = col.into_owned();
        for b in &basis {
            let c = (b.transpose() * &g * &w)[(0, 0)];
            w -= b * c;
        }
        let wn = (w.transpose() * &g * &w)[(0, 0)].max(0.0).sqrt();
        if wn > 1e-8 {
            basis.push(w / wn);
        }
    }
    if basis.len() < n {
        return Err(Error::PreconditionViolated(
            "could not complete a normal frame".into(),
        ));
    }
    let mut e = DMatrix::zeros(n, n - 1);
    for (j, b) in basis.iter().skip(1).enumerate() {
        e.set_column(j, b);
    }
    Ok(e)
}

/// Scan for the first conjugate point along the geodesic with initial data
/// `start` (normalized to unit speed), up to `horizon`. The zero of the
/// propagator determinant is bracketed on a fixed grid and refined well
/// below the promised `1e-3` window; even-order touches of zero, which
/// occur on rotationally symmetric spaces, are caught by a minimum probe.
pub fn first_conjugate_time(
    m: &ManifoldSpec,
    start: &TangentVector,
    horizon: f64,
) -> Result<ConjugateReport> {
    if !(horizon > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "horizon {horizon} must be positive"
        )));
    }
    m.check_domain(&start.base.x)?;
    let speed = m.norm(&start.base, &start.v)?;
    if speed < 1e-300 {
        return Err(Error::ArgumentOutOfRange(
            "direction must be nonzero".into(),
        ));
    }
    let v_unit = &start.v / speed;
    let sys = JacobiSystem::new(m);
    let d = sys.d();
    let e0 = normal_frame(m, &start.base, &v_unit)?;
    let mut state = sys.pack(
        &start.base.x,
        &v_unit,
        &e0,
        &DMatrix::zeros(d, d),
        &DMatrix::identity(d, d),
    );
    let h = JACOBI_STEP.min(horizon / 20.0);
    let steps = (horizon / h).ceil() as usize;
    let h = horizon / steps as f64;

    let n = m.dim();
    let mut trace: Vec<(f64, DVector<f64>, DVector<f64>)> =
        vec![(0.0, state.rows(0, n).into_owned(), v_unit.clone())];
    let mut window: VecDeque<(f64, DVector<f64>, f64)> = VecDeque::new();
    window.push_back((0.0, state.clone(), 0.0));
    let mut det_peak: f64 = 0.0;
    let mut found: Option<f64> = None;

    for k in 1..=steps {
        let t = h * k as f64;
        let prev = window.back().expect("window nonempty").1.clone();
        state = sys.rk4_refined(&prev, h, 0)?;
        trace.push((t, state.rows(0, n).into_owned(), state.rows(n, n).into_owned()));
        let det = sys.det_y(&state);
        window.push_back((t, state.clone(), det));
        if window.len() > 3 {
            window.pop_front();
        }
        if window.len() >= 2 {
            let m1 = &window[window.len() - 2];
            let m2 = &window[window.len() - 1];
            // Touch of zero without a sign change, checked at the middle node.
            if window.len() == 3 {
                let e0w = &window[0];
                let mid = &window[1];
                let last = &window[2];
                let dip = mid.2.abs() <= e0w.2.abs()
                    && mid.2.abs() <= last.2.abs()
                    && mid.2.abs() < 1e-4 * det_peak;
                if dip {
                    if let Some(t_star) =
                        refine_touch(&sys, &e0w.1, e0w.0, last.0 - e0w.0, e0w.2, last.2)?
                    {
                        found = Some(t_star);
                    }
                }
            }
            // Plain sign change on the newest interval.
            if found.is_none() && (m1.2 * m2.2 < 0.0 || (m1.2 == 0.0 && m1.0 > 0.0 && m2.2 < 0.0))
            {
                let t_star = refine_crossing(&sys, &m1.1, m1.0, m2.0 - m1.0, m1.2)?;
                found = Some(t_star);
            }
        }
        det_peak = det_peak.max(det.abs());
        if found.is_some() {
            break;
        }
    }

    let geodesic = assemble_jacobi_path(m, trace);
    Ok(ConjugateReport {
        geodesic,
        first_conjugate_time: found,
        horizon,
    })
}

fn assemble_jacobi_path(
    m: &ManifoldSpec,
    trace: Vec<(f64, DVector<f64>, DVector<f64>)>,
) -> GeodesicPath {
    let samples: Vec<(f64, ChartPoint)> = trace
        .iter()
        .map(|(t, x, _)| (*t, ChartPoint::from_vector(m.wrap(x))))
        .collect();
    let velocities: Vec<DVector<f64>> = trace.into_iter().map(|(_, _, v)| v).collect();
    let start = samples.first().expect("trace nonempty").1.clone();
    let (length, end) = samples.last().expect("trace nonempty").clone();
    GeodesicPath {
        start: start.clone(),
        initial_velocity: TangentVector {
            base: start,
            v: velocities.first().expect("trace nonempty").clone(),
        },
        final_velocity: TangentVector {
            base: end,
            v: velocities.last().expect("trace nonempty").clone(),
        },
        length,
        samples,
        sample_velocities: velocities,
        is_minimal: false,
        min_tol: 0.0,
    }
}

/// Bisection on the determinant sign over `[t0, t0 + width]`.
fn refine_crossing(
    sys: &JacobiSystem<'_>,
    base: &DVector<f64>,
    t0: f64,
    width: f64,
    f_lo: f64,
) -> Result<f64> {
    let sign_lo = if f_lo == 0.0 { 1.0 } else { f_lo.signum() };
    let mut lo = 0.0;
    let mut hi = width;
    while hi - lo > CONJ_LOCATE_TOL {
        let mid = 0.5 * (lo + hi);
        let f = sys.det_after(base, mid)?;
        if sign_lo * f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(t0 + 0.5 * (lo + hi))
}

/// Golden-section probe of `|det|` over `[t0, t0 + width]`; accepts the
/// minimizer as a conjugate time only when the dip is deep relative to the
/// bracket edges, which separates an even-order zero from a shallow pass.
fn refine_touch(
    sys: &JacobiSystem<'_>,
    base: &DVector<f64>,
    t0: f64,
    width: f64,
    f_left: f64,
    f_right: f64,
) -> Result<Option<f64>> {
    let inv_phi = 0.618_033_988_749_894_9_f64;
    let mut a = 0.0;
    let mut b = width;
    let mut c = b - (b - a) * inv_phi;
    let mut dd = a + (b - a) * inv_phi;
    let mut fc = sys.det_after(base, c)?.abs();
    let mut fd = sys.det_after(base, dd)?.abs();
    while b - a > CONJ_LOCATE_TOL {
        if fc < fd {
            b = dd;
            dd = c;
            fd = fc;
            c = b - (b - a) * inv_phi;
            fc = sys.det_after(base, c)?.abs();
        } else {
            a = c;
            c = dd;
            fc = fd;
            dd = a + (b - a) * inv_phi;
            fd = sys.det_after(base, dd)?.abs();
        }
    }
    let t_star = t0 + 0.5 * (a + b);
    let f_min = fc.min(fd);
    let edge = f_left.abs().min(f_right.abs());
    if f_min <= 0.02 * edge {
        Ok(Some(t_star))
    } else {
        Ok(None)
    }
}

/// Minimum of [`first_conjugate_time`] over seeded random starts; returns
/// the infinity sentinel when no sample sees a conjugate point. Starts whose
/// propagation leaves the chart are skipped.
pub fn estimate_conjugate_radius(
    m: &ManifoldSpec,
    n_samples: usize,
    horizon: f64,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::ArgumentOutOfRange(
            "n_samples must be at least one".into(),
        ));
    }
    let outcomes: Vec<Option<Option<f64>>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed_seed(seed, "conjugate-radius", i as u64));
            let p = m.sample_point(&mut rng);
            let frame = match m.orthonormal_frame(&p) {
                Ok(f) => f,
                Err(_) => return None,
            };
            let raw = sample_unit_ball(m.dim(), &mut rng);
            let norm = raw.norm();
            if norm < 1e-12 {
                return None;
            }
            let v = frame * (raw / norm);
            match first_conjugate_time(m, &TangentVector { base: p, v }, horizon) {
                Ok(report) => Some(report.first_conjugate_time),
                Err(_) => None,
            }
        })
        .collect();
    let succeeded = outcomes.iter().flatten().count();
    if succeeded == 0 {
        return Err(Error::SamplingBudgetExceeded(format!(
            "all {n_samples} conjugate-point scans failed to propagate"
        )));
    }
    Ok(outcomes
        .into_iter()
        .flatten()
        .flatten()
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::DeckLattice;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn unit_torus() -> ManifoldSpec {
        ManifoldSpec::flat_torus(DeckLattice::identity(2)).unwrap()
    }

    #[test]
    fn euclidean_segment_is_exact() {
        let m = ManifoldSpec::euclidean(2).unwrap();
        let p = m.point(vec![0.0, 0.0]).unwrap();
        let v = TangentVector {
            base: p,
            v: DVector::from_vec(vec![1.0, 0.0]),
        };
        let path = integrate_geodesic(&m, &v, 1.0, DEFAULT_STEP).unwrap();
        let end = path.endpoint();
        assert_relative_eq!(end.x[0], 1.0, epsilon = 1e-12);
        assert!(end.x[1].abs() < 1e-12);
        assert!(path.speed_drift(&m).unwrap() < 1e-10);
    }

    #[test]
    fn sphere_equator_great_circle_closes() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.3]).unwrap();
        let v = TangentVector {
            base: p.clone(),
            v: DVector::from_vec(vec![0.0, 1.0]),
        };
        let path = integrate_geodesic(&m, &v, TAU, DEFAULT_STEP).unwrap();
        let gap = m.chart_diff(&p.x, &path.endpoint().x).norm();
        assert!(gap < 1e-4, "equator fails to close, gap {gap:.2e}");
    }

    #[test]
    fn torus_loop_returns_home() {
        let m = unit_torus();
        let p = m.point(vec![0.0, 0.0]).unwrap();
        let v = TangentVector {
            base: p.clone(),
            v: DVector::from_vec(vec![1.0, 0.0]),
        };
        let path = integrate_geodesic(&m, &v, 1.0, DEFAULT_STEP).unwrap();
        let gap = m.chart_diff(&p.x, &path.endpoint().x).norm();
        assert!(gap < 1e-9, "loop fails to wrap home, gap {gap:.2e}");
    }

    #[test]
    fn energy_conserved_across_catalog() {
        let manifolds = vec![
            ManifoldSpec::sphere(2, 1.0).unwrap(),
            ManifoldSpec::hyperbolic(2, -1.0).unwrap(),
            ManifoldSpec::ellipsoid(1.0, 1.0, 0.8).unwrap(),
            ManifoldSpec::revolution(2.0, 0.5).unwrap(),
            ManifoldSpec::perturbed_torus(DeckLattice::identity(2), 0.08).unwrap(),
        ];
        for (i, m) in manifolds.iter().enumerate() {
            let mut rng = rng_from_seed(derive_indexed_seed(7, "energy", i as u64));
            let p = m.sample_point(&mut rng);
            let frame = m.orthonormal_frame(&p).unwrap();
            let dir = sample_unit_ball(m.dim(), &mut rng);
            let v = frame * (&dir / dir.norm());
            let path = integrate_geodesic(
                &m,
                &TangentVector { base: p, v },
                2.0,
                DEFAULT_STEP,
            )
            .unwrap();
            let drift = path.speed_drift(m).unwrap();
            assert!(drift < 1e-5, "{}: speed drift {drift:.2e}", m.id());
        }
    }

    #[test]
    fn integrated_endpoint_realizes_model_distance() {
        let cases = vec![
            (ManifoldSpec::sphere(2, 2.0).unwrap(), 2.0),
            (ManifoldSpec::hyperbolic(2, -1.0).unwrap(), 4.0),
            (ManifoldSpec::hyperbolic(3, -0.5).unwrap(), 3.0),
        ];
        for (m, t_end) in cases {
            let p = m.sampling_center();
            let frame = m.orthonormal_frame(&p).unwrap();
            // Last frame direction: on the sphere chart this runs along the
            // equator and stays clear of the pole bands.
            let v = frame.column(m.dim() - 1).into_owned();
            let path = integrate_geodesic(
                &m,
                &TangentVector {
                    base: p.clone(),
                    v,
                },
                t_end,
                DEFAULT_STEP,
            )
            .unwrap();
            let d = m.model_distance(&p, path.endpoint()).unwrap();
            assert_relative_eq!(d, t_end, epsilon = 1e-4);
        }
    }

    #[test]
    fn leaving_chart_reports_truncated_prefix() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let v = TangentVector {
            base: p,
            v: DVector::from_vec(vec![-1.0, 0.0]),
        };
        match integrate_geodesic(&m, &v, 3.0, DEFAULT_STEP) {
            Err(Error::LeftChartDomain { t, samples }) => {
                let expected = FRAC_PI_2 - 1e-3;
                assert!((t - expected).abs() < 5e-3, "exit time {t}");
                assert!(!samples.is_empty());
                assert!(samples.last().unwrap().0 <= t + 1e-12);
            }
            other => panic!("expected chart exit, got {other:?}"),
        }
    }

    #[test]
    fn minimal_geodesics_euclidean_line() {
        let m = ManifoldSpec::euclidean(3).unwrap();
        let p = m.point(vec![0.0, 0.0, 0.0]).unwrap();
        let q = m.point(vec![3.0, 4.0, 0.0]).unwrap();
        let paths = minimal_geodesics(&m, &p, &q, 0.0).unwrap();
        assert_eq!(paths.len(), 1);
        assert_relative_eq!(paths[0].length, 5.0, epsilon = 1e-12);
        assert!(paths[0].is_minimal);
        assert!(minimal_geodesics(&m, &p, &p, 0.0).unwrap().is_empty());
    }

    #[test]
    fn sphere_pair_below_injectivity_has_one_connection() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let q = m.point(vec![FRAC_PI_2, 1.0]).unwrap();
        let paths = minimal_geodesics(&m, &p, &q, 1e-3).unwrap();
        assert_eq!(paths.len(), 1);
        assert_relative_eq!(paths[0].length, 1.0, epsilon = 1e-10);
        let v0 = &paths[0].initial_velocity.v;
        assert!(v0[0].abs() < 1e-9 && (v0[1] - 1.0).abs() < 1e-9);
        assert!(paths[0].speed_drift(&m).unwrap() < 1e-8);
    }

    #[test]
    fn sphere_antipodal_pair_has_a_fan() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let q = m.point(vec![FRAC_PI_2, PI]).unwrap();
        let paths = minimal_geodesics(&m, &p, &q, 1e-3).unwrap();
        assert!(paths.len() >= 8, "only {} antipodal connections", paths.len());
        for path in &paths {
            assert_relative_eq!(path.length, PI, epsilon = 1e-3);
            assert!(path.is_minimal);
        }
    }

    #[test]
    fn torus_pair_connects_both_ways_around() {
        let m = unit_torus();
        let p = m.point(vec![0.0, 0.0]).unwrap();
        let q = m.point(vec![0.5, 0.0]).unwrap();
        let paths = minimal_geodesics(&m, &p, &q, 0.0).unwrap();
        assert_eq!(paths.len(), 2);
        for path in &paths {
            assert_relative_eq!(path.length, 0.5, epsilon = 1e-12);
            assert!(path.is_minimal);
        }
        let dirs: Vec<f64> = paths.iter().map(|p| p.initial_velocity.v[0]).collect();
        assert!(dirs.iter().any(|d| *d > 0.0) && dirs.iter().any(|d| *d < 0.0));
    }

    #[test]
    fn hyperbolic_connection_matches_model_distance() {
        let m = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
        let mut rng = rng_from_seed(11);
        for _ in 0..25 {
            let p = m.sample_point(&mut rng);
            let q = m.sample_point(&mut rng);
            if m.chart_diff(&p.x, &q.x).amax() < 1e-12 {
                continue;
            }
            let forward = minimal_geodesics(&m, &p, &q, 0.0).unwrap();
            let backward = minimal_geodesics(&m, &q, &p, 0.0).unwrap();
            assert_eq!(forward.len(), 1);
            let d = m.model_distance(&p, &q).unwrap();
            assert_relative_eq!(forward[0].length, d, epsilon = 1e-10);
            assert!((forward[0].length - backward[0].length).abs() < 1e-6);
            let end = forward[0].endpoint();
            assert!(m.chart_diff(&end.x, &q.x).norm() < 1e-12);
            assert!(forward[0].speed_drift(&m).unwrap() < 1e-5);
        }
    }

    #[test]
    fn shooting_agrees_with_closed_forms() {
        let sphere = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = sphere.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let q = sphere.point(vec![FRAC_PI_2, 1.0]).unwrap();
        let shot =
            minimal_geodesics_mode(&sphere, &p, &q, 1e-3, GeodesicSolver::Shooting).unwrap();
        assert!((shot[0].length - 1.0).abs() < 1e-4);

        let torus = unit_torus();
        let p = torus.point(vec![0.0, 0.0]).unwrap();
        let q = torus.point(vec![0.5, 0.0]).unwrap();
        let shot = minimal_geodesics_mode(&torus, &p, &q, 0.0, GeodesicSolver::Shooting).unwrap();
        assert!(shot.len() >= 2, "wrap pair not found by shooting");
        assert!((shot[0].length - 0.5).abs() < 1e-6);
        assert!((shot[1].length - 0.5).abs() < 1e-6);

        let hyp = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
        let p = hyp.point(vec![0.1, 0.2]).unwrap();
        let q = hyp.point(vec![-0.3, 0.25]).unwrap();
        let shot = minimal_geodesics_mode(&hyp, &p, &q, 0.0, GeodesicSolver::Shooting).unwrap();
        let d = hyp.model_distance(&p, &q).unwrap();
        assert!((shot[0].length - d).abs() < 1e-6);
    }

    #[test]
    fn round_ellipsoid_reproduces_sphere_distances() {
        let m = ManifoldSpec::ellipsoid(1.0, 1.0, 1.0).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let q = m.point(vec![FRAC_PI_2, 1.0]).unwrap();
        let paths = minimal_geodesics(&m, &p, &q, 1e-3).unwrap();
        assert!((paths[0].length - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equator_arcs_are_geodesics_on_surfaces() {
        let ellipsoid = ManifoldSpec::ellipsoid(1.0, 1.0, 0.8).unwrap();
        let p = ellipsoid.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let q = ellipsoid.point(vec![FRAC_PI_2, 1.2]).unwrap();
        let paths = minimal_geodesics(&ellipsoid, &p, &q, 0.0).unwrap();
        assert!((paths[0].length - 1.2).abs() < 1e-6);

        let torus_rev = ManifoldSpec::revolution(2.0, 0.5).unwrap();
        let p = torus_rev.point(vec![0.0, 0.0]).unwrap();
        let q = torus_rev.point(vec![0.0, 1.0]).unwrap();
        let paths = minimal_geodesics(&torus_rev, &p, &q, 0.0).unwrap();
        assert!((paths[0].length - 2.5).abs() < 1e-6);
    }

    #[test]
    fn distances_satisfy_triangle_inequality() {
        let sphere = ManifoldSpec::sphere(2, 1.0).unwrap();
        let mut rng = rng_from_seed(23);
        for _ in 0..100 {
            let (p, q, r) = (
                sphere.sample_point(&mut rng),
                sphere.sample_point(&mut rng),
                sphere.sample_point(&mut rng),
            );
            let dpq = distance(&sphere, &p, &q).unwrap();
            let dqr = distance(&sphere, &q, &r).unwrap();
            let dpr = distance(&sphere, &p, &r).unwrap();
            assert!(dpq + dqr >= dpr - 1e-6);
        }
        let ptorus =
            ManifoldSpec::perturbed_torus(DeckLattice::identity(2), 0.05).unwrap();
        let mut rng = rng_from_seed(29);
        for _ in 0..25 {
            let (p, q, r) = (
                ptorus.sample_point(&mut rng),
                ptorus.sample_point(&mut rng),
                ptorus.sample_point(&mut rng),
            );
            let dpq = distance(&ptorus, &p, &q).unwrap();
            let dqr = distance(&ptorus, &q, &r).unwrap();
            let dpr = distance(&ptorus, &p, &r).unwrap();
            assert!(dpq + dqr >= dpr - 1e-6, "{dpq} + {dqr} < {dpr}");
        }
    }

    #[test]
    fn conjugate_time_on_spheres_is_pi_over_root_k() {
        for (n, k) in [(2usize, 1.0f64), (3, 1.0), (2, 4.0)] {
            let m = ManifoldSpec::sphere(n, k).unwrap();
            let mut rng = rng_from_seed(derive_indexed_seed(5, "conj", n as u64));
            let p = m.sample_point(&mut rng);
            let frame = m.orthonormal_frame(&p).unwrap();
            let raw = sample_unit_ball(n, &mut rng);
            let v = frame * (&raw / raw.norm());
            let report =
                first_conjugate_time(&m, &TangentVector { base: p, v }, 4.0).unwrap();
            let expected = PI / k.sqrt();
            let got = report
                .first_conjugate_time
                .expect("sphere must have a conjugate point");
            assert!(
                (got - expected).abs() < 1e-3,
                "n = {n}, K = {k}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn flat_and_hyperbolic_sides_have_no_conjugate_points() {
        let cases = vec![
            ManifoldSpec::euclidean(2).unwrap(),
            ManifoldSpec::hyperbolic(2, -1.0).unwrap(),
            unit_torus(),
        ];
        for m in cases {
            let p = m.sampling_center();
            let frame = m.orthonormal_frame(&p).unwrap();
            let v = frame.column(0).into_owned();
            let report =
                first_conjugate_time(&m, &TangentVector { base: p, v }, 10.0).unwrap();
            assert!(
                report.first_conjugate_time.is_none(),
                "{}: spurious conjugate point",
                m.id()
            );
        }
    }

    #[test]
    fn oblate_equator_conjugate_time() {
        // Along the equator of the (1, 1, 0.8) ellipsoid the Gauss curvature
        // is the constant 1/0.64, so the first conjugate time is 0.8 pi.
        let m = ManifoldSpec::ellipsoid(1.0, 1.0, 0.8).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.0]).unwrap();
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let report = first_conjugate_time(&m, &TangentVector { base: p, v }, 4.0).unwrap();
        let got = report.first_conjugate_time.expect("conjugate point exists");
        assert!(
            (got - 0.8 * PI).abs() < 1e-3,
            "got {got}, expected {}",
            0.8 * PI
        );
    }

    #[test]
    fn conjugate_radius_estimates() {
        let flat = ManifoldSpec::euclidean(3).unwrap();
        let r = estimate_conjugate_radius(&flat, 6, 8.0, 3).unwrap();
        assert!(r.is_infinite());

        let m = ManifoldSpec::sphere(2, 4.0).unwrap();
        let r = estimate_conjugate_radius(&m, 12, 4.0, 3).unwrap();
        assert!((r - FRAC_PI_2).abs() < 1e-2, "estimate {r}");
    }

    #[test]
    fn solver_outputs_are_deterministic() {
        let m = ManifoldSpec::ellipsoid(1.0, 1.0, 0.8).unwrap();
        let p = m.point(vec![1.1, 0.4]).unwrap();
        let q = m.point(vec![1.9, 2.0]).unwrap();
        let a = minimal_geodesics(&m, &p, &q, 0.1).unwrap();
        let b = minimal_geodesics(&m, &p, &q, 0.1).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.length.to_bits(), y.length.to_bits());
        }
        let r1 = estimate_conjugate_radius(&m, 8, 4.0, 17).unwrap();
        let r2 = estimate_conjugate_radius(&m, 8, 4.0, 17).unwrap();
        assert_eq!(r1.to_bits(), r2.to_bits());
    }

    #[test]
    fn exp_map_matches_integration_endpoint() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.point(vec![FRAC_PI_2, 0.25]).unwrap();
        let v = TangentVector {
            base: p.clone(),
            v: DVector::from_vec(vec![0.3, 0.7]),
        };
        let end = exp_map(&m, &v).unwrap();
        let speed = m.norm(&p, &v.v).unwrap();
        let path = integrate_geodesic(&m, &v, speed, DEFAULT_STEP).unwrap();
        assert!(m.chart_diff(&end.x, &path.endpoint().x).norm() < 1e-12);
    }
}
