//! Geodesic triangles, model-space comparison angles, and the empirical
//! angle-comparison-radius estimator.

use crate::error::{Error, Result};
use crate::geodesic::{minimal_geodesics_mode, GeodesicPath, GeodesicSolver};
use crate::manifold::{ChartPoint, ManifoldSpec};
use crate::rng::{derive_indexed_seed, rng_from_seed};
use rayon::prelude::*;

/// Comparison factor from the angle estimate the triangle check defaults to.
pub const MU_STANDARD: f64 = 18.0 / 19.0;

/// Cosine arguments within this distance of +-1 are clamped; anything
/// further out is a genuine triangle-inequality violation.
const COS_CLAMP_TOL: f64 = 1e-12;

/// Vertex pairs closer than this are rejected as degenerate.
const VERTEX_TOL: f64 = 1e-8;

/// Corners adjacent to a side shorter than this are excluded from pass/fail.
const SIDE_DEGENERATE_TOL: f64 = 1e-6;

/// Required chart-coordinate agreement where consecutive sides meet.
const CLOSURE_TOL: f64 = 1e-6;

/// Bisection steps used by `estimate_rac` (resolution r_max / 4096).
const RAC_BISECTION_STEPS: usize = 12;

/// Attempts per sampled triangle before giving up on a radius.
const TRIANGLE_SAMPLE_ATTEMPTS: usize = 64;

/// Angle of the model triangle with side lengths `l_prev`, `l_next` and
/// opposite side `l_opp`, in the simply connected surface of constant
/// curvature `h`.
///
/// For `h = 0` this is the Euclidean law of cosines; positive and negative
/// `h` use the spherical and hyperbolic laws. The cosine argument is clamped
/// when within `1e-12` of +-1 so collinear triples land exactly on 0 or pi.
pub fn comparison_angle(h: f64, l_prev: f64, l_next: f64, l_opp: f64) -> Result<f64> {
    if !(l_prev > 0.0 && l_next > 0.0 && l_opp > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "triangle side lengths must be positive, got ({l_prev}, {l_next}, {l_opp})"
        )));
    }
    let perimeter = l_prev + l_next + l_opp;
    // Side-length slack proportional to the data; the cosine clamp below
    // handles the conditioning of the arccos itself.
    let slack = 1e-12 * perimeter;
    if l_opp > l_prev + l_next + slack || l_opp < (l_prev - l_next).abs() - slack {
        return Err(Error::TriangleInequalityViolation(l_prev, l_next, l_opp));
    }
    if h > 0.0 {
        let limit = std::f64::consts::TAU / h.sqrt();
        if perimeter >= limit {
            return Err(Error::PerimeterTooLarge { perimeter, limit });
        }
    }
    let cos = if h == 0.0 {
        (l_prev * l_prev + l_next * l_next - l_opp * l_opp) / (2.0 * l_prev * l_next)
    } else if h > 0.0 {
        // Triangle inequality + perimeter < 2 pi / sqrt(h) force every side
        // below pi / sqrt(h), so the sines are positive.
        let s = h.sqrt();
        let (a, b, c) = (l_prev * s, l_next * s, l_opp * s);
        (c.cos() - a.cos() * b.cos()) / (a.sin() * b.sin())
    } else {
        let s = (-h).sqrt();
        let (a, b, c) = (l_prev * s, l_next * s, l_opp * s);
        (a.cosh() * b.cosh() - c.cosh()) / (a.sinh() * b.sinh())
    };
    if cos > 1.0 + COS_CLAMP_TOL || cos < -1.0 - COS_CLAMP_TOL {
        return Err(Error::TriangleInequalityViolation(l_prev, l_next, l_opp));
    }
    Ok(cos.clamp(-1.0, 1.0).acos())
}

/// Three minimal geodesics with cyclically matching endpoints.
///
/// Side `i` runs from vertex `i` to vertex `i + 1` (mod 3); the angle
/// `angles[i]` sits at the corner opposite side `i` and is measured between
/// the reversed incoming velocity and the outgoing one in the metric there.
#[derive(Debug, Clone)]
pub struct GeodesicTriangle {
    pub sides: [GeodesicPath; 3],
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
}

impl GeodesicTriangle {
    pub fn vertex(&self, i: usize) -> &ChartPoint {
        &self.sides[i % 3].start
    }

    pub fn max_length(&self) -> f64 {
        self.lengths.iter().cloned().fold(0.0, f64::max)
    }
}

/// Measure the geodesic triangle with the given vertices, taking the
/// shortest found connection for each side.
pub fn measure_triangle(
    m: &ManifoldSpec,
    p0: &ChartPoint,
    p1: &ChartPoint,
    p2: &ChartPoint,
) -> Result<GeodesicTriangle> {
    measure_triangle_mode(m, p0, p1, p2, GeodesicSolver::Auto)
}

/// As `measure_triangle`, but forcing the boundary-value solver, e.g. the
/// shooting integrator on manifolds that also have closed forms.
pub fn measure_triangle_mode(
    m: &ManifoldSpec,
    p0: &ChartPoint,
    p1: &ChartPoint,
    p2: &ChartPoint,
    mode: GeodesicSolver,
) -> Result<GeodesicTriangle> {
    let vertices = [p0, p1, p2];
    for i in 0..3 {
        let d = m.quick_distance(vertices[i], vertices[(i + 1) % 3])?;
        if d < VERTEX_TOL {
            return Err(Error::DegenerateVertex(d));
        }
    }
    let mut sides = Vec::with_capacity(3);
    for i in 0..3 {
        let paths = minimal_geodesics_mode(m, vertices[i], vertices[(i + 1) % 3], 0.0, mode)?;
        let side = paths
            .into_iter()
            .next()
            .ok_or(Error::DegenerateVertex(0.0))?;
        if side.length < VERTEX_TOL {
            return Err(Error::DegenerateVertex(side.length));
        }
        sides.push(side);
    }
    let sides: [GeodesicPath; 3] = sides.try_into().expect("three sides");
    for i in 0..3 {
        let gap = m
            .chart_diff(&sides[i].endpoint().x, &sides[(i + 1) % 3].start.x)
            .norm();
        if gap > CLOSURE_TOL {
            return Err(Error::NoSolutionFound(format!(
                "triangle sides fail to close: gap {gap:.3e} between side {i} and side {}",
                (i + 1) % 3
            )));
        }
    }
    let lengths = [sides[0].length, sides[1].length, sides[2].length];
    let mut angles = [0.0; 3];
    for i in 0..3 {
        // Corner at vertex i+2 is opposite side i: incoming side i+1 ends
        // there, outgoing side i+2 starts there.
        let incoming = &sides[(i + 1) % 3];
        let outgoing = &sides[(i + 2) % 3];
        angles[i] = m.angle_between(
            &outgoing.start,
            &(-&incoming.final_velocity.v),
            &outgoing.initial_velocity.v,
        )?;
    }
    Ok(GeodesicTriangle {
        sides,
        lengths,
        angles,
    })
}

/// Result of checking `alpha_i > mu * comparison_angle_i` on a triangle.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
    pub comparison_angles: [f64; 3],
    /// `angles[i] / comparison_angles[i]`, infinite when the comparison
    /// angle vanishes.
    pub ratios: [f64; 3],
    pub mu: f64,
    pub pass: bool,
    pub degenerate_corners: [bool; 3],
}

impl ComparisonReport {
    pub fn csv_header() -> &'static str {
        "manifold,r,l0,l1,l2,alpha0,alpha1,alpha2,bar_alpha0,bar_alpha1,bar_alpha2,mu,pass"
    }

    /// One CSV row; `r` is the sampling radius the triangle came from.
    /// The manifold id is quoted because ids may contain commas.
    pub fn csv_row(&self, manifold: &str, r: f64) -> String {
        format!(
            "\"{manifold}\",{r},{},{},{},{},{},{},{},{},{},{},{}",
            self.lengths[0],
            self.lengths[1],
            self.lengths[2],
            self.angles[0],
            self.angles[1],
            self.angles[2],
            self.comparison_angles[0],
            self.comparison_angles[1],
            self.comparison_angles[2],
            self.mu,
            self.pass
        )
    }
}

/// Compare every corner of `t` against `mu` times its Euclidean comparison
/// angle. Corners adjacent to a side shorter than `1e-6` are flagged
/// degenerate and excluded from the verdict.
pub fn check_toponogov(t: &GeodesicTriangle, mu: f64) -> Result<ComparisonReport> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "comparison factor must lie in (0, 1], got {mu}"
        )));
    }
    let l = t.lengths;
    let mut comparison_angles = [0.0; 3];
    let mut ratios = [0.0; 3];
    let mut degenerate = [false; 3];
    let mut pass = true;
    for i in 0..3 {
        comparison_angles[i] = comparison_angle(0.0, l[(i + 1) % 3], l[(i + 2) % 3], l[i])?;
        ratios[i] = t.angles[i] / comparison_angles[i];
        // The corner opposite side i is where the other two sides meet.
        degenerate[i] =
            l[(i + 1) % 3] < SIDE_DEGENERATE_TOL || l[(i + 2) % 3] < SIDE_DEGENERATE_TOL;
        if !degenerate[i] && t.angles[i] <= mu * comparison_angles[i] {
            pass = false;
        }
    }
    Ok(ComparisonReport {
        lengths: l,
        angles: t.angles,
        comparison_angles,
        ratios,
        mu,
        pass,
        degenerate_corners: degenerate,
    })
}

/// Sample one triangle with vertices in the chart ball of radius `r` around
/// `center` and report whether it passes the comparison check.
///
/// Triples with a pair closer than `r / 20` are rejected as slivers.
/// Solver failures and comparison angles rendered meaningless by collinear
/// roundoff consume attempts instead of failing the radius.
fn sample_and_check(
    m: &ManifoldSpec,
    center: &ChartPoint,
    r: f64,
    mu: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<bool> {
    for _ in 0..TRIANGLE_SAMPLE_ATTEMPTS {
        let a = m.sample_chart_ball(center, r, rng)?;
        let b = m.sample_chart_ball(center, r, rng)?;
        let c = m.sample_chart_ball(center, r, rng)?;
        let mut sliver = false;
        for (u, v) in [(&a, &b), (&b, &c), (&c, &a)] {
            if m.quick_distance(u, v)? < r / 20.0 {
                sliver = true;
                break;
            }
        }
        if sliver {
            continue;
        }
        match measure_triangle(m, &a, &b, &c) {
            Ok(t) => match check_toponogov(&t, mu) {
                Ok(report) => return Ok(report.pass),
                Err(Error::TriangleInequalityViolation(..)) => continue,
                Err(e) => return Err(e),
            },
            Err(Error::NoSolutionFound(_)) | Err(Error::DegenerateVertex(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SamplingBudgetExceeded(format!(
        "no usable triangle found in the radius-{r:.4} ball after {TRIANGLE_SAMPLE_ATTEMPTS} attempts"
    )))
}

/// All `n_triangles` seeded triangles at radius `r` pass the check.
fn radius_passes(
    m: &ManifoldSpec,
    center: &ChartPoint,
    r: f64,
    mu: f64,
    n_triangles: usize,
    seed: u64,
    level: usize,
) -> Result<bool> {
    let verdicts: Result<Vec<bool>> = (0..n_triangles)
        .into_par_iter()
        .map(|i| {
            let shard = derive_indexed_seed(seed, "rac-triangle", (level * n_triangles + i) as u64);
            let mut rng = rng_from_seed(shard);
            sample_and_check(m, center, r, mu, &mut rng)
        })
        .collect();
    Ok(verdicts?.into_iter().all(|pass| pass))
}

/// Largest radius within `(0, r_max]`, to bisection resolution
/// `r_max / 4096`, at which all sampled triangles with vertices in the chart
/// ball around `p` satisfy the comparison check with factor `mu`.
///
/// Returns `r_max` when the full radius already passes and `0` when every
/// probed radius fails. The estimate has one-sided Monte Carlo error: more
/// triangles can only shrink it.
pub fn estimate_rac(
    m: &ManifoldSpec,
    p: &ChartPoint,
    mu: f64,
    r_max: f64,
    n_triangles: usize,
    seed: u64,
) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "comparison factor must lie in (0, 1), got {mu}"
        )));
    }
    if n_triangles == 0 {
        return Err(Error::ArgumentOutOfRange(
            "need at least one triangle per radius".into(),
        ));
    }
    if !(r_max > 0.0) {
        return Err(Error::ArgumentOutOfRange(format!(
            "r_max must be positive, got {r_max}"
        )));
    }
    if radius_passes(m, p, r_max, mu, n_triangles, seed, 0)? {
        return Ok(r_max);
    }
    let (mut lo, mut hi) = (0.0, r_max);
    for level in 1..=RAC_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if radius_passes(m, p, mid, mu, n_triangles, seed, level)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, PI};

    #[test]
    fn euclidean_right_triangle_angle() {
        let a = comparison_angle(0.0, 3.0, 4.0, 5.0).unwrap();
        assert_relative_eq!(a, FRAC_PI_2, epsilon = 1e-14);
    }

    #[test]
    fn euclidean_equilateral_angle() {
        let a = comparison_angle(0.0, 1.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(a, FRAC_PI_3, epsilon = 1e-14);
    }

    #[test]
    fn euclidean_collinear_angle() {
        let a = comparison_angle(0.0, 1.0, 1.0, 2.0).unwrap();
        assert_relative_eq!(a, PI, epsilon = 1e-14);
        let b = comparison_angle(0.0, 1.0, 3.0, 2.0).unwrap();
        assert_relative_eq!(b, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn comparison_angle_rejects_bad_inputs() {
        assert!(matches!(
            comparison_angle(0.0, 1.0, 1.0, 2.1),
            Err(Error::TriangleInequalityViolation(..))
        ));
        assert!(matches!(
            comparison_angle(0.0, 1.0, 3.0, 1.0),
            Err(Error::TriangleInequalityViolation(..))
        ));
        assert!(matches!(
            comparison_angle(0.0, -1.0, 1.0, 1.0),
            Err(Error::ArgumentOutOfRange(_))
        ));
        assert!(matches!(
            comparison_angle(1.0, 3.0, 3.0, 3.0),
            Err(Error::PerimeterTooLarge { .. })
        ));
    }

    #[test]
    fn curved_model_angles() {
        // Octant of the unit sphere: all sides pi/2, all angles pi/2.
        let oct = comparison_angle(1.0, FRAC_PI_2, FRAC_PI_2, FRAC_PI_2).unwrap();
        assert_relative_eq!(oct, FRAC_PI_2, epsilon = 1e-12);
        // Positive curvature opens equilateral corners, negative closes them.
        let sph = comparison_angle(1.0, 1.0, 1.0, 1.0).unwrap();
        let hyp = comparison_angle(-1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(sph > FRAC_PI_3 + 0.05);
        assert!(hyp < FRAC_PI_3 - 0.04);
        // Tiny triangles are Euclidean to second order in either sign.
        let flat = comparison_angle(0.0, 0.01, 0.01, 0.01).unwrap();
        for h in [1.0, -1.0] {
            let a = comparison_angle(h, 0.01, 0.01, 0.01).unwrap();
            assert_relative_eq!(a, flat, epsilon = 1e-4);
        }
    }

    #[test]
    fn comparison_angles_sum_to_pi() {
        let mut rng = rng_from_seed(0x5eed_0001);
        for _ in 0..50 {
            let ax: f64 = rng.gen_range(-1.0..1.0);
            let ay: f64 = rng.gen_range(-1.0..1.0);
            let bx: f64 = rng.gen_range(-1.0..1.0);
            let by: f64 = rng.gen_range(-1.0..1.0);
            let l0 = (ax * ax + ay * ay).sqrt();
            let l1 = ((bx - ax) * (bx - ax) + (by - ay) * (by - ay)).sqrt();
            let l2 = (bx * bx + by * by).sqrt();
            if l0 < 0.05 || l1 < 0.05 || l2 < 0.05 {
                continue;
            }
            let s0 = comparison_angle(0.0, l1, l2, l0).unwrap();
            let s1 = comparison_angle(0.0, l2, l0, l1).unwrap();
            let s2 = comparison_angle(0.0, l0, l1, l2).unwrap();
            assert_relative_eq!(s0 + s1 + s2, PI, epsilon = 1e-9);
        }
    }

    #[test]
    fn measured_planar_right_triangle() {
        let m = ManifoldSpec::euclidean(2).unwrap();
        let t = measure_triangle(
            &m,
            &ChartPoint::new(vec![0.0, 0.0]),
            &ChartPoint::new(vec![1.0, 0.0]),
            &ChartPoint::new(vec![0.0, 1.0]),
        )
        .unwrap();
        assert_relative_eq!(t.lengths[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(t.lengths[1], 2f64.sqrt(), epsilon = 1e-9);
        assert_relative_eq!(t.lengths[2], 1.0, epsilon = 1e-9);
        assert_relative_eq!(t.angles[0], FRAC_PI_4, epsilon = 1e-6);
        assert_relative_eq!(t.angles[1], FRAC_PI_2, epsilon = 1e-6);
        assert_relative_eq!(t.angles[2], FRAC_PI_4, epsilon = 1e-6);
    }

    #[test]
    fn coincident_vertices_are_rejected() {
        let m = ManifoldSpec::euclidean(2).unwrap();
        let p = ChartPoint::new(vec![0.2, 0.3]);
        let q = ChartPoint::new(vec![0.9, 0.1]);
        assert!(matches!(
            measure_triangle(&m, &p, &p.clone(), &q),
            Err(Error::DegenerateVertex(_))
        ));
    }

    #[test]
    fn euclidean_angles_match_comparison_exactly() {
        for (n, count) in [(2usize, 60usize), (3, 40)] {
            let m = ManifoldSpec::euclidean(n).unwrap();
            let mut rng = rng_from_seed(derive_indexed_seed(7, "euclid-identity", n as u64));
            let mut done = 0;
            while done < count {
                let a = m.sample_point(&mut rng);
                let b = m.sample_point(&mut rng);
                let c = m.sample_point(&mut rng);
                if m.quick_distance(&a, &b).unwrap() < 0.05
                    || m.quick_distance(&b, &c).unwrap() < 0.05
                    || m.quick_distance(&c, &a).unwrap() < 0.05
                {
                    continue;
                }
                let t = measure_triangle(&m, &a, &b, &c).unwrap();
                let report = check_toponogov(&t, MU_STANDARD).unwrap();
                assert!(report.pass);
                for i in 0..3 {
                    let bar = report.comparison_angles[i];
                    assert_relative_eq!(t.angles[i], bar, epsilon = 1e-6);
                    // Flat equality leaves the full (1 - mu) margin.
                    assert!(t.angles[i] - MU_STANDARD * bar >= bar / 19.0 - 1e-9);
                }
                done += 1;
            }
        }
    }

    #[test]
    fn sphere_octant_triangle() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        // Pairwise orthogonal directions kept away from the chart poles.
        let u0 = DVector::from_vec(vec![1.0, 1.0, 1.0]) / 3f64.sqrt();
        let u1 = DVector::from_vec(vec![1.0, -1.0, 0.0]) / 2f64.sqrt();
        let u2 = DVector::from_vec(vec![1.0, 1.0, -2.0]) / 6f64.sqrt();
        let t = measure_triangle(
            &m,
            &m.sphere_chart_of(&u0),
            &m.sphere_chart_of(&u1),
            &m.sphere_chart_of(&u2),
        )
        .unwrap();
        for i in 0..3 {
            assert_relative_eq!(t.lengths[i], FRAC_PI_2, epsilon = 1e-6);
            assert_relative_eq!(t.angles[i], FRAC_PI_2, epsilon = 1e-6);
        }
        let report = check_toponogov(&t, MU_STANDARD).unwrap();
        assert!(report.pass);
        for i in 0..3 {
            assert_relative_eq!(report.comparison_angles[i], FRAC_PI_3, epsilon = 1e-6);
        }
    }

    #[test]
    fn flat_torus_triangle_matches_euclidean() {
        let torus = ManifoldSpec::flat_torus(crate::lattice::DeckLattice::identity(2)).unwrap();
        let plane = ManifoldSpec::euclidean(2).unwrap();
        let coords = [[0.1, 0.1], [0.3, 0.15], [0.2, 0.35]];
        let tt = measure_triangle(
            &torus,
            &ChartPoint::new(coords[0].to_vec()),
            &ChartPoint::new(coords[1].to_vec()),
            &ChartPoint::new(coords[2].to_vec()),
        )
        .unwrap();
        let te = measure_triangle(
            &plane,
            &ChartPoint::new(coords[0].to_vec()),
            &ChartPoint::new(coords[1].to_vec()),
            &ChartPoint::new(coords[2].to_vec()),
        )
        .unwrap();
        for i in 0..3 {
            assert_relative_eq!(tt.lengths[i], te.lengths[i], epsilon = 1e-6);
            assert_relative_eq!(tt.angles[i], te.angles[i], epsilon = 1e-6);
        }
    }

    fn random_sphere_triangle(
        m: &ManifoldSpec,
        rng: &mut rand_chacha::ChaCha8Rng,
        r: f64,
    ) -> Option<(ChartPoint, ChartPoint, ChartPoint)> {
        let center = m.sampling_center();
        let a = m.sample_chart_ball(&center, r, rng).ok()?;
        let b = m.sample_chart_ball(&center, r, rng).ok()?;
        let c = m.sample_chart_ball(&center, r, rng).ok()?;
        for (u, v) in [(&a, &b), (&b, &c), (&c, &a)] {
            if m.quick_distance(u, v).ok()? < 0.02 {
                return None;
            }
        }
        Some((a, b, c))
    }

    #[test]
    fn sphere_triangles_beat_comparison_angles() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let mut rng = rng_from_seed(0xa11ce);
        let mut done = 0;
        while done < 60 {
            let Some((a, b, c)) = random_sphere_triangle(&m, &mut rng, 0.45) else {
                continue;
            };
            let t = measure_triangle(&m, &a, &b, &c).unwrap();
            if t.max_length() > 1.0 {
                continue;
            }
            let report = check_toponogov(&t, MU_STANDARD).unwrap();
            assert!(report.pass);
            for i in 0..3 {
                assert!(t.angles[i] >= report.comparison_angles[i] - 1e-4);
            }
            done += 1;
        }
    }

    #[test]
    fn sphere_triangles_via_shooting_integrator() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let mut rng = rng_from_seed(0xbeefcafe);
        let mut done = 0;
        while done < 8 {
            let Some((a, b, c)) = random_sphere_triangle(&m, &mut rng, 0.4) else {
                continue;
            };
            let t = measure_triangle_mode(&m, &a, &b, &c, GeodesicSolver::Shooting).unwrap();
            if t.max_length() > 1.0 {
                continue;
            }
            let report = check_toponogov(&t, MU_STANDARD).unwrap();
            assert!(report.pass);
            for i in 0..3 {
                assert!(t.angles[i] >= report.comparison_angles[i] - 1e-3);
            }
            done += 1;
        }
    }

    #[test]
    fn large_thin_hyperbolic_triangle_fails() {
        let m = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
        // Vertices at distance 5 from the origin with d(v1, v2) = 9.99:
        // chart radius tanh(5/2), opening angle from the hyperbolic law of
        // cosines.
        let rho = (5.0f64 / 2.0).tanh();
        let cos_phi =
            (5.0f64.cosh() * 5.0f64.cosh() - 9.99f64.cosh()) / (5.0f64.sinh() * 5.0f64.sinh());
        let phi = cos_phi.acos();
        let v0 = ChartPoint::new(vec![0.0, 0.0]);
        let v1 = ChartPoint::new(vec![rho, 0.0]);
        let v2 = ChartPoint::new(vec![rho * phi.cos(), rho * phi.sin()]);
        let t = measure_triangle(&m, &v0, &v1, &v2).unwrap();
        assert_relative_eq!(t.lengths[0], 5.0, epsilon = 1e-6);
        assert_relative_eq!(t.lengths[1], 9.99, epsilon = 1e-6);
        assert_relative_eq!(t.lengths[2], 5.0, epsilon = 1e-6);
        let report = check_toponogov(&t, MU_STANDARD).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn torus_lift_never_shortens() {
        let lattice = crate::lattice::DeckLattice::identity(2);
        let m = ManifoldSpec::flat_torus(lattice.clone()).unwrap();
        let mut rng = rng_from_seed(0x70f2);
        for _ in 0..100 {
            let p = m.sample_point(&mut rng);
            let q = m.sample_point(&mut rng);
            let d = geodesic::distance(&m, &p, &q).unwrap();
            let delta = m.chart_diff(&p.x, &q.x);
            // Euclidean length of any lift of the displacement class.
            for _ in 0..20 {
                let k = [rng.gen_range(-3i64..=3), rng.gen_range(-3i64..=3)];
                let lift = DVector::from_vec(vec![delta[0] + k[0] as f64, delta[1] + k[1] as f64]);
                assert!(lattice.embed_real(&lift).norm() >= d);
            }
        }
    }

    #[test]
    fn rac_estimate_is_r_max_on_flat_space() {
        let m = ManifoldSpec::euclidean(2).unwrap();
        let p = m.sampling_center();
        let r = estimate_rac(&m, &p, MU_STANDARD, 10.0, 24, 11).unwrap();
        assert_eq!(r, 10.0);
    }

    #[test]
    fn rac_estimate_on_sphere_is_at_least_one() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.sampling_center();
        let r = estimate_rac(&m, &p, MU_STANDARD, 2.0, 24, 17).unwrap();
        assert!(r >= 1.0);
    }

    #[test]
    fn rac_estimate_scales_with_the_metric() {
        let base = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
        let p = base.sampling_center();
        let est = estimate_rac(&base, &p, MU_STANDARD, 2.0, 24, 23).unwrap();
        assert!(est > 0.0 && est < 2.0);
        for c in [2.0, 5.0] {
            let scaled = base.scaled(c).unwrap();
            let est_c = estimate_rac(&scaled, &p, MU_STANDARD, 2.0 * c, 24, 23).unwrap();
            assert!((est_c - c * est).abs() <= 0.1 * c * est);
        }
    }

    #[test]
    fn rac_estimate_is_deterministic() {
        let m = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
        let p = m.sampling_center();
        let a = estimate_rac(&m, &p, MU_STANDARD, 1.5, 16, 99).unwrap();
        let b = estimate_rac(&m, &p, MU_STANDARD, 1.5, 16, 99).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn report_serializes_to_one_row() {
        let m = ManifoldSpec::euclidean(2).unwrap();
        let t = measure_triangle(
            &m,
            &ChartPoint::new(vec![0.0, 0.0]),
            &ChartPoint::new(vec![1.0, 0.0]),
            &ChartPoint::new(vec![0.0, 1.0]),
        )
        .unwrap();
        let report = check_toponogov(&t, MU_STANDARD).unwrap();
        let header_fields = ComparisonReport::csv_header().split(',').count();
        let row = report.csv_row(&m.id(), 0.5);
        assert_eq!(row.split(',').count(), header_fields);
        assert!(row.ends_with("true"));
        assert!(row.starts_with("\"euclidean:n=2\""));
    }
}
