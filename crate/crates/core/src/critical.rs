//! Criticality of distance functions, the critical-point angle bound, and
//! spherical-cap packing counts.

use crate::error::{Error, Result};
use crate::geodesic::{distance, minimal_geodesics};
use crate::manifold::{ChartPoint, ManifoldSpec};
use nalgebra::{DMatrix, DVector, SVD};

/// Near-minimal slack used when collecting geodesic directions.
pub const TOL_EXTRA: f64 = 1e-3;

/// Criticality tolerance on the hull margin.
pub const TOL_CRIT: f64 = 1e-3;

/// Smallest growth factor the angle bound accepts:
/// `(1 + sin(pi/36)) / (1 - sin(pi/36))`.
pub fn nu_threshold() -> f64 {
    let s = (std::f64::consts::PI / 36.0).sin();
    (1.0 + s) / (1.0 - s)
}

/// Lower bound on the angle at `p` between minimal geodesics to a critical
/// point and to a point at least `nu` times farther away:
/// `(18/19) * arccos(sin(pi/36) + (1 + sin(pi/36)) / nu)`.
///
/// Zero exactly at the threshold growth factor, strictly increasing beyond
/// it, with limit `17 pi / 38`.
pub fn cpe_angle_lower_bound(nu: f64) -> Result<f64> {
    let threshold = nu_threshold();
    if !(nu >= threshold) {
        return Err(Error::NuBelowThreshold { nu, threshold });
    }
    let s = (std::f64::consts::PI / 36.0).sin();
    let arg = s + (1.0 + s) / nu;
    // At the threshold the argument is exactly 1 up to roundoff.
    Ok(18.0 / 19.0 * arg.clamp(-1.0, 1.0).acos())
}

/// `integral_0^r sin^m t dt` by the closed-form reduction, exact enough for
/// the 1e-12 ratio checks the cap counter is held to.
pub(crate) fn sin_power_integral(m: usize, r: f64) -> f64 {
    match m {
        0 => r,
        1 => 1.0 - r.cos(),
        _ => {
            let mf = m as f64;
            (mf - 1.0) / mf * sin_power_integral(m - 2, r)
                - r.cos() * r.sin().powi(m as i32 - 1) / mf
        }
    }
}

/// Number of angular-radius-`theta/2` caps that fit in the unit sphere
/// `S^{n-1}` by volume: full sphere volume over the volume of one cap.
///
/// The sphere-of-one-lower-dimension prefactors cancel in the ratio, so the
/// value reduces to `2 pi / theta` on the circle and a ratio of sine-power
/// integrals above it.
pub fn packing_count(n: usize, theta: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::ArgumentOutOfRange(format!(
            "cap packing needs dimension at least 2, got {n}"
        )));
    }
    if !(theta > 0.0 && theta <= std::f64::consts::PI) {
        return Err(Error::InvalidTheta(theta));
    }
    if n == 2 {
        return Ok(std::f64::consts::TAU / theta);
    }
    let m = n - 2;
    Ok(sin_power_integral(m, std::f64::consts::PI) / sin_power_integral(m, theta / 2.0))
}

/// Criticality verdict for the distance function from `p` evaluated at `q`.
#[derive(Debug, Clone)]
pub struct CriticalityReport {
    pub p: ChartPoint,
    pub q: ChartPoint,
    /// Unit initial directions at `q` of near-minimal geodesics `q -> p`,
    /// in the orthonormal frame at `q`.
    pub direction_set: Vec<DVector<f64>>,
    pub is_critical: bool,
    /// Signed distance of the origin to the convex hull boundary of the
    /// direction set; positive inside.
    pub hull_margin: f64,
}

impl CriticalityReport {
    pub fn csv_header() -> &'static str {
        "manifold,p,q,n_directions,hull_margin,is_critical"
    }

    pub fn csv_row(&self, manifold: &str) -> String {
        format!(
            "\"{manifold}\",{},{},{},{},{}",
            fmt_point(&self.p),
            fmt_point(&self.q),
            self.direction_set.len(),
            self.hull_margin,
            self.is_critical
        )
    }
}

pub(crate) fn fmt_point(p: &ChartPoint) -> String {
    let coords: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
    format!("({})", coords.join(";"))
}

/// Min-norm point of the affine hull of `points`, or None when the
/// least-squares solve degenerates.
fn affine_min_norm(points: &[&DVector<f64>]) -> Option<DVector<f64>> {
    let b0 = points[0];
    if points.len() == 1 {
        return Some(b0.clone());
    }
    let n = b0.len();
    let w = DMatrix::from_fn(n, points.len() - 1, |i, j| points[j + 1][i] - b0[i]);
    let svd = SVD::new(w.clone(), true, true);
    let t = svd.solve(&(-b0), 1e-12).ok()?;
    Some(b0 + w * t)
}

/// Signed distance of the origin to the convex hull boundary of a finite
/// set of unit vectors: `min_{|w| = 1} max_i <w, u_i>`, positive when the
/// origin lies inside the hull.
///
/// Every stationary normal of the minimax is proportional to the min-norm
/// point of the affine hull of its active vectors, so scanning all subsets
/// of size at most `n` (plus both signs of each normal) is exhaustive.
pub fn hull_margin(directions: &[DVector<f64>]) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::InvalidInputs(
            "hull margin of an empty direction set".into(),
        ));
    }
    let n = directions[0].len();
    let support = |w: &DVector<f64>| -> f64 {
        directions
            .iter()
            .map(|u| u.dot(w))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut margin = f64::INFINITY;
    let mut subset: Vec<usize> = Vec::with_capacity(n);
    visit_subsets(directions, &mut subset, 0, n, &support, &mut margin);
    Ok(margin)
}

/// Depth-first walk over index subsets of size 1..=n, scoring the candidate
/// normal of each.
///
/// A subset whose affine hull passes through the origin has no min-norm
/// normal; the stationary normals then lie orthogonal to every vector of
/// the subset, so the orthogonal complement supplies the candidates.
fn visit_subsets(
    directions: &[DVector<f64>],
    subset: &mut Vec<usize>,
    start: usize,
    n: usize,
    support: &dyn Fn(&DVector<f64>) -> f64,
    margin: &mut f64,
) {
    for i in start..directions.len() {
        subset.push(i);
        let points: Vec<&DVector<f64>> = subset.iter().map(|&j| &directions[j]).collect();
        let mut candidates: Vec<DVector<f64>> = Vec::new();
        match affine_min_norm(&points) {
            Some(v) if v.norm() > 1e-12 => {
                candidates.push(v.unscale(v.norm()));
            }
            _ => candidates.extend(orthogonal_complement(&points)),
        }
        for w in &candidates {
            *margin = (*margin).min(support(w)).min(support(&(-w)));
        }
        if subset.len() < n {
            visit_subsets(directions, subset, i + 1, n, support, margin);
        }
        subset.pop();
    }
}

/// Orthonormal basis of the subspace orthogonal to every given vector.
fn orthogonal_complement(vectors: &[&DVector<f64>]) -> Vec<DVector<f64>> {
    let n = vectors[0].len();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut span = 0;
    let push = |basis: &mut Vec<DVector<f64>>, v: &DVector<f64>| -> bool {
        let mut r = v.clone();
        for b in basis.iter() {
            let c = b.dot(&r);
            r -= b * c;
        }
        let norm = r.norm();
        if norm > 1e-10 {
            basis.push(r.unscale(norm));
            true
        } else {
            false
        }
    };
    for v in vectors {
        if push(&mut basis, v) {
            span += 1;
        }
    }
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        push(&mut basis, &e);
    }
    basis.split_off(span)
}

/// Decide whether `q` is a critical point of the distance function from
/// `p`: the origin lies (within `tol_crit`) in the convex hull of the unit
/// initial directions at `q` of near-minimal geodesics `q -> p`.
pub fn is_critical(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    tol_extra: f64,
    tol_crit: f64,
) -> Result<CriticalityReport> {
    let paths = minimal_geodesics(m, q, p, tol_extra)?;
    if paths.is_empty() {
        return Err(Error::DegenerateVertex(0.0));
    }
    let mut direction_set = Vec::with_capacity(paths.len());
    for path in &paths {
        let mut u = m.to_frame(q, &path.initial_velocity.v)?;
        let norm = u.norm();
        if norm < 1e-12 {
            return Err(Error::DegenerateVertex(path.length));
        }
        u /= norm;
        direction_set.push(u);
    }
    let margin = hull_margin(&direction_set)?;
    Ok(CriticalityReport {
        p: p.clone(),
        q: q.clone(),
        direction_set,
        is_critical: margin >= -tol_crit,
        hull_margin: margin,
    })
}

/// Outcome of checking the angle bound on one (p, q1, q2) configuration.
#[derive(Debug, Clone)]
pub struct CpeReport {
    pub q1_criticality: CriticalityReport,
    pub d1: f64,
    pub d2: f64,
    pub nu: f64,
    /// Smallest measured angle at `p`, absent when the check is vacuous.
    pub min_theta: Option<f64>,
    pub bound: f64,
    /// True when `q1` is not critical, so the bound asserts nothing.
    pub vacuous: bool,
    pub pass: bool,
}

/// Measure the angle at `p` between minimal geodesics to a critical point
/// `q1` and to a farther point `q2`, and compare against the lower bound
/// for growth factor `nu`.
///
/// A non-critical `q1` yields a vacuous pass; `d(p, q2) < nu * d(p, q1)`
/// is a hard precondition failure.
pub fn verify_cpe(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q1: &ChartPoint,
    q2: &ChartPoint,
    nu: f64,
    mu_slack: f64,
) -> Result<CpeReport> {
    let bound = cpe_angle_lower_bound(nu)?;
    let q1_criticality = is_critical(m, p, q1, TOL_EXTRA, TOL_CRIT)?;
    let d1 = distance(m, p, q1)?;
    let d2 = distance(m, p, q2)?;
    if !q1_criticality.is_critical {
        return Ok(CpeReport {
            q1_criticality,
            d1,
            d2,
            nu,
            min_theta: None,
            bound,
            vacuous: true,
            pass: true,
        });
    }
    if d2 < nu * d1 - 1e-12 {
        return Err(Error::PreconditionViolated(format!(
            "need d(p, q2) >= nu * d(p, q1): {d2:.6} < {nu} * {d1:.6}"
        )));
    }
    let to_q1 = minimal_geodesics(m, p, q1, TOL_EXTRA)?;
    let to_q2 = minimal_geodesics(m, p, q2, TOL_EXTRA)?;
    let mut min_theta = f64::INFINITY;
    for a in &to_q1 {
        for b in &to_q2 {
            let theta = m.angle_between(p, &a.initial_velocity.v, &b.initial_velocity.v)?;
            min_theta = min_theta.min(theta);
        }
    }
    if !min_theta.is_finite() {
        return Err(Error::NoSolutionFound(
            "no geodesic pair to measure the angle on".into(),
        ));
    }
    Ok(CpeReport {
        q1_criticality,
        d1,
        d2,
        nu,
        min_theta: Some(min_theta),
        bound,
        vacuous: false,
        pass: min_theta >= bound - mu_slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::DeckLattice;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn bound_vanishes_at_threshold() {
        let theta = cpe_angle_lower_bound(nu_threshold()).unwrap();
        assert!(theta.abs() <= 1e-9);
    }

    #[test]
    fn bound_rejects_small_growth() {
        assert!(matches!(
            cpe_angle_lower_bound(1.19),
            Err(Error::NuBelowThreshold { .. })
        ));
    }

    #[test]
    fn bound_matches_pinned_values() {
        assert_relative_eq!(
            cpe_angle_lower_bound(1.25).unwrap(),
            0.2792187761487434,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            cpe_angle_lower_bound(2.0).unwrap(),
            0.8415455668176087,
            epsilon = 1e-14
        );
    }

    #[test]
    fn bound_is_monotone() {
        let mut prev = cpe_angle_lower_bound(1.2).unwrap();
        for k in 1..=200 {
            let nu = 1.2 * (100.0f64 / 1.2).powf(k as f64 / 200.0);
            let theta = cpe_angle_lower_bound(nu).unwrap();
            assert!(theta > prev);
            prev = theta;
        }
    }

    #[test]
    fn bound_limit_is_17_pi_over_38() {
        let limit = 17.0 * PI / 38.0;
        assert_relative_eq!(limit, 1.4054493450270128, epsilon = 1e-15);
        let far = cpe_angle_lower_bound(1e15).unwrap();
        assert!((far - limit).abs() <= 1e-12);
    }

    #[test]
    fn packing_closed_forms() {
        assert_relative_eq!(packing_count(2, FRAC_PI_2).unwrap(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(packing_count(3, PI).unwrap(), 2.0, epsilon = 1e-12);
        let arc = packing_count(2, 6.0 * PI / 19.0).unwrap();
        assert_relative_eq!(arc, 19.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn packing_stays_under_geometric_bound() {
        let theta = 6.0 * PI / 19.0;
        for n in 2..=6 {
            let count = packing_count(n, theta).unwrap();
            assert!(count <= (19.0f64 / 3.0).powi(n as i32 - 1) + 1e-9);
        }
    }

    #[test]
    fn packing_finite_for_valid_growth() {
        for nu in [1.1915, 1.2, 1.3, 2.0, 10.0] {
            let theta = cpe_angle_lower_bound(nu).unwrap();
            for n in 2..=4 {
                let count = packing_count(n, theta).unwrap();
                assert!(count.is_finite() && count >= 1.0);
            }
        }
    }

    #[test]
    fn packing_rejects_bad_inputs() {
        assert!(matches!(packing_count(2, 0.0), Err(Error::InvalidTheta(_))));
        assert!(matches!(packing_count(2, 3.2), Err(Error::InvalidTheta(_))));
        assert!(matches!(
            packing_count(1, 1.0),
            Err(Error::ArgumentOutOfRange(_))
        ));
    }

    #[test]
    fn margin_of_octahedron_directions() {
        let dirs: Vec<DVector<f64>> = (0..3)
            .flat_map(|i| {
                [1.0, -1.0].map(|s| {
                    let mut v = DVector::zeros(3);
                    v[i] = s;
                    v
                })
            })
            .collect();
        // Closest hull facet of the cross-polytope sits at distance
        // 1/sqrt(3).
        let margin = hull_margin(&dirs).unwrap();
        assert_relative_eq!(margin, 1.0 / 3f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn margin_of_sparse_direction_sets() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert_relative_eq!(hull_margin(&[e1.clone()]).unwrap(), -1.0, epsilon = 1e-12);
        // Origin-to-segment distance for two orthogonal unit vectors.
        assert_relative_eq!(
            hull_margin(&[e1, e2]).unwrap(),
            -1.0 / 2f64.sqrt(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn sphere_antipode_is_critical() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.sampling_center();
        let q = ChartPoint::new(vec![FRAC_PI_2, PI]);
        let report = is_critical(&m, &p, &q, TOL_EXTRA, TOL_CRIT).unwrap();
        assert!(report.is_critical);
        assert!(report.hull_margin >= -1e-3);
        assert!(report.direction_set.len() >= 8);
    }

    #[test]
    fn sphere_quarter_point_is_not_critical() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.sampling_center();
        let q = ChartPoint::new(vec![FRAC_PI_2, FRAC_PI_2]);
        let report = is_critical(&m, &p, &q, TOL_EXTRA, TOL_CRIT).unwrap();
        assert!(!report.is_critical);
        assert_eq!(report.direction_set.len(), 1);
        assert_relative_eq!(report.hull_margin, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn torus_center_is_critical_via_four_lifts() {
        let m = ManifoldSpec::flat_torus(DeckLattice::identity(2)).unwrap();
        let p = ChartPoint::new(vec![0.0, 0.0]);
        let q = ChartPoint::new(vec![0.5, 0.5]);
        let report = is_critical(&m, &p, &q, TOL_EXTRA, TOL_CRIT).unwrap();
        assert!(report.is_critical);
        assert_eq!(report.direction_set.len(), 4);
        // Four diagonal directions leave the hull boundary at distance
        // cos(pi/4).
        assert_relative_eq!(report.hull_margin, FRAC_PI_4_COS, epsilon = 1e-9);
    }

    const FRAC_PI_4_COS: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn hull_test_matches_direct_definition_on_torus() {
        let m = ManifoldSpec::flat_torus(DeckLattice::identity(2)).unwrap();
        let mut rng = rng_from_seed(0xc217);
        let mut checked = 0;
        while checked < 50 {
            let p = m.sample_point(&mut rng);
            let q = m.sample_point(&mut rng);
            if m.quick_distance(&p, &q).unwrap() < 0.05 {
                continue;
            }
            let report = is_critical(&m, &p, &q, TOL_EXTRA, TOL_CRIT).unwrap();
            if (report.hull_margin + 1e-3).abs() < 0.03 {
                // Too close to the decision boundary for the sampled
                // definition to resolve.
                continue;
            }
            // Direct definition: every tangent direction makes an angle of
            // at most pi/2 (+ slack) with some geodesic direction.
            let direct = (0..256).all(|k| {
                let phi = std::f64::consts::TAU * k as f64 / 256.0;
                let v = DVector::from_vec(vec![phi.cos(), phi.sin()]);
                report
                    .direction_set
                    .iter()
                    .any(|u| u.dot(&v).clamp(-1.0, 1.0).acos() <= FRAC_PI_2 + 1e-3)
            });
            assert_eq!(direct, report.is_critical);
            checked += 1;
        }
    }

    #[test]
    fn angle_bound_verified_on_rectangular_torus() {
        let lattice = DeckLattice::from_rows(&[vec![0.1, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = ManifoldSpec::flat_torus(lattice).unwrap();
        let p = ChartPoint::new(vec![0.0, 0.0]);
        // Lattice coordinates: the short circle has circumference 0.1, so
        // (0.5, 0) sits at distance 0.05 with two opposite lifts.
        let q1 = ChartPoint::new(vec![0.5, 0.0]);
        let q2 = ChartPoint::new(vec![0.0, 0.2]);
        let report = verify_cpe(&m, &p, &q1, &q2, 2.0, 1e-6).unwrap();
        assert!(!report.vacuous);
        assert!(report.pass);
        let theta = report.min_theta.unwrap();
        assert_relative_eq!(theta, FRAC_PI_2, epsilon = 1e-9);
        assert!(theta >= 0.84);
        assert_relative_eq!(report.d1, 0.05, epsilon = 1e-9);
        assert_relative_eq!(report.d2, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn flat_space_check_is_vacuous() {
        let m = ManifoldSpec::euclidean(2).unwrap();
        let p = ChartPoint::new(vec![0.0, 0.0]);
        let q1 = ChartPoint::new(vec![1.0, 0.0]);
        let q2 = ChartPoint::new(vec![3.0, 0.0]);
        let report = verify_cpe(&m, &p, &q1, &q2, 2.0, 1e-6).unwrap();
        assert!(report.vacuous);
        assert!(report.pass);
        assert!(report.min_theta.is_none());
    }

    #[test]
    fn antipodal_configuration_fails_precondition() {
        let m = ManifoldSpec::sphere(2, 1.0).unwrap();
        let p = m.sampling_center();
        let q1 = ChartPoint::new(vec![FRAC_PI_2, PI]);
        let q2 = ChartPoint::new(vec![FRAC_PI_2, 1.0]);
        assert!(matches!(
            verify_cpe(&m, &p, &q1, &q2, 1.2, 1e-6),
            Err(Error::PreconditionViolated(_))
        ));
    }

    #[test]
    fn criticality_report_serializes() {
        let m = ManifoldSpec::flat_torus(DeckLattice::identity(2)).unwrap();
        let p = ChartPoint::new(vec![0.0, 0.0]);
        let q = ChartPoint::new(vec![0.5, 0.5]);
        let report = is_critical(&m, &p, &q, TOL_EXTRA, TOL_CRIT).unwrap();
        let row = report.csv_row(&m.id());
        // The quoted manifold id may contain commas; count the rest.
        let tail = row.rsplit('"').next().unwrap();
        assert_eq!(
            tail.split(',').count(),
            CriticalityReport::csv_header().split(',').count()
        );
        assert!(row.contains("(0.5;0.5)"));
        assert!(row.ends_with("true"));
    }
}
