//! End-to-end acceptance checks, one test per criterion. Each test name
//! carries an `a<nn>` prefix so the harness prints the pass/fail lines in
//! order. Every tolerance is pinned inline next to its assertion.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use curvlab::bounds::{betti_bound, covering_number, covering_number_real, rank_bound, BoundInputs};
use curvlab::comparison::{
    check_toponogov, estimate_rac, measure_triangle_mode, GeodesicTriangle, MU_STANDARD,
};
use curvlab::critical::{cpe_angle_lower_bound, is_critical, nu_threshold, packing_count};
use curvlab::excess::{
    check_regular_point, excess_value, max_excess, regularity_angle_bound,
};
use curvlab::fibration::{build_coupling, chi, grid_check, CrossDistance, FibrationMap};
use curvlab::geodesic::{
    distance, exp_map, first_conjugate_time, minimal_geodesics, GeodesicSolver,
};
use curvlab::lattice::{min_pairwise_angle, short_basis, verify_basis_properties, DeckLattice};
use curvlab::manifold::{ChartPoint, ManifoldSpec, TangentVector};
use curvlab::rng::{derive_indexed_seed, derive_seed, rng_from_seed};

fn sphere() -> ManifoldSpec {
    ManifoldSpec::sphere(2, 1.0).unwrap()
}

fn unit_torus() -> ManifoldSpec {
    ManifoldSpec::flat_torus(DeckLattice::identity(2)).unwrap()
}

/// Torus with cell side 4, wide enough that every net separation in the
/// sweep keeps several bump components active at once.
fn four_torus() -> ManifoldSpec {
    let rows = vec![vec![4.0, 0.0], vec![0.0, 4.0]];
    ManifoldSpec::flat_torus(DeckLattice::from_rows(&rows).unwrap())
}

/// Uniform unit tangent direction through the orthonormal frame.
fn unit_tangent(m: &ManifoldSpec, p: &ChartPoint, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let frame = m.orthonormal_frame(p).unwrap();
    loop {
        let c = DVector::from_fn(m.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let norm = c.norm();
        if norm > 1e-9 && norm <= 1.0 {
            return &frame * (c / norm);
        }
    }
}

/// Random triangle with all vertices inside a chart ball of radius `cap`
/// around a random center, redrawn until no side is degenerate.
fn sample_triangle(
    m: &ManifoldSpec,
    cap: f64,
    seed: u64,
    solver: GeodesicSolver,
) -> GeodesicTriangle {
    let mut rng = rng_from_seed(seed);
    for _ in 0..64 {
        let p0 = m.sample_point(&mut rng);
        let Ok(p1) = m.sample_chart_ball(&p0, cap, &mut rng) else {
            continue;
        };
        let Ok(p2) = m.sample_chart_ball(&p0, cap, &mut rng) else {
            continue;
        };
        let Ok(t) = measure_triangle_mode(m, &p0, &p1, &p2, solver) else {
            continue;
        };
        if t.lengths.iter().any(|l| *l < 1e-3) {
            continue;
        }
        return t;
    }
    panic!("no usable triangle after 64 draws for seed {seed}");
}

#[test]
fn a01_flat_triangles_match_their_comparison_angles() {
    for (dim, label) in [(2usize, "flat2"), (3, "flat3")] {
        let m = ManifoldSpec::euclidean(dim).unwrap();
        let reports: Vec<_> = (0..50u64)
            .into_par_iter()
            .map(|i| {
                let t = sample_triangle(
                    &m,
                    0.8,
                    derive_indexed_seed(11, label, i),
                    GeodesicSolver::Auto,
                );
                check_toponogov(&t, MU_STANDARD).unwrap()
            })
            .collect();
        for rep in reports {
            assert!(rep.pass, "comparison predicate failed on {}", m.id());
            for i in 0..3 {
                if rep.degenerate_corners[i] {
                    continue;
                }
                let gap = (rep.angles[i] - rep.comparison_angles[i]).abs();
                assert!(gap <= 1e-6, "flat angle differs by {gap}");
                // Equality puts the ratio a full 1/19 above the 18/19 factor.
                assert!(
                    rep.ratios[i] >= 1.0 - 1e-6,
                    "ratio {} leaves no margin",
                    rep.ratios[i]
                );
            }
        }
    }
}

#[test]
fn a02_sphere_triangles_respect_the_comparison_bound() {
    let m = sphere();
    for (solver, tol, label) in [
        (GeodesicSolver::ClosedForm, 1e-4, "round-exact"),
        (GeodesicSolver::Shooting, 1e-3, "round-shot"),
    ] {
        let reports: Vec<_> = (0..200u64)
            .into_par_iter()
            .map(|i| {
                // Chart-ball radius 0.5 keeps all three sides at most 1.
                let t = sample_triangle(&m, 0.5, derive_indexed_seed(13, label, i), solver);
                assert!(t.max_length() <= 1.0 + 1e-9, "side exceeds 1");
                check_toponogov(&t, MU_STANDARD).unwrap()
            })
            .collect();
        for rep in reports {
            assert!(rep.pass, "comparison predicate failed ({label})");
            for i in 0..3 {
                if rep.degenerate_corners[i] {
                    continue;
                }
                assert!(
                    rep.angles[i] >= rep.comparison_angles[i] - tol,
                    "({label}) angle {} under comparison {} by more than {tol}",
                    rep.angles[i],
                    rep.comparison_angles[i]
                );
            }
        }
    }
}

#[test]
fn a03_conjugate_times_match_the_model_spaces() {
    for (k, expected, tol) in [(1.0f64, PI, 1e-3), (4.0, FRAC_PI_2, 1e-2)] {
        let m = ManifoldSpec::sphere(2, k).unwrap();
        let times: Vec<f64> = (0..12u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_from_seed(derive_indexed_seed(17, "round-conj", 100 * k as u64 + i));
                let base = m.sample_point(&mut rng);
                let v = unit_tangent(&m, &base, &mut rng);
                first_conjugate_time(&m, &TangentVector { base, v }, 4.0)
                    .unwrap()
                    .first_conjugate_time
                    .expect("positively curved sphere must develop a conjugate point")
            })
            .collect();
        for t in times {
            assert!(
                (t - expected).abs() <= tol,
                "K = {k}: conjugate time {t}, expected {expected}"
            );
        }
    }
    let flats = [
        ManifoldSpec::euclidean(2).unwrap(),
        unit_torus(),
        ManifoldSpec::hyperbolic(2, -1.0).unwrap(),
    ];
    for m in &flats {
        for i in 0..3u64 {
            let mut rng = rng_from_seed(derive_indexed_seed(17, "flat-conj", i));
            let base = m.sample_point(&mut rng);
            let v = unit_tangent(m, &base, &mut rng);
            let rep = first_conjugate_time(m, &TangentVector { base, v }, 10.0).unwrap();
            assert!(
                rep.first_conjugate_time.is_none(),
                "{}: spurious conjugate time {:?}",
                m.id(),
                rep.first_conjugate_time
            );
        }
    }
}

#[test]
fn a04_comparison_radius_scales_linearly() {
    let m = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
    let p = m.sample_point(&mut rng_from_seed(derive_seed(19, "rac-base")));
    let seed = derive_seed(19, "rac-runs");
    let base = estimate_rac(&m, &p, MU_STANDARD, 1.0, 200, seed).unwrap();
    assert!(base > 0.0 && base.is_finite());
    for c in [2.0f64, 5.0] {
        let scaled = m.scaled(c).unwrap();
        let rc = estimate_rac(&scaled, &p, MU_STANDARD, c, 200, seed).unwrap();
        let rel = (rc - c * base).abs() / (c * base);
        assert!(
            rel <= 0.10,
            "scale {c}: radius {rc} vs {} off by {rel:.3}",
            c * base
        );
    }
}

#[test]
fn a05_chain_angle_bound_has_threshold_monotonicity_and_limit() {
    let nu0 = nu_threshold();
    assert!((nu0 - 1.190954).abs() <= 1e-6, "threshold {nu0}");
    assert!(cpe_angle_lower_bound(nu0).unwrap().abs() <= 1e-9);
    // Frozen samples of the closed form.
    assert!((cpe_angle_lower_bound(1.25).unwrap() - 0.2792187761487434).abs() <= 1e-12);
    assert!((cpe_angle_lower_bound(2.0).unwrap() - 0.8415455668176087).abs() <= 1e-12);
    let mut prev = cpe_angle_lower_bound(1.2).unwrap();
    let steps = 400;
    let ratio = (100.0f64 / 1.2).powf(1.0 / steps as f64);
    let mut nu = 1.2f64;
    for _ in 0..steps {
        nu *= ratio;
        let b = cpe_angle_lower_bound(nu).unwrap();
        assert!(b > prev, "bound not strictly increasing at nu = {nu}");
        prev = b;
    }
    let limit = 17.0 * PI / 38.0;
    assert!((cpe_angle_lower_bound(1e15).unwrap() - limit).abs() <= 1e-12);
}

#[test]
fn a06_directional_packing_counts() {
    let theta = 6.0 * PI / 19.0;
    let base = packing_count(2, theta).unwrap();
    assert!((base - 19.0 / 3.0).abs() <= 1e-12, "got {base}");
    for n in 2..=6usize {
        let count = packing_count(n, theta).unwrap();
        let cap = (19.0f64 / 3.0).powi(n as i32 - 1);
        assert!(count <= cap + 1e-9, "n = {n}: {count} exceeds {cap}");
    }
}

#[test]
fn a07_critical_points_on_sphere_and_torus() {
    let m = sphere();
    let p = m.point(vec![FRAC_PI_2, 1.0]).unwrap();
    let antipode = m.point(vec![FRAC_PI_2, 1.0 + PI]).unwrap();
    let rep = is_critical(&m, &p, &antipode, 1e-3, 1e-3).unwrap();
    assert!(rep.is_critical, "antipode not critical");
    assert!(rep.hull_margin >= -1e-3, "hull margin {}", rep.hull_margin);
    let quarter = m.point(vec![FRAC_PI_2, 1.0 + FRAC_PI_2]).unwrap();
    let rep = is_critical(&m, &p, &quarter, 1e-3, 1e-3).unwrap();
    assert!(!rep.is_critical, "quarter point falsely critical");

    let torus = unit_torus();
    let origin = torus.point(vec![0.0, 0.0]).unwrap();
    let center = torus.point(vec![0.5, 0.5]).unwrap();
    let rep = is_critical(&torus, &origin, &center, 1e-3, 1e-3).unwrap();
    assert!(rep.is_critical, "cell center not critical");
    assert_eq!(rep.direction_set.len(), 4, "expected four lifted directions");
    // The deck lattice enumerates the lifts independently.
    let lifts = DeckLattice::identity(2)
        .minimal_translates(&DVector::from_vec(vec![0.5, 0.5]), 1e-9);
    assert_eq!(lifts.len(), 4, "lattice oracle disagrees");
    for (_, len) in &lifts {
        assert!((len - 0.5f64.sqrt()).abs() <= 1e-12);
    }
}

#[test]
fn a08_torus_covers_stay_under_the_covering_bound() {
    let m = unit_torus();
    let center = m.point(vec![0.5, 0.5]).unwrap();
    let mut rng = rng_from_seed(derive_seed(23, "cover-pairs"));
    for _ in 0..20 {
        let r: f64 = rng.gen_range(0.1..0.45);
        let eps: f64 = rng.gen_range(0.25 * r..r);
        let steps = (4.0 / eps).ceil().max(16.0) as usize;
        let mut points = Vec::new();
        for i in 0..steps {
            for j in 0..steps {
                let x = ChartPoint::new(vec![i as f64 / steps as f64, j as f64 / steps as f64]);
                if distance(&m, &center, &x).unwrap() <= r {
                    points.push(x);
                }
            }
        }
        let mut covered = vec![false; points.len()];
        let mut picks = 0u64;
        while let Some(next) = covered.iter().position(|c| !c) {
            picks += 1;
            let pick = points[next].clone();
            for (k, x) in points.iter().enumerate() {
                if !covered[k] && distance(&m, &pick, x).unwrap() <= eps {
                    covered[k] = true;
                }
            }
        }
        let (n1, _) = covering_number(2, 0.0, r, eps).unwrap();
        assert!(
            picks <= n1,
            "greedy cover used {picks} balls, bound {n1} (r = {r:.3}, eps = {eps:.3})"
        );
    }
}

#[test]
fn a09_betti_bound_trace_unrolls_and_certifies_the_sphere() {
    let inputs = BoundInputs::new(2, 0.0, 1.0, 1.0, 0.4).unwrap();
    let trace = betti_bound(&inputs).unwrap();
    assert_eq!(trace.rank, 22);
    assert_eq!(trace.rank, rank_bound(&inputs));

    // Independent unroll: r starts at 2d and divides by 10 until it falls
    // under rac/20; each level covers with eps = r / 10^(n+1), the base
    // level repeats its factor rank times.
    let log2_np1 = 3.0f64.log2();
    let mut expected_factors = Vec::new();
    let mut expected_radii = Vec::new();
    let mut r = 2.0 * 1.0;
    while r > (0.4 / 20.0) * (1.0 + 1e-9) {
        let n1 = covering_number_real(2, 0.0, r, r * 1e-3).unwrap().0;
        expected_factors.push(log2_np1 + n1);
        expected_radii.push(r);
        r /= 10.0;
    }
    let n1 = covering_number_real(2, 0.0, r, r * 1e-3).unwrap().0;
    expected_factors.push(trace.rank as f64 * (log2_np1 + n1));
    expected_radii.push(r);

    assert_eq!(trace.levels.len(), expected_factors.len());
    for (level, (f, radius)) in trace
        .levels
        .iter()
        .zip(expected_factors.iter().zip(&expected_radii))
    {
        assert_eq!(level.log2_factor, *f, "factor mismatch at r = {}", level.r);
        assert!((level.r - radius).abs() <= 1e-12 * radius);
    }
    let total: f64 = expected_factors.iter().sum();
    let rel = (trace.log2_value - total).abs() / total;
    assert!(rel <= 1e-9, "unrolled total {total} vs {}", trace.log2_value);
    // Frozen headline number for these inputs.
    assert!((trace.log2_value - 96096062.0391).abs() <= 5e-4);

    let value = |n, h, r0, d, rac| {
        betti_bound(&BoundInputs::new(n, h, r0, d, rac).unwrap())
            .unwrap()
            .log2_value
    };
    let base = value(2, 0.0, 1.0, 1.0, 0.4);
    assert!(value(2, 0.0, 1.0, 2.0, 0.4) >= base, "not monotone in d");
    assert!(value(2, -1.0, 1.0, 1.0, 0.4) >= base, "not monotone in -h");
    assert!(value(2, 0.0, 1.0, 1.0, 0.8) <= base, "not antitone in rac");
    assert!(value(2, 0.0, 2.0, 1.0, 0.4) <= base, "not antitone in r0");

    // Round-sphere certificate: Ric = 1, conjugate radius and diameter pi.
    let cert = betti_bound(&BoundInputs::new(2, 1.0, PI, PI, 1.0).unwrap()).unwrap();
    assert!(cert.log2_value >= 1.0);
    assert!(cert.value >= 2.0 || cert.value.is_infinite());
}

#[test]
fn a10_short_bases_are_short_and_spread() {
    let square = DeckLattice::identity(2);
    let basis = short_basis(&square, None).unwrap();
    assert!(basis.generates);
    assert_eq!(basis.lengths.len(), 2);
    assert!((basis.lengths[0] - 1.0).abs() <= 1e-12);
    assert!((basis.lengths[1] - 1.0).abs() <= 1e-12);

    let tall = DeckLattice::from_rows(&[vec![1.0, 0.0], vec![0.0, 10.0]]).unwrap();
    let basis = short_basis(&tall, None).unwrap();
    assert!(basis.generates);
    assert!((basis.lengths[0] - 1.0).abs() <= 1e-12);
    assert!((basis.lengths[1] - 10.0).abs() <= 1e-12);

    let mut rng = rng_from_seed(derive_seed(29, "basis-lattices"));
    let mut random_lattice = |n: usize| loop {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mat = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        let sv = mat.svd(false, false).singular_values;
        // Conditioning keeps the enumeration boxes small.
        if sv[n - 1] > 0.2 && sv[0] / sv[n - 1] <= 50.0 {
            return DeckLattice::from_rows(&rows).unwrap();
        }
    };
    for case in 0..100usize {
        let n = if case % 2 == 0 { 2 } else { 3 };
        let lattice = random_lattice(n);
        let basis = short_basis(&lattice, None).unwrap();
        assert!(basis.generates, "case {case}: basis does not generate");
        let report = verify_basis_properties(&lattice, &basis);
        assert!(report.ok, "case {case}: {:?}", report.violation);
        if basis.elements.len() >= 2 {
            let angle = min_pairwise_angle(&lattice, &basis).unwrap();
            assert!(
                angle >= PI / 3.0 - 1e-9,
                "case {case}: pairwise angle {angle}"
            );
        }
        if n == 2 {
            assert!(basis.elements.len() <= 6, "case {case}: 2-D basis too large");
        }
    }
}

#[test]
fn a11_excess_vanishes_at_antipodes_and_shrinks_under_pull_in() {
    let m = sphere();
    let p0 = m.point(vec![FRAC_PI_2, 1.0]).unwrap();
    let p1 = m.point(vec![FRAC_PI_2, 1.0 + PI]).unwrap();
    let mx = max_excess(&m, &p0, &p1, 10_000, derive_seed(31, "antipodal-max")).unwrap();
    assert!(mx.value <= 1e-6, "antipodal max excess {}", mx.value);

    for t in [0.1f64, 0.37, 1.0, 2.0] {
        let b = regularity_angle_bound(t, 0.0).unwrap();
        assert!(
            (b - MU_STANDARD * PI).abs() <= 1e-12,
            "zero-excess angle bound {b} at t = {t}"
        );
    }

    // Pulling the endpoints toward x along minimal geodesics never
    // increases the excess.
    let torus = unit_torus();
    let ellipsoid = ManifoldSpec::ellipsoid(1.0, 1.0, 0.8).unwrap();
    let cases: [(&ManifoldSpec, usize, &str); 3] = [
        (&m, 40, "pull-round"),
        (&torus, 30, "pull-torus"),
        (&ellipsoid, 30, "pull-oblate"),
    ];
    let point_along = |mf: &ManifoldSpec, path: &curvlab::geodesic::GeodesicPath, s: f64| {
        let speed = mf.norm(&path.start, &path.initial_velocity.v).unwrap();
        exp_map(
            mf,
            &TangentVector {
                base: path.start.clone(),
                v: &path.initial_velocity.v * (s / speed),
            },
        )
        .unwrap()
    };
    for (mf, count, label) in cases {
        let checked: Vec<(f64, f64)> = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_from_seed(derive_indexed_seed(31, label, i));
                loop {
                    let p0 = mf.sample_point(&mut rng);
                    let p1 = mf.sample_point(&mut rng);
                    let x = mf.sample_point(&mut rng);
                    let too_close = [(&p0, &p1), (&p0, &x), (&p1, &x)]
                        .iter()
                        .any(|(a, b)| mf.quick_distance(a, b).unwrap() < 0.05);
                    if too_close {
                        continue;
                    }
                    let to_p0 = minimal_geodesics(mf, &x, &p0, 0.0).unwrap();
                    let to_p1 = minimal_geodesics(mf, &x, &p1, 0.0).unwrap();
                    let f0: f64 = rng.gen_range(0.3..0.9);
                    let f1: f64 = rng.gen_range(0.3..0.9);
                    let p0n = point_along(mf, &to_p0[0], f0 * to_p0[0].length);
                    let p1n = point_along(mf, &to_p1[0], f1 * to_p1[0].length);
                    let e = excess_value(mf, &p0, &p1, &x).unwrap();
                    let en = excess_value(mf, &p0n, &p1n, &x).unwrap();
                    return (e, en);
                }
            })
            .collect();
        for (e, en) in checked {
            assert!(en <= e + 1e-6, "{label}: pulled-in excess {en} above {e}");
        }
    }
}

#[test]
fn a12_antipodal_regularity_reports_wide_angles() {
    let m = sphere();
    let p = m.point(vec![FRAC_PI_2, 1.0]).unwrap();
    let q = m.point(vec![FRAC_PI_2, 1.0 + PI]).unwrap();
    let delta = 0.1;
    let reports: Vec<_> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed_seed(37, "diameter-pair", i));
            loop {
                let x = m.sample_point(&mut rng);
                if distance(&m, &x, &p).unwrap() >= delta
                    && distance(&m, &x, &q).unwrap() >= delta
                {
                    return check_regular_point(&m, &p, &q, &x, delta, None).unwrap();
                }
            }
        })
        .collect();
    for rep in reports {
        assert!(
            rep.min_angle > FRAC_PI_2,
            "angle {} not obtuse at {:?}",
            rep.min_angle,
            rep.x
        );
        assert!(rep.regular);
    }
}

#[test]
fn a13_fibration_displacement_shrinks_and_stays_submersive() {
    // Bump clauses are exact, not approximate.
    let sigma = 0.45;
    assert_eq!(chi(sigma, sigma), 0.0);
    assert_eq!(chi(1.5 * sigma, sigma), 0.0);
    assert_eq!(chi(0.5 * sigma, sigma), 1.0);
    assert_eq!(chi(0.0, sigma), 1.0);
    let mid = chi(0.75 * sigma, sigma);
    assert!(mid > 0.0 && mid < 1.0);

    let m = four_torus();
    let mut maxima = Vec::new();
    for (k, eps) in [0.2f64, 0.1, 0.05].into_iter().enumerate() {
        let coupling = build_coupling(
            &m,
            &m,
            CrossDistance::identity_chart(0.0).unwrap(),
            eps,
            derive_indexed_seed(41, "identity-net", k as u64),
        )
        .unwrap();
        let fm = FibrationMap::new(
            coupling,
            sigma,
            2.0,
            f64::INFINITY,
            f64::INFINITY,
            derive_indexed_seed(41, "identity-map", k as u64),
        )
        .unwrap();
        let rows = grid_check(&fm, 20, None).unwrap();
        assert_eq!(rows.len(), 400);
        let max_disp = rows.iter().map(|r| r.displacement).fold(0.0, f64::max);
        assert!(
            max_disp <= 5.0 * eps,
            "eps = {eps}: displacement {max_disp} out of scale"
        );
        maxima.push(max_disp);
    }
    assert!(
        maxima[0] > maxima[1] && maxima[1] > maxima[2],
        "displacement maxima {maxima:?} not decreasing over the separation sweep"
    );

    let rows = vec![vec![4.0, 0.0], vec![0.0, 4.0]];
    let perturbed =
        ManifoldSpec::perturbed_torus(DeckLattice::from_rows(&rows).unwrap(), 0.05).unwrap();
    let coupling = build_coupling(
        &perturbed,
        &m,
        CrossDistance::identity_chart(0.06).unwrap(),
        0.1,
        derive_seed(41, "perturbed-net"),
    )
    .unwrap();
    let fm = FibrationMap::new(
        coupling,
        sigma,
        1.9,
        f64::INFINITY,
        f64::INFINITY,
        derive_seed(41, "perturbed-map"),
    )
    .unwrap();
    let rows = grid_check(&fm, 12, Some(0.01)).unwrap();
    assert_eq!(rows.len(), 144);
    for row in &rows {
        let sv = row.min_singular_value.expect("differential was requested");
        assert!(
            sv > 0.0,
            "singular value {sv} not positive at {:?}",
            row.x
        );
    }
}

#[test]
fn a14_fixed_seeds_reproduce_identical_bytes() {
    let run_rows = || -> Vec<String> {
        let m = sphere();
        let mut rows = Vec::new();
        for i in 0..20u64 {
            let t = sample_triangle(
                &m,
                0.5,
                derive_indexed_seed(43, "replay-tri", i),
                GeodesicSolver::Auto,
            );
            let rep = check_toponogov(&t, MU_STANDARD).unwrap();
            rows.push(rep.csv_row(&m.id(), 0.5));
        }
        rows
    };
    assert_eq!(run_rows(), run_rows());

    let hyper = ManifoldSpec::hyperbolic(2, -1.0).unwrap();
    let p = hyper.sample_point(&mut rng_from_seed(derive_seed(43, "replay-point")));
    let r1 = estimate_rac(&hyper, &p, MU_STANDARD, 1.0, 100, 43).unwrap();
    let r2 = estimate_rac(&hyper, &p, MU_STANDARD, 1.0, 100, 43).unwrap();
    assert_eq!(r1.to_bits(), r2.to_bits());

    let run_grid = || -> Vec<String> {
        let m = four_torus();
        let coupling = build_coupling(
            &m,
            &m,
            CrossDistance::identity_chart(0.0).unwrap(),
            0.2,
            derive_seed(43, "replay-net"),
        )
        .unwrap();
        let fm = FibrationMap::new(
            coupling,
            0.45,
            2.0,
            f64::INFINITY,
            f64::INFINITY,
            derive_seed(43, "replay-map"),
        )
        .unwrap();
        grid_check(&fm, 6, None)
            .unwrap()
            .iter()
            .map(|r| r.csv_row())
            .collect()
    };
    assert_eq!(run_grid(), run_grid());
}
