//! Excess of the triangle inequality, its measured supremum, and the
//! regularity test for points far from a diameter-realizing pair.
//!
//! The excess e_{p0,p1}(x) = d(p0,x) + d(p1,x) - d(p0,p1) is monotone under
//! sliding the endpoints toward x along minimal geodesics, so a small excess
//! near x forces the geodesics x -> p0 and x -> p1 to open a wide angle at x.
//! `regularity_angle_bound` quantifies that angle; `check_regular_point`
//! measures it and compares it with the prediction.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use crate::comparison::MU_STANDARD;
use crate::critical::fmt_point;
use crate::error::{Error, Result};
use crate::geodesic::{self, exp_map, minimal_geodesics, GeodesicPath};
use crate::manifold::{ChartPoint, ManifoldSpec, TangentVector};
use crate::rng;

/// Negative roundoff below which an excess is treated as a solver fault
/// rather than clamped to zero.
pub const EXCESS_CLAMP_TOL: f64 = 1e-8;

/// Length slack used when collecting the near-minimal geodesics whose angles
/// enter the regularity check.
pub const REGULARITY_TOL_EXTRA: f64 = 1e-3;

const SHARD_SIZE: usize = 256;

fn excess_from_parts(d0: f64, d1: f64, base: f64) -> Result<f64> {
    let raw = d0 + d1 - base;
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -EXCESS_CLAMP_TOL {
        Ok(0.0)
    } else {
        Err(Error::TriangleInequalityViolation(d0, d1, base))
    }
}

/// e_{p0,p1}(x) = d(p0,x) + d(p1,x) - d(p0,p1), clamped to zero within
/// [`EXCESS_CLAMP_TOL`] of negative roundoff.
pub fn excess_value(
    m: &ManifoldSpec,
    p0: &ChartPoint,
    p1: &ChartPoint,
    x: &ChartPoint,
) -> Result<f64> {
    let d0 = geodesic::distance(m, p0, x)?;
    let d1 = geodesic::distance(m, p1, x)?;
    let base = geodesic::distance(m, p0, p1)?;
    excess_from_parts(d0, d1, base)
}

/// Measured supremum of the excess over seeded uniform samples.
#[derive(Debug, Clone)]
pub struct MaxExcessReport {
    pub p0: ChartPoint,
    pub p1: ChartPoint,
    pub n_samples: usize,
    pub value: f64,
    pub argmax: ChartPoint,
}

/// Maximum of [`excess_value`] over `n_samples` seeded uniform draws.
/// Sampling runs in parallel shards with per-shard derived seeds; the result
/// does not depend on the thread schedule.
pub fn max_excess(
    m: &ManifoldSpec,
    p0: &ChartPoint,
    p1: &ChartPoint,
    n_samples: usize,
    seed: u64,
) -> Result<MaxExcessReport> {
    if n_samples == 0 {
        return Err(Error::ArgumentOutOfRange(
            "max_excess needs at least one sample".into(),
        ));
    }
    let base = geodesic::distance(m, p0, p1)?;
    let n_shards = n_samples.div_ceil(SHARD_SIZE);
    let shard_best: Result<Vec<(f64, ChartPoint)>> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let count = SHARD_SIZE.min(n_samples - shard * SHARD_SIZE);
            let mut rng = rng::rng_from_seed(rng::derive_indexed_seed(
                seed,
                "excess-shard",
                shard as u64,
            ));
            let mut best: Option<(f64, ChartPoint)> = None;
            for _ in 0..count {
                let x = m.sample_point(&mut rng);
                let d0 = geodesic::distance(m, p0, &x)?;
                let d1 = geodesic::distance(m, p1, &x)?;
                let e = excess_from_parts(d0, d1, base)?;
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, x));
                }
            }
            Ok(best.expect("shard holds at least one sample"))
        })
        .collect();
    let mut value = f64::NEG_INFINITY;
    let mut argmax = p0.clone();
    for (e, x) in shard_best? {
        if e > value {
            value = e;
            argmax = x;
        }
    }
    Ok(MaxExcessReport {
        p0: p0.clone(),
        p1: p1.clone(),
        n_samples,
        value,
        argmax,
    })
}

/// (18/19) arccos(-1 - (e^2 - 4et) / (2t^2)): the guaranteed opening angle
/// at a point with excess `e` between endpoints at distance `t`. Decreasing
/// in `e`; equals (18/19) pi at e = 0 and 0 at e = 2t.
pub fn regularity_angle_bound(t: f64, e: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!(
            "leg length t = {t} must be positive and finite"
        )));
    }
    if !(e >= 0.0) || e > 2.0 * t {
        return Err(Error::ArgumentOutOfRange(format!(
            "excess e = {e} must lie in [0, 2t] with t = {t}"
        )));
    }
    let arg = -1.0 - (e * e - 4.0 * e * t) / (2.0 * t * t);
    Ok(MU_STANDARD * arg.clamp(-1.0, 1.0).acos())
}

/// Point at arc length `s` from the start of `path`.
fn point_along(m: &ManifoldSpec, path: &GeodesicPath, s: f64) -> Result<ChartPoint> {
    let speed = m.norm(&path.start, &path.initial_velocity.v)?;
    let v = &path.initial_velocity.v * (s / speed);
    exp_map(
        m,
        &TangentVector {
            base: path.start.clone(),
            v,
        },
    )
}

/// Outcome of the regularity test at one point.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub p: ChartPoint,
    pub q: ChartPoint,
    pub x: ChartPoint,
    pub excess: f64,
    /// Smallest angle at `x` over all near-minimal geodesic pairs.
    pub min_angle: f64,
    /// Number of geodesic pairs inspected.
    pub n_pairs: usize,
    /// Angle guaranteed by the excess measured at the pulled-in endpoints.
    pub predicted_bound: f64,
    pub regular: bool,
}

impl RegularityReport {
    pub fn csv_header() -> &'static str {
        "p0,p1,x,e,min_angle,predicted_bound,regular"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            fmt_point(&self.p),
            fmt_point(&self.q),
            fmt_point(&self.x),
            self.excess,
            self.min_angle,
            self.predicted_bound,
            self.regular
        )
    }
}

/// Measure the smallest angle at `x` between minimal geodesics to `p` and to
/// `q`, and flag `x` as regular when it exceeds pi/2. The prediction slides
/// both endpoints to distance min(rac/4, delta) from `x` and feeds the
/// excess there into [`regularity_angle_bound`].
///
/// Requires d(x,p) >= delta and d(x,q) >= delta. `rac` is an optional angle
/// comparison radius; without it the pull-in distance is `delta` itself.
pub fn check_regular_point(
    m: &ManifoldSpec,
    p: &ChartPoint,
    q: &ChartPoint,
    x: &ChartPoint,
    delta: f64,
    rac: Option<f64>,
) -> Result<RegularityReport> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::ArgumentOutOfRange(format!(
            "delta = {delta} must be positive and finite"
        )));
    }
    if let Some(r) = rac {
        if !(r > 0.0) {
            return Err(Error::ArgumentOutOfRange(format!(
                "rac = {r} must be positive"
            )));
        }
    }
    let d_xp = geodesic::distance(m, x, p)?;
    let d_xq = geodesic::distance(m, x, q)?;
    if d_xp < delta {
        return Err(Error::PreconditionViolated(format!(
            "d(x,p) = {d_xp:.6} is below delta = {delta:.6}"
        )));
    }
    if d_xq < delta {
        return Err(Error::PreconditionViolated(format!(
            "d(x,q) = {d_xq:.6} is below delta = {delta:.6}"
        )));
    }
    let to_p = minimal_geodesics(m, x, p, REGULARITY_TOL_EXTRA)?;
    let to_q = minimal_geodesics(m, x, q, REGULARITY_TOL_EXTRA)?;
    if to_p.is_empty() || to_q.is_empty() {
        return Err(Error::NoSolutionFound(
            "no minimal geodesic from x to an endpoint".into(),
        ));
    }
    let mut min_angle = f64::INFINITY;
    for a in &to_p {
        for b in &to_q {
            let angle = m.angle_between(x, &a.initial_velocity.v, &b.initial_velocity.v)?;
            min_angle = min_angle.min(angle);
        }
    }
    let s = rac.map_or(delta, |r| (0.25 * r).min(delta));
    let p_near = point_along(m, &to_p[0], s)?;
    let q_near = point_along(m, &to_q[0], s)?;
    // Sliding endpoints in keeps the excess inside [0, 2s]; trim roundoff.
    let e_near = excess_value(m, &p_near, &q_near, x)?.min(2.0 * s);
    let predicted_bound = regularity_angle_bound(s, e_near)?;
    let d_pq = geodesic::distance(m, p, q)?;
    let excess = excess_from_parts(d_xp, d_xq, d_pq)?;
    Ok(RegularityReport {
        p: p.clone(),
        q: q.clone(),
        x: x.clone(),
        excess,
        min_angle,
        n_pairs: to_p.len() * to_q.len(),
        predicted_bound,
        regular: min_angle > FRAC_PI_2,
    })
}
