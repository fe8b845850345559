//! Model-space volumes, covering numbers, and the arithmetic chain leading
//! to the Betti-sum and fundamental-group generator bounds.

use crate::critical::{cpe_angle_lower_bound, packing_count, sin_power_integral};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shared inputs of the bound calculators.
///
/// `h` is the Ricci lower bound normalized as `Ric >= (n-1) h`; `r0` bounds
/// the conjugate radius from below, `d` the diameter from above, and `rac`
/// is the angle comparison radius, supplied or estimated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub h: f64,
    pub r0: f64,
    pub d: f64,
    pub rac: f64,
}

impl BoundInputs {
    pub fn new(n: usize, h: f64, r0: f64, d: f64, rac: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInputs(format!(
                "bounds need dimension at least 2, got {n}"
            )));
        }
        if !(r0 > 0.0 && d > 0.0 && rac > 0.0) || !h.is_finite() {
            return Err(Error::InvalidInputs(format!(
                "need positive r0, d, rac and finite h, got r0={r0}, d={d}, rac={rac}, h={h}"
            )));
        }
        Ok(Self { n, h, r0, d, rac })
    }
}

/// `Gamma(k / 2)` for positive integer `k`.
fn gamma_half_integer(k: usize) -> f64 {
    let mut x = if k % 2 == 0 {
        1.0
    } else {
        std::f64::consts::PI.sqrt()
    };
    let mut arg = if k % 2 == 0 { 2 } else { 1 };
    while arg + 2 <= k {
        x *= arg as f64 / 2.0;
        arg += 2;
    }
    x
}

/// Surface volume of the unit sphere `S^{n-1}`.
fn sphere_surface(n: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / gamma_half_integer(n)
}

/// `integral_0^r sinh^m t dt` by the closed-form reduction.
fn sinh_power_integral(m: usize, r: f64) -> f64 {
    match m {
        0 => r,
        1 => r.cosh() - 1.0,
        _ => {
            let mf = m as f64;
            r.cosh() * r.sinh().powi(m as i32 - 1) / mf
                - (mf - 1.0) / mf * sinh_power_integral(m - 2, r)
        }
    }
}

/// Volume of the radius-`r` ball in the simply connected model space of
/// dimension `n` and constant curvature `h`.
///
/// For positive `h` the radius is capped at the model diameter `pi/sqrt(h)`.
pub fn model_volume(n: usize, h: f64, r: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidInputs(format!(
            "model volume needs dimension at least 2, got {n}"
        )));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidInputs(format!(
            "model volume needs a positive radius, got {r}"
        )));
    }
    let m = n - 1;
    let integral = if h == 0.0 {
        r.powi(n as i32) / n as f64
    } else if h > 0.0 {
        let a = h.sqrt();
        let reach = (a * r).min(std::f64::consts::PI);
        sin_power_integral(m, reach) / a.powi(n as i32)
    } else {
        let a = (-h).sqrt();
        sinh_power_integral(m, a * r) / a.powi(n as i32)
    };
    Ok(sphere_surface(n) * integral)
}

/// Model-volume ratio `V(r + eps/2) / V(eps/2)` before rounding.
fn covering_ratio(n: usize, h: f64, r: f64, eps: f64) -> Result<f64> {
    Ok(model_volume(n, h, r + eps / 2.0)? / model_volume(n, h, eps / 2.0)?)
}

/// Covering count `N1` and multiplicity `N2` for `eps`-balls covering an
/// `r`-ball under `Ric >= (n-1) h`, by the standard packing instantiation
/// of volume comparison:
/// `N1 = ceil(V(r + eps/2) / V(eps/2))`, `N2 = ceil(V(5 eps/2) / V(eps/2))`.
pub fn covering_number(n: usize, h: f64, r: f64, eps: f64) -> Result<(u64, u64)> {
    let (n1, n2) = covering_number_real(n, h, r, eps)?;
    if n1 > u64::MAX as f64 || n2 > u64::MAX as f64 {
        return Err(Error::Overflow(format!(
            "covering count exceeds integer range: N1={n1:.3e}, N2={n2:.3e}"
        )));
    }
    Ok((n1 as u64, n2 as u64))
}

/// As `covering_number` but keeping the counts in floating point, for use
/// inside exponents where the integers would overflow.
pub fn covering_number_real(n: usize, h: f64, r: f64, eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0 && eps <= r) {
        return Err(Error::InvalidInputs(format!(
            "covering needs 0 < eps <= r, got eps={eps}, r={r}"
        )));
    }
    let n1 = covering_ratio(n, h, r, eps)?.ceil();
    let n2 = covering_ratio(n, h, 2.0 * eps, eps)?.ceil();
    Ok((n1, n2))
}

/// Growth factor of the critical-point chains behind the rank bound.
const CHAIN_GROWTH: f64 = 1.25;

/// Maximal length of a chain of critical points with distance growth 5/4:
/// the cap-packing count at the chain angle bound, rounded down.
pub fn rank_bound(inputs: &BoundInputs) -> u64 {
    let theta = cpe_angle_lower_bound(CHAIN_GROWTH)
        .expect("growth factor 5/4 exceeds the angle-bound threshold");
    let count = packing_count(inputs.n, theta).expect("chain angle lies in (0, pi]");
    count.floor() as u64
}

/// One level of the content recursion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundLevel {
    pub r: f64,
    /// Covering count `N(10^{-(n+1)} r, r)` at this radius.
    pub covering: f64,
    /// log2 of this level's factor `(n+1) * 2^covering`, or of the full
    /// base-case content when `base_case` is set.
    pub log2_factor: f64,
    /// log2 of the content bound from this radius downward.
    pub log2_content: f64,
    pub base_case: bool,
}

/// Full unrolled run of the content recursion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundTrace {
    pub inputs: BoundInputs,
    /// Radius the recursion starts from (twice the diameter).
    pub start_radius: f64,
    /// Radii at or below this are handled by the base case (`rac / 20`).
    pub base_threshold: f64,
    pub rank: u64,
    pub levels: Vec<BoundLevel>,
    pub log2_value: f64,
    /// `2^log2_value`; infinite when it exceeds floating-point range.
    pub value: f64,
}

impl BoundTrace {
    /// One JSON object per recursion level.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for level in &self.levels {
            out.push_str(&serde_json::to_string(level).expect("level serializes"));
            out.push('\n');
        }
        out
    }

    /// Human-readable table; `log2` switches the content column to log
    /// scale instead of the (possibly astronomical) plain value.
    pub fn table(&self, log2: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "n={} h={} r0={} d={} rac={} rank={}\n",
            self.inputs.n, self.inputs.h, self.inputs.r0, self.inputs.d, self.inputs.rac, self.rank
        ));
        out.push_str("radius          covering        content         base\n");
        for level in &self.levels {
            let content = if log2 {
                format!("2^{:.4}", level.log2_content)
            } else {
                format!("{:.6e}", 2f64.powf(level.log2_content))
            };
            out.push_str(&format!(
                "{:<15.6} {:<15.6e} {:<15} {}\n",
                level.r, level.covering, content, level.base_case
            ));
        }
        let total = if log2 {
            format!("2^{:.4}", self.log2_value)
        } else {
            format!("{:.6e}", self.value)
        };
        out.push_str(&format!("total: {total}\n"));
        out
    }
}

/// Fractional guard so radii landing on the threshold by exact arithmetic
/// do not recurse once more through roundoff.
const THRESHOLD_GUARD: f64 = 1.0 + 1e-9;

/// Covering count at recursion level radius `r`: `eps = 10^{-(n+1)} r`.
fn level_covering(inputs: &BoundInputs, r: f64) -> Result<f64> {
    let eps = r * 10f64.powi(-(inputs.n as i32 + 1));
    Ok(covering_number_real(inputs.n, inputs.h, r, eps)?.0)
}

/// Upper bound on the total Betti number via the content recursion
///
///   B(r) = base(r)                                  for r <= rac / 20,
///   B(r) = (n+1) * 2^{N(10^{-(n+1)} r, r)} * B(r/10)  otherwise,
///
/// unrolled from `r = 2 d`, with
/// `base(r) = ((n+1) * 2^{N(10^{-(n+1)} r, r)})^{rank}`.
///
/// The value overflows any integer type for realistic inputs, so the trace
/// carries log2 of every factor and the headline value is `2^log2_value`
/// in floating point.
pub fn betti_bound(inputs: &BoundInputs) -> Result<BoundTrace> {
    let rank = rank_bound(inputs);
    let start_radius = 2.0 * inputs.d;
    let base_threshold = inputs.rac / 20.0;
    let log2_np1 = ((inputs.n + 1) as f64).log2();
    let mut levels = Vec::new();
    let mut r = start_radius;
    while r > base_threshold * THRESHOLD_GUARD {
        let covering = level_covering(inputs, r)?;
        levels.push(BoundLevel {
            r,
            covering,
            log2_factor: log2_np1 + covering,
            log2_content: 0.0,
            base_case: false,
        });
        r /= 10.0;
    }
    let base_covering = level_covering(inputs, r)?;
    levels.push(BoundLevel {
        r,
        covering: base_covering,
        log2_factor: rank as f64 * (log2_np1 + base_covering),
        log2_content: 0.0,
        base_case: true,
    });
    let mut acc = 0.0;
    for level in levels.iter_mut().rev() {
        acc += level.log2_factor;
        level.log2_content = acc;
    }
    Ok(BoundTrace {
        inputs: *inputs,
        start_radius,
        base_threshold,
        rank,
        levels,
        log2_value: acc,
        value: 2f64.powf(acc),
    })
}

/// Per-ball generator cap and covering count behind the fundamental-group
/// generator bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pi1Report {
    pub inputs: BoundInputs,
    /// Ball radius `min(rac, r0) / 6`.
    pub r1: f64,
    /// Number of radius-`r1` balls covering the diameter ball.
    pub covering: u64,
    /// Short-basis size cap per ball: `floor((19/3)^{n-1})`.
    pub per_ball: u64,
    pub value: u64,
}

/// Bound on the number of generators of the fundamental group: covering
/// count at radius `r1 = min(rac, r0)/6` times the per-ball short-basis cap
/// `floor((19/3)^{n-1})`.
pub fn pi1_generator_bound(inputs: &BoundInputs) -> Result<Pi1Report> {
    let r1 = inputs.rac.min(inputs.r0) / 6.0;
    // A ball radius beyond the diameter covers in one piece; cap the
    // covering scale so the volume ratio stays well posed.
    let eps = r1.min(inputs.d);
    let (covering, _) = covering_number(inputs.n, inputs.h, inputs.d, eps)?;
    let per_ball = (19.0f64 / 3.0).powi(inputs.n as i32 - 1).floor() as u64;
    let value = covering.checked_mul(per_ball).ok_or_else(|| {
        Error::Overflow("generator bound exceeds integer range".into())
    })?;
    Ok(Pi1Report {
        inputs: *inputs,
        r1,
        covering,
        per_ball,
        value,
    })
}
