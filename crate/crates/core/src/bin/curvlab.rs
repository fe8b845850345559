//! Experiment runner for the curvlab library.
//!
//! Each subcommand-style experiment name selects a measurement, reads a flat
//! `key = value` config (file plus trailing `--key=value` overrides), and
//! writes three artifacts next to each other: `<out>.csv` (header, one row
//! per measurement, trailing pass/fail summary line), `<out>.jsonl` (one JSON
//! object per row plus experiment-level summaries), and `<out>.manifest.txt`
//! (tool version, experiment, master seed, seed-split scheme, resolved
//! config). Outputs carry no timestamps, so a rerun with the same config and
//! seed reproduces every byte.
//!
//! Exit codes: 0 all rows pass, 1 some row failed its check, 2 invalid
//! config, 3 runtime failure inside a measurement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use curvlab::bounds::{betti_bound, pi1_generator_bound, BoundInputs};
use curvlab::comparison::{
    check_toponogov, estimate_rac, measure_triangle_mode, ComparisonReport, MU_STANDARD,
};
use curvlab::critical::{is_critical, CriticalityReport};
use curvlab::excess::{check_regular_point, excess_value, max_excess, RegularityReport};
use curvlab::fibration::{
    angle_transfer_report, build_coupling, grid_check, AngleTransferReport, CrossDistance,
    FibrationMap, GridRow,
};
use curvlab::geodesic::{
    distance, first_conjugate_time, minimal_geodesics, GeodesicSolver,
};
use curvlab::lattice::{
    min_pairwise_angle, short_basis, verify_basis_properties, DeckLattice,
};
use curvlab::manifold::{ChartPoint, ManifoldKind, ManifoldSpec, TangentVector};
use curvlab::rng::{derive_indexed_seed, derive_seed, rng_from_seed};

const EXPERIMENTS: &[&str] = &[
    "toponogov-check",
    "rac-estimate",
    "conj-radius",
    "critical-scan",
    "betti-bound",
    "pi1-basis",
    "excess-scan",
    "sphere-regularity",
    "fibration-demo",
    "angle-transfer",
];

const DEFAULT_SEED: u64 = 7;

const AFTER_HELP: &str = "\
Experiments:
  toponogov-check    sample triangles, check the angle comparison inequality
  rac-estimate       largest radius at which sampled triangles stay comparable
  conj-radius        first conjugate time along random geodesics
  critical-scan      criticality of the distance function over a point grid
  betti-bound        covering recursion behind the Betti-number bound
  pi1-basis          short generating system of a deck lattice
  excess-scan        excess of a point pair over a grid, plus its maximum
  sphere-regularity  regular-point test at random points away from a pair
  fibration-demo     build a coupling, fit the averaged map, scan the grid
  angle-transfer     angle comparison between coupled manifolds

Config is `key = value` per line, `#` comments; trailing `--key=value`
arguments override the file. Manifolds are written `euclidean:2`,
`sphere:2:1.0`, `hyperbolic:2:-1`, `flat_torus:1,0;0,1`,
`perturbed_torus:1,0;0,1:0.05`, `ellipsoid:1:1:0.8`, `revolution:2:0.5`;
points are `0.5;0.25`.";

#[derive(Parser)]
#[command(name = "curvlab", version, about = "Reproducible comparison-geometry experiments", after_help = AFTER_HELP)]
struct Cli {
    /// Experiment name
    experiment: String,
    /// Flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; takes precedence over the config `seed` key
    #[arg(long)]
    seed: Option<u64>,
    /// Output basename; writes <out>.csv, <out>.jsonl, <out>.manifest.txt
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print level tables with log2 entries instead of raw counts
    #[arg(long)]
    log2: bool,
    /// Config overrides, each `--key=value` or `key=value`
    #[arg(value_name = "KEY=VALUE", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    /// Bad config or arguments; exit code 2.
    Config(String),
    /// Measurement failed at runtime; exit code 3.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: curvlab::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Config store that remembers which keys an experiment actually read, so
/// leftovers can be rejected by name afterwards.
struct Config {
    experiment: String,
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
    known: BTreeSet<String>,
}

impl Config {
    fn load(cli: &Cli) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = &cli.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Config(format!(
                        "{}:{}: expected `key = value`, got `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for raw in &cli.overrides {
            let stripped = raw.strip_prefix("--").unwrap_or(raw);
            let (k, v) = stripped.split_once('=').ok_or_else(|| {
                CliError::Config(format!("override `{raw}` is not of the form key=value"))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config {
            experiment: cli.experiment.clone(),
            values,
            resolved: BTreeMap::new(),
            known: BTreeSet::new(),
        })
    }

    fn get_raw(&mut self, key: &str, default: Option<&str>) -> Option<String> {
        self.known.insert(key.to_string());
        match self.values.get(key) {
            Some(v) => {
                self.resolved.insert(key.to_string(), v.clone());
                Some(v.clone())
            }
            None => default.map(|d| {
                self.resolved.insert(key.to_string(), d.to_string());
                d.to_string()
            }),
        }
    }

    fn get_str(&mut self, key: &str, default: &str) -> String {
        self.get_raw(key, Some(default)).unwrap()
    }

    fn get_opt_str(&mut self, key: &str) -> Option<String> {
        self.get_raw(key, None)
    }

    fn get_f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.get_raw(key, None) {
            Some(s) => s.trim().parse().map_err(|_| {
                CliError::Config(format!("key `{key}`: expected a number, got `{s}`"))
            }),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    fn get_opt_f64(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get_raw(key, None) {
            Some(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("key `{key}`: expected a number, got `{s}`"))),
            None => Ok(None),
        }
    }

    fn get_usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.get_raw(key, None) {
            Some(s) => s.trim().parse().map_err(|_| {
                CliError::Config(format!("key `{key}`: expected a nonnegative integer, got `{s}`"))
            }),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    fn get_u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.get_raw(key, None) {
            Some(s) => s.trim().parse().map_err(|_| {
                CliError::Config(format!("key `{key}`: expected a nonnegative integer, got `{s}`"))
            }),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// Reject any provided key no experiment branch read.
    fn finish(&self) -> Result<(), CliError> {
        for key in self.values.keys() {
            if !self.known.contains(key) {
                let known: Vec<&str> = self.known.iter().map(String::as_str).collect();
                return Err(CliError::Config(format!(
                    "unknown key `{}` for experiment `{}`; known keys: {}",
                    key,
                    self.experiment,
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }
}

struct Row {
    csv: String,
    pass: bool,
}

struct RunOutput {
    header: String,
    rows: Vec<Row>,
    /// Pre-serialized JSON lines.
    jsonl: Vec<String>,
    /// Extra stdout block (tables etc).
    extra: Option<String>,
}

fn parse_rows(s: &str) -> Result<Vec<Vec<f64>>, CliError> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        CliError::Config(format!("lattice row entry `{v}` is not a number"))
                    })
                })
                .collect()
        })
        .collect()
}

fn parse_point(s: &str, dim: usize) -> Result<ChartPoint, CliError> {
    let coords: Vec<f64> = s
        .split(';')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("point entry `{v}` is not a number")))
        })
        .collect::<Result<_, _>>()?;
    if coords.len() != dim {
        return Err(CliError::Config(format!(
            "point `{s}` has {} coordinates, manifold needs {dim}",
            coords.len()
        )));
    }
    Ok(ChartPoint::from_vector(DVector::from_vec(coords)))
}

fn parse_scalar(part: &str, what: &str) -> Result<f64, CliError> {
    part.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{what} `{part}` is not a number")))
}

fn parse_usize(part: &str, what: &str) -> Result<usize, CliError> {
    part.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{what} `{part}` is not a positive integer")))
}

fn parse_manifold(s: &str) -> Result<ManifoldSpec, CliError> {
    let bad = |msg: String| CliError::Config(format!("manifold `{s}`: {msg}"));
    let mut parts = s.splitn(2, ':');
    let kind = parts.next().unwrap_or("");
    let rest = parts.next().unwrap_or("");
    let built = match kind {
        "euclidean" => ManifoldSpec::euclidean(parse_usize(rest, "dimension")?),
        "sphere" | "hyperbolic" => {
            let (n, k) = rest
                .split_once(':')
                .ok_or_else(|| bad(format!("expected `{kind}:<dim>:<curvature>`")))?;
            let n = parse_usize(n, "dimension")?;
            let k = parse_scalar(k, "curvature")?;
            if kind == "sphere" {
                ManifoldSpec::sphere(n, k)
            } else {
                ManifoldSpec::hyperbolic(n, k)
            }
        }
        "flat_torus" => {
            let lattice = DeckLattice::from_rows(&parse_rows(rest)?)
                .map_err(|e| bad(e.to_string()))?;
            ManifoldSpec::flat_torus(lattice)
        }
        "perturbed_torus" => {
            let (rows, amp) = rest
                .rsplit_once(':')
                .ok_or_else(|| bad("expected `perturbed_torus:<rows>:<amplitude>`".into()))?;
            let lattice = DeckLattice::from_rows(&parse_rows(rows)?)
                .map_err(|e| bad(e.to_string()))?;
            ManifoldSpec::perturbed_torus(lattice, parse_scalar(amp, "amplitude")?)
        }
        "ellipsoid" => {
            let semi: Vec<f64> = rest
                .split(':')
                .map(|v| parse_scalar(v, "semi-axis"))
                .collect::<Result<_, _>>()?;
            if semi.len() != 3 {
                return Err(bad("expected `ellipsoid:<a>:<b>:<c>`".into()));
            }
            ManifoldSpec::ellipsoid(semi[0], semi[1], semi[2])
        }
        "revolution" => {
            let (big, small) = rest
                .split_once(':')
                .ok_or_else(|| bad("expected `revolution:<R>:<r>`".into()))?;
            ManifoldSpec::revolution(parse_scalar(big, "radius")?, parse_scalar(small, "radius")?)
        }
        other => {
            return Err(bad(format!(
                "unknown kind `{other}`; known: euclidean, sphere, hyperbolic, flat_torus, perturbed_torus, ellipsoid, revolution"
            )))
        }
    };
    built.map_err(|e| bad(e.to_string()))
}

fn parse_solver(s: &str) -> Result<GeodesicSolver, CliError> {
    match s {
        "auto" => Ok(GeodesicSolver::Auto),
        "closed-form" => Ok(GeodesicSolver::ClosedForm),
        "shooting" => Ok(GeodesicSolver::Shooting),
        other => Err(CliError::Config(format!(
            "key `solver`: unknown solver `{other}`; known: auto, closed-form, shooting"
        ))),
    }
}

fn check_point(m: &ManifoldSpec, p: &ChartPoint, key: &str) -> Result<(), CliError> {
    m.check_domain(&p.x)
        .map_err(|e| CliError::Config(format!("key `{key}`: {e}")))
}

fn fmt_pt(p: &ChartPoint) -> String {
    p.x.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Grid over the chart sampling box; `midpoint` shifts nodes off the box
/// corners. Off-domain nodes are dropped.
fn grid_points(m: &ManifoldSpec, per_side: usize, midpoint: bool) -> Vec<ChartPoint> {
    let boxes = m.sampling_box();
    let mut out = Vec::new();
    let mut idx = vec![0usize; m.dim()];
    loop {
        let coords = DVector::from_fn(m.dim(), |k, _| {
            let frac = if midpoint {
                (idx[k] as f64 + 0.5) / per_side as f64
            } else {
                idx[k] as f64 / per_side as f64
            };
            boxes[k].0 + frac * (boxes[k].1 - boxes[k].0)
        });
        if m.check_domain(&coords).is_ok() {
            out.push(ChartPoint::from_vector(coords));
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
            return out;
        }
    }
}

/// Uniform direction in the unit tangent sphere at `p`, expressed in chart
/// coordinates through the orthonormal frame.
fn unit_tangent(
    m: &ManifoldSpec,
    p: &ChartPoint,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>, CliError> {
    let frame: DMatrix<f64> = m.orthonormal_frame(p).map_err(runtime)?;
    loop {
        let c = DVector::from_fn(m.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let norm = c.norm();
        if norm > 1e-9 && norm <= 1.0 {
            return Ok(&frame * (c / norm));
        }
    }
}

fn run_toponogov(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("manifold", "sphere:2:1.0"))?;
    let count = cfg.get_usize("count", 200)?;
    let mu = cfg.get_f64("mu", MU_STANDARD)?;
    let side_cap = cfg.get_f64("side_cap", 0.5)?;
    let solver = parse_solver(&cfg.get_str("solver", "auto"))?;
    let reports: Vec<Result<ComparisonReport, CliError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed_seed(master, "toponogov-check", i as u64));
            // Collapsed draws are retried from the same stream.
            for _ in 0..64 {
                let p0 = m.sample_point(&mut rng);
                let p1 = match m.sample_chart_ball(&p0, side_cap, &mut rng) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let p2 = match m.sample_chart_ball(&p0, side_cap, &mut rng) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let t = match measure_triangle_mode(&m, &p0, &p1, &p2, solver) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                if t.lengths.iter().any(|l| *l < 1e-3) {
                    continue;
                }
                return check_toponogov(&t, mu).map_err(runtime);
            }
            Err(CliError::Runtime(format!(
                "row {i}: no usable triangle after 64 draws"
            )))
        })
        .collect();
    let id = m.id();
    let mut rows = Vec::with_capacity(count);
    let mut jsonl = Vec::with_capacity(count);
    for (i, rep) in reports.into_iter().enumerate() {
        let rep = rep?;
        rows.push(Row {
            csv: rep.csv_row(&id, side_cap),
            pass: rep.pass,
        });
        jsonl.push(
            json!({
                "i": i,
                "lengths": rep.lengths,
                "angles": rep.angles,
                "comparison_angles": rep.comparison_angles,
                "mu": rep.mu,
                "degenerate_corners": rep.degenerate_corners,
                "pass": rep.pass,
            })
            .to_string(),
        );
    }
    Ok(RunOutput {
        header: ComparisonReport::csv_header().to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn run_rac_estimate(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let mut m = parse_manifold(&cfg.get_str("manifold", "hyperbolic:2:-1"))?;
    let scale = cfg.get_f64("scale", 1.0)?;
    if scale != 1.0 {
        m = m
            .scaled(scale)
            .map_err(|e| CliError::Config(format!("key `scale`: {e}")))?;
    }
    let p = match cfg.get_opt_str("point") {
        Some(s) => {
            let p = parse_point(&s, m.dim())?;
            check_point(&m, &p, "point")?;
            p
        }
        None => m.sample_point(&mut rng_from_seed(derive_seed(master, "rac-point"))),
    };
    let mu = cfg.get_f64("mu", MU_STANDARD)?;
    let r_max = cfg.get_f64("r_max", 1.0)?;
    let triangles = cfg.get_usize("triangles", 200)?;
    let value = estimate_rac(
        &m,
        &p,
        mu,
        r_max,
        triangles,
        derive_seed(master, "rac-estimate"),
    )
    .map_err(runtime)?;
    let pass = value.is_finite() && value > 0.0;
    let rows = vec![Row {
        csv: format!(
            "\"{}\",{},{},{},{},{}",
            m.id(),
            fmt_pt(&p),
            mu,
            r_max,
            triangles,
            value
        ),
        pass,
    }];
    let jsonl = vec![json!({
        "manifold": m.id(),
        "point": p.x.as_slice(),
        "mu": mu,
        "r_max": r_max,
        "triangles": triangles,
        "rac": value,
    })
    .to_string()];
    Ok(RunOutput {
        header: "manifold,point,mu,r_max,triangles,rac".to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn run_conj_radius(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("manifold", "sphere:2:1.0"))?;
    let samples = cfg.get_usize("samples", 20)?;
    let horizon = cfg.get_f64("horizon", 10.0)?;
    let expect = cfg.get_opt_f64("expect")?;
    let tol = cfg.get_f64("tol", 1e-2)?;
    let results: Vec<Result<(ChartPoint, Option<f64>), CliError>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed_seed(master, "conj-radius", i as u64));
            let base = m.sample_point(&mut rng);
            let v = unit_tangent(&m, &base, &mut rng)?;
            let rep = first_conjugate_time(
                &m,
                &TangentVector {
                    base: base.clone(),
                    v,
                },
                horizon,
            )
            .map_err(runtime)?;
            Ok((base, rep.first_conjugate_time))
        })
        .collect();
    let id = m.id();
    let mut rows = Vec::with_capacity(samples);
    let mut jsonl = Vec::with_capacity(samples);
    for (i, res) in results.into_iter().enumerate() {
        let (base, t) = res?;
        let pass = match expect {
            Some(e) => t.is_some_and(|t| (t - e).abs() <= tol),
            None => true,
        };
        let t_str = t.map_or_else(|| "none".to_string(), |t| t.to_string());
        rows.push(Row {
            csv: format!("\"{id}\",{i},{},{t_str},{horizon},{pass}", fmt_pt(&base)),
            pass,
        });
        jsonl.push(
            json!({
                "i": i,
                "base": base.x.as_slice(),
                "first_conjugate_time": t,
                "horizon": horizon,
                "pass": pass,
            })
            .to_string(),
        );
    }
    Ok(RunOutput {
        header: "manifold,i,base,first_conjugate_time,horizon,pass".to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn run_critical_scan(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("manifold", "flat_torus:1,0;0,1"))?;
    let p = parse_point(&cfg.get_str("p", "0;0"), m.dim())?;
    check_point(&m, &p, "p")?;
    let mode = cfg.get_str("mode", "grid");
    let per_side = cfg.get_usize("per_side", 8)?;
    let count = cfg.get_usize("count", 64)?;
    let tol_extra = cfg.get_f64("tol_extra", 1e-3)?;
    let tol_crit = cfg.get_f64("tol_crit", 1e-3)?;
    let qs: Vec<ChartPoint> = match mode.as_str() {
        "grid" => grid_points(&m, per_side, false)
            .into_iter()
            .filter(|q| m.chart_diff(&p.x, &q.x).norm() > 1e-6)
            .collect(),
        "random" => {
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                let mut rng =
                    rng_from_seed(derive_indexed_seed(master, "critical-scan", i as u64));
                loop {
                    let q = m.sample_point(&mut rng);
                    if m.chart_diff(&p.x, &q.x).norm() > 1e-3 {
                        out.push(q);
                        break;
                    }
                }
            }
            out
        }
        other => {
            return Err(CliError::Config(format!(
                "key `mode`: unknown mode `{other}`; known: grid, random"
            )))
        }
    };
    let reports: Vec<Result<CriticalityReport, CliError>> = qs
        .par_iter()
        .map(|q| is_critical(&m, &p, q, tol_extra, tol_crit).map_err(runtime))
        .collect();
    let id = m.id();
    let mut rows = Vec::with_capacity(qs.len());
    let mut jsonl = Vec::with_capacity(qs.len());
    for rep in reports {
        let rep = rep?;
        jsonl.push(
            json!({
                "q": rep.q.x.as_slice(),
                "is_critical": rep.is_critical,
                "hull_margin": rep.hull_margin,
                "n_directions": rep.direction_set.len(),
            })
            .to_string(),
        );
        rows.push(Row {
            csv: rep.csv_row(&id),
            pass: true,
        });
    }
    Ok(RunOutput {
        header: CriticalityReport::csv_header().to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn run_betti_bound(cfg: &mut Config, log2: bool) -> Result<RunOutput, CliError> {
    let n = cfg.get_usize("n", 2)?;
    let h = cfg.get_f64("h", 0.0)?;
    let r0 = cfg.get_f64("r0", 1.0)?;
    let d = cfg.get_f64("d", 1.0)?;
    let rac = cfg.get_f64("rac", 0.4)?;
    let inputs = BoundInputs::new(n, h, r0, d, rac)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let trace = betti_bound(&inputs).map_err(runtime)?;
    let mut rows = Vec::with_capacity(trace.levels.len());
    for (i, level) in trace.levels.iter().enumerate() {
        rows.push(Row {
            csv: format!(
                "{i},{},{},{},{},{}",
                level.r, level.covering, level.log2_factor, level.log2_content, level.base_case
            ),
            pass: true,
        });
    }
    let mut jsonl: Vec<String> = trace
        .jsonl()
        .lines()
        .map(|l| l.to_string())
        .collect();
    jsonl.push(
        json!({
            "rank": trace.rank,
            "log2_value": trace.log2_value,
            "value": trace.value,
        })
        .to_string(),
    );
    Ok(RunOutput {
        header: "level,r,covering,log2_factor,log2_content,base_case".to_string(),
        rows,
        jsonl,
        extra: Some(trace.table(log2)),
    })
}

fn run_pi1_basis(cfg: &mut Config) -> Result<RunOutput, CliError> {
    let rows_spec = cfg.get_str("lattice", "1,0;0,1");
    let lattice = DeckLattice::from_rows(&parse_rows(&rows_spec)?)
        .map_err(|e| CliError::Config(format!("key `lattice`: {e}")))?;
    let cap = cfg.get_opt_f64("cap")?;
    let basis = short_basis(&lattice, cap).map_err(runtime)?;
    let report = verify_basis_properties(&lattice, &basis);
    let angle = min_pairwise_angle(&lattice, &basis);
    let ok = report.ok && basis.generates;
    let mut rows = Vec::with_capacity(basis.elements.len());
    let mut jsonl = Vec::with_capacity(basis.elements.len() + 2);
    for (i, (elem, len)) in basis.elements.iter().zip(&basis.lengths).enumerate() {
        let coords = elem
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        rows.push(Row {
            csv: format!("{i},{coords},{len},{ok}"),
            pass: ok,
        });
        jsonl.push(json!({"i": i, "element": elem, "length": len}).to_string());
    }
    jsonl.push(
        json!({
            "generates": basis.generates,
            "ok": report.ok,
            "violation": report.violation.as_ref().map(|v| format!("{v:?}")),
            "min_pairwise_angle": angle,
            "count": basis.elements.len(),
        })
        .to_string(),
    );
    // With full covering inputs the per-ball count turns into a generator
    // bound for the whole group.
    let rac = cfg.get_opt_f64("rac")?;
    if let Some(rac) = rac {
        let n = cfg.get_usize("n", lattice.dim().max(2))?;
        let h = cfg.get_f64("h", 0.0)?;
        let r0 = cfg.get_f64("r0", 1.0)?;
        let d = cfg.get_f64("d", 1.0)?;
        let inputs = BoundInputs::new(n, h, r0, d, rac)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let pi1 = pi1_generator_bound(&inputs).map_err(runtime)?;
        jsonl.push(
            json!({
                "r1": pi1.r1,
                "covering": pi1.covering,
                "per_ball": pi1.per_ball,
                "generator_bound": pi1.value,
            })
            .to_string(),
        );
    }
    Ok(RunOutput {
        header: "i,element,length,pass".to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn run_excess_scan(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("manifold", "sphere:2:1.0"))?;
    let p0 = parse_point(
        &cfg.get_str("p0", "1.2;0.5"),
        m.dim(),
    )?;
    let p1 = parse_point(
        &cfg.get_str("p1", "1.9415926535897931;3.641592653589793"),
        m.dim(),
    )?;
    check_point(&m, &p0, "p0")?;
    check_point(&m, &p1, "p1")?;
    let per_side = cfg.get_usize("grid", 12)?;
    let samples = cfg.get_usize("samples", 2000)?;
    let xs = grid_points(&m, per_side, true);
    let values: Vec<Result<f64, CliError>> = xs
        .par_iter()
        .map(|x| excess_value(&m, &p0, &p1, x).map_err(runtime))
        .collect();
    let mut rows = Vec::with_capacity(xs.len());
    let mut jsonl = Vec::with_capacity(xs.len() + 1);
    for (x, e) in xs.iter().zip(values) {
        let e = e?;
        // The excess is a sum of two triangle-inequality slacks, so it can
        // only go negative through solver error.
        let pass = e >= -1e-6;
        rows.push(Row {
            csv: format!("{},{e},{pass}", fmt_pt(x)),
            pass,
        });
        jsonl.push(json!({"x": x.x.as_slice(), "e": e, "pass": pass}).to_string());
    }
    let mx = max_excess(&m, &p0, &p1, samples, derive_seed(master, "excess-max"))
        .map_err(runtime)?;
    jsonl.push(
        json!({
            "max_excess": mx.value,
            "argmax": mx.argmax.x.as_slice(),
            "n_samples": mx.n_samples,
        })
        .to_string(),
    );
    Ok(RunOutput {
        header: "x,e,pass".to_string(),
        rows,
        jsonl,
        extra: Some(format!("max excess {} at ({})\n", mx.value, fmt_pt(&mx.argmax))),
    })
}

fn run_sphere_regularity(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("manifold", "sphere:2:1.0"))?;
    let p0 = parse_point(&cfg.get_str("p0", "1.2;0.5"), m.dim())?;
    let p1 = parse_point(
        &cfg.get_str("p1", "1.9415926535897931;3.641592653589793"),
        m.dim(),
    )?;
    check_point(&m, &p0, "p0")?;
    check_point(&m, &p1, "p1")?;
    let delta = cfg.get_f64("delta", 0.1)?;
    let count = cfg.get_usize("count", 50)?;
    let rac = cfg.get_opt_f64("rac")?;
    let reports: Vec<Result<RegularityReport, CliError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                rng_from_seed(derive_indexed_seed(master, "sphere-regularity", i as u64));
            for _ in 0..256 {
                let x = m.sample_point(&mut rng);
                let d0 = distance(&m, &x, &p0).map_err(runtime)?;
                let d1 = distance(&m, &x, &p1).map_err(runtime)?;
                if d0 < delta || d1 < delta {
                    continue;
                }
                return check_regular_point(&m, &p0, &p1, &x, delta, rac).map_err(runtime);
            }
            Err(CliError::Runtime(format!(
                "row {i}: no sample point clear of both centers after 256 draws"
            )))
        })
        .collect();
    let mut rows = Vec::with_capacity(count);
    let mut jsonl = Vec::with_capacity(count);
    for (i, rep) in reports.into_iter().enumerate() {
        let rep = rep?;
        jsonl.push(
            json!({
                "i": i,
                "x": rep.x.x.as_slice(),
                "excess": rep.excess,
                "min_angle": rep.min_angle,
                "predicted_bound": rep.predicted_bound,
                "n_pairs": rep.n_pairs,
                "regular": rep.regular,
            })
            .to_string(),
        );
        rows.push(Row {
            pass: rep.regular,
            csv: rep.csv_row(),
        });
    }
    Ok(RunOutput {
        header: RegularityReport::csv_header().to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn parse_cross(
    cfg: &mut Config,
    m: &ManifoldSpec,
    n: &ManifoldSpec,
) -> Result<(CrossDistance, f64), CliError> {
    let name = cfg.get_str("cross", "identity-chart");
    let gap = cfg.get_f64("gap", 0.06)?;
    let anchors = cfg.get_usize("anchors_per_side", 4)?;
    let cross = CrossDistance::from_name(&name, gap, m, n, anchors)
        .map_err(|e| CliError::Config(format!("key `cross`: {e}")))?;
    Ok((cross, gap))
}

fn run_fibration_demo(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("m", "flat_torus:4,0;0,4"))?;
    let n = parse_manifold(&cfg.get_str("n", "flat_torus:4,0;0,4"))?;
    let (cross, _) = parse_cross(cfg, &m, &n)?;
    let eps = cfg.get_f64("eps", 0.1)?;
    let sigma = cfg.get_f64("sigma", 0.45)?;
    let i0 = cfg.get_f64("i0", 2.0)?;
    let r0 = cfg.get_f64("r0", f64::INFINITY)?;
    let rac = cfg.get_f64("rac", f64::INFINITY)?;
    let grid = cfg.get_usize("grid", 12)?;
    let fd_step = cfg.get_f64("fd_step", 0.01)?;
    let fd = if fd_step > 0.0 { Some(fd_step) } else { None };
    let coupling = build_coupling(&m, &n, cross, eps, derive_seed(master, "fibration-net"))
        .map_err(runtime)?;
    let pairing = coupling.report.max_pairing;
    let fm = FibrationMap::new(coupling, sigma, i0, r0, rac, derive_seed(master, "fibration-map"))
        .map_err(runtime)?;
    let grid_rows = grid_check(&fm, grid, fd).map_err(runtime)?;
    let mut rows = Vec::with_capacity(grid_rows.len());
    let mut jsonl = Vec::with_capacity(grid_rows.len() + 1);
    let mut max_disp = 0.0f64;
    let mut min_sv = f64::INFINITY;
    for row in &grid_rows {
        let pass = row.displacement.is_finite()
            && row.min_singular_value.map_or(true, |s| s > 0.0);
        max_disp = max_disp.max(row.displacement);
        if let Some(s) = row.min_singular_value {
            min_sv = min_sv.min(s);
        }
        jsonl.push(
            json!({
                "x": row.x.x.as_slice(),
                "fx": row.image.x.as_slice(),
                "displacement": row.displacement,
                "residual": row.residual,
                "min_singular_value": row.min_singular_value,
            })
            .to_string(),
        );
        rows.push(Row {
            csv: row.csv_row(),
            pass,
        });
    }
    jsonl.push(
        json!({
            "max_pairing_distance": pairing,
            "max_displacement": max_disp,
            "min_singular_value": if min_sv.is_finite() { Some(min_sv) } else { None },
        })
        .to_string(),
    );
    Ok(RunOutput {
        header: GridRow::csv_header().to_string(),
        rows,
        jsonl,
        extra: Some(format!(
            "max displacement {max_disp}, min singular value {min_sv}\n"
        )),
    })
}

fn run_angle_transfer(cfg: &mut Config, master: u64) -> Result<RunOutput, CliError> {
    let m = parse_manifold(&cfg.get_str("m", "flat_torus:4,0;0,4"))?;
    let n = parse_manifold(&cfg.get_str("n", "flat_torus:4,0;0,4"))?;
    if !matches!(
        m.kind(),
        ManifoldKind::FlatTorus | ManifoldKind::PerturbedTorus
    ) {
        return Err(CliError::Config(
            "key `m`: angle transfer samples hinges in a torus chart".into(),
        ));
    }
    let (cross, _) = parse_cross(cfg, &m, &n)?;
    let eps = cfg.get_f64("eps", 0.1)?;
    let count = cfg.get_usize("count", 50)?;
    let mu = cfg.get_f64("mu", MU_STANDARD)?;
    let nu = cfg.get_f64("nu", 0.1)?;
    let len_min = cfg.get_f64("len_min", 0.1)?;
    let len_max = cfg.get_f64("len_max", 0.4)?;
    let min_sep = cfg.get_f64("min_sep", 0.05)?;
    let slack = cfg.get_f64("slack", 0.0)?;
    let coupling = build_coupling(&m, &n, cross, eps, derive_seed(master, "angle-net"))
        .map_err(runtime)?;
    let reports: Vec<Result<AngleTransferReport, CliError>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed_seed(master, "angle-transfer", i as u64));
            for _ in 0..64 {
                let p = m.sample_point(&mut rng);
                let endpoint = |rng: &mut ChaCha8Rng| -> Result<ChartPoint, CliError> {
                    let dir = unit_tangent(&m, &p, rng)?;
                    let len = rng.gen_range(len_min..len_max);
                    Ok(ChartPoint::from_vector(m.wrap(&(&p.x + dir * len))))
                };
                let q1 = endpoint(&mut rng)?;
                let q2 = endpoint(&mut rng)?;
                if m.chart_diff(&p.x, &q1.x).norm() < min_sep
                    || m.chart_diff(&p.x, &q2.x).norm() < min_sep
                {
                    continue;
                }
                let side = |mf: &ManifoldSpec, q: &ChartPoint| {
                    minimal_geodesics(mf, &p, q, 1e-3)
                        .ok()
                        .and_then(|v| v.into_iter().next())
                };
                let (Some(c1), Some(c2), Some(c1p), Some(c2p)) = (
                    side(&m, &q1),
                    side(&m, &q2),
                    side(&n, &q1),
                    side(&n, &q2),
                ) else {
                    continue;
                };
                match angle_transfer_report(&coupling, &c1, &c2, &c1p, &c2p, mu, nu) {
                    Ok(rep) => return Ok(rep),
                    Err(_) => continue,
                }
            }
            Err(CliError::Runtime(format!(
                "row {i}: no admissible hinge after 64 draws"
            )))
        })
        .collect();
    let mut rows = Vec::with_capacity(count);
    let mut jsonl = Vec::with_capacity(count);
    for rep in reports {
        let rep = rep?;
        let pass = rep.defect <= slack;
        jsonl.push(
            json!({
                "theta": rep.theta,
                "theta_prime": rep.theta_prime,
                "mu": rep.mu,
                "nu": rep.nu,
                "lengths": rep.lengths,
                "max_start_gap": rep.max_start_gap,
                "max_end_gap": rep.max_end_gap,
                "defect": rep.defect,
                "pass": pass,
            })
            .to_string(),
        );
        rows.push(Row {
            csv: rep.csv_row(),
            pass,
        });
    }
    Ok(RunOutput {
        header: AngleTransferReport::csv_header().to_string(),
        rows,
        jsonl,
        extra: None,
    })
}

fn run_experiment(
    name: &str,
    cfg: &mut Config,
    master: u64,
    log2: bool,
) -> Result<RunOutput, CliError> {
    match name {
        "toponogov-check" => run_toponogov(cfg, master),
        "rac-estimate" => run_rac_estimate(cfg, master),
        "conj-radius" => run_conj_radius(cfg, master),
        "critical-scan" => run_critical_scan(cfg, master),
        "betti-bound" => run_betti_bound(cfg, log2),
        "pi1-basis" => run_pi1_basis(cfg),
        "excess-scan" => run_excess_scan(cfg, master),
        "sphere-regularity" => run_sphere_regularity(cfg, master),
        "fibration-demo" => run_fibration_demo(cfg, master),
        "angle-transfer" => run_angle_transfer(cfg, master),
        other => Err(CliError::Config(format!(
            "unknown experiment `{other}`; available: {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

fn manifest(experiment: &str, master: u64, cfg: &Config) -> String {
    let mut out = String::new();
    out.push_str(&format!("tool = curvlab {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("experiment = {experiment}\n"));
    out.push_str(&format!("seed = {master}\n"));
    out.push_str(
        "seed-split = SplitMix64 folds of the master seed with a per-stream label and the row index; outputs do not depend on thread count\n",
    );
    out.push_str("config:\n");
    for (k, v) in &cfg.resolved {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out
}

fn write_outputs(
    base: &PathBuf,
    out: &RunOutput,
    manifest: &str,
) -> Result<(usize, usize), CliError> {
    let pass = out.rows.iter().filter(|r| r.pass).count();
    let fail = out.rows.len() - pass;
    let mut csv = String::with_capacity(out.rows.len() * 64);
    csv.push_str(&out.header);
    csv.push('\n');
    for row in &out.rows {
        csv.push_str(&row.csv);
        csv.push('\n');
    }
    csv.push_str(&format!(
        "# summary pass={pass} fail={fail} total={}\n",
        out.rows.len()
    ));
    let io = |e: std::io::Error| CliError::Runtime(format!("write {}: {e}", base.display()));
    std::fs::write(base.with_extension("csv"), csv).map_err(io)?;
    let mut jsonl = String::with_capacity(out.jsonl.len() * 64);
    for line in &out.jsonl {
        jsonl.push_str(line);
        jsonl.push('\n');
    }
    std::fs::write(base.with_extension("jsonl"), jsonl).map_err(io)?;
    std::fs::write(base.with_extension("manifest.txt"), manifest).map_err(io)?;
    Ok((pass, fail))
}

fn run(cli: &Cli) -> Result<usize, CliError> {
    let mut cfg = Config::load(cli)?;
    let cfg_seed = cfg.get_u64("seed", DEFAULT_SEED)?;
    let master = cli.seed.unwrap_or(cfg_seed);
    cfg.resolved.insert("seed".to_string(), master.to_string());
    let out = run_experiment(&cli.experiment, &mut cfg, master, cli.log2)?;
    cfg.finish()?;
    let base = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cli.experiment));
    let text = manifest(&cli.experiment, master, &cfg);
    let (pass, fail) = write_outputs(&base, &out, &text)?;
    if let Some(extra) = &out.extra {
        print!("{extra}");
    }
    println!(
        "{}: {} rows, {pass} pass, {fail} fail",
        cli.experiment,
        out.rows.len()
    );
    println!(
        "wrote {} {} {}",
        base.with_extension("csv").display(),
        base.with_extension("jsonl").display(),
        base.with_extension("manifest.txt").display()
    );
    Ok(fail)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == ErrorKind::DisplayHelp || e.kind() == ErrorKind::DisplayVersion =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
