//! Run configuration, check suites and JSON reports.
//!
//! A config is plain `key = value` text; `#` starts a comment. Every check
//! produces a [`CheckRecord`] whose `pass` flag is `value <= tolerance`;
//! errors raised by a check are captured in its record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{plaquette_average_constant, plaquette_average_ratio, GaussianDelta};
use crate::error::{Error, Result};
use crate::fields::{GaugeField, PlaquetteField};
use crate::flow::{multi_start, solve_bvp, stabilization_threshold, stop_sweep, Schedule, ToyMaps, ZeroMaps};
use crate::lattice::{CubeGrid, Lattice, Region};
use crate::minimizer::{
    energy_domination_constant, energy_domination_ratio, field_strength_gap, Gauge, Minimizer, Multiscale,
    SingleStep,
};
use crate::oracle::{
    ck_identity, free_partition, full_partition, hierarchical_fermi_integral, random_integrand_form,
    resolvent_bound, rg_step_invariance, stability_report, ChainHistory, Method, PartitionSpec, DET_BOUND_SIDE,
};
use crate::polymer::{boundary_split, cluster_log, partition_sum, reblock_decay, Activity, ClusterOptions};
use crate::regions::{expand_unity, unity_weight, UNITY_CAP};

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: Schedule,
    pub seed: u64,
    pub mc_samples: usize,
    /// Largest cluster size in the cluster expansion.
    pub nmax: usize,
    /// Largest number of Grassmann generators.
    pub degree_cap: usize,
    /// Replaces every check tolerance when set.
    pub tolerance: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            seed: 2024,
            mc_samples: 100_000,
            nmax: 8,
            degree_cap: 32,
            tolerance: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 16] = [
    "L", "m", "N", "e", "mbar", "r", "p", "p0", "eps", "kappa", "kappa0", "seed", "mc_samples", "nmax",
    "degree_cap", "tolerance",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config { key: key.into(), message: format!("cannot parse `{v}`") })
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                message: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config { key: key.into(), message: "duplicate key".into() });
            }
            let s = &mut c.schedule;
            match key {
                "L" => s.l = parse_value(key, value)?,
                "m" => s.m = parse_value(key, value)?,
                "N" => s.n = parse_value(key, value)?,
                "e" => s.e = parse_value(key, value)?,
                "mbar" => s.mbar = parse_value(key, value)?,
                "r" => s.r = parse_value(key, value)?,
                "p" => s.p = parse_value(key, value)?,
                "p0" => s.p0 = parse_value(key, value)?,
                "eps" => s.eps = parse_value(key, value)?,
                "kappa" => s.kappa = parse_value(key, value)?,
                "kappa0" => s.kappa0 = parse_value(key, value)?,
                "seed" => c.seed = parse_value(key, value)?,
                "mc_samples" => c.mc_samples = parse_value(key, value)?,
                "nmax" => c.nmax = parse_value(key, value)?,
                "degree_cap" => c.degree_cap = parse_value(key, value)?,
                "tolerance" => c.tolerance = Some(parse_value(key, value)?),
                _ => {
                    return Err(Error::Config {
                        key: key.into(),
                        message: format!("unknown key; expected one of {}", CONFIG_KEYS.join(", ")),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { key: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    /// Checks the schedule constraints. The coupling may be zero here, which
    /// the desk-scale oracles accept.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if s.l < 2 {
            return bad("L", "L >= 2 required");
        }
        if !(2.0 * s.p0 < s.p) {
            return bad("p0", "2p0 < p required");
        }
        if !(s.r < s.p) {
            return bad("r", "r < p required");
        }
        if !(s.e >= 0.0 && s.e < 1.0) {
            return bad("e", "0 <= e < 1 required");
        }
        if !(s.mbar >= 0.0 && s.mbar.is_finite()) {
            return bad("mbar", "mbar >= 0 required");
        }
        if !(s.eps > 0.0) {
            return bad("eps", "eps > 0 required");
        }
        if !(s.kappa >= s.kappa0) {
            return bad("kappa", "kappa >= kappa0 required");
        }
        if s.n == 0 {
            return bad("N", "N >= 1 required");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples", "mc_samples >= 1 required");
        }
        if self.nmax == 0 {
            return bad("nmax", "nmax >= 1 required");
        }
        if self.degree_cap == 0 || self.degree_cap > crate::grassmann::MAX_GENERATORS {
            return bad("degree_cap", "1 <= degree_cap <= 128 required");
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return bad("tolerance", "tolerance >= 0 required");
            }
        }
        Ok(())
    }

    /// Every key with its value; `parse(emit())` reproduces the config.
    pub fn emit(&self) -> String {
        let s = &self.schedule;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("L", s.l.to_string());
        put("m", s.m.to_string());
        put("N", s.n.to_string());
        put("e", format!("{:?}", s.e));
        put("mbar", format!("{:?}", s.mbar));
        put("r", format!("{:?}", s.r));
        put("p", format!("{:?}", s.p));
        put("p0", format!("{:?}", s.p0));
        put("eps", format!("{:?}", s.eps));
        put("kappa", format!("{:?}", s.kappa));
        put("kappa0", format!("{:?}", s.kappa0));
        put("seed", self.seed.to_string());
        put("mc_samples", self.mc_samples.to_string());
        put("nmax", self.nmax.to_string());
        put("degree_cap", self.degree_cap.to_string());
        if let Some(t) = self.tolerance {
            put("tolerance", format!("{t:?}"));
        }
        out
    }

    /// The schedule on the smallest torus, `N = 1`.
    pub fn desk_schedule(&self) -> Schedule {
        Schedule { n: 1, ..self.schedule.clone() }
    }

    fn desk_spec(&self) -> PartitionSpec {
        let mut spec = PartitionSpec::new(self.desk_schedule());
        spec.method = Method::MonteCarlo { seed: self.seed, samples: self.mc_samples };
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Schedule,
    Flow,
    Rgstep,
    Stability,
    ExpansionCheck,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Schedule, Suite::Flow, Suite::Rgstep, Suite::Stability, Suite::ExpansionCheck];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Schedule => "schedule",
            Suite::Flow => "flow",
            Suite::Rgstep => "rgstep",
            Suite::Stability => "stability",
            Suite::ExpansionCheck => "expansion-check",
        }
    }
}

/// What a check measured.
#[derive(Clone, Debug, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub detail: serde_json::Value,
}

fn measured(value: f64, detail: impl Serialize) -> Result<Measured> {
    let detail = serde_json::to_value(detail).map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(Measured { value, detail })
}

/// A named check with its default tolerance.
pub struct Check {
    pub name: &'static str,
    pub suite: Suite,
    /// What the check verifies.
    pub anchor: &'static str,
    pub tolerance: f64,
    pub run: fn(&RunConfig) -> Result<Measured>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub suite: Suite,
    pub anchor: String,
    /// SHA-256 of the check name and the emitted config.
    pub inputs_digest: String,
    pub value: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub error: Option<String>,
    pub detail: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

pub fn inputs_digest(name: &str, config: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(config.emit().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs one check, capturing errors in the record.
pub fn run_check(check: &Check, config: &RunConfig, timings: bool) -> CheckRecord {
    let tolerance = config.tolerance.unwrap_or(check.tolerance);
    let t0 = Instant::now();
    let out = (check.run)(config);
    let elapsed = t0.elapsed().as_secs_f64();
    let (value, detail, error) = match out {
        Ok(m) => (Some(m.value), m.detail, None),
        Err(e) => (None, serde_json::Value::Null, Some(e.to_string())),
    };
    let pass = value.is_some_and(|v| v.is_finite() && v <= tolerance);
    CheckRecord {
        name: check.name.into(),
        suite: check.suite,
        anchor: check.anchor.into(),
        inputs_digest: inputs_digest(check.name, config),
        value: value.filter(|v| v.is_finite()),
        tolerance,
        pass,
        error,
        detail,
        wall_time_s: timings.then_some(elapsed),
    }
}

/// Runs the checks of `suites` in registry order.
pub fn run_suite(config: &RunConfig, suites: &[Suite], timings: bool) -> Vec<CheckRecord> {
    checks().iter().filter(|c| suites.contains(&c.suite)).map(|c| run_check(c, config, timings)).collect()
}

pub fn all_pass(records: &[CheckRecord]) -> bool {
    records.iter().all(|r| r.pass)
}

/// Process exit status for a finished run.
pub fn exit_code(records: &[CheckRecord]) -> i32 {
    if all_pass(records) {
        0
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: String,
    pub suites: Vec<Suite>,
    pub checks: Vec<CheckRecord>,
    pub passed: usize,
    pub failed: usize,
}

impl Report {
    pub fn new(config: &RunConfig, suites: &[Suite], checks: Vec<CheckRecord>) -> Self {
        let passed = checks.iter().filter(|c| c.pass).count();
        Self { config: config.emit(), suites: suites.to_vec(), failed: checks.len() - passed, checks, passed }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Checks

fn flag_count(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&b| !b).count() as f64
}

fn schedule_validate(c: &RunConfig) -> Result<Measured> {
    let ok = c.schedule.validate().is_ok();
    measured(flag_count(&[ok]), c.schedule.validate().err().map(|e| e.to_string()))
}

fn schedule_stop(c: &RunConfig) -> Result<Measured> {
    let base = Schedule { n: 10, ..c.schedule.clone() };
    let rows = stop_sweep(&base, 10..=30)?;
    let thr = stabilization_threshold(&rows);
    let flags: Vec<bool> = rows.iter().map(|r| r.r_steps_ok).chain([thr.is_some_and(|t| t < 30)]).collect();
    measured(flag_count(&flags), serde_json::json!({ "rows": rows, "threshold": thr }))
}

fn flow_zero(c: &RunConfig) -> Result<Measured> {
    let s = &c.schedule;
    let k = s.stop_index()?;
    let sol = solve_bvp(s, &ZeroMaps, k, [0.0, 0.0], 1e-14, 10)?;
    measured(sol.eps0.abs() + sol.m0.abs(), [sol.eps0, sol.m0])
}

fn toy_solutions(c: &RunConfig) -> Result<(Vec<crate::flow::BvpSolution>, f64)> {
    let s = &c.schedule;
    let k = s.stop_index()?;
    let maps = ToyMaps { c: 1e-3, schedule: s };
    multi_start(s, &maps, k, &[[0.0, 0.0], [1e-2, -1e-2], [-0.5, 0.3]], 1e-15)
}

fn flow_multistart(c: &RunConfig) -> Result<Measured> {
    let (sols, spread) = toy_solutions(c)?;
    measured(spread, [sols[0].eps0, sols[0].m0])
}

fn flow_flags(c: &RunConfig) -> Result<Measured> {
    let (sols, _) = toy_solutions(c)?;
    let flags: Vec<bool> = sols[0].trajectory.iter().map(|r| r.flags.all()).collect();
    measured(flag_count(&flags), &sols[0].trajectory)
}

fn random_background(c: &RunConfig, lat: &Lattice) -> GaugeField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    GaugeField::random(lat, 0, &mut rng, 1.0)
}

fn step_invariance(c: &RunConfig) -> Result<crate::oracle::StepInvariance> {
    let lat = Lattice::cubic(c.schedule.l, 1.0)?;
    let a = random_background(c, &lat);
    let mass = c.desk_schedule().mbar_k(0).max(0.1);
    rg_step_invariance(&a, 0.5, mass, c.schedule.l, 1.0)
}

fn rgstep_fermion(c: &RunConfig) -> Result<Measured> {
    let s = step_invariance(c)?;
    measured(s.fermion, s)
}

fn rgstep_boson(c: &RunConfig) -> Result<Measured> {
    let s = step_invariance(c)?;
    measured(s.boson, s)
}

fn rgstep_combined(c: &RunConfig) -> Result<Measured> {
    let s = step_invariance(c)?;
    measured(s.combined, s)
}

fn rgstep_delta(c: &RunConfig) -> Result<Measured> {
    let coarse = Lattice::cubic(1, 1.0)?;
    let d = GaussianDelta::new(1.0, c.schedule.l, &coarse, vec![0]);
    measured(d.normalization_residual(), d.log_normalization())
}

fn free_partition_desk(c: &RunConfig) -> Result<crate::oracle::FreePartition> {
    free_partition(&c.desk_spec())
}

fn rgstep_free_fermion(c: &RunConfig) -> Result<Measured> {
    let f = free_partition_desk(c)?;
    measured(f.fermion_rel_err, &f)
}

fn rgstep_free_boson(c: &RunConfig) -> Result<Measured> {
    let f = free_partition_desk(c)?;
    measured(f.boson_rel_err.max(f.tree_rel_err), &f)
}

fn rgstep_minimizer(c: &RunConfig) -> Result<Measured> {
    let fine = Lattice::cubic(4, 0.25)?;
    let mut o1 = vec![false; 8];
    o1[..5].fill(true);
    let ms = Multiscale::new(&fine, 2, vec![o1])?;
    let land = Minimizer::new(&ms, Gauge::Landau)?;
    let ax = Minimizer::new(&ms, Gauge::Axial)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut worst = [0.0f64; 2];
    for _ in 0..10 {
        let rhs: Vec<f64> = (0..land.rows().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst[0] = worst[0].max(land.constraint_residual(&rhs)?).max(ax.constraint_residual(&rhs)?);
        worst[1] = worst[1].max(field_strength_gap(&land.solve(&rhs)?, &ax.solve(&rhs)?));
    }
    measured(worst[0].max(worst[1]), worst)
}

fn rgstep_split(c: &RunConfig) -> Result<Measured> {
    let fine = Lattice::new([8, 4, 4], 0.25)?;
    let ms = Multiscale::new(&fine, 2, vec![vec![true; 16]])?;
    let step = SingleStep::new(&ms, vec![true, false])?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let akom: Vec<f64> = (0..step.base.rows().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let anext = GaugeField::random(&ms.level(2)?, 2, &mut rng, 1.0);
    let (amin, _) = step.a_min(&akom, &anext)?;
    let param = step.fluctuation_space();
    let delta = step.fluctuation_form();
    let zc: Vec<f64> = (0..param.ncols()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = &param * crate::linalg::Vector::from_vec(zc);
    measured(step.split_residual(&amin, z.as_slice(), &delta)?, ())
}

/// Largest ratio on `4^3` over the brute-force constant on `2^3`.
fn rgstep_plaquette(c: &RunConfig) -> Result<Measured> {
    let cst = plaquette_average_constant(&Lattice::cubic(2, 0.5)?, 2, &[true])?;
    let big = Lattice::cubic(4, 0.5)?;
    let mut x = vec![false; 8];
    x[0] = true;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let vals = (0..big.n_plaquettes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(plaquette_average_ratio(&PlaquetteField::from_values(&big, 0, vals)?, 2, &x)?);
    }
    measured(worst / cst, [cst, worst])
}

fn rgstep_energy(c: &RunConfig) -> Result<Measured> {
    let cst = energy_domination_constant(&Lattice::cubic(2, 0.5)?, 2, &[vec![true; 8], vec![true]])?;
    let big = Lattice::cubic(4, 0.5)?;
    let regions = vec![vec![true; 64], vec![true; 8]];
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        worst = worst.max(energy_domination_ratio(&GaugeField::random(&big, 0, &mut rng, 1.0), 2, &regions)?);
    }
    measured(worst / cst, [cst, worst])
}

fn exact_ratio(c: &RunConfig) -> Result<Measured> {
    let mut spec = c.desk_spec();
    spec.schedule.e = 0.0;
    spec.method = Method::Exact;
    let f = full_partition(&spec)?;
    measured((f.ratio - 1.0).abs(), &f)
}

fn stability(c: &RunConfig) -> Result<crate::oracle::StabilityReport> {
    stability_report(&c.desk_spec(), c.seed, c.mc_samples)
}

fn stability_band(c: &RunConfig) -> Result<Measured> {
    let r = stability(c)?;
    let a = r.ratio_mc.abs();
    measured((0.5 - a).max(a - 1.5).max(0.0), &r)
}

fn stability_agreement(c: &RunConfig) -> Result<Measured> {
    let r = stability(c)?;
    measured(r.deviation, [r.ratio_mc, r.sigma_mc, r.ratio_wick, r.sigma_wick])
}

fn stability_c1(c: &RunConfig) -> Result<Measured> {
    let w = crate::oracle::wick_expansion(&c.desk_spec())?;
    measured(w.c1.abs().max(w.one_point), w)
}

fn stability_det(c: &RunConfig) -> Result<Measured> {
    let s = &c.desk_schedule();
    let d = crate::oracle::det_bound(s.l, 1, DET_BOUND_SIDE, 1.0, s.mbar_k(s.n))?;
    measured(flag_count(&[d.holds()]), d)
}

fn stability_ck(c: &RunConfig) -> Result<Measured> {
    let s = &c.desk_schedule();
    let r = ck_identity(s.l, 1, 1, 1.0, s.mbar_k(s.n).max(1e-3))?;
    measured(r.inverse_residual.max(r.iterated_residual), r)
}

fn stability_resolvent(c: &RunConfig) -> Result<Measured> {
    let s = &c.desk_schedule();
    let lat = Lattice::cubic(2 * s.l, 1.0 / s.l as f64)?;
    let r = resolvent_bound(&lat, s.mbar_k(s.n))?;
    measured(flag_count(&[r.holds()]), r)
}

fn stability_hierarchy(c: &RunConfig) -> Result<Measured> {
    let h = ChainHistory::one_defect(c.schedule.l);
    let b = random_integrand_form(&h, c.seed, 0.3)?;
    let r = hierarchical_fermi_integral(&h, &b, 1.0, c.degree_cap)?;
    let jgap = r.j_closed.iter().zip(&r.j_rescaled).map(|(a, b)| (a - b).abs() / a).fold(0.0, f64::max);
    measured(r.rel_err.max(r.determinant_rel_err).max(jgap), &r)
}

fn polymer_activity(c: &RunConfig) -> Result<Activity<f64>> {
    let g = CubeGrid::cubic(6, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let shapes: [&[[i64; 3]]; 6] = [
        &[[0, 0, 0]],
        &[[1, 0, 0], [1, 1, 0]],
        &[[2, 1, 0]],
        &[[0, 1, 0], [0, 2, 0]],
        &[[4, 4, 4], [4, 4, 5]],
        &[[3, 4, 4]],
    ];
    let mut h = Activity::new(g);
    for s in shapes {
        h.insert(Region::from_coords(g, s).cubes().to_vec(), 0.05 * rng.random_range(-1.0..1.0))?;
    }
    Ok(h)
}

fn expansion_cluster(c: &RunConfig) -> Result<Measured> {
    let h = polymer_activity(c)?;
    let out = cluster_log(&h, ClusterOptions { n_max: c.nmax, ..Default::default() })?;
    let z = partition_sum(&h, &1.0)?;
    let logz = out.v.total().unwrap_or(0.0);
    measured((logz.exp() - z).abs(), [logz.exp(), z])
}

fn expansion_boundary(c: &RunConfig) -> Result<Measured> {
    let h = polymer_activity(c)?;
    let g = *h.grid();
    let lambda = Region::from_coords(g, &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 0], [2, 1, 0]]);
    let s = boundary_split(&h, &lambda, ClusterOptions { n_max: c.nmax, ..Default::default() })?;
    let worst = s
        .boundary
        .iter()
        .filter(|(k, _)| k.iter().all(|&x| lambda.contains(x)))
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    measured(worst, s.boundary.len())
}

fn reblock_8(c: &RunConfig) -> Result<crate::polymer::ReblockDecay> {
    reblock_decay(&CubeGrid::cubic(8, 1.0)?, c.schedule.kappa, c.schedule.l, 4)
}

fn expansion_reblock_sum(c: &RunConfig) -> Result<Measured> {
    let r = reblock_8(c)?;
    measured(r.sum_rel_err, &r)
}

fn expansion_reblock_rate(c: &RunConfig) -> Result<Measured> {
    let r = reblock_8(c)?;
    measured((r.required_rate - r.envelope.rate).max(0.0), &r)
}

fn expansion_unity(c: &RunConfig) -> Result<Measured> {
    let g = CubeGrid::cubic(2, 1.0)?;
    let all = Region::full(g);
    let terms = expand_unity(&all, UNITY_CAP)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let chi: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
    let s: f64 = terms.iter().map(|p| unity_weight(&chi, &all, p)).sum();
    measured((s - 1.0).abs(), terms.len())
}

fn expansion_inclusions(_: &RunConfig) -> Result<Measured> {
    let (cases, failures) = exhaustive_inclusions(CubeGrid::new([13, 13, 1], 1.0)?)?;
    measured(failures as f64, cases)
}

/// Every `(P, Q, R, U)` made of at most one cube each, with `Lambda_k` the full torus
/// or a slab, through the region maps. Returns `(cases, failures)`.
pub fn exhaustive_inclusions(g: CubeGrid) -> Result<(usize, usize)> {
    use crate::regions::{check_inclusions, derive_omega, derive_regions, derive_s_t};
    let singles = |r: &Region| -> Vec<Region> {
        std::iter::once(Region::empty(g))
            .chain(r.cubes().iter().map(|&c| Region::new(g, [c]).expect("cube in grid")))
            .collect()
    };
    let lambdas = [Region::full(g), Region::new(g, (0..g.len()).filter(|&c| g.coords(c)[0] < 11))?];
    let (mut cases, mut failures) = (0, 0);
    for lk in &lambdas {
        let l5 = lk.shrink(5);
        for p in singles(&l5) {
            for q in [Region::empty(g)].into_iter().chain(singles(&l5).into_iter().step_by(7)) {
                let omega = derive_omega(lk, &p, &q)?;
                for r in singles(&omega.shrink(3)) {
                    let (_, t) = derive_s_t(&omega, &r)?;
                    for u in [Region::empty(g)].into_iter().chain(singles(&t).into_iter().skip(1).take(1)) {
                        let d = derive_regions(lk, &p, &q, &r, &u)?;
                        cases += 1;
                        if !check_inclusions(lk, &p, &q, &r, &u, &d)?.all() {
                            failures += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((cases, failures))
}

static CHECKS: [Check; 30] = [
    Check { name: "schedule.constraints", suite: Suite::Schedule, anchor: "schedule parameters satisfy 2p0 < p, r < p, 0 < e < 1", tolerance: 0.0, run: schedule_validate },
    Check { name: "schedule.stop-index", suite: Suite::Schedule, anchor: "stop index exists, r_k steps by 1 or 1/L, N - K eventually constant", tolerance: 0.0, run: schedule_stop },
    Check { name: "flow.zero-maps", suite: Suite::Flow, anchor: "zero maps give zero counterterms", tolerance: 0.0, run: flow_zero },
    Check { name: "flow.multi-start", suite: Suite::Flow, anchor: "boundary value solution is unique for Lipschitz maps", tolerance: 1e-10, run: flow_multistart },
    Check { name: "flow.bound-flags", suite: Suite::Flow, anchor: "trajectory stays inside the coupling bounds", tolerance: 0.0, run: flow_flags },
    Check { name: "rgstep.fermion", suite: Suite::Rgstep, anchor: "fermion block averaging preserves the partition function", tolerance: 1e-9, run: rgstep_fermion },
    Check { name: "rgstep.boson", suite: Suite::Rgstep, anchor: "gauge block averaging preserves the partition function", tolerance: 1e-9, run: rgstep_boson },
    Check { name: "rgstep.combined", suite: Suite::Rgstep, anchor: "combined step preserves the partition function", tolerance: 1e-9, run: rgstep_combined },
    Check { name: "rgstep.delta-normalization", suite: Suite::Rgstep, anchor: "Gaussian delta function integrates to one", tolerance: 1e-12, run: rgstep_delta },
    Check { name: "rgstep.free-fermion", suite: Suite::Rgstep, anchor: "free fermion partition function directly and by iterated averaging", tolerance: 1e-10, run: rgstep_free_fermion },
    Check { name: "rgstep.free-boson", suite: Suite::Rgstep, anchor: "free gauge partition function directly, factorized and with two trees", tolerance: 1e-10, run: rgstep_free_boson },
    Check { name: "rgstep.minimizer", suite: Suite::Rgstep, anchor: "minimizers satisfy the constraints and share field strengths across gauges", tolerance: 1e-8, run: rgstep_minimizer },
    Check { name: "rgstep.quadratic-split", suite: Suite::Rgstep, anchor: "action splits into minimizer and fluctuation parts", tolerance: 1e-8, run: rgstep_split },
    Check { name: "rgstep.plaquette-average", suite: Suite::Rgstep, anchor: "plaquette averaging is bounded in L2 (ratio to the 2^3 constant)", tolerance: 2.0, run: rgstep_plaquette },
    Check { name: "rgstep.energy-domination", suite: Suite::Rgstep, anchor: "multiscale field strengths dominated by the fine energy (ratio to the 2^3 constant)", tolerance: 2.0, run: rgstep_energy },
    Check { name: "stability.zero-coupling", suite: Suite::Stability, anchor: "Z(N,0)/Z(N,0) = 1 at zero coupling", tolerance: 0.0, run: exact_ratio },
    Check { name: "stability.free-ratio-exact", suite: Suite::Stability, anchor: "Monte Carlo ratio is exactly one at zero coupling", tolerance: 0.0, run: exact_mc_ratio },
    Check { name: "stability.ratio-band", suite: Suite::Stability, anchor: "1/2 <= |Z(N,e)/Z(N,0)| <= 3/2 (distance outside the band)", tolerance: 0.0, run: stability_band },
    Check { name: "stability.mc-vs-wick", suite: Suite::Stability, anchor: "Monte Carlo and order-e^2 expansion agree (combined sigmas)", tolerance: 3.0, run: stability_agreement },
    Check { name: "stability.wick-first-order", suite: Suite::Stability, anchor: "order-e coefficient vanishes", tolerance: 1e-12, run: stability_c1 },
    Check { name: "stability.det-bound", suite: Suite::Stability, anchor: "|det C_K(0)| <= exp((M r_K)^4)", tolerance: 0.0, run: stability_det },
    Check { name: "stability.ck-identity", suite: Suite::Stability, anchor: "C_K(0) = b_K^-1 + Q_K (D_0 + mbar_K)^-1 Q_K^T inverts D_K", tolerance: 1e-10, run: stability_ck },
    Check { name: "stability.resolvent", suite: Suite::Stability, anchor: "||(D_0 + mbar)^-1|| <= 2 / (eta mbar)", tolerance: 0.0, run: stability_resolvent },
    Check { name: "stability.hierarchy", suite: Suite::Stability, anchor: "hierarchical fermion recursion equals the direct Berezin integral", tolerance: 1e-10, run: stability_hierarchy },
    Check { name: "expansion.cluster-log", suite: Suite::ExpansionCheck, anchor: "exp of the cluster logarithm equals the polymer partition sum", tolerance: 1e-6, run: expansion_cluster },
    Check { name: "expansion.boundary-terms", suite: Suite::ExpansionCheck, anchor: "boundary terms vanish inside the region", tolerance: 0.0, run: expansion_boundary },
    Check { name: "expansion.reblock-sum", suite: Suite::ExpansionCheck, anchor: "reblocking preserves the activity sum", tolerance: 1e-11, run: expansion_reblock_sum },
    Check { name: "expansion.reblock-rate", suite: Suite::ExpansionCheck, anchor: "reblocked activities decay at rate L(kappa - kappa0 - 1) (shortfall)", tolerance: 0.0, run: expansion_reblock_rate },
    Check { name: "expansion.partition-of-unity", suite: Suite::ExpansionCheck, anchor: "characteristic-function expansion sums to one", tolerance: 1e-12, run: expansion_unity },
    Check { name: "expansion.region-inclusions", suite: Suite::ExpansionCheck, anchor: "region maps satisfy their inclusion identities", tolerance: 0.0, run: expansion_inclusions },
];

fn exact_mc_ratio(c: &RunConfig) -> Result<Measured> {
    let mut spec = c.desk_spec();
    spec.schedule.e = 0.0;
    spec.method = Method::MonteCarlo { seed: c.seed, samples: c.mc_samples.min(1000) };
    let f = full_partition(&spec)?;
    measured((f.ratio - 1.0).abs().max(f.sigma), &f)
}

pub fn checks() -> &'static [Check] {
    &CHECKS
}

/// `name<TAB>suite<TAB>anchor` for every check.
pub fn list_checks() -> String {
    let mut out = String::new();
    for c in checks() {
        let _ = writeln!(out, "{}\t{}\t{}", c.name, c.suite.name(), c.anchor);
    }
    out
}
