//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p blockrg-core --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use blockrg_core::averaging::{plaquette_average_constant, plaquette_average_ratio, GaussianDelta};
use blockrg_core::fields::{GaugeField, PlaquetteField};
use blockrg_core::flow::{multi_start, solve_bvp, stabilization_threshold, stop_sweep, Schedule, ToyMaps, ZeroMaps};
use blockrg_core::grassmann::bilinear;
use blockrg_core::lattice::{CubeGrid, Lattice, Region};
use blockrg_core::linalg::Vector;
use blockrg_core::minimizer::{
    energy_domination_constant, energy_domination_ratio, field_strength_gap, Gauge, Minimizer, Multiscale,
    SingleStep,
};
use blockrg_core::oracle::{
    det_bound, full_partition, hierarchical_fermi_integral, random_integrand_form, resolvent_bound,
    rg_step_invariance, stability_report, ChainHistory, Method, PartitionSpec,
};
use blockrg_core::polymer::{boundary_split, cluster_log, partition_sum, reblock_decay, Activity, ClusterOptions};
use blockrg_core::regions::{expand_unity, step_choices, step_weight, unity_weight, StepChars, UNITY_CAP};
use blockrg_core::report::exhaustive_inclusions;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240611;

const MINIMIZER_TOL: f64 = 1e-8;
const RG_STEP_TOL: f64 = 1e-9;
const DELTA_TOL: f64 = 1e-12;
const CLUSTER_TOL: f64 = 1e-6;
const CLUSTER_ACTIVITY: f64 = 0.05;
const CLUSTER_NMAX: usize = 8;
const REBLOCK_SUM_TOL: f64 = 1e-11;
const REBLOCK_KAPPA: f64 = 10.0;
const REBLOCK_CAP: usize = 4;
const FLOW_SPREAD_TOL: f64 = 1e-10;
const AVERAGING_FACTOR: f64 = 2.0;
const DET_SIDE: usize = 4;
const MC_SAMPLES: usize = 100_000;
const MC_SIGMAS: f64 = 3.0;
const HIERARCHY_TOL: f64 = 1e-10;
const UNITY_TOL: f64 = 1e-14;

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: String) -> Outcome {
    Outcome { pass, summary }
}

fn rng(offset: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED + offset)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `Q H A = A`, Landau and axial field strengths, and the quadratic split.
fn c01_minimizers() -> Outcome {
    let mut r = rng(1);
    let fine4 = Lattice::cubic(4, 0.25).unwrap();
    let mut o1 = vec![false; 8];
    o1[..5].fill(true);
    let systems = [
        Multiscale::new(&fine4, 2, vec![o1]).unwrap(),
        Multiscale::full(&fine4, 2, 2).unwrap(),
        Multiscale::full(&Lattice::cubic(8, 0.125).unwrap(), 2, 3).unwrap(),
    ];
    let mut worst = [0.0f64; 3];
    let mut inputs = 0;
    for (i, ms) in systems.iter().enumerate() {
        let land = Minimizer::new(ms, Gauge::Landau).unwrap();
        let ax = Minimizer::new(ms, Gauge::Axial).unwrap();
        for _ in 0..[30, 30, 10][i] {
            let rhs = uniform(&mut r, land.rows().len());
            worst[0] = worst[0].max(land.constraint_residual(&rhs).unwrap()).max(ax.constraint_residual(&rhs).unwrap());
            worst[1] = worst[1].max(field_strength_gap(&land.solve(&rhs).unwrap(), &ax.solve(&rhs).unwrap()));
            inputs += 1;
        }
    }
    let fine = Lattice::new([8, 4, 4], 0.25).unwrap();
    let ms = Multiscale::new(&fine, 2, vec![vec![true; 16]]).unwrap();
    let step = SingleStep::new(&ms, vec![true, false]).unwrap();
    let param = step.fluctuation_space();
    let delta = step.fluctuation_form();
    let lat2 = ms.level(2).unwrap();
    for _ in 0..30 {
        let akom = uniform(&mut r, step.base.rows().len());
        let anext = GaugeField::random(&lat2, 2, &mut r, 1.0);
        let (amin, _) = step.a_min(&akom, &anext).unwrap();
        let z = &param * Vector::from_vec(uniform(&mut r, param.ncols()));
        worst[2] = worst[2].max(step.split_residual(&amin, z.as_slice(), &delta).unwrap());
        inputs += 1;
    }
    let pass = worst.iter().all(|&w| w <= MINIMIZER_TOL);
    outcome(pass, format!("{inputs} inputs; constraint {:.1e}, field strength {:.1e}, split {:.1e}", worst[0], worst[1], worst[2]))
}

fn c02_rg_step() -> Outcome {
    let lat = Lattice::cubic(2, 1.0).unwrap();
    let mut r = rng(2);
    let mut worst = [0.0f64; 3];
    for i in 0..5 {
        let a = GaugeField::random(&lat, 0, &mut r, 1.0);
        let inv = rg_step_invariance(&a, 0.3 + 0.1 * i as f64, 0.2 + 0.2 * i as f64, 2, 1.0 + 0.5 * i as f64).unwrap();
        worst[0] = worst[0].max(inv.fermion);
        worst[1] = worst[1].max(inv.boson);
        worst[2] = worst[2].max(inv.combined);
    }
    let pass = worst.iter().all(|&w| w <= RG_STEP_TOL);
    outcome(pass, format!("fermion {:.1e}, boson {:.1e}, combined {:.1e}", worst[0], worst[1], worst[2]))
}

/// Determinant formula and an independent Berezin integral of the exponential.
fn c03_delta() -> Outcome {
    let mut worst = 0.0f64;
    for (b, l, n) in [(1.0, 2, 1), (0.7, 2, 2), (2.5, 3, 1), (1.3, 4, 2)] {
        let coarse = Lattice::cubic(n, l as f64).unwrap();
        let d = GaussianDelta::new(b, l, &coarse, (0..coarse.n_sites()).collect());
        worst = worst.max(d.normalization_residual());
    }
    let coarse = Lattice::cubic(1, 2.0).unwrap();
    let d = GaussianDelta::new(1.3, 2, &coarse, vec![0]);
    let pairs: Vec<(usize, usize)> = (0..4).map(|i| (2 * i, 2 * i + 1)).collect();
    let e = bilinear(8, &pairs, &d.form()).scale(Complex64::new(-1.0, 0.0)).exp().unwrap();
    let z = e.integrate(&pairs).scalar_part() * d.log_normalization().exp();
    let berezin = (z - Complex64::new(1.0, 0.0)).norm();
    worst = worst.max(berezin);
    outcome(worst <= DELTA_TOL, format!("max |N det - 1| = {worst:.1e} (Berezin {berezin:.1e})"))
}

fn random_polymers(r: &mut ChaCha8Rng, g: CubeGrid, count: usize) -> Activity<f64> {
    let mut h = Activity::new(g);
    while h.len() < count {
        let mut p = [r.random_range(0..3i64), r.random_range(0..3i64), r.random_range(0..2i64)];
        let mut cubes = vec![p];
        for _ in 0..r.random_range(0..3) {
            let axis = r.random_range(0..3);
            p[axis] += 1;
            cubes.push(p);
        }
        let key = Region::from_coords(g, &cubes).cubes().to_vec();
        if h.get(&key).is_none() {
            h.insert(key, CLUSTER_ACTIVITY * r.random_range(-1.0..1.0)).unwrap();
        }
    }
    h
}

fn c04_cluster() -> Outcome {
    let g = CubeGrid::cubic(6, 1.0).unwrap();
    let mut r = rng(4);
    let opts = ClusterOptions { n_max: CLUSTER_NMAX, ..Default::default() };
    let mut worst = 0.0f64;
    let mut boundary_max = 0.0f64;
    for n in 1..=6 {
        for _ in 0..5 {
            let h = random_polymers(&mut r, g, n);
            let out = cluster_log(&h, opts.clone()).unwrap();
            let z = partition_sum(&h, &1.0).unwrap();
            worst = worst.max((out.v.total().unwrap_or(0.0).exp() - z).abs());
            let lambda = Region::new(g, (0..g.len()).filter(|&c| g.coords(c)[0] < 2)).unwrap();
            let s = boundary_split(&h, &lambda, opts.clone()).unwrap();
            for (k, v) in s.boundary.iter() {
                if k.iter().all(|&c| lambda.contains(c)) {
                    boundary_max = boundary_max.max(v.abs());
                }
            }
        }
    }
    let pass = worst <= CLUSTER_TOL && boundary_max == 0.0;
    outcome(pass, format!("30 systems; max |exp(log) - Z| = {worst:.1e}, interior boundary terms {boundary_max:.1e}"))
}

fn c05_reblock() -> Outcome {
    let r = reblock_decay(&CubeGrid::cubic(8, 1.0).unwrap(), REBLOCK_KAPPA, 2, REBLOCK_CAP).unwrap();
    let pass = r.sum_rel_err <= REBLOCK_SUM_TOL && r.rate_ok();
    outcome(
        pass,
        format!(
            "sum rel err {:.1e}; fitted rate {:.4} vs required L(kappa - kappa0 - 1) = {:.4} (kappa0 = {:.4})",
            r.sum_rel_err, r.envelope.rate, r.required_rate, r.kappa0
        ),
    )
}

fn c06_flow() -> Outcome {
    let s = Schedule::default();
    let k = s.stop_index().unwrap();
    let zero = solve_bvp(&s, &ZeroMaps, k, [0.0, 0.0], 1e-14, 10).unwrap();
    let exact = zero.eps0 == 0.0 && zero.m0 == 0.0;
    let maps = ToyMaps { c: 1e-3, schedule: &s };
    let (sols, spread) = multi_start(&s, &maps, k, &[[0.0, 0.0], [1e-2, -1e-2], [-0.5, 0.3], [2.0, 1.0]], 1e-15).unwrap();
    let flags = sols.iter().all(|x| x.flags_ok());
    outcome(exact && spread <= FLOW_SPREAD_TOL && flags, format!("zero maps exact: {exact}; spread {spread:.1e}; flags {flags}"))
}

fn c07_schedule() -> Outcome {
    let base = Schedule { l: 2, m: 2, e: 0.01, ..Schedule::default() };
    let rows = stop_sweep(&base, 10..=30);
    let Ok(rows) = rows else {
        return outcome(false, format!("stop index missing: {}", rows.unwrap_err()));
    };
    let steps = rows.iter().all(|r| r.r_steps_ok);
    let thr = stabilization_threshold(&rows);
    let stable = thr.is_some_and(|t| t < 30);
    let nk = rows.last().map(|r| r.n_minus_k).unwrap_or(0);
    outcome(steps && stable, format!("K exists for N = 10..30; r steps ok: {steps}; N - K = {nk} from N = {thr:?}"))
}

fn c08_averaging() -> Outcome {
    let mut r = rng(8);
    let cp = plaquette_average_constant(&Lattice::cubic(2, 0.5).unwrap(), 2, &[true]).unwrap();
    let big = Lattice::cubic(4, 0.5).unwrap();
    let mut x = vec![false; 8];
    x[3] = true;
    let mut wp = 0.0f64;
    for _ in 0..50 {
        let f = PlaquetteField::from_values(&big, 0, uniform(&mut r, big.n_plaquettes())).unwrap();
        wp = wp.max(plaquette_average_ratio(&f, 2, &x).unwrap());
    }
    let ce = energy_domination_constant(&Lattice::cubic(2, 0.5).unwrap(), 2, &[vec![true; 8], vec![true]]).unwrap();
    let regions = vec![vec![true; 64], vec![true; 8]];
    let mut we = 0.0f64;
    for _ in 0..50 {
        let a = GaugeField::random(&big, 0, &mut r, 1.0);
        we = we.max(energy_domination_ratio(&a, 2, &regions).unwrap());
    }
    let pass = wp <= AVERAGING_FACTOR * cp && we <= AVERAGING_FACTOR * ce;
    outcome(pass, format!("plaquette {wp:.3} vs C = {cp:.3}; energy {we:.3} vs C = {ce:.3}"))
}

fn c09_bounds() -> Outcome {
    let s = Schedule { n: 1, ..Schedule::default() };
    let d = det_bound(2, 1, DET_SIDE, 1.0, s.mbar_k(1)).unwrap();
    let mut res = Vec::new();
    for (n, eta, m) in [(2, 1.0, 1.0), (4, 0.5, 0.5), (4, 0.25, 0.1), (6, 1.0 / 3.0, 2.0)] {
        res.push(resolvent_bound(&Lattice::cubic(n, eta).unwrap(), m).unwrap());
    }
    let pass = d.holds() && res.iter().all(|r| r.holds());
    let worst = res.iter().map(|r| r.norm / r.bound).fold(0.0, f64::max);
    outcome(pass, format!("log|det C_K| = {:.2} <= {}; max resolvent/bound = {worst:.3}", d.log_abs_det, d.log_bound))
}

fn c10_stability() -> Outcome {
    let mut s = Schedule { n: 1, l: 2, e: 0.0, ..Schedule::default() };
    let mut spec = PartitionSpec::new(s.clone());
    spec.method = Method::Exact;
    let exact = full_partition(&spec).unwrap().ratio;
    spec.method = Method::MonteCarlo { seed: SEED, samples: 1000 };
    let mc0 = full_partition(&spec).unwrap().ratio;
    s.e = 0.05;
    let r = stability_report(&PartitionSpec::new(s), SEED, MC_SAMPLES).unwrap();
    let pass = exact == 1.0 && mc0 == 1.0 && r.in_band && r.agrees(MC_SIGMAS);
    outcome(
        pass,
        format!(
            "e = 0 ratio {exact} / {mc0}; e = 0.05: MC {:.6} +- {:.1e}, Wick {:.6} +- {:.1e}, {:.2} sigma",
            r.ratio_mc, r.sigma_mc, r.ratio_wick, r.sigma_wick, r.deviation
        ),
    )
}

fn c11_hierarchy() -> Outcome {
    let h = ChainHistory::one_defect(2);
    let b = random_integrand_form(&h, SEED, 0.3).unwrap();
    let r = hierarchical_fermi_integral(&h, &b, 1.0, 32).unwrap();
    let err = r.rel_err.max(r.determinant_rel_err);
    outcome(err <= HIERARCHY_TOL, format!("{} generators; recursion vs direct {:.1e}", r.generators, err))
}

fn c12_regions() -> Outcome {
    let g = CubeGrid::cubic(2, 1.0).unwrap();
    let mut r = rng(12);
    let mut worst = 0.0f64;
    for n in 1..=8 {
        let cubes = Region::new(g, 0..n).unwrap();
        let terms = expand_unity(&cubes, UNITY_CAP).unwrap();
        let chi: Vec<f64> = (0..g.len()).map(|_| r.random()).collect();
        let sum: f64 = terms.iter().map(|p| unity_weight(&chi, &cubes, p)).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    let g2 = CubeGrid::new([2, 2, 1], 1.0).unwrap();
    let mut bits = || (0..g2.len()).map(|_| if r.random::<f64>() < 0.3 { 0.0 } else { 1.0 }).collect();
    let chars = StepChars { chi0: bits(), prime: bits(), dagger: bits(), hat: bits() };
    let full = Region::full(g2);
    let steps = step_choices(&full, UNITY_CAP).unwrap();
    let total: f64 = steps.iter().map(|s| step_weight(&full, s, &chars)).sum();
    worst = worst.max((total - 1.0).abs());
    let (cases, failures) = exhaustive_inclusions(CubeGrid::new([13, 13, 1], 1.0).unwrap()).unwrap();
    outcome(worst <= UNITY_TOL && failures == 0, format!("unity defect {worst:.1e}; {cases} region cases, {failures} failures"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, u64, fn() -> Outcome); 12] = [
        ("constraint/minimizer suite", 60, c01_minimizers),
        ("RG-step invariance", 10, c02_rg_step),
        ("delta_G normalization", 1, c03_delta),
        ("cluster expansion", 30, c04_cluster),
        ("reblocking", 30, c05_reblock),
        ("flow BVP", 5, c06_flow),
        ("schedule/stop index", 1, c07_schedule),
        ("averaging inequalities", 30, c08_averaging),
        ("determinant/resolvent bounds", 5, c09_bounds),
        ("stability at desk scale", 300, c10_stability),
        ("hierarchical fermion integral", 10, c11_hierarchy),
        ("region algebra", 30, c12_regions),
    ];
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = run();
        let dt = t0.elapsed();
        let pass = o.pass && dt <= Duration::from_secs(*limit);
        println!(
            "{} {:>2} {:<30} {:>7.2}s (limit {limit}s)  {}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            name,
            dt.as_secs_f64(),
            o.summary
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
