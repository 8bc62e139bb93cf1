//! Property tests over randomized small inputs.

use blockrg_core::averaging::{gauge_average_matrix, plaquette_average_matrix};
use blockrg_core::fields::{exterior_d, exterior_d_matrix, gradient, DiracOperator, GaugeField};
use blockrg_core::flow::Schedule;
use blockrg_core::grassmann::GrassmannElement;
use blockrg_core::lattice::{decay_sum, tree_distance, CubeGrid, Lattice, Region, SteinerCache};
use blockrg_core::linalg::{cmax_abs_diff, max_abs_diff, CMat};
use blockrg_core::oracle::{logdet_two_ways, monte_carlo_ratio, PartitionSpec};
use blockrg_core::polymer::{cluster_log, partition_sum, reblock, Activity, ClusterOptions};
use blockrg_core::report::RunConfig;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid4() -> CubeGrid {
    CubeGrid::cubic(4, 1.0).unwrap()
}

fn region_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(proptest::bool::weighted(0.3), n)
}

fn region(g: CubeGrid, mask: &[bool]) -> Region {
    Region::new(g, mask.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)).unwrap()
}

fn random_element(seed: u64, n_gen: usize, gens: &[usize], terms: usize) -> GrassmannElement {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut e = GrassmannElement::zero(n_gen);
    for _ in 0..terms {
        let k = r.random_range(0..=gens.len().min(4));
        let mut idx: Vec<usize> = Vec::new();
        while idx.len() < k {
            let g = gens[r.random_range(0..gens.len())];
            if !idx.contains(&g) {
                idx.push(g);
            }
        }
        let v = Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        e = e.add(&GrassmannElement::monomial(n_gen, &idx, v));
    }
    e
}

fn random_activity(seed: u64, g: CubeGrid, count: usize, size: f64) -> Activity<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Activity::new(g);
    while h.len() < count {
        let mut p = [r.random_range(0..3i64), r.random_range(0..3i64), r.random_range(0..2i64)];
        let mut cubes = vec![p];
        for _ in 0..r.random_range(0..3) {
            p[r.random_range(0..3)] += 1;
            cubes.push(p);
        }
        let key = Region::from_coords(g, &cubes).cubes().to_vec();
        if h.get(&key).is_none() {
            h.insert(key, size * r.random_range(-1.0..1.0)).unwrap();
        }
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn enlarge_shrink_galois(mask in region_strategy(64), n in 0usize..=3) {
        let x = region(grid4(), &mask);
        prop_assert!(x.is_subset(&x.enlarge(n).shrink(n)).unwrap());
        prop_assert!(x.shrink(n).enlarge(n).is_subset(&x).unwrap());
    }

    #[test]
    fn annuli_partition_outer_region(mask in region_strategy(64), n1 in 0usize..2, n2 in 0usize..2) {
        let inner = region(grid4(), &mask);
        let omegas = vec![inner.enlarge(n1 + n2 + 1), inner.enlarge(n2), inner.clone()];
        let rings = blockrg_core::lattice::annuli(&omegas).unwrap();
        let mut union = Region::empty(grid4());
        for (i, a) in rings.iter().enumerate() {
            for b in &rings[i + 1..] {
                prop_assert!(a.is_disjoint(b).unwrap());
            }
            union = union.union(a).unwrap();
        }
        prop_assert_eq!(union.cubes(), omegas[0].cubes());
    }

    #[test]
    fn tree_distance_translation_and_mst_bound(seed in any::<u64>(), shift in proptest::array::uniform3(0i64..6)) {
        let g = CubeGrid::cubic(6, 1.0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = [0i64, 0, 0];
        let mut cubes = vec![p];
        for _ in 0..r.random_range(0..4) {
            p[r.random_range(0..3)] += 1;
            cubes.push(p);
        }
        let x = Region::from_coords(g, &cubes);
        let moved: Vec<[i64; 3]> = cubes.iter().map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]).collect();
        let y = Region::from_coords(g, &moved);
        let dx = tree_distance(&x, None).unwrap().value;
        let dy = tree_distance(&y, None).unwrap().value;
        prop_assert!((dx - dy).abs() < 1e-12);
        prop_assert!(dx <= (x.len() as f64 - 1.0) + 1e-12);
    }

    #[test]
    fn decay_sum_monotone(kappa in 2.0f64..8.0, dk in 0.1f64..2.0) {
        let g = CubeGrid::cubic(6, 1.0).unwrap();
        let mut cache = SteinerCache::new();
        let lo = decay_sum(&g, 0, kappa, 1.0, 3, &mut cache).unwrap();
        let hi = decay_sum(&g, 0, kappa + dk, 1.0, 3, &mut cache).unwrap();
        let wide = decay_sum(&g, 0, kappa, 1.0, 4, &mut cache).unwrap();
        prop_assert!(hi < lo);
        prop_assert!(wide >= lo);
    }

    #[test]
    fn d_of_gradient_is_zero(omega in proptest::collection::vec(-2.0f64..2.0, 27), eta in 0.1f64..2.0) {
        let lat = Lattice::cubic(3, eta).unwrap();
        prop_assert!(exterior_d(&gradient(&lat, 0, &omega)).sup_norm() < 1e-11);
    }

    #[test]
    fn dirac_gauge_covariance(seed in any::<u64>(), e in 0.1f64..2.0, mass in 0.0f64..1.0) {
        let lat = Lattice::cubic(2, 0.5).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = GaugeField::random(&lat, 0, &mut r, 1.0);
        let omega: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let lhs = DiracOperator::new(&a.sub(&gradient(&lat, 0, &omega)).unwrap(), e, mass).matrix;
        let d = DiracOperator::new(&a, e, mass).matrix;
        let phase = |s: f64| {
            CMat::from_fn(32, 32, |i, j| if i == j { Complex64::new(0.0, s * e * omega[i / 4]).exp() } else { Complex64::new(0.0, 0.0) })
        };
        prop_assert!(cmax_abs_diff(&lhs, &(phase(1.0) * d * phase(-1.0))) < 1e-12);
    }

    #[test]
    fn intertwining_d_q(eta in 0.1f64..1.0) {
        let fine = Lattice::cubic(4, eta).unwrap();
        let coarse = fine.coarsen(2).unwrap();
        let lhs = exterior_d_matrix(&coarse) * gauge_average_matrix(&fine, 2).unwrap();
        let rhs = plaquette_average_matrix(&fine, 2).unwrap() * exterior_d_matrix(&fine);
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn grassmann_anticommutation(i in 0usize..6, j in 0usize..6) {
        let a = GrassmannElement::generator(6, i);
        let b = GrassmannElement::generator(6, j);
        prop_assert!(a.mul(&b).add(&b.mul(&a)).max_abs_diff(&GrassmannElement::zero(6)) == 0.0);
    }

    #[test]
    fn berezin_pair_order_independent(seed in any::<u64>(), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        let gens: Vec<usize> = (0..6).collect();
        let e = random_element(seed, 6, &gens, 12);
        let pairs = [(0, 1), (2, 3), (4, 5)];
        let shuffled: Vec<(usize, usize)> = perm.iter().map(|&k| pairs[k]).collect();
        prop_assert!(e.integrate(&pairs).max_abs_diff(&e.integrate(&shuffled)) < 1e-14);
    }

    #[test]
    fn even_products_stay_even(seed in any::<u64>()) {
        let gens: Vec<usize> = (0..6).collect();
        let a = random_element(seed, 6, &gens, 8).graded(2);
        let b = random_element(seed ^ 1, 6, &gens, 8).graded(2);
        prop_assert!(a.mul(&b).is_even());
    }

    #[test]
    fn norm_factorizes_on_disjoint_generators(seed in any::<u64>(), h in 0.1f64..3.0) {
        let e = random_element(seed, 8, &[0, 1, 2, 3], 6);
        let f = random_element(seed ^ 7, 8, &[4, 5, 6, 7], 6);
        prop_assert!(e.mul(&f).norm_h(h) <= e.norm_h(h) * f.norm_h(h) * (1.0 + 1e-12));
    }

    #[test]
    fn cluster_log_matches_partition_sum(seed in any::<u64>(), count in 1usize..=6) {
        let h = random_activity(seed, CubeGrid::cubic(6, 1.0).unwrap(), count, 0.05);
        let out = cluster_log(&h, ClusterOptions::default()).unwrap();
        let z = partition_sum(&h, &1.0).unwrap();
        prop_assert!((out.v.total().unwrap_or(0.0).exp() - z).abs() <= 1e-6);
        for (k, _) in out.v.iter() {
            prop_assert!(Region::new(*h.grid(), k.iter().copied()).unwrap().is_connected());
        }
    }

    #[test]
    fn reblock_preserves_total(seed in any::<u64>(), count in 1usize..12) {
        let e = random_activity(seed, CubeGrid::cubic(8, 1.0).unwrap(), count, 1.0);
        let before = e.total().unwrap();
        let after = reblock(&e, 2).unwrap().total().unwrap();
        prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
    }

    #[test]
    fn theta_in_band(n in 10usize..30, log10_e in -300.0f64..-250.0) {
        let s = Schedule { n, e: 10f64.powf(log10_e), ..Schedule::default() };
        for k in 0..=n {
            let t = s.theta_k(k);
            prop_assert!((0.5..=2.0).contains(&t), "theta_{} = {}", k, t);
        }
    }

    #[test]
    fn e_k_depends_on_n_minus_k(n in 5usize..30, gap in 0usize..5) {
        let a = Schedule { n, ..Schedule::default() };
        let b = Schedule { n: n + 3, ..Schedule::default() };
        prop_assert_eq!(a.e_k(n - gap), b.e_k(n + 3 - gap));
    }

    #[test]
    fn determinant_two_ways(seed in any::<u64>(), n in 2usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = CMat::from_fn(n, n, |i, j| {
            let d = if i == j { 3.0 } else { 0.0 };
            Complex64::new(d + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
        });
        let (lu, eig) = logdet_two_ways(&a);
        let diff = (lu - eig).im.rem_euclid(std::f64::consts::TAU);
        prop_assert!((lu.re - eig.re).abs() < 1e-10);
        prop_assert!(diff.min(std::f64::consts::TAU - diff) < 1e-10);
    }

    #[test]
    fn config_round_trip(n in 1usize..40, e in 1e-6f64..0.5, mbar in 0.0f64..3.0, p0 in 0.1f64..0.9, seed in any::<u64>()) {
        let mut c = RunConfig::default();
        c.schedule = Schedule { n, e, mbar, p0, ..Schedule::default() };
        c.seed = seed;
        let back = RunConfig::parse(&c.emit()).unwrap();
        prop_assert_eq!(back.emit(), c.emit());
        prop_assert_eq!(back.schedule.e.to_bits(), e.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn monte_carlo_reproducible(seed in any::<u64>()) {
        let spec = PartitionSpec::new(Schedule { n: 1, e: 0.3, ..Schedule::default() });
        let a = monte_carlo_ratio(&spec, seed, 300).unwrap();
        let b = monte_carlo_ratio(&spec, seed, 300).unwrap();
        prop_assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        prop_assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
    }
}
