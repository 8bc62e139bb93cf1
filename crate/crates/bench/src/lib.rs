//! Shared fixtures for the kernel benchmarks.

use blockrg_core::fields::GaugeField;
use blockrg_core::flow::Schedule;
use blockrg_core::grassmann::{bilinear, GrassmannElement};
use blockrg_core::lattice::{CubeGrid, Lattice, Region};
use blockrg_core::linalg::CMat;
use blockrg_core::oracle::PartitionSpec;
use blockrg_core::polymer::Activity;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEED: u64 = 7;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED)
}

pub fn lattice(n: usize) -> Lattice {
    Lattice::cubic(n, 1.0).unwrap()
}

pub fn random_gauge(n: usize) -> GaugeField<f64> {
    GaugeField::random(&lattice(n), 0, &mut rng(), 0.5)
}

/// Desk-scale spec: one RG step on a `2^3` torus.
pub fn desk_spec() -> PartitionSpec {
    PartitionSpec::new(Schedule { n: 1, ..Schedule::default() })
}

/// `n` random connected polymers of up to three cubes on a `6^3` grid.
pub fn polymers(n: usize) -> Activity<f64> {
    let g = CubeGrid::cubic(6, 1.0).unwrap();
    let mut r = rng();
    let mut h = Activity::new(g);
    while h.len() < n {
        let mut p = [r.random_range(0..3i64), r.random_range(0..3i64), r.random_range(0..2i64)];
        let mut cubes = vec![p];
        for _ in 0..r.random_range(0..3) {
            p[r.random_range(0..3)] += 1;
            cubes.push(p);
        }
        let key = Region::from_coords(g, &cubes).cubes().to_vec();
        if h.get(&key).is_none() {
            h.insert(key, 0.05 * r.random_range(-1.0..1.0)).unwrap();
        }
    }
    h
}

/// `exp(-psibar B psi)` on `pairs` spinor pairs, with its pairing.
pub fn gaussian_element(pairs: usize) -> (GrassmannElement, Vec<(usize, usize)>) {
    let mut r = rng();
    let b = CMat::from_fn(pairs, pairs, |i, j| {
        Complex64::new(if i == j { 1.0 } else { 0.0 } + 0.2 * r.random_range(-1.0..1.0), 0.0)
    });
    let p: Vec<(usize, usize)> = (0..pairs).map(|i| (2 * i, 2 * i + 1)).collect();
    (bilinear(2 * pairs, &p, &b).scale(Complex64::new(-1.0, 0.0)).exp().unwrap(), p)
}
