use blockrg_bench::{desk_spec, gaussian_element, lattice, polymers, random_gauge};
use blockrg_core::oracle::{
    boson_rg_step, fermion_rg_step, wick_expansion, BosonDensity, FermionDensity, TreeChoice,
};
use blockrg_core::polymer::{cluster_log, partition_sum, reblock, ClusterOptions};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn rg_steps(c: &mut Criterion) {
    let a = random_gauge(4);
    let rho = FermionDensity::gauged(&a, 0.5, 0.3);
    c.bench_function("fermion_rg_step_4", |b| b.iter(|| fermion_rg_step(black_box(&rho), 2, 1.0, Some((&a, 0.5))).unwrap()));
    let maxwell = BosonDensity::maxwell(&lattice(4));
    c.bench_function("boson_rg_step_4", |b| b.iter(|| boson_rg_step(black_box(&maxwell), 2, TreeChoice::Primary).unwrap()));
}

fn stability(c: &mut Criterion) {
    let spec = desk_spec();
    c.bench_function("wick_expansion_desk", |b| b.iter(|| wick_expansion(black_box(&spec)).unwrap()));
}

fn polymers_bench(c: &mut Criterion) {
    let h = polymers(6);
    c.bench_function("cluster_log_6", |b| b.iter(|| cluster_log(black_box(&h), ClusterOptions::default()).unwrap()));
    c.bench_function("partition_sum_6", |b| b.iter(|| partition_sum(black_box(&h), &1.0).unwrap()));
    c.bench_function("reblock_6", |b| b.iter(|| reblock(black_box(&h), 2).unwrap()));
}

fn grassmann(c: &mut Criterion) {
    let (e, pairs) = gaussian_element(6);
    c.bench_function("berezin_integrate_12", |b| b.iter(|| black_box(&e).integrate(&pairs)));
    c.bench_function("grassmann_mul_12", |b| b.iter(|| black_box(&e).mul(&e)));
}

criterion_group!(benches, rg_steps, stability, polymers_bench, grassmann);
criterion_main!(benches);
