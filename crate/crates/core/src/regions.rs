//! Characteristic functions, expansions of unity, and the maps generating
//! the next small field regions from large field regions.
//!
//! `X^{~n}` is [`Region::enlarge`] and `X^{n\natural}` is [`Region::shrink`].

use serde::Serialize;

use crate::averaging::gauge_average;
use crate::error::{Error, Result};
use crate::fields::{exterior_d, GaugeField};
use crate::lattice::{check_separation, CubeGrid, Lattice, Region, SeparationLevel};
use crate::minimizer::{Gauge, Minimizer, Multiscale};

/// Default cap on the number of subsets in an expansion of unity.
pub const UNITY_CAP: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CharKind {
    /// `|dA_k| <= p_k`.
    Chi,
    /// `|dA^0_{k+1}| <= p_{k+1} L^{-3/2}`.
    Chi0,
    /// `|A_k - A^min| <= p_{0,k}^2`.
    Prime,
    /// `|Z_k| <= p_{0,k}^{4/3}`.
    Dagger,
    /// `|Z~_k| <= p_{0,k}`.
    Hat,
}

/// Field-bound parameters at one step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Thresholds {
    pub p_k: f64,
    pub p_k1: f64,
    pub p0_k: f64,
    pub l: usize,
}

impl Thresholds {
    pub fn value(&self, kind: CharKind) -> f64 {
        match kind {
            CharKind::Chi => self.p_k,
            CharKind::Chi0 => self.p_k1 * (self.l as f64).powf(-1.5),
            CharKind::Prime => self.p0_k.powi(2),
            CharKind::Dagger => self.p0_k.powf(4.0 / 3.0),
            CharKind::Hat => self.p0_k,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CharFn {
    pub kind: CharKind,
    pub threshold: f64,
}

impl CharFn {
    pub fn new(kind: CharKind, th: &Thresholds) -> Self {
        Self { kind, threshold: th.value(kind) }
    }

    /// `chi` from the supremum of the probed quantity.
    pub fn eval(&self, sup: f64) -> bool {
        sup <= self.threshold
    }
}

/// All subsets `P` of `cubes`, the terms of `1 = sum_P zeta(P) chi(cubes - P)`.
pub fn expand_unity(cubes: &Region, cap: usize) -> Result<Vec<Region>> {
    let n = cubes.len();
    if n >= usize::BITS as usize - 1 || (1usize << n) > cap {
        return Err(Error::EnumerationOverflow { what: format!("2^{n} unity terms"), limit: cap });
    }
    let c = cubes.cubes();
    (0..1usize << n)
        .map(|m| Region::new(*cubes.grid(), (0..n).filter(|i| m >> i & 1 == 1).map(|i| c[i])))
        .collect()
}

/// `zeta(P) chi(cubes - P)` with `chi` given per grid cube.
pub fn unity_weight(chi: &[f64], cubes: &Region, p: &Region) -> f64 {
    cubes.cubes().iter().map(|&c| if p.contains(c) { 1.0 - chi[c] } else { chi[c] }).product()
}

/// Regions generated at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivedRegions {
    pub omega: Region,
    pub s: Region,
    pub t: Region,
    pub lambda: Region,
}

fn check_subset(a: &Region, b: &Region, what: &str) -> Result<()> {
    if !a.is_subset(b)? {
        return Err(Error::Precondition(format!("{what}")));
    }
    Ok(())
}

/// `Omega_{k+1} = Lambda_k^{5nat} - (Q^{5~} u P^{5~})`.
pub fn derive_omega(lambda_k: &Region, p: &Region, q: &Region) -> Result<Region> {
    let l5 = lambda_k.shrink(5);
    check_subset(p, &l5, "P not inside Lambda_k^{5nat}")?;
    check_subset(q, &l5, "Q not inside Lambda_k^{5nat}")?;
    l5.difference(&p.enlarge(5).union(&q.enlarge(5))?)
}

/// `S = (Omega - Omega^{3nat}) u R` and `T = Omega^{5nat} - R^{~5}`.
pub fn derive_s_t(omega: &Region, r: &Region) -> Result<(Region, Region)> {
    let o3 = omega.shrink(3);
    check_subset(r, &o3, "R not inside Omega^{3nat}")?;
    let s = omega.difference(&o3)?.union(r)?;
    let t = omega.shrink(5).difference(&r.enlarge(5))?;
    Ok((s, t))
}

/// `Lambda_{k+1} = T^{8nat} - U^{~8}`.
pub fn derive_lambda(t: &Region, u: &Region) -> Result<Region> {
    check_subset(u, t, "U not inside T")?;
    t.shrink(8).difference(&u.enlarge(8))
}

/// `(Lambda_k, P, Q, R, U) -> (Omega_{k+1}, S_{k+1}, T_{k+1}, Lambda_{k+1})`.
pub fn derive_regions(lambda_k: &Region, p: &Region, q: &Region, r: &Region, u: &Region) -> Result<DerivedRegions> {
    let omega = derive_omega(lambda_k, p, q)?;
    let (s, t) = derive_s_t(&omega, r)?;
    let lambda = derive_lambda(&t, u)?;
    Ok(DerivedRegions { omega, s, t, lambda })
}

/// Inclusions that must hold for every admissible input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct InclusionReport {
    /// `Omega = Lambda^{5nat} n (Q^c)^{5nat} n (P^c)^{5nat}`.
    pub omega_alternate: bool,
    /// `Omega^{5~} c Lambda n Q^c n P^c`.
    pub omega_enlarged: bool,
    /// `Omega c Lambda^{5nat}`.
    pub omega_inside: bool,
    /// `R = S n Omega^{3nat}`.
    pub r_from_s: bool,
    /// `Lambda_{k+1}^{~8} c T - U`.
    pub lambda_enlarged: bool,
    /// `Lambda_{k+1} c Omega_{k+1}`, `Omega_{k+1} c Lambda_k`.
    pub nested: bool,
}

impl InclusionReport {
    pub fn all(&self) -> bool {
        self.omega_alternate
            && self.omega_enlarged
            && self.omega_inside
            && self.r_from_s
            && self.lambda_enlarged
            && self.nested
    }
}

pub fn check_inclusions(
    lambda_k: &Region,
    p: &Region,
    q: &Region,
    r: &Region,
    u: &Region,
    d: &DerivedRegions,
) -> Result<InclusionReport> {
    let l5 = lambda_k.shrink(5);
    let alt = l5.intersection(&q.complement().shrink(5))?.intersection(&p.complement().shrink(5))?;
    let pq_c = lambda_k.intersection(&q.complement())?.intersection(&p.complement())?;
    Ok(InclusionReport {
        omega_alternate: alt == d.omega,
        omega_enlarged: d.omega.enlarge(5).is_subset(&pq_c)?,
        omega_inside: d.omega.is_subset(&l5)?,
        r_from_s: d.s.intersection(&d.omega.shrink(3))? == *r,
        lambda_enlarged: d.lambda.enlarge(8).is_subset(&d.t.difference(u)?)?,
        nested: d.lambda.is_subset(&d.omega)? && d.omega.is_subset(lambda_k)?,
    })
}

/// Large field regions and the regions they generate at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryStep {
    pub p: Region,
    pub q: Region,
    pub r: Region,
    pub u: Region,
    pub derived: DerivedRegions,
}

/// `Pi = (Omega_j, Lambda_j; P_j, Q_j, R_j, U_j)_{j=1..k}` starting from the
/// full torus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct History {
    pub grid: CubeGrid,
    pub steps: Vec<HistoryStep>,
}

impl History {
    pub fn lambda(&self, j: usize) -> Region {
        match j {
            0 => Region::full(self.grid),
            _ => self.steps[j - 1].derived.lambda.clone(),
        }
    }

    pub fn omega(&self, j: usize) -> &Region {
        &self.steps[j - 1].derived.omega
    }

    pub fn final_lambda_empty(&self) -> bool {
        self.lambda(self.steps.len()).is_empty()
    }

    /// Recomputes every step and checks all inclusions.
    pub fn is_consistent(&self) -> Result<bool> {
        for (j, st) in self.steps.iter().enumerate() {
            let lk = self.lambda(j);
            let d = derive_regions(&lk, &st.p, &st.q, &st.r, &st.u)?;
            if d != st.derived || !check_inclusions(&lk, &st.p, &st.q, &st.r, &st.u, &d)?.all() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Separation levels with gap `5 * side` at every step.
    pub fn separation_levels(&self) -> Vec<SeparationLevel> {
        self.steps
            .iter()
            .map(|s| SeparationLevel {
                omega: s.derived.omega.clone(),
                lambda: s.derived.lambda.clone(),
                threshold: 5.0 * self.grid.side,
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Every admissible one-step choice `(P, Q, R, U)` from `lambda_k`.
pub fn step_choices(lambda_k: &Region, cap: usize) -> Result<Vec<HistoryStep>> {
    let l5 = lambda_k.shrink(5);
    let subsets = expand_unity(&l5, cap)?;
    let mut out = Vec::new();
    for p in &subsets {
        for q in &subsets {
            let omega = derive_omega(lambda_k, p, q)?;
            for r in expand_unity(&omega.shrink(3), cap)? {
                let (s, t) = derive_s_t(&omega, &r)?;
                for u in expand_unity(&t, cap)? {
                    let lambda = derive_lambda(&t, &u)?;
                    out.push(HistoryStep {
                        p: p.clone(),
                        q: q.clone(),
                        r: r.clone(),
                        u,
                        derived: DerivedRegions { omega: omega.clone(), s: s.clone(), t: t.clone(), lambda },
                    });
                    if out.len() > cap {
                        return Err(Error::EnumerationOverflow { what: "step choices".into(), limit: cap });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-cube values of `chi^0, chi', chi^dagger, hat chi` at one step.
#[derive(Clone, Debug)]
pub struct StepChars {
    pub chi0: Vec<f64>,
    pub prime: Vec<f64>,
    pub dagger: Vec<f64>,
    pub hat: Vec<f64>,
}

/// `zeta^0(P) chi^0(L - P) zeta'(Q) chi'(L - Q) zeta^dagger(R)
/// chi^dagger(Omega^{3nat} - R) hat zeta(U) hat chi(T - U)` with
/// `L = Lambda_k^{5nat}`.
pub fn step_weight(lambda_k: &Region, st: &HistoryStep, c: &StepChars) -> f64 {
    let l5 = lambda_k.shrink(5);
    unity_weight(&c.chi0, &l5, &st.p)
        * unity_weight(&c.prime, &l5, &st.q)
        * unity_weight(&c.dagger, &st.derived.omega.shrink(3), &st.r)
        * unity_weight(&c.hat, &st.derived.t, &st.u)
}

/// All consistent `k`-step histories on `grid`, filtered by the separation
/// condition.
pub fn enumerate_histories(grid: CubeGrid, k: usize, cap: usize) -> Result<Vec<History>> {
    let mut hs = vec![History { grid, steps: Vec::new() }];
    for _ in 0..k {
        let mut next = Vec::new();
        for h in &hs {
            for st in step_choices(&h.lambda(h.steps.len()), cap)? {
                let mut g = h.clone();
                g.steps.push(st);
                next.push(g);
                if next.len() > cap {
                    return Err(Error::EnumerationOverflow {
                        what: format!("histories (at least {} after {} steps)", next.len(), h.steps.len() + 1),
                        limit: cap,
                    });
                }
            }
        }
        hs = next;
    }
    let mut out = Vec::with_capacity(hs.len());
    for h in hs {
        if check_separation(&h.separation_levels())? {
            out.push(h);
        }
    }
    Ok(out)
}

/// `1 + k (4^n + 2^{n+1} - 3)`: history count on a grid where one layer of
/// enlargement covers the torus.
pub fn small_torus_history_count(n_cubes: u32, k: usize) -> u128 {
    1 + k as u128 * (4u128.pow(n_cubes) + 2u128.pow(n_cubes + 1) - 3)
}

/// Evaluated characteristic functions on one step of a unit lattice.
#[derive(Clone, Debug, Serialize)]
pub struct CharReport {
    pub chi: Vec<bool>,
    pub chi0: Vec<bool>,
    pub prime: Vec<bool>,
    pub dagger: Vec<bool>,
    pub hat: Vec<bool>,
    /// Per cube: `sup |dA_k|`, `sup |dA_{k+1}|` over the cube.
    pub sup_da_k: Vec<f64>,
    pub sup_da_k1: Vec<f64>,
    /// Cubes where `chi0` and `chi'` hold.
    pub certified: Vec<usize>,
    /// `|dA_{k+1}| <= p_{k+1} L^{-3/2}` on certified cubes.
    pub coarse_bound: bool,
    /// `|dA_k| <= p_k / 2` on certified cubes.
    pub fine_bound: bool,
    /// `4 p_{0,k}^2 + p_{k+1} L^{-3/2}`, the chained bound on `|dA_k|`.
    pub chained: f64,
}

fn per_cube_sup(grid: &CubeGrid, site_cube: &[usize], per_site: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; grid.len()];
    for (s, &v) in per_site.iter().enumerate() {
        let c = site_cube[s];
        out[c] = out[c].max(v);
    }
    out
}

fn enlarged_sup(grid: &CubeGrid, v: &[f64]) -> Vec<f64> {
    (0..grid.len()).map(|c| grid.neighbors(c).into_iter().fold(v[c], |m, q| m.max(v[q]))).collect()
}

fn site_max(values: &[f64]) -> Vec<f64> {
    values.chunks(3).map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
}

/// Evaluates `chi_k, chi^0_{k+1}, chi'_k, chi^dagger_k, hat chi_k` for each
/// cube of `grid` on a unit lattice carrying `a_k`; the coarse field is
/// `A_{k+1} = Q A_k` and `A^min`, `A^0` come from the axial minimizer of the
/// block average. `z` and `z_tilde` default to `A_k - A^min`.
pub fn evaluate_charfns(
    a_k: &GaugeField<f64>,
    l: usize,
    grid: &CubeGrid,
    th: &Thresholds,
    z: Option<&[f64]>,
    z_tilde: Option<&[f64]>,
) -> Result<CharReport> {
    let fine: &Lattice = &a_k.lattice;
    let full = Region::full(*grid);
    let mask = full.site_mask(fine)?;
    debug_assert!(mask.iter().all(|&m| m));
    let ratio = (grid.side / fine.spacing()).round() as usize;
    let site_cube: Vec<usize> = (0..fine.n_sites())
        .map(|s| grid.index(fine.coords(s).map(|v| (v / ratio) as i64)))
        .collect();
    let ms = Multiscale::full(fine, l, 1)?;
    let a0 = Minimizer::new(&ms, Gauge::Axial)?.solve(&ms.average(a_k)?)?;
    let a1 = gauge_average(a_k, l)?;
    let coarse = a1.lattice.clone();
    let zs: Vec<f64> = a_k.values.iter().zip(&a0.values).map(|(a, b)| a - b).collect();
    let z = z.unwrap_or(&zs);
    let zt = z_tilde.unwrap_or(z);

    let da_k = site_max(&exterior_d(a_k).values);
    let da0 = site_max(&exterior_d(&a0).values);
    let da1 = site_max(&exterior_d(&a1).values);
    let coarse_cube: Vec<usize> = (0..coarse.n_sites())
        .map(|y| site_cube[fine.block_corner(y, l)])
        .collect();

    let sup_da_k = per_cube_sup(grid, &site_cube, &da_k);
    let sup_da0 = per_cube_sup(grid, &site_cube, &da0);
    let sup_da_k1 = per_cube_sup(grid, &coarse_cube, &da1);
    let sup_z = per_cube_sup(grid, &site_cube, &site_max(z));
    let sup_zt = per_cube_sup(grid, &site_cube, &site_max(zt));

    let eval = |kind: CharKind, v: &[f64]| -> Vec<bool> {
        let f = CharFn::new(kind, th);
        v.iter().map(|&x| f.eval(x)).collect()
    };
    let chi = eval(CharKind::Chi, &enlarged_sup(grid, &sup_da_k));
    let chi0 = eval(CharKind::Chi0, &enlarged_sup(grid, &sup_da0));
    let prime = eval(CharKind::Prime, &enlarged_sup(grid, &sup_z));
    let dagger = eval(CharKind::Dagger, &sup_z);
    let hat = eval(CharKind::Hat, &sup_zt);

    let certified: Vec<usize> = (0..grid.len()).filter(|&c| chi0[c] && prime[c]).collect();
    let t0 = th.value(CharKind::Chi0);
    let slack = 1e-12 * (1.0 + t0);
    Ok(CharReport {
        coarse_bound: certified.iter().all(|&c| sup_da_k1[c] <= t0 + slack),
        fine_bound: certified.iter().all(|&c| sup_da_k[c] <= 0.5 * th.p_k),
        chained: 4.0 * th.p0_k.powi(2) + t0,
        chi,
        chi0,
        prime,
        dagger,
        hat,
        sup_da_k,
        sup_da_k1,
        certified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wrap_dist(grid: &CubeGrid, a: usize, b: usize) -> i64 {
        let (pa, pb) = (grid.coords(a), grid.coords(b));
        (0..3)
            .map(|i| {
                let n = grid.dims[i] as i64;
                let d = (pa[i] - pb[i]).rem_euclid(n);
                d.min(n - d)
            })
            .max()
            .unwrap()
    }

    fn dist_to(grid: &CubeGrid, c: usize, set: &[usize]) -> i64 {
        set.iter().map(|&s| wrap_dist(grid, c, s)).min().unwrap_or(i64::MAX)
    }

    #[test]
    fn unity_terms() {
        let g = CubeGrid::cubic(2, 1.0).unwrap();
        let one = Region::new(g, [3]).unwrap();
        assert_eq!(expand_unity(&one, UNITY_CAP).unwrap().len(), 2);
        let all = Region::full(g);
        let terms = expand_unity(&all, UNITY_CAP).unwrap();
        assert_eq!(terms.len(), 256);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chi: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let s: f64 = terms.iter().map(|p| unity_weight(&chi, &all, p)).sum();
        assert!((s - 1.0).abs() < 1e-14);
        let mut bits = vec![1.0; 8];
        bits[5] = 0.0;
        for p in &terms {
            let w = unity_weight(&bits, &all, p);
            assert_eq!(w != 0.0, p.contains(5) && p.len() == 1);
        }
        assert!(expand_unity(&all, 100).is_err());
    }

    #[test]
    fn trivial_region_maps() {
        let g = CubeGrid::cubic(12, 1.0).unwrap();
        let full = Region::full(g);
        let e = Region::empty(g);
        let d = derive_regions(&full, &e, &e, &e, &e).unwrap();
        assert!(d.omega.is_full() && d.t.is_full() && d.lambda.is_full());
        assert_eq!(d.s, full.difference(&full.shrink(3)).unwrap());
        assert!(d.s.is_empty());
        let small = Region::from_coords(g, &[[0, 0, 0], [1, 0, 0]]);
        assert!(small.shrink(1).is_empty());
        let d = derive_regions(&small, &e, &e, &e, &e).unwrap();
        assert!(d.omega.is_empty() && d.s.is_empty() && d.t.is_empty() && d.lambda.is_empty());
    }

    #[test]
    fn single_p_cube_matches_set_oracle() {
        let g = CubeGrid::new([16, 16, 3], 1.0).unwrap();
        let full = Region::full(g);
        let e = Region::empty(g);
        let p = Region::from_coords(g, &[[8, 8, 1]]);
        let d = derive_regions(&full, &p, &e, &e, &e).unwrap();
        let oracle: Vec<usize> = (0..g.len()).filter(|&c| dist_to(&g, c, p.cubes()) > 5).collect();
        assert_eq!(d.omega.cubes(), &oracle[..]);
        let lk = Region::new(g, (0..g.len()).filter(|&c| g.coords(c)[0] < 12)).unwrap();
        let lc = lk.complement();
        let p = Region::from_coords(g, &[[5, 3, 0]]);
        let q = Region::from_coords(g, &[[6, 13, 2]]);
        let d = derive_regions(&lk, &p, &q, &e, &e).unwrap();
        let oracle: Vec<usize> = (0..g.len())
            .filter(|&c| {
                dist_to(&g, c, lc.cubes()) > 5 && dist_to(&g, c, p.cubes()) > 5 && dist_to(&g, c, q.cubes()) > 5
            })
            .collect();
        assert_eq!(d.omega.cubes(), &oracle[..]);
    }

    #[test]
    fn preconditions_rejected() {
        let g = CubeGrid::cubic(12, 1.0).unwrap();
        let lk = Region::from_coords(g, &[[0, 0, 0]]);
        let e = Region::empty(g);
        assert!(derive_regions(&lk, &lk, &e, &e, &e).is_err());
        let full = Region::full(g);
        assert!(derive_s_t(&e, &lk).is_err());
        assert!(derive_lambda(&e, &lk).is_err());
        assert!(derive_regions(&full, &e, &e, &e, &e).is_ok());
    }

    #[test]
    fn random_inclusions_and_monotonicity() {
        let g = CubeGrid::new([24, 24, 2], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pick = |rng: &mut ChaCha8Rng, from: &Region, n: usize| -> Region {
            let c = from.cubes();
            if c.is_empty() {
                return Region::empty(g);
            }
            Region::new(g, (0..n).map(|_| c[rng.random_range(0..c.len())])).unwrap()
        };
        for _ in 0..40 {
            let lk = Region::new(g, (0..g.len()).filter(|&c| g.coords(c)[0] < rng.random_range(12..24))).unwrap();
            let l5 = lk.shrink(5);
            let p = pick(&mut rng, &l5, 1);
            let nq = rng.random_range(0..2);
            let q = pick(&mut rng, &l5, nq);
            let omega = derive_omega(&lk, &p, &q).unwrap();
            let nr = rng.random_range(0..2);
            let r = pick(&mut rng, &omega.shrink(3), nr);
            let (_, t) = derive_s_t(&omega, &r).unwrap();
            let nu = rng.random_range(0..2);
            let u = pick(&mut rng, &t, nu);
            let d = derive_regions(&lk, &p, &q, &r, &u).unwrap();
            assert!(check_inclusions(&lk, &p, &q, &r, &u, &d).unwrap().all());
            let p2 = p.union(&pick(&mut rng, &l5, 1)).unwrap();
            let o2 = derive_omega(&lk, &p2, &q).unwrap();
            assert!(o2.is_subset(&omega).unwrap());
        }
    }

    #[test]
    fn history_counts() {
        let g = CubeGrid::new([1, 1, 1], 1.0).unwrap();
        for k in 1..=3 {
            let hs = enumerate_histories(g, k, 1 << 16).unwrap();
            assert_eq!(hs.len() as u128, small_torus_history_count(1, k));
            assert!(hs.iter().all(|h| h.is_consistent().unwrap()));
            assert_eq!(hs.iter().filter(|h| !h.final_lambda_empty()).count(), 1);
        }
        let g2 = CubeGrid::new([2, 1, 1], 1.0).unwrap();
        let hs = enumerate_histories(g2, 2, 1 << 16).unwrap();
        assert_eq!(hs.len() as u128, small_torus_history_count(2, 2));
        assert!(hs[0].to_json().unwrap().contains("steps"));
        assert!(enumerate_histories(CubeGrid::cubic(2, 1.0).unwrap(), 1, 1000).is_err());
    }

    #[test]
    fn step_weights_sum_to_one() {
        let g = CubeGrid::new([2, 2, 1], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bits = || (0..g.len()).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { 1.0 }).collect();
        let c = StepChars { chi0: bits(), prime: bits(), dagger: bits(), hat: bits() };
        let full = Region::full(g);
        let steps = step_choices(&full, UNITY_CAP).unwrap();
        let total: f64 = steps.iter().map(|s| step_weight(&full, s, &c)).sum();
        assert_eq!(total, 1.0);
    }

    fn th() -> Thresholds {
        Thresholds { p_k: 40.0, p_k1: 36.0, p0_k: 2.0, l: 2 }
    }

    #[test]
    fn charfns_zero_field() {
        let lat = Lattice::cubic(4, 1.0).unwrap();
        let g = CubeGrid::cubic(2, 2.0).unwrap();
        let r = evaluate_charfns(&GaugeField::zeros(&lat, 0), 2, &g, &th(), None, None).unwrap();
        for v in [&r.chi, &r.chi0, &r.prime, &r.dagger, &r.hat] {
            assert!(v.iter().all(|&b| b));
        }
    }

    #[test]
    fn charfns_prime_violation_and_redundancy() {
        let lat = Lattice::cubic(4, 1.0).unwrap();
        let g = CubeGrid::cubic(2, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = GaugeField::from_values(&lat, 0, (0..lat.n_bonds()).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap();
        let base = evaluate_charfns(&a, 2, &g, &th(), None, None).unwrap();
        assert_eq!(base.certified.len(), 8);
        assert!(base.coarse_bound && base.fine_bound);
        // A spike in the fluctuation of one cube violates chi' there only.
        let mut z = vec![0.0; lat.n_bonds()];
        z[3 * lat.index([0, 0, 0])] = 10.0;
        let big = Thresholds { p0_k: 2.0, ..th() };
        let r = evaluate_charfns(&a, 2, &g, &big, Some(&z), Some(&z)).unwrap();
        assert_eq!(r.chi0, base.chi0);
        // chi' probes the enlarged cube, which is the whole 2^3 torus.
        assert!(r.prime.iter().all(|&b| !b));
        let c0 = g.index([0, 0, 0]);
        assert!(!r.dagger[c0] && !r.hat[c0]);
        assert_eq!(r.dagger.iter().filter(|&&b| !b).count(), 1);
    }
}
