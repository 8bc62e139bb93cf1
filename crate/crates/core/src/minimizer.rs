//! Constrained quadratic minimizers, fluctuation covariances and fermion critical points.
//!
//! A [`Multiscale`] holds nested regions `Omega_1 > ... > Omega_k` given as
//! masks over the sites of the level-`j` lattices (level `j` is the fine
//! lattice coarsened by `L^j`). Its constraint rows are the `j`-fold gauge
//! averages of bonds in `delta Omega_j = Omega_j - Omega_{j+1}` (with
//! `Omega_0` the whole torus and `delta Omega_k = Omega_k`).
//!
//! Bonds constrained at level 0 are fixed outright, so every solve works on
//! the remaining free bonds only, as a dense null-space reduction of the KKT
//! system.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::averaging::{block_tree_bonds, plaquette_average_matrix, torus_tree_bonds};
use crate::error::{Error, Result};
use crate::fields::{exterior_d, exterior_d_matrix, GaugeField};
use crate::lattice::Lattice;
use crate::linalg::{self, cinverse, clogdet, CMat, CVector, Mat, Vector};

const NULL_TOL: f64 = 1e-11;
const GAUGE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    Axial,
    Landau,
}

/// Sparse row of the `j`-fold gauge average of one level-`j` bond.
pub fn average_row(fine: &Lattice, l: usize, j: usize, bond: usize) -> Vec<(usize, f64)> {
    if j == 0 {
        return vec![(bond, 1.0)];
    }
    let s = l.pow(j as u32);
    let (y, mu) = (bond / 3, bond % 3);
    let w = (s as f64).powi(-4);
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for x in fine.block_sites(y, s) {
        let mut z = x;
        for _ in 0..s {
            *acc.entry(3 * z + mu).or_insert(0.0) += w;
            z = fine.shift(z, mu, 1);
        }
    }
    acc.into_iter().collect()
}

/// Grows a site mask by `n` layers in the sup-norm on the torus.
pub fn enlarge_mask(lat: &Lattice, mask: &[bool], n: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..n {
        let mut next = cur.clone();
        for s in (0..lat.n_sites()).filter(|&s| cur[s]) {
            let c = lat.coords(s).map(|v| v as i64);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        next[lat.index_wrapped([c[0] + dx, c[1] + dy, c[2] + dz])] = true;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Mask of `fine` sites lying in blocks of `coarse_mask` (blocks of side `s`).
pub fn refine_mask(fine: &Lattice, s: usize, coarse_mask: &[bool]) -> Vec<bool> {
    (0..fine.n_sites()).map(|x| coarse_mask[fine.block_of(x, s)]).collect()
}

/// Nested regions `Omega_1 > ... > Omega_k` over the levels of a fine lattice.
#[derive(Clone, Debug)]
pub struct Multiscale {
    fine: Lattice,
    l: usize,
    omega: Vec<Vec<bool>>,
}

impl Multiscale {
    /// `omega[j - 1]` is a mask over the sites of level `j`.
    pub fn new(fine: &Lattice, l: usize, omega: Vec<Vec<bool>>) -> Result<Self> {
        let ms = Self { fine: fine.clone(), l, omega };
        for j in 1..=ms.k() {
            let lat = ms.level(j)?;
            if ms.omega[j - 1].len() != lat.n_sites() {
                return Err(Error::InvalidLattice(format!("level {j} mask has {} entries", ms.omega[j - 1].len())));
            }
            if j >= 2 {
                let finer = ms.level(j - 1)?;
                for x in 0..finer.n_sites() {
                    if ms.omega[j - 1][finer.block_of(x, l)] && !ms.omega[j - 2][x] {
                        return Err(Error::NotNested(format!("Omega_{j} not inside Omega_{}", j - 1)));
                    }
                }
            }
        }
        Ok(ms)
    }

    pub fn full(fine: &Lattice, l: usize, k: usize) -> Result<Self> {
        let mut omega = Vec::new();
        let mut lat = fine.clone();
        for _ in 0..k {
            lat = lat.coarsen(l)?;
            omega.push(vec![true; lat.n_sites()]);
        }
        Self::new(fine, l, omega)
    }

    pub fn fine(&self) -> &Lattice {
        &self.fine
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn k(&self) -> usize {
        self.omega.len()
    }

    pub fn level(&self, j: usize) -> Result<Lattice> {
        if j == 0 {
            return Ok(self.fine.clone());
        }
        self.fine.coarsen(self.l.pow(j as u32))
    }

    pub fn in_omega(&self, j: usize, site: usize) -> bool {
        j == 0 || self.omega[j - 1][site]
    }

    pub fn omega(&self, j: usize) -> &[bool] {
        &self.omega[j - 1]
    }

    /// Appends `Omega_{k+1}`.
    pub fn extend(&self, next: Vec<bool>) -> Result<Self> {
        let mut omega = self.omega.clone();
        omega.push(next);
        Self::new(&self.fine, self.l, omega)
    }

    /// Constraint rows `(j, level-j bond)` in level order.
    pub fn rows(&self) -> Result<Vec<(usize, usize)>> {
        let k = self.k();
        let mut out = Vec::new();
        for j in 0..=k {
            let lat = self.level(j)?;
            for b in 0..lat.n_bonds() {
                let y = b / 3;
                let inner = j < k && self.in_omega(j + 1, lat.block_of(y, self.l));
                if self.in_omega(j, y) && !inner {
                    out.push((j, b));
                }
            }
        }
        Ok(out)
    }

    /// `Q_{k,Omega} A` in row order.
    pub fn average(&self, a: &GaugeField<f64>) -> Result<Vec<f64>> {
        Ok(self
            .rows()?
            .iter()
            .map(|&(j, b)| average_row(&self.fine, self.l, j, b).iter().map(|&(c, w)| w * a.values[c]).sum())
            .collect())
    }

    /// `A_{k,Omega}` assembled from per-level fields `fields[j]`.
    pub fn collect(&self, fields: &[GaugeField<f64>]) -> Result<Vec<f64>> {
        if fields.len() != self.k() + 1 {
            return Err(Error::Precondition(format!("need {} level fields", self.k() + 1)));
        }
        Ok(self.rows()?.iter().map(|&(j, b)| fields[j].values[b]).collect())
    }
}

/// Energy `||dA||^2 = eta^3 sum_p (dA)(p)^2`.
pub fn energy(a: &GaugeField<f64>) -> f64 {
    exterior_d(a).norm_sq()
}

/// Generic reduced problem `min |D x + D0 c|^2` s.t. `B x = R c` (plus gauge rows).
struct Reduced {
    /// `x = op * c`.
    op: Mat,
    gauge_rows: Vec<usize>,
}

fn solve_reduced(d: &Mat, d0: &Mat, b: &Mat, r: &Mat, gauge: Gauge, candidates: &[usize]) -> Result<Reduced> {
    let n = d.ncols();
    let m = r.ncols();
    let rank = linalg::rank(b, NULL_TOL);
    if rank < b.nrows() {
        return Err(Error::Infeasible { rank, rows: b.nrows() });
    }
    let h = d.transpose() * d;
    let mut bb = b.clone();
    let mut gauge_rows = Vec::new();
    if gauge == Gauge::Axial {
        let nb = linalg::null_space(&bb, NULL_TOL);
        let k = nb.transpose() * &h * &nb;
        let kern = linalg::null_space(&k, GAUGE_TOL);
        if kern.ncols() > 0 {
            let v = &nb * kern;
            let target = v.ncols();
            let mut basis: Vec<Vector> = Vec::new();
            let order = candidates.iter().copied().chain(0..n);
            for c in order {
                if basis.len() == target {
                    break;
                }
                let mut row: Vector = v.row(c).transpose();
                for q in &basis {
                    let p = q.dot(&row);
                    row -= q * p;
                }
                let nr = row.norm();
                if nr > 1e-8 && !gauge_rows.contains(&c) {
                    basis.push(row / nr);
                    gauge_rows.push(c);
                }
            }
            let mut ext = Mat::zeros(bb.nrows() + gauge_rows.len(), n);
            ext.view_mut((0, 0), (bb.nrows(), n)).copy_from(&bb);
            for (i, &c) in gauge_rows.iter().enumerate() {
                ext[(bb.nrows() + i, c)] = 1.0;
            }
            bb = ext;
        }
    }
    let mut rr = Mat::zeros(bb.nrows(), m);
    rr.view_mut((0, 0), (r.nrows(), m)).copy_from(r);
    let bp = linalg::pinv(&bb, NULL_TOL);
    let nb = linalg::null_space(&bb, NULL_TOL);
    let k = nb.transpose() * &h * &nb;
    let kp = match gauge {
        Gauge::Landau => linalg::pinv(&k, GAUGE_TOL),
        Gauge::Axial => linalg::inverse(&k)?,
    };
    let xp = &bp * &rr;
    let proj = &nb * kp * nb.transpose();
    let op = &xp - &proj * (&h * &xp + d.transpose() * d0);
    // One refinement step back onto the constraint set.
    let op = &op + &bp * (&rr - &bb * &op);
    Ok(Reduced { op, gauge_rows })
}

/// `H_{k,Omega}`: the minimizer of `||dA||^2` subject to `Q_{k,Omega} A = rhs`.
#[derive(Clone, Debug)]
pub struct Minimizer {
    pub ms: Multiscale,
    pub gauge: Gauge,
    rows: Vec<(usize, usize)>,
    free: Vec<usize>,
    fixed: Vec<Option<usize>>,
    /// Right-hand side rows that reach the free bonds.
    rel: Vec<usize>,
    /// Linear map from `rel` entries to free bond values.
    op: Mat,
    pub gauge_rows: usize,
}

impl Minimizer {
    pub fn new(ms: &Multiscale, gauge: Gauge) -> Result<Self> {
        let fine = ms.fine();
        let rows = ms.rows()?;
        let nb = fine.n_bonds();
        let mut fixed: Vec<Option<usize>> = vec![None; nb];
        for (i, &(j, b)) in rows.iter().enumerate() {
            if j == 0 {
                fixed[b] = Some(i);
            }
        }
        let free: Vec<usize> = (0..nb).filter(|&b| fixed[b].is_none()).collect();
        let mut pos = vec![usize::MAX; nb];
        for (i, &b) in free.iter().enumerate() {
            pos[b] = i;
        }
        let plaqs: Vec<usize> = (0..fine.n_plaquettes())
            .filter(|&p| fine.plaquette_boundary(p).iter().any(|&(b, _)| fixed[b].is_none()))
            .collect();
        let upper: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 > 0).collect();
        let upper_rows: Vec<Vec<(usize, f64)>> =
            upper.iter().map(|&i| average_row(fine, ms.l(), rows[i].0, rows[i].1)).collect();
        // Right-hand side entries that influence the free bonds.
        let mut rel: Vec<usize> = upper.clone();
        for &p in &plaqs {
            rel.extend(fine.plaquette_boundary(p).iter().filter_map(|&(b, _)| fixed[b]));
        }
        for row in &upper_rows {
            rel.extend(row.iter().filter_map(|&(c, _)| fixed[c]));
        }
        rel.sort_unstable();
        rel.dedup();
        let mut col = vec![usize::MAX; rows.len()];
        for (c, &i) in rel.iter().enumerate() {
            col[i] = c;
        }
        let m = rel.len();
        let scale = fine.volume_element().sqrt() / fine.spacing();
        let mut d = Mat::zeros(plaqs.len(), free.len());
        let mut d0 = Mat::zeros(plaqs.len(), m);
        for (r, &p) in plaqs.iter().enumerate() {
            for (b, s) in fine.plaquette_boundary(p) {
                match fixed[b] {
                    None => d[(r, pos[b])] += s * scale,
                    Some(i) => d0[(r, col[i])] += s * scale,
                }
            }
        }
        let mut bm = Mat::zeros(upper.len(), free.len());
        let mut rm = Mat::zeros(upper.len(), m);
        for (r, (&i, row)) in upper.iter().zip(&upper_rows).enumerate() {
            rm[(r, col[i])] = 1.0;
            for &(c, w) in row {
                match fixed[c] {
                    None => bm[(r, pos[c])] += w,
                    Some(f) => rm[(r, col[f])] -= w,
                }
            }
        }
        let candidates: Vec<usize> =
            torus_tree_bonds(fine).into_iter().filter(|&b| fixed[b].is_none()).map(|b| pos[b]).collect();
        let red = solve_reduced(&d, &d0, &bm, &rm, gauge, &candidates)?;
        Ok(Self { ms: ms.clone(), gauge, rows, free, fixed, rel, op: red.op, gauge_rows: red.gauge_rows.len() })
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<GaugeField<f64>> {
        if rhs.len() != self.rows.len() {
            return Err(Error::Precondition(format!("{} values for {} constraints", rhs.len(), self.rows.len())));
        }
        let mut values = vec![0.0; self.ms.fine().n_bonds()];
        for (b, f) in self.fixed.iter().enumerate() {
            if let Some(i) = f {
                values[b] = rhs[*i];
            }
        }
        let c = Vector::from_iterator(self.rel.len(), self.rel.iter().map(|&i| rhs[i]));
        let x = &self.op * c;
        for (i, &b) in self.free.iter().enumerate() {
            values[b] = x[i];
        }
        GaugeField::from_values(self.ms.fine(), 0, values)
    }

    /// `H e_r`, the response to a unit right-hand side in row `r`.
    pub fn column(&self, r: usize) -> Result<GaugeField<f64>> {
        let mut rhs = vec![0.0; self.rows.len()];
        rhs[r] = 1.0;
        self.solve(&rhs)
    }

    /// `|Q H rhs - rhs| / |rhs|`.
    pub fn constraint_residual(&self, rhs: &[f64]) -> Result<f64> {
        let a = self.solve(rhs)?;
        let back = self.ms.average(&a)?;
        let num = back.iter().zip(rhs).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = rhs.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Ok(num / den)
    }
}

/// Max difference of field strengths relative to `max(|dA|, |dB|, |A| / eta, |B| / eta)`,
/// so that flat minimizers are compared against the size of the fields.
pub fn field_strength_gap(a: &GaugeField<f64>, b: &GaugeField<f64>) -> f64 {
    let fa = exterior_d(a);
    let fb = exterior_d(b);
    let diff = fa.values.iter().zip(&fb.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let eta = a.lattice.spacing();
    let scale = fa.sup_norm().max(fb.sup_norm()).max(a.sup_norm() / eta).max(b.sup_norm() / eta);
    diff / scale.max(f64::MIN_POSITIVE)
}

/// One RG step of the background field: `Omega^+ = (Omega, Omega_{k+1})`.
#[derive(Clone, Debug)]
pub struct SingleStep {
    pub base: Minimizer,
    pub plus: Minimizer,
    /// Indices into `base.rows()` of the level-`k` bonds over `Omega_{k+1}`.
    pub free: Vec<usize>,
    /// Sparse `Q` rows (level `k+1` bonds over `Omega_{k+1}`) in free coordinates.
    q_rows: Vec<Vec<(usize, f64)>>,
    /// Block tree rows in free coordinates.
    tau_rows: Vec<usize>,
}

impl SingleStep {
    pub fn new(ms: &Multiscale, next: Vec<bool>) -> Result<Self> {
        let k = ms.k();
        let l = ms.l();
        let lat_k = ms.level(k)?;
        let plus_ms = ms.extend(next.clone())?;
        let base = Minimizer::new(ms, Gauge::Landau)?;
        let plus = Minimizer::new(&plus_ms, Gauge::Axial)?;
        let mut index = BTreeMap::new();
        for (i, &(j, b)) in base.rows().iter().enumerate() {
            if j == k {
                index.insert(b, i);
            }
        }
        let inside = |b: usize| next[lat_k.block_of(b / 3, l)];
        let free: Vec<usize> = (0..lat_k.n_bonds())
            .filter(|&b| inside(b))
            .map(|b| index.get(&b).copied().ok_or_else(|| Error::NotNested(format!("Omega_{} leaves Omega_{k}", k + 1))))
            .collect::<Result<_>>()?;
        let fpos: BTreeMap<usize, usize> = free.iter().enumerate().map(|(i, &r)| (base.rows()[r].1, i)).collect();
        let coarse = lat_k.coarsen(l)?;
        let mut q_rows = Vec::new();
        for cb in (0..coarse.n_bonds()).filter(|&cb| next[cb / 3]) {
            let mut row = Vec::new();
            for (b, w) in average_row(&lat_k, l, 1, cb) {
                if let Some(&i) = fpos.get(&b) {
                    row.push((i, w));
                } else if !index.contains_key(&b) {
                    return Err(Error::NotNested(format!("average of Omega_{} leaves Omega_{k}", k + 1)));
                }
            }
            q_rows.push(row);
        }
        let trees = block_tree_bonds(&lat_k, l)?;
        let tau_rows = (0..coarse.n_sites()).filter(|&y| next[y]).flat_map(|y| trees[y].iter().map(|b| fpos[b])).collect();
        Ok(Self { base, plus, free, q_rows, tau_rows })
    }

    /// `A^min = Q_{k,Omega} A^{0,x}_{k+1,Omega^+}` for `A_{k,Omega}` (values over
    /// `Omega_{k+1}` ignored) and the level-`(k+1)` field.
    pub fn a_min(&self, a_kom: &[f64], a_next: &GaugeField<f64>) -> Result<(Vec<f64>, GaugeField<f64>)> {
        let k = self.base.ms.k();
        let mut lookup = BTreeMap::new();
        for (i, &row) in self.base.rows().iter().enumerate() {
            lookup.insert(row, a_kom[i]);
        }
        let rhs: Vec<f64> = self
            .plus
            .rows()
            .iter()
            .map(|&(j, b)| if j == k + 1 { a_next.values[b] } else { lookup[&(j, b)] })
            .collect();
        let a0 = self.plus.solve(&rhs)?;
        Ok((self.base.ms.average(&a0)?, a0))
    }

    /// Rows `[Q; tau]` acting on the free coordinates.
    pub fn fluctuation_constraints(&self) -> Mat {
        let n = self.free.len();
        let mut m = Mat::zeros(self.q_rows.len() + self.tau_rows.len(), n);
        for (r, row) in self.q_rows.iter().enumerate() {
            for &(i, w) in row {
                m[(r, i)] += w;
            }
        }
        for (r, &i) in self.tau_rows.iter().enumerate() {
            m[(self.q_rows.len() + r, i)] = 1.0;
        }
        m
    }

    /// Orthonormal parametrization `C` of `{Z : Q Z = 0, tau Z = 0}`.
    pub fn fluctuation_space(&self) -> Mat {
        linalg::null_space(&self.fluctuation_constraints(), NULL_TOL)
    }

    /// `[Delta_{k,Omega}]_{Omega_{k+1}}` with `<Z, Delta Z> = ||d H Z||^2`.
    pub fn fluctuation_form(&self) -> Mat {
        let fine = self.base.ms.fine();
        let dm = exterior_d_matrix(fine) * fine.volume_element().sqrt();
        let mut cols = Mat::zeros(fine.n_bonds(), self.free.len());
        for (i, &r) in self.free.iter().enumerate() {
            let c = self.base.column(r).expect("row index in range");
            cols.set_column(i, &Vector::from_vec(c.values));
        }
        let g = dm * cols;
        g.transpose() * g
    }

    /// Embeds free coordinates into an `A_{k,Omega}` vector.
    pub fn embed(&self, z: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.base.rows().len()];
        for (i, &r) in self.free.iter().enumerate() {
            v[r] = z[i];
        }
        v
    }

    /// Relative residual of `||dH(A^min + Z)||^2 = ||dH A^min||^2 + <Z, Delta Z>`.
    pub fn split_residual(&self, a_min: &[f64], z: &[f64], delta: &Mat) -> Result<f64> {
        let zf = self.embed(z);
        let total: Vec<f64> = a_min.iter().zip(&zf).map(|(a, b)| a + b).collect();
        let lhs = energy(&self.base.solve(&total)?);
        let zv = Vector::from_column_slice(z);
        let rhs = energy(&self.base.solve(a_min)?) + zv.dot(&(delta * &zv));
        Ok((lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE))
    }

    /// Level-`k` bond of each free coordinate.
    pub fn free_bonds(&self) -> Vec<usize> {
        self.free.iter().map(|&r| self.base.rows()[r].1).collect()
    }
}

/// `C = (C^T Delta C)^{-1}` on the constrained fluctuation space.
#[derive(Clone, Debug)]
pub struct FluctuationCovariance {
    pub param: Mat,
    pub cov: Mat,
    /// `C cov C^T`, the covariance of `Z` in free bond coordinates.
    pub bond_cov: Mat,
}

/// Exponential decay fit `|G| <= c0 exp(-gamma d)`.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct DecayFit {
    pub c0: f64,
    pub gamma: f64,
}

impl FluctuationCovariance {
    pub fn new(step: &SingleStep) -> Result<Self> {
        let param = step.fluctuation_space();
        let delta = step.fluctuation_form();
        let form = param.transpose() * &delta * &param;
        if linalg::logdet_spd(&form).is_err() {
            return Err(Error::Infeasible { rank: linalg::rank(&form, GAUGE_TOL), rows: form.nrows() });
        }
        let cov = linalg::inverse(&form)?;
        let bond_cov = &param * &cov * param.transpose();
        Ok(Self { param, cov, bond_cov })
    }

    pub fn sqrt(&self) -> Result<Mat> {
        linalg::sqrt_psd(&self.cov)
    }

    /// `C^{1/2}` acting in free bond coordinates.
    pub fn bond_sqrt(&self) -> Result<Mat> {
        Ok(&self.param * self.sqrt()? * self.param.transpose())
    }
}

fn bond_distance(lat: &Lattice, a: usize, b: usize) -> f64 {
    let d = lat.displacement(a / 3, b / 3);
    let mut s = 0.0;
    for ax in 0..3 {
        let n = lat.dims()[ax] as f64;
        let mut x = d[ax] as f64 + 0.5 * ((b % 3 == ax) as u8 as f64 - (a % 3 == ax) as u8 as f64);
        x -= n * (x / n).round();
        s += x * x;
    }
    s.sqrt()
}

/// Fits `max |G(b, b')|` per distance shell to `c0 exp(-gamma d)`.
pub fn decay_fit(g: &Mat, bonds: &[usize], lat: &Lattice) -> DecayFit {
    let mut shells: BTreeMap<i64, f64> = BTreeMap::new();
    for i in 0..bonds.len() {
        for j in 0..bonds.len() {
            let d = bond_distance(lat, bonds[i], bonds[j]);
            let key = (d * 2.0).round() as i64;
            let e = shells.entry(key).or_insert(0.0);
            *e = e.max(g[(i, j)].abs());
        }
    }
    let pts: Vec<(f64, f64)> =
        shells.iter().filter(|(_, &v)| v > 1e-300).map(|(&k, &v)| (k as f64 / 2.0, v.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let gamma = -slope;
    let c0 = pts.iter().map(|p| p.1 + gamma * p.0).fold(f64::NEG_INFINITY, f64::max).exp();
    DecayFit { c0, gamma }
}

/// `C^{1/2,loc} = sum_cube 1_cube C^{1/2}_cube` with each block's square root
/// taken from the form restricted to the block enlarged by `radius` layers.
/// Returns `max |C^{1/2} - C^{1/2,loc}|` in free bond coordinates.
pub fn localized_sqrt_defect(step: &SingleStep, radius: usize) -> Result<f64> {
    let k = step.base.ms.k();
    let l = step.base.ms.l();
    let lat_k = step.base.ms.level(k)?;
    let coarse = lat_k.coarsen(l)?;
    let omega_next: Vec<bool> = step.plus.ms.omega(k + 1).to_vec();
    let bonds = step.free_bonds();
    let full = FluctuationCovariance::new(step)?.bond_sqrt()?;
    let delta = step.fluctuation_form();
    let cons = step.fluctuation_constraints();
    let mut local = Mat::zeros(bonds.len(), bonds.len());
    for cube in (0..coarse.n_sites()).filter(|&y| omega_next[y]) {
        let mut single = vec![false; coarse.n_sites()];
        single[cube] = true;
        let region: Vec<bool> =
            enlarge_mask(&coarse, &single, radius).iter().zip(&omega_next).map(|(a, b)| *a && *b).collect();
        let sel: Vec<usize> = (0..bonds.len()).filter(|&i| region[lat_k.block_of(bonds[i] / 3, l)]).collect();
        let inside = |c: usize| sel.contains(&c);
        let rows: Vec<usize> = (0..cons.nrows())
            .filter(|&r| (0..cons.ncols()).any(|c| cons[(r, c)] != 0.0) && (0..cons.ncols()).all(|c| cons[(r, c)] == 0.0 || inside(c)))
            .collect();
        let cm = Mat::from_fn(rows.len(), sel.len(), |r, c| cons[(rows[r], sel[c])]);
        let dm = Mat::from_fn(sel.len(), sel.len(), |r, c| delta[(sel[r], sel[c])]);
        let p = linalg::null_space(&cm, NULL_TOL);
        let form = p.transpose() * dm * &p;
        let s = &p * linalg::sqrt_psd(&linalg::inverse(&form)?)? * p.transpose();
        for (r, &i) in sel.iter().enumerate() {
            if lat_k.block_of(bonds[i] / 3, l) == cube {
                for (c, &jj) in sel.iter().enumerate() {
                    local[(i, jj)] = s[(r, c)];
                }
            }
        }
    }
    Ok(linalg::max_abs_diff(&full, &local))
}

/// The background field `A^0_{k+1, Omega^+(cube)}` from a level-`(k+1)` field:
/// all levels `1..=k+1` share the region `cube` enlarged by `layers`, the
/// input is lifted by `Q^{s,T}` and the Landau minimizer is taken.
///
/// Bonds outside the region are fixed at the lifted values, so only a reduced
/// system over the region is solved.
pub fn local_minimizer(
    fine: &Lattice,
    l: usize,
    a_next: &GaugeField<f64>,
    cube: &[bool],
    layers: usize,
) -> Result<GaugeField<f64>> {
    let level = a_next.level;
    let coarse = &a_next.lattice;
    let region = enlarge_mask(coarse, cube, layers);
    if enlarge_mask(coarse, &region, 1).iter().all(|&b| b) {
        return Err(Error::InvalidLattice("cube sequence does not fit in the torus".into()));
    }
    let s = l.pow(level as u32);
    let mut lifted = GaugeField::zeros(fine, 0);
    // The j-fold surface lift puts s * A(y, mu) on fine bonds whose position in
    // each of the nested blocks along mu is the last one.
    for x in 0..fine.n_sites() {
        let c = fine.coords(x);
        let y = fine.block_of(x, s);
        for mu in 0..3 {
            if c[mu] % s == s - 1 {
                lifted.values[3 * x + mu] = s as f64 * a_next.values[3 * y + mu];
            }
        }
    }
    let mut omega = Vec::new();
    for j in 1..=level {
        let lat = fine.coarsen(l.pow(j as u32))?;
        omega.push(refine_mask(&lat, l.pow((level - j) as u32), &region));
    }
    let ms = Multiscale::new(fine, l, omega)?;
    let h = Minimizer::new(&ms, Gauge::Landau)?;
    h.solve(&ms.average(&lifted)?)
}

/// Sup of `sum_j mu_j ||d A_j||^2_{X_j} / ||dA||^2` over fine fields, with
/// `A_j` the `j`-fold average and `X_j` a mask over level-`j` sites.
pub fn energy_domination_constant(fine: &Lattice, l: usize, regions: &[Vec<bool>]) -> Result<f64> {
    let dm = exterior_d_matrix(fine);
    let range = linalg::range_space(&dm, 1e-10);
    let mut k = Mat::zeros(fine.n_plaquettes(), fine.n_plaquettes());
    let mut q2 = Mat::identity(fine.n_plaquettes(), fine.n_plaquettes());
    let mut lat = fine.clone();
    for (j, x) in regions.iter().enumerate() {
        if j > 0 {
            q2 = plaquette_average_matrix(&lat, l)? * q2;
            lat = lat.coarsen(l)?;
        }
        if x.len() != lat.n_sites() {
            return Err(Error::InvalidLattice(format!("region {j} mask size")));
        }
        let mut sel = q2.clone();
        for p in 0..lat.n_plaquettes() {
            if !x[p / 3] {
                sel.row_mut(p).fill(0.0);
            }
        }
        k += sel.transpose() * sel * lat.volume_element();
    }
    let form = range.transpose() * k * &range / fine.volume_element();
    Ok(linalg::sym_eigen(&form).eigenvalues.iter().copied().fold(0.0, f64::max))
}

/// The ratio of [`energy_domination_constant`] for one field.
pub fn energy_domination_ratio(a: &GaugeField<f64>, l: usize, regions: &[Vec<bool>]) -> Result<f64> {
    let mut num = 0.0;
    let mut cur = a.clone();
    for (j, x) in regions.iter().enumerate() {
        if j > 0 {
            cur = crate::averaging::gauge_average(&cur, l)?;
        }
        let f = exterior_d(&cur);
        num += cur.lattice.volume_element() * (0..f.values.len()).filter(|&p| x[p / 3]).map(|p| f.values[p].powi(2)).sum::<f64>();
    }
    let den = energy(a);
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Single fermion step `a <Psi'-bar - Q-bar psi-bar, Psi' - Q psi>_R + <psi-bar, D psi>`.
#[derive(Clone, Debug)]
pub struct FermionStep {
    /// Fine operator including the mass.
    pub d: CMat,
    pub q: CMat,
    /// Stiffness `b / L`.
    pub a: f64,
    pub l: usize,
    pub fine_measure: f64,
    pub coarse_measure: f64,
}

/// Critical point `(psi-bar, psi)` on the region with the rest held fixed.
#[derive(Clone, Debug)]
pub struct CriticalFermion {
    pub psi: CVector,
    pub psibar: CVector,
    pub components: Vec<usize>,
    pub gamma: CMat,
}

impl FermionStep {
    pub fn new(d: CMat, q: CMat, b: f64, l: usize, fine: &Lattice) -> Self {
        let v = fine.volume_element();
        Self { d, q, a: b / l as f64, l, fine_measure: v, coarse_measure: v * (l as f64).powi(3) }
    }

    /// `P = Q* Q` with `Q* = L^3 Q^H`.
    pub fn projection(&self) -> CMat {
        self.q.adjoint() * &self.q * Complex64::new((self.l as f64).powi(3), 0.0)
    }

    /// `D + a P`.
    pub fn operator(&self) -> CMat {
        &self.d + self.projection() * Complex64::new(self.a, 0.0)
    }

    /// Fine components averaged into the coarse rows of `coarse_mask`.
    pub fn region_components(&self, coarse_mask: &[bool]) -> Vec<usize> {
        (0..self.q.ncols())
            .filter(|&c| (0..self.q.nrows()).any(|r| coarse_mask[r / 4] && self.q[(r, c)].norm() > 0.0))
            .collect()
    }

    fn coarse_rows(&self, comps: &[usize]) -> Vec<usize> {
        (0..self.q.nrows()).filter(|&r| comps.iter().any(|&c| self.q[(r, c)].norm() > 0.0)).collect()
    }

    /// `Gamma = [D + aP]^{-1}_R`.
    pub fn gamma(&self, comps: &[usize]) -> Result<CMat> {
        let m = self.operator();
        cinverse(&CMat::from_fn(comps.len(), comps.len(), |i, j| m[(comps[i], comps[j])]))
    }

    /// `log delta Z = log det [D + aP]_R`.
    pub fn log_delta_z(&self, comps: &[usize]) -> Complex64 {
        let m = self.operator();
        clogdet(&CMat::from_fn(comps.len(), comps.len(), |i, j| m[(comps[i], comps[j])]))
    }

    /// The action with `ubar`, `u` on the fine lattice and `vbar`, `v` on the coarse one.
    pub fn action(&self, comps: &[usize], ubar: &CVector, u: &CVector, vbar: &CVector, v: &CVector) -> Complex64 {
        let rows = self.coarse_rows(comps);
        let qu = &self.q * u;
        let qbu = self.q.map(|z| z.conj()) * ubar;
        let mut s = Complex64::new(0.0, 0.0);
        for &r in &rows {
            s += (vbar[r] - qbu[r]) * (v[r] - qu[r]);
        }
        s * self.a * self.coarse_measure + (ubar.transpose() * &self.d * u)[(0, 0)] * self.fine_measure
    }

    /// Stationary point in the region components given everything else.
    pub fn critical(&self, comps: &[usize], fixed_bar: &CVector, fixed: &CVector, vbar: &CVector, v: &CVector) -> Result<CriticalFermion> {
        let gamma = self.gamma(comps)?;
        let m = self.operator();
        let rows = self.coarse_rows(comps);
        let l3 = Complex64::new((self.l as f64).powi(3) * self.a, 0.0);
        let n = comps.len();
        let outside: Vec<usize> = (0..self.d.ncols()).filter(|c| !comps.contains(c)).collect();
        let mut rhs = CVector::zeros(n);
        let mut rhs_bar = CVector::zeros(n);
        for (i, &c) in comps.iter().enumerate() {
            for &r in &rows {
                rhs[i] += l3 * self.q[(r, c)].conj() * v[r];
                rhs_bar[i] += l3 * self.q[(r, c)] * vbar[r];
            }
            for &o in &outside {
                rhs[i] -= m[(c, o)] * fixed[o];
                rhs_bar[i] -= fixed_bar[o] * m[(o, c)];
            }
        }
        let sol = &gamma * rhs;
        let sol_bar = gamma.transpose() * rhs_bar;
        let mut psi = fixed.clone();
        let mut psibar = fixed_bar.clone();
        for (i, &c) in comps.iter().enumerate() {
            psi[c] = sol[i];
            psibar[c] = sol_bar[i];
        }
        Ok(CriticalFermion { psi, psibar, components: comps.to_vec(), gamma })
    }

    /// Max modulus of the stationarity equations over the region.
    pub fn stationarity_residual(&self, crit: &CriticalFermion, v: &CVector, vbar: &CVector) -> f64 {
        let rows = self.coarse_rows(&crit.components);
        let qu = &self.q * &crit.psi;
        let qbu = self.q.map(|z| z.conj()) * &crit.psibar;
        let du = &self.d * &crit.psi;
        let dbu = self.d.transpose() * &crit.psibar;
        let mut worst = 0.0f64;
        for &c in &crit.components {
            let mut g = du[c] * self.fine_measure;
            let mut gb = dbu[c] * self.fine_measure;
            for &r in &rows {
                g -= self.q[(r, c)].conj() * (v[r] - qu[r]) * self.a * self.coarse_measure;
                gb -= self.q[(r, c)] * (vbar[r] - qbu[r]) * self.a * self.coarse_measure;
            }
            worst = worst.max(g.norm()).max(gb.norm());
        }
        worst
    }

    /// `T = a^{-1} Q (D + a P)`.
    pub fn t_operator(&self) -> CMat {
        &self.q * self.operator() * Complex64::new(1.0 / self.a, 0.0)
    }

    /// `psi(Psi') = a Gamma Q* Psi'` on the whole lattice.
    pub fn minimizer_map(&self) -> Result<CMat> {
        let g = cinverse(&self.operator())?;
        Ok(g * self.q.adjoint() * Complex64::new(self.a * (self.l as f64).powi(3), 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::{fermion_average, gauge_average_matrix_j};
    use crate::fields::{gradient, DiracOperator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()
    }

    fn sample_ms() -> Multiscale {
        let fine = Lattice::cubic(4, 0.25).unwrap();
        let mut o1 = vec![false; 8];
        for y in [0, 1, 2, 3, 4] {
            o1[y] = true;
        }
        Multiscale::new(&fine, 2, vec![o1]).unwrap()
    }

    #[test]
    fn rows_partition_levels() {
        let fine = Lattice::cubic(4, 0.25).unwrap();
        let ms = Multiscale::full(&fine, 2, 2).unwrap();
        assert_eq!(ms.rows().unwrap().len(), 3);
        let ms = sample_ms();
        let rows = ms.rows().unwrap();
        assert_eq!(rows.iter().filter(|r| r.0 == 1).count(), 15);
        assert_eq!(rows.iter().filter(|r| r.0 == 0).count(), 3 * 8 * 3);
        let dense = gauge_average_matrix_j(&fine, 2, 2).unwrap();
        let row = average_row(&fine, 2, 2, 1);
        for (c, w) in row {
            assert!((dense[(1, c)] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizers_satisfy_constraints_and_agree() {
        let ms = sample_ms();
        let land = Minimizer::new(&ms, Gauge::Landau).unwrap();
        let ax = Minimizer::new(&ms, Gauge::Axial).unwrap();
        assert!(ax.gauge_rows > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rhs = random_vec(&mut rng, land.rows().len());
        assert!(land.constraint_residual(&rhs).unwrap() < 1e-10);
        assert!(ax.constraint_residual(&rhs).unwrap() < 1e-10);
        let a = land.solve(&rhs).unwrap();
        let b = ax.solve(&rhs).unwrap();
        assert!(field_strength_gap(&a, &b) < 1e-10);
        assert!(a.norm_sq() <= b.norm_sq() + 1e-12);

        let a0 = GaugeField::random(ms.fine(), 0, &mut rng, 1.0);
        let h = land.solve(&ms.average(&a0).unwrap()).unwrap();
        assert!(energy(&h) <= energy(&a0) + 1e-12);
        assert!(land.solve(&vec![0.0; rhs.len()]).unwrap().sup_norm() == 0.0);
    }

    #[test]
    fn landau_is_minimum_norm_in_gauge_orbit() {
        let ms = sample_ms();
        let land = Minimizer::new(&ms, Gauge::Landau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rhs = random_vec(&mut rng, land.rows().len());
        let a = land.solve(&rhs).unwrap();
        // Gauge directions preserving the constraints: omega supported on
        // interior sites of Omega_1 blocks with vanishing block averages.
        let fine = ms.fine();
        let mut omega = vec![0.0; 64];
        omega[fine.index([1, 1, 1])] = 1.0;
        omega[fine.index([0, 1, 1])] = -1.0;
        let g = gradient(fine, 0, &omega);
        let shifted = a.add(&g.scale(0.3)).unwrap();
        let back = ms.average(&shifted).unwrap();
        let dev = back.iter().zip(&rhs).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if dev < 1e-12 {
            assert!(a.norm_sq() <= shifted.norm_sq());
        }
    }

    #[test]
    fn single_step_split() {
        let fine = Lattice::new([8, 4, 4], 0.25).unwrap();
        let ms = Multiscale::new(&fine, 2, vec![vec![true; 16]]).unwrap();
        let next = vec![true, false];
        let step = SingleStep::new(&ms, next).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let akom = random_vec(&mut rng, step.base.rows().len());
        let lat2 = ms.level(2).unwrap();
        let anext = GaugeField::random(&lat2, 2, &mut rng, 1.0);
        let (amin, a0) = step.a_min(&akom, &anext).unwrap();
        let h = step.base.solve(&amin).unwrap();
        assert!(field_strength_gap(&h, &a0) < 1e-9);
        let lat1 = ms.level(1).unwrap();
        let mut a1 = GaugeField::zeros(&lat1, 1);
        for (i, &(_, b)) in step.base.rows().iter().enumerate() {
            a1.values[b] = amin[i];
        }
        let q = crate::averaging::gauge_average(&a1, 2).unwrap();
        for b in 0..3 {
            assert!((q.values[b] - anext.values[b]).abs() < 1e-10);
        }
        let param = step.fluctuation_space();
        let delta = step.fluctuation_form();
        let z = &param * Vector::from_vec(random_vec(&mut rng, param.ncols()));
        assert!(step.split_residual(&amin, z.as_slice(), &delta).unwrap() < 1e-9);
        let zero = vec![0.0; z.len()];
        assert!(step.split_residual(&amin, &zero, &delta).unwrap() < 1e-12);
    }

    #[test]
    fn covariance_and_square_roots() {
        let fine = Lattice::cubic(4, 1.0).unwrap();
        let ms = Multiscale::new(&fine, 2, vec![]).unwrap();
        let step = SingleStep::new(&ms, vec![true; 8]).unwrap();
        let cov = FluctuationCovariance::new(&step).unwrap();
        let s = cov.sqrt().unwrap();
        assert!(linalg::max_abs_diff(&(&s * &s), &cov.cov) < 1e-10);
        let fit = decay_fit(&cov.bond_cov, &step.free_bonds(), &fine);
        assert!(fit.gamma > 0.0);
        let d0 = localized_sqrt_defect(&step, 0).unwrap();
        let d2 = localized_sqrt_defect(&step, 1).unwrap();
        assert!(d2 <= d0 + 1e-12);
        assert!(d2 < 1e-10);
    }

    #[test]
    fn local_minimizer_locality() {
        let fine = Lattice::cubic(16, 0.5).unwrap();
        let coarse = fine.coarsen(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = GaugeField::random(&coarse, 1, &mut rng, 1.0);
        let mut cube = vec![false; coarse.n_sites()];
        cube[coarse.index([3, 3, 3])] = true;
        let m1 = local_minimizer(&fine, 2, &a, &cube, 1).unwrap();
        let big = enlarge_mask(&coarse, &cube, 3);
        let mut b = a.clone();
        for y in (0..coarse.n_sites()).filter(|&y| !big[y]) {
            b.values[3 * y] += 1.0;
        }
        let m2 = local_minimizer(&fine, 2, &b, &cube, 1).unwrap();
        let tilde = refine_mask(&fine, 2, &enlarge_mask(&coarse, &cube, 1));
        for bnd in (0..fine.n_bonds()).filter(|&bnd| tilde[bnd / 3]) {
            assert!((m1.values[bnd] - m2.values[bnd]).abs() < 1e-12);
        }
        let da = exterior_d(&a);
        let q2 = plaquette_average_matrix(&fine, 2).unwrap() * Vector::from_vec(exterior_d(&m1).values);
        let ct = enlarge_mask(&coarse, &cube, 1);
        for p in (0..coarse.n_plaquettes()).filter(|&p| ct[p / 3]) {
            assert!((da.values[p] - q2[p]).abs() < 1e-10);
        }
        let z = local_minimizer(&fine, 2, &GaugeField::zeros(&coarse, 1), &cube, 1).unwrap();
        assert_eq!(z.sup_norm(), 0.0);
    }

    #[test]
    fn energy_domination_bounds() {
        let fine = Lattice::cubic(2, 0.5).unwrap();
        let regions = vec![vec![true; 8], vec![true]];
        let c = energy_domination_constant(&fine, 2, &regions).unwrap();
        assert!(c > 0.0 && c.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = GaugeField::random(&fine, 0, &mut rng, 1.0);
        assert!(energy_domination_ratio(&a, 2, &regions).unwrap() <= c + 1e-12);
        assert_eq!(energy_domination_ratio(&GaugeField::zeros(&fine, 0), 2, &regions).unwrap(), 0.0);
    }

    #[test]
    fn fermion_step_identities() {
        let fine = Lattice::cubic(2, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = GaugeField::random(&fine, 0, &mut rng, 0.5);
        let e = 0.7;
        let d = DiracOperator::new(&a, e, 1.0).matrix;
        let q = fermion_average(&fine, 2, 1, Some((&a, e))).unwrap();
        let step = FermionStep::new(d, q, 1.0, 2, &fine);
        let comps = step.region_components(&[true]);
        assert_eq!(comps.len(), 32);
        let rv = |rng: &mut ChaCha8Rng, n: usize| {
            CVector::from_fn(n, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        };
        let (v, vb) = (rv(&mut rng, 4), rv(&mut rng, 4));
        let zero = CVector::zeros(32);
        let crit = step.critical(&comps, &zero, &zero, &vb, &v).unwrap();
        assert!(step.stationarity_residual(&crit, &v, &vb) < 1e-10);
        let (w, wb) = (rv(&mut rng, 32), rv(&mut rng, 32));
        let s0 = step.action(&comps, &crit.psibar, &crit.psi, &vb, &v);
        let s1 = step.action(&comps, &(&crit.psibar + &wb), &(&crit.psi + &w), &vb, &v);
        let quad = (wb.transpose() * step.operator() * &w)[(0, 0)] * step.fine_measure;
        assert!((s1 - s0 - quad).norm() < 1e-10 * s1.norm().max(1.0));
        let t = step.t_operator();
        let h = step.minimizer_map().unwrap();
        assert!(linalg::cmax_abs_diff(&(&t * h), &CMat::identity(4, 4)) < 1e-10);
    }
}
