//! Block averaging operators for fermions, gauge fields and plaquettes.
//!
//! All averages act from a fine lattice to the lattice of `L`-blocks, where
//! block `y` holds the fine sites `L y + a`, `0 <= a_i < L`. Operators are
//! returned as dense matrices so that they compose with the minimizers and
//! determinant oracles.
//!
//! * `Q_j(A)` averages spinors over `L^j` blocks with parallel transport from
//!   the block corner along the nested axial paths.
//! * `gauge_average` averages line integrals of `A` along the `L^3` parallel
//!   fine paths making up each coarse bond; it satisfies `Q d = d Q` on
//!   gradients and `d Q = Q2 d` with `Q2` the plaquette average.
//! * the block tree `tau` selects `L^3 - 1` bonds per block; the torus tree
//!   `tau*` and the toron average `Q*` fix the gauge on a whole torus.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fields::{FieldValue, GaugeField, PlaquetteField, SpinorField};
use crate::lattice::{Lattice, PLANES};
use crate::linalg::{clogdet, CMat, Mat};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn block_size(l: usize, j: usize) -> Result<usize> {
    l.checked_pow(j as u32).ok_or_else(|| Error::InvalidLattice("block size overflow".into()))
}

/// Line integral `sum eta * sign * A(b)` along the axial path from `from` to `to`,
/// moving along axis 2, then 1, then 0 by nonnegative steps.
fn axial_line<T: FieldValue>(a: &GaugeField<T>, from: [usize; 3], to: [usize; 3]) -> Complex64 {
    let lat = &a.lattice;
    let mut cur = from;
    let mut s = Complex64::new(0.0, 0.0);
    for mu in [2, 1, 0] {
        while cur[mu] != to[mu] {
            let site = lat.index(cur);
            s += a.get(site, mu).to_complex();
            cur[mu] = (cur[mu] + 1) % lat.dims()[mu];
        }
    }
    s * lat.spacing()
}

/// `(tau_j A)(y, x)`: sum of axial line integrals along `x_j = y, ..., x_0 = x`,
/// where `x_{i+1}` is the corner of the level-`(i+1)` block containing `x_i`.
pub fn nested_line_integral<T: FieldValue>(a: &GaugeField<T>, l: usize, j: usize, x: usize) -> Complex64 {
    let lat = &a.lattice;
    let mut pts = vec![lat.coords(x)];
    let mut size = 1usize;
    for _ in 0..j {
        size *= l;
        let p = *pts.last().expect("nonempty");
        pts.push(p.map(|v| v / size * size));
    }
    let mut s = Complex64::new(0.0, 0.0);
    for i in 0..j {
        s += axial_line(a, pts[i + 1], pts[i]);
    }
    s
}

/// Matrix of `Q_j(A)` from `4 * n_fine` to `4 * n_coarse` components.
///
/// `(Q_j(A) f)(y) = L^{-3j} sum_{x in B_j(y)} exp(i e (tau_j A)(y, x)) f(x)`.
pub fn fermion_average<T: FieldValue>(
    fine: &Lattice,
    l: usize,
    j: usize,
    gauge: Option<(&GaugeField<T>, f64)>,
) -> Result<CMat> {
    let s = block_size(l, j)?;
    if j == 0 {
        return Ok(CMat::identity(4 * fine.n_sites(), 4 * fine.n_sites()));
    }
    let coarse = fine.coarsen(s)?;
    if let Some((a, _)) = gauge {
        if !a.lattice.same_shape(fine) {
            return Err(Error::LevelMismatch {
                expected: format!("{:?}", fine.dims()),
                found: format!("{:?}", a.lattice.dims()),
            });
        }
    }
    let w = (s as f64).powi(-3);
    let mut q = CMat::zeros(4 * coarse.n_sites(), 4 * fine.n_sites());
    for x in 0..fine.n_sites() {
        let y = fine.block_of(x, s);
        let phase = match gauge {
            Some((a, e)) => (I * e * nested_line_integral(a, l, j, x)).exp(),
            None => Complex64::new(1.0, 0.0),
        };
        for spin in 0..4 {
            q[(4 * y + spin, 4 * x + spin)] = phase * w;
        }
    }
    Ok(q)
}

/// Adjoint of `Q_j(A)` with respect to the measure-weighted inner products,
/// equal to `Q_j^T(-A)` for real `A`.
pub fn fermion_average_adjoint(q: &CMat, l: usize, j: usize) -> CMat {
    q.adjoint() * Complex64::new((l as f64).powi(3 * j as i32), 0.0)
}

pub fn apply_fermion_average(q: &CMat, psi: &SpinorField, l: usize, j: usize) -> Result<SpinorField> {
    let coarse = psi.lattice.coarsen(block_size(l, j)?)?;
    let v = q * psi.as_vector();
    let mut out = SpinorField::from_values(&coarse, psi.level + j, v.iter().copied().collect())?;
    out.conjugate = psi.conjugate;
    Ok(out)
}

/// Plain block average of scalar site fields.
pub fn scalar_average_matrix(fine: &Lattice, l: usize) -> Result<Mat> {
    let coarse = fine.coarsen(l)?;
    let w = (l as f64).powi(-3);
    let mut q = Mat::zeros(coarse.n_sites(), fine.n_sites());
    for x in 0..fine.n_sites() {
        q[(fine.block_of(x, l), x)] = w;
    }
    Ok(q)
}

/// `(Q A)(y, mu) = L^{-3} sum_{x in B(y)} L^{-1} sum_{i < L} A(x + i mu, mu)`.
pub fn gauge_average_matrix(fine: &Lattice, l: usize) -> Result<Mat> {
    let coarse = fine.coarsen(l)?;
    let w = (l as f64).powi(-4);
    let mut q = Mat::zeros(coarse.n_bonds(), fine.n_bonds());
    for y in 0..coarse.n_sites() {
        for x in fine.block_sites(y, l) {
            for mu in 0..3 {
                let mut z = x;
                for _ in 0..l {
                    q[(3 * y + mu, 3 * z + mu)] += w;
                    z = fine.shift(z, mu, 1);
                }
            }
        }
    }
    Ok(q)
}

/// `j`-fold gauge average, as a matrix.
pub fn gauge_average_matrix_j(fine: &Lattice, l: usize, j: usize) -> Result<Mat> {
    let mut m = Mat::identity(fine.n_bonds(), fine.n_bonds());
    let mut lat = fine.clone();
    for _ in 0..j {
        m = gauge_average_matrix(&lat, l)? * m;
        lat = lat.coarsen(l)?;
    }
    Ok(m)
}

pub fn gauge_average(a: &GaugeField<f64>, l: usize) -> Result<GaugeField<f64>> {
    let q = gauge_average_matrix(&a.lattice, l)?;
    let v = q * crate::linalg::Vector::from_column_slice(&a.values);
    GaugeField::from_values(&a.lattice.coarsen(l)?, a.level + 1, v.iter().copied().collect())
}

/// `(Q2 F)(y; mu nu) = L^{-3} sum_{x in B(y)} L^{-2} sum_{a, b < L} F(x + a mu + b nu; mu nu)`.
pub fn plaquette_average_matrix(fine: &Lattice, l: usize) -> Result<Mat> {
    let coarse = fine.coarsen(l)?;
    let w = (l as f64).powi(-5);
    let mut q = Mat::zeros(coarse.n_plaquettes(), fine.n_plaquettes());
    for y in 0..coarse.n_sites() {
        for x in fine.block_sites(y, l) {
            for (plane, &(mu, nu)) in PLANES.iter().enumerate() {
                for a in 0..l {
                    for b in 0..l {
                        let z = fine.shift(fine.shift(x, mu, a as isize), nu, b as isize);
                        q[(3 * y + plane, 3 * z + plane)] += w;
                    }
                }
            }
        }
    }
    Ok(q)
}

/// Coarse plaquettes in `x` (a coarse-site mask) and the fine plaquettes `X~` they read.
fn plaquette_supports(fine: &Lattice, l: usize, x: &[bool]) -> Result<(Mat, Vec<usize>, Vec<usize>)> {
    let q = plaquette_average_matrix(fine, l)?;
    let coarse = fine.coarsen(l)?;
    if x.len() != coarse.n_sites() {
        return Err(Error::LevelMismatch { expected: format!("{} coarse sites", coarse.n_sites()), found: format!("{}", x.len()) });
    }
    let rows: Vec<usize> = (0..coarse.n_plaquettes()).filter(|&p| x[p / 3]).collect();
    let cols: Vec<usize> =
        (0..fine.n_plaquettes()).filter(|&c| rows.iter().any(|&r| q[(r, c)] != 0.0)).collect();
    Ok((q, rows, cols))
}

/// `sup_F ||Q2 F||_X / ||F||_X~` with measure-weighted `L^2` norms, by the largest singular value.
pub fn plaquette_average_constant(fine: &Lattice, l: usize, x: &[bool]) -> Result<f64> {
    let (q, rows, cols) = plaquette_supports(fine, l, x)?;
    let sub = Mat::from_fn(rows.len(), cols.len(), |i, j| q[(rows[i], cols[j])]);
    let ratio = (fine.coarsen(l)?.volume_element() / fine.volume_element()).sqrt();
    Ok(crate::linalg::operator_norm(&sub) * ratio)
}

/// `||Q2 F||_X / ||F||_X~` for one `F`; zero when `F` vanishes on `X~`.
pub fn plaquette_average_ratio(f: &PlaquetteField<f64>, l: usize, x: &[bool]) -> Result<f64> {
    let fine = &f.lattice;
    let (q, rows, cols) = plaquette_supports(fine, l, x)?;
    let qf = q * crate::linalg::Vector::from_column_slice(&f.values);
    let num = rows.iter().map(|&r| qf[r] * qf[r]).sum::<f64>() * fine.coarsen(l)?.volume_element();
    let den = cols.iter().map(|&c| f.values[c] * f.values[c]).sum::<f64>() * fine.volume_element();
    Ok(if den == 0.0 { 0.0 } else { (num / den).sqrt() })
}

pub fn plaquette_average(f: &PlaquetteField<f64>, l: usize) -> Result<PlaquetteField<f64>> {
    let q = plaquette_average_matrix(&f.lattice, l)?;
    let v = q * crate::linalg::Vector::from_column_slice(&f.values);
    PlaquetteField::from_values(&f.lattice.coarsen(l)?, f.level + 1, v.iter().copied().collect())
}

/// `Q^{s,T}`: right inverse of the gauge average supported on the fine bonds
/// that leave each block through its far face, `Q Q^{s,T} = Id`.
pub fn surface_lift_matrix(fine: &Lattice, l: usize) -> Result<Mat> {
    let coarse = fine.coarsen(l)?;
    let mut m = Mat::zeros(fine.n_bonds(), coarse.n_bonds());
    for y in 0..coarse.n_sites() {
        for x in fine.block_sites(y, l) {
            let c = fine.coords(x);
            for mu in 0..3 {
                if c[mu] % l == l - 1 {
                    m[(3 * x + mu, 3 * y + mu)] = l as f64;
                }
            }
        }
    }
    Ok(m)
}

/// `Q^{e,T}`: right inverse of the plaquette average supported on the fine
/// plaquettes at the far edge of each block, `Q2 Q^{e,T} = Id`.
pub fn edge_lift_matrix(fine: &Lattice, l: usize) -> Result<Mat> {
    let coarse = fine.coarsen(l)?;
    let mut m = Mat::zeros(fine.n_plaquettes(), coarse.n_plaquettes());
    for y in 0..coarse.n_sites() {
        for x in fine.block_sites(y, l) {
            let c = fine.coords(x);
            for (plane, &(mu, nu)) in PLANES.iter().enumerate() {
                if c[mu] % l == l - 1 && c[nu] % l == l - 1 {
                    m[(3 * x + plane, 3 * y + plane)] = (l * l) as f64;
                }
            }
        }
    }
    Ok(m)
}

/// `j`-fold surface lift from level `j` down to the fine lattice.
pub fn surface_lift_matrix_j(fine: &Lattice, l: usize, j: usize) -> Result<Mat> {
    let mut m = Mat::identity(fine.n_bonds(), fine.n_bonds());
    let mut lat = fine.clone();
    for _ in 0..j {
        m *= surface_lift_matrix(&lat, l)?;
        lat = lat.coarsen(l)?;
    }
    Ok(m)
}

/// Axial tree of one block anchored at fine corner `c`: axis-0 bonds on every
/// line, axis-1 bonds on the `a_0 = 0` plane, the axis-2 bonds on the
/// `a_0 = a_1 = 0` line; `L^3 - 1` bonds in total.
fn tree_in_box(lat: &Lattice, corner: [usize; 3], size: [usize; 3]) -> Vec<usize> {
    let mut out = Vec::new();
    for c in 0..size[2] {
        for b in 0..size[1] {
            for a in 0..size[0] {
                let site = lat.index([corner[0] + a, corner[1] + b, corner[2] + c]);
                if a + 1 < size[0] {
                    out.push(3 * site);
                }
                if a == 0 && b + 1 < size[1] {
                    out.push(3 * site + 1);
                }
                if a == 0 && b == 0 && c + 1 < size[2] {
                    out.push(3 * site + 2);
                }
            }
        }
    }
    out
}

/// Tree bonds of each `L`-block, indexed by coarse site.
pub fn block_tree_bonds(fine: &Lattice, l: usize) -> Result<Vec<Vec<usize>>> {
    let coarse = fine.coarsen(l)?;
    Ok((0..coarse.n_sites())
        .map(|y| {
            let corner = fine.coords(fine.block_corner(y, l));
            tree_in_box(fine, corner, [l; 3])
        })
        .collect())
}

/// Spanning tree `tau*` of the whole torus, `n_sites - 1` bonds.
pub fn torus_tree_bonds(lat: &Lattice) -> Vec<usize> {
    tree_in_box(lat, [0, 0, 0], lat.dims())
}

/// Alternative spanning tree ordering axes as 2, 1, 0, used for gauge-fixing
/// independence checks.
pub fn torus_tree_bonds_alt(lat: &Lattice) -> Vec<usize> {
    let d = lat.dims();
    let mut out = Vec::new();
    for c in 0..d[2] {
        for b in 0..d[1] {
            for a in 0..d[0] {
                let site = lat.index([a, b, c]);
                if c + 1 < d[2] {
                    out.push(3 * site + 2);
                }
                if c == 0 && b + 1 < d[1] {
                    out.push(3 * site + 1);
                }
                if c == 0 && b == 0 && a + 1 < d[0] {
                    out.push(3 * site);
                }
            }
        }
    }
    out
}

/// Rows selecting the given bonds.
pub fn selection_matrix(n_bonds: usize, bonds: &[usize]) -> Mat {
    let mut m = Mat::zeros(bonds.len(), n_bonds);
    for (r, &b) in bonds.iter().enumerate() {
        m[(r, b)] = 1.0;
    }
    m
}

/// `tau A` on the blocks listed in `blocks`, in tree order.
pub fn axial_residues(a: &GaugeField<f64>, l: usize, blocks: &[usize]) -> Result<Vec<f64>> {
    let trees = block_tree_bonds(&a.lattice, l)?;
    let mut out = Vec::new();
    for &y in blocks {
        let t = trees.get(y).ok_or_else(|| Error::Precondition(format!("block {y} out of range")))?;
        out.extend(t.iter().map(|&b| a.values[b]));
    }
    Ok(out)
}

/// Gauge transform `A - d omega` with `tau(A - d omega) = 0` on the given blocks;
/// `omega` vanishes at each block corner.
pub fn axial_gauge_fix(a: &GaugeField<f64>, l: usize, blocks: &[usize]) -> Result<(GaugeField<f64>, Vec<f64>)> {
    let lat = &a.lattice;
    let trees = block_tree_bonds(lat, l)?;
    let mut omega = vec![0.0; lat.n_sites()];
    let eta = lat.spacing();
    for &y in blocks {
        // Tree bonds are listed so that each bond's base is already reached.
        let corner = lat.block_corner(y, l);
        let mut reached = std::collections::HashSet::from([corner]);
        let mut pending: Vec<usize> = trees[y].clone();
        while !pending.is_empty() {
            let before = pending.len();
            pending.retain(|&b| {
                let (x, mu) = lat.bond_parts(b);
                if reached.contains(&x) {
                    let z = lat.shift(x, mu, 1);
                    omega[z] = omega[x] + eta * a.values[b];
                    reached.insert(z);
                    false
                } else {
                    true
                }
            });
            if pending.len() == before {
                return Err(Error::Precondition("block tree not connected".into()));
            }
        }
    }
    let fixed = a.sub(&crate::fields::gradient(lat, a.level, &omega))?;
    Ok((fixed, omega))
}

/// `Q* A`: mean of `A` over all bonds along each axis.
pub fn toron_average<T: FieldValue>(a: &GaugeField<T>) -> [T; 3] {
    let n = a.lattice.n_sites();
    [0, 1, 2].map(|mu| (0..n).map(|s| a.get(s, mu)).sum::<T>() * (1.0 / n as f64))
}

pub fn toron_matrix(lat: &Lattice) -> Mat {
    let n = lat.n_sites();
    let mut m = Mat::zeros(3, lat.n_bonds());
    for s in 0..n {
        for mu in 0..3 {
            m[(mu, 3 * s + mu)] = 1.0 / n as f64;
        }
    }
    m
}

/// Stiffness sequence `b_1 = b`, `b_{j+1} = b b_j / (b L^{-1} + b_j)`.
pub fn stiffness_sequence(b: f64, l: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    let a = b / l as f64;
    let mut bj = b;
    for _ in 0..k {
        out.push(bj);
        bj = b * bj / (a + bj);
    }
    out
}

/// `delta_G(Psi' - Q Psi) = N exp(-a <Psi-bar' - Q-bar Psi-bar, Psi' - Q Psi>_R)`,
/// with `a = b / L` and the coarse measure `(L eta)^3` in the inner product.
#[derive(Clone, Debug)]
pub struct GaussianDelta {
    pub stiffness: f64,
    pub coarse_measure: f64,
    /// Coarse sites in the region.
    pub region: Vec<usize>,
}

impl GaussianDelta {
    pub fn new(b: f64, l: usize, coarse: &Lattice, region: Vec<usize>) -> Self {
        Self { stiffness: b / l as f64, coarse_measure: coarse.volume_element(), region }
    }

    pub fn dof(&self) -> usize {
        4 * self.region.len()
    }

    /// `log N` with `N = det(a mu I)^{-1}` over the region's components.
    pub fn log_normalization(&self) -> f64 {
        -(self.dof() as f64) * (self.stiffness * self.coarse_measure).ln()
    }

    /// Quadratic form of `delta_G` on `Psi'`.
    pub fn form(&self) -> CMat {
        CMat::identity(self.dof(), self.dof()) * Complex64::new(self.stiffness * self.coarse_measure, 0.0)
    }

    /// `|N det(form) - 1|`, evaluated through the LU determinant of the form.
    pub fn normalization_residual(&self) -> f64 {
        let l = clogdet(&self.form()).re + self.log_normalization();
        l.exp_m1().abs()
    }

    /// The element as a Grassmann exponential over explicit generators.
    ///
    /// `coarse[(y, s)]` and `fine[x]` give generator pairs; `q` is the
    /// `4 n_coarse x 4 n_fine` average.
    pub fn element(
        &self,
        n_gen: usize,
        coarse: &[(usize, usize)],
        fine: &[(usize, usize)],
        q: &CMat,
    ) -> Result<crate::grassmann::GrassmannElement> {
        use crate::grassmann::GrassmannElement as G;
        let mut exponent = G::zero(n_gen);
        for &y in &self.region {
            for s in 0..4 {
                let row = 4 * y + s;
                let (p, pb) = coarse[row];
                let mut u = G::generator(n_gen, p);
                let mut ub = G::generator(n_gen, pb);
                for (col, &(f, fb)) in fine.iter().enumerate() {
                    let w = q[(row, col)];
                    if w != Complex64::new(0.0, 0.0) {
                        u = u.sub(&G::generator(n_gen, f).scale(w));
                        ub = ub.sub(&G::generator(n_gen, fb).scale(w.conj()));
                    }
                }
                exponent = exponent.add(&ub.mul(&u));
            }
        }
        let e = exponent.scale(Complex64::new(-self.stiffness * self.coarse_measure, 0.0)).exp()?;
        Ok(e.scale(Complex64::new(self.log_normalization().exp(), 0.0)))
    }
}
