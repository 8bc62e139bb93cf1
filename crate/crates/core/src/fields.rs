//! Gauge, plaquette and spinor fields on a single lattice level.
//!
//! Gauge fields live on positively oriented bonds and may be real or complex.
//! Inner products carry the measure `eta^3` of the level they live on.

use nalgebra::Matrix4;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Lattice, PLANES};
use crate::linalg::{CMat, Mat};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Scalar types a gauge field may take.
pub trait FieldValue:
    Copy
    + std::fmt::Debug
    + PartialEq
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::Mul<f64, Output = Self>
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self;
    fn from_real(x: f64) -> Self;
    fn to_complex(self) -> Complex64;
    fn modulus(self) -> f64;
}

impl FieldValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_real(x: f64) -> Self {
        x
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl FieldValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn to_complex(self) -> Complex64 {
        self
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

fn check_same(a: &Lattice, b: &Lattice, la: usize, lb: usize) -> Result<()> {
    if la != lb || !a.same_shape(b) {
        return Err(Error::LevelMismatch {
            expected: format!("level {la} {:?}@{}", a.dims(), a.spacing()),
            found: format!("level {lb} {:?}@{}", b.dims(), b.spacing()),
        });
    }
    Ok(())
}

/// Bond field `A(x, mu)`, indexed by `3 * site + mu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeField<T = f64> {
    pub lattice: Lattice,
    pub level: usize,
    pub values: Vec<T>,
}

impl<T: FieldValue> GaugeField<T> {
    pub fn zeros(lattice: &Lattice, level: usize) -> Self {
        Self { lattice: lattice.clone(), level, values: vec![T::zero(); lattice.n_bonds()] }
    }

    pub fn from_values(lattice: &Lattice, level: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != lattice.n_bonds() {
            return Err(Error::InvalidLattice(format!("{} bond values for {} bonds", values.len(), lattice.n_bonds())));
        }
        Ok(Self { lattice: lattice.clone(), level, values })
    }

    /// `A(x, axis) = c` on every bond along `axis`, zero elsewhere.
    pub fn constant(lattice: &Lattice, level: usize, axis: usize, c: T) -> Self {
        let mut f = Self::zeros(lattice, level);
        for s in 0..lattice.n_sites() {
            f.values[3 * s + axis] = c;
        }
        f
    }

    pub fn get(&self, site: usize, axis: usize) -> T {
        self.values[3 * site + axis]
    }

    /// Value on a bond traversed with orientation `sign`.
    pub fn oriented(&self, bond: usize, sign: f64) -> T {
        self.values[bond] * sign
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_same(&self.lattice, &other.lattice, self.level, other.level)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a + b).collect();
        Ok(Self { values, ..self.clone() })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_same(&self.lattice, &other.lattice, self.level, other.level)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect();
        Ok(Self { values, ..self.clone() })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|&a| a * s).collect(), ..self.clone() }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.modulus()))
    }

    pub fn to_complex(&self) -> GaugeField<Complex64> {
        GaugeField {
            lattice: self.lattice.clone(),
            level: self.level,
            values: self.values.iter().map(|v| v.to_complex()).collect(),
        }
    }
}

impl GaugeField<f64> {
    pub fn random(lattice: &Lattice, level: usize, rng: &mut impl Rng, amplitude: f64) -> Self {
        let values = (0..lattice.n_bonds()).map(|_| amplitude * (2.0 * rng.random::<f64>() - 1.0)).collect();
        Self { lattice: lattice.clone(), level, values }
    }

    /// `<A, B> = sum eta^3 A(b) B(b)`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.lattice.volume_element() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }
}

/// Plaquette field `F(x; mu nu)` for `mu < nu`, indexed by `3 * site + plane`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteField<T = f64> {
    pub lattice: Lattice,
    pub level: usize,
    pub values: Vec<T>,
}

impl<T: FieldValue> PlaquetteField<T> {
    pub fn zeros(lattice: &Lattice, level: usize) -> Self {
        Self { lattice: lattice.clone(), level, values: vec![T::zero(); lattice.n_plaquettes()] }
    }

    pub fn from_values(lattice: &Lattice, level: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != lattice.n_plaquettes() {
            return Err(Error::InvalidLattice(format!("{} plaquette values", values.len())));
        }
        Ok(Self { lattice: lattice.clone(), level, values })
    }

    /// `F(x; mu nu)` with `F(x; nu mu) = -F(x; mu nu)` and `F(x; mu mu) = 0`.
    pub fn oriented(&self, site: usize, mu: usize, nu: usize) -> T {
        match crate::lattice::plane_index(mu, nu) {
            None => T::zero(),
            Some(p) if mu < nu => self.values[3 * site + p],
            Some(p) => -self.values[3 * site + p],
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.modulus()))
    }
}

impl PlaquetteField<f64> {
    pub fn dot(&self, other: &Self) -> f64 {
        self.lattice.volume_element() * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }
}

/// `dA(p) = eta^{-1} (A(x,mu) + A(x+mu,nu) - A(x+nu,mu) - A(x,nu))`.
pub fn exterior_d<T: FieldValue>(a: &GaugeField<T>) -> PlaquetteField<T> {
    let lat = &a.lattice;
    let inv = 1.0 / lat.spacing();
    let values = (0..lat.n_plaquettes())
        .map(|p| lat.plaquette_boundary(p).iter().map(|&(b, s)| a.values[b] * s).sum::<T>() * inv)
        .collect();
    PlaquetteField { lattice: lat.clone(), level: a.level, values }
}

/// Matrix of `d` acting on bond vectors, including the `eta^{-1}` factor.
pub fn exterior_d_matrix(lat: &Lattice) -> Mat {
    let mut m = Mat::zeros(lat.n_plaquettes(), lat.n_bonds());
    let inv = 1.0 / lat.spacing();
    for p in 0..lat.n_plaquettes() {
        for (b, s) in lat.plaquette_boundary(p) {
            m[(p, b)] += s * inv;
        }
    }
    m
}

/// Lattice gradient `(d omega)(x, mu) = eta^{-1}(omega(x + mu) - omega(x))`.
pub fn gradient(lat: &Lattice, level: usize, omega: &[f64]) -> GaugeField<f64> {
    let inv = 1.0 / lat.spacing();
    let mut a = GaugeField::zeros(lat, level);
    for s in 0..lat.n_sites() {
        for mu in 0..3 {
            a.values[3 * s + mu] = inv * (omega[lat.shift(s, mu, 1)] - omega[s]);
        }
    }
    a
}

pub fn gradient_matrix(lat: &Lattice) -> Mat {
    let inv = 1.0 / lat.spacing();
    let mut m = Mat::zeros(lat.n_bonds(), lat.n_sites());
    for s in 0..lat.n_sites() {
        for mu in 0..3 {
            m[(3 * s + mu, lat.shift(s, mu, 1))] += inv;
            m[(3 * s + mu, s)] -= inv;
        }
    }
    m
}

/// Four-component spinors, indexed by `4 * site + spin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinorField {
    pub lattice: Lattice,
    pub level: usize,
    /// True for the conjugate field `psi-bar`.
    pub conjugate: bool,
    pub values: Vec<Complex64>,
}

impl SpinorField {
    pub fn zeros(lattice: &Lattice, level: usize) -> Self {
        Self { lattice: lattice.clone(), level, conjugate: false, values: vec![Complex64::new(0.0, 0.0); 4 * lattice.n_sites()] }
    }

    pub fn from_values(lattice: &Lattice, level: usize, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != 4 * lattice.n_sites() {
            return Err(Error::InvalidLattice(format!("{} spinor components", values.len())));
        }
        Ok(Self { lattice: lattice.clone(), level, conjugate: false, values })
    }

    pub fn random(lattice: &Lattice, level: usize, rng: &mut impl Rng) -> Self {
        let values = (0..4 * lattice.n_sites())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        Self { lattice: lattice.clone(), level, conjugate: false, values }
    }

    pub fn at(&self, site: usize) -> [Complex64; 4] {
        [0, 1, 2, 3].map(|a| self.values[4 * site + a])
    }

    /// `<f, g> = sum eta^3 conj(f) g`.
    pub fn dot(&self, other: &SpinorField) -> Complex64 {
        let s: Complex64 = self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum();
        s * self.lattice.volume_element()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).re.sqrt()
    }

    pub fn as_vector(&self) -> crate::linalg::CVector {
        crate::linalg::CVector::from_column_slice(&self.values)
    }
}

/// Hermitian Euclidean gamma matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaRep {
    pub gamma: [Matrix4<Complex64>; 3],
}

impl Default for GammaRep {
    fn default() -> Self {
        Self::standard()
    }
}

impl GammaRep {
    /// `gamma_mu = sigma_mu (x) sigma_3`.
    pub fn standard() -> Self {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let z = c(0.0, 0.0);
        let sigma = [
            [[z, c(1.0, 0.0)], [c(1.0, 0.0), z]],
            [[z, c(0.0, -1.0)], [c(0.0, 1.0), z]],
            [[c(1.0, 0.0), z], [z, c(-1.0, 0.0)]],
        ];
        let s3 = sigma[2];
        let gamma = [0, 1, 2].map(|mu| {
            Matrix4::from_fn(|r, col| sigma[mu][r / 2][col / 2] * s3[r % 2][col % 2])
        });
        Self { gamma }
    }

    /// Largest deviation from `{gamma_mu, gamma_nu} = 2 delta` and hermiticity.
    pub fn clifford_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for mu in 0..3 {
            let h = self.gamma[mu] - self.gamma[mu].adjoint();
            worst = worst.max(h.norm());
            for nu in 0..3 {
                let ac = self.gamma[mu] * self.gamma[nu] + self.gamma[nu] * self.gamma[mu];
                let target = if mu == nu { Matrix4::identity() * Complex64::new(2.0, 0.0) } else { Matrix4::zeros() };
                worst = worst.max((ac - target).norm());
            }
        }
        worst
    }
}

/// `D_A + mbar` as a dense matrix, with
/// `D_A = gamma . grad^sym_A - (eta/2) Lap_A`.
///
/// The forward hop `f(x + mu)` carries `exp(i e eta A(x, mu))`.
#[derive(Clone, Debug)]
pub struct DiracOperator {
    pub lattice: Lattice,
    pub level: usize,
    pub matrix: CMat,
}

impl DiracOperator {
    pub fn new<T: FieldValue>(a: &GaugeField<T>, e: f64, mass: f64) -> Self {
        let lat = &a.lattice;
        let eta = lat.spacing();
        let n = lat.n_sites();
        let g = GammaRep::standard();
        let mut m = CMat::zeros(4 * n, 4 * n);
        let diag = Complex64::new(3.0 / eta + mass, 0.0);
        for x in 0..n {
            for s in 0..4 {
                m[(4 * x + s, 4 * x + s)] += diag;
            }
            for mu in 0..3 {
                let fwd = lat.shift(x, mu, 1);
                let bwd = lat.shift(x, mu, -1);
                let uf = (I * e * eta * a.get(x, mu).to_complex()).exp();
                let ub = (-I * e * eta * a.get(bwd, mu).to_complex()).exp();
                for r in 0..4 {
                    for c in 0..4 {
                        let gm = g.gamma[mu][(r, c)];
                        let id = if r == c { 1.0 } else { 0.0 };
                        m[(4 * x + r, 4 * fwd + c)] += uf * (gm - id) / (2.0 * eta);
                        m[(4 * x + r, 4 * bwd + c)] += ub * (-gm - id) / (2.0 * eta);
                    }
                }
            }
        }
        Self { lattice: lat.clone(), level: a.level, matrix: m }
    }

    pub fn free(lat: &Lattice, level: usize, mass: f64) -> Self {
        Self::new(&GaugeField::<f64>::zeros(lat, level), 0.0, mass)
    }

    pub fn apply(&self, f: &SpinorField) -> Result<SpinorField> {
        check_same(&self.lattice, &f.lattice, self.level, f.level)?;
        let v = &self.matrix * f.as_vector();
        Ok(SpinorField { values: v.iter().copied().collect(), ..f.clone() })
    }
}

/// Real site matrices `grad^sym_mu` and `W = -(eta/2) Lap + mass` of the free operator.
fn free_parts(lat: &Lattice, mass: f64) -> ([Mat; 3], Mat) {
    let n = lat.n_sites();
    let eta = lat.spacing();
    let mut grads = [Mat::zeros(n, n), Mat::zeros(n, n), Mat::zeros(n, n)];
    let mut w = Mat::zeros(n, n);
    for x in 0..n {
        w[(x, x)] += 3.0 / eta + mass;
        for mu in 0..3 {
            let f = lat.shift(x, mu, 1);
            let b = lat.shift(x, mu, -1);
            grads[mu][(x, f)] += 0.5 / eta;
            grads[mu][(x, b)] -= 0.5 / eta;
            w[(x, f)] -= 0.5 / eta;
            w[(x, b)] -= 0.5 / eta;
        }
    }
    (grads, w)
}

/// `D_0^dagger D_0 = -sum_mu (grad^sym_mu)^2 + W^2`, acting on each spin component.
pub fn free_dirac_normal(lat: &Lattice, mass: f64) -> Mat {
    let (g, w) = free_parts(lat, mass);
    let mut m = &w * &w;
    for gm in &g {
        m -= gm * gm;
    }
    m
}

/// `(D_0 + mass)^{-1}` from `D^{-1} = (D^dagger D)^{-1} D^dagger`.
pub fn free_dirac_inverse(lat: &Lattice, mass: f64) -> Result<CMat> {
    let (g, w) = free_parts(lat, mass);
    let mut normal = &w * &w;
    for gm in &g {
        normal -= gm * gm;
    }
    let ninv = crate::linalg::inverse(&normal)?;
    let gam = GammaRep::standard();
    let n = lat.n_sites();
    let nw = &ninv * &w;
    let ng: Vec<Mat> = g.iter().map(|gm| &ninv * gm).collect();
    let mut out = CMat::zeros(4 * n, 4 * n);
    for x in 0..n {
        for y in 0..n {
            for r in 0..4 {
                for c in 0..4 {
                    let mut v = Complex64::new(if r == c { nw[(x, y)] } else { 0.0 }, 0.0);
                    for mu in 0..3 {
                        v -= gam.gamma[mu][(r, c)] * ng[mu][(x, y)];
                    }
                    out[(4 * x + r, 4 * y + c)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// `exp(i e sum_{b in path} eta A(b))` along a chain of neighbouring sites.
pub fn transport_phase<T: FieldValue>(a: &GaugeField<T>, e: f64, path: &[usize]) -> Result<Complex64> {
    let lat = &a.lattice;
    let mut s = Complex64::new(0.0, 0.0);
    for (i, w) in path.windows(2).enumerate() {
        let (b, sign) = lat.oriented_bond(w[0], w[1]).ok_or(Error::BrokenPath(i))?;
        s += a.values[b].to_complex() * sign;
    }
    Ok((I * e * lat.spacing() * s).exp())
}

/// Shortest path from `x` to `y`, moving along axis 0 first, then 1, then 2.
pub fn lexicographic_path(lat: &Lattice, x: usize, y: usize) -> Vec<usize> {
    let d = lat.displacement(x, y);
    let mut path = vec![x];
    let mut cur = x;
    for (mu, &dm) in d.iter().enumerate() {
        for _ in 0..dm.unsigned_abs() {
            cur = lat.shift(cur, mu, dm.signum() as isize);
            path.push(cur);
        }
    }
    path
}

/// Sites within physical distance `< 1` of `x`, excluding `x`.
pub fn holder_pairs(lat: &Lattice) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for x in 0..lat.n_sites() {
        for y in 0..lat.n_sites() {
            if x == y {
                continue;
            }
            let d = lat.displacement(x, y);
            let r = lat.spacing() * ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt();
            if r < 1.0 {
                out.push((x, y));
            }
        }
    }
    out
}

/// `(psi(x) - U_{xy} psi(y)) / |x - y|^alpha` for each requested pair.
pub fn holder_difference(
    psi: &SpinorField,
    alpha: f64,
    gauge: Option<(&GaugeField<f64>, f64)>,
    pairs: &[(usize, usize)],
) -> Result<Vec<[Complex64; 4]>> {
    let lat = &psi.lattice;
    let mut out = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        let d = lat.displacement(x, y);
        let r = lat.spacing() * ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt();
        if !(r < 1.0) || x == y {
            return Err(Error::Precondition(format!("pair ({x},{y}) at distance {r}")));
        }
        let u = match gauge {
            Some((a, e)) => transport_phase(a, e, &lexicographic_path(lat, x, y))?,
            None => Complex64::new(1.0, 0.0),
        };
        let w = r.powf(-alpha);
        let px = psi.at(x);
        let py = psi.at(y);
        out.push([0, 1, 2, 3].map(|s| (px[s] - u * py[s]) * w));
    }
    Ok(out)
}

/// `A_L(b) = L^{-1/2} A(b / L)`: same indices, spacing multiplied by `L`.
pub fn scale_gauge<T: FieldValue>(a: &GaugeField<T>, l: usize) -> Result<GaugeField<T>> {
    let lat = Lattice::new(a.lattice.dims(), a.lattice.spacing() * l as f64)?;
    let s = (l as f64).powf(-0.5);
    Ok(GaugeField { lattice: lat, level: a.level, values: a.values.iter().map(|&v| v * s).collect() })
}

pub fn unscale_gauge<T: FieldValue>(a: &GaugeField<T>, l: usize) -> Result<GaugeField<T>> {
    let lat = Lattice::new(a.lattice.dims(), a.lattice.spacing() / l as f64)?;
    let s = (l as f64).sqrt();
    Ok(GaugeField { lattice: lat, level: a.level, values: a.values.iter().map(|&v| v * s).collect() })
}

/// `Psi_L(x) = L^{-1} Psi(x / L)`.
pub fn scale_fermion(psi: &SpinorField, l: usize) -> Result<SpinorField> {
    let lat = Lattice::new(psi.lattice.dims(), psi.lattice.spacing() * l as f64)?;
    let s = 1.0 / l as f64;
    Ok(SpinorField { lattice: lat, values: psi.values.iter().map(|v| v * s).collect(), ..psi.clone() })
}

pub fn unscale_fermion(psi: &SpinorField, l: usize) -> Result<SpinorField> {
    let lat = Lattice::new(psi.lattice.dims(), psi.lattice.spacing() / l as f64)?;
    let s = l as f64;
    Ok(SpinorField { lattice: lat, values: psi.values.iter().map(|v| v * s).collect(), ..psi.clone() })
}

const MAGIC: &[u8; 4] = b"BRGF";

/// Kinds tagged in the binary field header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FieldKind {
    Gauge = 1,
    Plaquette = 2,
    Spinor = 3,
    SpinorBar = 4,
    ComplexGauge = 5,
}

fn header(kind: FieldKind, level: usize, lat: &Lattice, count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 8 * count);
    out.extend_from_slice(MAGIC);
    out.push(kind as u8);
    out.extend_from_slice(&(level as u32).to_le_bytes());
    for d in lat.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&lat.spacing().to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| Error::Serialization("truncated field".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decoded field payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RawField {
    pub kind: FieldKind,
    pub level: usize,
    pub lattice: Lattice,
    pub data: Vec<f64>,
}

pub fn decode_field(bytes: &[u8]) -> Result<RawField> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Serialization("bad magic".into()));
    }
    let kind = match r.take(1)?[0] {
        1 => FieldKind::Gauge,
        2 => FieldKind::Plaquette,
        3 => FieldKind::Spinor,
        4 => FieldKind::SpinorBar,
        5 => FieldKind::ComplexGauge,
        k => return Err(Error::Serialization(format!("unknown kind {k}"))),
    };
    let level = r.u32()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = r.f64()?;
    let lattice = Lattice::new(dims, spacing)?;
    let count = r.u64()? as usize;
    let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Serialization("trailing bytes".into()));
    }
    Ok(RawField { kind, level, lattice, data })
}

impl GaugeField<f64> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(FieldKind::Gauge, self.level, &self.lattice, self.values.len());
        self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode_field(bytes)?;
        if raw.kind != FieldKind::Gauge {
            return Err(Error::Serialization(format!("expected gauge field, found {:?}", raw.kind)));
        }
        Self::from_values(&raw.lattice, raw.level, raw.data)
    }
}

impl PlaquetteField<f64> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(FieldKind::Plaquette, self.level, &self.lattice, self.values.len());
        self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode_field(bytes)?;
        if raw.kind != FieldKind::Plaquette {
            return Err(Error::Serialization(format!("expected plaquette field, found {:?}", raw.kind)));
        }
        Self::from_values(&raw.lattice, raw.level, raw.data)
    }
}

impl SpinorField {
    pub fn to_bytes(&self) -> Vec<u8> {
        let kind = if self.conjugate { FieldKind::SpinorBar } else { FieldKind::Spinor };
        let mut out = header(kind, self.level, &self.lattice, 2 * self.values.len());
        for v in &self.values {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode_field(bytes)?;
        let conjugate = match raw.kind {
            FieldKind::Spinor => false,
            FieldKind::SpinorBar => true,
            k => return Err(Error::Serialization(format!("expected spinor, found {k:?}"))),
        };
        let values = raw.data.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
        let mut f = Self::from_values(&raw.lattice, raw.level, values)?;
        f.conjugate = conjugate;
        Ok(f)
    }
}

/// Oriented plaquette boundary used by callers that need the axis pair.
pub fn plane_axes(plane: usize) -> (usize, usize) {
    PLANES[plane]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat(n: usize, eta: f64) -> Lattice {
        Lattice::cubic(n, eta).unwrap()
    }

    #[test]
    fn d_of_gradient_vanishes() {
        let l = lat(3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let omega: Vec<f64> = (0..27).map(|_| rng.random()).collect();
        let f = exterior_d(&gradient(&l, 0, &omega));
        assert!(f.sup_norm() < 1e-12);
        let c = exterior_d(&GaugeField::constant(&l, 0, 1, 2.5));
        assert!(c.sup_norm() < 1e-14);
    }

    #[test]
    fn single_bond_touches_four_plaquettes() {
        let l = lat(2, 1.0);
        let mut a = GaugeField::<f64>::zeros(&l, 0);
        a.values[0] = 1.0;
        let f = exterior_d(&a);
        let nz: Vec<f64> = f.values.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nz.len(), 4);
        assert_eq!(nz.iter().filter(|v| **v > 0.0).count(), 2);
    }

    #[test]
    fn gammas_satisfy_clifford() {
        assert!(GammaRep::standard().clifford_defect() < 1e-15);
    }

    #[test]
    fn free_dirac_kills_constants() {
        let l = lat(3, 0.5);
        let d = DiracOperator::free(&l, 0, 0.0);
        let c = SpinorField::from_values(&l, 0, (0..108).map(|i| Complex64::new((i % 4) as f64, 1.0)).collect()).unwrap();
        let out = d.apply(&c).unwrap();
        assert!(out.values.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn gauge_covariance() {
        let l = lat(2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = GaugeField::random(&l, 0, &mut rng, 1.0);
        let omega: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let e = 0.7;
        let shifted = a.sub(&gradient(&l, 0, &omega)).unwrap();
        let lhs = DiracOperator::new(&shifted, e, 0.3).matrix;
        let d = DiracOperator::new(&a, e, 0.3).matrix;
        let n = 32;
        let phase = |s: f64| CMat::from_fn(n, n, |r, c| if r == c { (I * s * e * omega[r / 4]).exp() } else { Complex64::new(0.0, 0.0) });
        let rhs = phase(1.0) * d * phase(-1.0);
        assert!(crate::linalg::cmax_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn free_inverse_matches_dense() {
        let l = lat(2, 0.5);
        let d = DiracOperator::free(&l, 0, 0.8).matrix;
        let inv = free_dirac_inverse(&l, 0.8).unwrap();
        let id = &d * &inv;
        assert!(crate::linalg::cmax_abs_diff(&id, &CMat::identity(32, 32)) < 1e-12);
    }

    #[test]
    fn plaquette_transport() {
        let l = lat(3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = GaugeField::random(&l, 0, &mut rng, 1.0);
        let x = 0;
        let path = [x, l.shift(x, 0, 1), l.shift(l.shift(x, 0, 1), 1, 1), l.shift(x, 1, 1), x];
        let u = transport_phase(&a, 0.4, &path).unwrap();
        let f = exterior_d(&a);
        let expected = (I * 0.4 * 0.25 * f.values[0]).exp();
        assert!((u - expected).norm() < 1e-12);
        assert_eq!(transport_phase(&a, 0.4, &[0, 13]), Err(Error::BrokenPath(0)));
    }

    #[test]
    fn holder_linear_profile() {
        let l = Lattice::new([8, 1, 1], 0.25).unwrap();
        let vals = (0..8).flat_map(|x| [Complex64::new(x as f64 * 0.25, 0.0); 4]).collect();
        let psi = SpinorField::from_values(&l, 0, vals).unwrap();
        let pairs = [(2, 3), (2, 4), (5, 4)];
        let d = holder_difference(&psi, 1.0, None, &pairs).unwrap();
        for (v, s) in d.iter().zip([-1.0, -1.0, 1.0]) {
            assert!((v[0].re - s).abs() < 1e-12);
        }
        assert!(holder_difference(&psi, 1.0, None, &[(0, 4)]).is_err());
    }

    #[test]
    fn scaling_round_trip_and_action() {
        let l = lat(2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = GaugeField::random(&l, 0, &mut rng, 1.0);
        let s = scale_gauge(&a, 2).unwrap();
        assert!((exterior_d(&s).norm_sq() - exterior_d(&a).norm_sq()).abs() < 1e-12);
        let back = unscale_gauge(&s, 2).unwrap();
        assert!(back.values.iter().zip(&a.values).all(|(x, y)| (x - y).abs() < 1e-15));
        let c = scale_gauge(&GaugeField::constant(&l, 0, 0, 1.0), 4).unwrap();
        assert!((c.values[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn binary_round_trip() {
        let l = lat(2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = GaugeField::random(&l, 2, &mut rng, 3.0);
        assert_eq!(GaugeField::from_bytes(&a.to_bytes()).unwrap(), a);
        let mut p = SpinorField::random(&l, 1, &mut rng);
        p.conjugate = true;
        assert_eq!(SpinorField::from_bytes(&p.to_bytes()).unwrap(), p);
        assert!(GaugeField::from_bytes(&p.to_bytes()).is_err());
    }
}
