//! Periodic cubic lattices at nested scales.
//!
//! A [`Lattice`] is a single three dimensional torus with an integer extent
//! per axis and a physical spacing. Sites are numbered `x + nx * (y + ny * z)`.
//! Bonds and plaquettes are attached to their base site: bond `3 * site + mu`
//! points from `site` to `site + e_mu`, plaquette `3 * site + plane` spans the
//! axes listed in [`PLANES`].
//!
//! Blocks of ratio `L` are anchored at their lowest corner, so the coarse site
//! `y` owns the fine sites `L y + a` with `0 <= a_i < L`.

mod region;
mod steiner;

pub use region::{annuli, check_separation, CubeGrid, Region, SeparationLevel};
pub use steiner::{
    decay_sum, enumerate_animals, enumerate_polymers, enumerate_polymers_containing, tree_distance,
    Animal, SteinerCache, TreeDistance, MAX_EXACT_STEINER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis pairs spanned by the three plaquette orientations.
pub const PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Plane index for an unordered axis pair.
pub fn plane_index(mu: usize, nu: usize) -> Option<usize> {
    let (a, b) = if mu < nu { (mu, nu) } else { (nu, mu) };
    PLANES.iter().position(|&p| p == (a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    dims: [usize; 3],
    spacing: f64,
}

impl Lattice {
    pub fn new(dims: [usize; 3], spacing: f64) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidLattice(format!("zero extent in {dims:?}")));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidLattice(format!("spacing {spacing}")));
        }
        Ok(Self { dims, spacing })
    }

    pub fn cubic(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], spacing)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Measure weight `eta^3` of a single site.
    pub fn volume_element(&self) -> f64 {
        self.spacing.powi(3)
    }

    pub fn n_sites(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_bonds(&self) -> usize {
        3 * self.n_sites()
    }

    pub fn n_plaquettes(&self) -> usize {
        3 * self.n_sites()
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] % self.dims[0] + self.dims[0] * (c[1] % self.dims[1] + self.dims[1] * (c[2] % self.dims[2]))
    }

    /// Index of a site given signed coordinates, wrapped onto the torus.
    pub fn index_wrapped(&self, c: [i64; 3]) -> usize {
        let w = |v: i64, n: usize| v.rem_euclid(n as i64) as usize;
        self.index([w(c[0], self.dims[0]), w(c[1], self.dims[1]), w(c[2], self.dims[2])])
    }

    pub fn coords(&self, site: usize) -> [usize; 3] {
        let x = site % self.dims[0];
        let r = site / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    pub fn shift(&self, site: usize, axis: usize, steps: isize) -> usize {
        let mut c = self.coords(site);
        let n = self.dims[axis] as isize;
        c[axis] = (c[axis] as isize + steps).rem_euclid(n) as usize;
        self.index(c)
    }

    pub fn bond(&self, site: usize, axis: usize) -> usize {
        3 * site + axis
    }

    /// `(base site, axis)` of a bond.
    pub fn bond_parts(&self, bond: usize) -> (usize, usize) {
        (bond / 3, bond % 3)
    }

    pub fn plaquette(&self, site: usize, plane: usize) -> usize {
        3 * site + plane
    }

    pub fn plaquette_parts(&self, p: usize) -> (usize, usize) {
        (p / 3, p % 3)
    }

    /// Oriented boundary of a plaquette: `+(x,mu) +(x+mu,nu) -(x+nu,mu) -(x,nu)`.
    pub fn plaquette_boundary(&self, p: usize) -> [(usize, f64); 4] {
        let (x, plane) = self.plaquette_parts(p);
        let (mu, nu) = PLANES[plane];
        let xm = self.shift(x, mu, 1);
        let xn = self.shift(x, nu, 1);
        [
            (self.bond(x, mu), 1.0),
            (self.bond(xm, nu), 1.0),
            (self.bond(xn, mu), -1.0),
            (self.bond(x, nu), -1.0),
        ]
    }

    /// Bond joining two nearest neighbours with its orientation sign.
    ///
    /// On an axis of extent 2 both directions reach the same site; the
    /// forward bond is preferred.
    pub fn oriented_bond(&self, from: usize, to: usize) -> Option<(usize, f64)> {
        for axis in 0..3 {
            if self.shift(from, axis, 1) == to {
                return Some((self.bond(from, axis), 1.0));
            }
            if self.shift(from, axis, -1) == to {
                return Some((self.bond(to, axis), -1.0));
            }
        }
        None
    }

    /// Physical position of a site, in `[0, extent)`.
    pub fn position(&self, site: usize) -> [f64; 3] {
        let c = self.coords(site);
        [0, 1, 2].map(|i| c[i] as f64 * self.spacing)
    }

    /// Minimal-image displacement `b - a` in lattice units.
    pub fn displacement(&self, a: usize, b: usize) -> [i64; 3] {
        let ca = self.coords(a);
        let cb = self.coords(b);
        [0, 1, 2].map(|i| wrap_delta(cb[i] as i64 - ca[i] as i64, self.dims[i]))
    }

    /// Lattice with spacing `l * eta` and extent divided by `l`.
    pub fn coarsen(&self, l: usize) -> Result<Lattice> {
        if l < 2 || self.dims.iter().any(|&n| n % l != 0) {
            return Err(Error::ScaleMismatch(format!("{:?} not divisible by block ratio {l}", self.dims)));
        }
        Lattice::new(self.dims.map(|n| n / l), self.spacing * l as f64)
    }

    pub fn refine(&self, l: usize) -> Result<Lattice> {
        if l < 1 {
            return Err(Error::ScaleMismatch("refinement ratio 0".into()));
        }
        Lattice::new(self.dims.map(|n| n * l), self.spacing / l as f64)
    }

    /// Coarse site whose block contains `site`.
    pub fn block_of(&self, site: usize, l: usize) -> usize {
        let c = self.coords(site);
        let cd = self.dims.map(|n| n / l);
        let b = c.map(|v| v / l);
        b[0] + cd[0] * (b[1] + cd[1] * b[2])
    }

    /// Fine sites of the block with coarse index `coarse`.
    pub fn block_sites(&self, coarse: usize, l: usize) -> Vec<usize> {
        let cd = self.dims.map(|n| n / l);
        let y = [coarse % cd[0], (coarse / cd[0]) % cd[1], coarse / (cd[0] * cd[1])];
        let mut out = Vec::with_capacity(l * l * l);
        for c in 0..l {
            for b in 0..l {
                for a in 0..l {
                    out.push(self.index([l * y[0] + a, l * y[1] + b, l * y[2] + c]));
                }
            }
        }
        out
    }

    /// Fine site at the base corner of a coarse block.
    pub fn block_corner(&self, coarse: usize, l: usize) -> usize {
        let cd = self.dims.map(|n| n / l);
        let y = [coarse % cd[0], (coarse / cd[0]) % cd[1], coarse / (cd[0] * cd[1])];
        self.index(y.map(|v| v * l))
    }

    pub fn same_shape(&self, other: &Lattice) -> bool {
        self.dims == other.dims && (self.spacing - other.spacing).abs() <= 1e-12 * self.spacing
    }

    pub fn physical_extent(&self) -> [f64; 3] {
        self.dims.map(|n| n as f64 * self.spacing)
    }
}

pub(crate) fn wrap_delta(d: i64, n: usize) -> i64 {
    let n = n as i64;
    let mut r = d.rem_euclid(n);
    if 2 * r > n {
        r -= n;
    }
    r
}

/// Nested tori `T^{-j}_{N-k}` for `j = 0..=k`.
///
/// The unit lattice carries `L^{N-k}` cells per axis (or an explicit
/// anisotropic extent); level `j` refines it by `L^{k-j}` with spacing
/// `L^{-(k-j)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleTorus {
    l: usize,
    unit_dims: [usize; 3],
    k: usize,
}

impl MultiscaleTorus {
    pub fn new(l: usize, depth: usize, k: usize) -> Result<Self> {
        if k > depth {
            return Err(Error::Precondition(format!("step {k} beyond depth {depth}")));
        }
        let side = l.checked_pow((depth - k) as u32).ok_or_else(|| Error::InvalidLattice("extent overflow".into()))?;
        Self::with_unit_dims(l, [side; 3], k)
    }

    pub fn with_unit_dims(l: usize, unit_dims: [usize; 3], k: usize) -> Result<Self> {
        if l < 2 {
            return Err(Error::InvalidLattice(format!("block ratio {l} < 2")));
        }
        if unit_dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidLattice(format!("unit extent {unit_dims:?}")));
        }
        Ok(Self { l, unit_dims, k })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn unit_dims(&self) -> [usize; 3] {
        self.unit_dims
    }

    pub fn spacing(&self, j: usize) -> f64 {
        (self.l as f64).powi(-((self.k - j) as i32))
    }

    pub fn level(&self, j: usize) -> Result<Lattice> {
        if j > self.k {
            return Err(Error::LevelMismatch { expected: format!("0..={}", self.k), found: j.to_string() });
        }
        let f = self.l.pow((self.k - j) as u32);
        Lattice::new(self.unit_dims.map(|n| n * f), self.spacing(j))
    }

    /// The finest level `T^{-k}` where the original fields live.
    pub fn finest(&self) -> Lattice {
        self.level(0).expect("level 0 exists")
    }

    /// The unit lattice `T^0` at level `k`.
    pub fn unit(&self) -> Lattice {
        self.level(self.k).expect("level k exists")
    }

    /// Scale this torus by `L`: the level-`k+1` unit lattice becomes the next
    /// step's finest level.
    pub fn next_step(&self) -> Result<Self> {
        if self.unit_dims.iter().any(|&n| n % self.l != 0) {
            return Err(Error::ScaleMismatch("unit lattice not divisible by L".into()));
        }
        Self::with_unit_dims(self.l, self.unit_dims.map(|n| n / self.l), self.k + 1)
    }
}

/// Kind of an oriented lattice cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Site,
    Bond { axis: usize },
    Plaquette { plane: usize },
}

/// A site, bond or plaquette in canonical (positive) orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub kind: CellKind,
    pub base: usize,
    pub sign: i8,
}

impl Cell {
    pub fn site(base: usize) -> Self {
        Cell { kind: CellKind::Site, base, sign: 1 }
    }

    /// Bond leaving `from` along `axis` with `forward = false` meaning the
    /// bond entering `from` traversed backwards.
    pub fn bond(lat: &Lattice, from: usize, axis: usize, forward: bool) -> Self {
        if forward {
            Cell { kind: CellKind::Bond { axis }, base: from, sign: 1 }
        } else {
            Cell { kind: CellKind::Bond { axis }, base: lat.shift(from, axis, -1), sign: -1 }
        }
    }

    /// Plaquette spanned by ordered axes `(mu, nu)`; reversing them flips sign.
    pub fn plaquette(base: usize, mu: usize, nu: usize) -> Option<Self> {
        let plane = plane_index(mu, nu)?;
        let sign = if mu < nu { 1 } else { -1 };
        Some(Cell { kind: CellKind::Plaquette { plane }, base, sign })
    }

    pub fn reversed(self) -> Self {
        match self.kind {
            CellKind::Site => self,
            _ => Cell { sign: -self.sign, ..self },
        }
    }

    /// Flat array index within its kind.
    pub fn index(&self) -> usize {
        match self.kind {
            CellKind::Site => self.base,
            CellKind::Bond { axis } => 3 * self.base + axis,
            CellKind::Plaquette { plane } => 3 * self.base + plane,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let lat = Lattice::new([3, 4, 5], 0.5).unwrap();
        for s in 0..lat.n_sites() {
            assert_eq!(lat.index(lat.coords(s)), s);
        }
    }

    #[test]
    fn shift_wraps() {
        let lat = Lattice::cubic(4, 1.0).unwrap();
        let s = lat.index([3, 0, 0]);
        assert_eq!(lat.shift(s, 0, 1), lat.index([0, 0, 0]));
        assert_eq!(lat.shift(0, 2, -1), lat.index([0, 0, 3]));
    }

    #[test]
    fn multiscale_counts() {
        let t = MultiscaleTorus::new(2, 3, 1).unwrap();
        assert_eq!(t.level(1).unwrap().n_sites(), 64);
        assert_eq!(t.level(0).unwrap().n_sites(), 512);
        assert!((t.spacing(0) - 0.5).abs() < 1e-15);
        assert!(t.level(2).is_err());
    }

    #[test]
    fn blocks_partition_sites() {
        let lat = Lattice::cubic(4, 1.0).unwrap();
        let mut seen = vec![false; lat.n_sites()];
        for y in 0..8 {
            for s in lat.block_sites(y, 2) {
                assert!(!seen[s]);
                seen[s] = true;
                assert_eq!(lat.block_of(s, 2), y);
            }
        }
        assert!(seen.into_iter().all(|b| b));
    }

    #[test]
    fn plaquette_cell_orientation() {
        let p = Cell::plaquette(5, 2, 0).unwrap();
        assert_eq!(p.sign, -1);
        assert_eq!(p.reversed().sign, 1);
        let lat = Lattice::cubic(3, 1.0).unwrap();
        let b = Cell::bond(&lat, 0, 1, false);
        assert_eq!(b.base, lat.index([0, 2, 0]));
    }

    #[test]
    fn displacement_is_minimal_image() {
        let lat = Lattice::cubic(5, 1.0).unwrap();
        assert_eq!(lat.displacement(lat.index([0, 0, 0]), lat.index([4, 3, 2])), [-1, -2, 2]);
    }
}
