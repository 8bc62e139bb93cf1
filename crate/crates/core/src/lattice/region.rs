use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{wrap_delta, Lattice};
use crate::error::{Error, Result};

/// Partition of a torus into cubes of a fixed physical side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeGrid {
    pub dims: [usize; 3],
    pub side: f64,
}

impl CubeGrid {
    pub fn new(dims: [usize; 3], side: f64) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) || !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidLattice(format!("cube grid {dims:?} side {side}")));
        }
        Ok(Self { dims, side })
    }

    pub fn cubic(n: usize, side: f64) -> Result<Self> {
        Self::new([n; 3], side)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: [i64; 3]) -> usize {
        let w = |v: i64, n: usize| v.rem_euclid(n as i64) as usize;
        let d = self.dims;
        w(c[0], d[0]) + d[0] * (w(c[1], d[1]) + d[1] * w(c[2], d[2]))
    }

    pub fn coords(&self, i: usize) -> [i64; 3] {
        let d = self.dims;
        [(i % d[0]) as i64, ((i / d[0]) % d[1]) as i64, (i / (d[0] * d[1])) as i64]
    }

    pub fn extent(&self) -> [f64; 3] {
        self.dims.map(|n| n as f64 * self.side)
    }

    /// Minimal-image displacement between cube indices.
    pub fn displacement(&self, a: usize, b: usize) -> [i64; 3] {
        let ca = self.coords(a);
        let cb = self.coords(b);
        [0, 1, 2].map(|i| wrap_delta(cb[i] - ca[i], self.dims[i]))
    }

    /// Wrap-aware Chebyshev distance in cube units.
    pub fn chebyshev(&self, a: usize, b: usize) -> i64 {
        self.displacement(a, b).iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// Cubes sharing at least a corner with `c`, excluding `c`.
    pub fn neighbors(&self, c: usize) -> Vec<usize> {
        let p = self.coords(c);
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let q = self.index([p[0] + dx, p[1] + dy, p[2] + dz]);
                    if q != c {
                        out.push(q);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn same_torus(&self, other: &CubeGrid) -> bool {
        let a = self.extent();
        let b = other.extent();
        (0..3).all(|i| (a[i] - b[i]).abs() <= 1e-9 * a[i].max(1.0))
    }

    /// Integer ratio `self.side / finer.side`, if the grids are nested.
    pub fn refinement_ratio(&self, finer: &CubeGrid) -> Option<usize> {
        if !self.same_torus(finer) {
            return None;
        }
        let r = self.side / finer.side;
        let ri = r.round();
        if ri >= 1.0 && (r - ri).abs() <= 1e-9 * r {
            Some(ri as usize)
        } else {
            None
        }
    }

    /// Finest grid refining every grid in the list.
    pub fn common_refinement(grids: &[CubeGrid]) -> Result<CubeGrid> {
        let finest = grids
            .iter()
            .copied()
            .min_by(|a, b| a.side.total_cmp(&b.side))
            .ok_or_else(|| Error::Precondition("no grids".into()))?;
        for g in grids {
            if g.refinement_ratio(&finest).is_none() {
                return Err(Error::ScaleMismatch(format!(
                    "cube side {} does not refine to {}",
                    g.side, finest.side
                )));
            }
        }
        Ok(finest)
    }
}

/// A union of cubes of a fixed grid, stored as a sorted index set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    grid: CubeGrid,
    cubes: Vec<usize>,
}

impl Region {
    pub fn new(grid: CubeGrid, cubes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = cubes.into_iter().collect();
        if let Some(&bad) = v.iter().find(|&&c| c >= grid.len()) {
            return Err(Error::InvalidLattice(format!("cube {bad} outside grid of {}", grid.len())));
        }
        v.sort_unstable();
        v.dedup();
        Ok(Self { grid, cubes: v })
    }

    pub fn from_coords(grid: CubeGrid, coords: &[[i64; 3]]) -> Self {
        let mut v: Vec<usize> = coords.iter().map(|&c| grid.index(c)).collect();
        v.sort_unstable();
        v.dedup();
        Self { grid, cubes: v }
    }

    pub(crate) fn from_sorted(grid: CubeGrid, cubes: Vec<usize>) -> Self {
        debug_assert!(cubes.windows(2).all(|w| w[0] < w[1]));
        Self { grid, cubes }
    }

    fn from_mask(grid: CubeGrid, mask: &[bool]) -> Self {
        let cubes = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Self { grid, cubes }
    }

    pub fn empty(grid: CubeGrid) -> Self {
        Self { grid, cubes: Vec::new() }
    }

    pub fn full(grid: CubeGrid) -> Self {
        Self { grid, cubes: (0..grid.len()).collect() }
    }

    pub fn grid(&self) -> &CubeGrid {
        &self.grid
    }

    pub fn cubes(&self) -> &[usize] {
        &self.cubes
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.cubes.len() == self.grid.len()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.cubes.binary_search(&c).is_ok()
    }

    fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.grid.len()];
        for &c in &self.cubes {
            m[c] = true;
        }
        m
    }

    fn check_grid(&self, other: &Region) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::ScaleMismatch(format!(
                "grids {:?}/{} and {:?}/{}",
                self.grid.dims, self.grid.side, other.grid.dims, other.grid.side
            )));
        }
        Ok(())
    }

    pub fn complement(&self) -> Region {
        let m = self.mask();
        let inv: Vec<bool> = m.into_iter().map(|b| !b).collect();
        Self::from_mask(self.grid, &inv)
    }

    pub fn union(&self, other: &Region) -> Result<Region> {
        self.check_grid(other)?;
        let mut v: Vec<usize> = self.cubes.iter().chain(&other.cubes).copied().collect();
        v.sort_unstable();
        v.dedup();
        Ok(Self::from_sorted(self.grid, v))
    }

    pub fn intersection(&self, other: &Region) -> Result<Region> {
        self.check_grid(other)?;
        let v = self.cubes.iter().copied().filter(|c| other.contains(*c)).collect();
        Ok(Self::from_sorted(self.grid, v))
    }

    pub fn difference(&self, other: &Region) -> Result<Region> {
        self.check_grid(other)?;
        let v = self.cubes.iter().copied().filter(|c| !other.contains(*c)).collect();
        Ok(Self::from_sorted(self.grid, v))
    }

    pub fn is_subset(&self, other: &Region) -> Result<bool> {
        self.check_grid(other)?;
        Ok(self.cubes.iter().all(|c| other.contains(*c)))
    }

    pub fn is_disjoint(&self, other: &Region) -> Result<bool> {
        self.check_grid(other)?;
        Ok(self.cubes.iter().all(|c| !other.contains(*c)))
    }

    /// `X^{~n}`: `X` together with `n` layers of touching cubes.
    pub fn enlarge(&self, n: usize) -> Region {
        let mut mask = self.mask();
        let mut frontier = self.cubes.clone();
        for _ in 0..n {
            let mut next = Vec::new();
            for &c in &frontier {
                for q in self.grid.neighbors(c) {
                    if !mask[q] {
                        mask[q] = true;
                        next.push(q);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Self::from_mask(self.grid, &mask)
    }

    /// `X^{n\natural} = ((X^c)^{~n})^c`.
    pub fn shrink(&self, n: usize) -> Region {
        self.complement().enlarge(n).complement()
    }

    /// Connected components under corner adjacency.
    pub fn components(&self) -> Vec<Region> {
        let mask = self.mask();
        let mut seen = vec![false; self.grid.len()];
        let mut out = Vec::new();
        for &start in &self.cubes {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(c) = queue.pop_front() {
                for q in self.grid.neighbors(c) {
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        comp.push(q);
                        queue.push_back(q);
                    }
                }
            }
            comp.sort_unstable();
            out.push(Self::from_sorted(self.grid, comp));
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        !self.is_empty() && self.components().len() == 1
    }

    /// Chebyshev layer count to the nearest cube of `other`; `None` if either is empty.
    fn layer_distance(&self, other: &Region) -> Option<i64> {
        if self.is_empty() || other.is_empty() {
            return None;
        }
        let target = other.mask();
        let mut dist = vec![-1i64; self.grid.len()];
        let mut queue = VecDeque::new();
        for &c in &self.cubes {
            if target[c] {
                return Some(0);
            }
            dist[c] = 0;
            queue.push_back(c);
        }
        while let Some(c) = queue.pop_front() {
            for q in self.grid.neighbors(c) {
                if dist[q] < 0 {
                    dist[q] = dist[c] + 1;
                    if target[q] {
                        return Some(dist[q]);
                    }
                    queue.push_back(q);
                }
            }
        }
        None
    }

    /// Sup-norm gap between the closed cube unions; `+inf` if either is empty.
    pub fn distance(&self, other: &Region) -> Result<f64> {
        self.check_grid(other)?;
        Ok(match self.layer_distance(other) {
            None => f64::INFINITY,
            Some(t) => self.grid.side * (t - 1).max(0) as f64,
        })
    }

    /// Distance between regions on nested grids of the same torus.
    pub fn physical_distance(&self, other: &Region) -> Result<f64> {
        let g = CubeGrid::common_refinement(&[self.grid, other.grid])?;
        self.to_grid(&g)?.distance(&other.to_grid(&g)?)
    }

    /// Each cube split into `f^3` subcubes.
    pub fn refine(&self, f: usize) -> Result<Region> {
        if f == 0 {
            return Err(Error::ScaleMismatch("refinement factor 0".into()));
        }
        let g = CubeGrid::new(self.grid.dims.map(|n| n * f), self.grid.side / f as f64)?;
        let mut v = Vec::with_capacity(self.cubes.len() * f * f * f);
        for &c in &self.cubes {
            let p = self.grid.coords(c);
            let f = f as i64;
            for a in 0..f {
                for b in 0..f {
                    for d in 0..f {
                        v.push(g.index([p[0] * f + d, p[1] * f + b, p[2] * f + a]));
                    }
                }
            }
        }
        v.sort_unstable();
        Ok(Self::from_sorted(g, v))
    }

    /// Re-express on a finer nested grid.
    pub fn to_grid(&self, target: &CubeGrid) -> Result<Region> {
        if *target == self.grid {
            return Ok(self.clone());
        }
        let r = self
            .grid
            .refinement_ratio(target)
            .ok_or_else(|| Error::ScaleMismatch(format!("side {} to {}", self.grid.side, target.side)))?;
        let mut out = self.refine(r)?;
        out.grid = *target;
        Ok(out)
    }

    /// Coarse grid with side `f * side`, requiring divisibility.
    pub fn coarse_grid(&self, f: usize) -> Result<CubeGrid> {
        if f == 0 || self.grid.dims.iter().any(|&n| n % f != 0) {
            return Err(Error::ScaleMismatch(format!("{:?} not divisible by {f}", self.grid.dims)));
        }
        CubeGrid::new(self.grid.dims.map(|n| n / f), self.grid.side * f as f64)
    }

    /// `\bar X`: union of coarse cubes of side `f * side` meeting `X`.
    pub fn coarse_closure(&self, f: usize) -> Result<Region> {
        let g = self.coarse_grid(f)?;
        let f = f as i64;
        let mut v: Vec<usize> =
            self.cubes.iter().map(|&c| self.grid.coords(c)).map(|p| g.index(p.map(|x| x / f))).collect();
        v.sort_unstable();
        v.dedup();
        Ok(Self::from_sorted(g, v))
    }

    /// Union of coarse cubes of side `f * side` contained in `X`.
    pub fn coarse_interior(&self, f: usize) -> Result<Region> {
        let g = self.coarse_grid(f)?;
        let full = Region::full(g);
        let v = full
            .cubes
            .into_iter()
            .filter(|&y| {
                let r = Region::from_sorted(g, vec![y]).refine(f).expect("f > 0");
                r.cubes.iter().all(|c| self.contains(*c))
            })
            .collect();
        Ok(Self::from_sorted(g, v))
    }

    fn site_ratio(&self, lat: &Lattice) -> Result<usize> {
        let r = self.grid.side / lat.spacing();
        let ri = r.round();
        let matches = (0..3).all(|i| (self.grid.extent()[i] - lat.physical_extent()[i]).abs() <= 1e-9);
        if !matches || ri < 1.0 || (r - ri).abs() > 1e-9 * r {
            return Err(Error::ScaleMismatch(format!(
                "cube side {} over lattice spacing {}",
                self.grid.side,
                lat.spacing()
            )));
        }
        Ok(ri as usize)
    }

    /// Sites of `lat` lying in the region.
    pub fn site_mask(&self, lat: &Lattice) -> Result<Vec<bool>> {
        let r = self.site_ratio(lat)?;
        let mask = self.mask();
        Ok((0..lat.n_sites())
            .map(|s| {
                let c = lat.coords(s).map(|v| (v / r) as i64);
                mask[self.grid.index(c)]
            })
            .collect())
    }

    /// Bonds (or plaquettes) of `lat` whose base site lies in the region.
    pub fn cell_mask(&self, lat: &Lattice) -> Result<Vec<bool>> {
        let s = self.site_mask(lat)?;
        Ok((0..3 * lat.n_sites()).map(|b| s[b / 3]).collect())
    }
}

/// `delta Omega_j = Omega_j - Omega_{j+1}` with `delta Omega_k = Omega_k`.
///
/// Results live on the common refinement of all inputs.
pub fn annuli(omegas: &[Region]) -> Result<Vec<Region>> {
    if omegas.is_empty() {
        return Ok(Vec::new());
    }
    let grids: Vec<CubeGrid> = omegas.iter().map(|r| *r.grid()).collect();
    let g = CubeGrid::common_refinement(&grids)?;
    let fine: Vec<Region> = omegas.iter().map(|r| r.to_grid(&g)).collect::<Result<_>>()?;
    for (j, w) in fine.windows(2).enumerate() {
        if !w[1].is_subset(&w[0])? {
            return Err(Error::NotNested(format!("Omega_{} not inside Omega_{}", j + 2, j + 1)));
        }
    }
    let mut out = Vec::with_capacity(fine.len());
    for j in 0..fine.len() {
        if j + 1 < fine.len() {
            out.push(fine[j].difference(&fine[j + 1])?);
        } else {
            out.push(fine[j].clone());
        }
    }
    Ok(out)
}

/// One level of a history for the separation test.
#[derive(Clone, Debug)]
pub struct SeparationLevel {
    pub omega: Region,
    pub lambda: Region,
    /// Required gap, `5 L^{-(k-j)} M r_j` in the usual parametrization.
    pub threshold: f64,
}

/// `d(Lambda_{j-1}^c, Omega_j) >= t_j` and `d(Omega_j^c, Lambda_j) >= t_j` for all `j`,
/// with `Lambda_0` the full torus.
pub fn check_separation(levels: &[SeparationLevel]) -> Result<bool> {
    let tol = 1e-12;
    for (j, lev) in levels.iter().enumerate() {
        let prev_lambda_c = match j {
            0 => Region::empty(*lev.omega.grid()),
            _ => levels[j - 1].lambda.complement(),
        };
        let d1 = prev_lambda_c.physical_distance(&lev.omega)?;
        let d2 = lev.omega.complement().physical_distance(&lev.lambda)?;
        if d1 < lev.threshold * (1.0 - tol) || d2 < lev.threshold * (1.0 - tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize) -> CubeGrid {
        CubeGrid::cubic(n, 1.0).unwrap()
    }

    #[test]
    fn enlarge_trivial_cases() {
        let grid = g(5);
        assert!(Region::empty(grid).enlarge(1).is_empty());
        assert!(Region::full(grid).enlarge(1).is_full());
        let one = Region::new(grid, [grid.index([2, 2, 2])]).unwrap();
        assert_eq!(one.enlarge(1).len(), 27);
    }

    #[test]
    fn shrink_trivial_cases() {
        let grid = g(4);
        assert!(Region::full(grid).shrink(1).is_full());
        assert!(Region::new(grid, [3]).unwrap().shrink(1).is_empty());
    }

    #[test]
    fn annuli_cases() {
        let grid = g(3);
        let om = Region::new(grid, [0, 1, 2]).unwrap();
        let a = annuli(&[om.clone(), om.clone()]).unwrap();
        assert!(a[0].is_empty());
        assert_eq!(a[1], om);
        let f = Region::full(grid);
        let a = annuli(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert!(a[0].is_empty() && a[1].is_empty() && a[2].is_full());
        assert!(matches!(annuli(&[om.clone(), f]), Err(Error::NotNested(_))));
    }

    #[test]
    fn distance_counts_gap_layers() {
        let grid = g(10);
        let a = Region::from_coords(grid, &[[0, 0, 0]]);
        let b = Region::from_coords(grid, &[[3, 1, 0]]);
        assert_eq!(a.distance(&b).unwrap(), 2.0);
        let c = Region::from_coords(grid, &[[1, 1, 1]]);
        assert_eq!(a.distance(&c).unwrap(), 0.0);
        let far = Region::from_coords(grid, &[[9, 0, 0]]);
        assert_eq!(a.distance(&far).unwrap(), 0.0);
    }

    #[test]
    fn separation_examples() {
        let grid = g(12);
        let full = Region::full(grid);
        let lv = SeparationLevel { omega: full.clone(), lambda: full.clone(), threshold: 5.0 };
        assert!(check_separation(&[lv.clone(), lv]).unwrap());

        let lambda = Region::from_coords(grid, &[[5, 5, 5]]).enlarge(2);
        let omega = Region::from_coords(grid, &[[5, 5, 5]]);
        let lv = vec![
            SeparationLevel { omega: full.clone(), lambda, threshold: 5.0 },
            SeparationLevel { omega, lambda: Region::empty(grid), threshold: 5.0 },
        ];
        assert!(!check_separation(&lv).unwrap());
    }

    #[test]
    fn cross_scale_distance() {
        let coarse = CubeGrid::cubic(4, 2.0).unwrap();
        let fine = CubeGrid::cubic(8, 1.0).unwrap();
        let a = Region::from_coords(coarse, &[[0, 0, 0]]);
        let b = Region::from_coords(fine, &[[4, 0, 0]]);
        assert_eq!(a.physical_distance(&b).unwrap(), 2.0);
        let odd = CubeGrid::cubic(5, 1.6).unwrap();
        assert!(Region::full(odd).physical_distance(&b).is_err());
    }

    #[test]
    fn closure_and_interior() {
        let fine = g(4);
        let r = Region::from_coords(fine, &[[0, 0, 0], [1, 1, 1], [2, 0, 0]]);
        let c = r.coarse_closure(2).unwrap();
        assert_eq!(c.len(), 2);
        assert!(r.coarse_interior(2).unwrap().is_empty());
        let block = Region::from_coords(c.grid().to_owned(), &[[1, 1, 1]]).refine(2).unwrap();
        assert_eq!(block.coarse_interior(2).unwrap().len(), 1);
    }

    #[test]
    fn site_mask_on_finer_lattice() {
        let grid = CubeGrid::cubic(2, 1.0).unwrap();
        let lat = Lattice::cubic(4, 0.5).unwrap();
        let r = Region::from_coords(grid, &[[0, 0, 0]]);
        let m = r.site_mask(&lat).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 8);
        assert!(m[lat.index([1, 1, 1])]);
        assert!(!m[lat.index([2, 0, 0])]);
    }
}
