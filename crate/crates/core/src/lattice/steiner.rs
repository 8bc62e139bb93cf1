use std::collections::{HashMap, HashSet, VecDeque};

use super::region::{CubeGrid, Region};
use crate::error::{Error, Result};

/// Largest polymer for which the Steiner length is computed exactly.
pub const MAX_EXACT_STEINER: usize = 8;

/// Upper limit on stored animals before enumeration gives up.
const ANIMAL_LIMIT: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeDistance {
    /// Tree length in units of the cube side.
    pub value: f64,
    /// False when the value is only the spanning-tree upper bound.
    pub exact: bool,
}

/// A corner-connected set of integer points, translated so that its
/// lexicographically smallest point is the origin.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Animal {
    pub points: Vec<[i64; 3]>,
}

impl Animal {
    fn normalized(mut pts: Vec<[i64; 3]>) -> Self {
        pts.sort_unstable();
        let o = pts[0];
        for p in &mut pts {
            *p = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        }
        Animal { points: pts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Representative under the 48 lattice symmetries and translations.
    pub fn symmetry_key(&self) -> Vec<[i64; 3]> {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut best: Option<Vec<[i64; 3]>> = None;
        for perm in PERMS {
            for signs in 0..8u8 {
                let s = [0, 1, 2].map(|i| if signs >> i & 1 == 1 { -1 } else { 1 });
                let pts = self.points.iter().map(|p| [0, 1, 2].map(|i| s[i] * p[perm[i]])).collect();
                let cand = Animal::normalized(pts).points;
                if best.as_ref().is_none_or(|b| cand < *b) {
                    best = Some(cand);
                }
            }
        }
        best.unwrap_or_default()
    }
}

/// All animals with at most `cap` points, grouped by size (index `n - 1`).
pub fn enumerate_animals(cap: usize) -> Result<Vec<Vec<Animal>>> {
    if cap == 0 {
        return Ok(Vec::new());
    }
    let mut levels: Vec<Vec<Animal>> = vec![vec![Animal { points: vec![[0, 0, 0]] }]];
    let mut total = 1usize;
    for _ in 1..cap {
        let prev = levels.last().expect("nonempty");
        let mut next: HashSet<Animal> = HashSet::new();
        for a in prev {
            let set: HashSet<[i64; 3]> = a.points.iter().copied().collect();
            for p in &a.points {
                for d in NEIGHBOR_OFFSETS {
                    let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                    if set.contains(&q) {
                        continue;
                    }
                    let mut pts = a.points.clone();
                    pts.push(q);
                    next.insert(Animal::normalized(pts));
                }
            }
            if total + next.len() > ANIMAL_LIMIT {
                return Err(Error::EnumerationOverflow { what: format!("animals up to size {cap}"), limit: ANIMAL_LIMIT });
            }
        }
        total += next.len();
        let mut v: Vec<Animal> = next.into_iter().collect();
        v.sort_unstable();
        levels.push(v);
    }
    Ok(levels)
}

const NEIGHBOR_OFFSETS: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut i = 0;
    while i < 27 {
        let d = [(i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1];
        if !(d[0] == 0 && d[1] == 0 && d[2] == 0) {
            out[n] = d;
            n += 1;
        }
        i += 1;
    }
    out
};

/// Places an animal on the torus; `None` if two points collide.
fn place(grid: &CubeGrid, a: &Animal, shift: [i64; 3]) -> Option<Vec<usize>> {
    let mut v: Vec<usize> =
        a.points.iter().map(|p| grid.index([p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])).collect();
    v.sort_unstable();
    let n = v.len();
    v.dedup();
    (v.len() == n).then_some(v)
}

/// Every polymer (connected cube set) of at most `cap` cubes, each exactly once,
/// paired with the animal realizing its shortest lift.
pub fn enumerate_polymers(
    grid: &CubeGrid,
    cap: usize,
    cache: &mut SteinerCache,
) -> Result<Vec<(Vec<usize>, TreeDistance)>> {
    let animals = enumerate_animals(cap)?;
    let mut seen: HashMap<Vec<usize>, TreeDistance> = HashMap::new();
    for level in &animals {
        for a in level {
            let d = cache.animal_distance(a);
            for base in 0..grid.len() {
                if let Some(x) = place(grid, a, grid.coords(base)) {
                    merge_min(&mut seen, x, d);
                }
            }
        }
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_unstable_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Polymers of at most `cap` cubes containing `cube`.
pub fn enumerate_polymers_containing(
    grid: &CubeGrid,
    cube: usize,
    cap: usize,
    cache: &mut SteinerCache,
) -> Result<Vec<(Vec<usize>, TreeDistance)>> {
    let animals = enumerate_animals(cap)?;
    let c = grid.coords(cube);
    let mut seen: HashMap<Vec<usize>, TreeDistance> = HashMap::new();
    for level in &animals {
        for a in level {
            let d = cache.animal_distance(a);
            for p in &a.points {
                if let Some(x) = place(grid, a, [c[0] - p[0], c[1] - p[1], c[2] - p[2]]) {
                    merge_min(&mut seen, x, d);
                }
            }
        }
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_unstable_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

fn merge_min(seen: &mut HashMap<Vec<usize>, TreeDistance>, x: Vec<usize>, d: TreeDistance) {
    seen.entry(x)
        .and_modify(|e| {
            if d.value < e.value {
                *e = d;
            }
        })
        .or_insert(d);
}

/// Memoized Steiner lengths keyed by symmetry class.
#[derive(Default, Debug)]
pub struct SteinerCache {
    map: HashMap<Vec<[i64; 3]>, TreeDistance>,
}

impl SteinerCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn animal_distance(&mut self, a: &Animal) -> TreeDistance {
        let key = a.symmetry_key();
        if let Some(d) = self.map.get(&key) {
            return *d;
        }
        let d = steiner_length(&key);
        self.map.insert(key, d);
        d
    }
}

/// Lifts a connected region to integer coordinates along a breadth-first tree.
fn lift(region: &Region) -> Result<Animal> {
    let grid = region.grid();
    let cubes = region.cubes();
    let mut coord: HashMap<usize, [i64; 3]> = HashMap::new();
    let root = cubes[0];
    coord.insert(root, [0, 0, 0]);
    let mut queue = VecDeque::from([root]);
    while let Some(c) = queue.pop_front() {
        let pc = coord[&c];
        for q in grid.neighbors(c) {
            if region.contains(q) && !coord.contains_key(&q) {
                let d = grid.displacement(c, q);
                coord.insert(q, [pc[0] + d[0], pc[1] + d[1], pc[2] + d[2]]);
                queue.push_back(q);
            }
        }
    }
    if coord.len() != cubes.len() {
        return Err(Error::Precondition("polymer is not connected".into()));
    }
    Ok(Animal::normalized(coord.into_values().collect()))
}

/// `d_M(X)`: shortest tree through the cube centers, in cube-side units.
pub fn tree_distance(region: &Region, cache: Option<&mut SteinerCache>) -> Result<TreeDistance> {
    if region.is_empty() {
        return Err(Error::Precondition("empty polymer".into()));
    }
    let a = lift(region)?;
    Ok(match cache {
        Some(c) => c.animal_distance(&a),
        None => steiner_length(&a.points),
    })
}

fn dist(a: [i64; 3], b: [i64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt()
}

fn mst_length(pts: &[[i64; 3]]) -> f64 {
    let n = pts.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let (i, _) = best
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_tree[*i])
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("remaining vertex");
        in_tree[i] = true;
        total += best[i];
        for j in 0..n {
            if !in_tree[j] {
                best[j] = best[j].min(dist(pts[i], pts[j]));
            }
        }
    }
    total
}

/// Dreyfus-Wagner over terminals plus every grid point of the bounding box.
fn steiner_length(pts: &[[i64; 3]]) -> TreeDistance {
    let n = pts.len();
    if n <= 2 {
        let value = if n == 2 { dist(pts[0], pts[1]) } else { 0.0 };
        return TreeDistance { value, exact: true };
    }
    if n > MAX_EXACT_STEINER {
        return TreeDistance { value: mst_length(pts), exact: false };
    }
    let lo = [0, 1, 2].map(|i| pts.iter().map(|p| p[i]).min().unwrap_or(0));
    let hi = [0, 1, 2].map(|i| pts.iter().map(|p| p[i]).max().unwrap_or(0));
    let mut nodes: Vec<[i64; 3]> = pts.to_vec();
    let term: HashSet<[i64; 3]> = pts.iter().copied().collect();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if !term.contains(&[x, y, z]) {
                    nodes.push([x, y, z]);
                }
            }
        }
    }
    let v = nodes.len();
    let d: Vec<f64> = (0..v * v).map(|ij| dist(nodes[ij / v], nodes[ij % v])).collect();

    // Terminals 0..n-1 in subsets; terminal n-1 is the root.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut dp = vec![f64::INFINITY; (full + 1) * v];
    for i in 0..m {
        for u in 0..v {
            dp[(1 << i) * v + u] = d[i * v + u];
        }
    }
    let mut g = vec![f64::INFINITY; v];
    for s in 1..=full {
        if s.count_ones() < 2 {
            continue;
        }
        g.iter_mut().for_each(|x| *x = f64::INFINITY);
        let mut sub = (s - 1) & s;
        while sub > 0 {
            if sub < (s ^ sub) {
                let a = &dp[sub * v..(sub + 1) * v];
                let b = &dp[(s ^ sub) * v..((s ^ sub) + 1) * v];
                for u in 0..v {
                    let c = a[u] + b[u];
                    if c < g[u] {
                        g[u] = c;
                    }
                }
            }
            sub = (sub - 1) & s;
        }
        for w in 0..v {
            let mut best = f64::INFINITY;
            for u in 0..v {
                let c = g[u] + d[u * v + w];
                if c < best {
                    best = c;
                }
            }
            dp[s * v + w] = best;
        }
    }
    TreeDistance { value: dp[full * v + m], exact: true }
}

/// `sum_{X contains cube, |X| <= cap} exp(-kappa d_M(X))`.
pub fn decay_sum(
    grid: &CubeGrid,
    cube: usize,
    kappa: f64,
    kappa0: f64,
    cap: usize,
    cache: &mut SteinerCache,
) -> Result<f64> {
    if kappa < kappa0 {
        return Err(Error::Precondition(format!("kappa {kappa} below kappa0 {kappa0}")));
    }
    let polys = enumerate_polymers_containing(grid, cube, cap, cache)?;
    let mut terms: Vec<f64> = polys.iter().map(|(_, d)| (-kappa * d.value).exp()).collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    Ok(terms.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> CubeGrid {
        CubeGrid::cubic(n, 1.0).unwrap()
    }

    #[test]
    fn small_trees() {
        let g = grid(6);
        let one = Region::from_coords(g, &[[1, 1, 1]]);
        assert_eq!(tree_distance(&one, None).unwrap().value, 0.0);
        let two = Region::from_coords(g, &[[1, 1, 1], [2, 1, 1]]);
        assert_eq!(tree_distance(&two, None).unwrap().value, 1.0);
        let ell = Region::from_coords(g, &[[0, 0, 0], [1, 0, 0], [0, 1, 0]]);
        assert!((tree_distance(&ell, None).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grid_steiner_point_helps() {
        // Plus-shaped terminals: the center is a free grid Steiner point.
        let pts = [[0, 1, 0], [2, 1, 0], [1, 0, 0], [1, 2, 0]];
        assert!((steiner_length(&pts).value - 4.0).abs() < 1e-12);
        assert!(mst_length(&pts) > 4.0);
    }

    #[test]
    fn wrap_lift() {
        let g = grid(5);
        let r = Region::from_coords(g, &[[4, 0, 0], [0, 0, 0]]);
        assert_eq!(tree_distance(&r, None).unwrap().value, 1.0);
    }

    #[test]
    fn animal_counts() {
        let a = enumerate_animals(3).unwrap();
        assert_eq!(a[0].len(), 1);
        assert_eq!(a[1].len(), 13);
    }

    #[test]
    fn polymer_count_pairs() {
        let g = grid(4);
        let mut cache = SteinerCache::new();
        let p = enumerate_polymers(&g, 2, &mut cache).unwrap();
        assert_eq!(p.len(), 64 + 64 * 13);
    }

    #[test]
    fn decay_sum_limits() {
        let g = grid(4);
        let mut cache = SteinerCache::new();
        let big = decay_sum(&g, 0, 200.0, 0.0, 4, &mut cache).unwrap();
        assert!((big - 1.0).abs() < 1e-12);
        let v10 = decay_sum(&g, 0, 10.0, 0.0, 4, &mut cache).unwrap();
        assert!(v10 > 1.0 && v10 <= 2.0);
        let v6 = decay_sum(&g, 0, 6.0, 0.0, 4, &mut cache).unwrap();
        let v8 = decay_sum(&g, 0, 8.0, 0.0, 4, &mut cache).unwrap();
        assert!(v6 >= v8);
        assert!(decay_sum(&g, 0, 1.0, 3.0, 4, &mut cache).is_err());
    }
}
