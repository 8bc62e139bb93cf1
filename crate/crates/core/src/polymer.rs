//! Polymer activities, Mayer and cluster expansions, boundary splitting,
//! reblocking and rescaling.
//!
//! Two polymers are incompatible when their union is connected, that is when
//! they share or touch a cube. The polymer gas sums over families of pairwise
//! compatible polymers, which is the decomposition of a set into its
//! connected components.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grassmann::GrassmannElement;
use crate::lattice::{tree_distance, CubeGrid, Region, SteinerCache};

/// Values carried by polymer activities.
pub trait ActivityValue: Clone + std::fmt::Debug {
    fn zero_like(&self) -> Self;
    fn one_like(&self) -> Self;
    fn add(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn scale(&self, s: f64) -> Self;
    fn norm(&self) -> f64;
    fn exp_m1(&self) -> Result<Self>;
    /// Multiplies degree-`n` parts by `factor^n`.
    fn rescale_fields(&self, factor: f64) -> Self;
}

impl ActivityValue for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn one_like(&self) -> Self {
        1.0
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
    fn exp_m1(&self) -> Result<Self> {
        Ok(f64::exp_m1(*self))
    }
    fn rescale_fields(&self, _factor: f64) -> Self {
        *self
    }
}

impl ActivityValue for GrassmannElement {
    fn zero_like(&self) -> Self {
        GrassmannElement::zero(self.n_gen)
    }
    fn one_like(&self) -> Self {
        GrassmannElement::one(self.n_gen)
    }
    fn add(&self, other: &Self) -> Self {
        GrassmannElement::add(self, other)
    }
    fn mul(&self, other: &Self) -> Self {
        GrassmannElement::mul(self, other)
    }
    fn scale(&self, s: f64) -> Self {
        GrassmannElement::scale(self, Complex64::new(s, 0.0))
    }
    fn norm(&self) -> f64 {
        self.norm_h(1.0)
    }
    fn exp_m1(&self) -> Result<Self> {
        Ok(self.exp()?.sub(&self.one_like()))
    }
    fn rescale_fields(&self, factor: f64) -> Self {
        let mut out = GrassmannElement::zero(self.n_gen);
        for (idx, c) in self.terms() {
            out = out.add(&GrassmannElement::monomial(self.n_gen, &idx, c * factor.powi(idx.len() as i32)));
        }
        out
    }
}

/// `X -> value` on connected unions of cubes of a grid.
#[derive(Clone, Debug)]
pub struct Activity<V> {
    grid: CubeGrid,
    map: BTreeMap<Vec<usize>, V>,
}

impl<V: ActivityValue> Activity<V> {
    pub fn new(grid: CubeGrid) -> Self {
        Self { grid, map: BTreeMap::new() }
    }

    pub fn grid(&self) -> &CubeGrid {
        &self.grid
    }

    /// Inserts (replacing) the value on a connected polymer.
    pub fn insert(&mut self, cubes: Vec<usize>, v: V) -> Result<()> {
        let r = Region::new(self.grid, cubes)?;
        if r.is_empty() || !r.is_connected() {
            return Err(Error::Precondition(format!("polymer {:?} is not connected", r.cubes())));
        }
        self.map.insert(r.cubes().to_vec(), v);
        Ok(())
    }

    pub fn get(&self, cubes: &[usize]) -> Option<&V> {
        self.map.get(cubes)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<usize>, &V)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `sum_X E(X)`; `None` when empty.
    pub fn total(&self) -> Option<V> {
        let mut it = self.map.values();
        let first = it.next()?.clone();
        Some(it.fold(first, |acc, v| acc.add(v)))
    }

    /// `(cube list, value)` records.
    pub fn dump(&self) -> Vec<(Vec<usize>, V)> {
        self.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

fn touching(grid: &CubeGrid, a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|&x| b.iter().any(|&y| grid.chebyshev(x, y) <= 1))
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Incompatibility graph of the given polymers.
pub fn incompatibility(grid: &CubeGrid, polys: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let n = polys.len();
    let mut g = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            g[i][j] = i != j && touching(grid, &polys[i], &polys[j]);
        }
    }
    g
}

/// `K(X) = sum_{distinct families, union X} prod (e^{V(X_i)} - 1)` over all
/// nonempty unions `X`.
pub fn mayer_expand<V: ActivityValue>(v: &Activity<V>, max_support: usize) -> Result<BTreeMap<Vec<usize>, V>> {
    let polys: Vec<(&Vec<usize>, V)> =
        v.iter().map(|(k, x)| Ok((k, x.exp_m1()?))).collect::<Result<_>>()?;
    let n = polys.len();
    if n > max_support.min(24) {
        return Err(Error::EnumerationOverflow { what: "Mayer support".into(), limit: max_support.min(24) });
    }
    let mut out: BTreeMap<Vec<usize>, V> = BTreeMap::new();
    for mask in 1u32..(1u32 << n) {
        let mut key: Vec<usize> = Vec::new();
        let mut val: Option<V> = None;
        for (i, (k, f)) in polys.iter().enumerate() {
            if mask >> i & 1 == 1 {
                key = union(&key, k);
                val = Some(match val {
                    None => f.clone(),
                    Some(x) => x.mul(f),
                });
            }
        }
        let val = val.expect("nonempty mask");
        match out.get_mut(&key) {
            Some(x) => *x = x.add(&val),
            None => {
                out.insert(key, val);
            }
        }
    }
    Ok(out)
}

/// Connected components of a set of cubes.
pub fn components(grid: &CubeGrid, cubes: &[usize]) -> Result<Vec<Vec<usize>>> {
    Ok(Region::new(*grid, cubes.iter().copied())?.components().into_iter().map(|r| r.cubes().to_vec()).collect())
}

/// Ursell coefficient: sum over connected spanning subgraphs `G` of `g` of
/// `(-1)^{|E(G)|}`; zero when `g` is disconnected.
pub fn ursell(g: &[Vec<bool>]) -> f64 {
    let n = g.len();
    if n == 0 {
        return 0.0;
    }
    assert!(n <= 16, "ursell graph too large");
    let full = (1usize << n) - 1;
    // f(S) = sum over all spanning subgraphs of g[S] = [S independent].
    let indep = |s: usize| -> bool {
        (0..n).all(|i| s >> i & 1 == 0 || (i + 1..n).all(|j| s >> j & 1 == 0 || !g[i][j]))
    };
    let mut c = vec![0.0f64; full + 1];
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let mut v = if indep(s) { 1.0 } else { 0.0 };
        let rest = s & !low;
        // Proper subsets T of S containing the lowest element.
        let mut sub = rest;
        loop {
            let t = sub | low;
            if t != s {
                let comp = s & !t;
                v -= c[t] * if indep(comp) { 1.0 } else { 0.0 };
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        c[s] = v;
    }
    c[full]
}

/// Options for [`cluster_log`].
#[derive(Clone, Copy, Debug)]
pub struct ClusterOptions {
    pub n_max: usize,
    /// Cap on enumerated multisets.
    pub max_terms: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self { n_max: 8, max_terms: 2_000_000 }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterLog<V> {
    pub v: Activity<V>,
    /// `sum |term|` per order `n = 1..=n_max`.
    pub order_norms: Vec<f64>,
    /// Geometric estimate of the neglected orders.
    pub tail: f64,
}

/// Connected vertex subsets of `g` with at most `cap` vertices.
fn connected_subsets(g: &[Vec<bool>], cap: usize) -> Vec<Vec<usize>> {
    fn extend(
        g: &[Vec<bool>],
        sub: &mut Vec<usize>,
        ext: Vec<usize>,
        v: usize,
        cap: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        out.push(sub.clone());
        if sub.len() == cap {
            return;
        }
        let mut ext = ext;
        while let Some(w) = ext.pop() {
            let mut next = ext.clone();
            for u in (v + 1)..g.len() {
                if g[w][u]
                    && !sub.contains(&u)
                    && u != w
                    && !next.contains(&u)
                    && !sub.iter().any(|&s| g[s][u])
                {
                    next.push(u);
                }
            }
            sub.push(w);
            extend(g, sub, next, v, cap, out);
            sub.pop();
        }
    }
    let mut out = Vec::new();
    for v in 0..g.len() {
        let ext: Vec<usize> = ((v + 1)..g.len()).filter(|&u| g[v][u]).collect();
        extend(g, &mut vec![v], ext, v, cap, &mut out);
    }
    out
}

fn multiplicities(k: usize, total_max: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == k {
            out.push(cur.clone());
            return;
        }
        let reserve = k - i - 1;
        for m in 1..=(left - reserve) {
            cur.push(m);
            rec(i + 1, k, left - m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= total_max {
        rec(0, k, total_max, &mut Vec::new(), &mut out);
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|x| x as f64).product()
}

/// `V#(X) = sum_n 1/n! sum_{(X_1..X_n), union X} rho^T(X_1..X_n) prod H(X_i)`,
/// truncated at `n_max`.
pub fn cluster_log<V: ActivityValue>(h: &Activity<V>, opts: ClusterOptions) -> Result<ClusterLog<V>> {
    let polys: Vec<(Vec<usize>, V)> = h.dump();
    let keys: Vec<Vec<usize>> = polys.iter().map(|p| p.0.clone()).collect();
    let g = incompatibility(h.grid(), &keys);
    let mut out: BTreeMap<Vec<usize>, V> = BTreeMap::new();
    let mut order_norms = vec![0.0; opts.n_max];
    let mut count = 0usize;
    for set in connected_subsets(&g, opts.n_max) {
        let mut sorted = set.clone();
        sorted.sort_unstable();
        let key = sorted.iter().fold(Vec::new(), |acc, &i| union(&acc, &keys[i]));
        for mult in multiplicities(sorted.len(), opts.n_max) {
            count += 1;
            if count > opts.max_terms {
                return Err(Error::EnumerationOverflow { what: "cluster terms".into(), limit: opts.max_terms });
            }
            let mut verts = Vec::new();
            for (i, &m) in sorted.iter().zip(&mult) {
                verts.extend(std::iter::repeat_n(*i, m));
            }
            let n = verts.len();
            let mg: Vec<Vec<bool>> =
                (0..n).map(|a| (0..n).map(|b| a != b && (verts[a] == verts[b] || g[verts[a]][verts[b]])).collect()).collect();
            let rho = ursell(&mg);
            if rho == 0.0 {
                continue;
            }
            let weight = rho / mult.iter().map(|&m| factorial(m)).product::<f64>();
            let mut val = polys[verts[0]].1.clone();
            for &vtx in &verts[1..] {
                val = val.mul(&polys[vtx].1);
            }
            let term = val.scale(weight);
            order_norms[n - 1] += term.norm();
            match out.get_mut(&key) {
                Some(x) => *x = x.add(&term),
                None => {
                    out.insert(key.clone(), term);
                }
            }
        }
    }
    let nz: Vec<f64> = order_norms.iter().copied().filter(|&x| x > 0.0).collect();
    if nz.len() >= 4 && nz.windows(2).rev().take(3).all(|w| w[1] > w[0]) {
        return Err(Error::Divergence(order_norms));
    }
    let tail = match (order_norms.len(), order_norms.last()) {
        (n, Some(&last)) if n >= 2 && last > 0.0 => {
            let r = last / order_norms[n - 2];
            if r < 1.0 {
                last * r / (1.0 - r)
            } else {
                f64::INFINITY
            }
        }
        _ => 0.0,
    };
    Ok(ClusterLog { v: Activity { grid: *h.grid(), map: out }, order_norms, tail })
}

/// `sum over families of pairwise compatible distinct polymers of prod H`,
/// including the empty family.
pub fn partition_sum<V: ActivityValue>(h: &Activity<V>, one: &V) -> Result<V> {
    let polys = h.dump();
    if polys.len() > 40 {
        return Err(Error::EnumerationOverflow { what: "partition support".into(), limit: 40 });
    }
    let keys: Vec<Vec<usize>> = polys.iter().map(|p| p.0.clone()).collect();
    let g = incompatibility(h.grid(), &keys);
    fn rec<V: ActivityValue>(i: usize, chosen: &mut Vec<usize>, cur: V, polys: &[(Vec<usize>, V)], g: &[Vec<bool>], acc: &mut V) {
        if i == polys.len() {
            *acc = acc.add(&cur);
            return;
        }
        rec(i + 1, chosen, cur.clone(), polys, g, acc);
        if chosen.iter().all(|&c| !g[c][i]) {
            chosen.push(i);
            rec(i + 1, chosen, cur.mul(&polys[i].1), polys, g, acc);
            chosen.pop();
        }
    }
    let mut acc = one.zero_like();
    rec(0, &mut Vec::new(), one.clone(), &polys, &g, &mut acc);
    Ok(acc)
}

/// `E#` on `X` inside `Lambda` and boundary terms `B# = V#_1 - V#_0`.
#[derive(Clone, Debug)]
pub struct BoundarySplit<V> {
    pub interior: Activity<V>,
    pub boundary: Activity<V>,
    pub full: Activity<V>,
}

/// `V#_1` from all of `h`, `V#_0` from the polymers inside `lambda`.
pub fn boundary_split<V: ActivityValue>(h: &Activity<V>, lambda: &Region, opts: ClusterOptions) -> Result<BoundarySplit<V>> {
    if lambda.grid() != h.grid() {
        return Err(Error::ScaleMismatch("region and activity grids differ".into()));
    }
    let mut inner = Activity::new(*h.grid());
    for (k, v) in h.iter() {
        if k.iter().all(|&c| lambda.contains(c)) {
            inner.map.insert(k.clone(), v.clone());
        }
    }
    let full = cluster_log(h, opts)?.v;
    let interior = cluster_log(&inner, opts)?.v;
    let mut boundary = Activity::new(*h.grid());
    for (k, v) in full.iter() {
        let b = match interior.get(k) {
            Some(e) => v.add(&e.scale(-1.0)),
            None => v.clone(),
        };
        boundary.map.insert(k.clone(), b);
    }
    Ok(BoundarySplit { interior, boundary, full })
}

/// `(B E)(Y) = sum_{X : closure(X) = Y} E(X)` over `L`-blocks.
pub fn reblock<V: ActivityValue>(e: &Activity<V>, l: usize) -> Result<Activity<V>> {
    let coarse_grid = Region::empty(*e.grid()).coarse_grid(l)?;
    let mut out: Activity<V> = Activity::new(coarse_grid);
    for (k, v) in e.iter() {
        let y = Region::new(*e.grid(), k.iter().copied())?.coarse_closure(l)?;
        let key = y.cubes().to_vec();
        match out.map.get_mut(&key) {
            Some(x) => *x = x.add(v),
            None => {
                out.map.insert(key, v.clone());
            }
        }
    }
    Ok(out)
}

/// `(L E)(X) = (B E)(L X)`: relabels the `LM` grid as an `M` grid on the
/// coarse torus and rescales fields by `field_factor` per degree.
pub fn rescale<V: ActivityValue>(e: &Activity<V>, l: usize, field_factor: f64) -> Result<Activity<V>> {
    let g = CubeGrid::new(e.grid().dims, e.grid().side / l as f64)?;
    Ok(Activity { grid: g, map: e.map.iter().map(|(k, v)| (k.clone(), v.rescale_fields(field_factor))).collect() })
}

/// Exponential envelope `|E(Y)| <= prefactor * exp(-rate d(Y))`.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct DecayEnvelope {
    pub rate: f64,
    pub prefactor: f64,
    pub shells: usize,
}

/// Fits the shell maxima `max_{d(Y) = d} |E(Y)|` by least squares in `log`,
/// over shells with `d >= d_min`; the prefactor makes the envelope an upper
/// bound on all data.
pub fn decay_envelope<V: ActivityValue>(e: &Activity<V>, d_min: f64, cache: &mut SteinerCache) -> Result<DecayEnvelope> {
    let mut shells: BTreeMap<i64, f64> = BTreeMap::new();
    let mut pts = Vec::new();
    for (k, v) in e.iter() {
        let d = tree_distance(&Region::new(*e.grid(), k.iter().copied())?, Some(cache))?.value;
        let n = v.norm();
        pts.push((d, n));
        let key = (d * 1e6).round() as i64;
        let s = shells.entry(key).or_insert(0.0);
        *s = s.max(n);
    }
    let fit: Vec<(f64, f64)> = shells
        .iter()
        .map(|(&k, &v)| (k as f64 * 1e-6, v))
        .filter(|&(d, v)| d >= d_min - 1e-9 && v > 0.0)
        .map(|(d, v)| (d, v.ln()))
        .collect();
    let rate = if fit.len() >= 2 {
        let n = fit.len() as f64;
        let mx = fit.iter().map(|p| p.0).sum::<f64>() / n;
        let my = fit.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = fit.iter().map(|p| (p.0 - mx).powi(2)).sum();
        -sxy / sxx
    } else {
        f64::INFINITY
    };
    let prefactor = if rate.is_finite() {
        pts.iter().filter(|p| p.0 >= d_min - 1e-9).map(|&(d, n)| n * (rate * d).exp()).fold(0.0, f64::max)
    } else {
        pts.iter().map(|p| p.1).fold(0.0, f64::max)
    };
    Ok(DecayEnvelope { rate, prefactor, shells: fit.len() })
}

/// `E(X) = exp(-kappa d_M(X))` on all polymers of at most `cap` cubes.
pub fn exponential_activity(grid: &CubeGrid, kappa: f64, cap: usize, cache: &mut SteinerCache) -> Result<Activity<f64>> {
    let polys = crate::lattice::enumerate_polymers(grid, cap, cache)?;
    let mut a = Activity::new(*grid);
    for (k, d) in polys {
        a.map.insert(k, (-kappa * d.value).exp());
    }
    Ok(a)
}

/// Smallest `kappa_0` (to 1e-3) with `sum_{X > cube} exp(-kappa_0 d_M(X)) <= bound`.
pub fn kappa0(grid: &CubeGrid, bound: f64, cap: usize, cache: &mut SteinerCache) -> Result<f64> {
    let polys = crate::lattice::enumerate_polymers_containing(grid, 0, cap, cache)?;
    let sum = |k: f64| polys.iter().map(|(_, d)| (-k * d.value).exp()).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while sum(hi) > bound {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Precondition(format!("no kappa_0 for bound {bound}")));
        }
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if sum(mid) > bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Outcome of reblocking `E(X) = exp(-kappa d_M(X))` by `L`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ReblockDecay {
    pub kappa: f64,
    pub kappa0: f64,
    pub l: usize,
    pub envelope: DecayEnvelope,
    /// `L (kappa - kappa0 - 1)`.
    pub required_rate: f64,
    pub sum_rel_err: f64,
    pub polymers: usize,
}

impl ReblockDecay {
    pub fn rate_ok(&self) -> bool {
        self.envelope.rate >= self.required_rate
    }
}

/// Reblocks the exponential activity on `grid` and fits the decay of the
/// result in `d_LM` over shells `d_LM >= 1`; `kappa0` is the smallest rate
/// whose single-cube polymer sum is at most 2.
pub fn reblock_decay(grid: &CubeGrid, kappa: f64, l: usize, cap: usize) -> Result<ReblockDecay> {
    let mut cache = SteinerCache::default();
    let e = exponential_activity(grid, kappa, cap, &mut cache)?;
    let b = reblock(&e, l)?;
    let (s0, s1) = (e.total().unwrap_or(0.0), b.total().unwrap_or(0.0));
    let kappa0 = kappa0(grid, 2.0, cap, &mut cache)?;
    let envelope = decay_envelope(&b, 1.0, &mut cache)?;
    Ok(ReblockDecay {
        kappa,
        kappa0,
        l,
        envelope,
        required_rate: l as f64 * (kappa - kappa0 - 1.0),
        sum_rel_err: (s0 - s1).abs() / s0.abs().max(f64::MIN_POSITIVE),
        polymers: e.len(),
    })
}
